"""Closed-form diversity bounds and their empirical checks.

Every formula is a pure function of named scalars; ``report`` wraps one in a
``BoundReport`` that can be serialized and recomputed from its inputs.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .ad import ConfigurationError
from .measures import DiscreteMeasure, grid_error, grid_uniform, w1

# semi-discrete checks never build grids larger than this
GRID_ATOM_BUDGET = 4096
COVERING_MASS = 0.5


def unit_ball_volume(d: int) -> float:
    if int(d) != d or d <= 0:
        raise ConfigurationError(f"unit ball volume needs an integer d >= 1, got {d!r}")
    return math.exp(0.5 * d * math.log(math.pi) - math.lgamma(1.0 + 0.5 * d))


def _growth(n: float, d: int) -> float:
    # 1 + (2 V_d n)^(1/d), the covering term shared by several bounds
    return 1.0 + (2.0 * unit_ball_volume(d) * n) ** (1.0 / d)


def hard_lower_bound(L_H: float, n: float, d: int) -> float:
    if L_H <= 0 or n < 1:
        raise ConfigurationError("hard lower bound needs L_H > 0 and n >= 1")
    return 1.0 / (2.0 * L_H * _growth(n, d))


def soft_lower_bound(L_H: float, n: float, d: int, lam: float, q: float, inf_g0_ipm: float) -> float:
    """Hard bound minus the price of approximate invertibility; may be negative."""
    if lam <= 0 or q < 1 or inf_g0_ipm < 0:
        raise ConfigurationError("soft bound needs lam > 0, q >= 1 and a nonnegative infimum")
    return hard_lower_bound(L_H, n, d) - inf_g0_ipm ** (1.0 / q) / (L_H * lam ** (1.0 / q))


def lambda_threshold(n: float, d: int, q: float, inf_g0_ipm: float) -> float:
    if q < 1 or inf_g0_ipm < 0:
        raise ConfigurationError("lambda threshold needs q >= 1 and a nonnegative infimum")
    return 4.0**q * _growth(n, d) ** q * inf_g0_ipm


def inf_g0_proxy(L_star: float, sigma_star: float, d: int, n: float, c_hat: float) -> float:
    """Upper proxy for the best expected IPM reachable inside the zero-penalty class."""
    return c_hat * L_star * math.sqrt(d) * n ** (-1.0 / d) + sigma_star


def _ub_terms(oracle_ipm, penalty_of_oracle, lam, sigma_star, L_star, d, n, c_hat) -> dict:
    return {
        "oracle_ipm": oracle_ipm,
        "lambda_penalty": lam * penalty_of_oracle,
        "misspecification": 4.0 * sigma_star,
        "sampling": c_hat * L_star * math.sqrt(d) * n ** (-1.0 / d),
    }


def ub_value(oracle_ipm, penalty_of_oracle, lam, sigma_star, L_star, d, n, c_hat) -> float:
    t = _ub_terms(oracle_ipm, penalty_of_oracle, lam, sigma_star, L_star, d, n, c_hat)
    return t["oracle_ipm"] + t["lambda_penalty"] + t["misspecification"] + t["sampling"]


FORMULAS = {
    "hard_lb": (hard_lower_bound, "1/(2 L_H (1 + (2 V_d n)^(1/d)))"),
    "soft_lb": (soft_lower_bound, "hard_lb - inf_g0_ipm^(1/q) / (L_H lam^(1/q))"),
    "lambda_threshold": (lambda_threshold, "4^q (1 + (2 V_d n)^(1/d))^q inf_g0_ipm"),
    "inf_g0_proxy": (inf_g0_proxy, "c_hat L_star sqrt(d) n^(-1/d) + sigma_star"),
    "ub_decomposition": (ub_value, "oracle_ipm + lam pen + 4 sigma_star + c_hat L_star sqrt(d) n^(-1/d)"),
}


@dataclass
class BoundReport:
    kind: str
    inputs: dict
    value: float
    formula: str
    flags: dict = field(default_factory=dict)
    terms: dict = field(default_factory=dict)
    derived: dict = field(default_factory=dict)
    notes: str = ""

    def recompute(self) -> float:
        fn = FORMULAS[self.kind][0]
        return fn(**self.inputs)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "BoundReport":
        return cls(**d)


def report(kind: str, notes: str = "", **inputs) -> BoundReport:
    if kind not in FORMULAS:
        raise ConfigurationError(f"unknown bound kind {kind!r}")
    fn, formula = FORMULAS[kind]
    value = fn(**inputs)
    rep = BoundReport(kind, dict(inputs), value, formula, notes=notes)
    if "d" in inputs:
        rep.derived["V_d"] = unit_ball_volume(inputs["d"])
    if kind == "soft_lb":
        rep.flags["vacuous"] = value <= 0
    if kind == "ub_decomposition":
        rep.terms = _ub_terms(**inputs)
    return rep


def ub_decomposition(oracle_ipm, penalty_of_oracle, lam, sigma_star, L_star, d, n, c_hat) -> BoundReport:
    args = dict(oracle_ipm=oracle_ipm, penalty_of_oracle=penalty_of_oracle, lam=lam, sigma_star=sigma_star,
                L_star=L_star, d=d, n=n, c_hat=c_hat)
    if min(oracle_ipm, penalty_of_oracle, lam, sigma_star, L_star, c_hat) < 0:
        raise ConfigurationError("upper bound inputs must be nonnegative")
    return report("ub_decomposition", notes=f"c_hat={c_hat!r} is fitted, not universal", **args)


# -- empirical checks ------------------------------------------------------------


def ga_function(x, A) -> np.ndarray | float:
    """min(1, distance from x to the set A); rows of ``x`` are points."""
    x = np.asarray(x, dtype=np.float64)
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    single = x.ndim == 1
    X = np.atleast_2d(x)
    if A.shape[1] != X.shape[1]:
        A = A.reshape(-1, X.shape[1])
    dist = np.full(X.shape[0], np.inf)
    for a in A:
        dist = np.minimum(dist, np.linalg.norm(X - a, axis=1))
    out = np.minimum(1.0, dist)
    return float(out[0]) if single else out


def default_grid_m(n: int, d: int, budget: int = GRID_ATOM_BUDGET) -> int:
    """ceil(4 sqrt(d) / hard_lb(1, n, d)) so grid error <= bound/8, capped by the atom budget."""
    want = math.ceil(4.0 * math.sqrt(d) / hard_lower_bound(1.0, n, d))
    cap = max(1, int(math.floor(budget ** (1.0 / d) + 1e-9)))
    return min(want, cap)


@dataclass
class GaCheck:
    lhs_estimate: float
    exact_w1: float
    grid_m: int
    grid_error: float
    rhs_bound: float
    margin: float
    passed: bool


def ga_lower_bound_check(A, weights, d: int, mc_samples: int = 100_000, seed=0, grid_m: int | None = None,
                         scale: float = 1.0) -> GaCheck:
    """Checks the distance from U_d to a weighted point set against the hard bound.

    ``margin`` is exact_w1(grid, A) + grid error - rhs; soundness of the check
    comes from W1(U_d, A) >= W1(grid, A) - grid error. ``scale`` multiplies the
    right-hand side (a negative control uses 10).
    """
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    weights = np.asarray(weights, dtype=np.float64)
    if abs(weights.sum() - 1.0) > 1e-12:
        raise ConfigurationError("weights must sum to 1")
    mu = DiscreteMeasure(A, weights)
    n = len(mu)
    m = grid_m or default_grid_m(n, d)
    rng = np.random.default_rng(seed)
    lhs = float(np.mean(ga_function(rng.random((mc_samples, d)), A)))
    exact = w1(grid_uniform(d, m), mu)
    err = grid_error(d, m)
    rhs = scale * hard_lower_bound(1.0, n, d)
    margin = exact + err - rhs
    return GaCheck(lhs, exact, m, err, rhs, margin, margin >= 0)


@dataclass
class CoveringCheck:
    mass: float
    k: int
    k_min: float
    applicable: bool
    holds: bool


def union_mass(centers: np.ndarray, radii: np.ndarray, d: int, mc_samples: int, seed) -> float:
    rng = np.random.default_rng(seed)
    hit = np.zeros(mc_samples, dtype=bool)
    X = rng.random((mc_samples, d))
    for c, r in zip(centers, radii):
        diff = X - c
        hit |= np.einsum("ij,ij->i", diff, diff) <= r * r
    return float(hit.mean())


def covering_count_check(balls, d: int, b: float = 1.0, mc_samples: int = 100_000, seed=0,
                         scale: float = 1.0) -> CoveringCheck:
    """Monte-Carlo union mass of ``balls`` (pairs of center and radius) under U_d.

    If the mass reaches 1/2 the count must be at least eps^-d / (2 b V_d),
    with eps the largest radius; otherwise the check does not apply.
    """
    if not balls:
        raise ConfigurationError("need at least one ball")
    centers = np.array([np.atleast_1d(np.asarray(c, dtype=np.float64)) for c, _ in balls])
    radii = np.array([float(r) for _, r in balls])
    if np.any(radii <= 0) or b < 1:
        raise ConfigurationError("radii must be positive and the density bound at least 1")
    if centers.shape[1] != d:
        raise ConfigurationError("ball centers do not match d")
    mass = union_mass(centers, radii, d, mc_samples, seed)
    eps = float(radii.max())
    k_min = scale * eps ** (-d) / (2.0 * b * unit_ball_volume(d))
    applicable = mass >= COVERING_MASS
    holds = (len(balls) >= k_min) if applicable else True
    return CoveringCheck(mass, len(balls), k_min, applicable, holds)
