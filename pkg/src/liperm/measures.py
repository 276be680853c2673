"""Discrete measures on the unit cube and exact Wasserstein-1 distances."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .ad import ConfigurationError
from .flow import transport
from .seeding import spawn

DEFAULT_PAIR_CAP = 25_000_000
DEFAULT_ATOM_CAP = 1_000_000
WEIGHT_TOL = 1e-12
DEDUP_TOL = 1e-12


class ResourceError(RuntimeError):
    pass


@dataclass
class DiscreteMeasure:
    points: np.ndarray  # (k, D)
    weights: np.ndarray  # (k,)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim == 1:
            pts = pts[:, None]
        w = np.asarray(self.weights, dtype=np.float64).ravel()
        if pts.shape[0] != w.size:
            raise ConfigurationError("points and weights disagree in length")
        if w.size == 0:
            raise ConfigurationError("empty measure")
        if np.any(w < 0):
            raise ConfigurationError("negative weight")
        if abs(w.sum() - 1.0) > WEIGHT_TOL:
            raise ConfigurationError(f"weights sum to {w.sum()!r}, not 1")
        if np.any(pts < 0.0) or np.any(pts > 1.0) or not np.all(np.isfinite(pts)):
            raise ConfigurationError("atoms must lie in the unit cube; clamp explicitly if intended")
        self.points = pts
        self.weights = w

    @classmethod
    def uniform(cls, points) -> "DiscreteMeasure":
        pts = np.asarray(points, dtype=np.float64)
        if pts.ndim == 1:
            pts = pts[:, None]
        return cls(pts, np.full(pts.shape[0], 1.0 / pts.shape[0]))

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def __len__(self):
        return self.weights.size

    def deduplicated(self, tol: float = DEDUP_TOL) -> "DiscreteMeasure":
        """Merge atoms closer than ``tol`` (in sup norm after rounding) and drop zero weights."""
        keep = self.weights > 0
        pts, w = self.points[keep], self.weights[keep]
        key = np.round(pts / tol).astype(np.int64) if tol > 0 else pts
        _, first, inverse = np.unique(key, axis=0, return_index=True, return_inverse=True)
        merged = np.zeros(first.size)
        np.add.at(merged, inverse.ravel(), w)
        order = np.argsort(first)
        return DiscreteMeasure(pts[first[order]], merged[order] / merged.sum())

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["w"] + [f"x{k + 1}" for k in range(self.dim)])
        for w, p in zip(self.weights, self.points):
            writer.writerow([f"{w:.17g}"] + [f"{v:.17g}" for v in p])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_csv(cls, path) -> "DiscreteMeasure":
        return cls.parse_csv(Path(path).read_text())

    @classmethod
    def parse_csv(cls, text: str) -> "DiscreteMeasure":
        rows = list(csv.reader(io.StringIO(text)))
        header, body = rows[0], rows[1:]
        if header[0] != "w" or header[1:] != [f"x{k + 1}" for k in range(len(header) - 1)]:
            raise ConfigurationError(f"unexpected measure header {header}")
        data = np.array([[float(v) for v in r] for r in body if r], dtype=np.float64)
        return cls(data[:, 1:], data[:, 0])


@dataclass
class TransportPlan:
    flows: list[tuple[int, int, float]]
    cost: float

    def matrix(self, n: int, m: int) -> np.ndarray:
        P = np.zeros((n, m))
        for i, j, mass in self.flows:
            P[i, j] += mass
        return P


def pairwise_distances(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    diff = x[:, None, :] - y[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def exact_w1(mu: DiscreteMeasure, nu: DiscreteMeasure, pair_cap: int = DEFAULT_PAIR_CAP) -> tuple[float, TransportPlan]:
    """Optimal transport cost under the Euclidean ground metric, solved by network simplex."""
    if mu.dim != nu.dim:
        raise ConfigurationError("measures live in different dimensions")
    n, m = len(mu), len(nu)
    if n * m > pair_cap:
        raise ResourceError(f"{n} x {m} support pairs exceed the cap of {pair_cap}; subsample first")
    # zero-weight atoms carry no mass and would only pad the basis
    ia = np.flatnonzero(mu.weights > 0)
    ib = np.flatnonzero(nu.weights > 0)
    C = pairwise_distances(mu.points[ia], nu.points[ib])
    rows, cols, mass, cost, _ = transport(C, mu.weights[ia], nu.weights[ib])
    flows = [(int(ia[r]), int(ib[c]), float(w)) for r, c, w in zip(rows, cols, mass)]
    return cost, TransportPlan(flows, cost)


def w1(mu: DiscreteMeasure, nu: DiscreteMeasure, **kw) -> float:
    return exact_w1(mu, nu, **kw)[0]


def grid_uniform(d: int, m: int, atom_cap: int = DEFAULT_ATOM_CAP) -> DiscreteMeasure:
    """Cell centers of the regular m^d grid; W1 to the uniform law is at most sqrt(d)/(2m)."""
    if d < 1 or m < 1:
        raise ConfigurationError("grid_uniform needs d >= 1 and m >= 1")
    if m**d > atom_cap:
        raise ResourceError(f"grid with {m}^{d} atoms exceeds the cap of {atom_cap}")
    axis = (np.arange(m) + 0.5) / m
    mesh = np.meshgrid(*([axis] * d), indexing="ij")
    pts = np.stack([g.ravel() for g in mesh], axis=1)
    return DiscreteMeasure(pts, np.full(pts.shape[0], 1.0 / pts.shape[0]))


def grid_error(d: int, m: int) -> float:
    return math.sqrt(d) / (2 * m)


def sample_uniform(d: int, n: int, seed) -> DiscreteMeasure:
    if n < 1:
        raise ConfigurationError("n must be positive")
    rng = np.random.default_rng(seed)
    return DiscreteMeasure.uniform(rng.random((n, d)))


def pushforward(g, latent: DiscreteMeasure) -> DiscreteMeasure:
    """Image of ``latent`` under ``g`` (an MlpNetwork or any callable on (k, d) arrays)."""
    fn = g.evaluate if hasattr(g, "evaluate") else g
    pts = np.asarray(fn(latent.points), dtype=np.float64)
    if pts.ndim == 1:
        pts = pts[:, None]
    return DiscreteMeasure(pts, latent.weights.copy())


def loglog_slope(ns, values) -> float:
    x, y = np.log(np.asarray(ns, float)), np.log(np.asarray(values, float))
    return float(np.polyfit(x, y, 1)[0])


@dataclass
class RateStudy:
    d: int
    grid_m: int
    rows: list[tuple[int, float]]  # (n, mean W1)
    slope: float
    c_hat: float
    low_dim_regime: bool

    def to_csv(self) -> str:
        lines = ["n,mean_w1,grid_error"]
        err = grid_error(self.d, self.grid_m)
        lines += [f"{n},{v:.17g},{err:.17g}" for n, v in self.rows]
        return "\n".join(lines) + "\n"


def empirical_rate_study(d: int, n_grid, trials: int, grid_m: int, seed) -> RateStudy:
    """Mean exact W1 between n uniform draws and a fine grid, for each n.

    ``c_hat`` is the largest observed ``W1 * n**(1/d) / sqrt(d)``. For d in
    {1, 2} the n^(-1/d) rate is not the right regime (n^(-1/2), and an extra
    log n for d = 2); the result is flagged rather than refused.
    """
    n_grid = sorted(int(n) for n in n_grid)
    if d < 1 or trials < 1 or not n_grid:
        raise ConfigurationError("rate study needs d >= 1, trials >= 1 and a nonempty n grid")
    # nominal decay with unit constant at the largest n
    rate_at_max = math.sqrt(d) / n_grid[-1] ** (1.0 / d)
    if grid_error(d, grid_m) > 0.5 * rate_at_max:
        raise ConfigurationError(
            f"grid m={grid_m} too coarse: error {grid_error(d, grid_m):.4g} exceeds half of "
            f"the nominal W1 scale {rate_at_max:.4g} at n={n_grid[-1]}"
        )
    grid = grid_uniform(d, grid_m)
    streams = spawn(seed, len(n_grid))
    rows = []
    for n, s in zip(n_grid, streams):
        vals = [w1(grid, sample_uniform(d, n, child)) for child in s.spawn(trials)]
        rows.append((n, float(np.mean(vals))))
    slope = loglog_slope([r[0] for r in rows], [r[1] for r in rows])
    c_hat = max(v * n ** (1.0 / d) / math.sqrt(d) for n, v in rows)
    return RateStudy(d, grid_m, rows, slope, c_hat, low_dim_regime=d < 3)
