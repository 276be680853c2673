"""MLPs between unit cubes with certified or penalized Lipschitz control."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import ad
from .ad import ConfigurationError, ParamVector, Tape, Var

ACTIVATIONS = ("tanh", "leaky_relu", "linear")
MODES = ("certified", "gradient-penalized", "unconstrained")
LEAKY_SLOPE = 0.2
POWER_ITERS = 100
POWER_TOL = 1e-8
# projection aims slightly under the budget so a recomputed certificate never lands above it
PROJECTION_SLACK = 1e-9


@dataclass
class LipschitzCertificate:
    per_layer_norms: np.ndarray
    product_bound: float
    method: str


@dataclass
class MlpNetwork:
    """Affine layers with 1-Lipschitz activations; hidden layers use ``activation``.

    ``params`` packs (W_1, b_1, ..., W_L, b_L) with W_l of shape (in, out), so a
    batch ``x`` of shape (k, in) maps to ``x @ W + b``.
    """

    params: ParamVector
    dims: list[int]
    activation: str = "tanh"
    lipschitz_mode: str = "unconstrained"
    lipschitz_bound: float | None = None
    squash: bool = False
    squash_margin: float = 0.02
    # last power-iteration vectors per layer; only a warm start, never part of the model
    power_vectors: list | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"unsupported activation {self.activation!r}")
        if self.lipschitz_mode not in MODES:
            raise ConfigurationError(f"unknown lipschitz mode {self.lipschitz_mode!r}")
        if self.lipschitz_mode == "certified" and not self.lipschitz_bound:
            raise ConfigurationError("certified mode needs a Lipschitz bound")

    @property
    def in_dim(self) -> int:
        return self.dims[0]

    @property
    def out_dim(self) -> int:
        return self.dims[-1]

    @property
    def num_layers(self) -> int:
        return len(self.dims) - 1

    def weights(self) -> list[np.ndarray]:
        return self.params.blocks()[0::2]

    def biases(self) -> list[np.ndarray]:
        return self.params.blocks()[1::2]

    def copy(self) -> "MlpNetwork":
        vecs = None if self.power_vectors is None else [v.copy() for v in self.power_vectors]
        return MlpNetwork(
            self.params.copy(), list(self.dims), self.activation, self.lipschitz_mode,
            self.lipschitz_bound, self.squash, self.squash_margin, vecs,
        )

    def with_params(self, values: np.ndarray) -> "MlpNetwork":
        net = self.copy()
        net.params = self.params.with_values(values)
        return net

    # -- evaluation ---------------------------------------------------------

    def _act(self, z: Var) -> Var:
        if self.activation == "tanh":
            return ad.tanh(z)
        if self.activation == "leaky_relu":
            return ad.leaky_relu(z, LEAKY_SLOPE)
        return z

    def forward(self, tape: Tape, handles: Sequence[Var], x: Var, return_preacts: bool = False):
        """Record the network on ``tape``; ``handles`` are the parameter leaves."""
        if x.value.ndim != 2 or x.value.shape[1] != self.in_dim:
            raise ConfigurationError(f"input of shape {x.value.shape} does not match in_dim={self.in_dim}")
        a, pre, acts = x, [], [x]
        L = self.num_layers
        for l in range(L):
            z = a @ handles[2 * l] + handles[2 * l + 1]
            if l < L - 1:
                pre.append(z)
                a = self._act(z)
                acts.append(a)
            else:
                a = z
        if self.squash:
            a = ad.soft_clamp(a, self.squash_margin)
        return (a, pre, acts) if return_preacts else a

    def input_gradient(self, tape: Tape, handles: Sequence[Var], x: Var) -> tuple[Var, Var]:
        """Scalar output and its gradient w.r.t. the input rows, both on ``tape``.

        The gradient is assembled from first-order primitives, so its own
        parameter gradient comes from an ordinary backward pass.
        """
        if self.out_dim != 1 or self.squash:
            raise ConfigurationError("input gradients are only built for scalar, unsquashed critics")
        out, pre, acts = self.forward(tape, handles, x, return_preacts=True)
        k = x.value.shape[0]
        g = tape.constant(np.ones((k, 1)))
        for l in range(self.num_layers - 1, -1, -1):
            g = g @ handles[2 * l].T
            if l > 0:
                if self.activation == "tanh":
                    a = acts[l]
                    g = g * (1.0 - ad.square(a))
                elif self.activation == "leaky_relu":
                    g = g * ad.leaky_relu_slope(pre[l - 1], LEAKY_SLOPE)
        return out, g

    def evaluate(self, x) -> np.ndarray:
        """Plain numpy forward pass (no tape)."""
        a = np.asarray(x, dtype=np.float64)
        if a.ndim == 1:
            a = a[:, None] if self.in_dim == 1 else a[None, :]
        if a.shape[1] != self.in_dim:
            raise ConfigurationError(f"input of shape {a.shape} does not match in_dim={self.in_dim}")
        W, B = self.weights(), self.biases()
        for l in range(self.num_layers):
            a = a @ W[l] + B[l]
            if l < self.num_layers - 1:
                if self.activation == "tanh":
                    a = np.tanh(a)
                elif self.activation == "leaky_relu":
                    a = np.where(a >= 0, a, LEAKY_SLOPE * a)
        if self.squash:
            a = ad.soft_clamp_values(a, self.squash_margin)[0]
        return a

    __call__ = evaluate

    # -- checkpoints --------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "dims": self.dims,
            "activation": self.activation,
            "lipschitz_mode": self.lipschitz_mode,
            "lipschitz_bound": self.lipschitz_bound,
            "squash": self.squash,
            "squash_margin": self.squash_margin,
            "layout": [[name, list(shape)] for name, shape in self.params.layout],
            # float.hex round-trips bit-exactly
            "values": [float(v).hex() for v in self.params.values],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MlpNetwork":
        layout = [(name, tuple(shape)) for name, shape in d["layout"]]
        values = np.array([float.fromhex(v) for v in d["values"]], dtype=np.float64)
        return cls(
            ParamVector(values, layout), list(d["dims"]), d["activation"], d["lipschitz_mode"],
            d["lipschitz_bound"], d["squash"], d["squash_margin"],
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "MlpNetwork":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _layout(dims: Sequence[int]):
    out = []
    for l in range(len(dims) - 1):
        out.append((f"W{l}", (dims[l], dims[l + 1])))
        out.append((f"b{l}", (dims[l + 1],)))
    return out


def build_mlp(dims, *, activation="tanh", mode="unconstrained", bound=None, squash=False,
              squash_margin=0.02, seed=None, init="glorot") -> MlpNetwork:
    dims = [int(v) for v in dims]
    if len(dims) < 2 or min(dims) < 1:
        raise ConfigurationError(f"invalid layer dims {dims}")
    pv = ParamVector.zeros(_layout(dims))
    blocks = pv.blocks()
    if init == "identity":
        if len(dims) != 2 or dims[0] != dims[1]:
            raise ConfigurationError("identity init needs a single square layer")
        blocks[0][...] = np.eye(dims[0])
    elif init == "uniform":
        rng = np.random.default_rng(seed)
        for l in range(len(dims) - 1):
            a = 1.0 / math.sqrt(dims[l])
            blocks[2 * l][...] = rng.uniform(-a, a, size=blocks[2 * l].shape)
            blocks[2 * l + 1][...] = rng.uniform(-a, a, size=blocks[2 * l + 1].shape)
    elif init == "glorot":
        # Xavier-uniform weights. Inputs live in the unit cube, so each first-layer
        # unit gets a bias putting its level set through a random point of the cube
        # (zero biases would pin every unit to the corner). Squashed outputs start
        # at the cube center.
        rng = np.random.default_rng(seed)
        for l in range(len(dims) - 1):
            a = math.sqrt(6.0 / (dims[l] + dims[l + 1]))
            blocks[2 * l][...] = rng.uniform(-a, a, size=blocks[2 * l].shape)
        anchors = rng.random((dims[1], dims[0]))
        blocks[1][...] = -np.einsum("ij,ji->i", anchors, blocks[0])
        if len(dims) > 2:
            blocks[-1][...] = 0.5 if squash else 0.0
        elif squash:
            blocks[1][...] += 0.5
    elif init != "zeros":
        raise ConfigurationError(f"unknown init {init!r}")
    net = MlpNetwork(pv, dims, activation, mode, bound, squash, squash_margin)
    if mode == "certified":
        net = project_to_lipschitz(net, bound)
    return net


def make_generator(d, D, widths, lipschitz=None, seed=None, *, activation="tanh", init="glorot",
                   squash_margin=0.02) -> MlpNetwork:
    """Generator [0,1]^d -> [0,1]^D.

    ``lipschitz`` is a number (certified mode), ``"gradient-penalized"`` or None.
    """
    if d < 1 or D < d:
        raise ConfigurationError("generator needs 1 <= d <= D")
    if widths is None:
        raise ConfigurationError("widths must be a list (possibly empty)")
    if not widths and init != "identity":
        raise ConfigurationError("empty widths are only allowed with identity init")
    mode, bound = _mode(lipschitz)
    return build_mlp([d, *widths, D], activation=activation, mode=mode, bound=bound, squash=True,
                     squash_margin=squash_margin, seed=seed, init=init)


def make_encoder(D, d, widths, L_H, seed=None, *, activation="tanh", init="glorot",
                 squash_margin=0.02) -> MlpNetwork:
    """Encoder [0,1]^D -> [0,1]^d, always certified at ``L_H``."""
    if d < 1 or D < d:
        raise ConfigurationError("encoder needs 1 <= d <= D")
    if widths is None:
        raise ConfigurationError("widths must be a list (possibly empty)")
    if L_H is None or L_H <= 0:
        raise ConfigurationError("encoders need a positive Lipschitz budget")
    return build_mlp([D, *widths, d], activation=activation, mode="certified", bound=float(L_H),
                     squash=True, squash_margin=squash_margin, seed=seed, init=init)


def make_critic(D, widths, mode="gradient-penalized", seed=None, *, activation="tanh",
                init="glorot", zero_output=True) -> MlpNetwork:
    """Scalar critic on [0,1]^D.

    With ``zero_output`` the critic starts as f = 0, so its first updates come
    from the data gap alone. A randomly oriented start can get stuck: under the
    two-sided gradient penalty, reversing a slope means crossing |grad f| = 0.
    """
    if widths is None:
        raise ConfigurationError("widths must be a list (possibly empty)")
    net = build_mlp([D, *widths, 1], activation=activation, mode=mode, seed=seed, init=init)
    if zero_output:
        net.weights()[-1][...] = 0.0
        net.biases()[-1][...] = 0.0
    return net


def _mode(lipschitz):
    if lipschitz is None or lipschitz == "unconstrained":
        return "unconstrained", None
    if lipschitz == "gradient-penalized":
        return "gradient-penalized", None
    return "certified", float(lipschitz)


# -- certificates ------------------------------------------------------------


def _power_iteration(W: np.ndarray, start: np.ndarray | None, iters: int, tol: float):
    A = W.T @ W
    k = A.shape[0]
    if not np.any(A):
        return 0.0, None
    if start is None or start.shape != (k,) or not np.any(start):
        start = np.cos(np.arange(1, k + 1) * 0.7) + 1.5  # deterministic, generic start
    v = start / np.linalg.norm(start)
    mu = 0.0
    for _ in range(iters):
        w = A @ v
        mu_new = float(v @ w)
        nw = math.sqrt(float(w @ w))
        if nw == 0.0:
            return 0.0, None
        v = w / nw
        done = abs(mu_new - mu) <= tol * max(mu_new, 1e-300)
        mu = mu_new
        if done:
            break
    w = A @ v
    mu = float(v @ w)
    r = math.sqrt(float((w - mu * v) @ (w - mu * v)))
    # mu + r only bounds the eigenvalue nearest mu, which need not be the top one.
    # tau*I - A positive definite proves tau >= lambda_max; the margin covers rounding.
    margin = 8 * k * np.finfo(float).eps * math.sqrt(float(np.sum(A * A)))
    tau = mu + r + margin
    try:
        np.linalg.cholesky(tau * np.eye(k) - A)
    except np.linalg.LinAlgError:
        evals, evecs = np.linalg.eigh(A)
        tau = float(evals[-1]) + margin
        v = evecs[:, -1]
    return math.sqrt(max(tau, 0.0)), v


def spectral_norm_bound(W: np.ndarray, iters: int = POWER_ITERS, tol: float = POWER_TOL, start=None) -> float:
    """Largest singular value of ``W`` by power iteration on W^T W.

    The estimate sqrt(mu + r), with mu the Rayleigh quotient of the final
    iterate and r its residual, is confirmed by a Cholesky factorization of
    (mu + r) I - W^T W; if that fails the iteration stalled below the top
    eigenvalue and a dense eigensolve takes over. Either way the result is a
    sound upper bound. Without ``start`` the start vector is fixed, so results
    are reproducible.
    """
    return _power_iteration(np.asarray(W, dtype=np.float64), start, iters, tol)[0]


def certify_lipschitz(net: MlpNetwork, method: str = "power-iteration", warm: bool = False) -> LipschitzCertificate:
    """Product of per-layer spectral norms (activations and squash have slope <= 1).

    ``warm`` starts power iteration from the vectors cached on ``net`` and
    refreshes that cache; training uses it because consecutive iterates move
    little.
    """
    if net.activation not in ACTIVATIONS:
        raise ConfigurationError(f"no certificate for activation {net.activation!r}")
    if net.activation == "leaky_relu" and not 0 <= LEAKY_SLOPE <= 1:
        raise ConfigurationError("leaky slope must lie in [0, 1]")
    if method == "power-iteration":
        starts = net.power_vectors if warm and net.power_vectors else [None] * net.num_layers
        runs = [_power_iteration(W, v0, POWER_ITERS, POWER_TOL) for W, v0 in zip(net.weights(), starts)]
        norms = np.array([b for b, _ in runs])
        if warm:
            net.power_vectors = [v for _, v in runs]
    elif method == "exact-svd":
        norms = np.array([np.linalg.norm(W, 2) if W.size else 0.0 for W in net.weights()])
    else:
        raise ConfigurationError(f"unknown certificate method {method!r}")
    return LipschitzCertificate(norms, float(np.prod(norms)), method)


def project_to_lipschitz(net: MlpNetwork, L: float, warm: bool = False) -> MlpNetwork:
    """Scale every weight matrix by min(1, (L / bound)^(1/layers)); biases untouched."""
    cert = certify_lipschitz(net, warm=warm)
    if cert.product_bound <= L:
        return net
    factor = (L * (1.0 - PROJECTION_SLACK) / cert.product_bound) ** (1.0 / net.num_layers)
    out = net.copy()
    for W in out.weights():
        W *= factor
    return out


def sampled_lipschitz(net: MlpNetwork, pairs: int, seed, scale: float = 1.0) -> float:
    """Largest observed ||f(x) - f(x')|| / ||x - x'|| over random pairs in the input cube."""
    rng = np.random.default_rng(seed)
    x = rng.random((pairs, net.in_dim))
    # half the pairs are close, to probe local slopes
    y = rng.random((pairs, net.in_dim))
    close = rng.random(pairs) < 0.5
    y[close] = x[close] + 1e-3 * rng.standard_normal((close.sum(), net.in_dim))
    num = np.linalg.norm(net.evaluate(x) - net.evaluate(y), axis=1)
    den = np.linalg.norm(x - y, axis=1)
    ok = den > 0
    return float(np.max(num[ok] / den[ok]))
