"""Left-inverse-penalized adversarial training.

One outer iteration runs critic ascent on the mean gap (with a gradient
penalty), encoder descent on the left-inverse penalty, then generator descent
on ``-mean f(g(u)) + lam * penalty``. The encoder is re-projected into its
Lipschitz ball after every update.
"""

from __future__ import annotations

import io
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import ad
from .ad import ConfigurationError, ParamVector, Tape
from .seeding import spawn
from .measures import DiscreteMeasure, pushforward, sample_uniform, w1
from .nets import MlpNetwork, certify_lipschitz, make_critic, make_encoder, make_generator, project_to_lipschitz


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, record: dict):
        super().__init__(message)
        self.record = record


@dataclass
class LipermConfig:
    lam: float = 1.0
    q: float = 2.0
    mc_samples: int = 256
    critic_steps: int = 5
    encoder_steps: int = 5
    generator_steps: int = 1
    gp_weight: float = 10.0
    lr_critic: float = 1e-3
    lr_encoder: float = 1e-3
    lr_generator: float = 5e-5
    beta1: float = 0.5
    beta2: float = 0.9
    iterations: int = 5000
    seed: int = 0
    # None means the critic sees the full data set each step
    data_batch: int | None = None
    divergence_limit: float = 1e6
    # "linear" ramps the generator step size down to zero over the run
    generator_schedule: str = "linear"

    def __post_init__(self):
        if self.lam < 0 or self.q < 1 or self.mc_samples < 1:
            raise ConfigurationError("need lam >= 0, q >= 1 and mc_samples >= 1")
        for name in ("critic_steps", "encoder_steps", "generator_steps", "iterations"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be nonnegative")
        if self.generator_schedule not in ("constant", "linear"):
            raise ConfigurationError(f"unknown generator_schedule {self.generator_schedule!r}")


@dataclass
class ArchSpec:
    d: int
    D: int
    gen_widths: list[int] = field(default_factory=lambda: [64, 64, 64])
    enc_widths: list[int] = field(default_factory=lambda: [64, 64, 64])
    critic_widths: list[int] = field(default_factory=lambda: [64, 64, 64])
    L_H: float = 4.0
    L_G: float | None = None
    activation: str = "tanh"
    critic_activation: str = "leaky_relu"
    squash_margin: float = 0.02


class Adam:
    def __init__(self, size: int, lr: float, beta1: float = 0.5, beta2: float = 0.9, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, values: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        mhat = self.m / (1 - self.beta1**self.t)
        vhat = self.v / (1 - self.beta2**self.t)
        return values - self.lr * mhat / (np.sqrt(vhat) + self.eps)


# -- losses -------------------------------------------------------------------


def _penalty_node(tape: Tape, hg_out: ad.Var, u: ad.Var, q: float) -> ad.Var:
    r = hg_out - u
    per_atom = ad.sqnorm_rows(r) if q == 2 else ad.power(ad.norm_rows(r), q)
    return ad.mean(per_atom)


def _apply(fn, x: np.ndarray) -> np.ndarray:
    out = np.asarray(fn.evaluate(x) if hasattr(fn, "evaluate") else fn(x), dtype=np.float64)
    return out[:, None] if out.ndim == 1 else out


def left_inverse_penalty(g, h, q: float, latent_samples) -> float:
    """Mean of ||h(g(u)) - u||^q over the latent atoms (weighted if given a measure).

    ``g`` and ``h`` are networks or plain callables on row batches.
    """
    u = latent_samples.points if isinstance(latent_samples, DiscreteMeasure) else np.asarray(latent_samples)
    w = latent_samples.weights if isinstance(latent_samples, DiscreteMeasure) else None
    if u.ndim == 1:
        u = u[:, None]
    r = _apply(h, _apply(g, u)) - u
    per_atom = np.sum(r * r, axis=1) if q == 2 else np.linalg.norm(r, axis=1) ** q
    return float(per_atom @ w) if w is not None else float(per_atom.mean())


def penalty_value_and_grads(g: MlpNetwork, h: MlpNetwork, q: float, u: np.ndarray):
    """Penalty on the batch ``u`` with gradients for both networks."""
    tape = Tape()
    gh, hh = tape.params(g.params), tape.params(h.params)
    uv = tape.constant(u)
    out = _penalty_node(tape, h.forward(tape, hh, g.forward(tape, gh, uv)), uv, q)
    tape.backward(out)
    return float(out.value), tape.grad_params(gh, g.params), tape.grad_params(hh, h.params)


def _weighted_mean(x: ad.Var, w: np.ndarray) -> ad.Var:
    return ad.total(x * x.tape.constant(w[:, None]))


def _interpolates(gen: np.ndarray, data: np.ndarray, gen_w, data_w, rng: np.random.Generator,
                  k: int | None = None) -> np.ndarray:
    k = max(len(gen), len(data)) if k is None else k
    ig = rng.choice(len(gen), size=k, p=gen_w) if gen_w is not None else rng.integers(len(gen), size=k)
    idt = rng.choice(len(data), size=k, p=data_w) if data_w is not None else rng.integers(len(data), size=k)
    t = rng.random((k, 1))
    return t * data[idt] + (1.0 - t) * gen[ig]


def critic_loss_and_grad(f: MlpNetwork, gen: DiscreteMeasure, data: DiscreteMeasure, gp_weight: float, rng):
    """Returns (loss, mean gap, gp term, gradient for f)."""
    tape = Tape()
    fh = tape.params(f.params)
    # one pass over data and generated atoms; signed weights turn the sum into the gap
    both = np.vstack([data.points, gen.points])
    signed = np.concatenate([data.weights, -gen.weights])
    gap = _weighted_mean(f.forward(tape, fh, tape.constant(both)), signed)
    loss = -gap
    gp_val = 0.0
    if gp_weight > 0:
        xi = _interpolates(gen.points, data.points, gen.weights, data.weights, rng)
        _, grad_x = f.input_gradient(tape, fh, tape.constant(xi))
        gp = ad.mean(ad.square(ad.norm_rows(grad_x) - 1.0))
        gp_val = float(gp.value)
        loss = loss + gp * gp_weight
    tape.backward(loss)
    return float(loss.value), float(gap.value), gp_val, tape.grad_params(fh, f.params)


def ipm_critic_loss(f: MlpNetwork, gen_samples: DiscreteMeasure, data: DiscreteMeasure, gp_weight: float, seed) -> float:
    """-(E_data f - E_gen f) + gp_weight * E[(||grad f(x_hat)|| - 1)^2] over random interpolates."""
    return critic_loss_and_grad(f, gen_samples, data, gp_weight, np.random.default_rng(seed))[0]


def critic_gap(f: MlpNetwork, gen: DiscreteMeasure, data: DiscreteMeasure) -> float:
    return float(f.evaluate(data.points)[:, 0] @ data.weights - f.evaluate(gen.points)[:, 0] @ gen.weights)


def critic_ipm_estimate(f: MlpNetwork, gen: DiscreteMeasure, data: DiscreteMeasure, seed=0, probes: int = 4096) -> float:
    """Mean gap divided by max(1, sampled input-gradient norm on interpolates).

    Rescaling by the observed slope keeps the estimate a Lipschitz-1 lower
    estimate even when the gradient penalty lets the slope overshoot 1.
    """
    rng = np.random.default_rng(seed)
    xi = _interpolates(gen.points, data.points, gen.weights, data.weights, rng, probes)
    xi = np.vstack([xi, gen.points, data.points])
    tape = Tape()
    _, g = f.input_gradient(tape, tape.params(f.params), tape.constant(xi))
    slope = float(np.max(np.linalg.norm(g.value, axis=1)))
    return critic_gap(f, gen, data) / max(1.0, slope)


# -- training -----------------------------------------------------------------


@dataclass
class TrainingTrace:
    records: list[dict] = field(default_factory=list)
    failed: dict | None = None

    COLUMNS = ("iter", "ipm_est", "penalty_est", "objective", "critic_gp", "lip_cert_h")

    def __len__(self):
        return len(self.records)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(",".join(self.COLUMNS) + "\n")
        for r in self.records:
            buf.write(
                f"{r['iter']}," + ",".join(f"{float(r[c]):.17g}" for c in self.COLUMNS[1:]) + "\n"
            )
        return buf.getvalue()


@dataclass
class LipermState:
    g: MlpNetwork
    h: MlpNetwork
    f: MlpNetwork
    opt_g: Adam
    opt_h: Adam
    opt_f: Adam

    @classmethod
    def fresh(cls, g, h, f, cfg: LipermConfig) -> "LipermState":
        return cls(
            g, h, f,
            Adam(len(g.params), cfg.lr_generator, cfg.beta1, cfg.beta2),
            Adam(len(h.params), cfg.lr_encoder, cfg.beta1, cfg.beta2),
            Adam(len(f.params), cfg.lr_critic, cfg.beta1, cfg.beta2),
        )


def _check(value: float, limit: float, what: str, record: dict):
    if not math.isfinite(value) or abs(value) > limit:
        record = dict(record, failed_on=what, value=value)
        raise TrainingDiverged(f"{what} diverged ({value!r})", record)


def _data_batch(data: DiscreteMeasure, cfg: LipermConfig, rng) -> DiscreteMeasure:
    if cfg.data_batch is None or cfg.data_batch >= len(data):
        return data
    idx = rng.choice(len(data), size=cfg.data_batch, replace=False, p=data.weights)
    return DiscreteMeasure.uniform(data.points[idx])


def generator_loss_and_grad(state: LipermState, u: np.ndarray, lam: float, q: float, include_penalty: bool = True):
    """-mean f(g(u)) + lam * penalty, with the gradient for g only."""
    g, h, f = state.g, state.h, state.f
    tape = Tape()
    gh, hh, fh = tape.params(g.params), tape.params(h.params), tape.params(f.params)
    uv = tape.constant(u)
    x = g.forward(tape, gh, uv)
    ipm_term = -ad.mean(f.forward(tape, fh, x))
    loss = ipm_term
    pen_val = float("nan")
    if include_penalty and lam > 0:
        pen = _penalty_node(tape, h.forward(tape, hh, x), uv, q)
        pen_val = float(pen.value)
        loss = loss + pen * lam
    tape.backward(loss)
    return float(loss.value), pen_val, tape.grad_params(gh, g.params)


def liperm_step(state: LipermState, data: DiscreteMeasure, cfg: LipermConfig, rng: np.random.Generator, it: int = 0) -> dict:
    """One outer iteration; mutates ``state`` and returns the iteration record."""
    d = state.g.in_dim
    record = {"iter": it, "ipm_est": float("nan"), "penalty_est": float("nan"), "objective": float("nan"),
              "critic_gp": float("nan"), "lip_cert_h": float("nan")}
    lim = cfg.divergence_limit

    for _ in range(cfg.critic_steps):
        u = rng.random((cfg.mc_samples, d))
        gen = DiscreteMeasure.uniform(state.g.evaluate(u))
        loss, gap, gp, grad = critic_loss_and_grad(state.f, gen, _data_batch(data, cfg, rng), cfg.gp_weight, rng)
        record["ipm_est"], record["critic_gp"] = gap, gp
        _check(loss, lim, "critic loss", record)
        state.f = state.f.with_params(state.opt_f.step(state.f.params.values, grad.values))

    for _ in range(cfg.encoder_steps):
        u = rng.random((cfg.mc_samples, d))
        pen, _, grad_h = penalty_value_and_grads(state.g, state.h, cfg.q, u)
        record["penalty_est"] = pen
        _check(pen, lim, "penalty", record)
        h = state.h.with_params(state.opt_h.step(state.h.params.values, grad_h.values))
        state.h = project_to_lipschitz(h, h.lipschitz_bound, warm=True)

    for _ in range(cfg.generator_steps):
        u = rng.random((cfg.mc_samples, d))
        loss, pen, grad_g = generator_loss_and_grad(state, u, cfg.lam, cfg.q)
        _check(loss, lim, "generator loss", record)
        g = state.g.with_params(state.opt_g.step(state.g.params.values, grad_g.values))
        if g.lipschitz_mode == "certified":
            g = project_to_lipschitz(g, g.lipschitz_bound, warm=True)
        state.g = g

    if math.isnan(record["penalty_est"]):
        record["penalty_est"] = left_inverse_penalty(state.g, state.h, cfg.q, rng.random((cfg.mc_samples, d)))
    if math.isnan(record["ipm_est"]):
        u = rng.random((cfg.mc_samples, d))
        record["ipm_est"] = critic_gap(state.f, DiscreteMeasure.uniform(state.g.evaluate(u)), data)
        record["critic_gp"] = 0.0
    record["objective"] = record["ipm_est"] + cfg.lam * record["penalty_est"]
    record["lip_cert_h"] = certify_lipschitz(state.h, warm=True).product_bound
    return record


def init_networks(arch: ArchSpec, seed):
    sg, sh, sf = spawn(seed, 3)
    if arch.d > arch.D:
        raise ConfigurationError("latent dimension exceeds ambient dimension")
    g = make_generator(arch.d, arch.D, arch.gen_widths, arch.L_G, seed=sg,
                       activation=arch.activation, squash_margin=arch.squash_margin)
    h = make_encoder(arch.D, arch.d, arch.enc_widths, arch.L_H, seed=sh,
                     activation=arch.activation, squash_margin=arch.squash_margin)
    f = make_critic(arch.D, arch.critic_widths, seed=sf, activation=arch.critic_activation)
    return g, h, f


def train(data: DiscreteMeasure, cfg: LipermConfig, arch: ArchSpec, init=None, progress: Callable | None = None):
    """Run ``cfg.iterations`` outer iterations from networks seeded by ``cfg.seed``.

    ``init`` may supply (g, h, f) to start from. On divergence the partial
    trace is attached to the raised ``TrainingDiverged``.
    """
    if len(data) == 0:
        raise ConfigurationError("empty data")
    if data.dim != arch.D:
        raise ConfigurationError(f"data dimension {data.dim} does not match D={arch.D}")
    init_seed, run_seed = spawn(cfg.seed, 2)
    g, h, f = init if init is not None else init_networks(arch, init_seed)
    state = LipermState.fresh(g, h, f, cfg)
    rng = np.random.default_rng(run_seed)
    trace = TrainingTrace()
    for it in range(cfg.iterations):
        if cfg.generator_schedule == "linear":
            state.opt_g.lr = cfg.lr_generator * (1.0 - it / cfg.iterations)
        try:
            trace.records.append(liperm_step(state, data, cfg, rng, it))
        except TrainingDiverged as exc:
            trace.failed = exc.record
            exc.trace = trace
            exc.networks = (state.g, state.h, state.f)
            raise
        if progress is not None:
            progress(it, trace.records[-1])
    return state.g, state.h, state.f, trace


# -- evaluation -----------------------------------------------------------------


@dataclass
class ProbeConfig:
    steps: int = 1500
    lr: float = 3e-3
    batch: int = 256
    widths: list[int] = field(default_factory=lambda: [64, 64, 64])
    # independent encoder fits; the smallest penalty wins (each one is an upper bound on the min)
    restarts: int = 1


def probe_penalty(g: MlpNetwork, q: float, L_H: float, seed, grid_m: int = 64, probe: ProbeConfig | None = None,
                  activation: str = "tanh") -> tuple[float, MlpNetwork]:
    """Left-inverse penalty of ``g`` against a freshly trained encoder, evaluated on a latent grid."""
    from .measures import grid_uniform

    probe = probe or ProbeConfig()
    grid = grid_uniform(g.in_dim, grid_m)
    seeds = [seed] if probe.restarts <= 1 else [seed, *spawn(seed, probe.restarts - 1)]
    best, best_h = np.inf, None
    for s in seeds:
        h = _fit_probe_encoder(g, q, L_H, s, probe, activation)
        val = left_inverse_penalty(g, h, q, grid)
        if val < best:
            best, best_h = val, h
    return best, best_h


def _fit_probe_encoder(g, q, L_H, seed, probe, activation):
    s_init, s_run = spawn(seed, 2)
    h = make_encoder(g.out_dim, g.in_dim, probe.widths, L_H, seed=s_init, activation=activation,
                     squash_margin=g.squash_margin)
    rng = np.random.default_rng(s_run)
    opt = Adam(len(h.params), probe.lr, 0.9, 0.999)
    d = g.in_dim
    for _ in range(probe.steps):
        u = rng.random((probe.batch, d))
        x = g.evaluate(u)
        tape = Tape()
        hh = tape.params(h.params)
        out = _penalty_node(tape, h.forward(tape, hh, tape.constant(x)), tape.constant(u), q)
        tape.backward(out)
        h = project_to_lipschitz(h.with_params(opt.step(h.params.values, tape.grad_params(hh, h.params).values)), L_H,
                                 warm=True)
    return h


def evaluate_generator(g: MlpNetwork, data: DiscreteMeasure, p_star_sampler=None, m_eval: int = 2048,
                       grid_m: int = 64, seed=0, q: float = 2.0, L_H: float = 4.0,
                       probe: ProbeConfig | None = None) -> dict:
    """Diversity gap to the data, accuracy to fresh P* samples, and probe penalty."""
    s_lat, s_star, s_probe = spawn(seed, 3)
    gen = pushforward(g, sample_uniform(g.in_dim, m_eval, s_lat))
    out = {"diversity_gap": w1(gen, data), "accuracy": float("nan")}
    if p_star_sampler is not None:
        fresh = p_star_sampler(m_eval, np.random.default_rng(s_star))
        if not isinstance(fresh, DiscreteMeasure):
            fresh = DiscreteMeasure.uniform(fresh)
        out["accuracy"] = w1(gen, fresh)
    out["penalty_value"], _ = probe_penalty(g, q, L_H, s_probe, grid_m, probe, g.activation)
    return out
