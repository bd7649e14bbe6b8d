"""Multilayer Lookahead state machines driven one gradient at a time.

The n-layer optimizer keeps n+1 weight vectors: level 0 is the fast
(inner) trajectory updated every iteration by an SGD step, level p >= 1
is the slow trajectory of layer p.  Whenever the iteration counter t is
divisible by k_1*...*k_p, layer p pulls its weights toward the layer
below by a convex combination with weight alpha_p and every level below
p restarts from the synchronized value.  n == 0 is plain SGD.

The cascade runs innermost layer first, each layer mixing against the
already-synchronized level below it; this is the unique order for which
the flat n+1-vector state reproduces the recursive definition (nesting
law), which the test suite checks by construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Callable

import numpy as np

from .problems import DecomposedProblem, full_grad, make_rng, noisy_grad

Schedule = Callable[[int], float]


def constant_schedule(gamma: float) -> Schedule:
    if gamma <= 0.0:
        raise ValueError(f"learning rate must be positive, got {gamma}")
    return lambda t: gamma


def per_round_schedule(gamma_of_round: Callable[[int], float], round_len: int) -> Schedule:
    """Schedule constant within each round of round_len iterations."""
    if round_len < 1:
        raise ValueError("round_len must be >= 1")
    return lambda t: gamma_of_round(t // round_len)


@dataclass(frozen=True, eq=False)
class LayerStack:
    """Optimizer configuration: alpha_p, k_p per layer, innermost first.

    n == len(alphas) == len(ks); n == 0 configures plain SGD.  The
    learning-rate schedule maps the iteration counter t to gamma_t > 0
    and may be left None for ops that take gamma explicitly.
    """

    alphas: tuple[float, ...]
    ks: tuple[int, ...]
    lr_schedule: Schedule | None = None

    def __post_init__(self):
        object.__setattr__(self, "alphas", tuple(float(a) for a in self.alphas))
        object.__setattr__(self, "ks", tuple(int(k) for k in self.ks))
        if len(self.alphas) != len(self.ks):
            raise ValueError("alphas and ks must have the same length")
        for a in self.alphas:
            if not 0.0 < a <= 1.0:
                raise ValueError(f"synchronization parameters must be in (0, 1], got {a}")
        for k in self.ks:
            if k < 1:
                raise ValueError(f"inner-loop lengths must be >= 1, got {k}")

    @property
    def n(self) -> int:
        return len(self.alphas)

    @cached_property
    def round_length(self) -> int:
        """Iterations per update of the outermost weights (1 for SGD)."""
        return math.prod(self.ks)

    @cached_property
    def sync_periods(self) -> tuple[int, ...]:
        """Cumulative products k_1, k_1*k_2, ..., k_1*...*k_n."""
        out, prod = [], 1
        for k in self.ks:
            prod *= k
            out.append(prod)
        return tuple(out)

    def gamma(self, t: int) -> float:
        if self.lr_schedule is None:
            raise ValueError("LayerStack has no learning-rate schedule attached")
        g = float(self.lr_schedule(t))
        if g <= 0.0:
            raise ValueError(f"schedule returned non-positive gamma at t={t}")
        return g

    def with_schedule(self, schedule: Schedule | float) -> "LayerStack":
        if not callable(schedule):
            schedule = constant_schedule(float(schedule))
        return replace(self, lr_schedule=schedule)


@dataclass
class MultilayerState:
    """n+1 weight vectors plus the iteration counter.

    weights[0] is the fast trajectory, weights[p] the slow weights of
    layer p.  At every t divisible by k_1*...*k_p, weights[0..p] agree.
    """

    weights: list[np.ndarray]
    t: int = 0

    @classmethod
    def initial(cls, x0: np.ndarray, n: int) -> "MultilayerState":
        x0 = np.asarray(x0, dtype=float)
        return cls(weights=[x0.copy() for _ in range(n + 1)], t=0)

    def consensus_error(self) -> float:
        """Max distance between any weight level and the innermost one."""
        return max(
            (float(np.max(np.abs(w - self.weights[0]))) for w in self.weights[1:]),
            default=0.0,
        )


def sgd_step(x: np.ndarray, g: np.ndarray, gamma: float) -> np.ndarray:
    """One gradient step x - gamma * g."""
    x = np.asarray(x, dtype=float)
    g = np.asarray(g, dtype=float)
    if x.shape != g.shape:
        raise ValueError(f"shape mismatch: x {x.shape} vs g {g.shape}")
    if gamma <= 0.0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    return x - gamma * g


def sync_depth(t: int, cfg: LayerStack) -> int:
    """Deepest layer that synchronizes when the counter reaches t (0 if none)."""
    depth = 0
    for p, period in enumerate(cfg.sync_periods, start=1):
        if t % period != 0:
            break
        depth = p
    return depth


def mla_step(state: MultilayerState, cfg: LayerStack, g: np.ndarray) -> MultilayerState:
    """Advance the optimizer by one stochastic gradient.

    g must be evaluated at state.weights[0].  The fast weights take an
    SGD step with gamma from the schedule at the pre-step counter, the
    counter increments, and the synchronization cascade fires for every
    layer p whose period divides the new counter: layer p mixes toward
    the (already synchronized) layer below and all lower levels restart
    from the result.  Mutates and returns state.
    """
    gamma = cfg.gamma(state.t)
    state.weights[0] = sgd_step(state.weights[0], g, gamma)
    state.t += 1
    depth = sync_depth(state.t, cfg)
    for p in range(1, depth + 1):
        a = cfg.alphas[p - 1]
        state.weights[p] = (1.0 - a) * state.weights[p] + a * state.weights[p - 1]
        for q in range(p):
            state.weights[q] = state.weights[p].copy()
    return state


@dataclass
class RunReport:
    """Per-iteration metrics of one optimizer run, column-oriented.

    Row t covers iteration t (0-based): gamma[t] is the step size used,
    loss[t] and grad_norm_sq[t] are evaluated at the pre-step point
    (the aggregate theta_t when theta is recorded, the fast weights
    otherwise, both with the exact gradient), and sync_depth[t] is the
    deepest layer synchronized by that step (0 if none).
    """

    gamma: np.ndarray
    loss: np.ndarray
    grad_norm_sq: np.ndarray
    sync_depth: np.ndarray
    final_state: MultilayerState
    theta: np.ndarray | None = None
    rng_algorithm: str = field(default="philox4x64")
    seed: int = 0

    @property
    def T(self) -> int:
        return len(self.gamma)

    def sync_events_per_round(self, cfg: LayerStack) -> int:
        """Total convex combinations computed during the first round."""
        rl = cfg.round_length
        if self.T < rl:
            raise ValueError("report shorter than one round")
        return int(self.sync_depth[:rl].sum())

    def write_csv(self, path) -> None:
        from .harness import write_csv_rows  # local import to avoid a cycle

        header = ["t", "gamma", "loss", "grad_norm_sq", "sync_depth"]
        d = 0 if self.theta is None else self.theta.shape[1]
        header += [f"theta_{j}" for j in range(d)]
        rows = []
        for t in range(self.T):
            row = [t, self.gamma[t], self.loss[t], self.grad_norm_sq[t], int(self.sync_depth[t])]
            if self.theta is not None:
                row += list(self.theta[t])
            rows.append(row)
        write_csv_rows(path, header, rows, meta={"rng": self.rng_algorithm, "seed": self.seed})


def theta_weights(cfg: LayerStack) -> np.ndarray:
    """Convex-combination weights of the aggregate for a 2-layer stack."""
    if cfg.n != 2:
        raise ValueError("the aggregate is defined for exactly two layers")
    a1, a2 = cfg.alphas
    return np.array([a1 * a2, (1.0 - a1) * a2, 1.0 - a2])


def run(
    p: DecomposedProblem,
    cfg: LayerStack,
    T: int,
    seed: int,
    record_theta: bool = False,
    x0: np.ndarray | None = None,
) -> RunReport:
    """Execute T iterations feeding noisy gradients at the fast weights.

    Deterministic given the seed.  With record_theta and n == 2 the
    report carries the aggregate theta_t = a . (x_t, y_t, z_t) and
    evaluates loss / gradient there; otherwise record_theta is ignored.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    if x0 is None:
        x0 = np.zeros(p.dim)
    record_theta = record_theta and cfg.n == 2
    state = MultilayerState.initial(x0, cfg.n)
    rng = make_rng(seed)
    gamma = np.empty(T)
    loss = np.empty(T)
    gnsq = np.empty(T)
    depth = np.zeros(T, dtype=int)
    theta = np.empty((T, p.dim)) if record_theta else None
    w = theta_weights(cfg) if record_theta else None

    for t in range(T):
        gamma[t] = cfg.gamma(t)
        if record_theta:
            pt = w[0] * state.weights[0] + w[1] * state.weights[1] + w[2] * state.weights[2]
            theta[t] = pt
        else:
            pt = state.weights[0]
        loss[t] = p.loss(pt)
        ge = full_grad(p, pt)
        gnsq[t] = float(ge @ ge)
        mla_step(state, cfg, noisy_grad(p, state.weights[0], rng))
        depth[t] = sync_depth(state.t, cfg)

    return RunReport(
        gamma=gamma,
        loss=loss,
        grad_norm_sq=gnsq,
        sync_depth=depth,
        final_state=state,
        theta=theta,
        seed=seed,
    )
