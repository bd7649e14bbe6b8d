"""Two-layer Lookahead as local SGD with synchronization matrices.

The three trajectories (fast x, middle y, slow z) are the columns of a
d x 3 matrix X_t updated by

    X_{t+1} = (X_t - gamma_t * G_t) P_t,      G_t = (g_t, 0, 0),

where P_t is the identity between synchronizations, a 2-block mixing
matrix when t+1 is divisible by k_1 only, and a rank-one full mixing
matrix at round ends.  The probability vector
a = (a1*a2, (1-a1)*a2, 1-a2) is a fixed eigenvector of every P_t, so
theta_t = X_t a obeys a plain SGD recursion with effective step
gamma_t * a1 * a2 no matter when the synchronizations fire.

verify_equivalence cross-checks this formulation against the cascade
implementation in `optimizers` on a shared noise tape.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .optimizers import LayerStack, MultilayerState, mla_step, theta_weights
from .problems import DecomposedProblem, noise_tape


@dataclass
class LocalSgdState:
    """Parameter matrix X (columns x, y, z), aggregation vector a, counter t."""

    X: np.ndarray
    a: np.ndarray
    t: int = 0

    @classmethod
    def initial(cls, z0: np.ndarray, cfg: LayerStack) -> "LocalSgdState":
        z0 = np.asarray(z0, dtype=float)
        X = np.tile(z0[:, None], (1, 3))
        return cls(X=X, a=theta_weights(cfg), t=0)


def sync_matrix(t: int, k1: int, k2: int, alpha1: float, alpha2: float) -> np.ndarray:
    """Mixing matrix P_t applied on the right after iteration t.

    Identity when t+1 is not divisible by k1; the x/y mixing block when
    divisible by k1 but not k1*k2; the rank-one matrix whose columns all
    equal (a1*a2, (1-a1)*a2, 1-a2) at round ends.
    """
    if (t + 1) % k1 != 0:
        return np.eye(3)
    if (t + 1) % (k1 * k2) != 0:
        return np.array(
            [
                [alpha1, alpha1, 0.0],
                [1.0 - alpha1, 1.0 - alpha1, 0.0],
                [0.0, 0.0, 1.0],
            ]
        )
    col = [alpha1 * alpha2, (1.0 - alpha1) * alpha2, 1.0 - alpha2]
    return np.array([[v, v, v] for v in col])


def local_sgd_step(
    s: LocalSgdState,
    g: np.ndarray,
    gamma: float,
    cfg: LayerStack,
    P: np.ndarray | None = None,
) -> LocalSgdState:
    """Apply X <- (X - gamma G) P_t with G = (g, 0, 0); mutates and returns s.

    P overrides the mixing matrix (callers stepping in a tight loop can
    reuse cached sync_matrix outputs); by default it is rebuilt from t.
    """
    if cfg.n != 2:
        raise ValueError("local SGD formulation covers exactly two layers")
    k1, k2 = cfg.ks
    a1, a2 = cfg.alphas
    if P is None:
        P = sync_matrix(s.t, k1, k2, a1, a2)
    s.X[:, 0] -= gamma * np.asarray(g, dtype=float)
    s.X = s.X @ P
    s.t += 1
    return s


def theta(s: LocalSgdState) -> np.ndarray:
    """Aggregate X a, the smoothly evolving convex combination."""
    return s.X @ s.a


@dataclass
class EquivalenceReport:
    """Outcome of the twin-simulation cross-check."""

    T: int
    max_abs_dev: float
    first_divergence_t: int  # -1 when within tolerance everywhere
    tol: float
    passed: bool

    def csv_record(self) -> str:
        """One-line record: T, max deviation, first divergence (or -1)."""
        return f"{self.T},{self.max_abs_dev!r},{self.first_divergence_t}"


def verify_equivalence(
    p: DecomposedProblem,
    cfg: LayerStack,
    T: int,
    seed: int,
    x0: np.ndarray | None = None,
    tol: float = 1e-10,
) -> EquivalenceReport:
    """Drive both implementations from one noise tape and compare.

    Each side evaluates the exact gradient at its own fast weights and
    adds the shared tape entry, so agreement is exact up to round-off.
    The reported deviation is the max componentwise distance between
    (x, y, z) from the cascade and the columns of X; the pass tolerance
    scales as tol * (1 + max |X|) over the run.
    """
    if cfg.n != 2:
        raise ValueError("equivalence check requires a 2-layer configuration")
    if x0 is None:
        x0 = np.zeros(p.dim)
    eta = noise_tape(p, T, seed)
    cascade = MultilayerState.initial(x0, 2)
    matrix = LocalSgdState.initial(x0, cfg)
    H, rb = p.mean_hessian, p.mean_rhs
    k1, k2 = cfg.ks
    a1, a2 = cfg.alphas
    # the mixing matrix takes three values; build each once via sync_matrix
    P_by_case = {
        0: sync_matrix(0, 2, 2, a1, a2),  # t+1 == 1 is never divisible: identity
        1: sync_matrix(k1 - 1, k1, 2, a1, a2) if k2 > 1 else None,
        2: sync_matrix(k1 * k2 - 1, k1, k2, a1, a2),
    }

    max_dev = 0.0
    first_div = -1
    scale = 1.0
    for t in range(T):
        g_c = cascade.weights[0] @ H - rb + eta[t]
        g_m = matrix.X[:, 0] @ H - rb + eta[t]
        gamma = cfg.gamma(t)
        mla_step(cascade, cfg, g_c)
        if (t + 1) % k1 != 0:
            case = 0
        elif (t + 1) % (k1 * k2) != 0:
            case = 1
        else:
            case = 2
        local_sgd_step(matrix, g_m, gamma, cfg, P=P_by_case[case])
        diff = np.abs(np.stack(cascade.weights, axis=1) - matrix.X)
        dev = float(diff.max())
        scale = max(scale, float(np.abs(matrix.X).max()))
        if dev > max_dev:
            max_dev = dev
        if first_div < 0 and dev > tol * (1.0 + scale):
            first_div = t
    return EquivalenceReport(
        T=T,
        max_abs_dev=max_dev,
        first_divergence_t=first_div,
        tol=tol,
        passed=first_div < 0,
    )
