"""Implicit-regularization diagnostics: gradient statistics, modified
flows, permutation-averaged epoch iterates, and order-of-error fits.

Over the m fixed components, two scalar statistics drive everything:

    AN(y) = mean_i ||grad f_i(y)||^2          (average norm squared)
    AI(y) = mean_{i != j} <grad f_i, grad f_j> (average inner product)

with gradients ANG = grad AN and AIG = grad AI, all exact for quadratic
components.  They satisfy ||grad f(y)||^2 == (AN + (m-1) AI) / m.

A first-order optimizer with small constant step gamma tracks the flow
of a perturbed loss f + an_coef * AN + ai_coef * AI; the coefficients
depend on the optimizer (plain SGD, full-batch GD, or an n-layer stack
with shrink beta = prod alpha_p).  The epoch-end iterate, averaged over
all orderings of the components, matches the flow at time beta*gamma*m
up to third order in gamma, which order_check verifies by fitting the
residual decay slope on a log-log grid.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .optimizers import LayerStack
from .problems import DecomposedProblem, full_grad, make_rng


class IntegrationError(RuntimeError):
    """Step-halving failed to reach the requested tolerance."""


class RegimeError(RuntimeError):
    """Residuals are outside the asymptotic regime; the fit is meaningless."""


def _component_grads(p: DecomposedProblem, y: np.ndarray) -> np.ndarray:
    """All m component gradients at y, shape (m, d)."""
    return np.einsum("mij,mj->mi", p.A, np.asarray(y, dtype=float) - p.c)


def an(p: DecomposedProblem, y: np.ndarray, mode: str = "exact",
       samples: int | None = None, seed: int = 0):
    """Average squared component-gradient norm at y.

    Exact mode returns the mean over the fixed components; mc mode
    samples component indices uniformly and returns (estimate, stderr).
    """
    if mode == "exact":
        g = _component_grads(p, y)
        return float(np.mean(np.einsum("mi,mi->m", g, g)))
    if mode != "mc":
        raise ValueError(f"mode must be 'exact' or 'mc', got {mode!r}")
    if samples is None or samples < 2:
        raise ValueError("mc mode needs samples >= 2")
    g = _component_grads(p, y)
    norms = np.einsum("mi,mi->m", g, g)
    idx = make_rng(seed).integers(0, p.m, size=samples)
    vals = norms[idx]
    return float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(samples))


def ai(p: DecomposedProblem, y: np.ndarray) -> float:
    """Average pairwise inner product of component gradients at y."""
    if p.m < 2:
        raise ValueError("the pairwise average needs at least two components")
    g = _component_grads(p, y)
    total = g.sum(axis=0)
    sum_sq = float(np.einsum("mi,mi->", g, g))
    return (float(total @ total) - sum_sq) / (p.m * (p.m - 1))


def ang(p: DecomposedProblem, y: np.ndarray) -> np.ndarray:
    """Gradient of AN: (2/m) sum_i A_i grad f_i(y) (quadratics are exact)."""
    g = _component_grads(p, y)
    return 2.0 * np.einsum("mij,mj->i", p.A, g) / p.m


def aig(p: DecomposedProblem, y: np.ndarray) -> np.ndarray:
    """Gradient of AI: (2/(m(m-1))) sum_i A_i (G - grad f_i), G = sum_j grad f_j."""
    if p.m < 2:
        raise ValueError("the pairwise average needs at least two components")
    g = _component_grads(p, y)
    G = g.sum(axis=0)
    cross = p.A.sum(axis=0) @ G - np.einsum("mij,mj->i", p.A, g)
    return 2.0 * cross / (p.m * (p.m - 1))


@dataclass(frozen=True)
class FlowCoefficients:
    """Perturbation coefficients of the modified flow.

    The flow gradient is grad f + an_coef * ANG + ai_coef * AIG
    (ai_coef carries its sign).  base_step is the optimizer step gamma
    and shrink the per-layer progress factor beta = prod alpha_p.
    """

    an_coef: float
    ai_coef: float
    base_step: float
    shrink: float


def flow_coefficients(cfg: LayerStack, gamma: float, m: int, gd: bool = False) -> FlowCoefficients:
    """Coefficients for an n-layer stack (n == 0 is plain SGD).

    The epoch must consist of whole rounds (m divisible by prod k_p).
    With gd=True the full-batch coefficients are returned instead:
    an_coef = gamma/(4m) and ai_coef = +gamma (m-1)/(4m).
    """
    if gamma < 0.0:
        raise ValueError(f"gamma must be >= 0, got {gamma}")
    if m < 1:
        raise ValueError("m must be >= 1")
    if gd:
        return FlowCoefficients(
            an_coef=gamma / (4.0 * m),
            ai_coef=gamma * (m - 1) / (4.0 * m),
            base_step=gamma,
            shrink=1.0,
        )
    if m % cfg.round_length != 0:
        raise ValueError(
            f"m={m} must be divisible by the round length {cfg.round_length}"
        )
    beta = math.prod(cfg.alphas) if cfg.n else 1.0
    ai_sum = 0.0
    prod_a, prod_k = 1.0, 1
    for alpha, k in zip(cfg.alphas, cfg.ks):
        prod_k *= k
        ai_sum += (1.0 - alpha) * prod_a * (prod_k - 1)
        prod_a *= alpha
    return FlowCoefficients(
        an_coef=gamma * beta / 4.0,
        ai_coef=-gamma * ai_sum / 4.0,
        base_step=gamma,
        shrink=beta,
    )


def modified_flow_grad(p: DecomposedProblem, y: np.ndarray, coefs: FlowCoefficients) -> np.ndarray:
    """Gradient of the perturbed loss f + an_coef AN + ai_coef AI."""
    g = full_grad(p, y)
    if coefs.an_coef != 0.0:
        g = g + coefs.an_coef * ang(p, y)
    if coefs.ai_coef != 0.0:
        g = g + coefs.ai_coef * aig(p, y)
    return g


def _epoch_final_weights(
    p: DecomposedProblem, y0: np.ndarray, gamma: float, cfg: LayerStack, perms: np.ndarray
) -> np.ndarray:
    """Outer weights after one epoch for every permutation, shape (P, d).

    One epoch is m iterations of the n-layer cascade with the exact
    component gradients taken in permuted order, no added noise.
    """
    P, m = perms.shape
    n = cfg.n
    W = [np.tile(np.asarray(y0, dtype=float), (P, 1)) for _ in range(n + 1)]
    periods = cfg.sync_periods
    for t in range(m):
        idx = perms[:, t]
        g = np.einsum("pij,pj->pi", p.A[idx], W[0] - p.c[idx])
        W[0] = W[0] - gamma * g
        tt = t + 1
        for lvl, period in enumerate(periods, start=1):
            if tt % period != 0:
                break
            a = cfg.alphas[lvl - 1]
            W[lvl] = (1.0 - a) * W[lvl] + a * W[lvl - 1]
            for q in range(lvl):
                W[q] = W[lvl].copy()
    return W[n]


_EXACT_ENUMERATION_LIMIT = 8


def expected_epoch_iterate(
    p: DecomposedProblem,
    y0: np.ndarray,
    gamma: float,
    cfg: LayerStack,
    mode: str = "exact",
    samples: int | None = None,
    seed: int = 0,
):
    """Epoch-end outer weights averaged over component orderings.

    Exact mode enumerates all m! permutations (m <= 8) and reduces them
    in lexicographic order; mc mode draws uniformly random permutations
    from a seeded stream and returns (mean, per-coordinate stderr).
    """
    m = p.m
    if m % cfg.round_length != 0:
        raise ValueError(f"m={m} must be divisible by the round length {cfg.round_length}")
    if gamma < 0.0:
        raise ValueError("gamma must be >= 0")
    if mode == "exact":
        if m > _EXACT_ENUMERATION_LIMIT:
            raise ValueError(
                f"exact enumeration of {m}! permutations refused (m > {_EXACT_ENUMERATION_LIMIT})"
            )
        perms = np.array(list(itertools.permutations(range(m))), dtype=np.intp)
        finals = _epoch_final_weights(p, y0, gamma, cfg, perms)
        return finals.mean(axis=0)
    if mode != "mc":
        raise ValueError(f"mode must be 'exact' or 'mc', got {mode!r}")
    if samples is None or samples < 2:
        raise ValueError("mc mode needs samples >= 2")
    rng = make_rng(seed)
    perms = rng.permuted(np.tile(np.arange(m, dtype=np.intp), (samples, 1)), axis=1)
    finals = _epoch_final_weights(p, y0, gamma, cfg, perms)
    return finals.mean(axis=0), finals.std(axis=0, ddof=1) / math.sqrt(samples)


def integrate_modified_flow(
    p: DecomposedProblem,
    y0: np.ndarray,
    coefs: FlowCoefficients,
    horizon: float,
    tol: float | None = None,
) -> np.ndarray:
    """Solve dy/dt = -(modified flow gradient) from y0 for the horizon.

    Classical fourth-order single-step integration; the step count
    doubles until successive solutions differ by at most tol, which
    defaults to 1e-3 * gamma^3 * ||grad f(y0)||.  Failure to converge
    raises IntegrationError rather than returning a degraded answer.
    """
    y0 = np.asarray(y0, dtype=float)
    if horizon < 0.0:
        raise ValueError("horizon must be >= 0")
    if horizon == 0.0:
        return y0.copy()
    if tol is None:
        tol = 1e-3 * coefs.base_step**3 * float(np.linalg.norm(full_grad(p, y0)))
    if tol <= 0.0:
        raise ValueError("cannot control the integrator error with tol <= 0")

    def rk4(n_steps: int) -> np.ndarray:
        h = horizon / n_steps
        y = y0.copy()
        for _ in range(n_steps):
            k1 = -modified_flow_grad(p, y, coefs)
            k2 = -modified_flow_grad(p, y + 0.5 * h * k1, coefs)
            k3 = -modified_flow_grad(p, y + 0.5 * h * k2, coefs)
            k4 = -modified_flow_grad(p, y + h * k3, coefs)
            y = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        return y

    n = 8
    coarse = rk4(n)
    while n <= 2**20:
        n *= 2
        fine = rk4(n)
        if float(np.linalg.norm(fine - coarse)) <= tol:
            return fine
        coarse = fine
    raise IntegrationError(f"step halving did not reach tol={tol} within {n} steps")


@dataclass
class OrderCheckResult:
    prediction_kind: str  # "first-order" or "modified-flow"
    gammas: np.ndarray
    residuals: np.ndarray
    slope: float


def order_check(
    p: DecomposedProblem,
    y0: np.ndarray,
    cfg: LayerStack,
    gammas,
    order: int,
    mode: str = "exact",
    samples: int | None = None,
    seed: int = 0,
) -> OrderCheckResult:
    """Fit the decay slope of the expansion residual on a log-log grid.

    order == 1 compares against the linearized epoch step
    y0 - gamma*beta*m*grad f(y0) (residual expected O(gamma^2));
    order == 2 against the integrated modified flow (O(gamma^3)).
    The gamma list must be decreasing, span at least 1.2 decades, and
    keep the largest residual within 1e-2 * ||y0||; residuals must
    shrink monotonically with gamma or RegimeError is raised.
    """
    gammas = np.asarray(sorted(gammas, reverse=True), dtype=float)
    if np.any(gammas <= 0.0) or len(gammas) < 3:
        raise ValueError("need at least three positive gamma values")
    if math.log10(gammas[0] / gammas[-1]) < 1.2:
        raise ValueError("gamma list must span at least 1.2 decades")
    if order not in (1, 2):
        raise ValueError("order must be 1 or 2")
    y0 = np.asarray(y0, dtype=float)
    beta = math.prod(cfg.alphas) if cfg.n else 1.0
    m = p.m
    g0 = full_grad(p, y0)

    residuals = np.empty_like(gammas)
    for i, gamma in enumerate(gammas):
        est = expected_epoch_iterate(p, y0, gamma, cfg, mode=mode, samples=samples, seed=seed)
        if mode == "mc":
            est = est[0]
        if order == 1:
            pred = y0 - gamma * beta * m * g0
        else:
            coefs = flow_coefficients(cfg, gamma, m)
            pred = integrate_modified_flow(p, y0, coefs, beta * gamma * m)
        residuals[i] = float(np.linalg.norm(est - pred))

    if residuals[0] > 1e-2 * float(np.linalg.norm(y0)):
        raise RegimeError(
            f"largest residual {residuals[0]:.3e} is outside the asymptotic regime"
        )
    if np.any(np.diff(residuals) >= 0.0):
        raise RegimeError("residuals are not monotone in gamma; no clean asymptotic regime")
    slope = float(np.polyfit(np.log(gammas), np.log(residuals), 1)[0])
    kind = "first-order" if order == 1 else "modified-flow"
    return OrderCheckResult(prediction_kind=kind, gammas=gammas, residuals=residuals, slope=slope)
