"""Computable forms of the convergence bounds, schedules, and rate constants.

For a 2-layer stack (a1, a2, k1, k2) on an L-smooth loss with gradient
noise variance sigma^2, the feasible-step constraint is the quadratic

    g(gamma) = 1 - A*gamma - B*gamma^2 >= 0,
    A = a1*a2*L,
    B = 2 L^2 k1^2 ((1-a1)^2 a2^2 + 2 (1-a2)^2 + 2 a1^2 (1-a2)^2 k2^2),

whose unique positive root gamma_* has the stable closed form
2 / (A + sqrt(A^2 + 4B)).  The constant-step bound on the running
average of E||grad f(theta_t)||^2 is the three-term sum

    2 gap / (gamma a1 a2 T) + gamma a1 a2 L sigma^2
      + 2 gamma^2 L^2 sigma^2 k1 ((1-a1)^2 a2^2 + 2 (1-a2)^2
                                   + (4/3) a1^2 (1-a2)^2 k2^2),

valid for gamma <= gamma_*.  The k2^2 coefficient intentionally differs
between the two roles: 2 in the feasibility constraint, 4/3 in the
bound.

Monte Carlo estimates of the expectations run seed-batched with exact
gradients evaluated at the aggregate theta_t, and reductions follow a
fixed sorted-seed order for reproducibility.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .optimizers import LayerStack, MultilayerState, RunReport, mla_step, theta_weights
from .problems import DecomposedProblem, full_grad, make_rng


@dataclass(frozen=True)
class BoundInputs:
    """Constants entering the 2-layer bounds.

    gap is f(theta_0) - f_inf; for quadratic suites f_inf is the exact
    minimum value, so gap comes from the closed-form suboptimality.
    """

    L: float
    sigma2: float
    gap: float
    cfg: LayerStack

    def __post_init__(self):
        if not (self.L > 0.0 and math.isfinite(self.L)):
            raise ValueError(f"L must be positive and finite, got {self.L}")
        if not (self.sigma2 >= 0.0 and math.isfinite(self.sigma2)):
            raise ValueError(f"sigma2 must be >= 0 and finite, got {self.sigma2}")
        if not (self.gap >= 0.0 and math.isfinite(self.gap)):
            raise ValueError(f"gap must be >= 0 and finite, got {self.gap}")
        if self.cfg.n != 2:
            raise ValueError("bounds are stated for exactly two layers")

    @classmethod
    def from_problem(
        cls, p: DecomposedProblem, cfg: LayerStack, theta0: np.ndarray
    ) -> "BoundInputs":
        return cls(
            L=p.smoothness_constant,
            sigma2=p.noise_sigma**2,
            gap=p.suboptimality(theta0),
            cfg=cfg,
        )

    @property
    def alphas(self) -> tuple[float, float]:
        return self.cfg.alphas  # type: ignore[return-value]

    @property
    def ks(self) -> tuple[int, int]:
        return self.cfg.ks  # type: ignore[return-value]


def _constraint_coeffs(b: BoundInputs) -> tuple[float, float]:
    a1, a2 = b.alphas
    k1, k2 = b.ks
    A = a1 * a2 * b.L
    B = (
        2.0
        * b.L**2
        * k1**2
        * ((1 - a1) ** 2 * a2**2 + 2 * (1 - a2) ** 2 + 2 * a1**2 * (1 - a2) ** 2 * k2**2)
    )
    return A, B


def feasibility_margin(b: BoundInputs, gamma: float) -> float:
    """g(gamma) = 1 - A gamma - B gamma^2; feasible iff >= 0."""
    A, B = _constraint_coeffs(b)
    return 1.0 - A * gamma - B * gamma**2


def gamma_star(b: BoundInputs) -> float:
    """Unique positive root of the feasibility constraint.

    g(0) = 1 and g is strictly decreasing for gamma >= 0, so the root
    always exists; B == 0 (all alphas 1) degenerates to 1/A.
    """
    A, B = _constraint_coeffs(b)
    return 2.0 / (A + math.sqrt(A * A + 4.0 * B))


def _bound_terms(b: BoundInputs, gamma, T):
    a1, a2 = b.alphas
    k1, k2 = b.ks
    gamma = np.asarray(gamma, dtype=float)
    first = 2.0 * b.gap / (gamma * a1 * a2 * T)
    second = gamma * a1 * a2 * b.L * b.sigma2
    coeff = (1 - a1) ** 2 * a2**2 + 2 * (1 - a2) ** 2 + (4.0 / 3.0) * a1**2 * (1 - a2) ** 2 * k2**2
    third = 2.0 * gamma**2 * b.L**2 * b.sigma2 * k1 * coeff
    return first, second, third


def theorem2_bound(b: BoundInputs, gamma: float, T: int) -> float:
    """Constant-step bound on (1/T) sum_t E||grad f(theta_t)||^2.

    Requires gamma within the feasible region (a hair of round-off slack
    is tolerated so the corollary step size at its threshold is legal)
    and T divisible by k1*k2.
    """
    if gamma <= 0.0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    gs = gamma_star(b)
    if gamma > gs * (1.0 + 1e-12):
        raise ValueError(f"gamma={gamma} exceeds the feasible root gamma_*={gs}")
    k1, k2 = b.ks
    if T < 1 or T % (k1 * k2) != 0:
        raise ValueError(f"T={T} must be a positive multiple of k1*k2={k1 * k2}")
    first, second, third = _bound_terms(b, gamma, T)
    return float(first + second + third)


def corollary2_threshold(b: BoundInputs) -> float:
    """Smallest horizon for which the variance-adapted step is feasible."""
    if b.sigma2 <= 0.0:
        raise ValueError("threshold requires sigma2 > 0")
    a1, a2 = b.alphas
    return 2.0 * b.gap / (a1**2 * a2**2 * b.L * b.sigma2 * gamma_star(b) ** 2)


def corollary2_lr(b: BoundInputs, T: float) -> tuple[float, bool]:
    """Variance-adapted step gamma = sqrt(2 gap / (T L)) / (a1 a2 sigma).

    Returns (gamma, feasible) with feasible true iff T reaches the
    threshold; at the threshold gamma equals gamma_* up to round-off,
    and feasibility then implies gamma <= gamma_* (asserted).
    """
    if b.sigma2 <= 0.0:
        raise ValueError("the variance-adapted step divides by sigma")
    if T <= 0:
        raise ValueError("T must be positive")
    a1, a2 = b.alphas
    sigma = math.sqrt(b.sigma2)
    gamma = math.sqrt(2.0 * b.gap / (T * b.L)) / (a1 * a2 * sigma)
    feasible = T >= corollary2_threshold(b) * (1.0 - 1e-12)
    if feasible and gamma > gamma_star(b) * (1.0 + 1e-9):
        raise AssertionError("feasible step exceeded gamma_*; inconsistent inputs")
    return gamma, feasible


@dataclass
class Claim1Result:
    argmin: tuple[float, float]
    table: list[tuple[float, float, float, float]]  # (a1, a2, best_gamma, best_bound)


def claim1_grid_check(
    b: BoundInputs,
    T: int,
    alpha_grid: tuple[float, ...] = (0.25, 0.5, 0.75, 1.0),
    n_gamma: int = 4096,
) -> Claim1Result:
    """Grid-minimize the constant-step bound over gamma per alpha pair.

    For each (a1, a2) on the grid the bound is minimized over a log
    gamma grid on (0, gamma_*] augmented with the analytic stationary
    point of the first two terms; the returned argmin over alpha pairs
    is expected at (1, 1) for large T.
    """
    table = []
    for a1 in alpha_grid:
        for a2 in alpha_grid:
            bi = BoundInputs(
                L=b.L, sigma2=b.sigma2, gap=b.gap,
                cfg=LayerStack(alphas=(a1, a2), ks=b.ks),
            )
            gs = gamma_star(bi)
            grid = np.geomspace(gs * 1e-8, gs, n_gamma)
            if b.sigma2 > 0.0:
                stationary = math.sqrt(2.0 * b.gap / (T * b.L * b.sigma2)) / (a1 * a2)
                if stationary <= gs:
                    grid = np.append(grid, stationary)
            first, second, third = _bound_terms(bi, grid, T)
            values = first + second + third
            j = int(np.argmin(values))
            table.append((a1, a2, float(grid[j]), float(values[j])))
    best = min(table, key=lambda row: row[3])
    return Claim1Result(argmin=(best[0], best[1]), table=table)


def theorem1_weighted_average(report: RunReport, cfg: LayerStack) -> np.ndarray:
    """Step-size-weighted running averages of the recorded grad norms.

    W_R = sum_{r<R} gamma_r * S_r / (k1 k2 * sum_{r<R} gamma_r) with S_r
    the within-round sum of ||grad f(theta)||^2, for R = 1..R_max.  The
    schedule must be constant within every round.
    """
    rl = cfg.round_length
    if report.T % rl != 0:
        raise ValueError(f"run length {report.T} is not a whole number of rounds")
    R = report.T // rl
    gammas = report.gamma.reshape(R, rl)
    if not np.all(gammas == gammas[:, :1]):
        raise ValueError("learning rate is not constant within rounds")
    gamma_r = gammas[:, 0]
    S_r = report.grad_norm_sq.reshape(R, rl).sum(axis=1)
    num = np.cumsum(gamma_r * S_r)
    den = rl * np.cumsum(gamma_r)
    return num / den


@dataclass(frozen=True)
class RestartSchedule:
    """Geometric restart plan: run m performs 4^m rounds at gamma_*/2^m."""

    runs: tuple[tuple[int, float], ...]

    @property
    def total_rounds(self) -> int:
        return sum(r for r, _ in self.runs)


def restart_schedule(gamma_star_value: float, M: int) -> RestartSchedule:
    if M < 0:
        raise ValueError("M must be >= 0")
    if gamma_star_value <= 0.0:
        raise ValueError("gamma_star must be positive")
    runs = tuple((4**m, gamma_star_value / 2**m) for m in range(M + 1))
    return RestartSchedule(runs=runs)


def linear_rate_constant(alpha: float, k: int, c: float) -> float:
    """Per-round factor 1 - alpha (1 - c^k) of the wrapped optimizer."""
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"alpha must be in (0, 1], got {alpha}")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if not 0.0 <= c < 1.0:
        raise ValueError(f"c must be in [0, 1), got {c}")
    return 1.0 - alpha * (1.0 - c**k)


def nested_rate_constant(alphas, ks, c: float) -> float:
    """Per-round factor of the n-layer wrap around a c-contracting step."""
    rho = c
    for alpha, k in zip(alphas, ks):
        rho = linear_rate_constant(alpha, k, rho)
    return rho


def gd_contraction(p: DecomposedProblem, gamma: float) -> float:
    """Worst-case per-step distance contraction of exact GD."""
    L, mu = p.smoothness_constant, p.strong_convexity
    return max(abs(1.0 - gamma * mu), abs(1.0 - gamma * L))


@dataclass
class ContractionReport:
    rounds: int
    c: float
    predicted: float
    distance_factor: float
    value_factor: float


def measure_contraction(
    p: DecomposedProblem, cfg: LayerStack, rounds: int, x0: np.ndarray | None = None
) -> ContractionReport:
    """Per-round contraction of the outer weights on a strongly convex suite.

    Runs the deterministic optimizer and returns geometric-mean per-round
    factors of the distance to x* and of the loss gap, next to the nested
    1 - alpha (1 - c^k) prediction with c the worst-case GD step factor.
    Requires sigma == 0, strong convexity, a constant schedule with
    gamma < 2/L, and rounds >= 1.
    """
    if p.noise_sigma != 0.0:
        raise ValueError("contraction measurement requires exact gradients (sigma == 0)")
    if p.strong_convexity <= 0.0:
        raise ValueError("contraction measurement requires a strongly convex problem")
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    gamma = cfg.gamma(0)
    if not gamma < 2.0 / p.smoothness_constant:
        raise ValueError("inner GD does not contract: need gamma < 2/L")
    if x0 is None:
        x0 = np.zeros(p.dim)
    x0 = np.asarray(x0, dtype=float)
    if np.allclose(x0, p.x_star):
        raise ValueError("start coincides with the minimizer; factors are undefined")

    c = gd_contraction(p, gamma)
    predicted = nested_rate_constant(cfg.alphas, cfg.ks, c)

    state = MultilayerState.initial(x0, cfg.n)
    rl = cfg.round_length
    for t in range(rounds * rl):
        if cfg.gamma(t) != gamma:
            raise ValueError("contraction measurement requires a constant schedule")
        mla_step(state, cfg, full_grad(p, state.weights[0]))
    y_end = state.weights[cfg.n]

    d0 = float(np.linalg.norm(x0 - p.x_star))
    dR = float(np.linalg.norm(y_end - p.x_star))
    v0 = p.suboptimality(x0)
    vR = p.suboptimality(y_end)
    # telescoping: the geometric mean of per-round ratios is (end/start)^(1/rounds)
    dist_factor = (dR / d0) ** (1.0 / rounds)
    value_factor = (vR / v0) ** (1.0 / rounds)
    return ContractionReport(
        rounds=rounds,
        c=c,
        predicted=predicted,
        distance_factor=dist_factor,
        value_factor=value_factor,
    )


# --- seed-batched simulation of the 2-layer aggregate -----------------------


def theta_round_sums(
    p: DecomposedProblem,
    cfg: LayerStack,
    gamma_of_round,
    rounds: int,
    gens: list[np.random.Generator],
    x0: np.ndarray,
    per_iteration: bool = False,
):
    """Per-seed per-round sums of ||grad f(theta_t)||^2, exact gradients.

    Simulates all noise streams simultaneously (one column per seed);
    gamma_of_round maps the round index to the step size used for every
    iteration of that round.  Generators are consumed in place so calls
    can be chained (restart schedules draw fresh noise per run).

    Returns sums of shape (S, rounds); with per_iteration also the
    seed-mean and seed-stderr of the squared gradient norm per iteration.
    """
    a1, a2 = cfg.alphas
    k1, k2 = cfg.ks
    rl = k1 * k2
    S = len(gens)
    H = p.mean_hessian
    rb = p.mean_rhs
    w0, w1, w2 = theta_weights(cfg)
    X = np.tile(np.asarray(x0, dtype=float), (S, 1))
    Y = X.copy()
    Z = X.copy()
    sums = np.zeros((S, rounds))
    it_mean = np.empty(rounds * rl) if per_iteration else None
    it_err = np.empty(rounds * rl) if per_iteration else None
    sigma = p.noise_sigma
    scale = sigma / math.sqrt(p.dim)
    chunk = max(1, 4096 // rl)

    r = 0
    while r < rounds:
        nr = min(chunk, rounds - r)
        if sigma > 0.0:
            eta = np.stack([g.standard_normal((nr * rl, p.dim)) for g in gens])
        for rr in range(nr):
            gamma = float(gamma_of_round(r + rr))
            for j in range(rl):
                theta = w0 * X + w1 * Y + w2 * Z
                gt = theta @ H - rb
                sq = np.einsum("sd,sd->s", gt, gt)
                sums[:, r + rr] += sq
                if per_iteration:
                    t = (r + rr) * rl + j
                    it_mean[t] = sq.mean()
                    if np.all(sq == sq[0]):
                        it_err[t] = 0.0
                    else:
                        it_err[t] = sq.std(ddof=1) / math.sqrt(S)
                g = X @ H - rb
                if sigma > 0.0:
                    g += scale * eta[:, rr * rl + j, :]
                X -= gamma * g
                jj = j + 1
                if jj % k1 == 0:
                    Y *= 1.0 - a1
                    Y += a1 * X
                    X[:] = Y
                    if jj % rl == 0:
                        Z *= 1.0 - a2
                        Z += a2 * Y
                        Y[:] = Z
                        X[:] = Z
        r += nr

    if per_iteration:
        return sums, it_mean, it_err
    return sums


@dataclass
class BoundCheck:
    """One empirical-vs-bound cell of the constant-step verification."""

    gamma: float
    T: int
    seeds: int
    bound: float
    empirical_mean: float
    std_err: float

    @property
    def passed(self) -> bool:
        return self.empirical_mean <= self.bound + 3.0 * self.std_err


def empirical_bound_check(
    p: DecomposedProblem,
    cfg: LayerStack,
    gamma: float,
    T: int,
    seeds,
    x0: np.ndarray,
) -> BoundCheck:
    """Seed-averaged estimate of the running mean, next to its upper bound."""
    rl = cfg.round_length
    if T % rl != 0:
        raise ValueError(f"T={T} must be a multiple of the round length {rl}")
    seeds = sorted(int(s) for s in seeds)
    gens = [make_rng(s) for s in seeds]
    sums = theta_round_sums(p, cfg, lambda r: gamma, T // rl, gens, x0)
    per_seed = sums.sum(axis=1) / T
    mean = float(per_seed.mean())
    if np.all(per_seed == per_seed[0]):
        err = 0.0
    else:
        err = float(per_seed.std(ddof=1) / math.sqrt(len(seeds)))
    b = BoundInputs.from_problem(p, cfg, x0)
    return BoundCheck(
        gamma=gamma,
        T=T,
        seeds=len(seeds),
        bound=theorem2_bound(b, gamma, T),
        empirical_mean=mean,
        std_err=err,
    )


@dataclass
class RestartTrace:
    """Cumulative averages after each run of a restart schedule."""

    total_iters: np.ndarray
    avg_grad_norm_sq: np.ndarray

    def loglog_slope(self, first_run: int = 2) -> float:
        """Least-squares slope of log avg vs log iters from first_run on."""
        x = np.log(self.total_iters[first_run:])
        y = np.log(self.avg_grad_norm_sq[first_run:])
        if len(x) < 2:
            raise ValueError("slope fit needs at least two runs after burn-in")
        return float(np.polyfit(x, y, 1)[0])


def run_restarts(
    p: DecomposedProblem,
    cfg: LayerStack,
    schedule: RestartSchedule,
    seeds,
    x0: np.ndarray,
) -> RestartTrace:
    """Execute the restart schedule; every run restarts from x0.

    Noise streams continue across runs (fresh draws each run), and the
    reported average at run m covers all iterations of runs 0..m.
    """
    seeds = sorted(int(s) for s in seeds)
    gens = [make_rng(s) for s in seeds]
    rl = cfg.round_length
    cum = np.zeros(len(gens))
    iters = 0
    totals, avgs = [], []
    for rounds_m, gamma_m in schedule.runs:
        sums = theta_round_sums(p, cfg, lambda r: gamma_m, rounds_m, gens, x0)
        cum += sums.sum(axis=1)
        iters += rounds_m * rl
        totals.append(iters)
        avgs.append(float(cum.mean()) / iters)
    return RestartTrace(total_iters=np.array(totals), avg_grad_norm_sq=np.array(avgs))
