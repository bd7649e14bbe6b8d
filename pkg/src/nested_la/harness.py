"""Command-line harness tying the verification suites together.

Subcommands: run, equiv, bound, restart, linrate, regflow, claim1, all.
Each one executes its suite, prints a human-readable summary, writes a
machine-readable CSV, and exits 0 only if every check passed (2 on
configuration errors, 1 on a failed verification with the first failing
check named).

Determinism contract: all randomness flows through philox4x64 streams
keyed by explicit seeds, reductions happen in fixed sorted order, and
CSV numbers use shortest round-trip decimal formatting, so a rerun with
the same configuration reproduces byte-identical output.  The env var
NESTED_LA_THREADS caps worker threads for the independent-config sweep.

Config files are flat `key = value` text; unknown keys are rejected.
"""

from __future__ import annotations

import argparse
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import localsgd, regularizer, theory
from .optimizers import LayerStack, run
from .problems import (
    RNG_ALGORITHM,
    DecomposedProblem,
    load_problem,
    make_quadratic_suite,
    make_rng,
)


class ConfigError(ValueError):
    """Invalid or unknown configuration input (exit code 2)."""


# --- CSV emission (byte-stable) ---------------------------------------------


def format_value(v) -> str:
    """Shortest round-trip decimal for floats; plain text otherwise."""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv_rows(path, header, rows, meta: dict | None = None) -> None:
    lines = []
    tags = {"rng": RNG_ALGORITHM}
    if meta:
        tags.update(meta)
    lines.append("# " + " ".join(f"{k}={format_value(v)}" for k, v in tags.items()))
    lines.append(",".join(header))
    for row in rows:
        lines.append(",".join(format_value(v) for v in row))
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write("\n".join(lines) + "\n")


def read_csv_rows(path):
    """Read back a harness CSV: (meta dict, header list, rows of strings)."""
    meta, header, rows = {}, None, []
    with open(path) as fh:
        for raw in fh:
            line = raw.rstrip("\n")
            if line.startswith("#"):
                for tok in line[1:].split():
                    k, _, v = tok.partition("=")
                    meta[k] = v
                continue
            if header is None:
                header = line.split(",")
            elif line:
                rows.append(line.split(","))
    return meta, header, rows


# --- standard verification suite --------------------------------------------

STANDARD_PROBLEM_SEED = 612
STANDARD_START_DISTANCE = 5.0


def standard_problem(noise_sigma: float = 1.0) -> DecomposedProblem:
    """The d=8, m=4, conditioning-10 quadratic used across the suites."""
    return make_quadratic_suite(
        dim=8, m=4, noise_sigma=noise_sigma, conditioning=10.0, seed=STANDARD_PROBLEM_SEED
    )


def standard_stack(gamma: float | None = None) -> LayerStack:
    cfg = LayerStack(alphas=(0.5, 0.5), ks=(5, 5))
    return cfg.with_schedule(gamma) if gamma is not None else cfg


def standard_start(p: DecomposedProblem) -> np.ndarray:
    """Deterministic start at a fixed distance from the minimizer."""
    return p.x_star + STANDARD_START_DISTANCE * np.ones(p.dim) / math.sqrt(p.dim)


def _max_threads() -> int:
    raw = os.environ.get("NESTED_LA_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"NESTED_LA_THREADS must be a positive integer, got {raw!r}")
    if n < 1:
        raise ConfigError(f"NESTED_LA_THREADS must be >= 1, got {n}")
    return n


# --- monte carlo orchestration ----------------------------------------------


@dataclass
class MonteCarloResult:
    """Seed-averaged trajectory statistics of ||grad f(theta_t)||^2."""

    mean_per_iter: np.ndarray
    stderr_per_iter: np.ndarray
    per_seed_avg: np.ndarray

    @property
    def time_avg_mean(self) -> float:
        return float(self.per_seed_avg.mean())

    @property
    def time_avg_stderr(self) -> float:
        v = self.per_seed_avg
        if np.all(v == v[0]):
            return 0.0
        return float(v.std(ddof=1) / math.sqrt(len(v)))


def monte_carlo(
    p: DecomposedProblem,
    cfg: LayerStack,
    gamma: float,
    T: int,
    seeds,
    x0: np.ndarray,
) -> MonteCarloResult:
    """Per-iteration mean and stderr across seeds, fixed sorted reduction."""
    seeds = sorted(int(s) for s in seeds)
    if len(seeds) < 2:
        raise ConfigError("monte_carlo needs at least 2 seeds")
    rl = cfg.round_length
    if T % rl != 0:
        raise ConfigError(f"T={T} must be a multiple of the round length {rl}")
    gens = [make_rng(s) for s in seeds]
    sums, it_mean, it_err = theory.theta_round_sums(
        p, cfg, lambda r: gamma, T // rl, gens, x0, per_iteration=True
    )
    return MonteCarloResult(
        mean_per_iter=it_mean,
        stderr_per_iter=it_err,
        per_seed_avg=sums.sum(axis=1) / T,
    )


# --- random configuration sweeps (shared with the acceptance tests) ---------


def equivalence_configs(n_configs: int, seed: int, L: float):
    """Random (alphas, ks, gamma) draws kept inside the stable-step region.

    gamma is capped by 0.9 * min(gamma_*, 1/L) so the trajectories stay
    bounded and round-off cannot inflate the absolute deviation.
    """
    rng = make_rng(seed)
    out = []
    for _ in range(n_configs):
        alphas = tuple(rng.uniform(0.2, 1.0, size=2))
        ks = tuple(int(k) for k in rng.integers(2, 7, size=2))
        cfg = LayerStack(alphas=alphas, ks=ks)
        gs = theory.gamma_star(theory.BoundInputs(L=L, sigma2=0.0, gap=0.0, cfg=cfg))
        gamma = rng.uniform(0.1, 1.0) * 0.9 * min(gs, 1.0 / L)
        out.append((cfg.with_schedule(gamma), gamma))
    return out


def contraction_configs(n_configs: int, seed: int):
    """Random strongly convex problems and stacks for the rate sweep."""
    rng = make_rng(seed)
    out = []
    for i in range(n_configs):
        n = int(rng.integers(1, 4))
        dim = int(rng.integers(2, 9))
        m = int(rng.integers(1, 5))
        cond = float(np.exp(rng.uniform(np.log(1.5), np.log(50.0))))
        p = make_quadratic_suite(
            dim=dim, m=m, noise_sigma=0.0, conditioning=cond, seed=int(rng.integers(2**62))
        )
        alphas = tuple(rng.uniform(0.1, 1.0, size=n))
        ks = tuple(int(k) for k in rng.integers(1, 7, size=n))
        gamma = float(rng.uniform(0.05, 1.0)) / p.smoothness_constant
        cfg = LayerStack(alphas=alphas, ks=ks).with_schedule(gamma)
        pred = theory.nested_rate_constant(alphas, ks, theory.gd_contraction(p, gamma))
        # keep the end distance far above round-off so measured factors are clean
        rounds = 8 if pred >= 0.05 else max(2, min(8, int(-11.0 * math.log(10.0) / math.log(pred))))
        x0 = p.x_star + rng.standard_normal(dim)
        out.append((p, cfg, rounds, x0))
    return out


REGFLOW_GAMMAS = tuple(np.geomspace(1e-3, 3e-2, 8))


def regflow_suites():
    """Named (problem, stack, start) triples for the residual-order fits."""
    suites = []
    p1 = make_quadratic_suite(dim=4, m=4, noise_sigma=0.0, conditioning=8.0, seed=11)
    y1 = p1.x_star + np.array([0.9, -0.7, 0.5, 0.8])
    suites.append(("la1", p1, LayerStack(alphas=(0.6,), ks=(2,)), y1))
    p2 = make_quadratic_suite(dim=4, m=8, noise_sigma=0.0, conditioning=8.0, seed=12)
    y2 = p2.x_star + np.array([0.8, 0.6, -0.9, 0.5])
    suites.append(("la2", p2, LayerStack(alphas=(0.6, 0.7), ks=(2, 2)), y2))
    suites.append(("sgd", p2, LayerStack(alphas=(), ks=()), y2))
    return suites


ORDER_BRACKETS = {1: (1.8, 2.2), 2: (2.7, 3.3)}


# --- command implementations -------------------------------------------------


@dataclass
class CommandOutcome:
    passed: bool
    first_failure: str | None
    summary: list[str]


def cmd_run(params) -> CommandOutcome:
    p = _problem_from_params(params)
    cfg = LayerStack(
        alphas=tuple(params["alphas"]), ks=tuple(params["ks"])
    ).with_schedule(params["gamma"])
    report = run(
        p,
        cfg,
        T=params["T"],
        seed=params["seed"],
        record_theta=params["theta"],
    )
    report.write_csv(params["out"])
    return CommandOutcome(
        passed=True,
        first_failure=None,
        summary=[
            f"run: T={report.T} final loss={p.loss(report.final_state.weights[0]):.6g}"
        ],
    )


def cmd_equiv(params) -> CommandOutcome:
    p = standard_problem(noise_sigma=1.0)
    x0 = standard_start(p)
    rows, first_fail = [], None
    worst = 0.0
    for i, (cfg, gamma) in enumerate(
        equivalence_configs(params["configs"], params["seed"], p.smoothness_constant)
    ):
        rep = localsgd.verify_equivalence(p, cfg, params["T"], seed=params["seed"] + i, x0=x0)
        ok = rep.passed and rep.max_abs_dev <= 1e-10
        worst = max(worst, rep.max_abs_dev)
        rows.append(
            (
                i,
                cfg.alphas[0],
                cfg.alphas[1],
                cfg.ks[0],
                cfg.ks[1],
                gamma,
                rep.T,
                rep.max_abs_dev,
                rep.first_divergence_t,
                ok,
            )
        )
        if not ok and first_fail is None:
            first_fail = f"equiv config {i}: max_abs_dev={rep.max_abs_dev:.3e}"
    write_csv_rows(
        params["out"],
        ["config_id", "alpha1", "alpha2", "k1", "k2", "gamma", "T", "max_abs_dev",
         "first_divergence_t", "passed"],
        rows,
        meta={"seed": params["seed"]},
    )
    return CommandOutcome(
        passed=first_fail is None,
        first_failure=first_fail,
        summary=[f"equiv: {len(rows)} configs, worst deviation {worst:.3e}"],
    )


def cmd_bound(params) -> CommandOutcome:
    p = standard_problem(noise_sigma=1.0)
    x0 = standard_start(p)
    seeds = range(params["seeds"])
    rows, first_fail = [], None
    for T in params["T"]:
        cfg0 = standard_stack()
        gs = theory.gamma_star(theory.BoundInputs.from_problem(p, cfg0, x0))
        for frac in params["gamma_fractions"]:
            gamma = frac * gs
            cfg = standard_stack(gamma)
            cell = theory.empirical_bound_check(p, cfg, gamma, T, seeds, x0)
            rows.append(
                (
                    cfg.alphas[0], cfg.alphas[1], cfg.ks[0], cfg.ks[1],
                    gamma, T, cell.seeds, cell.bound, cell.empirical_mean,
                    cell.std_err, cell.passed,
                )
            )
            if not cell.passed and first_fail is None:
                first_fail = (
                    f"bound gamma={gamma:.4g} T={T}: empirical "
                    f"{cell.empirical_mean:.4g} > bound {cell.bound:.4g} + 3se"
                )
    write_csv_rows(
        params["out"],
        ["alpha1", "alpha2", "k1", "k2", "gamma", "T", "seeds", "bound",
         "empirical_mean", "std_err", "passed"],
        rows,
        meta={"seeds": params["seeds"]},
    )
    return CommandOutcome(
        passed=first_fail is None,
        first_failure=first_fail,
        summary=[f"bound: {len(rows)} cells, all within bound + 3se"
                 if first_fail is None else "bound: FAILED"],
    )


def cmd_restart(params) -> CommandOutcome:
    if params["M"] < 1:
        raise ConfigError("restart needs M >= 1 to fit a decay slope")
    p = standard_problem(noise_sigma=1.0)
    x0 = standard_start(p)
    cfg = standard_stack()
    gs = theory.gamma_star(theory.BoundInputs.from_problem(p, cfg, x0))
    sched = theory.restart_schedule(gs, params["M"])
    trace = theory.run_restarts(p, cfg, sched, range(params["seeds"]), x0)
    slope = trace.loglog_slope(first_run=min(2, params["M"] - 1))
    rows = [
        (m, sched.runs[m][0], sched.runs[m][1], trace.total_iters[m], trace.avg_grad_norm_sq[m])
        for m in range(params["M"] + 1)
    ]
    passed = slope <= -0.4
    write_csv_rows(
        params["out"],
        ["m", "rounds", "gamma", "total_iters", "avg_grad_norm_sq"],
        rows,
        meta={"seeds": params["seeds"], "slope": slope},
    )
    return CommandOutcome(
        passed=passed,
        first_failure=None if passed else f"restart: slope {slope:.3f} > -0.4",
        summary=[f"restart: M={params['M']} slope={slope:.3f} (need <= -0.4)"],
    )


def cmd_linrate(params) -> CommandOutcome:
    configs = contraction_configs(params["configs"], params["seed"])

    def one(arg):
        p, cfg, rounds, x0 = arg
        return theory.measure_contraction(p, cfg, rounds, x0)

    threads = _max_threads()
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            reports = list(pool.map(one, configs))
    else:
        reports = [one(c) for c in configs]

    rows, first_fail = [], None
    for i, ((p, cfg, rounds, _), rep) in enumerate(zip(configs, reports)):
        ok = (
            rep.distance_factor <= rep.predicted + 1e-9
            and rep.value_factor <= rep.predicted + 1e-9
        )
        rows.append(
            (
                i, cfg.n, p.dim, p.m, cfg.gamma(0),
                "|".join(repr(a) for a in cfg.alphas),
                "|".join(str(k) for k in cfg.ks),
                rounds, rep.c, rep.predicted, rep.distance_factor, rep.value_factor, ok,
            )
        )
        if not ok and first_fail is None:
            first_fail = (
                f"linrate config {i}: measured ({rep.distance_factor:.6g}, "
                f"{rep.value_factor:.6g}) exceeds predicted {rep.predicted:.6g}"
            )
    write_csv_rows(
        params["out"],
        ["config_id", "n", "dim", "m", "gamma", "alphas", "ks", "rounds", "c",
         "predicted", "measured_distance", "measured_value", "passed"],
        rows,
        meta={"seed": params["seed"]},
    )
    return CommandOutcome(
        passed=first_fail is None,
        first_failure=first_fail,
        summary=[f"linrate: {len(rows)} configs, contraction bound never exceeded"
                 if first_fail is None else "linrate: FAILED"],
    )


def cmd_regflow(params) -> CommandOutcome:
    rows, first_fail, summaries = [], None, []
    slopes_meta = {}
    for name, p, cfg, y0 in regflow_suites():
        orders = (2,) if cfg.n == 0 else (1, 2)
        for order in orders:
            res = regularizer.order_check(p, y0, cfg, params["gammas"], order)
            lo, hi = ORDER_BRACKETS[order]
            ok = lo <= res.slope <= hi
            slopes_meta[f"slope_{name}_o{order}"] = res.slope
            for g, r in zip(res.gammas, res.residuals):
                rows.append((name, res.prediction_kind, g, r))
            summaries.append(
                f"regflow {name} {res.prediction_kind}: slope={res.slope:.3f} "
                f"(need [{lo}, {hi}])"
            )
            if not ok and first_fail is None:
                first_fail = f"regflow {name} order {order}: slope {res.slope:.3f} outside [{lo}, {hi}]"
    write_csv_rows(
        params["out"],
        ["suite", "prediction_kind", "gamma", "residual_norm"],
        rows,
        meta=slopes_meta,
    )
    return CommandOutcome(passed=first_fail is None, first_failure=first_fail, summary=summaries)


def cmd_claim1(params) -> CommandOutcome:
    p = standard_problem(noise_sigma=1.0)
    x0 = standard_start(p)
    base = theory.BoundInputs.from_problem(p, standard_stack(), x0)
    res = theory.claim1_grid_check(
        base, params["T"], alpha_grid=tuple(params["grid"]), n_gamma=params["n_gamma"]
    )
    passed = res.argmin == (1.0, 1.0)
    write_csv_rows(
        params["out"],
        ["alpha1", "alpha2", "best_gamma", "min_bound"],
        res.table,
        meta={"argmin_alpha1": res.argmin[0], "argmin_alpha2": res.argmin[1], "T": params["T"]},
    )
    return CommandOutcome(
        passed=passed,
        first_failure=None if passed else f"claim1: argmin {res.argmin} != (1, 1)",
        summary=[f"claim1: argmin alpha = {res.argmin}"],
    )


# --- configuration -----------------------------------------------------------


def _problem_from_params(params) -> DecomposedProblem:
    if params.get("problem"):
        return load_problem(params["problem"])
    return standard_problem(noise_sigma=params.get("sigma", 1.0))


_COMMON = {
    "out": (str, None),  # filled per command
    "quiet": (bool, False),
}

_PARAM_SPECS = {
    "run": {
        **_COMMON,
        "problem": (str, ""),
        "sigma": (float, 1.0),
        "alphas": ("list_float", [0.5, 0.5]),
        "ks": ("list_int", [5, 5]),
        "gamma": (float, 0.05),
        "T": (int, 500),
        "seed": (int, 1),
        "theta": (bool, True),
    },
    "equiv": {**_COMMON, "configs": (int, 20), "T": (int, 10_000), "seed": (int, 77)},
    "bound": {
        **_COMMON,
        "seeds": (int, 64),
        "T": ("list_int", [10_000, 100_000]),
        "gamma_fractions": ("list_float", [0.25, 0.5, 1.0]),
    },
    "restart": {**_COMMON, "M": (int, 6), "seeds": (int, 16)},
    "linrate": {**_COMMON, "configs": (int, 100), "seed": (int, 404)},
    "regflow": {**_COMMON, "gammas": ("list_float", list(REGFLOW_GAMMAS))},
    "claim1": {
        **_COMMON,
        "T": (int, 10_000_000_000),
        "grid": ("list_float", [0.25, 0.5, 0.75, 1.0]),
        "n_gamma": (int, 4096),
    },
}

_COMMANDS = {
    "run": cmd_run,
    "equiv": cmd_equiv,
    "bound": cmd_bound,
    "restart": cmd_restart,
    "linrate": cmd_linrate,
    "regflow": cmd_regflow,
    "claim1": cmd_claim1,
}


def _coerce(name, kind, raw):
    try:
        if kind is bool or kind == bool:
            if isinstance(raw, bool):
                return raw
            if str(raw).lower() in ("1", "true", "yes"):
                return True
            if str(raw).lower() in ("0", "false", "no"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(str(raw))
        if kind is float:
            return float(str(raw))
        if kind is str:
            return str(raw)
        if kind == "list_float":
            if isinstance(raw, (list, tuple)):
                return [float(v) for v in raw]
            return [float(tok) for tok in str(raw).replace(",", " ").split()]
        if kind == "list_int":
            if isinstance(raw, (list, tuple)):
                return [int(v) for v in raw]
            return [int(tok) for tok in str(raw).replace(",", " ").split()]
    except (TypeError, ValueError):
        raise ConfigError(f"invalid value for {name!r}: {raw!r}")
    raise ConfigError(f"unhandled parameter kind for {name!r}")


def load_config_file(path) -> dict:
    values = {}
    try:
        fh = open(path)
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}")
    with fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, _, value = line.partition("=")
            values[key.strip()] = value.strip()
    return values


def resolve_params(command: str, config_path: str | None, overrides: dict) -> dict:
    spec = _PARAM_SPECS[command]
    params = {name: default for name, (_, default) in spec.items()}
    if config_path:
        for key, raw in load_config_file(config_path).items():
            if key not in spec:
                raise ConfigError(f"unknown config key {key!r} for command {command!r}")
            params[key] = _coerce(key, spec[key][0], raw)
    for key, raw in overrides.items():
        if raw is None:
            continue
        if key not in spec:
            raise ConfigError(f"unknown parameter {key!r} for command {command!r}")
        params[key] = _coerce(key, spec[key][0], raw)
    if not params.get("out"):
        params["out"] = f"{command}.csv"
    return params


# --- dispatch -----------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nested-la",
        description="Multilayer Lookahead verification suites",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    flag_types = {
        int: int,
        float: float,
        str: str,
        bool: str,
        "list_float": str,
        "list_int": str,
    }
    for name, spec in _PARAM_SPECS.items():
        sp = sub.add_parser(name, help=f"{name} verification suite")
        for pname, (kind, _) in spec.items():
            if pname == "quiet":
                sp.add_argument("--quiet", action="store_true", default=None)
            else:
                sp.add_argument(f"--{pname}", type=flag_types[kind], default=None)
        sp.add_argument("--config", type=str, default=None)
    sp = sub.add_parser("all", help="run every verification suite with defaults")
    sp.add_argument("--out", type=str, default=None)
    sp.add_argument("--quiet", action="store_true", default=None)
    return parser


def cli_dispatch(argv) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else 2

    ns = vars(args)
    command = ns.pop("command")
    config_path = ns.pop("config", None)
    quiet = bool(ns.pop("quiet", None))

    try:
        if command == "all":
            out_dir = Path(ns.get("out") or "nested_la_results")
            failures, lines = [], []
            for name in ("equiv", "bound", "restart", "linrate", "regflow", "claim1"):
                params = resolve_params(name, None, {"out": str(out_dir / f"{name}.csv")})
                outcome = _COMMANDS[name](params)
                lines.extend(outcome.summary)
                if not outcome.passed:
                    failures.append(outcome.first_failure or name)
            if not quiet:
                for line in lines:
                    print(line)
            if failures:
                print(f"FAILED: {failures[0]}", file=sys.stderr)
                return 1
            if not quiet:
                print("all suites passed")
            return 0

        params = resolve_params(command, config_path, ns)
        outcome = _COMMANDS[command](params)
        if not quiet:
            for line in outcome.summary:
                print(line)
        if not outcome.passed:
            print(f"FAILED: {outcome.first_failure}", file=sys.stderr)
            return 1
        return 0
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(cli_dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
