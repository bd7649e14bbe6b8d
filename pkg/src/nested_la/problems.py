"""Synthetic decomposed quadratic objectives with exact gradients.

A problem is a loss f(x) = (1/m) * sum_i f_i(x) built from m quadratic
components f_i(x) = 0.5 * (x - c_i)^T A_i (x - c_i) with symmetric
positive-semidefinite Hessians A_i.  Everything a verification suite
needs is available in closed form:

  * smoothness constant  L  = lambda_max of the mean Hessian,
  * strong convexity     mu = lambda_min of the mean Hessian,
  * unique minimizer     x* (when mu > 0) and its loss value,
  * exact per-component and full gradients.

Stochastic gradients add isotropic Gaussian noise with per-coordinate
variance sigma^2 / d, so E||noise||^2 == sigma^2 exactly and the noise
is mean-zero and independent across draws.

All randomness runs through the counter-based Philox generator so that
noise tapes are reproducible bit-for-bit from a 64-bit seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

RNG_ALGORITHM = "philox4x64"


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based generator for a 64-bit seed (independent per key)."""
    return np.random.Generator(np.random.Philox(key=seed))


@dataclass(frozen=True, eq=False)
class DecomposedProblem:
    """Quadratic decomposed loss with known constants.

    Attributes:
        A: component Hessians, shape (m, d, d), each symmetric PSD.
        c: component centers, shape (m, d); f_i is minimized at c_i.
        noise_sigma: sigma >= 0, total standard deviation budget of the
            additive gradient noise (E||noise||^2 == sigma^2).

    Instances are immutable (arrays are marked read-only) and safe to
    share across threads; each noisy-gradient stream owns its generator.
    """

    A: np.ndarray
    c: np.ndarray
    noise_sigma: float

    def __post_init__(self):
        A = np.asarray(self.A, dtype=float)
        c = np.asarray(self.c, dtype=float)
        if A.ndim != 3 or A.shape[1] != A.shape[2]:
            raise ValueError(f"A must have shape (m, d, d), got {A.shape}")
        if c.shape != A.shape[:2]:
            raise ValueError(f"c must have shape (m, d), got {c.shape}")
        if A.shape[0] < 1 or A.shape[1] < 1:
            raise ValueError("need m >= 1 components and dim >= 1")
        if not (self.noise_sigma >= 0.0):
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if not np.allclose(A, np.swapaxes(A, 1, 2), atol=1e-12):
            raise ValueError("component Hessians must be symmetric")
        A.setflags(write=False)
        c.setflags(write=False)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "noise_sigma", float(self.noise_sigma))

    @property
    def m(self) -> int:
        return self.A.shape[0]

    @property
    def dim(self) -> int:
        return self.A.shape[1]

    @cached_property
    def mean_hessian(self) -> np.ndarray:
        H = self.A.mean(axis=0)
        H = 0.5 * (H + H.T)
        H.setflags(write=False)
        return H

    @cached_property
    def mean_rhs(self) -> np.ndarray:
        # full_grad(x) = x @ mean_hessian - mean_rhs
        r = np.einsum("mij,mj->i", self.A, self.c) / self.m
        r.setflags(write=False)
        return r

    @cached_property
    def smoothness_constant(self) -> float:
        """L such that ||grad f(x) - grad f(y)|| <= L ||x - y||."""
        return float(np.linalg.eigvalsh(self.mean_hessian)[-1])

    @cached_property
    def strong_convexity(self) -> float:
        """mu = smallest eigenvalue of the mean Hessian (0 if only PSD)."""
        return float(max(np.linalg.eigvalsh(self.mean_hessian)[0], 0.0))

    @cached_property
    def x_star(self) -> np.ndarray:
        """Minimizer of f, from the normal equations of the mean quadratic."""
        x = np.linalg.solve(self.mean_hessian, self.mean_rhs)
        x.setflags(write=False)
        return x

    @cached_property
    def f_star(self) -> float:
        return self.loss(self.x_star)

    def component_loss(self, i: int, x: np.ndarray) -> float:
        d = x - self.c[i]
        return float(0.5 * d @ self.A[i] @ d)

    def loss(self, x: np.ndarray) -> float:
        return float(
            np.mean([self.component_loss(i, x) for i in range(self.m)])
        )

    def suboptimality(self, x: np.ndarray) -> float:
        """f(x) - f(x*), via the quadratic form (no cancellation)."""
        d = np.asarray(x) - self.x_star
        return float(0.5 * d @ self.mean_hessian @ d)


def component_grad(p: DecomposedProblem, i: int, x: np.ndarray) -> np.ndarray:
    """Exact gradient of f_i at x: A_i (x - c_i)."""
    if not 0 <= i < p.m:
        raise IndexError(f"component index {i} out of range [0, {p.m})")
    return p.A[i] @ (np.asarray(x, dtype=float) - p.c[i])


def full_grad(p: DecomposedProblem, x: np.ndarray) -> np.ndarray:
    """Exact gradient of f at x; broadcasts over leading axes of x."""
    return np.asarray(x, dtype=float) @ p.mean_hessian - p.mean_rhs


def noisy_grad(p: DecomposedProblem, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Stochastic gradient: full_grad plus mean-zero Gaussian noise.

    Noise has per-coordinate variance sigma^2/d so E||noise||^2 == sigma^2.
    Draws are independent across calls; with sigma == 0 the generator is
    not consumed and the result equals the exact gradient.
    """
    g = full_grad(p, x)
    if p.noise_sigma > 0.0:
        scale = p.noise_sigma / math.sqrt(p.dim)
        g = g + scale * rng.standard_normal(p.dim)
    return g


def noise_tape(p: DecomposedProblem, T: int, seed: int) -> np.ndarray:
    """Pre-drawn noise vectors, shape (T, d).

    Row t equals the t-th draw a live noisy-gradient stream with the same
    seed would add, so a tape-driven replay matches a streamed run exactly.
    """
    if p.noise_sigma == 0.0:
        return np.zeros((T, p.dim))
    scale = p.noise_sigma / math.sqrt(p.dim)
    return scale * make_rng(seed).standard_normal((T, p.dim))


def _block_indices(p: DecomposedProblem, q: int, i: int, perm: np.ndarray) -> np.ndarray:
    if p.m % q != 0:
        raise ValueError(f"block length {q} does not divide m={p.m}")
    if not 0 <= i < p.m // q:
        raise IndexError(f"block index {i} out of range [0, {p.m // q})")
    perm = np.asarray(perm)
    if sorted(perm.tolist()) != list(range(p.m)):
        raise ValueError("perm must be a permutation of 0..m-1")
    return perm[i * q : (i + 1) * q]


def block_average_loss(
    p: DecomposedProblem, q: int, i: int, perm: np.ndarray, x: np.ndarray
) -> float:
    """Mean loss of the i-th block of q permuted components.

    With q == 1 this is a single component loss, with q == m the full
    loss; summing q times the block averages over all blocks recovers
    the sum of the component losses exactly.
    """
    idx = _block_indices(p, q, i, perm)
    return float(np.mean([p.component_loss(int(j), x) for j in idx]))


def block_average_grad(
    p: DecomposedProblem, q: int, i: int, perm: np.ndarray, x: np.ndarray
) -> np.ndarray:
    """Gradient of the i-th block average of q permuted components."""
    idx = _block_indices(p, q, i, perm)
    g = np.zeros(p.dim)
    for j in idx:
        g += component_grad(p, int(j), x)
    return g / q


def make_quadratic_suite(
    dim: int,
    m: int,
    noise_sigma: float,
    conditioning: float,
    seed: int,
) -> DecomposedProblem:
    """Random quadratic suite with component eigenvalues in [1/conditioning, 1].

    Each A_i is a random orthogonal conjugation of a log-uniform spectrum,
    so the full loss has exactly computable L and mu and (for conditioning
    finite) is strongly convex.  conditioning == 1 yields exact identity
    Hessians.  Deterministic given the seed.
    """
    if dim < 1 or m < 1:
        raise ValueError(f"dim and m must be positive, got dim={dim}, m={m}")
    if conditioning < 1.0:
        raise ValueError(f"conditioning must be >= 1, got {conditioning}")
    rng = make_rng(seed)
    A = np.empty((m, dim, dim))
    for i in range(m):
        if conditioning == 1.0:
            A[i] = np.eye(dim)
            continue
        Q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
        lo = -math.log(conditioning)
        eigs = np.exp(rng.uniform(lo, 0.0, size=dim))
        B = (Q * eigs) @ Q.T
        A[i] = 0.5 * (B + B.T)
    c = rng.standard_normal((m, dim))
    return DecomposedProblem(A=A, c=c, noise_sigma=noise_sigma)


# --- flat key-value serialization (replayable bit-exactly) -----------------

_FORMAT_TAG = "decomposed-quadratic-v1"


def save_problem(p: DecomposedProblem, path) -> None:
    """Write a problem to a flat key-value text file.

    Schema (one `key = value` per line, floats in shortest round-trip
    decimal form):  format, dim, m, sigma, then A[i] (row-major d*d
    floats) and c[i] (d floats) for each component.
    """
    lines = [
        f"format = {_FORMAT_TAG}",
        f"dim = {p.dim}",
        f"m = {p.m}",
        f"sigma = {p.noise_sigma!r}",
    ]
    for i in range(p.m):
        lines.append(f"A[{i}] = " + " ".join(repr(float(v)) for v in p.A[i].ravel()))
        lines.append(f"c[{i}] = " + " ".join(repr(float(v)) for v in p.c[i]))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_problem(path) -> DecomposedProblem:
    """Read a problem written by save_problem (bit-exact round trip)."""
    fields = {}
    with open(path) as fh:
        for raw in fh:
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            fields[key.strip()] = value.strip()
    if fields.get("format") != _FORMAT_TAG:
        raise ValueError(f"unrecognized problem format: {fields.get('format')!r}")
    dim = int(fields["dim"])
    m = int(fields["m"])
    sigma = float(fields["sigma"])
    A = np.empty((m, dim, dim))
    c = np.empty((m, dim))
    for i in range(m):
        A[i] = np.array([float(t) for t in fields[f"A[{i}]"].split()]).reshape(dim, dim)
        c[i] = np.array([float(t) for t in fields[f"c[{i}]"].split()])
    return DecomposedProblem(A=A, c=c, noise_sigma=sigma)
