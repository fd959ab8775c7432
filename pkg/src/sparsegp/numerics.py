"""Dense and structured linear algebra, quadrature, and random numbers.

Array conventions used throughout the package: matrices are float64 numpy
arrays in row-major (C) element order, so a stacked (N, P) array flattens
with index i = n * P + p.  Reshapes only reinterpret shape metadata, never
reorder elements.  Lower-triangular factors are dense square arrays whose
strict upper triangle is zero; factors produced by :func:`cholesky` have a
strictly positive diagonal.

Everything here is a pure function of its inputs.  :class:`RngState` is the
only stateful object and is advanced explicitly by the draw functions.
"""

from __future__ import annotations

import contextlib
import os
from dataclasses import dataclass

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from scipy.linalg import solve_triangular

from .errors import (
    AsymmetricInput,
    DimensionMismatch,
    NonSquare,
    NotPositiveDefinite,
    ZeroDiagonal,
)

DEFAULT_JITTER = 1e-6
JITTER_ENV_VAR = "SPARSEGP_JITTER"
MAX_CHOLESKY_RETRIES = 5
_RETRY_JITTER_FLOOR = 1e-12
_SYMMETRY_RTOL = 1e-10


def default_jitter() -> float:
    """Package-wide default jitter; the SPARSEGP_JITTER env var overrides it."""
    raw = os.environ.get(JITTER_ENV_VAR)
    return DEFAULT_JITTER if raw is None else float(raw)


# ---------------------------------------------------------------------------
# Allocation probe
#
# When active, a few core routines report the shapes of the large arrays they
# produce.  Tests use this to assert which intermediates a code path
# materializes; it is a diagnostic surface, not part of the numerics.

_PROBE_SHAPES: list[tuple[int, ...]] | None = None


def record_allocation(*arrays) -> None:
    if _PROBE_SHAPES is not None:
        for a in arrays:
            shape = np.shape(a)
            if len(shape) >= 2:
                _PROBE_SHAPES.append(shape)


@contextlib.contextmanager
def allocation_probe():
    """Collect the shapes of matrices allocated by instrumented routines."""
    global _PROBE_SHAPES
    previous = _PROBE_SHAPES
    shapes: list[tuple[int, ...]] = []
    _PROBE_SHAPES = shapes
    try:
        yield shapes
    finally:
        _PROBE_SHAPES = previous


# ---------------------------------------------------------------------------
# Dense factorizations and solves


def cholesky(a: np.ndarray, jitter: float | None = None) -> np.ndarray:
    """Lower Cholesky factor of ``a + jitter * mean(diag(a)) * I``.

    On failure the jitter is escalated tenfold (seeded at 1e-12 when the
    starting jitter is zero) up to :data:`MAX_CHOLESKY_RETRIES` times before
    raising :class:`NotPositiveDefinite`.
    """
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise NonSquare(f"expected a square matrix, got shape {a.shape}")
    record_allocation(a)
    scale = max(float(np.max(np.abs(a))), 1.0) if a.size else 1.0
    if a.size and float(np.max(np.abs(a - a.T))) > _SYMMETRY_RTOL * scale:
        raise AsymmetricInput("matrix is not symmetric within 1e-10 relative")
    if jitter is None:
        jitter = default_jitter()
    if jitter < 0:
        raise ValueError("jitter must be non-negative")
    diag_mean = float(np.mean(np.diag(a))) if a.size else 1.0
    diag_scale = diag_mean if diag_mean > 0 else 1.0
    j = float(jitter)
    for _ in range(MAX_CHOLESKY_RETRIES + 1):
        try:
            shifted = a if j == 0.0 else a + (j * diag_scale) * np.eye(a.shape[0])
            return np.linalg.cholesky(shifted)
        except np.linalg.LinAlgError:
            j = _RETRY_JITTER_FLOOR if j == 0.0 else j * 10.0
    raise NotPositiveDefinite(
        f"cholesky failed after {MAX_CHOLESKY_RETRIES} jitter escalations "
        f"(final jitter {j / 10.0:g})"
    )


def tri_solve(l: np.ndarray, b: np.ndarray, transpose: bool = False) -> np.ndarray:
    """Solve L X = B (or Lᵀ X = B when ``transpose``) for lower-triangular L."""
    l = np.asarray(l, dtype=float)
    b = np.asarray(b, dtype=float)
    if np.any(np.diag(l) == 0.0):
        raise ZeroDiagonal("triangular factor has a zero diagonal entry")
    if l.shape[0] != b.shape[0]:
        raise DimensionMismatch(
            f"factor dim {l.shape[0]} does not match rhs rows {b.shape[0]}"
        )
    x = solve_triangular(l, b, lower=True, trans=1 if transpose else 0)
    record_allocation(x)
    return x


# ---------------------------------------------------------------------------
# Structured positive semi-definite matrices


class StructuredPSD:
    """Tagged PSD matrix supporting structure-aware solves and log-dets."""

    @property
    def dim(self) -> int:
        raise NotImplementedError


@dataclass(frozen=True, eq=False)
class Dense(StructuredPSD):
    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=float)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise NonSquare(f"dense PSD block must be square, got {m.shape}")
        object.__setattr__(self, "matrix", m)

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]


@dataclass(frozen=True, eq=False)
class BlockDiagonal(StructuredPSD):
    """Square diagonal blocks; each block may be shared by several slots.

    ``repeats[i]`` copies of ``blocks[i]`` appear consecutively on the
    diagonal, so a shared block is stored (and factorized) once.
    """

    blocks: tuple[np.ndarray, ...]
    repeats: tuple[int, ...] = ()

    def __post_init__(self):
        blocks = tuple(np.asarray(b, dtype=float) for b in self.blocks)
        if not blocks:
            raise DimensionMismatch("block-diagonal matrix needs at least one block")
        for b in blocks:
            if b.ndim != 2 or b.shape[0] != b.shape[1]:
                raise NonSquare(f"diagonal block must be square, got {b.shape}")
        repeats = self.repeats or tuple(1 for _ in blocks)
        if len(repeats) != len(blocks) or any(r < 1 for r in repeats):
            raise DimensionMismatch("repeats must assign a positive count per block")
        object.__setattr__(self, "blocks", blocks)
        object.__setattr__(self, "repeats", tuple(int(r) for r in repeats))

    @property
    def num_blocks(self) -> int:
        return sum(self.repeats)

    @property
    def dim(self) -> int:
        return sum(b.shape[0] * r for b, r in zip(self.blocks, self.repeats))

    def iter_blocks(self):
        """Yield every logical block in order, resolving repeats."""
        for block, repeat in zip(self.blocks, self.repeats):
            for _ in range(repeat):
                yield block


@dataclass(frozen=True, eq=False)
class DiagPlusLowRank(StructuredPSD):
    """diag(d) + F Fᵀ with strictly positive d."""

    diag: np.ndarray
    factor: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.diag, dtype=float).reshape(-1)
        f = np.asarray(self.factor, dtype=float)
        if f.ndim != 2:
            raise DimensionMismatch("low-rank factor must be a matrix")
        if f.shape[0] != d.shape[0]:
            raise DimensionMismatch(
                f"diag length {d.shape[0]} does not match factor rows {f.shape[0]}"
            )
        if np.any(d <= 0):
            raise ValueError("diagonal entries must be strictly positive")
        object.__setattr__(self, "diag", d)
        object.__setattr__(self, "factor", f)

    @property
    def dim(self) -> int:
        return self.diag.shape[0]


def as_structured(k) -> StructuredPSD:
    if isinstance(k, StructuredPSD):
        return k
    return Dense(np.asarray(k, dtype=float))


def densify(k: StructuredPSD) -> np.ndarray:
    """Materialize the full matrix of a structured PSD operand."""
    if isinstance(k, Dense):
        return k.matrix
    if isinstance(k, BlockDiagonal):
        out = np.zeros((k.dim, k.dim))
        offset = 0
        for block in k.iter_blocks():
            n = block.shape[0]
            out[offset : offset + n, offset : offset + n] = block
            offset += n
        record_allocation(out)
        return out
    if isinstance(k, DiagPlusLowRank):
        out = np.diag(k.diag) + k.factor @ k.factor.T
        record_allocation(out)
        return out
    raise TypeError(f"unknown structured matrix {type(k).__name__}")


def block_cholesky_factors(k: BlockDiagonal) -> list[np.ndarray]:
    """Per-logical-block Cholesky factors; shared blocks are factorized once."""
    out: list[np.ndarray] = []
    for block, repeat in zip(k.blocks, k.repeats):
        l = cholesky(block, jitter=0.0)
        out.extend([l] * repeat)
    return out


def structured_solve(k: StructuredPSD, b: np.ndarray) -> np.ndarray:
    """Solve K X = B exploiting the structure tag of K."""
    b = np.asarray(b, dtype=float)
    squeeze = b.ndim == 1
    if squeeze:
        b = b[:, None]
    if b.shape[0] != k.dim:
        raise DimensionMismatch(f"rhs rows {b.shape[0]} do not match dim {k.dim}")
    if isinstance(k, Dense):
        l = cholesky(k.matrix, jitter=0.0)
        x = tri_solve(l, tri_solve(l, b), transpose=True)
    elif isinstance(k, BlockDiagonal):
        x = np.empty_like(b)
        offset = 0
        for l in block_cholesky_factors(k):
            n = l.shape[0]
            sl = slice(offset, offset + n)
            x[sl] = tri_solve(l, tri_solve(l, b[sl]), transpose=True)
            offset += n
    elif isinstance(k, DiagPlusLowRank):
        x = _woodbury_solve(k.diag, k.factor, b)
    else:
        raise TypeError(f"unknown structured matrix {type(k).__name__}")
    record_allocation(x)
    return x[:, 0] if squeeze else x


def _woodbury_solve(diag: np.ndarray, factor: np.ndarray, b: np.ndarray) -> np.ndarray:
    # (diag(d) + F Fᵀ)⁻¹ B = d⁻¹B − d⁻¹F (I + Fᵀ d⁻¹ F)⁻¹ Fᵀ d⁻¹ B
    dinv_b = b / diag[:, None]
    if factor.shape[1] == 0:
        return dinv_b
    dinv_f = factor / diag[:, None]
    core = np.eye(factor.shape[1]) + factor.T @ dinv_f
    l = cholesky(core, jitter=0.0)
    inner = tri_solve(l, tri_solve(l, factor.T @ dinv_b), transpose=True)
    return dinv_b - dinv_f @ inner


def structured_logdet(k: StructuredPSD) -> float:
    """log |K| via Cholesky diagonals, or the determinant lemma for low rank."""
    if isinstance(k, Dense):
        l = cholesky(k.matrix, jitter=0.0)
        return float(2.0 * np.sum(np.log(np.diag(l))))
    if isinstance(k, BlockDiagonal):
        total = 0.0
        for block, repeat in zip(k.blocks, k.repeats):
            l = cholesky(block, jitter=0.0)
            total += repeat * float(2.0 * np.sum(np.log(np.diag(l))))
        return total
    if isinstance(k, DiagPlusLowRank):
        # |diag(d) + F Fᵀ| = |I + Fᵀ d⁻¹ F| · Π d
        core = np.eye(k.factor.shape[1]) + k.factor.T @ (k.factor / k.diag[:, None])
        l = cholesky(core, jitter=0.0)
        return float(2.0 * np.sum(np.log(np.diag(l))) + np.sum(np.log(k.diag)))
    raise TypeError(f"unknown structured matrix {type(k).__name__}")


# ---------------------------------------------------------------------------
# Quadrature


def gauss_hermite_nodes(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Nodes and weights for expectations under a standard normal.

    Probabilists' convention, normalized so the weights sum to one:
    E[f(x)] for x ~ N(0, 1) is approximated by sum(w * f(nodes)).
    """
    if not 1 <= n <= 200:
        raise ValueError(f"node count must be in [1, 200], got {n}")
    x, w = hermegauss(n)
    return x, w / np.sum(w)


# ---------------------------------------------------------------------------
# Random numbers


class RngState:
    """Seedable counter-based random stream (Philox).

    Identical seed and call sequence produce an identical stream on every
    platform.  Derived states are independent streams addressed by integer
    salt, which keeps stochastic objectives reproducible without any global
    state.
    """

    algorithm = "philox"

    def __init__(self, seed: int, _key: tuple[int, ...] = ()):
        self.seed = int(seed)
        self._key = tuple(int(s) for s in _key)
        seq = np.random.SeedSequence(entropy=self.seed, spawn_key=self._key)
        self._generator = np.random.Generator(np.random.Philox(seq))

    def derive(self, *salt: int) -> "RngState":
        """A fresh, reproducible stream addressed by (seed, salt)."""
        return RngState(self.seed, self._key + tuple(salt))

    @property
    def generator(self) -> np.random.Generator:
        return self._generator

    def __repr__(self):
        return f"RngState(seed={self.seed}, key={self._key})"


def standard_normal(rng: RngState, shape) -> np.ndarray:
    """Draw standard normal variates, advancing ``rng`` explicitly."""
    return rng.generator.standard_normal(shape)
