"""Covariance functions: single-output families and multioutput combinations.

Multioutput evaluations follow a fixed stacking convention: the full
covariance of P outputs at N and N2 points is an [N, P, N2, P] tensor whose
row-major flattening matches index i = n * P + p.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionMismatch, PatchLargerThanImage, UnsupportedMode
from .numerics import record_allocation


def _as_2d(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2:
        raise DimensionMismatch(f"inputs must be [N, D], got shape {x.shape}")
    return x


class Kernel:
    """Base class for all covariance functions."""


class SingleOutputKernel(Kernel):
    def K(self, x, x2=None) -> np.ndarray:
        raise NotImplementedError

    def K_diag(self, x) -> np.ndarray:
        raise NotImplementedError


class Stationary(SingleOutputKernel):
    """Isotropic-after-scaling kernel with per-dimension lengthscales."""

    def __init__(self, variance: float = 1.0, lengthscales=1.0):
        variance = float(variance)
        lengthscales = np.asarray(lengthscales, dtype=float).reshape(-1)
        if variance <= 0:
            raise ValueError("variance must be positive")
        if np.any(lengthscales <= 0):
            raise ValueError("lengthscales must be positive")
        self.variance = variance
        self.lengthscales = lengthscales

    def _scaled_r2(self, x, x2) -> np.ndarray:
        x = _as_2d(x)
        x2 = x if x2 is None else _as_2d(x2)
        if x.shape[1] != x2.shape[1]:
            raise DimensionMismatch(
                f"input dims differ: {x.shape[1]} vs {x2.shape[1]}"
            )
        ls = self.lengthscales
        if ls.shape[0] not in (1, x.shape[1]):
            raise DimensionMismatch(
                f"lengthscales of length {ls.shape[0]} do not broadcast to "
                f"{x.shape[1]} input dims"
            )
        a = x / ls
        b = x2 / ls
        r2 = (
            np.sum(a * a, axis=1)[:, None]
            + np.sum(b * b, axis=1)[None, :]
            - 2.0 * (a @ b.T)
        )
        return np.clip(r2, 0.0, None)

    def _from_r2(self, r2):
        raise NotImplementedError

    def K(self, x, x2=None) -> np.ndarray:
        out = self._from_r2(self._scaled_r2(x, x2))
        record_allocation(out)
        return out

    def K_diag(self, x) -> np.ndarray:
        x = _as_2d(x)
        return np.full(x.shape[0], self.variance)


class SquaredExponential(Stationary):
    def _from_r2(self, r2):
        return self.variance * np.exp(-0.5 * r2)


class Matern12(Stationary):
    def _from_r2(self, r2):
        return self.variance * np.exp(-np.sqrt(r2))


class Matern32(Stationary):
    def _from_r2(self, r2):
        r = np.sqrt(3.0 * r2)
        return self.variance * (1.0 + r) * np.exp(-r)


class Matern52(Stationary):
    def _from_r2(self, r2):
        r = np.sqrt(5.0 * r2)
        return self.variance * (1.0 + r + r * r / 3.0) * np.exp(-r)


class Linear(SingleOutputKernel):
    def __init__(self, variance: float = 1.0):
        variance = float(variance)
        if variance <= 0:
            raise ValueError("variance must be positive")
        self.variance = variance

    def K(self, x, x2=None) -> np.ndarray:
        x = _as_2d(x)
        x2 = x if x2 is None else _as_2d(x2)
        if x.shape[1] != x2.shape[1]:
            raise DimensionMismatch(
                f"input dims differ: {x.shape[1]} vs {x2.shape[1]}"
            )
        return self.variance * (x @ x2.T)

    def K_diag(self, x) -> np.ndarray:
        x = _as_2d(x)
        return self.variance * np.sum(x * x, axis=1)


class White(SingleOutputKernel):
    """Unit-impulse kernel: cross-covariance between distinct point sets is 0."""

    def __init__(self, variance: float = 1.0):
        variance = float(variance)
        if variance <= 0:
            raise ValueError("variance must be positive")
        self.variance = variance

    def K(self, x, x2=None) -> np.ndarray:
        x = _as_2d(x)
        if x2 is None:
            return self.variance * np.eye(x.shape[0])
        x2 = _as_2d(x2)
        if x.shape[1] != x2.shape[1]:
            raise DimensionMismatch(
                f"input dims differ: {x.shape[1]} vs {x2.shape[1]}"
            )
        return np.zeros((x.shape[0], x2.shape[0]))

    def K_diag(self, x) -> np.ndarray:
        x = _as_2d(x)
        return np.full(x.shape[0], self.variance)


# ---------------------------------------------------------------------------
# Multioutput kernels


class MultioutputKernel(Kernel):
    @property
    def num_outputs(self) -> int:
        raise NotImplementedError

    def K(self, x, x2=None, full_output_cov: bool = True) -> np.ndarray:
        raise UnsupportedMode(f"{type(self).__name__} has no full covariance mode")

    def K_diag(self, x, full_output_cov: bool = True) -> np.ndarray:
        raise UnsupportedMode(f"{type(self).__name__} has no marginal mode")


class IndependentLatent(MultioutputKernel):
    """Multioutput kernels built from L independent latent processes."""

    @property
    def latent_kernels(self) -> tuple[SingleOutputKernel, ...]:
        raise NotImplementedError

    @property
    def num_latent(self) -> int:
        return len(self.latent_kernels)


class IndependentOutputs(IndependentLatent):
    """Outputs are the latent processes themselves (identity mixing)."""

    def K(self, x, x2=None, full_output_cov: bool = True) -> np.ndarray:
        grams = np.stack([k.K(x, x2) for k in self.latent_kernels])  # [P, N, N2]
        if not full_output_cov:
            record_allocation(grams)
            return grams
        p, n, n2 = grams.shape
        out = np.zeros((n, p, n2, p))
        idx = np.arange(p)
        out[:, idx, :, idx] = grams
        record_allocation(out)
        return out

    def K_diag(self, x, full_output_cov: bool = True) -> np.ndarray:
        diags = np.stack([k.K_diag(x) for k in self.latent_kernels], axis=1)  # [N, P]
        if not full_output_cov:
            return diags
        n, p = diags.shape
        out = np.zeros((n, p, p))
        idx = np.arange(p)
        out[:, idx, idx] = diags
        return out


class SharedIndependent(IndependentOutputs):
    """One kernel shared by P independent outputs."""

    def __init__(self, kernel: SingleOutputKernel, output_dim: int):
        if output_dim < 1:
            raise ValueError("output_dim must be at least 1")
        self.kernel = kernel
        self.output_dim = int(output_dim)

    @property
    def num_outputs(self) -> int:
        return self.output_dim

    @property
    def latent_kernels(self) -> tuple[SingleOutputKernel, ...]:
        return (self.kernel,) * self.output_dim

    def K(self, x, x2=None, full_output_cov: bool = True) -> np.ndarray:
        gram = self.kernel.K(x, x2)  # computed once, shared by all outputs
        p = self.output_dim
        if not full_output_cov:
            return np.broadcast_to(gram, (p,) + gram.shape)
        n, n2 = gram.shape
        out = np.zeros((n, p, n2, p))
        idx = np.arange(p)
        out[:, idx, :, idx] = gram
        record_allocation(out)
        return out

    def K_diag(self, x, full_output_cov: bool = True) -> np.ndarray:
        diag = self.kernel.K_diag(x)
        p = self.output_dim
        if not full_output_cov:
            return np.broadcast_to(diag[:, None], (diag.shape[0], p))
        out = np.zeros((diag.shape[0], p, p))
        idx = np.arange(p)
        out[:, idx, idx] = diag[:, None]
        return out


class SeparateIndependent(IndependentOutputs):
    """One kernel per independent output."""

    def __init__(self, kernels):
        kernels = tuple(kernels)
        if not kernels:
            raise ValueError("at least one kernel is required")
        self.kernels = kernels

    @property
    def num_outputs(self) -> int:
        return len(self.kernels)

    @property
    def latent_kernels(self) -> tuple[SingleOutputKernel, ...]:
        return self.kernels


class LinearCoregionalization(IndependentLatent):
    """P outputs as a fixed linear mixing W of L independent latent GPs."""

    def __init__(self, kernels, w):
        kernels = tuple(kernels)
        w = np.asarray(w, dtype=float)
        if w.ndim != 2:
            raise DimensionMismatch("mixing matrix must be [P, L]")
        if w.shape[1] != len(kernels):
            raise DimensionMismatch(
                f"mixing matrix has {w.shape[1]} columns for {len(kernels)} latents"
            )
        self.kernels = kernels
        self.w = w

    @property
    def num_outputs(self) -> int:
        return self.w.shape[0]

    @property
    def latent_kernels(self) -> tuple[SingleOutputKernel, ...]:
        return self.kernels

    def latent_grams(self, x, x2=None) -> np.ndarray:
        seen: dict[int, np.ndarray] = {}
        grams = []
        for k in self.latent_kernels:
            if id(k) not in seen:
                seen[id(k)] = k.K(x, x2)
            grams.append(seen[id(k)])
        return np.stack(grams)  # [L, N, N2]

    def K(self, x, x2=None, full_output_cov: bool = True) -> np.ndarray:
        grams = self.latent_grams(x, x2)
        if not full_output_cov:
            # Latent-process covariances; the mixing is applied downstream.
            record_allocation(grams)
            return grams
        out = np.einsum("pl,lnm,ql->npmq", self.w, grams, self.w)
        record_allocation(out)
        return out

    def K_diag(self, x, full_output_cov: bool = True) -> np.ndarray:
        diags = np.stack([k.K_diag(x) for k in self.latent_kernels], axis=1)  # [N, L]
        if full_output_cov:
            return np.einsum("pl,nl,ql->npq", self.w, diags, self.w)
        return diags @ (self.w**2).T  # [N, P]


class IntrinsicCoregionalization(LinearCoregionalization):
    """Coregionalization with a single kernel shared by all L latents."""

    def __init__(self, kernel, w):
        w = np.asarray(w, dtype=float)
        if w.ndim != 2:
            raise DimensionMismatch("mixing matrix must be [P, L]")
        super().__init__((kernel,) * w.shape[1], w)
        self.kernel = kernel


class Convolutional(MultioutputKernel):
    """Patch-response kernel on flattened images.

    Inputs are rows of length H*W.  As a multioutput kernel the P =
    (H-h+1)*(W-w+1) outputs are the per-patch responses; the aggregated
    (summed-patch) response is a single-output kernel exposed through
    :meth:`K_sum` / :meth:`K_sum_diag`.
    """

    def __init__(self, kernel: SingleOutputKernel, image_shape, patch_shape):
        self.kernel = kernel
        self.image_shape = (int(image_shape[0]), int(image_shape[1]))
        self.patch_shape = (int(patch_shape[0]), int(patch_shape[1]))
        h, w = self.patch_shape
        ih, iw = self.image_shape
        if h > ih or w > iw:
            raise PatchLargerThanImage(
                f"patch {self.patch_shape} exceeds image {self.image_shape}"
            )

    @property
    def num_outputs(self) -> int:
        ih, iw = self.image_shape
        h, w = self.patch_shape
        return (ih - h + 1) * (iw - w + 1)

    @property
    def patch_len(self) -> int:
        return self.patch_shape[0] * self.patch_shape[1]

    def patches(self, x) -> np.ndarray:
        return extract_patches(x, self.image_shape, self.patch_shape)

    def _patch_gram(self, x, x2):
        pa = self.patches(x)
        pb = pa if x2 is None else self.patches(x2)
        n, p, _ = pa.shape
        n2 = pb.shape[0]
        flat = self.kernel.K(pa.reshape(n * p, -1), pb.reshape(n2 * p, -1))
        record_allocation(flat)
        return flat.reshape(n, p, n2, p)

    def K(self, x, x2=None, full_output_cov: bool = True) -> np.ndarray:
        full = self._patch_gram(x, x2)
        if full_output_cov:
            return full
        return np.einsum("npmp->pnm", full)

    def K_diag(self, x, full_output_cov: bool = True) -> np.ndarray:
        pa = self.patches(x)
        out = np.stack([self.kernel.K(rows) for rows in pa])  # [N, P, P]
        if full_output_cov:
            return out
        return np.einsum("npp->np", out)

    def K_sum(self, x, x2=None) -> np.ndarray:
        """Gram of the summed-patch response, a single scalar per image."""
        return np.einsum("npmq->nm", self._patch_gram(x, x2))

    def K_sum_diag(self, x) -> np.ndarray:
        return np.einsum("npq->n", self.K_diag(x, full_output_cov=True))


# ---------------------------------------------------------------------------
# Module-level evaluation helpers


def k_full(kernel, x, x2=None) -> np.ndarray:
    """Single-output Gram matrix [N, N2]; Convolutional uses the patch sum."""
    if isinstance(kernel, Convolutional):
        return kernel.K_sum(x, x2)
    if isinstance(kernel, MultioutputKernel):
        raise UnsupportedMode(
            f"{type(kernel).__name__} is multioutput; use mo_k instead"
        )
    return kernel.K(x, x2)


def k_diag(kernel, x) -> np.ndarray:
    """Diagonal of k_full(x, x), of length N."""
    if isinstance(kernel, Convolutional):
        return kernel.K_sum_diag(x)
    if isinstance(kernel, MultioutputKernel):
        raise UnsupportedMode(
            f"{type(kernel).__name__} is multioutput; use mo_k_diag instead"
        )
    return kernel.K_diag(x)


def mo_k(kernel: MultioutputKernel, x, x2=None, full_output_cov: bool = True):
    """Multioutput covariance: [N, P, N2, P] or the marginal/latent stack."""
    if not isinstance(kernel, MultioutputKernel):
        raise UnsupportedMode(f"{type(kernel).__name__} is not multioutput")
    return kernel.K(x, x2, full_output_cov=full_output_cov)


def mo_k_diag(kernel: MultioutputKernel, x, full_output_cov: bool = True):
    """Per-point output covariance [N, P, P], or marginal variances [N, P]."""
    if not isinstance(kernel, MultioutputKernel):
        raise UnsupportedMode(f"{type(kernel).__name__} is not multioutput")
    return kernel.K_diag(x, full_output_cov=full_output_cov)


def extract_patches(x, image_shape, patch_shape) -> np.ndarray:
    """All stride-1 patches of each flattened image, row-major raster order.

    Returns [N, P, h*w] where patch p of image n is the contiguous h-by-w
    window at raster position p.
    """
    x = _as_2d(x)
    ih, iw = int(image_shape[0]), int(image_shape[1])
    h, w = int(patch_shape[0]), int(patch_shape[1])
    if x.shape[1] != ih * iw:
        raise DimensionMismatch(
            f"rows of length {x.shape[1]} do not match image {ih}x{iw}"
        )
    if h > ih or w > iw:
        raise PatchLargerThanImage(f"patch {h}x{w} exceeds image {ih}x{iw}")
    images = x.reshape(-1, ih, iw)
    windows = sliding_window_view(images, (h, w), axis=(1, 2))
    n = x.shape[0]
    p = (ih - h + 1) * (iw - w + 1)
    return windows.reshape(n, p, h * w)
