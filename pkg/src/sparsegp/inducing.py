"""Inducing variable definitions and their counts."""

from __future__ import annotations

import numpy as np

from .errors import DimensionMismatch, ShapeMismatch
from .kernels import (
    Convolutional,
    IndependentLatent,
    MultioutputKernel,
)


class InducingVariable:
    """Base class for all inducing variable definitions."""

    @property
    def num_rows(self) -> int:
        raise NotImplementedError


class InducingPoints(InducingVariable):
    """Plain function evaluations u = f(Z)."""

    def __init__(self, z):
        z = np.asarray(z, dtype=float)
        if z.ndim == 1:
            z = z[:, None]
        if z.ndim != 2 or z.shape[0] < 1:
            raise DimensionMismatch(f"inducing inputs must be [M, D], got {z.shape}")
        self.z = z

    @property
    def num_rows(self) -> int:
        return self.z.shape[0]


class Multiscale(InducingPoints):
    """Gaussian-window integral transforms of f, one width per dimension."""

    def __init__(self, z, scales):
        super().__init__(z)
        scales = np.asarray(scales, dtype=float)
        if scales.ndim == 1:
            scales = scales[:, None]
        if scales.shape != self.z.shape:
            raise DimensionMismatch(
                f"scales shape {scales.shape} must match inputs {self.z.shape}"
            )
        if np.any(scales <= 0):
            raise ValueError("window scales must be strictly positive")
        self.scales = scales


class InducingPatches(InducingPoints):
    """Patch evaluations of the patch-response process of a convolutional GP."""


class LatentInducingVariables(InducingVariable):
    """Inducing variables placed in the latent processes of a multioutput GP."""

    def per_latent(self, num_latent: int) -> list[InducingVariable]:
        raise NotImplementedError


class SharedIndependentInducingVariables(LatentInducingVariables):
    """One inducing set shared by every latent process."""

    def __init__(self, base: InducingVariable):
        self.base = base

    @property
    def num_rows(self) -> int:
        return self.base.num_rows

    def per_latent(self, num_latent: int) -> list[InducingVariable]:
        return [self.base] * num_latent


class SeparateIndependentInducingVariables(LatentInducingVariables):
    """One inducing set per latent process."""

    def __init__(self, members):
        members = tuple(members)
        if not members:
            raise DimensionMismatch("at least one member inducing set is required")
        self.members = members

    @property
    def num_rows(self) -> int:
        return self.members[0].num_rows

    def per_latent(self, num_latent: int) -> list[InducingVariable]:
        if len(self.members) != num_latent:
            raise ShapeMismatch(
                f"{len(self.members)} inducing sets for {num_latent} latents"
            )
        return list(self.members)


def num_inducing(iv: InducingVariable, kernel) -> int:
    """Total number of inducing variables for the (iv, kernel) pair."""
    if isinstance(iv, LatentInducingVariables):
        if not isinstance(kernel, IndependentLatent):
            raise ShapeMismatch(
                f"latent inducing variables need a latent-structured kernel, "
                f"got {type(kernel).__name__}"
            )
        return sum(m.num_rows for m in iv.per_latent(kernel.num_latent))
    if isinstance(iv, InducingPatches) and isinstance(kernel, Convolutional):
        return iv.num_rows  # one variable per patch of the latent process
    if isinstance(kernel, MultioutputKernel):
        return iv.num_rows * kernel.num_outputs
    return iv.num_rows
