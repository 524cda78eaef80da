"""Scaled integer lattice alpha * Z^n and its half-open cubic cell.

The basic cell is ``alpha * (-0.5, 0.5]^n``.  Its translates by lattice
points tile R^n, so every point has exactly one nearest lattice point under
this convention: exact midpoints belong to the cell on their lower side,
i.e. they round toward +inf.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rng import RandomStream, to_unit

DEFAULT_ALPHA = 1e-5


@dataclass(frozen=True)
class LatticeSpec:
    """``alpha * I`` generator in ``dim`` dimensions."""

    dim: int
    alpha: float = DEFAULT_ALPHA

    def __post_init__(self):
        if int(self.dim) != self.dim or self.dim < 1:
            raise ValueError(f"lattice dimension must be a positive integer, got {self.dim}")
        if not (np.isfinite(self.alpha) and self.alpha > 0):
            raise ValueError(f"lattice scale must be positive and finite, got {self.alpha}")

    @property
    def cell_volume(self) -> float:
        return self.alpha**self.dim

    @property
    def generator(self) -> np.ndarray:
        return self.alpha * np.eye(self.dim)


@dataclass(frozen=True)
class LatticePoint:
    """A lattice point stored by its integer coordinates."""

    coords: np.ndarray
    alpha: float

    @property
    def embedding(self) -> np.ndarray:
        return embed(self.coords, self.alpha)

    def __eq__(self, other):
        if not isinstance(other, LatticePoint):
            return NotImplemented
        return self.alpha == other.alpha and np.array_equal(self.coords, other.coords)

    def __hash__(self):
        return hash((self.alpha, tuple(np.asarray(self.coords).tolist())))


def embed(coords, alpha: float) -> np.ndarray:
    """Real embedding ``alpha * j``; the only place integers become reals."""
    return alpha * np.asarray(coords, dtype=np.float64)


def nearest_coords(x, alpha: float) -> np.ndarray:
    """Integer coordinates ``j`` with ``alpha*j - x`` in the basic cell.

    Vectorised over any array shape.  One correction pass fixes the rare
    cases where the floating-point division lands on the wrong side of a
    cell boundary, so the computed error always lies in the cell.
    """
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("nearest_point requires finite input")
    j = np.floor(x / alpha + 0.5)
    err = alpha * j - x
    half = 0.5 * alpha
    j = j - (err > half) + (err <= -half)
    return j.astype(np.int64)


def nearest_point(x, spec: LatticeSpec) -> LatticePoint:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (spec.dim,):
        raise ValueError(f"expected a vector of length {spec.dim}, got shape {x.shape}")
    return LatticePoint(nearest_coords(x, spec.alpha), spec.alpha)


def cell_contains(z, spec: LatticeSpec) -> bool | np.ndarray:
    """True iff every component of ``z`` lies in ``(-alpha/2, alpha/2]``.

    For batched input (last axis = dim) returns one boolean per row.
    """
    z = np.asarray(z, dtype=np.float64)
    half = 0.5 * spec.alpha
    inside = np.all((z > -half) & (z <= half), axis=-1)
    return bool(inside) if inside.ndim == 0 else inside


def cell_from_unit(u, alpha: float) -> np.ndarray:
    """Map uniforms in ``[0, 1)`` onto ``alpha * (-0.5, 0.5]``."""
    return alpha * (0.5 - np.asarray(u, dtype=np.float64))


def sample_uniform_cell(stream: RandomStream, spec: LatticeSpec) -> np.ndarray:
    """Uniform point of the basic cell; consumes exactly ``dim`` words."""
    return cell_from_unit(stream.uniform(spec.dim), spec.alpha)
