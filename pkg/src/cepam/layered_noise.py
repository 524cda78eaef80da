"""Target privacy noises written as mixtures of uniforms.

Both supported noises are layered: draw a latent scale ``u`` and then a
point uniform on a superlevel set of the pdf.

* isotropic Gaussian ``N(0, sigma^2 I_n)``: ``u ~ chi^2_{n+2}``, point uniform
  on the ball of radius ``sigma * sqrt(u)``;
* Laplace ``Lap(0, b)`` in one dimension: ``u ~ Gamma(2, 1)``, point uniform on
  ``(-b*u, b*u)``.

Word budgets (see :mod:`cepam.rng`) are fixed per recipe so that a client and
the server stay in lock-step:

=====================  ==========================================
latent, Gaussian       ``floor((n+2)/2)`` words, plus 2 if ``n`` is odd
latent, Laplace        2 words
direct Gaussian        ``2 * ceil(n/2)`` words per vector
direct Laplace         1 word
mixture sample         latent words + direct-normal words + 1
=====================  ==========================================
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import numpy as np

from .lattice import LatticeSpec
from .rng import RandomStream, to_open_unit, to_unit


def _exponentials(words):
    # -log(U) with U in (0, 1]; U = 1 - [0,1)
    return -np.log1p(-to_unit(words))


def _box_muller_cos(w1, w2):
    return np.sqrt(-2.0 * np.log1p(-to_unit(w1))) * np.cos(2.0 * np.pi * to_unit(w2))


def standard_normals(words) -> np.ndarray:
    """Box-Muller on consecutive word pairs along the last axis.

    ``2c`` words give ``2c`` normals (cosine and sine branches interleaved).
    """
    words = np.asarray(words, dtype=np.uint64)
    radius = np.sqrt(-2.0 * np.log1p(-to_unit(words[..., 0::2])))
    angle = 2.0 * np.pi * to_unit(words[..., 1::2])
    out = np.empty(words.shape, dtype=np.float64)
    out[..., 0::2] = radius * np.cos(angle)
    out[..., 1::2] = radius * np.sin(angle)
    return out


def unit_ball_volume(n: int) -> float:
    # V_n = 2*pi/n * V_{n-2}; keeps V_1 = 2 exact so that p = 1 for n = 1
    vol = 2.0 if n % 2 else 1.0
    for k in range(2 + n % 2, n + 1, 2):
        vol *= 2.0 * math.pi / k
    return vol


@dataclass(frozen=True)
class GaussianNoise:
    sigma: float
    dim: int = 1

    kind = "gaussian"

    def __post_init__(self):
        if not (self.sigma > 0 and math.isfinite(self.sigma)):
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if int(self.dim) != self.dim or self.dim < 1:
            raise ValueError(f"dimension must be a positive integer, got {self.dim}")

    @property
    def dof(self) -> int:
        return self.dim + 2

    @property
    def latent_words(self) -> int:
        return self.dof // 2 + 2 * (self.dof % 2)

    def latent_from_words(self, words) -> np.ndarray:
        """chi^2_{n+2} from ``latent_words`` words on the last axis."""
        words = np.asarray(words, dtype=np.uint64)
        half = self.dof // 2
        u = 2.0 * _exponentials(words[..., :half]).sum(axis=-1)
        if self.dof % 2:
            u = u + _box_muller_cos(words[..., half], words[..., half + 1]) ** 2
        return u

    def radius(self, u):
        return self.sigma * np.sqrt(u)

    def contains(self, z, u):
        # closed ball
        z = np.asarray(z, dtype=np.float64)
        return np.sum(z * z, axis=-1) <= self.radius(u) ** 2

    def acceptance_probability(self) -> float:
        return unit_ball_volume(self.dim) / 2.0**self.dim

    def direct_words(self) -> int:
        return 2 * math.ceil(self.dim / 2)

    def direct_from_words(self, words) -> np.ndarray:
        return self.sigma * standard_normals(words)[..., : self.dim]

    def uniform_on_support(self, u, words) -> np.ndarray:
        """Uniform point of the radius-``r(u)`` ball from ``direct_words + 1`` words."""
        words = np.asarray(words, dtype=np.uint64)
        g = standard_normals(words[..., :-1])[..., : self.dim]
        g = g / np.linalg.norm(g, axis=-1, keepdims=True)
        scale = self.radius(u) * to_unit(words[..., -1]) ** (1.0 / self.dim)
        return g * np.asarray(scale)[..., None]

    def pdf(self, z):
        z = np.asarray(z, dtype=np.float64)
        q = np.sum(z * z, axis=-1) / self.sigma**2
        return np.exp(-0.5 * q) / (2.0 * np.pi * self.sigma**2) ** (self.dim / 2)

    @property
    def variance(self) -> float:
        """Per-coordinate variance."""
        return self.sigma**2

    def describe(self) -> dict:
        return {"kind": self.kind, "sigma": self.sigma, "dim": self.dim}


@dataclass(frozen=True)
class LaplaceNoise:
    scale: float

    kind = "laplace"
    dim = 1
    latent_words = 2

    def __post_init__(self):
        if not (self.scale > 0 and math.isfinite(self.scale)):
            raise ValueError(f"Laplace scale must be positive, got {self.scale}")

    def latent_from_words(self, words) -> np.ndarray:
        """Gamma(2, 1) as the sum of two unit exponentials."""
        return _exponentials(np.asarray(words, dtype=np.uint64)[..., :2]).sum(axis=-1)

    def radius(self, u):
        return self.scale * np.asarray(u)

    def contains(self, z, u):
        # open interval
        z = np.asarray(z, dtype=np.float64)
        return np.abs(z[..., 0]) < self.radius(u)

    def acceptance_probability(self) -> float:
        return 1.0

    def direct_words(self) -> int:
        return 1

    def direct_from_words(self, words) -> np.ndarray:
        p = to_open_unit(np.asarray(words, dtype=np.uint64)[..., :1])
        return np.where(p < 0.5, self.scale * np.log(2.0 * p), -self.scale * np.log(2.0 * (1.0 - p)))

    def uniform_on_support(self, u, words) -> np.ndarray:
        w = to_unit(np.asarray(words, dtype=np.uint64)[..., -1])
        return (self.radius(u) * (2.0 * w - 1.0))[..., None]

    def pdf(self, z):
        z = np.asarray(z, dtype=np.float64)
        return np.exp(-np.abs(z[..., 0]) / self.scale) / (2.0 * self.scale)

    @property
    def variance(self) -> float:
        return 2.0 * self.scale**2

    def describe(self) -> dict:
        return {"kind": self.kind, "scale": self.scale}


NoiseSpec = Union[GaussianNoise, LaplaceNoise]


@dataclass(frozen=True)
class LatentSample:
    u: float
    radius: float

    def __post_init__(self):
        if not self.u > 0:
            raise ValueError(f"latent must be positive, got {self.u}")


def check_pairing(spec: NoiseSpec, lattice: LatticeSpec) -> None:
    if spec.dim != lattice.dim:
        raise ValueError(f"{spec.kind} noise of dimension {spec.dim} cannot pair with a {lattice.dim}-d lattice")


def sample_latent(stream: RandomStream, spec: NoiseSpec) -> LatentSample:
    u = float(spec.latent_from_words(stream.words(spec.latent_words)))
    return LatentSample(u, float(spec.radius(u)))


def _u(latent) -> float:
    return latent.u if isinstance(latent, LatentSample) else latent


def superlevel_contains(z, latent, spec: NoiseSpec):
    inside = spec.contains(np.atleast_1d(z), _u(latent))
    return bool(inside) if np.ndim(inside) == 0 else inside


def cell_side(latent, spec: NoiseSpec):
    """Side of the smallest cube ``beta(u) * cell`` holding the superlevel set."""
    u = np.asarray(_u(latent), dtype=np.float64)
    if np.any(u <= 0):
        raise ValueError("latent must be positive")
    return 2.0 * spec.radius(u)


def beta(latent, spec: NoiseSpec, lattice: LatticeSpec):
    out = cell_side(latent, spec) / lattice.alpha
    return float(out) if np.ndim(out) == 0 else out


def acceptance_probability(latent, spec: NoiseSpec, lattice: LatticeSpec) -> float:
    """Volume of the superlevel set over the volume of ``beta(u) * cell``."""
    check_pairing(spec, lattice)
    return spec.acceptance_probability()


def sample_noise_direct(stream: RandomStream, spec: NoiseSpec, size: int | None = None) -> np.ndarray:
    count = 1 if size is None else size
    words = stream.words(count * spec.direct_words()).reshape(count, spec.direct_words())
    out = spec.direct_from_words(words)
    return out[0] if size is None else out


def sample_noise_mixture(stream: RandomStream, spec: NoiseSpec, size: int | None = None) -> np.ndarray:
    count = 1 if size is None else size
    per = spec.latent_words + spec.direct_words() + 1
    words = stream.words(count * per).reshape(count, per)
    u = spec.latent_from_words(words[:, : spec.latent_words])
    out = spec.uniform_on_support(u, words[:, spec.latent_words:])
    return out[0] if size is None else out
