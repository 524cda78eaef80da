"""Dithered, rejection-sampled and layered universal quantizers.

Randomness contract
-------------------
Every LRSUQ block owns a fresh stream (or a stream positioned by agreement).
From the block's start the encoder and decoder read, in order:

1. the latent ``u`` -- ``noise.latent_words`` words;
2. dither ``v_1``, ``v_2``, ... -- ``lattice.dim`` words each.

A block accepted at trial ``h`` therefore consumes ``latent_words + h*dim``
words on both sides.  The batched encoder gives block ``j`` the stream
``parent.spawn(j)``, so block ``j`` of a batch reproduces a scalar
:func:`lrsuq_encode` on that child stream bit for bit.

The latent is never transmitted; the decoder regenerates it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .lattice import LatticePoint, LatticeSpec, cell_contains, cell_from_unit, embed, nearest_coords
from .layered_noise import NoiseSpec, cell_side, check_pairing
from .rng import RandomStream, to_unit, word_run, words_at

DEFAULT_MAX_TRIALS = 10_000


class TrialLimitExceeded(RuntimeError):
    """Rejection sampling ran past ``max_trials``; the acceptance set is likely misconfigured."""


@dataclass(frozen=True)
class RsuqConfig:
    lattice: LatticeSpec
    noise: NoiseSpec
    max_trials: int = DEFAULT_MAX_TRIALS

    def __post_init__(self):
        if self.max_trials < 1:
            raise ValueError("max_trials must be at least 1")
        check_pairing(self.noise, self.lattice)

    @property
    def dim(self) -> int:
        return self.lattice.dim

    def words_per_block(self, h) -> int:
        return self.noise.latent_words + h * self.lattice.dim


@dataclass(frozen=True)
class EncodedBlock:
    h: int
    m: LatticePoint
    # encoder-side reconstruction; never serialised
    reconstruction: np.ndarray | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.h < 1:
            raise ValueError("trial index h must be >= 1")


def _check_dither(v, lattice: LatticeSpec) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if not np.all(cell_contains(v, lattice)):
        raise ValueError("dither lies outside the basic cell")
    return v


def sdq_encode(x, v, lattice: LatticeSpec) -> LatticePoint:
    """``Q(x - v)`` for a dither ``v`` in the basic cell."""
    v = _check_dither(v, lattice)
    return LatticePoint(nearest_coords(np.asarray(x, dtype=np.float64) - v, lattice.alpha), lattice.alpha)


def sdq_decode(m: LatticePoint, v) -> np.ndarray:
    return m.embedding + np.asarray(v, dtype=np.float64)


def _draw_dither(stream: RandomStream, lattice: LatticeSpec) -> np.ndarray:
    return cell_from_unit(stream.uniform(lattice.dim), lattice.alpha)


def rsuq_encode(
    x,
    stream: RandomStream,
    lattice: LatticeSpec,
    target_set_contains: Callable[[np.ndarray], bool],
    max_trials: int = DEFAULT_MAX_TRIALS,
) -> EncodedBlock:
    """Redraw dithers until the SDQ error lands in the target set ``A``.

    ``target_set_contains`` must describe a subset of the basic cell with
    positive volume.  Consumes ``h * dim`` words.
    """
    x = np.asarray(x, dtype=np.float64)
    for h in range(1, max_trials + 1):
        v = _draw_dither(stream, lattice)
        j = nearest_coords(x - v, lattice.alpha)
        y = embed(j, lattice.alpha) + v
        if target_set_contains(y - x):
            return EncodedBlock(h, LatticePoint(j, lattice.alpha), y)
    raise TrialLimitExceeded(f"no acceptance within {max_trials} trials")


def rsuq_decode(block: EncodedBlock, stream: RandomStream, lattice: LatticeSpec) -> np.ndarray:
    stream.skip((block.h - 1) * lattice.dim)
    v = _draw_dither(stream, lattice)
    return block.m.embedding + v


def _reconstruct(beta, coords, v, alpha: float) -> np.ndarray:
    # the one expression both sides evaluate
    return beta[..., None] * (embed(coords, alpha) + v)


@dataclass
class BlockBatch:
    """Encoder output for ``N`` blocks; ``y`` and ``u`` stay on the client."""

    h: np.ndarray  # (N,) int64, trial index
    m: np.ndarray  # (N, n) int64, integer lattice coordinates
    u: np.ndarray  # (N,) latents
    y: np.ndarray  # (N, n) reconstructions

    def __len__(self) -> int:
        return self.h.shape[0]

    def block(self, j: int, alpha: float) -> EncodedBlock:
        return EncodedBlock(int(self.h[j]), LatticePoint(self.m[j].copy(), alpha), self.y[j].copy())


def latents(keys, start, config: RsuqConfig) -> np.ndarray:
    """Latent of each block whose stream is keyed ``keys`` and begins at ``start``."""
    k0, k1 = keys
    noise = config.noise
    if np.ndim(start) == 0:
        words = word_run(k0, k1, int(start), noise.latent_words)
    else:
        pos = np.asarray(start, dtype=np.uint64)[:, None] + np.arange(noise.latent_words, dtype=np.uint64)
        words = words_at(np.asarray(k0)[:, None], np.asarray(k1)[:, None], pos)
    u = noise.latent_from_words(words)
    if np.any(u <= 0):
        raise ValueError("degenerate zero latent drawn")
    return u


def _dithers(keys, start, trial, config: RsuqConfig) -> np.ndarray:
    k0, k1 = keys
    n = config.dim
    offset = config.noise.latent_words + (np.asarray(trial, dtype=np.uint64) - np.uint64(1)) * np.uint64(n)
    pos = (np.asarray(start, dtype=np.uint64) + offset)[..., None] + np.arange(n, dtype=np.uint64)
    return cell_from_unit(to_unit(words_at(np.asarray(k0)[:, None], np.asarray(k1)[:, None], pos)), config.lattice.alpha)


def encode_batch(x, keys, config: RsuqConfig, start=0) -> BlockBatch:
    """LRSUQ-encode ``N`` blocks ``x[j]`` on the streams keyed ``keys[j]``.

    All blocks advance in lock-step; each round of rejection sampling only
    touches blocks not yet accepted.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != config.dim:
        raise ValueError(f"expected blocks of shape (N, {config.dim}), got {x.shape}")
    k0, k1 = (np.asarray(k, dtype=np.uint64) for k in keys)
    count = x.shape[0]
    start = np.broadcast_to(np.asarray(start, dtype=np.uint64), (count,))
    alpha = config.lattice.alpha
    noise = config.noise

    u = latents((k0, k1), start, config)
    beta = cell_side(u, noise) / alpha
    scaled = x / beta[:, None]

    h = np.zeros(count, dtype=np.int64)
    m = np.zeros((count, config.dim), dtype=np.int64)
    y = np.zeros((count, config.dim), dtype=np.float64)
    active = np.arange(count)
    for trial in range(1, config.max_trials + 1):
        v = _dithers((k0[active], k1[active]), start[active], trial, config)
        j = nearest_coords(scaled[active] - v, alpha)
        cand = _reconstruct(beta[active], j, v, alpha)
        ok = noise.contains(cand - x[active], u[active])
        done = active[ok]
        h[done] = trial
        m[done] = j[ok]
        y[done] = cand[ok]
        active = active[~ok]
        if active.size == 0:
            return BlockBatch(h, m, u, y)
    raise TrialLimitExceeded(f"{active.size} block(s) not accepted within {config.max_trials} trials")


def decode_batch(h, m, keys, config: RsuqConfig, start=0, u=None) -> np.ndarray:
    """Server-side reconstruction ``beta(u) * (M + v_h)`` for every block."""
    k0, k1 = (np.asarray(k, dtype=np.uint64) for k in keys)
    h = np.asarray(h, dtype=np.int64)
    count = h.shape[0]
    start = np.broadcast_to(np.asarray(start, dtype=np.uint64), (count,))
    if u is None:
        u = latents((k0, k1), start, config)
    beta = cell_side(u, config.noise) / config.lattice.alpha
    v = _dithers((k0, k1), start, h, config)
    return _reconstruct(beta, np.asarray(m, dtype=np.int64), v, config.lattice.alpha)


def _stream_keys(stream: RandomStream):
    return np.array([stream.key[0]], dtype=np.uint64), np.array([stream.key[1]], dtype=np.uint64)


def lrsuq_encode(x, stream: RandomStream, config: RsuqConfig) -> EncodedBlock:
    """Encode one sub-vector, reading from ``stream`` at its current position.

    Leaves the stream just past the accepted dither.
    """
    x = np.asarray(x, dtype=np.float64).reshape(1, config.dim)
    batch = encode_batch(x, _stream_keys(stream), config, start=stream.position)
    h = int(batch.h[0])
    stream.skip(config.words_per_block(h))
    return EncodedBlock(h, LatticePoint(batch.m[0], config.lattice.alpha), batch.y[0])


def lrsuq_decode(block: EncodedBlock, stream: RandomStream, config: RsuqConfig) -> np.ndarray:
    y = decode_batch(
        np.array([block.h]), block.m.coords.reshape(1, config.dim), _stream_keys(stream), config, start=stream.position
    )
    stream.skip(config.words_per_block(block.h))
    return y[0]


def encode_vector_blocks(blocks, stream: RandomStream, config: RsuqConfig) -> BlockBatch:
    """Encode sub-vectors ``blocks[j]`` with block ``j`` on ``stream.spawn(j)``."""
    return encode_batch(blocks, stream.spawn_keys(len(blocks)), config)


def decode_vector_blocks(h, m, stream: RandomStream, config: RsuqConfig, u=None) -> np.ndarray:
    return decode_batch(h, m, stream.spawn_keys(len(h)), config, u=u)


def sdq_batch(x, stream: RandomStream, lattice: LatticeSpec):
    """Scalar-or-vector SDQ on every row of ``x``; dither row ``j`` on ``stream.spawn(j)``.

    Returns integer coordinates and the reconstruction.
    """
    x = np.asarray(x, dtype=np.float64)
    v = sdq_dithers(stream, x.shape[0], lattice)
    j = nearest_coords(x - v, lattice.alpha)
    return j, embed(j, lattice.alpha) + v


def sdq_dithers(stream: RandomStream, count: int, lattice: LatticeSpec) -> np.ndarray:
    k0, k1 = stream.spawn_keys(count)
    return cell_from_unit(to_unit(word_run(k0, k1, 0, lattice.dim)), lattice.alpha)
