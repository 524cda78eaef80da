"""Counter-based shared randomness.

All randomness in the package flows through :class:`RandomStream`, a thin
layer over the Philox4x64-10 block cipher (Salmon et al., SC'11).  Philox is
evaluated here in pure numpy so that thousands of independent sub-streams can
be advanced in one vectorised call; the output is bit-identical to
``numpy.random.Philox`` for the same key and counter.

Generator ``cepam-philox4x64-10/v1``
------------------------------------
* A stream is identified by a 128-bit key ``(k0, k1)``.  The root stream for a
  64-bit seed ``s`` has key ``(s, VERSION_TAG)``.
* Word ``i`` of a stream is output lane ``i % 4`` of
  ``philox(counter=(i // 4, 0, 0, DRAW_DOMAIN), key)``.
* Child ``c`` of a stream (``spawn(c)``) has key equal to lanes 0 and 1 of
  ``philox(counter=(c, 0, 0, SPAWN_DOMAIN), key)``.
* A uniform double is ``(word >> 11) * 2**-53`` in ``[0, 1)``.

Draw recipes built on top of words (cell dithers, latents, normals) live in
the modules that use them and document their own word counts.
"""

from __future__ import annotations

import numpy as np

GENERATOR = "cepam-philox4x64-10/v1"
VERSION_TAG = 0x4345_5041_4D00_0001
DRAW_DOMAIN = 0
SPAWN_DOMAIN = 1

_MASK32 = np.uint64(0xFFFFFFFF)
_SHIFT32 = np.uint64(32)
_M0 = np.uint64(0xD2E7470EE14C6C93)
_M1 = np.uint64(0xCA5A826395121157)
_W0 = np.uint64(0x9E3779B97F4A7C15)
_W1 = np.uint64(0xBB67AE8584CAA73B)
_M0_HI, _M0_LO = _M0 >> _SHIFT32, _M0 & _MASK32
_M1_HI, _M1_LO = _M1 >> _SHIFT32, _M1 & _MASK32
_U53 = 1.0 / 9007199254740992.0


def _mulhilo(a, m, m_hi, m_lo):
    a_hi = a >> _SHIFT32
    a_lo = a & _MASK32
    lo_lo = a_lo * m_lo
    hi_lo = a_hi * m_lo
    lo_hi = a_lo * m_hi
    cross = (lo_lo >> _SHIFT32) + (hi_lo & _MASK32) + (lo_hi & _MASK32)
    hi = a_hi * m_hi + (hi_lo >> _SHIFT32) + (lo_hi >> _SHIFT32) + (cross >> _SHIFT32)
    return hi, a * m


def philox4x64(c0, c1, c2, c3, k0, k1, rounds: int = 10):
    """Philox4x64 bijection, broadcast over array arguments.

    Returns four uint64 arrays (the output lanes).
    """
    with np.errstate(over="ignore"):
        arrs = np.broadcast_arrays(*(np.asarray(v, dtype=np.uint64) for v in (c0, c1, c2, c3, k0, k1)))
        c0, c1, c2, c3, k0, k1 = (np.array(a, dtype=np.uint64, copy=True) for a in arrs)
        for r in range(rounds):
            hi0, lo0 = _mulhilo(c0, _M0, _M0_HI, _M0_LO)
            hi1, lo1 = _mulhilo(c2, _M1, _M1_HI, _M1_LO)
            c0, c1, c2, c3 = hi1 ^ c1 ^ k0, lo1, hi0 ^ c3 ^ k1, lo0
            if r + 1 < rounds:
                k0 = k0 + _W0
                k1 = k1 + _W1
    return c0, c1, c2, c3


def words_at(k0, k1, positions):
    """Words at absolute ``positions`` of the streams keyed ``(k0, k1)``.

    ``k0``/``k1`` broadcast against ``positions``; nothing is consumed.
    """
    positions = np.asarray(positions, dtype=np.uint64)
    lanes = philox4x64(positions >> np.uint64(2), 0, 0, DRAW_DOMAIN, k0, k1)
    stacked = np.stack(lanes, axis=-1)
    lane = (positions & np.uint64(3)).astype(np.intp)
    lane = np.broadcast_to(lane, stacked.shape[:-1])
    return np.take_along_axis(stacked, lane[..., None], axis=-1)[..., 0]


def word_run(k0, k1, start: int, count: int) -> np.ndarray:
    """Words ``start .. start+count-1`` of every stream keyed ``(k0, k1)``.

    Returns an array of shape ``k0.shape + (count,)``.  Cheaper than
    :func:`words_at` because each Philox block is evaluated once.
    """
    k0 = np.asarray(k0, dtype=np.uint64)
    k1 = np.asarray(k1, dtype=np.uint64)
    first, last = start // 4, (start + count - 1) // 4
    ctr = np.arange(first, last + 1, dtype=np.uint64)
    lanes = philox4x64(ctr, 0, 0, DRAW_DOMAIN, k0[..., None], k1[..., None])
    flat = np.stack(lanes, axis=-1).reshape(k0.shape + (4 * ctr.size,))
    offset = start - 4 * first
    return flat[..., offset:offset + count]


def spawn_keys(k0, k1, children):
    """Keys of child streams ``children`` of the streams keyed ``(k0, k1)``."""
    lanes = philox4x64(children, 0, 0, SPAWN_DOMAIN, k0, k1)
    return lanes[0], lanes[1]


def to_unit(words) -> np.ndarray:
    """Map uint64 words to doubles in ``[0, 1)`` using the top 53 bits."""
    return (np.asarray(words, dtype=np.uint64) >> np.uint64(11)).astype(np.float64) * _U53


def to_open_unit(words) -> np.ndarray:
    """Map uint64 words to doubles in the open interval ``(0, 1)``.

    Uses the top 52 bits so that the half-step offset stays exact.
    """
    return ((np.asarray(words, dtype=np.uint64) >> np.uint64(12)).astype(np.float64) + 0.5) * (2.0 * _U53)


class RandomStream:
    """A sequential view onto one Philox key.

    Two streams built from the same seed (or the same spawn path) yield the
    same words.  A stream is single-owner: ``position`` advances on every
    draw and nothing is locked.
    """

    generator = GENERATOR

    def __init__(self, seed: int = 0, *, key: tuple[int, int] | None = None, position: int = 0):
        if key is None:
            if not 0 <= int(seed) < 2**64:
                raise ValueError(f"seed must fit in 64 bits, got {seed}")
            key = (int(seed), VERSION_TAG)
        self.key = (int(key[0]), int(key[1]))
        self.position = int(position)

    def __repr__(self) -> str:
        return f"RandomStream(key=({self.key[0]:#018x}, {self.key[1]:#018x}), position={self.position})"

    def spawn(self, index: int) -> "RandomStream":
        """Independent child stream; the parent's position is untouched."""
        k0, k1 = spawn_keys(np.uint64(self.key[0]), np.uint64(self.key[1]), np.uint64(index))
        return RandomStream(key=(int(k0), int(k1)))

    def spawn_keys(self, count: int, start: int = 0) -> tuple[np.ndarray, np.ndarray]:
        """Keys of children ``start .. start+count-1`` as two uint64 arrays."""
        children = np.arange(start, start + count, dtype=np.uint64)
        return spawn_keys(np.uint64(self.key[0]), np.uint64(self.key[1]), children)

    def words(self, count: int) -> np.ndarray:
        """Consume ``count`` 64-bit words."""
        if count == 0:
            return np.zeros(0, dtype=np.uint64)
        out = word_run(np.uint64(self.key[0]), np.uint64(self.key[1]), self.position, count)
        self.position += count
        return out

    def uniform(self, count: int) -> np.ndarray:
        """Consume ``count`` words as doubles in ``[0, 1)``."""
        return to_unit(self.words(count))

    def skip(self, count: int) -> None:
        self.position += count

    def integers(self, high: int, count: int) -> np.ndarray:
        """``count`` integers in ``[0, high)``, one word each (multiply-shift)."""
        u = to_unit(self.words(count))
        return np.minimum((u * high).astype(np.int64), high - 1)

    def seed64(self) -> int:
        """Consume one word and return it as a Python int (for deriving seeds)."""
        return int(self.words(1)[0])
