"""Bit-exact serialisation of LRSUQ messages.

Each block is sent as a Golomb code of its trial index ``H`` followed by a
fixed-length index of its lattice point ``M`` inside a box that both sides
derive from the (regenerated) latent.  Codes are concatenated MSB-first and
the message is zero-padded to a whole byte only at the end.

Wire format, one message per client per round::

    offset  size  field
    0       4     round id          (u32, little-endian)
    4       4     client id         (u32, little-endian)
    8       4     block count N     (u32, little-endian)
    12      8     config hash       (u64, little-endian)
    20      ...   N blocks: golomb(H) || index(M), MSB-first, zero pad to a byte
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass

import numpy as np

from .lattice import LatticePoint
from .layered_noise import LatentSample, cell_side
from .quantizer import RsuqConfig, latents
from .rng import GENERATOR, RandomStream

HEADER = struct.Struct("<IIIQ")


class CodingError(ValueError):
    pass


# -- bit strings -----------------------------------------------------------


@dataclass(frozen=True)
class BitString:
    """Immutable bit sequence stored as a ``'0'/'1'`` string."""

    bits: str = ""

    def __len__(self) -> int:
        return len(self.bits)

    def __add__(self, other: "BitString") -> "BitString":
        return BitString(self.bits + other.bits)

    def to_bytes(self) -> bytes:
        """MSB-first, zero-padded to a whole byte."""
        if not self.bits:
            return b""
        nbytes = (len(self.bits) + 7) // 8
        return int(self.bits.ljust(8 * nbytes, "0"), 2).to_bytes(nbytes, "big")

    @classmethod
    def from_bytes(cls, data: bytes, nbits: int | None = None) -> "BitString":
        bits = bin(int.from_bytes(data, "big"))[2:].zfill(8 * len(data)) if data else ""
        return cls(bits if nbits is None else bits[:nbits])

    @classmethod
    def from_int(cls, value: int, width: int) -> "BitString":
        if width == 0:
            if value:
                raise CodingError("nonzero value in a zero-width field")
            return cls("")
        if value < 0 or value >> width:
            raise CodingError(f"{value} does not fit in {width} bits")
        return cls(format(value, f"0{width}b"))


class BitReader:
    def __init__(self, bits: BitString | str, pos: int = 0):
        self.bits = bits.bits if isinstance(bits, BitString) else bits
        self.pos = pos

    def read(self, width: int) -> int:
        if width == 0:
            return 0
        end = self.pos + width
        if end > len(self.bits):
            raise CodingError("read past end of bit stream")
        value = int(self.bits[self.pos:end], 2)
        self.pos = end
        return value

    def read_unary(self) -> int:
        """Count of ``1`` bits before the next ``0``."""
        stop = self.bits.find("0", self.pos)
        if stop < 0:
            raise CodingError("unterminated unary code")
        q = stop - self.pos
        self.pos = stop + 1
        return q

    @property
    def remaining(self) -> int:
        return len(self.bits) - self.pos


def pack_chunks(values, lengths) -> tuple[bytes, int]:
    """Concatenate ``(value, length)`` codes MSB-first; returns bytes and bit count.

    Values are Python ints or a uint64 array; lengths up to 63 take the numpy
    path, anything longer falls back to string assembly.
    """
    lengths = np.asarray(lengths, dtype=np.int64)
    total = int(lengths.sum())
    if total == 0:
        return b"", 0
    if lengths.max() <= 63 and not (isinstance(values, list) and any(v >> 63 for v in values)):
        vals = np.asarray(values, dtype=np.uint64)
        owner = np.repeat(np.arange(lengths.size), lengths)
        starts = np.cumsum(lengths) - lengths
        shift = (lengths[owner] - 1 - (np.arange(total) - starts[owner])).astype(np.uint64)
        bits = ((vals[owner] >> shift) & np.uint64(1)).astype(np.uint8)
        return np.packbits(bits).tobytes(), total
    text = "".join(format(int(v), f"0{int(w)}b") if w else "" for v, w in zip(values, lengths))
    return BitString(text).to_bytes(), total


# -- Golomb codes for the trial index --------------------------------------


def golomb_parameter(p: float) -> int:
    """Golomb divisor ``ceil(-1 / log2(1 - p))``; 0 means H is not coded (p == 1)."""
    if not 0 < p <= 1:
        raise CodingError(f"acceptance probability must lie in (0, 1], got {p}")
    if p == 1:
        return 0
    return max(1, math.ceil(-1.0 / math.log2(1.0 - p)))


def _truncated_binary(r: int, mg: int) -> tuple[int, int]:
    if mg == 1:
        return 0, 0
    b = (mg - 1).bit_length()
    cutoff = (1 << b) - mg
    if r < cutoff:
        return r, b - 1
    return r + cutoff, b


def golomb_code(h: int, mg: int) -> tuple[int, int]:
    """``(value, length)`` of the Golomb codeword for ``h >= 1``."""
    if mg == 0:
        if h != 1:
            raise CodingError("h must be 1 when the acceptance probability is 1")
        return 0, 0
    q, r = divmod(h - 1, mg)
    rv, rl = _truncated_binary(r, mg)
    return (((1 << q) - 1) << (1 + rl)) | rv, q + 1 + rl


def golomb_encode(h: int, p: float) -> BitString:
    if h < 1:
        raise CodingError("h must be >= 1")
    value, length = golomb_code(h, golomb_parameter(p))
    return BitString.from_int(value, length)


def golomb_read(reader: BitReader, mg: int) -> int:
    if mg == 0:
        return 1
    q = reader.read_unary()
    if mg == 1:
        return q + 1
    b = (mg - 1).bit_length()
    cutoff = (1 << b) - mg
    r = reader.read(b - 1)
    if r >= cutoff:
        r = ((r << 1) | reader.read(1)) - cutoff
    return q * mg + r + 1


def golomb_decode(bits: BitString | BitReader, p: float) -> int:
    reader = bits if isinstance(bits, BitReader) else BitReader(bits)
    return golomb_read(reader, golomb_parameter(p))


def geometric_entropy(p: float) -> float:
    """Entropy in bits of ``Geom(p)`` on ``{1, 2, ...}``."""
    if not 0 < p <= 1:
        raise CodingError(f"p must lie in (0, 1], got {p}")
    if p == 1:
        return 0.0
    q = 1.0 - p
    return (-q * math.log2(q) - p * math.log2(p)) / p


# -- lattice point index ---------------------------------------------------


@dataclass(frozen=True)
class SupportBox:
    """Per-coordinate integer bounds ``lo[i] <= m[i] <= hi[i]``."""

    lo: tuple[int, ...]
    hi: tuple[int, ...]

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(h - l + 1 for l, h in zip(self.lo, self.hi))

    @property
    def cardinality(self) -> int:
        return math.prod(self.sizes)

    @property
    def bits(self) -> int:
        """``ceil(log2 |box|)``."""
        return (self.cardinality - 1).bit_length()

    def contains(self, coords) -> bool:
        return all(l <= int(c) <= h for c, l, h in zip(coords, self.lo, self.hi))


def half_widths(gamma: float, u, config: RsuqConfig) -> np.ndarray:
    """Integer half-width of the admissible box for each latent in ``u``.

    The emitted point satisfies ``beta*(alpha*M + v) - x`` in the superlevel
    set of radius ``r`` with ``|x_i| <= gamma`` and ``|beta*v_i| <= beta*alpha/2``;
    dividing by the cell side ``beta*alpha`` bounds ``|M_i|``.
    """
    if gamma < 0:
        raise CodingError("clip radius must be non-negative")
    u = np.asarray(u, dtype=np.float64)
    side = cell_side(u, config.noise)
    r = config.noise.radius(u)
    return np.ceil((gamma + r) / side + 0.5).astype(np.int64)


def support_box(gamma: float, latent, config: RsuqConfig) -> SupportBox:
    u = latent.u if isinstance(latent, LatentSample) else latent
    w = int(half_widths(gamma, u, config))
    n = config.dim
    return SupportBox((-w,) * n, (w,) * n)


def index_value(coords, box: SupportBox) -> int:
    if not box.contains(coords):
        raise CodingError(f"lattice point {list(coords)} outside support box")
    idx = 0
    for c, l, s in zip(coords, box.lo, box.sizes):
        idx = idx * s + (int(c) - l)
    return idx


def index_encode(m: LatticePoint | np.ndarray, box: SupportBox) -> BitString:
    coords = m.coords if isinstance(m, LatticePoint) else m
    return BitString.from_int(index_value(coords, box), box.bits)


def index_coords(idx: int, box: SupportBox) -> np.ndarray:
    if idx >= box.cardinality:
        raise CodingError("index beyond support box")
    out = []
    for l, s in zip(reversed(box.lo), reversed(box.sizes)):
        idx, c = divmod(idx, s)
        out.append(c + l)
    return np.array(out[::-1], dtype=np.int64)


def index_decode(bits: BitString | BitReader, box: SupportBox) -> np.ndarray:
    reader = bits if isinstance(bits, BitReader) else BitReader(bits)
    return index_coords(reader.read(box.bits), box)


def _index_widths(w: np.ndarray, n: int) -> np.ndarray:
    """``ceil(log2((2w+1)^n))`` per block, exact."""
    w = np.asarray(w, dtype=np.int64)
    if w.size and float(2 * w.max() + 1) ** n < 2.0**52:
        card = (2 * w + 1) ** n
        _, exp = np.frexp((card - 1).astype(np.float64))
        return np.where(card > 1, exp, 0).astype(np.int64)
    return np.array([((2 * int(x) + 1) ** n - 1).bit_length() for x in w], dtype=np.int64)


def unpack_fields(data: bytes, starts, widths) -> np.ndarray:
    """Read fixed-width MSB-first fields (each at most 62 bits) from ``data``."""
    bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8)).astype(np.int64)
    starts = np.asarray(starts, dtype=np.int64)
    widths = np.asarray(widths, dtype=np.int64)
    if widths.size and int((starts + widths).max()) > bits.size:
        raise CodingError("read past end of bit stream")
    out = np.zeros(starts.shape, dtype=np.int64)
    for k in range(int(widths.max(initial=0))):
        live = k < widths
        pos = np.where(live, starts + k, 0)
        out = np.where(live, (out << 1) | bits[pos], out)
    return out


# -- messages --------------------------------------------------------------


def config_hash(config: RsuqConfig, gamma: float) -> int:
    """64-bit digest of everything both ends must agree on."""
    payload = {
        "generator": GENERATOR,
        "dim": config.dim,
        "alpha": repr(float(config.lattice.alpha)),
        "noise": {k: repr(v) if isinstance(v, float) else v for k, v in config.noise.describe().items()},
        "gamma": repr(float(gamma)),
        "max_trials": config.max_trials,
    }
    digest = hashlib.blake2b(json.dumps(payload, sort_keys=True).encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


@dataclass(frozen=True)
class MessageHeader:
    round_id: int
    client_id: int
    blocks: int
    config_hash: int

    def pack(self) -> bytes:
        return HEADER.pack(self.round_id, self.client_id, self.blocks, self.config_hash)

    @classmethod
    def unpack(cls, data: bytes) -> "MessageHeader":
        if len(data) < HEADER.size:
            raise CodingError("message shorter than its header")
        return cls(*HEADER.unpack_from(data))


@dataclass
class Message:
    data: bytes
    payload_bits: int  # block codes only, before the final padding

    @property
    def total_bits(self) -> int:
        return 8 * len(self.data)


def block_code_lengths(h, u, gamma: float, config: RsuqConfig) -> tuple[np.ndarray, np.ndarray]:
    """Golomb and index code lengths (bits) of each block."""
    mg = golomb_parameter(config.noise.acceptance_probability())
    glen = np.array([golomb_code(int(x), mg)[1] for x in h], dtype=np.int64) if mg else np.zeros(len(h), np.int64)
    ilen = _index_widths(half_widths(gamma, u, config), config.dim)
    return glen, ilen


def encode_message(round_id: int, client_id: int, h, m, u, gamma: float, config: RsuqConfig) -> Message:
    h = np.asarray(h, dtype=np.int64)
    m = np.asarray(m, dtype=np.int64)
    count, n = m.shape
    mg = golomb_parameter(config.noise.acceptance_probability())
    w = half_widths(gamma, u, config)
    if np.any(np.abs(m) > w[:, None]):
        raise CodingError("lattice point outside support box (encoder/configuration mismatch)")
    widths = _index_widths(w, n)
    size = 2 * w + 1
    if int(widths.max(initial=0)) <= 62:
        idx = np.zeros(count, dtype=np.int64)
        for i in range(n):
            idx = idx * size + (m[:, i] + w)
        idx_vals = idx.astype(np.uint64)
    else:
        idx_vals = [index_value(m[j], SupportBox((-int(w[j]),) * n, (int(w[j]),) * n)) for j in range(count)]
    if mg == 0:
        if np.any(h != 1):
            raise CodingError("h must be 1 when the acceptance probability is 1")
        values, lengths = idx_vals, np.asarray(widths, dtype=np.int64)
    else:
        codes = [golomb_code(int(x), mg) for x in h]
        values = [0] * (2 * count)
        lengths = np.zeros(2 * count, dtype=np.int64)
        values[0::2] = [c[0] for c in codes]
        values[1::2] = [int(v) for v in idx_vals]
        lengths[0::2] = [c[1] for c in codes]
        lengths[1::2] = widths
        if lengths.max(initial=0) <= 63:
            values = np.array(values, dtype=np.uint64)
    payload, nbits = pack_chunks(values, lengths)
    header = MessageHeader(round_id, client_id, count, config_hash(config, gamma))
    return Message(header.pack() + payload, nbits)


def parse_message(data: bytes, u, gamma: float, config: RsuqConfig):
    """Split a message into ``(header, h, m)`` given every block's latent."""
    header = MessageHeader.unpack(data)
    if header.config_hash != config_hash(config, gamma):
        raise CodingError("config hash mismatch between client and server")
    u = np.asarray(u, dtype=np.float64)
    if u.shape[0] != header.blocks:
        raise CodingError(f"got {u.shape[0]} latents for {header.blocks} blocks")
    n = config.dim
    mg = golomb_parameter(config.noise.acceptance_probability())
    w = half_widths(gamma, u, config)
    widths = _index_widths(w, n)
    payload = data[HEADER.size:]
    h = np.ones(header.blocks, dtype=np.int64)
    m = np.zeros((header.blocks, n), dtype=np.int64)
    fast = int(widths.max(initial=0)) <= 62
    if mg == 0 and fast:
        starts = np.cumsum(widths) - widths
        end = int(widths.sum())
        flat = unpack_fields(payload, starts, widths)
        tail = BitString.from_bytes(payload).bits[end:]
    else:
        reader = BitReader(BitString.from_bytes(payload))
        flat = np.zeros(header.blocks, dtype=object)
        for j in range(header.blocks):
            if mg:
                h[j] = golomb_read(reader, mg)
            flat[j] = reader.read(int(widths[j]))
        tail = reader.bits[reader.pos:]
    if len(tail) >= 8 or tail.strip("0"):
        raise CodingError("trailing data after last block")
    size = 2 * w + 1
    if fast:
        rest = flat.astype(np.int64)
        for i in range(n - 1, -1, -1):
            rest, c = np.divmod(rest, size)
            m[:, i] = c - w
        if np.any(rest):
            raise CodingError("index beyond support box")
    else:
        for j in range(header.blocks):
            wj = int(w[j])
            m[j] = index_coords(int(flat[j]), SupportBox((-wj,) * n, (wj,) * n))
    return header, h, m


def decode_message(data: bytes, stream: RandomStream, gamma: float, config: RsuqConfig):
    """Regenerate latents from the shared round stream, then parse.

    Returns ``(header, h, m, u)``.
    """
    header = MessageHeader.unpack(data)
    u = latents(stream.spawn_keys(header.blocks), 0, config)
    header, h, m = parse_message(data, u, gamma, config)
    return header, h, m, u


# -- rate ------------------------------------------------------------------


@dataclass(frozen=True)
class RateEstimate:
    mean: float
    stderr: float
    geometric_term: float
    index_term: float


def estimate_rate(config: RsuqConfig, gamma: float, samples: int, stream: RandomStream | None = None) -> RateEstimate:
    """Monte-Carlo estimate of bits per block, ``H(Geom(p(U))|U) + E ceil(log2 |M(U)|)``."""
    if samples < 1000:
        raise ValueError("rate estimation needs at least 1000 samples")
    stream = stream if stream is not None else RandomStream(0)
    u = latents(stream.spawn_keys(samples), 0, config)
    geom = geometric_entropy(config.noise.acceptance_probability())
    index_bits = _index_widths(half_widths(gamma, u, config), config.dim).astype(np.float64)
    per = geom + index_bits
    return RateEstimate(
        float(per.mean()), float(per.std(ddof=1) / math.sqrt(samples)), geom, float(index_bits.mean())
    )
