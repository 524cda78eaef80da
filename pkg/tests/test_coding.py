import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cepam.coding import (
    HEADER,
    BitReader,
    BitString,
    CodingError,
    MessageHeader,
    SupportBox,
    block_code_lengths,
    config_hash,
    decode_message,
    encode_message,
    estimate_rate,
    geometric_entropy,
    golomb_code,
    golomb_decode,
    golomb_encode,
    golomb_parameter,
    half_widths,
    index_decode,
    index_encode,
    pack_chunks,
    parse_message,
    support_box,
)
from cepam.lattice import LatticeSpec
from cepam.layered_noise import GaussianNoise, LaplaceNoise
from cepam.quantizer import RsuqConfig, decode_vector_blocks, encode_vector_blocks
from cepam.rng import RandomStream

CONFIGS = [GaussianNoise(1.0, 1), GaussianNoise(1.0, 2), GaussianNoise(1.0, 3), LaplaceNoise(1.0)]


def _cfg(spec, alpha=1e-5):
    return RsuqConfig(LatticeSpec(spec.dim, alpha), spec)


def _ball_inputs(count, n, gamma, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(count, n))
    x *= (gamma * rng.uniform(size=(count, 1)) ** (1 / n)) / np.linalg.norm(x, axis=1, keepdims=True)
    return x


def test_golomb_examples():
    assert len(golomb_encode(1, 1.0)) == 0
    assert golomb_decode(BitString(""), 1.0) == 1
    with pytest.raises(CodingError):
        golomb_encode(2, 1.0)
    assert golomb_parameter(0.5) == 1
    assert golomb_encode(3, 0.5).bits == "110"
    for bad in (0.0, -0.1, 1.5):
        with pytest.raises(CodingError):
            golomb_parameter(bad)


def _entropy_by_summation(p):
    k = np.arange(1, 2000)
    pmf = p * (1 - p) ** (k - 1)
    pmf = pmf[pmf > 0]
    return float(-(pmf * np.log2(pmf)).sum())


@pytest.mark.parametrize("p", [math.pi / 4, math.pi / 6, 0.3, 0.05])
def test_golomb_length_close_to_entropy(p):
    assert geometric_entropy(p) == pytest.approx(_entropy_by_summation(p), rel=1e-9)
    rng = np.random.default_rng(1)
    h = rng.geometric(p, size=100_000)
    mg = golomb_parameter(p)
    mean_len = np.mean([golomb_code(int(x), mg)[1] for x in h])
    assert mean_len < geometric_entropy(p) + 1


@pytest.mark.parametrize("mg", [1, 2, 3, 5, 8])
def test_golomb_prefix_free_exhaustive(mg):
    words = [format(v, f"0{n}b") if n else "" for v, n in (golomb_code(h, mg) for h in range(1, 65))]
    for i, a in enumerate(words):
        for j, b in enumerate(words):
            if i != j:
                assert not b.startswith(a)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(1, 300), min_size=1, max_size=30), st.floats(0.01, 0.99))
def test_golomb_roundtrip_sequences(hs, p):
    bits = BitString("")
    for h in hs:
        bits = bits + golomb_encode(h, p)
    reader = BitReader(bits)
    assert [golomb_decode(reader, p) for _ in hs] == hs
    assert reader.remaining == 0


def test_index_examples():
    box = SupportBox((-1,), (1,))
    code = index_encode(np.array([0]), box)
    assert code.bits == "01"
    assert SupportBox((-2, -1), (2, 1)).bits == 4
    with pytest.raises(CodingError):
        index_encode(np.array([2]), box)


def test_index_roundtrip_full_enumeration():
    box = SupportBox((-2, -1, 0), (2, 1, 3))
    seen = set()
    for coords in np.ndindex(*box.sizes):
        c = np.array(coords) + np.array(box.lo)
        code = index_encode(c, box)
        assert len(code) == box.bits
        assert np.array_equal(index_decode(code, box), c)
        seen.add(code.bits)
    assert len(seen) == box.cardinality


def test_support_box_formula_and_degenerate_gamma():
    cfg = _cfg(GaussianNoise(1.0, 1))
    u = 2.5
    r = math.sqrt(u)
    w = math.ceil((0.7 + r) / (2 * r) + 0.5)
    assert support_box(0.7, u, cfg) == SupportBox((-w,), (w,))
    box0 = support_box(0.0, u, cfg)
    assert box0.cardinality >= 1 and box0.contains([0])


@pytest.mark.parametrize("spec", CONFIGS, ids=["g1", "g2", "g3", "lap"])
def test_encoder_points_always_inside_box(spec):
    gamma = 2.0
    cfg = _cfg(spec, alpha=1e-3)
    x = _ball_inputs(100_000 // (1 if spec.dim == 1 else 2), spec.dim, gamma, seed=spec.dim)
    batch = encode_vector_blocks(x, RandomStream(spec.dim + 40), cfg)
    w = half_widths(gamma, batch.u, cfg)
    assert np.all(np.abs(batch.m) <= w[:, None])


@pytest.mark.parametrize("spec", CONFIGS, ids=["g1", "g2", "g3", "lap"])
def test_message_roundtrip_bit_exact(spec):
    gamma = 1.0
    cfg = _cfg(spec)
    x = _ball_inputs(3000, spec.dim, gamma, seed=5)
    root = RandomStream(77)
    batch = encode_vector_blocks(x, root, cfg)
    msg = encode_message(3, 9, batch.h, batch.m, batch.u, gamma, cfg)
    header, h, m, u = decode_message(msg.data, root, gamma, cfg)
    assert header == MessageHeader(3, 9, 3000, config_hash(cfg, gamma))
    assert np.array_equal(h, batch.h) and np.array_equal(m, batch.m) and np.array_equal(u, batch.u)
    assert np.array_equal(decode_vector_blocks(h, m, root, cfg, u=u), batch.y)
    glen, ilen = block_code_lengths(batch.h, batch.u, gamma, cfg)
    assert msg.payload_bits == int(glen.sum() + ilen.sum())
    assert len(msg.data) == HEADER.size + (msg.payload_bits + 7) // 8


def test_message_rejects_mismatches():
    cfg = _cfg(GaussianNoise(1.0, 2))
    root = RandomStream(1)
    x = _ball_inputs(50, 2, 1.0, seed=0)
    batch = encode_vector_blocks(x, root, cfg)
    msg = encode_message(0, 0, batch.h, batch.m, batch.u, 1.0, cfg)
    with pytest.raises(CodingError):
        parse_message(msg.data, batch.u, 2.0, cfg)  # different gamma, different hash
    with pytest.raises(CodingError):
        parse_message(msg.data + b"\xff", batch.u, 1.0, cfg)
    with pytest.raises(CodingError):
        parse_message(msg.data[:-1], batch.u, 1.0, cfg)
    with pytest.raises(CodingError):
        MessageHeader.unpack(b"\x00" * 5)


def test_header_layout_little_endian():
    raw = MessageHeader(1, 2, 3, 0x0102030405060708).pack()
    assert raw == bytes([1, 0, 0, 0, 2, 0, 0, 0, 3, 0, 0, 0, 8, 7, 6, 5, 4, 3, 2, 1])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 2**40), st.integers(0, 63)), min_size=1, max_size=40))
def test_pack_chunks_matches_string_assembly(items):
    values = [v & ((1 << n) - 1) if n else 0 for v, n in items]
    lengths = [n for _, n in items]
    data, nbits = pack_chunks(np.array(values, dtype=np.uint64), lengths)
    text = "".join(format(v, f"0{n}b") if n else "" for v, n in zip(values, lengths))
    assert nbits == len(text)
    assert BitString.from_bytes(data, nbits).bits == text


def test_rate_gaussian_n1_is_index_only_and_nonincreasing_in_alpha():
    est = estimate_rate(_cfg(GaussianNoise(1.0, 1)), 1.0, 10_000)
    assert est.geometric_term == 0.0 and est.mean == est.index_term
    rates = [estimate_rate(_cfg(GaussianNoise(1.0, 2), alpha), 1.0, 10_000, RandomStream(3)).mean for alpha in (1e-7, 1e-5, 1e-3, 1e-1, 1.0)]
    assert all(b <= a + 1e-12 for a, b in zip(rates, rates[1:]))
    with pytest.raises(ValueError):
        estimate_rate(_cfg(GaussianNoise(1.0, 1)), 1.0, 999)


@pytest.mark.parametrize("spec", CONFIGS, ids=["g1", "g2", "g3", "lap"])
def test_measured_rate_within_ten_percent(spec):
    gamma = 1.0
    cfg = _cfg(spec)
    est = estimate_rate(cfg, gamma, 10_000, RandomStream(1))
    x = _ball_inputs(10_000, spec.dim, gamma, seed=2)
    batch = encode_vector_blocks(x, RandomStream(2), cfg)
    msg = encode_message(0, 0, batch.h, batch.m, batch.u, gamma, cfg)
    assert abs(msg.payload_bits / 10_000 / est.mean - 1) < 0.10
