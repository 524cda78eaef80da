import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

import cepam.fl.sim as sim
from cepam.coding import HEADER, block_code_lengths, decode_message
from cepam.fl.data import synthetic_clusters
from cepam.fl.mlp import MlpArchitecture, init_params
from cepam.fl.sim import (
    TrainingConfig,
    clip_update,
    client_round,
    decode_upload,
    local_sgd,
    make_clients,
    partition,
    run_experiment,
    server_aggregate,
    summarize,
    unpartition,
    write_metrics_csv,
)
from cepam.rng import RandomStream


@pytest.fixture(scope="module")
def small():
    ds = synthetic_clusters(600, 100, 200, RandomStream(9), dim=100, separation=0.3)
    arch = MlpArchitecture((100, 16, 10))
    return ds, arch


def _setup(small, **kw):
    ds, arch = small
    cfg = TrainingConfig(**{"iterations": 15, "clients": 10, "hidden": (16,), **kw})
    master = RandomStream(cfg.seed)
    w = init_params(arch, master.spawn(0))
    return cfg, ds, arch, w, make_clients(cfg, ds, master)


def test_clip_examples():
    x = np.array([0.3, 0.4])
    assert np.array_equal(clip_update(x, 1.0), x)
    assert np.allclose(clip_update(np.array([3.0, 4.0]), 1.0), [0.6, 0.8])
    with pytest.raises(ValueError):
        clip_update(x, 0.0)


def test_clip_norm_property():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        x = rng.normal(size=rng.integers(1, 50)) * rng.uniform(0.01, 10)
        g = rng.uniform(0.1, 5)
        y = clip_update(x, g)
        assert np.linalg.norm(y) == pytest.approx(min(np.linalg.norm(x), g), rel=1e-12)
        assert np.allclose(y / np.linalg.norm(y), x / np.linalg.norm(x))


def test_partition_examples():
    b, pad = partition(np.arange(6.0), 3)
    assert b.shape == (2, 3) and pad == 0
    b, pad = partition(np.arange(7.0), 3)
    assert b.shape == (3, 3) and pad == 2 and b[-1].tolist() == [6.0, 0.0, 0.0]
    with pytest.raises(ValueError):
        partition(np.arange(3.0), 0)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=60), st.integers(1, 7))
def test_unpartition_inverts_partition(xs, n):
    x = np.array(xs)
    blocks, _ = partition(x, n)
    assert np.array_equal(unpartition(blocks, len(x)), x)


def test_local_sgd_zero_gradient_gives_zero_update(small, monkeypatch):
    cfg, ds, arch, w, clients = _setup(small)
    monkeypatch.setattr(sim, "loss_and_grad", lambda w, a, x, y: (0.5, np.zeros_like(w)))
    assert np.all(local_sgd(clients[0], w, 1, cfg, ds, arch) == 0)


def test_local_sgd_non_finite_loss_raises(small, monkeypatch):
    cfg, ds, arch, w, clients = _setup(small)
    monkeypatch.setattr(sim, "loss_and_grad", lambda w, a, x, y: (math.nan, np.zeros_like(w)))
    with pytest.raises(FloatingPointError, match="round 3"):
        local_sgd(clients[0], w, 2, cfg, ds, arch, round_id=3)


def test_local_sgd_deterministic(small):
    cfg, ds, arch, w, clients = _setup(small)
    _, _, _, _, again = _setup(small)
    assert np.array_equal(local_sgd(clients[2], w, 15, cfg, ds, arch, 4), local_sgd(again[2], w, 15, cfg, ds, arch, 4))


def test_client_seeds_distinct_and_weights_sum_to_one(small):
    _, _, _, _, clients = _setup(small)
    assert len({c.seed for c in clients}) == len(clients)
    assert sum(c.weight for c in clients) == pytest.approx(1.0)


@pytest.mark.parametrize("scheme,block_dim", [("cepam-gaussian", 1), ("cepam-gaussian", 3), ("cepam-laplace", 1)])
def test_cepam_round_decode_matches_client_and_bits_identity(small, scheme, block_dim):
    cfg, ds, arch, w, clients = _setup(small, scheme=scheme, block_dim=block_dim)
    up = client_round(clients[0], w, cfg, ds, arch, round_id=2)
    xhat = decode_upload(up, clients[0], cfg, len(w))
    assert np.array_equal(xhat, up.reconstruction)
    _, h, m, u = decode_message(up.payload, clients[0].shared_stream(2), cfg.gamma, cfg.rsuq_config())
    glen, ilen = block_code_lengths(h, u, cfg.gamma, cfg.rsuq_config())
    assert up.bits == 8 * HEADER.size + int(glen.sum() + ilen.sum())


def test_cepam_gaussian_server_error_is_gaussian(small):
    cfg, ds, arch, w, clients = _setup(small, sigma=0.001)
    errs = []
    for c in clients:
        up = client_round(c, w, cfg, ds, arch, round_id=0)
        errs.append(decode_upload(up, c, cfg, len(w)) - up.clipped)
    e = np.concatenate(errs)
    assert e.size >= 10_000
    assert stats.kstest(e, stats.norm(scale=0.001).cdf).statistic < 0.02


@pytest.mark.parametrize("scheme", ["fl", "fl+sdq", "fl+gaussian", "fl+laplace+sdq", "fl+gaussian+sdq"])
def test_baseline_roundtrip(small, scheme):
    cfg, ds, arch, w, clients = _setup(small, scheme=scheme)
    up = client_round(clients[1], w, cfg, ds, arch, round_id=1)
    assert np.array_equal(decode_upload(up, clients[1], cfg, len(w)), up.reconstruction)
    assert up.bits > 0


def test_single_client_noise_free_aggregate_is_local_model(small):
    ds, arch = small
    cfg = TrainingConfig(scheme="fl", iterations=15, clients=1, hidden=(16,), gamma=1e6)
    master = RandomStream(0)
    w = init_params(arch, master.spawn(0))
    (client,) = make_clients(cfg, ds, master)
    probe = dataclasses.replace(client, momentum=None)
    local = w + local_sgd(probe, w, cfg.tau, cfg, ds, arch, 0)
    up = client_round(client, w, cfg, ds, arch, 0)
    new, _ = server_aggregate([up], w, [client], cfg)
    # W + (W1 - W) equals W1 up to one rounding per coordinate
    assert np.allclose(new, local, rtol=0, atol=1e-15)


def test_aggregation_order_invariant_and_exact_mean(small):
    cfg, ds, arch, w, clients = _setup(small)
    ups = [client_round(c, w, cfg, ds, arch, 0) for c in clients]
    a, dec = server_aggregate(ups, w, clients, cfg)
    b, _ = server_aggregate(ups[::-1], w, clients[::-1], cfg)
    assert np.array_equal(a, b)
    total = np.zeros_like(w)
    for d in dec:
        total += d
    assert np.array_equal(a, w + total / len(dec))
    with pytest.raises(ValueError, match="missing"):
        server_aggregate(ups[1:], w, clients, cfg)


def test_weighted_aggregation(small):
    cfg, ds, arch, w, clients = _setup(small, clients=2)
    clients[0].weight, clients[1].weight = 0.25, 0.75
    ups = [client_round(c, w, cfg, ds, arch, 0) for c in clients]
    new, dec = server_aggregate(ups, w, clients, cfg)
    assert np.allclose(new, w + 0.25 * dec[0] + 0.75 * dec[1], rtol=0, atol=1e-15)


def test_aggregate_noise_variance(small):
    cfg, ds, arch, w, clients = _setup(small, sigma=0.01, clients=30)
    diffs = []
    for r in range(12):
        ups = [client_round(c, w, cfg, ds, arch, r) for c in clients]
        new, _ = server_aggregate(ups, w, clients, cfg)
        clean = np.zeros_like(w)
        for u in ups:
            clean += u.clipped
        diffs.append((new - w) - clean / len(ups))
    var = np.var(np.concatenate(diffs))
    assert var == pytest.approx(0.01**2 / 30, rel=0.05)


def test_sdq_baseline_adds_dither_variance(small):
    res = {}
    for scheme in ("cepam-gaussian", "fl+gaussian+sdq"):
        cfg, ds, arch, w, clients = _setup(small, scheme=scheme, sigma=0.01)
        errs = []
        for c in clients:
            up = client_round(c, w, cfg, ds, arch, 0)
            errs.append(decode_upload(up, c, cfg, len(w)) - up.clipped)
        res[scheme] = np.var(np.concatenate(errs))
    step = TrainingConfig(scheme="fl+gaussian+sdq", sigma=0.01).baseline_step()
    assert res["cepam-gaussian"] == pytest.approx(1e-4, rel=0.05)
    assert res["fl+gaussian+sdq"] == pytest.approx(1e-4 + step**2 / 12, rel=0.05)


def test_run_experiment_deterministic_and_parallel_equivalent(small, tmp_path):
    ds, _ = small
    cfg = TrainingConfig(scheme="cepam-gaussian", iterations=45, clients=5, hidden=(16,), seed=3)
    a = run_experiment(cfg, ds)
    b = run_experiment(dataclasses.replace(cfg, parallel_clients=4), ds)
    assert np.array_equal(a.weights, b.weights)
    assert [(m.val_acc, m.test_acc, m.uplink_bits) for m in a.metrics] == [(m.val_acc, m.test_acc, m.uplink_bits) for m in b.metrics]
    write_metrics_csv([a], tmp_path / "a.csv")
    write_metrics_csv([b], tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_plateau_halves_learning_rate(small, monkeypatch):
    ds, _ = small
    monkeypatch.setattr(sim, "accuracy", lambda *a: 0.5)
    cfg = TrainingConfig(scheme="fl", iterations=15 * 23, clients=2, hidden=(4,), plateau_rounds=10)
    lrs = [m.lr for m in run_experiment(cfg, ds).metrics]
    # round 0 sets the best; rounds 1..10 stall, so the halving applies from round 11
    assert lrs[:11] == [0.01] * 11
    assert lrs[11:21] == [0.005] * 10
    assert lrs[21:] == [0.0025] * 2


def test_noise_free_cepam_matches_fl(small):
    ds, _ = small
    accs = {}
    for scheme in ("fl", "cepam-gaussian"):
        cfg = TrainingConfig(scheme=scheme, iterations=150, clients=5, hidden=(16,), sigma=0.0, alpha=1e-9)
        accs[scheme] = run_experiment(cfg, ds).metrics[-1].test_acc
    assert abs(accs["fl"] - accs["cepam-gaussian"]) <= 0.005


def test_summary_has_confidence_intervals(small):
    ds, _ = small
    runs = [run_experiment(TrainingConfig(scheme="fl", iterations=30, clients=2, hidden=(4,), seed=s), ds) for s in range(3)]
    out = summarize(runs)["fl"]
    lo, hi = out["final_test_acc"]["ci95"]
    accs = [r.metrics[-1].test_acc for r in runs]
    assert lo <= np.mean(accs) <= hi
    half = stats.t.ppf(0.975, 2) * np.std(accs, ddof=1) / math.sqrt(3)
    assert hi - lo == pytest.approx(2 * half)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainingConfig(iterations=100, tau=15)
    with pytest.raises(ValueError):
        TrainingConfig(scheme="nope")
    with pytest.raises(ValueError):
        TrainingConfig(scheme="cepam-laplace", block_dim=2)
    with pytest.raises(ValueError):
        TrainingConfig(scheme="fl+gaussian", sigma=0.0)
    assert TrainingConfig(iterations=900, tau=15).rounds == 60
