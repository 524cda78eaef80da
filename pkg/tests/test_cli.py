import json
import logging
import math

import pytest

from cepam.cli import main
from cepam.config import ConfigError, default_config_text, load_config
from cepam.privacy import cepam_gaussian_round, gaussian_profile


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def test_quantize_bench_acceptance_rate(capsys):
    code, out, _ = run(capsys, "quantize-bench", "--dim", "2", "--sigma", "1", "--alpha", "1e-5", "--samples", "100000")
    assert code == 0
    rep = json.loads(out)
    assert abs(rep["acceptance_rate"] - math.pi / 4) < 0.004
    assert all(d < 0.012 for d in rep["ks_statistic"])


def test_quantize_bench_dim1_single_trial(capsys, tmp_path):
    code, out, _ = run(capsys, "quantize-bench", "--dim", "1", "--sigma", "1", "--samples", "20000", "--out", str(tmp_path / "b.csv"))
    assert code == 0 and json.loads(out)["mean_trials"] == 1.0
    assert (tmp_path / "b.csv").read_text().startswith("alpha,")


def test_usage_errors_exit_2(capsys):
    assert run(capsys, "quantize-bench", "--dimm", "2")[0] == 2
    assert run(capsys, "quantize-bench", "--dim", "two")[0] == 2
    assert run(capsys, "quantize-bench", "--dim", "2")[0] == 2  # neither sigma nor b
    assert run(capsys, "nonsense")[0] == 2
    assert run(capsys)[0] == 2


def test_privacy_gaussian_tau_one(capsys):
    code, out, _ = run(capsys, "privacy", "--mechanism", "gaussian", "--tau", "1", "--clients", "1", "--sigma", "2",
                       "--n-data", "500", "--eps-tilde", "0.5")
    rep = json.loads(out)
    base = gaussian_profile(2.0, 2.0).delta(0.5)
    assert code == 0 and rep["delta"] == pytest.approx(base / 500, rel=1e-14)


def test_privacy_laplace_zero_delta(capsys):
    code, out, _ = run(capsys, "privacy", "--mechanism", "laplace", "--laplace-b", "0.001", "--eps-tilde", "30000")
    rep = json.loads(out)
    assert code == 0 and rep["delta"] == 0.0 and round(rep["eps"]) == 29995


def test_privacy_calibrate_round_trip(capsys):
    code, out, _ = run(capsys, "privacy", "--calibrate", "--eps", "6", "--delta", "0.01")
    assert code == 0
    rep = json.loads(out)
    again = cepam_gaussian_round(1.0, 15, 30, rep["sigma"], 2000, rep["report"]["eps_tilde"])
    assert abs(again.delta - 0.01) <= 1e-6 * 0.01


def test_privacy_calibrate_infeasible_is_runtime_failure(capsys):
    code, out, _ = run(capsys, "privacy", "--calibrate", "--eps", "1", "--delta", "0.01")
    assert code == 1 and json.loads(out)["feasible"] is False


def test_rate_command(capsys):
    code, out, _ = run(capsys, "rate", "--dim", "2", "--sigma", "1", "--samples", "10000")
    assert code == 0 and abs(json.loads(out)["relative_gap"]) < 0.1


def _write_config(path, **extra):
    text = "[experiment]\nschemes = fl, cepam-gaussian\nseeds = 0\n\n[training]\niterations = 30\nclients = 3\nhidden = 8\n"
    text += "".join(f"{k} = {v}\n" for k, v in extra.items())
    text += "\n[data]\ntrain = 90\nval = 30\ntest = 30\n"
    path.write_text(text)
    return path


def test_simulate_deterministic_with_synthetic_fallback(capsys, tmp_path, caplog, monkeypatch):
    monkeypatch.delenv("CEPAM_DATA_DIR", raising=False)
    cfg = _write_config(tmp_path / "exp.ini")
    with caplog.at_level(logging.WARNING):
        assert run(capsys, "simulate", "--config", str(cfg), "--out-dir", str(tmp_path / "a"))[0] == 0
    assert "synthetic" in caplog.text
    assert run(capsys, "simulate", "--config", str(cfg), "--out-dir", str(tmp_path / "b"), "--parallel-clients", "3")[0] == 0
    a = (tmp_path / "a" / "metrics.csv").read_bytes()
    assert a == (tmp_path / "b" / "metrics.csv").read_bytes()
    assert a.splitlines()[0] == b"round,scheme,seed,val_acc,test_acc,uplink_bits,noise_mse,lr"
    summary = json.loads((tmp_path / "a" / "summary.json").read_text())
    assert set(summary["summary"]) == {"fl", "cepam-gaussian"}


def test_simulate_scheme_all(capsys, tmp_path, monkeypatch):
    monkeypatch.delenv("CEPAM_DATA_DIR", raising=False)
    cfg = _write_config(tmp_path / "exp.ini")
    code, out, _ = run(capsys, "simulate", "--config", str(cfg), "--scheme", "all", "--rounds", "1", "--out-dir", str(tmp_path / "o"))
    assert code == 0
    summary = json.loads((tmp_path / "o" / "summary.json").read_text())["summary"]
    assert len(summary) == 8


def test_simulate_mnist_from_env(capsys, tmp_path, mnist_dir, monkeypatch):
    if mnist_dir is None:
        pytest.skip("bundled MNIST sample unavailable")
    monkeypatch.setenv("CEPAM_DATA_DIR", str(mnist_dir))
    cfg = _write_config(tmp_path / "exp.ini")
    assert run(capsys, "simulate", "--config", str(cfg), "--scheme", "fl", "--out-dir", str(tmp_path / "m"))[0] == 0
    assert json.loads((tmp_path / "m" / "summary.json").read_text())["summary"]["fl"]["source"].startswith("mnist")


def test_config_unknown_keys_and_sections_rejected(tmp_path, capsys):
    bad = _write_config(tmp_path / "bad.ini", learning_rate=0.1)
    with pytest.raises(ConfigError, match="learning_rate"):
        load_config(bad)
    assert run(capsys, "simulate", "--config", str(bad))[0] == 2
    (tmp_path / "sec.ini").write_text("[mystery]\nx = 1\n")
    with pytest.raises(ConfigError, match="mystery"):
        load_config(tmp_path / "sec.ini")
    (tmp_path / "val.ini").write_text("[training]\niterations = 31\n")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "val.ini")


def test_default_config_text_parses(tmp_path):
    (tmp_path / "d.ini").write_text(default_config_text())
    exp = load_config(tmp_path / "d.ini")
    assert exp.training.tau == 15 and exp.training.sdq_alpha is None and exp.schemes == ("cepam-gaussian",)
