"""Command-line entry point: ``cepam {quantize-bench,privacy,rate,simulate}``.

Exit status: 0 on success, 1 on a runtime failure, 2 on a usage or config error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
from scipy import stats

from . import privacy
from .coding import encode_message, estimate_rate
from .config import ConfigError, ExperimentConfig, load_config, parse_schemes
from .fl.data import load_dataset
from .fl.sim import run_experiment, summarize, write_metrics_csv
from .lattice import LatticeSpec
from .layered_noise import GaussianNoise, LaplaceNoise
from .quantizer import RsuqConfig, encode_batch
from .rng import RandomStream

log = logging.getLogger("cepam")


class UsageError(Exception):
    pass


def _noise(args) -> tuple[GaussianNoise | LaplaceNoise, float]:
    if (args.sigma is None) == (args.laplace_b is None):
        raise UsageError("give exactly one of --sigma or --laplace-b")
    if args.laplace_b is not None:
        if args.dim != 1:
            raise UsageError("Laplace noise needs --dim 1")
        return LaplaceNoise(args.laplace_b), args.laplace_b
    return GaussianNoise(args.sigma, args.dim), args.sigma


def _emit(report: dict, out: str | None) -> None:
    text = json.dumps(report, indent=2, sort_keys=True)
    print(text)
    if out:
        path = Path(out)
        path.parent.mkdir(parents=True, exist_ok=True)
        if path.suffix == ".csv":
            flat = {k: v for k, v in report.items() if not isinstance(v, (dict, list))}
            with open(path, "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(flat.keys())
                w.writerow(flat.values())
        else:
            path.write_text(text + "\n")


def cmd_quantize_bench(args) -> int:
    spec, scale = _noise(args)
    config = RsuqConfig(LatticeSpec(args.dim, args.alpha), spec, args.max_trials)
    x = np.full((args.samples, args.dim), args.input, dtype=np.float64)
    start = time.perf_counter()
    batch = encode_batch(x, RandomStream(args.seed).spawn_keys(args.samples), config)
    elapsed = time.perf_counter() - start
    err = batch.y - x
    if isinstance(spec, LaplaceNoise):
        cdf = stats.laplace(scale=scale).cdf
    else:
        cdf = stats.norm(scale=scale).cdf
    ks = [stats.kstest(err[:, i], cdf) for i in range(args.dim)]
    report = {
        "noise": spec.describe(),
        "alpha": args.alpha,
        "samples": args.samples,
        "seed": args.seed,
        "input": args.input,
        "acceptance_rate": float(args.samples / batch.h.sum()),
        "expected_acceptance": spec.acceptance_probability(),
        "mean_trials": float(batch.h.mean()),
        "error_mean": err.mean(axis=0).tolist(),
        "error_var": err.var(axis=0).tolist(),
        "target_var": spec.variance,
        "ks_statistic": [float(k.statistic) for k in ks],
        "ks_pvalue": [float(k.pvalue) for k in ks],
        "seconds": elapsed,
    }
    _emit(report, args.out)
    return 0


def cmd_privacy(args) -> int:
    if args.calibrate:
        if args.mechanism != "gaussian":
            raise UsageError("--calibrate is only defined for the Gaussian mechanism")
        if args.eps is None or args.delta is None:
            raise UsageError("--calibrate needs --eps and --delta")
        try:
            sigma = privacy.calibrate_sigma(args.eps, args.delta, args.gamma, args.tau, args.clients, args.n_data)
        except privacy.InfeasiblePrivacyTarget as exc:
            print(json.dumps({"feasible": False, "reason": str(exc)}, indent=2))
            return 1
        p = privacy.sampling_probability(args.n_data, args.tau)
        eps_tilde = privacy.base_epsilon(args.eps, p)
        report = privacy.cepam_gaussian_round(args.gamma, args.tau, args.clients, sigma, args.n_data, eps_tilde)
        _emit({"feasible": True, "sigma": sigma, "report": report.to_dict()}, args.out)
        return 0
    if args.eps_tilde is None:
        raise UsageError("--eps-tilde is required (or use --calibrate)")
    if args.mechanism == "gaussian":
        if args.sigma is None:
            raise UsageError("gaussian needs --sigma")
        report = privacy.cepam_gaussian_round(args.gamma, args.tau, args.clients, args.sigma, args.n_data, args.eps_tilde)
    else:
        if args.laplace_b is None:
            raise UsageError("laplace needs --laplace-b")
        report = privacy.cepam_laplace_round(args.gamma, args.tau, args.laplace_b, args.n_data, args.eps_tilde)
    _emit(report.to_dict(), args.out)
    return 0


def cmd_rate(args) -> int:
    spec, _ = _noise(args)
    config = RsuqConfig(LatticeSpec(args.dim, args.alpha), spec, args.max_trials)
    root = RandomStream(args.seed)
    est = estimate_rate(config, args.gamma, args.samples, root.spawn(0))
    # measured: encode inputs drawn uniformly from the clip box
    x = (2.0 * root.spawn(1).uniform(args.samples * args.dim) - 1.0).reshape(args.samples, args.dim)
    x *= args.gamma / math.sqrt(args.dim)
    stream = root.spawn(2)
    batch = encode_batch(x, stream.spawn_keys(args.samples), config)
    msg = encode_message(0, 0, batch.h, batch.m, batch.u, args.gamma, config)
    measured = msg.payload_bits / args.samples
    report = {
        "noise": spec.describe(),
        "alpha": args.alpha,
        "gamma": args.gamma,
        "samples": args.samples,
        "estimated_bits_per_block": est.mean,
        "estimated_stderr": est.stderr,
        "geometric_term": est.geometric_term,
        "index_term": est.index_term,
        "measured_bits_per_block": measured,
        "relative_gap": measured / est.mean - 1.0,
    }
    _emit(report, args.out)
    return 0


def _experiment(args) -> ExperimentConfig:
    exp = load_config(args.config) if args.config else ExperimentConfig()
    training = exp.training
    if args.rounds is not None:
        training = replace(training, iterations=args.rounds * training.tau)
    if args.parallel_clients is not None:
        training = replace(training, parallel_clients=args.parallel_clients)
    seeds = exp.seeds
    if args.seed is not None:
        seeds = tuple(range(args.seed, args.seed + (args.repeats or 1)))
    elif args.repeats:
        seeds = tuple(range(seeds[0], seeds[0] + args.repeats))
    return ExperimentConfig(
        training=training,
        schemes=parse_schemes(args.scheme) if args.scheme else exp.schemes,
        seeds=seeds,
        data_dir=args.data_dir or exp.data_dir,
        n_train=exp.n_train,
        n_val=exp.n_val,
        n_test=exp.n_test,
        out_dir=args.out_dir or exp.out_dir,
    )


def cmd_simulate(args) -> int:
    try:
        exp = _experiment(args)
        runs = exp.runs()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    out_dir = Path(exp.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    datasets = {}
    results = []

    def progress(cfg, m):
        log.info("%s seed=%d round=%d val=%.4f test=%.4f bits=%d", cfg.scheme, cfg.seed, m.round, m.val_acc, m.test_acc, m.uplink_bits)

    for cfg in runs:
        if cfg.seed not in datasets:
            datasets[cfg.seed] = load_dataset(exp.data_dir, exp.n_train, exp.n_val, exp.n_test, RandomStream(cfg.seed).spawn(5))
        results.append(run_experiment(cfg, datasets[cfg.seed], progress))
        last = results[-1].metrics[-1]
        print(f"{cfg.scheme:16s} seed={cfg.seed} test_acc={last.test_acc:.4f} bits/round={last.uplink_bits}", flush=True)
    write_metrics_csv(results, out_dir / "metrics.csv")
    summary = {"summary": summarize(results), "config": {**exp.training.describe(), "schemes": list(exp.schemes),
                                                         "seeds": list(exp.seeds)}}
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"wrote {out_dir / 'metrics.csv'} and {out_dir / 'summary.json'}")
    return 0


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="master seed (default 0)")
    common.add_argument("--out", default=None, help="also write the report to this .json or .csv file")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="cepam", description="CEPAM quantiser, privacy accounting and FL simulation")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def noise_flags(p):
        p.add_argument("--dim", type=int, default=1)
        p.add_argument("--sigma", type=float)
        p.add_argument("--laplace-b", type=float)
        p.add_argument("--alpha", type=float, default=1e-5)
        p.add_argument("--max-trials", type=int, default=10_000)

    q = sub.add_parser("quantize-bench", parents=[common], help="empirical error distribution of the codec")
    noise_flags(q)
    q.add_argument("--samples", type=int, default=100_000)
    q.add_argument("--input", type=float, default=0.3, help="value of every input coordinate")
    q.set_defaults(func=cmd_quantize_bench)

    p = sub.add_parser("privacy", parents=[common], help="per-round (eps, delta) of CEPAM")
    p.add_argument("--mechanism", choices=("gaussian", "laplace"), default="gaussian")
    p.add_argument("--gamma", type=float, default=1.0)
    p.add_argument("--tau", type=int, default=15)
    p.add_argument("--clients", type=int, default=30)
    p.add_argument("--n-data", type=int, default=2000)
    p.add_argument("--sigma", type=float)
    p.add_argument("--laplace-b", type=float)
    p.add_argument("--eps-tilde", type=float)
    p.add_argument("--calibrate", action="store_true", help="solve for sigma from --eps and --delta")
    p.add_argument("--eps", type=float)
    p.add_argument("--delta", type=float)
    p.set_defaults(func=cmd_privacy)

    r = sub.add_parser("rate", parents=[common], help="estimated and measured bits per block")
    noise_flags(r)
    r.add_argument("--gamma", type=float, default=1.0)
    r.add_argument("--samples", type=int, default=10_000)
    r.set_defaults(func=cmd_rate)

    s = sub.add_parser("simulate", parents=[common], help="run federated training experiments")
    s.add_argument("--config", help="INI experiment config")
    s.add_argument("--scheme", help="comma-separated schemes, or 'all'")
    s.add_argument("--out-dir")
    s.add_argument("--data-dir", help="MNIST IDX directory (default $CEPAM_DATA_DIR)")
    s.add_argument("--rounds", type=int)
    s.add_argument("--repeats", type=int, help="number of consecutive seeds")
    s.add_argument("--parallel-clients", type=int)
    s.set_defaults(func=cmd_simulate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"cepam: error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.command != "simulate" and args.seed is None:
        args.seed = 0
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"cepam: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        print(f"cepam: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
