"""FedAvg rounds with CEPAM or a baseline perturbation on the uplink.

Randomness layout under the master seed (children of ``RandomStream(seed)``):

    spawn(0)          model initialisation
    spawn(1)          client partition
    spawn(2).spawn(k) shared seed s_k of client k (known to the server)
    spawn(3).spawn(k) client k's SGD sample indices, child r for round r
    spawn(4).spawn(k) client k's private mechanism noise (baselines only)

The quantiser stream of client k in round r is ``RandomStream(s_k).spawn(r)``;
block j of that round uses its child ``j``.  Sampling streams do not depend
on the scheme, so runs of different schemes share their SGD draws.
"""

from __future__ import annotations

import math
import csv
import hashlib
import json
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy import stats

from ..coding import HEADER, CodingError, MessageHeader, decode_message, encode_message, pack_chunks, unpack_fields
from ..lattice import LatticeSpec, embed, nearest_coords
from ..layered_noise import GaussianNoise, LaplaceNoise, sample_noise_direct
from ..quantizer import DEFAULT_MAX_TRIALS, RsuqConfig, decode_vector_blocks, encode_vector_blocks, sdq_dithers
from ..rng import RandomStream
from .data import Dataset, partition_clients
from .mlp import MlpArchitecture, accuracy, init_params, loss_and_grad

SCHEMES = (
    "fl",
    "fl+sdq",
    "fl+gaussian",
    "fl+laplace",
    "fl+gaussian+sdq",
    "fl+laplace+sdq",
    "cepam-gaussian",
    "cepam-laplace",
)


@dataclass(frozen=True)
class TrainingConfig:
    scheme: str = "cepam-gaussian"
    iterations: int = 900  # T; rounds = T / tau
    tau: int = 15
    clients: int = 10
    lr: float = 0.01
    momentum: float = 0.9
    lr_factor: float = 0.5
    plateau_rounds: int = 10
    plateau_delta: float = 1e-3
    gamma: float = 1.0
    sigma: float = 0.001
    laplace_b: float = 0.001
    block_dim: int = 1
    alpha: float = 1e-5
    sdq_alpha: float | None = None  # None: match the mean CEPAM cell side
    max_trials: int = DEFAULT_MAX_TRIALS
    hidden: tuple[int, ...] = (32,)
    seed: int = 0
    iid: bool = True
    parallel_clients: int = 1

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}; choose from {', '.join(SCHEMES)}")
        if self.tau < 1 or self.iterations < self.tau or self.iterations % self.tau:
            raise ValueError("iterations must be a positive multiple of tau")
        if self.clients < 1 or self.block_dim < 1 or self.parallel_clients < 1:
            raise ValueError("clients, block_dim and parallel_clients must be >= 1")
        if self.gamma <= 0 or self.lr <= 0 or self.alpha <= 0:
            raise ValueError("gamma, lr and alpha must be positive")
        if self.sdq_alpha is not None and self.sdq_alpha <= 0:
            raise ValueError("sdq_alpha must be positive")
        if self.sigma < 0 or self.laplace_b < 0:
            raise ValueError("noise scales must be non-negative")
        if self.noise_kind == "laplace" and self.is_cepam and self.block_dim != 1:
            raise ValueError("CEPAM-Laplace needs block_dim = 1")
        if not self.is_cepam and self.noise_kind is not None and self.noise_scale == 0:
            raise ValueError(f"{self.scheme} needs a positive noise scale")

    @property
    def rounds(self) -> int:
        return self.iterations // self.tau

    @property
    def is_cepam(self) -> bool:
        return self.scheme.startswith("cepam")

    @property
    def uses_sdq(self) -> bool:
        return self.scheme.endswith("+sdq")

    @property
    def noise_kind(self) -> str | None:
        if "gaussian" in self.scheme:
            return "gaussian"
        if "laplace" in self.scheme:
            return "laplace"
        return None

    @property
    def noise_scale(self) -> float:
        return self.laplace_b if self.noise_kind == "laplace" else self.sigma

    def noise_spec(self, dim: int):
        if self.noise_kind == "laplace":
            return LaplaceNoise(self.laplace_b)
        return GaussianNoise(self.sigma, dim)

    def rsuq_config(self) -> RsuqConfig:
        return RsuqConfig(LatticeSpec(self.block_dim, self.alpha), self.noise_spec(self.block_dim), self.max_trials)

    def baseline_step(self) -> float:
        """Scalar SDQ step of the baselines.

        Defaults to the mean cell side CEPAM uses for the same noise, so both
        spend a comparable number of bits per coordinate.
        """
        if self.sdq_alpha is not None:
            return self.sdq_alpha
        if self.noise_kind == "laplace":
            return 4.0 * self.laplace_b  # 2b E[u], u ~ Gamma(2, 1)
        # 2 sigma E[sqrt(chi2_3)]
        return 2.0 * self.sigma * math.sqrt(2.0) * math.exp(math.lgamma(2.0) - math.lgamma(1.5))

    def describe(self) -> dict:
        return asdict(self)


@dataclass
class ClientState:
    client_id: int
    indices: np.ndarray
    weight: float
    seed: int
    sgd_stream: RandomStream
    noise_stream: RandomStream
    momentum: np.ndarray | None = None

    def shared_stream(self, round_id: int) -> RandomStream:
        return RandomStream(self.seed).spawn(round_id)


@dataclass
class ClientUpload:
    client_id: int
    round_id: int
    payload: bytes
    bits: int
    clipped: np.ndarray  # client-side diagnostics, never read by the server
    reconstruction: np.ndarray


@dataclass(frozen=True)
class RoundMetrics:
    round: int
    val_acc: float
    test_acc: float
    uplink_bits: int
    wall_clock: float
    lr: float
    noise_mse: float

    def __post_init__(self):
        if self.uplink_bits < 0 or not (0 <= self.val_acc <= 1 and 0 <= self.test_acc <= 1):
            raise ValueError("invalid round metrics")


@dataclass
class ExperimentResult:
    config: TrainingConfig
    metrics: list[RoundMetrics]
    weights: np.ndarray
    source: str = ""


def make_clients(config: TrainingConfig, dataset: Dataset, master: RandomStream) -> list[ClientState]:
    shards = partition_clients(dataset.y_train, config.clients, master.spawn(1), iid=config.iid)
    seeds = master.spawn(2)
    clients = []
    for k, idx in enumerate(shards):
        clients.append(
            ClientState(
                client_id=k,
                indices=idx,
                weight=1.0 / config.clients,
                seed=seeds.spawn(k).seed64(),
                sgd_stream=master.spawn(3).spawn(k),
                noise_stream=master.spawn(4).spawn(k),
            )
        )
    if len({c.seed for c in clients}) != len(clients):
        raise RuntimeError("client seeds collided")
    return clients


# -- client side -----------------------------------------------------------


def local_sgd(
    client: ClientState,
    weights: np.ndarray,
    tau: int,
    config: TrainingConfig,
    dataset: Dataset,
    arch: MlpArchitecture,
    round_id: int = 0,
    lr: float | None = None,
) -> np.ndarray:
    """``tau`` single-sample momentum SGD steps; returns ``W_{t+tau} - W_t``."""
    if len(client.indices) == 0:
        raise ValueError(f"client {client.client_id} has no data")
    lr = config.lr if lr is None else lr
    draws = client.sgd_stream.spawn(round_id).integers(len(client.indices), tau)
    w = weights.copy()
    v = np.zeros_like(w) if client.momentum is None else client.momentum
    for i in client.indices[draws]:
        loss, g = loss_and_grad(w, arch, dataset.x_train[i], dataset.y_train[i])
        if not math.isfinite(loss):
            raise FloatingPointError(f"non-finite loss at round {round_id}, client {client.client_id}")
        v = config.momentum * v + g
        w -= lr * v
    client.momentum = v
    return w - weights


def clip_update(x: np.ndarray, gamma: float) -> np.ndarray:
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    norm = float(np.linalg.norm(x))
    return x / max(1.0, norm / gamma)


def partition(x: np.ndarray, n: int) -> tuple[np.ndarray, int]:
    """Split into ``ceil(m/n)`` rows of length ``n``; returns ``(blocks, pad)``."""
    if n < 1:
        raise ValueError("block dimension must be >= 1")
    m = len(x)
    blocks = -(-m // n)
    pad = blocks * n - m
    return np.concatenate([np.asarray(x, dtype=np.float64), np.zeros(pad)]).reshape(blocks, n), pad


def unpartition(blocks: np.ndarray, m: int) -> np.ndarray:
    return np.asarray(blocks).reshape(-1)[:m].copy()


def _baseline_hash(config: TrainingConfig, kind: str, step: float | None) -> int:
    payload = {"scheme": config.scheme, "kind": kind, "step": repr(step), "gamma": repr(config.gamma)}
    digest = hashlib.blake2b(json.dumps(payload, sort_keys=True).encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def _zigzag(j: np.ndarray) -> np.ndarray:
    return ((j << 1) ^ (j >> 63)).astype(np.uint64)


def _unzigzag(z: np.ndarray) -> np.ndarray:
    z = z.astype(np.int64)
    return (z >> 1) ^ -(z & 1)


def _sdq_message(round_id: int, client_id: int, j: np.ndarray, hash_: int) -> tuple[bytes, int]:
    z = _zigzag(j.reshape(-1))
    width = max(1, int(z.max(initial=0)).bit_length())
    if width > 62:
        raise CodingError("SDQ index too wide; step is too small for this update")
    body, nbits = pack_chunks(z, np.full(len(z), width, dtype=np.int64))
    head = MessageHeader(round_id, client_id, len(z), hash_).pack() + struct.pack("B", width)
    return head + body, 8 * len(head) + nbits


def _parse_sdq(data: bytes, hash_: int) -> np.ndarray:
    header = MessageHeader.unpack(data)
    if header.config_hash != hash_:
        raise CodingError("config hash mismatch between client and server")
    width = data[HEADER.size]
    starts = np.arange(header.blocks, dtype=np.int64) * width
    return _unzigzag(unpack_fields(data[HEADER.size + 1 :], starts, np.full(header.blocks, width)))


def _baseline_noise(client: ClientState, config: TrainingConfig, round_id: int, m: int) -> np.ndarray:
    spec = config.noise_spec(1)
    return sample_noise_direct(client.noise_stream.spawn(round_id), spec, m).reshape(-1)


def client_round(
    client: ClientState,
    weights: np.ndarray,
    config: TrainingConfig,
    dataset: Dataset,
    arch: MlpArchitecture,
    round_id: int = 0,
    lr: float | None = None,
) -> ClientUpload:
    """One client's work in a round: local SGD, clipping, perturbation and encoding."""
    x = clip_update(local_sgd(client, weights, config.tau, config, dataset, arch, round_id, lr), config.gamma)
    m = len(x)
    shared = client.shared_stream(round_id)
    if config.is_cepam and config.noise_scale > 0:
        cfg = config.rsuq_config()
        blocks, _ = partition(x, config.block_dim)
        batch = encode_vector_blocks(blocks, shared, cfg)
        msg = encode_message(round_id, client.client_id, batch.h, batch.m, batch.u, config.gamma, cfg)
        bits = 8 * HEADER.size + msg.payload_bits  # final byte padding not counted
        return ClientUpload(client.client_id, round_id, msg.data, bits, x, unpartition(batch.y, m))
    if config.is_cepam:
        # zero noise: plain subtractive dithering on the fine lattice
        lat = LatticeSpec(config.block_dim, config.alpha)
        blocks, _ = partition(x, config.block_dim)
        v = sdq_dithers(shared, len(blocks), lat)
        j = nearest_coords(blocks - v, lat.alpha)
        data, bits = _sdq_message(round_id, client.client_id, j, _baseline_hash(config, "sdq", lat.alpha))
        return ClientUpload(client.client_id, round_id, data, bits, x, unpartition(embed(j, lat.alpha) + v, m))
    y = x + _baseline_noise(client, config, round_id, m) if config.noise_kind else x
    if config.uses_sdq:
        lat = LatticeSpec(1, config.baseline_step())
        v = sdq_dithers(shared, m, lat)[:, 0]
        j = nearest_coords(y - v, lat.alpha)
        data, bits = _sdq_message(round_id, client.client_id, j, _baseline_hash(config, "sdq", lat.alpha))
        return ClientUpload(client.client_id, round_id, data, bits, x, embed(j, lat.alpha) + v)
    head = MessageHeader(round_id, client.client_id, m, _baseline_hash(config, "raw", None)).pack()
    data = head + y.astype("<f8").tobytes()
    return ClientUpload(client.client_id, round_id, data, 8 * len(data), x, y.copy())


# -- server side -----------------------------------------------------------


def decode_upload(upload: ClientUpload, client: ClientState, config: TrainingConfig, m: int) -> np.ndarray:
    """Server view of one client's update, rebuilt from the payload and s_k only."""
    data = upload.payload
    header = MessageHeader.unpack(data)
    if header.client_id != client.client_id or header.round_id != upload.round_id:
        raise CodingError("message header does not match the expected client/round")
    shared = client.shared_stream(upload.round_id)
    if config.is_cepam and config.noise_scale > 0:
        cfg = config.rsuq_config()
        _, h, mm, u = decode_message(data, shared, config.gamma, cfg)
        return unpartition(decode_vector_blocks(h, mm, shared, cfg, u=u), m)
    if config.is_cepam:
        lat = LatticeSpec(config.block_dim, config.alpha)
        j = _parse_sdq(data, _baseline_hash(config, "sdq", lat.alpha)).reshape(-1, lat.dim)
        return unpartition(embed(j, lat.alpha) + sdq_dithers(shared, len(j), lat), m)
    if config.uses_sdq:
        lat = LatticeSpec(1, config.baseline_step())
        j = _parse_sdq(data, _baseline_hash(config, "sdq", lat.alpha))
        return embed(j, lat.alpha) + sdq_dithers(shared, len(j), lat)[:, 0]
    if header.config_hash != _baseline_hash(config, "raw", None):
        raise CodingError("config hash mismatch between client and server")
    return np.frombuffer(data[HEADER.size :], dtype="<f8").astype(np.float64)


def server_aggregate(
    uploads: list[ClientUpload],
    weights: np.ndarray,
    clients: list[ClientState],
    config: TrainingConfig,
    pool: ThreadPoolExecutor | None = None,
) -> tuple[np.ndarray, list[np.ndarray]]:
    """``W_t + sum_k p_k Xhat_k`` summed in client-id order; returns the decoded updates too."""
    by_id = {u.client_id: u for u in uploads}
    missing = [c.client_id for c in clients if c.client_id not in by_id]
    if missing or len(by_id) != len(uploads) or len(uploads) != len(clients):
        raise ValueError(f"need exactly one message per client; missing {missing}")
    ordered = sorted(clients, key=lambda c: c.client_id)
    m = len(weights)
    jobs = [(by_id[c.client_id], c) for c in ordered]
    if pool is None:
        decoded = [decode_upload(u, c, config, m) for u, c in jobs]
    else:
        decoded = list(pool.map(lambda job: decode_upload(job[0], job[1], config, m), jobs))
    total = np.zeros(m)
    ps = [c.weight for c in ordered]
    if all(p == ps[0] for p in ps):
        for d in decoded:
            total += d
        total /= len(decoded)
    else:
        for p, d in zip(ps, decoded):
            total += p * d
    return weights + total, decoded


# -- experiment loop -------------------------------------------------------


def run_experiment(config: TrainingConfig, dataset: Dataset, progress=None) -> ExperimentResult:
    """Full training run with the plateau learning-rate schedule."""
    master = RandomStream(config.seed)
    classes = int(max(dataset.y_train.max(), dataset.y_test.max())) + 1
    arch = MlpArchitecture((dataset.features, *config.hidden, max(classes, 2)))
    w = init_params(arch, master.spawn(0))
    clients = make_clients(config, dataset, master)
    lr, best, stale = config.lr, -1.0, 0
    metrics: list[RoundMetrics] = []
    pool = ThreadPoolExecutor(config.parallel_clients) if config.parallel_clients > 1 else None
    try:
        for r in range(config.rounds):
            start = time.perf_counter()

            def work(c, r=r, w=w, lr=lr):
                return client_round(c, w, config, dataset, arch, r, lr)

            uploads = list(pool.map(work, clients)) if pool else [work(c) for c in clients]
            w_next, decoded = server_aggregate(uploads, w, clients, config, pool)
            mse = float(np.mean([np.mean((d - u.clipped) ** 2) for d, u in zip(decoded, uploads)]))
            w = w_next
            if not np.all(np.isfinite(w)):
                raise FloatingPointError(f"model diverged at round {r}")
            val = accuracy(w, arch, dataset.x_val, dataset.y_val)
            test = accuracy(w, arch, dataset.x_test, dataset.y_test)
            metrics.append(
                RoundMetrics(r, val, test, sum(u.bits for u in uploads), time.perf_counter() - start, lr, mse)
            )
            if val >= best + config.plateau_delta:
                best, stale = val, 0
            else:
                stale += 1
                if stale >= config.plateau_rounds:
                    lr *= config.lr_factor
                    stale = 0
            if progress is not None:
                progress(config, metrics[-1])
    finally:
        if pool is not None:
            pool.shutdown()
    return ExperimentResult(config, metrics, w, dataset.source)


# -- outputs ---------------------------------------------------------------

CSV_COLUMNS = ("round", "scheme", "seed", "val_acc", "test_acc", "uplink_bits", "noise_mse", "lr")


def write_metrics_csv(results: list[ExperimentResult], path) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(CSV_COLUMNS)
        for res in results:
            for m in res.metrics:
                out.writerow(
                    [m.round, res.config.scheme, res.config.seed, f"{m.val_acc:.17g}", f"{m.test_acc:.17g}",
                     m.uplink_bits, f"{m.noise_mse:.17g}", f"{m.lr:.17g}"]
                )


def _mean_ci(values) -> dict:
    v = np.asarray(values, dtype=np.float64)
    mean = float(v.mean())
    if len(v) < 2:
        return {"mean": mean, "ci95": None, "n": int(len(v))}
    half = float(stats.t.ppf(0.975, len(v) - 1) * v.std(ddof=1) / math.sqrt(len(v)))
    return {"mean": mean, "ci95": [mean - half, mean + half], "n": int(len(v))}


def summarize(results: list[ExperimentResult]) -> dict:
    """Per-scheme mean and 95% t-interval of final accuracies, bits and update error."""
    schemes: dict[str, list[ExperimentResult]] = {}
    for r in results:
        schemes.setdefault(r.config.scheme, []).append(r)
    out = {}
    for name, runs in schemes.items():
        out[name] = {
            "seeds": [r.config.seed for r in runs],
            "final_test_acc": _mean_ci([r.metrics[-1].test_acc for r in runs]),
            "final_val_acc": _mean_ci([r.metrics[-1].val_acc for r in runs]),
            "uplink_bits_per_round": _mean_ci([np.mean([m.uplink_bits for m in r.metrics]) for r in runs]),
            "noise_mse": _mean_ci([np.mean([m.noise_mse for m in r.metrics]) for r in runs]),
            "rounds": runs[0].config.rounds,
            "source": runs[0].source,
        }
    return out
