"""Coordinator: orchestrates the distributed FAB-EM loop over a transport.

One iteration is FIC pass -> E-step -> shrinkage -> gate M-step -> expert
M-step.  Each phase is a broadcast followed by a barrier that waits for every
worker's report.
"""

from __future__ import annotations

import hashlib
import json
import logging
import threading
import time
from collections import defaultdict
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from ..data import Dataset
from ..experts import average_weights, majority_vote, support_of
from ..gates import GateStats, SplitGrid, apply_gates, build_split_grid, select_gate
from ..model import ModelParams, TaskKind, model_from_dict, model_to_dict, prune_topology
from ..objective import EStats, WorkerPartition, estep_aggregate, estep_penalties, fic_aggregate, shrink_decision
from .protocol import Dims, Message, Tag, pack_model, unpack_fits
from .transport import InProcessTransport, SocketTransport, Transport, WorkerFailure, assign_payload, run_socket_worker
from .worker import Worker, WorkerSetup, checkpoint_file, initial_responsibilities

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "dfab-checkpoint"


class ConfigError(ValueError):
    pass


class RestoreError(RuntimeError):
    pass


class TrainingAborted(RuntimeError):
    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclass(frozen=True)
class TrainConfig:
    depth: int = 3
    t_max: int = 32
    eps_shrink: float | None = None  # absolute; None means eps_shrink_frac * N
    eps_shrink_frac: float = 0.01
    delta_term: float = 5e-9
    max_iters: int = 200
    d_beta: float = 1.0
    foba_max_features: int | None = None
    task: TaskKind = TaskKind.REGRESSION
    seed: int = 0
    init_g: float = 0.8
    swapped_gate_score: bool = False
    first_mstep: bool = False

    def __post_init__(self):
        object.__setattr__(self, "task", TaskKind(self.task))
        if self.depth < 1:
            raise ConfigError("depth must be >= 1")
        if self.t_max < 2:
            raise ConfigError("t_max must be >= 2")
        if not 0 < self.delta_term < 1:
            raise ConfigError("delta_term must lie in (0, 1)")
        if self.max_iters < 0:
            raise ConfigError("max_iters must be >= 0")
        if self.eps_shrink is not None and self.eps_shrink < 0:
            raise ConfigError("eps_shrink must be >= 0")
        if self.d_beta < 0:
            raise ConfigError("d_beta must be >= 0")

    def shrink_threshold(self, n: int) -> float:
        return self.eps_shrink if self.eps_shrink is not None else self.eps_shrink_frac * n

    def to_dict(self) -> dict:
        d = asdict(self)
        d["task"] = self.task.value
        return d


@dataclass(frozen=True)
class ClusterConfig:
    n_workers: int = 1
    transport: str = "inprocess"  # or "socket"
    seed: int = 0
    checkpoint_every: int = 20
    checkpoint_dir: str | None = None
    loopback_free: bool = False
    queue_size: int = 4
    host: str = "127.0.0.1"
    port: int = 0
    spawn: str = "thread"  # socket workers: "thread", "process" or "none" (started externally)
    workers_load_data: bool = False
    data_path: str | None = None
    target: str = "y"

    def __post_init__(self):
        if self.n_workers < 1:
            raise ConfigError("need at least one worker")
        if self.transport not in ("inprocess", "socket"):
            raise ConfigError(f"unknown transport {self.transport!r}")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be >= 0")


@dataclass
class IterationRecord:
    iteration: int
    fic: float
    loglik: float
    gate_penalty: float
    expert_penalty: float
    n_active: int
    cardinalities: list[int]
    eliminated: list[int]
    bytes_sent: int = 0
    bytes_received: int = 0
    wall_ms: float = 0.0

    def to_dict(self, with_time: bool = True) -> dict:
        d = asdict(self)
        if not with_time:
            d.pop("wall_ms")
        return d


@dataclass
class TrainReport:
    records: list[IterationRecord] = field(default_factory=list)
    traffic: list = field(default_factory=list)
    converged: bool = False
    checkpoints: list[str] = field(default_factory=list)
    model: ModelParams | None = None

    @property
    def fic(self) -> list[float]:
        return [r.fic for r in self.records]

    def bytes_by_tag(self, iteration: int) -> dict[str, int]:
        return account_bytes(self, iteration)

    def init_bytes(self) -> int:
        return sum(t.nbytes for t in self.traffic if t.iteration == 0)

    def to_csv(self) -> str:
        lines = ["iteration,fic,active_experts,bytes_sent,bytes_received,millis"]
        for r in self.records:
            lines.append(f"{r.iteration},{r.fic!r},{r.n_active},{r.bytes_sent},{r.bytes_received},{r.wall_ms:.3f}")
        return "\n".join(lines) + "\n"


def account_bytes(report: TrainReport, iteration: int) -> dict[str, int]:
    """Bytes moved in ``iteration`` split by message tag (both directions)."""
    out: dict[str, int] = defaultdict(int)
    for t in report.traffic:
        if t.iteration == iteration:
            out[t.tag.name] += t.nbytes
    return dict(out)


# -- partitioning -------------------------------------------------------------


def partition_indices(n: int, n_workers: int, seed: int) -> list[np.ndarray]:
    if n < n_workers:
        raise ConfigError(f"cannot split {n} samples over {n_workers} workers")
    perm = np.random.default_rng(seed).permutation(n)
    return np.array_split(perm, n_workers)


def partition_dataset(data: Dataset, n_workers: int, seed: int, *, n_experts: int = 1, init_seed: int = 0) -> list[WorkerPartition]:
    """Shuffle by ``seed`` and deal contiguous blocks, one per worker."""
    parts = []
    for idx in partition_indices(data.n, n_workers, seed):
        Q = initial_responsibilities(idx, data.n, n_experts, init_seed)
        parts.append(WorkerPartition(data.X[idx], data.y[idx], Q, index=idx))
    return parts


# -- coordinator --------------------------------------------------------------


class Coordinator:
    def __init__(self, transport: Transport, cfg: TrainConfig, cluster: ClusterConfig, n_features: int):
        self.t = transport
        self.cfg = cfg
        self.cluster = cluster
        self.dims = Dims(2**cfg.depth, n_features, cfg.t_max)
        self.rng = np.random.default_rng([cfg.seed, 0x9A7E])
        self.grid: SplitGrid | None = None
        self.model: ModelParams | None = None
        self.n_total = 0
        self.fic_prev: float | None = None
        self.stats: EStats | None = None
        self.iteration = 0
        self.report = TrainReport()
        self.eps = 0.0

    # init --------------------------------------------------------------
    def setup(self) -> None:
        D = self.dims.n_features
        reports = self.t.gather(Tag.MinMaxReport, 0)
        mins = np.array([m.payload[:D] for m in reports])
        maxs = np.array([m.payload[D : 2 * D] for m in reports])
        ysum = sum(float(m.payload[2 * D]) for m in reports)
        self.n_total = int(sum(m.payload[2 * D + 1] for m in reports))
        self.eps = self.cfg.shrink_threshold(self.n_total)
        self.grid = build_split_grid(mins, maxs, self.cfg.t_max)
        self.t.broadcast(Message(Tag.BroadcastGrid, 0, self.grid.to_array()))
        self.model = self.initial_model(ysum / self.n_total)

    def initial_model(self, y_mean: float) -> ModelParams:
        G = self.dims.n_gates
        valid = np.flatnonzero(self.grid.valid)
        dims = valid if valid.size else np.arange(self.dims.n_features)
        gamma = self.rng.choice(dims, size=G)
        thr = np.array([self.rng.choice(self.grid.candidates(d)) if self.grid.valid[d] else 0.0 for d in gamma])
        return ModelParams.initial(
            self.cfg.depth,
            self.dims.n_features,
            self.cfg.task,
            gamma=gamma,
            threshold=thr,
            g=self.cfg.init_g,
            intercept=y_mean,
            d_beta=self.cfg.d_beta,
        )

    # one iteration -----------------------------------------------------
    def fic_pass(self, it: int):
        E = self.dims.n_experts
        self.t.broadcast(Message(Tag.BroadcastModel, it, pack_model(self.model)))
        reps = self.t.gather(Tag.LoglikReport, it)
        ll = [float(m.payload[0]) for m in reps]
        stats = estep_aggregate(EStats.from_array(m.payload[1:], E) for m in reps)
        return fic_aggregate(ll, stats, self.model), stats

    def iterate(self, it: int) -> bool:
        """Run iteration ``it``; returns False once the FIC has converged."""
        start = time.perf_counter()
        E, D = self.dims.n_experts, self.dims.n_features
        fic, stats = self.fic_pass(it)
        self.stats = stats
        rec = IterationRecord(
            it,
            fic.fic,
            fic.loglik,
            fic.gate_penalty,
            fic.expert_penalty,
            int(self.model.active.sum()),
            [int(c) for c in self.model.cardinality[self.model.active]],
            [],
        )
        converged = self.fic_prev is not None and abs(fic.fic - self.fic_prev) < self.cfg.delta_term * abs(self.fic_prev)
        self.fic_prev = fic.fic
        if converged:
            self._close_record(rec, it, start)
            return False

        # E-step; the first iteration has no previous-iteration masses to penalise with
        if it == 1 and self.cfg.first_mstep:
            estats = stats
        else:
            gate_pen, coef = estep_penalties(None if it == 1 else stats, self.model)
            self.t.broadcast(Message(Tag.BroadcastEStep, it, np.concatenate([gate_pen, coef])))
            estats = estep_aggregate(EStats.from_array(m.payload, E) for m in self.t.gather(Tag.EStatsReport, it))

        # shrinkage
        eliminated = shrink_decision(estats, self.eps, self.model)
        self.model = prune_topology(self.model, eliminated)
        rec.eliminated = eliminated
        self.t.broadcast(Message(Tag.ShrinkDirective, it, self.model.active.astype(float)))
        estats = estep_aggregate(EStats.from_array(m.payload, E) for m in self.t.gather(Tag.EStatsReport, it))
        gate_msgs = self.t.gather(Tag.GateStatsReport, it)

        # gates
        self.model = apply_gates(self.model, self.select_gates(gate_msgs, estats))

        # experts: candidates -> vote -> restricted refits -> average
        W = self.cluster.n_workers
        self.t.broadcast(Message(Tag.BroadcastPenalty, it, estats.NphiScaled))
        cands = [unpack_fits(m.payload, E, D, False) for m in self.t.gather(Tag.ExpertCandidateReport, it)]
        mask = np.zeros((E, D), dtype=bool)
        for j in np.flatnonzero(self.model.active):
            mask[j] = majority_vote([support_of(c[j], D) for c in cands], W)
        self.t.broadcast(Message(Tag.BroadcastFeatureSet, it, mask.astype(float).ravel()))
        fits = [unpack_fits(m.payload, E, D, True) for m in self.t.gather(Tag.ExpertFitReport, it)]
        weights, b, s2 = self.model.weights.copy(), self.model.intercept.copy(), self.model.sigma2.copy()
        for j in np.flatnonzero(self.model.active):
            avg = average_weights(f[j] for f in fits)
            if avg is None:
                continue
            weights[j], b[j], s2[j] = avg.weights, avg.intercept, avg.sigma2
        self.model = self.model.copy(weights=weights, intercept=b, sigma2=s2)

        self._close_record(rec, it, start)
        if self.cluster.checkpoint_dir and self.cluster.checkpoint_every and it % self.cluster.checkpoint_every == 0:
            self.report.checkpoints.append(str(self.checkpoint(it)))
        return True

    def select_gates(self, gate_msgs, estats: EStats) -> dict:
        G, D, T1 = self.dims.n_gates, self.dims.n_features, self.dims.n_thresholds
        total = np.sum([m.payload for m in gate_msgs], axis=0).reshape(G, 2, D, T1)
        topo = self.model.topology
        out = {}
        for i in np.flatnonzero(~topo.passthrough):
            nb = float(estats.Nbeta[i])
            if nb <= 0:
                continue
            sel = select_gate(GateStats(total[i, 0], total[i, 1]), nb, self.grid, self.model.gate(i), swapped=self.cfg.swapped_gate_score)
            if sel is not None:
                out[int(i)] = sel
        return out

    def _close_record(self, rec, it, start):
        for tr in self.t.traffic:
            if tr.iteration == it:
                if tr.direction == "down":
                    rec.bytes_sent += tr.nbytes
                else:
                    rec.bytes_received += tr.nbytes
        rec.wall_ms = 1000 * (time.perf_counter() - start)
        self.report.records.append(rec)

    # checkpoints -------------------------------------------------------
    def checkpoint(self, it: int) -> Path:
        directory = Path(self.cluster.checkpoint_dir)
        directory.mkdir(parents=True, exist_ok=True)
        self.t.broadcast(Message(Tag.Checkpoint, it, np.zeros(0)))
        self.t.gather(Tag.Ack, it)
        workers = []
        for w in range(self.cluster.n_workers):
            f = checkpoint_file(directory, w, it)
            workers.append({"file": f.name, "sha256": hashlib.sha256(f.read_bytes()).hexdigest()})
        doc = {
            "format": CHECKPOINT_FORMAT,
            "version": 1,
            "iteration": it,
            "fic_prev": self.fic_prev,
            "n_total": self.n_total,
            "model": model_to_dict(self.model),
            "model_extra": {"inactive_weights": self.model.weights[~self.model.active].tolist()},
            "stats": {k: getattr(self.stats, k).tolist() for k in ("Nphi", "Nbeta", "NphiScaled")},
            "grid": self.grid.to_array().tolist(),
            "rng_state": self.rng.bit_generator.state,
            "train_config": self.cfg.to_dict(),
            "cluster": {"n_workers": self.cluster.n_workers, "seed": self.cluster.seed},
            "records": [r.to_dict(with_time=False) for r in self.report.records],
            "workers": workers,
        }
        path = directory / f"checkpoint_it{it:06d}.json"
        path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
        return path

    def restore(self, snapshot: dict, directory: Path) -> None:
        it = int(snapshot["iteration"])
        if not np.array_equal(np.asarray(snapshot["grid"], float), self.grid.to_array(), equal_nan=True):
            raise RestoreError("snapshot split grid does not match this dataset")
        self.t.broadcast(Message(Tag.Restore, it, np.zeros(0)))
        try:
            self.t.gather(Tag.Ack, it)
        except WorkerFailure as exc:
            raise RestoreError(f"workers could not restore iteration {it}: {exc}") from exc
        self.model = snapshot["_model"]
        self.fic_prev = snapshot["fic_prev"]
        s = snapshot["stats"]
        self.stats = EStats(np.asarray(s["Nphi"]), np.asarray(s["Nbeta"]), np.asarray(s["NphiScaled"]))
        self.rng.bit_generator.state = snapshot["rng_state"]
        self.report.records = [IterationRecord(**r) for r in snapshot["records"]]
        self.iteration = it

    def run(self, resume: dict | None = None, resume_dir: Path | None = None) -> tuple[ModelParams, TrainReport]:
        self.setup()
        if resume is not None:
            self.restore(resume, resume_dir)
        it = self.iteration
        while it < self.cfg.max_iters:
            it += 1
            if not self.iterate(it):
                self.report.converged = True
                break
        self.t.broadcast(Message(Tag.Terminate, it, np.zeros(0)))
        self.model.meta["fic"] = self.fic_prev
        self.model.meta["train_config"] = self.cfg.to_dict()
        self.report.traffic = list(self.t.traffic)
        self.report.model = self.model
        return self.model, self.report


def load_checkpoint(path) -> tuple[dict, Path]:
    """Read and verify a snapshot document and the worker files it references."""
    path = Path(path)
    if not path.exists():
        raise RestoreError(f"no checkpoint at {path}")
    try:
        doc = json.loads(path.read_text())
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise RestoreError(f"corrupt checkpoint {path}: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("format") != CHECKPOINT_FORMAT:
        raise RestoreError(f"{path} is not a dfab checkpoint")
    try:
        model = model_from_dict(doc["model"])
        inactive = np.asarray(doc["model_extra"]["inactive_weights"], float)
        if inactive.size:
            W = model.weights.copy()
            W[~model.active] = inactive
            model = model.copy(weights=W)
        doc["_model"] = model
        for w in doc["workers"]:
            f = path.parent / w["file"]
            if not f.exists():
                raise RestoreError(f"missing worker state {f}")
            if hashlib.sha256(f.read_bytes()).hexdigest() != w["sha256"]:
                raise RestoreError(f"worker state {f} does not match its digest")
        for k in ("iteration", "fic_prev", "stats", "grid", "rng_state", "records"):
            doc[k]
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, RestoreError):
            raise
        raise RestoreError(f"corrupt checkpoint {path}: {exc}") from exc
    return doc, path.parent


def _worker_setup(cfg: TrainConfig, cluster: ClusterConfig, w: int, n_total: int, n_features: int, ckpt_dir):
    return WorkerSetup(
        index=w,
        n_workers=cluster.n_workers,
        depth=cfg.depth,
        n_features=n_features,
        t_max=cfg.t_max,
        task=cfg.task,
        init_seed=cfg.seed,
        n_total=n_total,
        foba_max_features=cfg.foba_max_features,
        partition_seed=cluster.seed,
        checkpoint_dir=ckpt_dir,
    )


def run_training(data: Dataset, cfg: TrainConfig = TrainConfig(), cluster: ClusterConfig = ClusterConfig(), *, resume_from=None):
    """Train on ``data`` with ``cluster.n_workers`` workers; returns ``(model, report)``."""
    if data.task is not cfg.task:
        raise ConfigError(f"dataset task {data.task.value} does not match config task {cfg.task.value}")
    resume = resume_dir = None
    if resume_from is not None:
        resume, resume_dir = load_checkpoint(resume_from)
    ckpt_dir = cluster.checkpoint_dir
    if resume_dir is not None and ckpt_dir is None:
        ckpt_dir = str(resume_dir)
        cluster = replace(cluster, checkpoint_dir=ckpt_dir)
    E = 2**cfg.depth
    idx = partition_indices(data.n, cluster.n_workers, cluster.seed)
    setups = [_worker_setup(cfg, cluster, w, data.n, data.d, ckpt_dir) for w in range(cluster.n_workers)]

    threads = []
    if cluster.transport == "inprocess":
        workers = [
            Worker(setups[w], WorkerPartition(data.X[i], data.y[i], initial_responsibilities(i, data.n, E, cfg.seed), index=i))
            for w, i in enumerate(idx)
        ]
        transport: Transport = InProcessTransport(workers, cluster.queue_size, cluster.loopback_free)
    else:
        transport = SocketTransport(cluster.n_workers, cluster.host, cluster.port)
        host, port = transport.address[:2]
        threads = _spawn_socket_workers(cluster, host, port, ckpt_dir)
        transport.accept_all()
        for w in range(cluster.n_workers):
            if cluster.workers_load_data:
                payload = assign_payload(setups[w])
            else:
                payload = assign_payload(setups[w], idx[w], data.X[idx[w]], data.y[idx[w]])
            transport.send(w, Message(Tag.AssignPartition, 0, payload))
    coord = Coordinator(transport, cfg, cluster, data.d)
    try:
        return coord.run(resume, resume_dir)
    except WorkerFailure as exc:
        last = coord.report.checkpoints[-1] if coord.report.checkpoints else None
        raise TrainingAborted(f"training aborted: {exc}", last) from exc
    finally:
        transport.close()
        for th in threads:
            if hasattr(th, "join"):
                th.join(timeout=10)
            if hasattr(th, "wait"):
                th.wait(timeout=10)


def csv_loader(path: str, target: str):
    """Loader for socket workers that read their own rows from a shared CSV."""

    def load(setup: WorkerSetup):
        from ..data import load_csv

        data = load_csv(path, target, setup.task)
        i = partition_indices(data.n, setup.n_workers, setup.partition_seed)[setup.index]
        return i, data.X[i], data.y[i]

    return load


def _spawn_socket_workers(cluster: ClusterConfig, host, port, ckpt_dir):
    if cluster.spawn == "none":
        return []
    loader = None
    if cluster.workers_load_data:
        if not cluster.data_path:
            raise ConfigError("workers_load_data needs data_path")
        loader = csv_loader(cluster.data_path, cluster.target)
    out = []
    for _ in range(cluster.n_workers):
        if cluster.spawn == "thread":
            th = threading.Thread(target=run_socket_worker, args=(host, port, loader, ckpt_dir), daemon=True)
            th.start()
            out.append(th)
        elif cluster.spawn == "process":
            import subprocess
            import sys

            cmd = [sys.executable, "-m", "dfab.cli", "worker", f"{host}:{port}"]
            if ckpt_dir:
                cmd += ["--checkpoint-dir", str(ckpt_dir)]
            if cluster.workers_load_data:
                cmd += ["--data", cluster.data_path, "--target", cluster.target]
            out.append(subprocess.Popen(cmd))
        else:
            raise ConfigError(f"unknown spawn mode {cluster.spawn!r}")
    return out


__all__ = [
    "ClusterConfig",
    "Coordinator",
    "IterationRecord",
    "RestoreError",
    "TrainConfig",
    "TrainReport",
    "TrainingAborted",
    "account_bytes",
    "load_checkpoint",
    "partition_dataset",
    "partition_indices",
    "run_training",
]
