"""Worker side: owns one partition and answers coordinator messages."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..experts import PenalizedObjective, foba, make_problem
from ..gates import SplitGrid, local_gate_stats_all, local_minmax
from ..model import TaskKind
from ..objective import (
    WorkerPartition,
    local_estep_with,
    local_loglik,
    partition_stats,
    renormalize,
)
from .protocol import Dims, Message, Tag, pack_fits, pack_model, unpack_model  # noqa: F401

log = logging.getLogger(__name__)

TASK_CODES = {TaskKind.REGRESSION: 0.0, TaskKind.CLASSIFICATION: 1.0}


@dataclass(frozen=True)
class WorkerSetup:
    index: int
    n_workers: int
    depth: int
    n_features: int
    t_max: int
    task: TaskKind = TaskKind.REGRESSION
    init_seed: int = 0
    n_total: int = 0
    foba_max_features: int | None = None
    partition_seed: int = 0
    checkpoint_dir: str | None = None

    @property
    def dims(self) -> Dims:
        return Dims(2**self.depth, self.n_features, self.t_max)

    def header(self) -> list[float]:
        return [
            self.index,
            self.n_workers,
            self.depth,
            self.n_features,
            self.t_max,
            TASK_CODES[TaskKind(self.task)],
            self.init_seed,
            self.n_total,
            -1 if self.foba_max_features is None else self.foba_max_features,
            self.partition_seed,
        ]

    @classmethod
    def from_header(cls, h, checkpoint_dir=None) -> "WorkerSetup":
        h = [int(v) for v in h]
        return cls(
            index=h[0],
            n_workers=h[1],
            depth=h[2],
            n_features=h[3],
            t_max=h[4],
            task=TaskKind.CLASSIFICATION if h[5] == 1 else TaskKind.REGRESSION,
            init_seed=h[6],
            n_total=h[7],
            foba_max_features=None if h[8] < 0 else h[8],
            partition_seed=h[9],
            checkpoint_dir=checkpoint_dir,
        )


HEADER_LEN = 10


def initial_responsibilities(index, n_total: int, n_experts: int, seed: int) -> np.ndarray:
    """Uniform responsibilities with small seeded jitter, keyed by global sample id."""
    rng = np.random.default_rng([seed, 0x51])
    jitter = rng.uniform(0.0, 0.01, size=(n_total, n_experts))
    Q = 1.0 + jitter[np.asarray(index)]
    return Q / Q.sum(axis=1, keepdims=True)


def checkpoint_file(directory, worker: int, iteration: int) -> Path:
    return Path(directory) / f"worker{worker:03d}_it{iteration:06d}.npy"


class Worker:
    def __init__(self, setup: WorkerSetup, partition: WorkerPartition):
        self.setup = setup
        self.part = partition
        self.dims = setup.dims
        self.model = None
        self._problems: dict[int, object] = {}
        self.finished = False

    def hello(self) -> Message:
        lo, hi = local_minmax(self.part)
        payload = np.concatenate([lo, hi, [self.part.y.sum(), self.part.n]])
        return Message(Tag.MinMaxReport, 0, payload)

    def handle(self, msg: Message) -> list[Message]:
        try:
            return self._dispatch(msg)
        except Exception:
            log.exception("worker %d failed on %s", self.setup.index, msg.tag.name)
            return [Message(Tag.WorkerError, msg.iteration, np.zeros(0))]

    def _dispatch(self, msg: Message) -> list[Message]:
        self.dims.check(msg)
        t = msg.iteration
        tag = msg.tag
        E, D = self.dims.n_experts, self.dims.n_features
        if tag is Tag.BroadcastGrid:
            self.part.grid = SplitGrid.from_array(msg.payload, D, self.dims.t_max)
            self.part._bins = None
            return []
        if tag is Tag.BroadcastModel:
            self.model = unpack_model(msg.payload, self.setup.depth, D, self.setup.task)
            ll = local_loglik(self.part, self.model)
            stats = partition_stats(self.part.Q, self.part.ell, self.model)
            return [Message(Tag.LoglikReport, t, np.concatenate([[ll], stats.to_array()]))]
        if tag is Tag.BroadcastEStep:
            gate_pen, coef = msg.payload[:E], msg.payload[E:]
            stats = local_estep_with(self.part, self.model, gate_pen, coef)
            return [Message(Tag.EStatsReport, t, stats.to_array())]
        if tag is Tag.ShrinkDirective:
            active = msg.payload > 0.5
            eliminated = np.flatnonzero(self.model.active & ~active)
            if eliminated.size:
                self.model = self.model.copy(active=active)
                renormalize(self.part, eliminated, active)
            stats = partition_stats(self.part.Q, self.part.ell, self.model)
            gstats = local_gate_stats_all(self.part, self.model.topology)
            gpay = np.concatenate([np.concatenate([s.rho_left.ravel(), s.rho_right.ravel()]) for s in gstats]) if gstats else np.zeros(0)
            return [Message(Tag.EStatsReport, t, stats.to_array()), Message(Tag.GateStatsReport, t, gpay)]
        if tag is Tag.BroadcastPenalty:
            return [Message(Tag.ExpertCandidateReport, t, pack_fits(self._candidates(msg.payload), E, D, False))]
        if tag is Tag.BroadcastFeatureSet:
            mask = msg.payload.reshape(E, D) > 0.5
            return [Message(Tag.ExpertFitReport, t, pack_fits(self._refits(mask), E, D, True))]
        if tag is Tag.Checkpoint:
            path = checkpoint_file(self._ckpt_dir(), self.setup.index, t)
            with open(path, "wb") as fh:
                np.save(fh, self.part.Q, allow_pickle=False)
            return [Message(Tag.Ack, t, np.zeros(0))]
        if tag is Tag.Restore:
            Q = np.load(checkpoint_file(self._ckpt_dir(), self.setup.index, t), allow_pickle=False)
            if Q.shape != self.part.Q.shape:
                raise ValueError(f"checkpoint Q has shape {Q.shape}, partition needs {self.part.Q.shape}")
            self.part.Q = Q
            return [Message(Tag.Ack, t, np.zeros(0))]
        if tag is Tag.Terminate:
            self.finished = True
            return []
        raise ValueError(f"worker cannot handle {tag.name}")

    def _ckpt_dir(self) -> str:
        if not self.setup.checkpoint_dir:
            raise ValueError("worker has no checkpoint directory")
        return self.setup.checkpoint_dir

    def _candidates(self, nphi_scaled):
        self._problems = {}
        out = []
        for j in range(self.dims.n_experts):
            q = self.part.Q[:, j]
            if not self.model.active[j] or q.sum() <= 0:
                out.append(None)
                continue
            problem = make_problem(self.part.X, self.part.y, q, self.setup.task)
            self._problems[j] = problem
            objective = PenalizedObjective(self.setup.n_workers, float(nphi_scaled[j]))
            out.append(foba(problem, objective, self.setup.foba_max_features).params())
        return out

    def _refits(self, mask):
        out = []
        for j in range(self.dims.n_experts):
            problem = self._problems.get(j)
            if problem is None or not self.model.active[j]:
                out.append(None)
                continue
            out.append(problem.fit(np.flatnonzero(mask[j])).params())
        self._problems = {}
        return out


def serve(worker: Worker, recv, send) -> None:
    """Message loop: ``recv()`` yields Messages in order, ``send(msg)`` replies."""
    send(worker.hello())
    while not worker.finished:
        msg = recv()
        for reply in worker.handle(msg):
            send(reply)
            if reply.tag is Tag.WorkerError:
                return
