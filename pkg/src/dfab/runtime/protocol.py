"""Coordinator/worker messages and their binary framing.

Frame layout (little endian)::

    uint32 payload length in bytes | uint8 tag | uint32 iteration | float64 * k

Every payload after the initial partition hand-off has a length fixed by the
problem shape (E, G, D, T_max) alone; ``Dims`` computes those lengths.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

HEADER = struct.Struct("<IBI")
HEADER_SIZE = HEADER.size  # 9
MAX_FRAME = 1 << 31


class Tag(IntEnum):
    BroadcastModel = 1
    BroadcastGrid = 2
    BroadcastPenalty = 3
    BroadcastFeatureSet = 4
    MinMaxReport = 5
    LoglikReport = 6
    EStatsReport = 7
    GateStatsReport = 8
    ExpertCandidateReport = 9
    ExpertFitReport = 10
    ShrinkDirective = 11
    Terminate = 12
    AssignPartition = 13
    BroadcastEStep = 14
    Checkpoint = 15
    Restore = 16
    Ack = 17
    WorkerError = 18


class ProtocolError(RuntimeError):
    pass


@dataclass(frozen=True)
class Message:
    tag: Tag
    iteration: int
    payload: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "tag", Tag(self.tag))
        object.__setattr__(self, "payload", np.ascontiguousarray(self.payload, dtype="<f8").reshape(-1))

    @property
    def nbytes(self) -> int:
        return HEADER_SIZE + 8 * self.payload.size


def encode(msg: Message) -> bytes:
    body = msg.payload.tobytes()
    return HEADER.pack(len(body), int(msg.tag), msg.iteration & 0xFFFFFFFF) + body


def decode(frame: bytes) -> Message:
    if len(frame) < HEADER_SIZE:
        raise ProtocolError("truncated frame header")
    length, tag, it = HEADER.unpack_from(frame)
    if len(frame) != HEADER_SIZE + length or length % 8:
        raise ProtocolError(f"frame length mismatch: header says {length}, got {len(frame) - HEADER_SIZE}")
    try:
        tag = Tag(tag)
    except ValueError:
        raise ProtocolError(f"unknown tag {tag}") from None
    return Message(tag, it, np.frombuffer(frame, dtype="<f8", offset=HEADER_SIZE))


def _recv_exact(sock, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(min(n - len(buf), 1 << 20))
        if not chunk:
            raise ConnectionError("peer closed the connection")
        buf.extend(chunk)
    return bytes(buf)


def read_frame(sock) -> bytes:
    head = _recv_exact(sock, HEADER_SIZE)
    length = HEADER.unpack(head)[0]
    if length > MAX_FRAME:
        raise ProtocolError(f"frame of {length} bytes exceeds limit")
    return head + _recv_exact(sock, length)


def write_frame(sock, frame: bytes) -> None:
    sock.sendall(frame)


@dataclass(frozen=True)
class Dims:
    n_experts: int
    n_features: int
    t_max: int

    @property
    def n_gates(self) -> int:
        return self.n_experts - 1

    @property
    def n_thresholds(self) -> int:
        return self.t_max - 1

    def payload_size(self, tag: Tag) -> int | None:
        """Fixed payload length (in float64 values) of ``tag``; None if variable."""
        E, G, D, T1 = self.n_experts, self.n_gates, self.n_features, self.n_thresholds
        return {
            Tag.BroadcastModel: 3 * G + E * (D + 3) + 1,
            Tag.BroadcastGrid: 2 * D + D * T1,
            Tag.BroadcastPenalty: E,
            Tag.BroadcastFeatureSet: E * D,
            Tag.MinMaxReport: 2 * D + 2,
            Tag.LoglikReport: 1 + 2 * E + G,
            Tag.EStatsReport: 2 * E + G,
            Tag.GateStatsReport: 2 * G * D * T1,
            Tag.ExpertCandidateReport: E + E * D,
            Tag.ExpertFitReport: E + E * D + 2 * E,
            Tag.ShrinkDirective: E,
            Tag.Terminate: 0,
            Tag.BroadcastEStep: 2 * E,
            Tag.Checkpoint: 0,
            Tag.Restore: 0,
            Tag.Ack: 0,
        }.get(tag)

    def check(self, msg: Message) -> None:
        want = self.payload_size(msg.tag)
        if want is not None and msg.payload.size != want:
            raise ProtocolError(f"{msg.tag.name} payload has {msg.payload.size} values, schema says {want}")


# -- payload packing ----------------------------------------------------------


def pack_model(model) -> np.ndarray:
    return np.concatenate(
        [
            model.gamma.astype(float),
            model.threshold,
            model.g,
            model.weights.ravel(),
            model.intercept,
            model.sigma2,
            model.active.astype(float),
            [model.d_beta],
        ]
    )


def unpack_model(arr, depth: int, n_features: int, task):
    from ..model import ModelParams

    E = 2**depth
    G = E - 1
    D = n_features
    arr = np.asarray(arr, dtype=float)
    o = 0

    def take(k):
        nonlocal o
        out = arr[o : o + k]
        o += k
        return out

    gamma = take(G).astype(np.int64)
    thr = take(G).copy()
    g = take(G).copy()
    W = take(E * D).reshape(E, D).copy()
    b = take(E).copy()
    s2 = take(E).copy()
    active = take(E) > 0.5
    d_beta = float(take(1)[0])
    return ModelParams(depth, task, gamma, thr, g, W, b, s2, active, d_beta)


def pack_fits(fits, n_experts: int, n_features: int, with_scalars: bool) -> np.ndarray:
    """Per-expert fits (ExpertParams or None) as [abstain flags | weights | intercepts | sigma2]."""
    E, D = n_experts, n_features
    flags = np.ones(E)
    W = np.zeros((E, D))
    b = np.zeros(E)
    s2 = np.ones(E)
    for j, f in enumerate(fits):
        if f is None:
            continue
        flags[j] = 0.0
        W[j] = f.weights
        b[j] = f.intercept
        s2[j] = f.sigma2
    parts = [flags, W.ravel()]
    if with_scalars:
        parts += [b, s2]
    return np.concatenate(parts)


def unpack_fits(arr, n_experts: int, n_features: int, with_scalars: bool):
    from ..model import ExpertParams

    E, D = n_experts, n_features
    arr = np.asarray(arr, dtype=float)
    flags = arr[:E] > 0.5
    W = arr[E : E + E * D].reshape(E, D)
    if with_scalars:
        b = arr[E + E * D : 2 * E + E * D]
        s2 = arr[2 * E + E * D :]
    else:
        b = np.zeros(E)
        s2 = np.ones(E)
    return [None if flags[j] else ExpertParams(W[j].copy(), float(b[j]), float(s2[j])) for j in range(E)]
