from .coordinator import (
    ClusterConfig,
    ConfigError,
    Coordinator,
    IterationRecord,
    RestoreError,
    TrainConfig,
    TrainingAborted,
    TrainReport,
    account_bytes,
    load_checkpoint,
    partition_dataset,
    partition_indices,
    run_training,
)
from .protocol import Dims, Message, ProtocolError, Tag, decode, encode
from .transport import InProcessTransport, SocketTransport, WorkerFailure, run_socket_worker
from .worker import Worker, WorkerSetup, initial_responsibilities

__all__ = [
    "ClusterConfig",
    "ConfigError",
    "Coordinator",
    "Dims",
    "InProcessTransport",
    "IterationRecord",
    "Message",
    "ProtocolError",
    "RestoreError",
    "SocketTransport",
    "Tag",
    "TrainConfig",
    "TrainReport",
    "TrainingAborted",
    "Worker",
    "WorkerFailure",
    "WorkerSetup",
    "account_bytes",
    "decode",
    "encode",
    "initial_responsibilities",
    "load_checkpoint",
    "partition_dataset",
    "partition_indices",
    "run_socket_worker",
    "run_training",
]
