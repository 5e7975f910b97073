"""Transports between the coordinator and its workers.

Both transports give per-worker FIFO, at-most-once delivery and record every
frame that crosses them in ``traffic`` for byte accounting.
"""

from __future__ import annotations

import logging
import queue
import socket
import threading
from dataclasses import dataclass

import numpy as np

from .protocol import Message, Tag, decode, encode, read_frame, write_frame
from .worker import HEADER_LEN, Worker, WorkerSetup, serve

log = logging.getLogger(__name__)


class WorkerFailure(RuntimeError):
    pass


@dataclass(frozen=True)
class Traffic:
    direction: str  # "down" (coordinator -> worker) or "up"
    worker: int
    tag: Tag
    iteration: int
    nbytes: int


class Transport:
    n_workers: int

    def __init__(self):
        self.traffic: list[Traffic] = []
        self.delivery_log: list[tuple[int, Tag, int]] = []

    def _account(self, direction, w, msg: Message, nbytes: int):
        self.traffic.append(Traffic(direction, w, msg.tag, msg.iteration, nbytes))

    def send(self, w: int, msg: Message) -> None:
        raise NotImplementedError

    def recv(self, w: int, timeout: float | None = None) -> Message:
        raise NotImplementedError

    def broadcast(self, msg: Message) -> None:
        for w in range(self.n_workers):
            self.send(w, msg)

    def gather(self, tag: Tag, iteration: int) -> list[Message]:
        """One reply per worker, in worker order; a barrier for the iteration."""
        out = []
        for w in range(self.n_workers):
            msg = self.recv(w)
            if msg.tag is Tag.WorkerError:
                raise WorkerFailure(f"worker {w} reported a failure at iteration {iteration}")
            if msg.tag is not tag or msg.iteration != iteration:
                raise WorkerFailure(
                    f"worker {w}: expected {tag.name}@{iteration}, got {msg.tag.name}@{msg.iteration}"
                )
            self.delivery_log.append((w, msg.tag, msg.iteration))
            out.append(msg)
        return out

    def close(self) -> None:
        pass


class InProcessTransport(Transport):
    """Workers run as threads; each direction is a bounded queue.

    Messages are serialised to wire frames so byte counts match the socket
    transport, unless ``loopback_free`` is set, in which case objects are
    handed over directly and nothing is counted.
    """

    def __init__(self, workers: list[Worker], queue_size: int = 4, loopback_free: bool = False):
        super().__init__()
        self.n_workers = len(workers)
        self.loopback_free = loopback_free
        self._down = [queue.Queue(maxsize=queue_size) for _ in workers]
        self._up = [queue.Queue(maxsize=queue_size) for _ in workers]
        self._threads = []
        for w, worker in enumerate(workers):
            th = threading.Thread(target=self._run, args=(w, worker), name=f"dfab-worker-{w}", daemon=True)
            th.start()
            self._threads.append(th)

    def _wrap(self, msg):
        return msg if self.loopback_free else encode(msg)

    def _unwrap(self, item):
        return item if isinstance(item, Message) else decode(item)

    def _run(self, w, worker):
        def recv():
            return self._unwrap(self._down[w].get())

        def send(msg):
            self._up[w].put(self._wrap(msg))

        try:
            serve(worker, recv, send)
        except Exception:
            log.exception("in-process worker %d crashed", w)
            self._up[w].put(self._wrap(Message(Tag.WorkerError, 0, np.zeros(0))))

    def send(self, w, msg):
        item = self._wrap(msg)
        if not self.loopback_free:
            self._account("down", w, msg, len(item))
        self._down[w].put(item)

    def recv(self, w, timeout=None):
        try:
            item = self._up[w].get(timeout=timeout)
        except queue.Empty:
            raise WorkerFailure(f"worker {w} timed out") from None
        msg = self._unwrap(item)
        if not self.loopback_free:
            self._account("up", w, msg, len(item))
        return msg

    def close(self):
        for w in range(self.n_workers):
            if self._threads[w].is_alive():
                self._down[w].put(self._wrap(Message(Tag.Terminate, 0, np.zeros(0))))
        for th in self._threads:
            th.join(timeout=10)


class SocketTransport(Transport):
    """Coordinator end of TCP connections from ``n_workers`` socket workers."""

    def __init__(self, n_workers: int, host: str = "127.0.0.1", port: int = 0, accept_timeout: float = 60.0):
        super().__init__()
        self.n_workers = n_workers
        self._server = socket.create_server((host, port))
        self._server.settimeout(accept_timeout)
        self.address = self._server.getsockname()
        self._conns: list[socket.socket] = []

    def accept_all(self):
        while len(self._conns) < self.n_workers:
            try:
                conn, _ = self._server.accept()
            except socket.timeout:
                raise WorkerFailure(f"only {len(self._conns)} of {self.n_workers} workers connected") from None
            conn.settimeout(None)
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            self._conns.append(conn)

    def send(self, w, msg):
        frame = encode(msg)
        try:
            write_frame(self._conns[w], frame)
        except OSError as exc:
            raise WorkerFailure(f"worker {w}: {exc}") from exc
        if msg.tag is not Tag.AssignPartition:
            self._account("down", w, msg, len(frame))

    def recv(self, w, timeout=None):
        try:
            frame = read_frame(self._conns[w])
        except (OSError, ConnectionError) as exc:
            raise WorkerFailure(f"worker {w}: {exc}") from exc
        msg = decode(frame)
        self._account("up", w, msg, len(frame))
        return msg

    def close(self):
        for conn in self._conns:
            try:
                write_frame(conn, encode(Message(Tag.Terminate, 0, np.zeros(0))))
            except OSError:
                pass
            conn.close()
        self._server.close()


def assign_payload(setup: WorkerSetup, index=None, X=None, y=None) -> np.ndarray:
    """Initial partition hand-off; ``index=None`` tells the worker to load its own rows."""
    if index is None:
        return np.asarray(setup.header() + [-1.0])
    n = len(index)
    return np.concatenate([setup.header(), [n], np.asarray(index, float), np.asarray(X, float).ravel(), np.asarray(y, float)])


def run_socket_worker(host: str, port: int, loader=None, checkpoint_dir=None) -> None:
    """Connect to a coordinator and serve until told to terminate.

    ``loader(setup)`` must return ``(index, X, y)`` for this worker when the
    coordinator asks workers to read their own data.
    """
    from ..objective import WorkerPartition

    with socket.create_connection((host, port)) as sock:
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        first = decode(read_frame(sock))
        if first.tag is not Tag.AssignPartition:
            raise WorkerFailure(f"expected AssignPartition, got {first.tag.name}")
        p = first.payload
        setup = WorkerSetup.from_header(p[:HEADER_LEN], checkpoint_dir)
        n = int(p[HEADER_LEN])
        D = setup.n_features
        if n < 0:
            if loader is None:
                raise WorkerFailure("coordinator asked this worker to load its own data but no data path was given")
            index, X, y = loader(setup)
        else:
            o = HEADER_LEN + 1
            index = p[o : o + n].astype(np.int64)
            X = p[o + n : o + n + n * D].reshape(n, D)
            y = p[o + n + n * D : o + 2 * n + n * D]
        from .worker import initial_responsibilities

        Q = initial_responsibilities(index, setup.n_total, 2**setup.depth, setup.init_seed)
        worker = Worker(setup, WorkerPartition(X.copy(), y.copy(), Q, index=np.asarray(index)))
        serve(worker, lambda: decode(read_frame(sock)), lambda m: write_frame(sock, encode(m)))
