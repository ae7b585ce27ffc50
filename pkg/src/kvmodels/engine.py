"""Threading models for the cache server.

The server's work falls into three code paths: connection acceptance and
expiry, network IO, and payload work (parse, store operation, response).
A :class:`ModelConfig` picks how those paths are mapped onto threads:

========  ==========  ====================  ====================
model     accept      network               payload
========  ==========  ====================  ====================
SPED      1 thread    in accept thread      in accept thread
SEDA      1 thread    N1 threads            N2 threads
SEDA-S    1 thread    N threads             N threads (paired)
AMPED     1 thread    0 or 1 thread         N threads
SYMPED    1 thread    N threads             in network thread
========  ==========  ====================  ====================

Threads hand work to each other through :class:`JobQueue` objects that
move whole batches under one lock acquisition and wake the consumer's
event loop once per batch.
"""
from __future__ import annotations

import collections
import enum
import logging
import os
import threading
import time
from dataclasses import dataclass

from . import netio
from .datastore import Store, StoreError
from .netio import Connection, EventLoop, PeerClosed, READ, WRITE
from .protocol import (
    DEFAULT_VALUE_CAP, Op, ProtocolError, Status, parse_request, response_bytes, split_requests,
)

log = logging.getLogger(__name__)

_OK_EMPTY = response_bytes(Status.OK)
_NOT_FOUND = response_bytes(Status.NOT_FOUND)
_BAD_REQUEST = response_bytes(Status.BAD_REQUEST)
_SERVER_ERROR = response_bytes(Status.SERVER_ERROR)


class ConfigError(ValueError):
    pass


class QueueClosed(RuntimeError):
    pass


class ModelKind(enum.Enum):
    SPED = "sped"
    SEDA = "seda"
    SEDA_S = "seda-s"
    AMPED = "amped"
    SYMPED = "symped"

    @classmethod
    def parse(cls, text: str) -> "ModelKind":
        norm = text.strip().lower().replace("_", "-")
        for kind in cls:
            if kind.value == norm:
                return kind
        raise ConfigError(f"unknown model {text!r}; choose from "
                          + ", ".join(k.value for k in cls))


@dataclass(frozen=True)
class ModelConfig:
    kind: ModelKind
    n_network: int = 0
    n_payload: int = 0

    def __post_init__(self):
        k, net, pay = self.kind, self.n_network, self.n_payload
        if net < 0 or pay < 0:
            raise ConfigError("thread counts must be non-negative")
        if k is ModelKind.SPED and (net or pay):
            raise ConfigError("SPED runs network and payload work in the connection thread: "
                              "network and payload thread counts must both be 0")
        if k is ModelKind.SEDA and (net < 1 or pay < 1):
            raise ConfigError("SEDA needs at least 1 network thread and at least 1 payload thread")
        if k is ModelKind.SEDA_S and (net < 1 or net != pay):
            raise ConfigError("SEDA-S needs equal network and payload thread counts, at least 1 each")
        if k is ModelKind.AMPED and (net not in (0, 1) or pay < 1):
            raise ConfigError("AMPED allows 0 or 1 network thread and needs at least 1 payload thread")
        if k is ModelKind.SYMPED and (net < 1 or pay):
            raise ConfigError("SYMPED runs payload work in the network threads: "
                              "needs at least 1 network thread and 0 payload threads")

    @classmethod
    def resolve(cls, kind, n_network=None, n_payload=None) -> "ModelConfig":
        """Fill in counts that the model fixes, then validate."""
        if isinstance(kind, str):
            kind = ModelKind.parse(kind)
        if kind is ModelKind.SPED:
            n_network = 0 if n_network is None else n_network
            n_payload = 0 if n_payload is None else n_payload
        elif kind is ModelKind.SYMPED:
            n_network = 1 if n_network is None else n_network
            n_payload = 0 if n_payload is None else n_payload
        elif kind is ModelKind.SEDA_S:
            if n_network is None:
                n_network = n_payload if n_payload is not None else 1
            if n_payload is None:
                n_payload = n_network
        elif kind is ModelKind.AMPED:
            n_network = 1 if n_network is None else n_network
            n_payload = 1 if n_payload is None else n_payload
        else:
            n_network = 1 if n_network is None else n_network
            n_payload = 1 if n_payload is None else n_payload
        return cls(kind, n_network, n_payload)

    @property
    def label(self) -> str:
        return f"{self.kind.value}({self.n_network},{self.n_payload})"


@dataclass(frozen=True)
class Topology:
    config: ModelConfig
    network_threads: int
    payload_threads: int
    accept_runs_network: bool
    payload_inline: bool
    # wiring[i] lists the payload queues network producer i dispatches to
    wiring: tuple[tuple[int, ...], ...]

    @property
    def thread_count(self) -> int:
        return 1 + self.network_threads + self.payload_threads

    @property
    def network_producers(self) -> int:
        return 1 if self.accept_runs_network else self.network_threads

    def describe(self) -> str:
        net = "in accept thread" if self.accept_runs_network else str(self.network_threads)
        pay = "inline" if self.payload_inline else str(self.payload_threads)
        return (f"model={self.config.kind.value} accept=1 network={net} payload={pay} "
                f"threads={self.thread_count}")


def build_topology(cfg: ModelConfig) -> Topology:
    """Map a validated config onto threads and queue wiring."""
    # re-validate in case a caller bypassed the dataclass constructor
    cfg = ModelConfig(cfg.kind, cfg.n_network, cfg.n_payload)
    kind = cfg.kind
    accept_net = cfg.n_network == 0
    inline = cfg.n_payload == 0
    producers = 1 if accept_net else cfg.n_network
    if inline:
        wiring = tuple(() for _ in range(producers))
    elif kind is ModelKind.SEDA_S:
        wiring = tuple((i,) for i in range(producers))
    else:
        wiring = tuple(tuple(range(cfg.n_payload)) for _ in range(producers))
    return Topology(cfg, cfg.n_network, cfg.n_payload, accept_net, inline, wiring)


class Job:
    """A request frame travelling from a network thread to a payload thread."""

    __slots__ = ("conn", "seq", "raw", "producer")

    def __init__(self, conn, seq, raw, producer=0):
        self.conn = conn
        self.seq = seq
        self.raw = raw
        self.producer = producer


class JobQueue:
    """FIFO guarded by one lock; batches move under a single acquisition."""

    def __init__(self, loop: EventLoop | None = None):
        self._jobs = collections.deque()
        self._lock = threading.Lock()
        self.loop = loop
        self.closed = False
        self.producer_acquisitions = 0
        self.consumer_acquisitions = 0
        self.enqueued = 0
        self.wakeups = 0

    def __len__(self):
        return len(self._jobs)

    def put(self, job) -> None:
        self.put_batch((job,))

    def put_batch(self, jobs) -> None:
        with self._lock:
            if self.closed:
                raise QueueClosed("queue closed")
            self.producer_acquisitions += 1
            self._jobs.extend(jobs)
            self.enqueued += len(jobs)
            self.wakeups += 1
        if self.loop is not None:
            self.loop.wakeup()

    def drain(self) -> list:
        with self._lock:
            self.consumer_acquisitions += 1
            if not self._jobs:
                return []
            out = list(self._jobs)
            self._jobs.clear()
            return out

    def close(self) -> None:
        with self._lock:
            self.closed = True


def batch_transfer(local, q: JobQueue) -> None:
    if not local:
        raise ValueError("batch_transfer needs at least one job")
    q.put_batch(local)


class RoundRobinDispatcher:
    """Per-producer round-robin over target queues with local batching.

    ``dispatch`` only stages the job; ``flush`` moves each target's staged
    jobs in one :func:`batch_transfer`.
    """

    def __init__(self, targets):
        if not targets:
            raise ValueError("dispatcher needs at least one target")
        self.targets = list(targets)
        self.rr = 0
        self._staged = [[] for _ in self.targets]
        self.jobs = 0
        self.batches = 0

    def dispatch(self, job) -> int:
        i = self.rr % len(self.targets)
        self.rr += 1
        self._staged[i].append(job)
        self.jobs += 1
        return i

    def flush(self) -> list:
        """Transfer staged jobs; returns jobs whose target queue was closed."""
        dropped = []
        for i, staged in enumerate(self._staged):
            if staged:
                self._staged[i] = []
                try:
                    batch_transfer(staged, self.targets[i])
                    self.batches += 1
                except QueueClosed:
                    dropped.extend(staged)
        return dropped


class ServerConnection(Connection):
    """Connection plus the bookkeeping that keeps responses in request order.

    ``next_seq`` is stamped by the owner network thread; jobs may finish on
    different payload threads, so completed-but-early jobs wait in
    ``ready`` until every earlier one has been executed and written.
    """

    def __init__(self, sock, owner=0, value_cap=DEFAULT_VALUE_CAP):
        super().__init__(sock, owner, value_cap)
        self.next_seq = 0
        self.next_exec = 0
        self.ready = {}
        self.executing = False
        self.exec_lock = threading.Lock()
        self.interest = 0


def execute(store: Store, raw: bytes) -> bytes:
    """Payload work for one frame: parse, run the store operation, encode."""
    op, key, value = parse_request(raw)
    try:
        if op == Op.GET:
            if not key or value:
                return _BAD_REQUEST
            v = store.get(key)
            return _NOT_FOUND if v is None else response_bytes(Status.OK, v)
        if op == Op.PUT:
            if not key:
                return _BAD_REQUEST
            store.put(key, value)
            return _OK_EMPTY
        if op == Op.DELETE:
            if not key or value:
                return _BAD_REQUEST
            return _OK_EMPTY if store.delete(key) == "deleted" else _NOT_FOUND
        if op == Op.PING:
            return _BAD_REQUEST if key or value else _OK_EMPTY
    except StoreError:
        return _SERVER_ERROR
    return _BAD_REQUEST


_LISTENER = object()


class NetworkWorker:
    """Event loop owning a set of connections.

    The accept thread is also a NetworkWorker (``accepting=True``); under
    SPED and AMPED with no network threads it owns every connection.
    """

    role = "network"

    def __init__(self, server: "Server", index: int, accepting=False, owns_connections=True):
        self.server = server
        self.index = index
        self.accepting = accepting
        self.owns_connections = owns_connections
        self.loop = EventLoop()
        self.inbox = JobQueue(self.loop)
        self.conns: dict[int, ServerConnection] = {}
        topo = server.topology
        self.inline = topo.payload_inline
        self.dispatcher = None
        if owns_connections and not self.inline:
            self.dispatcher = RoundRobinDispatcher(
                [server.payload_workers[j].queue for j in topo.wiring[index]])
        self.thread_ident = None
        self.iterations = 0
        self.requests = 0
        self.inline_requests = 0
        self.accepted = 0
        self.drained_bytes = 0
        self.drain_events = 0
        self.closed_conns = 0
        self.quiesced = False
        self._next_owner = 0
        self._timers = []

    @property
    def role_name(self):
        return "accept" if self.accepting else "network"

    # -- connection bookkeeping ------------------------------------------
    def _set_interest(self, conn: ServerConnection, events: int):
        if conn.interest == events or conn.closed:
            return
        if not conn.interest:
            self.loop.register(conn.sock, events, conn)
        elif not events:
            self.loop.unregister(conn.sock)
        else:
            self.loop.modify(conn.sock, events, conn)
        conn.interest = events

    def adopt(self, conn: ServerConnection):
        self.conns[conn.conn_id] = conn
        if self.quiesced:
            conn.closing = True
            self.close_conn(conn)
            return
        self._set_interest(conn, READ)

    def close_conn(self, conn: ServerConnection):
        if conn.conn_id not in self.conns:
            return
        del self.conns[conn.conn_id]
        conn.closing = True
        self._set_interest(conn, 0)
        conn.close()
        self.closed_conns += 1
        self.server._forget(conn)

    def _arm_write(self, conn: ServerConnection):
        """Owner-thread backlog hook: start watching for writability."""
        self._set_interest(conn, conn.interest | WRITE)

    # -- event handlers --------------------------------------------------
    def _accept_ready(self):
        server = self.server
        while True:
            try:
                sock, _ = server.listener.accept()
            except (BlockingIOError, InterruptedError):
                return
            except OSError as e:
                log.warning("accept failed: %s", e)
                return
            server._accept_idents.add(threading.get_ident())
            self.accepted += 1
            if server.sndbuf:
                sock.setsockopt(netio.socket.SOL_SOCKET, netio.socket.SO_SNDBUF, server.sndbuf)
            owner = server.network_owners[self._next_owner % len(server.network_owners)]
            self._next_owner += 1
            conn = ServerConnection(sock, owner.index, server.value_cap)
            server._remember(conn)
            if owner is self:
                self.adopt(conn)
            else:
                try:
                    owner.inbox.put(("new", conn))
                except QueueClosed:
                    conn.close()
                    server._forget(conn)

    def _readable(self, conn: ServerConnection):
        try:
            data = netio.read_available(conn)
        except (PeerClosed, OSError):
            self.close_conn(conn)
            return
        if not data or conn.closing:
            return
        try:
            frames = split_requests(conn.decoder, data)
        except ProtocolError as e:
            log.info("closing connection %d: %s", conn.conn_id, e)
            self.close_conn(conn)
            return
        if not frames:
            return
        self.requests += len(frames)
        if self.inline:
            store = self.server.store
            if len(frames) == 1:
                out = execute(store, frames[0])
            else:
                out = b"".join([execute(store, raw) for raw in frames])
            self.inline_requests += len(frames)
            try:
                netio.write_or_queue(conn, out, self._arm_write)
            except (PeerClosed, OSError):
                self.close_conn(conn)
        else:
            seq = conn.next_seq
            dispatch = self.dispatcher.dispatch
            for raw in frames:
                dispatch(Job(conn, seq, raw, self.index))
                seq += 1
            conn.next_seq = seq

    def _writable(self, conn: ServerConnection):
        before = len(conn.pending_write)
        try:
            done = netio.drain_pending(conn)
        except (PeerClosed, OSError):
            self.close_conn(conn)
            return
        self.drained_bytes += before - len(conn.pending_write)
        self.drain_events += 1
        if done:
            # later backlog re-arms through a fresh handoff
            self._set_interest(conn, conn.interest & ~WRITE)

    def _handle_inbox(self):
        for kind, conn in self.inbox.drain():
            if kind == "handoff":
                if conn.conn_id in self.conns and not conn.closed:
                    self.server._count("handoffs_received")
                    self._set_interest(conn, conn.interest | WRITE)
            elif kind == "new":
                self.adopt(conn)
            elif kind == "close":
                if conn.conn_id in self.conns:
                    self.close_conn(conn)

    def _flush_dispatch(self):
        if self.dispatcher is not None:
            for job in self.dispatcher.flush():
                if job.conn.conn_id in self.conns:
                    self.close_conn(job.conn)

    def add_timer(self, interval: float, fn):
        self._timers.append([interval, time.monotonic() + interval, fn])

    def _poll_timeout(self):
        if not self._timers:
            return None
        now = time.monotonic()
        return max(0.0, min(t[1] for t in self._timers) - now)

    def _run_timers(self):
        now = time.monotonic()
        for t in self._timers:
            if now >= t[1]:
                t[1] = now + t[0]
                t[2]()

    # -- main loop -------------------------------------------------------
    def run(self):
        self.thread_ident = threading.get_ident()
        server = self.server
        server._register_thread(self.role_name, self)
        if self.accepting:
            server.listener.setblocking(False)
            self.loop.register(server.listener, READ, _LISTENER)
        stopping = server._stopping
        try:
            while not stopping.is_set():
                self.iterations += 1
                for token, mask in self.loop.poll(self._poll_timeout()):
                    if token is _LISTENER:
                        self._accept_ready()
                        continue
                    if mask & READ:
                        self._readable(token)
                    if mask & WRITE and not token.closed:
                        self._writable(token)
                self._handle_inbox()
                self._flush_dispatch()
                if self._timers:
                    self._run_timers()
            self._shutdown_phase()
        except Exception:
            log.exception("%s thread %d crashed", self.role_name, self.index)
            server._crashed = True
            raise
        finally:
            server._thread_done(self)

    def _shutdown_phase(self):
        server = self.server
        if self.accepting:
            self.loop.unregister(server.listener)
            server._close_listener()
        # stop reading; whatever was already decoded still gets answered
        self._flush_dispatch()
        self.quiesced = True
        for conn in list(self.conns.values()):
            self._set_interest(conn, WRITE if conn.drain_armed else 0)
        server._net_quiesced()
        deadline = server._deadline
        while time.monotonic() < deadline:
            payload_done = server._payload_done.is_set()
            for token, mask in self.loop.poll(0.01):
                if token is not _LISTENER and mask & WRITE and not token.closed:
                    self._writable(token)
            self._handle_inbox()
            if payload_done and not any(c.pending_write for c in self.conns.values()) \
                    and not len(self.inbox):
                break
        for conn in list(self.conns.values()):
            self.close_conn(conn)
        self.inbox.close()
        self.loop.close()


class PayloadWorker:
    """Consumes jobs, runs store operations and sends responses directly."""

    role_name = "payload"

    def __init__(self, server: "Server", index: int):
        self.server = server
        self.index = index
        self.loop = EventLoop()
        self.queue = JobQueue(self.loop)
        self.thread_ident = None
        self.iterations = 0
        self.executed = 0
        self.handoffs = 0
        # (producer network index) -> jobs dequeued by this worker
        self.consumed_from = collections.Counter()

    def _handoff(self, conn):
        """Backlog hook: the owner network thread finishes the send."""
        self.handoffs += 1
        owner = self.server.network_owners[conn.owner]
        try:
            owner.inbox.put(("handoff", conn))
        except QueueClosed:
            pass

    def _request_close(self, conn):
        conn.closing = True
        owner = self.server.network_owners[conn.owner]
        try:
            owner.inbox.put(("close", conn))
        except QueueClosed:
            conn.close()

    def _process(self, job: Job):
        conn = job.conn
        if conn.closing:
            return
        lock = conn.exec_lock
        with lock:
            conn.ready[job.seq] = job
            if conn.executing:
                return
            conn.executing = True
        store = self.server.store
        while True:
            batch = []
            with lock:
                ready = conn.ready
                nxt = conn.next_exec
                while nxt in ready:
                    batch.append(ready.pop(nxt))
                    nxt += 1
                conn.next_exec = nxt
                if not batch:
                    conn.executing = False
                    return
            if conn.closing:
                continue
            out = b"".join([execute(store, j.raw) for j in batch])
            self.executed += len(batch)
            try:
                netio.write_or_queue(conn, out, self._handoff)
            except (PeerClosed, OSError):
                self._request_close(conn)

    def run(self):
        self.thread_ident = threading.get_ident()
        server = self.server
        server._register_thread("payload", self)
        stopping = server._stopping
        try:
            while True:
                self.iterations += 1
                self.loop.poll(0.05 if stopping.is_set() else None)
                jobs = self.queue.drain()
                if jobs:
                    counts = self.consumed_from
                    for job in jobs:
                        counts[job.producer] += 1
                        self._process(job)
                elif stopping.is_set() and server._all_net_quiesced.is_set() and not len(self.queue):
                    break
        except Exception:
            log.exception("payload thread %d crashed", self.index)
            server._crashed = True
            raise
        finally:
            self.queue.close()
            self.loop.close()
            server._thread_done(self)


class Server:
    """A running cache server for one :class:`ModelConfig`.

    ``start()`` binds and spawns the worker threads. With
    ``accept_in_thread=False`` the caller must then invoke
    :meth:`run_accept_loop`, which turns the calling thread into the
    accept thread (the CLI does this).
    """

    def __init__(self, cfg: ModelConfig, endpoint, store: Store | None = None, *,
                 idle_timeout: float = netio.DEFAULT_IDLE_TIMEOUT,
                 sweep_interval: float = netio.DEFAULT_SWEEP_INTERVAL,
                 value_cap: int = DEFAULT_VALUE_CAP, sndbuf: int | None = None):
        self.config = cfg
        self.topology = build_topology(cfg)
        if isinstance(endpoint, str):
            endpoint = netio.parse_endpoint(endpoint)
        self.endpoint = endpoint
        self.store = store if store is not None else Store(value_cap=value_cap)
        self.idle_timeout = idle_timeout
        self.sweep_interval = sweep_interval
        self.value_cap = value_cap
        self.sndbuf = sndbuf
        self.listener = None
        self.payload_workers: list[PayloadWorker] = []
        self.network_workers: list[NetworkWorker] = []
        self.network_owners: list[NetworkWorker] = []
        self.accept_worker: NetworkWorker | None = None
        self._threads: list[threading.Thread] = []
        self._census: list[tuple[str, int]] = []
        self._census_lock = threading.Lock()
        self._accept_idents: set[int] = set()
        self._registry: dict[int, ServerConnection] = {}
        self._registry_lock = threading.Lock()
        self._counters = collections.Counter()
        self._counter_lock = threading.Lock()
        self._stopping = threading.Event()
        self._all_net_quiesced = threading.Event()
        self._payload_done = threading.Event()
        self._stopped = threading.Event()
        self._quiesced_count = 0
        self._payload_alive = 0
        self._alive = 0
        self._deadline = float("inf")
        self._shutdown_lock = threading.Lock()
        self._crashed = False
        self._listener_closed = False
        self.started = False

    # -- lifecycle -------------------------------------------------------
    def start(self, accept_in_thread: bool = True) -> "Server":
        if self.started:
            raise RuntimeError("server already started")
        self.listener = netio.listen(self.endpoint)
        self.endpoint = netio.bound_endpoint(self.listener, self.endpoint)
        topo = self.topology
        self.payload_workers = [PayloadWorker(self, i) for i in range(topo.payload_threads)]
        self._payload_alive = len(self.payload_workers)
        if not self.payload_workers:
            self._payload_done.set()
        if topo.accept_runs_network:
            self.accept_worker = NetworkWorker(self, 0, accepting=True, owns_connections=True)
            self.network_owners = [self.accept_worker]
        else:
            self.network_workers = [NetworkWorker(self, i) for i in range(topo.network_threads)]
            self.network_owners = list(self.network_workers)
            self.accept_worker = NetworkWorker(self, -1, accepting=True, owns_connections=False)
        self.accept_worker.add_timer(self.sweep_interval, self.sweep_idle)
        workers = [*self.payload_workers, *self.network_workers]
        self._alive = len(workers) + 1
        for w in workers:
            name = f"{w.role_name}-{w.index}"
            t = threading.Thread(target=w.run, name=name, daemon=True)
            self._threads.append(t)
        for t in self._threads:
            t.start()
        self.started = True
        if accept_in_thread:
            t = threading.Thread(target=self.run_accept_loop, name="accept", daemon=True)
            self._threads.append(t)
            t.start()
        log.info("serving %s on %s: %s", self.config.label, self.endpoint, topo.describe())
        return self

    def run_accept_loop(self):
        try:
            self.accept_worker.run()
        finally:
            for t in self._threads:
                if t is not threading.current_thread():
                    t.join(max(0.0, self._deadline - time.monotonic()) + 0.5)
            self._stopped.set()

    def add_timer(self, interval: float, fn):
        """Run ``fn`` on the accept thread every ``interval`` seconds."""
        self.accept_worker.add_timer(interval, fn)

    def shutdown(self, timeout: float = 1.0) -> None:
        """Stop accepting, answer what was already read, close, join.

        Idempotent; returns once the accept thread has finished (or the
        deadline passed).
        """
        with self._shutdown_lock:
            if not self._stopping.is_set():
                self._deadline = time.monotonic() + timeout
                self._stopping.set()
                for w in [self.accept_worker, *self.network_workers, *self.payload_workers]:
                    if w is not None and not w.loop.closed:
                        w.loop.wakeup()
        if self.started and threading.current_thread() not in self._threads \
                and self.accept_worker.thread_ident != threading.get_ident():
            self._stopped.wait(timeout + 1.0)

    def request_shutdown(self, timeout: float = 1.0) -> None:
        """Async-signal friendly variant: flag the stop and return."""
        if not self._stopping.is_set():
            self._deadline = time.monotonic() + timeout
            self._stopping.set()
            for w in [self.accept_worker, *self.network_workers, *self.payload_workers]:
                if w is not None and not w.loop.closed:
                    w.loop.wakeup()

    def wait(self, timeout: float | None = None) -> bool:
        return self._stopped.wait(timeout)

    @property
    def running(self) -> bool:
        return self.started and not self._stopped.is_set()

    def __enter__(self):
        if not self.started:
            self.start()
        return self

    def __exit__(self, *exc):
        self.shutdown()

    def _close_listener(self):
        if self._listener_closed:
            return
        self._listener_closed = True
        try:
            self.listener.close()
        finally:
            if self.endpoint.kind == "unix":
                try:
                    os.unlink(self.endpoint.path)
                except FileNotFoundError:
                    pass

    def _net_quiesced(self):
        with self._census_lock:
            self._quiesced_count += 1
            if self._quiesced_count >= len(self.network_owners) + (0 if self.topology.accept_runs_network else 1):
                self._all_net_quiesced.set()
        for w in self.payload_workers:
            if not w.loop.closed:
                w.loop.wakeup()

    def _thread_done(self, worker):
        with self._census_lock:
            self._alive -= 1
            if isinstance(worker, PayloadWorker):
                self._payload_alive -= 1
                if self._payload_alive <= 0:
                    self._payload_done.set()

    def _register_thread(self, role: str, worker):
        with self._census_lock:
            self._census.append((role, threading.get_ident()))

    # -- connection registry and expiry ----------------------------------
    def _remember(self, conn):
        with self._registry_lock:
            self._registry[conn.conn_id] = conn

    def _forget(self, conn):
        with self._registry_lock:
            self._registry.pop(conn.conn_id, None)

    def connections(self) -> list[ServerConnection]:
        with self._registry_lock:
            return list(self._registry.values())

    def _route_close(self, conn):
        owner = self.network_owners[conn.owner]
        if owner is self.accept_worker:
            owner.close_conn(conn)
        else:
            try:
                owner.inbox.put(("close", conn))
            except QueueClosed:
                pass

    def sweep_idle(self, now: float | None = None) -> list[int]:
        """Expire idle connections; runs on the accept thread."""
        now = time.monotonic() if now is None else now
        closed = netio.expire_idle(self.connections(), now, self.idle_timeout, self._route_close)
        if closed:
            self._count("expired", len(closed))
        return closed

    # -- instrumentation -------------------------------------------------
    def _count(self, name, n=1):
        with self._counter_lock:
            self._counters[name] += n

    def census(self) -> dict:
        """Threads that actually ran, by role."""
        with self._census_lock:
            roles = collections.Counter(role for role, _ in self._census)
            idents = {ident for _, ident in self._census}
        return {"accept": roles["accept"], "network": roles["network"],
                "payload": roles["payload"], "total": len(idents)}

    def accept_threads(self) -> int:
        return len(self._accept_idents)

    def counters(self) -> dict:
        owners = self.network_owners
        nets = [w for w in [self.accept_worker, *self.network_workers] if w is not None]
        out = dict(self._counters)
        out.update(
            requests=sum(w.requests for w in owners),
            inline_requests=sum(w.inline_requests for w in owners),
            executed=sum(w.executed for w in self.payload_workers),
            jobs_dispatched=sum(w.dispatcher.jobs for w in owners if w.dispatcher),
            queue_transfers=sum(w.dispatcher.batches for w in owners if w.dispatcher),
            queue_producer_acquisitions=sum(w.queue.producer_acquisitions for w in self.payload_workers),
            handoffs=sum(w.handoffs for w in self.payload_workers),
            drained_bytes=sum(w.drained_bytes for w in owners),
            connections=len(self._registry),
            accepted=self.accept_worker.accepted if self.accept_worker else 0,
            closed=sum(w.closed_conns for w in nets),
            records=len(self.store),
        )
        for w in nets:
            out[f"loop_{w.role_name}_{w.index}"] = w.iterations
        for w in self.payload_workers:
            out[f"loop_payload_{w.index}"] = w.iterations
        return out

    def affinity(self) -> dict[tuple[int, int], int]:
        """(producer network index, consuming payload index) -> job count."""
        out = {}
        for w in self.payload_workers:
            for producer, n in w.consumed_from.items():
                out[(producer, w.index)] = n
        return out


def serve(cfg: ModelConfig, endpoint, store: Store | None = None, **kwargs) -> Server:
    """Start a server with its accept loop on a background thread."""
    return Server(cfg, endpoint, store, **kwargs).start()
