"""Non-blocking socket layer driven by readiness events.

An :class:`EventLoop` wraps the platform selector (epoll/kqueue/poll) with
level-triggered semantics plus a self-pipe so other threads can wake it.
"""
from __future__ import annotations

import errno
import itertools
import os
import selectors
import socket
import threading
import time
from dataclasses import dataclass

from .protocol import DecodeBuffer, DEFAULT_VALUE_CAP

READ = selectors.EVENT_READ
WRITE = selectors.EVENT_WRITE
RECV_SIZE = 256 * 1024

DEFAULT_IDLE_TIMEOUT = 60.0
DEFAULT_SWEEP_INTERVAL = 5.0


class LoopClosed(RuntimeError):
    pass


class PeerClosed(ConnectionError):
    pass


@dataclass(frozen=True)
class Endpoint:
    kind: str  # "unix" or "tcp"
    path: str = ""
    host: str = ""
    port: int = 0

    def __str__(self):
        if self.kind == "unix":
            return f"unix:{self.path}"
        return f"tcp:{self.host}:{self.port}"

    def family(self):
        return socket.AF_UNIX if self.kind == "unix" else socket.AF_INET

    def address(self):
        return self.path if self.kind == "unix" else (self.host, self.port)


def parse_endpoint(text: str) -> Endpoint:
    """Parse ``unix:<path>`` or ``tcp:<host>:<port>``."""
    if text.startswith("unix:"):
        path = text[5:]
        if not path:
            raise ValueError("unix endpoint needs a path")
        return Endpoint("unix", path=path)
    if text.startswith("tcp:"):
        host, sep, port = text[4:].rpartition(":")
        if not sep or not host:
            raise ValueError(f"bad tcp endpoint {text!r}, expected tcp:<host>:<port>")
        return Endpoint("tcp", host=host, port=int(port))
    raise ValueError(f"bad endpoint {text!r}, expected unix:<path> or tcp:<host>:<port>")


def listen(endpoint: Endpoint | str, backlog: int = 1024) -> socket.socket:
    """Bind a non-blocking listener.

    An existing unix socket path is never unlinked; binding over it fails
    with ``EADDRINUSE``. For ``tcp`` with port 0 the assigned port is
    available from ``getsockname()``.
    """
    if isinstance(endpoint, str):
        endpoint = parse_endpoint(endpoint)
    sock = socket.socket(endpoint.family(), socket.SOCK_STREAM)
    try:
        if endpoint.kind == "tcp":
            sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        sock.bind(endpoint.address())
        sock.listen(backlog)
        sock.setblocking(False)
    except OSError:
        sock.close()
        raise
    return sock


def bound_endpoint(sock: socket.socket, endpoint: Endpoint) -> Endpoint:
    if endpoint.kind == "tcp":
        host, port = sock.getsockname()[:2]
        return Endpoint("tcp", host=host, port=port)
    return endpoint


def connect(endpoint: Endpoint | str, timeout: float = 5.0) -> socket.socket:
    if isinstance(endpoint, str):
        endpoint = parse_endpoint(endpoint)
    sock = socket.socket(endpoint.family(), socket.SOCK_STREAM)
    sock.settimeout(timeout)
    try:
        sock.connect(endpoint.address())
    except OSError:
        sock.close()
        raise
    if endpoint.kind == "tcp":
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    return sock


class EventLoop:
    """Per-thread readiness multiplexer with a cross-thread wakeup channel."""

    def __init__(self):
        self._sel = selectors.DefaultSelector()
        self._rfd, self._wfd = os.pipe()
        os.set_blocking(self._rfd, False)
        os.set_blocking(self._wfd, False)
        self._sel.register(self._rfd, READ, None)
        self._wake_pending = False
        self.closed = False
        self.wakeups_sent = 0
        self.wakeups_received = 0

    def register(self, fileobj, events: int, token) -> None:
        self._sel.register(fileobj, events, token)

    def modify(self, fileobj, events: int, token) -> None:
        self._sel.modify(fileobj, events, token)

    def unregister(self, fileobj) -> None:
        try:
            self._sel.unregister(fileobj)
        except (KeyError, ValueError):
            pass

    def interest(self, fileobj) -> int:
        try:
            return self._sel.get_key(fileobj).events
        except (KeyError, ValueError):
            return 0

    def registered(self) -> int:
        return len(self._sel.get_map()) - 1

    def wakeup(self) -> None:
        """Signal the loop from any thread; redundant signals are coalesced."""
        self.wakeups_sent += 1
        if self._wake_pending:
            return
        self._wake_pending = True
        try:
            os.write(self._wfd, b"\0")
        except (BlockingIOError, OSError):
            pass

    def poll(self, timeout: float | None = None) -> list[tuple[object, int]]:
        """Block until IO is ready, a wakeup arrives, or ``timeout`` elapses.

        Returns ``(token, mask)`` pairs for ready registrations; a wakeup
        alone returns an empty list.
        """
        if self.closed:
            raise LoopClosed("event loop is closed")
        ready = self._sel.select(timeout)
        out = []
        for key, mask in ready:
            if key.fd == self._rfd:
                try:
                    while os.read(self._rfd, 4096):
                        pass
                except BlockingIOError:
                    pass
                # cleared only after draining, or a racing wakeup could be lost
                self._wake_pending = False
                self.wakeups_received += 1
            else:
                out.append((key.data, mask))
        return out

    def close(self) -> None:
        if self.closed:
            return
        self.closed = True
        self._sel.close()
        os.close(self._rfd)
        os.close(self._wfd)


_conn_ids = itertools.count(1)


class Connection:
    """Per-connection state.

    ``owner`` is fixed at accept time. ``write_lock`` is the connection's
    write-ordering right: every send attempt, drain and close holds it.
    """

    def __init__(self, sock: socket.socket, owner: int = 0, value_cap: int = DEFAULT_VALUE_CAP):
        sock.setblocking(False)
        self.sock = sock
        self.fd = sock.fileno()
        self.conn_id = next(_conn_ids)
        self.owner = owner
        self.decoder = DecodeBuffer(value_cap)
        self.pending_write = bytearray()
        self.last_activity = time.monotonic()
        self.closing = False
        self.closed = False
        self.drain_armed = False
        self.write_lock = threading.Lock()

    def __repr__(self):
        return f"<Connection {self.conn_id} owner={self.owner}>"

    def close(self) -> None:
        with self.write_lock:
            self._close_locked()

    def _close_locked(self):
        if not self.closed:
            self.closed = True
            self.closing = True
            self.pending_write.clear()
            try:
                self.sock.close()
            except OSError:
                pass


def read_available(conn: Connection) -> bytes:
    """Read everything the socket has right now.

    Raises :class:`PeerClosed` on EOF when no data was collected first;
    EOF after data is reported on the next call.
    """
    chunks = []
    recv = conn.sock.recv
    while True:
        try:
            data = recv(RECV_SIZE)
        except (BlockingIOError, InterruptedError):
            break
        except OSError as e:
            if e.errno in (errno.ECONNRESET, errno.EPIPE):
                if chunks:
                    break
                raise PeerClosed(str(e)) from e
            raise
        if not data:
            if chunks:
                break
            raise PeerClosed("peer closed the connection")
        chunks.append(data)
    if chunks:
        conn.last_activity = time.monotonic()
    return chunks[0] if len(chunks) == 1 else b"".join(chunks)


def _send_locked(conn: Connection) -> None:
    buf = conn.pending_write
    try:
        n = conn.sock.send(buf)
    except (BlockingIOError, InterruptedError):
        return
    except OSError as e:
        if e.errno in (errno.EPIPE, errno.ECONNRESET):
            raise PeerClosed(str(e)) from e
        raise
    del buf[:n]


def write_or_queue(conn: Connection, data: bytes, on_backlog=None) -> int:
    """Send ``data`` after any queued bytes; queue what the socket refuses.

    Returns the number of bytes left queued (0 means fully sent).
    ``on_backlog(conn)`` is invoked, outside the lock, when this call is the
    one that leaves unsent bytes behind with no drain scheduled yet; the
    caller must then arrange for the owner thread to watch for writability.
    """
    arm = False
    with conn.write_lock:
        if conn.closed:
            raise PeerClosed("connection closed")
        pending = conn.pending_write
        if pending:
            pending += data
            _send_locked(conn)
        else:
            try:
                n = conn.sock.send(data)
            except (BlockingIOError, InterruptedError):
                n = 0
            except OSError as e:
                if e.errno in (errno.EPIPE, errno.ECONNRESET):
                    raise PeerClosed(str(e)) from e
                raise
            if n == len(data):
                return 0
            pending += memoryview(data)[n:]
        queued = len(pending)
        if queued and not conn.drain_armed:
            conn.drain_armed = True
            arm = True
    if arm and on_backlog is not None:
        on_backlog(conn)
    return queued


def drain_pending(conn: Connection) -> bool:
    """Flush queued bytes; True once nothing is left (drain disarmed)."""
    with conn.write_lock:
        if conn.closed:
            conn.drain_armed = False
            return True
        if conn.pending_write:
            _send_locked(conn)
        if conn.pending_write:
            return False
        conn.drain_armed = False
        return True


def expire_idle(connections, now: float, idle_timeout: float, close=None) -> list[int]:
    """Close connections idle longer than ``idle_timeout`` with nothing queued.

    ``close(conn)`` performs the actual close (defaults to ``conn.close``);
    the server routes it to the owning network thread.
    """
    closed = []
    for conn in list(connections):
        if conn.closing or conn.closed:
            continue
        if now - conn.last_activity > idle_timeout and not conn.pending_write:
            conn.closing = True
            (close or Connection.close)(conn)
            closed.append(conn.conn_id)
    return closed
