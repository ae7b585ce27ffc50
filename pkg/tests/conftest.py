import shutil
import socket
import tempfile

import pytest

from kvmodels import netio
from kvmodels.protocol import DecodeBuffer, decode_responses


@pytest.fixture
def sockdir():
    # AF_UNIX paths are capped near 108 bytes; pytest's tmp_path can exceed that
    d = tempfile.mkdtemp(prefix="kvt")
    yield d
    shutil.rmtree(d, ignore_errors=True)


@pytest.fixture
def endpoint(sockdir):
    return netio.Endpoint("unix", path=f"{sockdir}/s.sock")


def read_responses(sock: socket.socket, n: int, buf: DecodeBuffer | None = None, timeout=10.0):
    buf = buf or DecodeBuffer()
    sock.settimeout(timeout)
    out = []
    while len(out) < n:
        data = sock.recv(1 << 20)
        if not data:
            raise ConnectionError(f"EOF after {len(out)} of {n} responses")
        out.extend(decode_responses(buf, data))
    return out


ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)


class Client:
    """Blocking test client speaking the wire protocol."""

    def __init__(self, endpoint, timeout=10.0):
        self.sock = netio.connect(endpoint, timeout=timeout)
        self.buf = DecodeBuffer()

    def send(self, *frames):
        from kvmodels.protocol import encode_request
        self.sock.sendall(b"".join(encode_request(f) for f in frames))

    def recv(self, n):
        return read_responses(self.sock, n, self.buf)

    def call(self, *frames):
        self.send(*frames)
        return self.recv(len(frames))

    def close(self):
        self.sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def wait_until(pred, timeout=5.0, interval=0.005):
    import time
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if pred():
            return True
        time.sleep(interval)
    return pred()
