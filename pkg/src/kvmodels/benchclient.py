"""Closed-loop benchmark client.

Four client threads split the connections round-robin; each thread runs
its own event loop and every connection keeps exactly one request in
flight. Responses are checked against the generated dataset.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import math
import random
import selectors
import statistics
import sys
import threading
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import netio
from .protocol import (
    DecodeBuffer, Op, RequestFrame, Status, decode_responses, encode_request,
)

CLIENT_THREADS = 4
ROUND_TO = 5000


class BenchError(RuntimeError):
    """A run that cannot be trusted: dropped connection or wrong payload."""


@dataclass(frozen=True)
class WorkloadSpec:
    n_records: int = 30_000
    size_min: int = 10
    size_max: int = 1000
    seed: int = 1
    get_fraction: float = 0.9

    def __post_init__(self):
        if self.n_records < 1:
            raise ValueError("n_records must be positive")
        if not 1 <= self.size_min <= self.size_max:
            raise ValueError("need 1 <= size_min <= size_max")
        if not 0.0 <= self.get_fraction <= 1.0:
            raise ValueError("get_fraction must lie in [0, 1]")


@dataclass(frozen=True)
class Record:
    key: bytes
    value: bytes


def record_key(i: int, n_records: int) -> bytes:
    width = max(6, len(str(n_records - 1)))
    return b"key:%0*d" % (width, i)


def generate_dataset(spec: WorkloadSpec) -> list[Record]:
    """Records whose value sizes are log-uniform on [size_min, size_max]."""
    rng = np.random.default_rng(spec.seed)
    sizes = np.rint(np.exp(rng.uniform(math.log(spec.size_min), math.log(spec.size_max),
                                       spec.n_records))).astype(np.int64)
    np.clip(sizes, spec.size_min, spec.size_max, out=sizes)
    blob = rng.integers(0, 256, int(sizes.sum()), dtype=np.uint8).tobytes()
    out = []
    pos = 0
    for i, n in enumerate(sizes.tolist()):
        out.append(Record(record_key(i, spec.n_records), blob[pos:pos + n]))
        pos += n
    return out


def _roundtrip_batch(sock, frames: list[bytes], n_expected: int, buf: DecodeBuffer):
    sock.sendall(b"".join(frames))
    out = []
    while len(out) < n_expected:
        data = sock.recv(1 << 20)
        if not data:
            raise BenchError("server closed connection")
        out.extend(decode_responses(buf, data))
    return out


def preload(endpoint, dataset: list[Record], batch: int = 512, check_fraction: float = 0.01,
            seed: int = 0) -> None:
    """PUT every record (pipelined), then GET-verify a sample."""
    sock = netio.connect(endpoint, timeout=30.0)
    buf = DecodeBuffer()
    try:
        for start in range(0, len(dataset), batch):
            chunk = dataset[start:start + batch]
            frames = [encode_request(RequestFrame(Op.PUT, r.key, r.value)) for r in chunk]
            for resp in _roundtrip_batch(sock, frames, len(frames), buf):
                if resp.status != Status.OK:
                    raise BenchError(f"preload PUT failed with {resp.status.name}")
        n_check = max(1, int(len(dataset) * check_fraction))
        sample = random.Random(seed).sample(range(len(dataset)), min(n_check, len(dataset)))
        frames = [encode_request(RequestFrame(Op.GET, dataset[i].key)) for i in sample]
        for i, resp in zip(sample, _roundtrip_batch(sock, frames, len(frames), buf)):
            if resp.status != Status.OK or resp.value != dataset[i].value:
                raise BenchError(f"verification mismatch for key {dataset[i].key.decode()}")
    finally:
        sock.close()


class _ClientConn:
    __slots__ = ("sock", "rng", "buf", "expect", "done", "busy", "idx")

    def __init__(self, sock, idx, seed):
        self.sock = sock
        self.idx = idx
        self.rng = random.Random(seed * 1_000_003 + idx)
        self.buf = DecodeBuffer()
        self.expect = None
        self.done = 0
        self.busy = False


def request_stream(spec: WorkloadSpec, conn_index: int, count: int):
    """The (op, record index) sequence a given connection issues."""
    rng = random.Random(spec.seed * 1_000_003 + conn_index)
    n = spec.n_records
    gf = spec.get_fraction
    return [(Op.GET if rng.random() < gf else Op.PUT, rng.randrange(n)) for _ in range(count)]


@dataclass
class EncodedDataset:
    """Request frames for every record, encoded once and shared by all runs."""
    records: list[Record]
    gets: list[bytes]
    puts: list[bytes]

    @classmethod
    def build(cls, dataset: list[Record]) -> "EncodedDataset":
        return cls(dataset,
                   [encode_request(RequestFrame(Op.GET, r.key)) for r in dataset],
                   [encode_request(RequestFrame(Op.PUT, r.key, r.value)) for r in dataset])


def _client_thread(conns, enc, spec, start_evt, deadline_box, result, errors):
    sel = selectors.DefaultSelector()
    dataset = enc.records
    n = len(dataset)
    gf = spec.get_fraction
    get_frames = enc.gets
    put_frames = enc.puts
    ok_empty = (Status.OK, b"")

    def issue(c):
        r = c.rng
        is_get = r.random() < gf
        i = r.randrange(n)
        if is_get:
            frame = get_frames[i]
            c.expect = (Status.OK, dataset[i].value)
        else:
            frame = put_frames[i]
            c.expect = ok_empty
        c.sock.sendall(frame)
        c.busy = True

    try:
        for c in conns:
            c.sock.setblocking(True)
            sel.register(c.sock, selectors.EVENT_READ, c)
        start_evt.wait()
        deadline = deadline_box[0]
        for c in conns:
            issue(c)
        active = len(conns)
        last = time.perf_counter()
        while active:
            for key, _ in sel.select(1.0):
                c = key.data
                data = c.sock.recv(1 << 16)
                if not data:
                    raise BenchError(f"connection {c.idx} dropped mid-run")
                frames = decode_responses(c.buf, data)
                if not frames:
                    continue
                if len(frames) > 1:
                    raise BenchError("more than one response outstanding")
                f = frames[0]
                if (f.status, f.value) != c.expect:
                    raise BenchError(f"connection {c.idx}: unexpected response {f.status.name}")
                c.done += 1
                c.busy = False
                last = time.perf_counter()
                if last < deadline:
                    issue(c)
                else:
                    active -= 1
            if time.perf_counter() > deadline + 30:
                raise BenchError("responses stalled past the deadline")
        result.append((sum(c.done for c in conns), last))
    except Exception as e:  # reported to the coordinating thread
        errors.append(e)
    finally:
        sel.close()


@dataclass
class Measurement:
    transactions: int
    elapsed: float

    @property
    def tps(self) -> float:
        return self.transactions / self.elapsed if self.elapsed > 0 else 0.0


def run_measurement(endpoint, clients: int, duration: float, spec: WorkloadSpec,
                    dataset: list[Record] | EncodedDataset | None = None,
                    threads: int = CLIENT_THREADS) -> Measurement:
    """One closed-loop run; returns completed transactions and elapsed time."""
    if clients < 1:
        raise ValueError("clients must be at least 1")
    if duration <= 0:
        raise ValueError("duration must be positive")
    if dataset is None:
        dataset = generate_dataset(spec)
    enc = dataset if isinstance(dataset, EncodedDataset) else EncodedDataset.build(dataset)
    conns = [_ClientConn(netio.connect(endpoint, timeout=10.0), i, spec.seed) for i in range(clients)]
    groups = [conns[t::threads] for t in range(threads)]
    start_evt = threading.Event()
    deadline_box = [0.0]
    results, errors = [], []
    workers = [threading.Thread(target=_client_thread, name=f"bench-{t}",
                                args=(g, enc, spec, start_evt, deadline_box, results, errors),
                                daemon=True)
               for t, g in enumerate(groups) if g]
    try:
        for w in workers:
            w.start()
        t0 = time.perf_counter()
        deadline_box[0] = t0 + duration
        start_evt.set()
        for w in workers:
            w.join(duration + 60)
        if errors:
            raise BenchError(f"run invalid: {errors[0]}") from errors[0]
        if len(results) != len(workers):
            raise BenchError("client thread did not finish")
        total = sum(r[0] for r in results)
        end = max(r[1] for r in results)
        return Measurement(total, end - t0)
    finally:
        for c in conns:
            c.sock.close()


@dataclass
class BenchRunResult:
    model: str
    n_net: int
    n_payload: int
    clients: int
    duration: float
    transactions: int
    tps_mean: float
    tps_std: float
    tps_rounded: int
    runs: list[float] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self))


def round_tps(tps: float, step: int = ROUND_TO) -> int:
    """Nearest multiple of ``step``; halves round up."""
    return int(math.floor(tps / step + 0.5)) * step


def summarize(per_run_tps: list[float], *, model="", n_net=0, n_payload=0, clients=0,
              duration=0.0, transactions=0) -> BenchRunResult:
    mean = statistics.fmean(per_run_tps)
    std = statistics.stdev(per_run_tps) if len(per_run_tps) > 1 else 0.0
    return BenchRunResult(model, n_net, n_payload, clients, duration, transactions,
                          mean, std, round_tps(mean), list(per_run_tps))


def run_series(endpoint, clients: int, duration: float, spec: WorkloadSpec, repeats: int = 5,
               warmups: int = 1, dataset=None, model="", n_net=0, n_payload=0) -> BenchRunResult:
    """Warm-up runs (discarded) followed by ``repeats`` measured runs."""
    if repeats < 1:
        raise ValueError("repeats must be at least 1")
    if dataset is None:
        dataset = generate_dataset(spec)
    if not isinstance(dataset, EncodedDataset):
        dataset = EncodedDataset.build(dataset)
    for _ in range(warmups):
        run_measurement(endpoint, clients, duration, spec, dataset)
    runs = [run_measurement(endpoint, clients, duration, spec, dataset) for _ in range(repeats)]
    return summarize([m.tps for m in runs], model=model, n_net=n_net, n_payload=n_payload,
                     clients=clients, duration=duration,
                     transactions=sum(m.transactions for m in runs))


def _csv_row(res: BenchRunResult) -> str:
    out = io.StringIO()
    csv.writer(out).writerow([res.model, res.n_net, res.n_payload, res.clients, res.duration,
                              res.transactions, f"{res.tps_mean:.1f}", f"{res.tps_std:.1f}",
                              res.tps_rounded])
    return out.getvalue().rstrip("\r\n")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kvmodels-bench", description=__doc__.splitlines()[0])
    p.add_argument("--endpoint", default="unix:/tmp/kvmodels.sock")
    p.add_argument("--clients", type=int, default=40)
    p.add_argument("--duration", type=float, default=10.0)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--warmups", type=int, default=1)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--get-fraction", type=float, default=0.9)
    p.add_argument("--records", type=int, default=30_000)
    p.add_argument("--size-min", type=int, default=10)
    p.add_argument("--size-max", type=int, default=1000)
    p.add_argument("--preload-only", action="store_true")
    p.add_argument("--no-preload", action="store_true", help="assume the dataset is already loaded")
    p.add_argument("--model", default="", help="label recorded in the output")
    p.add_argument("--output", choices=("json", "csv-row"), default="json")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        spec = WorkloadSpec(args.records, args.size_min, args.size_max, args.seed, args.get_fraction)
        endpoint = netio.parse_endpoint(args.endpoint)
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    dataset = generate_dataset(spec)
    try:
        if not args.no_preload:
            preload(endpoint, dataset)
        if args.preload_only:
            return 0
        res = run_series(endpoint, args.clients, args.duration, spec, args.repeats, args.warmups,
                         dataset, model=args.model)
    except (BenchError, OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    print(res.to_json() if args.output == "json" else _csv_row(res))
    return 0


if __name__ == "__main__":
    sys.exit(main())
