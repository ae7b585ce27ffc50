"""Experiment orchestrator.

Runs a plan of (model config, client counts) cells strictly one after
another. Each cell gets a fresh server process: start, preload, warm up,
measure a series, stop. Results go to a CSV (the canonical artifact) from
which the tables and SVG charts are derived.

Plan file format (one directive per line, ``#`` starts a comment)::

    repeats = 5
    duration = 10
    warmups = 1
    seed = 1
    get_fraction = 0.9
    records = 30000
    size_min = 10
    size_max = 1000
    clients = 10 20 40 60 80 100 120 160 200
    # model  net  payload  [clients override]
    sped     0    0
    seda     2    4
    symped   2    0        40 80 120
"""
from __future__ import annotations

import argparse
import csv
import datetime as _dt
import json
import logging
import os
import subprocess
import sys
import tempfile
import time
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import netio
from .benchclient import BenchError, WorkloadSpec, generate_dataset, preload, run_series
from .engine import ConfigError, ModelConfig, ModelKind

log = logging.getLogger(__name__)

DEFAULT_CLIENTS = (10, 20, 40, 60, 80, 100, 120, 160, 200)
QUICK_CLIENTS = (40, 80, 120)
CSV_COLUMNS = ("model", "n_net", "n_payload", "clients", "duration_s", "repeats",
               "tps_mean", "tps_std", "tps_rounded", "status")
TPS_LABEL = "transactions/s (1 transaction = 1 request + 1 response = 2 network operations)"


@dataclass(frozen=True)
class Cell:
    config: ModelConfig
    clients: tuple[int, ...]


@dataclass
class ExperimentPlan:
    cells: list[Cell]
    repeats: int = 5
    warmups: int = 1
    duration: float = 10.0
    workload: WorkloadSpec = field(default_factory=WorkloadSpec)

    def __post_init__(self):
        for cell in self.cells:
            ModelConfig(cell.config.kind, cell.config.n_network, cell.config.n_payload)
            if not cell.clients:
                raise ValueError(f"{cell.config.label}: no client counts")
            if any(b <= a for a, b in zip(cell.clients, cell.clients[1:])) or cell.clients[0] < 1:
                raise ValueError(f"{cell.config.label}: client counts must be positive and strictly increasing")

    def n_cells(self) -> int:
        return sum(len(c.clients) for c in self.cells)


@dataclass
class Row:
    model: str
    n_net: int
    n_payload: int
    clients: int
    duration_s: float
    repeats: int
    tps_mean: float
    tps_std: float
    tps_rounded: int
    status: str = "ok"

    @property
    def kind(self) -> ModelKind:
        return ModelKind.parse(self.model)

    @property
    def ok(self) -> bool:
        return self.status == "ok"


@dataclass
class ResultTable:
    rows: list[Row] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def successful(self, kind: ModelKind | None = None) -> list[Row]:
        return [r for r in self.rows if r.ok and (kind is None or r.kind is kind)]


def host_cores() -> int:
    return os.cpu_count() or 1


def paper_grid(max_server_threads: int | None = None) -> list[ModelConfig]:
    """Thread-count grids of the five model families.

    Configurations whose worker-thread total exceeds ``max_server_threads``
    are dropped, but every family keeps its smallest configuration.
    """
    fams = [
        [ModelConfig(ModelKind.SPED)],
        [ModelConfig(ModelKind.SEDA, 2, 4)],
        [ModelConfig(ModelKind.AMPED, net, pay) for net in (0, 1) for pay in range(1, 5)],
        [ModelConfig(ModelKind.SEDA_S, n, n) for n in range(1, 5)],
        [ModelConfig(ModelKind.SYMPED, n, 0) for n in range(1, 6)],
    ]
    out = []
    for fam in fams:
        keep = [c for c in fam if max_server_threads is None
                or max(1, c.n_network + c.n_payload) <= max_server_threads]
        out.extend(keep or fam[:1])
    return out


def default_plan(quick: bool = False, cores: int | None = None) -> ExperimentPlan:
    """Host-sized plan: server threads capped at max(1, cores - 4)."""
    cores = host_cores() if cores is None else cores
    if quick:
        configs = [ModelConfig(ModelKind.SPED), ModelConfig(ModelKind.SEDA, 2, 4),
                   ModelConfig(ModelKind.SEDA_S, 2, 2), ModelConfig(ModelKind.AMPED, 1, 2),
                   ModelConfig(ModelKind.SYMPED, 1, 0), ModelConfig(ModelKind.SYMPED, 2, 0)]
        return ExperimentPlan([Cell(c, QUICK_CLIENTS) for c in configs],
                              repeats=2, warmups=1, duration=2.0)
    configs = paper_grid(max(1, cores - 4))
    return ExperimentPlan([Cell(c, DEFAULT_CLIENTS) for c in configs])


_GLOBAL_KEYS = {"repeats", "warmups", "duration", "seed", "get_fraction", "records",
                "size_min", "size_max", "clients"}


def parse_plan(text: str) -> ExperimentPlan:
    glob = {}
    rows = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" in line:
            k, _, v = line.partition("=")
            k = k.strip().replace("-", "_")
            if k not in _GLOBAL_KEYS:
                raise ValueError(f"line {lineno}: unknown setting {k!r}")
            glob[k] = v.strip()
            continue
        parts = line.replace(",", " ").split()
        if len(parts) < 3:
            raise ValueError(f"line {lineno}: expected '<model> <net> <payload> [clients...]'")
        try:
            cfg = ModelConfig(ModelKind.parse(parts[0]), int(parts[1]), int(parts[2]))
        except ConfigError as e:
            raise ValueError(f"line {lineno}: {e}") from e
        rows.append((cfg, tuple(int(x) for x in parts[3:])))
    default_clients = tuple(int(x) for x in glob.get("clients", "").replace(",", " ").split()) \
        or DEFAULT_CLIENTS
    spec = WorkloadSpec(
        n_records=int(glob.get("records", 30_000)),
        size_min=int(glob.get("size_min", 10)),
        size_max=int(glob.get("size_max", 1000)),
        seed=int(glob.get("seed", 1)),
        get_fraction=float(glob.get("get_fraction", 0.9)),
    )
    cells = [Cell(cfg, clients or default_clients) for cfg, clients in rows]
    return ExperimentPlan(cells, repeats=int(glob.get("repeats", 5)),
                          warmups=int(glob.get("warmups", 1)),
                          duration=float(glob.get("duration", 10.0)), workload=spec)


# -- server lifecycle -------------------------------------------------------

class ServerProcess:
    """A ``kvmodels.serverd`` subprocess bound to a private unix socket."""

    def __init__(self, cfg: ModelConfig, endpoint: netio.Endpoint, start_timeout: float = 10.0):
        self.cfg = cfg
        self.endpoint = endpoint
        cmd = [sys.executable, "-m", "kvmodels.serverd", "--model", cfg.kind.value,
               "--net-threads", str(cfg.n_network), "--payload-threads", str(cfg.n_payload),
               "--endpoint", str(endpoint), "--stats-interval", "0"]
        self._log = tempfile.TemporaryFile()
        self.proc = subprocess.Popen(cmd, stdout=subprocess.DEVNULL, stderr=self._log)
        deadline = time.monotonic() + start_timeout
        while True:
            if self.proc.poll() is not None:
                err = self.output()
                self._log.close()
                raise RuntimeError(f"server exited with {self.proc.returncode}: {err.strip()}")
            try:
                netio.connect(endpoint, timeout=1.0).close()
                return
            except OSError:
                if time.monotonic() > deadline:
                    self.stop()
                    raise RuntimeError("server did not come up")
                time.sleep(0.02)

    def output(self) -> str:
        self._log.seek(0)
        return self._log.read().decode(errors="replace")

    def alive(self) -> bool:
        return self.proc.poll() is None

    def stop(self, timeout: float = 5.0) -> int:
        if self.proc.poll() is None:
            self.proc.terminate()
            try:
                self.proc.wait(timeout)
            except subprocess.TimeoutExpired:
                self.proc.kill()
                self.proc.wait()
        return self.proc.returncode

    def close(self):
        self.stop()
        self._log.close()


def endpoint_released(endpoint: netio.Endpoint) -> bool:
    """True if the endpoint can be bound again (then released immediately)."""
    try:
        sock = netio.listen(endpoint)
    except OSError:
        return False
    sock.close()
    if endpoint.kind == "unix":
        try:
            os.unlink(endpoint.path)
        except FileNotFoundError:
            pass
    return True


def run_cell(cfg: ModelConfig, clients: int, plan: ExperimentPlan, dataset, workdir: str) -> Row:
    endpoint = netio.Endpoint("unix", path=os.path.join(workdir, f"{cfg.kind.value}.sock"))
    row = Row(cfg.kind.value, cfg.n_network, cfg.n_payload, clients, plan.duration, plan.repeats,
              0.0, 0.0, 0, "failed")
    server = None
    try:
        server = ServerProcess(cfg, endpoint)
        preload(endpoint, dataset)
        res = run_series(endpoint, clients, plan.duration, plan.workload, plan.repeats,
                         plan.warmups, dataset, model=cfg.kind.value,
                         n_net=cfg.n_network, n_payload=cfg.n_payload)
        if not server.alive():
            raise RuntimeError("server died during the series")
        row = replace(row, tps_mean=res.tps_mean, tps_std=res.tps_std,
                      tps_rounded=res.tps_rounded, status="ok")
    except (BenchError, OSError, RuntimeError) as e:
        log.warning("cell %s clients=%d failed: %s", cfg.label, clients, e)
        row.status = "failed"
    finally:
        if server is not None:
            server.close()
        if not endpoint_released(endpoint):
            log.warning("endpoint %s still held after cell %s", endpoint, cfg.label)
            if row.ok:
                row.status = "failed"
    return row


def run_plan(plan: ExperimentPlan, progress=None) -> ResultTable:
    """Run every cell in order; a failed cell is recorded, never skipped."""
    spec = plan.workload
    table = ResultTable(meta={
        "seed": spec.seed, "duration_s": plan.duration, "repeats": plan.repeats,
        "warmups": plan.warmups, "get_fraction": spec.get_fraction, "records": spec.n_records,
        "size_min": spec.size_min, "size_max": spec.size_max, "cores": host_cores(),
        "endpoint": "unix", "date": _dt.datetime.now().isoformat(timespec="seconds"),
        "python": sys.version.split()[0],
    })
    dataset = generate_dataset(spec)
    with tempfile.TemporaryDirectory(prefix="kvmodels-") as workdir:
        for cell in plan.cells:
            for clients in cell.clients:
                row = run_cell(cell.config, clients, plan, dataset, workdir)
                table.rows.append(row)
                if progress:
                    progress(row)
    return table


# -- CSV ----------------------------------------------------------------------

def write_csv(table: ResultTable, path) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        for k, v in table.meta.items():
            fh.write(f"# {k}={v}\n")
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for r in table.rows:
            w.writerow([r.model, r.n_net, r.n_payload, r.clients, r.duration_s, r.repeats,
                        repr(float(r.tps_mean)), repr(float(r.tps_std)), r.tps_rounded, r.status])


def read_csv(path) -> ResultTable:
    meta = {}
    lines = []
    for line in Path(path).read_text().splitlines():
        if line.startswith("#"):
            k, _, v = line[1:].strip().partition("=")
            meta[k] = v
        elif line.strip():
            lines.append(line)
    rows = []
    for rec in csv.DictReader(lines):
        rows.append(Row(rec["model"], int(rec["n_net"]), int(rec["n_payload"]),
                        int(rec["clients"]), float(rec["duration_s"]), int(rec["repeats"]),
                        float(rec["tps_mean"]), float(rec["tps_std"]), int(rec["tps_rounded"]),
                        rec["status"]))
    return ResultTable(rows, meta)


# -- analysis -----------------------------------------------------------------

@dataclass
class PeakRow:
    model: str
    n_net: int
    n_payload: int
    clients: int
    tps_mean: float
    tps_rounded: int
    ratio_to_next: float | None = None


def peak_table(table: ResultTable) -> list[PeakRow]:
    """Best row per model regardless of thread count, sorted best first.

    ``ratio_to_next`` on the leader is its margin over the runner-up
    (1.54 would match a 54% lead).
    """
    peaks = []
    for kind in ModelKind:
        rows = table.successful(kind)
        if not rows:
            if any(r.kind is kind for r in table.rows):
                log.warning("model %s has no successful rows; excluded", kind.value)
            continue
        best = max(rows, key=lambda r: r.tps_mean)
        peaks.append(PeakRow(best.model, best.n_net, best.n_payload, best.clients,
                             best.tps_mean, best.tps_rounded))
    peaks.sort(key=lambda p: p.tps_mean, reverse=True)
    for a, b in zip(peaks, peaks[1:]):
        a.ratio_to_next = a.tps_mean / b.tps_mean if b.tps_mean > 0 else None
    return peaks


@dataclass
class ScalingTable:
    model: str
    threads: list[int]
    tps: list[float]
    clients: list[int]
    slope: float


def server_threads(row) -> int:
    return row.n_net + row.n_payload


def scaling_table(table: ResultTable, kind: ModelKind) -> ScalingTable:
    """Max-over-clients tps per worker-thread count, plus the fitted slope over 1..4 threads."""
    best: dict[int, Row] = {}
    for r in table.successful(kind):
        t = server_threads(r)
        if t not in best or r.tps_mean > best[t].tps_mean:
            best[t] = r
    if len(best) < 2:
        raise ValueError(f"{kind.value}: need at least 2 thread counts, have {len(best)}")
    threads = sorted(best)
    tps = [best[t].tps_mean for t in threads]
    fit = [(t, v) for t, v in zip(threads, tps) if 1 <= t <= 4]
    if len(fit) < 2:
        fit = list(zip(threads, tps))
    slope = float(np.polyfit([t for t, _ in fit], [v for _, v in fit], 1)[0])
    return ScalingTable(kind.value, threads, tps, [best[t].clients for t in threads], slope)


# -- charts -------------------------------------------------------------------

CHART_DATA_ID = "kvmodels-data"


def _family_label(r) -> str:
    return f"net={r.n_net} payload={r.n_payload}"


def _save_svg(fig, path: Path, series: dict[str, list[tuple[float, float]]]) -> None:
    """Write the SVG and embed the plotted points as a JSON <desc> element."""
    import matplotlib.pyplot as plt

    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    ET.register_namespace("", "http://www.w3.org/2000/svg")
    ET.register_namespace("xlink", "http://www.w3.org/1999/xlink")
    tree = ET.parse(path)
    root = tree.getroot()
    desc = ET.Element("{http://www.w3.org/2000/svg}desc", {"id": CHART_DATA_ID})
    desc.text = json.dumps({k: [list(map(float, p)) for p in v] for k, v in series.items()})
    root.insert(0, desc)
    tree.write(path, xml_declaration=True, encoding="utf-8")


def extract_chart_points(path) -> dict[str, list[tuple[float, float]]]:
    root = ET.parse(path).getroot()
    for el in root.iter("{http://www.w3.org/2000/svg}desc"):
        if el.get("id") == CHART_DATA_ID:
            return {k: [tuple(p) for p in v] for k, v in json.loads(el.text).items()}
    raise ValueError(f"{path}: no embedded chart data")


def _line_chart(path: Path, title: str, xlabel: str, series) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.fonttype"] = "none"  # keep labels as searchable text
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for label, pts in series.items():
        xs, ys = zip(*pts)
        ax.plot(xs, ys, marker="o", label=label)
    ax.set_title(title)
    ax.set_xlabel(xlabel)
    ax.set_ylabel("transactions/s")
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize="small")
    fig.text(0.01, 0.01, "1 transaction = request + response = 2 network operations",
             fontsize="x-small", color="gray")
    fig.tight_layout()
    _save_svg(fig, path, series)


def emit_charts(table: ResultTable, outdir) -> list[Path]:
    """Write results.csv plus per-model, scaling and peak-comparison SVGs."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    if not table.rows:
        raise ValueError("empty result table")
    write_csv(table, outdir / "results.csv")
    written = []
    for kind in ModelKind:
        rows = table.successful(kind)
        if not rows:
            log.info("no successful rows for %s; chart skipped", kind.value)
            continue
        series: dict[str, list] = {}
        for r in sorted(rows, key=lambda r: (r.n_net, r.n_payload, r.clients)):
            series.setdefault(_family_label(r), []).append((r.clients, r.tps_mean))
        path = outdir / f"clients_{kind.value}.svg"
        _line_chart(path, f"{kind.value.upper()}: throughput vs clients", "simultaneous clients", series)
        written.append(path)
    for kind in ModelKind:
        try:
            sc = scaling_table(table, kind)
        except ValueError:
            continue
        path = outdir / f"threads_{kind.value}.svg"
        _line_chart(path, f"{kind.value.upper()}: peak throughput vs server threads "
                    f"(slope {sc.slope:,.0f}/thread)", "server worker threads",
                    {kind.value: list(zip(sc.threads, sc.tps))})
        written.append(path)
    peaks = peak_table(table)
    if peaks:
        series = {}
        for p in peaks:
            rows = [r for r in table.successful(ModelKind.parse(p.model))
                    if (r.n_net, r.n_payload) == (p.n_net, p.n_payload)]
            series[f"{p.model} ({p.n_net},{p.n_payload})"] = sorted((r.clients, r.tps_mean) for r in rows)
        path = outdir / "peaks.svg"
        _line_chart(path, "Models at their best thread configuration", "simultaneous clients", series)
        written.append(path)
        with (outdir / "peaks.csv").open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["model", "n_net", "n_payload", "clients", "tps_mean", "tps_rounded", "ratio_to_next"])
            for p in peaks:
                w.writerow([p.model, p.n_net, p.n_payload, p.clients, f"{p.tps_mean:.1f}",
                            p.tps_rounded, "" if p.ratio_to_next is None else f"{p.ratio_to_next:.3f}"])
    return written


def format_report(table: ResultTable) -> str:
    lines = ["model     net pay clients    tps_mean   tps_std  rounded  status"]
    for r in table.rows:
        lines.append(f"{r.model:<9} {r.n_net:>3} {r.n_payload:>3} {r.clients:>7} "
                     f"{r.tps_mean:>11.0f} {r.tps_std:>9.0f} {r.tps_rounded:>8} {r.status}")
    peaks = peak_table(table)
    if peaks:
        lines.append("")
        lines.append("peaks:")
        for p in peaks:
            ratio = "" if p.ratio_to_next is None else f"  x{p.ratio_to_next:.2f} over next"
            lines.append(f"  {p.model:<8} ({p.n_net},{p.n_payload}) clients={p.clients} "
                         f"tps={p.tps_mean:,.0f}{ratio}")
    return "\n".join(lines)


def main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="kvmodels-harness", description="Sweep threading models.")
    p.add_argument("--plan", type=Path, help="plan file (see module docs / README)")
    p.add_argument("--out", type=Path, default=Path("results"))
    p.add_argument("--quick", action="store_true", help="reduced grid for CI")
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    try:
        plan = parse_plan(args.plan.read_text()) if args.plan else default_plan(quick=args.quick)
    except (OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    log.info("running %d cells", plan.n_cells())

    def progress(row):
        log.info("%s(%d,%d) clients=%d tps=%.0f %s", row.model, row.n_net, row.n_payload,
                 row.clients, row.tps_mean, row.status)

    table = run_plan(plan, progress)
    emit_charts(table, args.out)
    print(format_report(table))
    return 0 if all(r.ok for r in table.rows) else 1


if __name__ == "__main__":
    sys.exit(main())
