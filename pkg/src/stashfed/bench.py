"""Proxy-versus-federation benchmark: dataset generation, four-phase runs, reports."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import math
import os
import random
import shutil
import tempfile
import time
from collections import defaultdict
from dataclasses import dataclass, field
from statistics import mean
from typing import Iterable, Sequence
from urllib.parse import quote

from . import wire
from .client import ClientOptions, Downloader
from .core import GeoCoordinate, normalize_path
from .errors import StashError, UndefinedBaseline
from .proxy import proxied_get

log = logging.getLogger(__name__)

# Monitoring file-size percentiles, plus the 10 GB probe file.
PERCENTILE_SIZES: tuple[tuple[str, int], ...] = (
    ("P1", 5_797),
    ("P5", 22_801_000),
    ("P25", 170_131_000),
    ("P50", 467_852_000),
    ("P75", 493_337_000),
    ("P95", 2_335_000_000),
    ("XL", 10_000_000_000),
)
LARGE_LABELS = ("P95", "XL")
DEFAULT_SCALE = 1000
PHASES = (("proxy", "cold"), ("proxy", "warm"), ("federation", "cold"), ("federation", "warm"))
ABSENT = "NA"
_BLOCK = 4 * 2**20


@dataclass(frozen=True)
class DatasetSpec:
    scale: int = DEFAULT_SCALE
    seed: int = 0
    entries: tuple[tuple[str, int], ...] = PERCENTILE_SIZES

    def __post_init__(self) -> None:
        if self.scale < 1:
            raise ValueError("scale must be >= 1")

    def scaled_size(self, unscaled: int) -> int:
        return max(1, unscaled // self.scale)

    def sizes(self) -> dict[str, int]:
        return {label: self.scaled_size(n) for label, n in self.entries}


def calibrated_max_object(scale: int = DEFAULT_SCALE) -> int:
    """A proxy object-size limit strictly between the scaled P75 and P95 sizes."""
    spec = DatasetSpec(scale)
    sizes = spec.sizes()
    lo, hi = sizes["P75"], sizes["P95"]
    return int(math.sqrt(lo * hi))


def _write_seeded(path: str, size: int, seed_text: str) -> str:
    rng = random.Random(seed_text)
    h = hashlib.sha256()
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        left = size
        while left:
            block = rng.randbytes(min(_BLOCK, left))
            fh.write(block)
            h.update(block)
            left -= len(block)
    os.replace(tmp, path)
    return h.hexdigest()


def generate_dataset(spec: DatasetSpec, root: str, prefix: str = "/bench", reps: int = 1,
                     tag: str | None = None) -> dict:
    """Write one seeded file per (repetition, percentile) under ``root`` and a manifest.

    Each repetition gets its own subdirectory so every run starts cold.
    """
    prefix = normalize_path(prefix)
    tag = tag or f"seed{spec.seed}-scale{spec.scale}"
    files = []
    for rep in range(reps):
        rel_dir = f"{tag}/rep{rep}"
        os.makedirs(os.path.join(root, *rel_dir.split("/")), exist_ok=True)
        for label, unscaled in spec.entries:
            size = spec.scaled_size(unscaled)
            rel = f"{rel_dir}/{label}.bin"
            digest = _write_seeded(os.path.join(root, *rel.split("/")), size, f"{spec.seed}:{tag}:{rep}:{label}")
            files.append({"label": label, "rep": rep, "relpath": rel, "path": prefix.join(rel),
                          "size": size, "sha256": digest})
    manifest = {"prefix": prefix, "scale": spec.scale, "seed": spec.seed, "reps": reps, "tag": tag,
                "files": files}
    with open(os.path.join(root, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2)
    return manifest


@dataclass
class SiteTarget:
    label: str
    proxy: str
    http_base: str
    redirectors: Sequence[str] = ()
    caches: Sequence[str] = ()
    location: GeoCoordinate | None = None


@dataclass
class BenchResult:
    site_label: str
    file_label: str
    method: str
    phase: str
    duration: float
    bytes: int
    status: str | None
    rep: int = 0
    error: str | None = None

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), separators=(",", ":"))

    @classmethod
    def from_dict(cls, obj: dict) -> "BenchResult":
        return cls(**obj)


def percent_diff(t_proxy: float, t_federation: float) -> float:
    """Relative change in download time when using the federation, in percent.

    Negative means the federation was faster.
    """
    if not t_proxy > 0:
        raise UndefinedBaseline(f"proxy time must be positive, got {t_proxy}")
    return (t_federation - t_proxy) * 100.0 / t_proxy


def _preflight(site: SiteTarget) -> None:
    checks = [(site.proxy, "/stats")] + [(r, "/caches") for r in site.redirectors] + [(c, "/stats") for c in site.caches]
    for endpoint, target in checks:
        try:
            wire.request(endpoint, "GET", target, timeout=2.0)
        except OSError as exc:
            raise StashError(f"preflight: {endpoint} unreachable: {exc}") from exc


def run_matrix(site: SiteTarget, manifest: dict, repetitions: int | None = None, ordering: str = "per-file",
               pause: float = 0.0, workdir: str | None = None) -> list[BenchResult]:
    """Download every manifest file four times: proxy cold/warm, then federation cold/warm.

    ``ordering="per-file"`` runs all four phases of one file before the next.
    ``"per-pass"`` loops the whole file list once per phase, which lets short
    proxy TTLs expire early files before their warm pass. ``pause`` sleeps
    between files to stand in for long transfers.
    """
    if ordering not in ("per-file", "per-pass"):
        raise ValueError(f"unknown ordering {ordering!r}")
    _preflight(site)
    reps = manifest["reps"] if repetitions is None else repetitions
    if reps > manifest["reps"]:
        raise ValueError(f"manifest holds {manifest['reps']} repetitions, {reps} requested")
    options = ClientOptions(redirectors=site.redirectors, caches=site.caches, location=site.location,
                            methods=("cache",))
    results: list[BenchResult] = []
    own_tmp = workdir is None
    workdir = workdir or tempfile.mkdtemp(prefix="stashfed-bench-")
    try:
        for rep in range(reps):
            files = [f for f in manifest["files"] if f["rep"] == rep]
            if ordering == "per-file":
                for f in files:
                    failed = False
                    for method, phase in PHASES:
                        r = _run_phase(site, options, f, method, phase, rep, workdir, skip=failed)
                        failed = failed or r.error is not None
                        results.append(r)
                    if pause:
                        time.sleep(pause)
            else:
                for method, phase in PHASES:
                    for f in files:
                        results.append(_run_phase(site, options, f, method, phase, rep, workdir))
                        if pause:
                            time.sleep(pause)
    finally:
        if own_tmp:
            shutil.rmtree(workdir, ignore_errors=True)
    return results


def _run_phase(site: SiteTarget, options: ClientOptions, f: dict, method: str, phase: str, rep: int,
               workdir: str, skip: bool = False) -> BenchResult:
    result = BenchResult(site.label, f["label"], method, phase, 0.0, 0, None, rep)
    if skip:
        result.error = "skipped after earlier failure"
        return result
    t0 = time.perf_counter()
    try:
        if method == "proxy":
            url = site.http_base.rstrip("/") + quote(f["path"], safe="/")
            data, status = proxied_get(site.proxy, url)
            nbytes = len(data)
        else:
            # timed around the whole client call, cache ranking included
            report = Downloader(options).download(f["path"], os.path.join(workdir, f"{f['label']}-{rep}"))
            status, nbytes = report.cache_status, report.bytes
    except StashError as exc:
        result.duration = time.perf_counter() - t0
        result.error = f"{type(exc).__name__}: {exc}"
        return result
    result.duration = max(time.perf_counter() - t0, 1e-9)
    result.bytes, result.status = nbytes, status
    if nbytes != f["size"]:
        result.error = f"size {nbytes} != manifest {f['size']}"
    elif phase == "cold" and status == "HIT":
        result.error = "cold phase observed a cache HIT"
    return result


def run_sites(sites: Iterable[SiteTarget], manifest: dict, **kw) -> list[BenchResult]:
    """Sites run one after another, never concurrently."""
    out: list[BenchResult] = []
    for site in sites:
        out.extend(run_matrix(site, manifest, **kw))
    return out


@dataclass
class Report:
    table: dict[str, dict[str, float | None]]
    columns: list[str]
    files: list[str] = field(default_factory=list)

    def cell(self, site: str, label: str) -> str:
        return format_cell(self.table.get(site, {}).get(label))


def format_cell(value: float | None) -> str:
    return ABSENT if value is None else f"{value:+.1f}%"


def _mean_durations(results: Iterable[BenchResult], phases: Sequence[str]) -> dict:
    acc: dict[tuple[str, str, str], list[float]] = defaultdict(list)
    for r in results:
        if r.error is None and r.phase in phases:
            acc[(r.site_label, r.file_label, r.method)].append(r.duration)
    return {k: mean(v) for k, v in acc.items()}


def percent_table(results: Sequence[BenchResult], columns: Sequence[str] | None = None,
                  phases: Sequence[str] = ("cold", "warm")) -> tuple[dict[str, dict[str, float | None]], list[str]]:
    order = [label for label, _ in PERCENTILE_SIZES]
    present = sorted({r.file_label for r in results}, key=lambda x: order.index(x) if x in order else len(order))
    if columns is None:
        columns = [c for c in LARGE_LABELS if c in present] or present
    sites = list(dict.fromkeys(r.site_label for r in results))
    means = _mean_durations(results, phases)
    table: dict[str, dict[str, float | None]] = {}
    for s in sites:
        row: dict[str, float | None] = {}
        for c in columns:
            tp, tf = means.get((s, c, "proxy")), means.get((s, c, "federation"))
            row[c] = percent_diff(tp, tf) if tp is not None and tf is not None else None
        table[s] = row
    return table, list(columns)


def render_report(results: Sequence[BenchResult], out_dir: str, columns: Sequence[str] | None = None,
                  phases: Sequence[str] = ("cold", "warm"), plots: bool = True) -> Report:
    """Write ``table3.csv``/``table3.txt``, per-site throughput CSVs and plots, and ``results.jsonl``."""
    os.makedirs(out_dir, exist_ok=True)
    table, cols = percent_table(results, columns, phases)
    report = Report(table, cols)

    path = os.path.join(out_dir, "results.jsonl")
    with open(path, "w") as fh:
        fh.writelines(r.to_json() + "\n" for r in results)
    report.files.append(path)

    path = os.path.join(out_dir, "table3.csv")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["site", *cols])
        for site, row in table.items():
            w.writerow([site, *(ABSENT if row[c] is None else repr(row[c]) for c in cols)])
    report.files.append(path)

    path = os.path.join(out_dir, "table3.txt")
    width = max([len("Site"), *(len(s) for s in table)])
    with open(path, "w") as fh:
        fh.write(" | ".join(["Site".ljust(width), *(c.rjust(9) for c in cols)]) + "\n")
        for site, row in table.items():
            fh.write(" | ".join([site.ljust(width), *(format_cell(row[c]).rjust(9) for c in cols)]) + "\n")
    report.files.append(path)

    for site, rows in throughput_rows(results).items():
        path = os.path.join(out_dir, f"throughput_{_safe(site)}.csv")
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["file_label", "method", "phase", "mean_mb_per_s", "samples"])
            w.writeheader()
            for row in rows:
                w.writerow({**row, "mean_mb_per_s": repr(row["mean_mb_per_s"])})
        report.files.append(path)
        if plots:
            report.files.append(_plot_site(site, rows, out_dir))
    return report


def _safe(label: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_" else "_" for ch in label)


def throughput_rows(results: Iterable[BenchResult]) -> dict[str, list[dict]]:
    acc: dict[tuple[str, str, str, str], list[float]] = defaultdict(list)
    for r in results:
        if r.error is None and r.duration > 0:
            acc[(r.site_label, r.file_label, r.method, r.phase)].append(r.bytes / r.duration / 1e6)
    order = [label for label, _ in PERCENTILE_SIZES]
    out: dict[str, list[dict]] = defaultdict(list)
    for (site, label, method, phase), vals in sorted(
        acc.items(), key=lambda kv: (kv[0][0], order.index(kv[0][1]) if kv[0][1] in order else 99, kv[0][2], kv[0][3])
    ):
        out[site].append({"file_label": label, "method": method, "phase": phase,
                          "mean_mb_per_s": mean(vals), "samples": len(vals)})
    return dict(out)


def _plot_site(site: str, rows: list[dict], out_dir: str) -> str:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    labels = list(dict.fromkeys(r["file_label"] for r in rows))
    series = [(m, p) for m, p in PHASES]
    width = 0.8 / len(series)
    fig, ax = plt.subplots(figsize=(8, 4))
    for i, (m, p) in enumerate(series):
        vals = {r["file_label"]: r["mean_mb_per_s"] for r in rows if r["method"] == m and r["phase"] == p}
        xs = [j + (i - (len(series) - 1) / 2) * width for j in range(len(labels))]
        ax.bar(xs, [vals.get(lbl, 0.0) for lbl in labels], width, label=f"{m} {p}")
    ax.set_xticks(range(len(labels)), labels)
    ax.set_ylabel("MB/s (higher is better)")
    ax.set_title(f"{site}: mean download throughput")
    ax.legend(fontsize="small")
    fig.tight_layout()
    path = os.path.join(out_dir, f"throughput_{_safe(site)}.png")
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def load_results(path: str) -> list[BenchResult]:
    with open(path) as fh:
        return [BenchResult.from_dict(json.loads(line)) for line in fh if line.strip()]


def run_demo(out_dir: str, scale: int = DEFAULT_SCALE, seed: int = 0, reps: int = 1, sites: Sequence[str] = ("site-a",),
             ordering: str = "per-file", ttl: float = 300.0, pause: float = 0.0) -> list[BenchResult]:
    """Whole experiment on loopback: dataset, origin, redirector, one cache and proxy per site."""
    from .testbed import Testbed

    with Testbed() as tb:
        tb.add_redirector()
        origin = tb.add_origin("/bench")
        manifest = generate_dataset(DatasetSpec(scale, seed), origin.origin.config.root_dir, "/bench", reps)
        origin.origin.reindex()
        results: list[BenchResult] = []
        for i, label in enumerate(sites):
            cache = tb.add_cache(f"cache-{_safe(label)}", (40.0, -90.0 + i))
            proxy = tb.add_proxy(capacity=max(64 * 2**20, 4 * calibrated_max_object(scale)),
                                 max_object_size=calibrated_max_object(scale), object_ttl=ttl)
            site = SiteTarget(label, proxy.endpoint, tb.http_base(origin), caches=[cache.endpoint],
                              redirectors=tb.redirector_endpoints)
            results.extend(run_matrix(site, manifest, ordering=ordering, pause=pause))
            tb.stop_service(cache)
            tb.stop_service(proxy)
    render_report(results, out_dir)
    return results


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="stashfed-bench", description="Proxy vs federation benchmark")
    sub = parser.add_subparsers(dest="cmd", required=True)

    g = sub.add_parser("gen", help="write the percentile dataset into an origin tree")
    g.add_argument("--root", required=True)
    g.add_argument("--scale", type=int, default=DEFAULT_SCALE)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--reps", type=int, default=3, help="independent copies, one per repetition")
    g.add_argument("--prefix", default="/bench", help="namespace prefix the origin serves ROOT under")
    g.add_argument("--tag", default=None)

    r = sub.add_parser("run", help="run the four-phase matrix against one site")
    r.add_argument("--manifest", required=True)
    r.add_argument("--proxy", required=True)
    r.add_argument("--http-base", required=True, help="origin HTTP base, e.g. http://host:port/data")
    r.add_argument("--redirectors", default="")
    r.add_argument("--caches", default="")
    r.add_argument("--reps", type=int, default=None)
    r.add_argument("--out", required=True)
    r.add_argument("--site", default="site")
    r.add_argument("--order", choices=("per-file", "per-pass"), default="per-file")
    r.add_argument("--pause", type=float, default=0.0)
    r.add_argument("--lat", type=float)
    r.add_argument("--lon", type=float)

    rep = sub.add_parser("report", help="render tables and plots from results.jsonl")
    rep.add_argument("--in", dest="indir", required=True)
    rep.add_argument("--out", required=True)

    d = sub.add_parser("demo", help="gen + run + report on an in-process loopback federation")
    d.add_argument("--out", required=True)
    d.add_argument("--scale", type=int, default=DEFAULT_SCALE)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--reps", type=int, default=1)
    d.add_argument("--sites", default="site-a,site-b", help="comma-separated site labels, one loopback site each")
    d.add_argument("--order", choices=("per-file", "per-pass"), default="per-file")
    d.add_argument("--ttl", type=float, default=300.0)
    d.add_argument("--pause", type=float, default=0.0)

    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO)
    if args.cmd == "gen":
        m = generate_dataset(DatasetSpec(args.scale, args.seed), args.root, args.prefix, args.reps, args.tag)
        print(f"wrote {len(m['files'])} files; manifest at {os.path.join(args.root, 'manifest.json')}")
    elif args.cmd == "run":
        with open(args.manifest) as fh:
            manifest = json.load(fh)
        loc = GeoCoordinate(args.lat, args.lon) if args.lat is not None and args.lon is not None else None
        site = SiteTarget(args.site, args.proxy, args.http_base, wire.split_endpoints(args.redirectors),
                          wire.split_endpoints(args.caches), loc)
        results = run_matrix(site, manifest, args.reps, args.order, args.pause)
        render_report(results, args.out)
        bad = [x for x in results if x.error]
        print(f"{len(results)} results, {len(bad)} with errors; report in {args.out}")
    elif args.cmd == "report":
        report = render_report(load_results(os.path.join(args.indir, "results.jsonl")), args.out)
        with open(os.path.join(args.out, "table3.txt")) as fh:
            print(fh.read(), end="")
        print(f"{len(report.files)} files written to {args.out}")
    else:
        results = run_demo(args.out, args.scale, args.seed, args.reps, wire.split_endpoints(args.sites),
                           args.order, args.ttl, args.pause)
        with open(os.path.join(args.out, "table3.txt")) as fh:
            print(fh.read(), end="")
        print(f"{len(results)} results; report in {args.out}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
