"""Benchmark harness: pair grid, per-pair ledger, fair-filtered aggregate tables."""

from __future__ import annotations

import csv
import io
import json
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import baselines, engine
from .classifier import extract_features
from .data_io import write_pgm
from .feature_density import epistemic_nll

LEDGER_FIELDS = ["set", "image_id", "source_class", "target_class", "generator",
                 "success", "iterations", "l0", "l1", "nll_realism", "wall_ms"]

# Reference rows (MNIST, full-scale ResNet). AGAN is an AnoGAN score and is
# not comparable to the NLL proxy measured here.
PAPER_TABLE1 = {
    "DeDUCE": dict(agan=(22.51, 0.72), l0=(21.16, 0.46), l1=(10.72, 0.10), failure=(0.00, 0.00)),
    "JSMA": dict(agan=(23.90, 0.41), l0=(25.65, 0.65), l1=(12.63, 0.27), failure=(3.09, 0.28)),
    "VLK": dict(agan=(22.95, 0.93), l0=(155.43, 4.15), l1=(38.95, 1.19), failure=(0.09, 0.20)),
    "REVISE": dict(agan=(20.09, 0.88), l0=(752.46, 4.98), l1=(53.86, 0.58), failure=(26.80, 1.03)),
}
PAPER_TIMES = {"DeDUCE": (2.99, 1.69), "JSMA": (1.01, 0.52),
               "VLK": (109.86, 1.54), "REVISE": (46.66, 84.33)}
PAPER_TABLE3 = {
    "lambda=0": (27.36, 13.47, 0.1), "lambda=1": (27.29, 13.45, 0.1),
    "lambda=10": (27.16, 13.40, 0.1), "lambda=100": (25.88, 12.92, 0.0),
    "lambda=1000": (24.58, 12.38, 0.0), "lambda=10000": (25.10, 12.53, 0.0),
    "lambda=100000": (25.38, 12.65, 0.0), "mu=0.2": (25.45, 12.75, 0.0),
    "mu=1": (24.47, 12.32, 0.0), "mu=5": (24.92, 12.46, 0.1),
}
ABLATION_LAMBDAS = (0.0, 1.0, 10.0, 100.0, 1000.0, 10000.0, 100000.0)
ABLATION_MUS = (0.2, 1.0, 5.0)


def l0_distance(x, x_prime, tol=1e-9):
    return int(np.count_nonzero(np.abs(np.asarray(x_prime, dtype=np.float64)
                                       - np.asarray(x, dtype=np.float64)) > tol))


def l1_distance(x, x_prime):
    return float(np.sum(np.abs(np.asarray(x_prime, dtype=np.float64)
                               - np.asarray(x, dtype=np.float64))))


def realism_score(model, gmm, x_prime):
    """Feature-space NLL under the class mixture; lower is more in-distribution."""
    return epistemic_nll(gmm, extract_features(model, x_prime))


@dataclass(frozen=True)
class BenchmarkSpec:
    num_sets: int = 2
    images_per_set: int = 50
    generators: tuple = ("deduce", "jsma")
    seed: int = 0
    workers: int = 0  # 0: one per logical core


@dataclass(frozen=True)
class Pair:
    set: int
    image_id: int
    source_class: int
    target_class: int


@dataclass
class MetricsRow:
    generator: str
    realism_nll: tuple
    l0: tuple
    l1: tuple
    failure_pct: tuple
    wall_ms: tuple          # mean, std over all attempted pairs
    n_common: int = 0
    paper_sourced: bool = False


def build_pairs(spec: BenchmarkSpec, dataset):
    """Canonical (set, image, target) grid drawn from ``dataset``."""
    need = spec.num_sets * spec.images_per_set
    if need > len(dataset):
        raise ValueError(f"benchmark needs {need} images, dataset has {len(dataset)}")
    order = np.random.default_rng(spec.seed).permutation(len(dataset))[:need]
    pairs = []
    for s in range(spec.num_sets):
        ids = np.sort(order[s * spec.images_per_set:(s + 1) * spec.images_per_set])
        for i in ids:
            y = int(dataset.labels[i])
            for t in range(dataset.class_count):
                if t != y:
                    pairs.append(Pair(s, int(i), y, t))
    return pairs


def make_generators(model, gmm, search=None, wachter=None, names=("deduce", "jsma")):
    """Map generator names to ``fn(x, t) -> CounterfactualResult``."""
    search = search or engine.SearchConfig()
    wachter = wachter or baselines.WachterConfig(target_confidence=search.target_confidence)
    table = {
        "deduce": lambda x, t: engine.generate(model, gmm, x, t, search),
        "jsma": lambda x, t: baselines.jsma_generate(model, x, t, search),
        "wachter": lambda x, t: baselines.wachter_generate(model, x, t, wachter),
    }
    out = {}
    for name in names:
        if name not in table:
            raise ValueError(f"unknown generator {name!r}")
        out[name] = table[name]
    return out


def ablation_modes(lambdas=ABLATION_LAMBDAS, mus=ABLATION_MUS):
    modes = [(engine.WEIGHTED, v) for v in lambdas]
    modes += [(engine.NORMALIZED, v) for v in mus]
    return modes


def mode_name(mode, value):
    key = "lambda" if mode == engine.WEIGHTED else "mu"
    return f"{key}={value:g}"


def ablation_generators(model, gmm, search, modes):
    out = {}
    for mode, value in modes:
        if mode == engine.WEIGHTED:
            cfg = replace(search, gradient_mode=mode, lam=float(value))
        else:
            cfg = replace(search, gradient_mode=mode, mu=float(value))
        out[mode_name(mode, value)] = (lambda c: lambda x, t: engine.generate(model, gmm, x, t, c))(cfg)
    return out


def _run_one(job):
    pair, name, fn, x, model, gmm, dump = job
    t0 = time.perf_counter_ns()
    try:
        res = fn(x, pair.target_class)
    except Exception:  # a crashing generator counts as a failed pair
        wall = (time.perf_counter_ns() - t0) / 1e6
        return dict(set=pair.set, image_id=pair.image_id, source_class=pair.source_class,
                    target_class=pair.target_class, generator=name, success=False,
                    iterations=0, l0=math.nan, l1=math.nan, nll_realism=math.nan,
                    wall_ms=wall)
    wall = (time.perf_counter_ns() - t0) / 1e6
    if dump is not None:
        h, w = dump[1], dump[2]
        write_pgm(res.x_final, Path(dump[0]) / f"{name}_{pair.image_id}_to_{pair.target_class}.pgm", h, w)
    return dict(set=pair.set, image_id=pair.image_id, source_class=pair.source_class,
                target_class=pair.target_class, generator=name, success=bool(res.success),
                iterations=int(res.iterations), l0=l0_distance(x, res.x_final),
                l1=l1_distance(x, res.x_final),
                nll_realism=realism_score(model, gmm, res.x_final), wall_ms=wall)


def resolve_workers(requested):
    env = os.environ.get("DEDUCE_WORKERS")
    if env:
        return max(1, int(env))
    return requested if requested and requested > 0 else (os.cpu_count() or 1)


def run_benchmark(spec: BenchmarkSpec, model, gmm, dataset, generators, dump_dir=None):
    """Run every generator on the shared pair grid.

    Returns (rows, ledger). Ledger order is canonical (pair, then generator
    in registration order) regardless of worker scheduling.
    """
    pairs = build_pairs(spec, dataset)
    dump = None
    if dump_dir is not None:
        Path(dump_dir).mkdir(parents=True, exist_ok=True)
        dump = (dump_dir, dataset.height, dataset.width)
    jobs = [(p, name, fn, dataset.images[p.image_id], model, gmm, dump)
            for p in pairs for name, fn in generators.items()]
    workers = resolve_workers(spec.workers)
    if workers == 1:
        ledger = [_run_one(j) for j in jobs]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            ledger = list(pool.map(_run_one, jobs))
    return aggregate(ledger, list(generators)), ledger


def _mean_std(values):
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0 or np.all(np.isnan(v)):
        return (math.nan, math.nan)
    v = v[~np.isnan(v)]
    std = float(np.std(v, ddof=1)) if v.size > 1 else 0.0
    return (float(np.mean(v)), std)


def common_pairs(ledger, generators):
    """Pair keys on which every generator succeeded."""
    ok = {}
    for r in ledger:
        key = (r["set"], r["image_id"], r["target_class"])
        ok.setdefault(key, {})[r["generator"]] = r["success"]
    return {k for k, v in ok.items() if all(v.get(g, False) for g in generators)}


def aggregate(ledger, generators=None):
    """Per-set means over the all-success intersection, then mean/std across sets."""
    if generators is None:
        generators = list(dict.fromkeys(r["generator"] for r in ledger))
    common = common_pairs(ledger, generators)
    sets = sorted({r["set"] for r in ledger})
    rows = []
    for g in generators:
        mine = [r for r in ledger if r["generator"] == g]
        per_set = {k: [] for k in ("nll_realism", "l0", "l1", "failure")}
        for s in sets:
            in_set = [r for r in mine if r["set"] == s]
            fair = [r for r in in_set if (r["set"], r["image_id"], r["target_class"]) in common]
            for k in ("nll_realism", "l0", "l1"):
                per_set[k].append(float(np.mean([r[k] for r in fair])) if fair else math.nan)
            per_set["failure"].append(
                100.0 * sum(not r["success"] for r in in_set) / len(in_set) if in_set else math.nan)
        rows.append(MetricsRow(
            generator=g,
            realism_nll=_mean_std(per_set["nll_realism"]),
            l0=_mean_std(per_set["l0"]),
            l1=_mean_std(per_set["l1"]),
            failure_pct=_mean_std(per_set["failure"]),
            wall_ms=_mean_std([r["wall_ms"] for r in mine]),
            n_common=len(common),
        ))
    return rows


# --- ledger I/O ------------------------------------------------------------

def _fmt(v):
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_ledger(ledger, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LEDGER_FIELDS)
        for r in ledger:
            w.writerow([_fmt(r[k]) for k in LEDGER_FIELDS])


def read_ledger(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != LEDGER_FIELDS:
            raise ValueError(f"unexpected ledger header {header}")
        out = []
        for row in reader:
            d = dict(zip(header, row))
            out.append(dict(
                set=int(d["set"]), image_id=int(d["image_id"]),
                source_class=int(d["source_class"]), target_class=int(d["target_class"]),
                generator=d["generator"], success=d["success"] == "1",
                iterations=int(d["iterations"]),
                l0=float(d["l0"]) if d["l0"] == "nan" else int(d["l0"]),
                l1=float(d["l1"]), nll_realism=float(d["nll_realism"]),
                wall_ms=float(d["wall_ms"]),
            ))
        return out


# --- reports ----------------------------------------------------------------

def _ms(pair, digits=2):
    m, s = pair
    if math.isnan(m):
        return "n/a"
    return f"{m:.{digits}f} ({s:.{digits}f})"


def paper_rows():
    rows = []
    for name in ("VLK", "REVISE"):
        ref = PAPER_TABLE1[name]
        rows.append(MetricsRow(name, ref["agan"], ref["l0"], ref["l1"], ref["failure"],
                               tuple(1000.0 * v for v in PAPER_TIMES[name]), paper_sourced=True))
    return rows


def render_table(rows, config_echo=None, include_paper=True):
    """Fixed-layout text table in the style of the main results table."""
    out = io.StringIO()
    out.write("Counterfactual benchmark (means over sets, std across sets in brackets)\n")
    out.write("NLL-realism (proxy) is feature-space NLL under the class GMM; lower is better.\n")
    if rows:
        out.write(f"pairs where all generators succeeded: {rows[0].n_common}\n")
    out.write("\n")
    head = f"{'generator':<16}{'NLL-realism (proxy)':>24}{'L0':>20}{'L1':>20}{'failure %':>18}{'time ms':>22}  source\n"
    out.write(head)
    out.write("-" * (len(head) - 1) + "\n")
    body = list(rows) + (paper_rows() if include_paper else [])
    for r in body:
        src = "paper-sourced (AGAN, not NLL)" if r.paper_sourced else "measured"
        out.write(f"{r.generator:<16}{_ms(r.realism_nll):>24}{_ms(r.l0):>20}{_ms(r.l1):>20}"
                  f"{_ms(r.failure_pct):>18}{_ms(r.wall_ms, 3):>22}  {src}\n")
    if config_echo is not None:
        out.write("\neffective config: " + json.dumps(config_echo, sort_keys=True) + "\n")
    return out.getvalue()


def render_csv(rows, include_paper=True):
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["generator", "nll_realism_mean", "nll_realism_std", "l0_mean", "l0_std",
                "l1_mean", "l1_std", "failure_pct_mean", "failure_pct_std",
                "wall_ms_mean", "wall_ms_std", "n_common", "source"])
    body = list(rows) + (paper_rows() if include_paper else [])
    for r in body:
        w.writerow([r.generator, *map(repr, r.realism_nll), *map(repr, r.l0), *map(repr, r.l1),
                    *map(repr, r.failure_pct), *map(repr, r.wall_ms), r.n_common,
                    "paper-sourced" if r.paper_sourced else "measured"])
    return out.getvalue()


def ablation_report(spec: BenchmarkSpec, model, gmm, dataset, search=None, modes=None):
    """Run one benchmark over all objective settings; returns (table text, rows, ledger)."""
    search = search or engine.SearchConfig()
    modes = modes if modes is not None else ablation_modes()
    gens = ablation_generators(model, gmm, search, modes)
    rows, ledger = run_benchmark(spec, model, gmm, dataset, gens)
    return render_ablation(rows), rows, ledger


def render_ablation(rows, config_echo=None):
    out = io.StringIO()
    out.write("Objective ablation (L0/L1 over pairs where every setting succeeded)\n\n")
    out.write(f"{'setting':<16}{'L0':>12}{'L1':>12}{'failure %':>12}   paper L0 / L1 / failure %\n")
    for r in rows:
        ref = PAPER_TABLE3.get(r.generator)
        ref_s = f"{ref[0]:.2f} / {ref[1]:.2f} / {ref[2]:.1f}" if ref else "-"
        out.write(f"{r.generator:<16}{r.l0[0]:>12.2f}{r.l1[0]:>12.2f}{r.failure_pct[0]:>12.2f}   {ref_s}\n")
    if config_echo is not None:
        out.write("\neffective config: " + json.dumps(config_echo, sort_keys=True) + "\n")
    return out.getvalue()
