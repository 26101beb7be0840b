"""Dataset builds, the scheme x seed training matrix, evaluation and reports."""

from __future__ import annotations

import csv
import io
import json
import logging
import os
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional, Sequence

import numpy as np

from .. import __version__
from ..autodiff import load_checkpoint
from ..data import OCCLUSION_TYPES, Dataset
from ..metrics import apk, mean_recall, pck2d, pck3d, records_from_arrays, yaw_error
from ..network import TrainConfig, init_network, make_scheme, predict, train
from ..synthgen.dataset import SPLITS, build_split, type_schedule
from ..synthgen.geometry import sample_instance
from .config import RunConfig, Variant

log = logging.getLogger(__name__)

CSV_COLUMNS = ("scheme", "seed", "occlusion_type", "metric", "alpha", "value")


def _atomic_write(path: str, text: str) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


# ---- datasets -----------------------------------------------------------------

def build_dataset(cfg: RunConfig, out_dir: str, workers: int = 1) -> dict[str, Dataset]:
    """Generate train/val/test files plus ``manifest.json``; reuse them when the manifest matches."""
    os.makedirs(out_dir, exist_ok=True)
    manifest_path = os.path.join(out_dir, "manifest.json")
    want = {"generator_version": __version__, "seed": cfg.data_seed, "config": repr(cfg.data)}
    if os.path.exists(manifest_path):
        with open(manifest_path) as fh:
            have = json.load(fh)
        if all(have.get(k) == v for k, v in want.items()) and all(
                os.path.exists(os.path.join(out_dir, f"{s}.dsd")) for s in SPLITS if cfg.data.count(s)):
            return {s: Dataset.load(os.path.join(out_dir, f"{s}.dsd")) for s in SPLITS if cfg.data.count(s)}
    splits = {}
    manifest = dict(want, splits={})
    for s in SPLITS:
        if cfg.data.count(s) == 0:
            continue
        ds = build_split(cfg.data, s, cfg.data_seed, workers)
        ds.save(os.path.join(out_dir, f"{s}.dsd"))
        codes = ds.occlusion_type
        manifest["splits"][s] = {
            "count": len(ds),
            "types": {t: int(np.count_nonzero(codes == i)) for i, t in enumerate(OCCLUSION_TYPES)},
            "models": [int(v) for v in np.unique(ds.meta["model_id"])],
        }
        splits[s] = ds
    _atomic_write(manifest_path, json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return splits


def restrict(ds: Dataset, types: Sequence[str]) -> Dataset:
    codes = [OCCLUSION_TYPES.index(t) for t in types]
    return ds.subset(np.flatnonzero(np.isin(ds.occlusion_type, codes)))


def quotas_for(train_cfg: TrainConfig, types: Sequence[str]) -> Optional[dict[str, int]]:
    """Keep the configured batch quotas for ``types``, rescaled to the batch size."""
    if not train_cfg.quotas:
        return None
    kept = [(t, q) for t, q in train_cfg.quotas.items() if t in types and q > 0]
    if not kept:
        return None
    sched = type_schedule(train_cfg.batch_size, kept)
    return {t: sched.count(t) for t, _ in kept if sched.count(t)}


# ---- evaluation ---------------------------------------------------------------

def evaluate(preds: dict[str, np.ndarray], scheme, ds: Dataset, cfg: RunConfig) -> list[dict]:
    """Metric rows for every occlusion type present plus ``all``."""
    size = ds.images.shape[-1]
    n_kp = ds.labels["vis"].shape[1]
    pairs = sample_instance(cfg.data.family).lr_pairs
    kp2d = preds[scheme.main_branch("kp2d")] if "kp2d" in scheme.concepts else None
    kp3d = preds[scheme.main_branch("kp3d")] if "kp3d" in scheme.concepts else None
    if "vis" in scheme.concepts:
        score = 1.0 - preds[scheme.main_branch("vis")].astype(np.float64)
    else:
        score = np.ones((len(ds), n_kp))
    gt_vis = ds.labels["vis"] < 0.5
    groups = [("all", np.arange(len(ds)))]
    for i, t in enumerate(OCCLUSION_TYPES):
        idx = np.flatnonzero(ds.occlusion_type == i)
        if len(idx):
            groups.append((t, idx))
    rows = []
    m = cfg.metrics
    for name, idx in groups:
        recs = records_from_arrays(
            kp2d[idx] if kp2d is not None else np.zeros((len(idx), n_kp * 2)),
            ds.labels["kp2d"][idx], gt_vis[idx], size,
            kp3d[idx] if kp3d is not None else None,
            ds.labels["kp3d"][idx] if kp3d is not None else None,
            score[idx],
        )

        def add(metric, alpha, value):
            rows.append({"occlusion_type": name, "metric": metric, "alpha": alpha, "value": value})

        if kp2d is not None and gt_vis[idx].any():
            for a in m.pck2d:
                add("pck2d", a, pck2d(recs, a))
            for a in m.apk:
                add("apk", a, apk(recs, a))
            for a in m.curve:
                add("pck2d_curve", a, pck2d(recs, a))
        if kp3d is not None:
            for a in m.pck3d:
                add("pck3d", a, pck3d(recs, a))
            if m.mean_recall:
                add("mean_recall", None, mean_recall(recs))
            if m.yaw:
                add("yaw_error", None, yaw_error(recs, pairs))
    return rows


def format_rows(rows: Iterable[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in rows:
        alpha = "NA" if r["alpha"] is None else f"{r['alpha']:g}"
        w.writerow([r["scheme"], r["seed"], r["occlusion_type"], r["metric"], alpha, f"{r['value']:.6f}"])
    return buf.getvalue()


def read_rows(path: str) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["seed"] = int(r["seed"])
        r["alpha"] = None if r["alpha"] == "NA" else float(r["alpha"])
        r["value"] = float(r["value"])
    return rows


# ---- the matrix ---------------------------------------------------------------

@dataclass
class CellResult:
    label: str
    seed: int
    status: str
    steps: int = 0
    error: str = ""


def cell_dir(out: str, label: str, seed: int) -> str:
    return os.path.join(out, "cells", label, f"seed{seed}")


def run_cell(cfg: RunConfig, scheme_kind: str, variant: Variant, seed: int, splits: dict[str, Dataset],
             out: str) -> CellResult:
    """Train and evaluate one cell; skipped when its metrics file already exists."""
    label = cfg.cell_label(scheme_kind, variant)
    d = cell_dir(out, label, seed)
    metrics_path = os.path.join(d, "metrics.csv")
    if os.path.exists(metrics_path):
        return CellResult(label, seed, "skipped")
    os.makedirs(d, exist_ok=True)
    h = cfg.hierarchy()
    kw = {"heads": cfg.dsn_heads} if scheme_kind == "dsn" else {}
    scheme = make_scheme(scheme_kind, h, cfg.arch.conv_layers, **kw)
    net = init_network(cfg.arch, scheme, h, seed)
    trainset = restrict(splits["train"], variant.types)
    tc = replace(cfg.train, seed=seed, quotas=quotas_for(cfg.train, variant.types),
                 checkpoint_path=os.path.join(d, "checkpoint.bin"))
    net, hist = train(net, trainset, splits.get("val"), h, tc)
    hist.write_csv(os.path.join(d, "history.csv"))
    preds = predict(net, splits["test"].images)
    rows = [dict(r, scheme=label, seed=seed) for r in evaluate(preds, scheme, splits["test"], cfg)]
    _atomic_write(metrics_path, format_rows(rows))
    return CellResult(label, seed, "trained", hist.steps)


def _run_cell_safe(args) -> CellResult:
    cfg, kind, variant, seed, splits, out = args
    try:
        return run_cell(cfg, kind, variant, seed, splits, out)
    except Exception as e:  # a failed cell must not stop the matrix
        label = cfg.cell_label(kind, variant)
        d = cell_dir(out, label, seed)
        os.makedirs(d, exist_ok=True)
        _atomic_write(os.path.join(d, "error.txt"), traceback.format_exc())
        return CellResult(label, seed, "failed", error=f"{type(e).__name__}: {e}")


@dataclass
class MatrixResult:
    rows: list[dict]
    cells: list[CellResult]
    csv_path: str
    svg_path: str
    report_path: str

    @property
    def steps(self) -> int:
        return sum(c.steps for c in self.cells)

    @property
    def failures(self) -> list[CellResult]:
        return [c for c in self.cells if c.status == "failed"]


def load_splits(cfg: RunConfig, out: str, workers: int = 1) -> dict[str, Dataset]:
    if cfg.data_dir:
        found = {s: os.path.join(cfg.data_dir, f"{s}.dsd") for s in SPLITS}
        found = {s: p for s, p in found.items() if os.path.exists(p)}
        missing = [s for s in ("train", "test") if s not in found]
        if missing:
            raise FileNotFoundError(f"data dir {cfg.data_dir} lacks {', '.join(m + '.dsd' for m in missing)}")
        return {s: Dataset.load(p) for s, p in found.items()}
    return build_dataset(cfg, os.path.join(out, "data"), workers)


def run_matrix(cfg: RunConfig, out: str, workers: int = 1, main_metric: tuple[str, float] = ("pck2d", 0.1)) -> MatrixResult:
    """Train every (variant, scheme, seed) cell, then consolidate CSV, curve SVG and ordering report."""
    os.makedirs(out, exist_ok=True)
    splits = load_splits(cfg, out, workers)
    jobs = [(cfg, k, v, s, splits, out) for k, v, s in cfg.cells()]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(workers) as ex:
            cells = list(ex.map(_run_cell_safe, jobs))
    else:
        cells = [_run_cell_safe(j) for j in jobs]
    for c in cells:
        if c.status == "failed":
            log.error("cell %s seed %d failed: %s", c.label, c.seed, c.error)
    return consolidate(cfg, out, cells, main_metric)


def consolidate(cfg: RunConfig, out: str, cells: Sequence[CellResult], main_metric=("pck2d", 0.1)) -> MatrixResult:
    rows: list[dict] = []
    for kind, variant, seed in cfg.cells():
        p = os.path.join(cell_dir(out, cfg.cell_label(kind, variant), seed), "metrics.csv")
        if os.path.exists(p):
            rows += read_rows(p)
    csv_path = os.path.join(out, "results.csv")
    _atomic_write(csv_path, format_rows(rows))
    svg_path = os.path.join(out, "pck2d_curve.svg")
    _atomic_write(svg_path, curve_svg_from_rows(rows, "pck2d_curve"))
    report_path = os.path.join(out, "report.txt")
    labels = list(dict.fromkeys(r["scheme"] for r in rows))
    text = ""
    if len(labels) >= 2:
        text = compare_schemes(rows, *main_metric).text()
    fails = [c for c in cells if c.status == "failed"]
    if fails:
        text += "".join(f"FAILED {c.label} seed {c.seed}: {c.error}\n" for c in fails)
    _atomic_write(report_path, text)
    return MatrixResult(rows, list(cells), csv_path, svg_path, report_path)


# ---- scheme comparison --------------------------------------------------------

@dataclass
class PairStat:
    a: str
    b: str
    median_diff: float
    wins: int
    n: int


@dataclass
class Comparison:
    metric: str
    alpha: Optional[float]
    occlusion_type: str
    medians: dict[str, float]
    values: dict[str, dict[int, float]]
    pairs: list[PairStat] = field(default_factory=list)
    higher_is_better: bool = True

    def pair(self, a: str, b: str) -> PairStat:
        for p in self.pairs:
            if (p.a, p.b) == (a, b):
                return p
        raise KeyError((a, b))

    def claims(self) -> list[tuple[str, str]]:
        """Ordered pairs ``(a, b)`` whose median favours ``a`` strictly."""
        sign = 1 if self.higher_is_better else -1
        return [(p.a, p.b) for p in self.pairs if sign * (self.medians[p.a] - self.medians[p.b]) > 0]

    def text(self) -> str:
        head = f"{self.metric}" + (f"@{self.alpha:g}" if self.alpha is not None else "") + f" [{self.occlusion_type}]"
        lines = [f"metric {head}"]
        for s, m in self.medians.items():
            lines.append(f"median {s}: {m:.6f}")
        for p in self.pairs:
            lines.append(f"pair {p.a} vs {p.b}: median diff {p.median_diff:+.6f}, wins {p.wins}/{p.n}")
        for a, b in self.claims():
            lines.append(f"claim {a} > {b}")
        if not self.claims():
            lines.append("no ordering claimed")
        return "\n".join(lines) + "\n"


def compare_schemes(rows: Sequence[dict], metric: str, alpha: Optional[float] = None,
                    occlusion_type: str = "all", higher_is_better: bool = True) -> Comparison:
    """Per-scheme medians over seeds and paired per-seed differences for every scheme pair."""
    vals: dict[str, dict[int, float]] = {}
    for r in rows:
        if r["metric"] != metric or r["occlusion_type"] != occlusion_type:
            continue
        if (alpha is None) != (r["alpha"] is None) or (alpha is not None and abs(r["alpha"] - alpha) > 1e-12):
            continue
        vals.setdefault(r["scheme"], {})[r["seed"]] = r["value"]
    if len(vals) < 2:
        raise ValueError(f"need at least two schemes with {metric} rows, found {sorted(vals)}")
    seed_sets = {s: frozenset(v) for s, v in vals.items()}
    if len(set(seed_sets.values())) != 1:
        raise ValueError(f"schemes were run on different seed sets: { {k: sorted(v) for k, v in seed_sets.items()} }")
    seeds = sorted(next(iter(seed_sets.values())))
    med = {s: float(np.median([v[k] for k in seeds])) for s, v in vals.items()}
    cmp = Comparison(metric, alpha, occlusion_type, med, vals, higher_is_better=higher_is_better)
    sign = 1 if higher_is_better else -1
    names = list(vals)
    for i, a in enumerate(names):
        for b in names:
            if a == b:
                continue
            diffs = [vals[a][k] - vals[b][k] for k in seeds]
            wins = sum(1 for d in diffs if sign * d > 0)
            cmp.pairs.append(PairStat(a, b, float(np.median(diffs)), wins, len(seeds)))
    return cmp


# ---- SVG ----------------------------------------------------------------------

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f")


def emit_pck_curve(curves: dict[str, tuple[Sequence[float], Sequence[float]]], title: str = "PCK",
                   width: int = 480, height: int = 360) -> str:
    """Plain SVG 1.1 line chart, one polyline per scheme; numbers printed with 4 decimals."""
    if not curves:
        raise ValueError("no curves to draw")
    ml, mr, mt, mb = 56.0, 120.0, 30.0, 44.0
    pw, ph = width - ml - mr, height - mt - mb
    xs_all = [x for xs, _ in curves.values() for x in xs]
    x0, x1 = min(0.0, min(xs_all)), max(xs_all)
    x1 = x1 if x1 > x0 else x0 + 1.0

    def X(v):
        return ml + (v - x0) / (x1 - x0) * pw

    def Y(v):
        return mt + (1.0 - v) * ph

    f = lambda v: f"{v:.4f}"
    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<text x="{f(ml + pw / 2)}" y="18" text-anchor="middle" font-family="sans-serif" font-size="13">{title}</text>',
        f'<line x1="{f(ml)}" y1="{f(mt + ph)}" x2="{f(ml + pw)}" y2="{f(mt + ph)}" stroke="black"/>',
        f'<line x1="{f(ml)}" y1="{f(mt)}" x2="{f(ml)}" y2="{f(mt + ph)}" stroke="black"/>',
    ]
    for i in range(6):
        v = i / 5
        out.append(f'<text x="{f(ml - 6)}" y="{f(Y(v) + 4)}" text-anchor="end" font-family="sans-serif" '
                   f'font-size="10">{v:.1f}</text>')
        xv = x0 + (x1 - x0) * i / 5
        out.append(f'<text x="{f(X(xv))}" y="{f(mt + ph + 14)}" text-anchor="middle" font-family="sans-serif" '
                   f'font-size="10">{xv:.2f}</text>')
    out.append(f'<text x="{f(ml + pw / 2)}" y="{f(height - 8)}" text-anchor="middle" font-family="sans-serif" '
               f'font-size="11">alpha</text>')
    out.append(f'<text x="14" y="{f(mt + ph / 2)}" text-anchor="middle" font-family="sans-serif" font-size="11" '
               f'transform="rotate(-90 14 {f(mt + ph / 2)})">accuracy</text>')
    for k, (name, (xs, ys)) in enumerate(curves.items()):
        color = PALETTE[k % len(PALETTE)]
        pts = " ".join(f"{f(X(x))},{f(Y(y))}" for x, y in zip(xs, ys))
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        ly = mt + 14 * k + 8
        out.append(f'<line x1="{f(ml + pw + 10)}" y1="{f(ly)}" x2="{f(ml + pw + 28)}" y2="{f(ly)}" stroke="{color}" '
                   f'stroke-width="1.5"/>')
        out.append(f'<text x="{f(ml + pw + 32)}" y="{f(ly + 4)}" font-family="sans-serif" font-size="10">{name}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def curve_svg_from_rows(rows: Sequence[dict], metric: str = "pck2d_curve", occlusion_type: str = "all") -> str:
    """Median-over-seeds curve per scheme from consolidated rows."""
    by: dict[str, dict[float, list[float]]] = {}
    for r in rows:
        if r["metric"] == metric and r["occlusion_type"] == occlusion_type:
            by.setdefault(r["scheme"], {}).setdefault(r["alpha"], []).append(r["value"])
    if not by:
        return emit_pck_curve({"none": ([0.0, 1.0], [0.0, 0.0])}, "PCK (no data)")
    curves = {}
    for s, d in by.items():
        xs = sorted(d)
        curves[s] = (xs, [float(np.median(d[x])) for x in xs])
    return emit_pck_curve(curves, "2D PCK vs alpha (median over seeds)")
