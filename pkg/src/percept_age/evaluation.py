"""Error metrics, attribute-stratified tables, age-window curves, reports."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

from .dataset import AGE_MAX, ATTRIBUTE_BLOCKS, AnnotationRecord, Observer


def mae(preds, truths) -> float:
    p = np.asarray(preds, dtype=np.float64).reshape(-1)
    t = np.asarray(truths, dtype=np.float64).reshape(-1)
    if p.shape != t.shape:
        raise ValueError(f"mae: length mismatch {p.size} vs {t.size}")
    if p.size == 0:
        raise ValueError("mae: empty input")
    return float(np.mean(np.abs(p - t)))


# ------------------------------------------------------------- predictions


@dataclass
class PredictionSet:
    image_ids: list[str]
    apparent_pred: np.ndarray
    real_pred: np.ndarray | None = None

    def __post_init__(self):
        self.apparent_pred = np.asarray(self.apparent_pred, dtype=np.float64)
        if self.real_pred is not None:
            self.real_pred = np.asarray(self.real_pred, dtype=np.float64)
        if len(set(self.image_ids)) != len(self.image_ids):
            raise ValueError("duplicate image_id in prediction set")
        n = len(self.image_ids)
        if self.apparent_pred.shape != (n,) or (self.real_pred is not None and self.real_pred.shape != (n,)):
            raise ValueError("prediction arrays must have one entry per image_id")

    def __len__(self) -> int:
        return len(self.image_ids)

    def real_or_single(self) -> np.ndarray:
        """Real-age predictions; a single-head model's only output otherwise."""
        return self.apparent_pred if self.real_pred is None else self.real_pred

    def aligned(self, records: Sequence[AnnotationRecord]) -> "PredictionSet":
        """Reorder to follow ``records``; every record id must be present."""
        pos = {k: i for i, k in enumerate(self.image_ids)}
        try:
            idx = np.array([pos[r.image_id] for r in records], dtype=np.intp)
        except KeyError as exc:
            raise ValueError(f"no prediction for image_id {exc.args[0]!r}") from None
        return PredictionSet([self.image_ids[i] for i in idx], self.apparent_pred[idx],
                             None if self.real_pred is None else self.real_pred[idx])

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["image_id", "apparent_pred", "real_pred"])
            for i, k in enumerate(self.image_ids):
                real = "" if self.real_pred is None else repr(float(self.real_pred[i]))
                w.writerow([k, repr(float(self.apparent_pred[i])), real])

    @classmethod
    def from_csv(cls, path) -> "PredictionSet":
        with Path(path).open(newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != ["image_id", "apparent_pred", "real_pred"]:
                raise ValueError(f"{path}: bad prediction header {header}")
            rows = [r for r in reader if r]
        ids = [r[0] for r in rows]
        app = [float(r[1]) for r in rows]
        has_real = [bool(r[2].strip()) for r in rows]
        if any(has_real) and not all(has_real):
            raise ValueError(f"{path}: real_pred present for only some rows")
        real = [float(r[2]) for r in rows] if rows and all(has_real) else None
        return cls(ids, np.array(app), None if real is None else np.array(real))


# ----------------------------------------------------------- stratification


@dataclass
class StratumRow:
    attribute: str
    category: str
    n: int
    train_pct: float | None
    mae_real: float | None  # None marks an empty stratum
    mae_apparent: float | None


def stratify(preds: PredictionSet, records: Sequence[AnnotationRecord], attribute: str,
             train_records: Sequence[AnnotationRecord] | None = None) -> list[StratumRow]:
    """Per-category counts and MAEs for one attribute, in category order."""
    if attribute not in ATTRIBUTE_BLOCKS:
        raise ValueError(f"unknown attribute {attribute!r}")
    preds = preds.aligned(records)
    real_pred = preds.real_or_single()
    real_true = np.array([r.real_age for r in records])
    app_true = np.array([r.apparent_mean for r in records])
    cats = np.array([r.attribute(attribute).value for r in records], dtype=object)
    train_cats = None
    if train_records:
        train_cats = [r.attribute(attribute).value for r in train_records]
    rows = []
    for member in ATTRIBUTE_BLOCKS[attribute]:
        sel = cats == member.value
        n = int(sel.sum())
        pct = None
        if train_cats is not None:
            pct = 100.0 * sum(c == member.value for c in train_cats) / len(train_cats)
        if n == 0:
            rows.append(StratumRow(attribute, member.value, 0, pct, None, None))
            continue
        rows.append(StratumRow(attribute, member.value, n, pct,
                               mae(real_pred[sel], real_true[sel]), mae(preds.apparent_pred[sel], app_true[sel])))
    return rows


# ------------------------------------------------------------ curves

HEADS = ("real", "apparent")


@dataclass
class CurvePoint:
    center: float
    mean_abs_error: float
    count: int


def _head_errors(preds: PredictionSet, records, head: str):
    preds = preds.aligned(records)
    if head == "real":
        truth = np.array([r.real_age for r in records])
        return np.abs(preds.real_or_single() - truth), truth
    if head == "apparent":
        truth = np.array([r.apparent_mean for r in records])
        return np.abs(preds.apparent_pred - truth), truth
    raise ValueError(f"head must be one of {HEADS}, got {head!r}")


def error_by_age_window(preds: PredictionSet, records, head: str = "real", window: float = 5.0) -> list[CurvePoint]:
    """Mean |error| over samples whose true age lies within +-window/2 of each integer center.

    Samples are binned by the ground-truth age matching ``head``; empty
    windows are omitted.
    """
    if window <= 0:
        raise ValueError("window must be > 0")
    err, truth = _head_errors(preds, records, head)
    half = window / 2.0
    curve = []
    for c in range(int(AGE_MAX) + 1):
        sel = np.abs(truth - c) <= half
        n = int(sel.sum())
        if n:
            curve.append(CurvePoint(float(c), float(np.mean(err[sel])), n))
    return curve


def age_histogram(records, label: str = "real", bin_width: float = 1.0) -> dict[float, int]:
    """Counts keyed by bin start (``floor(age / bin_width) * bin_width``)."""
    if label not in HEADS:
        raise ValueError(f"label must be one of {HEADS}")
    if bin_width <= 0:
        raise ValueError("bin_width must be > 0")
    ages = np.array([r.real_age if label == "real" else r.apparent_mean for r in records], dtype=np.float64)
    keys = np.floor(ages / bin_width) * bin_width
    uniq, counts = np.unique(keys, return_counts=True)
    return {float(k): int(c) for k, c in zip(uniq, counts)}


# ------------------------------------------------------------ observer


@dataclass
class ObserverReport:
    matched: dict[str, float]  # observer -> MAE vs that observer's labels
    cross: dict[str, float]  # observer -> MAE of that observer's predictions vs the other's labels
    n: int


def observer_eval(preds_by_observer: dict[Observer, np.ndarray], records: Sequence[AnnotationRecord]) -> ObserverReport:
    """Score apparent predictions made under each observer-gender input.

    ``preds_by_observer[g][i]`` is the apparent prediction for
    ``records[i]`` with the observer block set to ``g``.
    """
    if set(preds_by_observer) != set(Observer):
        raise ValueError("need predictions for both observer genders")
    for r in records:
        if r.apparent_by_observer is None:
            raise ValueError(f"{r.image_id}: missing per-observer apparent labels")
    labels = {g: np.array([r.apparent_by_observer[g] for r in records]) for g in Observer}
    other = {Observer.FEMALE: Observer.MALE, Observer.MALE: Observer.FEMALE}
    matched = {g.value: mae(preds_by_observer[g], labels[g]) for g in Observer}
    cross = {g.value: mae(preds_by_observer[g], labels[other[g]]) for g in Observer}
    return ObserverReport(matched, cross, len(records))


# -------------------------------------------------------------- reports


@dataclass
class EvalReport:
    n: int
    mae_apparent: float
    mae_real: float
    strata: list[StratumRow] = field(default_factory=list)
    curves: dict[str, list[CurvePoint]] = field(default_factory=dict)
    histograms: dict[str, dict[float, int]] = field(default_factory=dict)
    observer: ObserverReport | None = None

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "mae": {"apparent": self.mae_apparent, "real": self.mae_real},
            "strata": [asdict(s) for s in self.strata],
            "curves": {k: [asdict(p) for p in v] for k, v in self.curves.items()},
            "histograms": {k: [[b, c] for b, c in sorted(v.items())] for k, v in self.histograms.items()},
            "observer": None if self.observer is None else asdict(self.observer),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(
            n=d["n"],
            mae_apparent=d["mae"]["apparent"],
            mae_real=d["mae"]["real"],
            strata=[StratumRow(**s) for s in d["strata"]],
            curves={k: [CurvePoint(**p) for p in v] for k, v in d["curves"].items()},
            histograms={k: {float(b): int(c) for b, c in v} for k, v in d["histograms"].items()},
            observer=None if d.get("observer") is None else ObserverReport(**d["observer"]),
        )


def build_report(preds: PredictionSet, records: Sequence[AnnotationRecord],
                 train_records: Sequence[AnnotationRecord] | None = None,
                 observer: ObserverReport | None = None, window: float = 5.0) -> EvalReport:
    aligned = preds.aligned(records)
    real_true = [r.real_age for r in records]
    app_true = [r.apparent_mean for r in records]
    strata = []
    for attr in ATTRIBUTE_BLOCKS:
        strata += stratify(aligned, records, attr, train_records)
    hist_src = train_records if train_records else records
    return EvalReport(
        n=len(records),
        mae_apparent=mae(aligned.apparent_pred, app_true),
        mae_real=mae(aligned.real_or_single(), real_true),
        strata=strata,
        curves={h: error_by_age_window(aligned, records, h, window) for h in HEADS},
        histograms={h: age_histogram(hist_src, h) for h in HEADS},
        observer=observer,
    )


STRATA_HEADER = ["attribute", "category", "train_pct", "n", "mae_real", "mae_apparent"]


def _cell(v) -> str:
    return "" if v is None else repr(v)


def emit_report(report: EvalReport, out_dir) -> list[Path]:
    """Write report.json, attribute_table.csv, error curves / histograms as CSV + SVG."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    p = out / "report.json"
    p.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    written.append(p)

    p = out / "attribute_table.csv"
    with p.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(STRATA_HEADER)
        for s in report.strata:
            w.writerow([s.attribute, s.category, _cell(s.train_pct), s.n, _cell(s.mae_real), _cell(s.mae_apparent)])
    written.append(p)

    for head, curve in report.curves.items():
        p = out / f"error_curve_{head}.csv"
        with p.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["center", "mean_abs_error", "count"])
            for pt in curve:
                w.writerow([repr(pt.center), repr(pt.mean_abs_error), pt.count])
        written.append(p)
        written.append(emit_plot({head: curve}, out / f"error_curve_{head}.svg",
                                 title=f"{head} age: mean absolute error by age window"))
    for label, hist in report.histograms.items():
        written.append(emit_plot(hist, out / f"histogram_{label}.svg", title=f"{label} age distribution"))
    return written


# ------------------------------------------------------------------- SVG

_W, _H, _PAD = 640, 400, 56
_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd")


def _axis(xmax: float, ymax: float, xlabel: str, ylabel: str, title: str) -> list[str]:
    x0, y0, x1, y1 = _PAD, _H - _PAD, _W - _PAD / 2, _PAD / 2
    parts = [
        f'<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>',
        f'<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>',
        f'<text x="{(x0 + x1) / 2:.1f}" y="{_H - 14}" text-anchor="middle" font-size="13">{escape(xlabel)}</text>',
        f'<text x="16" y="{(y0 + y1) / 2:.1f}" text-anchor="middle" font-size="13" '
        f'transform="rotate(-90 16 {(y0 + y1) / 2:.1f})">{escape(ylabel)}</text>',
        f'<text x="{_W / 2:.1f}" y="18" text-anchor="middle" font-size="14">{escape(title)}</text>',
    ]
    for k in range(6):
        xv = xmax * k / 5
        xp = x0 + (x1 - x0) * k / 5
        parts.append(f'<text x="{xp:.1f}" y="{y0 + 16}" text-anchor="middle" font-size="11">{xv:.0f}</text>')
        yv = ymax * k / 5
        yp = y0 - (y0 - y1) * k / 5
        parts.append(f'<text x="{x0 - 6}" y="{yp + 4:.1f}" text-anchor="end" font-size="11">{yv:.3g}</text>')
    return parts


def _scale_xy(x, y, xmax, ymax):
    x0, y0, x1, y1 = _PAD, _H - _PAD, _W - _PAD / 2, _PAD / 2
    return x0 + (x1 - x0) * x / xmax, y0 - (y0 - y1) * y / ymax


def emit_plot(data, path, title: str = "") -> Path:
    """Render error curves (``{name: [CurvePoint]}``) as polylines, or a histogram (``{bin: count}``) as bars."""
    path = Path(path)
    is_curves = bool(data) and isinstance(next(iter(data.values())), list)
    xmax = AGE_MAX
    body = []
    if is_curves:
        ymax = max((pt.mean_abs_error for c in data.values() for pt in c), default=1.0)
        ymax = ymax * 1.1 if ymax > 0 else 1.0
        body += _axis(xmax, ymax, "age (years)", "mean absolute error (years)", title)
        for i, (name, curve) in enumerate(data.items()):
            pts = " ".join("%.2f,%.2f" % _scale_xy(pt.center, pt.mean_abs_error, xmax, ymax) for pt in curve)
            body.append(f'<polyline fill="none" stroke="{_COLORS[i % len(_COLORS)]}" stroke-width="2" '
                        f'points="{pts}"><title>{escape(name)}</title></polyline>')
    else:
        ymax = max(data.values(), default=1) * 1.1 or 1.0
        body += _axis(xmax, ymax, "age (years)", "count", title)
        widths = sorted(data)
        step = min(np.diff(widths)) if len(widths) > 1 else 1.0
        for b, c in sorted(data.items()):
            xa, ya = _scale_xy(b, c, xmax, ymax)
            xb, yb = _scale_xy(b + step, 0, xmax, ymax)
            body.append(f'<rect x="{xa:.2f}" y="{ya:.2f}" width="{max(xb - xa - 0.5, 0.5):.2f}" '
                        f'height="{yb - ya:.2f}" fill="{_COLORS[0]}"/>')
    svg = (f'<?xml version="1.0" encoding="UTF-8"?>\n'
           f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" viewBox="0 0 {_W} {_H}">\n'
           + "\n".join(body) + "\n</svg>\n")
    path.write_text(svg)
    return path


def format_table(rows: Sequence[Sequence], header: Sequence[str]) -> str:
    cells = [[str(h) for h in header]] + [[_fmt(v) for v in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)) for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def _fmt(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.3f}"
    return str(v)
