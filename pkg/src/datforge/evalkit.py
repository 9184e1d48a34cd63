"""Detection metrics (IoU, greedy matching, all-point AP, mAP@50), pseudo-label audits and reports."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence
from xml.sax.saxutils import escape

import numpy as np

from datforge.detector import Detection, box_iou
from datforge.errors import ConsistencyError, FormatError
from datforge.scenegen import BoxLabel

METRICS_COLUMNS = ("run_id", "iter", "class", "ap50", "map50")
AUDIT_COLUMNS = ("class", "gt_count", "pl_confident", "correct", "wrong_class", "unmatched", "ratio")


def iou(a: BoxLabel, b: BoxLabel) -> float:
    return box_iou(a, b)


@dataclass
class MatchResult:
    det_match: list[int | None]
    det_class_correct: list[bool]
    gt_covered: list[bool]


def _ranked(dets: Sequence[Detection]) -> list[int]:
    return sorted(range(len(dets)), key=lambda i: (-dets[i].confidence, i))


def match_detections(dets: Sequence[Detection], gts: Sequence[BoxLabel], iou_threshold: float = 0.5,
                     class_aware: bool = True) -> MatchResult:
    """Greedy matching in descending confidence; every ground truth is used at most once."""
    det_match: list[int | None] = [None] * len(dets)
    correct = [False] * len(dets)
    covered = [False] * len(gts)
    for i in _ranked(dets):
        d = dets[i]
        best, best_iou = None, iou_threshold
        for j, g in enumerate(gts):
            if covered[j] or (class_aware and g.class_id != d.class_id):
                continue
            ov = box_iou(d.box, g)
            if ov >= best_iou and (best is None or ov > best_iou):
                best, best_iou = j, ov
        if best is not None:
            covered[best] = True
            det_match[i] = best
            correct[i] = gts[best].class_id == d.class_id
    return MatchResult(det_match, correct, covered)


def _envelope_ap(recall: np.ndarray, precision: np.ndarray) -> float:
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    idx = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def average_precision(dets_all_images: Sequence[Sequence[Detection]], gts_all_images: Sequence[Sequence[BoxLabel]],
                      class_id: int, iou_threshold: float = 0.5) -> float | None:
    """All-point interpolated AP for one class; ``None`` when the class has neither gts nor dets."""
    scores: list[float] = []
    flags: list[bool] = []
    gt_count = 0
    for dets, gts in zip(dets_all_images, gts_all_images):
        cdets = [d for d in dets if d.class_id == class_id]
        cgts = [g for g in gts if g.class_id == class_id]
        gt_count += len(cgts)
        m = match_detections(cdets, cgts, iou_threshold)
        scores.extend(d.confidence for d in cdets)
        flags.extend(x is not None for x in m.det_match)
    if gt_count == 0:
        return None if not scores else 0.0
    if not scores:
        return 0.0
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    tp = np.array([flags[i] for i in order], dtype=np.float64)
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1.0 - tp)
    return _envelope_ap(ctp / gt_count, ctp / (ctp + cfp))


def map50(dets: Sequence[Sequence[Detection]], gts: Sequence[Sequence[BoxLabel]], class_count: int) -> dict:
    per_class = [average_precision(dets, gts, c, 0.5) for c in range(class_count)]
    defined = [ap for ap in per_class if ap is not None]
    return {"per_class_ap": per_class, "map": float(np.mean(defined)) if defined else math.nan}


# -- pseudo-label audit ---------------------------------------------------

@dataclass
class AuditRow:
    class_name: str
    gt_count: int = 0
    confident_pl_count: int = 0
    correct_class_matches: int = 0
    wrong_class_matches: int = 0
    unmatched_fp: int = 0

    @property
    def ratio(self) -> float:
        return self.confident_pl_count / max(self.gt_count, 1)


@dataclass
class AuditReport:
    rows: list[AuditRow] = field(default_factory=list)

    def ratios(self) -> list[float]:
        return [r.ratio for r in self.rows]


def audit_pseudo_labels(pseudo_labels: Mapping[int, Sequence[Detection]], gt_labels: Mapping[int, Sequence[BoxLabel]],
                        class_names: Sequence[str], iou_threshold: float = 0.5, delta: float = 0.8) -> AuditReport:
    """Count confident pseudo-labels per predicted class and split them by match outcome."""
    missing = set(gt_labels) - set(pseudo_labels)
    extra = set(pseudo_labels) - set(gt_labels)
    if missing or extra:
        detail = f"missing ids {sorted(missing)[:5]}" if missing else f"unknown ids {sorted(extra)[:5]}"
        raise ConsistencyError(f"pseudo-label and ground-truth image ids differ: {detail}")
    rows = [AuditRow(name) for name in class_names]
    for image_id in sorted(gt_labels):
        gts = list(gt_labels[image_id])
        for g in gts:
            rows[g.class_id].gt_count += 1
        confident = [d for d in pseudo_labels[image_id] if d.confidence >= delta]
        m = match_detections(confident, gts, iou_threshold, class_aware=False)
        for d, match, ok in zip(confident, m.det_match, m.det_class_correct):
            row = rows[d.class_id]
            row.confident_pl_count += 1
            if match is None:
                row.unmatched_fp += 1
            elif ok:
                row.correct_class_matches += 1
            else:
                row.wrong_class_matches += 1
    return AuditReport(rows)


# -- reports --------------------------------------------------------------

@dataclass
class MetricRow:
    run_id: str
    iteration: int
    class_name: str
    ap50: float | None
    map50: float


def metric_rows(run_id: str, iteration: int, result: dict, class_names: Sequence[str]) -> list[MetricRow]:
    return [MetricRow(run_id, iteration, name, ap, result["map"]) for name, ap in zip(class_names, result["per_class_ap"])]


def _fmt(x) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    return f"{x:.6f}" if isinstance(x, float) else str(x)


def write_metrics_csv(path, rows: Sequence[MetricRow]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_COLUMNS)
        for r in rows:
            w.writerow([r.run_id, r.iteration, r.class_name, _fmt(r.ap50), _fmt(r.map50)])


def read_metrics_csv(path) -> list[MetricRow]:
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for rec in csv.DictReader(fh):
            rows.append(MetricRow(rec["run_id"], int(rec["iter"]), rec["class"],
                                  float(rec["ap50"]) if rec["ap50"] else None,
                                  float(rec["map50"]) if rec["map50"] else math.nan))
    return rows


def write_audit_csv(path, report: AuditReport) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(AUDIT_COLUMNS)
        for r in report.rows:
            w.writerow([r.class_name, r.gt_count, r.confident_pl_count, r.correct_class_matches,
                        r.wrong_class_matches, r.unmatched_fp, _fmt(float(r.ratio))])


def read_audit_csv(path) -> AuditReport:
    rows = []
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            for rec in csv.DictReader(fh):
                rows.append(AuditRow(rec["class"], int(rec["gt_count"]), int(rec["pl_confident"]), int(rec["correct"]),
                                     int(rec["wrong_class"]), int(rec["unmatched"])))
    except (KeyError, ValueError) as exc:
        raise FormatError(path, f"malformed audit csv: {exc}") from exc
    return AuditReport(rows)


def bar_chart_svg(title: str, labels: Sequence[str], values: Sequence[float], ymax: float = 1.0) -> str:
    width, height, pad = 60 + 70 * max(len(labels), 1), 260, 40
    plot_h = height - 2 * pad
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>',
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - 10}" y2="{height - pad}" stroke="black"/>',
    ]
    for i, (label, value) in enumerate(zip(labels, values)):
        v = 0.0 if value is None or math.isnan(value) else float(value)
        bar_h = plot_h * min(max(v / ymax, 0.0), 1.0)
        x = pad + 10 + 70 * i
        parts.append(f'<rect x="{x}" y="{height - pad - bar_h:.2f}" width="50" height="{bar_h:.2f}" fill="#4a78b5"/>')
        parts.append(f'<text x="{x + 25}" y="{height - pad + 15}" text-anchor="middle" font-size="11">{escape(label)}</text>')
        parts.append(f'<text x="{x + 25}" y="{height - pad - bar_h - 4:.2f}" text-anchor="middle" font-size="10">{v:.3f}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def line_chart_svg(title: str, xs: Sequence[float], series: Mapping[str, Sequence[float]]) -> str:
    width, height, pad = 480, 260, 40
    colours = ("#4a78b5", "#d9822b", "#3a9a5b", "#b54a4a")
    allv = [v for s in series.values() for v in s if v is not None and math.isfinite(v)]
    lo, hi = (min(allv), max(allv)) if allv else (0.0, 1.0)
    hi = hi if hi > lo else lo + 1.0
    x0, x1 = (min(xs), max(xs)) if xs else (0.0, 1.0)
    x1 = x1 if x1 > x0 else x0 + 1.0

    def px(x, y):
        return pad + (x - x0) / (x1 - x0) * (width - 2 * pad), height - pad - (y - lo) / (hi - lo) * (height - 2 * pad)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>',
    ]
    for k, (name, ys) in enumerate(series.items()):
        pts = " ".join("{:.2f},{:.2f}".format(*px(x, y)) for x, y in zip(xs, ys) if y is not None and math.isfinite(y))
        colour = colours[k % len(colours)]
        parts.append(f'<polyline fill="none" stroke="{colour}" points="{pts}"/>')
        parts.append(f'<text x="{width - pad}" y="{40 + 14 * k}" text-anchor="end" font-size="11" fill="{colour}">{escape(name)}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def emit_report(out_dir, metrics: Sequence[MetricRow] | None = None, audit: AuditReport | None = None) -> list[Path]:
    """Write metrics.csv / audit.csv plus SVG bar charts; returns written paths."""
    out_dir = Path(out_dir)
    written = []
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        if metrics is not None:
            path = out_dir / "metrics.csv"
            write_metrics_csv(path, metrics)
            written.append(path)
            if metrics:
                last_iter = {}
                for r in metrics:
                    last_iter[(r.run_id, r.class_name)] = r
                labels = [f"{rid}:{cls}" for rid, cls in last_iter]
                values = [r.ap50 if r.ap50 is not None else math.nan for r in last_iter.values()]
                chart = out_dir / "metrics.svg"
                chart.write_text(bar_chart_svg("AP50 per class", labels, values), encoding="utf-8")
                written.append(chart)
        if audit is not None:
            path = out_dir / "audit.csv"
            write_audit_csv(path, audit)
            written.append(path)
            chart = out_dir / "audit.svg"
            ratios = audit.ratios()
            ymax = max([1.0] + ratios)
            chart.write_text(bar_chart_svg("confident pseudo-label ratio", [r.class_name for r in audit.rows], ratios, ymax),
                             encoding="utf-8")
            written.append(chart)
    except OSError as exc:
        raise FormatError(getattr(exc, "filename", None) or out_dir, f"report write failed: {exc}") from exc
    return written
