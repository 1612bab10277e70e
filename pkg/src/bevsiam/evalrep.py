"""One-pass-evaluation metrics, best-proposal upper-bound curves, and
report emission.

Success is the area under the IoU success curve (thresholds 0, 0.01, ..,
1.0) times 100; Precision the area under the center-distance curve
(thresholds 0, 0.02, .., 2.0 m) times 100. Frames with IoU exactly 1
(resp. distance exactly 0) count at every threshold so that perfect
tracking scores exactly 100 while an all-miss run scores exactly 0.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geom import Box3d, center_distance, oriented_iou, project_to_bev
from .ioutil import atomic_write_text

IOU_THRESHOLDS = np.arange(101) / 100.0
DIST_THRESHOLDS = np.arange(101) * 0.02


@dataclass(frozen=True)
class OpeSummary:
    success: float
    precision: float

    def formatted(self) -> str:
        return f"{self.success:.1f} / {self.precision:.1f}"


@dataclass
class ProposalCurve:
    """Per-candidate-count metrics: the per-frame best-proposal upper bound
    (max IoU / min distance envelope) and the ranked-selector trajectory."""

    counts: list
    oracle: list  # OpeSummary per count
    selector: list  # OpeSummary per count


def ope_from_iou_dist(ious, dists, dist_range: float = 2.0) -> OpeSummary:
    ious = np.asarray(ious, dtype=float)
    dists = np.asarray(dists, dtype=float)
    if ious.size == 0 or ious.shape != dists.shape:
        raise ValueError("need matching non-empty iou/distance sequences")
    taus = IOU_THRESHOLDS
    deltas = DIST_THRESHOLDS * (dist_range / 2.0)
    succ = (ious[:, None] > taus) | (ious[:, None] == 1.0)
    prec = (dists[:, None] < deltas) | (dists[:, None] == 0.0)
    return OpeSummary(
        success=float(succ.mean() * 100.0),
        precision=float(prec.mean() * 100.0),
    )


def ope_metrics(predictions, ground_truth, dist_range: float = 2.0) -> OpeSummary:
    """OPE Success/Precision of predicted boxes against ground truth."""
    predictions = list(predictions)
    ground_truth = list(ground_truth)
    if len(predictions) != len(ground_truth) or not predictions:
        raise ValueError(
            f"prediction/ground-truth length mismatch: "
            f"{len(predictions)} vs {len(ground_truth)}"
        )
    ious = []
    dists = []
    for pred, gt in zip(predictions, ground_truth):
        pr = project_to_bev(pred) if isinstance(pred, Box3d) else pred
        gr = project_to_bev(gt) if isinstance(gt, Box3d) else gt
        ious.append(oriented_iou(pr, gr))
        dists.append(center_distance(pr, gr))
    return ope_from_iou_dist(ious, dists, dist_range)


def _per_frame_tables(streams, gt_rects):
    """IoU and distance of every recorded proposal, per frame."""
    iou_rows = []
    dist_rows = []
    for proposals, gt in zip(streams, gt_rects):
        ious = np.array([oriented_iou(rect, gt) for rect, _ in proposals])
        dists = np.array([center_distance(rect, gt) for rect, _ in proposals])
        iou_rows.append(ious)
        dist_rows.append(dists)
    return iou_rows, dist_rows


def best_proposal_curve(streams, gt_rects, counts) -> list:
    """Upper-bound OPE per candidate count: within the first C proposals of
    each frame take the best IoU and the best center distance."""
    iou_rows, dist_rows = _per_frame_tables(streams, gt_rects)
    out = []
    for c in counts:
        ious = [row[: min(c, row.size)].max() if row.size else 0.0 for row in iou_rows]
        dists = [row[: min(c, row.size)].min() if row.size else np.inf for row in dist_rows]
        out.append(ope_from_iou_dist(ious, dists))
    return out


def selector_curve(streams, gt_rects, counts) -> list:
    """OPE of the trajectory induced by picking the highest-scored
    candidate among the first C proposals of each frame."""
    iou_rows, dist_rows = _per_frame_tables(streams, gt_rects)
    score_rows = [np.array([s for _, s in proposals]) for proposals in streams]
    out = []
    for c in counts:
        ious = []
        dists = []
        for scores, ious_row, dists_row in zip(score_rows, iou_rows, dist_rows):
            k = min(c, scores.size)
            pick = int(np.argmax(scores[:k])) if k else 0
            ious.append(ious_row[pick] if k else 0.0)
            dists.append(dists_row[pick] if k else np.inf)
        out.append(ope_from_iou_dist(ious, dists))
    return out


def proposal_curves(streams, gt_rects, counts) -> ProposalCurve:
    return ProposalCurve(
        counts=list(counts),
        oracle=best_proposal_curve(streams, gt_rects, counts),
        selector=selector_curve(streams, gt_rects, counts),
    )


# -- report emission ---------------------------------------------------------

_SVG_COLORS = ("#d62728", "#1f77b4", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def emit_report(runs, out_dir) -> dict:
    """Write ``report.txt``, ``curves.csv``, and ``curves.svg``.

    ``runs`` is a list of (label, OpeSummary | ProposalCurve). Summary runs
    become single table rows; curves additionally land in the CSV and the
    plot (solid lines for the oracle bound, dashed for the selector).
    """
    if not runs:
        raise ValueError("emit_report requires at least one run")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    lines = []
    csv_lines = ["label,C,success,precision,kind"]
    curve_runs = []
    for label, run in runs:
        if isinstance(run, OpeSummary):
            lines.append(f"{label}  {run.formatted()}")
            continue
        curve_runs.append((label, run))
        for c, orc, sel in zip(run.counts, run.oracle, run.selector):
            lines.append(
                f"{label} (top-{c})  {sel.formatted()}  best {orc.formatted()}"
            )
            csv_lines.append(f"{label},{c},{orc.success:.4f},{orc.precision:.4f},oracle")
            csv_lines.append(f"{label},{c},{sel.success:.4f},{sel.precision:.4f},selector")

    paths = {"report": out_dir / "report.txt"}
    atomic_write_text(paths["report"], "\n".join(lines) + "\n")
    if curve_runs:
        paths["csv"] = out_dir / "curves.csv"
        atomic_write_text(paths["csv"], "\n".join(csv_lines) + "\n")
        paths["svg"] = out_dir / "curves.svg"
        atomic_write_text(paths["svg"], _curves_svg(curve_runs))
    return paths


def _curves_svg(curve_runs) -> str:
    width, height, pad = 420, 300, 46
    panels = ("success", "precision")
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{2 * width}" '
        f'height="{height}" viewBox="0 0 {2 * width} {height}">',
        '<rect width="100%" height="100%" fill="white"/>',
    ]
    max_c = max(max(run.counts) for _, run in curve_runs)
    for panel_idx, metric in enumerate(panels):
        x0 = panel_idx * width + pad
        y0 = height - pad
        plot_w = width - 2 * pad
        plot_h = height - 2 * pad
        parts.append(
            f'<g stroke="black" stroke-width="1" fill="none">'
            f'<path d="M {x0} {y0 - plot_h} L {x0} {y0} L {x0 + plot_w} {y0}"/></g>'
        )
        parts.append(
            f'<text x="{x0 + plot_w / 2:.1f}" y="{height - 8}" font-size="13" '
            f'text-anchor="middle">candidates C ({metric})</text>'
        )
        for frac in (0.0, 0.5, 1.0):
            y = y0 - frac * plot_h
            parts.append(
                f'<text x="{x0 - 6}" y="{y + 4:.1f}" font-size="11" '
                f'text-anchor="end">{frac * 100:.0f}</text>'
            )
        for run_idx, (label, run) in enumerate(curve_runs):
            color = _SVG_COLORS[run_idx % len(_SVG_COLORS)]
            for kind, series in (("oracle", run.oracle), ("selector", run.selector)):
                pts = []
                for c, summary in zip(run.counts, series):
                    x = x0 + plot_w * (c / max_c)
                    value = getattr(summary, metric)
                    y = y0 - plot_h * (value / 100.0)
                    pts.append(f"{x:.2f},{y:.2f}")
                dash = ' stroke-dasharray="6,4"' if kind == "selector" else ""
                parts.append(
                    f'<polyline fill="none" stroke="{color}" stroke-width="1.6"'
                    f'{dash} points="{" ".join(pts)}"/>'
                )
        if panel_idx == 0:
            for run_idx, (label, _run) in enumerate(curve_runs):
                color = _SVG_COLORS[run_idx % len(_SVG_COLORS)]
                y = pad + 14 * run_idx
                parts.append(
                    f'<line x1="{x0 + 8}" y1="{y}" x2="{x0 + 34}" y2="{y}" '
                    f'stroke="{color}" stroke-width="2"/>'
                )
                parts.append(
                    f'<text x="{x0 + 40}" y="{y + 4}" font-size="11">{label}</text>'
                )
    parts.append("</svg>")
    return "\n".join(parts)
