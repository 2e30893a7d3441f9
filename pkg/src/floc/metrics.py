"""Localization / detection metrics, robustness sweeps, report emission.

Reports serialize deterministically: canonical JSON (sorted keys), CSV with
explicit newlines, and a matplotlib SVG for robustness curves rendered with
a fixed hash salt and no embedded date.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
matplotlib.rcParams["svg.hashsalt"] = "floc"

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from scipy.stats import rankdata  # noqa: E402

from .imgproc import BinaryMask, gaussian_blur, jpeg_like_compress  # noqa: E402

DEFAULT_JPEG_QUALITIES = (100, 90, 80, 70, 60, 50)
DEFAULT_BLUR_KERNELS = (0, 5, 11, 17, 23, 29)


def pixel_f1(pred: BinaryMask, gt: BinaryMask) -> float:
    """F1 over manipulated pixels: 2TP / (2TP + FP + FN).

    Both masks empty counts as perfect (1.0); exactly one empty is 0.0.
    """
    if pred.data.shape != gt.data.shape:
        raise ValueError(f"mask dims differ: {pred.data.shape} vs {gt.data.shape}")
    p, g = pred.data, gt.data
    if not p.any() and not g.any():
        return 1.0
    if not p.any() or not g.any():
        return 0.0
    tp = int(np.logical_and(p, g).sum())
    fp = int(np.logical_and(p, ~g).sum())
    fn = int(np.logical_and(~p, g).sum())
    return 2.0 * tp / (2.0 * tp + fp + fn)


def image_auc(scores, labels) -> float:
    """ROC AUC via the rank statistic; tied scores contribute 0.5."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError("scores and labels must be equal-length vectors")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 or 1")
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes present")
    ranks = rankdata(s)
    r_pos = ranks[y == 1].sum()
    return float((r_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def degrade_image(image, kind: str, level):
    if kind == "jpeg":
        return jpeg_like_compress(image, int(level))
    if kind == "blur":
        return gaussian_blur(image, int(level))
    raise ValueError(f"unknown degradation kind {kind!r}")


def robustness_sweep(model, dataset, degradation: str, levels, **pipeline_kwargs):
    """Mean localization F1 of the full pipeline on degraded manipulated
    images, one entry per level, in the given order."""
    levels = list(levels)
    if not levels:
        raise ValueError("levels must be nonempty")
    if degradation not in ("jpeg", "blur"):
        raise ValueError(f"unknown degradation kind {degradation!r}")
    from . import pipeline

    curve = []
    for level in levels:
        f1 = pipeline.mean_localization_f1(
            model,
            dataset,
            degrade=lambda img, _lv=level: degrade_image(img, degradation, _lv),
            **pipeline_kwargs,
        )
        curve.append((level, f1))
    return curve


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    """Per-dataset detection/localization scores, robustness curves keyed by
    the configured sweep levels, and ablation tables."""

    datasets: dict = field(default_factory=dict)  # name -> {"i_auc":…, "p_f1":…}
    curves: dict = field(default_factory=dict)  # name -> [[level, p_f1], …]
    tables: dict = field(default_factory=dict)  # name -> [row dict, …]
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "schema": "floc-report-v1",
            "meta": self.meta,
            "datasets": self.datasets,
            "curves": {k: [[lv, float(v)] for lv, v in rows] for k, rows in self.curves.items()},
            "tables": self.tables,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        obj = json.loads(text)
        if obj.get("schema") != "floc-report-v1":
            raise ValueError("unknown report schema")
        return cls(
            datasets=obj["datasets"],
            curves={k: [(lv, v) for lv, v in rows] for k, rows in obj["curves"].items()},
            tables=obj["tables"],
            meta=obj["meta"],
        )


def _csv_lines(report: EvalReport) -> list[str]:
    if len(report.curves) == 1:
        (rows,) = report.curves.values()
        return ["level,p_f1"] + [f"{lv},{v:.6f}" for lv, v in rows]
    if len(report.curves) > 1:
        lines = ["curve,level,p_f1"]
        for name in sorted(report.curves):
            lines += [f"{name},{lv},{v:.6f}" for lv, v in report.curves[name]]
        return lines
    if len(report.tables) == 1:
        (rows,) = report.tables.values()
        cols = list(rows[0].keys()) if rows else []
        lines = [",".join(cols)]
        for row in rows:
            lines.append(",".join(_fmt_cell(row[c]) for c in cols))
        return lines
    lines = ["metric,value"]
    for name in sorted(report.datasets):
        for key in sorted(report.datasets[name]):
            lines.append(f"{name}/{key},{_fmt_cell(report.datasets[name][key])}")
    return lines


def _fmt_cell(v) -> str:
    if isinstance(v, bool):
        return "yes" if v else "no"
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def _plot_curves(report: EvalReport, path: Path) -> None:
    names = sorted(report.curves)
    fig, axes = plt.subplots(1, len(names), figsize=(5.0 * len(names), 3.6))
    if len(names) == 1:
        axes = [axes]
    for ax, name in zip(axes, names):
        rows = report.curves[name]
        xs = [lv for lv, _ in rows]
        ys = [v for _, v in rows]
        ax.plot(xs, ys, marker="o")
        ax.set_xlabel({"jpeg": "JPEG quality", "blur": "blur kernel size"}.get(name, name))
        ax.set_ylabel("pixel-level F1")
        ax.set_title(name)
        ax.grid(True, alpha=0.4)
        if name == "jpeg":
            ax.invert_xaxis()
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def emit_report(report: EvalReport, out_dir) -> dict[str, Path]:
    """Write report.json + report.csv (+ curves.svg when curves exist)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    jp = out / "report.json"
    jp.write_text(report.to_json())
    paths["json"] = jp
    cp = out / "report.csv"
    cp.write_text("\n".join(_csv_lines(report)) + "\n")
    paths["csv"] = cp
    if report.curves:
        sp = out / "curves.svg"
        _plot_curves(report, sp)
        paths["svg"] = sp
    return paths
