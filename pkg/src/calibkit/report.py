"""SVG reliability diagrams, confidence histograms and per-class tables.

Everything here is a pure function of its inputs: the same report and style
always produce byte-identical output.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Optional, Sequence
from xml.sax.saxutils import escape

import numpy as np

from calibkit.metrics import CalibrationReport, PerClassRow


@dataclass(frozen=True)
class DiagramStyle:
    width_px: int = 600
    height_px: int = 600
    margin_left: int = 70
    margin_right: int = 20
    margin_top: int = 40
    margin_bottom: int = 60
    bar_color: str = "#3b6fb6"
    gap_color: str = "#e0524f"
    gap_opacity: float = 0.45
    diagonal_color: str = "#555555"
    marker_conf_color: str = "#d62728"
    marker_acc_color: str = "#1f4fd6"
    annotate: bool = True
    title: Optional[str] = None

    def __post_init__(self):
        if self.width_px <= 0 or self.height_px <= 0:
            raise ValueError("diagram dimensions must be positive")
        if self.plot_width <= 0 or self.plot_height <= 0:
            raise ValueError("margins leave no room for the plot area")

    @property
    def plot_width(self) -> int:
        return self.width_px - self.margin_left - self.margin_right

    @property
    def plot_height(self) -> int:
        return self.height_px - self.margin_top - self.margin_bottom


def _px(v: float) -> str:
    return f"{v:.2f}"


class _Canvas:
    def __init__(self, style: DiagramStyle):
        self.style = style
        self.parts = [
            '<?xml version="1.0" encoding="UTF-8" standalone="no"?>',
            f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{style.width_px}" '
            f'height="{style.height_px}" viewBox="0 0 {style.width_px} {style.height_px}">',
            f'<rect x="0" y="0" width="{style.width_px}" height="{style.height_px}" fill="white"/>',
        ]

    def x(self, frac: float) -> float:
        return self.style.margin_left + frac * self.style.plot_width

    def y(self, frac: float) -> float:
        return self.style.margin_top + (1.0 - frac) * self.style.plot_height

    def add(self, element: str) -> None:
        self.parts.append(element)

    def text(self, x: float, y: float, s: str, anchor: str = "middle", size: int = 12, extra: str = "") -> None:
        self.add(f'<text x="{_px(x)}" y="{_px(y)}" font-family="sans-serif" font-size="{size}" '
                 f'text-anchor="{anchor}"{extra}>{escape(s)}</text>')

    def axes(self, x_label: str, y_label: str, y_ticks: Sequence[tuple[float, str]]) -> None:
        st = self.style
        left, bottom = self.x(0.0), self.y(0.0)
        self.add(f'<line class="axis" x1="{_px(left)}" y1="{_px(bottom)}" x2="{_px(self.x(1.0))}" '
                 f'y2="{_px(bottom)}" stroke="black" stroke-width="1"/>')
        self.add(f'<line class="axis" x1="{_px(left)}" y1="{_px(bottom)}" x2="{_px(left)}" '
                 f'y2="{_px(self.y(1.0))}" stroke="black" stroke-width="1"/>')
        for i in range(6):
            f = i / 5
            self.text(self.x(f), bottom + 18, f"{f:.1f}")
        for f, label in y_ticks:
            self.text(left - 8, self.y(f) + 4, label, anchor="end")
        self.text(self.x(0.5), st.height_px - 15, x_label, size=14)
        cy = self.y(0.5)
        self.text(18, cy, y_label, size=14, extra=f' transform="rotate(-90 18 {_px(cy)})"')
        if st.title:
            self.text(self.x(0.5), st.margin_top - 15, st.title, size=15)

    def finish(self) -> str:
        return "\n".join(self.parts + ["</svg>"]) + "\n"


def render_reliability_svg(report: CalibrationReport, style: DiagramStyle = DiagramStyle()) -> str:
    """Reliability diagram: per-bin accuracy bars against the identity diagonal.

    Every bin gets a ``rect.bar`` (zero height when empty). Non-empty bins also
    get a ``rect.gap`` spanning accuracy to mean confidence, i.e. from the bar
    top to the diagonal at the bin's average confidence.
    """
    if not report.bins:
        raise ValueError("report has no bins")
    cv = _Canvas(style)
    ph = style.plot_height
    for i, b in enumerate(report.bins):
        x, w = cv.x(b.lo), (b.hi - b.lo) * style.plot_width
        height = b.acc * ph if b.count else 0.0
        cv.add(f'<rect class="bar" data-bin="{i}" data-count="{b.count}" x="{_px(x)}" '
               f'y="{_px(cv.y(0.0) - height)}" width="{_px(w)}" height="{_px(height)}" '
               f'fill="{style.bar_color}" stroke="black" stroke-width="0.5"/>')
    for i, b in enumerate(report.bins):
        if not b.count:
            continue
        top, low = max(b.acc, b.avg_conf), min(b.acc, b.avg_conf)
        x, w = cv.x(b.lo), (b.hi - b.lo) * style.plot_width
        cv.add(f'<rect class="gap" data-bin="{i}" x="{_px(x)}" y="{_px(cv.y(top))}" width="{_px(w)}" '
               f'height="{_px((top - low) * ph)}" fill="{style.gap_color}" fill-opacity="{style.gap_opacity}"/>')
    cv.add(f'<line class="diagonal" x1="{_px(cv.x(0.0))}" y1="{_px(cv.y(0.0))}" x2="{_px(cv.x(1.0))}" '
           f'y2="{_px(cv.y(1.0))}" stroke="{style.diagonal_color}" stroke-width="1.5" stroke-dasharray="5,4"/>')
    cv.axes("Confidence", "Accuracy", [(i / 5, f"{i / 5:.1f}") for i in range(6)])
    if style.annotate:
        cv.text(cv.x(0.03), cv.y(0.95), f"ECE = {report.ece:.4f}", anchor="start", size=14,
                extra=' class="ece"')
    return cv.finish()


def _histogram_svg(counts: Sequence[int], mean_conf: Optional[float], accuracy: Optional[float],
                   style: DiagramStyle) -> str:
    counts = [int(c) for c in counts]
    k = len(counts)
    top = max(counts) if counts and max(counts) > 0 else 1
    cv = _Canvas(style)
    for i, c in enumerate(counts):
        height = c / top * style.plot_height
        cv.add(f'<rect class="bar" data-bin="{i}" data-count="{c}" x="{_px(cv.x(i / k))}" '
               f'y="{_px(cv.y(0.0) - height)}" width="{_px(style.plot_width / k)}" height="{_px(height)}" '
               f'fill="{style.bar_color}" stroke="black" stroke-width="0.5"/>')
    markers = (("mean-confidence", mean_conf, style.marker_conf_color, "avg. confidence"),
               ("accuracy", accuracy, style.marker_acc_color, "accuracy"))
    for j, (cls, value, color, label) in enumerate(markers):
        if value is None:
            continue
        x = cv.x(value)
        cv.add(f'<line class="{cls}" x1="{_px(x)}" y1="{_px(cv.y(0.0))}" x2="{_px(x)}" y2="{_px(cv.y(1.0))}" '
               f'stroke="{color}" stroke-width="2" stroke-dasharray="6,4"/>')
        if style.annotate:
            cv.text(cv.x(0.03), cv.y(0.95) + 18 * j, f"{label} = {value:.4f}", anchor="start",
                    extra=f' fill="{color}"')
    cv.axes("Confidence", "Samples", [(0.0, "0"), (1.0, str(top))])
    return cv.finish()


def render_histogram_svg(confidences, bins: int = 10, mean_conf: Optional[float] = None,
                         accuracy: Optional[float] = None, style: DiagramStyle = DiagramStyle()) -> str:
    """Bar chart of how many samples fall in each confidence bin.

    Optional dashed markers show the mean confidence and the accuracy; for a
    calibrated model the two lines coincide.
    """
    conf = np.asarray(confidences, dtype=np.float64)
    if bins < 1:
        raise ValueError("bins must be >= 1")
    if np.any((conf < 0) | (conf > 1)):
        raise ValueError("confidences must lie in [0, 1]")
    edges = np.arange(bins + 1) / bins
    idx = np.minimum(np.searchsorted(edges, conf, side="right") - 1, bins - 1)
    counts = np.bincount(idx, minlength=bins)
    return _histogram_svg(counts, mean_conf, accuracy, style)


def render_histogram_from_report(report: CalibrationReport, style: DiagramStyle = DiagramStyle()) -> str:
    """Histogram built from a report's bin counts, with mean-confidence/accuracy markers."""
    return _histogram_svg([b.count for b in report.bins], report.mean_confidence, report.accuracy, style)


def _sorted_rows(report: CalibrationReport) -> list[PerClassRow]:
    return sorted(report.per_class, key=lambda r: (-r.support, r.index))


def _cell(v: Optional[float]) -> str:
    return "" if v is None else f"{v:.4f}"


def _class_label(r: PerClassRow) -> str:
    return r.name if r.name is not None else str(r.index)


def render_class_table(report: CalibrationReport) -> str:
    """Per-class CSV sorted by support (descending); support-0 classes have blank metrics."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["class", "support", "accuracy", "avg_confidence", "delta_acc", "ece"])
    for r in _sorted_rows(report):
        writer.writerow([_class_label(r), r.support, _cell(r.acc), _cell(r.avg_conf), _cell(r.delta_acc), _cell(r.ece)])
    return buf.getvalue()


def render_class_table_markdown(report: CalibrationReport) -> str:
    lines = ["| class | support | accuracy | avg confidence | ΔAcc | ECE |",
             "|---|---:|---:|---:|---:|---:|"]
    for r in _sorted_rows(report):
        lines.append(f"| {_class_label(r)} | {r.support} | {_cell(r.acc)} | {_cell(r.avg_conf)} | "
                     f"{_cell(r.delta_acc)} | {_cell(r.ece)} |")
    return "\n".join(lines) + "\n"
