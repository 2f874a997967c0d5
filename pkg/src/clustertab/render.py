"""Deterministic SVG overlays of word boxes and predicted (or labeled) clusters."""

from __future__ import annotations

from .docmodel import ALL_CLASSES, Box, ClassId, Page, box_hull
from .postprocess import ClusterPrediction

CLASS_COLORS = {
    ClassId.TABLE: "#d62728",
    ClassId.CELL: "#7f7f7f",
    ClassId.ROW: "#2ca02c",
    ClassId.COLUMN: "#1f77b4",
    ClassId.HEADER: "#ff7f0e",
}


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _rect(box: Box, stroke: str, width: float, dashed: bool = False, fill: str = "none") -> str:
    dash = ' stroke-dasharray="4 3"' if dashed else ""
    return (
        f'<rect x="{_fmt(box.x0)}" y="{_fmt(box.y0)}" '
        f'width="{_fmt(box.width)}" height="{_fmt(box.height)}" '
        f'fill="{fill}" stroke="{stroke}" stroke-width="{_fmt(width)}"{dash}/>'
    )


def render_overlay(page: Page, prediction: dict[ClassId, ClusterPrediction]) -> str:
    """One SVG document: word boxes in black, one colored rectangle per cluster
    box, dashed hulls for weak-connection extensions."""
    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_fmt(page.width)}" '
        f'height="{_fmt(page.height)}" viewBox="0 0 {_fmt(page.width)} {_fmt(page.height)}">',
        '<g id="words">',
    ]
    for w in page.words:
        lines.append(_rect(w.box, "#000000", 0.5))
    lines.append("</g>")
    for cls in ALL_CLASSES:
        pred = prediction.get(cls)
        if pred is None or not pred.clusters:
            continue
        color = CLASS_COLORS[cls]
        lines.append(f'<g id="{cls.value}">')
        for ci in range(len(pred.clusters)):
            lines.append(_rect(pred.boxes[ci], color, 1.5))
            ext = pred.span_extensions.get(ci)
            if ext:
                hull = box_hull(page.words[i].box for i in sorted(ext))
                lines.append(_rect(hull, color, 1.0, dashed=True))
        lines.append("</g>")
    lines.append("</svg>")
    return "\n".join(lines) + "\n"
