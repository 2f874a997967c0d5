"""Core geometric and document data types shared by the whole pipeline.

Everything here is an immutable dataclass; pages and annotations round-trip
through a per-page JSON file (see ``page_to_json`` / ``page_from_json``).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np


class ClassId(str, Enum):
    """The five clustering targets: one detection class plus four recognition classes."""

    TABLE = "table"
    CELL = "cell"
    ROW = "row"
    COLUMN = "column"
    HEADER = "header"


RECOGNITION_CLASSES = (ClassId.CELL, ClassId.ROW, ClassId.COLUMN, ClassId.HEADER)
ALL_CLASSES = (ClassId.TABLE,) + RECOGNITION_CLASSES


@dataclass(frozen=True)
class Box:
    """Axis-aligned rectangle in page coordinates, corners (x0, y0) and (x1, y1)."""

    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        for v in (self.x0, self.y0, self.x1, self.y1):
            if not math.isfinite(v):
                raise ValueError(f"non-finite box coordinate: {self}")
        if self.x0 > self.x1 or self.y0 > self.y1:
            raise ValueError(f"inverted box: {self}")

    @property
    def width(self) -> float:
        return self.x1 - self.x0

    @property
    def height(self) -> float:
        return self.y1 - self.y0

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x0 + self.x1), 0.5 * (self.y0 + self.y1))

    def intersect(self, other: "Box") -> "Box | None":
        x0 = max(self.x0, other.x0)
        y0 = max(self.y0, other.y0)
        x1 = min(self.x1, other.x1)
        y1 = min(self.y1, other.y1)
        if x0 > x1 or y0 > y1:
            return None
        return Box(x0, y0, x1, y1)

    def intersection_area(self, other: "Box") -> float:
        w = min(self.x1, other.x1) - max(self.x0, other.x0)
        h = min(self.y1, other.y1) - max(self.y0, other.y0)
        if w <= 0.0 or h <= 0.0:
            return 0.0
        return w * h

    def contains_point(self, x: float, y: float) -> bool:
        return self.x0 <= x <= self.x1 and self.y0 <= y <= self.y1

    def union(self, other: "Box") -> "Box":
        return Box(
            min(self.x0, other.x0),
            min(self.y0, other.y0),
            max(self.x1, other.x1),
            max(self.y1, other.y1),
        )

    def clamped(self, width: float, height: float) -> "Box":
        def cl(v, hi):
            return min(max(v, 0.0), hi)

        return Box(cl(self.x0, width), cl(self.y0, height), cl(self.x1, width), cl(self.y1, height))

    def as_list(self) -> list[float]:
        return [self.x0, self.y0, self.x1, self.y1]


def box_hull(boxes) -> Box:
    """Smallest box containing all given boxes. Raises on an empty sequence."""
    boxes = list(boxes)
    if not boxes:
        raise ValueError("hull of empty box sequence")
    return Box(
        min(b.x0 for b in boxes),
        min(b.y0 for b in boxes),
        max(b.x1 for b in boxes),
        max(b.y1 for b in boxes),
    )


@dataclass(frozen=True)
class Word:
    """One OCR token: its text plus its bounding box."""

    text: str
    box: Box

    def __post_init__(self):
        if self.text == "":
            raise ValueError("empty-text words must be dropped at ingestion")


@dataclass(frozen=True)
class Page:
    width: float
    height: float
    words: tuple[Word, ...]

    def __post_init__(self):
        if not (self.width > 0 and self.height > 0):
            raise ValueError(f"page dimensions must be positive: {self.width}x{self.height}")

    @property
    def n_words(self) -> int:
        return len(self.words)


@dataclass(frozen=True)
class SpanningCell:
    """A cell covering multiple grid positions of its table.

    ``row_indices`` / ``column_indices`` are ordinals into the owning table's
    ``rows`` / ``columns`` lists.
    """

    box: Box
    row_indices: frozenset[int]
    column_indices: frozenset[int]

    def __post_init__(self):
        if len(self.row_indices) < 1 or len(self.column_indices) < 1:
            raise ValueError("spanning cell must cover at least one row and one column")
        if len(self.row_indices) * len(self.column_indices) < 2:
            raise ValueError("cell covering a single grid position is not a spanning cell")

    @property
    def spans_rows(self) -> bool:
        return len(self.row_indices) >= 2

    @property
    def spans_columns(self) -> bool:
        return len(self.column_indices) >= 2


@dataclass(frozen=True)
class TableAnnotation:
    box: Box
    rows: tuple[Box, ...] = ()
    columns: tuple[Box, ...] = ()
    headers: tuple[Box, ...] = ()
    spanning_cells: tuple[SpanningCell, ...] = ()


@dataclass(frozen=True)
class PageAnnotation:
    tables: tuple[TableAnnotation, ...] = ()
    mask_classes: frozenset[str] = field(default_factory=frozenset)

    def __post_init__(self):
        valid = {c.value for c in ClassId}
        bad = set(self.mask_classes) - valid
        if bad:
            raise ValueError(f"unknown mask classes: {sorted(bad)}")


def word_box_array(words) -> np.ndarray:
    """(n, 4) float array of word box corners, for repeated assignment calls."""
    return np.array([[w.box.x0, w.box.y0, w.box.x1, w.box.y1] for w in words]).reshape(-1, 4)


def assign_words_to_boxes(words, regions, word_array: np.ndarray | None = None) -> dict[int, set[int]]:
    """Map each region ordinal to the set of word ordinals belonging to it.

    A word belongs to a region when at least half of its box area lies inside
    (ties count as inside). Words with a zero-area box fall back to
    center-point containment, since some OCR engines emit degenerate boxes
    for punctuation.
    """
    regions = list(regions)
    wb = word_array if word_array is not None else word_box_array(words)
    if wb.shape[0] == 0 or not regions:
        return {ri: set() for ri in range(len(regions))}
    rb = np.array([[r.x0, r.y0, r.x1, r.y1] for r in regions])
    iw = np.minimum(wb[None, :, 2], rb[:, None, 2]) - np.maximum(wb[None, :, 0], rb[:, None, 0])
    ih = np.minimum(wb[None, :, 3], rb[:, None, 3]) - np.maximum(wb[None, :, 1], rb[:, None, 1])
    inter = np.where((iw > 0.0) & (ih > 0.0), iw * ih, 0.0)
    area = (wb[:, 2] - wb[:, 0]) * (wb[:, 3] - wb[:, 1])
    inside = 2.0 * inter >= area[None, :]
    zero = area == 0.0
    if zero.any():
        cx = 0.5 * (wb[:, 0] + wb[:, 2])
        cy = 0.5 * (wb[:, 1] + wb[:, 3])
        center_in = (
            (rb[:, None, 0] <= cx[None, :])
            & (cx[None, :] <= rb[:, None, 2])
            & (rb[:, None, 1] <= cy[None, :])
            & (cy[None, :] <= rb[:, None, 3])
        )
        inside = np.where(zero[None, :], center_in, inside)
    return {ri: set(np.nonzero(inside[ri])[0].tolist()) for ri in range(len(regions))}


# ---------------------------------------------------------------------------
# Unified annotation JSON (one file per page)
# ---------------------------------------------------------------------------

SCHEMA_VERSION = 1


def _box_from_list(v) -> Box:
    if not (isinstance(v, (list, tuple)) and len(v) == 4):
        raise ValueError(f"box must be a list of 4 floats, got {v!r}")
    return Box(*(float(x) for x in v))


def page_to_json(page: Page, annotation: PageAnnotation | None = None) -> dict:
    doc = {
        "page": {"width": page.width, "height": page.height},
        "words": [{"text": w.text, "box": w.box.as_list()} for w in page.words],
    }
    ann = annotation or PageAnnotation()
    doc["tables"] = [
        {
            "box": t.box.as_list(),
            "rows": [{"box": b.as_list()} for b in t.rows],
            "columns": [{"box": b.as_list()} for b in t.columns],
            "headers": [{"box": b.as_list()} for b in t.headers],
            "spanning_cells": [
                {
                    "box": s.box.as_list(),
                    "row_indices": sorted(s.row_indices),
                    "col_indices": sorted(s.column_indices),
                }
                for s in t.spanning_cells
            ],
        }
        for t in ann.tables
    ]
    doc["mask_classes"] = sorted(ann.mask_classes)
    return doc


def page_from_json(doc: dict) -> tuple[Page, PageAnnotation]:
    """Parse the unified per-page JSON. Word boxes are clamped to the page;
    empty-text words are dropped."""
    pw = float(doc["page"]["width"])
    ph = float(doc["page"]["height"])
    words = []
    for w in doc.get("words", []):
        text = w["text"]
        if text == "":
            continue
        words.append(Word(text=text, box=_box_from_list(w["box"]).clamped(pw, ph)))
    tables = []
    for t in doc.get("tables", []):
        tbox = _box_from_list(t["box"]).clamped(pw, ph)

        def region_boxes(key):
            return tuple(
                _box_from_list(r["box"]).clamped(pw, ph) for r in t.get(key, [])
            )

        spans = tuple(
            SpanningCell(
                box=_box_from_list(s["box"]).clamped(pw, ph),
                row_indices=frozenset(int(i) for i in s["row_indices"]),
                column_indices=frozenset(int(i) for i in s["col_indices"]),
            )
            for s in t.get("spanning_cells", [])
        )
        tables.append(
            TableAnnotation(
                box=tbox,
                rows=region_boxes("rows"),
                columns=region_boxes("columns"),
                headers=region_boxes("headers"),
                spanning_cells=spans,
            )
        )
    ann = PageAnnotation(
        tables=tuple(tables),
        mask_classes=frozenset(doc.get("mask_classes", [])),
    )
    return Page(width=pw, height=ph, words=tuple(words)), ann


def save_page_json(path, page: Page, annotation: PageAnnotation | None = None) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(page_to_json(page, annotation), f, indent=1, sort_keys=True)
        f.write("\n")


def load_page_json(path) -> tuple[Page, PageAnnotation]:
    with open(path, "r", encoding="utf-8") as f:
        return page_from_json(json.load(f))
