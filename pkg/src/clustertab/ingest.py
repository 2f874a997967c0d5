"""Converters from external annotation formats into the unified per-page JSON.

Two source flavors are supported: Pascal-VOC XML element boxes with a
companion word list (PubTables-1M style), and JSON records carrying cell
coordinates plus an HTML structure token stream (FinTabNet/PubTabNet style).
Converters are lenient by default: malformed inputs are skipped and counted;
``strict=True`` turns the first problem into a failure.
"""

from __future__ import annotations

import json
import xml.etree.ElementTree as ET
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path

from .docmodel import (
    Box,
    Page,
    PageAnnotation,
    SpanningCell,
    TableAnnotation,
    Word,
    box_hull,
    page_to_json,
)

VOC_LABEL_MAP = {
    "table": "table",
    "table row": "row",
    "table column": "column",
    "table column header": "header",
    "table spanning cell": "spanning_cell",
}
# e.g. "table projected row header" has no unified counterpart and is dropped


class ConversionError(RuntimeError):
    pass


@dataclass
class ConversionSummary:
    emitted: int = 0
    skipped: int = 0
    warnings: Counter = field(default_factory=Counter)
    errors: list[dict] = field(default_factory=list)

    @property
    def inputs(self) -> int:
        return self.emitted + self.skipped

    def to_dict(self) -> dict:
        return {
            "emitted": self.emitted,
            "skipped": self.skipped,
            "inputs": self.inputs,
            "warnings": dict(sorted(self.warnings.items())),
            "errors": self.errors,
        }


def _warn(summary: ConversionSummary, kind: str, strict: bool, detail: str = ""):
    summary.warnings[kind] += 1
    if strict:
        raise ConversionError(f"{kind}: {detail}" if detail else kind)


def _overlap_1d(a0, a1, b0, b1) -> float:
    return max(0.0, min(a1, b1) - max(a0, b0))


def _span_indices(span_box: Box, boxes: list[Box], axis: str) -> frozenset[int]:
    """Ordinals of the rows (axis='y') or columns (axis='x') the span covers:
    at least half of the region's extent along the axis must be overlapped."""
    out = set()
    for i, b in enumerate(boxes):
        if axis == "y":
            cover = _overlap_1d(span_box.y0, span_box.y1, b.y0, b.y1)
            extent = b.y1 - b.y0
        else:
            cover = _overlap_1d(span_box.x0, span_box.x1, b.x0, b.x1)
            extent = b.x1 - b.x0
        if extent > 0.0 and 2.0 * cover >= extent:
            out.add(i)
    return frozenset(out)


# ---------------------------------------------------------------------------
# Pascal VOC (PubTables-1M style)
# ---------------------------------------------------------------------------


def _parse_voc_xml(path: Path):
    tree = ET.parse(path)
    root = tree.getroot()
    size = root.find("size")
    dims = None
    if size is not None:
        w = size.findtext("width")
        h = size.findtext("height")
        if w and h and float(w) > 0 and float(h) > 0:
            dims = (float(w), float(h))
    objects = []
    for obj in root.iter("object"):
        name = (obj.findtext("name") or "").strip()
        bnd = obj.find("bndbox")
        if bnd is None:
            continue
        box = Box(
            float(bnd.findtext("xmin")),
            float(bnd.findtext("ymin")),
            float(bnd.findtext("xmax")),
            float(bnd.findtext("ymax")),
        )
        objects.append((name, box))
    return dims, objects


def _load_words_file(path: Path) -> list[Word]:
    with open(path, "r", encoding="utf-8") as f:
        entries = json.load(f)
    words = []
    for e in entries:
        text = e.get("text", "")
        if not text:
            continue
        bbox = e.get("bbox") or e.get("box")
        words.append(Word(text=text, box=Box(*(float(v) for v in bbox))))
    return words


def _find_words_file(xml_path: Path, words_dir: Path | None) -> Path | None:
    stem = xml_path.stem
    candidates = []
    if words_dir is not None:
        candidates += [words_dir / f"{stem}_words.json", words_dir / f"{stem}.json"]
    candidates += [
        xml_path.with_name(f"{stem}_words.json"),
        xml_path.with_suffix(".json"),
    ]
    for c in candidates:
        if c.exists():
            return c
    return None


def _group_elements_to_tables(
    tables: list[Box], elements: list[tuple[str, Box]], summary, strict
):
    """Attach each non-table element to the table it overlaps most."""
    grouped: list[dict[str, list[Box]]] = [defaultdict(list) for _ in tables]
    for kind, box in elements:
        best = -1
        best_area = 0.0
        for ti, tb in enumerate(tables):
            a = box.intersection_area(tb)
            if a > best_area:
                best_area = a
                best = ti
        if best < 0:
            _warn(summary, "element_outside_any_table", strict, kind)
            continue
        grouped[best][kind].append(box)
    return grouped


def convert_voc_page(
    xml_path: Path, words_dir: Path | None, summary: ConversionSummary, strict: bool
) -> dict | None:
    dims, objects = _parse_voc_xml(xml_path)
    words_file = _find_words_file(xml_path, words_dir)
    if words_file is None:
        raise ConversionError(f"no word file found for {xml_path.name}")
    words = _load_words_file(words_file)

    mapped: list[tuple[str, Box]] = []
    for name, box in objects:
        kind = VOC_LABEL_MAP.get(name)
        if kind is None:
            _warn(summary, f"unmapped_label:{name}", strict, str(xml_path))
            continue
        mapped.append((kind, box))

    if dims is None:
        all_boxes = [b for _, b in mapped] + [w.box for w in words]
        if not all_boxes:
            raise ConversionError(f"{xml_path.name}: no size tag and no boxes to infer it")
        hull = box_hull(all_boxes)
        dims = (hull.x1 * 1.02, hull.y1 * 1.02)
        _warn(summary, "page_size_inferred", strict, str(xml_path))

    pw, ph = dims
    clamped = []
    for kind, box in mapped:
        cl = box.clamped(pw, ph)
        if cl != box:
            _warn(summary, "box_clamped", False)
        clamped.append((kind, cl))

    table_boxes = [b for kind, b in clamped if kind == "table"]
    others = [(kind, b) for kind, b in clamped if kind != "table"]
    grouped = _group_elements_to_tables(table_boxes, others, summary, strict)

    tables = []
    for tb, parts in zip(table_boxes, grouped):
        rows = tuple(sorted(parts.get("row", []), key=lambda b: (b.y0, b.x0)))
        columns = tuple(sorted(parts.get("column", []), key=lambda b: (b.x0, b.y0)))
        headers = tuple(sorted(parts.get("header", []), key=lambda b: (b.y0, b.x0)))
        spans = []
        for sb in sorted(parts.get("spanning_cell", []), key=lambda b: (b.y0, b.x0)):
            ri = _span_indices(sb, list(rows), "y")
            ci = _span_indices(sb, list(columns), "x")
            if not ri or not ci or len(ri) * len(ci) < 2:
                _warn(summary, "degenerate_spanning_cell", strict, str(xml_path))
                continue
            spans.append(SpanningCell(box=sb, row_indices=ri, column_indices=ci))
        tables.append(
            TableAnnotation(box=tb, rows=rows, columns=columns, headers=headers, spanning_cells=tuple(spans))
        )

    page = Page(
        width=pw, height=ph, words=tuple(Word(w.text, w.box.clamped(pw, ph)) for w in words)
    )
    return page_to_json(page, PageAnnotation(tables=tuple(tables)))


def convert_pascal_voc(
    input_dir, output_dir, words_dir=None, strict: bool = False
) -> ConversionSummary:
    """Convert a directory of Pascal-VOC XML annotations plus word files."""
    input_dir = Path(input_dir)
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    words_dir = Path(words_dir) if words_dir else None
    summary = ConversionSummary()
    for xml_path in sorted(input_dir.glob("*.xml")):
        try:
            doc = convert_voc_page(xml_path, words_dir, summary, strict)
        except ConversionError:
            raise
        except Exception as e:  # malformed XML, bad numbers, missing words
            if strict:
                raise ConversionError(f"{xml_path.name}: {e}") from e
            summary.skipped += 1
            summary.errors.append({"file": xml_path.name, "error": str(e)})
            continue
        out_path = output_dir / (xml_path.stem + ".json")
        with open(out_path, "w", encoding="utf-8") as f:
            json.dump(doc, f, indent=1, sort_keys=True)
            f.write("\n")
        summary.emitted += 1
    return summary


# ---------------------------------------------------------------------------
# HTML cell grids (FinTabNet / PubTabNet style)
# ---------------------------------------------------------------------------


class GridError(ValueError):
    pass


def parse_html_grid(tokens: list[str]) -> list[dict]:
    """Resolve an HTML structure token stream into grid cells.

    Returns one dict per cell: row_nums, col_nums, is_header; cells appear in
    document order (the order their coordinate records are stored in).
    """
    cells = []
    occupied: dict[int, set[int]] = defaultdict(set)
    row = -1
    in_header = False
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if tok == "<thead>":
            in_header = True
        elif tok == "</thead>":
            in_header = False
        elif tok == "<tr>":
            row += 1
        elif tok in ("<td>", "<td", "<th>", "<th"):
            if row < 0:
                raise GridError("cell before any <tr>")
            colspan = 1
            rowspan = 1
            is_th = tok.startswith("<th")
            if tok in ("<td", "<th"):  # attributes follow until '>'
                i += 1
                while i < len(tokens) and tokens[i] != ">":
                    attr = tokens[i].strip()
                    if "colspan" in attr:
                        colspan = int("".join(ch for ch in attr.split("=")[1] if ch.isdigit()))
                    elif "rowspan" in attr:
                        rowspan = int("".join(ch for ch in attr.split("=")[1] if ch.isdigit()))
                    i += 1
            col = 0
            while col in occupied[row]:
                col += 1
            row_nums = list(range(row, row + rowspan))
            col_nums = list(range(col, col + colspan))
            for r in row_nums:
                for c in col_nums:
                    if c in occupied[r]:
                        raise GridError(f"overlapping spans at grid ({r}, {c})")
                    occupied[r].add(c)
            cells.append(
                {"row_nums": row_nums, "col_nums": col_nums, "is_header": in_header or is_th}
            )
        i += 1
    return cells


def convert_html_record(record: dict, summary: ConversionSummary, strict: bool) -> dict:
    html = record["html"]
    structure_tokens = html["structure"]["tokens"]
    grid = parse_html_grid(structure_tokens)
    coord_cells = html["cells"]
    if len(grid) != len(coord_cells):
        raise GridError(
            f"structure has {len(grid)} cells but {len(coord_cells)} coordinate records"
        )
    for cell, rec in zip(grid, coord_cells):
        cell["bbox"] = Box(*(float(v) for v in rec["bbox"])) if rec.get("bbox") else None
        cell["text"] = "".join(rec.get("tokens", [])).strip()

    boxed = [c for c in grid if c["bbox"] is not None]
    if not boxed:
        raise GridError("record has no cell coordinates at all")

    n_rows = max(max(c["row_nums"]) for c in grid) + 1
    n_cols = max(max(c["col_nums"]) for c in grid) + 1
    row_boxes = []
    for r in range(n_rows):
        parts = [c["bbox"] for c in boxed if r in c["row_nums"]]
        row_boxes.append(box_hull(parts) if parts else None)
    col_boxes = []
    for c_i in range(n_cols):
        parts = [c["bbox"] for c in boxed if c_i in c["col_nums"]]
        col_boxes.append(box_hull(parts) if parts else None)
    if any(b is None for b in row_boxes) or any(b is None for b in col_boxes):
        _warn(summary, "empty_grid_line_dropped", strict)
    kept_rows = [b for b in row_boxes if b is not None]
    kept_cols = [b for b in col_boxes if b is not None]
    row_of = {r: i for i, r in enumerate([r for r, b in enumerate(row_boxes) if b is not None])}
    col_of = {c: i for i, c in enumerate([c for c, b in enumerate(col_boxes) if b is not None])}

    header_cells = [c["bbox"] for c in boxed if c["is_header"]]
    has_header_markup = any("<thead>" in t or t.startswith("<th") for t in structure_tokens)
    headers = (box_hull(header_cells),) if header_cells else ()

    spans = []
    for c in boxed:
        if len(c["row_nums"]) * len(c["col_nums"]) >= 2:
            ri = frozenset(row_of[r] for r in c["row_nums"] if r in row_of)
            ci = frozenset(col_of[cc] for cc in c["col_nums"] if cc in col_of)
            if ri and ci and len(ri) * len(ci) >= 2:
                spans.append(SpanningCell(box=c["bbox"], row_indices=ri, column_indices=ci))

    words = []
    if record.get("words"):
        for w in record["words"]:
            if w.get("text"):
                bbox = w.get("box") or w.get("bbox")
                words.append(Word(text=w["text"], box=Box(*(float(v) for v in bbox))))
    else:
        # no word-level OCR in the record: fall back to one word per non-empty cell
        for c in boxed:
            if c["text"]:
                words.append(Word(text=c["text"], box=c["bbox"]))
        _warn(summary, "words_from_cells", False)

    table_box = box_hull([c["bbox"] for c in boxed])
    page_info = record.get("page") or {}
    if page_info.get("width") and page_info.get("height"):
        pw, ph = float(page_info["width"]), float(page_info["height"])
    else:
        hull = box_hull([table_box] + [w.box for w in words])
        pw, ph = hull.x1 * 1.02, hull.y1 * 1.02
        _warn(summary, "page_size_inferred", False)

    mask = frozenset() if has_header_markup else frozenset({"header"})
    annotation = PageAnnotation(
        tables=(
            TableAnnotation(
                box=table_box.clamped(pw, ph),
                rows=tuple(b.clamped(pw, ph) for b in kept_rows),
                columns=tuple(b.clamped(pw, ph) for b in kept_cols),
                headers=tuple(b.clamped(pw, ph) for b in headers),
                spanning_cells=tuple(spans),
            ),
        ),
        mask_classes=mask,
    )
    page = Page(
        width=pw, height=ph, words=tuple(Word(w.text, w.box.clamped(pw, ph)) for w in words)
    )
    return page_to_json(page, annotation)


def _iter_html_records(input_path: Path):
    if input_path.is_dir():
        for p in sorted(input_path.glob("*.json")):
            with open(p, "r", encoding="utf-8") as f:
                yield p.stem, json.load(f)
    else:
        with open(input_path, "r", encoding="utf-8") as f:
            for n, line in enumerate(f):
                line = line.strip()
                if not line:
                    continue
                rec = json.loads(line)
                stem = rec.get("filename", f"record_{n:06d}")
                yield Path(str(stem)).stem, rec


def convert_html_cells(input_path, output_dir, strict: bool = False) -> ConversionSummary:
    """Convert FinTabNet/PubTabNet-style records (a directory of JSON files or
    one JSON-lines file) into unified pages."""
    input_path = Path(input_path)
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    summary = ConversionSummary()
    for stem, record in _iter_html_records(input_path):
        try:
            doc = convert_html_record(record, summary, strict)
        except ConversionError:
            raise
        except Exception as e:
            if strict:
                raise ConversionError(f"{stem}: {e}") from e
            summary.skipped += 1
            summary.errors.append({"file": stem, "error": str(e)})
            continue
        with open(output_dir / f"{stem}.json", "w", encoding="utf-8") as f:
            json.dump(doc, f, indent=1, sort_keys=True)
            f.write("\n")
        summary.emitted += 1
    return summary
