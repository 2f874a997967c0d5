"""Deterministic synthetic page generator with exact ground truth.

Pages carry grid tables (optional header row, optional column-spanning header
cell) plus scattered noise words. Geometry is built so that no word ever
straddles a region boundary and every annotation box equals the hull of its
words: ground-truth shrinking is the identity and the decode chain can
reproduce the annotation exactly.

Every page is a pure function of (seed, index): any page of a split can be
regenerated independently of the others.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .docmodel import (
    Box,
    Page,
    PageAnnotation,
    SpanningCell,
    TableAnnotation,
    Word,
    box_hull,
    save_page_json,
)

SCHEMA_VERSION = 1

DEFAULT_PATTERNS = (
    ("Aaaa", 3.0),
    ("aaaa", 2.0),
    ("aaaaaaa", 1.0),
    ("1111", 2.0),
    ("1,11", 1.5),
    ("11", 1.0),
    ("AA", 1.0),
    ("Aaaaaaa", 0.8),
    ("a1", 0.5),
    (",", 0.2),
)

# header cells skew toward capitalized label-like tokens, body cells toward
# numbers, mirroring how real tables read
HEADER_PATTERNS = (
    ("Aaaa", 3.0),
    ("Aaaaaaa", 2.0),
    ("AA", 1.5),
    ("Aaaa,", 0.5),
)
BODY_PATTERNS = (
    ("1111", 3.0),
    ("1,11", 2.0),
    ("11", 1.5),
    ("aaaa", 1.0),
    ("Aaaa", 0.5),
    ("a1", 0.3),
)


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class GenConfig:
    seed: int = 0
    page_width: float = 1000.0
    page_height: float = 1000.0
    tables_range: tuple[int, int] = (0, 3)
    rows_range: tuple[int, int] = (2, 8)
    cols_range: tuple[int, int] = (2, 6)
    header_prob: float = 0.7
    span_prob: float = 0.3
    words_per_cell: tuple[int, int] = (1, 3)
    cell_pad: float = 3.0
    jitter: float = 0.3
    noise_words_range: tuple[int, int] = (0, 40)
    # optional grid (page units) that table origins and row/column boundaries
    # snap to; aligning it with the coordinate quantizer shrinks the set of
    # distinct coordinate bins, which desk-scale training budgets rely on
    coord_snap: float | None = None
    token_patterns: tuple[tuple[str, float], ...] = field(default_factory=lambda: DEFAULT_PATTERNS)
    # when set, header-row cells draw from this distribution instead of
    # token_patterns (label-like text above value-like text)
    header_patterns: tuple[tuple[str, float], ...] | None = None
    # probability that a body word repeats its column's dominant pattern
    # (real columns hold one value type: amounts, counts, names, ...)
    column_typed_prob: float = 0.0

    def __post_init__(self):
        for name in ("tables_range", "rows_range", "cols_range", "words_per_cell", "noise_words_range"):
            lo, hi = getattr(self, name)
            if lo > hi or lo < 0:
                raise ValueError(f"{name} must be a non-degenerate range, got ({lo}, {hi})")
        for name in ("header_prob", "span_prob", "column_typed_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["token_patterns"] = [[p, w] for p, w in self.token_patterns]
        if self.header_patterns is not None:
            d["header_patterns"] = [[p, w] for p, w in self.header_patterns]
        for k in ("tables_range", "rows_range", "cols_range", "words_per_cell", "noise_words_range"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GenConfig":
        d = dict(d)
        if "token_patterns" in d:
            d["token_patterns"] = tuple((p, float(w)) for p, w in d["token_patterns"])
        if d.get("header_patterns") is not None:
            d["header_patterns"] = tuple((p, float(w)) for p, w in d["header_patterns"])
        for k in ("tables_range", "rows_range", "cols_range", "words_per_cell", "noise_words_range"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _rand_int(rng, lo: int, hi: int) -> int:
    return int(rng.integers(lo, hi + 1))


def _split_extent(
    rng, start: float, extent: float, n: int, jitter: float, snap: float | None = None
) -> list[float]:
    """Boundaries of n bands over [start, start+extent] with jittered widths;
    interior boundaries optionally snap to the global ``snap`` grid."""
    weights = np.clip(1.0 + jitter * rng.uniform(-1.0, 1.0, size=n), 0.4, None)
    weights = weights / weights.sum() * extent
    bounds = [start]
    for w in weights:
        bounds.append(bounds[-1] + float(w))
    bounds[-1] = start + extent
    if snap and extent >= (n + 1) * snap:
        snapped = [start]
        for i in range(1, n):
            b = round(bounds[i] / snap) * snap
            # keep at least one grid cell of room on both sides
            b = min(max(b, snapped[-1] + snap), start + extent - (n - i) * snap)
            snapped.append(b)
        snapped.append(start + extent)
        bounds = snapped
    return bounds


def _pick_pattern(rng, patterns) -> str:
    names = [p for p, _ in patterns]
    weights = np.array([w for _, w in patterns], dtype=float)
    weights /= weights.sum()
    return str(names[int(rng.choice(len(names), p=weights))])


@dataclass
class _TableDraft:
    words: list[Word]
    row_words: list[list[int]]  # word ids per row (local to draft accumulation order)
    col_words: list[list[int]]  # strong (non-spanning) words per column
    span_words_by_col: dict[int, list[int]]
    header_row: int | None
    span_columns: tuple[int, ...]


def _generate_table(rng, box_x0, box_y0, box_x1, box_y1, config: GenConfig, words: list[Word]):
    n_rows = _rand_int(rng, *config.rows_range)
    n_cols = _rand_int(rng, *config.cols_range)
    has_header = n_rows >= 2 and rng.random() < config.header_prob
    span: tuple[int, int] | None = None  # (start col, width)
    if has_header and n_cols >= 3 and rng.random() < config.span_prob:
        width = _rand_int(rng, 2, n_cols - 1)
        start = _rand_int(rng, 0, n_cols - width)
        span = (start, width)

    row_bounds = _split_extent(rng, box_y0, box_y1 - box_y0, n_rows, config.jitter, config.coord_snap)
    col_bounds = _split_extent(rng, box_x0, box_x1 - box_x0, n_cols, config.jitter, config.coord_snap)

    # per-band content regions; the chunk gap is constant per column so every
    # cell's word hull spans the exact same x-range
    pad_y = [min(config.cell_pad, (row_bounds[r + 1] - row_bounds[r]) / 4.0) for r in range(n_rows)]
    pad_x = [min(config.cell_pad, (col_bounds[c + 1] - col_bounds[c]) / 4.0) for c in range(n_cols)]
    bands_y = [(row_bounds[r] + pad_y[r], row_bounds[r + 1] - pad_y[r]) for r in range(n_rows)]
    bands_x = [(col_bounds[c] + pad_x[c], col_bounds[c + 1] - pad_x[c]) for c in range(n_cols)]
    gap = [min(2.0, (bands_x[c][1] - bands_x[c][0]) / (4.0 * config.words_per_cell[1])) for c in range(n_cols)]

    column_type = [_pick_pattern(rng, config.token_patterns) for _ in range(n_cols)]

    def emit_cell_words(r: int, c: int) -> list[int]:
        k = _rand_int(rng, *config.words_per_cell)
        bx0, bx1 = bands_x[c]
        by0, by1 = bands_y[r]
        header_cell = config.header_patterns is not None and has_header and r == 0
        w = (bx1 - bx0) / k
        ids = []
        for i in range(k):
            if header_cell:
                text = _pick_pattern(rng, config.header_patterns)
            elif rng.random() < config.column_typed_prob:
                text = column_type[c]
            else:
                text = _pick_pattern(rng, config.token_patterns)
            box = Box(bx0 + i * w + gap[c], by0, bx0 + (i + 1) * w - gap[c], by1)
            words.append(Word(text=text, box=box))
            ids.append(len(words) - 1)
        return ids

    span_cols = tuple(range(span[0], span[0] + span[1])) if span else ()
    row_words: list[list[int]] = [[] for _ in range(n_rows)]
    col_words: list[list[int]] = [[] for _ in range(n_cols)]
    span_words_by_col: dict[int, list[int]] = {}
    for r in range(n_rows):
        for c in range(n_cols):
            if r == 0 and has_header and c in span_cols:
                ids = emit_cell_words(r, c)
                span_words_by_col[c] = ids
                row_words[r].extend(ids)
            else:
                ids = emit_cell_words(r, c)
                row_words[r].extend(ids)
                col_words[c].extend(ids)

    return _TableDraft(
        words=words,
        row_words=row_words,
        col_words=col_words,
        span_words_by_col=span_words_by_col,
        header_row=0 if has_header else None,
        span_columns=span_cols,
    )


def _draft_annotation(draft: _TableDraft, words: list[Word]) -> TableAnnotation:
    def hull(ids) -> Box:
        return box_hull(words[i].box for i in ids)

    all_span = [i for ids in draft.span_words_by_col.values() for i in ids]
    rows = tuple(hull(ids) for ids in draft.row_words)
    columns = tuple(
        hull(draft.col_words[c] + draft.span_words_by_col.get(c, []))
        for c in range(len(draft.col_words))
    )
    headers = ()
    if draft.header_row is not None:
        headers = (hull(draft.row_words[draft.header_row]),)
    spans = ()
    if all_span:
        spans = (
            SpanningCell(
                box=hull(all_span),
                row_indices=frozenset({draft.header_row}),
                column_indices=frozenset(draft.span_columns),
            ),
        )
    table_ids = [i for ids in draft.row_words for i in ids]
    return TableAnnotation(box=hull(table_ids), rows=rows, columns=columns, headers=headers, spanning_cells=spans)


def generate_page(config: GenConfig, index: int) -> tuple[Page, PageAnnotation]:
    """Lay out jittered grid tables plus noise words; deterministic in (seed, index)."""
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, index]))
    W, H = config.page_width, config.page_height
    margin = min(40.0, W / 10.0, H / 10.0)

    n_tables = _rand_int(rng, *config.tables_range)
    words: list[Word] = []
    tables = []
    table_hulls: list[Box] = []
    slab_h = (H - 2 * margin) / max(n_tables, 1)
    for t in range(n_tables):
        slab_y0 = margin + t * slab_h
        avail_w = W - 2 * margin
        avail_h = slab_h - margin / 2.0
        if avail_w < 60 or avail_h < 30:
            raise GenerationError(
                f"page {W}x{H} too small to place {n_tables} tables with margin {margin}"
            )
        tw = avail_w * rng.uniform(0.55, 0.9)
        th = avail_h * rng.uniform(0.55, 0.9)
        tx0 = margin + rng.uniform(0.0, avail_w - tw)
        ty0 = slab_y0 + rng.uniform(0.0, avail_h - th)
        snap = config.coord_snap
        if snap:
            tx0 = round(tx0 / snap) * snap
            ty0 = round(ty0 / snap) * snap
            tw = max(round(tw / snap) * snap, snap)
            th = max(round(th / snap) * snap, snap)
            tx0 = min(max(tx0, snap), W - snap - tw)
            ty0 = min(max(ty0, snap), slab_y0 + avail_h - th)
        draft = _generate_table(rng, tx0, ty0, tx0 + tw, ty0 + th, config, words)
        ann = _draft_annotation(draft, words)
        tables.append(ann)
        table_hulls.append(ann.box)

    n_noise = _rand_int(rng, *config.noise_words_range)
    placed = 0
    attempts = 0
    while placed < n_noise:
        attempts += 1
        if attempts > 200 * max(n_noise, 1):
            raise GenerationError(
                f"could not place {n_noise} noise words outside {n_tables} tables"
            )
        w = min(rng.uniform(12.0, 60.0), W / 3.0)
        h = min(rng.uniform(8.0, 14.0), H / 3.0)
        x0 = rng.uniform(0.0, W - w)
        y0 = rng.uniform(0.0, H - h)
        cand = Box(x0, y0, x0 + w, y0 + h)
        safe = Box(
            max(cand.x0 - 5.0, 0.0), max(cand.y0 - 5.0, 0.0),
            min(cand.x1 + 5.0, W), min(cand.y1 + 5.0, H),
        )
        if any(safe.intersection_area(tb) > 0.0 for tb in table_hulls):
            continue
        words.append(Word(text=_pick_pattern(rng, config.token_patterns), box=cand))
        placed += 1

    page = Page(width=W, height=H, words=tuple(words))
    return page, PageAnnotation(tables=tuple(tables))


def generate_split(config: GenConfig, n_pages: int, out_dir) -> Path:
    """Write ``n_pages`` unified-JSON annotation files plus a manifest."""
    if n_pages < 1:
        raise ValueError("n_pages must be >= 1")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(n_pages):
        page, ann = generate_page(config, i)
        save_page_json(out / f"page_{i:05d}.json", page, ann)
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "config": config.to_dict(),
        "config_hash": config.hash(),
        "seed": config.seed,
        "n_pages": n_pages,
    }
    with open(out / "manifest.json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
        f.write("\n")
    return out


def generate_dataset(config: GenConfig, n_pages: int, start_index: int = 0):
    """In-memory split: list of (Page, PageAnnotation)."""
    return [generate_page(config, start_index + i) for i in range(n_pages)]
