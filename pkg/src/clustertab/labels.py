"""Adjacency-matrix training targets derived from page annotations.

Five n-by-n binary matrices are built per page, one per class. Same-table and
same-cell relations are symmetric. For rows, columns and headers a cell that
spans several clusters of the class breaks symmetry: the regular words of each
spanned cluster point at the cell's words one-directionally, while the cell's
words keep symmetric links only among themselves.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .docmodel import (
    ALL_CLASSES,
    Box,
    ClassId,
    Page,
    PageAnnotation,
    assign_words_to_boxes,
    word_box_array,
)


class InvalidAnnotationError(ValueError):
    pass


def _mostly_inside(inner: Box, outer: Box) -> bool:
    area = inner.area
    if area == 0.0:
        cx, cy = inner.center
        return outer.contains_point(cx, cy)
    return 2.0 * inner.intersection_area(outer) >= area


@dataclass
class CellCluster:
    """One cell of a table: a grid intersection or a spanning cell."""

    words: set[int]
    is_spanning: bool
    row: int | None = None
    column: int | None = None
    span_ordinal: int | None = None


@dataclass
class TableMembership:
    table_words: set[int]
    row_assigned: list[set[int]]
    column_assigned: list[set[int]]
    header_assigned: list[set[int]]
    span_words: list[set[int]]
    row_strong: list[set[int]]
    column_strong: list[set[int]]
    header_strong: list[set[int]]
    cells: list[CellCluster]
    # per class: (cluster ordinal, span ordinal) pairs carrying directed edges
    row_span_edges: list[tuple[int, int]]
    column_span_edges: list[tuple[int, int]]
    header_span_edges: list[tuple[int, int]]
    # span ordinals whose words form their own clique in the class matrix
    row_span_cliques: set[int] = field(default_factory=set)
    column_span_cliques: set[int] = field(default_factory=set)
    header_span_cliques: set[int] = field(default_factory=set)


def derive_memberships(page: Page, annotation: PageAnnotation) -> list[TableMembership]:
    """Resolve every word-to-region membership the label matrices need.

    Word indices refer to positions in ``page.words``, which must already be
    in canonical reading order.
    """
    words = page.words
    word_array = word_box_array(words)
    out = []
    for t in annotation.tables:
        n_rows = len(t.rows)
        n_cols = len(t.columns)
        for s in t.spanning_cells:
            if any(r < 0 or r >= n_rows for r in s.row_indices):
                raise InvalidAnnotationError(
                    f"spanning cell row indices {sorted(s.row_indices)} out of range for {n_rows} rows"
                )
            if any(c < 0 or c >= n_cols for c in s.column_indices):
                raise InvalidAnnotationError(
                    f"spanning cell column indices {sorted(s.column_indices)} out of range for {n_cols} columns"
                )

        # one assignment pass over every region of this table
        regions = (
            [t.box]
            + list(t.rows)
            + list(t.columns)
            + list(t.headers)
            + [s.box for s in t.spanning_cells]
        )
        assigned = assign_words_to_boxes(words, regions, word_array=word_array)
        pos = 0
        table_words = assigned[pos]
        pos += 1
        row_assigned = [assigned[pos + i] for i in range(n_rows)]
        pos += n_rows
        column_assigned = [assigned[pos + i] for i in range(n_cols)]
        pos += n_cols
        header_assigned = [assigned[pos + i] for i in range(len(t.headers))]
        pos += len(t.headers)
        span_words = [assigned[pos + i] for i in range(len(t.spanning_cells))]

        row_spanning = {i for i, s in enumerate(t.spanning_cells) if s.spans_rows}
        col_spanning = {i for i, s in enumerate(t.spanning_cells) if s.spans_columns}
        row_span_union = set().union(*(span_words[i] for i in row_spanning)) if row_spanning else set()
        col_span_union = set().union(*(span_words[i] for i in col_spanning)) if col_spanning else set()
        all_span_union = set().union(*span_words) if span_words else set()

        row_strong = [a - row_span_union for a in row_assigned]
        column_strong = [a - col_span_union for a in column_assigned]

        # A header "contains" the rows mostly inside its box; a cell reaching
        # rows both inside and outside the header spans the header.
        header_rows = [
            {r for r, rb in enumerate(t.rows) if _mostly_inside(rb, hb)} for hb in t.headers
        ]
        header_spanning_per_h: list[set[int]] = []
        for hr in header_rows:
            spanning = {
                i
                for i, s in enumerate(t.spanning_cells)
                if (s.row_indices & hr) and (s.row_indices - hr)
            }
            header_spanning_per_h.append(spanning)
        header_strong = []
        for h, assigned in enumerate(header_assigned):
            drop = (
                set().union(*(span_words[i] for i in header_spanning_per_h[h]))
                if header_spanning_per_h[h]
                else set()
            )
            header_strong.append(assigned - drop)

        # Ordinary cells are row/column intersections, less any spanning-cell words.
        cells: list[CellCluster] = []
        grid_positions = []
        grid_regions = []
        for r, rb in enumerate(t.rows):
            for c, cb in enumerate(t.columns):
                region = rb.intersect(cb)
                if region is not None:
                    grid_positions.append((r, c))
                    grid_regions.append(region)
        grid_members = assign_words_to_boxes(words, grid_regions, word_array=word_array)
        for gi, (r, c) in enumerate(grid_positions):
            members = grid_members[gi] - all_span_union
            if members:
                cells.append(CellCluster(words=members, is_spanning=False, row=r, column=c))
        for i, s in enumerate(t.spanning_cells):
            if span_words[i]:
                cells.append(CellCluster(words=set(span_words[i]), is_spanning=True, span_ordinal=i))

        row_span_edges = [
            (r, i) for i in sorted(row_spanning) for r in sorted(t.spanning_cells[i].row_indices)
        ]
        column_span_edges = [
            (c, i) for i in sorted(col_spanning) for c in sorted(t.spanning_cells[i].column_indices)
        ]
        header_span_edges = [
            (h, i) for h in range(len(t.headers)) for i in sorted(header_spanning_per_h[h])
        ]

        out.append(
            TableMembership(
                table_words=table_words,
                row_assigned=row_assigned,
                column_assigned=column_assigned,
                header_assigned=header_assigned,
                span_words=span_words,
                row_strong=row_strong,
                column_strong=column_strong,
                header_strong=header_strong,
                cells=cells,
                row_span_edges=row_span_edges,
                column_span_edges=column_span_edges,
                header_span_edges=header_span_edges,
                row_span_cliques=row_spanning,
                column_span_cliques=col_spanning,
                header_span_cliques=set().union(*header_spanning_per_h) if header_spanning_per_h else set(),
            )
        )
    return out


@dataclass
class LabelSet:
    adjacency: dict[ClassId, np.ndarray]  # (seq_len, seq_len) uint8 each
    class_mask: dict[ClassId, bool]
    pad_mask: np.ndarray  # (seq_len,) bool
    n_words: int

    def pair_mask(self) -> np.ndarray:
        """(seq_len, seq_len) bool; True where both positions are real words."""
        return np.outer(self.pad_mask, self.pad_mask)


def _set_clique(m: np.ndarray, members: set[int]) -> None:
    if not members:
        return
    idx = np.fromiter(sorted(members), dtype=np.intp)
    m[np.ix_(idx, idx)] = 1


def _set_directed(m: np.ndarray, sources: set[int], targets: set[int]) -> None:
    if not sources or not targets:
        return
    si = np.fromiter(sorted(sources), dtype=np.intp)
    ti = np.fromiter(sorted(targets), dtype=np.intp)
    m[np.ix_(si, ti)] = 1


def build_labels(page: Page, annotation: PageAnnotation, seq_len: int) -> LabelSet:
    """Materialize the five adjacency matrices at ``seq_len`` with zero padding.

    Words beyond ``seq_len`` are truncated (canonical order assumed). The
    diagonal is 1 exactly for words belonging to at least one cluster of the
    class, so single-word clusters survive thresholding downstream.
    """
    n = min(page.n_words, seq_len)
    if page.n_words > seq_len:
        page = Page(width=page.width, height=page.height, words=page.words[:seq_len])
    memberships = derive_memberships(page, annotation)

    adjacency = {c: np.zeros((seq_len, seq_len), dtype=np.uint8) for c in ALL_CLASSES}
    for tm in memberships:
        _set_clique(adjacency[ClassId.TABLE], tm.table_words)
        for cell in tm.cells:
            _set_clique(adjacency[ClassId.CELL], cell.words)

        m = adjacency[ClassId.ROW]
        for strong in tm.row_strong:
            _set_clique(m, strong)
        for i in tm.row_span_cliques:
            _set_clique(m, tm.span_words[i])
        for r, i in tm.row_span_edges:
            _set_directed(m, tm.row_strong[r], tm.span_words[i])

        m = adjacency[ClassId.COLUMN]
        for strong in tm.column_strong:
            _set_clique(m, strong)
        for i in tm.column_span_cliques:
            _set_clique(m, tm.span_words[i])
        for c, i in tm.column_span_edges:
            _set_directed(m, tm.column_strong[c], tm.span_words[i])

        m = adjacency[ClassId.HEADER]
        for strong in tm.header_strong:
            _set_clique(m, strong)
        for i in tm.header_span_cliques:
            _set_clique(m, tm.span_words[i])
        for h, i in tm.header_span_edges:
            _set_directed(m, tm.header_strong[h], tm.span_words[i])

    pad_mask = np.zeros(seq_len, dtype=bool)
    pad_mask[:n] = True
    class_mask = {c: c.value not in annotation.mask_classes for c in ALL_CLASSES}
    return LabelSet(adjacency=adjacency, class_mask=class_mask, pad_mask=pad_mask, n_words=n)


def symmetrize_check(labels: LabelSet) -> dict[ClassId, list[tuple[int, int]]]:
    """List every (i, j) with M[i,j] != M[j,i], per class.

    Table and cell matrices must come back empty; rows/columns/headers may
    report the regular-word -> spanning-word entries.
    """
    report = {}
    for cls, m in labels.adjacency.items():
        diff = m != m.T
        pairs = [(int(i), int(j)) for i, j in zip(*np.nonzero(diff)) if i < j]
        report[cls] = pairs
    return report


def adjacency_sparse(labels: LabelSet) -> dict[str, list[list[int]]]:
    """Debug dump: per class, the [[i, j], ...] list of 1-entries."""
    out = {}
    for cls, m in labels.adjacency.items():
        out[cls.value] = [[int(i), int(j)] for i, j in zip(*np.nonzero(m))]
    return out
