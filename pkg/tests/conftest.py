import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from clustertab.docmodel import (
    Box,
    Page,
    PageAnnotation,
    SpanningCell,
    TableAnnotation,
    Word,
)
from clustertab.model import ModelConfig
from clustertab.tokenizer import Vocabulary


@pytest.fixture(autouse=True)
def finite_tripwire():
    """Every op asserts finite outputs while tests run."""
    from clustertab import tensor as T

    old = T.CHECK_FINITE
    T.CHECK_FINITE = True
    yield
    T.CHECK_FINITE = old


@pytest.fixture
def tiny_config():
    return ModelConfig(
        vocab_size=12, num_layers=2, d_model=32, dff=64, num_heads=4,
        c_out=16, max_seq_len=16, dropout=0.1,
    )


@pytest.fixture
def tiny_vocab():
    tokens = ["Aaaa", "aaaa", "aaaaaaa", "1111", "1,11", "11", "AA", "Aaaaaaa", "a1", ",", "Aa", "a"]
    return Vocabulary(token_to_id={t: i for i, t in enumerate(tokens)}, unk_id=len(tokens))


def word_grid_page(n_rows=2, n_cols=2, words_per_cell=1, header=False, span=None, noise=0):
    """Small hand-built grid table with exact geometry.

    ``span`` is an optional (row_indices, col_indices) pair of iterables; the
    covered cells' words are replaced by words belonging to one spanning cell.
    Row/column boxes are the grid bands, so membership is unambiguous.
    """
    cell_w, cell_h = 40.0, 20.0
    ox, oy = 10.0, 10.0
    words = []
    span_rows = frozenset(span[0]) if span else frozenset()
    span_cols = frozenset(span[1]) if span else frozenset()
    span_word_ids = []
    cell_words = {}
    for r in range(n_rows):
        for c in range(n_cols):
            ids = []
            for k in range(words_per_cell):
                w = cell_w / words_per_cell
                x0 = ox + c * cell_w + k * w + 2.0
                y0 = oy + r * cell_h + 3.0
                box = Box(x0, y0, x0 + w - 4.0, y0 + cell_h - 6.0)
                words.append(Word(text="Aaaa", box=box))
                ids.append(len(words) - 1)
            if span and r in span_rows and c in span_cols:
                span_word_ids.extend(ids)
            else:
                cell_words[(r, c)] = ids
    rows = tuple(
        Box(ox, oy + r * cell_h, ox + n_cols * cell_w, oy + (r + 1) * cell_h)
        for r in range(n_rows)
    )
    cols = tuple(
        Box(ox + c * cell_w, oy, ox + (c + 1) * cell_w, oy + n_rows * cell_h)
        for c in range(n_cols)
    )
    headers = (rows[0],) if header else ()
    spans = ()
    if span and span_word_ids:
        hull_boxes = [words[i].box for i in span_word_ids]
        spans = (
            SpanningCell(
                box=Box(
                    min(b.x0 for b in hull_boxes),
                    min(b.y0 for b in hull_boxes),
                    max(b.x1 for b in hull_boxes),
                    max(b.y1 for b in hull_boxes),
                ),
                row_indices=span_rows,
                column_indices=span_cols,
            ),
        )
    table_box = Box(ox, oy, ox + n_cols * cell_w, oy + n_rows * cell_h)
    rng = np.random.default_rng(0)
    for _ in range(noise):
        x0 = float(rng.uniform(300, 500))
        y0 = float(rng.uniform(300, 500))
        words.append(Word(text="1111", box=Box(x0, y0, x0 + 20, y0 + 8)))
    page = Page(width=600.0, height=600.0, words=tuple(words))
    ann = PageAnnotation(
        tables=(
            TableAnnotation(box=table_box, rows=rows, columns=cols, headers=headers, spanning_cells=spans),
        )
    )
    return page, ann


def random_grid_annotation(rng: np.random.Generator, max_words: int = 20):
    """Random small table for oracle tests; may contain row- and/or
    column-spanning cells and noise words. Geometry is exact (no straddling)."""
    words_per_cell = int(rng.integers(1, 3))
    noise = int(rng.integers(0, 3))
    while True:
        n_rows = int(rng.integers(1, 5))
        n_cols = int(rng.integers(1, 5))
        if n_rows * n_cols * words_per_cell + noise <= max_words:
            break
    header = bool(rng.random() < 0.5 and n_rows >= 2)
    span = None
    if n_rows * n_cols >= 4 and rng.random() < 0.6:
        if rng.random() < 0.5 and n_cols >= 2:
            width = int(rng.integers(2, n_cols + 1))
            start = int(rng.integers(0, n_cols - width + 1))
            row = int(rng.integers(0, n_rows))
            span = ({row}, set(range(start, start + width)))
        elif n_rows >= 2:
            height = int(rng.integers(2, n_rows + 1))
            start = int(rng.integers(0, n_rows - height + 1))
            col = int(rng.integers(0, n_cols))
            span = (set(range(start, start + height)), {col})
    return word_grid_page(
        n_rows=n_rows, n_cols=n_cols,
        words_per_cell=words_per_cell,
        header=header, span=span, noise=noise,
    )
