"""Dice on adjacency matrices and COCO-style AP/AR on reconstructed boxes.

Box metrics follow the standard single-class protocol: predictions pooled
over pages, sorted by confidence, greedily matched per page at each IoU
threshold in 0.50:0.95:0.05, precision interpolated on the 101-point recall
grid. Ground-truth region boxes are first shrunk to the hull of the words
they contain, since the model can only ever predict word-hull boxes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .docmodel import (
    ALL_CLASSES,
    Box,
    ClassId,
    Page,
    PageAnnotation,
    assign_words_to_boxes,
    box_hull,
)
from .labels import derive_memberships

IOU_THRESHOLDS = tuple(np.round(np.arange(0.50, 0.951, 0.05), 2))
RECALL_GRID = np.linspace(0.0, 1.0, 101)
MAX_DETECTIONS = 100


def dice(pred: np.ndarray, gt: np.ndarray, pad_mask: np.ndarray | None = None) -> float:
    """2 * |pred=gt=1| / (|pred=1| + |gt=1|) over unpadded entries; 1.0 when
    both matrices are empty."""
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    if pad_mask is not None:
        keep = np.outer(pad_mask, pad_mask)
        pred = pred & keep
        gt = gt & keep
    p = int(pred.sum())
    g = int(gt.sum())
    if p + g == 0:
        return 1.0
    both = int((pred & gt).sum())
    return 2.0 * both / (p + g)


def symmetric_part(adjacency: np.ndarray) -> np.ndarray:
    """The undirected strong structure of a label matrix: entries set in both
    directions. Directed spanning-cell edges are a training device and are
    scored via attachments, not via Dice."""
    return np.logical_and(adjacency, adjacency.T)


def iou(a: Box, b: Box) -> float:
    inter = a.intersection_area(b)
    union = a.area + b.area - inter
    if union <= 0.0:
        return 1.0 if (a.area == 0.0 and b.area == 0.0 and inter == 0.0 and a.as_list() == b.as_list()) else 0.0
    return inter / union


def shrink_gt(boxes, words) -> list[Box]:
    """Replace each ground-truth box by the hull of the words assigned to it;
    boxes containing no words are dropped."""
    assignment = assign_words_to_boxes(words, list(boxes))
    shrunk = []
    for ri, members in assignment.items():
        if not members:
            continue
        shrunk.append(box_hull(words[i].box for i in members))
    return shrunk


@dataclass
class BoxScores:
    ap: float
    ap50: float
    ar: float
    n_gt: int
    n_pred: int


def average_precision(
    predictions: list[list[tuple[Box, float]]],
    ground_truths: list[list[Box]],
    iou_thresholds=IOU_THRESHOLDS,
    max_detections: int = MAX_DETECTIONS,
) -> BoxScores:
    """Single-class AP/AR pooled over pages.

    ``predictions[p]`` holds (box, confidence) pairs of page p, ``ground_truths[p]``
    its GT boxes. With no GT at all, the score is 1.0 when nothing was
    predicted and 0.0 otherwise.
    """
    if len(predictions) != len(ground_truths):
        raise ValueError("predictions and ground truths must cover the same pages")
    n_gt = sum(len(g) for g in ground_truths)
    n_pred = sum(len(p) for p in predictions)
    if n_gt == 0:
        score = 1.0 if n_pred == 0 else 0.0
        return BoxScores(ap=score, ap50=score, ar=score, n_gt=0, n_pred=n_pred)

    # pool detections, keeping at most max_detections per page by confidence
    pooled: list[tuple[float, int, int]] = []  # (-conf, page, idx) sort key material
    for p, preds in enumerate(predictions):
        ranked = sorted(range(len(preds)), key=lambda i: (-preds[i][1], i))[:max_detections]
        for i in ranked:
            pooled.append((p, i))
    pooled.sort(key=lambda pi: (-predictions[pi[0]][pi[1]][1], pi[0], pi[1]))

    aps = []
    recalls = []
    for t in iou_thresholds:
        matched: list[set[int]] = [set() for _ in ground_truths]
        tp = np.zeros(len(pooled))
        for rank, (p, i) in enumerate(pooled):
            box = predictions[p][i][0]
            best_iou = 0.0
            best_g = -1
            for g, gt_box in enumerate(ground_truths[p]):
                if g in matched[p]:
                    continue
                v = iou(box, gt_box)
                if v >= t and v > best_iou:
                    best_iou = v
                    best_g = g
            if best_g >= 0:
                matched[p].add(best_g)
                tp[rank] = 1.0
        cum_tp = np.cumsum(tp)
        recall = cum_tp / n_gt
        precision = cum_tp / np.arange(1, len(pooled) + 1) if len(pooled) else np.zeros(0)
        # right-to-left precision envelope, then read off the 101-point grid
        envelope = np.maximum.accumulate(precision[::-1])[::-1] if len(pooled) else precision
        ap = 0.0
        for r in RECALL_GRID:
            idx = np.searchsorted(recall, r, side="left")
            ap += envelope[idx] if idx < len(envelope) else 0.0
        aps.append(ap / len(RECALL_GRID))
        recalls.append(recall[-1] if len(recall) else 0.0)

    return BoxScores(
        ap=float(np.mean(aps)),
        ap50=float(aps[0]),
        ar=float(np.mean(recalls)),
        n_gt=n_gt,
        n_pred=n_pred,
    )


# ---------------------------------------------------------------------------
# Ground-truth boxes per class
# ---------------------------------------------------------------------------


def ground_truth_boxes(page: Page, annotation: PageAnnotation) -> dict[ClassId, list[Box]]:
    """Class-wise GT boxes, already shrunk to word hulls.

    The unified format stores no ordinary cells; they are derived as
    row/column intersections via the shared membership logic, so predicted
    cell clusters and GT cells agree on what a cell is.
    """
    words = page.words
    memberships = derive_memberships(page, annotation)
    out: dict[ClassId, list[Box]] = {cls: [] for cls in ALL_CLASSES}
    for t, tm in zip(annotation.tables, memberships):
        out[ClassId.TABLE].extend(shrink_gt([t.box], words))
        out[ClassId.ROW].extend(shrink_gt(t.rows, words))
        out[ClassId.COLUMN].extend(shrink_gt(t.columns, words))
        out[ClassId.HEADER].extend(shrink_gt(t.headers, words))
        for cell in tm.cells:
            out[ClassId.CELL].append(box_hull(words[i].box for i in sorted(cell.words)))
    return out


@dataclass
class ClassReport:
    dice: float | None
    ap: float
    ap50: float
    ar: float
    n_gt: int
    n_pred: int

    def to_dict(self) -> dict:
        return {
            "dice": self.dice,
            "ap": self.ap,
            "ap50": self.ap50,
            "ar": self.ar,
            "n_gt": self.n_gt,
            "n_pred": self.n_pred,
        }


@dataclass
class EvalReport:
    per_class: dict[ClassId, ClassReport]

    def to_dict(self) -> dict:
        return {cls.value: rep.to_dict() for cls, rep in self.per_class.items()}


def evaluate_boxes(
    predictions_per_page: list[dict[ClassId, list[tuple[Box, float]]]],
    pages: list[Page],
    annotations: list[PageAnnotation],
    dice_per_class: dict[ClassId, float] | None = None,
) -> EvalReport:
    """Box AP/AR per class over a dataset; adjacency Dice is attached when the
    caller computed it (it needs probability matrices, not just boxes)."""
    gts = [ground_truth_boxes(p, a) for p, a in zip(pages, annotations)]
    per_class = {}
    for cls in ALL_CLASSES:
        scores = average_precision(
            [pred.get(cls, []) for pred in predictions_per_page],
            [g[cls] for g in gts],
        )
        per_class[cls] = ClassReport(
            dice=(dice_per_class or {}).get(cls),
            ap=scores.ap,
            ap50=scores.ap50,
            ar=scores.ar,
            n_gt=scores.n_gt,
            n_pred=scores.n_pred,
        )
    return EvalReport(per_class=per_class)
