"""Decode predicted probability matrices into clusters, attachments and boxes.

The chain per class: symmetrize and threshold to get strong connections, run
connected components (the transitivity repair), then, for rows, columns and
headers, look for weak one-directional connections that attach spanning-cell
words to a cluster when more than half of the cluster points at them. Long
pages are decoded over 50%-overlapping windows whose clusters are merged
transitively through shared words.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .docmodel import ALL_CLASSES, Box, ClassId, Page, box_hull
from .tokenizer import Vocabulary, encode_page, reading_order, sort_page

WEAK_THRESHOLD = 0.5
DEFAULT_STRONG_THRESHOLD = 0.9

EXTENDABLE_CLASSES = (ClassId.ROW, ClassId.COLUMN, ClassId.HEADER)
# rows and headers are horizontal bands: weak attachments move them only in x;
# columns only in y; tables and cells take no extensions at all
_EXTEND_AXIS = {ClassId.ROW: "x", ClassId.HEADER: "x", ClassId.COLUMN: "y"}


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-x))


class UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, i: int) -> int:
        root = i
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[i] != root:
            self.parent[i], i = root, self.parent[i]
        return root

    def union(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            if rb < ra:
                ra, rb = rb, ra
            self.parent[rb] = ra


def symmetrized(prob: np.ndarray) -> np.ndarray:
    """Average the prediction matrix with its transpose."""
    sym = prob + prob.T
    sym *= 0.5
    return sym


def strong_matrix(prob: np.ndarray, k: float, pad_mask: np.ndarray | None = None) -> np.ndarray:
    """Symmetrize the probability matrix and threshold at ``k``; padded
    rows/columns come back False."""
    if not (0.0 < k < 1.0):
        raise ValueError(f"threshold k must lie in (0, 1), got {k}")
    strong = symmetrized(prob) >= k
    if pad_mask is not None:
        strong &= pad_mask[:, None]
        strong &= pad_mask[None, :]
    return strong


def connected_components(strong: np.ndarray) -> list[list[int]]:
    """Undirected components over off-diagonal edges; a lone word is its own
    cluster only when its diagonal entry is set."""
    n = strong.shape[0]
    uf = UnionFind(n)
    ii, jj = np.nonzero(strong)
    upper = ii < jj
    for i, j in zip(ii[upper].tolist(), jj[upper].tolist()):
        uf.union(i, j)
    groups: dict[int, list[int]] = {}
    for i in range(n):
        groups.setdefault(uf.find(i), []).append(i)
    clusters = []
    for members in groups.values():
        if len(members) > 1 or strong[members[0], members[0]]:
            clusters.append(sorted(members))
    clusters.sort(key=lambda c: c[0])
    return clusters


def resolve_weak(
    prob: np.ndarray, strong: np.ndarray, clusters: list[list[int]]
) -> dict[int, set[int]]:
    """Weak (one-directional) connections attach words to an existing cluster.

    Entries already covered by a strong connection are zeroed first; a word
    joins a cluster's extension set when more than half of the cluster's
    members point at it with probability above 0.5.
    """
    raw = np.array(prob, copy=True)
    raw[strong] = 0.0
    weak = raw > WEAK_THRESHOLD
    extensions: dict[int, set[int]] = {}
    for ci, members in enumerate(clusters):
        votes = weak[members].sum(axis=0)
        attached = set(np.nonzero(votes * 2 > len(members))[0].tolist()) - set(members)
        if attached:
            extensions[ci] = attached
    return extensions


def clusters_to_boxes(
    clusters: list[list[int]],
    extensions: dict[int, set[int]],
    words,
    cls: ClassId,
) -> list[Box]:
    """Min/max hull of each cluster's word boxes; weak extensions widen rows
    and headers only horizontally and columns only vertically."""
    axis = _EXTEND_AXIS.get(cls)
    boxes = []
    for ci, members in enumerate(clusters):
        if not members:
            raise RuntimeError("empty cluster cannot be boxed")
        base = box_hull(words[i].box for i in members)
        ext = extensions.get(ci, ()) if axis else ()
        if ext:
            ext_hull = box_hull(words[i].box for i in ext)
            if axis == "x":
                base = Box(min(base.x0, ext_hull.x0), base.y0, max(base.x1, ext_hull.x1), base.y1)
            else:
                base = Box(base.x0, min(base.y0, ext_hull.y0), base.x1, max(base.y1, ext_hull.y1))
        boxes.append(base)
    return boxes


@dataclass
class ClusterPrediction:
    clusters: list[list[int]] = field(default_factory=list)
    span_extensions: dict[int, set[int]] = field(default_factory=dict)
    boxes: list[Box] = field(default_factory=list)
    confidence: list[float] = field(default_factory=list)

    def remap(self, index_map) -> "ClusterPrediction":
        return ClusterPrediction(
            clusters=[sorted(index_map[i] for i in c) for c in self.clusters],
            span_extensions={
                ci: {index_map[i] for i in ext} for ci, ext in self.span_extensions.items()
            },
            boxes=list(self.boxes),
            confidence=list(self.confidence),
        )


def _k_for(k, cls: ClassId) -> float:
    """One global threshold by default; a per-class mapping may override it."""
    if isinstance(k, (int, float)):
        return float(k)
    return float(k.get(cls, DEFAULT_STRONG_THRESHOLD))


def chunk_windows(n_words: int, max_seq_len: int) -> list[tuple[int, int]]:
    """Full-width windows stepping by half the window size; the last window is
    anchored to the end of the page so every word is covered."""
    if n_words <= max_seq_len:
        return [(0, n_words)]
    stride = max_seq_len // 2
    starts = [0]
    s = stride
    while s + max_seq_len < n_words:
        starts.append(s)
        s += stride
    starts.append(n_words - max_seq_len)
    return [(s, s + max_seq_len) for s in starts]


@dataclass
class _ClassDecode:
    clusters: list[list[int]]
    extensions: dict[int, set[int]]
    # strong off-diagonal edges (global word ids, i < j) with their symmetrized
    # probability; an edge may repeat when several windows saw it
    edges_i: np.ndarray
    edges_j: np.ndarray
    edge_p: np.ndarray


def _decode_window(prob: np.ndarray, offset: int, k: float, cls: ClassId) -> _ClassDecode:
    sym = symmetrized(prob)
    strong = sym >= k
    clusters = connected_components(strong)
    extensions = (
        resolve_weak(prob, strong, clusters) if cls in EXTENDABLE_CLASSES else {}
    )
    ii, jj = np.nonzero(strong)
    upper = ii < jj
    ii, jj = ii[upper], jj[upper]
    return _ClassDecode(
        clusters=[[i + offset for i in c] for c in clusters],
        extensions={ci: {i + offset for i in ext} for ci, ext in extensions.items()},
        edges_i=ii + offset,
        edges_j=jj + offset,
        edge_p=sym[ii, jj].astype(np.float64),
    )


def _merge_windows(parts: list[_ClassDecode]) -> _ClassDecode:
    """Clusters from different windows sharing a word merge transitively;
    extension sets of merged clusters are unioned."""
    if len(parts) == 1:
        return parts[0]
    all_clusters: list[list[int]] = []
    all_ext: list[set[int]] = []
    for part in parts:
        for ci, members in enumerate(part.clusters):
            all_clusters.append(members)
            all_ext.append(part.extensions.get(ci, set()))
    uf = UnionFind(len(all_clusters))
    owner: dict[int, int] = {}
    for ci, members in enumerate(all_clusters):
        for w in members:
            if w in owner:
                uf.union(owner[w], ci)
            else:
                owner[w] = ci
    merged_members: dict[int, set[int]] = {}
    merged_ext: dict[int, set[int]] = {}
    for ci, members in enumerate(all_clusters):
        root = uf.find(ci)
        merged_members.setdefault(root, set()).update(members)
        merged_ext.setdefault(root, set()).update(all_ext[ci])
    roots = sorted(merged_members, key=lambda r: min(merged_members[r]))
    clusters = [sorted(merged_members[r]) for r in roots]
    extensions = {}
    for ci, r in enumerate(roots):
        ext = merged_ext[r] - merged_members[r]
        if ext:
            extensions[ci] = ext
    return _ClassDecode(
        clusters=clusters,
        extensions=extensions,
        edges_i=np.concatenate([p.edges_i for p in parts]),
        edges_j=np.concatenate([p.edges_j for p in parts]),
        edge_p=np.concatenate([p.edge_p for p in parts]),
    )


def _drop_span_only_clusters(decode: _ClassDecode) -> _ClassDecode:
    """Spanning-cell words form their own little clique in the class matrix;
    once every word of such a component has been attached to some other
    cluster, the component is a spanning-cell artifact, not a row/column/header
    of its own, and is removed from the cluster list."""
    keep = []
    for ci, members in enumerate(decode.clusters):
        attached_by_others: set[int] = set()
        for cj, ext in decode.extensions.items():
            if cj != ci:
                attached_by_others.update(ext)
        if not set(members) <= attached_by_others:
            keep.append(ci)
    remap = {old: new for new, old in enumerate(keep)}
    return _ClassDecode(
        clusters=[decode.clusters[ci] for ci in keep],
        extensions={
            remap[ci]: ext for ci, ext in decode.extensions.items() if ci in remap
        },
        edges_i=decode.edges_i,
        edges_j=decode.edges_j,
        edge_p=decode.edge_p,
    )


def _confidences(decode: _ClassDecode) -> list[float]:
    """Mean symmetrized probability over each cluster's internal strong edges
    (edges seen in several windows are averaged first); singletons score 1.0."""
    n_clusters = len(decode.clusters)
    if n_clusters == 0 or decode.edges_i.size == 0:
        return [1.0] * n_clusters
    max_word = int(max(decode.edges_i.max(), decode.edges_j.max()))
    for members in decode.clusters:
        max_word = max(max_word, members[-1])
    owner = np.full(max_word + 1, -1, dtype=np.int64)
    for ci, members in enumerate(decode.clusters):
        owner[np.asarray(members, dtype=np.int64)] = ci
    ci = owner[decode.edges_i]
    same = (ci >= 0) & (ci == owner[decode.edges_j])
    key = decode.edges_i[same] * (max_word + 1) + decode.edges_j[same]
    uniq, inverse = np.unique(key, return_inverse=True)
    per_edge_sum = np.zeros(uniq.size)
    per_edge_cnt = np.zeros(uniq.size)
    np.add.at(per_edge_sum, inverse, decode.edge_p[same])
    np.add.at(per_edge_cnt, inverse, 1.0)
    per_edge = per_edge_sum / per_edge_cnt
    edge_cluster = np.zeros(uniq.size, dtype=np.int64)
    edge_cluster[inverse] = ci[same]
    sums = np.zeros(n_clusters)
    counts = np.zeros(n_clusters)
    np.add.at(sums, edge_cluster, per_edge)
    np.add.at(counts, edge_cluster, 1.0)
    return [
        float(sums[c] / counts[c]) if counts[c] else 1.0 for c in range(n_clusters)
    ]


def _finish(parts: list[_ClassDecode], words, cls: ClassId) -> ClusterPrediction:
    merged = _merge_windows(parts)
    if cls in EXTENDABLE_CLASSES:
        merged = _drop_span_only_clusters(merged)
    return ClusterPrediction(
        clusters=merged.clusters,
        span_extensions=merged.extensions,
        boxes=clusters_to_boxes(merged.clusters, merged.extensions, words, cls),
        confidence=_confidences(merged),
    )


def decode_probabilities(
    probs: dict[ClassId, np.ndarray],
    words,
    k: float = DEFAULT_STRONG_THRESHOLD,
    max_seq_len: int | None = None,
) -> dict[ClassId, ClusterPrediction]:
    """Full decode chain over per-class raw probability matrices of one page.

    The matrices are indexed by the page's current word order; chunking
    applies when the page is longer than ``max_seq_len``.
    """
    n = len(words)
    window = max_seq_len if max_seq_len is not None else max(n, 1)
    windows = chunk_windows(n, window)
    out = {}
    for cls, prob in probs.items():
        parts = [
            _decode_window(prob[start:stop, start:stop], start, _k_for(k, cls), cls)
            for start, stop in windows
        ]
        out[cls] = _finish(parts, words, cls)
    return out


def page_probabilities(page: Page, vocab: Vocabulary, params, config) -> dict[ClassId, np.ndarray]:
    """Model probabilities over the page's words in their current order;
    overlapping chunk windows are averaged entrywise."""
    from .model import model_forward

    feats = encode_page(page, vocab)
    n = len(feats)
    windows = chunk_windows(n, config.max_seq_len)
    probs = {cls: np.zeros((n, n)) for cls in ALL_CLASSES}
    counts = np.zeros((n, n))
    for start, stop in windows:
        logits = model_forward(feats[start:stop], params, config, seq_len=config.max_seq_len)
        w = stop - start
        for cls, lg in logits.items():
            probs[cls][start:stop, start:stop] += _sigmoid(lg[:w, :w])
        counts[start:stop, start:stop] += 1.0
    np.maximum(counts, 1.0, out=counts)
    for cls in probs:
        probs[cls] /= counts
    return probs


def predict_page(
    page: Page,
    vocab: Vocabulary,
    params,
    config,
    k: float = DEFAULT_STRONG_THRESHOLD,
    max_seq_len: int | None = None,
) -> dict[ClassId, ClusterPrediction]:
    """End-to-end inference for one page.

    Words are sorted into canonical reading order internally; the returned
    word indices refer to the caller's original ``page.words`` order.
    """
    from .model import model_forward

    max_seq_len = max_seq_len or config.max_seq_len
    order = reading_order(page)
    sorted_page = sort_page(page)
    feats = encode_page(sorted_page, vocab)
    windows = chunk_windows(page.n_words, max_seq_len)

    decodes: dict[ClassId, list[_ClassDecode]] = {cls: [] for cls in ALL_CLASSES}
    for start, stop in windows:
        logits = model_forward(feats[start:stop], params, config, seq_len=max_seq_len)
        w = stop - start
        for cls, lg in logits.items():
            decodes[cls].append(
                _decode_window(_sigmoid(lg[:w, :w]), start, _k_for(k, cls), cls)
            )

    return {
        cls: _finish(parts, sorted_page.words, cls).remap(order)
        for cls, parts in decodes.items()
    }


def prediction_to_json(prediction: dict[ClassId, ClusterPrediction]) -> dict:
    doc = {}
    for cls, pred in prediction.items():
        doc[cls.value] = [
            {
                "word_indices": list(map(int, pred.clusters[ci])),
                "extension_indices": sorted(map(int, pred.span_extensions.get(ci, ()))),
                "box": pred.boxes[ci].as_list(),
                "confidence": pred.confidence[ci],
            }
            for ci in range(len(pred.clusters))
        ]
    return doc


def prediction_from_json(doc: dict) -> dict[ClassId, ClusterPrediction]:
    out = {}
    for cls in ALL_CLASSES:
        entries = doc.get(cls.value, [])
        pred = ClusterPrediction()
        for ci, e in enumerate(entries):
            pred.clusters.append(sorted(int(i) for i in e["word_indices"]))
            ext = {int(i) for i in e.get("extension_indices", [])}
            if ext:
                pred.span_extensions[ci] = ext
            pred.boxes.append(Box(*e["box"]))
            pred.confidence.append(float(e["confidence"]))
        out[cls] = pred
    return out
