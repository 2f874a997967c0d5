"""Masked elementwise BCE loss, Adam, and the two-phase training loop.

The loss is aggregated by sum over all unpadded matrix entries of all
unmasked classes, computed in the numerically stable logit form. Entries of
padded positions and whole per-page masked classes carry weight zero, so
they contribute exactly zero loss and exactly zero gradient.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import tensor as T
from .docmodel import ALL_CLASSES, ClassId, Page, PageAnnotation
from .labels import LabelSet, build_labels
from .model import ModelConfig, features_to_arrays, forward_batch, init_params
from .tokenizer import Vocabulary, encode_page, sort_page

REFERENCE_SEQ_LEN = 1000


class TrainingDivergedError(RuntimeError):
    pass


class EmptyDatasetError(ValueError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 8
    seq_len: int = 1000
    lr_phase1: float = 1e-4
    epochs_phase1: int = 100
    steps_per_epoch: int = 5000
    lr_phase2: float = 1e-5
    epochs_phase2: int = 100
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    dropout_seed: int = 17
    data_seed: int = 23
    init_seed: int = 5
    checkpoint_every_epochs: int = 1
    val_pages_per_epoch: int = 32
    eval_threshold: float = 0.9
    dtype: str = "float64"

    def __post_init__(self):
        for name in ("lr_phase1", "lr_phase2", "beta1", "beta2", "eps"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_dict(self) -> dict:
        return asdict(self)


def scaled_lr(base_lr: float, seq_len: int, reference: int = REFERENCE_SEQ_LEN) -> float:
    """Optional preset helper: shrink the rate with the squared sequence-length
    ratio so sum-aggregated updates stay comparable across sequence lengths.
    Off by default; explicit rates in a config always win."""
    return base_lr * (seq_len / reference) ** 2


def bce_loss(
    logits: dict[ClassId, T.Tensor],
    labels: LabelSet | list[LabelSet],
) -> tuple[T.Tensor, float]:
    """Summed masked BCE over all classes; also returns the unmasked entry count.

    Accepts one LabelSet against (L, L) logits or a list of B LabelSets
    against (B, L, L) logits. Classes whose weight mask is identically zero
    are skipped outright, so their head parameters receive no gradient at all.
    """
    batch = labels if isinstance(labels, list) else [labels]
    total: T.Tensor | None = None
    weight_count = 0.0
    for cls, logit in logits.items():
        data = logit.data
        batched = data.ndim == 3
        if not batched:
            data = data[None]
        if len(batch) != data.shape[0]:
            raise T.ShapeError(f"{len(batch)} label sets for logits batch {data.shape[0]}")
        w = np.zeros(data.shape, dtype=data.dtype)
        y = np.zeros(data.shape, dtype=data.dtype)
        for b, ls in enumerate(batch):
            if not ls.class_mask[cls]:
                continue
            w[b] = ls.pair_mask()
            y[b] = ls.adjacency[cls]
        if not w.any():
            continue
        weight_count += float(w.sum())
        if not batched:
            w, y = w[0], y[0]
        term = T.bce_with_logits_sum(logit, y, w)
        total = term if total is None else T.add(total, term)
    if total is None:
        total = T.Tensor(np.asarray(0.0))
    return total, weight_count


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    @classmethod
    def for_params(cls, params: T.ParamStore) -> "AdamState":
        state = cls()
        for name, p in params:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        return state


def adam_step(
    params: T.ParamStore,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update from the gradients accumulated in ``params``."""
    state.t += 1
    bc1 = 1.0 - beta1**state.t
    bc2 = 1.0 - beta2**state.t
    for name, p in params:
        g = p.grad
        if g is None:
            continue
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


# ---------------------------------------------------------------------------
# Data preparation and batching
# ---------------------------------------------------------------------------


@dataclass
class PreparedPage:
    ids: np.ndarray  # (L, 5)
    pad_mask: np.ndarray  # (L,)
    labels: LabelSet
    n_words: int


def prepare_page(
    page: Page,
    annotation: PageAnnotation,
    vocab: Vocabulary,
    model_config: ModelConfig,
    seq_len: int,
) -> PreparedPage:
    """Canonical-sort a page, encode features, and build its label matrices.

    Pages longer than ``seq_len`` are truncated to the first ``seq_len`` words
    in reading order.
    """
    page = sort_page(page)
    if page.n_words > seq_len:
        page = Page(width=page.width, height=page.height, words=page.words[:seq_len])
    feats = encode_page(page, vocab)
    ids, pad = features_to_arrays(feats, seq_len, model_config)
    labels = build_labels(page, annotation, seq_len)
    return PreparedPage(ids=ids, pad_mask=pad, labels=labels, n_words=page.n_words)


def _epoch_batches(n_pages, counts, batch_size, rng: np.random.Generator):
    """Shuffle, then group pages of similar word count; batch order reshuffled."""
    order = rng.permutation(n_pages)
    order = sorted(order, key=lambda i: (counts[i], i))
    batches = [order[i : i + batch_size] for i in range(0, len(order), batch_size)]
    rng.shuffle(batches)
    return batches


def _stack_batch(pages: list[PreparedPage]):
    ids = np.stack([p.ids for p in pages])
    pad = np.stack([p.pad_mask for p in pages])
    labels = [p.labels for p in pages]
    return ids, pad, labels


@dataclass
class EpochRecord:
    epoch: int
    phase: int
    mean_loss: float
    dice: dict[str, float]
    wall_time_s: float

    def to_json(self) -> str:
        return json.dumps(
            {
                "epoch": self.epoch,
                "phase": self.phase,
                "mean_loss": self.mean_loss,
                "dice": self.dice,
                "wall_time_s": self.wall_time_s,
            },
            sort_keys=True,
        )


def _validation_dice(
    val_pages: list[PreparedPage],
    params: T.ParamStore,
    model_config: ModelConfig,
    threshold: float,
    limit: int,
) -> dict[str, float]:
    from .metrics import dice  # local import to avoid a cycle

    if not val_pages or limit <= 0:
        return {}
    scores: dict[str, list[float]] = {c.value: [] for c in ALL_CLASSES}
    for p in val_pages[:limit]:
        logits = forward_batch(p.ids[None], p.pad_mask[None], params, model_config, training=False)
        for cls, logit in logits.items():
            prob = 1.0 / (1.0 + np.exp(-logit.data[0]))
            sym = 0.5 * (prob + prob.T)
            pred = sym >= threshold
            gt = np.logical_and(p.labels.adjacency[cls], p.labels.adjacency[cls].T)
            scores[cls.value].append(dice(pred, gt, p.labels.pad_mask))
    return {c: float(np.mean(v)) for c, v in scores.items() if v}


CHECKPOINT_PARAM_PREFIX = "param."


def save_train_checkpoint(
    path,
    params: T.ParamStore,
    state: AdamState,
    model_config: ModelConfig,
    train_config: TrainConfig,
    step: int,
    epoch: int,
    phase: int,
) -> None:
    arrays: dict[str, np.ndarray] = {}
    for name, p in params:
        arrays[CHECKPOINT_PARAM_PREFIX + name] = p.data
        arrays["adam.m." + name] = state.m[name]
        arrays["adam.v." + name] = state.v[name]
    meta = {
        "kind": "train_checkpoint",
        "model_config": model_config.to_dict(),
        "train_config": train_config.to_dict(),
        "step": step,
        "adam_t": state.t,
        "epoch": epoch,
        "phase": phase,
    }
    T.save_checkpoint(path, arrays, meta)


def load_model_params(path, expected_config: ModelConfig | None = None):
    """Load parameters (training or inference use); verify the stored config."""
    arrays, meta = T.load_checkpoint(path)
    stored = ModelConfig.from_dict(meta["model_config"])
    if expected_config is not None and stored != expected_config:
        raise ValueError(
            "checkpoint model config disagrees with the requested one: "
            f"{stored.to_dict()} != {expected_config.to_dict()}"
        )
    params = init_params(stored, seed=0, dtype=np.dtype(meta.get("dtype", "float64")))
    params.load_state(
        {
            name[len(CHECKPOINT_PARAM_PREFIX) :]: arr
            for name, arr in arrays.items()
            if name.startswith(CHECKPOINT_PARAM_PREFIX)
        }
    )
    return params, stored, meta, arrays


@dataclass
class TrainResult:
    params: T.ParamStore
    state: AdamState
    history: list[EpochRecord]
    checkpoint_path: Path | None


def train(
    train_config: TrainConfig,
    model_config: ModelConfig,
    dataset: list[tuple[Page, PageAnnotation]],
    vocab: Vocabulary,
    val_dataset: list[tuple[Page, PageAnnotation]] | None = None,
    out_dir=None,
    resume_from=None,
    log_fn=None,
) -> TrainResult:
    """Run both learning-rate phases over a prepared dataset.

    Training is bit-reproducible: the data order is a pure function of
    (data_seed, epoch), dropout masks of (dropout_seed, global step), so a
    run resumed from a checkpoint matches the uninterrupted one exactly.
    """
    if not dataset:
        raise EmptyDatasetError("training dataset is empty")
    dtype = train_config.np_dtype()
    seq_len = train_config.seq_len

    prepared = [
        prepare_page(p, a, vocab, model_config, seq_len) for p, a in dataset
    ]
    val_prepared = [
        prepare_page(p, a, vocab, model_config, seq_len) for p, a in (val_dataset or [])
    ]
    counts = [p.n_words for p in prepared]

    params = init_params(model_config, seed=train_config.init_seed, dtype=dtype)
    state = AdamState.for_params(params)
    start_step = 0
    if resume_from is not None:
        arrays, meta = T.load_checkpoint(resume_from)
        stored = ModelConfig.from_dict(meta["model_config"])
        if stored != model_config:
            raise ValueError("resume checkpoint was trained with a different model config")
        params.load_state(
            {
                n[len(CHECKPOINT_PARAM_PREFIX) :]: a
                for n, a in arrays.items()
                if n.startswith(CHECKPOINT_PARAM_PREFIX)
            }
        )
        for name, _ in params:
            state.m[name][...] = arrays["adam.m." + name].astype(dtype, copy=False)
            state.v[name][...] = arrays["adam.v." + name].astype(dtype, copy=False)
        state.t = int(meta["adam_t"])
        start_step = int(meta["step"])

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    log_path = (out_dir / "train_log.jsonl") if out_dir is not None else None

    phases = [
        (1, train_config.lr_phase1, train_config.epochs_phase1),
        (2, train_config.lr_phase2, train_config.epochs_phase2),
    ]
    steps_per_epoch = train_config.steps_per_epoch
    history: list[EpochRecord] = []
    ckpt_path = None
    global_step = start_step

    total_epochs = train_config.epochs_phase1 + train_config.epochs_phase2
    for phase, lr, phase_epochs in phases:
        phase_start_epoch = 0 if phase == 1 else train_config.epochs_phase1
        for e in range(phase_epochs):
            epoch = phase_start_epoch + e
            first_step_of_epoch = epoch * steps_per_epoch
            if global_step >= first_step_of_epoch + steps_per_epoch:
                continue  # epoch fully covered by the resumed checkpoint
            t0 = time.time()
            epoch_rng = np.random.default_rng(
                np.random.SeedSequence([train_config.data_seed, epoch])
            )
            batches = _epoch_batches(len(prepared), counts, train_config.batch_size, epoch_rng)
            loss_sum = 0.0
            weight_sum = 0.0
            for s in range(steps_per_epoch):
                step = first_step_of_epoch + s
                if step < global_step:
                    continue
                batch_idx = batches[s % len(batches)]
                pages = [prepared[i] for i in batch_idx]
                ids, pad, lbls = _stack_batch(pages)
                rng = np.random.default_rng(
                    np.random.SeedSequence([train_config.dropout_seed, step])
                )
                logits = forward_batch(ids, pad, params, model_config, training=True, rng=rng)
                loss, weight = bce_loss(logits, lbls)
                loss_val = float(loss.data)
                if not np.isfinite(loss_val):
                    raise TrainingDivergedError(
                        f"non-finite loss at phase {phase} epoch {epoch} step {step}, "
                        f"batch pages {list(map(int, batch_idx))}"
                    )
                params.zero_grad()
                loss.backward()
                adam_step(
                    params,
                    state,
                    lr,
                    beta1=train_config.beta1,
                    beta2=train_config.beta2,
                    eps=train_config.eps,
                )
                loss_sum += loss_val
                weight_sum += weight
                global_step = step + 1

            dice_scores = _validation_dice(
                val_prepared,
                params,
                model_config,
                train_config.eval_threshold,
                train_config.val_pages_per_epoch,
            )
            record = EpochRecord(
                epoch=epoch,
                phase=phase,
                mean_loss=loss_sum / max(weight_sum, 1.0),
                dice=dice_scores,
                wall_time_s=time.time() - t0,
            )
            history.append(record)
            if log_fn is not None:
                log_fn(record)
            if log_path is not None:
                with open(log_path, "a", encoding="utf-8") as f:
                    f.write(record.to_json() + "\n")
            is_last = epoch == total_epochs - 1
            if out_dir is not None and (
                (epoch + 1) % train_config.checkpoint_every_epochs == 0 or is_last
            ):
                ckpt_path = out_dir / "checkpoint.bin"
                save_train_checkpoint(
                    ckpt_path, params, state, model_config, train_config,
                    step=global_step, epoch=epoch, phase=phase,
                )

    return TrainResult(params=params, state=state, history=history, checkpoint_path=ckpt_path)
