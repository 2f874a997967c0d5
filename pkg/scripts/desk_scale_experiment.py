"""Desk-scale end-to-end experiment: train the scaled model on synthetic pages
and report held-out adjacency Dice plus box AP.

Usage:
    python scripts/desk_scale_experiment.py --out runs/desk [--quick]

``--quick`` shrinks the schedule for a smoke run; the full configuration
matches the acceptance suite: d_model=128, 4 layers, seq_len=128, 2,000
training pages, two phases of 3,000 steps at learning rates 1e-4 and 1e-5.
The decoding threshold is chosen by sweeping on a validation split, then all
scores are reported on a disjoint held-out split.
"""

import argparse
import json
import time
from pathlib import Path

import numpy as np

from clustertab.docmodel import ALL_CLASSES
from clustertab.labels import build_labels
from clustertab.metrics import dice, evaluate_boxes, symmetric_part
from clustertab.postprocess import page_probabilities, predict_page, strong_matrix
from clustertab.presets import desk_gen_config, desk_model_config, desk_train_config
from clustertab.synthgen import generate_dataset
from clustertab.tokenizer import sort_page, vocab_from_pages
from clustertab.trainer import train

K_GRID = [round(0.5 + 0.05 * i, 2) for i in range(10)]


def desk_configs(vocab_size: int, quick: bool = False):
    model = desk_model_config(vocab_size)
    if quick:
        tcfg = desk_train_config(steps_per_phase=300, epochs_per_phase=1)
    else:
        tcfg = desk_train_config()
    return model, tcfg


def cache_split(data, vocab, params, model_config):
    cache = []
    for page, ann in data:
        sp = sort_page(page)
        probs = page_probabilities(sp, vocab, params, model_config)
        labels = build_labels(sp, ann, seq_len=max(sp.n_words, 1))
        cache.append((page, ann, sp, probs, labels))
    return cache


def mean_dice_at(cache, k):
    out = {}
    for cls in ALL_CLASSES:
        vals = [
            dice(strong_matrix(probs[cls], k), symmetric_part(labels.adjacency[cls]), labels.pad_mask)
            for _, _, _, probs, labels in cache
        ]
        out[cls] = float(np.mean(vals))
    return out


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", required=True)
    ap.add_argument("--quick", action="store_true")
    ap.add_argument("--train-pages", type=int, default=2000)
    ap.add_argument("--val-pages", type=int, default=100)
    ap.add_argument("--eval-pages", type=int, default=200)
    ap.add_argument("--seed", type=int, default=1001)
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.time()

    gen = desk_gen_config(seed=args.seed)
    n_train = 200 if args.quick else args.train_pages
    train_data = generate_dataset(gen, n_train)
    val_data = generate_dataset(gen, args.val_pages, start_index=20_000)
    eval_data = generate_dataset(gen, args.eval_pages, start_index=10_000)
    vocab = vocab_from_pages([p for p, _ in train_data])
    print(f"data ready: {n_train} train / {len(val_data)} val / {len(eval_data)} eval, "
          f"vocab {len(vocab)} ({time.time() - t0:.0f}s)", flush=True)

    model_config, train_config = desk_configs(len(vocab) - 1, quick=args.quick)
    result = train(
        train_config, model_config, train_data, vocab, out_dir=out,
        log_fn=lambda r: print(
            f"epoch {r.epoch} phase {r.phase} mean_loss {r.mean_loss:.5f} "
            f"({r.wall_time_s:.0f}s)", flush=True,
        ),
    )
    train_minutes = (time.time() - t0) / 60.0
    print(f"training done in {train_minutes:.1f} min", flush=True)

    val_cache = cache_split(val_data, vocab, result.params, model_config)
    eval_cache = cache_split(eval_data, vocab, result.params, model_config)
    val_curve = [float(np.mean(list(mean_dice_at(val_cache, k).values()))) for k in K_GRID]
    best_k = K_GRID[int(np.argmax(val_curve))]
    print(f"validation sweep {dict(zip(K_GRID, [round(v, 4) for v in val_curve]))}")
    print(f"chosen k = {best_k}", flush=True)

    dices = mean_dice_at(eval_cache, best_k)
    preds, pages, anns = [], [], []
    for page, ann, _, _, _ in eval_cache:
        decoded = predict_page(page, vocab, result.params, model_config, k=best_k)
        preds.append({c: list(zip(p.boxes, p.confidence)) for c, p in decoded.items()})
        pages.append(page)
        anns.append(ann)
    report = evaluate_boxes(preds, pages, anns)

    summary = {
        "train_minutes": train_minutes,
        "chosen_k": best_k,
        "val_curve": dict(zip(map(str, K_GRID), val_curve)),
        "dice": {cls.value: v for cls, v in dices.items()},
        "boxes": report.to_dict(),
    }
    print(json.dumps(summary["dice"], indent=1, sort_keys=True))
    for cls, rep in report.per_class.items():
        print(f"{cls.value}: ap50={rep.ap50:.4f} ap={rep.ap:.4f} ar={rep.ar:.4f}")
    with open(out / "summary.json", "w") as f:
        json.dump(summary, f, indent=1, sort_keys=True)
    print(f"total {(time.time() - t0) / 60.0:.1f} min")


if __name__ == "__main__":
    main()
