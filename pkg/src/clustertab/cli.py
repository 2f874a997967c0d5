"""Command-line entry point.

Subcommands: build-vocab, gen-data, convert, train, predict, evaluate,
sweep-threshold, render. Every subcommand accepts ``--config FILE`` (a JSON
object); precedence is defaults < config file < explicit flags. Exit status:
0 on success, 1 on a validation/usage error, 2 on a runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import tensor as T
from .docmodel import ALL_CLASSES, ClassId, Page, load_page_json
from .labels import build_labels
from .metrics import dice, evaluate_boxes, symmetric_part
from .model import ModelConfig
from .postprocess import (
    DEFAULT_STRONG_THRESHOLD,
    decode_probabilities,
    page_probabilities,
    predict_page,
    prediction_from_json,
    prediction_to_json,
    strong_matrix,
)
from .render import render_overlay
from .synthgen import GenConfig, generate_split
from .tokenizer import (
    DEFAULT_VOCAB_SIZE,
    load_vocab,
    save_vocab,
    sort_page,
    vocab_from_pages,
)
from .trainer import TrainConfig, load_model_params, train

ENV_THREADS = "CLUSTERTAB_THREADS"


class CLIValidationError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CLIValidationError(message)


def _load_config_file(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path, "r", encoding="utf-8") as f:
            cfg = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise CLIValidationError(f"cannot read config file {path}: {e}") from e
    if not isinstance(cfg, dict):
        raise CLIValidationError(f"config file {path} must hold a JSON object")
    return cfg


def _resolve(args, config: dict, key: str, default):
    """defaults < config file < explicit flag"""
    flag = getattr(args, key.replace("-", "_"), None)
    if flag is not None:
        return flag
    if key in config:
        return config[key]
    return default


def _jobs(args, config) -> int:
    env = os.environ.get(ENV_THREADS)
    default = int(env) if env else 1
    return int(_resolve(args, config, "jobs", default))


def _load_dataset(data_dir) -> list[tuple[str, Page, object]]:
    data_dir = Path(data_dir)
    if not data_dir.is_dir():
        raise CLIValidationError(f"--input/--data directory not found: {data_dir}")
    out = []
    for p in sorted(data_dir.glob("*.json")):
        if p.name == "manifest.json":
            continue
        page, ann = load_page_json(p)
        out.append((p.stem, page, ann))
    if not out:
        raise CLIValidationError(f"no page JSON files in {data_dir}")
    return out


def _parallel_map(fn, items, jobs: int):
    if jobs <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, items))


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_build_vocab(args) -> int:
    cfg = _load_config_file(args.config)
    size = int(_resolve(args, cfg, "size", DEFAULT_VOCAB_SIZE))
    dataset = _load_dataset(args.input)
    vocab = vocab_from_pages((page for _, page, _ in dataset), max_size=size)
    save_vocab(args.output, vocab)
    print(f"wrote vocabulary of {len(vocab)} ids (incl. UNK) to {args.output}")
    return 0


def cmd_gen_data(args) -> int:
    import dataclasses

    cfg = _load_config_file(args.config)
    field_names = {f.name for f in dataclasses.fields(GenConfig)}
    gen_keys = {k: v for k, v in cfg.items() if k in field_names}
    if args.seed is not None:
        gen_keys["seed"] = args.seed
    try:
        gen_cfg = GenConfig.from_dict(gen_keys)
    except (TypeError, ValueError) as e:
        raise CLIValidationError(f"bad generator config: {e}") from e
    n_pages = int(_resolve(args, cfg, "pages", 100))
    out = generate_split(gen_cfg, n_pages, args.out)
    print(f"wrote {n_pages} pages to {out}")
    return 0


def cmd_convert(args) -> int:
    from .ingest import convert_html_cells, convert_pascal_voc

    if args.format == "pascal-voc":
        summary = convert_pascal_voc(
            args.input, args.output, words_dir=args.words_dir, strict=args.strict
        )
    else:
        summary = convert_html_cells(args.input, args.output, strict=args.strict)
    report = summary.to_dict()
    print(json.dumps(report, indent=1, sort_keys=True))
    with open(Path(args.output) / "conversion_summary.json", "w", encoding="utf-8") as f:
        json.dump(report, f, indent=1, sort_keys=True)
    return 0


def _model_config_from(args, cfg: dict, vocab_size: int) -> ModelConfig:
    return ModelConfig(
        vocab_size=vocab_size,
        num_layers=int(_resolve(args, cfg, "layers", 4)),
        d_model=int(_resolve(args, cfg, "d_model", 256)),
        dff=int(_resolve(args, cfg, "dff", 1024)),
        num_heads=int(_resolve(args, cfg, "heads", 8)),
        c_out=int(_resolve(args, cfg, "c_out", 300)),
        max_seq_len=int(_resolve(args, cfg, "seq_len", 1000)),
        dropout=float(_resolve(args, cfg, "dropout", 0.1)),
    )


def cmd_train(args) -> int:
    cfg = _load_config_file(args.config)
    dataset = _load_dataset(args.data)
    pages = [(page, ann) for _, page, ann in dataset]
    val_pages = None
    if args.val:
        val_pages = [(p, a) for _, p, a in _load_dataset(args.val)]

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.vocab:
        vocab = load_vocab(args.vocab)
    else:
        vocab = vocab_from_pages(
            (p for p, _ in pages), max_size=int(_resolve(args, cfg, "vocab_size", DEFAULT_VOCAB_SIZE))
        )
        save_vocab(out_dir / "vocab.txt", vocab)

    model_config = _model_config_from(args, cfg, vocab_size=len(vocab) - 1)
    train_config = TrainConfig(
        batch_size=int(_resolve(args, cfg, "batch_size", 8)),
        seq_len=int(_resolve(args, cfg, "seq_len", 1000)),
        lr_phase1=float(_resolve(args, cfg, "lr1", 1e-4)),
        epochs_phase1=int(_resolve(args, cfg, "epochs1", 100)),
        steps_per_epoch=int(_resolve(args, cfg, "steps_per_epoch", 5000)),
        lr_phase2=float(_resolve(args, cfg, "lr2", 1e-5)),
        epochs_phase2=int(_resolve(args, cfg, "epochs2", 100)),
        dropout_seed=int(_resolve(args, cfg, "dropout_seed", 17)),
        data_seed=int(_resolve(args, cfg, "data_seed", 23)),
        init_seed=int(_resolve(args, cfg, "init_seed", 5)),
        val_pages_per_epoch=int(_resolve(args, cfg, "val_pages_per_epoch", 32)),
        eval_threshold=float(_resolve(args, cfg, "k", DEFAULT_STRONG_THRESHOLD)),
        dtype=str(_resolve(args, cfg, "dtype", "float64")),
    )

    def log(record):
        print(
            f"epoch {record.epoch} phase {record.phase} "
            f"mean_loss {record.mean_loss:.6f} dice {json.dumps(record.dice, sort_keys=True)} "
            f"({record.wall_time_s:.1f}s)",
            flush=True,
        )

    result = train(
        train_config,
        model_config,
        pages,
        vocab,
        val_dataset=val_pages,
        out_dir=out_dir,
        resume_from=args.resume,
        log_fn=log,
    )
    print(f"checkpoint: {result.checkpoint_path}")
    return 0


def _load_checkpoint_bundle(checkpoint_path, vocab_path):
    params, config, meta, _ = load_model_params(checkpoint_path)
    if vocab_path is None:
        sibling = Path(checkpoint_path).parent / "vocab.txt"
        if not sibling.exists():
            raise CLIValidationError("no --vocab given and no vocab.txt beside the checkpoint")
        vocab_path = sibling
    vocab = load_vocab(vocab_path)
    if len(vocab) - 1 != config.vocab_size:
        raise CLIValidationError(
            f"vocabulary size {len(vocab) - 1} does not match checkpoint config {config.vocab_size}"
        )
    return params, config, vocab


def cmd_predict(args) -> int:
    cfg = _load_config_file(args.config)
    k = float(_resolve(args, cfg, "k", DEFAULT_STRONG_THRESHOLD))
    params, config, vocab = _load_checkpoint_bundle(args.checkpoint, args.vocab)
    dataset = _load_dataset(args.data)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    def run(item):
        stem, page, _ = item
        pred = predict_page(page, vocab, params, config, k=k)
        return stem, prediction_to_json(pred)

    results = _parallel_map(run, dataset, _jobs(args, cfg))
    for stem, doc in results:
        with open(out_dir / f"{stem}.pred.json", "w", encoding="utf-8") as f:
            json.dump(doc, f, indent=1, sort_keys=True)
            f.write("\n")
    print(f"wrote {len(results)} prediction files to {out_dir}")
    return 0


def _page_dice(page, ann, probs, k) -> dict[ClassId, float]:
    sorted_page = sort_page(page)
    n = sorted_page.n_words
    labels = build_labels(sorted_page, ann, seq_len=max(n, 1))
    out = {}
    for cls in ALL_CLASSES:
        pred = strong_matrix(probs[cls], k) if n else np.zeros((1, 1), dtype=bool)
        gt = symmetric_part(labels.adjacency[cls])
        out[cls] = dice(pred, gt, labels.pad_mask)
    return out


def cmd_evaluate(args) -> int:
    cfg = _load_config_file(args.config)
    k = float(_resolve(args, cfg, "k", DEFAULT_STRONG_THRESHOLD))
    dataset = _load_dataset(args.data)
    pages = [p for _, p, _ in dataset]
    anns = [a for _, _, a in dataset]

    dice_rows = []
    if args.predictions:
        pred_dir = Path(args.predictions)
        preds_per_page = []
        for stem, _, _ in dataset:
            ppath = pred_dir / f"{stem}.pred.json"
            if not ppath.exists():
                raise CLIValidationError(f"missing prediction file {ppath}")
            with open(ppath, "r", encoding="utf-8") as f:
                pred = prediction_from_json(json.load(f))
            preds_per_page.append(
                {cls: list(zip(p.boxes, p.confidence)) for cls, p in pred.items()}
            )
        dice_per_class = None
    elif args.checkpoint:
        params, config, vocab = _load_checkpoint_bundle(args.checkpoint, args.vocab)

        def run(item):
            stem, page, ann = item
            pred = predict_page(page, vocab, params, config, k=k)
            sorted_page = sort_page(page)
            probs = page_probabilities(sorted_page, vocab, params, config)
            return (
                {cls: list(zip(p.boxes, p.confidence)) for cls, p in pred.items()},
                _page_dice(page, ann, probs, k),
            )

        results = _parallel_map(run, dataset, _jobs(args, cfg))
        preds_per_page = [r[0] for r in results]
        for (stem, _, _), (_, d) in zip(dataset, results):
            dice_rows.append((stem, d))
        dice_per_class = {
            cls: float(np.mean([d[cls] for _, d in dice_rows])) for cls in ALL_CLASSES
        }
    else:
        raise CLIValidationError("evaluate needs either --predictions or --checkpoint")

    report = evaluate_boxes(preds_per_page, pages, anns, dice_per_class=dice_per_class)
    doc = report.to_dict()
    print(json.dumps(doc, indent=1, sort_keys=True))
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            json.dump(doc, f, indent=1, sort_keys=True)
            f.write("\n")
    if args.per_page and dice_rows:
        with open(args.per_page, "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["page"] + [f"dice_{c.value}" for c in ALL_CLASSES])
            for stem, d in dice_rows:
                writer.writerow([stem] + [f"{d[c]:.6f}" for c in ALL_CLASSES])
    return 0


def _parse_grid(spec: str) -> list[float]:
    try:
        lo, hi, step = (float(x) for x in spec.split(":"))
    except ValueError as e:
        raise CLIValidationError(f"bad --grid {spec!r}, expected lo:hi:step") from e
    if not (0.0 < lo <= hi < 1.0 and step > 0):
        raise CLIValidationError(f"--grid {spec!r} out of range")
    ks = []
    k = lo
    while k <= hi + 1e-9:
        ks.append(round(k, 6))
        k += step
    return ks


def cmd_sweep_threshold(args) -> int:
    cfg = _load_config_file(args.config)
    grid = _parse_grid(_resolve(args, cfg, "grid", "0.5:0.95:0.05"))
    params, config, vocab = _load_checkpoint_bundle(args.checkpoint, args.vocab)
    dataset = _load_dataset(args.data)

    def precompute(item):
        stem, page, ann = item
        sorted_page = sort_page(page)
        probs = page_probabilities(sorted_page, vocab, params, config)
        n = sorted_page.n_words
        labels = build_labels(sorted_page, ann, seq_len=max(n, 1))
        return sorted_page, ann, probs, labels

    cached = _parallel_map(precompute, dataset, _jobs(args, cfg))

    rows = []
    for k in grid:
        dices = []
        preds_per_page = []
        for sorted_page, ann, probs, labels in cached:
            for cls in ALL_CLASSES:
                pred = strong_matrix(probs[cls], k)
                gt = symmetric_part(labels.adjacency[cls])
                dices.append(dice(pred, gt, labels.pad_mask))
            decoded = decode_probabilities(probs, sorted_page.words, k=k, max_seq_len=config.max_seq_len)
            preds_per_page.append(
                {cls: list(zip(p.boxes, p.confidence)) for cls, p in decoded.items()}
            )
        report = evaluate_boxes(
            preds_per_page,
            [c[0] for c in cached],
            [c[1] for c in cached],
        )
        ap50 = float(np.mean([r.ap50 for r in report.per_class.values()]))
        rows.append({"k": k, "dice": float(np.mean(dices)), "ap50": ap50})
        print(f"k={k:.2f} dice={rows[-1]['dice']:.4f} ap50={rows[-1]['ap50']:.4f}")

    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            json.dump(rows, f, indent=1, sort_keys=True)
            f.write("\n")
    return 0


def cmd_render(args) -> int:
    page, ann = load_page_json(args.page)
    sorted_page = sort_page(page)
    if args.prediction:
        with open(args.prediction, "r", encoding="utf-8") as f:
            prediction = prediction_from_json(json.load(f))
        # prediction indices refer to the stored word order
        svg = render_overlay(page, prediction)
    else:
        n = sorted_page.n_words
        labels = build_labels(sorted_page, ann, seq_len=max(n, 1))
        probs = {cls: labels.adjacency[cls][:n, :n].astype(float) for cls in ALL_CLASSES}
        prediction = decode_probabilities(probs, sorted_page.words, k=0.9)
        svg = render_overlay(sorted_page, prediction)
    with open(args.out, "w", encoding="utf-8") as f:
        f.write(svg)
    print(f"wrote {args.out}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="clustertab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file; flags override its keys")

    p = sub.add_parser("build-vocab", help="build the normalized-token vocabulary")
    common(p)
    p.add_argument("--input", required=True, help="directory of unified page JSON files")
    p.add_argument("--size", type=int, help=f"max real tokens (default {DEFAULT_VOCAB_SIZE})")
    p.add_argument("--output", required=True)
    p.set_defaults(fn=cmd_build_vocab)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset split")
    common(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--pages", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("convert", help="convert external annotations to unified JSON")
    common(p)
    p.add_argument("--format", required=True, choices=["pascal-voc", "html-cells"])
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--words-dir", help="directory of word files (pascal-voc)")
    p.add_argument("--strict", action="store_true")
    p.set_defaults(fn=cmd_convert)

    p = sub.add_parser("train", help="train the clustering model")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--val")
    p.add_argument("--vocab")
    p.add_argument("--out", required=True)
    p.add_argument("--resume")
    for flag, typ in [
        ("--batch-size", int), ("--seq-len", int), ("--lr1", float), ("--lr2", float),
        ("--epochs1", int), ("--epochs2", int), ("--steps-per-epoch", int),
        ("--layers", int), ("--d-model", int), ("--dff", int), ("--heads", int),
        ("--c-out", int), ("--dropout", float), ("--vocab-size", int),
        ("--dropout-seed", int), ("--data-seed", int), ("--init-seed", int),
        ("--val-pages-per-epoch", int), ("--k", float),
    ]:
        p.add_argument(flag, type=typ)
    p.add_argument("--dtype", choices=["float32", "float64"])
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("predict", help="write per-page prediction JSON")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab")
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=float)
    p.add_argument("--jobs", type=int)
    p.set_defaults(fn=cmd_predict)

    p = sub.add_parser("evaluate", help="score predictions against annotations")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--predictions")
    p.add_argument("--checkpoint")
    p.add_argument("--vocab")
    p.add_argument("--out")
    p.add_argument("--per-page")
    p.add_argument("--k", type=float)
    p.add_argument("--jobs", type=int)
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("sweep-threshold", help="Dice/AP50 over a grid of thresholds")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab")
    p.add_argument("--grid")
    p.add_argument("--out")
    p.add_argument("--jobs", type=int)
    p.set_defaults(fn=cmd_sweep_threshold)

    p = sub.add_parser("render", help="SVG overlay of predictions or labels")
    common(p)
    p.add_argument("--page", required=True)
    p.add_argument("--prediction")
    p.add_argument("--labels", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_render)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except CLIValidationError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (T.ShapeError, ValueError, OSError, RuntimeError) as e:
        print(f"runtime failure: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
