"""Command line: generate, train, eval, infer and sweep."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields

import numpy as np
from PIL import Image

from ..inference import IN_VOCAB_ONLY, EnsembleParams, infer, write_task_outputs
from ..metrics import Evaluator, ground_truth_outputs
from .coco import export_dataset, load_dataset
from .config import RunConfig
from .train import build_datasets, build_vocabulary, evaluate_model, load_run, train

log = logging.getLogger("opensd")


def _config_parent():
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="key = value file; flags below override it")
    group = p.add_argument_group("run configuration")
    for f in fields(RunConfig):
        group.add_argument("--" + f.name.replace("_", "-"), dest="cfg_" + f.name,
                           default=None, metavar=f.name.upper())
    return p


def _run_config(args, base=None):
    cfg = RunConfig.load(args.config, base) if getattr(args, "config", None) else (base or RunConfig())
    over = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    return cfg.override(over)


def _floats(text):
    return [float(x) for x in text.split(",") if x.strip()]


def _write_report(report, path):
    with open(path, "w") as fh:
        fh.write(report.dumps() + "\n")


def _split(cfg, vocab, data, split):
    if data:
        scenes, vocab = load_dataset(os.path.join(data, split) if os.path.isdir(
            os.path.join(data, split)) else data, vocab)
        return scenes, vocab
    train_scenes, eval_scenes = build_datasets(cfg, vocab)
    return (train_scenes if split == "train" else eval_scenes), vocab


def _categories(vocab, closed):
    return vocab.train_ids if closed else None


# -- subcommands ----------------------------------------------------------------
def cmd_generate(args):
    cfg = _run_config(args)
    vocab = build_vocabulary(cfg, args.vocab)
    train_scenes, eval_scenes = build_datasets(cfg, vocab)
    export_dataset(train_scenes, vocab, os.path.join(args.out, "train"))
    export_dataset(eval_scenes, vocab, os.path.join(args.out, "eval"))
    cfg.save(os.path.join(args.out, "config.txt"))
    print(f"wrote {len(train_scenes)} train and {len(eval_scenes)} eval scenes to {args.out}")
    return 0


def cmd_train(args):
    cfg = _run_config(args)
    vocab = build_vocabulary(cfg, args.vocab)
    if args.data:
        scenes, vocab = load_dataset(os.path.join(args.data, "train"), vocab)
        held, _ = load_dataset(os.path.join(args.data, "eval"), vocab) \
            if os.path.isdir(os.path.join(args.data, "eval")) else ([], vocab)
    else:
        scenes, held = build_datasets(cfg, vocab)
    result = train(cfg, scenes, vocab, held, args.run_dir)
    report = evaluate_model(result.model, scenes, IN_VOCAB_ONLY,
                            score_threshold=cfg.score_threshold,
                            overlap_threshold=cfg.overlap_threshold,
                            categories=vocab.train_ids)
    _write_report(report, os.path.join(args.run_dir, "train_report.json"))
    print(f"trained {cfg.steps} steps in {result.seconds:.1f}s, final loss {result.losses[-1]:.4f}")
    print(report.to_table())
    return 0


def cmd_eval(args):
    if args.oracle:
        cfg = _run_config(args)
        vocab = build_vocabulary(cfg, args.vocab)
        scenes, vocab = _split(cfg, vocab, args.data, args.split)
        ev = Evaluator(vocab)
        for scene in scenes:
            ev.add(ground_truth_outputs(scene, vocab), scene)
        report = ev.report()
    else:
        if not args.run_dir:
            raise ValueError("eval needs --run-dir (or --oracle)")
        base, vocab, model = load_run(args.run_dir)
        cfg = _run_config(args, base)
        scenes, vocab = _split(cfg, vocab, args.data, args.split)
        params = IN_VOCAB_ONLY if args.in_vocab else cfg.ensemble_params()
        report = evaluate_model(model, scenes, params, score_threshold=cfg.score_threshold,
                                overlap_threshold=cfg.overlap_threshold,
                                categories=_categories(vocab, args.closed))
    print(report.to_table())
    if args.out:
        _write_report(report, args.out)
    return 0


def _read_pixels(path):
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB")).astype(np.float64) / 255.0


def cmd_infer(args):
    base, vocab, model = load_run(args.run_dir)
    cfg = _run_config(args, base)
    paths = []
    for p in args.images:
        if os.path.isdir(p):
            paths += sorted(os.path.join(p, n) for n in os.listdir(p)
                            if n.lower().endswith((".ppm", ".png", ".pgm", ".jpg", ".jpeg")))
        elif os.path.isfile(p):
            paths.append(p)
        else:
            raise FileNotFoundError(p)
    for i, path in enumerate(paths):
        outputs = infer(model, _read_pixels(path), cfg.ensemble_params(), True,
                        cfg.score_threshold, cfg.overlap_threshold)
        stem = os.path.splitext(os.path.basename(path))[0]
        write_task_outputs(outputs, args.out, i, stem)
        print(f"{path}: {len(outputs.segments)} segments")
    return 0


def sweep_table(grid, alphas, betas, key="pq"):
    """Rows of alpha, columns of beta."""
    corner = "a \\ b"
    head = f"{corner:>6}" + "".join(f"{b:>9.2f}" for b in betas)
    lines = [f"{key} (rows alpha, columns beta)", head]
    for a in alphas:
        lines.append(f"{a:>6.2f}" + "".join(f"{grid[(a, b)][key]:>9.4f}" for b in betas))
    return "\n".join(lines)


def cmd_sweep(args):
    base, vocab, model = load_run(args.run_dir)
    cfg = _run_config(args, base)
    scenes, vocab = _split(cfg, vocab, args.data, args.split)
    alphas, betas = _floats(args.alphas), _floats(args.betas)
    grid = {}
    for a in alphas:
        for b in betas:
            report = evaluate_model(model, scenes, EnsembleParams(a, b),
                                    score_threshold=cfg.score_threshold,
                                    overlap_threshold=cfg.overlap_threshold)
            grid[(a, b)] = report.headline()
    doc = {"alphas": alphas, "betas": betas,
           "results": [{"alpha": a, "beta": b, **grid[(a, b)]} for a in alphas for b in betas]}
    for key in args.metrics.split(","):
        print(sweep_table(grid, alphas, betas, key))
        print()
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(doc, fh, indent=1)
    return 0


def build_parser():
    parent = _config_parent()
    parser = argparse.ArgumentParser(prog="opensd", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", parents=[parent], help="write a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--vocab", help="vocabulary JSON (default: built-in 8 categories)")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", parents=[parent], help="train a model into a run directory")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--data", help="dataset root with train/ (and eval/); default: generate")
    p.add_argument("--vocab")
    p.set_defaults(func=cmd_train)

    for name, helptext in (("eval", "EvalReport of a checkpoint on a dataset"),
                           ("sweep", "alpha x beta grid of EvalReports")):
        p = sub.add_parser(name, parents=[parent], help=helptext)
        p.add_argument("--run-dir")
        p.add_argument("--data", help="dataset directory (default: regenerate from config)")
        p.add_argument("--split", default="eval", choices=("train", "eval"))
        p.add_argument("--out", help="JSON output path")
        if name == "eval":
            p.add_argument("--vocab")
            p.add_argument("--oracle", action="store_true",
                           help="score the ground truth against itself")
            p.add_argument("--closed", action="store_true",
                           help="restrict labels to the training categories")
            p.add_argument("--in-vocab", action="store_true",
                           help="in-vocabulary classifier only (alpha = beta = 0)")
            p.set_defaults(func=cmd_eval)
        else:
            p.add_argument("--alphas", default="0,0.2,0.4,0.6,0.8,1")
            p.add_argument("--betas", default="0,0.2,0.4,0.6,0.8,1")
            p.add_argument("--metrics", default="pq,miou,map_mask")
            p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("infer", parents=[parent], help="task outputs for image files")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("images", nargs="+", help="image files or directories")
    p.set_defaults(func=cmd_infer)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 on unknown flags
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001
        print(f"opensd {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
