"""Command-line pipeline: gen-data, train, attribute, evaluate, report.

Exit status: 0 success, 1 invalid input, 2 failure while running.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__

logger = logging.getLogger("vqa_attrib")

IMAGENET_MEAN = (123.68 / 255, 116.779 / 255, 103.939 / 255)
METHODS = ("guided", "occlusion", "random")


class UsageError(Exception):
    """Bad flags or inputs; maps to exit status 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_manifest(target: Path, command: str, config: dict, inputs: list[Path], artifacts: list[Path],
                    base: Path, extra: dict | None = None) -> None:
    manifest = {
        "tool": f"vqa-attrib {__version__}",
        "command": command,
        "config": config,
        "seed": config.get("seed"),
        "inputs": {str(p): _sha256(p) for p in inputs},
        "artifacts": {str(p.relative_to(base)) if p.is_relative_to(base) else str(p): _sha256(p)
                      for p in sorted(artifacts)},
    }
    if extra:
        manifest.update(extra)
    target.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _existing_file(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {path}")
    return p


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v <= 0:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {v}")
    return v


def _positive_float(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}") from None
    if not v > 0 or not np.isfinite(v):
        raise argparse.ArgumentTypeError(f"expected a positive number, got {v}")
    return v


def _patch(text: str) -> tuple[float, float, float]:
    if text == "imagenet":
        return IMAGENET_MEAN
    parts = text.split(",")
    try:
        vals = tuple(float(p) for p in parts)
    except ValueError:
        raise argparse.ArgumentTypeError(f"patch must be R,G,B or 'imagenet', got {text!r}") from None
    if len(vals) != 3 or not all(np.isfinite(vals)):
        raise argparse.ArgumentTypeError(f"patch must be three finite numbers, got {text!r}")
    return vals


def _method_list(text: str) -> list[str]:
    items = [m.strip() for m in text.split(",") if m.strip()]
    if items == ["all"]:
        return list(METHODS)
    bad = [m for m in items if m not in METHODS]
    if bad or not items:
        raise argparse.ArgumentTypeError(f"methods must be drawn from {', '.join(METHODS)} or 'all'")
    return list(dict.fromkeys(items))


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vqa-attrib", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--count", type=_positive_int, required=True)
    g.add_argument("--seed", type=int, default=42)
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train a model and write a checkpoint")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--val", help="held-out dataset for per-epoch accuracy")
    t.add_argument("--epochs", type=_positive_int, default=30)
    t.add_argument("--lr", type=_positive_float, default=0.05)
    t.add_argument("--batch", type=_positive_int, default=32)
    t.add_argument("--weight-decay", type=float, default=5e-4)
    t.add_argument("--seed", type=int, default=42)

    def attribution_flags(p):
        p.add_argument("--ckpt", required=True)
        p.add_argument("--data", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--limit", type=_positive_int, help="only the first N examples")
        p.add_argument("--patch", type=_patch, help="occlusion fill as R,G,B in [0,1], or 'imagenet'")
        p.add_argument("--word-norm", choices=("l2", "linf"), default="l2")
        p.add_argument("--seed-target", choices=("prob", "logit"), default="prob")
        p.add_argument("--seed", type=int, default=42)

    a = sub.add_parser("attribute", help="write per-example importance maps")
    attribution_flags(a)
    a.add_argument("--method", choices=(*METHODS, "all"), required=True)

    e = sub.add_parser("evaluate", help="correlations, POS histogram and flip predictor")
    attribution_flags(e)
    e.add_argument("--methods", type=_method_list, default=list(METHODS))
    e.add_argument("--pos-method", choices=("occlusion", "guided"), default="occlusion")

    r = sub.add_parser("report", help="print a summary of an evaluate output directory")
    r.add_argument("--in", dest="in_dir", required=True)
    return parser


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> None:
    from .data import generate_dataset, write_dataset

    out = Path(args.out)
    if not out.parent.exists():
        raise UsageError(f"output directory does not exist: {out.parent}")
    ds = generate_dataset(args.count, args.seed)
    write_dataset(ds, out)
    _write_manifest(out.with_name(out.name + ".run-manifest.json"), "gen-data",
                    {"count": args.count, "seed": args.seed, "out": str(out)}, [], [out], out.parent)
    print(f"wrote {len(ds)} examples to {out}")


def _load_data(path: str):
    from .data import DatasetFormatError, read_dataset

    p = _existing_file(path, "dataset")
    try:
        return p, read_dataset(p)
    except DatasetFormatError as exc:
        raise UsageError(f"{path}: {exc}") from None


def _load_model(path: str, dataset=None):
    from .model import CheckpointError, load_checkpoint

    p = _existing_file(path, "checkpoint")
    try:
        model = load_checkpoint(p)
        model.check_architecture()
    except (CheckpointError, ValueError) as exc:
        raise UsageError(f"{path}: {exc}") from None
    if dataset is not None:
        if model.vocab_size != len(dataset.vocab) or model.answer_count != len(dataset.answers) \
                or (model.vocab is not None and list(model.vocab) != list(dataset.vocab)) \
                or (model.answers is not None and list(model.answers) != list(dataset.answers)):
            raise UsageError(f"checkpoint {path} vocabulary/answers do not match dataset")
    return p, model


def cmd_train(args) -> None:
    from .model import init_model, save_checkpoint, train

    data_path, ds = _load_data(args.data)
    if len(ds) == 0:
        raise UsageError(f"{args.data}: dataset is empty")
    val_path, val = (None, None) if args.val is None else _load_data(args.val)
    out = Path(args.out)
    if not out.parent.exists():
        raise UsageError(f"output directory does not exist: {out.parent}")

    model = init_model(len(ds.vocab), len(ds.answers), args.seed)
    model.vocab, model.answers = list(ds.vocab), list(ds.answers)
    model, log = train(model, ds, args.epochs, args.lr, args.batch, args.seed, heldout=val,
                       weight_decay=args.weight_decay)
    save_checkpoint(model, out)
    config = {"data": str(data_path), "val": None if val_path is None else str(val_path), "out": str(out),
              "epochs": args.epochs, "lr": args.lr, "batch": args.batch,
              "weight_decay": args.weight_decay, "seed": args.seed}
    inputs = [data_path] + ([val_path] if val_path else [])
    _write_manifest(out.with_name(out.name + ".run-manifest.json"), "train", config, inputs, [out], out.parent,
                    {"log": [vars(e) for e in log]})
    last = log[-1]
    acc = "n/a" if last.heldout_accuracy is None else f"{last.heldout_accuracy:.3f}"
    print(f"trained {args.epochs} epochs: final loss {last.train_loss:.4f}, held-out accuracy {acc}")


def _occlusion_config(args):
    from .attribution import OcclusionConfig

    return OcclusionConfig(patch_value=None if args.patch is None else np.asarray(args.patch, dtype=np.float32))


def _prepare(args):
    data_path, ds = _load_data(args.data)
    ckpt_path, model = _load_model(args.ckpt, ds)
    examples = ds.examples[:args.limit] if args.limit else ds.examples
    if not examples:
        raise UsageError(f"{args.data}: dataset is empty")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return data_path, ds, ckpt_path, model, examples, out


def _common_config(args, data_path, ckpt_path, out) -> dict:
    return {"data": str(data_path), "ckpt": str(ckpt_path), "out": str(out), "limit": args.limit,
            "patch": None if args.patch is None else list(args.patch), "word_norm": args.word_norm,
            "seed_target": args.seed_target, "seed": args.seed}


def cmd_attribute(args) -> None:
    from .attribution import cell_aggregate, guided_bp_attribute, occlusion_attribute_image, \
        occlusion_attribute_words, random_map
    from .evaluation import OCCLUSION_DIMS, example_seed

    data_path, ds, ckpt_path, model, examples, out = _prepare(args)
    methods = list(METHODS) if args.method == "all" else [args.method]
    config = _occlusion_config(args)
    written = []

    def put(name: str, payload) -> None:
        p = out / name
        if isinstance(payload, bytes):
            p.write_bytes(payload)
        else:
            p.write_text(payload + "\n", encoding="utf-8")
        written.append(p)

    for i, ex in enumerate(examples):
        for method in methods:
            words = None
            if method == "guided":
                pixels, words = guided_bp_attribute(model, ex.image, ex.question,
                                                    word_norm=args.word_norm, seed_target=args.seed_target)
                imap = cell_aggregate(pixels, OCCLUSION_DIMS)
            elif method == "occlusion":
                imap = occlusion_attribute_image(model, ex.image, ex.question, config)
                words = occlusion_attribute_words(model, ex.image, ex.question)
            else:
                imap = random_map(example_seed(args.seed, i), OCCLUSION_DIMS)
            stem = f"{ex.example_id}.{method}"
            put(f"{stem}.json", imap.to_json())
            put(f"{stem}.pgm", imap.to_pgm())
            if words is not None:
                put(f"{stem}.words.json", words.to_json(ds.vocab))
    cfg = _common_config(args, data_path, ckpt_path, out) | {"method": args.method}
    _write_manifest(out / "run-manifest.json", "attribute", cfg, [data_path, ckpt_path], written, out)
    print(f"wrote {len(written)} files for {len(examples)} examples to {out}")


def cmd_evaluate(args) -> None:
    from .evaluation import analyze_example, build_report
    from .report import write_report

    data_path, ds, ckpt_path, model, examples, out = _prepare(args)
    config = _occlusion_config(args)
    methods = list(args.methods)
    needed = list(dict.fromkeys(methods + [args.pos_method]))
    analyses = [analyze_example(model, ex, i, needed, seed=args.seed, config=config,
                                word_norm=args.word_norm, seed_target=args.seed_target)
                for i, ex in enumerate(examples)]
    report = build_report(analyses, examples, methods, pos_method=args.pos_method)
    written = write_report(report, out)
    cfg = _common_config(args, data_path, ckpt_path, out) | {"methods": methods, "pos_method": args.pos_method}
    _write_manifest(out / "run-manifest.json", "evaluate", cfg, [data_path, ckpt_path], written, out)
    print(f"evaluated {len(examples)} examples; wrote {len(written)} files to {out}")


def cmd_report(args) -> None:
    from .report import summary_text

    d = Path(args.in_dir)
    if not d.is_dir():
        raise UsageError(f"input directory not found: {args.in_dir}")
    try:
        sys.stdout.write(summary_text(d))
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from None


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "attribute": cmd_attribute,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"vqa-attrib: error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"vqa-attrib: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        logger.debug("failure", exc_info=True)
        print(f"vqa-attrib: {args.command} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
