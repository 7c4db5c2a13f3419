"""Command-line entry point.

Exit codes: 0 success, 1 invalid input or usage, 2 numeric failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

from . import numerics as nx
from .config import canonical_json, load_config
from .data import SynthSpec, gen_synthetic, in_memory_synthetic, load_dataset, subset
from .errors import NumericError, ValidationError
from .evaluator import fuse_scores, metrics_report, report_tables, score_dataset
from .scoring import canonical_direction
from .trainer import batch_loss, load_checkpoint, new_state, save_checkpoint, train
from .viz import export_attention_viz, export_similarity_map

log = logging.getLogger("pfan")

GRAD_TOL = 1e-3


class UsageError(ValidationError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _dataset_for(config, split=None, dataset=None):
    source = dataset or config.dataset
    if source:
        return load_dataset(source, max_regions=config.max_regions, split=split or config.split)
    if config.synthetic is not None:
        return in_memory_synthetic(SynthSpec(**config.synthetic))
    raise ValidationError("config names neither a dataset nor a synthetic spec")


def _file_id(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def cmd_train(args):
    config = load_config(args.config)
    if args.epochs is not None:
        config = config.replace(epochs=args.epochs)
    dataset = _dataset_for(config)
    out = args.out or config.checkpoint or "pfan.ckpt"
    state = load_checkpoint(args.resume, config) if args.resume else new_state(config, len(dataset.vocab))

    def report(st, loss):
        print(f"epoch {st.epoch:4d}  loss {loss:.6f}", flush=True)

    try:
        state = train(config, dataset, state=state, callback=report)
    except NumericError as exc:
        dump = {"error": str(exc), "epoch": getattr(exc, "epoch", None), "batch_image_ids": getattr(exc, "batch", None)}
        Path(f"{out}.nonfinite.json").write_text(canonical_json(dump), encoding="utf-8")
        raise
    save_checkpoint(out, state)
    print(f"saved {out} after {state.epoch} epochs")
    return 0


def cmd_eval(args):
    direction = args.direction
    if direction == "fused" and not args.ckpt2:
        raise UsageError("eval: --direction fused requires --ckpt2")
    state = load_checkpoint(args.ckpt)
    config = state.model.config
    dataset = _dataset_for(config, split=args.split, dataset=args.dataset)
    if direction == "fused":
        other = load_checkpoint(args.ckpt2)
        scores = fuse_scores(score_dataset(state.model, dataset, "t-i"), score_dataset(other.model, dataset, "i-t"))
        ckpt_id = f"{_file_id(args.ckpt)}+{_file_id(args.ckpt2)}"
        label = "t-i+i-t"
    else:
        label = canonical_direction(direction)
        scores = score_dataset(state.model, dataset, label)
        ckpt_id = _file_id(args.ckpt)
    report = metrics_report(scores, dataset.caption_image_index(), label, config.hash(), ckpt_id)
    report["split"] = dataset.split
    text = canonical_json(report)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    print(report_tables(report, method=f"PFAN {label}"))
    if not args.out:
        print(text, end="")
    return 0


def cmd_gen_synth(args):
    spec = {}
    if args.spec:
        raw = args.spec
        if Path(raw).is_file():
            raw = Path(raw).read_text(encoding="utf-8")
        try:
            spec = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"--spec is neither a JSON file nor inline JSON ({exc})") from None
    try:
        synth = SynthSpec(**spec)
    except TypeError as exc:
        raise ValidationError(f"bad synthetic spec: {exc}") from None
    out = gen_synthetic(args.out, synth, splits=args.splits.split(","))
    print(f"wrote synthetic dataset to {out}")
    return 0


def cmd_viz_sm(args):
    state = load_checkpoint(args.ckpt)
    export_similarity_map(state.model.params, state.model.config.grid_k, args.out, args.neighborhood)
    print(f"wrote similarity map to {args.out}")
    return 0


def cmd_viz_attn(args):
    state = load_checkpoint(args.ckpt)
    dataset = _dataset_for(state.model.config, split=args.split, dataset=args.dataset)
    summary = export_attention_viz(state.model, dataset, args.image, args.caption, args.out)
    for reg in summary["regions"]:
        blocks = " ".join(f"{b['block']}:{b['weight']:.3f}" for b in reg["top_blocks"])
        print(f"region {reg['region']}: word={reg['word']}  blocks {blocks}")
    return 0


def cmd_grad_check(args):
    config = load_config(args.config)
    if config.precision != "double":
        log.info("grad-check switches precision to double")
        config = config.replace(precision="double")
    dataset = subset(_dataset_for(config), config.batch_size)
    model = new_state(config, len(dataset.vocab)).model
    tokens = dataset.token_ids(config.max_tokens)
    positions = list(range(len(dataset.captions)))
    report = nx.grad_check(lambda: batch_loss(model, dataset, positions, tokens), model.params, h=args.h)
    for name, err in report.max_rel_error.items():
        flag = "ok" if err < args.tol else "FAIL"
        print(f"{name:24s} max rel err {err:.3e}  {flag}")
    print(f"worst {report.worst:.3e} (tolerance {args.tol:g})")
    if not report.passed(args.tol):
        raise NumericError("gradient check failed")
    return 0


def build_parser():
    parser = _Parser(prog="pfan", description="Position focused attention network for image-text matching")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", required=True)
    p.add_argument("--resume")
    p.add_argument("--out")
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="retrieval metrics for a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--ckpt2")
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--direction", default="t2i", choices=["t2i", "i2t", "fused"])
    p.add_argument("--dataset", help="override the dataset recorded in the checkpoint")
    p.add_argument("--out", help="write the JSON report here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gen-synth", help="write a synthetic dataset")
    p.add_argument("--spec", help="JSON object or file with SynthSpec fields")
    p.add_argument("--out", required=True)
    p.add_argument("--splits", default="train")
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("viz-sm", help="block embedding similarity map")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--neighborhood", type=int, default=4, choices=[4, 8])
    p.set_defaults(func=cmd_viz_sm)

    p = sub.add_parser("viz-attn", help="per-region attention export")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--caption", required=True, type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="train", choices=["train", "val", "test"])
    p.add_argument("--dataset")
    p.set_defaults(func=cmd_viz_attn)

    p = sub.add_parser("grad-check", help="finite-difference check of the full loss")
    p.add_argument("--config", required=True)
    p.add_argument("--h", type=float, default=1e-4)
    p.add_argument("--tol", type=float, default=GRAD_TOL)
    p.set_defaults(func=cmd_grad_check)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 2
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
