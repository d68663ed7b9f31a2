"""Operator surface.

Exit codes: 0 success, 2 configuration, 3 protocol/negotiation,
4 data/validation, 5 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .checkpoint import load_checkpoint
from .config import PartyConfig, build_config, resolve_key
from .errors import (
    ConfigurationError,
    DataError,
    NumericError,
    ProtocolError,
    VfsegError,
)
from .presets import config_for

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_PROTOCOL = 3
EXIT_DATA = 4
EXIT_NUMERIC = 5


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vfseg",
        description="Two-party vertical federated image segmentation.")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="materialize a synthetic dataset")
    gen.add_argument("--n", type=int, default=369)
    gen.add_argument("--size", type=int, default=128)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--out", default="data")

    train = sub.add_parser("train", help="train in any role")
    _add_party_flags(train)
    train.add_argument("--role", choices=("both", "bottom", "top"), default=None)

    ev = sub.add_parser("eval", help="metrics for a trained run on a directory")
    _add_party_flags(ev)

    infer = sub.add_parser("infer", help="emit predicted masks and triptychs")
    infer.add_argument("--checkpoint", required=True,
                       help="run directory holding bottom.ckpt and top.ckpt")
    infer.add_argument("--images", required=True)
    infer.add_argument("--labels", default=None,
                       help="optional label directory for the middle panel")
    infer.add_argument("--out", required=True)
    infer.add_argument("--batch-size", type=int, default=8)

    bench = sub.add_parser("bench", help="wire cost across boundary widths")
    bench.add_argument("--features", default="100,500,1000",
                       help="comma-separated boundary feature counts")
    bench.add_argument("--steps", type=int, default=3)
    bench.add_argument("--batch-size", type=int, default=4)
    bench.add_argument("--seed", type=int, default=0)
    bench.add_argument("--out", default="bench")

    grad = sub.add_parser("gradcheck", help="finite-difference oracle suite")
    grad.add_argument("--seeds", default="0,1,2,3,4")
    grad.add_argument("--layers-only", action="store_true",
                      help="skip the whole-model check")

    return parser


def _add_party_flags(cmd: argparse.ArgumentParser) -> None:
    cmd.add_argument("--config", default=None, help="key=value config file")
    cmd.add_argument("--preset", default=None)
    cmd.add_argument("--data", dest="data_dir", default=None)
    cmd.add_argument("--out", dest="out_dir", default=None)
    cmd.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    cmd.add_argument("--epochs", type=int, default=None)
    cmd.add_argument("--optimizer", choices=("sgd", "adam"), default=None)
    cmd.add_argument("--lr", type=float, default=None)
    cmd.add_argument("--momentum", type=float, default=None)
    cmd.add_argument("--seed", type=int, default=None)
    cmd.add_argument("--transport", choices=("loopback", "tcp"), default=None)
    cmd.add_argument("--host", default=None)
    cmd.add_argument("--port", type=int, default=None)
    cmd.add_argument("--wire-float", dest="wire_float",
                     choices=("f64", "f32"), default=None)
    cmd.add_argument("--timeout", type=float, default=None)
    cmd.add_argument("--key-file", dest="key_file", default=None)
    cmd.add_argument("--resume", action=argparse.BooleanOptionalAction, default=None)


_PARTY_KEYS = ("role", "preset", "data_dir", "out_dir", "batch_size", "epochs",
               "optimizer", "lr", "momentum", "seed", "transport", "host",
               "port", "wire_float", "timeout", "key_file", "resume")


def _party_config(args: argparse.Namespace) -> PartyConfig:
    overrides = {k: getattr(args, k) for k in _PARTY_KEYS if hasattr(args, k)}
    cfg = build_config(args.config, overrides)
    print("# resolved configuration")
    print(cfg.echo())
    return cfg


def _echo_args(args: argparse.Namespace, keys: list[str]) -> None:
    print("# resolved configuration")
    for key in keys:
        print(f"{key} = {getattr(args, key)}")


def _cmd_gen_data(args: argparse.Namespace) -> int:
    from .data import gen_synthetic, write_dataset

    _echo_args(args, ["n", "size", "seed", "out"])
    pairs = gen_synthetic(args.n, args.size, args.seed)
    write_dataset(pairs, args.out, meta={"size": args.size, "seed": args.seed})
    print(f"wrote {len(pairs)} image/label pairs under {args.out}")
    return EXIT_OK


def _cmd_train(args: argparse.Namespace) -> int:
    from .data import ImageStore, LabelStore
    from .metrics import metrics_log_read
    from .orchestrator import run_both, run_bottom, run_top
    from .report import render_metrics_report

    cfg = _party_config(args)
    key = resolve_key(cfg)
    model_cfg = config_for(cfg.preset)
    Path(cfg.out_dir).mkdir(parents=True, exist_ok=True)

    if cfg.role == "bottom":
        images = ImageStore(cfg.images_dir, model_cfg.input_size)
        summary = run_bottom(cfg, images, key)
    elif cfg.role == "top":
        labels = LabelStore(cfg.labels_dir, model_cfg.input_size)
        summary = run_top(cfg, labels, key)
    else:
        images = ImageStore(cfg.images_dir, model_cfg.input_size)
        labels = LabelStore(cfg.labels_dir, model_cfg.input_size)
        both = run_both(cfg, images, labels, key)
        summary = both["top"]

    if cfg.role in ("top", "both") and Path(cfg.metrics_path).exists():
        records, bad_lines = metrics_log_read(cfg.metrics_path)
        for lineno, message in bad_lines:
            print(f"metrics log line {lineno}: {message}", file=sys.stderr)
        if records:
            csv_path, svg_path = render_metrics_report(records, cfg.out_dir)
            print(f"report: {csv_path} {svg_path}")
    reports = summary.get("epoch_reports", [])
    if reports:
        last = reports[-1]
        print(f"epoch {last['epoch']}: loss={last['loss']:.4f} "
              f"acc={last['pixel_accuracy']:.4f} iou={last['iou']:.4f}")
    print(f"training complete: {summary['epochs_done']} epochs, "
          f"{summary['steps_done']} steps, {summary['aligned']} aligned samples")
    return EXIT_OK


def _load_run_workers(run_dir: str | Path, images, labels):
    """Rebuild both workers from a run directory's checkpoints.

    Checkpoints are self-describing: the preset comes from the header
    and the optimizer kind from its state tensor namespace, so a run
    trained with any settings loads without flags.
    """
    from .training import BottomWorker, TopWorker

    bottom_path = Path(run_dir) / "bottom.ckpt"
    top_path = Path(run_dir) / "top.ckpt"
    for p in (bottom_path, top_path):
        if not p.exists():
            raise DataError(f"missing checkpoint {p}")
    preset_b, bottom_tensors = load_checkpoint(bottom_path)
    preset_t, top_tensors = load_checkpoint(top_path, expect_preset=preset_b)
    model_cfg = config_for(preset_b)
    bottom = BottomWorker(model_cfg, 0, images,
                          optimizer=_optimizer_in(bottom_tensors))
    top = TopWorker(model_cfg, 0, labels,
                    optimizer=_optimizer_in(top_tensors))
    bottom.load_state(bottom_tensors)
    top.load_state(top_tensors)
    return model_cfg, bottom, top


def _optimizer_in(tensors: dict) -> str:
    return "adam" if any(n.startswith("opt.adam.") for n in tensors) else "sgd"


def _cmd_eval(args: argparse.Namespace) -> int:
    from .data import ImageStore, LabelStore
    from .protocol import entity_align
    from .training import evaluate_pairwise

    cfg = _party_config(args)
    model_cfg = config_for(cfg.preset)
    images = ImageStore(cfg.images_dir, model_cfg.input_size)
    labels = LabelStore(cfg.labels_dir, model_cfg.input_size)
    _, bottom, top = _load_run_workers(cfg.out_dir, images, labels)
    aligned = entity_align(images.ids(), labels.ids())
    result = evaluate_pairwise(bottom, top, aligned, cfg.batch_size)
    print(f"samples={int(result['samples'])} loss={result['loss']:.6f} "
          f"pixel_accuracy={result['pixel_accuracy']:.6f} iou={result['iou']:.6f}")
    out_path = Path(cfg.out_dir) / "eval.json"
    out_path.write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def _cmd_infer(args: argparse.Namespace) -> int:
    import numpy as np

    from .data import ImageStore, LabelStore
    from .report import save_mask_png, triptych

    _echo_args(args, ["checkpoint", "images", "labels", "out", "batch_size"])
    probe = load_checkpoint(Path(args.checkpoint) / "bottom.ckpt")
    model_cfg = config_for(probe[0])
    images = ImageStore(args.images, model_cfg.input_size)
    labels = LabelStore(args.labels, model_cfg.input_size) if args.labels else None
    _, bottom, top = _load_run_workers(args.checkpoint, images, labels)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    ids = images.ids()
    if not ids:
        raise DataError(f"no input images under {args.images}")
    batch = max(1, args.batch_size)
    for k in range(0, len(ids), batch):
        chunk = ids[k:k + batch]
        feats = bottom.forward(chunk, train=False)
        logits = top.predict(feats)
        preds = (logits > 0.0).astype(np.float64)
        image_batch = images.batch(chunk)
        for j, sample_id in enumerate(chunk):
            save_mask_png(preds[j], out_dir / f"{sample_id}_mask.png")
            truth = labels.batch([sample_id])[0] if labels is not None else None
            triptych(image_batch[j], truth, preds[j]).save(
                out_dir / f"{sample_id}_triptych.png")
    print(f"wrote {len(ids)} masks and triptychs under {out_dir}")
    return EXIT_OK


def _cmd_bench(args: argparse.Namespace) -> int:
    from .orchestrator import bench_comm
    from .report import BENCH_COLUMNS, render_bench_report

    _echo_args(args, ["features", "steps", "batch_size", "seed", "out"])
    try:
        counts = [int(tok) for tok in args.features.split(",") if tok.strip()]
    except ValueError as exc:
        raise ConfigurationError(f"bad --features list: {exc}") from exc
    if not counts:
        raise ConfigurationError("--features must name at least one count")
    rows = bench_comm(counts, batch_size=args.batch_size,
                      steps=args.steps, seed=args.seed)
    csv_path, svg_path = render_bench_report(rows, args.out)
    print(",".join(BENCH_COLUMNS))
    for row in rows:
        print(",".join(str(row[c]) for c in BENCH_COLUMNS))
    print(f"report: {csv_path} {svg_path}")
    return EXIT_OK


def _cmd_gradcheck(args: argparse.Namespace) -> int:
    from .checks import format_results, run_suite

    _echo_args(args, ["seeds", "layers_only"])
    try:
        seeds = tuple(int(tok) for tok in args.seeds.split(",") if tok.strip())
    except ValueError as exc:
        raise ConfigurationError(f"bad --seeds list: {exc}") from exc
    if not seeds:
        raise ConfigurationError("--seeds must name at least one seed")
    results = run_suite(seeds, include_model=not args.layers_only)
    print(format_results(results))
    if any(not r.passed for r in results):
        raise NumericError("gradient check failed; see table above")
    return EXIT_OK


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "infer": _cmd_infer,
    "bench": _cmd_bench,
    "gradcheck": _cmd_gradcheck,
}


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ConfigurationError as exc:
        print(f"vfseg: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ProtocolError as exc:
        print(f"vfseg: protocol error: {exc}", file=sys.stderr)
        return EXIT_PROTOCOL
    except NumericError as exc:
        print(f"vfseg: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except VfsegError as exc:
        print(f"vfseg: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
