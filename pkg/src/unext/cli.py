"""Command-line entry point: ``unext {train,infer,bench,count,gradcheck,ablate}``.

Exit codes: 0 success, 1 runtime failure, 2 usage error (bad flags or config file).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

log = logging.getLogger("unext")


class UsageError(Exception):
    pass


def resolve_config(value: str):
    from .arch import CANONICAL, UNeXtConfig

    if value in CANONICAL:
        return CANONICAL[value]
    path = Path(value)
    if not path.is_file():
        raise UsageError(f"--config must be one of {sorted(CANONICAL)} or an existing file, got {value!r}")
    try:
        return UNeXtConfig.from_lines(path.read_text().splitlines())
    except (ValueError, TypeError) as exc:
        raise UsageError(f"invalid config file {path}: {exc}") from exc


def cmd_train(args) -> int:
    from .arch import build_model
    from .checkpoint import save_checkpoint
    from .data import load_dataset, synth_dataset
    from .training import MetricReport, TrainPlan, evaluate, fit, train_model

    cfg = resolve_config(args.config)
    img_size = args.img_size or (128 if args.synth else 256)
    if img_size % cfg.divisor:
        raise UsageError(f"--img-size must be divisible by {cfg.divisor}")
    dataset = synth_dataset(args.synth, img_size, args.seed) if args.synth else load_dataset(args.data, img_size)
    plan = TrainPlan(epochs=args.epochs, batch_size=args.batch_size, lr_max=args.lr, lr_min=args.lr_min,
                     seed=args.seed, folds=max(args.folds, 1))
    model = build_model(cfg, args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.folds == 0:
        train_model(model, dataset, plan, csv_path=out.with_suffix(".csv"))
        f1, iou = evaluate(model, dataset)
        report = MetricReport(f1, iou, [f1], [iou], checkpoint_epoch="final (training set, no split)")
        save_checkpoint(model, out)
    else:
        fold_dir = out.with_name(out.stem + "_folds")
        report, models = fit(model, dataset, plan, fold_dir, eval_every=args.eval_every)
        save_checkpoint(models[0], out)
    out.with_suffix(".json").write_text(json.dumps(report.to_dict(), indent=2))
    print(json.dumps(report.to_dict()))
    return 0


def cmd_infer(args) -> int:
    from .arch import forward
    from .checkpoint import load_checkpoint
    from .data import image_to_tensor, read_raster, write_mask_png
    from .tensor import Tensor

    model = load_checkpoint(args.ckpt).eval()
    if args.img_size % model.config.divisor:
        raise UsageError(f"--img-size must be divisible by {model.config.divisor}")
    raw = read_raster(args.input)
    x = Tensor(image_to_tensor(raw, args.img_size)[None])
    logits = forward(model, x).data[0, 0]
    mask = (logits >= 0).astype(np.uint8)  # sigmoid >= 0.5
    write_mask_png(_resize_rect(mask, raw.shape[:2]), args.out)
    return 0


def _resize_rect(mask, hw):
    h, w = hw
    rows = np.minimum(((np.arange(h) + 0.5) * mask.shape[0] / h).astype(int), mask.shape[0] - 1)
    cols = np.minimum(((np.arange(w) + 0.5) * mask.shape[1] / w).astype(int), mask.shape[1] - 1)
    return mask[rows[:, None], cols[None, :]]


def cmd_bench(args) -> int:
    from .analysis import bench_latency
    from .arch import build_model
    from .checkpoint import load_checkpoint

    if args.ckpt:
        model = load_checkpoint(args.ckpt)
    else:
        model = build_model(resolve_config(args.config or "unext"), args.seed)
    if args.size % model.config.divisor:
        raise UsageError(f"--size must be divisible by {model.config.divisor}")
    rep = bench_latency(model.eval(), args.size, args.n, args.warmup, args.threads, args.seed)
    text = rep.to_json()
    if args.out:
        Path(args.out).write_text(text)
    print(text)
    return 0


def cmd_count(args) -> int:
    from .analysis import count_flops, emit_comparison
    from .arch import build_model

    cfg = resolve_config(args.config)
    if args.size % cfg.divisor:
        raise UsageError(f"--size must be divisible by {cfg.divisor}")
    rep = count_flops(build_model(cfg, 0), (1, cfg.in_channels, args.size, args.size))
    if rep.tensor_params != rep.params:
        log.error("closed-form params %d != tensor params %d", rep.params, rep.tensor_params)
        return 1
    print(rep.to_markdown() if args.format == "md" else rep.to_csv(), end="\n")
    if args.compare:
        cmp = emit_comparison(rep)
        print(cmp.to_markdown() if args.format == "md" else cmp.to_csv())
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    ops = [args.op] if args.op else None
    try:
        results = run_suite(ops, seeds=args.seeds, full=args.full)
    except KeyError as exc:
        raise UsageError(str(exc.args[0])) from exc
    ok = True
    for name, err, passed, skipped in results:
        extra = f" ({skipped} kink-straddling coords skipped)" if skipped else ""
        print(f"{'PASS' if passed else 'FAIL'} {name:18s} max rel err {err:.3e}{extra}")
        ok &= passed
    return 0 if ok else 1


def cmd_ablate(args) -> int:
    from .analysis import REFERENCE_ABLATION, count_flops
    from .arch import table2_variants

    size = args.size
    rows = []
    for (label, cfg), ref in zip(table2_variants(), REFERENCE_ABLATION):
        rep = count_flops(cfg, (1, 3, size, size))
        rows.append((label, rep.params, rep.gflops_mac_convention, ref[1], ref[3]))
    print("variant,params,gflops_mac,published_params_m,published_gflops")
    for label, p, g, pp, pg in rows:
        print(f"\"{label}\",{p},{g:.4f},{pp},{pg}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="unext", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train with the fold protocol (or on everything with --folds 0)")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--data", help="directory with images/ and masks/")
    src.add_argument("--synth", type=int, help="number of synthetic ellipse samples")
    p.add_argument("--config", default="unext")
    p.add_argument("--img-size", type=int)
    p.add_argument("--epochs", type=int, default=400)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--lr-min", type=float, default=1e-5)
    p.add_argument("--folds", type=int, default=3)
    p.add_argument("--eval-every", type=int, default=0, help="validation cadence in epochs for the CSV log")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="write a 0/255 mask for one image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--img-size", type=int, default=256)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("bench", help="CPU latency: mean over single-image forwards")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--ckpt")
    g.add_argument("--config")
    p.add_argument("--size", type=int, default=256)
    p.add_argument("--n", type=int, default=10)
    p.add_argument("--warmup", type=int, default=5)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("count", help="per-layer params and MACs")
    p.add_argument("--config", default="unext")
    p.add_argument("--size", type=int, default=256)
    p.add_argument("--format", choices=("csv", "md"), default="csv")
    p.add_argument("--compare", action="store_true", help="append the published comparison table")
    p.set_defaults(func=cmd_count)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--op")
    g.add_argument("--full", action="store_true", help="also check the whole network")
    p.add_argument("--seeds", type=int, default=20)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="params/GFLOPs of the ablation variants")
    p.add_argument("--table2", action="store_true", required=True)
    p.add_argument("--size", type=int, default=256)
    p.set_defaults(func=cmd_ablate)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"unext: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        print(f"unext: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
