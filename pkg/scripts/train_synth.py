"""Desk-scale training run on the synthetic ellipse set, with a per-epoch CSV and a checkpoint.

    python3 scripts/train_synth.py --config unext-s --n 8 --size 128 --out results/synth
"""
import argparse
import json
import logging
import time
from dataclasses import replace
from pathlib import Path

from unext.arch import CANONICAL, build_model
from unext.checkpoint import save_checkpoint
from unext.data import synth_dataset
from unext.training import DESK_PLAN, evaluate, train_model


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default="unext-s", choices=sorted(CANONICAL))
    ap.add_argument("--n", type=int, default=8)
    ap.add_argument("--size", type=int, default=128)
    ap.add_argument("--epochs", type=int, default=DESK_PLAN.epochs)
    ap.add_argument("--lr", type=float, default=DESK_PLAN.lr_max)
    ap.add_argument("--batch-size", type=int, default=DESK_PLAN.batch_size)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="results/synth")
    args = ap.parse_args()
    logging.basicConfig(level=logging.DEBUG, format="%(message)s")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    plan = replace(DESK_PLAN, epochs=args.epochs, lr_max=args.lr, lr_min=min(DESK_PLAN.lr_min, args.lr),
                   batch_size=args.batch_size, seed=args.seed)
    data = synth_dataset(args.n, args.size, args.seed)
    model = build_model(CANONICAL[args.config], args.seed)
    t0 = time.perf_counter()
    hist = train_model(model, data, plan, val=data, csv_path=out / "log.csv", eval_every=10)
    f1, iou = evaluate(model, data)
    save_checkpoint(model, out / "model.ckpt")
    summary = {"config": args.config, "epochs": plan.epochs, "final_loss": hist[-1].train_loss if hist else None,
               "train_dice": f1, "train_iou": iou, "seconds": round(time.perf_counter() - t0, 1)}
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    print(json.dumps(summary))


if __name__ == "__main__":
    main()
