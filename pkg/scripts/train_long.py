"""Full protocol on a real dataset directory (images/ + masks/): 400 epochs, batch 8, Adam 1e-4 with
cosine decay to 1e-5, three random 80/20 splits. Expect days on one CPU; not part of the test suite.

    python3 scripts/train_long.py --data /path/to/busi --size 256 --out results/busi
"""
import argparse
import json
import logging
from pathlib import Path

from unext.arch import CANONICAL, build_model
from unext.data import load_dataset
from unext.training import TrainPlan, fit


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--data", required=True)
    ap.add_argument("--config", default="unext", choices=sorted(CANONICAL))
    ap.add_argument("--size", type=int, default=256, help="512 for dermoscopy-style sets, 256 for ultrasound")
    ap.add_argument("--epochs", type=int, default=400)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="results/long")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    data = load_dataset(args.data, args.size)
    plan = TrainPlan(epochs=args.epochs, seed=args.seed)
    report, _ = fit(build_model(CANONICAL[args.config], args.seed), data, plan, Path(args.out), eval_every=10)
    Path(args.out, "report.json").write_text(json.dumps(report.to_dict(), indent=2))
    print(json.dumps(report.to_dict()))


if __name__ == "__main__":
    main()
