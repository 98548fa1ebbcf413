"""Calibrate and train once, then sweep trigger type x view fraction x poison rate.

    python scripts/run_sweep.py --seed 0 --out runs/sweep0
    python scripts/run_sweep.py --episodes 20 --steps 500   # quicker, noisier

Writes sweep.csv (one row per cell) and prints it.
"""

import argparse
import time
from pathlib import Path

from trigger_erasure import pipeline as P
from trigger_erasure.config import load_config


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config")
    ap.add_argument("--seed", type=int, default=None)
    ap.add_argument("--episodes", type=int, default=None, help="episodes per task in each cell")
    ap.add_argument("--steps", type=int, default=None, help="decoder training steps")
    ap.add_argument("--out", default=None)
    args = ap.parse_args()

    cfg = load_config(args.config)
    changes = {k: v for k, v in (("seed", args.seed), ("sweep_episodes", args.episodes), ("train_steps", args.steps))
               if v is not None}
    cfg = cfg.with_overrides(**changes)
    t0 = time.time()
    models = P.build_models(cfg)
    calib = P.generate_split(cfg, P.CALIB_SPLIT, models)
    refs = P.calibrate(cfg, calib, models)
    params = P.train(cfg, calib, models).params
    rows = P.sweep(cfg, refs, params, models)
    text = P.sweep_csv(rows)
    print(text, end="")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "sweep.csv").write_text(text)
    print(f"total {time.time() - t0:.0f} s")


if __name__ == "__main__":
    main()
