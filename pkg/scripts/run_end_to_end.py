"""Generate, calibrate, train, evaluate and ablate in one process, then print a summary.

    python scripts/run_end_to_end.py --seed 0 --out runs/seed0
"""

import argparse
import time
from pathlib import Path

from trigger_erasure import pipeline as P
from trigger_erasure import reconstructor as rec
from trigger_erasure.config import load_config


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config")
    ap.add_argument("--seed", type=int, default=None)
    ap.add_argument("--out", default=None, help="write report, heatmaps and ablation table here")
    ap.add_argument("--skip-ablation", action="store_true")
    args = ap.parse_args()

    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_overrides(seed=args.seed)
    t0 = time.time()
    models = P.build_models(cfg)
    calib = P.generate_split(cfg, P.CALIB_SPLIT, models)
    test = P.generate_split(cfg, P.TEST_SPLIT, models)
    refs = P.calibrate(cfg, calib, models)
    state = P.train(cfg, calib, models)
    print(f"decoder loss {state.losses[0]:.4f} -> {state.losses[-1]:.4f}  ({time.time() - t0:.0f} s)")

    result = P.evaluate(cfg, test, refs, state.params, models, keep_artifacts=args.out is not None)
    o, d, r = result.overall, result.detection, result.residual
    print(f"no defense  CP {o.cp_no_defense:6.2f}  ASR {o.asr_no_defense:6.2f}  TP {o.tp_no_defense:6.2f}")
    print(f"defended    CP {o.cp:6.2f}  ASR {o.asr:6.2f}  TP {o.tp:6.2f}  RP {o.rp:6.2f}")
    print(f"tokens      precision {d['precision']:.3f}  recall {d['recall']:.3f}  "
          f"clean false detections {d['clean_false_detection_rate']:.3f}")
    if r["n"]:
        print(f"residual    before {r['before_mean']:.3f}  after {r['after_mean']:.3f} (max {r['after_max']:.3f})")
    for t, m in result.per_task.items():
        print(f"  task {t}: CP {m.cp:6.2f}  ASR {m.asr_no_defense:6.2f} -> {m.asr:6.2f}  RP {m.rp:6.2f}")
    if args.out:
        out = Path(args.out)
        P.write_evaluation(cfg, result, out / "eval")
        rec.save_params(state.params, out / "decoder.btf", P.train_hyper(cfg))
        rec.write_loss_csv(state, out / "loss.csv")
    if not args.skip_ablation:
        table = P.ablate(cfg, test, refs, state.params, models)
        print(P.ablation_csv(table), end="")
        if args.out:
            (Path(args.out) / "ablation.csv").write_text(P.ablation_csv(table))
    print(f"total {time.time() - t0:.0f} s")


if __name__ == "__main__":
    main()
