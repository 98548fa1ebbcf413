"""Command line entry point.

    trigger-erasure gen        --out data
    trigger-erasure calibrate  --dataset data/calib --out run/reference
    trigger-erasure train      --dataset data/calib --out run/decoder
    trigger-erasure detect     --reference run/reference --frame data/test/images/00000.btf --task 0 --out run/detect
    trigger-erasure evaluate   --dataset data/test --reference run/reference --decoder run/decoder/decoder.btf --out run/eval
    trigger-erasure ablate     (same inputs as evaluate)
    trigger-erasure sweep      --reference run/reference --decoder run/decoder/decoder.btf --out run/sweep

Exit status: 0 on success, 2 on invalid input or configuration, 3 on runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__, btf
from . import pipeline as P
from . import reconstructor as rec
from . import testbed as tb
from .config import PipelineConfig, format_config, load_config
from .errors import CorruptFile, TriggerErasureError, ValidationError

log = logging.getLogger("trigger_erasure")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 2, 3


def _u64(text: str) -> int:
    value = int(text, 0)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def _config(args) -> PipelineConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_overrides(seed=args.seed)
    return cfg


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dataset(args, cfg, models):
    records = P.load_dataset(args.dataset, models, cfg.theta)
    missing = {r.task_id for r in records} - set(cfg.tasks)
    if missing:
        raise CorruptFile(f"dataset contains tasks {sorted(missing)} not in the configuration")
    return records


def _decoder(cfg, path):
    return rec.load_params(path) if path else None


def cmd_gen(args) -> None:
    cfg = _config(args)
    models = P.build_models(cfg)
    out = _out(args)
    for name, split in (("calib", P.CALIB_SPLIT), ("test", P.TEST_SPLIT)):
        records = P.generate_split(cfg, split, models)
        meta = {"split": name, "seed": cfg.seed, "tasks": list(cfg.tasks), "episodes_per_task": len(records) // len(cfg.tasks),
                "poison_rate": cfg.poison_rate, "trigger_mix": list(cfg.trigger_mix), "view_fraction": cfg.view_fraction}
        P.save_dataset(records, models, out / name, meta)
        log.info("%s: %d episodes, %d poisoned", name, len(records), sum(r.poisoned for r in records))
    (out / "config.txt").write_text(format_config(cfg))


def cmd_calibrate(args) -> None:
    cfg = _config(args)
    models = P.build_models(cfg)
    refs = P.calibrate(cfg, _dataset(args, cfg, models), models)
    P.save_references(refs, _out(args))
    for t, ref in refs.items():
        log.info("task %d: %d reference tokens, tau=%.4f (%s)", t, ref.n_tokens, ref.tau_alpha, ref.threshold_mode)


def cmd_train(args) -> None:
    cfg = _config(args)
    models = P.build_models(cfg)
    state = P.train(cfg, _dataset(args, cfg, models), models)
    out = _out(args)
    rec.save_params(state.params, out / "decoder.btf", P.train_hyper(cfg))
    rec.write_loss_csv(state, out / "loss.csv")
    if state.losses:
        log.info("loss %.5f -> %.5f over %d steps", state.losses[0], state.losses[-1], len(state.losses))


def cmd_detect(args) -> None:
    cfg = _config(args)
    models = P.build_models(cfg)
    refs = P.load_references(args.reference)
    if args.task not in refs:
        raise ValidationError(f"no reference for task {args.task}")
    image = btf.load_tensor(args.frame)
    if image.shape != (tb.CANVAS, tb.CANVAS, 3):
        raise ValidationError(f"frame must be {tb.CANVAS}x{tb.CANVAS}x3, got {image.shape}")
    out_enc = tb.encoder_forward(models.encoder, image, args.task)
    det = P.detect(cfg, models, refs[args.task], out_enc, args.episode_id)
    out = _out(args)
    g = models.encoder.grid
    mask = np.zeros(models.encoder.M)
    mask[det.backdoor] = 1.0
    for name, grid in (("score", det.anomalies.scores), ("saliency", det.saliency), ("mask", mask)):
        btf.write_pgm(out / f"{name}.pgm", grid.reshape(g, g))
    body = {
        "version": __version__,
        "task_id": args.task,
        "tau_alpha": det.anomalies.tau_alpha,
        "anomalies": det.anomalies.indices.tolist(),
        "filter": det.filter.aggregate.tolist() if det.filter else None,
        "per_layer": {str(l): v.tolist() for l, v in det.filter.per_layer.items()} if det.filter else {},
        "backdoor": det.backdoor.tolist(),
        "scores": det.anomalies.scores.tolist(),
    }
    (out / "detection.json").write_text(P.dumps(body))
    log.info("%d anomalous, %d backdoor tokens", len(det.anomalies.indices), len(det.backdoor))


def _eval_inputs(args):
    cfg = _config(args)
    models = P.build_models(cfg)
    records = _dataset(args, cfg, models)
    refs = P.load_references(args.reference)
    return cfg, models, records, refs


def cmd_evaluate(args) -> None:
    cfg, models, records, refs = _eval_inputs(args)
    result = P.evaluate(cfg, records, refs, _decoder(cfg, args.decoder), models, keep_artifacts=True)
    P.write_evaluation(cfg, result, _out(args))
    o = result.overall
    log.info("CP %.2f  ASR %.2f -> %.2f  TP %.2f  RP %.2f", o.cp, o.asr_no_defense, o.asr, o.tp, o.rp)


def cmd_ablate(args) -> None:
    cfg, models, records, refs = _eval_inputs(args)
    if args.decoder is None:
        raise ValidationError("ablate needs --decoder")
    table = P.ablate(cfg, records, refs, rec.load_params(args.decoder), models)
    out = _out(args)
    (out / "ablation.json").write_text(P.dumps({"version": __version__, "variants": table}))
    (out / "ablation.csv").write_text(P.ablation_csv(table))
    for name, entry in table.items():
        log.info("%-18s TP %s", name, entry["overall"]["rendered"]["tp"])


def cmd_sweep(args) -> None:
    cfg = _config(args)
    models = P.build_models(cfg)
    refs = P.load_references(args.reference)
    rows = P.sweep(cfg, refs, _decoder(cfg, args.decoder), models)
    out = _out(args)
    (out / "sweep.csv").write_text(P.sweep_csv(rows))
    (out / "sweep.json").write_text(P.dumps({"version": __version__, "cells": rows}))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="trigger-erasure", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, func, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="flat key = value configuration file")
        p.add_argument("--seed", type=_u64, help="master seed, overrides the configuration")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("-v", "--verbose", action="store_true")
        p.set_defaults(func=func)
        return p

    command("gen", cmd_gen, "render calibration and test datasets")
    p = command("calibrate", cmd_calibrate, "fit per-task clean token references")
    p.add_argument("--dataset", required=True)
    p = command("train", cmd_train, "train the patch decoder on clean images")
    p.add_argument("--dataset", required=True)
    p = command("detect", cmd_detect, "localize trigger tokens in one frame")
    p.add_argument("--reference", required=True)
    p.add_argument("--frame", required=True, help="BTF image tensor")
    p.add_argument("--task", type=int, default=0)
    p.add_argument("--episode-id", type=int, default=0, help="keys the attention filter's random stream")
    for name, func, help_ in (("evaluate", cmd_evaluate, "run the defense over a dataset"),
                              ("ablate", cmd_ablate, "compare the full defense against its ablations")):
        p = command(name, func, help_)
        p.add_argument("--dataset", required=True)
        p.add_argument("--reference", required=True)
        p.add_argument("--decoder")
    p = command("sweep", cmd_sweep, "evaluate over trigger type, view fraction and poison rate grids")
    p.add_argument("--reference", required=True)
    p.add_argument("--decoder")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (TriggerErasureError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
