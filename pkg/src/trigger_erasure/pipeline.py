"""Calibrate, detect, filter, mask, purify and re-infer, with metrics and reports.

Every random decision hangs off one master stream:

    root.child(1)            encoder construction
    root.child(2).child(t)   policy head calibration for task t
    root.child(3).child(s)   dataset split s (1 calibration, 2 test, 100+ sweep cells)
    root.child(4).child(t)   reference episode selection for task t
    root.child(5)            decoder training
    root.child(6).child(i)   attention filter for episode i
    root.child(7).child(i)   random-token ablation for episode i
"""

from __future__ import annotations

import csv
import functools
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__, afm, btf, fbl
from . import reconstructor as rec
from . import testbed as tb
from .config import PipelineConfig, config_dict
from .errors import CorruptFile, EmptyInput, TooFewCleanEpisodes
from .numeric import RandomStream

CALIB_SPLIT = 1
TEST_SPLIT = 2
COLOR_PERMS = ((1, 2, 0), (2, 0, 1), (2, 1, 0), (0, 2, 1), (1, 0, 2))


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def trade_off(cp: float, asr: float) -> float:
    """Balanced robustness/utility score: mean of clean success and attack failure."""
    return (cp + (100.0 - asr)) / 2.0


def _pct(count: int, total: int) -> float:
    return 100.0 * count / total if total else 0.0


@dataclass(frozen=True)
class MetricsReport:
    cp: float
    asr: float
    rp: float
    cp_no_defense: float
    asr_no_defense: float
    failure_after_defense: float
    n_clean: int
    n_triggered: int

    @property
    def tp(self) -> float:
        return trade_off(self.cp, self.asr)

    @property
    def tp_no_defense(self) -> float:
        return trade_off(self.cp_no_defense, self.asr_no_defense)

    def to_dict(self) -> dict:
        raw = {
            "cp": self.cp, "asr": self.asr, "tp": self.tp, "rp": self.rp,
            "cp_no_defense": self.cp_no_defense, "asr_no_defense": self.asr_no_defense,
            "tp_no_defense": self.tp_no_defense, "failure_after_defense": self.failure_after_defense,
        }
        out = {k: v for k, v in raw.items()}
        out["rendered"] = {k: f"{v:.2f}" for k, v in raw.items()}
        out["n_clean"], out["n_triggered"] = self.n_clean, self.n_triggered
        return out


def compute_metrics(rows: Sequence[dict]) -> MetricsReport:
    """Aggregate per-episode outcome rows (keys: poisoned, outcome_no_defense, outcome)."""
    clean = [r for r in rows if not r["poisoned"]]
    trig = [r for r in rows if r["poisoned"]]

    def count(group, key, value):
        return sum(1 for r in group if r[key] == value)

    return MetricsReport(
        cp=_pct(count(clean, "outcome", tb.CLEAN_SUCCESS), len(clean)),
        asr=_pct(count(trig, "outcome", tb.ATTACK_SUCCESS), len(trig)),
        rp=_pct(count(trig, "outcome", tb.CLEAN_SUCCESS), len(trig)),
        cp_no_defense=_pct(count(clean, "outcome_no_defense", tb.CLEAN_SUCCESS), len(clean)),
        asr_no_defense=_pct(count(trig, "outcome_no_defense", tb.ATTACK_SUCCESS), len(trig)),
        failure_after_defense=_pct(count(trig, "outcome", tb.FAILURE), len(trig)),
        n_clean=len(clean),
        n_triggered=len(trig),
    )


# ---------------------------------------------------------------------------
# Models and datasets
# ---------------------------------------------------------------------------


@dataclass
class Models:
    encoder: tb.BackdooredEncoder
    clean_twin: tb.BackdooredEncoder
    heads: dict[int, tb.PolicyHead]


@functools.lru_cache(maxsize=4)
def _models(seed: int, tasks: tuple[int, ...]) -> Models:
    root = RandomStream.from_seed(seed)
    enc, twin = tb.build_backdoored_encoder(None, root.child(1))
    heads = {t: tb.build_policy_head(enc, t, root.child(2).child(t)) for t in tasks}
    return Models(enc, twin, heads)


def build_models(cfg: PipelineConfig) -> Models:
    return _models(cfg.seed, tuple(sorted(cfg.tasks)))


def generate_split(
    cfg: PipelineConfig,
    split: int,
    models: Models,
    n: int | None = None,
    poison_rate: float | None = None,
    mix: Sequence[str] | None = None,
    fraction: float | None = None,
) -> list[tb.EpisodeRecord]:
    if not cfg.tasks:
        raise EmptyInput("no tasks configured")
    n = n if n is not None else (cfg.calib_episodes if split == CALIB_SPLIT else cfg.episodes)
    rate = cfg.poison_rate if poison_rate is None else poison_rate
    srng = RandomStream.from_seed(cfg.seed).child(3).child(split)
    records = []
    for k, t in enumerate(cfg.tasks):
        records += tb.make_dataset(
            n, rate, mix or cfg.trigger_mix, srng.child(t), models.encoder, models.heads[t],
            fraction if fraction is not None else cfg.view_fraction, cfg.theta, id_offset=k * n,
        )
    return records


def save_dataset(records: Sequence[tb.EpisodeRecord], models: Models, out: str | Path, meta: dict) -> None:
    out = Path(out)
    tb.write_dataset(records, models.heads, out)
    (out / "dataset.json").write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n")


def load_dataset(path: str | Path, models: Models, theta: float) -> list[tb.EpisodeRecord]:
    """Rebuild episode records from a manifest and its BTF images, re-running the policy."""
    path = Path(path)
    if not (path / "manifest.jsonl").exists():
        raise CorruptFile(f"{path} has no manifest.jsonl")
    records = []
    for entry in tb.read_manifest(path):
        scene = tb.SceneSpec.from_dict(entry["scene"])
        image = btf.load_tensor(path / "images" / f"{entry['episode_id']:05d}.btf")
        if entry["task_id"] not in models.heads:
            raise CorruptFile(f"episode {entry['episode_id']} uses unconfigured task {entry['task_id']}")
        records.append(tb.EpisodeRecord(
            entry["episode_id"], entry["task_id"], scene, image, np.zeros(6),
            np.asarray(entry["ground_truth"], dtype=np.int64), bool(entry["poisoned"]), "",
            tb.object_centroid(scene),
        ))
    for t in sorted({r.task_id for r in records}):
        group = [r for r in records if r.task_id == t]
        pooled = tb.encoder_forward(models.encoder, np.stack([r.image for r in group]), t).pooled
        for r, e in zip(group, pooled):
            r.joints = tb.policy_forward(models.heads[t], e)
            r.outcome = tb.judge(r.joints, models.heads[t], theta, r.centroid)
    return records


# ---------------------------------------------------------------------------
# Calibration and training
# ---------------------------------------------------------------------------


def calibrate(
    cfg: PipelineConfig, records: Sequence[tb.EpisodeRecord], models: Models
) -> dict[int, fbl.ReferenceDistribution]:
    """One clean reference per task from a sample of its clean-success episodes."""
    root = RandomStream.from_seed(cfg.seed).child(4)
    refs = {}
    for t in sorted({r.task_id for r in records}):
        succ = [r for r in records if r.task_id == t and not r.poisoned and r.outcome == tb.CLEAN_SUCCESS]
        if len(succ) < 5:
            raise TooFewCleanEpisodes(f"task {t} has {len(succ)} clean-success episodes, need at least 5")
        chosen = fbl.select_reference_episodes(succ, cfg.reference_fraction, root.child(t))
        tokens = tb.encoder_forward(models.encoder, np.stack([r.image for r in chosen]), t).tokens
        refs[t] = fbl.fit_reference(tokens.reshape(-1, tokens.shape[-1]), cfg.epsilon, cfg.alpha, cfg.threshold_mode)
    return refs


def save_references(refs: dict[int, fbl.ReferenceDistribution], out: str | Path) -> None:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    for t, ref in refs.items():
        fbl.save_reference(ref, out / f"task-{t}.btf")


def load_references(path: str | Path) -> dict[int, fbl.ReferenceDistribution]:
    path = Path(path)
    refs = {int(p.stem.split("-")[1]): fbl.load_reference(p) for p in sorted(path.glob("task-*.btf"))}
    if not refs:
        raise CorruptFile(f"no task references under {path}")
    return refs


def training_set(cfg: PipelineConfig, records: Sequence[tb.EpisodeRecord], models: Models):
    """Clean images, optionally with RGB channel permutations, and their global embeddings."""
    images, embeds = [], []
    for t in sorted({r.task_id for r in records}):
        clean = [r.image for r in records if r.task_id == t and not r.poisoned]
        if not clean:
            continue
        clean = np.stack(clean)
        for perm in ((0, 1, 2),) + COLOR_PERMS[: cfg.color_perms]:
            batch = clean[..., list(perm)]
            images.append(batch)
            embeds.append(tb.encoder_forward(models.encoder, batch, t).pooled)
    if not images:
        raise EmptyInput("no clean episodes to train the decoder on")
    return np.concatenate(images), np.concatenate(embeds)


def train(cfg: PipelineConfig, records: Sequence[tb.EpisodeRecord], models: Models) -> rec.TrainState:
    images, embeds = training_set(cfg, records, models)
    tcfg = rec.TrainConfig(
        steps=cfg.train_steps, batch_size=cfg.train_batch, lr=cfg.train_lr,
        mask_min=cfg.mask_min, mask_max=cfg.mask_max, masked_only=cfg.masked_only, d_p=cfg.decoder_dp,
    )
    return rec.train_decoder(images, embeds, tcfg, RandomStream.from_seed(cfg.seed).child(5), cfg.patch)


def train_hyper(cfg: PipelineConfig) -> dict:
    keys = ("train_steps", "train_batch", "train_lr", "mask_min", "mask_max", "masked_only", "decoder_dp",
            "color_perms", "seed")
    return {k: getattr(cfg, k) for k in keys}


# ---------------------------------------------------------------------------
# Detection and purification
# ---------------------------------------------------------------------------


@dataclass
class Detection:
    anomalies: fbl.AnomalySet
    candidates: np.ndarray  # token set handed to the attention filter
    filter: afm.FilterSet | None
    backdoor: np.ndarray
    saliency: np.ndarray  # mean deep-layer saliency per image token


def _afm_config(cfg: PipelineConfig, enc: tb.BackdooredEncoder) -> afm.AfmConfig:
    return afm.AfmConfig(K=cfg.gmm_k, tol=cfg.em_tol, max_iter=cfg.em_max_iter, l_mid=cfg.l_mid,
                         spatial=cfg.afm_spatial, grid_shape=(enc.grid, enc.grid))


def detect(
    cfg: PipelineConfig,
    models: Models,
    ref: fbl.ReferenceDistribution,
    out: tb.EncoderOutput,
    episode_id: int,
) -> Detection:
    """Localization, attention filtering and their intersection for one encoded frame."""
    enc = models.encoder
    root = RandomStream.from_seed(cfg.seed)
    anom = fbl.flag_anomalies(ref, fbl.TokenBatch(out.tokens))
    candidates = anom.indices
    if cfg.fbl == "random-10%":
        k = max(1, int(round(cfg.random_fraction * enc.M)))
        picked, _ = root.child(7).child(episode_id).choice(enc.M, k)
        candidates = np.sort(picked)
    stack = tb.attention_stack(enc, out)
    layers = afm.deep_layers(stack, cfg.l_mid)
    saliency = np.mean([afm.token_saliency(afm.mean_attention(stack, l), stack.image_cols) for l in layers], axis=0)
    if cfg.afm == "off":
        return Detection(anom, candidates, None, candidates, saliency)
    fs = afm.run_afm(stack, anom, _afm_config(cfg, enc), root.child(6).child(episode_id))
    backdoor = np.intersect1d(candidates, fs.aggregate)
    return Detection(anom, candidates, fs, backdoor, saliency)


def purify_image(cfg: PipelineConfig, models: Models, params: rec.DecoderParams | None, image: np.ndarray,
                 task_id: int, backdoor: np.ndarray) -> np.ndarray:
    if cfg.decoder == "zero-fill":
        return tb_zero_fill(image, backdoor, cfg.patch)
    if params is None:
        raise EmptyInput("purification needs trained decoder parameters")

    def hook(x):
        return tb.encoder_forward(models.encoder, x, task_id).pooled

    out = rec.purify(params, hook, image, backdoor, unconditional=cfg.unconditional)
    return out if out is image else np.clip(out, 0.0, 1.0)


def tb_zero_fill(image: np.ndarray, backdoor: np.ndarray, patch: int) -> np.ndarray:
    return image if len(backdoor) == 0 else rec.zero_fill(image, backdoor, patch)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


@dataclass
class EvalResult:
    rows: list[dict]
    per_task: dict[int, MetricsReport]
    overall: MetricsReport
    detection: dict
    residual: dict
    heatmaps: dict[int, dict[str, np.ndarray]] = field(default_factory=dict)
    purified: dict[int, np.ndarray] = field(default_factory=dict)


def _detection_stats(rows: Sequence[dict]) -> dict:
    hits = predicted = truth = 0
    clean_frames = clean_fired = 0
    for r in rows:
        if r["poisoned"]:
            scored = set(r["backdoor"]) - set(r["boundary"])
            gt = set(r["ground_truth"])
            hits += len(scored & gt)
            predicted += len(scored)
            truth += len(gt)
        else:
            clean_frames += 1
            clean_fired += bool(r["backdoor"])
    return {
        "precision": hits / predicted if predicted else 0.0,
        "recall": hits / truth if truth else 0.0,
        "clean_false_detection_rate": clean_fired / clean_frames if clean_frames else 0.0,
        "true_positive_tokens": hits,
        "predicted_tokens": predicted,
        "ground_truth_tokens": truth,
    }


def _residual_stats(values: list[tuple[float, float]]) -> dict:
    if not values:
        return {"n": 0, "before_mean": None, "after_mean": None, "after_max": None}
    arr = np.asarray(values)
    return {"n": len(values), "before_mean": float(arr[:, 0].mean()), "after_mean": float(arr[:, 1].mean()),
            "after_max": float(arr[:, 1].max()), "before_min": float(arr[:, 0].min())}


def evaluate(
    cfg: PipelineConfig,
    records: Sequence[tb.EpisodeRecord],
    refs: dict[int, fbl.ReferenceDistribution],
    params: rec.DecoderParams | None,
    models: Models,
    keep_artifacts: bool = False,
) -> EvalResult:
    rows, residuals, heatmaps, purified = [], [], {}, {}
    for t in sorted({r.task_id for r in records}):
        if t not in refs:
            raise CorruptFile(f"no clean reference for task {t}")
        group = [r for r in records if r.task_id == t]
        head = models.heads[t]
        outs = tb.encoder_forward(models.encoder, np.stack([r.image for r in group]), t)
        for i, r in enumerate(group):
            out = tb.EncoderOutput(outs.attentions[i], outs.tokens[i], outs.cls[i], outs.pooled[i], outs.detector[i])
            det = detect(cfg, models, refs[t], out, r.episode_id)
            clean_img = purify_image(cfg, models, params, r.image, t, det.backdoor)
            if clean_img is r.image:
                joints = r.joints
            else:
                joints = tb.policy_forward(head, tb.encoder_forward(models.encoder, clean_img, t).pooled)
            outcome = tb.judge(joints, head, cfg.theta, r.centroid)
            footprint = tb.render(r.scene)[1] if r.poisoned else None
            rows.append({
                "episode_id": r.episode_id,
                "task_id": t,
                "poisoned": r.poisoned,
                "trigger_type": r.trigger_type,
                "outcome_no_defense": r.outcome,
                "outcome": outcome,
                "anomalies": [int(j) for j in det.anomalies.indices],
                "backdoor": [int(j) for j in det.backdoor],
                "ground_truth": [int(j) for j in r.ground_truth],
                "boundary": [int(j) for j in tb.boundary_tokens(footprint)] if footprint is not None else [],
                "joints": [float(v) for v in joints],
            })
            if r.poisoned and r.trigger_type == tb.CHECKERBOARD:
                trig = r.scene.trigger
                tpl, _ = tb.trigger_template(trig.kind, trig.size)
                region = (trig.top, trig.left)
                residuals.append((rec.trigger_residual(r.image, tpl, region),
                                  rec.trigger_residual(clean_img, tpl, region)))
            if keep_artifacts:
                mask = np.zeros(models.encoder.M)
                mask[det.backdoor] = 1.0
                g = models.encoder.grid
                heatmaps[r.episode_id] = {
                    "score": det.anomalies.scores.reshape(g, g),
                    "saliency": det.saliency.reshape(g, g),
                    "mask": mask.reshape(g, g),
                }
                if clean_img is not r.image:
                    purified[r.episode_id] = clean_img
    rows.sort(key=lambda row: row["episode_id"])
    per_task = {t: compute_metrics([r for r in rows if r["task_id"] == t]) for t in sorted({r["task_id"] for r in rows})}
    return EvalResult(rows, per_task, compute_metrics(rows), _detection_stats(rows), _residual_stats(residuals),
                      heatmaps, purified)


def report_dict(cfg: PipelineConfig, result: EvalResult) -> dict:
    return {
        "version": __version__,
        "config": config_dict(cfg),
        "overall": result.overall.to_dict(),
        "per_task": {str(t): m.to_dict() for t, m in result.per_task.items()},
        "detection": result.detection,
        "trigger_residual": result.residual,
        "episodes": result.rows,
    }


def dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1) + "\n"


def write_evaluation(cfg: PipelineConfig, result: EvalResult, out: str | Path) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(dumps(report_dict(cfg, result)))
    fields_ = ["episode_id", "task_id", "poisoned", "trigger_type", "outcome_no_defense", "outcome"]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(fields_)
    for row in result.rows:
        writer.writerow([row[k] if row[k] is not None else "" for k in fields_])
    (out / "episodes.csv").write_text(buf.getvalue())
    if cfg.write_images:
        (out / "heatmaps").mkdir(exist_ok=True)
        for eid, maps in result.heatmaps.items():
            for name, grid in maps.items():
                btf.write_pgm(out / "heatmaps" / f"{eid:05d}-{name}.pgm", grid)
        if result.purified:
            (out / "purified").mkdir(exist_ok=True)
            for eid, img in result.purified.items():
                btf.save_tensor(out / "purified" / f"{eid:05d}.btf", img)
                btf.write_ppm(out / "purified" / f"{eid:05d}.ppm", img)
    return out / "report.json"


# ---------------------------------------------------------------------------
# Ablations and sweeps
# ---------------------------------------------------------------------------

ABLATIONS = (
    ("full", {}),
    ("fbl-random-10%", {"fbl": "random-10%"}),
    ("afm-off", {"afm": "off"}),
    ("decoder-zero-fill", {"decoder": "zero-fill"}),
)


def ablate(cfg, records, refs, params, models) -> dict:
    table = {}
    for name, switches in ABLATIONS:
        variant = cfg.with_overrides(**{"fbl": "on", "afm": "on", "decoder": "on", **switches})
        res = evaluate(variant, records, refs, params, models)
        table[name] = {
            "overall": res.overall.to_dict(),
            "per_task": {str(t): m.to_dict() for t, m in res.per_task.items()},
            "detection": res.detection,
        }
    return table


def ablation_csv(table: dict) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    tasks = sorted(next(iter(table.values()))["per_task"], key=int)
    writer.writerow(["variant"] + [f"tp_task{t}" for t in tasks] + ["tp_overall", "cp", "asr", "rp"])
    for name, entry in table.items():
        o = entry["overall"]
        writer.writerow([name] + [entry["per_task"][t]["rendered"]["tp"] for t in tasks]
                        + [o["rendered"]["tp"], o["rendered"]["cp"], o["rendered"]["asr"], o["rendered"]["rp"]])
    return buf.getvalue()


def sweep(cfg, refs, params, models) -> list[dict]:
    """Full defense over trigger type x view fraction x poisoned share of the test episodes."""
    rows = []
    cell = 0
    for kind in cfg.sweep_triggers:
        for frac in cfg.sweep_fractions:
            for rate in cfg.sweep_poison_rates:
                records = generate_split(cfg, 100 + cell, models, n=cfg.sweep_episodes, poison_rate=rate,
                                         mix=(kind,), fraction=frac)
                res = evaluate(cfg, records, refs, params, models)
                o = res.overall
                rows.append({"trigger": kind, "view_fraction": frac, "poison_rate": rate,
                             "cp": o.cp, "asr_no_defense": o.asr_no_defense, "asr": o.asr, "tp": o.tp, "rp": o.rp,
                             "recall": res.detection["recall"], "precision": res.detection["precision"]})
                cell += 1
    return rows


def sweep_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    cols = ["trigger", "view_fraction", "poison_rate", "cp", "asr_no_defense", "asr", "tp", "rp", "recall", "precision"]
    writer.writerow(cols)
    for r in rows:
        writer.writerow([r[c] if isinstance(r[c], str) else f"{r[c]:.2f}" if c not in ("view_fraction", "poison_rate", "recall", "precision") else f"{r[c]:.4g}" for c in cols])
    return buf.getvalue()


def is_finite_report(d: dict) -> bool:
    return all(math.isfinite(v) for v in d.values() if isinstance(v, float))
