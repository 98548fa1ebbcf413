"""Flat ``key = value`` run configuration.

One setting per line, ``#`` starts a comment, unknown keys are rejected.
Lists are comma separated; ``auto`` stands for an unset optional value.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace
from pathlib import Path

from .errors import ValidationError
from .fbl import ANALYTIC, AUTO, EMPIRICAL
from .testbed import TASKS, TRIGGER_TYPES, VIEW_FRACTIONS

FBL_MODES = ("on", "random-10%")
AFM_MODES = ("on", "off")
DECODER_MODES = ("on", "zero-fill")
U64_MAX = 2**64 - 1


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    # dataset
    tasks: tuple[int, ...] = (0, 1, 2, 3)
    episodes: int = 100
    calib_episodes: int = 100
    poison_rate: float = 0.3
    trigger_mix: tuple[str, ...] = ("checkerboard",)
    view_fraction: float = 0.10
    theta: float = 0.1
    # localization
    alpha: float = 0.05
    epsilon: float | None = None
    threshold_mode: str = AUTO
    reference_fraction: float = 0.2
    # attention filter
    l_mid: int | None = None
    gmm_k: int = 6
    em_tol: float = 1e-6
    em_max_iter: int = 200
    afm_spatial: bool = False
    # decoder
    patch: int = 8
    decoder_dp: int = 32
    train_steps: int = 2000
    train_batch: int = 16
    train_lr: float = 2e-3
    mask_min: float = 0.05
    mask_max: float = 0.25
    masked_only: bool = False
    color_perms: int = 5
    unconditional: bool = False
    # ablation switches
    fbl: str = "on"
    afm: str = "on"
    decoder: str = "on"
    random_fraction: float = 0.10
    # sweeps
    sweep_fractions: tuple[float, ...] = VIEW_FRACTIONS
    sweep_poison_rates: tuple[float, ...] = (0.1, 0.2, 0.3)
    sweep_triggers: tuple[str, ...] = TRIGGER_TYPES
    sweep_episodes: int = 40
    # artifacts
    write_images: bool = True

    def validate(self) -> "PipelineConfig":
        _check(0 <= self.seed <= U64_MAX, "seed must be an unsigned 64-bit integer")
        _check(len(self.tasks) > 0, "task list is empty")
        _check(len(set(self.tasks)) == len(self.tasks), "task list has duplicates")
        _check(all(0 <= t < len(TASKS) for t in self.tasks), f"task ids must lie in 0..{len(TASKS) - 1}")
        _check(self.episodes >= 1 and self.calib_episodes >= 1 and self.sweep_episodes >= 1,
               "episode counts must be positive")
        _check(0.0 <= self.poison_rate < 1.0, "poison_rate must lie in [0, 1)")
        _check(len(self.trigger_mix) > 0, "trigger_mix is empty")
        _check(all(t in TRIGGER_TYPES for t in self.trigger_mix + self.sweep_triggers),
               f"trigger types must be among {TRIGGER_TYPES}")
        _check(all(f in VIEW_FRACTIONS for f in (self.view_fraction,) + self.sweep_fractions),
               f"view fractions must be among {VIEW_FRACTIONS}")
        _check(0.0 < self.theta < 0.25, "theta must lie in (0, 0.25) so targets cannot both match")
        _check(0.0 < self.alpha < 1.0, "alpha must lie in (0, 1)")
        _check(self.epsilon is None or (math.isfinite(self.epsilon) and self.epsilon > 0), "epsilon must be positive")
        _check(self.threshold_mode in (AUTO, ANALYTIC, EMPIRICAL), "unknown threshold_mode")
        _check(0.0 < self.reference_fraction <= 1.0, "reference_fraction must lie in (0, 1]")
        _check(self.l_mid is None or self.l_mid >= 1, "l_mid must be at least 1")
        _check(self.gmm_k >= 1 and self.em_max_iter >= 1 and self.em_tol > 0, "invalid mixture settings")
        _check(self.patch == 8, "the testbed encoder is built for 8-pixel patches")
        _check(self.decoder_dp >= 1 and self.train_batch >= 1 and self.train_steps >= 0, "invalid decoder sizes")
        _check(self.train_lr >= 0, "train_lr must be non-negative")
        _check(0.0 < self.mask_min <= self.mask_max < 1.0, "mask ratios must satisfy 0 < min <= max < 1")
        _check(0 <= self.color_perms <= 5, "color_perms must lie in 0..5")
        _check(self.fbl in FBL_MODES, f"fbl must be one of {FBL_MODES}")
        _check(self.afm in AFM_MODES, f"afm must be one of {AFM_MODES}")
        _check(self.decoder in DECODER_MODES, f"decoder must be one of {DECODER_MODES}")
        _check(0.0 < self.random_fraction <= 1.0, "random_fraction must lie in (0, 1]")
        _check(all(0.0 <= r < 1.0 for r in self.sweep_poison_rates), "sweep poison rates must lie in [0, 1)")
        _check(len(self.sweep_fractions) and len(self.sweep_poison_rates) and len(self.sweep_triggers),
               "sweep grids must be nonempty")
        return self

    def with_overrides(self, **changes) -> "PipelineConfig":
        return replace(self, **changes).validate()


def _check(ok: bool, message: str) -> None:
    if not ok:
        raise ValidationError(message)


_FIELDS = {f.name: f for f in fields(PipelineConfig)}


def _kind(name: str) -> str:
    return str(_FIELDS[name].type)


def _parse_value(name: str, text: str):
    kind = _kind(name)
    text = text.strip()
    try:
        if kind.startswith("tuple"):
            items = [s.strip() for s in text.split(",") if s.strip()]
            inner = kind[len("tuple[") : kind.index(",")] if "," in kind else "str"
            conv = {"int": int, "float": float}.get(inner, str)
            return tuple(conv(s) for s in items)
        if kind == "bool":
            if text.lower() not in ("true", "false"):
                raise ValueError(text)
            return text.lower() == "true"
        if "None" in kind:
            if text == "auto":
                return None
            return int(text) if kind.startswith("int") else float(text)
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        return text
    except ValueError as exc:
        raise ValidationError(f"cannot parse {name} = {text!r}") from exc


def _format_value(value) -> str:
    if value is None:
        return "auto"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config(text: str, base: PipelineConfig | None = None) -> PipelineConfig:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"line {lineno}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _FIELDS:
            raise ValidationError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ValidationError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _parse_value(key, value)
    return replace(base or PipelineConfig(), **values).validate()


def format_config(cfg: PipelineConfig) -> str:
    return "".join(f"{f.name} = {_format_value(getattr(cfg, f.name))}\n" for f in fields(cfg))


def load_config(path: str | Path | None) -> PipelineConfig:
    if path is None:
        return PipelineConfig().validate()
    return parse_config(Path(path).read_text())


def config_dict(cfg: PipelineConfig) -> dict:
    return {f.name: (list(v) if isinstance(v := getattr(cfg, f.name), tuple) else v) for f in fields(cfg)}
