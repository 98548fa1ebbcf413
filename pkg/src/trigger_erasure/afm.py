"""Attention-driven filtering of trigger candidates.

Deep-layer attention is averaged over heads, turned into per-image-token
saliency, clustered with a small Gaussian mixture, and the most salient
cluster of every layer is pooled and intersected with the feature anomalies.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import btf
from .errors import (
    AllClustersEmpty,
    CorruptFile,
    EmptyInput,
    IndexOutOfRange,
    LayerOutOfRange,
    UniverseMismatch,
    ValidationError,
)
from .fbl import AnomalySet
from .numeric import RandomStream

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class AttentionStack:
    """Per-layer ``H x T x T`` attention, keyed by 1-based layer index."""

    layers: dict[int, np.ndarray]
    image_cols: np.ndarray

    def __post_init__(self):
        if not self.layers:
            raise EmptyInput("attention stack has no layers")
        shapes = {a.shape for a in self.layers.values()}
        if len(shapes) != 1:
            raise ValidationError(f"layers disagree in shape: {sorted(shapes)}")
        (shape,) = shapes
        if len(shape) != 3 or shape[1] != shape[2]:
            raise ValidationError(f"each layer must be H x T x T, got {shape}")
        for layer, a in self.layers.items():
            if not np.all(np.abs(a.sum(axis=-1) - 1.0) <= 1e-6):
                raise ValidationError(f"layer {layer} attention rows do not sum to 1")
        cols = np.asarray(self.image_cols, dtype=np.int64)
        if cols.size and (cols.min() < 0 or cols.max() >= shape[1]):
            raise IndexOutOfRange("image columns fall outside the token range")
        object.__setattr__(self, "image_cols", cols)

    @property
    def T(self) -> int:
        return next(iter(self.layers.values())).shape[1]

    @property
    def H(self) -> int:
        return next(iter(self.layers.values())).shape[0]

    @property
    def L(self) -> int:
        return max(self.layers)

    @property
    def M(self) -> int:
        return self.image_cols.shape[0]


@dataclass
class GmmModel:
    weights: np.ndarray
    means: np.ndarray  # (K, D)
    variances: np.ndarray  # (K, D), diagonal
    log_likelihood: float
    assignments: np.ndarray
    history: list[float] = field(default_factory=list)
    reseeded: int = 0

    @property
    def K(self) -> int:
        return self.weights.shape[0]


@dataclass
class FilterSet:
    per_layer: dict[int, np.ndarray]
    aggregate: np.ndarray
    backdoor: np.ndarray
    chosen_cluster: dict[int, int] = field(default_factory=dict)
    saliency: dict[int, np.ndarray] = field(default_factory=dict)


@dataclass
class AfmConfig:
    K: int = 6
    tol: float = 1e-6
    max_iter: int = 200
    var_floor: float | None = None
    l_mid: int | None = None
    spatial: bool = False
    grid_shape: tuple[int, int] | None = None


def mean_attention(stack: AttentionStack, layer: int) -> np.ndarray:
    if layer not in stack.layers:
        raise LayerOutOfRange(f"layer {layer} not in {sorted(stack.layers)}")
    return stack.layers[layer].mean(axis=0)


def token_saliency(abar: np.ndarray, image_cols) -> np.ndarray:
    """Column means of the image-token submatrix over all T query rows."""
    cols = np.asarray(image_cols, dtype=np.int64)
    t = abar.shape[0]
    if cols.size and (cols.min() < 0 or cols.max() >= abar.shape[1]):
        raise IndexOutOfRange("image column index outside attention matrix")
    return abar[:, cols].sum(axis=0) / t


def _log_density(x: np.ndarray, means: np.ndarray, variances: np.ndarray) -> np.ndarray:
    # (n, K) log N(x | mean_k, diag var_k)
    diff = x[:, None, :] - means[None, :, :]
    return -0.5 * np.sum(diff * diff / variances[None] + np.log(variances)[None] + LOG_2PI, axis=2)


def _estep(x, weights, means, variances):
    with np.errstate(divide="ignore"):
        log_joint = _log_density(x, means, variances) + np.log(weights)[None, :]
    top = log_joint.max(axis=1, keepdims=True)
    log_norm = top[:, 0] + np.log(np.exp(log_joint - top).sum(axis=1))
    resp = np.exp(log_joint - log_norm[:, None])
    return resp, log_norm


def fit_gmm(
    features: np.ndarray,
    K: int,
    rng: RandomStream | None = None,
    tol: float = 1e-6,
    max_iter: int = 200,
    var_floor: float | np.ndarray | None = None,
) -> GmmModel:
    """EM for a diagonal Gaussian mixture; column 0 drives the initialization."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    n, dim = x.shape
    if n == 0:
        raise EmptyInput("cannot fit a mixture to no values")
    if K < 1:
        raise ValidationError("K must be at least 1")
    rng = rng or RandomStream.from_seed(0)
    K = min(K, n)

    span = x.max(axis=0) - x.min(axis=0)
    if var_floor is None:
        var_floor = np.where(span > 0, 1e-8 * span**2, 1e-12)
    floor = np.broadcast_to(np.asarray(var_floor, dtype=np.float64), (dim,))

    probs = (np.arange(K) + 0.5) / K
    means = np.quantile(x, probs, axis=0).reshape(K, dim)
    global_var = np.maximum(x.var(axis=0), floor)
    variances = np.tile(global_var, (K, 1))
    weights = np.full(K, 1.0 / K)

    resp, log_norm = _estep(x, weights, means, variances)
    history = [float(log_norm.sum())]
    reseeded = 0
    for it in range(max_iter):
        nk = resp.sum(axis=0)
        empty = nk <= 1e-10 * n
        nk_safe = np.where(empty, 1.0, nk)
        means = (resp.T @ x) / nk_safe[:, None]
        sq = resp.T @ (x * x) / nk_safe[:, None] - means**2
        variances = np.maximum(sq, floor[None, :])
        weights = nk / n
        if np.any(empty):
            taken = np.zeros(n, dtype=bool)
            for k in np.flatnonzero(empty):
                # Re-seed at the worst-explained point; rng breaks exact ties.
                ll_left = np.where(taken, np.inf, log_norm)
                cands = np.flatnonzero(ll_left == ll_left.min())
                pick, rng = rng.choice(cands.size, 1)
                point = cands[pick[0]]
                taken[point] = True
                means[k] = x[point]
                variances[k] = global_var
                weights[k] = 1.0 / n
                reseeded += 1
            weights = weights / weights.sum()
        resp, log_norm = _estep(x, weights, means, variances)
        ll = float(log_norm.sum())
        gain = ll - history[-1]
        history.append(ll)
        if not np.any(empty) and gain < tol:
            break

    assignments = np.argmax(resp, axis=1)
    return GmmModel(weights, means, variances, history[-1], assignments, history, reseeded)


def fit_gmm_1d(
    values,
    K: int = 6,
    rng: RandomStream | None = None,
    tol: float = 1e-6,
    max_iter: int = 200,
    var_floor: float | None = None,
) -> GmmModel:
    return fit_gmm(np.asarray(values, dtype=np.float64)[:, None], K, rng, tol, max_iter, var_floor)


def select_trigger_cluster(gmm: GmmModel, saliency: np.ndarray) -> tuple[int, np.ndarray]:
    """Cluster with the largest mean member saliency.

    Ties go to the smaller cluster, then to the lower component index.
    """
    saliency = np.asarray(saliency, dtype=np.float64)
    best = None
    for k in range(gmm.K):
        members = np.flatnonzero(gmm.assignments == k)
        if members.size == 0:
            continue
        key = (float(saliency[members].mean()), -members.size, -k)
        if best is None or _beats(key, best[0]):
            best = (key, k, members)
    if best is None:
        raise AllClustersEmpty("no cluster has members")
    return best[1], best[2]


def _beats(a, b) -> bool:
    if not math.isclose(a[0], b[0], rel_tol=1e-12, abs_tol=0.0):
        return a[0] > b[0]
    return a[1:] > b[1:]


def aggregate_layers(per_layer: dict[int, np.ndarray]) -> np.ndarray:
    if not per_layer:
        raise EmptyInput("no layers to aggregate")
    return np.unique(np.concatenate([np.asarray(v, dtype=np.int64) for v in per_layer.values()]))


def intersect_backdoor(anom: AnomalySet, filtered: np.ndarray, m: int | None = None) -> np.ndarray:
    if m is not None and m != anom.size:
        raise UniverseMismatch(f"anomaly set covers {anom.size} tokens, filter covers {m}")
    return np.intersect1d(anom.indices, np.asarray(filtered, dtype=np.int64))


def _features(saliency: np.ndarray, cfg: AfmConfig) -> np.ndarray:
    if not cfg.spatial:
        return saliency[:, None]
    if cfg.grid_shape is None:
        raise ValidationError("spatial clustering needs the token grid shape")
    rows, cols = np.divmod(np.arange(saliency.shape[0]), cfg.grid_shape[1])
    return np.column_stack([saliency, rows / cfg.grid_shape[0], cols / cfg.grid_shape[1]])


def deep_layers(stack: AttentionStack, l_mid: int | None) -> list[int]:
    top = stack.L
    start = math.ceil(top / 2) if l_mid is None else l_mid
    layers = [l for l in sorted(stack.layers) if start <= l <= top]
    if not layers:
        raise LayerOutOfRange(f"no layers in range {start}..{top}")
    return layers


def run_afm(
    stack: AttentionStack,
    anom: AnomalySet,
    cfg: AfmConfig | None = None,
    rng: RandomStream | None = None,
) -> FilterSet:
    cfg = cfg or AfmConfig()
    rng = rng or RandomStream.from_seed(0)
    if anom.size != stack.M:
        raise UniverseMismatch(f"{anom.size} scored tokens vs {stack.M} image columns")
    per_layer, chosen, saliencies = {}, {}, {}
    for layer in deep_layers(stack, cfg.l_mid):
        v = token_saliency(mean_attention(stack, layer), stack.image_cols)
        gmm = fit_gmm(_features(v, cfg), cfg.K, rng.child(layer), cfg.tol, cfg.max_iter, cfg.var_floor)
        k_star, members = select_trigger_cluster(gmm, v)
        per_layer[layer], chosen[layer], saliencies[layer] = members, k_star, v
    aggregate = aggregate_layers(per_layer)
    backdoor = intersect_backdoor(anom, aggregate, stack.M)
    return FilterSet(per_layer, aggregate, backdoor, chosen, saliencies)


def save_attention(stack: AttentionStack, path: str | Path) -> None:
    sections = {"header": btf.text_section({"layers": sorted(stack.layers), "T": stack.T, "H": stack.H})}
    sections["image_cols"] = stack.image_cols.astype(np.float64)
    for layer in sorted(stack.layers):
        sections[f"layer_{layer}"] = stack.layers[layer]
    btf.save_sections(path, sections)


def load_attention(path: str | Path) -> AttentionStack:
    sections = btf.load_sections(path)
    if "header" not in sections or "image_cols" not in sections:
        raise CorruptFile("attention file lacks header or image_cols")
    header = btf.read_text_section(sections["header"])
    layers = {}
    for layer in header.get("layers", []):
        key = f"layer_{layer}"
        if key not in sections:
            raise CorruptFile(f"attention file lacks {key}")
        layers[int(layer)] = sections[key]
    return AttentionStack(layers, sections["image_cols"].astype(np.int64))
