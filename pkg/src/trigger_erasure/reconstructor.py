"""Masked-autoencoder trigger erasure.

A patch encoder embeds the visible patches (plus positions) and mixes them with
one self-attention layer. The decoder puts a learned mask token at hidden
positions, adds a projection of the frozen global image embedding to every
token, runs one more attention layer and projects each token back to pixels.
Training uses random exact-count masks; inference masks the suspected trigger
patches and regenerates them from the visible context.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import btf
from .autograd import Node, concat_rows, drop_first_row, gather_rows, mse, scale, scatter_rows, softmax
from .errors import (
    CorruptFile,
    EmptyInput,
    IndexOutOfRange,
    IndivisibleDimensions,
    NonFiniteLoss,
    ShapeMismatch,
    ValidationError,
)
from .numeric import RandomStream

RANDOM_TRAINING = "random-training"
BACKDOOR_SELECTIVE = "backdoor-selective"

PARAM_NAMES = (
    "patch_w", "patch_b", "pos", "enc_q", "enc_k", "enc_v", "enc_o",
    "mask_token", "global_w", "global_b", "dec_q", "dec_k", "dec_v", "dec_o",
    "out_w", "out_b",
)


# ---------------------------------------------------------------------------
# Patches and masks
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PatchGrid:
    patch_size: int
    rows: int
    cols: int
    patches: np.ndarray  # (rows * cols, P * P * 3)


def patchify(image: np.ndarray, patch_size: int) -> PatchGrid:
    h, w, c = image.shape
    p = patch_size
    if h % p or w % p:
        raise IndivisibleDimensions(f"{h}x{w} image is not divisible by patch size {p}")
    rows, cols = h // p, w // p
    patches = image.reshape(rows, p, cols, p, c).transpose(0, 2, 1, 3, 4).reshape(rows * cols, p * p * c)
    return PatchGrid(p, rows, cols, patches)


def unpatchify(grid: PatchGrid) -> np.ndarray:
    p, rows, cols = grid.patch_size, grid.rows, grid.cols
    c = grid.patches.shape[1] // (p * p)
    return grid.patches.reshape(rows, cols, p, p, c).transpose(0, 2, 1, 3, 4).reshape(rows * p, cols * p, c)


def patchify_batch(images: np.ndarray, p: int) -> np.ndarray:
    b, h, w, c = images.shape
    if h % p or w % p:
        raise IndivisibleDimensions(f"{h}x{w} images are not divisible by patch size {p}")
    r, q = h // p, w // p
    return images.reshape(b, r, p, q, p, c).transpose(0, 1, 3, 2, 4, 5).reshape(b, r * q, p * p * c)


def unpatchify_batch(patches: np.ndarray, p: int, rows: int, cols: int) -> np.ndarray:
    b = patches.shape[0]
    c = patches.shape[2] // (p * p)
    return patches.reshape(b, rows, cols, p, p, c).transpose(0, 1, 3, 2, 4, 5).reshape(b, rows * p, cols * p, c)


@dataclass(frozen=True)
class MaskSpec:
    kept: np.ndarray
    masked: np.ndarray
    origin: str
    ratio: float

    @property
    def n_patches(self) -> int:
        return self.kept.size + self.masked.size


def _complement(masked: np.ndarray, n: int) -> np.ndarray:
    keep = np.ones(n, dtype=bool)
    keep[masked] = False
    return np.flatnonzero(keep)


def make_random_mask(n_patches: int, ratio: float, rng: RandomStream) -> MaskSpec:
    """Exactly ``round(ratio * n_patches)`` patches hidden, chosen without replacement."""
    if not (0.0 <= ratio < 1.0):
        raise ValidationError(f"mask ratio must lie in [0, 1), got {ratio}")
    k = int(round(ratio * n_patches))
    masked = np.sort(rng.choice(n_patches, k)[0]) if k else np.zeros(0, dtype=np.int64)
    return MaskSpec(_complement(masked, n_patches), masked, RANDOM_TRAINING, k / n_patches)


def make_backdoor_mask(backdoor, n_patches: int) -> MaskSpec:
    # Tokens and patches share one grid, so the best pixel mask hides exactly
    # the footprints of the suspected tokens.
    masked = np.unique(np.asarray(backdoor, dtype=np.int64))
    if masked.size and (masked.min() < 0 or masked.max() >= n_patches):
        raise IndexOutOfRange(f"backdoor index outside 0..{n_patches - 1}")
    return MaskSpec(_complement(masked, n_patches), masked, BACKDOOR_SELECTIVE, masked.size / n_patches)


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


@dataclass
class DecoderParams:
    patch_size: int
    rows: int
    cols: int
    d_p: int
    d_e: int
    arrays: dict[str, np.ndarray]

    @property
    def n_patches(self) -> int:
        return self.rows * self.cols

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * 3

    def copy(self) -> "DecoderParams":
        return replace(self, arrays={k: v.copy() for k, v in self.arrays.items()})

    def header(self) -> dict:
        return {"patch_size": self.patch_size, "rows": self.rows, "cols": self.cols, "d_p": self.d_p, "d_e": self.d_e}


def init_params(
    patch_size: int, rows: int, cols: int, d_p: int, d_e: int, rng: RandomStream
) -> DecoderParams:
    pd = patch_size * patch_size * 3
    n = rows * cols
    shapes = {
        "patch_w": ((pd, d_p), 1.0 / math.sqrt(pd)),
        "patch_b": ((d_p,), 0.0),
        "pos": ((n, d_p), 0.1),
        "enc_q": ((d_p, d_p), 0.5 / math.sqrt(d_p)),
        "enc_k": ((d_p, d_p), 0.5 / math.sqrt(d_p)),
        "enc_v": ((d_p, d_p), 0.5 / math.sqrt(d_p)),
        "enc_o": ((d_p, d_p), 0.5 / math.sqrt(d_p)),
        "mask_token": ((d_p,), 0.1),
        "global_w": ((d_e, d_p), 0.0),
        "global_b": ((d_p,), 0.0),
        "dec_q": ((d_p, d_p), 0.5 / math.sqrt(d_p)),
        "dec_k": ((d_p, d_p), 0.5 / math.sqrt(d_p)),
        "dec_v": ((d_p, d_p), 0.5 / math.sqrt(d_p)),
        "dec_o": ((d_p, d_p), 0.5 / math.sqrt(d_p)),
        "out_w": ((d_p, pd), 0.5 / math.sqrt(d_p)),
        "out_b": ((pd,), 0.0),
    }
    arrays = {}
    for i, name in enumerate(PARAM_NAMES):
        shape, std = shapes[name]
        size = int(np.prod(shape))
        arrays[name] = rng.child(i).normal(size)[0].reshape(shape) * std if std else np.zeros(shape)
    return DecoderParams(patch_size, rows, cols, d_p, d_e, arrays)


def save_params(params: DecoderParams, path: str | Path, hyper: dict | None = None) -> None:
    sections = {"header": btf.text_section({**params.header(), "hyper": hyper or {}})}
    for name in PARAM_NAMES:
        sections[name] = params.arrays[name]
    btf.save_sections(path, sections)


def load_params(path: str | Path) -> DecoderParams:
    sections = btf.load_sections(path)
    if "header" not in sections:
        raise CorruptFile("decoder file lacks a header section")
    head = btf.read_text_section(sections["header"])
    missing = [n for n in PARAM_NAMES if n not in sections]
    if missing:
        raise CorruptFile(f"decoder file lacks sections {missing}")
    return DecoderParams(
        head["patch_size"], head["rows"], head["cols"], head["d_p"], head["d_e"],
        {n: sections[n] for n in PARAM_NAMES},
    )


# ---------------------------------------------------------------------------
# Forward pass
# ---------------------------------------------------------------------------


def _attention(z: Node, q: Node, k: Node, v: Node, o: Node, d: int) -> Node:
    logits = scale((z @ q) @ (z @ k).T, 1.0 / math.sqrt(d))
    return (softmax(logits) @ (z @ v)) @ o


def _graph(params: DecoderParams, e: np.ndarray, patches: np.ndarray, kept: np.ndarray):
    """Build the forward graph for a batch; returns (output node, leaf nodes)."""
    leaves = {name: Node(params.arrays[name]) for name in PARAM_NAMES}
    b, n, _ = patches.shape
    d = params.d_p
    visible = np.take_along_axis(patches, kept[:, :, None], axis=1)
    pos_b = leaves["pos"] + np.zeros((b, n, d))
    z = Node(visible) @ leaves["patch_w"] + leaves["patch_b"] + gather_rows(pos_b, kept)
    g = z + _attention(z, leaves["enc_q"], leaves["enc_k"], leaves["enc_v"], leaves["enc_o"], d)

    glob = Node(e[:, None, :]) @ leaves["global_w"] + leaves["global_b"]
    u = scatter_rows(g, kept, n, leaves["mask_token"]) + leaves["pos"] + glob
    # A summary token joins every decoder pass, so attention always has a
    # common target even when nothing is masked. Its output is discarded.
    u = concat_rows(glob + leaves["mask_token"], u)
    y = u + _attention(u, leaves["dec_q"], leaves["dec_k"], leaves["dec_v"], leaves["dec_o"], d)
    out = drop_first_row(y) @ leaves["out_w"] + leaves["out_b"]
    return out, leaves


def _check(params: DecoderParams, e: np.ndarray, patches: np.ndarray):
    if patches.shape[1:] != (params.n_patches, params.patch_dim):
        raise ShapeMismatch(
            f"patches {patches.shape[1:]} do not match decoder grid "
            f"({params.n_patches}, {params.patch_dim})"
        )
    if e.shape != (patches.shape[0], params.d_e):
        raise ShapeMismatch(f"global embedding has shape {e.shape}, expected (B, {params.d_e})")


def reconstruct_batch(params: DecoderParams, e: np.ndarray, images: np.ndarray, kept: np.ndarray) -> np.ndarray:
    patches = patchify_batch(images, params.patch_size)
    e = np.atleast_2d(e)
    _check(params, e, patches)
    out, _ = _graph(params, e, patches, np.atleast_2d(kept))
    return unpatchify_batch(out.value, params.patch_size, params.rows, params.cols)


def forward_reconstruct(params: DecoderParams, e: np.ndarray, image: np.ndarray, mask: MaskSpec) -> np.ndarray:
    """Reconstruction of ``image`` from its kept patches and the global embedding.

    Hidden patches never enter the patch encoder. The result is not clamped.
    """
    if mask.n_patches != params.n_patches:
        raise ShapeMismatch(f"mask covers {mask.n_patches} patches, decoder has {params.n_patches}")
    return reconstruct_batch(params, np.asarray(e)[None], image[None], mask.kept[None])[0]


def loss_and_gradients(
    params: DecoderParams,
    e: np.ndarray,
    images: np.ndarray,
    kept: np.ndarray,
    masked_only: bool = False,
) -> tuple[float, dict[str, np.ndarray]]:
    """Full-image mean squared reconstruction error and its parameter gradients.

    Accepts a single image (H, W, 3) with kept (k,) and e (d_e,), or a batch.
    """
    if images.ndim == 3:
        images, kept, e = images[None], np.asarray(kept)[None], np.asarray(e)[None]
    patches = patchify_batch(images, params.patch_size)
    _check(params, e, patches)
    out, leaves = _graph(params, e, patches, kept)
    weight = None
    if masked_only:
        weight = np.ones(patches.shape[:2] + (1,))
        np.put_along_axis(weight, kept[:, :, None], 0.0, axis=1)
        weight = np.broadcast_to(weight, patches.shape)
    loss = mse(out, patches, weight)
    if not np.isfinite(loss.value):
        raise NonFiniteLoss(f"reconstruction loss is {float(loss.value)}")
    loss.backward()
    grads = {name: (leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value)) for name, leaf in leaves.items()}
    return float(loss.value), grads


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    steps: int = 200
    batch_size: int = 8
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    mask_min: float = 0.05
    mask_max: float = 0.25
    masked_only: bool = False
    d_p: int = 64


@dataclass
class TrainState:
    params: DecoderParams
    first_moment: dict[str, np.ndarray]
    second_moment: dict[str, np.ndarray]
    step: int = 0
    history: list[tuple[int, float, float]] = field(default_factory=list)

    @property
    def losses(self) -> list[float]:
        return [h[2] for h in self.history]


def train_decoder(
    images: np.ndarray,
    embeddings: np.ndarray,
    cfg: TrainConfig,
    rng: RandomStream,
    patch_size: int = 8,
    params: DecoderParams | None = None,
) -> TrainState:
    """Adam on the reconstruction loss with per-step mask ratios in [mask_min, mask_max].

    ``embeddings`` are the frozen global embeddings of ``images`` (one row each);
    they are computed once by the caller and never receive gradients.
    """
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or images.shape[0] == 0:
        raise EmptyInput("training needs a non-empty (N, H, W, 3) image stack")
    n_img, h, w, _ = images.shape
    if params is None:
        params = init_params(patch_size, h // patch_size, w // patch_size, cfg.d_p, embeddings.shape[1], rng.child(0))
    params = params.copy()
    state = TrainState(
        params,
        {k: np.zeros_like(v) for k, v in params.arrays.items()},
        {k: np.zeros_like(v) for k, v in params.arrays.items()},
    )
    n = params.n_patches
    batch = min(cfg.batch_size, n_img)
    for step in range(1, cfg.steps + 1):
        srng = rng.child(1_000_000 + step)
        u, srng = srng.uniform(1)
        ratio = cfg.mask_min + (cfg.mask_max - cfg.mask_min) * float(u[0])
        pick, srng = srng.choice(n_img, batch)
        kept = np.stack([make_random_mask(n, ratio, srng.child(i)).kept for i in range(batch)])
        loss, grads = loss_and_gradients(params, embeddings[pick], images[pick], kept, cfg.masked_only)
        adam_update(state, grads, cfg)
        state.history.append((step, (n - kept.shape[1]) / n, loss))
    return state


def adam_update(state: TrainState, grads: dict[str, np.ndarray], cfg: TrainConfig) -> None:
    state.step += 1
    t = state.step
    for name, g in grads.items():
        m = state.first_moment[name] = cfg.beta1 * state.first_moment[name] + (1 - cfg.beta1) * g
        v = state.second_moment[name] = cfg.beta2 * state.second_moment[name] + (1 - cfg.beta2) * g * g
        m_hat = m / (1 - cfg.beta1**t)
        v_hat = v / (1 - cfg.beta2**t)
        state.params.arrays[name] = state.params.arrays[name] - cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)


def write_loss_csv(state: TrainState, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step", "mask_ratio", "loss"])
        for step, ratio, loss in state.history:
            writer.writerow([step, f"{ratio:.6f}", repr(float(loss))])


# ---------------------------------------------------------------------------
# Inference-time erasure and its measurement
# ---------------------------------------------------------------------------


def purify(
    params: DecoderParams,
    hook: Callable[[np.ndarray], np.ndarray],
    image: np.ndarray,
    backdoor: Sequence[int],
    unconditional: bool = False,
) -> np.ndarray:
    """Regenerate the suspected trigger patches; clean inputs pass through untouched."""
    backdoor = np.asarray(backdoor, dtype=np.int64)
    if backdoor.size == 0 and not unconditional:
        return image
    mask = make_backdoor_mask(backdoor, params.n_patches)
    return forward_reconstruct(params, hook(image), image, mask)


def zero_fill(image: np.ndarray, masked: Sequence[int], patch_size: int) -> np.ndarray:
    grid = patchify(image, patch_size)
    patches = grid.patches.copy()
    patches[np.asarray(masked, dtype=np.int64)] = 0.0
    return unpatchify(PatchGrid(patch_size, grid.rows, grid.cols, patches))


def trigger_residual(image: np.ndarray, template: np.ndarray, region: tuple[int, int]) -> float:
    """Normalized cross-correlation of ``template`` with the image window at ``region``.

    ``region`` is the (row, col) of the window's top-left corner. A window or
    template without variance has correlation 0 by convention.
    """
    y0, x0 = region
    th, tw = template.shape[:2]
    if y0 < 0 or x0 < 0 or y0 + th > image.shape[0] or x0 + tw > image.shape[1]:
        raise ValidationError("trigger region falls outside the image")
    window = image[y0 : y0 + th, x0 : x0 + tw].astype(np.float64).ravel()
    ref = np.broadcast_to(template, image[y0 : y0 + th, x0 : x0 + tw].shape).astype(np.float64).ravel()
    a, b = window - window.mean(), ref - ref.mean()
    denom = math.sqrt(float(a @ a) * float(b @ b))
    if denom <= 1e-12:
        return 0.0
    return float(a @ b) / denom
