"""Synthetic stand-ins for the image and text backbones.

The image "backbone" paints each object's learned category signature onto a
feature grid with a Gaussian footprint whose width grows with the object, then
adds 2D sinusoidal positional encodings. Text tokens share one embedding table.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from .numerics import Tensor, gather_rows, matmul
from .scene_synth import SceneSample, TaskSpec


@lru_cache(maxsize=16)
def positional_encoding_2d(H: int, W: int, d: int) -> np.ndarray:
    """(H*W) x d sinusoidal encodings; first half of channels from the row, second from the column."""
    if d % 4:
        raise ValueError(f"positional encoding needs d divisible by 4, got {d}")
    q = d // 4
    freqs = 1.0 / (10000.0 ** (np.arange(q) / q))
    rows = (np.arange(H) + 0.5) / H * 2 * np.pi
    cols = (np.arange(W) + 0.5) / W * 2 * np.pi

    def enc(pos):
        ang = pos[:, None] * freqs[None, :]
        return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)

    r_enc, c_enc = enc(rows), enc(cols)
    pe = np.concatenate([np.repeat(r_enc, W, axis=0), np.tile(c_enc, (H, 1))], axis=1)
    pe.setflags(write=False)
    return pe


def cell_centers(H: int, W: int) -> np.ndarray:
    """(H*W) x 2 array of (cx, cy) cell centers; row i is cell (i // W, i % W)."""
    r, c = np.divmod(np.arange(H * W), W)
    return np.stack([(c + 0.5) / W, (r + 0.5) / H], axis=1)


def object_kernels(boxes: np.ndarray, H: int, W: int) -> np.ndarray:
    """(H*W) x n Gaussian footprints, bandwidth 0.5 * max(w, h) per object."""
    centers = cell_centers(H, W)
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    sigma = 0.5 * np.maximum(boxes[:, 2], boxes[:, 3])
    d2 = ((centers[:, None, :] - boxes[None, :, :2]) ** 2).sum(-1)
    return np.exp(-d2 / (2 * sigma[None, :] ** 2))


def scene_noise(seed: int, H: int, W: int, d: int, scale: float) -> np.ndarray:
    if scale == 0:
        return np.zeros((H * W, d))
    rng = np.random.default_rng([int(seed), 0xFEA7])
    return scale * rng.standard_normal((H * W, d))


def encode_scene(
    scene: SceneSample, params: dict[str, Tensor], H: int, W: int, noise: float = 0.0
) -> Tensor:
    """Feature grid F_I: painted signatures + positional encoding + fixed per-scene noise."""
    sig = params["enc.signatures"]
    d = sig.shape[1]
    kern = Tensor(object_kernels(scene.boxes(), H, W))
    painted = matmul(kern, gather_rows(sig, scene.categories()))
    const = positional_encoding_2d(H, W, d) + scene_noise(scene.seed, H, W, d, noise)
    return painted + Tensor(const)


def encode_task(task: TaskSpec, params: dict[str, Tensor]) -> tuple[Tensor, Tensor]:
    table = params["enc.embedding"]
    n = table.shape[0]
    for tok in (*task.affordance_tokens, *task.context_tokens):
        if not 0 <= tok < n:
            raise IndexError(f"token {tok} outside embedding table of size {n}")
    return gather_rows(table, task.affordance_tokens), gather_rows(table, task.context_tokens)


def init_params(rng: np.random.Generator, n_categories: int, vocab: int, d: int) -> dict[str, np.ndarray]:
    return {
        "enc.signatures": rng.standard_normal((n_categories, d)),
        "enc.embedding": rng.standard_normal((vocab, d)),
    }
