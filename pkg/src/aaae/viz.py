"""PNG grids for image batches."""

from __future__ import annotations

import math

import numpy as np
import torch
from PIL import Image


def to_uint8(images) -> np.ndarray:
    """(n, C, H, W) in [-1, 1] -> (n, H, W, C) bytes."""
    x = torch.as_tensor(images).detach().cpu().float().clamp(-1, 1)
    x = ((x + 1) * 127.5).round().to(torch.uint8).numpy()
    return x.transpose(0, 2, 3, 1)


def grid(images, ncol: int = 8, pad: int = 2) -> np.ndarray:
    """Tile images row-major into one (H, W, C) array."""
    imgs = to_uint8(images)
    n, h, w, c = imgs.shape
    nrow = math.ceil(n / ncol)
    out = np.zeros((nrow * (h + pad) + pad, ncol * (w + pad) + pad, c), dtype=np.uint8)
    for i, im in enumerate(imgs):
        r, col = divmod(i, ncol)
        out[pad + r * (h + pad):pad + r * (h + pad) + h, pad + col * (w + pad):pad + col * (w + pad) + w] = im
    return out


def save_grid(images, path, ncol: int = 8) -> None:
    arr = grid(images, ncol)
    if arr.shape[2] == 1:
        arr = arr[..., 0]
    Image.fromarray(arr).save(path)


def interleave_columns(originals, reconstructions) -> torch.Tensor:
    """Alternate original/reconstruction so that, with an even column count,
    odd columns (1st, 3rd, ...) hold originals and even columns their reconstructions."""
    pairs = torch.stack([torch.as_tensor(originals), torch.as_tensor(reconstructions)], dim=1)
    return pairs.reshape(-1, *pairs.shape[2:])
