"""Interpolation and attribute arithmetic in the encoder's code space."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from aaae.errors import CohortError, InputError


@dataclass
class AttributeVector:
    name: str
    direction: torch.Tensor
    n_positive: int
    n_negative: int

    def __neg__(self) -> AttributeVector:
        return AttributeVector(f"not-{self.name}", -self.direction, self.n_negative, self.n_positive)


def _single(x):
    return x if x.dim() == 4 or x.dim() == 2 else x.unsqueeze(0)


def _eval(model):
    was = model.training
    model.eval()
    return was


def interpolation_codes(c_x: torch.Tensor, c_y: torch.Tensor, steps: int) -> torch.Tensor:
    if steps < 2:
        raise InputError("steps must be >= 2")
    t = torch.linspace(0, 1, steps, dtype=c_x.dtype)[:, None]
    return (1 - t) * c_x.reshape(1, -1) + t * c_y.reshape(1, -1)


@torch.no_grad()
def interpolate(model, x: torch.Tensor, y: torch.Tensor, steps: int = 8, return_codes=False):
    """Decode ``(1 - t) E(x) + t E(y)`` for ``t`` evenly spaced in [0, 1]."""
    was = _eval(model)
    try:
        c = model.encode(torch.cat([_single(x), _single(y)]))
        codes = interpolation_codes(c[0], c[1], steps)
        images = model.decode(codes)
    finally:
        model.train(was)
    return (images, codes) if return_codes else images


def attribute_vector(codes, labels, name: str = "attribute") -> AttributeVector:
    """Mean code of the positive cohort minus mean code of the negative cohort."""
    codes = torch.as_tensor(codes)
    labels = np.asarray(labels).astype(bool).reshape(-1)
    if len(labels) != len(codes):
        raise InputError("labels must align with codes")
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise CohortError(f"attribute {name!r} needs both positive and negative samples")
    mask = torch.from_numpy(labels)
    direction = codes[mask].mean(dim=0) - codes[~mask].mean(dim=0)
    return AttributeVector(name, direction, n_pos, n_neg)


@torch.no_grad()
def encode_all(model, images: torch.Tensor, chunk=500) -> torch.Tensor:
    was = _eval(model)
    try:
        return torch.cat([model.encode(images[i:i + chunk]) for i in range(0, len(images), chunk)])
    finally:
        model.train(was)


def shifted_codes(codes: torch.Tensor, attr: AttributeVector, strength: float = 1.0) -> torch.Tensor:
    if attr.direction.shape[-1] != codes.shape[-1]:
        raise InputError("attribute direction does not match the code dimension")
    return codes + strength * attr.direction


@torch.no_grad()
def manipulate(model, x: torch.Tensor, attr: AttributeVector, strength: float = 1.0) -> torch.Tensor:
    """Decode ``E(x) + strength * direction``."""
    was = _eval(model)
    try:
        return model.decode(shifted_codes(model.encode(_single(x)), attr, strength))
    finally:
        model.train(was)
