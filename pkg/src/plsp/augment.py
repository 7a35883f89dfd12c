"""Weak and strong input perturbations.

Image grids (H, W, Ch) get flip / pad-and-crop, with an extra cutout square
on the strong branch. Flat vectors get gaussian jitter, with larger jitter
plus bernoulli feature masking on the strong branch. Both pipelines preserve
shape and are deterministic given the generator handed in.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def derive_rng(seed: int, *key: int) -> np.random.Generator:
    """Independent substream for (seed, purpose, epoch, index, branch) tuples."""
    entropy = (seed & 0xFFFF_FFFF_FFFF_FFFF,) + tuple(k & 0xFFFF_FFFF for k in key)
    return np.random.default_rng(np.random.SeedSequence(entropy))


@dataclass
class AugmentSpec:
    kind: str                        # "weak" | "strong"
    flip_prob: float = 0.5
    pad: int = 4
    cutout_size: int | None = None   # strong images; None -> min(H, W) // 4
    vector_jitter_sigma: float = 0.05
    vector_mask_prob: float = 0.2    # strong vectors only

    def __post_init__(self):
        if self.kind not in ("weak", "strong"):
            raise ValueError(f"unknown augmentation kind {self.kind!r}")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ValueError("flip_prob must lie in [0, 1]")
        if not 0.0 <= self.vector_mask_prob <= 1.0:
            raise ValueError("vector_mask_prob must lie in [0, 1]")
        if self.pad < 0 or (self.cutout_size is not None and self.cutout_size < 0):
            raise ValueError("pad and cutout_size must be >= 0")


def weak_spec(**overrides) -> AugmentSpec:
    return AugmentSpec(kind="weak", **overrides)


def strong_spec(**overrides) -> AugmentSpec:
    overrides.setdefault("vector_jitter_sigma", 0.15)
    return AugmentSpec(kind="strong", **overrides)


def _flip_and_crop(x: np.ndarray, spec: AugmentSpec, rng: np.random.Generator) -> np.ndarray:
    h, w = x.shape[:2]
    out = x
    if rng.random() < spec.flip_prob:
        out = out[:, ::-1]
    if spec.pad > 0:
        padded = np.zeros((h + 2 * spec.pad, w + 2 * spec.pad) + x.shape[2:], dtype=x.dtype)
        padded[spec.pad:spec.pad + h, spec.pad:spec.pad + w] = out
        top = rng.integers(0, 2 * spec.pad + 1)
        left = rng.integers(0, 2 * spec.pad + 1)
        out = padded[top:top + h, left:left + w]
    return np.ascontiguousarray(out)


def _cutout(x: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    if size <= 0:
        return x
    h, w = x.shape[:2]
    if size > min(h, w):
        raise ValueError("cutout_size exceeds grid")
    cy = int(rng.integers(0, h))
    cx = int(rng.integers(0, w))
    top = max(0, cy - size // 2)
    left = max(0, cx - size // 2)
    out = x.copy()
    out[top:min(h, top + size), left:min(w, left + size)] = 0.0
    return out


def weak(x: np.ndarray, spec: AugmentSpec, rng: np.random.Generator) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim >= 2:
        return _flip_and_crop(x, spec, rng)
    return x + rng.standard_normal(x.shape) * spec.vector_jitter_sigma


def strong(x: np.ndarray, spec: AugmentSpec, rng: np.random.Generator) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim >= 2:
        out = _flip_and_crop(x, spec, rng)
        size = spec.cutout_size
        if size is None:
            size = min(x.shape[0], x.shape[1]) // 4
        return _cutout(out, size, rng)
    out = x + rng.standard_normal(x.shape) * spec.vector_jitter_sigma
    if spec.vector_mask_prob > 0:
        out = np.where(rng.random(x.shape) < spec.vector_mask_prob, 0.0, out)
    return out


def weak_batch(xs: np.ndarray, spec: AugmentSpec, rng: np.random.Generator) -> np.ndarray:
    xs = np.asarray(xs)
    if xs.ndim == 2:  # flat vectors, one vectorized draw
        return xs + rng.standard_normal(xs.shape) * spec.vector_jitter_sigma
    return np.stack([weak(x, spec, rng) for x in xs])


def strong_batch(xs: np.ndarray, spec: AugmentSpec, rng: np.random.Generator) -> np.ndarray:
    xs = np.asarray(xs)
    if xs.ndim == 2:
        out = xs + rng.standard_normal(xs.shape) * spec.vector_jitter_sigma
        if spec.vector_mask_prob > 0:
            out = np.where(rng.random(xs.shape) < spec.vector_mask_prob, 0.0, out)
        return out
    return np.stack([strong(x, spec, rng) for x in xs])
