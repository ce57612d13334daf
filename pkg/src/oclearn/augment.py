"""Stochastic augmentation for replayed exemplars.

Builds the student-side batch: positions flagged as exemplars are
re-rendered through random horizontal flips, per-channel affine
brightness/contrast (plus saturation for 3-channel rasters) and separable
Gaussian blur; fresh-stream positions pass through untouched. Vector
payloads get isotropic Gaussian noise with optional sign-preserving
scaling instead. Single-channel rasters simply skip the saturation term.

Sampled parameters that land exactly on the identity (zero shift, unit
factor) skip their transform, so a policy with all-zero strengths returns
inputs bit-for-bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ._validation import as_generator, check_fraction
from .datasets import Sample

__all__ = ["AugmentPolicy", "augment_image", "augment_features", "make_contrastive_batch"]

_LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class AugmentPolicy:
    """Strengths and probabilities of the exemplar augmentation pipeline.

    Jitters are half-widths of symmetric ranges: brightness shifts by
    ``U(-b, b)``, contrast and saturation scale by ``1 + U(-c, c)``.
    ``feature_scale_jitter`` must stay below 1 so the factor keeps its
    sign. ``seed`` feeds the fallback generator used when no explicit rng
    is handed to :func:`make_contrastive_batch`.
    """

    flip_probability: float = 0.5
    brightness_jitter: float = 0.4
    contrast_jitter: float = 0.4
    saturation_jitter: float = 0.4
    blur_probability: float = 0.5
    blur_sigma_range: tuple[float, float] = (0.1, 2.0)
    feature_noise_sigma: float = 0.1
    feature_scale_jitter: float = 0.0
    seed: int = 0

    def __post_init__(self):
        check_fraction(self.flip_probability, "flip_probability")
        check_fraction(self.blur_probability, "blur_probability")
        for name in ("brightness_jitter", "contrast_jitter", "saturation_jitter",
                     "feature_noise_sigma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not 0.0 <= self.feature_scale_jitter < 1.0:
            raise ValueError("feature_scale_jitter must lie in [0, 1)")
        lo, hi = self.blur_sigma_range
        if not 0.0 < lo <= hi:
            raise ValueError(f"blur_sigma_range must satisfy 0 < lo <= hi, got {self.blur_sigma_range}")
        object.__setattr__(self, "blur_sigma_range", (float(lo), float(hi)))

    @classmethod
    def identity(cls) -> "AugmentPolicy":
        """Policy under which every augmentation is a no-op."""
        return cls(flip_probability=0.0, brightness_jitter=0.0, contrast_jitter=0.0,
                   saturation_jitter=0.0, blur_probability=0.0,
                   feature_noise_sigma=0.0, feature_scale_jitter=0.0)

    def rng(self) -> np.random.Generator:
        return np.random.default_rng(self.seed)


def gaussian_blur(image: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with kernel radius ``ceil(3 * sigma)``.

    Boundaries reflect at the edge (half-sample symmetric), which keeps the
    total mass of each channel unchanged.
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    radius = math.ceil(3.0 * sigma)
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-(offsets ** 2) / (2.0 * sigma * sigma))
    kernel /= kernel.sum()
    out = image.astype(np.float64, copy=True)
    for axis in (0, 1):
        pad = [(0, 0)] * out.ndim
        pad[axis] = (radius, radius)
        padded = np.pad(out, pad, mode="symmetric")
        acc = np.zeros_like(out)
        length = out.shape[axis]
        for tap, weight in enumerate(kernel):
            sl = [slice(None)] * out.ndim
            sl[axis] = slice(tap, tap + length)
            acc += weight * padded[tuple(sl)]
        out = acc
    return out


def _check_image(img) -> np.ndarray:
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 3:
        raise ValueError(f"image payload must be (H, W, C), got shape {arr.shape}")
    if arr.size == 0:
        raise ValueError("image payload is empty")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError("image channel values must lie in [0, 1]")
    return arr


def augment_image(img, policy: AugmentPolicy, rng) -> np.ndarray:
    """Randomly flip, jitter colours and blur one raster payload.

    Output stays in ``[0, 1]`` with the input's shape. The label-free
    geometry of the draw order is fixed: flip coin, brightness shift,
    contrast factor, saturation factor (3-channel only), blur coin, then
    blur sigma only when the coin lands.
    """
    arr = _check_image(img)
    gen = as_generator(rng)
    out = arr
    changed = False
    if gen.random() < policy.flip_probability:
        out = out[:, ::-1, :]
        changed = True
    shift = gen.uniform(-policy.brightness_jitter, policy.brightness_jitter)
    contrast = 1.0 + gen.uniform(-policy.contrast_jitter, policy.contrast_jitter)
    saturation = 1.0
    if arr.shape[2] == 3:
        saturation = 1.0 + gen.uniform(-policy.saturation_jitter, policy.saturation_jitter)
    if shift != 0.0:
        out = out + shift
        changed = True
    if contrast != 1.0:
        mean = out.mean(axis=(0, 1), keepdims=True)
        out = mean + contrast * (out - mean)
        changed = True
    if saturation != 1.0:
        gray = (out * _LUMA).sum(axis=2, keepdims=True)
        out = gray + saturation * (out - gray)
        changed = True
    if changed:
        out = np.clip(out, 0.0, 1.0)
    if gen.random() < policy.blur_probability:
        sigma = gen.uniform(*policy.blur_sigma_range)
        out = np.clip(gaussian_blur(out, sigma), 0.0, 1.0)
        changed = True
    return out if changed else arr


def augment_features(vec, policy: AugmentPolicy, rng) -> np.ndarray:
    """Vector-payload stand-in: sign-preserving scale plus Gaussian noise."""
    arr = np.asarray(vec, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"feature payload must be 1-D, got shape {arr.shape}")
    gen = as_generator(rng)
    out = arr
    if policy.feature_scale_jitter > 0.0:
        out = out * (1.0 + gen.uniform(-policy.feature_scale_jitter,
                                       policy.feature_scale_jitter))
    if policy.feature_noise_sigma > 0.0:
        out = out + gen.normal(0.0, policy.feature_noise_sigma, size=arr.shape)
    return out


def make_contrastive_batch(
    batch: Sequence[Sample],
    exemplar_mask: Sequence[bool],
    policy: AugmentPolicy,
    rng=None,
) -> list[Sample]:
    """Augment the exemplar positions of a batch, copy the rest unchanged.

    Labels, ordering and arrival indices are preserved. Without an explicit
    ``rng`` the policy's own seed drives the draws.
    """
    if len(batch) != len(exemplar_mask):
        raise ValueError(
            f"batch has {len(batch)} samples but mask has {len(exemplar_mask)} entries"
        )
    gen = as_generator(rng) if rng is not None else policy.rng()
    out: list[Sample] = []
    for sample, flagged in zip(batch, exemplar_mask):
        if not flagged:
            out.append(sample)
            continue
        if sample.payload.ndim == 3:
            payload = augment_image(sample.payload, policy, gen)
        else:
            payload = augment_features(sample.payload, policy, gen)
        out.append(Sample(payload, sample.label, sample.arrival_index))
    return out
