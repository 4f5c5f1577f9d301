"""On-the-fly training augmentation: rotation, zoom, shift, brightness.

Geometry is composed into a single affine map about the image center and
resampled once (bilinear).  The forward map is::

    p' = c + zoom * R(rotation) @ (p - c) + (shift_h, shift_v)

i.e. rotate, then zoom, then shift; brightness scaling comes last and acts
on the un-normalized [0, 1] pixel scale.  Positive rotation turns the image
counter-clockwise as displayed, positive shifts move content right/down and
zoom > 1 magnifies.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import _kernels


class FillPolicy(str, Enum):
    NEAREST = "nearest"
    CONSTANT_BLACK = "constant_black"


@dataclass(frozen=True)
class AugmentationConfig:
    rotation_degrees: tuple[float, float] = (-5.0, 5.0)
    zoom_fraction: float = 0.15
    shift_fraction_h: float = 0.10
    shift_fraction_v: float = 0.10
    brightness_range: tuple[float, float] = (0.70, 1.10)
    fill_policy: FillPolicy = FillPolicy.NEAREST

    def __post_init__(self):
        rot = tuple(float(v) for v in self.rotation_degrees)
        bright = tuple(float(v) for v in self.brightness_range)
        object.__setattr__(self, "rotation_degrees", rot)
        object.__setattr__(self, "brightness_range", bright)
        object.__setattr__(self, "fill_policy", FillPolicy(self.fill_policy))
        if len(rot) != 2 or rot[0] > rot[1]:
            raise ValueError(f"rotation_degrees must be an interval (lo <= hi), got {rot}")
        if len(bright) != 2 or bright[0] > bright[1] or bright[0] < 0:
            raise ValueError(f"brightness_range must be a non-negative interval, got {bright}")
        for name in ("zoom_fraction", "shift_fraction_h", "shift_fraction_v"):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0:
                raise ValueError(f"{name} must lie in [0, 1), got {v}")

    @classmethod
    def identity(cls) -> "AugmentationConfig":
        return cls((0.0, 0.0), 0.0, 0.0, 0.0, (1.0, 1.0))

    @property
    def zoom_range(self) -> tuple[float, float]:
        return 1.0 - self.zoom_fraction, 1.0 + self.zoom_fraction


@dataclass(frozen=True)
class AugmentationSample:
    rotation: float = 0.0
    zoom: float = 1.0
    shift_h: float = 0.0
    shift_v: float = 0.0
    brightness: float = 1.0

    def is_identity(self) -> bool:
        return (self.rotation, self.zoom, self.shift_h, self.shift_v, self.brightness) == (0.0, 1.0, 0.0, 0.0, 1.0)

    def is_geometric_identity(self) -> bool:
        return (self.rotation, self.zoom, self.shift_h, self.shift_v) == (0.0, 1.0, 0.0, 0.0)


def sample_params(config: AugmentationConfig, rng: np.random.Generator, image_hw=(256, 256)) -> AugmentationSample:
    """Draw one parameter set; every field uniform and independent.

    Shifts are returned in pixels for an image of size ``image_hw``.
    Exactly five uniforms are consumed per call, so generator state
    advances identically whatever the config.
    """
    h, w = image_hw
    u = rng.random(5)

    def lerp(lo, hi, t):
        return lo if lo == hi else lo + (hi - lo) * t

    zlo, zhi = config.zoom_range
    return AugmentationSample(
        rotation=float(lerp(*config.rotation_degrees, u[0])),
        zoom=float(lerp(zlo, zhi, u[1])),
        shift_h=float(lerp(-config.shift_fraction_h * w, config.shift_fraction_h * w, u[2])),
        shift_v=float(lerp(-config.shift_fraction_v * h, config.shift_fraction_v * h, u[3])),
        brightness=float(lerp(*config.brightness_range, u[4])),
    )


def inverse_matrix(sample: AugmentationSample, height: int, width: int) -> np.ndarray:
    """2x3 output->source map for the geometric part of ``sample``."""
    cx, cy = (width - 1) / 2.0, (height - 1) / 2.0
    t = math.radians(sample.rotation)
    cos, sin = math.cos(t), math.sin(t)
    # forward linear part is zoom * [[cos, sin], [-sin, cos]]; its inverse is the transpose / zoom
    inv = np.array([[cos, -sin], [sin, cos]]) / sample.zoom
    offset = np.array([cx, cy]) - inv @ np.array([cx + sample.shift_h, cy + sample.shift_v])
    return np.hstack([inv, offset[:, None]])


def apply(image: np.ndarray, sample: AugmentationSample, fill_policy=FillPolicy.NEAREST) -> np.ndarray:
    """Apply ``sample`` to an (H, W, C) image; output has the same shape."""
    img = np.asarray(image, dtype=np.float32)
    if sample.is_identity():
        return img.copy()
    h, w = img.shape[:2]
    if sample.is_geometric_identity():
        out = img.copy()
    else:
        mode = _kernels.FILL_NEAREST if FillPolicy(fill_policy) is FillPolicy.NEAREST else _kernels.FILL_CONSTANT
        squeeze = img.ndim == 2
        src = img[..., None] if squeeze else img
        out = _kernels.warp_affine(src, inverse_matrix(sample, h, w), h, w, mode, 0.0)
        if squeeze:
            out = out[..., 0]
    if sample.brightness != 1.0:
        out = out * np.float32(sample.brightness)
    return out


def derived_rng(global_seed: int, *keys: int) -> np.random.Generator:
    """Independent generator keyed by ``(global_seed, *keys)``.

    The trainer keys augmentation by (seed, epoch, sample index), so results do
    not depend on how samples are spread across loader workers.
    """
    return np.random.default_rng(np.random.SeedSequence([int(global_seed), *(int(k) for k in keys)]))
