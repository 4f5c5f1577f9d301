"""Synthetic panoramic-radiograph-like images with a known age signal.

Each image shows two dental arches of bright teeth.  Three quantities
depend on age:

* the pulp/tooth brightness ratio falls linearly from ``pulp_ratio_young``
  at the bottom of the age range to ``pulp_ratio_old`` at the top,
* the density of dark speckles in the dentin rises linearly,
* teeth are lost one by one above ``tooth_loss_age``.

Everything else (arch placement, tooth size, speckle positions) is random
nuisance drawn from a per-record generator, so record ``i`` of a given seed
is the same no matter how many records are generated.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import InsufficientData

TEETH_PER_ARCH = 16


@dataclass(frozen=True)
class SynthConfig:
    count: int = 600
    age_range: tuple[float, float] = (8.0, 68.0)
    image_size: tuple[int, int] = (256, 256)
    noise_sigma: float = 0.03
    seed: int = 0
    tooth_brightness: float = 0.85
    pulp_ratio_young: float = 0.90
    pulp_ratio_old: float = 0.30
    texture_density_young: float = 0.02
    texture_density_old: float = 0.25
    tooth_loss_age: float = 40.0
    years_per_lost_tooth: float = 4.0

    def __post_init__(self):
        if self.count < 1:
            raise ValueError("count must be >= 1")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        lo, hi = self.age_range
        if not 0 < lo < hi:
            raise ValueError(f"bad age_range {self.age_range}")
        for r in (self.pulp_ratio_young, self.pulp_ratio_old):
            if not 0 < r <= 1:
                raise ValueError("pulp brightness ratios must lie in (0, 1]")

    def pulp_ratio(self, age: float) -> float:
        lo, hi = self.age_range
        t = (age - lo) / (hi - lo)
        return self.pulp_ratio_young + (self.pulp_ratio_old - self.pulp_ratio_young) * t

    def texture_density(self, age: float) -> float:
        lo, hi = self.age_range
        t = (age - lo) / (hi - lo)
        return self.texture_density_young + (self.texture_density_old - self.texture_density_young) * t

    def teeth_lost(self, age: float) -> int:
        if age <= self.tooth_loss_age:
            return 0
        return min(2 * TEETH_PER_ARCH - 4, int((age - self.tooth_loss_age) // self.years_per_lost_tooth))


@dataclass
class SynthRecord:
    image: np.ndarray
    age_years: float
    feature_vector: dict = field(default_factory=dict)
    pulp_mask: np.ndarray | None = field(default=None, repr=False)


@dataclass(frozen=True)
class Latents:
    """Nuisance draws for one image (geometry and speckle placement)."""

    offset_x: float
    offset_y: float
    curvature: float
    tooth_half_width: float
    tooth_half_length: float
    lost_order: tuple
    speckle_u: np.ndarray
    exposure_z: float
    noise_seed: int


def draw_latents(config: SynthConfig, rng: np.random.Generator) -> Latents:
    h, w = config.image_size
    return Latents(
        offset_x=float(rng.uniform(-0.03, 0.03) * w),
        offset_y=float(rng.uniform(-0.03, 0.03) * h),
        curvature=float(rng.uniform(0.8, 1.2)),
        tooth_half_width=float(rng.uniform(0.021, 0.025) * w),
        tooth_half_length=float(rng.uniform(0.075, 0.09) * h),
        lost_order=tuple(int(i) for i in rng.permutation(2 * TEETH_PER_ARCH)),
        speckle_u=rng.random((h, w)).astype(np.float32),
        exposure_z=float(rng.standard_normal()),
        noise_seed=int(rng.integers(0, 2**31 - 1)),
    )


def render(age: float, latents: Latents, config: SynthConfig):
    """Render one image; returns (image in [0, 1], pulp mask, feature dict)."""
    h, w = config.image_size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float32)
    cx = (w - 1) / 2.0 + latents.offset_x
    cy = (h - 1) / 2.0 + latents.offset_y
    bend = 0.0020 * latents.curvature * 256.0 / w

    def occlusal(x):
        return cy - bend * (x - cx) ** 2

    img = 0.06 + 0.06 * (yy / h)
    jaw = np.abs(yy - occlusal(xx)) < 0.30 * h
    jaw &= np.abs(xx - cx) < 0.46 * w
    img = np.where(jaw, 0.30, img).astype(np.float32)

    tooth_mask = np.zeros((h, w), dtype=bool)
    pulp_mask = np.zeros((h, w), dtype=bool)
    lost = set(latents.lost_order[: config.teeth_lost(age)])
    span = 0.80 * w
    spacing = span / TEETH_PER_ARCH
    hw_, hl = latents.tooth_half_width, latents.tooth_half_length
    for arch, direction in enumerate((-1.0, 1.0)):
        for k in range(TEETH_PER_ARCH):
            if arch * TEETH_PER_ARCH + k in lost:
                continue
            x0 = cx - span / 2 + (k + 0.5) * spacing
            y_occ = occlusal(x0)
            # tooth axis follows the arch normal
            slope = -2.0 * bend * (x0 - cx)
            theta = math.atan(slope)
            ax, ay = -math.sin(theta) * direction, math.cos(theta) * direction
            tx, ty = x0 + ax * (hl + 2.0), y_occ + ay * (hl + 2.0)
            du = (xx - tx) * ax + (yy - ty) * ay
            dv = (xx - tx) * ay - (yy - ty) * ax
            tooth = (du / hl) ** 2 + (dv / hw_) ** 2 <= 1.0
            pulp = ((du - 0.15 * hl) / (0.55 * hl)) ** 2 + (dv / (0.38 * hw_)) ** 2 <= 1.0
            tooth_mask |= tooth
            pulp_mask |= pulp & tooth

    ratio = config.pulp_ratio(age)
    tb = config.tooth_brightness
    density = config.texture_density(age)
    dentin = tooth_mask & ~pulp_mask
    speckle = dentin & (latents.speckle_u < density)
    img = np.where(tooth_mask, tb, img)
    img = np.where(speckle, 0.6 * tb, img)
    img = np.where(pulp_mask, tb * ratio, img).astype(np.float32)

    exposure = 1.0 + config.noise_sigma * latents.exposure_z
    img = img * np.float32(exposure)
    if config.noise_sigma > 0:
        noise_rng = np.random.default_rng(latents.noise_seed)
        img = img + noise_rng.normal(0.0, config.noise_sigma, size=img.shape).astype(np.float32)
    img = np.clip(img, 0.0, 1.0).astype(np.float32)

    features = {
        "pulp_ratio": ratio,
        "pulp_brightness": tb * ratio * exposure,
        "mean_pulp_brightness": float(img[pulp_mask].mean()) if pulp_mask.any() else float("nan"),
        "texture_density": density,
        "tooth_count": 2 * TEETH_PER_ARCH - len(lost),
        "exposure": exposure,
    }
    return img, pulp_mask, features


def _record_rngs(config: SynthConfig):
    for child in np.random.SeedSequence(config.seed).spawn(config.count):
        yield np.random.default_rng(child)


def generate(config: SynthConfig, out_dir=None) -> list[SynthRecord]:
    """Generate ``config.count`` records; with ``out_dir`` also write PNGs and ``manifest.csv``."""
    lo, hi = config.age_range
    records = []
    for rng in _record_rngs(config):
        age = round(float(rng.uniform(lo, hi)), 2)
        latents = draw_latents(config, rng)
        img, mask, feats = render(age, latents, config)
        records.append(SynthRecord(img, age, feats, mask))
    if out_dir is not None:
        write_dataset(records, out_dir)
    return records


def write_dataset(records, out_dir) -> Path:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    manifest = out / "manifest.csv"
    with manifest.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["image_path", "age_years", "subject_id"])
        for i, rec in enumerate(records):
            rel = f"images/synth_{i:05d}.png"
            to_png(rec.image).save(out / rel, optimize=False)
            writer.writerow([rel, repr(rec.age_years), f"synth-{i:05d}"])
    return manifest


def to_png(image: np.ndarray) -> Image.Image:
    return Image.fromarray(np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8), mode="L")


def oracle_fit(records, ages=None) -> float:
    """R² of the least-squares affine map from mean pulp brightness to age."""
    if len(records) < 50:
        raise InsufficientData(f"oracle_fit needs at least 50 records, got {len(records)}")
    x = np.array([r.feature_vector["mean_pulp_brightness"] for r in records], dtype=np.float64)
    y = np.array([r.age_years for r in records] if ages is None else ages, dtype=np.float64)
    design = np.column_stack([x, np.ones_like(x)])
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    resid = y - design @ coef
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    return 1.0 - float(np.sum(resid**2)) / ss_tot
