"""Manifest ingestion, stratified splitting and deterministic preprocessing."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from ._kernels import resize_bilinear
from .errors import (
    AgeOutOfConfiguredBounds,
    CountMismatch,
    DecodeFailure,
    MalformedRow,
    MissingFile,
    NonNumericAge,
    UnknownNormalizationKey,
)

DEFAULT_AGE_BOUNDS = (8.0, 68.0)
REFERENCE_COUNTS = (962, 170, 200)

_IMAGENET = ((0.485, 0.456, 0.406), (0.229, 0.224, 0.225))
_SIGNED_UNIT = ((0.5, 0.5, 0.5), (0.5, 0.5, 0.5))

# Per-channel (mean, std) on the [0, 1] pixel scale, matching the input
# convention of each backbone's released ImageNet weights.  The Google
# Inception weights expect [-1, 1]; the torchvision ports of the rest
# expect ImageNet mean/std.
NORMALIZATION = {
    "InceptionV3": _SIGNED_UNIT,
    "MobileNetV2": _IMAGENET,
    "ResNet50V2": _SIGNED_UNIT,
    "EfficientNetB4": _IMAGENET,
    "VGG16": _IMAGENET,
    "DenseNet201": _IMAGENET,
}


class Split(str, Enum):
    TRAIN = "train"
    VAL = "val"
    TEST = "test"
    UNASSIGNED = "unassigned"


class ChannelPolicy(str, Enum):
    REPLICATE_GRAY_TO_3 = "replicate_gray_to_3"
    PASSTHROUGH_RGB = "passthrough_rgb"


@dataclass(frozen=True)
class ImageRecord:
    image_path: Path
    age_years: float
    subject_id: str | None = None
    split: Split = Split.UNASSIGNED

    def __post_init__(self):
        if not (math.isfinite(self.age_years) and self.age_years > 0):
            raise ValueError(f"age_years must be finite and positive, got {self.age_years!r}")


@dataclass(frozen=True)
class DatasetSplit:
    train: list
    val: list
    test: list
    seed: int

    def __iter__(self):
        return iter((self.train, self.val, self.test))

    def sizes(self) -> tuple[int, int, int]:
        return len(self.train), len(self.val), len(self.test)

    def part(self, name: str) -> list:
        return {"train": self.train, "val": self.val, "test": self.test}[Split(name).value]


@dataclass(frozen=True)
class PreprocessSpec:
    target_height: int = 256
    target_width: int = 256
    channel_policy: ChannelPolicy = ChannelPolicy.REPLICATE_GRAY_TO_3
    normalization: str = "InceptionV3"
    normalization_table: dict = field(default_factory=lambda: dict(NORMALIZATION), repr=False, compare=False)

    def __post_init__(self):
        if self.target_height <= 0 or self.target_width <= 0:
            raise ValueError("target dimensions must be positive")
        object.__setattr__(self, "channel_policy", ChannelPolicy(self.channel_policy))

    def stats(self):
        try:
            mean, std = self.normalization_table[self.normalization]
        except KeyError:
            raise UnknownNormalizationKey(f"no normalization entry for {self.normalization!r}") from None
        return np.asarray(mean, dtype=np.float32), np.asarray(std, dtype=np.float32)


def load_manifest(manifest_path, age_bounds=DEFAULT_AGE_BOUNDS) -> list[ImageRecord]:
    """Parse ``image_path,age_years[,subject_id]`` rows; paths resolve against the manifest's directory.

    Row indices in errors are 1-based data rows (the header is row 0).
    """
    path = Path(manifest_path)
    if not path.is_file():
        raise MissingFile(f"manifest not found: {path}")
    base = path.parent
    lo, hi = age_bounds if age_bounds is not None else (-math.inf, math.inf)
    records = []
    with path.open("r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise MalformedRow(0, "empty manifest (missing header)") from None
        if header[:2] != ["image_path", "age_years"] or header[2:] not in ([], ["subject_id"]):
            raise MalformedRow(0, f"bad header {header!r}")
        ncols = len(header)
        for idx, row in enumerate(reader, start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) not in (2, ncols):
                raise MalformedRow(idx, f"expected {ncols} fields, got {len(row)}")
            rel = row[0].strip()
            if not rel:
                raise MalformedRow(idx, "empty image_path")
            try:
                age = float(row[1])
            except ValueError:
                raise NonNumericAge(idx, f"age {row[1]!r} is not numeric") from None
            if not math.isfinite(age) or age <= 0:
                raise NonNumericAge(idx, f"age {row[1]!r} is not a finite positive number")
            if not lo <= age <= hi:
                raise AgeOutOfConfiguredBounds(idx, f"age {age} outside [{lo}, {hi}]")
            subject = (row[2].strip() or None) if len(row) > 2 else None
            img = Path(rel)
            records.append(ImageRecord(img if img.is_absolute() else base / img, age, subject))
    return records


def age_bin(age: float, width: float = 10.0) -> int:
    return int(math.floor(age / width))


def _apportion(bin_sizes: list[int], counts: tuple[int, ...]) -> np.ndarray:
    """Integer quotas per (bin, split) with exact row and column sums.

    Floors of the proportional quotas, then single-unit top-ups in order of
    largest fractional remainder; a second pass fills whatever the greedy
    pass could not place.
    """
    total = sum(bin_sizes)
    sizes = np.asarray(bin_sizes, dtype=np.int64)
    want = np.asarray(counts, dtype=np.int64)
    ideal = sizes[:, None] * want[None, :] / total
    quota = np.floor(ideal).astype(np.int64)
    frac = ideal - quota
    row_left = sizes - quota.sum(axis=1)
    col_left = want - quota.sum(axis=0)
    order = sorted(np.ndindex(*quota.shape), key=lambda bs: (-frac[bs], bs))
    for b, s in order:
        if row_left[b] > 0 and col_left[s] > 0:
            quota[b, s] += 1
            row_left[b] -= 1
            col_left[s] -= 1
    for b in range(len(sizes)):
        for s in range(len(want)):
            take = min(row_left[b], col_left[s])
            if take > 0:
                quota[b, s] += take
                row_left[b] -= take
                col_left[s] -= take
    return quota


def split_dataset(records, counts=REFERENCE_COUNTS, seed: int = 42, bin_width: float = 10.0) -> DatasetSplit:
    """Count-exact, age-stratified split; output lists keep manifest order."""
    counts = tuple(int(c) for c in counts)
    if len(counts) != 3 or any(c < 0 for c in counts):
        raise CountMismatch(f"counts must be three non-negative integers, got {counts}")
    if sum(counts) != len(records):
        raise CountMismatch(f"counts {counts} sum to {sum(counts)}, but there are {len(records)} records")
    paths = [str(r.image_path) for r in records]
    if len(set(paths)) != len(paths):
        raise CountMismatch("duplicate image_path entries in records")

    bins: dict[int, list[int]] = {}
    for i, rec in enumerate(records):
        bins.setdefault(age_bin(rec.age_years, bin_width), []).append(i)
    keys = sorted(bins)
    quota = _apportion([len(bins[k]) for k in keys], counts)

    rng = np.random.default_rng(seed)
    assignment = [None] * len(records)
    names = (Split.TRAIN, Split.VAL, Split.TEST)
    for row, key in enumerate(keys):
        members = np.asarray(bins[key])
        members = members[rng.permutation(len(members))]
        start = 0
        for s, name in enumerate(names):
            for i in members[start : start + quota[row, s]]:
                assignment[int(i)] = name
            start += quota[row, s]

    parts = {name: [] for name in names}
    for rec, name in zip(records, assignment):
        parts[name].append(replace(rec, split=name))
    return DatasetSplit(parts[Split.TRAIN], parts[Split.VAL], parts[Split.TEST], seed)


def decode_image(path, channel_policy=ChannelPolicy.REPLICATE_GRAY_TO_3) -> np.ndarray:
    """Decode to float32 (H, W, 3) on the [0, 1] scale."""
    try:
        with Image.open(path) as im:
            im.load()
            if ChannelPolicy(channel_policy) is ChannelPolicy.REPLICATE_GRAY_TO_3:
                arr = _to_unit(im.convert("L") if im.mode not in ("I", "I;16", "F") else im)
                arr = np.repeat(arr[..., None], 3, axis=2)
            else:
                arr = _to_unit(im.convert("RGB"))
    except (OSError, UnidentifiedImageError, ValueError) as exc:
        raise DecodeFailure(f"cannot decode {path}: {exc}") from exc
    return arr


def _to_unit(im) -> np.ndarray:
    arr = np.asarray(im)
    if arr.dtype == np.uint8:
        return arr.astype(np.float32) / 255.0
    arr = arr.astype(np.float32)
    if im.mode in ("I", "I;16"):
        return arr / 65535.0
    return np.clip(arr, 0.0, 1.0)


def load_image(record, spec: PreprocessSpec) -> np.ndarray:
    """Decode and resize without normalization (augmentation operates on this scale)."""
    path = record.image_path if isinstance(record, ImageRecord) else Path(record)
    arr = decode_image(path, spec.channel_policy)
    return resize_bilinear(arr, spec.target_height, spec.target_width)


def normalize(image: np.ndarray, spec: PreprocessSpec) -> np.ndarray:
    mean, std = spec.stats()
    return ((np.asarray(image, dtype=np.float32) - mean) / std).astype(np.float32)


def load_and_preprocess(record, spec: PreprocessSpec) -> np.ndarray:
    """Resized, normalized (H, W, 3) float32; no stochastic transform."""
    spec.stats()  # fail on an unknown key before touching the file
    return normalize(load_image(record, spec), spec)
