"""Feature extractor + regression head, inference, and checkpoint I/O."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .backbones import FeatureExtractor, build_extractor, count_trainable_parameters, model_label
from .errors import CheckpointMismatch, IncompatibleFeatureShape, MissingFile, ShapeMismatch

WEIGHTS_FILE = "weights.pt"
SIDECAR_FILE = "model.json"


class RegressionModel(nn.Module):
    """Backbone features -> global average pool -> one linear unit (age in years)."""

    def __init__(self, extractor: FeatureExtractor):
        super().__init__()
        h, w, c = extractor.output_spatial_shape
        if min(h, w, c) < 1:
            raise IncompatibleFeatureShape(f"feature map {extractor.output_spatial_shape} cannot be pooled")
        self.features = extractor.module
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.fc = nn.Linear(c, 1)
        self.backbone = extractor.backbone.name
        self.cut_block_index = extractor.cut_block_index
        self.input_shape = tuple(extractor.backbone.input_shape)
        self.feature_shape = tuple(extractor.output_spatial_shape)

    @property
    def normalization(self) -> str:
        return self.backbone

    @property
    def label(self) -> str:
        return model_label(self.backbone, self.cut_block_index)

    def forward(self, x):
        f = self.pool(self.features(x)).flatten(1)
        return self.fc(f)


def assemble(extractor: FeatureExtractor) -> RegressionModel:
    model = RegressionModel(extractor)
    for p in model.parameters():
        p.requires_grad_(True)
    return model


def head_parameter_count(model: RegressionModel) -> int:
    return count_trainable_parameters(model.fc)


def to_batch_tensor(images, input_shape=None) -> torch.Tensor:
    """(B, H, W, 3) numpy or (B, 3, H, W) tensor -> float32 NCHW tensor."""
    if isinstance(images, torch.Tensor):
        x = images.float()
    else:
        arr = np.asarray(images, dtype=np.float32)
        if arr.ndim == 3:
            arr = arr[None]
        if arr.ndim != 4 or arr.shape[-1] != 3:
            raise ShapeMismatch(f"expected (B, H, W, 3) images, got {arr.shape}")
        x = torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))
    if x.ndim != 4 or x.shape[1] != 3:
        raise ShapeMismatch(f"expected (B, 3, H, W) tensor, got {tuple(x.shape)}")
    if input_shape is not None and tuple(x.shape[2:]) != tuple(input_shape[:2]):
        raise ShapeMismatch(f"images are {tuple(x.shape[2:])}, model expects {tuple(input_shape[:2])}")
    return x


def predict(model: RegressionModel, images, batch_size: int = 32) -> np.ndarray:
    """Raw (unclamped) predicted ages, one per image.  Leaves the model's mode untouched."""
    x = to_batch_tensor(images, model.input_shape)
    was_training = model.training
    model.eval()
    out = []
    try:
        with torch.no_grad():
            for i in range(0, x.shape[0], batch_size):
                out.append(model(x[i : i + batch_size]).reshape(-1))
    finally:
        model.train(was_training)
    return torch.cat(out).double().numpy() if out else np.zeros(0)


def sidecar(model: RegressionModel, train_config_hash: str | None = None, **extra) -> dict:
    meta = {
        "backbone": model.backbone,
        "cut_block_index": model.cut_block_index,
        "model_label": model.label,
        "normalization": model.normalization,
        "input_shape": list(model.input_shape),
        "trainable_parameter_count": count_trainable_parameters(model),
        "train_config_hash": train_config_hash,
    }
    meta.update(extra)
    return meta


def save_checkpoint(model: RegressionModel, directory, train_config_hash=None, state_dict=None, **extra) -> Path:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    torch.save(state_dict if state_dict is not None else model.state_dict(), out / WEIGHTS_FILE)
    meta = sidecar(model, train_config_hash, **extra)
    (out / SIDECAR_FILE).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return out


def read_sidecar(directory) -> dict:
    path = Path(directory) / SIDECAR_FILE
    if not path.is_file():
        raise MissingFile(f"checkpoint sidecar not found: {path}")
    return json.loads(path.read_text(encoding="utf-8"))


def load_checkpoint(directory) -> tuple[RegressionModel, dict]:
    """Rebuild the architecture named in the sidecar and load its weights strictly."""
    directory = Path(directory)
    meta = read_sidecar(directory)
    wpath = directory / WEIGHTS_FILE
    if not wpath.is_file():
        raise MissingFile(f"checkpoint weights not found: {wpath}")
    extractor = build_extractor(meta["backbone"], meta.get("cut_block_index"), pretrained=False,
                                input_shape=tuple(meta.get("input_shape", (256, 256, 3))))
    model = assemble(extractor)
    state = torch.load(wpath, map_location="cpu", weights_only=True)
    try:
        model.load_state_dict(state, strict=True)
    except RuntimeError as exc:
        raise CheckpointMismatch(
            f"weights in {wpath} do not match {meta['backbone']} cut={meta.get('cut_block_index')}: "
            f"{str(exc).splitlines()[0]}"
        ) from exc
    count = count_trainable_parameters(model)
    if meta.get("trainable_parameter_count") not in (None, count):
        raise CheckpointMismatch(
            f"sidecar records {meta['trainable_parameter_count']} parameters, rebuilt model has {count}"
        )
    model.eval()
    return model, meta
