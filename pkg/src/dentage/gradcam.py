"""Grad-CAM for the scalar age output.

Channel weights are the spatial means of d(age)/d(feature map); the map is
``relu(sum_k weight_k * A_k)``, upsampled bilinearly to the input size and
min-max normalized to [0, 1] (all zeros when the map is flat).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import matplotlib
import numpy as np
import torch
from PIL import Image

from ._kernels import resize_bilinear
from .dataset import NORMALIZATION
from .errors import NonDifferentiablePath, ShapeMismatch, UnknownLayer
from .regressor import to_batch_tensor

DEFAULT_COLORMAP = "jet"


@dataclass
class HeatmapOverlay:
    heatmap: np.ndarray
    overlay: np.ndarray
    target_layer: str
    predicted_age: float

    def save(self, png_path) -> tuple[Path, Path]:
        """Write the overlay PNG and a ``.json`` sidecar next to it."""
        png = Path(png_path)
        png.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(to_uint8(self.overlay), mode="RGB").save(png, optimize=False)
        meta = png.with_suffix(".json")
        meta.write_text(json.dumps({"predicted_age": self.predicted_age, "target_layer": self.target_layer},
                                   indent=2) + "\n", encoding="utf-8")
        return png, meta


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def default_target_layer(model) -> str:
    """Last child of the feature extractor, i.e. the final map before pooling."""
    last = list(model.features.named_children())[-1][0]
    return f"features.{last}"


def resolve_layer(model, name: str | None):
    if name is None:
        name = default_target_layer(model)
    modules = dict(model.named_modules())
    for candidate in (name, f"features.{name}"):
        if candidate in modules and candidate:
            return candidate, modules[candidate]
    raise UnknownLayer(f"no layer named {name!r}; try one of {list(dict(model.features.named_children()))}")


def normalize_map(m: np.ndarray) -> np.ndarray:
    lo, hi = float(m.min()), float(m.max())
    if hi == lo:
        return np.zeros_like(m, dtype=np.float64)
    return (m - lo) / (hi - lo)


def raw_cam(model, image, target_layer: str | None = None):
    """Un-normalized, un-upsampled Grad-CAM map plus the prediction and resolved layer name."""
    name, layer = resolve_layer(model, target_layer)
    x = to_batch_tensor(image)
    if x.shape[0] != 1:
        raise ShapeMismatch(f"grad_cam takes one image, got a batch of {x.shape[0]}")
    x = x.clone().requires_grad_(True)
    captured = {}

    def hook(_module, _inp, out):
        captured["A"] = out

    was_training = model.training
    model.eval()
    handle = layer.register_forward_hook(hook)
    try:
        with torch.enable_grad():
            y = model(x).reshape(())
            acts = captured.get("A")
            if not isinstance(acts, torch.Tensor) or acts.ndim != 4:
                raise NonDifferentiablePath(f"layer {name!r} does not produce a 4-D feature map")
            grads = torch.autograd.grad(y, acts, allow_unused=True)[0]
    except RuntimeError as exc:
        raise NonDifferentiablePath(f"cannot differentiate the output w.r.t. {name!r}: {exc}") from exc
    finally:
        handle.remove()
        model.train(was_training)
    if grads is None:
        raise NonDifferentiablePath(f"output does not depend on layer {name!r}")
    a = acts.detach().double()[0]
    g = grads.detach().double()[0]
    weights = g.mean(dim=(1, 2))
    cam = torch.relu((weights[:, None, None] * a).sum(dim=0))
    return cam.numpy(), float(y.detach()), name


def grad_cam(model, image, target_layer: str | None = None, original=None, alpha: float = 0.4,
             colormap: str = DEFAULT_COLORMAP) -> HeatmapOverlay:
    """Heatmap and overlay for one preprocessed image ((H, W, 3) array or (1, 3, H, W) tensor).

    ``original`` is the un-normalized image used for the overlay; when omitted
    the input is de-normalized with the model's normalization entry.
    """
    x = to_batch_tensor(image)
    h, w = x.shape[2:]
    cam, pred, name = raw_cam(model, x, target_layer)
    up = resize_bilinear(cam.astype(np.float32), h, w).astype(np.float64) if cam.shape != (h, w) else cam
    heat = normalize_map(np.maximum(up, 0.0))
    if original is None:
        mean, std = NORMALIZATION[model.normalization]
        chw = x[0].detach().numpy().transpose(1, 2, 0)
        original = np.clip(chw * np.asarray(std) + np.asarray(mean), 0.0, 1.0)
    overlay = render_overlay(original, heat, alpha, colormap)
    return HeatmapOverlay(heat, overlay, name, pred)


def render_overlay(original, heatmap, alpha: float = 0.4, colormap: str = DEFAULT_COLORMAP) -> np.ndarray:
    """``(1 - alpha) * image + alpha * colormap(heatmap)`` as float RGB in [0, 1]."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    img = np.asarray(original, dtype=np.float64)
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=2)
    heat = np.asarray(heatmap, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3 or img.shape[:2] != heat.shape:
        raise ShapeMismatch(f"image {img.shape} and heatmap {heat.shape} are incompatible")
    colored = matplotlib.colormaps[colormap](np.clip(heat, 0.0, 1.0))[..., :3]
    return (1.0 - alpha) * np.clip(img, 0.0, 1.0) + alpha * colored
