"""Pretrained convolutional feature extractors and InceptionV3 truncation.

Every extractor ends at the backbone's last convolutional feature map; the
ImageNet classifier is dropped.  InceptionV3's eleven mixed blocks are
exposed as ``mixed0`` ... ``mixed10`` so a cut at index ``k`` keeps the stem
plus ``mixed0..mixedk``.

Weights are looked up in a local cache (``DENTAGE_WEIGHTS_DIR``, default
``~/.cache/dentage/weights``) as ``<BackboneName>.pth`` holding the state
dict of the full ImageNet classifier returned by
:func:`imagenet_classifier`.  Setting ``DENTAGE_ALLOW_DOWNLOAD=1`` lets the
torchvision-backed networks fetch their released weights instead; without
it a missing file raises :class:`WeightsUnavailable` immediately.
"""

from __future__ import annotations

import os
import pickle
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path

import torch
from torch import nn
import torchvision

from .dataset import NORMALIZATION
from .errors import IndexOutOfRange, UnsupportedInputShape, WeightsUnavailable

BACKBONES = ("InceptionV3", "MobileNetV2", "ResNet50V2", "EfficientNetB4", "VGG16", "DenseNet201")
INCEPTION_MIXED = (
    "Mixed_5b", "Mixed_5c", "Mixed_5d", "Mixed_6a", "Mixed_6b", "Mixed_6c",
    "Mixed_6d", "Mixed_6e", "Mixed_7a", "Mixed_7b", "Mixed_7c",
)
INCEPTION_STEM = (
    "Conv2d_1a_3x3", "Conv2d_2a_3x3", "Conv2d_2b_3x3", "maxpool1",
    "Conv2d_3b_1x1", "Conv2d_4a_3x3", "maxpool2",
)
CUT_RANGE = range(3, 10)

# Published "total parameter" figures for the model sweep and the cut sweep.
REFERENCE_PARAMS = {
    "EfficientNetB4": 19.5e6,
    "ResNet50V2": 25.6e6,
    "DenseNet201": 20.2e6,
    "InceptionV3": 23.9e6,
    "MobileNetV2": 3.5e6,
    "VGG16": 138.46e6,
}
REFERENCE_CUT_PARAMS = {3: 2.38e6, 4: 3.68e6, 5: 5.37e6, 6: 7.06e6, 7: 9.20e6, 8: 11.04e6, 9: 16.29e6}

WEIGHTS_ENV = "DENTAGE_WEIGHTS_DIR"
DOWNLOAD_ENV = "DENTAGE_ALLOW_DOWNLOAD"


@dataclass(frozen=True)
class BackboneSpec:
    name: str
    pretrained: bool = True
    input_shape: tuple[int, int, int] = (256, 256, 3)

    def __post_init__(self):
        if self.name not in BACKBONES:
            raise ValueError(f"unknown backbone {self.name!r}; choose from {BACKBONES}")
        if self.name not in NORMALIZATION:
            raise ValueError(f"no normalization entry for {self.name!r}")
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))


@dataclass(frozen=True)
class TruncationSpec:
    backbone: BackboneSpec
    cut_block_index: int | None = None

    def __post_init__(self):
        if self.backbone.name != "InceptionV3":
            raise ValueError("truncation is only defined for InceptionV3")
        if self.cut_block_index is not None and self.cut_block_index not in CUT_RANGE:
            raise IndexOutOfRange(f"cut_block_index must be in 3..9, got {self.cut_block_index}")

    @property
    def label(self) -> str:
        if self.cut_block_index is None:
            return "InceptionV3"
        return f"InceptionV3Mixed_{self.cut_block_index:02d}"


@dataclass
class FeatureExtractor:
    spec: BackboneSpec | TruncationSpec
    module: nn.Module
    output_spatial_shape: tuple[int, int, int]
    trainable_parameter_count: int

    @property
    def backbone(self) -> BackboneSpec:
        return self.spec.backbone if isinstance(self.spec, TruncationSpec) else self.spec

    @property
    def cut_block_index(self) -> int | None:
        return self.spec.cut_block_index if isinstance(self.spec, TruncationSpec) else None

    @property
    def label(self) -> str:
        return self.spec.label if isinstance(self.spec, TruncationSpec) else self.spec.name


def count_trainable_parameters(obj) -> int:
    module = obj.module if isinstance(obj, FeatureExtractor) else obj
    return sum(p.numel() for p in module.parameters() if p.requires_grad)


# --- ResNet50V2 (pre-activation), not shipped by torchvision -------------


class _PreActBottleneck(nn.Module):
    def __init__(self, in_ch, filters, stride=1, conv_shortcut=False):
        super().__init__()
        out_ch = 4 * filters
        self.preact_bn = nn.BatchNorm2d(in_ch, eps=1.001e-5)
        if conv_shortcut:
            self.shortcut = nn.Conv2d(in_ch, out_ch, 1, stride=stride)
        elif stride > 1:
            self.shortcut = nn.MaxPool2d(1, stride=stride)
        else:
            self.shortcut = nn.Identity()
        self.conv1 = nn.Conv2d(in_ch, filters, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(filters, eps=1.001e-5)
        self.conv2 = nn.Conv2d(filters, filters, 3, stride=stride, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(filters, eps=1.001e-5)
        self.conv3 = nn.Conv2d(filters, out_ch, 1)
        self.conv_shortcut = conv_shortcut

    def forward(self, x):
        pre = torch.relu(self.preact_bn(x))
        short = self.shortcut(pre if self.conv_shortcut else x)
        y = torch.relu(self.bn1(self.conv1(pre)))
        y = torch.relu(self.bn2(self.conv2(y)))
        return self.conv3(y) + short


class ResNet50V2(nn.Module):
    """Pre-activation ResNet-50 laid out block-for-block like the Keras reference."""

    def __init__(self, num_classes: int | None = 1000):
        super().__init__()
        self.stem = nn.Sequential(
            nn.Conv2d(3, 64, 7, stride=2, padding=3),
            nn.MaxPool2d(3, stride=2, padding=1),
        )
        layers = []
        in_ch = 64
        for filters, blocks, last_stride in ((64, 3, 2), (128, 4, 2), (256, 6, 2), (512, 3, 1)):
            stage = [_PreActBottleneck(in_ch, filters, 1, conv_shortcut=True)]
            in_ch = 4 * filters
            stage += [_PreActBottleneck(in_ch, filters) for _ in range(blocks - 2)]
            stage.append(_PreActBottleneck(in_ch, filters, stride=last_stride))
            layers.append(nn.Sequential(*stage))
        self.stages = nn.Sequential(*layers)
        self.post_bn = nn.BatchNorm2d(2048, eps=1.001e-5)
        self.fc = nn.Linear(2048, num_classes) if num_classes else None

    def features(self):
        return nn.Sequential(OrderedDict(stem=self.stem, stages=self.stages, post_bn=self.post_bn, post_relu=nn.ReLU()))

    def forward(self, x):
        x = torch.relu(self.post_bn(self.stages(self.stem(x))))
        x = x.mean(dim=(2, 3))
        return self.fc(x) if self.fc is not None else x


# --- construction ---------------------------------------------------------

_TV_WEIGHTS = {
    "InceptionV3": "Inception_V3_Weights",
    "MobileNetV2": "MobileNet_V2_Weights",
    "EfficientNetB4": "EfficientNet_B4_Weights",
    "VGG16": "VGG16_Weights",
    "DenseNet201": "DenseNet201_Weights",
}


def imagenet_classifier(name: str) -> nn.Module:
    """The full 1000-class ImageNet network whose state dict the weight cache stores."""
    tvm = torchvision.models
    if name == "InceptionV3":
        return tvm.inception_v3(weights=None, aux_logits=True, init_weights=True)
    if name == "MobileNetV2":
        return tvm.mobilenet_v2(weights=None)
    if name == "ResNet50V2":
        return ResNet50V2()
    if name == "EfficientNetB4":
        return tvm.efficientnet_b4(weights=None)
    if name == "VGG16":
        return tvm.vgg16(weights=None)
    if name == "DenseNet201":
        return tvm.densenet201(weights=None)
    raise ValueError(f"unknown backbone {name!r}")


def classifier_parameter_count(name: str) -> int:
    """Trainable parameters of the ImageNet classifier, auxiliary heads excluded."""
    model = imagenet_classifier(name)
    return sum(p.numel() for n, p in model.named_parameters() if p.requires_grad and not n.startswith("AuxLogits."))


def weights_dir(override=None) -> Path:
    if override:
        return Path(override)
    env = os.environ.get(WEIGHTS_ENV)
    return Path(env) if env else Path.home() / ".cache" / "dentage" / "weights"


def _load_pretrained(name: str, model: nn.Module, cache=None) -> None:
    path = weights_dir(cache) / f"{name}.pth"
    if path.is_file():
        try:
            state = torch.load(path, map_location="cpu", weights_only=True)
            model.load_state_dict(state)
        except (RuntimeError, OSError, ValueError, EOFError, pickle.UnpicklingError) as exc:
            raise WeightsUnavailable(f"weights file {path} does not fit {name}: {exc}") from exc
        return
    allow = os.environ.get(DOWNLOAD_ENV, "0").strip().lower() in ("1", "true", "yes")
    if allow and name in _TV_WEIGHTS:
        enum = getattr(torchvision.models, _TV_WEIGHTS[name])
        try:
            model.load_state_dict(enum.IMAGENET1K_V1.get_state_dict(progress=False))
        except Exception as exc:  # network errors come in many types
            raise WeightsUnavailable(f"could not download {name} weights: {exc}") from exc
        return
    raise WeightsUnavailable(
        f"no pretrained weights for {name} at {path}; place a state dict there, "
        f"set {WEIGHTS_ENV}, or set {DOWNLOAD_ENV}=1 (torchvision-backed models only)"
    )


def _feature_module(name: str, full: nn.Module) -> nn.Module:
    if name == "InceptionV3":
        return _inception_features(full, len(INCEPTION_MIXED) - 1)
    if name == "MobileNetV2":
        return full.features
    if name == "ResNet50V2":
        return full.features()
    if name == "EfficientNetB4":
        return full.features
    if name == "VGG16":
        return full.features
    if name == "DenseNet201":
        return nn.Sequential(OrderedDict(features=full.features, relu=nn.ReLU()))
    raise ValueError(name)


def _inception_features(full: nn.Module, last_mixed: int) -> nn.Sequential:
    parts = OrderedDict((n, getattr(full, n)) for n in INCEPTION_STEM)
    for k in range(last_mixed + 1):
        parts[f"mixed{k}"] = getattr(full, INCEPTION_MIXED[k])
    return nn.Sequential(parts)


def _finish(spec, module: nn.Module, input_shape) -> FeatureExtractor:
    h, w, c = input_shape
    if c != 3:
        raise UnsupportedInputShape(f"backbones take 3-channel input, got {input_shape}")
    for p in module.parameters():
        p.requires_grad_(True)
    was_training = module.training
    module.eval()
    try:
        with torch.no_grad():
            out = module(torch.zeros(1, c, h, w))
    except RuntimeError as exc:
        raise UnsupportedInputShape(f"input {input_shape} too small for {spec}: {exc}") from exc
    finally:
        module.train(was_training)
    if out.ndim != 4 or min(out.shape[2:]) < 1:
        raise UnsupportedInputShape(f"input {input_shape} collapses the feature map to {tuple(out.shape)}")
    shape = (int(out.shape[2]), int(out.shape[3]), int(out.shape[1]))
    return FeatureExtractor(spec, module, shape, count_trainable_parameters(module))


def build_backbone(spec: BackboneSpec, cache=None) -> FeatureExtractor:
    """Feature extractor for ``spec`` with every layer trainable."""
    full = imagenet_classifier(spec.name)
    if spec.pretrained:
        _load_pretrained(spec.name, full, cache)
    return _finish(spec, _feature_module(spec.name, full), spec.input_shape)


def truncate_inception(cut_block_index: int | None, pretrained: bool = True,
                       input_shape=(256, 256, 3), cache=None) -> FeatureExtractor:
    """InceptionV3 kept through ``mixed{cut_block_index}`` (``None`` keeps all eleven blocks).

    The retained layers are the very modules of the loaded full network, so
    their weights are exactly the pretrained ones.
    """
    spec = TruncationSpec(BackboneSpec("InceptionV3", pretrained, input_shape), cut_block_index)
    full = imagenet_classifier("InceptionV3")
    if pretrained:
        _load_pretrained("InceptionV3", full, cache)
    last = len(INCEPTION_MIXED) - 1 if cut_block_index is None else cut_block_index
    return _finish(spec, _inception_features(full, last), spec.backbone.input_shape)


def build_extractor(name: str, cut_block_index: int | None = None, pretrained: bool = True,
                    input_shape=(256, 256, 3), cache=None) -> FeatureExtractor:
    """Dispatch to :func:`truncate_inception` or :func:`build_backbone`."""
    if cut_block_index is not None:
        if name != "InceptionV3":
            raise ValueError("cut_block_index is only valid for InceptionV3")
        return truncate_inception(cut_block_index, pretrained, input_shape, cache)
    if name == "InceptionV3":
        return truncate_inception(None, pretrained, input_shape, cache)
    return build_backbone(BackboneSpec(name, pretrained, input_shape), cache)


def model_label(name: str, cut_block_index: int | None) -> str:
    return name if cut_block_index is None else f"{name}Mixed_{cut_block_index:02d}"
