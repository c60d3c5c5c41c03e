"""Backbone registry: pluggable feature extractors behind the 8-logit head.

Published architectures (VGG/ResNet/DenseNet/Inception/EfficientNet/ViT/Swin)
come from torchvision and are never reimplemented here; the registry records
how to build each network, where its classification layer lives, its native
input resolution, and its input normalization. A small from-scratch "tiny"
network keeps the whole pipeline runnable without pretrained weights.

Pretrained weights are loaded from $REEFCOND_WEIGHTS_DIR/<name>.pt (a
torchvision state_dict). A missing directory or file with pretrained=True is
a hard error, never a silent random-init fallback.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import torch
from torch import nn

from .errors import BackboneError

WEIGHTS_DIR_ENV = "REEFCOND_WEIGHTS_DIR"

_IMAGENET_NORM = ((0.485, 0.456, 0.406), (0.229, 0.224, 0.225))
_UNIT_NORM = ((0.5, 0.5, 0.5), (0.5, 0.5, 0.5))


@dataclass(frozen=True)
class BackboneSpec:
    """A resolved registry entry: how one backbone is identified and reported.

    parameter_count is the published architecture's trainable-parameter count
    (measured on the as-published network including its original classifier);
    it is the reference value quoted in reports, not an assertion about the
    fine-tuned model.
    """

    name: str
    pretrained: bool = True
    native_resolution: int = 224
    parameter_count: int = 0


@dataclass(frozen=True)
class _Entry:
    tv_builder: str | None
    classifier_path: str
    native_resolution: int
    normalization: tuple[tuple[float, float, float], tuple[float, float, float]]
    has_pretrained: bool = True


_REGISTRY: dict[str, _Entry] = {
    "tiny": _Entry(None, "head", 64, _UNIT_NORM, has_pretrained=False),
    "vgg13-bn": _Entry("vgg13_bn", "classifier.6", 224, _IMAGENET_NORM),
    "vgg16-bn": _Entry("vgg16_bn", "classifier.6", 224, _IMAGENET_NORM),
    "vgg19-bn": _Entry("vgg19_bn", "classifier.6", 224, _IMAGENET_NORM),
    "resnet18": _Entry("resnet18", "fc", 224, _IMAGENET_NORM),
    "resnet34": _Entry("resnet34", "fc", 224, _IMAGENET_NORM),
    "resnet50": _Entry("resnet50", "fc", 224, _IMAGENET_NORM),
    "resnet101": _Entry("resnet101", "fc", 224, _IMAGENET_NORM),
    "resnet152": _Entry("resnet152", "fc", 224, _IMAGENET_NORM),
    "densenet121": _Entry("densenet121", "classifier", 224, _IMAGENET_NORM),
    "densenet161": _Entry("densenet161", "classifier", 224, _IMAGENET_NORM),
    "densenet201": _Entry("densenet201", "classifier", 224, _IMAGENET_NORM),
    "inception-v3": _Entry("inception_v3", "fc", 299, _IMAGENET_NORM),
    "efficientnet-b4": _Entry("efficientnet_b4", "classifier.1", 380, _IMAGENET_NORM),
    "efficientnet-b5": _Entry("efficientnet_b5", "classifier.1", 456, _IMAGENET_NORM),
    "efficientnet-b6": _Entry("efficientnet_b6", "classifier.1", 528, _IMAGENET_NORM),
    "efficientnet-b7": _Entry("efficientnet_b7", "classifier.1", 600, _IMAGENET_NORM),
    "vit-b16": _Entry("vit_b_16", "heads.head", 224, _IMAGENET_NORM),
    "swin-tiny": _Entry("swin_t", "head", 224, _IMAGENET_NORM),
    "swin-small": _Entry("swin_s", "head", 224, _IMAGENET_NORM),
    "swin-base": _Entry("swin_b", "head", 224, _IMAGENET_NORM),
}

_REFERENCE_COUNT_CACHE: dict[str, int] = {}


class TinyClassifier(nn.Module):
    """Three conv/pool stages, global average pooling, and a linear head.

    Trained from scratch; exists so the full pipeline and its tests run in
    minutes on a CPU without any pretrained bundle.
    """

    def __init__(self, num_classes: int = 8):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(3, 16, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(2),
            nn.Conv2d(16, 32, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(2),
            nn.Conv2d(32, 64, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.AdaptiveAvgPool2d(1),
            nn.Flatten(),
        )
        self.head = nn.Linear(64, num_classes)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x))


@dataclass
class BuiltClassifier:
    """A constructed network whose final layer is the multi-label head."""

    module: nn.Module
    head: nn.Linear
    feature_dim: int


def available_backbones() -> tuple[str, ...]:
    return tuple(sorted(_REGISTRY))


def _entry(name: str) -> _Entry:
    try:
        return _REGISTRY[name]
    except KeyError:
        raise BackboneError(
            f"unknown backbone {name!r}; available: {', '.join(available_backbones())}"
        ) from None


def _torchvision_models():
    try:
        from torchvision import models
    except ImportError as exc:
        raise BackboneError(
            "torchvision is required for this backbone; install the "
            "'backbones' extra (pip install reefcond[backbones])"
        ) from exc
    return models


def _resolve_attr(module: nn.Module, path: str) -> tuple[object, str]:
    parts = path.split(".")
    parent: object = module
    for part in parts[:-1]:
        parent = parent[int(part)] if part.isdigit() else getattr(parent, part)
    return parent, parts[-1]


def _get_classifier(module: nn.Module, path: str) -> nn.Linear:
    parent, leaf = _resolve_attr(module, path)
    layer = parent[int(leaf)] if leaf.isdigit() else getattr(parent, leaf)
    if not isinstance(layer, nn.Linear):
        raise BackboneError(f"classifier at {path!r} is not a linear layer")
    return layer


def _set_classifier(module: nn.Module, path: str, layer: nn.Linear) -> None:
    parent, leaf = _resolve_attr(module, path)
    if leaf.isdigit():
        parent[int(leaf)] = layer
    else:
        setattr(parent, leaf, layer)


def _build_published(name: str) -> nn.Module:
    entry = _entry(name)
    if entry.tv_builder is None:
        return TinyClassifier()
    models = _torchvision_models()
    return getattr(models, entry.tv_builder)(weights=None)


def reference_parameter_count(name: str) -> int:
    """Trainable-parameter count of the as-published architecture.

    Measured by constructing the network (no weights needed) and counting,
    so reported sizes always reflect the installed implementation.
    """
    if name not in _REFERENCE_COUNT_CACHE:
        _REFERENCE_COUNT_CACHE[name] = trainable_parameter_count(_build_published(name))
    return _REFERENCE_COUNT_CACHE[name]


def get_backbone_spec(name: str, pretrained: bool | None = None) -> BackboneSpec:
    """Resolve a registry name into a BackboneSpec.

    pretrained defaults to True for published architectures and False for the
    built-in tiny network.
    """
    entry = _entry(name)
    if pretrained is None:
        pretrained = entry.has_pretrained
    return BackboneSpec(
        name=name,
        pretrained=pretrained,
        native_resolution=entry.native_resolution,
        parameter_count=reference_parameter_count(name),
    )


def normalization_for(name: str) -> tuple[tuple[float, ...], tuple[float, ...]]:
    return _entry(name).normalization


def _load_pretrained_state(name: str) -> dict:
    wdir = os.environ.get(WEIGHTS_DIR_ENV)
    if not wdir:
        raise BackboneError(
            f"pretrained weights requested for {name!r} but {WEIGHTS_DIR_ENV} is not "
            "set; point it at a directory of <backbone>.pt state dicts or pass "
            "pretrained=False"
        )
    path = Path(wdir) / f"{name}.pt"
    if not path.is_file():
        raise BackboneError(
            f"pretrained weights requested for {name!r} but {path} does not exist"
        )
    return torch.load(path, map_location="cpu")


def build_classifier(spec: BackboneSpec, num_classes: int = 8) -> BuiltClassifier:
    """Construct the network for a spec: trunk plus a fresh num_classes head.

    Pretrained weights are loaded into the as-published network before the
    classification layer is replaced, so the head always starts fresh.
    """
    entry = _entry(spec.name)
    if entry.tv_builder is None:
        if spec.pretrained:
            raise BackboneError(
                f"backbone {spec.name!r} is trained from scratch and has no "
                "pretrained bundle; pass pretrained=False"
            )
        module = TinyClassifier(num_classes)
        return BuiltClassifier(
            module=module, head=module.head, feature_dim=module.head.in_features
        )

    model = _build_published(spec.name)
    if spec.pretrained:
        model.load_state_dict(_load_pretrained_state(spec.name))
    old = _get_classifier(model, entry.classifier_path)
    head = nn.Linear(old.in_features, num_classes)
    _set_classifier(model, entry.classifier_path, head)
    return BuiltClassifier(module=model, head=head, feature_dim=old.in_features)


def trainable_parameter_count(module: nn.Module) -> int:
    """Number of trainable scalars in a module."""
    return sum(p.numel() for p in module.parameters() if p.requires_grad)


def head_parameter_count(in_features: int, num_classes: int) -> int:
    """Analytic size of the affine head: weights plus biases."""
    return in_features * num_classes + num_classes
