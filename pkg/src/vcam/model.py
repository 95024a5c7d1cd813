"""Staged re-ID feature extractor with optional channel attention and a viewpoint head."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .attention import ContractViolation, SEBlock, ViewpointAttention, channel_reweight

VARIANTS = ("none", "se", "vcam")

# per-channel pixel normalization applied by to_tensor
PIXEL_MEAN = 0.5
PIXEL_STD = 0.25


class ConfigurationError(ValueError):
    pass


@dataclass
class BackboneConfig:
    num_stages: int = 4
    channels: list[int] = field(default_factory=lambda: [16, 32, 64, 128])
    strides: list[int] = field(default_factory=lambda: [1, 2, 2, 1])
    input_size: int = 64
    attention_variant: str = "vcam"
    feature_dim: int = 128
    stem_channels: int = 16
    stem_stride: int = 2
    blocks_per_stage: int = 1
    viewpoint_channels: list[int] = field(default_factory=lambda: [16, 32, 64, 64])
    viewpoint_head_init: str = "zero"
    se_reduction: int = 16
    attention_bias: bool = False
    # let re-ID losses reach the viewpoint estimator through V
    viewpoint_grad: bool = True

    def validate(self):
        if self.num_stages < 1:
            raise ConfigurationError("backbone.num_stages must be >= 1")
        if len(self.channels) != self.num_stages or len(self.strides) != self.num_stages:
            raise ConfigurationError(
                f"backbone.channels and backbone.strides must have num_stages={self.num_stages} entries")
        if self.attention_variant not in VARIANTS:
            raise ConfigurationError(
                f"backbone.attention_variant must be one of {VARIANTS}, got {self.attention_variant!r}")
        if self.stem_stride not in (1, 2, 4):
            raise ConfigurationError("backbone.stem_stride must be 1, 2 or 4")
        if self.viewpoint_head_init not in ("zero", "default"):
            raise ConfigurationError("backbone.viewpoint_head_init must be 'zero' or 'default'")
        if min(self.channels) < 1 or self.feature_dim < 1 or self.input_size < 1:
            raise ConfigurationError("backbone sizes must be positive")

    def fingerprint(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @classmethod
    def desk(cls, **overrides) -> "BackboneConfig":
        return cls(**overrides)

    @classmethod
    def full_scale(cls, **overrides) -> "BackboneConfig":
        params = dict(channels=[256, 512, 1024, 2048], strides=[1, 2, 2, 1], input_size=224,
                      feature_dim=2048, stem_channels=64, stem_stride=4,
                      viewpoint_channels=[64, 128, 256, 512])
        params.update(overrides)
        return cls(**params)


class StageShape(NamedTuple):
    channels: int
    height: int
    width: int


def _down(size: int, stride: int) -> int:
    # 3x3 convolution with padding 1
    return (size - 1) // stride + 1


def stage_shapes(config: BackboneConfig) -> list[StageShape]:
    size = config.input_size
    if config.stem_stride == 4:
        size = _down(_down(size, 2), 2)
    else:
        size = _down(size, config.stem_stride)
    shapes = []
    for c, s in zip(config.channels, config.strides):
        size = _down(size, s)
        shapes.append(StageShape(c, size, size))
    return shapes


def to_tensor(images: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """uint8 ``(N, H, W, 3)`` images to a normalized ``(N, 3, H, W)`` tensor."""
    x = torch.from_numpy(np.ascontiguousarray(images)).to(dtype).permute(0, 3, 1, 2)
    return (x / 255.0 - PIXEL_MEAN) / PIXEL_STD


class BasicBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))
        else:
            self.shortcut = nn.Identity()

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


def _stem(cin: int, cout: int, stride: int) -> nn.Sequential:
    layers = [nn.Conv2d(cin, cout, 3, min(stride, 2), 1, bias=False), nn.BatchNorm2d(cout), nn.ReLU()]
    if stride == 4:
        layers.append(nn.MaxPool2d(3, 2, 1))
    return nn.Sequential(*layers)


class ViewpointEstimator(nn.Module):
    """Small strided CNN regressing ``[phi, sin(theta), cos(theta)]``."""

    def __init__(self, channels=(16, 32, 64, 64), input_size: int = 64, zero_head: bool = True):
        super().__init__()
        self.input_size = input_size
        layers, cin = [], 3
        for c in channels:
            layers += [nn.Conv2d(cin, c, 3, 2, 1, bias=False), nn.BatchNorm2d(c), nn.ReLU()]
            cin = c
        self.body = nn.Sequential(*layers)
        self.head = nn.Linear(cin, 3)
        if zero_head:
            nn.init.zeros_(self.head.weight)
            nn.init.zeros_(self.head.bias)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        if images.dim() != 4 or tuple(images.shape[1:]) != (3, self.input_size, self.input_size):
            raise ContractViolation(
                f"expected images of shape (B, 3, {self.input_size}, {self.input_size}), "
                f"got {tuple(images.shape)}")
        return self.head(self.body(images).mean(dim=(2, 3)))


class ReIDModel(nn.Module):
    def __init__(self, config: BackboneConfig, num_ids: int):
        super().__init__()
        config.validate()
        if num_ids < 1:
            raise ConfigurationError("identity count must be >= 1")
        self.config = config
        self.viewpoint = ViewpointEstimator(config.viewpoint_channels, config.input_size,
                                            zero_head=config.viewpoint_head_init == "zero")
        self.stem = _stem(3, config.stem_channels, config.stem_stride)
        stages, cin = [], config.stem_channels
        for c, s in zip(config.channels, config.strides):
            blocks = [BasicBlock(cin, c, s)] + [BasicBlock(c, c, 1) for _ in range(config.blocks_per_stage - 1)]
            stages.append(nn.Sequential(*blocks))
            cin = c
        self.stages = nn.ModuleList(stages)

        self.vcam = None
        self.se = None
        if config.attention_variant == "vcam":
            self.vcam = ViewpointAttention(config.channels, bias=config.attention_bias)
        elif config.attention_variant == "se":
            self.se = nn.ModuleList([SEBlock(c, config.se_reduction) for c in config.channels])

        self.embed = nn.Linear(config.channels[-1] + 3, config.feature_dim)
        self.bnneck = nn.BatchNorm1d(config.feature_dim)
        self.classifier = nn.Linear(config.feature_dim, num_ids, bias=False)
        nn.init.normal_(self.classifier.weight, std=0.001)

    @property
    def num_ids(self) -> int:
        return self.classifier.out_features

    def estimate_viewpoint(self, images: torch.Tensor) -> torch.Tensor:
        return self.viewpoint(images)

    def stage_weights(self, features: torch.Tensor, viewpoint: torch.Tensor, index: int) -> torch.Tensor | None:
        if self.vcam is not None:
            return self.vcam.stage(viewpoint, index)
        if self.se is not None:
            return self.se[index](features)
        return None

    def stage_outputs(self, images: torch.Tensor, viewpoint: torch.Tensor) -> list[torch.Tensor]:
        """Reweighted representation after every stage."""
        if viewpoint.dim() != 2 or viewpoint.shape != (images.shape[0], 3):
            raise ContractViolation(
                f"viewpoint must be (B, 3) matching the batch, got {tuple(viewpoint.shape)}")
        x = self.stem(images)
        outs = []
        for i, stage in enumerate(self.stages):
            x = stage(x)
            weights = self.stage_weights(x, viewpoint, i)
            if weights is not None:
                x = channel_reweight(x, weights)
            outs.append(x)
        return outs

    def extract_feature(self, images: torch.Tensor, viewpoint: torch.Tensor) -> torch.Tensor:
        if not self.config.viewpoint_grad:
            viewpoint = viewpoint.detach()
        pooled = self.stage_outputs(images, viewpoint)[-1].mean(dim=(2, 3))
        return self.embed(torch.cat([pooled, viewpoint], dim=1))

    def classify_id(self, features: torch.Tensor) -> torch.Tensor:
        if features.shape[-1] != self.config.feature_dim:
            raise ConfigurationError(
                f"feature length {features.shape[-1]} != configured {self.config.feature_dim}")
        return self.classifier(self.bnneck(features))

    def forward(self, images: torch.Tensor):
        viewpoint = self.estimate_viewpoint(images)
        features = self.extract_feature(images, viewpoint)
        return viewpoint, features, self.classify_id(features)

    def attention_maps(self, viewpoint: torch.Tensor) -> list[torch.Tensor]:
        if self.vcam is None:
            raise ConfigurationError(f"model variant {self.config.attention_variant!r} has no viewpoint attention")
        return self.vcam(viewpoint)

    def reset_classifier(self, num_ids: int, seed: int | None = None):
        """Replace the identity head with a fresh one of width ``num_ids``."""
        with torch.random.fork_rng(devices=[]):
            if seed is not None:
                torch.manual_seed(seed)
            head = nn.Linear(self.config.feature_dim, num_ids, bias=False)
            nn.init.normal_(head.weight, std=0.001)
        self.classifier = head.to(self.embed.weight.dtype)

    def viewpoint_parameters(self):
        return list(self.viewpoint.parameters())

    def main_parameters(self):
        ids = {id(p) for p in self.viewpoint.parameters()}
        return [p for p in self.parameters() if id(p) not in ids]


def build_model(config: BackboneConfig, num_ids: int, seed: int = 0) -> ReIDModel:
    """Construct a model whose initial parameters depend only on (config, num_ids, seed)."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return ReIDModel(config, num_ids)


def build_estimator(config: BackboneConfig, seed: int = 0) -> ViewpointEstimator:
    """Stand-alone estimator with the same architecture as ``ReIDModel.viewpoint``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return ViewpointEstimator(config.viewpoint_channels, config.input_size,
                                  zero_head=config.viewpoint_head_init == "zero")


@torch.no_grad()
def embed_images(model: ReIDModel, images: np.ndarray, batch_size: int = 256,
                 return_viewpoint: bool = False):
    """Evaluation-mode features (and optionally viewpoints) for uint8 images."""
    was_training = model.training
    model.eval()
    feats, views = [], []
    for start in range(0, len(images), batch_size):
        x = to_tensor(images[start:start + batch_size], model.embed.weight.dtype)
        v = model.estimate_viewpoint(x)
        feats.append(model.extract_feature(x, v))
        views.append(v)
    model.train(was_training)
    f = torch.cat(feats).numpy().astype(np.float64)
    if return_viewpoint:
        return f, torch.cat(views).numpy().astype(np.float64)
    return f
