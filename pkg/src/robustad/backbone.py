"""Multi-scale feature extraction from a pretrained convolutional backbone.

Feature maps are taken at several depths, bilinearly resized to the
largest selected resolution and concatenated along channels (f_co); the
deepest selected stage is also returned unresized (f_last) for the
classification head.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F
import torchvision

from .exceptions import ConfigurationError

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass
class EncoderConfig:
    backbone: str = "resnet18"
    stages: tuple[int, ...] = (2, 3, 4)
    input_resolution: int = 224
    finetune: bool = True
    pretrained: bool = True
    weights_path: str | None = None


@dataclass
class FeatureBundle:
    """f_co: concatenated multi-scale map (B, C, H, W); f_last: deepest selected map."""

    f_co: torch.Tensor
    f_last: torch.Tensor


class _TinyBackbone(nn.Module):
    """Small 3-stage CNN for CPU-scale experiments; same stage interface as resnet."""

    channels = (16, 32, 64)
    strides = (4, 8, 16)

    def __init__(self):
        super().__init__()
        self.stem = nn.Sequential(
            nn.Conv2d(3, 16, 3, stride=2, padding=1), nn.BatchNorm2d(16), nn.ReLU(inplace=True)
        )
        self.stages = nn.ModuleList()
        widths = (16,) + self.channels
        for c_in, c_out in zip(widths[:-1], widths[1:]):
            self.stages.append(
                nn.Sequential(
                    nn.Conv2d(c_in, c_out, 3, stride=2, padding=1),
                    nn.BatchNorm2d(c_out),
                    nn.ReLU(inplace=True),
                    nn.Conv2d(c_out, c_out, 3, stride=1, padding=1),
                    nn.BatchNorm2d(c_out),
                    nn.ReLU(inplace=True),
                )
            )


def _build_resnet18(config):
    weights = None
    if config.pretrained and config.weights_path is None:
        weights = torchvision.models.ResNet18_Weights.IMAGENET1K_V1
    net = torchvision.models.resnet18(weights=weights)
    if config.weights_path:
        state = torch.load(config.weights_path, map_location="cpu")
        net.load_state_dict(state)
    stem = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool)
    stages = nn.ModuleList([net.layer1, net.layer2, net.layer3, net.layer4])
    return stem, stages, (64, 128, 256, 512), (4, 8, 16, 32), (IMAGENET_MEAN, IMAGENET_STD)


def _build_tiny(config):
    net = _TinyBackbone()
    return net.stem, net.stages, net.channels, net.strides, ((0.5,) * 3, (0.5,) * 3)


_BUILDERS = {"resnet18": _build_resnet18, "tiny": _build_tiny}


class MultiScaleEncoder(nn.Module):
    """Backbone wrapper producing a FeatureBundle per forward pass."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        if config.backbone not in _BUILDERS:
            raise ConfigurationError(
                f"unknown backbone {config.backbone!r}; available: {sorted(_BUILDERS)}"
            )
        stem, stages, channels, strides, (mean, std) = _BUILDERS[config.backbone](config)

        n = len(stages)
        sel = tuple(config.stages)
        if not sel:
            raise ValueError("at least one stage must be selected")
        if list(sel) != sorted(set(sel)) or sel[0] < 1 or sel[-1] > n:
            raise ValueError(f"stages must be strictly increasing within 1..{n}, got {sel}")
        if config.input_resolution < strides[sel[-1] - 1]:
            raise ConfigurationError(
                f"input resolution {config.input_resolution} collapses at stage {sel[-1]} "
                f"(stride {strides[sel[-1] - 1]})"
            )

        self.config = config
        self.stem = stem
        self.stages = stages
        self.selected = sel
        self.stage_channels = tuple(channels[i - 1] for i in sel)
        self.stage_strides = tuple(strides[i - 1] for i in sel)
        self.register_buffer("input_mean", torch.tensor(mean).view(1, 3, 1, 1))
        self.register_buffer("input_std", torch.tensor(std).view(1, 3, 1, 1))
        self.set_trainable(config.finetune)

    @property
    def f_co_channels(self):
        return sum(self.stage_channels)

    @property
    def f_last_channels(self):
        return self.stage_channels[-1]

    @property
    def f_co_size(self):
        # the concatenated map inherits the largest (shallowest) selected resolution
        return self.config.input_resolution // self.stage_strides[0]

    def normalize(self, batch):
        """Apply the backbone's channel normalization to a [0, 1] image batch."""
        return (batch - self.input_mean) / self.input_std

    def set_trainable(self, finetune):
        """Backbone parameters join gradient updates iff ``finetune`` is true."""
        for p in self.parameters():
            p.requires_grad_(bool(finetune))

    def forward(self, batch) -> FeatureBundle:
        x = self.stem(batch)
        maps = []
        for idx, stage in enumerate(self.stages, start=1):
            x = stage(x)
            if idx in self.selected:
                maps.append(x)
            if idx == self.selected[-1]:
                break
        f_last = maps[-1]
        if len(maps) == 1:
            return FeatureBundle(f_co=maps[0], f_last=f_last)
        target = max(m.shape[-2] for m in maps), max(m.shape[-1] for m in maps)
        resized = [
            m if m.shape[-2:] == target else F.interpolate(m, size=target, mode="bilinear", align_corners=False)
            for m in maps
        ]
        return FeatureBundle(f_co=torch.cat(resized, dim=1), f_last=f_last)
