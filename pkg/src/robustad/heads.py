"""Model heads: per-location anomaly scoring, classification, segmentation.

The scoring head maps the fused feature map to one score per spatial
location; an image-level score is the mean of the K highest locations.
The classification head turns the deepest feature map into an anomaly
probability used as a soft label, and the segmentation head decodes the
fused map into a full-resolution soft mask.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import EncoderConfig, MultiScaleEncoder


@dataclass
class HeadOutputs:
    """Per-batch head results: (B, N) scores, (B,) probabilities, (B, H, W) masks."""

    score_map: torch.Tensor
    anomaly_prob: torch.Tensor
    seg_mask: torch.Tensor


def topk_score(score_map, k_fraction):
    """Mean of the K largest scores, K = max(1, ceil(k_fraction * N)).

    ``score_map`` is (N,) for one image or (B, N) for a batch; returns a
    scalar or (B,) tensor accordingly. Differentiable: the gradient is 1/K
    on the selected entries and 0 elsewhere.
    """
    if not (0.0 < k_fraction <= 1.0):
        raise ValueError(f"k_fraction must be in (0, 1], got {k_fraction}")
    scores = score_map if isinstance(score_map, torch.Tensor) else torch.as_tensor(score_map)
    squeeze = scores.dim() == 1
    if squeeze:
        scores = scores.unsqueeze(0)
    n = scores.shape[-1]
    if n == 0:
        raise ValueError("score map is empty")
    k = max(1, math.ceil(k_fraction * n))
    top = torch.topk(scores, k, dim=-1).values.mean(dim=-1)
    return top.squeeze(0) if squeeze else top


class ScoringHead(nn.Module):
    """Two 1x1 conv layers producing one score per feature-map location."""

    def __init__(self, in_channels, hidden=128):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(in_channels, hidden, 1),
            nn.ReLU(inplace=True),
            nn.Conv2d(hidden, 1, 1),
        )

    def forward(self, f_co):
        return self.net(f_co).flatten(1)


class ClassificationHead(nn.Module):
    """Global average pooling + linear + sigmoid; output strictly in (0, 1)."""

    def __init__(self, in_channels):
        super().__init__()
        self.fc = nn.Linear(in_channels, 1)

    def forward(self, f_last):
        pooled = F.adaptive_avg_pool2d(f_last, 1).flatten(1)
        return torch.sigmoid(self.fc(pooled)).squeeze(-1)


class SegmentationHead(nn.Module):
    """Upsample+conv decoder from the fused map to a full-resolution soft mask."""

    def __init__(self, in_channels, out_size, hidden=64, n_up=3):
        super().__init__()
        self.out_size = (out_size, out_size) if isinstance(out_size, int) else tuple(out_size)
        blocks = []
        c = in_channels
        for _ in range(n_up):
            blocks += [
                nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False),
                nn.Conv2d(c, hidden, 3, padding=1),
                nn.ReLU(inplace=True),
            ]
            c = hidden
        blocks.append(nn.Conv2d(c, 1, 3, padding=1))
        self.net = nn.Sequential(*blocks)

    def forward(self, f_co):
        logits = self.net(f_co)
        if logits.shape[-2:] != self.out_size:
            logits = F.interpolate(logits, size=self.out_size, mode="bilinear", align_corners=False)
        return torch.sigmoid(logits).squeeze(1)


@dataclass
class DetectorConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    score_hidden: int = 128
    seg_hidden: int = 64
    k_fraction: float = 0.1


class AnomalyDetector(nn.Module):
    """Backbone plus all three heads, checkpointed as a single file.

    Accepts raw [0, 1] image batches; channel normalization is applied
    internally with the backbone's statistics.
    """

    def __init__(self, config: DetectorConfig):
        super().__init__()
        self.config = config
        self.encoder = MultiScaleEncoder(config.encoder)
        res = config.encoder.input_resolution
        # enough doublings to reach the input resolution from the fused map
        n_up = min(3, max(1, math.ceil(math.log2(res / self.encoder.f_co_size))))
        self.scorer = ScoringHead(self.encoder.f_co_channels, hidden=config.score_hidden)
        self.classifier = ClassificationHead(self.encoder.f_last_channels)
        self.segmenter = SegmentationHead(
            self.encoder.f_co_channels, out_size=res, hidden=config.seg_hidden, n_up=n_up
        )

    def forward(self, images) -> HeadOutputs:
        bundle = self.encoder(self.encoder.normalize(images))
        return HeadOutputs(
            score_map=self.scorer(bundle.f_co),
            anomaly_prob=self.classifier(bundle.f_last),
            seg_mask=self.segmenter(bundle.f_co),
        )

    def image_scores(self, images, k_fraction=None):
        """Top-K image-level anomaly scores for a raw [0, 1] batch."""
        out = self.forward(images)
        return topk_score(out.score_map, k_fraction or self.config.k_fraction)

    def save(self, path):
        cfg = asdict(self.config)
        torch.save({"detector_config": cfg, "state_dict": self.state_dict()}, path)

    @classmethod
    def load(cls, path, map_location="cpu"):
        payload = torch.load(path, map_location=map_location, weights_only=False)
        cfg = payload["detector_config"]
        enc = dict(cfg["encoder"])
        enc["stages"] = tuple(enc["stages"])
        enc["pretrained"] = False  # weights come from the checkpoint itself
        enc["weights_path"] = None
        config = DetectorConfig(
            encoder=EncoderConfig(**enc),
            score_hidden=cfg["score_hidden"],
            seg_hidden=cfg["seg_hidden"],
            k_fraction=cfg["k_fraction"],
        )
        model = cls(config)
        model.load_state_dict(payload["state_dict"])
        return model
