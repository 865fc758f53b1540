"""End-to-end training loop with burn-in-gated instance reweighting.

Each minibatch: draw fresh reference-score statistics from the Gaussian
prior, compute per-sample deviation / cross-entropy / segmentation losses,
then either reweight them via the configured divergence (after the burn-in
epochs) or use uniform weights, and take one Adam step on the combined
objective. Per-batch losses and weights are logged as JSON lines so the
reweighted loss can be recomputed offline.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import os
import random
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .backbone import EncoderConfig
from .data import iter_epoch_batches
from .heads import AnomalyDetector, DetectorConfig, topk_score
from .losses import (
    bce_loss,
    deviation_loss,
    focal_seg_loss,
    kmeans_soft_targets,
    sample_reference_stats,
    soft_deviation_loss,
)
from .noise_synth import PseudoAnomalySynthesizer
from .reweighting import DivergenceSpec, reweighted_objective

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class VariantFlags:
    """Which objective terms a training variant enables."""

    use_soft: bool
    use_bce: bool
    use_seg: bool
    use_reweight: bool


VARIANTS = {
    "DL": VariantFlags(False, False, False, False),
    "Wt-DL": VariantFlags(False, False, False, True),
    "DL-CE": VariantFlags(False, True, False, False),
    "SoftDL-CE": VariantFlags(True, True, False, False),
    "Wt-SoftDL-CE": VariantFlags(True, True, False, True),
    "Proposed": VariantFlags(True, True, True, True),
}


def ablation_variant(name):
    """Loss-term toggles for a named training variant."""
    try:
        return VARIANTS[name]
    except KeyError:
        raise ValueError(f"unknown variant {name!r}; available: {sorted(VARIANTS)}") from None


@dataclass
class TrainConfig:
    epochs: int = 25
    batch_size: int = 16
    learning_rate: float = 2e-4
    burn_in: int = 2
    divergence: DivergenceSpec = field(default_factory=DivergenceSpec)
    gamma: float = 5.0
    k_fraction: float = 0.1
    m_reference: int = 5000
    seed: int = 0
    pseudo_ratio: float = 0.5
    prior_mu: float = 0.0
    prior_sigma: float = 1.0
    focal_gamma: float = 2.0
    alternation: str = "step"  # alternate hard/k-means BCE labels per step or per epoch
    grad_clip: float = 5.0
    variant: str = "Proposed"
    backbone: str = "resnet18"
    stages: tuple[int, ...] = (2, 3, 4)
    input_resolution: int = 224
    pretrained: bool = True
    finetune: bool = True
    score_hidden: int = 128
    seg_hidden: int = 64
    texture_dir: str | None = None
    device: str = "cpu"
    out_dir: str | None = None

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError(f"learning rate must be positive, got {self.learning_rate}")
        if self.burn_in >= self.epochs:
            raise ValueError(f"burn_in ({self.burn_in}) must be smaller than epochs ({self.epochs})")
        if self.alternation not in ("step", "epoch"):
            raise ValueError(f"alternation must be 'step' or 'epoch', got {self.alternation!r}")
        ablation_variant(self.variant)
        if isinstance(self.divergence, dict):
            self.divergence = DivergenceSpec(**self.divergence)


@dataclass
class TrainResult:
    model: AnomalyDetector
    epoch_losses: list[float]
    global_steps: int
    run_dir: str | None = None
    log_path: str | None = None


def seed_everything(seed):
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)


def build_detector(config: TrainConfig):
    return AnomalyDetector(
        DetectorConfig(
            encoder=EncoderConfig(
                backbone=config.backbone,
                stages=tuple(config.stages),
                input_resolution=config.input_resolution,
                finetune=config.finetune,
                pretrained=config.pretrained,
            ),
            score_hidden=config.score_hidden,
            seg_hidden=config.seg_hidden,
            k_fraction=config.k_fraction,
        )
    )


def _use_kmeans_labels(global_step, epoch, mode):
    if mode == "epoch":
        return epoch % 2 == 0
    return global_step % 2 == 1


def _batch_tensors(batch, device):
    images = torch.from_numpy(np.stack([s.image for s in batch])).float().to(device)
    labels = torch.tensor([float(s.y_contaminated) for s in batch], device=device)
    masks = torch.from_numpy(np.stack([s.gt_mask for s in batch]).astype(np.float32)).to(device)
    return images, labels, masks


def _save_checkpoint(model, optimizer, epoch, global_step, path):
    torch.save(
        {
            "detector_config": asdict(model.config),
            "state_dict": model.state_dict(),
            "optimizer": optimizer.state_dict(),
            "epoch": epoch,
            "global_step": global_step,
        },
        path,
    )


def _config_json(config):
    payload = asdict(config)
    payload["divergence"] = asdict(config.divergence)
    return payload


def train(config: TrainConfig, train_samples, synth=None, model=None):
    """Run the full training loop on a contaminated sample set.

    ``train_samples`` is the contaminated training list (the trainer reads
    only contaminated labels); pseudo-anomalies are generated per batch by
    ``synth``. Returns a TrainResult; when ``config.out_dir`` is set the run
    directory receives a config snapshot, a JSONL training log, and
    per-epoch checkpoints (last.pt plus best.pt by epoch mean loss).
    """
    seed_everything(config.seed)
    data_seed, ref_seed = np.random.SeedSequence(config.seed).spawn(2)
    data_rng = np.random.default_rng(data_seed)
    ref_rng = np.random.default_rng(ref_seed)

    synth = synth or PseudoAnomalySynthesizer(texture_dir=config.texture_dir)
    flags = ablation_variant(config.variant)
    device = torch.device(config.device)
    model = (model or build_detector(config)).to(device)
    model.train()
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)

    log_fh = None
    log_path = None
    if config.out_dir:
        os.makedirs(config.out_dir, exist_ok=True)
        with open(os.path.join(config.out_dir, "config.json"), "w") as fh:
            json.dump(_config_json(config), fh, indent=2, default=str)
        log_path = os.path.join(config.out_dir, "train_log.jsonl")
        log_fh = open(log_path, "w")

    def emit(record):
        if log_fh:
            log_fh.write(json.dumps(record) + "\n")

    epoch_losses = []
    best_loss = float("inf")
    global_step = 0
    try:
        for epoch in range(1, config.epochs + 1):
            batch_losses = []
            for batch in iter_epoch_batches(
                train_samples, config.batch_size, config.pseudo_ratio, synth, data_rng
            ):
                images, labels, masks = _batch_tensors(batch, device)
                stats = sample_reference_stats(
                    config.m_reference, config.prior_mu, config.prior_sigma, ref_rng
                )
                out = model(images)
                psi_k = topk_score(out.score_map, config.k_fraction)

                if flags.use_soft:
                    # the probability acts as a label: no gradient through it
                    l_main = soft_deviation_loss(
                        psi_k, out.anomaly_prob.detach(), stats, config.gamma
                    )
                else:
                    l_main = deviation_loss(psi_k, labels, stats, config.gamma)

                kmeans_mode = _use_kmeans_labels(global_step, epoch, config.alternation)
                if flags.use_bce:
                    y_hat = (
                        kmeans_soft_targets(psi_k.detach(), labels) if kmeans_mode else labels
                    )
                    l_bce = bce_loss(out.anomaly_prob, y_hat)
                else:
                    l_bce = torch.zeros_like(l_main)
                if flags.use_seg:
                    l_seg = focal_seg_loss(out.seg_mask, masks, config.focal_gamma)
                else:
                    l_seg = torch.zeros_like(l_main)

                n = len(batch)
                if epoch > config.burn_in and flags.use_reweight:
                    total, w1, w2 = reweighted_objective(l_main, l_bce, l_seg, config.divergence)
                    uniform = False
                else:
                    w1 = w2 = np.full(n, 1.0 / n)
                    w_t = torch.full((n,), 1.0 / n, dtype=torch.float64, device=device)
                    total = (
                        (w_t * l_main.double()).sum()
                        + (w_t * l_bce.double()).sum()
                        + l_seg.double().mean()
                    )
                    uniform = True

                if not torch.isfinite(total):
                    diagnostic = {
                        "epoch": epoch,
                        "step": global_step,
                        "psi_k": psi_k.detach().cpu().tolist(),
                        "mu_s": stats.mu_s,
                        "sigma_s": stats.sigma_s,
                        "w1": np.asarray(w1).tolist(),
                        "w2": np.asarray(w2).tolist(),
                        "l_main": l_main.detach().cpu().tolist(),
                        "l_bce": l_bce.detach().cpu().tolist(),
                        "l_seg": l_seg.detach().cpu().tolist(),
                    }
                    if config.out_dir:
                        with open(os.path.join(config.out_dir, "diagnostic_batch.json"), "w") as fh:
                            json.dump(diagnostic, fh, indent=2)
                    raise RuntimeError(f"non-finite loss at epoch {epoch} step {global_step}: {diagnostic}")

                optimizer.zero_grad()
                total.backward()
                torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
                optimizer.step()

                emit(
                    {
                        "event": "batch",
                        "epoch": epoch,
                        "step": global_step,
                        "total": float(total.detach()),
                        "uniform": uniform,
                        "kmeans_labels": bool(kmeans_mode and flags.use_bce),
                        "mu_s": stats.mu_s,
                        "sigma_s": stats.sigma_s,
                        "w1": np.asarray(w1).tolist(),
                        "w2": np.asarray(w2).tolist(),
                        "l_main": l_main.detach().cpu().tolist(),
                        "l_bce": l_bce.detach().cpu().tolist(),
                        "l_seg": l_seg.detach().cpu().tolist(),
                    }
                )
                batch_losses.append(float(total.detach()))
                global_step += 1

            mean_loss = float(np.mean(batch_losses)) if batch_losses else float("nan")
            epoch_losses.append(mean_loss)
            emit({"event": "epoch_end", "epoch": epoch, "mean_loss": mean_loss, "n_batches": len(batch_losses)})
            logger.info("epoch %d/%d: mean loss %.4f", epoch, config.epochs, mean_loss)
            if config.out_dir:
                _save_checkpoint(model, optimizer, epoch, global_step, os.path.join(config.out_dir, "last.pt"))
                if mean_loss < best_loss:
                    best_loss = mean_loss
                    _save_checkpoint(model, optimizer, epoch, global_step, os.path.join(config.out_dir, "best.pt"))
    finally:
        if log_fh:
            log_fh.close()

    return TrainResult(
        model=model,
        epoch_losses=epoch_losses,
        global_steps=global_step,
        run_dir=config.out_dir,
        log_path=log_path,
    )


def variant_config(config: TrainConfig, name):
    """A copy of ``config`` switched to the named ablation variant."""
    ablation_variant(name)
    return dataclasses.replace(config, variant=name)
