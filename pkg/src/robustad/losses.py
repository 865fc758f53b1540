"""Training objectives for deviation-based anomaly scoring.

The deviation losses measure how far an image's top-K anomaly score sits
from reference scores drawn fresh each minibatch from a Gaussian prior,
in units of the reference standard deviation:

    Z = (psi_K - mu_S) / sigma_S
    l_dev  = (1 - y) * |Z| + y * max(0, gamma - Z)
    l_soft = (1 - p) * |Z| + p * max(0, gamma - Z)

where the soft variant replaces the (possibly contaminated) hard label
with an estimated anomaly probability. A binary cross-entropy term trains
that probability against hard labels alternated with 2-means pseudo-labels
of the score batch, and a focal loss supervises the segmentation mask.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .exceptions import DegeneratePriorError

BCE_EPS = 1e-7


@dataclass(frozen=True)
class ReferenceStats:
    """Sample mean/std of m reference scores drawn from the Gaussian prior."""

    mu_s: float
    sigma_s: float
    m: int
    prior: tuple[float, float] = (0.0, 1.0)


def sample_reference_stats(m, prior_mu=0.0, prior_sigma=1.0, rng=None):
    """Draw m reference scores from N(prior_mu, prior_sigma) and summarize them.

    The std is the m-1 sample estimate, so m >= 2 is required. A prior with
    zero spread makes sigma_S vanish and is rejected.
    """
    if m < 2:
        raise ValueError(f"need at least 2 reference draws, got {m}")
    if prior_sigma < 0:
        raise ValueError(f"prior sigma must be nonnegative, got {prior_sigma}")
    rng = rng if rng is not None else np.random.default_rng()
    draws = rng.normal(prior_mu, prior_sigma, size=m)
    sigma_s = float(draws.std(ddof=1))
    if sigma_s == 0.0:
        raise DegeneratePriorError("reference draws have zero spread; prior sigma must be positive")
    return ReferenceStats(mu_s=float(draws.mean()), sigma_s=sigma_s, m=m, prior=(prior_mu, prior_sigma))


def _to_tensor(x):
    # tensors keep their dtype/device; plain numbers and arrays go to float64
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def standard_score(psi_k, stats):
    """Z = (psi_K - mu_S) / sigma_S, elementwise."""
    return (_to_tensor(psi_k) - stats.mu_s) / stats.sigma_s


def deviation_loss(psi_k, y, stats, gamma):
    """Hard-label deviation loss: (1-y)|Z| + y*max(0, gamma - Z)."""
    if gamma <= 0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    z = standard_score(psi_k, stats)
    y = torch.as_tensor(y, dtype=z.dtype, device=z.device)
    return (1.0 - y) * z.abs() + y * torch.clamp(gamma - z, min=0.0)


def soft_deviation_loss(psi_k, p, stats, gamma):
    """Soft-label deviation loss: (1-p)|Z| + p*max(0, gamma - Z)."""
    if gamma <= 0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    z = standard_score(psi_k, stats)
    p = torch.as_tensor(p, dtype=z.dtype, device=z.device)
    return (1.0 - p) * z.abs() + p * torch.clamp(gamma - z, min=0.0)


def kmeans_soft_targets(psi_k_batch, y_batch):
    """Pseudo-labels from exact 2-means clustering of a 1-D score batch.

    Samples falling in the higher-centroid cluster get 1, the rest 0. The
    optimal 1-D 2-means partition is contiguous in sorted order, so it is
    found exactly by scanning the n-1 sorted split points. Degenerate
    batches (all scores equal) fall back to ``y_batch`` unchanged.
    """
    is_torch = isinstance(y_batch, torch.Tensor)
    scores = np.asarray(
        psi_k_batch.detach().cpu().numpy() if isinstance(psi_k_batch, torch.Tensor) else psi_k_batch,
        dtype=np.float64,
    ).reshape(-1)
    n = scores.size
    if n < 2:
        raise ValueError(f"need a batch of at least 2 scores, got {n}")

    order = np.argsort(scores, kind="stable")
    s = scores[order]
    if s[0] == s[-1]:
        return y_batch.clone() if is_torch else np.array(y_batch, copy=True)

    csum = np.cumsum(s)
    csq = np.cumsum(s * s)
    total, total_sq = csum[-1], csq[-1]
    ks = np.arange(1, n)
    sse_low = csq[ks - 1] - csum[ks - 1] ** 2 / ks
    sse_high = (total_sq - csq[ks - 1]) - (total - csum[ks - 1]) ** 2 / (n - ks)
    split = int(ks[np.argmin(sse_low + sse_high)])

    targets = np.zeros(n)
    targets[order[split:]] = 1.0
    if is_torch:
        return torch.as_tensor(targets, dtype=y_batch.dtype, device=y_batch.device)
    return targets.astype(np.asarray(y_batch).dtype)


def bce_loss(p, y_hat, eps=BCE_EPS):
    """Binary cross-entropy against the alternating ground-truth label."""
    p = _to_tensor(p)
    y_hat = torch.as_tensor(y_hat, dtype=p.dtype, device=p.device)
    p = torch.clamp(p, eps, 1.0 - eps)
    return -(1.0 - y_hat) * torch.log(1.0 - p) - y_hat * torch.log(p)


def focal_seg_loss(pred_mask, gt_mask, focal_gamma=2.0, eps=BCE_EPS):
    """Focal loss between a predicted soft mask and a binary ground truth.

    Averages -(1 - p_t)^gamma * log(p_t) over the last two (spatial) dims,
    so a (H, W) input yields a scalar and a (B, H, W) batch a per-sample
    vector. ``focal_gamma=0`` reduces to plain per-pixel BCE.
    """
    pred = _to_tensor(pred_mask)
    gt = torch.as_tensor(np.asarray(gt_mask) if not isinstance(gt_mask, torch.Tensor) else gt_mask,
                         dtype=pred.dtype, device=pred.device)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {tuple(pred.shape)} vs {tuple(gt.shape)}")
    p_t = torch.where(gt > 0.5, pred, 1.0 - pred)
    p_t = torch.clamp(p_t, eps, 1.0 - eps)
    loss = -((1.0 - p_t) ** focal_gamma) * torch.log(p_t)
    return loss.mean(dim=(-2, -1))
