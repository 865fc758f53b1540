"""Closed-form per-minibatch instance weights under divergence constraints.

Given per-sample loss values L, the weight vector w lives on the simplex
and trades off minimizing the reweighted loss against staying close to the
uniform distribution. Three divergence choices admit closed forms:

    KL(w, u):          w_i ∝ exp(-L_i / lambda)
    reverse KL(u, w):  w_i ∝ 1 / (L_i + lambda)
    alpha-divergence:  w_i ∝ [(1 - alpha) * L_i + lambda]_+ ^ (1 / (alpha - 1))

with reverse-KL and KL recovered from the alpha family at alpha -> 0 and
alpha -> 1. Weights are computed from detached loss values; no gradient
flows through the weight computation.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger(__name__)

KINDS = ("kl", "rkl", "alpha")

_CONCENTRATION_LIMIT = 0.5


@dataclass
class DivergenceSpec:
    """Which divergence constrains the weights, and how tightly."""

    kind: str = "alpha"
    alpha: float = 0.1
    lam: float = 0.1

    def __post_init__(self):
        kind = {"kl": "kl", "rkl": "rkl", "reverse_kl": "rkl", "alpha": "alpha"}.get(
            str(self.kind).lower()
        )
        if kind is None:
            raise ValueError(f"divergence kind must be one of {KINDS}, got {self.kind!r}")
        self.kind = kind
        if self.lam <= 0:
            raise ValueError(f"lambda must be positive, got {self.lam}")
        if self.kind == "alpha" and self.alpha in (0.0, 1.0):
            raise ValueError("alpha in {0, 1} is the reverse-KL / KL special case; use kind='rkl' or 'kl'")


def _as_losses(losses):
    arr = np.asarray(losses, dtype=np.float64).reshape(-1)
    if arr.size == 0:
        raise ValueError("loss vector is empty")
    if not np.all(np.isfinite(arr)):
        raise ValueError("loss vector contains non-finite values")
    return arr


def weights_kl(losses, lam):
    """Weights under a KL(w, u) constraint: softmax of -L/lambda."""
    arr = _as_losses(losses)
    if lam <= 0:
        raise ValueError(f"lambda must be positive, got {lam}")
    shifted = -arr / lam
    shifted -= shifted.max()
    w = np.exp(shifted)
    return w / w.sum()


def weights_reverse_kl(losses, lam):
    """Weights under a reverse-KL constraint: proportional to 1/(L + lambda)."""
    arr = _as_losses(losses)
    denom = arr + lam
    if np.any(denom <= 0):
        raise ValueError(f"L_i + lambda must be positive for all i (lambda={lam})")
    w = 1.0 / denom
    return w / w.sum()


def weights_alpha(losses, alpha, lam):
    """Weights under an alpha-divergence constraint, alpha not in {0, 1}.

    Bracket terms (1-alpha)*L + lambda are clamped at zero; if every term
    clamps, the weights fall back to uniform with a warning.
    """
    arr = _as_losses(losses)
    if alpha in (0.0, 1.0):
        raise ValueError("alpha in {0, 1}: use weights_reverse_kl / weights_kl instead")
    bracket = (1.0 - alpha) * arr + lam
    positive = bracket > 0
    if not positive.any():
        logger.warning("all alpha-divergence brackets clamped to zero; falling back to uniform weights")
        return np.full(arr.size, 1.0 / arr.size)

    exponent = 1.0 / (alpha - 1.0)
    w = np.zeros(arr.size)
    if exponent < 0 and np.any(bracket[positive] == 0.0):
        # zero bracket with a negative exponent dominates every finite term
        at_zero = positive & (bracket == 0.0)
        w[at_zero] = 1.0 / at_zero.sum()
        return w
    # log-domain evaluation keeps large exponents from overflowing
    logs = exponent * np.log(bracket[positive])
    logs -= logs.max()
    w[positive] = np.exp(logs)
    return w / w.sum()


def compute_weights(losses, spec):
    """Dispatch to the closed form selected by ``spec``."""
    if spec.kind == "kl":
        return weights_kl(losses, spec.lam)
    if spec.kind == "rkl":
        return weights_reverse_kl(losses, spec.lam)
    return weights_alpha(losses, spec.alpha, spec.lam)


def _detached(values):
    if hasattr(values, "detach"):
        return values.detach().cpu().numpy()
    return np.asarray(values, dtype=np.float64)


def reweighted_objective(l_soft, l_bce, l_seg, spec):
    """Total minibatch objective: sum(w1*l_soft) + sum(w2*l_bce) + mean(l_seg).

    w1 and w2 are computed from detached loss values via ``spec`` and act as
    constants for gradient purposes; the segmentation term is unweighted.
    Accepts torch tensors (returns a scalar tensor) or plain arrays
    (returns a float). Returns (objective, w1, w2).
    """
    w1 = compute_weights(_detached(l_soft), spec)
    w2 = compute_weights(_detached(l_bce), spec)
    for name, w in (("w1", w1), ("w2", w2)):
        if w.size > 1 and w.max() > _CONCENTRATION_LIMIT:
            logger.warning("%s concentrates %.3f of the mass on one sample", name, w.max())

    if hasattr(l_soft, "detach"):
        import torch

        w1_t = torch.as_tensor(w1, dtype=torch.float64, device=l_soft.device)
        w2_t = torch.as_tensor(w2, dtype=torch.float64, device=l_bce.device)
        total = (
            (w1_t * l_soft.double()).sum()
            + (w2_t * l_bce.double()).sum()
            + l_seg.double().mean()
        )
        return total, w1, w2

    total = float(
        np.dot(w1, np.asarray(l_soft, dtype=np.float64))
        + np.dot(w2, np.asarray(l_bce, dtype=np.float64))
        + np.mean(np.asarray(l_seg, dtype=np.float64))
    )
    return total, w1, w2
