"""Image-level metrics and the contamination-sweep / ablation harnesses.

AUC-ROC is computed from average ranks (ties count one half) and AUC-PR as
step-interpolated average precision. The sweep harness trains and scores a
grid of (category, contamination ratio, seed, optional hyperparameter)
cells, writing a CSV, a JSONL, and static plots; failures are recorded per
cell without aborting the grid.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np
import torch

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from . import data as data_mod
from . import trainer as trainer_mod
from .noise_synth import PseudoAnomalySynthesizer
from .reweighting import DivergenceSpec

logger = logging.getLogger(__name__)


@dataclass
class MetricsReport:
    dataset: str
    category: str
    epsilon: float
    seed: int
    auc_roc: float
    auc_pr: float
    n_test_normal: int
    n_test_anomalous: int
    variant: str = "Proposed"
    hyper_name: str = ""
    hyper_value: float = float("nan")
    error: str = ""


def _ranks_with_ties(values):
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values))
    i = 0
    sorted_vals = values[order]
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def _check_scores_labels(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1).astype(int)
    if scores.shape != labels.shape:
        raise ValueError(f"scores and labels differ in length: {scores.size} vs {labels.size}")
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores contain non-finite values")
    return scores, labels


def auc_roc(scores, labels):
    """Probability a random positive outranks a random negative, ties at 1/2."""
    scores, labels = _check_scores_labels(scores, labels)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC-ROC undefined: both classes must be present")
    ranks = _ranks_with_ties(scores)
    return float((ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def auc_pr(scores, labels):
    """Average precision: step-wise integral of precision over recall."""
    scores, labels = _check_scores_labels(scores, labels)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise ValueError("AUC-PR undefined: no positive labels")
    thresholds = np.unique(scores)[::-1]
    ap = 0.0
    prev_recall = 0.0
    for t in thresholds:
        predicted = scores >= t
        tp = int(labels[predicted].sum())
        precision = tp / predicted.sum()
        recall = tp / n_pos
        ap += (recall - prev_recall) * precision
        prev_recall = recall
    return float(ap)


def score_test_set(model, samples, k_fraction=None, batch_size=32, device="cpu"):
    """Image-level scores and true labels for a test sample list (eval mode)."""
    model = model.to(device)
    was_training = model.training
    model.eval()
    scores = []
    with torch.no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = samples[start : start + batch_size]
            images = torch.from_numpy(np.stack([s.image for s in chunk])).float().to(device)
            scores.append(model.image_scores(images, k_fraction).cpu().reshape(-1).numpy())
    if was_training:
        model.train()
    labels = np.array([s.y_true for s in samples], dtype=int)
    return np.concatenate(scores) if scores else np.array([]), labels


def evaluate_model(model, category_data, dataset, category, epsilon, seed, variant="Proposed", device="cpu", k_fraction=None):
    """Score a category's test split and wrap the metrics in a report row."""
    test = list(category_data.test_normals) + list(category_data.test_anomalies)
    scores, labels = score_test_set(model, test, k_fraction=k_fraction, device=device)
    return MetricsReport(
        dataset=dataset,
        category=category,
        epsilon=epsilon,
        seed=seed,
        auc_roc=auc_roc(scores, labels),
        auc_pr=auc_pr(scores, labels),
        n_test_normal=len(category_data.test_normals),
        n_test_anomalous=len(category_data.test_anomalies),
        variant=variant,
    )


@dataclass
class SweepSpec:
    """Grid definition for contamination / sensitivity sweeps."""

    dataset: str
    root: str
    categories: list[str]
    epsilons: list[float]
    seeds: list[int] = field(default_factory=lambda: [0])
    hyper_name: str | None = None  # "lambda" or "alpha"
    hyper_values: list[float] = field(default_factory=list)
    variants: list[str] = field(default_factory=lambda: ["Proposed"])
    noise_sigma: float = 0.1
    resize: int | None = None  # pre-crop size; defaults to 8/7 of the crop, the 256-for-224 ratio
    train_overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.categories or not self.epsilons or not self.seeds:
            raise ValueError("categories, epsilons and seeds must be nonempty")
        if self.hyper_name not in (None, "lambda", "alpha"):
            raise ValueError(f"hyperparameter axis must be 'lambda' or 'alpha', got {self.hyper_name!r}")


def _apply_hyper(config, hyper_name, value):
    if hyper_name is None:
        return config
    div = config.divergence
    if hyper_name == "lambda":
        div = DivergenceSpec(kind=div.kind, alpha=div.alpha, lam=value)
    else:
        div = DivergenceSpec(kind="alpha", alpha=value, lam=div.lam)
    return dataclasses.replace(config, divergence=div)


def _sweep_cells(spec):
    hyper_values = spec.hyper_values if spec.hyper_name else [None]
    for category in spec.categories:
        for epsilon in spec.epsilons:
            for seed in spec.seeds:
                for variant in spec.variants:
                    for hv in hyper_values:
                        yield category, epsilon, seed, variant, hv


def run_sweep(spec: SweepSpec, out_dir, device="cpu"):
    """Train and evaluate every grid cell; emit metrics.csv/.jsonl and plots."""
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    for category, epsilon, seed, variant, hv in _sweep_cells(spec):
        try:
            rows.append(
                _run_cell(spec, category, epsilon, seed, variant, hv, device)
            )
        except Exception as exc:  # keep the grid going; the cell records its failure
            logger.exception("sweep cell failed: %s eps=%s seed=%s", category, epsilon, seed)
            rows.append(
                MetricsReport(
                    dataset=spec.dataset,
                    category=category,
                    epsilon=epsilon,
                    seed=seed,
                    auc_roc=float("nan"),
                    auc_pr=float("nan"),
                    n_test_normal=0,
                    n_test_anomalous=0,
                    variant=variant,
                    hyper_name=spec.hyper_name or "",
                    hyper_value=float("nan") if hv is None else hv,
                    error=f"{type(exc).__name__}: {exc}",
                )
            )
    write_reports(rows, out_dir)
    plot_reports(rows, os.path.join(out_dir, "plots"), hyper_name=spec.hyper_name)
    return rows


def _run_cell(spec, category, epsilon, seed, variant, hyper_value, device):
    crop = spec.train_overrides.get("input_resolution", 224)
    resize = spec.resize or round(crop * 256 / 224)
    cat = data_mod.load_category(spec.root, spec.dataset, category, resize=resize, crop=crop)
    contaminated, _manifest = data_mod.inject_contamination(
        cat.train_normals,
        cat.test_anomalies,
        data_mod.ContaminationSpec(epsilon=epsilon, noise_sigma=spec.noise_sigma, seed=seed),
    )
    overrides = {k: v for k, v in spec.train_overrides.items() if k not in ("seed", "variant", "device")}
    config = trainer_mod.TrainConfig(seed=seed, variant=variant, device=device, **overrides)
    config = _apply_hyper(config, spec.hyper_name, hyper_value)
    synth = PseudoAnomalySynthesizer(texture_dir=config.texture_dir)
    result = trainer_mod.train(config, contaminated, synth=synth)
    report = evaluate_model(
        result.model, cat, spec.dataset, category, epsilon, seed, variant=variant, device=device
    )
    report.hyper_name = spec.hyper_name or ""
    report.hyper_value = float("nan") if hyper_value is None else hyper_value
    return report


def run_ablation(spec: SweepSpec, out_dir, device="cpu"):
    """Sweep the named training variants on a fixed contamination grid."""
    if not spec.variants:
        raise ValueError("ablation needs at least one variant")
    return run_sweep(spec, out_dir, device=device)


CSV_FIELDS = [f.name for f in dataclasses.fields(MetricsReport)]


def write_reports(rows, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, "metrics.csv")
    with open(csv_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        writer.writeheader()
        for row in rows:
            record = dataclasses.asdict(row)
            record = {k: (repr(v) if isinstance(v, float) else v) for k, v in record.items()}
            writer.writerow(record)
    with open(os.path.join(out_dir, "metrics.jsonl"), "w") as fh:
        for row in rows:
            fh.write(json.dumps(dataclasses.asdict(row)) + "\n")
    return csv_path


def read_reports(csv_path):
    rows = []
    with open(csv_path, newline="") as fh:
        for record in csv.DictReader(fh):
            for key in ("epsilon", "auc_roc", "auc_pr", "hyper_value"):
                record[key] = float(record[key])
            for key in ("seed", "n_test_normal", "n_test_anomalous"):
                record[key] = int(record[key])
            rows.append(MetricsReport(**record))
    return rows


def _mean_over_seeds(rows, key_fn, value_fn):
    grouped = {}
    for row in rows:
        if row.error:
            continue
        grouped.setdefault(key_fn(row), []).append(value_fn(row))
    return {k: float(np.mean(v)) for k, v in grouped.items()}


def plot_reports(rows, plot_dir, hyper_name=None):
    """Static line plots: metric vs epsilon, and metric vs hyperparameter per epsilon."""
    os.makedirs(plot_dir, exist_ok=True)
    made = []
    for metric in ("auc_roc", "auc_pr"):
        fig, ax = plt.subplots(figsize=(5, 4))
        categories = sorted({r.category for r in rows if not r.error})
        for category in categories:
            means = _mean_over_seeds(
                [r for r in rows if r.category == category],
                key_fn=lambda r: r.epsilon,
                value_fn=lambda r: getattr(r, metric),
            )
            eps = sorted(means)
            ax.plot(eps, [means[e] for e in eps], marker="o", label=category)
        ax.set_xlabel("contamination ratio")
        ax.set_ylabel(metric.replace("_", "-").upper())
        ax.set_ylim(0, 1.02)
        ax.legend(fontsize=7)
        path = os.path.join(plot_dir, f"{metric}_vs_epsilon.png")
        fig.tight_layout()
        fig.savefig(path, dpi=120)
        plt.close(fig)
        made.append(path)

    if hyper_name:
        fig, ax = plt.subplots(figsize=(5, 4))
        for epsilon in sorted({r.epsilon for r in rows if not r.error}):
            means = _mean_over_seeds(
                [r for r in rows if r.epsilon == epsilon],
                key_fn=lambda r: r.hyper_value,
                value_fn=lambda r: r.auc_roc,
            )
            xs = sorted(means)
            ax.plot(xs, [means[x] for x in xs], marker="o", label=f"eps={epsilon:g}")
        ax.set_xlabel(hyper_name)
        ax.set_ylabel("AUC-ROC")
        ax.set_ylim(0, 1.02)
        ax.legend(fontsize=7)
        path = os.path.join(plot_dir, f"auc_roc_vs_{hyper_name}.png")
        fig.tight_layout()
        fig.savefig(path, dpi=120)
        plt.close(fig)
        made.append(path)
    return made
