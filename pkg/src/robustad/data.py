"""Dataset ingestion, contamination injection, and training-batch assembly.

Loads MVTec- and VisA-layout categories into a common in-memory form,
replaces a known fraction of training normals with disguised test-set
anomalies (plus pixel noise), and builds minibatches that mix contaminated
normals with on-the-fly pseudo-anomalies. The trainer only ever reads the
contaminated labels; true labels ride along for evaluation and audits.

Batch construction is safe to run from parallel workers as long as each
worker owns its own seeded rng; contamination injection is a one-shot
serial step.
"""

from __future__ import annotations

import csv
import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .exceptions import ConfigurationError
from .noise_synth import PseudoAnomalySynthesizer

logger = logging.getLogger(__name__)

MVTEC_LAYOUT = "<root>/<category>/train/good/*.png, <root>/<category>/test/<defect>/*.png"
VISA_LAYOUT = "<root>/split_csv/1cls.csv with columns (object, split, label, image, mask)"


@dataclass
class ImageSample:
    """One image with its contaminated label, held-out true label, and mask."""

    image: np.ndarray  # float32 (3, H, W) in [0, 1]
    y_contaminated: int
    y_true: int
    is_pseudo: bool = False
    gt_mask: np.ndarray | None = None  # uint8 (H, W)
    source_path: str = ""
    noise_seed: int | None = None

    def __post_init__(self):
        if self.gt_mask is None:
            self.gt_mask = np.zeros(self.image.shape[-2:], dtype=np.uint8)


@dataclass
class ContaminationSpec:
    """How much of the training set is secretly anomalous, and how it is disguised."""

    epsilon: float
    noise_sigma: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.epsilon < 0.5):
            raise ValueError(f"contamination ratio must be in [0, 0.5), got {self.epsilon}")
        if self.noise_sigma < 0:
            raise ValueError(f"noise sigma must be nonnegative, got {self.noise_sigma}")


@dataclass
class CategoryData:
    train_normals: list[ImageSample] = field(default_factory=list)
    test_normals: list[ImageSample] = field(default_factory=list)
    test_anomalies: list[ImageSample] = field(default_factory=list)


def _load_image(path, resize, crop):
    with Image.open(path) as im:
        im = im.convert("RGB").resize((resize, resize), Image.BILINEAR)
        arr = np.asarray(im, dtype=np.float32) / 255.0
    off = (resize - crop) // 2
    arr = arr[off : off + crop, off : off + crop]
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def _load_mask(path, resize, crop):
    with Image.open(path) as im:
        im = im.convert("L").resize((resize, resize), Image.NEAREST)
        arr = np.asarray(im)
    off = (resize - crop) // 2
    arr = arr[off : off + crop, off : off + crop]
    return (arr > 0).astype(np.uint8)


def _list_images(directory):
    suffixes = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")
    return sorted(
        os.path.join(directory, f)
        for f in os.listdir(directory)
        if f.lower().endswith(suffixes)
    )


def _load_mvtec(root, category, resize, crop):
    cat_dir = os.path.join(root, category)
    train_dir = os.path.join(cat_dir, "train", "good")
    test_dir = os.path.join(cat_dir, "test")
    if not os.path.isdir(train_dir) or not os.path.isdir(test_dir):
        raise ConfigurationError(
            f"{cat_dir!r} does not follow the expected layout: {MVTEC_LAYOUT}"
        )
    data = CategoryData()
    for path in _list_images(train_dir):
        data.train_normals.append(
            ImageSample(_load_image(path, resize, crop), 0, 0, source_path=path)
        )
    for defect in sorted(os.listdir(test_dir)):
        defect_dir = os.path.join(test_dir, defect)
        if not os.path.isdir(defect_dir):
            continue
        for path in _list_images(defect_dir):
            if defect == "good":
                data.test_normals.append(
                    ImageSample(_load_image(path, resize, crop), 0, 0, source_path=path)
                )
            else:
                stem = os.path.splitext(os.path.basename(path))[0]
                mask_path = os.path.join(cat_dir, "ground_truth", defect, stem + "_mask.png")
                mask = _load_mask(mask_path, resize, crop) if os.path.isfile(mask_path) else None
                data.test_anomalies.append(
                    ImageSample(_load_image(path, resize, crop), 1, 1, gt_mask=mask, source_path=path)
                )
    return data


def _load_visa(root, category, resize, crop):
    csv_path = os.path.join(root, "split_csv", "1cls.csv")
    if not os.path.isfile(csv_path):
        raise ConfigurationError(f"{root!r} does not follow the expected layout: {VISA_LAYOUT}")
    data = CategoryData()
    with open(csv_path, newline="") as fh:
        for row in csv.DictReader(fh):
            if row["object"] != category:
                continue
            path = os.path.join(root, row["image"])
            label = row["label"].strip().lower()
            if row["split"] == "train":
                if label == "normal":
                    data.train_normals.append(
                        ImageSample(_load_image(path, resize, crop), 0, 0, source_path=path)
                    )
            elif row["split"] == "test":
                if label == "normal":
                    data.test_normals.append(
                        ImageSample(_load_image(path, resize, crop), 0, 0, source_path=path)
                    )
                else:
                    mask_rel = (row.get("mask") or "").strip()
                    mask = (
                        _load_mask(os.path.join(root, mask_rel), resize, crop) if mask_rel else None
                    )
                    data.test_anomalies.append(
                        ImageSample(_load_image(path, resize, crop), 1, 1, gt_mask=mask, source_path=path)
                    )
    return data


def load_category(root, dataset_kind, category, resize=256, crop=224):
    """Load one category into memory, resized then center-cropped.

    ``dataset_kind`` selects the on-disk layout: ``mvtec`` (directory-tree)
    or ``visa`` (split-CSV driven). Sample order is deterministic.
    """
    loaders = {"mvtec": _load_mvtec, "visa": _load_visa}
    if dataset_kind not in loaders:
        raise ValueError(f"dataset_kind must be one of {sorted(loaders)}, got {dataset_kind!r}")
    data = loaders[dataset_kind](root, category, resize, crop)
    if not data.train_normals:
        raise ConfigurationError(f"category {category!r} under {root!r} has no training images")
    return data


def inject_contamination(train_normals, test_anomalies, spec):
    """Replace floor(epsilon * n) training normals with disguised anomalies.

    The replacements are test-set anomaly images with i.i.d. Gaussian pixel
    noise added and clipped back to [0, 1]; they keep y_contaminated=0 so
    the trainer cannot tell them apart. Returns (samples, manifest) where
    the manifest records every sample's provenance for audits.
    """
    n = len(train_normals)
    k = int(spec.epsilon * n)
    rng = np.random.default_rng(spec.seed)
    if k > 0 and not test_anomalies:
        raise ConfigurationError("contamination requested but no test anomalies to sample from")

    samples = list(train_normals)
    replaced = sorted(rng.choice(n, size=k, replace=False).tolist()) if k else []
    if k:
        if k <= len(test_anomalies):
            picks = rng.choice(len(test_anomalies), size=k, replace=False)
        else:
            picks = rng.choice(len(test_anomalies), size=k, replace=True)
    else:
        picks = []

    overlap_paths = []
    for slot, pick in zip(replaced, picks):
        origin = test_anomalies[int(pick)]
        noise_seed = int(rng.integers(2**31 - 1))
        noisy = origin.image + np.random.default_rng(noise_seed).normal(
            0.0, spec.noise_sigma, size=origin.image.shape
        )
        samples[slot] = ImageSample(
            image=np.clip(noisy, 0.0, 1.0).astype(np.float32),
            y_contaminated=0,
            y_true=1,
            source_path=origin.source_path,
            noise_seed=noise_seed,
        )
        overlap_paths.append(origin.source_path)

    if overlap_paths:
        logger.warning(
            "contamination reuses %d test-set anomalies still present in the test set "
            "(train/test overlap audit)",
            len(overlap_paths),
        )
    manifest = {
        "epsilon": spec.epsilon,
        "noise_sigma": spec.noise_sigma,
        "seed": spec.seed,
        "n_train": n,
        "n_contaminated": k,
        "test_overlap_paths": overlap_paths,
        "samples": [
            {"index": i, "source_path": s.source_path, "y_true": s.y_true, "noise_seed": s.noise_seed}
            for i, s in enumerate(samples)
        ],
    }
    return samples, manifest


def write_manifest(manifest, path):
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2)


def make_training_batch(x_n_samples, pseudo_ratio, synth: PseudoAnomalySynthesizer, rng, batch_size=None):
    """Assemble one minibatch mixing contaminated normals with pseudo-anomalies.

    floor(pseudo_ratio * batch) entries are pseudo-anomalies blended on the
    fly from the batch's own normal-labeled images and carry their Perlin
    ground-truth mask; the rest pass through with all-zero masks.
    """
    batch_size = batch_size if batch_size is not None else len(x_n_samples)
    if batch_size < 2:
        raise ValueError(f"batch size must be at least 2, got {batch_size}")
    if not (0.0 <= pseudo_ratio <= 1.0):
        raise ValueError(f"pseudo_ratio must be in [0, 1], got {pseudo_ratio}")
    idx = rng.choice(len(x_n_samples), size=batch_size, replace=batch_size > len(x_n_samples))
    n_pseudo = int(pseudo_ratio * batch_size)
    batch = []
    for j, i in enumerate(idx):
        base = x_n_samples[int(i)]
        if j < n_pseudo:
            blended, mask, _beta = synth.make(base.image, rng)
            batch.append(
                ImageSample(
                    image=blended,
                    y_contaminated=1,
                    y_true=1,
                    is_pseudo=True,
                    gt_mask=mask,
                    source_path=base.source_path,
                )
            )
        else:
            batch.append(base)
    return batch


def iter_epoch_batches(samples, batch_size, pseudo_ratio, synth, rng):
    """Yield one epoch of shuffled minibatches; tail chunks below 2 are dropped."""
    perm = rng.permutation(len(samples))
    for start in range(0, len(samples), batch_size):
        chunk = [samples[int(i)] for i in perm[start : start + batch_size]]
        if len(chunk) < 2:
            continue
        yield make_training_batch(chunk, pseudo_ratio, synth, rng, batch_size=len(chunk))
