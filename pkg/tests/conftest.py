"""Shared builders: synthetic images, fake dataset trees, tiny train configs."""

import numpy as np
import pytest
from PIL import Image

from robustad.data import CategoryData, ImageSample
from robustad.reweighting import DivergenceSpec
from robustad.trainer import TrainConfig


def flat_image(rng, size=64):
    """A roughly uniform texture: per-channel base color plus mild pixel noise."""
    base = 0.35 + 0.3 * rng.random(3)
    img = base[:, None, None] + 0.02 * rng.standard_normal((3, size, size))
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def blob_image(rng, size=64):
    """A flat image corrupted by one high-contrast rectangular blob."""
    img = flat_image(rng, size)
    h = int(rng.integers(size // 6, size // 3))
    w = int(rng.integers(size // 6, size // 3))
    y = int(rng.integers(0, size - h))
    x = int(rng.integers(0, size - w))
    shift = float(rng.choice([-0.35, 0.35]))
    img[:, y : y + h, x : x + w] = np.clip(img[:, y : y + h, x : x + w] + shift, 0.0, 1.0)
    mask = np.zeros((size, size), dtype=np.uint8)
    mask[y : y + h, x : x + w] = 1
    return img, mask


def toy_category(rng, n_train=32, n_test_normal=16, n_test_anomalous=16, size=64):
    """An in-memory flat-vs-blob category in the loader's output form."""
    data = CategoryData()
    for i in range(n_train):
        data.train_normals.append(
            ImageSample(flat_image(rng, size), 0, 0, source_path=f"mem://train/{i}")
        )
    for i in range(n_test_normal):
        data.test_normals.append(
            ImageSample(flat_image(rng, size), 0, 0, source_path=f"mem://test/good/{i}")
        )
    for i in range(n_test_anomalous):
        img, mask = blob_image(rng, size)
        data.test_anomalies.append(
            ImageSample(img, 1, 1, gt_mask=mask, source_path=f"mem://test/blob/{i}")
        )
    return data


def _save_png(path, chw):
    arr = (np.clip(chw, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(arr).save(path)


def build_texture_dir(root, n=4, size=64, seed=99):
    """A small on-disk texture corpus: checkerboards and block noise."""
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    for i in range(n):
        if i % 2 == 0:
            cell = 2 ** (2 + i // 2)
            yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
            img = np.stack([((yy // cell + xx // cell) % 2).astype(np.float32)] * 3)
            img = img * rng.uniform(0.5, 1.0) + (1 - img) * rng.uniform(0.0, 0.4)
        else:
            coarse = rng.random((3, 8, 8)).astype(np.float32)
            img = np.kron(coarse, np.ones((1, size // 8, size // 8), dtype=np.float32))
        _save_png(root / f"tex_{i}.png", img)
    return str(root)


def build_fake_mvtec(root, category="widget", n_train=6, n_test_good=3, n_test_defect=4, size=32, seed=5):
    rng = np.random.default_rng(seed)
    base = root / category
    (base / "train" / "good").mkdir(parents=True)
    (base / "test" / "good").mkdir(parents=True)
    (base / "test" / "scratch").mkdir(parents=True)
    (base / "ground_truth" / "scratch").mkdir(parents=True)
    for i in range(n_train):
        _save_png(base / "train" / "good" / f"{i:03d}.png", flat_image(rng, size))
    for i in range(n_test_good):
        _save_png(base / "test" / "good" / f"{i:03d}.png", flat_image(rng, size))
    for i in range(n_test_defect):
        img, mask = blob_image(rng, size)
        _save_png(base / "test" / "scratch" / f"{i:03d}.png", img)
        Image.fromarray((mask * 255).astype(np.uint8)).save(
            base / "ground_truth" / "scratch" / f"{i:03d}_mask.png"
        )
    return str(root)


def build_fake_visa(root, category="gizmo", n_train=5, n_test_good=3, n_test_bad=3, size=32, seed=6):
    rng = np.random.default_rng(seed)
    img_dir = root / category / "Data" / "Images"
    mask_dir = root / category / "Data" / "Masks" / "Anomaly"
    (img_dir / "Normal").mkdir(parents=True)
    (img_dir / "Anomaly").mkdir(parents=True)
    mask_dir.mkdir(parents=True)
    (root / "split_csv").mkdir(parents=True)
    rows = ["object,split,label,image,mask"]
    for i in range(n_train + n_test_good):
        rel = f"{category}/Data/Images/Normal/{i:04d}.png"
        _save_png(root / rel, flat_image(rng, size))
        split = "train" if i < n_train else "test"
        rows.append(f"{category},{split},normal,{rel},")
    for i in range(n_test_bad):
        rel = f"{category}/Data/Images/Anomaly/{i:04d}.png"
        rel_mask = f"{category}/Data/Masks/Anomaly/{i:04d}.png"
        img, mask = blob_image(rng, size)
        _save_png(root / rel, img)
        Image.fromarray((mask * 255).astype(np.uint8)).save(root / rel_mask)
        rows.append(f"{category},test,anomaly,{rel},{rel_mask}")
    (root / "split_csv" / "1cls.csv").write_text("\n".join(rows) + "\n")
    return str(root)


def tiny_train_config(**overrides):
    """A from-scratch CPU config small enough for unit tests."""
    defaults = dict(
        epochs=2,
        batch_size=8,
        learning_rate=1e-3,
        burn_in=1,
        divergence=DivergenceSpec(kind="alpha", alpha=0.1, lam=0.1),
        gamma=5.0,
        k_fraction=0.1,
        m_reference=200,
        seed=0,
        pseudo_ratio=0.5,
        backbone="tiny",
        stages=(1, 2, 3),
        input_resolution=32,
        pretrained=False,
        finetune=True,
        score_hidden=32,
        seg_hidden=16,
        device="cpu",
    )
    defaults.update(overrides)
    return TrainConfig(**defaults)


@pytest.fixture(scope="session")
def texture_dir(tmp_path_factory):
    return build_texture_dir(tmp_path_factory.mktemp("textures"))
