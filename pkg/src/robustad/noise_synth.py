"""Pseudo-anomaly synthesis: Perlin-noise masks and opacity blending.

A pseudo-anomaly is built by thresholding 2-D Perlin noise into a binary
mask, then compositing an unrelated source texture into a normal image
under that mask with a random opacity. The compositing rule is

    out = (1 - M) * I + beta * (M * I_s) + (1 - beta) * (M * I)

so pixels outside the mask are bit-identical to the normal image and the
masked region is an affine mix of image and texture.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .exceptions import ConfigurationError

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff", ".webp")


@dataclass
class BlendSpec:
    """Configuration for mask generation and blending.

    beta_range: opacity interval the per-image opacity is drawn from.
    perlin_periods: admissible lattice periods per axis; one is drawn
        per axis per mask.
    mask_threshold: binarization threshold on [0, 1]-normalized noise.
    rotate_source: rotate the source texture by a random multiple of 90
        degrees before blending (square images only).
    """

    beta_range: tuple[float, float] = (0.1, 1.0)
    perlin_periods: tuple[int, ...] = (2, 4, 8, 16)
    mask_threshold: float = 0.5
    rotate_source: bool = True

    def __post_init__(self):
        lo, hi = self.beta_range
        if not (0.0 <= lo <= hi <= 1.0):
            raise ValueError(f"beta_range must be within [0, 1], got {self.beta_range}")
        if not self.perlin_periods or any(p < 1 for p in self.perlin_periods):
            raise ValueError("perlin_periods must be positive integers")


def perlin_noise_2d(height, width, period_y, period_x, rng):
    """Classic gradient-lattice Perlin noise, min-max normalized to [0, 1].

    Deterministic given ``rng``. Arbitrary output sizes are supported; the
    lattice has ``period_y`` x ``period_x`` cells.
    """
    if height <= 0 or width <= 0:
        raise ValueError(f"noise dimensions must be positive, got {height}x{width}")
    angles = 2.0 * np.pi * rng.random((period_y + 1, period_x + 1))
    grad = np.stack([np.cos(angles), np.sin(angles)], axis=-1)

    ys = np.linspace(0.0, period_y, height, endpoint=False)
    xs = np.linspace(0.0, period_x, width, endpoint=False)
    yi = ys.astype(int)
    xi = xs.astype(int)
    yf = (ys - yi)[:, None]
    xf = (xs - xi)[None, :]

    g00 = grad[yi][:, xi]
    g10 = grad[yi + 1][:, xi]
    g01 = grad[yi][:, xi + 1]
    g11 = grad[yi + 1][:, xi + 1]

    n00 = g00[..., 0] * yf + g00[..., 1] * xf
    n10 = g10[..., 0] * (yf - 1.0) + g10[..., 1] * xf
    n01 = g01[..., 0] * yf + g01[..., 1] * (xf - 1.0)
    n11 = g11[..., 0] * (yf - 1.0) + g11[..., 1] * (xf - 1.0)

    # quintic fade gives C2-continuous interpolation
    uy = yf * yf * yf * (yf * (yf * 6.0 - 15.0) + 10.0)
    ux = xf * xf * xf * (xf * (xf * 6.0 - 15.0) + 10.0)

    n0 = n00 + ux * (n01 - n00)
    n1 = n10 + ux * (n11 - n10)
    noise = n0 + uy * (n1 - n0)

    lo, hi = noise.min(), noise.max()
    if hi - lo < 1e-12:
        return np.zeros_like(noise)
    return (noise - lo) / (hi - lo)


def generate_perlin_mask(height, width, rng, spec=None):
    """Binary anomaly mask from thresholded Perlin noise.

    Returns a uint8 (height, width) array with entries in {0, 1}.
    """
    if height <= 0 or width <= 0:
        raise ValueError(f"mask dimensions must be positive, got {height}x{width}")
    spec = spec or BlendSpec()
    period_y = int(rng.choice(spec.perlin_periods))
    period_x = int(rng.choice(spec.perlin_periods))
    noise = perlin_noise_2d(height, width, period_y, period_x, rng)
    return (noise > spec.mask_threshold).astype(np.uint8)


def blend_pseudo_anomaly(normal, source, mask, beta):
    """Composite ``source`` into ``normal`` under a binary mask at opacity ``beta``.

    ``normal`` and ``source`` may be (H, W) or (C, H, W); ``mask`` is (H, W).
    Off-mask pixels of the output are bit-identical to ``normal``.
    """
    normal = np.asarray(normal)
    source = np.asarray(source)
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {mask.shape}")
    if normal.shape != source.shape:
        raise ValueError(f"image shapes differ: {normal.shape} vs {source.shape}")
    if normal.shape[-2:] != mask.shape:
        raise ValueError(f"mask {mask.shape} does not match image spatial dims {normal.shape[-2:]}")
    if not (0.0 <= beta <= 1.0):
        raise ValueError(f"beta must be in [0, 1], got {beta}")

    m = mask.astype(normal.dtype, copy=False)
    if normal.ndim == 3:
        m = m[None, :, :]
    return (1.0 - m) * normal + beta * (m * source) + (1.0 - beta) * (m * normal)


def list_texture_files(texture_dir):
    """All image files under ``texture_dir`` (recursive), sorted for determinism."""
    files = []
    for dirpath, _dirnames, filenames in os.walk(texture_dir):
        for name in filenames:
            if name.lower().endswith(IMAGE_SUFFIXES):
                files.append(os.path.join(dirpath, name))
    return sorted(files)


def sample_source_image(texture_dir, rng, size=(224, 224)):
    """Draw one texture image from a corpus directory, as float (3, H, W) in [0, 1].

    Unreadable files are skipped with a warning and the draw is repeated on
    the remaining candidates.
    """
    candidates = list_texture_files(texture_dir)
    if not candidates:
        raise ConfigurationError(f"texture corpus {texture_dir!r} contains no image files")
    while candidates:
        path = candidates[int(rng.integers(len(candidates)))]
        try:
            with Image.open(path) as im:
                im = im.convert("RGB").resize((size[1], size[0]), Image.BILINEAR)
                arr = np.asarray(im, dtype=np.float32) / 255.0
            return np.ascontiguousarray(arr.transpose(2, 0, 1))
        except OSError as exc:
            logger.warning("skipping unreadable texture %s: %s", path, exc)
            candidates.remove(path)
    raise ConfigurationError(f"no readable image in texture corpus {texture_dir!r}")


def _procedural_texture(rng, size):
    # coarse random noise upsampled to image size; stand-in when no corpus is configured
    cells = 8
    coarse = rng.random((3, cells, cells)).astype(np.float32)
    reps = (size[0] + cells - 1) // cells, (size[1] + cells - 1) // cells
    tex = np.kron(coarse, np.ones((1,) + reps, dtype=np.float32))
    return tex[:, : size[0], : size[1]]


@dataclass
class PseudoAnomalySynthesizer:
    """Stateless factory turning normal images into pseudo-anomalies.

    When ``texture_dir`` is None, procedural block-noise textures are used
    instead of an external corpus. Safe to call from parallel workers as
    long as each owns its own ``rng``.
    """

    texture_dir: str | None = None
    spec: BlendSpec = field(default_factory=BlendSpec)
    mask_retries: int = 4

    def make(self, normal, rng):
        """Return (blended image, mask, beta) for one normal image (C, H, W)."""
        normal = np.asarray(normal, dtype=np.float32)
        h, w = normal.shape[-2:]
        mask = generate_perlin_mask(h, w, rng, self.spec)
        for _ in range(self.mask_retries):
            if mask.any():
                break
            mask = generate_perlin_mask(h, w, rng, self.spec)
        if self.texture_dir is not None:
            source = sample_source_image(self.texture_dir, rng, size=(h, w))
        else:
            source = _procedural_texture(rng, (h, w))
        if self.spec.rotate_source and h == w:
            source = np.ascontiguousarray(np.rot90(source, k=int(rng.integers(4)), axes=(1, 2)))
        beta = float(rng.uniform(*self.spec.beta_range))
        blended = blend_pseudo_anomaly(normal, source, mask, beta).astype(np.float32)
        return blended, mask, beta
