"""PNG overlays of heat maps and ground truth on the diagnosis ceT1w."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .volume import Volume


def _window(img):
    lo, hi = np.percentile(img, [1, 99])
    return np.clip((img - lo) / (hi - lo if hi > lo else 1.0), 0, 1)


def overlay_slice(base, heat, mask=None, z=None, threshold=0.5, zoom=4):
    """RGB image of slice ``z``: heat in red (opacity = probability), ground-truth outline in green.

    ``z`` defaults to the slice with the largest heat-map sum. Rows run along y, columns along x.
    """
    b = base.data if isinstance(base, Volume) else np.asarray(base)
    h = heat.data if isinstance(heat, Volume) else np.asarray(heat)
    m = None if mask is None else (mask.data if isinstance(mask, Volume) else np.asarray(mask)) > 0
    if z is None:
        z = int(np.argmax(h.sum(axis=(0, 1))))
    gray = _window(b[:, :, z].astype(np.float64)).T
    p = h[:, :, z].astype(np.float64).T
    rgb = np.repeat(gray[..., None], 3, axis=2)
    alpha = np.where(p > threshold, 0.8, 0.6 * p)[..., None]
    rgb = (1 - alpha) * rgb + alpha * np.array([1.0, 0.0, 0.0])
    if m is not None:
        s = m[:, :, z].T
        edge = s & ~ndimage.binary_erosion(s)
        rgb[edge] = (0.0, 1.0, 0.0)
    img = Image.fromarray((rgb * 255).round().astype(np.uint8)[::-1], "RGB")
    return img.resize((img.width * zoom, img.height * zoom), Image.NEAREST)


def save_overlay(case, heat, path, z=None, threshold=0.5):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    overlay_slice(case.diagnosis["ceT1w"], heat, case.mask, z, threshold).save(path)
    return path
