"""On-the-fly rotation, rescaling and mirroring of HU slices."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage


@dataclass(frozen=True)
class AugmentConfig:
    rotation_deg: float = 15.0
    scale_range: tuple[float, float] = (0.9, 1.1)
    mirror_p: float = 0.5
    fill_hu: float = -1000.0


def affine(image, angle_deg=0.0, scale=1.0, mirror=False, fill=-1000.0):
    """Rotate/scale about the image centre with bilinear resampling, then mirror left-right."""
    image = np.asarray(image)
    out = image
    if angle_deg != 0.0 or scale != 1.0:
        a = np.deg2rad(angle_deg)
        # maps output coordinates back to input coordinates
        inv = np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]]) / scale
        centre = (np.array(image.shape, dtype=np.float64) - 1.0) / 2.0
        offset = centre - inv @ centre
        out = ndimage.affine_transform(image.astype(np.float64), inv, offset=offset, order=1,
                                       mode="constant", cval=fill).astype(image.dtype)
    if mirror:
        out = out[:, ::-1]
    return np.ascontiguousarray(out)


def augment(image, rng, config: AugmentConfig = AugmentConfig()):
    angle = rng.uniform(-config.rotation_deg, config.rotation_deg)
    scale = rng.uniform(*config.scale_range)
    mirror = bool(rng.random() < config.mirror_p)
    return affine(image, angle, scale, mirror, config.fill_hu)
