"""RawPAD and DCTPAD feature extractors."""

from dataclasses import dataclass

import numpy as np
from scipy.fft import dctn, idctn

from .errors import ShapeError


@dataclass(frozen=True)
class DctConfig:
    eps: float = 1e-10
    crop: tuple | None = None

    def __post_init__(self):
        if not self.eps > 0:
            raise ValueError("eps must be positive")


def _check_target(src, target, what):
    h, w = int(target[0]), int(target[1])
    H, W = src
    if h < 1 or w < 1 or h > H or w > W:
        raise ShapeError(f"{what} size {(h, w)} must lie within source size {(H, W)}")
    return h, w


def downsample_nn(image, target):
    # source index floor(i * H / h) on each spatial axis; leading axes untouched
    x = np.asarray(image, dtype=np.float64)
    H, W = x.shape[-2:]
    h, w = _check_target((H, W), target, "target")
    rows = (np.arange(h) * H) // h
    cols = (np.arange(w) * W) // w
    return x[..., rows[:, None], cols[None, :]]


def center_crop(image, size):
    x = np.asarray(image, dtype=np.float64)
    H, W = x.shape[-2:]
    h, w = _check_target((H, W), size, "crop")
    top, left = (H - h) // 2, (W - w) // 2
    return x[..., top : top + h, left : left + w].copy()


def dct2d(channel):
    """Orthonormal type-II DCT over the last two axes."""
    return dctn(np.asarray(channel, dtype=np.float64), type=2, norm="ortho", axes=(-2, -1))


def idct2d(coef):
    return idctn(np.asarray(coef, dtype=np.float64), type=2, norm="ortho", axes=(-2, -1))


def log_dct_features(image, cfg=None):
    cfg = cfg or DctConfig()
    x = np.asarray(image, dtype=np.float64)
    if cfg.crop is not None:
        x = center_crop(x, cfg.crop)
    return np.log(np.abs(dct2d(x)) + cfg.eps)


def raw_features(image, size=None):
    """RawPAD: pixels, optionally downsampled with nearest neighbours."""
    x = np.asarray(image, dtype=np.float64)
    return downsample_nn(x, size) if size is not None else x.copy()
