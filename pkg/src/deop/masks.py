"""Mask containers and bilinear resampling between grids."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import numcore as nc
from .numcore import ContractError, ShapeError, Tensor


@lru_cache(maxsize=64)
def bilinear_matrix(n_out: int, n_in: int) -> np.ndarray:
    """1-D bilinear interpolation weights, half-pixel centers, edge clamped.

    Row ``i`` holds the weights that output sample ``i`` takes from the input.
    """
    R = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        src = max((i + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        lam = src - i0
        R[i, i0] += 1.0 - lam
        R[i, i1] += lam
    R.setflags(write=False)
    return R


def resample_array(maps: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinearly resample ``[N, H, W]`` maps to ``[N, h, w]`` (no gradient)."""
    h, w = size
    N, H, W = maps.shape
    if (H, W) == (h, w):
        return maps
    return bilinear_matrix(h, H) @ maps @ bilinear_matrix(w, W).T


def resample(maps: Tensor, size: tuple[int, int]) -> Tensor:
    """Differentiable bilinear resampling of ``[N, H, W]`` maps."""
    h, w = size
    N, H, W = maps.shape
    if (H, W) == (h, w):
        return maps
    Rw = Tensor(bilinear_matrix(w, W).T)
    Rh = Tensor(bilinear_matrix(h, H).T)
    x = nc.reshape(maps, (N * H, W)) @ Rw                        # N*H, w
    x = nc.reshape(nc.transpose(nc.reshape(x, (N, H, w)), (0, 2, 1)), (N * w, H)) @ Rh
    return nc.transpose(nc.reshape(x, (N, w, h)), (0, 2, 1))


@dataclass
class MaskSet:
    """``N`` proposal maps with values in [0, 1] over a spatial grid."""

    masks: Tensor

    def __post_init__(self):
        if not isinstance(self.masks, Tensor):
            self.masks = Tensor(self.masks)
        if self.masks.ndim != 3:
            raise ShapeError(f"MaskSet expects [N, H, W], got {self.masks.shape}")
        d = self.masks.data
        if d.min() < 0.0 or d.max() > 1.0:
            raise ContractError("MaskSet values must lie in [0, 1]")

    @property
    def n(self) -> int:
        return self.masks.shape[0]

    @property
    def grid(self) -> tuple[int, int]:
        return self.masks.shape[1], self.masks.shape[2]

    def numpy(self) -> np.ndarray:
        return self.masks.data

    def resampled(self, size: tuple[int, int]) -> Tensor:
        return resample(self.masks, size)

    def binarized(self, size: tuple[int, int] | None = None) -> np.ndarray:
        m = self.masks.data if size is None else resample_array(self.masks.data, size)
        return m >= 0.5
