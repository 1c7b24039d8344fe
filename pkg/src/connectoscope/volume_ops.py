"""Voxel-level transforms applied before feature extraction."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import RangeError, TrimTooLong
from .nifti_io import Volume4D, _check_affine

FWHM_TO_SIGMA = 1.0 / math.sqrt(8.0 * math.log(2.0))

ROTATION_ANGLES = (-20.0, -10.0, -5.0, 5.0, 10.0, 20.0)

INT16_HALF_RANGE = 32767


@dataclass(frozen=True, eq=False)
class Volume3D:
    data: np.ndarray
    affine: np.ndarray = field(default_factory=lambda: np.eye(4))

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64, copy=True)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValueError(f"expected a non-empty 3D array, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise RangeError("volume contains non-finite voxel values")
        affine = np.array(self.affine, dtype=np.float64, copy=True)
        _check_affine(affine)
        data.setflags(write=False)
        affine.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "affine", affine)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass(frozen=True)
class SmoothingParams:
    fwhm_mm: float
    voxel_size_mm: tuple[float, float, float]
    truncate_radius_sigmas: float = 4.0

    def __post_init__(self):
        if not self.fwhm_mm > 0:
            raise ValueError("fwhm_mm must be positive")
        if len(self.voxel_size_mm) != 3 or not all(s > 0 for s in self.voxel_size_mm):
            raise ValueError("voxel_size_mm must be three positive numbers")
        if not self.truncate_radius_sigmas > 0:
            raise ValueError("truncate_radius_sigmas must be positive")

    @classmethod
    def for_volume(cls, fwhm_mm: float, volume: Volume4D, **kwargs) -> "SmoothingParams":
        return cls(fwhm_mm, tuple(float(s) for s in volume.voxel_size), **kwargs)

    @property
    def sigma_vox(self) -> tuple[float, float, float]:
        return tuple(self.fwhm_mm * FWHM_TO_SIGMA / d for d in self.voxel_size_mm)


def trim_initial(v: Volume4D, n: int) -> Volume4D:
    """Drop the first ``n`` frames (scanner saturation)."""
    if n < 0:
        raise ValueError("n must be non-negative")
    if n >= v.n_timepoints:
        raise TrimTooLong(f"cannot trim {n} of {v.n_timepoints} frames")
    return v.replace(v.data[..., n:])


def gaussian_kernel_1d(sigma: float, truncate: float = 4.0) -> np.ndarray:
    """Unit-sum sampled Gaussian on [-r, r], r = ceil(truncate * sigma)."""
    radius = max(int(math.ceil(truncate * sigma)), 0)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    w = np.exp(-0.5 * (x / sigma) ** 2)
    return w / w.sum()


def _correlate_axis(data: np.ndarray, weights: np.ndarray, axis: int) -> np.ndarray:
    radius = len(weights) // 2
    if radius == 0:
        return data * weights[0]
    pad = [(0, 0)] * data.ndim
    pad[axis] = (radius, radius)
    padded = np.pad(data, pad, mode="symmetric")
    n = data.shape[axis]
    out = np.zeros_like(data)
    # fixed tap order keeps results independent of any chunking
    for k, w in enumerate(weights):
        out += w * np.take(padded, np.arange(k, k + n), axis=axis)
    return out


def smooth_array(data: np.ndarray, p: SmoothingParams) -> np.ndarray:
    """Separable Gaussian over the first three axes of ``data``."""
    out = np.asarray(data, dtype=np.float64)
    for axis, sigma in enumerate(p.sigma_vox):
        out = _correlate_axis(out, gaussian_kernel_1d(sigma, p.truncate_radius_sigmas), axis)
    return out


def gaussian_smooth(v: Volume4D, p: SmoothingParams) -> Volume4D:
    """Smooth every frame with a separable Gaussian, half-sample symmetric borders."""
    return v.replace(smooth_array(v.data, p))


def aggregate_time(v: Volume4D, mode: str = "max") -> Volume3D:
    if mode == "max":
        data = v.data.max(axis=3)
    elif mode == "min":
        data = v.data.min(axis=3)
    else:
        raise ValueError(f"mode must be 'max' or 'min', not {mode!r}")
    return Volume3D(data, v.affine)


def quantize_int(v: Volume4D) -> tuple[Volume4D, float, float]:
    """Map [min, max] affinely onto [-32767, 32767].

    Returns the integer codes (stored as float) with the slope and intercept
    that reconstruct ``codes * slope + inter``.
    """
    data = np.asarray(v.data)
    if not np.all(np.isfinite(data)):
        raise RangeError("cannot quantize non-finite values")
    vmin, vmax = float(data.min()), float(data.max())
    if vmin == vmax:
        return v.replace(np.zeros_like(data)), 1.0, vmin
    slope = (vmax - vmin) / (2 * INT16_HALF_RANGE)
    inter = (vmax + vmin) / 2.0
    codes = np.clip(np.rint((data - inter) / slope), -INT16_HALF_RANGE, INT16_HALF_RANGE)
    return v.replace(codes), slope, inter


def dequantize(codes: Volume4D, slope: float, inter: float) -> Volume4D:
    return codes.replace(codes.data * slope + inter)


def draw_rotation_angle(rng: np.random.Generator) -> float:
    return ROTATION_ANGLES[int(rng.integers(len(ROTATION_ANGLES)))]


def rotate_axial_array(data: np.ndarray, angle_deg: float) -> np.ndarray:
    """Rotate a (X, Y, ...) array about its centre in the x-y plane.

    Each output voxel pulls its value from the inverse-rotated position with
    bilinear weights; neighbours outside the grid contribute zero.  Trailing
    axes (z, channels) are carried along unchanged.
    """
    if not math.isfinite(angle_deg):
        raise ValueError("angle must be finite")
    nx, ny = data.shape[:2]
    theta = math.radians(angle_deg)
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    cx, cy = (nx - 1) / 2.0, (ny - 1) / 2.0
    ii, jj = np.meshgrid(np.arange(nx, dtype=np.float64), np.arange(ny, dtype=np.float64), indexing="ij")
    dx, dy = ii - cx, jj - cy
    sx = cx + cos_t * dx + sin_t * dy
    sy = cy - sin_t * dx + cos_t * dy

    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    fx = sx - x0
    fy = sy - y0
    out = np.zeros(data.shape, dtype=np.float64)
    trailing = (1,) * (data.ndim - 2)
    for ox, wx in ((0, 1.0 - fx), (1, fx)):
        for oy, wy in ((0, 1.0 - fy), (1, fy)):
            xi, yi = x0 + ox, y0 + oy
            ok = (xi >= 0) & (xi < nx) & (yi >= 0) & (yi < ny)
            w = np.where(ok, wx * wy, 0.0)
            vals = data[np.clip(xi, 0, nx - 1), np.clip(yi, 0, ny - 1)]
            out += w.reshape(w.shape + trailing) * vals
    return out


def rotate_axial(
    v: Volume3D, angle_deg: float | None = None, rng: np.random.Generator | None = None
) -> Volume3D:
    """Axial-plane rotation; with ``rng`` the angle is drawn from ROTATION_ANGLES."""
    if rng is not None:
        angle_deg = draw_rotation_angle(rng)
    if angle_deg is None:
        raise ValueError("give an angle or a random generator")
    return Volume3D(rotate_axial_array(v.data, angle_deg), v.affine)
