"""Turn manifest rows into model inputs."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from ..connectome import AtlasLabels, Connectome, flatten, load_atlas, read_connectome_csv, subject_connectome
from ..nifti_io import Volume4D, read_volume
from ..volume_ops import SmoothingParams, aggregate_time, gaussian_smooth, trim_initial
from .manifest import CohortManifest


@dataclass(frozen=True)
class FeatureConfig:
    """How raw files become feature arrays; echoed into the run directory."""

    kind: str = "connectome"  # connectome | aggregate
    atlas: str = ""
    names: str = ""
    aggregate: str = "max"
    trim: int = 0
    fwhm_mm: float = 0.0
    zscore: bool = True
    threads: int = 1

    def echo(self) -> dict:
        return asdict(self)


def preprocess(v: Volume4D, trim: int = 0, fwhm_mm: float = 0.0) -> Volume4D:
    if trim:
        v = trim_initial(v, trim)
    if fwhm_mm > 0:
        v = gaussian_smooth(v, SmoothingParams(fwhm_mm, tuple(v.voxel_size)))
    return v


def zscore_volume(data: np.ndarray) -> np.ndarray:
    """Whole-volume z-score; a constant volume maps to zeros."""
    std = data.std()
    if std == 0:
        return np.zeros_like(data)
    return (data - data.mean()) / std


def _map(fn, items, threads: int):
    if threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def load_connectomes(m: CohortManifest, cfg: FeatureConfig, atlas: AtlasLabels | None = None) -> list[Connectome]:
    """Read CSV connectomes, or compute them from NIfTI volumes with the atlas."""

    def one(row) -> Connectome:
        if Path(row.path).suffix.lower() == ".csv":
            return read_connectome_csv(row.path, row.subject_id)
        v = preprocess(read_volume(row.path), cfg.trim, cfg.fwhm_mm)
        return subject_connectome(v, atlas, row.subject_id)

    if atlas is None and any(Path(r.path).suffix.lower() != ".csv" for r in m):
        if not cfg.atlas:
            raise ValueError("volume manifests need --atlas for connectome features")
        atlas = load_atlas(cfg.atlas, cfg.names or None)
    return _map(one, list(m), cfg.threads)


def aggregated_volumes(m: CohortManifest, cfg: FeatureConfig) -> np.ndarray:
    """(n, 1, X, Y, Z) array of time-aggregated volumes, z-scored by default.

    Files that are already 3D are used as they are.
    """

    def one(row) -> np.ndarray:
        v = read_volume(row.path)
        if v.n_timepoints == 1:
            data = v.data[..., 0]
        else:
            data = aggregate_time(preprocess(v, cfg.trim, cfg.fwhm_mm), cfg.aggregate).data
        return (zscore_volume(data) if cfg.zscore else data)[np.newaxis]

    arrays = _map(one, list(m), cfg.threads)
    shapes = {a.shape for a in arrays}
    if len(shapes) != 1:
        raise ValueError(f"volumes have differing shapes {sorted(shapes)}")
    return np.stack(arrays)


def build_features(m: CohortManifest, cfg: FeatureConfig) -> np.ndarray:
    if cfg.kind == "connectome":
        return np.stack([flatten(c) for c in load_connectomes(m, cfg)])
    if cfg.kind == "aggregate":
        return aggregated_volumes(m, cfg)
    raise ValueError(f"unknown feature kind {cfg.kind!r}")


def class_separation(features: np.ndarray, labels) -> float:
    """Distance between class means over the pooled within-class spread.

    ``||mu_1 - mu_0|| / sqrt(tr(S_w))`` where ``S_w`` is the pooled
    within-class covariance; scale-free and usable for any feature width.
    """
    X = np.asarray(features, dtype=np.float64).reshape(len(features), -1)
    y = np.asarray(labels)
    groups = [X[y == c] for c in (0, 1)]
    if min(len(g) for g in groups) < 2:
        raise ValueError("each class needs at least two samples")
    gap = np.linalg.norm(groups[1].mean(axis=0) - groups[0].mean(axis=0))
    within = sum(((g - g.mean(axis=0)) ** 2).sum() for g in groups) / (len(X) - 2)
    return float(gap / np.sqrt(within))
