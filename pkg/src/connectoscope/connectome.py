"""Atlas-based ROI time series and Pearson functional connectomes."""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import EmptyGroup, EmptyRoi, EmptyRoiWarning, HeaderError, IoError, ShapeMismatch
from .nifti_io import Volume4D, _check_affine, read_volume

_CONSTANT_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class AtlasLabels:
    """Integer label grid (0 = background, k = ROI k) plus one name per ROI."""

    labels: np.ndarray
    affine: np.ndarray
    names: tuple[str, ...]

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim == 4 and labels.shape[3] == 1:
            labels = labels[..., 0]
        if labels.ndim != 3:
            raise ShapeMismatch(f"atlas labels must be 3D, got shape {labels.shape}")
        if not np.all(labels == np.rint(labels)) or labels.min() < 0:
            raise HeaderError("atlas labels must be non-negative integers")
        labels = labels.astype(np.int64)
        names = tuple(self.names)
        if labels.max() > len(names):
            raise HeaderError(f"label {labels.max()} has no name ({len(names)} names given)")
        affine = np.array(self.affine, dtype=np.float64)
        _check_affine(affine)
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "affine", affine)
        object.__setattr__(self, "names", names)

    @property
    def roi_count(self) -> int:
        return len(self.names)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.labels.shape

    def voxel_counts(self) -> np.ndarray:
        """Voxels per ROI, index k-1 for label k."""
        return np.bincount(self.labels.ravel(), minlength=self.roi_count + 1)[1:]

    @property
    def empty_rois(self) -> list[int]:
        return [k + 1 for k, n in enumerate(self.voxel_counts()) if n == 0]


@dataclass(frozen=True, eq=False)
class RoiTimeSeries:
    values: np.ndarray
    roi_names: tuple[str, ...]
    constant: np.ndarray = field(default=None)  # type: ignore[assignment]

    @classmethod
    def from_raw(cls, raw: np.ndarray, roi_names: Sequence[str] | None = None) -> "RoiTimeSeries":
        """Z-score each column of a T x R matrix over time (population std)."""
        raw = np.asarray(raw, dtype=np.float64)
        if raw.ndim != 2 or raw.shape[0] < 2:
            raise ShapeMismatch(f"need a T x R matrix with T >= 2, got {raw.shape}")
        mean = raw.mean(axis=0)
        centered = raw - mean
        std = np.sqrt((centered**2).mean(axis=0))
        constant = std <= _CONSTANT_TOL * np.maximum(1.0, np.abs(mean))
        safe = np.where(constant, 1.0, std)
        values = np.where(constant, 0.0, centered / safe)
        if roi_names is None:
            roi_names = [f"roi_{k + 1}" for k in range(raw.shape[1])]
        return cls(values, tuple(roi_names), constant)


@dataclass(frozen=True, eq=False)
class Connectome:
    matrix: np.ndarray
    roi_names: tuple[str, ...]
    subject_id: str = ""

    @property
    def roi_count(self) -> int:
        return self.matrix.shape[0]


def load_names(path: str | Path) -> list[str]:
    """One ROI name per line; line k names label k."""
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    return [line.strip() for line in lines if line.strip()]


def load_atlas(path: str | Path, names_path: str | Path | None = None) -> AtlasLabels:
    vol = read_volume(path)
    labels = vol.data[..., 0]
    if names_path is not None:
        names = load_names(names_path)
    else:
        names = [f"roi_{k}" for k in range(1, int(labels.max()) + 1)]
    return AtlasLabels(labels, vol.affine, tuple(names))


def threshold_probabilistic_atlas(
    prob: Volume4D, names: Sequence[str], threshold: float = 0.25
) -> AtlasLabels:
    """Max-probability labelling of a 4D probabilistic atlas.

    Voxel gets label argmax_k + 1 when that probability reaches ``threshold``,
    background otherwise.
    """
    best = prob.data.argmax(axis=3)
    peak = prob.data.max(axis=3)
    labels = np.where(peak >= threshold, best + 1, 0)
    return AtlasLabels(labels, prob.affine, tuple(names))


def resample_labels(atlas: AtlasLabels, target_shape: Sequence[int], target_affine: np.ndarray) -> AtlasLabels:
    """Nearest-neighbour labels on the target grid.

    Each target voxel centre is mapped through target->world->atlas; points
    outside the atlas grid are background.  ROIs left without voxels are
    reported through an ``EmptyRoiWarning`` and via ``empty_rois``.
    """
    target_affine = np.asarray(target_affine, dtype=np.float64)
    _check_affine(target_affine)
    shape = tuple(int(s) for s in target_shape[:3])
    to_atlas = np.linalg.inv(atlas.affine) @ target_affine
    grid = np.indices(shape, dtype=np.float64).reshape(3, -1)
    coords = to_atlas[:3, :3] @ grid + to_atlas[:3, 3:4]
    # round half up, deterministic on exact ties
    idx = np.floor(coords + 0.5).astype(np.int64)
    inside = np.all((idx >= 0) & (idx < np.array(atlas.shape)[:, None]), axis=0)
    labels = np.zeros(grid.shape[1], dtype=np.int64)
    src = idx[:, inside]
    labels[inside] = atlas.labels[src[0], src[1], src[2]]
    out = AtlasLabels(labels.reshape(shape), target_affine, atlas.names)
    lost = [k for k in out.empty_rois if k not in atlas.empty_rois]
    if lost:
        warnings.warn(f"ROIs emptied by resampling: {lost}", EmptyRoiWarning, stacklevel=2)
    return out


def roi_mean_series(v: Volume4D, atlas: AtlasLabels) -> np.ndarray:
    """T x R matrix of ROI mean intensities."""
    if tuple(v.shape[:3]) != atlas.shape:
        raise ShapeMismatch(f"volume grid {v.shape[:3]} != atlas grid {atlas.shape}")
    counts = atlas.voxel_counts()
    empty = [k + 1 for k, n in enumerate(counts) if n == 0]
    if empty:
        raise EmptyRoi(f"ROIs without voxels: {empty}")
    flat_labels = atlas.labels.ravel(order="C")
    order = np.argsort(flat_labels, kind="stable")
    sorted_labels = flat_labels[order]
    series = v.data.reshape(-1, v.n_timepoints)[order]
    starts = np.searchsorted(sorted_labels, np.arange(1, atlas.roi_count + 1))
    sums = np.add.reduceat(series, starts, axis=0)
    return (sums / counts[:, None]).T


def extract_roi_timeseries(v: Volume4D, atlas: AtlasLabels) -> RoiTimeSeries:
    if v.n_timepoints < 2:
        raise ShapeMismatch("need at least two time points")
    return RoiTimeSeries.from_raw(roi_mean_series(v, atlas), atlas.names)


def pearson_matrix(ts: RoiTimeSeries, subject_id: str = "") -> Connectome:
    """ROI x ROI Pearson correlation of standardised series.

    Constant ROIs correlate 0 with everything else; the diagonal is exactly 1.
    """
    z = np.asarray(ts.values, dtype=np.float64)
    if z.shape[0] < 2:
        raise ShapeMismatch("need at least two time points")
    gram = z.T @ z
    gram = (gram + gram.T) / 2.0
    diag = np.diag(gram).copy()
    constant = ts.constant if ts.constant is not None else diag == 0
    safe = np.where(constant, 1.0, diag)
    r = gram / np.sqrt(np.outer(safe, safe))
    r[constant, :] = 0.0
    r[:, constant] = 0.0
    np.clip(r, -1.0, 1.0, out=r)
    np.fill_diagonal(r, 1.0)
    return Connectome(r, tuple(ts.roi_names), subject_id)


def subject_connectome(v: Volume4D, atlas: AtlasLabels, subject_id: str = "") -> Connectome:
    return pearson_matrix(extract_roi_timeseries(v, atlas), subject_id)


def group_average(connectomes: Sequence[Connectome], fisher_z: bool = False, subject_id: str = "group") -> Connectome:
    """Elementwise mean, summed sequentially in input order.

    With ``fisher_z`` the mean is taken over arctanh(r) and mapped back.
    """
    if len(connectomes) == 0:
        raise EmptyGroup("cannot average an empty group")
    first = connectomes[0]
    for c in connectomes[1:]:
        if c.matrix.shape != first.matrix.shape or tuple(c.roi_names) != tuple(first.roi_names):
            raise ShapeMismatch("connectomes differ in ROI count or names")
    total = np.zeros_like(first.matrix)
    for c in connectomes:
        m = c.matrix
        if fisher_z:
            m = np.arctanh(np.clip(m, -1 + 1e-15, 1 - 1e-15))
        total = total + m
    mean = total / len(connectomes)
    if fisher_z:
        mean = np.tanh(mean)
    mean = (mean + mean.T) / 2.0
    np.fill_diagonal(mean, 1.0)
    return Connectome(mean, first.roi_names, subject_id)


def flatten(c: Connectome) -> np.ndarray:
    return np.array(c.matrix, dtype=np.float64).ravel(order="C")


def write_connectome_csv(c: Connectome, path: str | Path) -> None:
    """Header row of ROI names, then R rows of full-precision values."""
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(c.roi_names)
            for row in c.matrix:
                w.writerow([repr(float(x)) for x in row])
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def read_connectome_csv(path: str | Path, subject_id: str | None = None) -> Connectome:
    path = Path(path)
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    names, body = rows[0], rows[1:]
    matrix = np.array([[float(x) for x in row] for row in body], dtype=np.float64)
    if matrix.shape != (len(names), len(names)):
        raise ShapeMismatch(f"{path}: expected {len(names)}x{len(names)} matrix")
    return Connectome(matrix, tuple(names), subject_id if subject_id is not None else path.stem)


def edge_list(c: Connectome, threshold: float) -> list[tuple[int, int, float]]:
    """(i, j, r) with i < j (1-based) and |r| >= threshold, strongest first."""
    r = c.matrix
    n = r.shape[0]
    iu, ju = np.triu_indices(n, k=1)
    vals = r[iu, ju]
    keep = np.abs(vals) >= threshold
    edges = [(int(i) + 1, int(j) + 1, float(v)) for i, j, v in zip(iu[keep], ju[keep], vals[keep])]
    edges.sort(key=lambda e: -abs(e[2]))
    return edges


def _diverging_color(r: float) -> str:
    # blue (-1) -> white (0) -> red (+1)
    neg, mid, pos = (59, 76, 192), (247, 247, 247), (180, 4, 38)
    r = float(np.clip(r, -1.0, 1.0))
    lo, hi, t = (neg, mid, r + 1.0) if r < 0 else (mid, pos, r)
    rgb = tuple(round(a + (b - a) * t) for a, b in zip(lo, hi))
    return "#%02x%02x%02x" % rgb


def render_heatmap_svg(c: Connectome, cell: int = 10) -> str:
    n = c.roi_count
    size = n * cell
    legend_x = size + 20
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{legend_x + 60}" height="{max(size, 120)}">',
        '<defs><linearGradient id="scale" x1="0" y1="1" x2="0" y2="0">'
        f'<stop offset="0" stop-color="{_diverging_color(-1)}"/>'
        f'<stop offset="0.5" stop-color="{_diverging_color(0)}"/>'
        f'<stop offset="1" stop-color="{_diverging_color(1)}"/>'
        "</linearGradient></defs>",
        '<g class="matrix">',
    ]
    for i in range(n):
        for j in range(n):
            v = c.matrix[i, j]
            parts.append(
                f'<rect class="cell" x="{j * cell}" y="{i * cell}" width="{cell}" height="{cell}" '
                f'fill="{_diverging_color(v)}"><title>{c.roi_names[i]} - {c.roi_names[j]}: {v:.6f}</title></rect>'
            )
    parts.append("</g>")
    parts.append(f'<g class="legend"><rect x="{legend_x}" y="10" width="12" height="100" fill="url(#scale)"/>')
    for label, y in (("1", 14), ("0", 64), ("-1", 114)):
        parts.append(f'<text x="{legend_x + 16}" y="{y}" font-size="10">{label}</text>')
    parts.append("</g></svg>")
    return "\n".join(parts) + "\n"


def export_connectivity(c: Connectome, threshold: float, out: str | Path, format: str = "edge-csv") -> None:
    if not 0.0 <= threshold <= 1.0:
        raise ValueError("threshold must lie in [0, 1]")
    try:
        if format == "edge-csv":
            with open(out, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["roi_i", "roi_j", "name_i", "name_j", "r"])
                for i, j, r in edge_list(c, threshold):
                    w.writerow([i, j, c.roi_names[i - 1], c.roi_names[j - 1], f"{r:.6f}"])
        elif format == "svg-heatmap":
            Path(out).write_text(render_heatmap_svg(c))
        else:
            raise ValueError(f"unknown export format {format!r}")
    except OSError as exc:
        raise IoError(f"cannot write {out}: {exc}") from exc
