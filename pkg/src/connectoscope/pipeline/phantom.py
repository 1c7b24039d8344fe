"""Synthetic cohorts with known class structure.

Every ROI is a rectangular block of a regular grid.  Voxels carry a constant
baseline plus Gaussian noise.  In the signal ROIs the controls additionally
carry ``offset * h(t)`` with ``h(t) = 1 - cos(4 pi t / T)``, a bump train
with mean exactly 1 and range [0, 2]; patients lack it, so their mean
activity there is lower by ``offset`` and their temporal peaks are missing.
Because every control shares ``h``, the signal ROIs are also correlated with
each other in controls, which is what connectome features pick up.

With ``coupling > 0`` ROIs are grouped into networks, and each network adds
a shared zero-mean random series, so within-network correlations exceed
cross-network ones in both classes.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..errors import IoError
from ..nifti_io import FLOAT32, INT16, Volume4D, write_volume
from .manifest import CohortManifest, Subject, write_manifest

TR_SECONDS = 2.0


@dataclass(frozen=True)
class PhantomSpec:
    n_per_class: int = 40
    grid: tuple[int, int, int] = (61, 73, 61)
    timesteps: int = 150
    noise_sigma: float = 1.0
    offset_sigmas: float = 2.0
    baseline: float = 100.0
    blocks_per_axis: int = 2
    signal_rois: tuple[int, ...] | None = None  # None: the first network
    n_networks: int = 2
    coupling: float = 0.0
    voxel_mm: float = 3.0
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if self.n_per_class < 2:
            raise ValueError("need at least two subjects per class")
        if not self.noise_sigma > 0:
            raise ValueError("noise sigma must be positive")
        if self.timesteps < 3:
            raise ValueError("need at least three timesteps")
        if self.blocks_per_axis < 1 or min(self.grid) < self.blocks_per_axis:
            raise ValueError("grid too small for the requested block count")
        if not 1 <= self.n_networks <= self.roi_count:
            raise ValueError("n_networks must lie in [1, roi_count]")

    @property
    def roi_count(self) -> int:
        return self.blocks_per_axis**3

    @property
    def offset(self) -> float:
        return self.offset_sigmas * self.noise_sigma

    def networks(self) -> np.ndarray:
        """Network index of every ROI (label k at position k-1), round-robin."""
        return np.arange(self.roi_count) % self.n_networks

    def signal_labels(self) -> tuple[int, ...]:
        if self.signal_rois is not None:
            return tuple(self.signal_rois)
        return tuple(int(k) + 1 for k in np.flatnonzero(self.networks() == 0))

    def echo(self) -> dict:
        d = asdict(self)
        d["signal_rois"] = list(self.signal_labels())
        return d


@dataclass
class Phantom:
    manifest: CohortManifest
    manifest_path: Path
    atlas_path: Path
    names_path: Path
    spec: PhantomSpec
    files: list[Path] = field(default_factory=list)


def block_atlas(grid, blocks_per_axis: int) -> np.ndarray:
    """Label grid where block (i, j, k) gets label ``1 + i + b*j + b*b*k``."""
    b = blocks_per_axis
    idx = [(np.arange(n) * b) // n for n in grid]
    i, j, k = np.meshgrid(*idx, indexing="ij")
    return (1 + i + b * j + b * b * k).astype(np.int64)


def activity_profile(timesteps: int) -> np.ndarray:
    t = np.arange(timesteps)
    return 1.0 - np.cos(4.0 * np.pi * t / timesteps)


def _centered(x: np.ndarray) -> np.ndarray:
    return x - x.mean(axis=-1, keepdims=True)


def subject_volume(spec: PhantomSpec, labels: np.ndarray, label: int, seed_seq: np.random.SeedSequence) -> np.ndarray:
    rng = np.random.default_rng(seed_seq)
    shape = (*spec.grid, spec.timesteps)
    data = spec.baseline + spec.noise_sigma * rng.standard_normal(shape)
    roi_signal = np.zeros((spec.roi_count + 1, spec.timesteps))
    if spec.coupling > 0:
        shared = _centered(rng.standard_normal((spec.n_networks, spec.timesteps)))
        roi_signal[1:] += spec.coupling * spec.noise_sigma * shared[spec.networks()]
    if label == 0:
        roi_signal[list(spec.signal_labels())] += spec.offset * activity_profile(spec.timesteps)
    data += roi_signal[labels]
    return data


def generate_phantom(spec: PhantomSpec, out_dir: str | Path) -> Phantom:
    """Write volumes, atlas, ROI names and the manifest under ``out_dir``.

    Subject ``i`` draws from the ``i``-th child of ``SeedSequence(seed)``,
    so output bytes do not depend on the thread count.
    """
    out = Path(out_dir)
    try:
        (out / "volumes").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create {out}: {exc}") from exc
    affine = np.diag([spec.voxel_mm] * 3 + [1.0])
    labels = block_atlas(spec.grid, spec.blocks_per_axis)
    atlas_path = out / "atlas.nii"
    names_path = out / "atlas.txt"
    write_volume(Volume4D(labels.astype(np.float64), affine), INT16, atlas_path)
    try:
        names_path.write_text("".join(f"block_{k}\n" for k in range(1, spec.roi_count + 1)))
    except OSError as exc:
        raise IoError(f"cannot write {names_path}: {exc}") from exc

    n = 2 * spec.n_per_class
    root = np.random.SeedSequence(spec.seed)
    demo_rng = np.random.default_rng(root.spawn(1)[0])
    ages = np.round(demo_rng.uniform(18.0, 65.0, size=n), 1)
    children = root.spawn(n)
    subject_labels = [i % 2 for i in range(n)]
    paths = [out / "volumes" / f"sub-{i + 1:04d}.nii" for i in range(n)]

    def write_one(i: int) -> None:
        data = subject_volume(spec, labels, subject_labels[i], children[i])
        write_volume(Volume4D(data, affine, TR_SECONDS), FLOAT32, paths[i])

    with ThreadPoolExecutor(max_workers=max(1, spec.threads)) as pool:
        list(pool.map(write_one, range(n)))

    rows = tuple(
        Subject(f"sub-{i + 1:04d}", "SYNTH", paths[i], subject_labels[i], float(ages[i]), "MF"[i % 4 < 2])
        for i in range(n)
    )
    manifest = CohortManifest(rows)
    manifest_path = out / "manifest.csv"
    write_manifest(manifest, manifest_path)
    return Phantom(manifest, manifest_path, atlas_path, names_path, spec, paths)
