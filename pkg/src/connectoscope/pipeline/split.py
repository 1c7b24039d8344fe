from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..errors import StratumTooSmall
from .manifest import CohortManifest


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.8
    stratify_by: str = "label"  # label | site_label
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must lie in (0, 1)")
        if self.stratify_by not in ("label", "site_label"):
            raise ValueError("stratify_by must be 'label' or 'site_label'")


def _stratum_key(row, by: str):
    return (row.label,) if by == "label" else (row.site, row.label)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def stratified_split(m: CohortManifest, s: SplitSpec) -> tuple[CohortManifest, CohortManifest]:
    """Seeded per-stratum shuffle, then a largest-remainder train quota.

    The overall train size targets ``round(f * n)`` clamped to ``[1, n - 1]``;
    every stratum gets the floor or the ceiling of ``f * n_stratum``, so class
    proportions on either side stay within one sample of the global ones.
    Strata with two or more members are never emptied on either side.
    Both output manifests keep the input row order.
    """
    n = len(m)
    if n < 2:
        raise StratumTooSmall("need at least two subjects to split")
    strata: dict[tuple, list[int]] = {}
    for i, row in enumerate(m.rows):
        strata.setdefault(_stratum_key(row, s.stratify_by), []).append(i)
    labels = {row.label for row in m.rows}
    if labels != {0, 1}:
        raise StratumTooSmall(f"both classes are required, found labels {sorted(labels)}")
    if s.stratify_by == "site_label":
        for site in {row.site for row in m.rows}:
            if (site, 0) not in strata or (site, 1) not in strata:
                raise StratumTooSmall(f"site {site} lacks one of the classes")

    keys = sorted(strata)
    rng = np.random.default_rng(s.seed)
    shuffled = {k: [strata[k][j] for j in rng.permutation(len(strata[k]))] for k in keys}

    sizes = np.array([len(strata[k]) for k in keys])
    quotas = s.train_fraction * sizes
    # a stratum of two or more keeps at least one subject on each side
    lo = np.where(sizes >= 2, 1, 0)
    hi = np.where(sizes >= 2, sizes - 1, sizes)
    take = np.clip(np.floor(quotas).astype(int), lo, hi)
    total = min(max(_round_half_up(s.train_fraction * n), 1), n - 1)
    remainder = quotas - np.floor(quotas)
    # tie-break equal remainders with a seeded order
    tiebreak = rng.permutation(len(keys))
    order = sorted(range(len(keys)), key=lambda j: (-remainder[j], tiebreak[j]))
    deficit = total - int(take.sum())
    for j in order:
        if deficit <= 0:
            break
        if take[j] < min(math.ceil(quotas[j]), hi[j]):
            take[j] += 1
            deficit -= 1

    train = sorted(i for k, t in zip(keys, take) for i in shuffled[k][:t])
    train_set = set(train)
    test = [i for i in range(n) if i not in train_set]
    return m.subset(train), m.subset(test)
