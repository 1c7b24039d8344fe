"""Cohort manifest CSV: one row per subject."""

from __future__ import annotations

import csv
from collections import Counter
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable

from ..errors import BadLabel, DataError, DuplicateId, IoError, MissingFile

COLUMNS = ("subject_id", "site", "path", "label", "age", "sex")
OPTIONAL_COLUMNS = ("subtype",)
SITES = ("UCLA", "COBRE", "SYNTH")


@dataclass(frozen=True)
class Subject:
    subject_id: str
    site: str
    path: Path
    label: int
    age: float
    sex: str
    subtype: str = ""


@dataclass(frozen=True)
class CohortManifest:
    rows: tuple[Subject, ...]

    def __post_init__(self):
        seen = set()
        for r in self.rows:
            if r.subject_id in seen:
                raise DuplicateId(f"duplicate subject_id {r.subject_id!r}")
            seen.add(r.subject_id)

    def __len__(self) -> int:
        return len(self.rows)

    def __iter__(self):
        return iter(self.rows)

    @property
    def labels(self) -> list[int]:
        return [r.label for r in self.rows]

    @property
    def subject_ids(self) -> list[str]:
        return [r.subject_id for r in self.rows]

    def counts(self) -> dict[str, int]:
        """Per-class and per-site counts, e.g. ``{"label_0": 206, "site_UCLA": 168}``."""
        out: Counter[str] = Counter()
        for r in self.rows:
            out[f"label_{r.label}"] += 1
            out[f"site_{r.site}"] += 1
        out["total"] = len(self.rows)
        return dict(sorted(out.items()))

    def subset(self, indices: Iterable[int]) -> "CohortManifest":
        return CohortManifest(tuple(self.rows[i] for i in indices))

    def with_paths(self, paths: Iterable[Path]) -> "CohortManifest":
        return CohortManifest(tuple(replace(r, path=Path(p)) for r, p in zip(self.rows, paths)))


def _parse_label(raw: str, subject_id: str) -> int:
    try:
        value = float(raw)
    except ValueError:
        raise BadLabel(f"{subject_id}: label {raw!r} is not 0 or 1") from None
    if value not in (0.0, 1.0):
        raise BadLabel(f"{subject_id}: label {raw!r} is not 0 or 1")
    return int(value)


def load_manifest(path: str | Path, check_files: bool = True) -> CohortManifest:
    """Read and validate a manifest; relative paths resolve against its folder."""
    path = Path(path)
    try:
        with path.open(newline="") as fh:
            reader = csv.DictReader(fh)
            header = tuple(reader.fieldnames or ())
            missing = [c for c in COLUMNS if c not in header]
            if missing:
                raise DataError(f"{path}: manifest lacks columns {missing}")
            records = list(reader)
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc

    rows = []
    for rec in records:
        sid = rec["subject_id"].strip()
        site = rec["site"].strip().upper()
        if site not in SITES:
            raise DataError(f"{sid}: unknown site {rec['site']!r}")
        file_path = Path(rec["path"].strip())
        if not file_path.is_absolute():
            file_path = path.parent / file_path
        if check_files and not file_path.exists():
            raise MissingFile(f"{sid}: {file_path} does not exist")
        try:
            age = float(rec["age"]) if rec["age"].strip() else float("nan")
        except ValueError:
            raise DataError(f"{sid}: age {rec['age']!r} is not a number") from None
        sex = rec["sex"].strip().upper()
        if sex not in ("M", "F"):
            raise DataError(f"{sid}: sex must be M or F, got {rec['sex']!r}")
        rows.append(
            Subject(sid, site, file_path, _parse_label(rec["label"].strip(), sid), age, sex, (rec.get("subtype") or "").strip())
        )
    return CohortManifest(tuple(rows))


def write_manifest(m: CohortManifest, path: str | Path) -> None:
    """Write with paths relative to the manifest's folder when possible."""
    path = Path(path)
    base = path.parent.resolve()
    with_subtype = any(r.subtype for r in m.rows)
    fields = COLUMNS + OPTIONAL_COLUMNS if with_subtype else COLUMNS
    try:
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(fields)
            for r in m.rows:
                p = Path(r.path).resolve()
                try:
                    p = p.relative_to(base)
                except ValueError:
                    pass
                age = "" if r.age != r.age else repr(r.age)
                row = [r.subject_id, r.site, p.as_posix(), r.label, age, r.sex]
                if with_subtype:
                    row.append(r.subtype)
                w.writerow(row)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc
