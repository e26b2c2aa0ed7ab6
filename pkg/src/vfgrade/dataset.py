"""Dataset manifests, Genant grades, case-level splitting and NIfTI volume I/O."""

from __future__ import annotations

import enum
import os
from dataclasses import dataclass, field
from pathlib import Path

import nibabel as nib
import numpy as np
import yaml

MIN_LABEL = 1
MAX_LABEL = 24  # C1..L5


class ManifestError(ValueError):
    pass


class VolumeError(ValueError):
    pass


class GenantGrade(enum.IntEnum):
    G0 = 0  # normal
    G1 = 1  # mild
    G2 = 2  # moderate
    G3 = 3  # severe

    @classmethod
    def parse(cls, value) -> "GenantGrade":
        if isinstance(value, str) and value.strip().lstrip("-").isdigit():
            iv = int(value)
        elif isinstance(value, (int, np.integer)) and not isinstance(value, bool):
            iv = int(value)
        else:
            raise ValueError(f"invalid grade {value!r}")
        if iv not in (0, 1, 2, 3):
            raise ValueError(f"grade {iv} outside 0..3")
        return cls(iv)


@dataclass(frozen=True)
class VertebraEntry:
    label: int
    grade: GenantGrade

    def __post_init__(self):
        if not MIN_LABEL <= self.label <= MAX_LABEL:
            raise ValueError(f"vertebra label {self.label} outside [{MIN_LABEL}, {MAX_LABEL}]")


@dataclass
class CaseRecord:
    case_id: str
    volume_path: str
    mask_path: str
    vertebrae: list[VertebraEntry] = field(default_factory=list)


@dataclass
class Manifest:
    cases: list[CaseRecord]
    split: dict[str, str] | None = None
    base_dir: Path = field(default=Path("."), compare=False)

    def case(self, case_id: str) -> CaseRecord:
        for c in self.cases:
            if c.case_id == case_id:
                return c
        raise KeyError(case_id)

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else self.base_dir / p

    def cases_in(self, partition: str) -> list[CaseRecord]:
        if self.split is None:
            raise ManifestError("manifest has no split")
        return [c for c in self.cases if self.split[c.case_id] == partition]

    def vertebrae_in(self, partition: str | None = None):
        """Yield ``(case, entry)`` pairs, optionally restricted to one partition."""
        cases = self.cases if partition is None else self.cases_in(partition)
        for c in cases:
            for v in c.vertebrae:
                yield c, v

    def grade_counts(self, partition: str | None = None) -> dict[int, int]:
        counts = {int(g): 0 for g in GenantGrade}
        for _, v in self.vertebrae_in(partition):
            counts[int(v.grade)] += 1
        return counts


def _require(d, key, where):
    if not isinstance(d, dict) or key not in d:
        raise ManifestError(f"{where}: missing required field '{key}'")
    return d[key]


def manifest_from_dict(doc, base_dir: Path | str = ".") -> Manifest:
    if not isinstance(doc, dict):
        raise ManifestError("manifest must be a mapping with a 'cases' list")
    unknown = set(doc) - {"cases", "split"}
    if unknown:
        raise ManifestError(f"unknown top-level field(s): {sorted(unknown)}")
    raw_cases = _require(doc, "cases", "manifest")
    if not isinstance(raw_cases, list):
        raise ManifestError("'cases' must be a list")

    cases: list[CaseRecord] = []
    seen: set[str] = set()
    for i, rc in enumerate(raw_cases):
        where = f"case #{i}"
        case_id = str(_require(rc, "case_id", where))
        where = f"case '{case_id}'"
        if case_id in seen:
            raise ManifestError(f"{where}: duplicate case_id")
        seen.add(case_id)
        volume = str(_require(rc, "volume", where))
        mask = str(_require(rc, "mask", where))
        raw_vs = _require(rc, "vertebrae", where)
        if not isinstance(raw_vs, list):
            raise ManifestError(f"{where}: 'vertebrae' must be a list")
        entries = []
        labels = set()
        for rv in raw_vs:
            label = _require(rv, "label", where)
            grade = _require(rv, "grade", where)
            try:
                entry = VertebraEntry(int(label), GenantGrade.parse(grade))
            except ValueError as e:
                raise ManifestError(f"{where}: {e}") from None
            if entry.label in labels:
                raise ManifestError(f"{where}: duplicate vertebra label {entry.label}")
            labels.add(entry.label)
            entries.append(entry)
        cases.append(CaseRecord(case_id, volume, mask, entries))

    split = doc.get("split")
    if split is not None:
        if not isinstance(split, dict):
            raise ManifestError("'split' must be a mapping case_id -> train|test")
        split = {str(k): str(v) for k, v in split.items()}
        bad = {k: v for k, v in split.items() if v not in ("train", "test")}
        if bad:
            raise ManifestError(f"split values must be 'train' or 'test': {bad}")
        if set(split) != seen:
            missing = sorted(seen - set(split))
            extra = sorted(set(split) - seen)
            raise ManifestError(f"split must cover every case exactly once "
                                f"(missing {missing}, unknown {extra})")
    return Manifest(cases, split, Path(base_dir))


def parse_manifest(text: str, base_dir: Path | str = ".") -> Manifest:
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ManifestError(f"manifest is not valid YAML: {e}") from None
    return manifest_from_dict(doc, base_dir)


def manifest_to_dict(m: Manifest) -> dict:
    doc = {
        "cases": [
            {
                "case_id": c.case_id,
                "volume": c.volume_path,
                "mask": c.mask_path,
                "vertebrae": [{"label": v.label, "grade": int(v.grade)} for v in c.vertebrae],
            }
            for c in m.cases
        ]
    }
    if m.split is not None:
        doc["split"] = {c.case_id: m.split[c.case_id] for c in m.cases}
    return doc


def serialize_manifest(m: Manifest) -> str:
    return yaml.safe_dump(manifest_to_dict(m), sort_keys=False)


def read_manifest(path) -> Manifest:
    path = Path(path)
    return parse_manifest(path.read_text(), base_dir=path.parent)


def write_manifest(m: Manifest, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(serialize_manifest(m))
    os.replace(tmp, path)


def split_cases(manifest: Manifest, test_fraction: float = 0.2, seed: int = 0) -> Manifest:
    """Assign whole cases to train/test so no individual straddles partitions."""
    if not 0 < test_fraction < 1:
        raise ValueError("test_fraction must lie in (0, 1)")
    n = len(manifest.cases)
    if n < 2:
        raise ManifestError("need at least 2 cases to split")
    n_test = int(np.floor(n * test_fraction + 0.5))
    n_test = min(max(n_test, 1), n - 1)
    ids = sorted(c.case_id for c in manifest.cases)
    order = np.random.default_rng(seed).permutation(n)
    test = {ids[i] for i in order[:n_test]}
    split = {c.case_id: ("test" if c.case_id in test else "train") for c in manifest.cases}
    return Manifest(list(manifest.cases), split, manifest.base_dir)


@dataclass
class VolumeGrid:
    """3D scalar field with voxel spacing in mm.

    ``value_kind`` is ``"HU"`` for CT intensities, ``"normalized"`` for values
    in [0, 1] and ``"labels"`` for integer segmentation masks.
    """

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    value_kind: str = "HU"

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise VolumeError(f"volume must be 3D, got shape {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or any(not s > 0 for s in self.spacing):
            raise VolumeError(f"spacing must be three positive values, got {self.spacing}")
        if self.value_kind not in ("HU", "normalized", "labels"):
            raise VolumeError(f"unknown value_kind {self.value_kind!r}")
        if not np.all(np.isfinite(self.data)):
            raise VolumeError("volume contains non-finite values")

    @property
    def shape(self):
        return self.data.shape


def load_volume(path, kind: str = "HU", canonical: bool = True) -> VolumeGrid:
    """Read a NIfTI volume; ``kind="labels"`` loads an integer mask.

    With ``canonical`` the array is reoriented to the closest RAS+ axis order
    so every patch shares one orientation.
    """
    try:
        img = nib.load(str(path))
    except Exception as e:  # nibabel raises a zoo of types
        raise VolumeError(f"cannot read volume {path}: {e}") from None
    if len(img.shape) != 3:
        raise VolumeError(f"{path}: expected a 3D volume, got shape {img.shape}")
    if canonical:
        img = nib.as_closest_canonical(img)
    spacing = tuple(float(z) for z in img.header.get_zooms()[:3])
    if kind == "labels":
        data = np.asarray(img.dataobj).astype(np.int16)
    else:
        data = np.asarray(img.get_fdata(dtype=np.float32))
    return VolumeGrid(data, spacing, kind)


def save_volume(grid: VolumeGrid, path) -> None:
    """Write a NIfTI-1 file atomically with the grid's spacing in the header."""
    path = Path(path)
    dtype = np.int16 if grid.value_kind == "labels" else np.float32
    affine = np.diag([*grid.spacing, 1.0])
    img = nib.Nifti1Image(grid.data.astype(dtype), affine)
    img.header.set_zooms(grid.spacing)
    suffix = "".join(path.suffixes)
    tmp = path.with_name(path.name[: -len(suffix)] + ".tmp" + suffix) if suffix else path.with_name(path.name + ".tmp")
    nib.save(img, str(tmp))
    os.replace(tmp, path)
