"""Procedural vertebra-like CT cases with known Genant grades.

Each case stacks ``vertebrae_per_case`` slabs along the last (superior) axis.
A slab holds one rounded vertebral body whose anterior height is reduced by a
grade-dependent fraction (a wedge), embedded in noisy soft tissue.  Compressed
trabecular bone is denser in proportion to the local height loss.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import (MAX_LABEL, MIN_LABEL, CaseRecord, GenantGrade, Manifest, VertebraEntry,
                      VolumeGrid, save_volume, write_manifest)

HU_MIN, HU_MAX = -1024.0, 3071.0

# anterior height-loss bands per grade, [lo, hi)
LOSS_BANDS: dict[int, tuple[float, float]] = {
    0: (0.0, 0.05),
    1: (0.20, 0.25),
    2: (0.26, 0.40),
    3: (0.40, 0.60),
}


@dataclass
class SynthConfig:
    cases: int = 40
    vertebrae_per_case: int = 5
    grade_ratio: tuple[float, float, float, float] = (1, 3, 3, 3)
    volume_side: int = 64
    spacing: float = 1.0
    seed: int = 0
    loss_bands: dict = field(default_factory=lambda: dict(LOSS_BANDS))

    def __post_init__(self):
        if any(r <= 0 for r in self.grade_ratio) or len(self.grade_ratio) != 4:
            raise ValueError("grade_ratio needs four positive entries")
        self.loss_bands = {int(k): tuple(v) for k, v in self.loss_bands.items()}
        lows = [self.loss_bands[g][0] for g in range(4)]
        if lows != sorted(lows) or any(lo > hi for lo, hi in self.loss_bands.values()):
            raise ValueError("loss bands must be non-empty and monotone in grade")
        if self.volume_side // self.vertebrae_per_case < 8:
            raise ValueError("volume too small for the requested vertebrae per case")


@dataclass
class SynthVertebra:
    hu: np.ndarray
    mask: np.ndarray
    label: int
    grade: GenantGrade
    height_loss: float


def _superellipse(shape_xy, centre, semi, power=4.0):
    x = np.arange(shape_xy[0])[:, None]
    y = np.arange(shape_xy[1])[None, :]
    return (np.abs((x - centre[0]) / semi[0]) ** power
            + np.abs((y - centre[1]) / semi[1]) ** power) <= 1.0


def generate_vertebra(grade, rng: np.random.Generator, shape=(64, 64, 12),
                      label: int | None = None,
                      loss_bands: dict | None = None) -> SynthVertebra:
    """One slab ``(x, y, z)``: axis 1 runs posterior -> anterior, axis 2 inferior -> superior."""
    grade = GenantGrade(int(grade))
    bands = loss_bands or LOSS_BANDS
    lo, hi = bands[int(grade)]
    loss = float(rng.uniform(lo, hi))
    if label is None:
        label = int(rng.integers(MIN_LABEL, MAX_LABEL + 1))
    nx, ny, nz = shape

    centre = (nx / 2 - 0.5 + rng.uniform(-1, 1), ny / 2 - 0.5 + rng.uniform(-1, 1))
    semi = (nx * rng.uniform(0.15, 0.17), ny * rng.uniform(0.12, 0.14))
    footprint = _superellipse((nx, ny), centre, semi)
    ys = np.nonzero(footprint.any(axis=0))[0]
    y_post, y_ant = ys.min(), ys.max()
    t = np.clip((np.arange(ny) - y_post) / max(y_ant - y_post, 1), 0, 1)

    z0 = 1
    height = nz - 2  # one-voxel disc space above and below
    top = height * (1 - loss * t)  # per-y body height
    zc = np.arange(nz)[None, None, :] + 0.5 - z0
    body = footprint[:, :, None] & (zc >= 0) & (zc < top[None, :, None])

    hu = rng.normal(rng.uniform(-20, 40), 25.0, size=shape)  # soft tissue
    base = rng.uniform(330, 370)
    compaction = (height / np.maximum(top, 1e-3))[None, :, None]
    trabecular = base * compaction + rng.normal(0, 30, size=shape)
    hu = np.where(body, trabecular, hu)
    # cortical rim: body voxels with a background 6-neighbour
    pad = np.pad(body, 1)
    interior = pad[2:, 1:-1, 1:-1] & pad[:-2, 1:-1, 1:-1] & pad[1:-1, 2:, 1:-1] \
        & pad[1:-1, :-2, 1:-1] & pad[1:-1, 1:-1, 2:] & pad[1:-1, 1:-1, :-2]
    rim = body & ~interior
    hu = np.where(rim, rng.uniform(900, 1100) + rng.normal(0, 40, size=shape), hu)
    hu = np.clip(hu, HU_MIN, HU_MAX).astype(np.float32)
    return SynthVertebra(hu, body.astype(np.uint8), label, grade, loss)


def height_ratio(mask: np.ndarray) -> float:
    """Anterior/posterior body height from a binary slab mask.

    Heights are voxel counts along axis 2, taken at the first (posterior) and
    last (anterior) occupied rows along axis 1.
    """
    mask = np.asarray(mask) > 0
    if not mask.any():
        raise ValueError("empty mask")
    heights = mask.sum(axis=2)  # (x, y)
    ys = np.nonzero(heights.max(axis=0) > 0)[0]
    return float(heights[:, ys.max()].max() / heights[:, ys.min()].max())


def height_loss_estimate(mask: np.ndarray) -> float:
    """Sub-voxel wedge estimate: least-squares line through column heights vs. y."""
    mask = np.asarray(mask) > 0
    heights = mask.sum(axis=2).astype(float)
    occupied = heights > 0
    xs, ys = np.nonzero(occupied)
    h = heights[xs, ys]
    y0, y1 = ys.min(), ys.max()
    t = (ys - y0) / max(y1 - y0, 1)
    slope, intercept = np.polyfit(t, h, 1)
    return float(-slope / intercept)


def rule_grade(mask: np.ndarray) -> int:
    """Grade from estimated height loss using band midpoints as thresholds."""
    loss = height_loss_estimate(mask)
    cuts = [(LOSS_BANDS[g][1] + LOSS_BANDS[g + 1][0]) / 2 for g in range(3)]
    return int(np.searchsorted(cuts, loss))


def apportion(total: int, ratio) -> list[int]:
    """Integer counts proportional to ``ratio`` summing to ``total`` (largest remainder)."""
    ratio = np.asarray(ratio, dtype=float)
    exact = total * ratio / ratio.sum()
    counts = np.floor(exact).astype(int)
    rem = total - counts.sum()
    order = np.argsort(-(exact - counts), kind="stable")
    counts[order[:rem]] += 1
    return counts.tolist()


def _case_seed(seed: int, i: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, i]))


def generate_case(case_index: int, grades, cfg: SynthConfig) -> tuple[VolumeGrid, VolumeGrid, list[VertebraEntry]]:
    rng = _case_seed(cfg.seed, case_index)
    n = len(grades)
    side = cfg.volume_side
    slab = side // n
    first = int(rng.integers(MIN_LABEL, MAX_LABEL - n + 2))
    hu = rng.normal(10, 25, size=(side, side, side)).astype(np.float32)
    mask = np.zeros((side, side, side), dtype=np.int16)
    entries = []
    # labels increase cranio-caudally, i.e. decrease along the superior axis
    for k, g in enumerate(grades):
        label = first + (n - 1 - k)
        v = generate_vertebra(g, rng, (side, side, slab), label, cfg.loss_bands)
        z = slice(k * slab, (k + 1) * slab)
        hu[:, :, z] = v.hu
        mask[:, :, z][v.mask > 0] = label
        entries.append(VertebraEntry(label, GenantGrade(int(g))))
    entries.sort(key=lambda e: e.label)
    sp = (cfg.spacing,) * 3
    return VolumeGrid(hu, sp, "HU"), VolumeGrid(mask, sp, "labels"), entries


def assign_grades(cfg: SynthConfig) -> np.ndarray:
    """Per-vertebra grades honouring the ratio exactly up to rounding, shuffled."""
    total = cfg.cases * cfg.vertebrae_per_case
    counts = apportion(total, cfg.grade_ratio)
    grades = np.repeat(np.arange(4), counts)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2**31]))
    return rng.permutation(grades).reshape(cfg.cases, cfg.vertebrae_per_case)


def generate_dataset(cfg: SynthConfig, out_dir) -> Manifest:
    """Write volumes, masks and ``manifest.yaml`` under ``out_dir``."""
    out = Path(out_dir)
    (out / "volumes").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    grades = assign_grades(cfg)
    cases = []
    for i in range(cfg.cases):
        case_id = f"case{i:03d}"
        vol, mask, entries = generate_case(i, grades[i], cfg)
        vpath = f"volumes/{case_id}.nii.gz"
        mpath = f"masks/{case_id}.nii.gz"
        save_volume(vol, out / vpath)
        save_volume(mask, out / mpath)
        cases.append(CaseRecord(case_id, vpath, mpath, entries))
    manifest = Manifest(cases, None, out)
    write_manifest(manifest, out / "manifest.yaml")
    return manifest
