"""Turn a CT volume, its vertebra mask and a label into a 3-channel patch.

Channel order is (bone window, soft-tissue window, label-modulated mask); every
channel lies in [0, 1].
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .dataset import MAX_LABEL, MIN_LABEL, GenantGrade, VolumeGrid


class PreprocessError(ValueError):
    pass


class EmptyVertebraError(PreprocessError):
    pass


@dataclass(frozen=True)
class WindowSpec:
    level: float
    width: float

    def __post_init__(self):
        if not self.width > 0:
            raise ValueError(f"window width must be positive, got {self.width}")

    @property
    def bounds(self) -> tuple[float, float]:
        return self.level - self.width / 2, self.level + self.width / 2


# "literal" keeps the stated level/width; "conventional" swaps
# them to the usual radiological bone (L400/W1500) and soft-tissue (L40/W400).
WINDOW_PRESETS: dict[str, tuple[WindowSpec, WindowSpec]] = {
    "literal": (WindowSpec(1500, 400), WindowSpec(200, 40)),
    "conventional": (WindowSpec(400, 1500), WindowSpec(40, 400)),
}


@dataclass
class PreprocessConfig:
    window_preset: str = "literal"
    margin_fraction: float = 0.25
    min_margin: int = 4
    target_spacing: float = 1.0

    def __post_init__(self):
        if self.window_preset not in WINDOW_PRESETS:
            raise ValueError(f"unknown window preset {self.window_preset!r}; "
                             f"choose from {sorted(WINDOW_PRESETS)}")
        if self.margin_fraction < 0:
            raise ValueError("margin_fraction must be >= 0")
        if not self.target_spacing > 0:
            raise ValueError("target_spacing must be positive")

    @property
    def windows(self) -> tuple[WindowSpec, WindowSpec]:
        return WINDOW_PRESETS[self.window_preset]


@dataclass
class VertebraPatch:
    channels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    source: tuple[str, int] | None = None
    grade: GenantGrade | None = None

    def __post_init__(self):
        self.channels = np.asarray(self.channels, dtype=np.float32)
        if self.channels.ndim != 4 or self.channels.shape[0] != 3:
            raise PreprocessError(f"patch must be 3 x D x H x W, got {self.channels.shape}")

    @property
    def spatial_shape(self) -> tuple[int, int, int]:
        return tuple(self.channels.shape[1:])

    def with_channels(self, channels: np.ndarray) -> "VertebraPatch":
        return VertebraPatch(channels, self.spacing, self.source, self.grade)


def apply_window(volume: VolumeGrid, w: WindowSpec) -> VolumeGrid:
    """Linearly map [level - width/2, level + width/2] onto [0, 1], clipping outside."""
    if volume.value_kind != "HU":
        raise PreprocessError(f"windowing needs an HU volume, got {volume.value_kind}")
    lo, _ = w.bounds
    out = (volume.data.astype(np.float64) - lo) / w.width
    return VolumeGrid(np.clip(out, 0.0, 1.0).astype(np.float32), volume.spacing, "normalized")


def bounding_box(mask: np.ndarray, label: int, margin_fraction: float = 0.25,
                 min_margin: int = 4) -> tuple[slice, slice, slice]:
    """Tight box around ``label`` voxels, expanded per side and clipped to bounds.

    Each side grows by ``max(ceil(margin_fraction * extent), min_margin)``
    voxels; a zero ``margin_fraction`` yields the tight box.
    """
    hits = np.nonzero(mask == label)
    if hits[0].size == 0:
        raise EmptyVertebraError(f"empty vertebra: label {label} not present in mask")
    box = []
    for axis, idx in enumerate(hits):
        lo, hi = int(idx.min()), int(idx.max())
        extent = hi - lo + 1
        pad = 0 if margin_fraction == 0 else max(math.ceil(margin_fraction * extent), min_margin)
        box.append(slice(max(lo - pad, 0), min(hi + pad, mask.shape[axis] - 1) + 1))
    return tuple(box)


def extract_patch(volume: VolumeGrid, mask: VolumeGrid, vertebra_label: int,
                  margin_fraction: float = 0.25, min_margin: int = 4
                  ) -> tuple[VolumeGrid, VolumeGrid]:
    """Crop the expanded bounding box of one vertebra.

    Returns the cropped volume and the crop of the mask binarized for that label.
    """
    if volume.shape != mask.shape:
        raise PreprocessError(f"volume {volume.shape} and mask {mask.shape} differ in shape")
    box = bounding_box(mask.data, vertebra_label, margin_fraction, min_margin)
    sub = VolumeGrid(volume.data[box].copy(), volume.spacing, volume.value_kind)
    submask = VolumeGrid((mask.data[box] == vertebra_label).astype(np.int16), mask.spacing, "labels")
    return sub, submask


def modulate_mask(binary_mask: np.ndarray, vertebra_label: int) -> np.ndarray:
    """Scale a {0,1} mask by ``label / 24`` so the channel also encodes vertebra identity."""
    if not MIN_LABEL <= vertebra_label <= MAX_LABEL:
        raise PreprocessError(f"vertebra label {vertebra_label} outside [{MIN_LABEL}, {MAX_LABEL}]")
    binary_mask = np.asarray(binary_mask)
    if not np.isin(binary_mask, (0, 1)).all():
        raise PreprocessError("mask must be binary")
    return binary_mask.astype(np.float32) * np.float32(vertebra_label / MAX_LABEL)


def round_half_away(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return (np.sign(x) * np.floor(np.abs(x) + 0.5)).astype(int)


def resize(data: np.ndarray, shape, order: int = 1) -> np.ndarray:
    """Resample a 3D array onto ``shape`` covering the same field of view.

    ``order=1`` is trilinear, ``order=0`` nearest neighbour (value set preserved).
    """
    data = np.asarray(data)
    shape = tuple(int(s) for s in shape)
    if shape == data.shape:
        return data.copy()
    axes = [(np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
            for n_in, n_out in zip(data.shape, shape)]
    if order == 0:
        # nearest: pick voxel containing the sample centre, no float rounding ties
        idx = [np.clip(np.floor(a + 0.5).astype(int), 0, n - 1) for a, n in zip(axes, data.shape)]
        return data[np.ix_(*idx)]
    coords = np.meshgrid(*axes, indexing="ij")
    out = ndimage.map_coordinates(data.astype(np.float32), coords, order=order, mode="nearest")
    return out.astype(np.float32)


def resample_isotropic(field: VolumeGrid, target_spacing: float = 1.0,
                       interpolation: str = "trilinear") -> VolumeGrid:
    if not target_spacing > 0:
        raise PreprocessError(f"target spacing must be positive, got {target_spacing}")
    if interpolation not in ("trilinear", "nearest"):
        raise PreprocessError(f"unknown interpolation {interpolation!r}")
    shape = np.maximum(round_half_away(np.array(field.shape) * np.array(field.spacing) / target_spacing), 1)
    order = 1 if interpolation == "trilinear" else 0
    data = resize(field.data, shape, order)
    if order == 1 and field.value_kind == "normalized":
        data = np.clip(data, 0.0, 1.0)
    return VolumeGrid(data, (target_spacing,) * 3, field.value_kind)


def assemble_patch(bone: VolumeGrid, soft: VolumeGrid, modmask: VolumeGrid,
                   source: tuple[str, int] | None = None,
                   grade: GenantGrade | None = None) -> VertebraPatch:
    fields = (bone, soft, modmask)
    if len({f.shape for f in fields}) != 1:
        raise PreprocessError(f"channel shapes differ: {[f.shape for f in fields]}")
    if len({f.spacing for f in fields}) != 1:
        raise PreprocessError(f"channel spacings differ: {[f.spacing for f in fields]}")
    channels = np.stack([f.data.astype(np.float32) for f in fields])
    if not np.all(np.isfinite(channels)):
        raise PreprocessError("patch contains non-finite values")
    if channels.min() < 0 or channels.max() > 1:
        raise PreprocessError(f"patch values outside [0, 1]: [{channels.min()}, {channels.max()}]")
    if source is not None:
        allowed = np.float32(source[1] / MAX_LABEL)
        if not np.isin(channels[2], (0.0, allowed)).all():
            raise PreprocessError("mask channel values must be 0 or label/24")
    return VertebraPatch(channels, bone.spacing, source, grade)


def preprocess_vertebra(volume: VolumeGrid, mask: VolumeGrid, vertebra_label: int,
                        cfg: PreprocessConfig | None = None, case_id: str = "",
                        grade: GenantGrade | None = None) -> VertebraPatch:
    """Crop, window, modulate and resample one vertebra into a canonical patch.

    Windowing is pointwise, so it is applied after cropping.
    """
    cfg = cfg or PreprocessConfig()
    sub, submask = extract_patch(volume, mask, vertebra_label, cfg.margin_fraction, cfg.min_margin)
    bone_w, soft_w = cfg.windows
    bone = resample_isotropic(apply_window(sub, bone_w), cfg.target_spacing, "trilinear")
    soft = resample_isotropic(apply_window(sub, soft_w), cfg.target_spacing, "trilinear")
    mod = VolumeGrid(modulate_mask(submask.data, vertebra_label), submask.spacing, "normalized")
    mod = resample_isotropic(mod, cfg.target_spacing, "nearest")
    return assemble_patch(bone, soft, mod, (case_id, vertebra_label), grade)
