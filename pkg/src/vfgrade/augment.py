"""Seeded 3D augmentations used to build the two contrastive views of a patch.

Transforms operate on channel arrays of shape ``(3, D, H, W)``: channels 0 and
1 are intensities, channel 2 is the label-modulated mask.  Every random
transform is a pure function of ``(array, seed, cfg)``; there is no global RNG.
Geometric transforms interpolate intensities trilinearly and the mask with
nearest neighbour, filling vacated voxels with zero.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, asdict

import numpy as np
from scipy import ndimage
from scipy.spatial.transform import Rotation

from .dataset import GenantGrade
from .preprocess import VertebraPatch, resize, round_half_away

INTENSITY = (0, 1)
MASK = 2


@dataclass
class AugmentConfig:
    apply_probability: float = 0.7
    zoom_range: tuple[float, float] = (0.9, 1.1)
    noise_sigma: float = 0.05
    shift_limit: int = 10
    rotation_limit: float = 10.0
    box_count: int = 2
    box_side_range: tuple[int, int] = (1, 20)
    jitter_p1_range: tuple[float, float] = (0.9, 1.1)
    # exponent drawn log-uniformly: p2 = 2**u, u in this range
    jitter_log2_p2_range: tuple[float, float] = (-1.0, 1.0)
    canonical_side: int = 128

    def __post_init__(self):
        if not 0 <= self.apply_probability <= 1:
            raise ValueError("apply_probability must lie in [0, 1]")
        for name in ("zoom_range", "box_side_range", "jitter_p1_range", "jitter_log2_p2_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} is empty: {lo} > {hi}")
            setattr(self, name, (lo, hi))
        if self.zoom_range[0] <= 0 or self.jitter_p1_range[0] <= 0:
            raise ValueError("zoom and p1 ranges must be positive")
        if self.box_side_range[0] < 1:
            raise ValueError("box sides must be at least 1 voxel")
        if self.noise_sigma < 0 or self.shift_limit < 0 or self.rotation_limit < 0:
            raise ValueError("noise_sigma, shift_limit and rotation_limit must be >= 0")
        if self.canonical_side < 1:
            raise ValueError("canonical_side must be >= 1")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


@dataclass
class ViewPair:
    view_a: np.ndarray
    view_b: np.ndarray
    grade: GenantGrade | None
    patch_id: tuple[str, int] | None = None


# --- seeds -------------------------------------------------------------------

def _key_int(key) -> int:
    if isinstance(key, (int, np.integer)):
        return int(key) & 0xFFFFFFFFFFFFFFFF
    digest = hashlib.sha256(repr(key).encode()).digest()
    return int.from_bytes(digest[:8], "little")


def derive_seed(*keys) -> int:
    """Stable 64-bit seed from an arbitrary tuple of ints/strings/tuples."""
    ss = np.random.SeedSequence([_key_int(k) for k in keys])
    return int(ss.generate_state(2, np.uint32).view(np.uint64)[0])


def view_seed(global_seed: int, epoch: int, patch_id, view_index: int) -> int:
    return derive_seed(global_seed, epoch, patch_id, view_index)


def gate(rng: np.random.Generator, p: float) -> bool:
    """One uniform draw; the transform applies when ``u < p``."""
    return bool(rng.random() < p)


# --- deterministic cores -----------------------------------------------------

def _geometric(arr: np.ndarray, matrix: np.ndarray, offset: np.ndarray) -> np.ndarray:
    out = np.empty_like(arr)
    for c in range(arr.shape[0]):
        order = 0 if c == MASK else 1
        out[c] = ndimage.affine_transform(arr[c], matrix, offset=offset, order=order,
                                          mode="constant", cval=0.0)
    out[list(INTENSITY)] = np.clip(out[list(INTENSITY)], 0.0, 1.0)
    return out


def zoom(arr: np.ndarray, factors) -> np.ndarray:
    """Scale about the array centre by per-axis ``factors``, keeping the shape."""
    factors = np.asarray(factors, dtype=np.float64)
    if np.all(factors == 1):
        return arr.copy()
    centre = (np.array(arr.shape[1:]) - 1) / 2
    matrix = np.diag(1 / factors)
    return _geometric(arr, matrix, centre - matrix @ centre)


def rotate(arr: np.ndarray, angles_deg) -> np.ndarray:
    """Rotate about the centre by Euler angles (degrees) around axes 0, 1, 2."""
    angles = np.asarray(angles_deg, dtype=np.float64)
    if np.all(angles == 0):
        return arr.copy()
    rot = Rotation.from_euler("xyz", angles, degrees=True).as_matrix()
    centre = (np.array(arr.shape[1:]) - 1) / 2
    inv = rot.T
    return _geometric(arr, inv, centre - inv @ centre)


def shift(arr: np.ndarray, offsets) -> np.ndarray:
    """Integer translation; content leaving the canvas is lost, new voxels are 0."""
    out = np.zeros_like(arr)
    src, dst = [slice(None)], [slice(None)]
    for s, n in zip(offsets, arr.shape[1:]):
        s = int(s)
        if abs(s) >= n:
            return out
        if s >= 0:
            src.append(slice(0, n - s))
            dst.append(slice(s, n))
        else:
            src.append(slice(-s, n))
            dst.append(slice(0, n + s))
    out[tuple(dst)] = arr[tuple(src)]
    return out


def cutout(arr: np.ndarray, boxes) -> np.ndarray:
    """Zero every ``(start, size)`` box (per-axis tuples) in all channels."""
    out = arr.copy()
    for start, size in boxes:
        sl = tuple(slice(max(int(a), 0), max(int(a) + int(s), 0)) for a, s in zip(start, size))
        out[(slice(None),) + sl] = 0
    return out


def add_noise(arr: np.ndarray, noise: np.ndarray) -> np.ndarray:
    out = arr.copy()
    out[list(INTENSITY)] = np.clip(arr[list(INTENSITY)] + noise, 0.0, 1.0)
    return out


def jitter(arr: np.ndarray, p1: float, p2: float) -> np.ndarray:
    """Intensity map ``v -> clip((v * p1) ** p2, 0, 1)`` on the intensity channels."""
    out = arr.copy()
    v = arr[list(INTENSITY)].astype(np.float64)
    out[list(INTENSITY)] = np.clip(np.power(v * p1, p2), 0.0, 1.0)
    return out


def place(arr: np.ndarray, side: int, offset) -> np.ndarray:
    canvas = np.zeros((arr.shape[0], side, side, side), dtype=np.float32)
    sl = tuple(slice(int(o), int(o) + n) for o, n in zip(offset, arr.shape[1:]))
    canvas[(slice(None),) + sl] = arr
    return canvas


def fit_longest_side(arr: np.ndarray, side: int) -> np.ndarray:
    """Rescale so the longest spatial side equals ``side`` (aspect preserved)."""
    dims = np.array(arr.shape[1:])
    scale = side / dims.max()
    target = np.clip(round_half_away(dims * scale), 1, side)
    out = np.empty((arr.shape[0], *target), dtype=np.float32)
    for c in range(arr.shape[0]):
        out[c] = resize(arr[c], target, order=0 if c == MASK else 1)
    out[list(INTENSITY)] = np.clip(out[list(INTENSITY)], 0.0, 1.0)
    return out


# --- random transforms -------------------------------------------------------

def _as_array(patch) -> np.ndarray:
    return patch.channels if isinstance(patch, VertebraPatch) else np.asarray(patch, dtype=np.float32)


def random_pad(patch, seed, cfg: AugmentConfig | None = None) -> np.ndarray:
    """Fit the longest side to the canvas, then place at a uniform random offset.

    Always applied.
    """
    cfg = cfg or AugmentConfig()
    arr = fit_longest_side(_as_array(patch), cfg.canonical_side)
    rng = np.random.default_rng(seed)
    offset = [rng.integers(0, cfg.canonical_side - n + 1) for n in arr.shape[1:]]
    return place(arr, cfg.canonical_side, offset)


def center_pad(patch, cfg: AugmentConfig | None = None) -> np.ndarray:
    """Deterministic counterpart of :func:`random_pad` used at inference."""
    cfg = cfg or AugmentConfig()
    arr = fit_longest_side(_as_array(patch), cfg.canonical_side)
    offset = [(cfg.canonical_side - n) // 2 for n in arr.shape[1:]]
    return place(arr, cfg.canonical_side, offset)


def sample_boxes(rng: np.random.Generator, shape, cfg: AugmentConfig):
    lo, hi = cfg.box_side_range
    boxes = []
    for _ in range(cfg.box_count):
        size = rng.integers(lo, hi + 1, size=3)
        centre = np.array([rng.integers(0, n) for n in shape])
        boxes.append((tuple(centre - size // 2), tuple(size)))
    return boxes


def box_mask(patch, seed, cfg: AugmentConfig | None = None) -> np.ndarray:
    cfg = cfg or AugmentConfig()
    arr = _as_array(patch)
    rng = np.random.default_rng(seed)
    if not gate(rng, cfg.apply_probability):
        return arr.copy()
    return cutout(arr, sample_boxes(rng, arr.shape[1:], cfg))


def random_zoom(patch, seed, cfg: AugmentConfig | None = None) -> np.ndarray:
    cfg = cfg or AugmentConfig()
    arr = _as_array(patch)
    rng = np.random.default_rng(seed)
    if not gate(rng, cfg.apply_probability):
        return arr.copy()
    return zoom(arr, rng.uniform(*cfg.zoom_range, size=3))


def gaussian_noise(patch, seed, cfg: AugmentConfig | None = None) -> np.ndarray:
    cfg = cfg or AugmentConfig()
    arr = _as_array(patch)
    rng = np.random.default_rng(seed)
    if not gate(rng, cfg.apply_probability) or cfg.noise_sigma == 0:
        return arr.copy()
    noise = rng.normal(0.0, cfg.noise_sigma, size=(len(INTENSITY), *arr.shape[1:]))
    return add_noise(arr, noise.astype(np.float32))


def random_shift(patch, seed, cfg: AugmentConfig | None = None) -> np.ndarray:
    cfg = cfg or AugmentConfig()
    arr = _as_array(patch)
    rng = np.random.default_rng(seed)
    if not gate(rng, cfg.apply_probability):
        return arr.copy()
    return shift(arr, rng.integers(-cfg.shift_limit, cfg.shift_limit + 1, size=3))


def random_rotation(patch, seed, cfg: AugmentConfig | None = None) -> np.ndarray:
    cfg = cfg or AugmentConfig()
    arr = _as_array(patch)
    rng = np.random.default_rng(seed)
    if not gate(rng, cfg.apply_probability):
        return arr.copy()
    return rotate(arr, rng.uniform(-cfg.rotation_limit, cfg.rotation_limit, size=3))


def hu_jitter(patch, seed, cfg: AugmentConfig | None = None) -> np.ndarray:
    cfg = cfg or AugmentConfig()
    arr = _as_array(patch)
    rng = np.random.default_rng(seed)
    if not gate(rng, cfg.apply_probability):
        return arr.copy()
    p1 = rng.uniform(*cfg.jitter_p1_range)
    p2 = 2.0 ** rng.uniform(*cfg.jitter_log2_p2_range)
    return jitter(arr, p1, p2)


PIPELINE = (
    ("random_pad", random_pad),
    ("box_mask_pre", box_mask),
    ("random_zoom", random_zoom),
    ("gaussian_noise", gaussian_noise),
    ("random_shift", random_shift),
    ("random_rotation", random_rotation),
    ("hu_jitter", hu_jitter),
    ("box_mask_post", box_mask),
)


def transform_seed(seed: int, step: int) -> int:
    return derive_seed(seed, step)


def augment_view(patch, seed: int, cfg: AugmentConfig | None = None) -> np.ndarray:
    """Run the full ordered pipeline once; returns a ``(3, S, S, S)`` float32 array."""
    cfg = cfg or AugmentConfig()
    arr = _as_array(patch)
    for step, (_, fn) in enumerate(PIPELINE):
        arr = fn(arr, transform_seed(seed, step), cfg)
    return arr.astype(np.float32, copy=False)


def make_view_pair(patch: VertebraPatch, grade=None, seed: int = 0,
                   cfg: AugmentConfig | None = None) -> ViewPair:
    grade = patch.grade if grade is None else grade
    views = [augment_view(patch, derive_seed(seed, i), cfg) for i in (0, 1)]
    return ViewPair(views[0], views[1], grade, patch.source)
