"""Synthetic phantom corpus with a planted aging signal, plus preprocessing.

Each phantom is a G³ "brain": an ellipsoidal tissue mask containing

* region 1, a central ventricle sphere whose radius grows with effective age,
* regions 2 and 3, two lateral capsule slabs whose thickness shrinks with
  effective age,
* regions 4..R, filler blobs at fixed template positions with
  age-independent jittered sizes.

Structures are rendered with a one-voxel linear partial-volume ramp so the
image carries a continuous function of effective age; the label map is the
hard (signed distance <= 0) version of the same shapes.

Preprocessing mirrors the real pipeline: augmentation on the full volume,
center crops for the three views, then per-chunk min-max normalisation.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

from .errors import ConfigError, ContractError, DataError
from .numcore import DeterministicRng, stable_hash
from .numcore.tensorio import read_tensor, write_tensor

GROUPS = ("CN", "MCI", "AD")
GROUP_OFFSETS = {"CN": 0.0, "MCI": 2.55, "AD": 6.12}
# spread of the per-subject disease offset around the group mean
GROUP_OFFSET_SD = {"CN": 0.0, "MCI": 3.0, "AD": 3.0}
AGE_RANGE = (42.0, 95.0)

VENTRICLE, CAPSULE_LEFT, CAPSULE_RIGHT = 1, 2, 3
PLANTED_REGIONS = (VENTRICLE, CAPSULE_LEFT, CAPSULE_RIGHT)
VIEWS = ("sagittal", "coronal", "axial")

MANIFEST_VERSION = 1


# ---------------------------------------------------------------------------
# geometry template
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PhantomGeometry:
    """Corpus-wide template shared by every phantom (identity registration frame)."""

    grid: int
    n_regions: int
    voxel_mm: float
    brain_axes: tuple[float, float, float]
    filler_centers: tuple[tuple[float, float, float], ...]
    filler_radii: tuple[float, ...]
    filler_intensity: tuple[float, ...]

    @property
    def center(self) -> float:
        return (self.grid - 1) / 2.0

    @property
    def voxel_volume(self) -> float:
        return self.voxel_mm ** 3

    @property
    def scale(self) -> float:
        return self.grid / 64.0


# affine age laws, in voxels at G=64
VENTRICLE_R0, VENTRICLE_SLOPE = 3.0, 0.09
VENTRICLE_JITTER = 0.02  # relative per-scan radius noise
CAPSULE_T0, CAPSULE_SLOPE, CAPSULE_T_MIN = 5.0, 0.05, 1.0

CAPSULE_OFFSET = 11.0  # lateral distance of each capsule from the center
CAPSULE_HALF_Y = 7.0
CAPSULE_HALF_Z = 5.0

TISSUE_INTENSITY = 0.55
VENTRICLE_INTENSITY = 0.95  # brightest structure: zeroing it always changes a min-max scaled chunk
CAPSULE_INTENSITY = 0.85
FILLER_INTENSITY_RANGE = (0.45, 0.65)
FILLER_RADIUS_RANGE = (3.0, 4.5)
PLANTED_CLEARANCE = 4.0  # minimum gap (voxels at grid 64) between fillers and planted structures


def ventricle_radius(effective_age: float, scale: float = 1.0) -> float:
    return scale * (VENTRICLE_R0 + VENTRICLE_SLOPE * (effective_age - AGE_RANGE[0]))


def capsule_thickness(effective_age: float, scale: float = 1.0) -> float:
    return scale * max(CAPSULE_T0 - CAPSULE_SLOPE * (effective_age - AGE_RANGE[0]), CAPSULE_T_MIN)


def build_geometry(grid: int = 64, n_regions: int = 24, template_seed: int = 0, voxel_mm: float = 2.0) -> PhantomGeometry:
    if n_regions < 3:
        raise ConfigError("need at least 3 regions for the planted structures", ["n_regions"])
    if grid < 16:
        raise ConfigError("grid must be at least 16 voxels", ["grid"])
    s = grid / 64.0
    c = (grid - 1) / 2.0
    axes = (27.0 * s, 23.0 * s, 21.0 * s)
    rng = DeterministicRng(template_seed, "geometry")
    centers: list[tuple[float, float, float]] = []
    radii: list[float] = []
    max_vent = ventricle_radius(AGE_RANGE[1] + 12.0, s)
    attempts = 0
    while len(centers) < n_regions - 3:
        attempts += 1
        if attempts > 200000:
            raise ConfigError(f"could not place {n_regions - 3} filler regions in a {grid}³ grid", ["n_regions", "grid"])
        r = rng.uniform(*FILLER_RADIUS_RANGE) * s
        u = rng.uniform(-1.0, 1.0, size=3)
        if np.sum(u * u) > 1.0:
            continue
        p = c + u * (np.array(axes) - r - 2.0 * s)
        d = p - c
        gap = PLANTED_CLEARANCE * s
        if np.linalg.norm(d) < max_vent + r + gap:
            continue
        hit_capsule = any(
            abs(d[0] - sx * CAPSULE_OFFSET * s) < (CAPSULE_T0 / 2.0 + 0.5) * s + r + gap
            and abs(d[1]) < CAPSULE_HALF_Y * s + r + gap
            and abs(d[2]) < CAPSULE_HALF_Z * s + r + gap
            for sx in (-1.0, 1.0)
        )
        if hit_capsule:
            continue
        if any(np.linalg.norm(p - np.array(q)) < r + rq + 1.5 for q, rq in zip(centers, radii)):
            continue
        centers.append(tuple(float(v) for v in p))
        radii.append(float(r))
    intensity = tuple(float(v) for v in rng.uniform(*FILLER_INTENSITY_RANGE, size=len(centers)))
    return PhantomGeometry(grid, n_regions, voxel_mm, axes, tuple(centers), tuple(radii), intensity)


# ---------------------------------------------------------------------------
# phantoms
# ---------------------------------------------------------------------------

@dataclass
class Phantom:
    volume: np.ndarray
    label_map: np.ndarray
    region_volumes: np.ndarray
    age: float
    effective_age: float
    disease_offset: float
    group: str
    cog_score: float
    subject_id: str
    scan_id: str = ""


def _bbox(center, half, grid):
    return tuple(
        slice(max(int(math.floor(c - h - 1)), 0), min(int(math.ceil(c + h + 2)), grid))
        for c, h in zip(center, half)
    )


def _coords(sl):
    return np.ogrid[sl[0], sl[1], sl[2]]


def _paint(volume, labels, sl, sd, intensity, label):
    occ = np.clip(0.5 - sd, 0.0, 1.0)
    sub = volume[sl]
    volume[sl] = sub * (1.0 - occ) + intensity * occ
    if label is not None:
        lab = labels[sl]
        lab[sd <= 0.0] = label


def render(geometry: PhantomGeometry, effective_age: float, rng: DeterministicRng | None,
           noise_sd: float = 0.02) -> tuple[np.ndarray, np.ndarray]:
    """Render intensity volume and label map.  ``rng=None`` gives the noise-free template."""
    g = geometry.grid
    s = geometry.scale
    c = geometry.center
    jit = (lambda sd, size=None: rng.normal(0.0, sd, size)) if rng is not None else (lambda sd, size=None: np.zeros(size) if size else 0.0)

    volume = np.zeros((g, g, g))
    labels = np.zeros((g, g, g), dtype=np.int32)

    # tissue mask (label 0: unparcellated tissue counts as background)
    x, y, z = np.ogrid[0:g, 0:g, 0:g]
    ax = np.array(geometry.brain_axes) * (1.0 + jit(0.02, 3))
    rho = np.sqrt(((x - c) / ax[0]) ** 2 + ((y - c) / ax[1]) ** 2 + ((z - c) / ax[2]) ** 2)
    _paint(volume, labels, (slice(None),) * 3, (rho - 1.0) * ax.min(), TISSUE_INTENSITY + jit(0.02), None)

    for idx, (pc, r0, i0) in enumerate(zip(geometry.filler_centers, geometry.filler_radii, geometry.filler_intensity)):
        r = max(r0 * (1.0 + jit(0.12)), 1.0)
        sl = _bbox(pc, (r,) * 3, g)
        px, py, pz = _coords(sl)
        sd = np.sqrt((px - pc[0]) ** 2 + (py - pc[1]) ** 2 + (pz - pc[2]) ** 2) - r
        _paint(volume, labels, sl, sd, i0 + jit(0.03), 4 + idx)

    th0 = capsule_thickness(effective_age, s)
    for label, sx in ((CAPSULE_LEFT, -1.0), (CAPSULE_RIGHT, 1.0)):
        cx = c + sx * CAPSULE_OFFSET * s + (rng.uniform(-0.5, 0.5) if rng is not None else 0.0)
        half = (th0 / 2.0, CAPSULE_HALF_Y * s, CAPSULE_HALF_Z * s)
        sl = _bbox((cx, c, c), half, g)
        px, py, pz = _coords(sl)
        qx, qy, qz = np.abs(px - cx) - half[0], np.abs(py - c) - half[1], np.abs(pz - c) - half[2]
        outside = np.sqrt(np.maximum(qx, 0) ** 2 + np.maximum(qy, 0) ** 2 + np.maximum(qz, 0) ** 2)
        inside = np.minimum(np.maximum(np.maximum(qx, qy), qz), 0.0)
        _paint(volume, labels, sl, outside + inside, CAPSULE_INTENSITY + jit(0.02), label)

    rv = ventricle_radius(effective_age, s) * (1.0 + (jit(VENTRICLE_JITTER) if rng is not None else 0.0))
    sl = _bbox((c, c, c), (rv,) * 3, g)
    px, py, pz = _coords(sl)
    sd = np.sqrt((px - c) ** 2 + (py - c) ** 2 + (pz - c) ** 2) - rv
    _paint(volume, labels, sl, sd, VENTRICLE_INTENSITY + jit(0.02), VENTRICLE)

    if rng is not None:
        # smooth multiplicative bias field, then voxel noise
        grad = rng.normal(0.0, 0.03, size=3)
        field = 1.0 + grad[0] * (x - c) / g + grad[1] * (y - c) / g + grad[2] * (z - c) / g
        volume = volume * field
        if noise_sd > 0:
            volume = volume + rng.normal(0.0, noise_sd, size=volume.shape)
    return volume, labels


def region_volumes(label_map: np.ndarray, n_regions: int, voxel_volume: float = 8.0) -> np.ndarray:
    """Voxel count of each region 1..R times the voxel volume (mm³)."""
    lab = np.asarray(label_map)
    if lab.size and (lab.min() < 0 or lab.max() > n_regions):
        raise DataError(f"label map contains ids outside 0..{n_regions} (min {lab.min()}, max {lab.max()})")
    counts = np.bincount(lab.reshape(-1).astype(np.int64), minlength=n_regions + 1)
    return counts[1:].astype(np.float64) * voxel_volume


def draw_disease_offset(rng: DeterministicRng, group: str) -> float:
    if group not in GROUP_OFFSETS:
        raise ContractError(f"unknown group {group!r}; expected one of {GROUPS}")
    sd = GROUP_OFFSET_SD[group]
    return GROUP_OFFSETS[group] + (rng.normal(0.0, sd) if sd > 0 else 0.0)


def cognitive_score(disease_offset: float, eta: float) -> float:
    """Synthetic MMSE-like score: declines with disease-driven acceleration only."""
    return float(np.clip(30.0 - 0.4 * disease_offset - eta, 0.0, 30.0))


def generate_phantom(seed: int, subject_id: str, age: float, group: str, *,
                     geometry: PhantomGeometry | None = None,
                     disease_offset: float | None = None,
                     epsilon: float | None = None,
                     label_noise_sd: float = 2.0,
                     voxel_noise_sd: float = 0.02,
                     scan_id: str = "") -> Phantom:
    """Deterministic phantom for ``(seed, subject_id)``.

    effective_age = age + disease_offset + epsilon, with epsilon ~ N(0, label_noise_sd)
    unless given; disease_offset is drawn around the group mean unless given.
    """
    if not (AGE_RANGE[0] <= age <= AGE_RANGE[1]):
        raise ContractError(f"age {age} outside [{AGE_RANGE[0]}, {AGE_RANGE[1]}]")
    if group not in GROUP_OFFSETS:
        raise ContractError(f"unknown group {group!r}; expected one of {GROUPS}")
    geometry = geometry or build_geometry()
    rng = DeterministicRng(seed, ("phantom", subject_id))
    clinical = rng.substream("clinical")
    if disease_offset is None:
        disease_offset = draw_disease_offset(clinical, group)
    eps = clinical.normal(0.0, label_noise_sd) if epsilon is None else float(epsilon)
    eta = clinical.normal(0.0, 1.0)
    effective = float(age + disease_offset + eps)
    volume, labels = render(geometry, effective, rng.substream("anatomy"), noise_sd=voxel_noise_sd)
    return Phantom(
        volume=volume,
        label_map=labels,
        region_volumes=region_volumes(labels, geometry.n_regions, geometry.voxel_volume),
        age=float(age),
        effective_age=effective,
        disease_offset=float(disease_offset),
        group=group,
        cog_score=cognitive_score(disease_offset, eta),
        subject_id=subject_id,
        scan_id=scan_id,
    )


def reference_phantom(geometry: PhantomGeometry, age: float) -> Phantom:
    """Noise-free template at ``age``; its label map is the atlas stand-in."""
    volume, labels = render(geometry, age, None)
    return Phantom(volume, labels, region_volumes(labels, geometry.n_regions, geometry.voxel_volume),
                   age, age, 0.0, "CN", 30.0, "reference", "reference")


# ---------------------------------------------------------------------------
# cropping and normalisation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CropGeometry:
    """Index map between a volume and its three centered view chunks.

    For the view along axis ``a`` the chunk keeps ``t`` centered slices
    along ``a`` and a centered ``c1 x c2`` window over the remaining two axes
    (in increasing axis order); the view axis is moved last so each chunk
    has shape (c1, c2, t).  Window starts are ``floor((extent - size) / 2)``.
    """

    volume_shape: tuple[int, int, int]
    chunk_shape: tuple[int, int, int]

    def __post_init__(self):
        c1, c2, t = self.chunk_shape
        if min(c1, c2, t) < 1:
            raise ContractError(f"chunk shape must be positive, got {self.chunk_shape}")
        for view in range(3):
            for axis, size in zip(self._axes(view), (c1, c2, t)):
                if size > self.volume_shape[axis]:
                    raise ContractError(
                        f"chunk {self.chunk_shape} larger than volume {self.volume_shape} along axis {axis}")

    @staticmethod
    def _axes(view: int) -> tuple[int, int, int]:
        others = [a for a in range(3) if a != view]
        return (others[0], others[1], view)

    def slices(self, view: int) -> tuple[slice, slice, slice]:
        sizes = dict(zip(self._axes(view), self.chunk_shape))
        out = []
        for axis in range(3):
            start = (self.volume_shape[axis] - sizes[axis]) // 2
            out.append(slice(start, start + sizes[axis]))
        return tuple(out)

    def permutation(self, view: int) -> tuple[int, int, int]:
        """Axes of the cropped block taken in chunk order."""
        return self._axes(view)

    def crop(self, volume: np.ndarray, view: int) -> np.ndarray:
        return volume[self.slices(view)].transpose(self.permutation(view))

    def scatter(self, chunk: np.ndarray, view: int, out: np.ndarray) -> None:
        """Add ``chunk`` back into its source voxels of ``out`` (inverse of :meth:`crop`)."""
        out[self.slices(view)] += np.transpose(chunk, np.argsort(self.permutation(view)))

    def chunk_indices(self, view: int) -> np.ndarray:
        """(3, c1, c2, t) array of source voxel indices for every chunk voxel."""
        grids = np.meshgrid(*[np.arange(s.start, s.stop) for s in self.slices(view)], indexing="ij")
        return np.stack([gr.transpose(self.permutation(view)) for gr in grids])


def extract_view_chunks(volume: np.ndarray, chunk_shape: Sequence[int]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    geom = CropGeometry(tuple(volume.shape), tuple(int(v) for v in chunk_shape))
    return tuple(geom.crop(volume, v) for v in range(3))


def minmax_normalize(chunk: np.ndarray) -> np.ndarray:
    """(x - min) / (max - min); a constant chunk maps to zeros."""
    x = np.asarray(chunk, dtype=np.float64)
    lo, hi = x.min(), x.max()
    if not (np.isfinite(lo) and np.isfinite(hi)):
        raise DataError("min-max normalisation needs finite input")
    if hi == lo:
        return np.zeros_like(x)
    return (x - lo) / (hi - lo)


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AugmentParams:
    rotate: bool = False
    axis: int = 0
    angle_deg: float = 0.0
    translate: bool = False
    shift: tuple[int, int, int] = (0, 0, 0)

    @property
    def is_identity(self) -> bool:
        return not self.rotate and not self.translate


def max_shift(grid: int) -> int:
    return int(round(20 * grid / 128))


def draw_augmentation(rng: DeterministicRng, grid: int, p_rotate: float = 0.5, p_translate: float = 0.5,
                      max_angle: float = 20.0) -> AugmentParams:
    """Rotation and translation are drawn independently, each with its own probability."""
    u_rot = rng.random()
    axis = int(rng.integers(0, 3))
    angle = float(rng.uniform(-max_angle, max_angle))
    u_tr = rng.random()
    t = max_shift(grid)
    shift = tuple(int(v) for v in rng.integers(-t, t, size=3, endpoint=True))
    rotate, translate = u_rot < p_rotate, u_tr < p_translate
    return AugmentParams(rotate, axis if rotate else 0, angle if rotate else 0.0,
                         translate, shift if translate else (0, 0, 0))


def _rotation_source(points: np.ndarray, params: AugmentParams, center: float) -> np.ndarray:
    """Source coordinates (trilinear) for rotated output points, shape (3, ...)."""
    i, j = [a for a in range(3) if a != params.axis]
    th = math.radians(params.angle_deg)
    cos, sin = math.cos(th), math.sin(th)
    src = points.astype(np.float64, copy=True)
    di, dj = points[i] - center, points[j] - center
    # inverse rotation maps output coordinates to input coordinates
    src[i] = cos * di + sin * dj + center
    src[j] = -sin * di + cos * dj + center
    return src


def sample_augmented(volume: np.ndarray, params: AugmentParams, points: np.ndarray) -> np.ndarray:
    """Values of the augmented volume at integer ``points`` (3, ...), zero fill outside."""
    g = np.array(volume.shape).reshape((3,) + (1,) * (points.ndim - 1))
    q = points - np.array(params.shift).reshape((3,) + (1,) * (points.ndim - 1))
    valid = np.all((q >= 0) & (q < g), axis=0)
    qc = np.where(valid, q, 0)
    if params.rotate:
        src = _rotation_source(qc, params, (volume.shape[0] - 1) / 2.0)
        vals = ndimage.map_coordinates(volume, src.reshape(3, -1), order=1, mode="constant", cval=0.0)
        vals = vals.reshape(points.shape[1:])
    else:
        vals = volume[qc[0], qc[1], qc[2]]
    return np.where(valid, vals, 0.0)


def apply_augmentation(volume: np.ndarray, params: AugmentParams) -> np.ndarray:
    if params.is_identity:
        return volume.copy()
    pts = np.indices(volume.shape)
    return sample_augmented(volume, params, pts)


def augment(volume: np.ndarray, rng: DeterministicRng, **kwargs) -> np.ndarray:
    """Random rotation (p=0.5, ±20° about one principal axis, trilinear) and
    integer translation (p=0.5, ±20·G/128 voxels per axis), zero filled."""
    return apply_augmentation(volume, draw_augmentation(rng, volume.shape[0], **kwargs))


def augmented_chunks(volume: np.ndarray, params: AugmentParams, crop: CropGeometry) -> tuple[np.ndarray, ...]:
    """Same values as ``extract_view_chunks(apply_augmentation(volume, params))``,
    computed only at the cropped voxels."""
    if params.is_identity:
        return tuple(crop.crop(volume, v) for v in range(3))
    return tuple(sample_augmented(volume, params, crop.chunk_indices(v)) for v in range(3))


def preprocess(volume: np.ndarray, crop: CropGeometry, params: AugmentParams | None = None) -> np.ndarray:
    """Augment (optional), crop the three views and min-max normalise: (3, c1, c2, t)."""
    chunks = augmented_chunks(volume, params or AugmentParams(), crop)
    return np.stack([minmax_normalize(ch) for ch in chunks])


# ---------------------------------------------------------------------------
# corpus
# ---------------------------------------------------------------------------

@dataclass
class CorpusConfig:
    grid: int = 64
    n_regions: int = 24
    subjects: dict = field(default_factory=lambda: {"CN": 240})
    scans_per_subject: tuple[int, int] = (1, 3)
    scan_interval_years: float = 1.5
    seed: int = 0
    template_seed: int = 0
    split_seed: int = 0
    split_ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)
    label_noise_sd: float = 2.0
    voxel_noise_sd: float = 0.02
    voxel_mm: float = 2.0
    chunk_shape: tuple[int, int, int] = (32, 32, 8)

    def validate(self) -> None:
        bad = []
        if self.grid < 16:
            bad.append("grid")
        if self.n_regions < 3:
            bad.append("n_regions")
        if not self.subjects or any(g not in GROUPS or n < 0 for g, n in self.subjects.items()):
            bad.append("subjects")
        lo, hi = self.scans_per_subject
        if lo < 1 or hi < lo:
            bad.append("scans_per_subject")
        if abs(sum(self.split_ratios) - 1.0) > 1e-9 or min(self.split_ratios) < 0:
            bad.append("split_ratios")
        if self.label_noise_sd < 0:
            bad.append("label_noise_sd")
        if self.voxel_noise_sd < 0:
            bad.append("voxel_noise_sd")
        if any(c < 1 or c > self.grid for c in self.chunk_shape):
            bad.append("chunk_shape")
        if bad:
            raise ConfigError(f"invalid corpus config fields: {bad}", bad)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scans_per_subject"] = list(self.scans_per_subject)
        d["split_ratios"] = list(self.split_ratios)
        d["chunk_shape"] = list(self.chunk_shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusConfig":
        d = dict(d)
        for key in ("scans_per_subject", "split_ratios", "chunk_shape"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class ScanRecord:
    scan_id: str
    subject_id: str
    scan_index: int
    split: str
    group: str
    age: float
    effective_age: float
    disease_offset: float
    cog_score: float
    region_volumes: np.ndarray
    volume: np.ndarray | None = None      # raw intensities, float32
    label_map: np.ndarray | None = None
    chunks: np.ndarray | None = None      # normalised (3, c1, c2, t), no augmentation

    def meta(self) -> dict:
        return {
            "scan_id": self.scan_id,
            "subject_id": self.subject_id,
            "scan_index": self.scan_index,
            "split": self.split,
            "group": self.group,
            "age": self.age,
            "effective_age": self.effective_age,
            "disease_offset": self.disease_offset,
            "cog_score": self.cog_score,
        }


@dataclass
class Corpus:
    config: CorpusConfig
    geometry: PhantomGeometry
    records: list[ScanRecord]
    volume_mean: np.ndarray
    volume_std: np.ndarray
    age_mean: float
    age_std: float
    root: Path | None = None

    def split(self, name: str, groups: Iterable[str] | None = None) -> list[ScanRecord]:
        groups = set(groups) if groups is not None else None
        return [r for r in self.records if r.split == name and (groups is None or r.group in groups)]

    @property
    def crop(self) -> CropGeometry:
        g = self.config.grid
        return CropGeometry((g, g, g), tuple(self.config.chunk_shape))

    def load_volume(self, rec: ScanRecord) -> np.ndarray:
        if rec.volume is not None:
            return rec.volume
        if self.root is None:
            raise DataError(f"scan {rec.scan_id} has no volume in memory and the corpus has no root")
        return read_tensor(self.root / "samples" / rec.scan_id / "volume.tensor")

    def load_label_map(self, rec: ScanRecord) -> np.ndarray:
        if rec.label_map is not None:
            return rec.label_map
        if self.root is None:
            # in-memory corpus: the phantom is a pure function of the config and the record
            return _scan_phantom(self.config, self.geometry, rec.subject_id, rec.scan_index, rec.age,
                                 rec.group, rec.disease_offset).label_map
        return read_tensor(self.root / "samples" / rec.scan_id / "label_map.tensor").astype(np.int32)

    def chunks(self, rec: ScanRecord) -> np.ndarray:
        if rec.chunks is None:
            rec.chunks = preprocess(self.load_volume(rec), self.crop)
        return rec.chunks


def split_subjects(ids: Sequence[str], ratios=(0.8, 0.1, 0.1), seed: int = 0) -> dict[str, str]:
    """Shuffle subject ids with ``seed`` and cut into train/valid/test blocks."""
    ids = list(ids)
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ContractError(f"split ratios must sum to 1, got {ratios}")
    if len(ids) < 10:
        raise ContractError(f"need at least 10 subjects to split, got {len(ids)}")
    if len(set(ids)) != len(ids):
        raise ContractError("subject ids must be unique")
    order = DeterministicRng(seed, "split").permutation(len(ids))
    n = len(ids)
    n_train = int(round(ratios[0] * n))
    n_valid = int(round(ratios[1] * n))
    out = {}
    for rank, i in enumerate(order):
        out[ids[i]] = "train" if rank < n_train else ("valid" if rank < n_train + n_valid else "test")
    return out


def _subject_plan(config: CorpusConfig) -> list[tuple[str, str, float, float, int]]:
    """(subject_id, group, baseline_age, disease_offset, n_scans) for every subject."""
    plan = []
    for group in GROUPS:
        for k in range(int(config.subjects.get(group, 0))):
            sid = f"{group}{k:04d}"
            rng = DeterministicRng(config.seed, ("subject", sid))
            n_scans = int(rng.integers(config.scans_per_subject[0], config.scans_per_subject[1], endpoint=True))
            span = config.scan_interval_years * (n_scans - 1)
            age0 = float(rng.uniform(AGE_RANGE[0], AGE_RANGE[1] - span))
            offset = draw_disease_offset(rng.substream("disease"), group)
            plan.append((sid, group, age0, offset, n_scans))
    return plan


def _scan_phantom(config: CorpusConfig, geometry: PhantomGeometry, sid: str, k: int, age: float,
                  group: str, offset: float) -> Phantom:
    return generate_phantom(stable_hash(config.seed, sid, k), sid, age, group, geometry=geometry,
                            disease_offset=offset, label_noise_sd=config.label_noise_sd,
                            voxel_noise_sd=config.voxel_noise_sd, scan_id=f"{sid}_s{k}")


def generate_corpus(config: CorpusConfig, keep_label_maps: bool = False, keep_volumes: str = "all") -> Corpus:
    """Generate every scan in memory (volumes stored as float32).

    ``keep_volumes="train"`` drops raw volumes outside the train split once
    their chunks are extracted; only training-time augmentation needs them.
    """
    if keep_volumes not in ("all", "train"):
        raise ContractError(f"keep_volumes must be 'all' or 'train', got {keep_volumes!r}")
    config.validate()
    geometry = build_geometry(config.grid, config.n_regions, config.template_seed, config.voxel_mm)
    plan = _subject_plan(config)
    cn_ids = [p[0] for p in plan if p[1] == "CN"]
    splits = split_subjects(cn_ids, config.split_ratios, config.split_seed) if cn_ids else {}
    crop = CropGeometry((config.grid,) * 3, tuple(config.chunk_shape))
    records = []
    for sid, group, age0, offset, n_scans in plan:
        for k in range(n_scans):
            scan_id = f"{sid}_s{k}"
            ph = _scan_phantom(config, geometry, sid, k, age0 + k * config.scan_interval_years, group, offset)
            vol32 = ph.volume.astype(np.float32)
            split = splits.get(sid, "test")  # disease cohorts are evaluation-only
            records.append(ScanRecord(
                scan_id=scan_id, subject_id=sid, scan_index=k,
                split=split, group=group, age=ph.age,
                effective_age=ph.effective_age, disease_offset=ph.disease_offset,
                cog_score=ph.cog_score, region_volumes=ph.region_volumes,
                volume=vol32 if keep_volumes == "all" or split == "train" else None,
                label_map=ph.label_map.astype(np.int16) if keep_label_maps else None,
                chunks=preprocess(vol32.astype(np.float64), crop).astype(np.float32).astype(np.float64),
            ))
    train = [r for r in records if r.split == "train"]
    if train:
        vols = np.stack([r.region_volumes for r in train])
        vmean, vstd = vols.mean(axis=0), vols.std(axis=0)
        ages = np.array([r.age for r in train])
        amean, astd = float(ages.mean()), float(ages.std())
    else:
        vmean, vstd = np.zeros(config.n_regions), np.ones(config.n_regions)
        amean, astd = 0.0, 1.0
    vstd = np.where(vstd > 0, vstd, 1.0)
    return Corpus(config, geometry, records, vmean, vstd, amean, astd if astd > 0 else 1.0)


def build_corpus(config: CorpusConfig, root) -> Corpus:
    """Generate the corpus and write it under ``root``.

    Layout: ``manifest.json`` plus ``samples/<scan_id>/`` holding
    ``volume.tensor``, ``label_map.tensor``, ``view_s|view_c|view_a.tensor``
    and ``record.json``.  Paths in the manifest are relative to ``root``.
    """
    root = Path(root)
    corpus = generate_corpus(config, keep_label_maps=True)
    entries = []
    for rec in corpus.records:
        rel = Path("samples") / rec.scan_id
        d = root / rel
        files = {
            "volume": write_tensor(d / "volume.tensor", rec.volume, "f32"),
            "label_map": write_tensor(d / "label_map.tensor", rec.label_map, "f32"),
        }
        for name, chunk in zip(("view_s", "view_c", "view_a"), rec.chunks):
            files[name] = write_tensor(d / f"{name}.tensor", chunk, "f32")
        record = dict(rec.meta(), region_volumes=rec.region_volumes.tolist())
        (d / "record.json").write_text(json.dumps(record, indent=1, sort_keys=True))
        entries.append({"scan_id": rec.scan_id, "subject_id": rec.subject_id, "split": rec.split,
                        "group": rec.group, "path": str(rel), "sha256": files})
        # keep memory bounded; reload from disk on demand
        rec.label_map = None
        if rec.split != "train":
            rec.volume = None
    manifest = {
        "format_version": MANIFEST_VERSION,
        "config": config.to_dict(),
        "standardization": {
            "volume_mean": corpus.volume_mean.tolist(),
            "volume_std": corpus.volume_std.tolist(),
            "age_mean": corpus.age_mean,
            "age_std": corpus.age_std,
        },
        "samples": entries,
    }
    root.mkdir(parents=True, exist_ok=True)
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    corpus.root = root
    return corpus


def load_corpus(root, load_volumes: bool = False) -> Corpus:
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    if manifest.get("format_version") != MANIFEST_VERSION:
        raise DataError(f"corpus manifest version {manifest.get('format_version')} != {MANIFEST_VERSION}")
    config = CorpusConfig.from_dict(manifest["config"])
    geometry = build_geometry(config.grid, config.n_regions, config.template_seed, config.voxel_mm)
    records = []
    for entry in manifest["samples"]:
        d = root / entry["path"]
        meta = json.loads((d / "record.json").read_text())
        chunks = np.stack([read_tensor(d / f"{n}.tensor", entry["sha256"][n]) for n in ("view_s", "view_c", "view_a")])
        vol = read_tensor(d / "volume.tensor", entry["sha256"]["volume"]).astype(np.float32) if load_volumes else None
        records.append(ScanRecord(
            scan_id=meta["scan_id"], subject_id=meta["subject_id"], scan_index=meta["scan_index"],
            split=meta["split"], group=meta["group"], age=meta["age"], effective_age=meta["effective_age"],
            disease_offset=meta["disease_offset"], cog_score=meta["cog_score"],
            region_volumes=np.array(meta["region_volumes"]), volume=vol, chunks=chunks,
        ))
    st = manifest["standardization"]
    return Corpus(config, geometry, records, np.array(st["volume_mean"]), np.array(st["volume_std"]),
                  st["age_mean"], st["age_std"], root=root)
