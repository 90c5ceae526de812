"""Short-axis slice samples, preprocessing, augmentation and a synthetic ring dataset."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .tensor import load_tensor, save_tensor

TARGET_SPACING_MM = 1.5625
N_FOLDS = 5


@dataclass
class SliceSample:
    """One 2-D slice. ``spacing_mm`` is ``(sx, sy)``: columns, then rows."""

    image: np.ndarray
    mask: np.ndarray
    spacing_mm: tuple[float, float]
    patient_id: str
    phase_index: int
    slice_index: int
    area_mm2: float = float("nan")

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=np.uint8)
        self.spacing_mm = (float(self.spacing_mm[0]), float(self.spacing_mm[1]))
        if self.image.ndim != 2 or self.image.shape != self.mask.shape:
            raise ValueError(f"image {self.image.shape} and mask {self.mask.shape} must be equal 2-D shapes")
        if min(self.spacing_mm) <= 0:
            raise ValueError(f"spacing must be positive, got {self.spacing_mm}")
        if self.mask.size and self.mask.max() > 1:
            raise ValueError("mask must be binary")
        if math.isnan(self.area_mm2):
            self.area_mm2 = ground_truth_area(self.mask, self.spacing_mm)

    def with_arrays(self, image: np.ndarray, mask: np.ndarray, spacing=None) -> "SliceSample":
        """Copy with new pixel data; the area is recomputed from the new mask."""
        spacing = self.spacing_mm if spacing is None else spacing
        return replace(self, image=image, mask=mask, spacing_mm=spacing,
                       area_mm2=ground_truth_area(mask, spacing))

    @property
    def key(self) -> tuple[str, int, int]:
        return self.patient_id, self.phase_index, self.slice_index


@dataclass
class VolumeSeries:
    patient_id: str
    phase_index: int
    slices: list[SliceSample]
    slice_thickness_mm: float = 1.0

    def __post_init__(self):
        idx = [s.slice_index for s in self.slices]
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise ValueError("slice_index must be strictly increasing within a volume")
        if len({s.mask.shape for s in self.slices}) > 1:
            raise ValueError("all slices of a volume must share one shape")
        for s in self.slices:
            if (s.patient_id, s.phase_index) != (self.patient_id, self.phase_index):
                raise ValueError("slices of a volume must share patient and phase")


@dataclass
class Dataset:
    samples: list[SliceSample]
    # patient_id -> {"ed_phase": int, "es_phase": int}
    patients: dict[str, dict] = field(default_factory=dict)
    slice_thickness_mm: float = 8.0

    @property
    def patient_ids(self) -> list[str]:
        return sorted({s.patient_id for s in self.samples})

    def volumes(self, patient_ids=None) -> list[VolumeSeries]:
        return group_volumes(self.samples, self.slice_thickness_mm, patient_ids)

    def subset(self, patient_ids) -> "Dataset":
        keep = set(patient_ids)
        return Dataset([s for s in self.samples if s.patient_id in keep],
                       {p: m for p, m in self.patients.items() if p in keep},
                       self.slice_thickness_mm)


def group_volumes(samples, slice_thickness_mm: float = 1.0, patient_ids=None) -> list[VolumeSeries]:
    keep = None if patient_ids is None else set(patient_ids)
    groups: dict[tuple[str, int], list[SliceSample]] = {}
    for s in samples:
        if keep is None or s.patient_id in keep:
            groups.setdefault((s.patient_id, s.phase_index), []).append(s)
    return [VolumeSeries(pid, ph, sorted(g, key=lambda s: s.slice_index), slice_thickness_mm)
            for (pid, ph), g in sorted(groups.items())]


def ground_truth_area(mask, spacing) -> float:
    """Foreground pixel count times pixel area, in mm^2."""
    m = np.asarray(mask)
    return float(np.count_nonzero(m == 1)) * float(spacing[0]) * float(spacing[1])


# ---------------------------------------------------------------- resampling


def _source_coords(n_out: int, scale: float) -> np.ndarray:
    # centre-aligned: output pixel i covers the same physical point as source i*scale offset by half a pixel
    return (np.arange(n_out) + 0.5) * scale - 0.5


def _bilinear_grid(img: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    def weights(u, n):
        u = np.clip(u, 0.0, n - 1)
        lo = np.minimum(np.floor(u).astype(int), n - 1)
        hi = np.minimum(lo + 1, n - 1)
        return lo, hi, u - lo

    r0, r1, fr = weights(rows, img.shape[0])
    c0, c1, fc = weights(cols, img.shape[1])
    top = img[r0][:, c0] * (1 - fc) + img[r0][:, c1] * fc
    bot = img[r1][:, c0] * (1 - fc) + img[r1][:, c1] * fc
    return top * (1 - fr)[:, None] + bot * fr[:, None]


def _nearest_grid(img: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    ri = np.clip(np.floor(rows + 0.5).astype(int), 0, img.shape[0] - 1)
    ci = np.clip(np.floor(cols + 0.5).astype(int), 0, img.shape[1] - 1)
    return img[np.ix_(ri, ci)]


def resample_to_spacing(sample: SliceSample, target_mm: float = TARGET_SPACING_MM) -> SliceSample:
    """Resample to isotropic ``target_mm``: bilinear image, nearest-neighbour mask."""
    if target_mm <= 0:
        raise ValueError("target spacing must be positive")
    sx, sy = sample.spacing_mm
    h, w = sample.image.shape
    if sx == target_mm and sy == target_mm:
        return sample.with_arrays(sample.image.copy(), sample.mask.copy())
    new_h, new_w = int(round(h * sy / target_mm)), int(round(w * sx / target_mm))
    if new_h < 1 or new_w < 1:
        raise ValueError(f"resampling {h}x{w} at {sample.spacing_mm} mm gives an empty image")
    rows = _source_coords(new_h, target_mm / sy)
    cols = _source_coords(new_w, target_mm / sx)
    return sample.with_arrays(_bilinear_grid(sample.image, rows, cols),
                              _nearest_grid(sample.mask, rows, cols),
                              (target_mm, target_mm))


def _crop_or_pad_axis(arr: np.ndarray, size: int, axis: int) -> np.ndarray:
    n = arr.shape[axis]
    if n > size:
        start = (n - size) // 2
        return np.take(arr, range(start, start + size), axis=axis)
    if n < size:
        lo = (size - n) // 2
        pad = [(0, 0)] * arr.ndim
        pad[axis] = (lo, size - n - lo)
        return np.pad(arr, pad)
    return arr


def center_crop_or_pad(sample: SliceSample, size: int) -> SliceSample:
    """Centre crop or zero pad to ``size`` x ``size`` (odd remainder on the high side)."""
    if size <= 0:
        raise ValueError("size must be positive")
    img, msk = sample.image, sample.mask
    for axis in (0, 1):
        img = _crop_or_pad_axis(img, size, axis)
        msk = _crop_or_pad_axis(msk, size, axis)
    return sample.with_arrays(np.ascontiguousarray(img), np.ascontiguousarray(msk))


def preprocess(sample: SliceSample, size: int, target_mm: float = TARGET_SPACING_MM) -> SliceSample:
    return center_crop_or_pad(resample_to_spacing(sample, target_mm), size)


# -------------------------------------------------------------- augmentation


def transform_sample(sample: SliceSample, angle_deg: float, shift_px: tuple[float, float]) -> SliceSample:
    """Rotate about the image centre by ``angle_deg`` then shift by ``(dy, dx)`` pixels.

    Pixels mapped from outside the source are zero. The image is bilinear,
    the mask nearest-neighbour.
    """
    h, w = sample.image.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    theta = math.radians(angle_deg)
    cos, sin = math.cos(theta), math.sin(theta)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    # inverse map: output (y, x) -> source position
    y0 = yy - cy - shift_px[0]
    x0 = xx - cx - shift_px[1]
    src_x = cos * x0 + sin * y0 + cx
    src_y = -sin * x0 + cos * y0 + cy
    image = ndimage.map_coordinates(sample.image, [src_y, src_x], order=1, mode="constant", cval=0.0)
    ri = np.floor(src_y + 0.5).astype(int)
    ci = np.floor(src_x + 0.5).astype(int)
    inside = (ri >= 0) & (ri < h) & (ci >= 0) & (ci < w)
    mask = np.zeros((h, w), dtype=np.uint8)
    mask[inside] = sample.mask[ri[inside], ci[inside]]
    return sample.with_arrays(image, mask)


def augment(sample: SliceSample, rng: np.random.Generator) -> list[SliceSample]:
    """Two randomly rotated (0-360 deg) and translated (up to half the size) copies."""
    h, w = sample.image.shape
    out = []
    for _ in range(2):
        angle = rng.uniform(0.0, 360.0)
        dy = rng.uniform(-h / 2.0, h / 2.0)
        dx = rng.uniform(-w / 2.0, w / 2.0)
        out.append(transform_sample(sample, angle, (dy, dx)))
    return out


def augment_all(samples, seed: int) -> list[SliceSample]:
    """Originals followed by their augmented copies; one RNG stream per sample index."""
    out = list(samples)
    for i, s in enumerate(samples):
        out.extend(augment(s, np.random.default_rng([seed, i])))
    return out


# ------------------------------------------------------------------ synthetic


@dataclass(frozen=True)
class SyntheticRingSpec:
    """Generator settings for bright myocardium-like annuli.

    Radii are in mm for the basal slice at end-diastole; they shrink toward
    the apex and over the contraction cycle.
    """

    image_size: int = 64
    spacing_mm: tuple[float, float] = (1.3, 1.9)
    center_jitter_mm: float = 6.0
    inner_radius_mm: tuple[float, float] = (10.0, 15.0)
    outer_radius_mm: tuple[float, float] = (19.0, 25.0)
    ring_intensity: float = 1.0
    pool_intensity: float = 0.6
    background_intensity: float = 0.2
    texture_amplitude: float = 0.05
    noise_std: float = 0.05
    inner_contraction: float = 0.3
    outer_contraction: float = 0.1
    apex_scale: float = 0.55
    slice_thickness_mm: float = 8.0
    seed: int = 0

    def validate(self) -> None:
        lo, hi = self.spacing_mm
        if not 0 < lo <= hi:
            raise ValueError(f"spacing range must satisfy 0 < lo <= hi, got {self.spacing_mm}")
        if not 0 < self.inner_radius_mm[0] <= self.inner_radius_mm[1]:
            raise ValueError(f"invalid inner radius range {self.inner_radius_mm}")
        if not self.outer_radius_mm[0] <= self.outer_radius_mm[1]:
            raise ValueError(f"invalid outer radius range {self.outer_radius_mm}")
        if self.inner_radius_mm[1] >= self.outer_radius_mm[0]:
            raise ValueError("inner radius range must lie strictly below the outer radius range (r_in < r_out)")
        reach_px = (self.outer_radius_mm[1] + self.center_jitter_mm + 1.0) / lo
        if reach_px >= self.image_size / 2:
            raise ValueError("rings do not fit: outer radius + jitter must stay below half the image size")
        if not 0 < self.apex_scale <= 1:
            raise ValueError("apex_scale must be in (0, 1]")
        if not (0 <= self.inner_contraction < 1 and 0 <= self.outer_contraction < 1):
            raise ValueError("contraction fractions must be in [0, 1)")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")


def render_ring(shape, spacing, center_mm, r_in_mm: float, r_out_mm: float) -> np.ndarray:
    """Binary annulus r_in <= d < r_out, measured from pixel centres, offset from the image centre."""
    h, w = shape
    sx, sy = spacing
    y = (np.arange(h) - (h - 1) / 2.0) * sy - center_mm[0]
    x = (np.arange(w) - (w - 1) / 2.0) * sx - center_mm[1]
    d = np.hypot(y[:, None], x[None, :])
    return ((d >= r_in_mm) & (d < r_out_mm)).astype(np.uint8)


def contraction(phase: int, n_phases: int) -> float:
    """0 at end-diastole (phase 0), 1 at end-systole (mid-cycle)."""
    if n_phases <= 1:
        return 0.0
    return 0.5 * (1.0 - math.cos(2.0 * math.pi * phase / n_phases))


def generate_synthetic_dataset(spec: SyntheticRingSpec, n_patients: int, phases: int, slices: int) -> Dataset:
    spec.validate()
    if n_patients < 1 or phases < 1 or slices < 1:
        raise ValueError("n_patients, phases and slices must be positive")
    n = spec.image_size
    samples, patients = [], {}
    for p in range(n_patients):
        prng = np.random.default_rng([spec.seed, p])
        pid = f"P{p:03d}"
        sp = float(prng.uniform(*spec.spacing_mm))
        r_in0 = prng.uniform(*spec.inner_radius_mm)
        r_out0 = prng.uniform(*spec.outer_radius_mm)
        center = prng.uniform(-spec.center_jitter_mm, spec.center_jitter_mm, size=2)
        waves = prng.normal(0.0, 2 * math.pi / (0.25 * n * sp), size=(3, 2))
        phis = prng.uniform(0, 2 * math.pi, size=3)
        yy, xx = np.mgrid[0:n, 0:n] * sp
        texture = sum(np.sin(k[0] * yy + k[1] * xx + ph) for k, ph in zip(waves, phis)) / 3.0
        background = spec.background_intensity + spec.texture_amplitude * texture
        es_phase = phases // 2 if phases > 1 else 0
        patients[pid] = {"ed_phase": 0, "es_phase": es_phase}
        for k in range(phases):
            c = contraction(k, phases)
            for z in range(slices):
                srng = np.random.default_rng([spec.seed, p, k, z])
                frac = z / (slices - 1) if slices > 1 else 1.0
                scale = spec.apex_scale + (1.0 - spec.apex_scale) * frac
                r_in = r_in0 * scale * (1.0 - spec.inner_contraction * c)
                r_out = r_out0 * scale * (1.0 - spec.outer_contraction * c)
                ctr = center + srng.uniform(-1.0, 1.0, size=2)
                mask = render_ring((n, n), (sp, sp), ctr, r_in, r_out)
                pool = render_ring((n, n), (sp, sp), ctr, 0.0, r_in)
                image = np.where(mask == 1, spec.ring_intensity,
                                 np.where(pool == 1, spec.pool_intensity, background))
                image = image + srng.normal(0.0, spec.noise_std, size=(n, n))
                samples.append(SliceSample(image, mask, (sp, sp), pid, k, z))
    return Dataset(samples, patients, spec.slice_thickness_mm)


# -------------------------------------------------------------------- folds


@dataclass(frozen=True)
class FoldSplit:
    fold_id: int
    train: tuple[str, ...]
    test: tuple[str, ...]


def split_folds(patient_ids, seed: int, n_folds: int = N_FOLDS) -> list[FoldSplit]:
    """Patient-level k-fold partition; test sizes differ by at most one."""
    ids = sorted(set(patient_ids))
    if len(ids) < n_folds:
        raise ValueError(f"need at least {n_folds} patients for {n_folds}-fold splitting, got {len(ids)}")
    order = np.random.default_rng(seed).permutation(len(ids))
    chunks = np.array_split(order, n_folds)
    folds = []
    for f, chunk in enumerate(chunks):
        test = tuple(sorted(ids[i] for i in chunk))
        train = tuple(p for p in ids if p not in set(test))
        folds.append(FoldSplit(f, train, test))
    return folds


# ----------------------------------------------------------------- manifest


def save_dataset(dataset: Dataset, directory) -> Path:
    """Write ``manifest.json`` plus one TNSR file each for image and mask."""
    root = Path(directory)
    (root / "slices").mkdir(parents=True, exist_ok=True)
    entries = []
    for s in dataset.samples:
        stem = f"{s.patient_id}_ph{s.phase_index:02d}_sl{s.slice_index:02d}"
        img_rel, msk_rel = f"slices/{stem}_image.tnsr", f"slices/{stem}_mask.tnsr"
        save_tensor(root / img_rel, s.image)
        save_tensor(root / msk_rel, s.mask.astype(np.float64))
        entries.append({
            "patient_id": s.patient_id, "phase_index": s.phase_index, "slice_index": s.slice_index,
            "spacing_mm": list(s.spacing_mm), "area_mm2": s.area_mm2,
            "image": img_rel, "mask": msk_rel,
        })
    manifest = {"format": "mtlseg-dataset", "version": 1,
                "slice_thickness_mm": dataset.slice_thickness_mm,
                "patients": dataset.patients, "slices": entries}
    path = root / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


def load_dataset(directory) -> Dataset:
    root = Path(directory)
    path = root / "manifest.json"
    if not path.is_file():
        raise FileNotFoundError(f"no manifest.json in {root}")
    manifest = json.loads(path.read_text())
    samples = []
    for e in manifest["slices"]:
        mask = load_tensor(root / e["mask"])
        samples.append(SliceSample(load_tensor(root / e["image"]), mask.astype(np.uint8),
                                   tuple(e["spacing_mm"]), e["patient_id"], int(e["phase_index"]),
                                   int(e["slice_index"]), float(e["area_mm2"])))
    return Dataset(samples, manifest.get("patients", {}), float(manifest.get("slice_thickness_mm", 1.0)))


def spec_from_dict(d: dict) -> SyntheticRingSpec:
    fields_ = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
    return SyntheticRingSpec(**fields_)


def spec_to_dict(spec: SyntheticRingSpec) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(spec).items()}
