"""Dataset plumbing: manifest ingestion, ROI unification to 64x64 patches,
Min-Max normalization, non-sign sampling, geometric augmentation, stratified
fold assignment, and the synthetic stand-in dataset generator.

Conventions: slices are 2-d arrays indexed [row, col]; a bbox is
(x, y, w, h) with x = column of the left edge and y = row of the top edge.
Patch tensors are (1, 1, 64, 64) float32 in [-1, 1].
"""

from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass, field

import numpy as np

from .util import spawn_rng

PATCH = 64
WINDOW_STRIDE = 32
EXCLUDE_AREA_FRAC = 0.45

CLASS_NAMES = ("GGO", "lobulation", "calcification", "CV", "spiculation",
               "PI", "BMP", "AB", "OP")
NORMAL_NAME = "normal"

REAL = "real"
GENERATED = "generated"
AUGMENTED = "augmented"


class ManifestError(ValueError):
    """Malformed manifest content, carrying the offending line number."""


class BboxError(ValueError):
    """Annotation geometry outside the slice or degenerate."""


class InsufficientDataError(RuntimeError):
    """Rejection sampling could not find enough eligible area."""


@dataclass
class RoiAnnotation:
    image_id: str
    bbox: tuple[int, int, int, int]
    label: int
    patient_id: str | None = None

    def validate(self, height, width):
        x, y, w, h = self.bbox
        if w < 1 or h < 1:
            raise BboxError(f"{self.image_id}: bbox {self.bbox} has empty extent")
        if x < 0 or y < 0 or x + w > width or y + h > height:
            raise BboxError(
                f"{self.image_id}: bbox {self.bbox} outside {height}x{width} slice"
            )


@dataclass
class PatchRecord:
    pixels: np.ndarray
    label: int
    provenance: str = REAL
    fold: int | None = None
    source_stats: tuple[float, float] = (0.0, 1.0)
    record_id: str = ""
    patient_id: str | None = None


@dataclass
class ManifestEntry:
    image_path: str
    bbox: tuple[int, int, int, int]
    label: int
    patient_id: str | None = None
    fold: int | None = None


def read_manifest(path) -> list[ManifestEntry]:
    """Parse a newline-delimited JSON manifest (UTF-8)."""
    entries = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"line {lineno}: not valid JSON ({exc.msg})") from exc
            try:
                name = obj["label"]
                bbox = tuple(int(v) for v in obj["bbox"])
                path_ = obj["image_path"]
            except (KeyError, TypeError, ValueError) as exc:
                raise ManifestError(f"line {lineno}: missing or malformed field ({exc})") from exc
            if len(bbox) != 4:
                raise ManifestError(f"line {lineno}: bbox must have 4 entries")
            if name not in CLASS_NAMES:
                raise ManifestError(f"line {lineno}: unknown label {name!r}")
            entries.append(ManifestEntry(
                image_path=path_,
                bbox=bbox,
                label=CLASS_NAMES.index(name),
                patient_id=obj.get("patient_id"),
                fold=obj.get("fold"),
            ))
    return entries


# ---------------------------------------------------------------------------
# raster formats

CTS1_MAGIC = b"CTS1"


def write_cts1(path, img: np.ndarray):
    """16-bit little-endian grayscale raster with an 8-byte header."""
    img = np.asarray(img)
    if img.ndim != 2:
        raise ValueError("CTS1 stores a single 2-d slice")
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(CTS1_MAGIC + struct.pack("<HH", h, w))
        fh.write(img.astype("<u2").tobytes())


def load_slice(path) -> np.ndarray:
    """Load a CTS1 raster or an 8-bit binary PGM, as float32."""
    with open(path, "rb") as fh:
        head = fh.read(2)
        fh.seek(0)
        if head == b"P5":
            return _read_pgm(fh, path)
        magic = fh.read(4)
        if magic != CTS1_MAGIC:
            raise ValueError(f"{path}: not a CTS1 or PGM raster")
        h, w = struct.unpack("<HH", fh.read(4))
        data = np.frombuffer(fh.read(h * w * 2), dtype="<u2")
        if data.size != h * w:
            raise ValueError(f"{path}: truncated CTS1 payload")
        return data.reshape(h, w).astype(np.float32)


def _read_pgm(fh, path):
    tokens = []
    while len(tokens) < 4:
        line = fh.readline()
        if not line:
            raise ValueError(f"{path}: truncated PGM header")
        text = line.split(b"#", 1)[0]
        tokens.extend(text.split())
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = (int(t) for t in tokens[1:4])
    if maxval > 255:
        raise ValueError(f"{path}: only 8-bit PGM supported")
    data = np.frombuffer(fh.read(w * h), dtype=np.uint8)
    if data.size != w * h:
        raise ValueError(f"{path}: truncated PGM payload")
    return data.reshape(h, w).astype(np.float32)


# ---------------------------------------------------------------------------
# geometry

def bilinear_resize(src: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Standard align-corners=false bilinear resampling."""
    if out_h < 1 or out_w < 1:
        raise ValueError(f"output dims must be positive, got {out_h}x{out_w}")
    src = np.asarray(src, dtype=np.float64)
    in_h, in_w = src.shape
    ys = np.clip((np.arange(out_h) + 0.5) * (in_h / out_h) - 0.5, 0, in_h - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * (in_w / out_w) - 0.5, 0, in_w - 1)
    return _sample_bilinear(src, ys[:, None], xs[None, :])


def _sample_bilinear(src, ys, xs):
    """Bilinear lookup at (possibly fractional) coordinates, edge-clamped."""
    in_h, in_w = src.shape
    ys = np.clip(ys, 0, in_h - 1)
    xs = np.clip(xs, 0, in_w - 1)
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    y1 = np.minimum(y0 + 1, in_h - 1)
    x1 = np.minimum(x0 + 1, in_w - 1)
    fy = ys - y0
    fx = xs - x0
    top = src[y0, x0] * (1 - fx) + src[y0, x1] * fx
    bot = src[y1, x0] * (1 - fx) + src[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def minmax_normalize(patch: np.ndarray):
    """Map a raw patch onto [-1, 1]; a constant patch maps to all zeros.

    Returns the (1, 1, 64, 64) float32 tensor and the (min, max) stats needed
    to invert the map.
    """
    patch = np.asarray(patch, dtype=np.float64)
    if patch.shape != (PATCH, PATCH):
        raise ValueError(f"expected a {PATCH}x{PATCH} patch, got {patch.shape}")
    lo, hi = float(patch.min()), float(patch.max())
    if hi > lo:
        out = 2.0 * (patch - lo) / (hi - lo) - 1.0
    else:
        out = np.zeros_like(patch)
    return out.astype(np.float32).reshape(1, 1, PATCH, PATCH), (lo, hi)


def denormalize(tensor: np.ndarray, stats) -> np.ndarray:
    """Inverse of minmax_normalize; accepts the 4-d tensor or a 2-d patch."""
    lo, hi = stats
    arr = np.asarray(tensor, dtype=np.float64).reshape(PATCH, PATCH)
    return (arr + 1.0) / 2.0 * (hi - lo) + lo


def _window_offsets(size):
    # stride-32 tiling with a flush-end window when size is not aligned
    offs = list(range(0, size - PATCH + 1, WINDOW_STRIDE))
    if offs[-1] != size - PATCH:
        offs.append(size - PATCH)
    return offs


def unify_roi(slice_img: np.ndarray, ann: RoiAnnotation) -> list[np.ndarray]:
    """Turn one ROI into raw 64x64 patches.

    Small regions (longer side <= 64) yield a single patch with the bbox
    centered, clamped to the slice bounds. Larger regions are rescaled so
    each side lands on a multiple of 32 (>= 64), then tiled by a sliding
    64x64 window with stride 32. Regions covering >= 45% of the slice area
    are dropped as unreliable annotations.
    """
    slice_img = np.asarray(slice_img, dtype=np.float64)
    height, width = slice_img.shape
    ann.validate(height, width)
    x, y, w, h = ann.bbox
    if w * h >= EXCLUDE_AREA_FRAC * height * width:
        return []
    if max(w, h) <= PATCH:
        cx, cy = x + w / 2.0, y + h / 2.0
        ox = int(np.clip(round(cx) - PATCH // 2, 0, width - PATCH))
        oy = int(np.clip(round(cy) - PATCH // 2, 0, height - PATCH))
        return [slice_img[oy:oy + PATCH, ox:ox + PATCH].copy()]
    region = slice_img[y:y + h, x:x + w]
    f = max(PATCH, WINDOW_STRIDE * (max(w, h) // WINDOW_STRIDE)) / max(w, h)
    out_h = max(PATCH, WINDOW_STRIDE * round(h * f / WINDOW_STRIDE))
    out_w = max(PATCH, WINDOW_STRIDE * round(w * f / WINDOW_STRIDE))
    resized = bilinear_resize(region, out_h, out_w)
    return [
        resized[oy:oy + PATCH, ox:ox + PATCH].copy()
        for oy in _window_offsets(out_h)
        for ox in _window_offsets(out_w)
    ]


def sample_nonsign(slices: dict[str, np.ndarray], count: int,
                   exclusion: list[RoiAnnotation], rng, label: int,
                   provenance=REAL) -> list[PatchRecord]:
    """Randomly cut 64x64 patches whose footprint avoids every excluded bbox."""
    if count == 0:
        return []
    if not slices:
        raise InsufficientDataError("no slices to sample from")
    boxes = {}
    for ann in exclusion:
        boxes.setdefault(ann.image_id, []).append(ann.bbox)
    ids = sorted(slices)
    out = []
    attempts = 0
    while len(out) < count:
        if attempts >= 10 * count:
            raise InsufficientDataError(
                f"gave up after {attempts} draws with {len(out)}/{count} patches"
            )
        attempts += 1
        image_id = ids[int(rng.integers(len(ids)))]
        img = slices[image_id]
        height, width = img.shape
        if height < PATCH or width < PATCH:
            continue
        ox = int(rng.integers(width - PATCH + 1))
        oy = int(rng.integers(height - PATCH + 1))
        if any(ox < bx + bw and bx < ox + PATCH and oy < by + bh and by < oy + PATCH
               for bx, by, bw, bh in boxes.get(image_id, ())):
            continue
        raw = img[oy:oy + PATCH, ox:ox + PATCH]
        pixels, stats = minmax_normalize(raw)
        out.append(PatchRecord(
            pixels=pixels, label=label, provenance=provenance,
            source_stats=stats, record_id=f"{image_id}:nonsign:{ox},{oy}",
        ))
    return out


# ---------------------------------------------------------------------------
# augmentation

@dataclass
class AugmentParams:
    angle_deg: float = 0.0
    shift_x: float = 0.0
    shift_y: float = 0.0
    shear_deg: float = 0.0
    zoom: float = 1.0
    flip_h: bool = False
    flip_v: bool = False


def draw_augment_params(rng) -> AugmentParams:
    """One random draw over the augmentation ranges: rotation +-30 degrees,
    shifts +-0.1 of the side, shear +-10 degrees, zoom 0.9..1.1, coin-flip
    mirrors."""
    return AugmentParams(
        angle_deg=float(rng.uniform(-30.0, 30.0)),
        shift_x=float(rng.uniform(-0.1, 0.1)),
        shift_y=float(rng.uniform(-0.1, 0.1)),
        shear_deg=float(rng.uniform(-10.0, 10.0)),
        zoom=float(rng.uniform(0.9, 1.1)),
        flip_h=bool(rng.random() < 0.5),
        flip_v=bool(rng.random() < 0.5),
    )


def apply_augment(patch: np.ndarray, params: AugmentParams) -> np.ndarray:
    """Affine warp about the patch center with bilinear resampling;
    out-of-bounds samples replicate the nearest edge, and the output is
    clamped to the source value range."""
    patch = np.asarray(patch, dtype=np.float64)
    h, w = patch.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    th = np.deg2rad(params.angle_deg)
    sh = np.tan(np.deg2rad(params.shear_deg))
    z = params.zoom
    rot = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
    shear = np.array([[1.0, sh], [0.0, 1.0]])
    zoom = np.array([[z, 0.0], [0.0, z]])
    flip = np.diag([-1.0 if params.flip_h else 1.0, -1.0 if params.flip_v else 1.0])
    lin = rot @ shear @ zoom @ flip
    # output pixel -> source pixel: invert the center-anchored forward map
    inv = np.linalg.inv(lin)
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    dx = xs - cx - params.shift_x * w
    dy = ys - cy - params.shift_y * h
    src_x = inv[0, 0] * dx + inv[0, 1] * dy + cx
    src_y = inv[1, 0] * dx + inv[1, 1] * dy + cy
    out = _sample_bilinear(patch, src_y, src_x)
    return np.clip(out, patch.min(), patch.max())


def augment(patch: np.ndarray, rng) -> np.ndarray:
    return apply_augment(patch, draw_augment_params(rng))


# ---------------------------------------------------------------------------
# folds

def assign_folds(records: list[PatchRecord], k: int = 3, rng=None) -> list[PatchRecord]:
    """Stratified fold assignment, grouping same-patient records together.

    Per class, patient groups are shuffled and dealt (largest first) onto the
    currently smallest fold. Classes with fewer patients than folds fall back
    to patch-level stratification with a warning. Mutates and returns records.
    """
    if k < 2:
        raise ValueError(f"need at least 2 folds, got {k}")
    rng = rng or np.random.default_rng(0)
    by_class: dict[int, list[PatchRecord]] = {}
    for rec in records:
        by_class.setdefault(rec.label, []).append(rec)
    for label in sorted(by_class):
        recs = by_class[label]
        groups: dict[str, list[PatchRecord]] = {}
        for i, rec in enumerate(recs):
            key = rec.patient_id if rec.patient_id is not None else f"#{i}"
            groups.setdefault(key, []).append(rec)
        if len(groups) < k and any(r.patient_id is not None for r in recs):
            warnings.warn(
                f"class {label}: {len(groups)} patients < {k} folds; "
                "falling back to patch-level stratification"
            )
            groups = {f"#{i}": [rec] for i, rec in enumerate(recs)}
        bundles = list(groups.values())
        order = rng.permutation(len(bundles))
        bundles = [bundles[i] for i in order]
        bundles.sort(key=len, reverse=True)  # stable: keeps shuffle within sizes
        counts = [0] * k
        for bundle in bundles:
            fold = counts.index(min(counts))
            for rec in bundle:
                rec.fold = fold
            counts[fold] += len(bundle)
    return records


def split_folds(records, held_out: int):
    train = [r for r in records if r.fold is not None and r.fold != held_out]
    test = [r for r in records if r.fold == held_out]
    return train, test


# ---------------------------------------------------------------------------
# synthetic stand-in dataset

def _synthetic_patch(label: int, rng) -> np.ndarray:
    """Parametric 64x64 pattern: class-dependent background level, blob size
    and texture frequency, with within-class jitter."""
    yy, xx = np.mgrid[0:PATCH, 0:PATCH].astype(np.float64)
    base = 0.14 + 0.05 * label + rng.normal(0.0, 0.008)
    img = np.full((PATCH, PATCH), base)

    # the blob-area fraction is the contrast that survives per-patch Min-Max
    # normalization; the radius step keeps adjacent classes separable by the
    # normalized pixel mean
    radius = (5.0 + 3.5 * label) * rng.uniform(0.95, 1.05)
    cy = PATCH / 2 + rng.uniform(-5, 5)
    cx = PATCH / 2 + rng.uniform(-5, 5)
    amp = rng.uniform(0.62, 0.72)
    d2 = (yy - cy) ** 2 + (xx - cx) ** 2
    img += amp * np.exp(-d2 / (2.0 * radius ** 2))

    freq = 1.0 + (label % 4)
    theta = rng.uniform(0, np.pi)
    phase = rng.uniform(0, 2 * np.pi)
    wave = np.cos(2 * np.pi * freq / PATCH * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
    img += 0.04 * wave

    img += rng.normal(0.0, 0.01, size=img.shape)
    return np.clip(img, 0.0, 1.6) * 2500.0 + 400.0


def make_synthetic_dataset(num_classes: int, per_class: int, rng,
                           k_folds: int = 3) -> list[PatchRecord]:
    """Deterministic labeled synthetic records, normalized and folded."""
    seed = int(rng.integers(2 ** 31))
    records = []
    for label in range(num_classes):
        for i in range(per_class):
            sub = spawn_rng(seed, label, i)
            pixels, stats = minmax_normalize(_synthetic_patch(label, sub))
            records.append(PatchRecord(
                pixels=pixels, label=label, provenance=REAL,
                source_stats=stats, record_id=f"synth-{label}-{i}",
            ))
    assign_folds(records, k=k_folds, rng=spawn_rng(seed, 0xF01D))
    return records


def extract_patches(entries: list[ManifestEntry], slices: dict[str, np.ndarray],
                    k_folds: int = 3, rng=None):
    """Manifest entries + loaded slices -> normalized, folded PatchRecords.

    Returns (records, per-class kept counts, excluded annotation count).
    """
    records = []
    kept = {}
    excluded = 0
    for entry in entries:
        img = slices[entry.image_path]
        ann = RoiAnnotation(entry.image_path, entry.bbox, entry.label, entry.patient_id)
        raws = unify_roi(img, ann)
        if not raws:
            excluded += 1
            continue
        for i, raw in enumerate(raws):
            pixels, stats = minmax_normalize(raw)
            records.append(PatchRecord(
                pixels=pixels, label=entry.label, provenance=REAL,
                fold=entry.fold, source_stats=stats,
                record_id=f"{entry.image_path}:{entry.bbox}#{i}",
                patient_id=entry.patient_id,
            ))
            kept[entry.label] = kept.get(entry.label, 0) + 1
    if any(r.fold is None for r in records):
        assign_folds(records, k=k_folds, rng=rng or np.random.default_rng(0))
    return records, kept, excluded
