"""Synthetic CT phantoms, HU-threshold cropping, label decomposition and dataset I/O.

A phantom slice is soft tissue inside an air-surrounded body outline, with an
elliptical vertebral body. Blastic lesions are bright blobs (+500 HU), lytic
lesions dark blobs (about 20 HU), mixed lesions carry one of each. Posterolateral
involvement moves the lesion mass into one or both posterolateral sectors of
the vertebra (the lower-left / lower-right of the ellipse, posterior being
down in image coordinates).
"""
import csv
import enum
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kernels

HU_MIN = -1024.0
HU_MAX = 3071.0
SOFT_TISSUE_HU = 40.0
BONE_HU = 400.0
BLASTIC_DELTA_HU = 500.0
LYTIC_HU = 20.0
AIR_HU = -1000.0

SLICE_MAGIC = b"MTSL"
SLICE_VERSION = 1
MANIFEST_NAME = "manifest.csv"
MANIFEST_FIELDS = ("file", "patient_id", "vertebra_id", "bq_label", "pi_label")


class BoneQuality(enum.IntEnum):
    NORMAL = 0
    BLASTIC = 1
    MIXED = 2
    LYTIC = 3


class PosterolateralInvolvement(enum.IntEnum):
    NONE = 0
    UNILATERAL = 1
    BILATERAL = 2


class DatasetError(ValueError):
    """Malformed dataset directory or slice file."""


@dataclass
class SliceSample:
    image: np.ndarray  # HU values, float32, shape (H, W)
    bq_label: int
    pi_label: int
    patient_id: str
    vertebra_id: str
    # label before any injected noise; equals bq_label for real data
    clean_bq_label: int = None

    def __post_init__(self):
        if self.clean_bq_label is None:
            self.clean_bq_label = self.bq_label


@dataclass(frozen=True)
class DecomposedLabel:
    blastic: int
    lytic: int


_DECOMPOSE = {
    BoneQuality.NORMAL: DecomposedLabel(0, 0),
    BoneQuality.BLASTIC: DecomposedLabel(1, 0),
    BoneQuality.LYTIC: DecomposedLabel(0, 1),
    BoneQuality.MIXED: DecomposedLabel(1, 1),
}
_RECOMPOSE = {(d.blastic, d.lytic): bq for bq, d in _DECOMPOSE.items()}


def decompose_label(bq_label):
    """Mixed counts as both blastic and lytic; normal as neither."""
    return _DECOMPOSE[BoneQuality(bq_label)]


def recompose_label(label):
    return _RECOMPOSE[(int(label.blastic), int(label.lytic))]


# desk-scale default: 800 slices, balanced over bone quality
DEFAULT_COUNTS = (
    (200, 0, 0),
    (70, 65, 65),
    (70, 65, 65),
    (70, 65, 65),
)


@dataclass(frozen=True)
class PhantomSpec:
    """Recipe for a phantom dataset.

    ``counts[bq][pi]`` is the number of slices with that label pair. Slices
    of one cell are grouped into vertebrae of ``slices_per_vertebra`` that
    share geometry; vertebrae are grouped into patients.
    """

    seed: int = 0
    image_size: tuple = (64, 64)
    counts: tuple = DEFAULT_COUNTS
    noise_std: float = 20.0
    label_noise_rate: float = 0.0
    slices_per_vertebra: int = 5
    vertebrae_per_patient: int = 4
    max_samples: int = 200_000

    def __post_init__(self):
        counts = tuple(tuple(int(c) for c in row) for row in self.counts)
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "image_size", tuple(int(s) for s in self.image_size))
        if len(counts) != 4 or any(len(row) != 3 for row in counts):
            raise ValueError("counts must be a 4x3 grid (bone quality x PI)")
        if any(c < 0 for row in counts for c in row):
            raise ValueError("counts must be nonnegative")
        if not 0.0 <= self.label_noise_rate < 1.0:
            raise ValueError("label_noise_rate must lie in [0, 1)")
        if self.noise_std < 0:
            raise ValueError("noise_std must be nonnegative")
        if min(self.image_size) < 16:
            raise ValueError("image_size must be at least 16x16")
        if self.slices_per_vertebra < 1 or self.vertebrae_per_patient < 1:
            raise ValueError("grouping sizes must be positive")

    @property
    def total(self):
        return sum(sum(row) for row in self.counts)


def _disk(h, w, cy, cx, r):
    yy, xx = np.mgrid[0:h, 0:w]
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


def _ellipse(h, w, cy, cx, a, b):
    yy, xx = np.mgrid[0:h, 0:w]
    return ((yy - cy) / a) ** 2 + ((xx - cx) / b) ** 2 <= 1.0


def _vertebra_geometry(rng, h, w):
    return {
        "cy": h / 2 + rng.uniform(-h / 10, h / 10),
        "cx": w / 2 + rng.uniform(-w / 10, w / 10),
        "a": h * rng.uniform(0.16, 0.20),
        "b": w * rng.uniform(0.19, 0.23),
        "side": int(rng.integers(2)),  # which posterolateral side for unilateral
        "theta_jitter": rng.uniform(-0.15, 0.15),
        "blastic_first": bool(rng.integers(2)),
    }


def _lesion_sites(bq, pi, geo, rng):
    """(kind, rho, theta) lesion centres in ellipse polar coords; theta=pi/2 is posterior."""
    lesions = []
    if bq == BoneQuality.NORMAL:
        return lesions
    kinds = {
        BoneQuality.BLASTIC: ["blastic"],
        BoneQuality.LYTIC: ["lytic"],
        BoneQuality.MIXED: ["blastic", "lytic"] if geo["blastic_first"] else ["lytic", "blastic"],
    }[BoneQuality(bq)]
    # posterolateral directions: lower-right (pi/4) and lower-left (3pi/4)
    sides = (np.pi / 4, 3 * np.pi / 4)
    jit = geo["theta_jitter"]
    if pi == PosterolateralInvolvement.NONE:
        # central / anterior part of the body
        if len(kinds) == 1:
            lesions.append((kinds[0], rng.uniform(0.0, 0.25), -np.pi / 2 + jit))
        else:
            lesions.append((kinds[0], 0.35, np.pi + jit - 0.3))
            lesions.append((kinds[1], 0.35, 0.0 + jit + 0.3))
    elif pi == PosterolateralInvolvement.UNILATERAL:
        theta = sides[geo["side"]] + jit
        if len(kinds) == 1:
            lesions.append((kinds[0], 0.6, theta))
        else:
            lesions.append((kinds[0], 0.68, theta - 0.5))
            lesions.append((kinds[1], 0.68, theta + 0.5))
    else:
        if len(kinds) == 1:
            lesions.append((kinds[0], 0.6, sides[0] + jit))
            lesions.append((kinds[0], 0.6, sides[1] - jit))
        else:
            lesions.append((kinds[0], 0.6, sides[0] + jit))
            lesions.append((kinds[1], 0.6, sides[1] - jit))
    return lesions


def render_slice(bq, pi, geo, rng, image_size, noise_std):
    """Render one phantom slice; returns (HU image float32, bone mask)."""
    h, w = image_size
    noise = (lambda shape: rng.normal(0.0, noise_std, size=shape)) if noise_std > 0 else (
        lambda shape: np.zeros(shape))
    img = SOFT_TISSUE_HU + noise((h, w))
    body = _ellipse(h, w, h / 2, w / 2, 0.47 * h, 0.49 * w)
    img[~body] = AIR_HU
    cy = geo["cy"] + rng.uniform(-0.5, 0.5)
    cx = geo["cx"] + rng.uniform(-0.5, 0.5)
    a, b = geo["a"], geo["b"]
    bone = _ellipse(h, w, cy, cx, a, b)
    img[bone] = BONE_HU + noise(int(bone.sum()))
    for kind, rho, theta in _lesion_sites(bq, pi, geo, rng):
        r = min(h, w) * rng.uniform(0.05, 0.075)
        ly = cy + rho * a * np.sin(theta) + rng.uniform(-0.5, 0.5)
        lx = cx + rho * b * np.cos(theta) + rng.uniform(-0.5, 0.5)
        blob = _disk(h, w, ly, lx, r) & bone
        if kind == "blastic":
            img[blob] += BLASTIC_DELTA_HU
        else:
            img[blob] = LYTIC_HU + noise(int(blob.sum()))
    img = np.clip(img, HU_MIN, HU_MAX).astype(np.float32)
    return img, bone


def generate_phantoms(spec, return_masks=False):
    """Deterministic phantom dataset for ``spec``.

    Geometry is drawn per vertebra, noise per slice, each from its own
    seeded stream, so the output depends only on ``spec``. With
    ``return_masks`` the vertebral-body masks are returned alongside.
    """
    if spec.total > spec.max_samples:
        raise ValueError(f"{spec.total} slices requested, limit is {spec.max_samples}")
    samples = []
    masks = []
    vertebra_index = 0
    slice_index = 0
    for bq in range(4):
        for pi in range(3):
            remaining = spec.counts[bq][pi]
            while remaining > 0:
                n = min(remaining, spec.slices_per_vertebra)
                geo = _vertebra_geometry(
                    np.random.default_rng([spec.seed, 1, vertebra_index]), *spec.image_size)
                patient = f"p{vertebra_index // spec.vertebrae_per_patient:04d}"
                vertebra = f"v{vertebra_index:04d}"
                for _ in range(n):
                    rng = np.random.default_rng([spec.seed, 2, slice_index])
                    img, mask = render_slice(bq, pi, geo, rng, spec.image_size, spec.noise_std)
                    if return_masks:
                        masks.append(mask)
                    samples.append(SliceSample(img, bq, pi, patient, vertebra, bq))
                    slice_index += 1
                remaining -= n
                vertebra_index += 1
    if spec.label_noise_rate > 0:
        for i, s in enumerate(samples):
            rng = np.random.default_rng([spec.seed, 3, i])
            if rng.random() < spec.label_noise_rate:
                others = [c for c in range(4) if c != s.clean_bq_label]
                s.bq_label = int(others[rng.integers(3)])
    return (samples, masks) if return_masks else samples


def bone_mask(image, hu_threshold=150.0):
    return np.asarray(image) > hu_threshold


def threshold_crop(image, hu_threshold=150.0, out_size=(32, 32)):
    """Crop around the largest above-threshold component, normalised to [0, 1].

    The window of ``out_size`` is centred on the bounding box of the largest
    4-connected component of ``image > hu_threshold`` and clamped to the image.
    Without any such pixel the image is centre-cropped. Intensities map
    linearly from the fixed window [-1024, 3071] HU.
    """
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape
    oh, ow = out_size
    if oh > h or ow > w:
        raise ValueError(f"crop {out_size} larger than image {image.shape}")
    labels, count = kernels.label_components(image > hu_threshold)
    if count:
        sizes = np.bincount(labels.ravel(), minlength=count + 1)[1:]
        largest = int(np.argmax(sizes)) + 1  # ties go to the first in raster order
        rows, cols = np.nonzero(labels == largest)
        cy = (rows.min() + rows.max()) // 2
        cx = (cols.min() + cols.max()) // 2
    else:
        cy, cx = h // 2, w // 2
    top = int(np.clip(cy - oh // 2, 0, h - oh))
    left = int(np.clip(cx - ow // 2, 0, w - ow))
    crop = image[top:top + oh, left:left + ow]
    return np.clip((crop - HU_MIN) / (HU_MAX - HU_MIN), 0.0, 1.0)


def prepare_inputs(samples, hu_threshold=150.0, out_size=(32, 32)):
    """Stack cropped slices into a ``[N, 1, h, w]`` float64 batch."""
    out = np.empty((len(samples), 1) + tuple(out_size))
    for i, s in enumerate(samples):
        out[i, 0] = threshold_crop(s.image, hu_threshold, out_size)
    return out


def balance_subsample(samples, per_class_cap, seed=0):
    """Keep at most ``per_class_cap`` slices per bone-quality class.

    Selection is uniform without replacement and keeps the original order.
    """
    if per_class_cap <= 0:
        raise ValueError("per_class_cap must be positive")
    labels = np.array([s.bq_label for s in samples], dtype=np.int64)
    rng = np.random.default_rng(seed)
    keep = np.zeros(len(samples), dtype=bool)
    for c in range(4):
        idx = np.flatnonzero(labels == c)
        if len(idx) > per_class_cap:
            idx = rng.choice(idx, size=per_class_cap, replace=False)
        keep[idx] = True
    return [s for s, k in zip(samples, keep) if k]


# on-disk format

def write_slice(path, image):
    image = np.asarray(image, dtype="<f4")
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(SLICE_MAGIC)
        fh.write(struct.pack("<III", SLICE_VERSION, h, w))
        fh.write(np.ascontiguousarray(image).tobytes())


def read_slice(path):
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != SLICE_MAGIC:
        raise DatasetError(f"{path}: not a slice file (bad magic)")
    version, h, w = struct.unpack("<III", raw[4:16])
    if version != SLICE_VERSION:
        raise DatasetError(f"{path}: unsupported slice version {version}")
    if len(raw) != 16 + 4 * h * w:
        raise DatasetError(f"{path}: expected {h}x{w} payload, got {len(raw) - 16} bytes")
    return np.frombuffer(raw, dtype="<f4", offset=16).reshape(h, w).astype(np.float32)


def write_dataset(directory, samples):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / MANIFEST_NAME, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_FIELDS)
        for i, s in enumerate(samples):
            name = f"slice_{i:06d}.mtsl"
            write_slice(directory / name, s.image)
            writer.writerow([name, s.patient_id, s.vertebra_id, int(s.bq_label), int(s.pi_label)])


def read_dataset(directory):
    directory = Path(directory)
    manifest = directory / MANIFEST_NAME
    if not manifest.is_file():
        raise DatasetError(f"{directory}: missing {MANIFEST_NAME}")
    samples = []
    with open(manifest, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != MANIFEST_FIELDS:
            raise DatasetError(f"{manifest}: header must be {','.join(MANIFEST_FIELDS)}")
        for line, row in enumerate(reader, start=2):
            try:
                bq = int(row["bq_label"])
                pi = int(row["pi_label"])
            except (TypeError, ValueError):
                raise DatasetError(f"{manifest}:{line}: labels must be integers") from None
            if bq not in range(4) or pi not in range(3):
                raise DatasetError(f"{manifest}:{line}: label out of range")
            image = read_slice(directory / row["file"])
            samples.append(SliceSample(image, bq, pi, row["patient_id"], row["vertebra_id"]))
    return samples


def class_counts(samples):
    grid = np.zeros((4, 3), dtype=np.int64)
    for s in samples:
        grid[s.bq_label, s.pi_label] += 1
    return grid
