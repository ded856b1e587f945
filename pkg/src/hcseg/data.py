"""Dataset records, HC18-layout I/O, augmentation, splitting and synthetic phantoms.

On-disk layout (shared by real and synthetic data)::

    <dir>/<id>.pgm                 grayscale image, 8-bit binary PGM
    <dir>/<id>_Annotation.pgm      head outline (non-zero pixels), same size
    <dir>/<name>.csv               header ``filename,pixel size(mm),head circumference (mm)``

Only the stem of ``filename`` is used, so the original HC18 csv (which lists
``.png`` names) works unchanged once images are converted with ``hcseg import``.
"""

from __future__ import annotations

import csv
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .metrics import EllipseParams, boundary_mask, ellipse_perimeter, rasterize_ellipse

logger = logging.getLogger(__name__)

METADATA_NAME = "training_set_pixel_size_and_HC.csv"
METADATA_HEADER = ("filename", "pixel size(mm)", "head circumference (mm)")
ANNOTATION_SUFFIX = "_Annotation"
PAPER_PIXEL_SIZE_RANGE = (0.052, 0.326)
AUGMENT_COPIES = 10


class DataError(ValueError):
    """Malformed or inconsistent dataset input."""


@dataclass
class DatasetRecord:
    id: str
    image: np.ndarray
    mask: np.ndarray
    pixel_size: float
    hc_gt: float
    provenance: str = "real"

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.image.ndim != 2 or self.image.shape != self.mask.shape:
            raise DataError(f"{self.id}: image {self.image.shape} and mask {self.mask.shape} differ")
        if not 0 < self.pixel_size < 1:
            raise DataError(f"{self.id}: implausible pixel size {self.pixel_size} mm")
        if not self.hc_gt > 0:
            raise DataError(f"{self.id}: head circumference must be positive, got {self.hc_gt}")

    @property
    def source_id(self) -> str:
        """Id of the original image this record was derived from."""
        if self.provenance.startswith("augmented-from:"):
            body = self.provenance.split(":", 1)[1]
            # tags may contain "+" themselves, so strip the longest known one
            for tag in sorted((t for t, _, _ in AUGMENTATIONS), key=len, reverse=True):
                if body.endswith("+" + tag):
                    return body[: -len(tag) - 1]
            return body.rsplit("+", 1)[0]
        return self.id


# -- PGM ------------------------------------------------------------------------------

_PGM_TOKEN = re.compile(rb"(#[^\n]*\n)|(\S+)")


def read_pgm(path) -> np.ndarray:
    """Read a binary (P5) or ASCII (P2) PGM; returns ``uint8``/``uint16`` array."""
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        m = _PGM_TOKEN.search(raw, pos)
        if m is None:
            raise DataError(f"{path}: truncated PGM header")
        pos = m.end()
        if m.group(2):
            tokens.append(m.group(2))
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
    if magic == b"P5":
        data = np.frombuffer(raw, dtype=dtype, count=w * h, offset=pos + 1)
    elif magic == b"P2":
        data = np.array(raw[pos:].split()[: w * h], dtype=np.int64).astype(dtype)
    else:
        raise DataError(f"{path}: not a PGM file (magic {magic!r})")
    if data.size != w * h:
        raise DataError(f"{path}: expected {w * h} pixels, found {data.size}")
    return data.reshape(h, w).astype(np.uint8 if maxval < 256 else np.uint16)


def write_pgm(path, array: np.ndarray) -> Path:
    arr = np.asarray(array)
    if arr.ndim != 2:
        raise ValueError("write_pgm expects a 2-d array")
    if arr.dtype != np.uint8:
        raise ValueError("write_pgm writes 8-bit data; convert first")
    path = Path(path)
    h, w = arr.shape
    path.write_bytes(b"P5\n%d %d\n255\n" % (w, h) + arr.tobytes())
    return path


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


# -- masks -----------------------------------------------------------------------------

def fill_outline(outline: np.ndarray) -> np.ndarray:
    """Fill a closed outline: everything not 4-connected to the image border is foreground."""
    o = np.asarray(outline, dtype=bool)
    filled = ndimage.binary_fill_holes(o)
    if not o.any():
        raise DataError("outline is empty")
    rows, cols = np.nonzero(o)
    encloses_something = np.ptp(rows) >= 2 and np.ptp(cols) >= 2
    if encloses_something and np.count_nonzero(filled) == np.count_nonzero(o):
        raise DataError("outline is not closed; fill leaked to the image border")
    return filled


def outline_of(mask: np.ndarray) -> np.ndarray:
    return boundary_mask(mask)


# -- loading / writing -------------------------------------------------------------------

def _find_metadata(directory: Path) -> Path:
    csvs = sorted(directory.glob("*.csv"))
    if not csvs:
        raise DataError(f"{directory}: no metadata csv found")
    if len(csvs) > 1:
        named = [p for p in csvs if "pixel_size" in p.name]
        if len(named) != 1:
            raise DataError(f"{directory}: ambiguous metadata files {[p.name for p in csvs]}")
        return named[0]
    return csvs[0]


def read_metadata(path) -> List[Tuple[str, float, float]]:
    rows = []
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{path}: empty metadata file")
        for line in reader:
            if not line:
                continue
            if len(line) < 3:
                raise DataError(f"{path}: malformed row {line}")
            rows.append((Path(line[0].strip()).stem, float(line[1]), float(line[2])))
    return rows


def load_hc18(directory) -> List[DatasetRecord]:
    """Load an HC18-layout directory; outlines are filled into solid masks.

    Records whose outline cannot be filled are skipped with a warning.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"{directory}: not a directory")
    meta = read_metadata(_find_metadata(directory))
    records = []
    lo, hi = PAPER_PIXEL_SIZE_RANGE
    for stem, px, hc in sorted(meta):
        img_path = directory / f"{stem}.pgm"
        ann_path = directory / f"{stem}{ANNOTATION_SUFFIX}.pgm"
        if not img_path.exists():
            raise DataError(f"{stem}: image file {img_path.name} missing")
        if not ann_path.exists():
            raise DataError(f"{stem}: annotation file {ann_path.name} missing")
        raw = read_pgm(img_path)
        outline = read_pgm(ann_path) > 0
        if raw.shape != outline.shape:
            raise DataError(f"{stem}: image {raw.shape} and annotation {outline.shape} sizes differ")
        try:
            mask = fill_outline(outline)
        except DataError as exc:
            logger.warning("skipping %s: %s", stem, exc)
            continue
        if not lo <= px <= hi:
            logger.warning("%s: pixel size %.4f mm outside the expected %.3f-%.3f mm band", stem, px, lo, hi)
        image = raw.astype(np.float64) / float(np.iinfo(raw.dtype).max)
        records.append(DatasetRecord(stem, image, mask, px, hc, provenance="real"))
    return records


def write_dataset(records: Iterable[DatasetRecord], directory) -> Path:
    """Write records in the HC18 layout (images quantised to 8 bits)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rows = []
    for r in records:
        write_pgm(directory / f"{r.id}.pgm", to_uint8(r.image))
        write_pgm(directory / f"{r.id}{ANNOTATION_SUFFIX}.pgm", outline_of(r.mask).astype(np.uint8) * 255)
        rows.append((f"{r.id}.pgm", repr(float(r.pixel_size)), repr(float(r.hc_gt))))
    with (directory / METADATA_NAME).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METADATA_HEADER)
        w.writerows(rows)
    return directory


# -- augmentation --------------------------------------------------------------------------

# (tag, flip, quarter turns counter-clockwise); the flip is applied first.
AUGMENTATIONS: Tuple[Tuple[str, Optional[str], int], ...] = (
    ("rot90", None, 1),
    ("rot180", None, 2),
    ("rot270", None, 3),
    ("hflip", "h", 0),
    ("hflip+rot90", "h", 1),
    ("hflip+rot180", "h", 2),
    ("hflip+rot270", "h", 3),
    ("vflip", "v", 0),
    ("vflip+rot90", "v", 1),
)


def _flip(a: np.ndarray, flip: Optional[str]) -> np.ndarray:
    if flip == "h":
        return a[:, ::-1]
    if flip == "v":
        return a[::-1, :]
    return a


def apply_transform(a: np.ndarray, flip: Optional[str], turns: int) -> np.ndarray:
    return np.ascontiguousarray(np.rot90(_flip(a, flip), turns))


def invert_transform(a: np.ndarray, flip: Optional[str], turns: int) -> np.ndarray:
    return np.ascontiguousarray(_flip(np.rot90(a, -turns), flip))


def augment(record: DatasetRecord) -> List[DatasetRecord]:
    """The record itself followed by its 9 flip/right-angle-rotation copies."""
    out = [record]
    for tag, flip, turns in AUGMENTATIONS:
        out.append(
            DatasetRecord(
                id=f"{record.id}__{tag}",
                image=apply_transform(record.image, flip, turns),
                mask=apply_transform(record.mask, flip, turns),
                pixel_size=record.pixel_size,
                hc_gt=record.hc_gt,
                provenance=f"augmented-from:{record.id}+{tag}",
            )
        )
    return out


def augment_all(records: Iterable[DatasetRecord]) -> List[DatasetRecord]:
    return [r for rec in records for r in augment(rec)]


def split(records: Sequence[DatasetRecord], train_fraction: float = 0.8, seed: int = 0):
    """Seeded split by source image: augmented copies stay with their source."""
    if not 0 < train_fraction < 1:
        raise ValueError(f"train fraction must be in (0, 1), got {train_fraction}")
    if len(records) == 0:
        raise ValueError("split: no records")
    sources = sorted({r.source_id for r in records})
    order = np.random.default_rng(seed).permutation(len(sources))
    n_train = int(math.floor(len(sources) * train_fraction))
    train_ids = {sources[i] for i in order[:n_train]}
    train = [r for r in records if r.source_id in train_ids]
    val = [r for r in records if r.source_id not in train_ids]
    return train, val


# -- resizing ----------------------------------------------------------------------------

def _area_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic matrix averaging input cells over each output cell's footprint."""
    edges_in = np.arange(n_in + 1, dtype=np.float64)
    edges_out = np.linspace(0.0, n_in, n_out + 1)
    lo = np.maximum(edges_out[:-1, None], edges_in[None, :-1])
    hi = np.minimum(edges_out[1:, None], edges_in[None, 1:])
    overlap = np.clip(hi - lo, 0.0, None)
    return overlap / overlap.sum(axis=1, keepdims=True)


def resize_area(image: np.ndarray, shape: Tuple[int, int]) -> np.ndarray:
    if tuple(image.shape) == tuple(shape):
        return np.asarray(image, dtype=np.float64)
    return _area_matrix(image.shape[0], shape[0]) @ image @ _area_matrix(image.shape[1], shape[1]).T


def resize_nearest(mask: np.ndarray, shape: Tuple[int, int]) -> np.ndarray:
    if tuple(mask.shape) == tuple(shape):
        return np.asarray(mask)
    rows = np.minimum(((np.arange(shape[0]) + 0.5) * mask.shape[0] / shape[0]).astype(int), mask.shape[0] - 1)
    cols = np.minimum(((np.arange(shape[1]) + 0.5) * mask.shape[1] / shape[1]).astype(int), mask.shape[1] - 1)
    return mask[np.ix_(rows, cols)]


def resized_pixel_size(record: DatasetRecord, shape: Tuple[int, int]) -> float:
    """Pixel size after resizing to ``shape`` (geometric mean of the two axis scales)."""
    sy = record.image.shape[0] / shape[0]
    sx = record.image.shape[1] / shape[1]
    return record.pixel_size * math.sqrt(sx * sy)


def assemble_batch(records: Sequence[DatasetRecord], input_size: Tuple[int, int], dtype=np.float32):
    """Stack records into ``(n, 1, h, w)`` image and mask arrays at network resolution."""
    images = np.stack([resize_area(r.image, input_size) for r in records])[:, None]
    masks = np.stack([resize_nearest(r.mask, input_size) for r in records])[:, None]
    return images.astype(dtype), masks.astype(dtype)


# -- synthetic phantoms ------------------------------------------------------------------------

@dataclass(frozen=True)
class SynthSpec:
    count: int = 16
    image_size: Tuple[int, int] = (64, 64)
    semi_axis_range: Tuple[float, float] = (10.0, 24.0)
    rotation_range: Tuple[float, float] = (0.0, math.pi)
    speckle: float = 0.3
    texture: float = 0.15
    pixel_size_range: Tuple[float, float] = PAPER_PIXEL_SIZE_RANGE
    margin: int = 2
    rim_width: float = 1.5
    seed: int = 0

    def __post_init__(self):
        if self.count < 1:
            raise ValueError("count must be >= 1")
        lo, hi = self.semi_axis_range
        if not 0 < lo <= hi:
            raise ValueError(f"bad semi-axis range {self.semi_axis_range}")
        if 2 * (hi + self.margin) >= min(self.image_size):
            raise ValueError(f"semi-axes up to {hi} px do not fit a {self.image_size} image with margin {self.margin}")
        if not 0 <= self.speckle < 1:
            raise ValueError("speckle level must be in [0, 1)")
        if self.texture < 0:
            raise ValueError("texture amplitude must be >= 0")
        plo, phi = self.pixel_size_range
        if not 0 < plo <= phi < 1:
            raise ValueError(f"bad pixel size range {self.pixel_size_range}")


def _synth_one(spec: SynthSpec, rng: np.random.Generator, index: int) -> DatasetRecord:
    h, w = spec.image_size
    a, b = np.sort(rng.uniform(*spec.semi_axis_range, size=2))[::-1]
    theta = rng.uniform(*spec.rotation_range)
    c, s = math.cos(theta), math.sin(theta)
    ex = math.sqrt((a * c) ** 2 + (b * s) ** 2)
    ey = math.sqrt((a * s) ** 2 + (b * c) ** 2)
    cx = rng.uniform(spec.margin + ex, w - 1 - spec.margin - ex)
    cy = rng.uniform(spec.margin + ey, h - 1 - spec.margin - ey)
    ellipse = EllipseParams.make(cx, cy, float(a), float(b), theta)
    mask = rasterize_ellipse((h, w), ellipse)

    field_ = ndimage.gaussian_filter(rng.random((h, w)), sigma=max(h, w) / 8.0)
    span = field_.max() - field_.min()
    field_ = (field_ - field_.min()) / span if span > 0 else np.zeros_like(field_)
    dist = ndimage.distance_transform_edt(~boundary_mask(mask))
    rim = 0.65 * np.exp(-(dist**2) / (2.0 * spec.rim_width**2))
    image = 0.1 + spec.texture * field_ + 0.1 * mask + rim
    if spec.speckle > 0:
        k = 1.0 / spec.speckle**2
        image = image * rng.gamma(shape=k, scale=1.0 / k, size=(h, w))
    else:
        rng.gamma(1.0, size=(h, w))  # keep the random stream independent of the noise level
    image = to_uint8(image).astype(np.float64) / 255.0

    px = float(rng.uniform(*spec.pixel_size_range))
    return DatasetRecord(
        id=f"synth_{index:04d}",
        image=image,
        mask=mask,
        pixel_size=px,
        hc_gt=ellipse_perimeter(ellipse, px),
        provenance="synthetic",
    )


def synth_generate(spec: SynthSpec) -> List[DatasetRecord]:
    """Ellipse phantoms: smooth background, bright rim on the mask boundary, multiplicative speckle."""
    rng = np.random.default_rng(spec.seed)
    return [_synth_one(spec, rng, i) for i in range(spec.count)]
