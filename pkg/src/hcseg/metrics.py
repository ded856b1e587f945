"""Evaluation: Dice, Hausdorff distance, ellipse-based head circumference.

Point sets are ``(k, 2)`` arrays. :func:`extract_boundary` returns
``(row, col)`` pixel indices; ellipse fitting works in ``(x, y) = (col, row)``.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial import cKDTree

logger = logging.getLogger(__name__)

REPORT_COLUMNS = ("Dice", "DF(mm)", "ADF(mm)", "HD(mm)")


class EmptySegmentationError(ValueError):
    pass


class EllipseFitError(ValueError):
    pass


# -- overlap ------------------------------------------------------------------------

def pixel_dice(a: np.ndarray, b: np.ndarray) -> float:
    """``2TP / (2TP + FN + FP)``; 1.0 when both masks are empty."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"pixel_dice: shape mismatch {a.shape} vs {b.shape}")
    tp = int(np.count_nonzero(a & b))
    fp = int(np.count_nonzero(a & ~b))
    fn = int(np.count_nonzero(~a & b))
    if tp + fp + fn == 0:
        return 1.0
    return 2 * tp / (2 * tp + fn + fp)


# -- boundaries -----------------------------------------------------------------------

def boundary_mask(mask: np.ndarray) -> np.ndarray:
    """Foreground pixels that touch background through a 4-neighbour or lie on the image border."""
    m = np.asarray(mask, dtype=bool)
    padded = np.pad(m, 1, constant_values=False)
    interior = padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    return m & ~interior


def extract_boundary(mask: np.ndarray) -> np.ndarray:
    """Boundary pixels as ``(row, col)`` pairs in row-major order."""
    m = np.asarray(mask, dtype=bool)
    if not m.any():
        raise EmptySegmentationError("extract_boundary: mask is empty")
    return np.argwhere(boundary_mask(m))


def boundary_edge_points(mask: np.ndarray) -> np.ndarray:
    """Sub-pixel contour samples as ``(x, y)``.

    One point per boundary edge: the midpoint between a foreground pixel and
    each background (or out-of-image) 4-neighbour. Unlike pixel centres these
    lie on the region's outline rather than half a pixel inside it.
    """
    m = np.asarray(mask, dtype=bool)
    if not m.any():
        raise EmptySegmentationError("boundary_edge_points: mask is empty")
    padded = np.pad(m, 1, constant_values=False)
    pts = []
    for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
        nb = padded[1 + dr : 1 + dr + m.shape[0], 1 + dc : 1 + dc + m.shape[1]]
        rows, cols = np.nonzero(m & ~nb)
        pts.append(np.stack([cols + 0.5 * dc, rows + 0.5 * dr], axis=1))
    return np.concatenate(pts).astype(np.float64)


def directed_hausdorff(s: np.ndarray, r: np.ndarray) -> float:
    """``max_{p in s} min_{q in r} ||p - q||``."""
    dist, _ = cKDTree(np.asarray(r, dtype=np.float64)).query(np.asarray(s, dtype=np.float64), k=1)
    return float(dist.max())


def hausdorff(s: np.ndarray, r: np.ndarray, pixel_size: float = 1.0) -> float:
    """Symmetric Hausdorff distance between two point sets, scaled to mm."""
    s = np.asarray(s).reshape(-1, 2)
    r = np.asarray(r).reshape(-1, 2)
    if len(s) == 0 or len(r) == 0:
        raise EmptySegmentationError("hausdorff: empty point set (empty segmentation)")
    return max(directed_hausdorff(s, r), directed_hausdorff(r, s)) * pixel_size


# -- ellipses ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EllipseParams:
    cx: float
    cy: float
    a: float
    b: float
    theta: float

    def __post_init__(self):
        if not (self.a >= self.b > 0):
            raise ValueError(f"semi-axes must satisfy a >= b > 0, got a={self.a}, b={self.b}")
        if not 0 <= self.theta < math.pi:
            object.__setattr__(self, "theta", self.theta % math.pi)

    @classmethod
    def make(cls, cx: float, cy: float, a: float, b: float, theta: float = 0.0) -> "EllipseParams":
        """Build from any pair of semi-axes, swapping them (and turning 90 degrees) if needed."""
        if b > a:
            a, b, theta = b, a, theta + math.pi / 2
        return cls(cx, cy, a, b, theta % math.pi)


def fit_ellipse(points: np.ndarray) -> EllipseParams:
    """Direct least-squares ellipse fit (Fitzgibbon's constraint, Halir-Flusser split).

    ``points`` is ``(k, 2)`` in ``(x, y)``. Points are centred and scaled
    before fitting, which makes the result translation-equivariant.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(pts) < 6:
        raise EllipseFitError(f"need at least 6 points, got {len(pts)}")
    mu = pts.mean(axis=0)
    centred = pts - mu
    scale = math.sqrt(float((centred**2).sum(axis=1).mean()))
    if scale == 0:
        raise EllipseFitError("all points coincide")
    sv = np.linalg.svd(centred / scale, compute_uv=False)
    if sv[-1] < 1e-9 * sv[0]:
        raise EllipseFitError("points are collinear")
    x, y = (centred / scale).T

    d1 = np.column_stack([x * x, x * y, y * y])
    d2 = np.column_stack([x, y, np.ones_like(x)])
    s1, s2, s3 = d1.T @ d1, d1.T @ d2, d2.T @ d2
    try:
        t = -np.linalg.solve(s3, s2.T)
    except np.linalg.LinAlgError as exc:
        raise EllipseFitError(f"degenerate scatter matrix: {exc}") from exc
    m = s1 + s2 @ t
    # premultiply by inverse of the constraint matrix [[0,0,2],[0,-1,0],[2,0,0]]
    m = np.array([m[2] / 2.0, -m[1], m[0] / 2.0])
    vals, vecs = np.linalg.eig(m)
    vecs = np.real(vecs)
    cond = 4 * vecs[0] * vecs[2] - vecs[1] ** 2
    ok = np.nonzero(cond > 0)[0]
    if len(ok) == 0:
        raise EllipseFitError("no elliptic solution")
    a1 = vecs[:, ok[np.argmin(np.abs(np.real(vals[ok])))]]
    coeffs = np.concatenate([a1, t @ a1])
    return _conic_to_params(coeffs, mu, scale)


def _conic_to_params(coeffs: np.ndarray, offset: np.ndarray, scale: float) -> EllipseParams:
    A, B, C, D, E, F = coeffs
    if B * B - 4 * A * C >= 0:
        raise EllipseFitError("fitted conic is not an ellipse")
    x0, y0 = np.linalg.solve([[2 * A, B], [B, 2 * C]], [-D, -E])
    f0 = F + (D * x0 + E * y0) / 2.0
    lam, vec = np.linalg.eigh([[A, B / 2.0], [B / 2.0, C]])
    axes2 = -f0 / lam
    if np.any(axes2 <= 0):
        raise EllipseFitError("imaginary ellipse")
    major = int(np.argmax(axes2))
    a, b = np.sqrt(axes2[[major, 1 - major]]) * scale
    vx, vy = vec[:, major]
    theta = math.atan2(vy, vx) % math.pi
    return EllipseParams(float(x0 * scale + offset[0]), float(y0 * scale + offset[1]), float(a), float(b), theta)


def ellipse_perimeter(e: EllipseParams, pixel_size: float = 1.0) -> float:
    """Ramanujan's second approximation of the perimeter, scaled by ``pixel_size``."""
    a, b = e.a, e.b
    h = ((a - b) / (a + b)) ** 2
    return math.pi * (a + b) * (1 + 3 * h / (10 + math.sqrt(4 - 3 * h))) * pixel_size


def rasterize_ellipse(shape: Tuple[int, int], e: EllipseParams) -> np.ndarray:
    """Boolean mask of pixels whose centres lie inside (or on) the ellipse."""
    rows, cols = np.mgrid[0 : shape[0], 0 : shape[1]]
    dx, dy = cols - e.cx, rows - e.cy
    c, s = math.cos(e.theta), math.sin(e.theta)
    u = (dx * c + dy * s) / e.a
    v = (-dx * s + dy * c) / e.b
    return u * u + v * v <= 1.0


# -- head circumference -----------------------------------------------------------------

def measure_hc(pred_mask: np.ndarray, gt_hc_mm: float, pixel_size: float) -> Tuple[float, float, float]:
    """``(hc_pred_mm, df_mm, adf_mm)`` for one predicted head mask.

    The head outline is taken from the mask boundary at sub-pixel edge
    positions, fitted with an ellipse and measured with Ramanujan's formula.
    """
    m = np.asarray(pred_mask, dtype=bool)
    if not m.any():
        raise EmptySegmentationError("predicted mask is empty")
    extract_boundary(m)
    e = fit_ellipse(boundary_edge_points(m))
    hc = ellipse_perimeter(e, pixel_size)
    df = hc - gt_hc_mm
    return hc, df, abs(df)


@dataclass
class ImageMetrics:
    image: str
    dice: float = float("nan")
    df_mm: float = float("nan")
    adf_mm: float = float("nan")
    hd_mm: float = float("nan")
    hc_pred_mm: float = float("nan")
    hc_gt_mm: float = float("nan")
    ok: bool = True
    error: str = ""


@dataclass
class MetricsReport:
    rows: List[ImageMetrics]
    aggregates: dict = field(default_factory=dict)

    @property
    def failed(self) -> int:
        return sum(1 for r in self.rows if not r.ok)

    @property
    def warning(self) -> bool:
        return self.failed > 0

    def mean(self, column: str) -> float:
        return self.aggregates[column]["mean"]

    def write_csv(self, path) -> Path:
        """Per-image table; columns: image, Dice, DF(mm), ADF(mm), HD(mm), HC_pred(mm), HC_gt(mm), status."""
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("image",) + REPORT_COLUMNS + ("HC_pred(mm)", "HC_gt(mm)", "status"))
            for r in self.rows:
                status = "ok" if r.ok else f"failed: {r.error}"
                w.writerow([r.image] + [repr(float(v)) for v in (r.dice, r.df_mm, r.adf_mm, r.hd_mm, r.hc_pred_mm, r.hc_gt_mm)] + [status])
        return path

    def write_summary_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("statistic",) + REPORT_COLUMNS)
            for stat in ("mean", "std"):
                w.writerow([stat] + [repr(self.aggregates[c][stat]) for c in REPORT_COLUMNS])
        return path

    def summary(self) -> dict:
        return {
            "images": len(self.rows),
            "failed": self.failed,
            "warning": self.warning,
            "columns": list(REPORT_COLUMNS),
            "aggregates": self.aggregates,
            "failures": {r.image: r.error for r in self.rows if not r.ok},
        }

    def write_json(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")
        return path


def _column_values(rows: Sequence[ImageMetrics]) -> dict:
    return {
        "Dice": [r.dice for r in rows],
        "DF(mm)": [r.df_mm for r in rows],
        "ADF(mm)": [r.adf_mm for r in rows],
        "HD(mm)": [r.hd_mm for r in rows],
        "HC_pred(mm)": [r.hc_pred_mm for r in rows],
        "HC_gt(mm)": [r.hc_gt_mm for r in rows],
    }


def evaluate_one(pred: np.ndarray, gt: np.ndarray, gt_hc_mm: float, pixel_size: float, image: str = "") -> ImageMetrics:
    row = ImageMetrics(image=image, hc_gt_mm=float(gt_hc_mm))
    try:
        row.dice = pixel_dice(pred, gt)
        row.hd_mm = hausdorff(extract_boundary(pred), extract_boundary(gt), pixel_size)
        row.hc_pred_mm, row.df_mm, row.adf_mm = measure_hc(pred, gt_hc_mm, pixel_size)
    except (EmptySegmentationError, EllipseFitError) as exc:
        row.ok = False
        row.error = str(exc)
    return row


def evaluate_set(pairs: Sequence[tuple], ids: Optional[Sequence[str]] = None) -> MetricsReport:
    """Evaluate ``(pred_mask, gt_mask, gt_hc_mm, pixel_size)`` tuples.

    Images that cannot be measured (empty or unfittable prediction) are kept
    as failed rows and left out of the aggregates.
    """
    if len(pairs) == 0:
        raise ValueError("evaluate_set: no images")
    ids = list(ids) if ids is not None else [f"{i:04d}" for i in range(len(pairs))]
    rows = [evaluate_one(p, g, hc, px, name) for (p, g, hc, px), name in zip(pairs, ids)]
    good = [r for r in rows if r.ok]
    if len(good) < len(rows):
        logger.warning("%d of %d images failed measurement", len(rows) - len(good), len(rows))
    aggregates = {}
    for col, vals in _column_values(good).items():
        arr = np.asarray(vals, dtype=np.float64)
        aggregates[col] = {
            "mean": float(arr.mean()) if len(arr) else float("nan"),
            "std": float(arr.std()) if len(arr) else float("nan"),
        }
    return MetricsReport(rows=rows, aggregates=aggregates)
