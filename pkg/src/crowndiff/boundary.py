"""Cylindrical crown bounds: fitting, overlap scoring, and regression loss.

Each bound is a vertical-axis cylinder described by five scalars
(c_x, c_y, c_z, r, h).  Ground truth is fitted from a tooth by projecting
its points onto the XY plane, computing the minimal enclosing circle, and
taking the z extent for height.  Predicted bounds are scored against ground
truth with volumetric Dice/IoU, and trained with a masked Smooth-L1 loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# Flat or needle-like point sets would yield degenerate cylinders; fitting
# rejects anything thinner than this.
MIN_EXTENT_MM = 1e-6


@dataclass(frozen=True)
class CylBound:
    """Vertical cylinder: center (c_x, c_y, c_z), radius r, height h, in mm."""

    c_x: float
    c_y: float
    c_z: float
    r: float
    h: float

    def __post_init__(self):
        if not (self.r > 0 and self.h > 0):
            raise ValueError(f"cylinder radius and height must be positive: {self}")

    @property
    def volume(self) -> float:
        return math.pi * self.r**2 * self.h

    @property
    def z_lo(self) -> float:
        return self.c_z - self.h / 2.0

    @property
    def z_hi(self) -> float:
        return self.c_z + self.h / 2.0

    def as_array(self) -> np.ndarray:
        return np.array([self.c_x, self.c_y, self.c_z, self.r, self.h])


def bound_from_array(v) -> CylBound:
    v = np.asarray(v, dtype=float).reshape(5)
    return CylBound(*[float(x) for x in v])


# ---------------------------------------------------------------------------
# Minimal enclosing circle (randomized incremental, expected linear time)
# ---------------------------------------------------------------------------

def _circle_two(p, q):
    cx, cy = (p[0] + q[0]) / 2.0, (p[1] + q[1]) / 2.0
    r = max(math.hypot(p[0] - cx, p[1] - cy), math.hypot(q[0] - cx, q[1] - cy))
    return (cx, cy), r


def _circumcircle(a, b, c):
    """Circle through three points, or None if they are collinear."""
    d = 2.0 * (a[0] * (b[1] - c[1]) + b[0] * (c[1] - a[1]) + c[0] * (a[1] - b[1]))
    if d == 0.0:
        return None
    aa = a[0] * a[0] + a[1] * a[1]
    bb = b[0] * b[0] + b[1] * b[1]
    cc = c[0] * c[0] + c[1] * c[1]
    ux = (aa * (b[1] - c[1]) + bb * (c[1] - a[1]) + cc * (a[1] - b[1])) / d
    uy = (aa * (c[0] - b[0]) + bb * (a[0] - c[0]) + cc * (b[0] - a[0])) / d
    radius = max(
        math.hypot(a[0] - ux, a[1] - uy),
        math.hypot(b[0] - ux, b[1] - uy),
        math.hypot(c[0] - ux, c[1] - uy),
    )
    return (ux, uy), radius


def _inside(center, radius, p, slack=1e-12):
    return math.hypot(p[0] - center[0], p[1] - center[1]) <= radius * (1.0 + 1e-14) + slack


def min_enclosing_circle(points_2d, seed: int = 0):
    """Smallest circle containing all 2-D points.

    Welzl-style move-to-front incremental construction over a seeded random
    permutation; expected O(N).  Returns ``(center, radius)`` with center a
    length-2 array.
    """
    arr = np.asarray(points_2d, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 2 or arr.shape[0] == 0:
        raise ValueError("min_enclosing_circle expects a non-empty (N, 2) array")
    arr = arr[np.random.default_rng(seed).permutation(len(arr))]
    pts = [(float(x), float(y)) for x, y in arr]

    center, radius = pts[0], 0.0
    for i in range(1, len(pts)):
        if _inside(center, radius, pts[i]):
            continue
        # pts[i] must lie on the boundary of the circle for pts[:i+1]
        center, radius = pts[i], 0.0
        for j in range(i):
            if _inside(center, radius, pts[j]):
                continue
            center, radius = _circle_two(pts[i], pts[j])
            for k in range(j):
                if _inside(center, radius, pts[k]):
                    continue
                cc = _circumcircle(pts[i], pts[j], pts[k])
                if cc is None:
                    # Collinear support: diameter circle of the extreme pair.
                    trio = (pts[i], pts[j], pts[k])
                    pairs = ((0, 1), (0, 2), (1, 2))
                    u, v = max(
                        pairs,
                        key=lambda pr: math.hypot(
                            trio[pr[0]][0] - trio[pr[1]][0],
                            trio[pr[0]][1] - trio[pr[1]][1],
                        ),
                    )
                    cc = _circle_two(trio[u], trio[v])
                center, radius = cc
    return np.array(center), float(radius)


def fit_bound(tooth_points) -> CylBound:
    """Ground-truth cylinder for a tooth point cloud.

    XY projection -> minimal enclosing circle gives (c_x, c_y, r); the z
    extent gives h = z_max - z_min and c_z = (z_min + z_max) / 2.
    """
    pts = np.asarray(tooth_points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] == 0:
        raise ValueError("fit_bound expects a non-empty (N, 3) array")
    center, radius = min_enclosing_circle(pts[:, :2])
    z_lo, z_hi = pts[:, 2].min(), pts[:, 2].max()
    if radius < MIN_EXTENT_MM or (z_hi - z_lo) < MIN_EXTENT_MM:
        raise ValueError("degenerate point set: cylinder would be flat or linear")
    return CylBound(
        c_x=float(center[0]),
        c_y=float(center[1]),
        c_z=float((z_lo + z_hi) / 2.0),
        r=radius,
        h=float(z_hi - z_lo),
    )


# ---------------------------------------------------------------------------
# Overlap scoring
# ---------------------------------------------------------------------------

def _circle_intersection_area(d: float, r1: float, r2: float) -> float:
    """Area of intersection of two circles with center distance d."""
    if d >= r1 + r2:
        return 0.0
    if d <= abs(r1 - r2):
        rm = min(r1, r2)
        return math.pi * rm * rm
    # Two circular segments; acos arguments clamped against rounding.
    a1 = math.acos(max(-1.0, min(1.0, (d * d + r1 * r1 - r2 * r2) / (2.0 * d * r1))))
    a2 = math.acos(max(-1.0, min(1.0, (d * d + r2 * r2 - r1 * r1) / (2.0 * d * r2))))
    tri = 0.5 * math.sqrt(
        max(0.0, (-d + r1 + r2) * (d + r1 - r2) * (d - r1 + r2) * (d + r1 + r2))
    )
    return r1 * r1 * a1 + r2 * r2 * a2 - tri


def cyl_overlap(a: CylBound, b: CylBound) -> tuple[float, float]:
    """Volumetric (dice, iou) of two vertical cylinders.

    The intersection volume factors into the analytic circle-circle
    intersection area times the z-interval overlap length.
    """
    d = math.hypot(a.c_x - b.c_x, a.c_y - b.c_y)
    area = _circle_intersection_area(d, a.r, b.r)
    z_overlap = max(0.0, min(a.z_hi, b.z_hi) - max(a.z_lo, b.z_lo))
    v_int = area * z_overlap
    v_a, v_b = a.volume, b.volume
    dice = 2.0 * v_int / (v_a + v_b)
    iou = v_int / (v_a + v_b - v_int)
    return dice, iou


# ---------------------------------------------------------------------------
# Regression loss
# ---------------------------------------------------------------------------

def smooth_l1(x) -> np.ndarray:
    """Elementwise Smooth-L1: 0.5*x^2 for |x| < 1, |x| - 0.5 otherwise."""
    x = np.asarray(x, dtype=np.float64)
    ax = np.abs(x)
    return np.where(ax < 1.0, 0.5 * x * x, ax - 0.5)


def bound_loss(pred, gt, mask=None) -> float:
    """Masked Smooth-L1 bound-regression loss.

    Per masked row, the five parameter residuals pass through smooth_l1 and
    are summed; the result is averaged over masked rows.  Rows with a False
    mask contribute exactly zero.  An all-masked-out call is degenerate and
    returns 0.0.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 2 or pred.shape[1] != 5:
        raise ValueError(f"pred/gt must both be (n, 5), got {pred.shape} vs {gt.shape}")
    if mask is None:
        mask = np.ones(len(pred), dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (len(pred),):
        raise ValueError("mask must have one entry per row")
    if not mask.any():
        return 0.0
    per_row = smooth_l1(pred[mask] - gt[mask]).sum(axis=1)
    return float(per_row.mean())
