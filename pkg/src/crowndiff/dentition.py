"""Tooth and dentition data model.

Teeth are individual labeled point clouds placed in a standardized frame:
the centroid of the four maxillary incisors sits at the origin, the facial
direction points along -Y, and the sagittal plane coincides with the YZ
plane.  A dentition holds up to 28 permanent teeth (third molars excluded),
identified by two-digit FDI codes.

The module also provides the fixed zig-zag arch ordering used as the
ordinal tooth index by the attention layers, scenario masking, the
dentition-level augmentations (mirroring, isotropic scaling, point
shuffling), a procedural synthetic-dentition generator, and manifest/PLY
file I/O.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

# Permanent dentition, third molars excluded.  Quadrants: 1 = upper right,
# 2 = upper left, 3 = lower left, 4 = lower right; positions 1-7 run from
# central incisor to second molar.
FDI_CODES: tuple[int, ...] = tuple(
    q * 10 + p for q in (1, 2, 3, 4) for p in range(1, 8)
)

# Fixed linearized arch order alternating upper/lower, right to left.
# Adjacent same-arch neighbours always differ by exactly 2.
ZIGZAG_ORDER: tuple[int, ...] = (
    17, 47, 16, 46, 15, 45, 14, 44, 13, 43, 12, 42, 11, 41,
    21, 31, 22, 32, 23, 33, 24, 34, 25, 35, 26, 36, 27, 37,
)

_ZIGZAG_INDEX = {fdi: i for i, fdi in enumerate(ZIGZAG_ORDER)}

# Bilateral mirror swaps quadrants 1<->2 and 3<->4, position digit kept.
MIRROR_MAP: dict[int, int] = {
    q * 10 + p: {1: 2, 2: 1, 3: 4, 4: 3}[q] * 10 + p
    for q in (1, 2, 3, 4)
    for p in range(1, 8)
}

MAXILLARY_INCISORS: tuple[int, ...] = (11, 12, 21, 22)


class Role(enum.Enum):
    """Whether a tooth conditions generation or is itself generated."""

    CONTEXT = "context"
    TARGET = "target"


def zigzag_index(fdi: int) -> int:
    """Position of an FDI code in the fixed zig-zag arch order (0..27)."""
    try:
        return _ZIGZAG_INDEX[fdi]
    except KeyError:
        raise ValueError(f"invalid FDI code: {fdi!r}") from None


def fdi_from_index(index: int) -> int:
    """Inverse of :func:`zigzag_index`."""
    if not 0 <= index <= 27:
        raise ValueError(f"zig-zag index out of range: {index!r}")
    return ZIGZAG_ORDER[index]


@dataclass(frozen=True)
class Tooth:
    """One labeled tooth point cloud.

    Attributes
    ----------
    fdi : int
        FDI code, one of the 28 permanent-dentition codes.
    role : Role
        Context (conditions generation) or target (to be generated).
    points : (N, 3) float64 array
        Coordinates in mm.
    normals : (N, 3) float64 array or None
        Optional per-point unit normals.
    pseudo : bool
        True for model-generated placeholder teeth.
    """

    fdi: int
    role: Role
    points: np.ndarray
    normals: np.ndarray | None = None
    pseudo: bool = False

    def __post_init__(self):
        if self.fdi not in _ZIGZAG_INDEX:
            raise ValueError(f"invalid FDI code: {self.fdi!r}")
        pts = np.ascontiguousarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 1:
            raise ValueError(f"tooth {self.fdi}: points must be (N, 3), N >= 1")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        if self.normals is not None:
            nrm = np.ascontiguousarray(self.normals, dtype=np.float64)
            if nrm.shape != pts.shape:
                raise ValueError(f"tooth {self.fdi}: normals shape must match points")
            lengths = np.linalg.norm(nrm, axis=1)
            if np.any(np.abs(lengths - 1.0) > 1e-6):
                raise ValueError(f"tooth {self.fdi}: normals must be unit length")
            nrm.setflags(write=False)
            object.__setattr__(self, "normals", nrm)

    @property
    def n_points(self) -> int:
        return self.points.shape[0]

    def centroid(self) -> np.ndarray:
        return self.points.mean(axis=0)


@dataclass(frozen=True)
class Dentition:
    """An ordered constellation of teeth, at most one per FDI code."""

    teeth: tuple[Tooth, ...]
    frame: str = "standardized"

    def __post_init__(self):
        ordered = tuple(sorted(self.teeth, key=lambda t: zigzag_index(t.fdi)))
        fdis = [t.fdi for t in ordered]
        if len(set(fdis)) != len(fdis):
            dupes = sorted({f for f in fdis if fdis.count(f) > 1})
            raise ValueError(f"duplicate FDI codes in dentition: {dupes}")
        object.__setattr__(self, "teeth", ordered)

    @property
    def fdis(self) -> tuple[int, ...]:
        return tuple(t.fdi for t in self.teeth)

    def __contains__(self, fdi: int) -> bool:
        return fdi in self.fdis

    def __len__(self) -> int:
        return len(self.teeth)

    def get(self, fdi: int) -> Tooth:
        for t in self.teeth:
            if t.fdi == fdi:
                return t
        raise KeyError(f"tooth {fdi} not present")

    def without(self, fdis) -> "Dentition":
        """Copy of this dentition with the given teeth removed."""
        drop = set(fdis)
        return Dentition(
            teeth=tuple(t for t in self.teeth if t.fdi not in drop),
            frame=self.frame,
        )

    def incisor_centroid(self) -> np.ndarray | None:
        """Mean centroid of teeth 11, 12, 21, 22, or None if any is absent."""
        if not all(f in self for f in MAXILLARY_INCISORS):
            return None
        return np.mean([self.get(f).centroid() for f in MAXILLARY_INCISORS], axis=0)


def check_standard_frame(dentition: Dentition, tol_mm: float = 0.5) -> bool:
    """Soft frame check: maxillary-incisor centroid within ``tol_mm`` of origin.

    Returns True when the check passes or cannot be applied (incisors
    missing); the alignment tolerance of imported data is configurable.
    """
    c = dentition.incisor_centroid()
    if c is None:
        return True
    return bool(np.linalg.norm(c) <= tol_mm)


@dataclass(frozen=True)
class Scenario:
    """A restoration scenario: which teeth are masked out for generation."""

    context: frozenset[int]
    targets: frozenset[int]
    seed: int = 0

    def __post_init__(self):
        if not 1 <= len(self.targets) <= 6:
            raise ValueError(f"scenario must have 1..6 targets, got {len(self.targets)}")
        if self.targets & self.context:
            raise ValueError("targets and context overlap")
        bad = (self.targets | self.context) - set(FDI_CODES)
        if bad:
            raise ValueError(f"invalid FDI codes in scenario: {sorted(bad)}")

    @property
    def target_order(self) -> tuple[int, ...]:
        return tuple(sorted(self.targets, key=zigzag_index))

    @property
    def context_order(self) -> tuple[int, ...]:
        return tuple(sorted(self.context, key=zigzag_index))


def make_scenario(dentition: Dentition, targets, seed: int = 0) -> Scenario:
    """Build a scenario masking ``targets`` out of ``dentition``."""
    targets = frozenset(int(f) for f in targets)
    missing = targets - set(dentition.fdis)
    if missing:
        raise ValueError(f"target teeth absent from dentition: {sorted(missing)}")
    if not 1 <= len(targets) <= 6:
        raise ValueError(f"scenario must have 1..6 targets, got {len(targets)}")
    context = frozenset(dentition.fdis) - targets
    return Scenario(context=context, targets=targets, seed=int(seed))


def random_scenario(dentition: Dentition, n_targets: int, rng: np.random.Generator) -> Scenario:
    """Randomly mask ``n_targets`` present teeth (1..6)."""
    if not 1 <= n_targets <= 6:
        raise ValueError("n_targets must be in 1..6")
    if n_targets > len(dentition):
        raise ValueError("not enough teeth to mask")
    picks = rng.choice(len(dentition), size=n_targets, replace=False)
    targets = [dentition.teeth[i].fdi for i in sorted(picks)]
    return make_scenario(dentition, targets, seed=int(rng.integers(0, 2**31 - 1)))


# ---------------------------------------------------------------------------
# Augmentations
# ---------------------------------------------------------------------------

def mirror_tooth(tooth: Tooth) -> Tooth:
    """Reflect one tooth across the sagittal (YZ) plane and remap its FDI."""
    pts = tooth.points.copy()
    pts[:, 0] = -pts[:, 0]
    nrm = None
    if tooth.normals is not None:
        nrm = tooth.normals.copy()
        nrm[:, 0] = -nrm[:, 0]
    return replace(tooth, fdi=MIRROR_MAP[tooth.fdi], points=pts, normals=nrm)


def mirror_dentition(dentition: Dentition) -> Dentition:
    """Bilateral mirroring: negate x, swap quadrants 1<->2 and 4<->3."""
    return Dentition(
        teeth=tuple(mirror_tooth(t) for t in dentition.teeth),
        frame=dentition.frame,
    )


def scale_dentition(dentition: Dentition, s: float) -> Dentition:
    """Isotropic scaling about the origin; normals are unchanged."""
    if not s > 0:
        raise ValueError(f"scale factor must be positive, got {s}")
    teeth = tuple(replace(t, points=t.points * s) for t in dentition.teeth)
    return Dentition(teeth=teeth, frame=dentition.frame)


def shuffle_points(tooth: Tooth, seed: int) -> Tooth:
    """Permute the rows of one tooth's point cloud (normals follow)."""
    perm = np.random.default_rng(seed).permutation(tooth.n_points)
    nrm = tooth.normals[perm] if tooth.normals is not None else None
    return replace(tooth, points=tooth.points[perm], normals=nrm)


# ---------------------------------------------------------------------------
# Synthetic dentition generation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SynthConfig:
    """Geometry knobs for the procedural dentition generator.

    Sizes are in mm.  ``tooth_dims`` maps the FDI position digit (1..7) to
    the superellipsoid half-axes (mesiodistal, buccolingual, vertical) and
    the two shape exponents (vertical, horizontal).
    """

    points_per_tooth: int = 1024
    jitter: float = 0.03
    arch_half_width: float = 27.0
    arch_depth: float = 38.0
    mandibular_scale: float = 0.95
    interdigitation: float = 0.5
    gap: float = 0.6
    tooth_dims: dict = field(
        default_factory=lambda: {
            1: (4.0, 3.3, 4.6, 0.9, 0.7),   # central incisor
            2: (3.3, 3.1, 4.4, 0.9, 0.7),   # lateral incisor
            3: (3.8, 3.9, 5.0, 1.1, 0.8),   # canine
            4: (4.0, 4.4, 4.3, 0.8, 0.6),   # first premolar
            5: (4.1, 4.6, 4.2, 0.8, 0.6),   # second premolar
            6: (5.3, 5.6, 4.0, 0.7, 0.5),   # first molar
            7: (5.0, 5.4, 3.8, 0.7, 0.5),   # second molar
        }
    )

    def __post_init__(self):
        if self.points_per_tooth < 1:
            raise ValueError("points_per_tooth must be positive")
        if self.jitter < 0:
            raise ValueError("jitter must be non-negative")


def _signed_pow(x: np.ndarray, e: float) -> np.ndarray:
    return np.sign(x) * np.abs(x) ** e


def _superellipsoid_surface(u, v, half_axes, e1, e2, wobble):
    """Parametric superellipsoid point with a smooth radial wobble field."""
    a, b, c = half_axes
    cu, su = np.cos(u), np.sin(u)
    cv, sv = np.cos(v), np.sin(v)
    base = np.stack(
        [
            a * _signed_pow(cu, e1) * _signed_pow(cv, e2),
            b * _signed_pow(cu, e1) * _signed_pow(sv, e2),
            c * _signed_pow(su, e1),
        ],
        axis=-1,
    )
    amp, ku, kv, phase = wobble
    rho = 1.0 + amp[0] * np.sin(ku[0] * u + kv[0] * v + phase[0]) \
              + amp[1] * np.sin(ku[1] * u + kv[1] * v + phase[1]) \
              + amp[2] * np.sin(ku[2] * u + kv[2] * v + phase[2])
    return base * rho[..., None]


def _sample_tooth_surface(rng, n, half_axes, e1, e2, jitter):
    """Sample n surface points with outward unit normals."""
    amp = rng.uniform(0.2, 1.0, size=3) * jitter / 3.0
    ku = rng.integers(1, 4, size=3).astype(float)
    kv = rng.integers(1, 4, size=3).astype(float)
    phase = rng.uniform(0.0, 2.0 * math.pi, size=3)
    wobble = (amp, ku, kv, phase)

    u = np.arcsin(rng.uniform(-1.0, 1.0, size=n))
    v = rng.uniform(-math.pi, math.pi, size=n)
    pts = _superellipsoid_surface(u, v, half_axes, e1, e2, wobble)

    # Outward normals from the cross product of numeric parametric partials.
    h = 1e-5
    du = (
        _superellipsoid_surface(u + h, v, half_axes, e1, e2, wobble)
        - _superellipsoid_surface(u - h, v, half_axes, e1, e2, wobble)
    ) / (2 * h)
    dv = (
        _superellipsoid_surface(u, v + h, half_axes, e1, e2, wobble)
        - _superellipsoid_surface(u, v - h, half_axes, e1, e2, wobble)
    ) / (2 * h)
    nrm = np.cross(du, dv)
    lengths = np.linalg.norm(nrm, axis=1, keepdims=True)
    lengths[lengths < 1e-12] = 1.0
    nrm = nrm / lengths
    flip = np.sum(nrm * pts, axis=1) < 0
    nrm[flip] = -nrm[flip]
    # Degenerate partials (poles) fall back to the radial direction.
    bad = np.linalg.norm(np.cross(du, dv), axis=1) < 1e-9
    if np.any(bad):
        radial = pts[bad] / np.linalg.norm(pts[bad], axis=1, keepdims=True)
        nrm[bad] = radial
    return pts, nrm


def _arch_stations(cfg: SynthConfig, widths: list[float]):
    """Arc-length positions of the 14 tooth centers along a parabolic arch.

    Returns (t values, tangent angles) for positions ordered
    [-7..-1, 1..7] by signed station.  The arch is y = depth * (x/w)^2 with
    the anterior teeth near the origin and molars at larger +y.
    """
    w, d = cfg.arch_half_width, cfg.arch_depth
    ts = np.linspace(-w, w, 4001)
    ys = d * (ts / w) ** 2
    seg = np.hypot(np.diff(ts), np.diff(ys))
    s = np.concatenate([[0.0], np.cumsum(seg)])
    s -= s[len(s) // 2]  # arc length measured from the midline

    stations = []
    acc = cfg.gap / 2.0
    for width in widths:  # positions 1..7 outward from midline
        stations.append(acc + width / 2.0)
        acc += width + cfg.gap
    stations = np.asarray(stations)
    t_right = np.interp(-stations[::-1], s, ts)  # -x side: positions 7..1
    t_left = np.interp(stations, s, ts)
    t_all = np.concatenate([t_right, t_left])
    slopes = 2.0 * d * t_all / w**2
    angles = np.arctan2(slopes, 1.0)
    return t_all, angles


def synth_dentition(seed: int, config: SynthConfig | None = None) -> Dentition:
    """Procedurally generate a plausible 28-tooth dentition.

    Teeth are deformed superellipsoids placed along parabolic arches with
    light occlusal interdigitation; the whole constellation is translated so
    that the maxillary-incisor centroid sits at the origin.  Deterministic
    given (seed, config).
    """
    cfg = config or SynthConfig()
    rng = np.random.default_rng(seed)
    w = cfg.arch_half_width

    teeth = []
    for quadrants, z_sign, arch_scale in (
        ((1, 2), +1.0, 1.0),
        ((4, 3), -1.0, cfg.mandibular_scale),
    ):
        widths = [cfg.tooth_dims[p][0] * 2.0 for p in range(1, 8)]
        t_all, angles = _arch_stations(cfg, widths)
        # index 0..6 -> right quadrant positions 7..1, index 7..13 -> left 1..7
        order = [(quadrants[0], p) for p in range(7, 0, -1)] + [
            (quadrants[1], p) for p in range(1, 8)
        ]
        for (quadrant, pos), t, ang in zip(order, t_all, angles):
            a, b, c, e1, e2 = cfg.tooth_dims[pos]
            size_scale = arch_scale * rng.uniform(0.97, 1.03)
            pts, nrm = _sample_tooth_surface(
                rng,
                cfg.points_per_tooth,
                (a * size_scale, b * size_scale, c * size_scale),
                e1,
                e2,
                cfg.jitter,
            )
            # Rotate the mesiodistal axis onto the arch tangent, then place
            # the crown so the arches meet in a thin band around z = 0.
            ca, sa = math.cos(ang), math.sin(ang)
            rot = np.array([[ca, -sa, 0.0], [sa, ca, 0.0], [0.0, 0.0, 1.0]])
            pts = pts @ rot.T
            nrm = nrm @ rot.T
            cz = z_sign * (c * size_scale - cfg.interdigitation)
            center = np.array(
                [t * arch_scale, cfg.arch_depth * (t / w) ** 2 * arch_scale, cz]
            )
            teeth.append(
                Tooth(
                    fdi=quadrant * 10 + pos,
                    role=Role.CONTEXT,
                    points=pts + center,
                    normals=nrm,
                )
            )

    dentition = Dentition(teeth=tuple(teeth))
    shift = dentition.incisor_centroid()
    teeth = tuple(
        replace(t, points=t.points - shift) for t in dentition.teeth
    )
    return Dentition(teeth=teeth)


# ---------------------------------------------------------------------------
# File I/O: JSON manifest + ASCII PLY point files
# ---------------------------------------------------------------------------

def _write_ply(path: Path, points: np.ndarray, normals: np.ndarray | None):
    lines = ["ply", "format ascii 1.0", f"element vertex {len(points)}"]
    lines += ["property double x", "property double y", "property double z"]
    if normals is not None:
        lines += ["property double nx", "property double ny", "property double nz"]
    lines.append("end_header")
    rows = points if normals is None else np.hstack([points, normals])
    for row in rows:
        lines.append(" ".join(repr(float(v)) for v in row))
    path.write_text("\n".join(lines) + "\n")


def _read_ply(path: Path) -> tuple[np.ndarray, np.ndarray | None]:
    try:
        text = path.read_text()
    except OSError as exc:
        raise ValueError(f"{path}: cannot read point file: {exc}") from exc
    lines = text.splitlines()
    if not lines or lines[0].strip() != "ply":
        raise ValueError(f"{path}:1: not an ascii PLY file")
    n_vertices = None
    properties: list[str] = []
    body_start = None
    for i, line in enumerate(lines[1:], start=2):
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "element":
            if tok[1] != "vertex":
                raise ValueError(f"{path}:{i}: unsupported element {tok[1]!r}")
            n_vertices = int(tok[2])
        elif tok[0] == "property":
            properties.append(tok[2])
        elif tok[0] == "end_header":
            body_start = i
            break
    if n_vertices is None or body_start is None:
        raise ValueError(f"{path}: missing vertex element or end_header")
    if properties[:3] != ["x", "y", "z"]:
        raise ValueError(f"{path}: vertex properties must start with x y z")
    has_normals = properties[3:6] == ["nx", "ny", "nz"]
    n_cols = 6 if has_normals else 3

    data = np.empty((n_vertices, n_cols))
    for k in range(n_vertices):
        line_no = body_start + 1 + k
        if line_no > len(lines) or not lines[line_no - 1].strip():
            raise ValueError(f"{path}:{line_no}: truncated point file "
                             f"({k} of {n_vertices} vertices)")
        parts = lines[line_no - 1].split()
        if len(parts) != n_cols:
            raise ValueError(f"{path}:{line_no}: expected {n_cols} values, "
                             f"got {len(parts)}")
        try:
            data[k] = [float(p) for p in parts]
        except ValueError:
            raise ValueError(f"{path}:{line_no}: malformed number") from None
    points = data[:, :3]
    normals = data[:, 3:6] if has_normals else None
    return points, normals


def write_dentition(dentition: Dentition, manifest_path) -> None:
    """Write a dentition as a JSON manifest plus one ASCII PLY per tooth."""
    manifest_path = Path(manifest_path)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    for tooth in dentition.teeth:
        fname = f"tooth_{tooth.fdi}.ply"
        _write_ply(manifest_path.parent / fname, tooth.points, tooth.normals)
        entry = {"fdi": tooth.fdi, "role": tooth.role.value, "file": fname}
        if tooth.pseudo:
            entry["pseudo"] = True
        entries.append(entry)
    doc = {"frame": dentition.frame, "teeth": entries}
    manifest_path.write_text(json.dumps(doc, indent=2) + "\n")


def read_dentition(manifest_path) -> Dentition:
    """Read a dentition written by :func:`write_dentition`."""
    manifest_path = Path(manifest_path)
    try:
        doc = json.loads(manifest_path.read_text())
    except OSError as exc:
        raise ValueError(f"{manifest_path}: cannot read manifest: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ValueError(f"{manifest_path}: malformed manifest: {exc}") from exc
    teeth = []
    for entry in doc.get("teeth", []):
        try:
            fdi = int(entry["fdi"])
            role = Role(entry["role"])
            fname = entry["file"]
        except (KeyError, ValueError) as exc:
            raise ValueError(f"{manifest_path}: malformed manifest entry {entry!r}") from exc
        points, normals = _read_ply(manifest_path.parent / fname)
        teeth.append(
            Tooth(
                fdi=fdi,
                role=role,
                points=points,
                normals=normals,
                pseudo=bool(entry.get("pseudo", False)),
            )
        )
    return Dentition(teeth=tuple(teeth), frame=doc.get("frame", "standardized"))
