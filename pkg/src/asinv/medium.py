"""Piecewise-constant media, exact interface distances and region labels.

A :class:`Medium` is a background made of pieces that reach the outer
boundary plus additive inclusions strictly inside the domain::

    u = sum_m  u0_m * chi(background piece m)  +  sum_k  u_k * chi(inclusion k)

Inclusions may be nested (their boundaries must stay disjoint).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence, Union

import numpy as np

from asinv.mesh import Mesh, Rectangle, as_rectangle

_GEOM_TOL = 1e-12


class RegionSeparationError(ValueError):
    """Raised when interface neighbourhoods overlap or a delta-interior is empty."""

    def __init__(self, message: str, pair: tuple):
        super().__init__(message)
        self.pair = pair


# ---------------------------------------------------------------------------
# distance helpers

def point_segment_distance(points: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    points = np.atleast_2d(points)
    ab = b - a
    denom = float(ab @ ab)
    if denom == 0.0:
        return np.linalg.norm(points - a, axis=1)
    t = np.clip((points - a) @ ab / denom, 0.0, 1.0)
    closest = a + t[:, None] * ab
    return np.linalg.norm(points - closest, axis=1)


def _orient(p, q, r) -> float:
    return (q[0] - p[0]) * (r[1] - p[1]) - (q[1] - p[1]) * (r[0] - p[0])


def _on_segment(p, q, r) -> bool:
    """r collinear with pq lies within its bounding box."""
    return (min(p[0], q[0]) <= r[0] <= max(p[0], q[0])
            and min(p[1], q[1]) <= r[1] <= max(p[1], q[1]))


def _segments_intersect(a, b, c, d) -> bool:
    o1, o2 = _orient(a, b, c), _orient(a, b, d)
    o3, o4 = _orient(c, d, a), _orient(c, d, b)
    if o1 * o2 < 0 and o3 * o4 < 0:
        return True
    return ((o1 == 0 and _on_segment(a, b, c)) or (o2 == 0 and _on_segment(a, b, d))
            or (o3 == 0 and _on_segment(c, d, a)) or (o4 == 0 and _on_segment(c, d, b)))


def segment_segment_distance(a, b, c, d) -> float:
    if _segments_intersect(a, b, c, d):
        return 0.0
    return float(min(
        point_segment_distance(a[None], c, d)[0],
        point_segment_distance(b[None], c, d)[0],
        point_segment_distance(c[None], a, b)[0],
        point_segment_distance(d[None], a, b)[0],
    ))


def segment_circle_distance(a, b, center, radius) -> float:
    """Distance between the segment ``ab`` and the circle ``|x - c| = r``."""
    dmin = point_segment_distance(np.asarray(center)[None], a, b)[0]
    dmax = max(np.linalg.norm(a - center), np.linalg.norm(b - center))
    if dmin <= radius <= dmax:
        return 0.0
    return float(dmin - radius if radius < dmin else radius - dmax)


# ---------------------------------------------------------------------------
# shapes

@dataclass(frozen=True)
class Disk:
    center: tuple[float, float]
    radius: float

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("disk radius must be positive")

    @property
    def perimeter(self) -> float:
        return 2.0 * np.pi * self.radius

    @property
    def area(self) -> float:
        return np.pi * self.radius ** 2

    @property
    def bounds(self) -> Rectangle:
        cx, cy = self.center
        r = self.radius
        return Rectangle(cx - r, cx + r, cy - r, cy + r)

    def contains(self, points: np.ndarray) -> np.ndarray:
        """Closed-set membership."""
        d = np.linalg.norm(np.atleast_2d(points) - np.asarray(self.center), axis=1)
        return d <= self.radius * (1.0 + _GEOM_TOL)

    def boundary_distance(self, points: np.ndarray) -> np.ndarray:
        d = np.linalg.norm(np.atleast_2d(points) - np.asarray(self.center), axis=1)
        return np.abs(d - self.radius)

    def distance_to_segments(self, segments: np.ndarray) -> float:
        c = np.asarray(self.center, dtype=float)
        if len(segments) == 0:
            return np.inf
        return min(segment_circle_distance(s[0], s[1], c, self.radius) for s in segments)


@dataclass(frozen=True)
class Polygon:
    vertices: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=float)
        if v.ndim != 2 or v.shape[1] != 2 or len(v) < 3:
            raise ValueError("polygon needs at least three (x, y) vertices")
        object.__setattr__(self, "vertices", v)

    @property
    def segments(self) -> np.ndarray:
        v = self.vertices
        return np.stack([v, np.roll(v, -1, axis=0)], axis=1)

    @property
    def perimeter(self) -> float:
        s = self.segments
        return float(np.linalg.norm(s[:, 1] - s[:, 0], axis=1).sum())

    @property
    def area(self) -> float:
        x, y = self.vertices.T
        return float(abs(0.5 * (x @ np.roll(y, -1) - np.roll(x, -1) @ y)))

    @property
    def bounds(self) -> Rectangle:
        lo = self.vertices.min(axis=0)
        hi = self.vertices.max(axis=0)
        return Rectangle(lo[0], hi[0], lo[1], hi[1])

    def boundary_distance(self, points: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(points)
        d = np.full(len(points), np.inf)
        for a, b in self.segments:
            d = np.minimum(d, point_segment_distance(points, a, b))
        return d

    def contains(self, points: np.ndarray) -> np.ndarray:
        """Closed-set membership (even-odd rule, boundary counts as inside)."""
        points = np.atleast_2d(points)
        x, y = points[:, 0], points[:, 1]
        inside = np.zeros(len(points), dtype=bool)
        for (x1, y1), (x2, y2) in self.segments:
            crosses = (y1 > y) != (y2 > y)
            with np.errstate(divide="ignore", invalid="ignore"):
                xint = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
            inside ^= crosses & (x < xint)
        scale = max(self.bounds.width, self.bounds.height)
        return inside | (self.boundary_distance(points) <= _GEOM_TOL * scale)

    def distance_to_segments(self, segments: np.ndarray) -> float:
        if len(segments) == 0:
            return np.inf
        return min(segment_segment_distance(a, b, c, d)
                   for a, b in self.segments for c, d in segments)


Shape = Union[Disk, Polygon]


def rectangle_polygon(xmin, xmax, ymin, ymax) -> Polygon:
    return Polygon(np.array([[xmin, ymin], [xmax, ymin], [xmax, ymax], [xmin, ymax]]))


def star_polygon(center, r_outer, r_inner, n_points=5, rotation=np.pi / 2) -> Polygon:
    angles = rotation + np.arange(2 * n_points) * np.pi / n_points
    radii = np.where(np.arange(2 * n_points) % 2 == 0, r_outer, r_inner)
    c = np.asarray(center, dtype=float)
    return Polygon(c + np.column_stack([radii * np.cos(angles), radii * np.sin(angles)]))


def regular_polygon(center, radius, n_sides, rotation=0.0) -> Polygon:
    angles = rotation + 2 * np.pi * np.arange(n_sides) / n_sides
    c = np.asarray(center, dtype=float)
    return Polygon(c + radius * np.column_stack([np.cos(angles), np.sin(angles)]))


def shape_boundary_distance(a: Shape, b: Shape) -> float:
    """Distance between the boundaries of two shapes (0 if they cross)."""
    if isinstance(a, Disk) and isinstance(b, Disk):
        d = float(np.linalg.norm(np.subtract(a.center, b.center)))
        if d >= a.radius + b.radius:
            return d - a.radius - b.radius
        if d <= abs(a.radius - b.radius):
            return abs(a.radius - b.radius) - d
        return 0.0
    if isinstance(a, Disk):
        a, b = b, a
    return b.distance_to_segments(a.segments)


# ---------------------------------------------------------------------------
# medium

@dataclass(frozen=True)
class BackgroundPiece:
    value: float
    region: Polygon


@dataclass(frozen=True)
class Inclusion:
    value: float
    shape: Shape


class InterfaceMeasure(NamedTuple):
    perimeter: float
    area: float


@dataclass(frozen=True)
class Medium:
    domain: Rectangle
    background: tuple[BackgroundPiece, ...]
    inclusions: tuple[Inclusion, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "domain", as_rectangle(self.domain))
        object.__setattr__(self, "background", tuple(self.background))
        object.__setattr__(self, "inclusions", tuple(self.inclusions))
        self.validate()

    @classmethod
    def constant(cls, domain, value: float, inclusions: Sequence[Inclusion] = ()) -> "Medium":
        d = as_rectangle(domain)
        return cls(d, (BackgroundPiece(float(value), rectangle_polygon(*d)),), tuple(inclusions))

    def validate(self) -> None:
        d = self.domain
        if not self.background:
            raise ValueError("medium needs at least one background piece")
        total = sum(p.region.area for p in self.background)
        if abs(total - d.area) > 1e-9 * d.area:
            raise ValueError(f"background pieces cover area {total}, domain area is {d.area}")
        for m, piece in enumerate(self.background):
            if _length_on_boundary(piece.region, d) <= 0:
                raise ValueError(f"background piece {m} does not touch the outer boundary")
        for k, inc in enumerate(self.inclusions):
            if inc.value == 0:
                raise ValueError(f"inclusion {k} has zero value")
            b = inc.shape.bounds
            if not (b.xmin > d.xmin and b.xmax < d.xmax and b.ymin > d.ymin and b.ymax < d.ymax):
                raise ValueError(f"inclusion {k} is not strictly inside the domain")
        for k in range(len(self.inclusions)):
            for j in range(k):
                if shape_boundary_distance(self.inclusions[k].shape, self.inclusions[j].shape) <= 0:
                    raise ValueError(f"inclusions {j} and {k} have intersecting boundaries")

    @property
    def n_inclusions(self) -> int:
        return len(self.inclusions)

    @property
    def interface_segments(self) -> np.ndarray:
        """Segments of background interfaces not lying on the outer boundary."""
        segs = []
        for piece in self.background:
            for a, b in piece.region.segments:
                if not _segment_on_boundary(a, b, self.domain):
                    segs.append((a, b))
        return np.array(segs, dtype=float).reshape(-1, 2, 2)

    def background_values(self, points: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(points)
        out = np.full(len(points), np.nan)
        for piece in self.background:  # last listed wins on shared edges
            out[piece.region.contains(points)] = piece.value
        if np.isnan(out).any():
            raise ValueError("points outside every background piece")
        return out

    def indicator(self, k: int, points: np.ndarray) -> np.ndarray:
        return self.inclusions[k].shape.contains(points).astype(float)

    def perturbation_values(self, points: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(points)
        out = np.zeros(len(points))
        for k, inc in enumerate(self.inclusions):
            out += inc.value * self.indicator(k, points)
        return out

    def evaluate(self, points: np.ndarray) -> np.ndarray:
        return self.background_values(points) + self.perturbation_values(points)

    def __call__(self, points: np.ndarray) -> np.ndarray:
        return self.evaluate(points)

    def min_abs_inclusion_value(self) -> float:
        return min(abs(inc.value) for inc in self.inclusions)

    def background_interface_distance(self, points: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(points)
        d = np.full(len(points), np.inf)
        for a, b in self.interface_segments:
            d = np.minimum(d, point_segment_distance(points, a, b))
        return d


def _segment_on_boundary(a, b, d: Rectangle, tol=1e-12) -> bool:
    for axis, lo, hi in ((0, d.xmin, d.xmax), (1, d.ymin, d.ymax)):
        for edge in (lo, hi):
            if abs(a[axis] - edge) <= tol and abs(b[axis] - edge) <= tol:
                return True
    return False


def _length_on_boundary(poly: Polygon, d: Rectangle) -> float:
    return sum(float(np.linalg.norm(b - a)) for a, b in poly.segments if _segment_on_boundary(a, b, d))


def interface_length(medium: Medium) -> list[InterfaceMeasure]:
    """Exact perimeter and area of each inclusion."""
    return [InterfaceMeasure(inc.shape.perimeter, inc.shape.area) for inc in medium.inclusions]


# ---------------------------------------------------------------------------
# region classification

S_REGION, U_REGION, D_REGION, A_REGION = 0, 1, 2, 3
_KIND_NAMES = {S_REGION: "S", U_REGION: "U", D_REGION: "D", A_REGION: "A"}


@dataclass(frozen=True, eq=False)
class RegionMask:
    """Per-triangle labels ``S``, ``U^k``, ``D`` or ``A^k``.

    ``kind`` holds the label class and ``index`` the inclusion index for
    ``U``/``A`` labels (-1 otherwise). ``D`` here excludes the inclusion
    interiors; :attr:`complement` gives the full open complement used by the
    estimates (``D`` together with all ``A^k``).
    """

    kind: np.ndarray
    index: np.ndarray
    delta: float

    @property
    def complement(self) -> np.ndarray:
        return (self.kind == D_REGION) | (self.kind == A_REGION)

    def mask(self, kind: int, k: int | None = None) -> np.ndarray:
        m = self.kind == kind
        if k is not None:
            m &= self.index == k
        return m

    def labels(self) -> list[str]:
        return [_KIND_NAMES[c] + (str(i + 1) if i >= 0 else "") for c, i in zip(self.kind, self.index)]


def check_separation(medium: Medium, delta: float) -> None:
    """Exact geometric separation of the delta-neighbourhoods."""
    S = medium.interface_segments
    for k, inc in enumerate(medium.inclusions):
        if isinstance(inc.shape, Disk) and inc.shape.radius <= delta:
            raise RegionSeparationError(f"inclusion {k + 1} has empty {delta}-interior", (k + 1,))
        if inc.shape.distance_to_segments(S) <= 2 * delta:
            raise RegionSeparationError(
                f"neighbourhoods of background interface and inclusion {k + 1} overlap", ("S", k + 1))
        for j in range(k):
            if shape_boundary_distance(inc.shape, medium.inclusions[j].shape) <= 2 * delta:
                raise RegionSeparationError(
                    f"neighbourhoods of inclusions {j + 1} and {k + 1} overlap", (j + 1, k + 1))


def classify_regions(mesh: Mesh, medium: Medium, delta: float) -> RegionMask:
    if not delta > 0:
        raise ValueError("delta must be positive")
    check_separation(medium, delta)
    bc = mesh.barycenters
    nt = len(bc)
    kind = np.full(nt, D_REGION)
    index = np.full(nt, -1)
    for k, inc in enumerate(medium.inclusions):
        near = inc.shape.boundary_distance(bc) < delta
        inside = inc.shape.contains(bc) & ~near
        if not inside.any():
            raise RegionSeparationError(
                f"inclusion {k + 1} has no triangle in its {delta}-interior", (k + 1,))
        sel = inside & (kind != U_REGION)
        kind[sel] = A_REGION  # later (inner) inclusions override outer ones
        index[sel] = k
        kind[near] = U_REGION
        index[near] = k
    near_s = medium.background_interface_distance(bc) < delta
    kind[near_s] = S_REGION
    index[near_s] = -1
    return RegionMask(kind=kind, index=index, delta=float(delta))
