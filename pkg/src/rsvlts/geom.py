"""Geometry primitives shared by every task representation and metric.

Image convention throughout: origin top-left, x to the right, y downward.
Pixel ``(i, j)`` is column ``i``, row ``j`` and covers the unit square whose
center is ``(i + 0.5, j + 0.5)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence

import numpy as np
from scipy import ndimage

from rsvlts import kernels

EARTH_RADIUS_KM = 6371.0

_CROSS = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)
_SQUARE = np.ones((3, 3), dtype=bool)


class GeometryError(ValueError):
    """Raised when a geometric value violates its invariants."""


class PreconditionError(GeometryError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


def _num(v):
    if isinstance(v, bool):
        raise GeometryError(f"coordinate must be a number, got {v!r}")
    if isinstance(v, (int, np.integer)):
        return int(v)
    v = float(v)
    if v.is_integer():
        # keep integral values as ints so serialization stays canonical
        return int(v) if abs(v) < 2**53 else v
    return v


class _XY(NamedTuple):
    x: float
    y: float


class Point(_XY):
    __slots__ = ()

    def __new__(cls, x, y):
        x = _num(x)
        y = _num(y)
        if not (math.isfinite(x) and math.isfinite(y)):
            raise GeometryError(f"non-finite point ({x}, {y})")
        return super().__new__(cls, x, y)


def as_points(points: Iterable) -> tuple[Point, ...]:
    return tuple(p if isinstance(p, Point) else Point(*p) for p in points)


def _xs_ys(vertices: Sequence[Point]) -> tuple[list[float], list[float]]:
    return [float(p.x) for p in vertices], [float(p.y) for p in vertices]


def _is_convex(vertices: Sequence[Point]) -> bool:
    n = len(vertices)
    sign = 0
    for i in range(n):
        a, b, c = vertices[i - 2], vertices[i - 1], vertices[i]
        cross = (b.x - a.x) * (c.y - b.y) - (b.y - a.y) * (c.x - b.x)
        if cross != 0:
            s = 1 if cross > 0 else -1
            if sign and s != sign:
                return False
            sign = s
    return sign != 0


@dataclass(frozen=True)
class Polygon:
    """Simple ring of vertices, stored open (the closing edge is implicit)."""

    vertices: tuple[Point, ...]

    def __post_init__(self):
        verts = as_points(self.vertices)
        object.__setattr__(self, "vertices", verts)
        if len(verts) < 3:
            raise GeometryError(f"polygon needs >= 3 vertices, got {len(verts)}")
        for i in range(len(verts)):
            if verts[i - 1] == verts[i]:
                raise GeometryError(f"consecutive duplicate vertex {tuple(verts[i])}")
        if kernels.signed_area(*_xs_ys(verts)) == 0.0:
            raise GeometryError("polygon has zero area")

    def __len__(self):
        return len(self.vertices)

    @property
    def signed_area(self) -> float:
        return kernels.signed_area(*_xs_ys(self.vertices))

    def is_convex(self) -> bool:
        return _is_convex(self.vertices)


@dataclass(frozen=True)
class RotatedBox:
    """Four-corner oriented box.

    Boxes built by :func:`rbb_from_params` are exact rectangles listed
    clockwise on screen from the rotated top-left corner. Boxes coming from
    quantized bins or model output are only required to be convex,
    non-degenerate quadrilaterals (either winding); :func:`rbb_to_params`
    enforces rectangularity.
    """

    corners: tuple[Point, ...]

    def __post_init__(self):
        corners = as_points(self.corners)
        object.__setattr__(self, "corners", corners)
        if len(corners) != 4:
            raise GeometryError(f"rotated box needs exactly 4 corners, got {len(corners)}")
        if kernels.signed_area(*_xs_ys(corners)) == 0.0:
            raise GeometryError("rotated box has zero area")
        if not _is_convex(corners):
            raise GeometryError("rotated box corners do not form a convex quadrilateral")

    @property
    def vertices(self) -> tuple[Point, ...]:
        return self.corners

    @property
    def center(self) -> tuple[float, float]:
        return (sum(p.x for p in self.corners) / 4.0, sum(p.y for p in self.corners) / 4.0)

    @property
    def diagonal(self) -> float:
        a, _, c, _ = self.corners
        return math.hypot(c.x - a.x, c.y - a.y)

    def bounds(self) -> tuple[float, float, float, float]:
        xs = [p.x for p in self.corners]
        ys = [p.y for p in self.corners]
        return min(xs), min(ys), max(xs), max(ys)

    def is_rectangle(self, rel_tol: float = 1e-6) -> bool:
        a, b, c, d = self.corners
        tol = rel_tol * max(math.hypot(c.x - a.x, c.y - a.y), math.hypot(d.x - b.x, d.y - b.y))
        # parallelogram: diagonals bisect each other; rectangle: and are equal
        if abs((a.x + c.x) - (b.x + d.x)) > 2 * tol or abs((a.y + c.y) - (b.y + d.y)) > 2 * tol:
            return False
        return abs(math.hypot(c.x - a.x, c.y - a.y) - math.hypot(d.x - b.x, d.y - b.y)) <= tol


@dataclass(frozen=True)
class HorizontalBox:
    min: Point
    max: Point

    def __post_init__(self):
        lo = self.min if isinstance(self.min, Point) else Point(*self.min)
        hi = self.max if isinstance(self.max, Point) else Point(*self.max)
        object.__setattr__(self, "min", lo)
        object.__setattr__(self, "max", hi)
        if lo.x > hi.x or lo.y > hi.y:
            raise GeometryError(f"box min {tuple(lo)} exceeds max {tuple(hi)}")

    def contains(self, p: Point) -> bool:
        return self.min.x <= p.x <= self.max.x and self.min.y <= p.y <= self.max.y


@dataclass(frozen=True)
class BoxParams:
    """Center/extent/angle parameterization; ``theta`` in radians."""

    cx: float
    cy: float
    w: float
    h: float
    theta: float

    def __post_init__(self):
        for name in ("cx", "cy", "w", "h", "theta"):
            if not math.isfinite(getattr(self, name)):
                raise PreconditionError(name, "must be finite")
        if self.w <= 0:
            raise PreconditionError("w", f"must be > 0, got {self.w}")
        if self.h <= 0:
            raise PreconditionError("h", f"must be > 0, got {self.h}")
        if not (-math.pi / 2 <= self.theta < math.pi / 2):
            raise PreconditionError("theta", f"must lie in [-pi/2, pi/2), got {self.theta}")


@dataclass(frozen=True, eq=False)
class BinaryMask:
    """Row-major boolean raster; ``bits[row, col]``."""

    width: int
    height: int
    bits: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise GeometryError(f"mask dims must be positive, got {self.width}x{self.height}")
        bits = np.array(self.bits, dtype=bool, copy=True)
        if bits.size != self.width * self.height:
            raise GeometryError(f"{bits.size} bits do not fill a {self.width}x{self.height} mask")
        bits = bits.reshape(self.height, self.width)
        bits.setflags(write=False)
        object.__setattr__(self, "bits", bits)

    @classmethod
    def from_array(cls, arr) -> "BinaryMask":
        arr = np.asarray(arr, dtype=bool)
        return cls(arr.shape[1], arr.shape[0], arr)

    @classmethod
    def zeros(cls, width: int, height: int) -> "BinaryMask":
        return cls(width, height, np.zeros((height, width), dtype=bool))

    def count(self) -> int:
        return int(self.bits.sum())

    def __eq__(self, other):
        if not isinstance(other, BinaryMask):
            return NotImplemented
        return (self.width, self.height) == (other.width, other.height) and bool(
            np.array_equal(self.bits, other.bits)
        )

    __hash__ = None


def rbb_from_params(p: BoxParams) -> RotatedBox:
    c, s = math.cos(p.theta), math.sin(p.theta)
    hw, hh = p.w / 2.0, p.h / 2.0
    offsets = ((-hw, -hh), (hw, -hh), (hw, hh), (-hw, hh))
    return RotatedBox(
        tuple(Point(p.cx + dx * c - dy * s, p.cy + dx * s + dy * c) for dx, dy in offsets)
    )


def _wrap_half_turn(theta: float) -> float:
    while theta >= math.pi / 2:
        theta -= math.pi
    while theta < -math.pi / 2:
        theta += math.pi
    return theta


def rbb_to_params(b) -> BoxParams:
    """Invert :func:`rbb_from_params`.

    The longer side is reported as ``w``; for squares the edge whose angle
    falls in [-pi/4, pi/4) wins, so the inverse is canonical.
    """
    if not isinstance(b, RotatedBox):
        b = RotatedBox(b)
    if not b.is_rectangle():
        raise GeometryError("corners do not form a rectangle")
    p0, p1, p2, _ = b.corners
    e0 = (p1.x - p0.x, p1.y - p0.y)
    e1 = (p2.x - p1.x, p2.y - p1.y)
    l0, l1 = math.hypot(*e0), math.hypot(*e1)
    a0 = _wrap_half_turn(math.atan2(e0[1], e0[0]))
    a1 = _wrap_half_turn(math.atan2(e1[1], e1[0]))
    if math.isclose(l0, l1, rel_tol=1e-9):
        w, h, theta = (l0, l1, a0) if -math.pi / 4 <= a0 < math.pi / 4 else (l1, l0, a1)
    elif l0 > l1:
        w, h, theta = l0, l1, a0
    else:
        w, h, theta = l1, l0, a1
    cx, cy = b.center
    return BoxParams(cx, cy, w, h, theta)


def polygon_area(poly) -> float:
    """Absolute shoelace area of a Polygon or RotatedBox."""
    return abs(kernels.signed_area(*_xs_ys(poly.vertices)))


def _clean_ring(xs: list[float], ys: list[float]) -> list[tuple[float, float]]:
    pts = list(zip(xs, ys))
    if not pts:
        return []
    scale = max(max(map(abs, xs)), max(map(abs, ys)), 1.0)
    eps = 1e-12 * scale
    deduped = []
    for p in pts:
        if not deduped or abs(p[0] - deduped[-1][0]) > eps or abs(p[1] - deduped[-1][1]) > eps:
            deduped.append(p)
    while len(deduped) > 1 and abs(deduped[0][0] - deduped[-1][0]) <= eps and abs(
        deduped[0][1] - deduped[-1][1]
    ) <= eps:
        deduped.pop()
    changed = True
    while changed and len(deduped) >= 3:
        changed = False
        for i in range(len(deduped)):
            a, b, c = deduped[i - 2], deduped[i - 1], deduped[i]
            cross = (b[0] - a[0]) * (c[1] - b[1]) - (b[1] - a[1]) * (c[0] - b[0])
            if abs(cross) <= eps * scale:
                del deduped[i - 1]
                changed = True
                break
    return deduped


def convex_clip(subject, clipper) -> Polygon | None:
    """Intersect ``subject`` with the convex ``clipper``; None when empty."""
    if not _is_convex(clipper.vertices):
        raise GeometryError("clipper polygon is not convex")
    sx, sy = _xs_ys(subject.vertices)
    cx, cy = _xs_ys(clipper.vertices)
    ring = _clean_ring(*kernels.clip_convex(sx, sy, cx, cy))
    if len(ring) < 3:
        return None
    try:
        return Polygon(ring)
    except GeometryError:
        return None


def rotated_iou(a: RotatedBox, b: RotatedBox) -> float:
    # fixed argument order makes the result bitwise symmetric
    if a.corners > b.corners:
        a, b = b, a
    ax, ay = _xs_ys(a.corners)
    bx, by = _xs_ys(b.corners)
    inter = kernels.intersection_area(ax, ay, bx, by)
    union = abs(kernels.signed_area(ax, ay)) + abs(kernels.signed_area(bx, by)) - inter
    if union <= 0.0:
        return 0.0
    return min(1.0, max(0.0, inter / union))


def point_in_polygon(pt, poly) -> bool:
    """Even-odd crossing test.

    A horizontal ray is cast toward +x and an edge counts when its y-span is
    half-open ``(min, max]`` around the point and the crossing lies strictly
    to the right. Points exactly on a top or left boundary are therefore
    inside, points on a bottom or right boundary outside, so polygons sharing
    an edge never both claim a pixel center on it.
    """
    px, py = float(pt[0]), float(pt[1])
    xs, ys = _xs_ys(poly.vertices)
    inside = False
    k = len(xs) - 1
    for i in range(len(xs)):
        y0, y1 = ys[k], ys[i]
        if (y0 > py) != (y1 > py):
            x0 = xs[k]
            if px < x0 + (py - y0) * (xs[i] - x0) / (y1 - y0):
                inside = not inside
        k = i
    return inside


def _raster(poly, width: int, height: int) -> np.ndarray:
    xs, ys = _xs_ys(poly.vertices)
    buf = kernels.rasterize(xs, ys, width, height)
    return np.frombuffer(bytes(buf), dtype=np.uint8).reshape(height, width).astype(bool)


def rasterize_polygon(poly, width: int, height: int) -> BinaryMask:
    if width <= 0 or height <= 0:
        raise GeometryError(f"canvas dims must be positive, got {width}x{height}")
    return BinaryMask(width, height, _raster(poly, width, height))


def rasterize_union(polys: Iterable, width: int, height: int) -> BinaryMask:
    acc = np.zeros((height, width), dtype=bool)
    for poly in polys:
        acc |= _raster(poly, width, height)
    return BinaryMask(width, height, acc)


def mask_to_hbb(mask: BinaryMask) -> HorizontalBox:
    rows, cols = np.nonzero(mask.bits)
    if rows.size == 0:
        raise GeometryError("mask has no set pixels")
    return HorizontalBox(Point(int(cols.min()), int(rows.min())), Point(int(cols.max()), int(rows.max())))


def sample_keypoints(mask: BinaryMask, n: int) -> list[Point]:
    """Pick ``n`` prompt points on set pixels.

    The first is the most interior pixel (Euclidean distance-transform
    argmax), the rest come from farthest-point sampling. Ties resolve to the
    first pixel in row-major order. When ``n`` exceeds the number of set
    pixels the sequence starts revisiting pixels.
    """
    if n < 0:
        raise GeometryError(f"n must be >= 0, got {n}")
    if n == 0:
        return []
    rows, cols = np.nonzero(mask.bits)
    if rows.size == 0:
        raise GeometryError("cannot sample keypoints from an empty mask")
    # pad so pixels on the canvas border are measured against background
    dist = ndimage.distance_transform_edt(np.pad(mask.bits, 1))[1:-1, 1:-1]
    first = int(np.argmax(dist[rows, cols]))
    chosen = [first]
    min_d2 = (cols - cols[first]) ** 2 + (rows - rows[first]) ** 2
    for _ in range(n - 1):
        nxt = int(np.argmax(min_d2))
        chosen.append(nxt)
        min_d2 = np.minimum(min_d2, (cols - cols[nxt]) ** 2 + (rows - rows[nxt]) ** 2)
    return [Point(int(cols[i]), int(rows[i])) for i in chosen]


# direction codes on the pixel-corner lattice: right, down, left, up
_STEP = ((1, 0), (0, 1), (-1, 0), (0, -1))


def _trace_outer(filled: np.ndarray) -> list[tuple[int, int]]:
    """Corner vertices of the outer boundary of one filled component.

    ``filled`` must be padded with a background border. The walk keeps the
    foreground on its right (clockwise on screen) and prefers right turns,
    which keeps diagonally touching pixels apart as 4-connectivity demands.
    """
    f = filled
    out: dict[tuple[int, int], list[int]] = {}
    ys, xs = np.nonzero(f)
    for y, x in zip(ys.tolist(), xs.tolist()):
        if not f[y - 1, x]:
            out.setdefault((x, y), []).append(0)
        if not f[y, x + 1]:
            out.setdefault((x + 1, y), []).append(1)
        if not f[y + 1, x]:
            out.setdefault((x + 1, y + 1), []).append(2)
        if not f[y, x - 1]:
            out.setdefault((x, y + 1), []).append(3)
    start = (int(xs[0]), int(ys[0]))
    corners = [start]
    v, d = start, 0
    while True:
        v = (v[0] + _STEP[d][0], v[1] + _STEP[d][1])
        if v == start:
            break
        options = out[v]
        for nd in ((d + 1) % 4, d, (d + 3) % 4):
            if nd in options:
                break
        else:
            raise GeometryError("broken boundary while tracing")
        if nd != d:
            corners.append(v)
        d = nd
    return corners


def _perp_dist(p, a, b) -> float:
    dx, dy = b[0] - a[0], b[1] - a[1]
    norm = math.hypot(dx, dy)
    if norm == 0.0:
        return math.hypot(p[0] - a[0], p[1] - a[1])
    return abs(dx * (p[1] - a[1]) - dy * (p[0] - a[0])) / norm


def _flips_pixels(path: list) -> bool:
    """True if closing ``path`` with a chord would change any pixel-center membership.

    The region between the path and its chord holds exactly the centers whose
    even-odd membership flips; centers lying on the chord itself are treated
    as flips too since their classification would become edge-dependent.
    """
    xs = [float(p[0]) for p in path]
    ys = [float(p[1]) for p in path]
    x0, y0 = math.floor(min(xs)), math.floor(min(ys))
    w = math.ceil(max(xs)) - x0
    h = math.ceil(max(ys)) - y0
    if w <= 0 or h <= 0:
        return False
    if len(path) >= 3:
        buf = kernels.rasterize([x - x0 for x in xs], [y - y0 for y in ys], w, h)
        if any(buf):
            return True
    (ax, ay), (bx, by) = (xs[0], ys[0]), (xs[-1], ys[-1])
    cx = np.arange(x0, x0 + w) + 0.5
    cy = np.arange(y0, y0 + h) + 0.5
    gx, gy = np.meshgrid(cx, cy)
    on_line = (bx - ax) * (gy - ay) - (by - ay) * (gx - ax) == 0.0
    within = (np.minimum(ax, bx) <= gx) & (gx <= np.maximum(ax, bx)) & (np.minimum(ay, by) <= gy) & (
        gy <= np.maximum(ay, by)
    )
    return bool((on_line & within).any())


def _dp_open(pts: list, eps: float, preserve_raster: bool) -> list:
    keep = [False] * len(pts)
    keep[0] = keep[-1] = True
    stack = [(0, len(pts) - 1)]
    while stack:
        s, e = stack.pop()
        best, idx = -1.0, -1
        for i in range(s + 1, e):
            d = _perp_dist(pts[i], pts[s], pts[e])
            if d > best:
                best, idx = d, i
        if idx < 0:
            continue
        if best > eps or (preserve_raster and _flips_pixels(pts[s : e + 1])):
            keep[idx] = True
            stack.append((s, idx))
            stack.append((idx, e))
    return [p for p, k in zip(pts, keep) if k]


def simplify_ring(ring: list, eps: float, preserve_raster: bool = False) -> list:
    """Douglas-Peucker on a closed ring, anchored at vertex 0 and its farthest vertex.

    With ``preserve_raster`` a chord is only accepted when it also leaves
    every pixel-center membership unchanged, so the simplified ring
    rasterizes to exactly the same mask as ``ring``.
    """
    if eps <= 0 or len(ring) <= 3:
        return list(ring)
    a = ring[0]
    far = max(range(len(ring)), key=lambda i: (ring[i][0] - a[0]) ** 2 + (ring[i][1] - a[1]) ** 2)
    first = _dp_open(ring[: far + 1], eps, preserve_raster)
    second = _dp_open(ring[far:] + [ring[0]], eps, preserve_raster)
    return first[:-1] + second[:-1]


def trace_mask_to_polygons(
    mask: BinaryMask, simplify_eps: float = 0.0, min_pixels: int = 4, preserve_raster: bool = True
) -> list[Polygon]:
    """Outer boundary polygon of every 4-connected component.

    Boundaries run along pixel corners and are simplified with
    Douglas-Peucker at ``simplify_eps``. Components below ``min_pixels`` are
    dropped and holes are ignored. Output order follows the first pixel of
    each component in row-major order.
    """
    if simplify_eps < 0:
        raise GeometryError(f"simplify_eps must be >= 0, got {simplify_eps}")
    labels, n = ndimage.label(mask.bits, structure=_CROSS)
    if n == 0:
        return []
    sizes = np.bincount(labels.ravel())
    slices = ndimage.find_objects(labels)
    polys = []
    for lab in range(1, n + 1):
        if sizes[lab] < min_pixels:
            continue
        sl = slices[lab - 1]
        comp = labels[sl] == lab
        # background is 8-connected when the foreground is 4-connected
        filled = ndimage.binary_fill_holes(comp, structure=_SQUARE)
        padded = np.pad(filled, 1)
        oy, ox = sl[0].start - 1, sl[1].start - 1
        ring = [(x + ox, y + oy) for x, y in _trace_outer(padded)]
        simplified = simplify_ring(ring, simplify_eps, preserve_raster)
        try:
            polys.append(Polygon(simplified))
        except GeometryError:
            polys.append(Polygon(ring))
    return polys


def _check_latlon(lat: float, lon: float) -> None:
    if not (math.isfinite(lat) and -90.0 <= lat <= 90.0):
        raise GeometryError(f"latitude out of range: {lat}")
    if not (math.isfinite(lon) and -180.0 <= lon <= 180.0):
        raise GeometryError(f"longitude out of range: {lon}")


def haversine_km(a: tuple[float, float], b: tuple[float, float]) -> float:
    """Great-circle distance between two (lat, lon) pairs in degrees."""
    _check_latlon(*a)
    _check_latlon(*b)
    lat1, lon1 = map(math.radians, a)
    lat2, lon2 = map(math.radians, b)
    h = math.sin((lat2 - lat1) / 2) ** 2 + math.cos(lat1) * math.cos(lat2) * math.sin((lon2 - lon1) / 2) ** 2
    return 2 * EARTH_RADIUS_KM * math.asin(min(1.0, math.sqrt(h)))
