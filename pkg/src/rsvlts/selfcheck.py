"""Independent reference implementations and random generators.

The oracles here deliberately avoid the library's own geometry code paths:
box overlap is estimated by counting grid samples, rasterization is checked
pixel by pixel, and condition chains are checked against a single-pass
evaluation of the whole conjunction. :func:`run_selfcheck` runs all three.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from rsvlts.condparse import (
    Entity,
    OracleGrounder,
    SceneGraph,
    parse_conditions,
    plural,
    resolve,
)
from rsvlts.geom import (
    BinaryMask,
    BoxParams,
    GeometryError,
    Polygon,
    RotatedBox,
    rasterize_polygon,
    rasterize_union,
    rbb_from_params,
    rotated_iou,
    trace_mask_to_polygons,
)

# --- geometry oracles ------------------------------------------------------


def _inside_convex(xs: np.ndarray, ys: np.ndarray, corners) -> np.ndarray:
    pos = np.ones(xs.shape, dtype=bool)
    neg = np.ones(xs.shape, dtype=bool)
    n = len(corners)
    for k in range(n):
        (ax, ay), (bx, by) = corners[k], corners[(k + 1) % n]
        cross = (bx - ax) * (ys - ay) - (by - ay) * (xs - ax)
        pos &= cross >= 0
        neg &= cross <= 0
    return pos | neg


def grid_iou(a: RotatedBox, b: RotatedBox, n: int = 1000) -> float:
    """IoU estimated from an ``n`` x ``n`` grid of samples over both boxes."""
    pts = list(a.corners) + list(b.corners)
    x0, x1 = min(p[0] for p in pts), max(p[0] for p in pts)
    y0, y1 = min(p[1] for p in pts), max(p[1] for p in pts)
    gx = x0 + (np.arange(n) + 0.5) * (x1 - x0) / n
    gy = y0 + (np.arange(n) + 0.5) * (y1 - y0) / n
    xs, ys = np.meshgrid(gx, gy)
    ia = _inside_convex(xs, ys, a.corners)
    ib = _inside_convex(xs, ys, b.corners)
    union = np.count_nonzero(ia | ib)
    return float(np.count_nonzero(ia & ib) / union) if union else 0.0


def membership_raster(vertices, width: int, height: int) -> np.ndarray:
    """Even-odd membership of every pixel center, one pixel at a time."""
    out = np.zeros((height, width), dtype=bool)
    n = len(vertices)
    for j in range(height):
        py = j + 0.5
        for i in range(width):
            px = i + 0.5
            inside = False
            for k in range(n):
                x0, y0 = vertices[k - 1]
                x1, y1 = vertices[k]
                if (y0 > py) != (y1 > py):
                    if px < x0 + (py - y0) * (x1 - x0) / (y1 - y0):
                        inside = not inside
            out[j, i] = inside
    return out


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    union = np.count_nonzero(a | b)
    return float(np.count_nonzero(a & b) / union) if union else 1.0


# --- random generators -----------------------------------------------------


def random_box(rng: np.random.Generator, width: float = 1000.0, height: float = 1000.0) -> RotatedBox:
    while True:
        w = rng.uniform(4, width / 3)
        h = rng.uniform(4, height / 3)
        theta = rng.uniform(-math.pi / 2, math.pi / 2)
        cx = rng.uniform(0, width)
        cy = rng.uniform(0, height)
        box = rbb_from_params(BoxParams(cx, cy, max(w, h), min(w, h), theta))
        x0, y0, x1, y1 = box.bounds()
        if x0 >= 0 and y0 >= 0 and x1 <= width and y1 <= height:
            return box


def random_box_pair(rng: np.random.Generator) -> tuple[RotatedBox, RotatedBox]:
    """Mostly overlapping pairs, since disjoint pairs say little about IoU."""
    a = random_box(rng)
    if rng.random() < 0.2:
        return a, random_box(rng)
    cx, cy = a.center
    w, h = rng.uniform(10, 300, 2)
    b = rbb_from_params(
        BoxParams(cx + rng.normal(0, 40), cy + rng.normal(0, 40), max(w, h), min(w, h), rng.uniform(-math.pi / 2, math.pi / 2))
    )
    return a, b


def random_polygon(rng: np.random.Generator, width: int, height: int) -> Polygon:
    """Simple star-shaped polygon inside a ``width`` x ``height`` canvas."""
    while True:
        n = int(rng.integers(3, 12))
        angles = np.sort(rng.uniform(0, 2 * math.pi, n))
        cx, cy = rng.uniform(width * 0.3, width * 0.7), rng.uniform(height * 0.3, height * 0.7)
        r = rng.uniform(0.1, 0.45, n) * min(width, height)
        pts = [(float(cx + ri * math.cos(t)), float(cy + ri * math.sin(t))) for ri, t in zip(r, angles)]
        if rng.random() < 0.3:
            pts = [(round(x), round(y)) for x, y in pts]
        try:
            return Polygon(tuple(pts))
        except GeometryError:
            continue


def random_blob(rng: np.random.Generator, size: int = 48, min_pixels: int = 16) -> np.ndarray:
    """Hole-free 4-connected blob from thresholded smooth noise."""
    while True:
        noise = ndimage.gaussian_filter(rng.normal(size=(size, size)), sigma=rng.uniform(1.5, 4.0))
        mask = noise > rng.uniform(0.0, 0.6) * noise.std()
        mask[0, :] = mask[-1, :] = mask[:, 0] = mask[:, -1] = False
        labels, n = ndimage.label(mask)
        if n == 0:
            continue
        sizes = ndimage.sum(mask, labels, range(1, n + 1))
        blob = labels == (int(np.argmax(sizes)) + 1)
        blob = ndimage.binary_fill_holes(blob, structure=np.ones((3, 3)))
        if blob.sum() >= min_pixels:
            return blob


CATEGORIES = ("plane", "ship", "car", "storage tank", "building")
REGIONS = ("river", "road", "bridge", "lake", "harbor")
COLORS = ("red", "white", "blue", "gray")
SIZES = ("large", "small")


def random_scene(rng: np.random.Generator) -> SceneGraph:
    width = int(rng.integers(200, 1200))
    height = int(rng.integers(200, 1200))
    ents = []
    eid = 0
    for region in rng.choice(REGIONS, size=int(rng.integers(1, 4)), replace=False):
        ents.append(Entity(eid, str(region), random_box(rng, width, height), {}, str(region)))
        eid += 1
    for _ in range(int(rng.integers(3, 16))):
        attrs = {}
        if rng.random() < 0.8:
            attrs["color"] = str(rng.choice(COLORS))
        if rng.random() < 0.8:
            attrs["size"] = str(rng.choice(SIZES))
        ents.append(Entity(eid, str(rng.choice(CATEGORIES)), random_box(rng, width, height), attrs))
        eid += 1
    order = rng.permutation(len(ents))
    north = float(rng.choice([0.0, 90.0, 180.0, -45.0, rng.uniform(-180, 180)]))
    return SceneGraph(width, height, tuple(ents[i] for i in order), north)


@dataclass(frozen=True)
class Query:
    """Structured conditions behind a generated instruction."""

    category: str
    colors: tuple[str, ...]
    sizes: tuple[str, ...]
    relations: tuple[tuple[str, str], ...]
    superlative: tuple[str, ...] | None
    text: str


_REL_TEXT = {
    "east_of": ("on the east bank of the {r}", "east of the {r}", "to the east of the {r}", "on the eastern side of the {r}"),
    "west_of": ("on the west bank of the {r}", "west of the {r}", "to the west of the {r}", "on the western side of the {r}"),
    "north_of": ("north of the {r}", "to the north of the {r}", "on the northern side of the {r}"),
    "south_of": ("south of the {r}", "to the south of the {r}", "on the southern edge of the {r}"),
    "left_of": ("to the left of the {r}", "left of the {r}", "on the left side of the {r}"),
    "right_of": ("to the right of the {r}", "right of the {r}", "on the right side of the {r}"),
    "above": ("above the {r}", "over the {r}"),
    "below": ("below the {r}", "under the {r}", "beneath the {r}"),
    "near": ("near the {r}", "next to the {r}", "close to the {r}", "beside the {r}"),
}
_GEN_HEADS = ("detect all", "find the", "locate every", "show me the", "select the", "what's the location of the", "segment all", "mark the")
_CONNECTORS = (" ", " and ", " that are ", " which is ", " located ")


def random_query(rng: np.random.Generator, scene: SceneGraph) -> Query:
    cats = sorted({e.category for e in scene.entities if e.role is None}) or list(CATEGORIES)
    refs = sorted({e.role or e.category for e in scene.entities})
    category = str(rng.choice(cats))
    colors = (str(rng.choice(COLORS)),) if rng.random() < 0.4 else ()
    sizes = (str(rng.choice(SIZES)),) if rng.random() < 0.3 else ()
    relations = tuple(
        (str(rng.choice(list(_REL_TEXT))), str(rng.choice(refs))) for _ in range(int(rng.choice([0, 1, 1, 2])))
    )
    sup = None
    roll = rng.random()
    if roll < 0.2:
        sup = ("largest",)
    elif roll < 0.35:
        sup = ("smallest",)
    elif roll < 0.5:
        sup = ("nearest", str(rng.choice(refs)))

    words = [str(rng.choice(_GEN_HEADS))]
    if sup and sup[0] != "nearest":
        words.append(str(rng.choice({"largest": ("largest", "biggest"), "smallest": ("smallest", "tiniest")}[sup[0]])))
    words += list(sizes) + list(colors)
    noun = category if rng.random() < 0.5 else plural(category)
    if sup and sup[0] == "nearest":
        words.append(f"{noun} nearest to the {sup[1]}" if rng.random() < 0.5 else f"{noun} closest to the {sup[1]}")
    else:
        words.append(noun)
    text = " ".join(words)
    for rel, ref in relations:
        text += str(rng.choice(_CONNECTORS)) + str(rng.choice(_REL_TEXT[rel])).format(r=ref)
    if rng.random() < 0.3:
        text += " in this image"
    return Query(category, colors, sizes, relations, sup, text)


# --- brute-force conjunction -----------------------------------------------


def _extent(points):
    xs = [p[0] for p in points]
    ys = [p[1] for p in points]
    return min(xs), min(ys), max(xs), max(ys)


def _center(e: Entity):
    cs = e.box.corners
    return sum(p[0] for p in cs) / 4.0, sum(p[1] for p in cs) / 4.0


def _shoelace(corners) -> float:
    s = 0.0
    for k in range(len(corners)):
        x0, y0 = corners[k - 1]
        x1, y1 = corners[k]
        s += x0 * y1 - x1 * y0
    return abs(s) / 2.0


def _gap(x, y, ext) -> float:
    dx = max(ext[0] - x, 0.0, x - ext[2])
    dy = max(ext[1] - y, 0.0, y - ext[3])
    return math.hypot(dx, dy)


def brute_force(scene: SceneGraph, q: Query, near_fraction: float = 0.1) -> set[int]:
    """Entity ids satisfying every condition of ``q``, evaluated in one pass."""
    phi = math.radians(scene.north_angle)

    def proj(x, y):
        return x * math.cos(phi) + y * math.sin(phi), x * math.sin(phi) - y * math.cos(phi)

    diag = math.hypot(scene.width, scene.height)
    survivors = []
    for e in scene.entities:
        if e.category != q.category:
            continue
        if any(e.attributes.get("color") != c for c in q.colors):
            continue
        if any(e.attributes.get("size") != s for s in q.sizes):
            continue
        cx, cy = _center(e)
        ok = True
        for rel, ref in q.relations:
            pts = [p for r in scene.entities if r.category == ref or r.role == ref for p in r.box.corners]
            if not pts:
                ok = False
                break
            if rel in ("east_of", "west_of", "north_of", "south_of"):
                mapped = [proj(*p) for p in pts]
                me, mn = proj(cx, cy)
                ok = {
                    "east_of": me > max(m[0] for m in mapped),
                    "west_of": me < min(m[0] for m in mapped),
                    "north_of": mn > max(m[1] for m in mapped),
                    "south_of": mn < min(m[1] for m in mapped),
                }[rel]
            else:
                ext = _extent(pts)
                ok = {
                    "left_of": cx < ext[0],
                    "right_of": cx > ext[2],
                    "above": cy < ext[1],
                    "below": cy > ext[3],
                    "near": _gap(cx, cy, ext) <= near_fraction * diag,
                }[rel]
            if not ok:
                break
        if ok:
            survivors.append(e)
    if q.superlative is None or not survivors:
        return {e.id for e in survivors}
    if q.superlative[0] == "nearest":
        pts = [p for r in scene.entities if r.category == q.superlative[1] or r.role == q.superlative[1] for p in r.box.corners]
        if not pts:
            return set()
        ext = _extent(pts)
        best = min(survivors, key=lambda e: (_gap(*_center(e), ext), e.id))
    elif q.superlative[0] == "largest":
        best = min(survivors, key=lambda e: (-_shoelace(e.box.corners), e.id))
    else:
        best = min(survivors, key=lambda e: (_shoelace(e.box.corners), e.id))
    return {best.id}


# --- runner ----------------------------------------------------------------


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float


def check_iou(n_pairs: int = 200, seed: int = 0, tol: float = 1e-2, grid: int = 1000) -> CheckResult:
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_pairs):
        a, b = random_box_pair(rng)
        worst = max(worst, abs(rotated_iou(a, b) - grid_iou(a, b, grid)))
    return CheckResult("rotated_iou vs grid count", worst <= tol, f"max |diff| = {worst:.2e} over {n_pairs} pairs", time.perf_counter() - t0)


def check_raster(n_polys: int = 100, seed: int = 0) -> CheckResult:
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    bad = 0
    for _ in range(n_polys):
        w, h = int(rng.integers(8, 48)), int(rng.integers(8, 48))
        poly = random_polygon(rng, w, h)
        if not np.array_equal(rasterize_polygon(poly, w, h).bits, membership_raster(poly.vertices, w, h)):
            bad += 1
    return CheckResult("rasterize vs pixel membership", bad == 0, f"{bad} of {n_polys} polygons differ", time.perf_counter() - t0)


def check_trace(n_blobs: int = 100, seed: int = 0, eps: float = 1.0, min_iou: float = 0.95) -> CheckResult:
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    worst = 1.0
    for _ in range(n_blobs):
        blob = random_blob(rng)
        h, w = blob.shape
        polys = trace_mask_to_polygons(BinaryMask.from_array(blob), simplify_eps=eps)
        worst = min(worst, mask_iou(rasterize_union(polys, w, h).bits, blob))
    return CheckResult("trace then rasterize", worst >= min_iou, f"min IoU = {worst:.4f} over {n_blobs} blobs", time.perf_counter() - t0)


def check_resolve(n_scenes: int = 1000, seed: int = 0) -> CheckResult:
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    mismatches = 0
    for _ in range(n_scenes):
        scene = random_scene(rng)
        q = random_query(rng, scene)
        res = resolve(parse_conditions(q.text), OracleGrounder(scene))
        if set(res.ids) != brute_force(scene, q):
            mismatches += 1
    return CheckResult(
        "resolve vs brute-force conjunction", mismatches == 0, f"{mismatches} of {n_scenes} scenes differ", time.perf_counter() - t0
    )


def run_selfcheck(scale: float = 1.0, seed: int = 0) -> list[CheckResult]:
    s = max(scale, 0.01)
    return [
        check_iou(max(1, int(200 * s)), seed),
        check_raster(max(1, int(100 * s)), seed),
        check_trace(max(1, int(100 * s)), seed),
        check_resolve(max(1, int(1000 * s)), seed),
    ]


# --- random records ----------------------------------------------------------


def _quantized_box(rng: np.random.Generator, bins: int) -> RotatedBox:
    while True:
        b = random_box(rng, bins - 1, bins - 1)
        try:
            return RotatedBox(tuple((int(round(x)), int(round(y))) for x, y in b.corners))
        except GeometryError:
            continue


def random_records(rng: np.random.Generator, n: int, bins: int = 1000) -> list:
    """Mixed-task corpus of ``n`` valid records in normalized space."""
    from rsvlts.convert import InstructionRecord
    from rsvlts.textcodec import Caption, CoordSpace, GeoLoc, PolyList, RboxList, SegPrompt, SegTarget
    from rsvlts.geom import HorizontalBox

    kinds = ("detection", "grounding", "seg", "change", "geoloc", "caption")
    out = []
    for i in range(n):
        kind = kinds[i % len(kinds)]
        w, h = int(rng.integers(64, 4096)), int(rng.integers(64, 4096))
        space = CoordSpace("normalized", bins, w, h)
        scene = random_scene(rng)
        prompt = random_query(rng, scene).text
        rid = f"r{i:05d}"
        if kind in ("detection", "grounding"):
            k = int(rng.integers(0 if kind == "detection" else 1, 5))
            ans = RboxList(tuple(_quantized_box(rng, bins) for _ in range(k)))
            rec = InstructionRecord(rid, kind, ("a.png",), prompt, ans, space)
        elif kind == "seg":
            targets = []
            for _ in range(int(rng.integers(1, 4))):
                x0, y0 = (int(v) for v in rng.integers(0, bins - 50, 2))
                x1, y1 = x0 + int(rng.integers(1, 50)), y0 + int(rng.integers(1, 50))
                pts = tuple((int(rng.integers(x0, x1 + 1)), int(rng.integers(y0, y1 + 1))) for _ in range(3))
                targets.append(SegTarget(HorizontalBox((x0, y0), (x1, y1)), pts))
            rec = InstructionRecord(rid, kind, ("a.png",), prompt, SegPrompt(tuple(targets)), space)
        elif kind == "change":
            polys = []
            while len(polys) < int(rng.integers(1, 4)):
                p = random_polygon(rng, bins - 1, bins - 1)
                try:
                    polys.append(Polygon(tuple((min(max(int(round(x)), 0), bins - 1), min(max(int(round(y)), 0), bins - 1)) for x, y in p.vertices)))
                except GeometryError:
                    continue
            rec = InstructionRecord(rid, kind, ("a.png", "b.png"), "Outline every changed region between the two images.", PolyList(tuple(polys)), space)
        elif kind == "geoloc":
            ans = GeoLoc(str(rng.choice(["Hangzhou", "Paris", "Nairobi", "Lima"])), round(float(rng.uniform(-90, 90)), 4), round(float(rng.uniform(-180, 180)), 4))
            rec = InstructionRecord(rid, kind, ("a.png",), "Where was this image taken?", ans, space)
        else:
            rec = InstructionRecord(rid, kind, ("a.png",), "Describe this image.", Caption(f"Scene {i} with {scene.entities[0].category}s."), space)
        out.append(rec)
    return out
