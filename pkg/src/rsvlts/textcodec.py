"""Text protocol for task-tagged instructions and set-of-points answers.

Wire grammar (whitespace between tokens is free when parsing; the
serializer emits exactly the spacing shown)::

    point      := "(" number ", " number ")"
    point_set  := "{" [ point { ", " point } ] "}"
    rbox_list  := point_set { "; " point_set }           4 points per set
    seg_prompt := target { "; " target }
    target     := "box " point_set " points " point_set  box set has 2 points
    poly_list  := point_set { "; " point_set }           first point repeated last
    geoloc     := "[" city ", (" lat ", " lon ")]"
    instruction:= "[" tag "] " prompt

An answer with zero objects is serialized as ``{}``. Numbers are integers
when integral, otherwise the shortest round-tripping decimal.
"""

from __future__ import annotations

import enum
import math
import re
from dataclasses import dataclass
from typing import Iterable, Union

from rsvlts.geom import GeometryError, HorizontalBox, Point, Polygon, RotatedBox, as_points


class ParseFailure(ValueError):
    """Text could not be read as the expected answer shape."""

    def __init__(self, message: str, text: str = "", position: int | None = None):
        where = f" at {position}" if position is not None else ""
        super().__init__(f"{message}{where}")
        self.text = text
        self.position = position


class TaskTag(str, enum.Enum):
    DETECTION = "detection"
    GROUNDING = "grounding"
    SEG = "seg"
    CHANGE = "change"
    GEOLOC = "geoloc"
    CAPTION = "caption"
    IDENTIFY = "identify"

    @property
    def token(self) -> str:
        return f"[{self.value}]"


@dataclass(frozen=True)
class CoordSpace:
    mode: str = "normalized"
    bins: int = 1000
    image_w: int | None = None
    image_h: int | None = None

    def __post_init__(self):
        if self.mode not in ("pixel", "normalized"):
            raise ValueError(f"mode must be 'pixel' or 'normalized', got {self.mode!r}")
        if self.bins < 2:
            raise ValueError(f"bins must be >= 2, got {self.bins}")
        if self.mode == "normalized" and not (self.image_w and self.image_h and self.image_w > 0 and self.image_h > 0):
            raise ValueError("normalized space needs positive image_w and image_h")

    @classmethod
    def pixel(cls, image_w: int | None = None, image_h: int | None = None) -> "CoordSpace":
        return cls("pixel", 1000, image_w, image_h)

    def canvas(self) -> tuple[int, int]:
        """Raster size in this space's units (bins or pixels)."""
        if self.mode == "normalized":
            return self.bins, self.bins
        if not (self.image_w and self.image_h):
            raise ValueError("pixel space without image dims has no canvas")
        return self.image_w, self.image_h

    def to_dict(self) -> dict:
        return {"mode": self.mode, "bins": self.bins, "image_w": self.image_w, "image_h": self.image_h}

    @classmethod
    def from_dict(cls, d: dict) -> "CoordSpace":
        return cls(d["mode"], d.get("bins", 1000), d.get("image_w"), d.get("image_h"))


# --- answer payloads -------------------------------------------------------


@dataclass(frozen=True)
class RboxList:
    boxes: tuple[RotatedBox, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "boxes", tuple(self.boxes))


@dataclass(frozen=True)
class SegTarget:
    box: HorizontalBox
    points: tuple[Point, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "points", as_points(self.points))


@dataclass(frozen=True)
class SegPrompt:
    targets: tuple[SegTarget, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "targets", tuple(self.targets))


@dataclass(frozen=True)
class PolyList:
    polygons: tuple[Polygon, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "polygons", tuple(self.polygons))


@dataclass(frozen=True)
class GeoLoc:
    city: str
    lat: float
    lon: float

    def __post_init__(self):
        if not self.city or self.city != self.city.strip() or any(c in self.city for c in "[]()\n\r"):
            raise ValueError(f"invalid city name {self.city!r}")
        if not (math.isfinite(self.lat) and -90 <= self.lat <= 90):
            raise ValueError(f"latitude out of range: {self.lat}")
        if not (math.isfinite(self.lon) and -180 <= self.lon <= 180):
            raise ValueError(f"longitude out of range: {self.lon}")


@dataclass(frozen=True)
class Caption:
    text: str

    def __post_init__(self):
        if "\n" in self.text or "\r" in self.text:
            raise ValueError("caption text must be a single line")


AnswerPayload = Union[RboxList, SegPrompt, PolyList, GeoLoc, Caption]

PAYLOAD_FOR_TAG = {
    TaskTag.DETECTION: RboxList,
    TaskTag.GROUNDING: RboxList,
    TaskTag.SEG: SegPrompt,
    TaskTag.CHANGE: PolyList,
    TaskTag.GEOLOC: GeoLoc,
    TaskTag.CAPTION: Caption,
    TaskTag.IDENTIFY: Caption,
}


def payload_items(payload) -> tuple:
    """Per-object entries of a localizing payload (boxes, targets, polygons)."""
    if isinstance(payload, RboxList):
        return payload.boxes
    if isinstance(payload, SegPrompt):
        return payload.targets
    if isinstance(payload, PolyList):
        return payload.polygons
    raise TypeError(f"{type(payload).__name__} has no per-object items")


def single_item(payload, index: int):
    """Payload of the same variant holding only object ``index``."""
    item = payload_items(payload)[index]
    return type(payload)((item,))


# --- coordinate spaces -----------------------------------------------------


def _norm(v: float, extent: int, bins: int) -> int:
    return min(max(math.floor(v * bins / extent), 0), bins - 1)


def _denorm(b: float, extent: int, bins: int) -> float:
    return (b + 0.5) * extent / bins


def normalize(points: Iterable, space: CoordSpace) -> list[Point]:
    pts = as_points(points)
    if space.mode == "pixel":
        return list(pts)
    return [Point(_norm(p.x, space.image_w, space.bins), _norm(p.y, space.image_h, space.bins)) for p in pts]


def denormalize(points: Iterable, space: CoordSpace) -> list[Point]:
    pts = as_points(points)
    if space.mode == "pixel":
        return list(pts)
    return [Point(_denorm(p.x, space.image_w, space.bins), _denorm(p.y, space.image_h, space.bins)) for p in pts]


def _map_payload(payload, fn):
    if isinstance(payload, RboxList):
        return RboxList(tuple(RotatedBox(tuple(fn(b.corners))) for b in payload.boxes))
    if isinstance(payload, SegPrompt):
        return SegPrompt(
            tuple(
                SegTarget(HorizontalBox(*fn((t.box.min, t.box.max))), tuple(fn(t.points)))
                for t in payload.targets
            )
        )
    if isinstance(payload, PolyList):
        return PolyList(tuple(Polygon(tuple(fn(p.vertices))) for p in payload.polygons))
    return payload


def normalize_payload(payload, space: CoordSpace):
    return _map_payload(payload, lambda pts: normalize(pts, space))


def denormalize_payload(payload, space: CoordSpace):
    return _map_payload(payload, lambda pts: denormalize(pts, space))


# --- point sets ------------------------------------------------------------

_NUM_RE = re.compile(r"[-+]?(?:\d+(?:\.\d*)?|\.\d+)(?:[eE][-+]?\d+)?")
_INT_RE = re.compile(r"[-+]?\d+")


def format_number(v) -> str:
    if isinstance(v, bool):
        raise ValueError(f"not a coordinate: {v!r}")
    if isinstance(v, int):
        return str(v)
    v = float(v)
    if not math.isfinite(v):
        raise ValueError(f"non-finite coordinate {v}")
    if v.is_integer() and abs(v) < 2**53:
        return str(int(v))
    return repr(v)


def _to_number(token: str):
    if _INT_RE.fullmatch(token):
        return int(token)
    return float(token)


def serialize_point_set(points: Iterable) -> str:
    parts = []
    for p in points:
        x, y = p
        parts.append(f"({format_number(x)}, {format_number(y)})")
    return "{" + ", ".join(parts) + "}"


def find_groups(text: str) -> list[tuple[int, int]]:
    """Spans ``(start, end)`` of every top-level balanced ``{...}`` group."""
    spans = []
    depth = 0
    start = 0
    for i, c in enumerate(text):
        if c == "{":
            if depth == 0:
                start = i
            depth += 1
        elif c == "}" and depth:
            depth -= 1
            if depth == 0:
                spans.append((start, i + 1))
    return spans


def _numbers(chunk: str, text: str, offset: int) -> list:
    tokens = [t for t in re.split(r"[,\s]+", chunk.strip()) if t]
    out = []
    for t in tokens:
        if not _NUM_RE.fullmatch(t):
            raise ParseFailure(f"bad coordinate {t!r}", text, offset)
        v = _to_number(t)
        if isinstance(v, float) and not math.isfinite(v):
            raise ParseFailure(f"non-finite coordinate {t!r}", text, offset)
        out.append(v)
    return out


def _parse_group(text: str, start: int, end: int) -> list[Point]:
    body = text[start + 1 : end - 1]
    base = start + 1
    coords = []
    if "(" in body or ")" in body:
        pos = 0
        for m in re.finditer(r"\(([^()]*)\)", body):
            if body[pos : m.start()].strip(" \t\r\n,"):
                raise ParseFailure("unexpected text between points", text, base + pos)
            coords.extend(_numbers(m.group(1), text, base + m.start()))
            pos = m.end()
        if body[pos:].strip(" \t\r\n,"):
            raise ParseFailure("unexpected text after points", text, base + pos)
    else:
        coords = _numbers(body, text, base)
    if len(coords) % 2:
        raise ParseFailure(f"odd coordinate count ({len(coords)})", text, start)
    return [Point(coords[i], coords[i + 1]) for i in range(0, len(coords), 2)]


def parse_point_set(text: str) -> list[Point]:
    """Points of the first balanced ``{...}`` group in ``text``."""
    spans = find_groups(text)
    if not spans:
        raise ParseFailure("no balanced point-set group found", text)
    return _parse_group(text, *spans[0])


# --- answers ---------------------------------------------------------------


def _check_space(points: Iterable[Point], space: CoordSpace | None) -> None:
    if space is None or space.mode == "pixel":
        return
    for p in points:
        for v in p:
            if not isinstance(v, int) or not 0 <= v < space.bins:
                raise ValueError(f"coordinate {v!r} is not a bin index in [0, {space.bins})")


def serialize_answer(payload, space: CoordSpace | None = None) -> str:
    if isinstance(payload, RboxList):
        for b in payload.boxes:
            _check_space(b.corners, space)
        return "; ".join(serialize_point_set(b.corners) for b in payload.boxes) or "{}"
    if isinstance(payload, SegPrompt):
        parts = []
        for t in payload.targets:
            _check_space((t.box.min, t.box.max, *t.points), space)
            parts.append(f"box {serialize_point_set((t.box.min, t.box.max))} points {serialize_point_set(t.points)}")
        return "; ".join(parts) or "{}"
    if isinstance(payload, PolyList):
        for p in payload.polygons:
            _check_space(p.vertices, space)
        return "; ".join(serialize_point_set(p.vertices + p.vertices[:1]) for p in payload.polygons) or "{}"
    if isinstance(payload, GeoLoc):
        return f"[{payload.city}, ({format_number(payload.lat)}, {format_number(payload.lon)})]"
    if isinstance(payload, Caption):
        return payload.text
    raise TypeError(f"not an answer payload: {type(payload).__name__}")


_GEO_RE = re.compile(
    r"\[\s*(?P<city>[^\[\]\n]*?)\s*,\s*\(\s*(?P<lat>" + _NUM_RE.pattern + r")\s*,\s*(?P<lon>" + _NUM_RE.pattern + r")\s*\)\s*\]"
)


def _groups_or_fail(text: str) -> list[tuple[int, int]]:
    spans = find_groups(text)
    if not spans:
        raise ParseFailure("no balanced point-set group found", text)
    return spans


def _checked(points: list[Point], text: str, start: int, space: CoordSpace | None) -> list[Point]:
    try:
        _check_space(points, space)
    except ValueError as exc:
        raise ParseFailure(str(exc), text, start) from None
    return points


def parse_answer(text: str, tag: TaskTag, space: CoordSpace | None = None):
    """Inverse of :func:`serialize_answer`, lenient about whitespace and prose."""
    tag = TaskTag(tag)
    kind = PAYLOAD_FOR_TAG[tag]
    if kind is Caption:
        return Caption(text.replace("\r", " ").replace("\n", " "))
    if kind is GeoLoc:
        m = _GEO_RE.search(text)
        if not m:
            raise ParseFailure("no [city, (lat, lon)] group found", text)
        try:
            return GeoLoc(m.group("city"), _to_number(m.group("lat")), _to_number(m.group("lon")))
        except ValueError as exc:
            raise ParseFailure(str(exc), text, m.start()) from None

    spans = _groups_or_fail(text)
    groups = [(s, _checked(_parse_group(text, s, e), text, s, space)) for s, e in spans]
    if kind is SegPrompt:
        if len(groups) == 1 and not groups[0][1]:
            return SegPrompt(())
    elif all(not pts for _, pts in groups):
        return kind(())

    try:
        if kind is RboxList:
            boxes = []
            for s, pts in groups:
                if len(pts) != 4:
                    raise ParseFailure(f"rotated box needs 4 points, got {len(pts)}", text, s)
                boxes.append(RotatedBox(tuple(pts)))
            return RboxList(tuple(boxes))
        if kind is PolyList:
            polys = []
            for s, pts in groups:
                if len(pts) >= 4 and pts[0] == pts[-1]:
                    pts = pts[:-1]
                polys.append(Polygon(tuple(pts)))
            return PolyList(tuple(polys))
        # SegPrompt: groups alternate box / points
        if len(groups) % 2:
            raise ParseFailure("segmentation answer needs box/points group pairs", text)
        targets = []
        for (s, box_pts), (_, kps) in zip(groups[::2], groups[1::2]):
            if len(box_pts) != 2:
                raise ParseFailure(f"box group needs 2 points, got {len(box_pts)}", text, s)
            targets.append(SegTarget(HorizontalBox(*box_pts), tuple(kps)))
        return SegPrompt(tuple(targets))
    except GeometryError as exc:
        raise ParseFailure(str(exc), text) from None


# --- instructions ----------------------------------------------------------

_TAG_RE = re.compile(r"\s*\[([A-Za-z_]+)\]\s*")


def build_instruction(tag: TaskTag, prompt: str) -> str:
    tag = TaskTag(tag)
    found, rest = split_instruction(prompt)
    if found is tag:
        prompt = rest
    return f"{tag.token} {prompt}"


def split_instruction(text: str) -> tuple[TaskTag | None, str]:
    m = _TAG_RE.match(text)
    if m:
        try:
            return TaskTag(m.group(1).lower()), text[m.end() :].strip()
        except ValueError:
            pass
    return None, text
