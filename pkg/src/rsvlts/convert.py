"""Raw annotations to instruction records, and segmenter prompt files.

Scene annotations are read as JSON Lines, one scene per line::

    {"id": "s1", "image": "img/s1.png", "width": 800, "height": 600,
     "north_angle": 0, "caption": "optional scene caption",
     "objects": [{"id": 0, "category": "plane",
                  "corners": [[x, y], [x, y], [x, y], [x, y]],   # or "params": [cx, cy, w, h, theta]
                  "mask": "masks/s1_0.pbm",                      # optional, P4/P5, full image size
                  "attributes": {"color": "red"}, "role": null,
                  "expressions": ["the red plane"]}]}

Bi-temporal change pairs: ``{"id", "image_a", "image_b", "mask", "caption"}``.
Geotagged images: ``{"id", "image", "city", "lat", "lon"}``.

Records are written as JSON Lines with ``"schema": "rsvlts/1"``; see
:meth:`InstructionRecord.to_json` for the field list.
"""

from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

from rsvlts.condparse import Entity, SceneGraph, plural
from rsvlts.geom import (
    BinaryMask,
    BoxParams,
    GeometryError,
    HorizontalBox,
    Point,
    Polygon,
    RotatedBox,
    mask_to_hbb,
    rbb_from_params,
    sample_keypoints,
    trace_mask_to_polygons,
)
from rsvlts.maskio import read_mask
from rsvlts.textcodec import (
    PAYLOAD_FOR_TAG,
    Caption,
    CoordSpace,
    GeoLoc,
    PolyList,
    RboxList,
    SegPrompt,
    SegTarget,
    TaskTag,
    build_instruction,
    denormalize,
    normalize,
    parse_answer,
    serialize_answer,
)

log = logging.getLogger(__name__)

SCHEMA = "rsvlts/1"


class RecordError(ValueError):
    pass


@dataclass(frozen=True)
class InstructionRecord:
    id: str
    tag: TaskTag
    images: tuple[str, ...]
    prompt: str
    answer: object
    space: CoordSpace
    meta: dict = field(default_factory=dict, hash=False)

    def __post_init__(self):
        object.__setattr__(self, "tag", TaskTag(self.tag))
        object.__setattr__(self, "images", tuple(self.images))

    @property
    def instruction(self) -> str:
        return build_instruction(self.tag, self.prompt)

    @property
    def answer_text(self) -> str:
        return serialize_answer(self.answer, self.space)

    def to_dict(self) -> dict:
        return {
            "schema": SCHEMA,
            "id": self.id,
            "tag": self.tag.value,
            "images": list(self.images),
            "prompt": self.prompt,
            "instruction": self.instruction,
            "answer": self.answer_text,
            "space": self.space.to_dict(),
            "meta": self.meta,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict, lenient: bool = False) -> "InstructionRecord":
        """Build from the JSON form. ``lenient`` keeps an unparseable answer as raw text."""
        if d.get("schema") != SCHEMA:
            raise RecordError(f"record {d.get('id')!r}: schema must be {SCHEMA!r}, got {d.get('schema')!r}")
        space = CoordSpace.from_dict(d["space"])
        tag = TaskTag(d["tag"])
        text = d["answer"]
        if lenient:
            from rsvlts.textcodec import ParseFailure

            try:
                answer = parse_answer(text, tag, space)
            except ParseFailure:
                answer = text
        else:
            answer = parse_answer(text, tag, space)
        return cls(d["id"], tag, tuple(d["images"]), d["prompt"], answer, space, dict(d.get("meta", {})))

    @classmethod
    def from_json(cls, line: str, lenient: bool = False) -> "InstructionRecord":
        return cls.from_dict(json.loads(line), lenient)


def validate_record(rec: InstructionRecord) -> list[str]:
    """Problems with ``rec``; empty when the record is well formed."""
    problems = []
    want_images = 2 if rec.tag is TaskTag.CHANGE else 1
    if len(rec.images) != want_images:
        problems.append(f"{rec.tag.value} record needs {want_images} image(s), has {len(rec.images)}")
    kind = PAYLOAD_FOR_TAG[rec.tag]
    if not isinstance(rec.answer, kind):
        problems.append(f"{rec.tag.value} record needs a {kind.__name__} answer, has {type(rec.answer).__name__}")
    else:
        try:
            text = rec.answer_text
            if parse_answer(text, rec.tag, rec.space) != rec.answer:
                problems.append("answer does not survive a text roundtrip")
        except ValueError as exc:
            problems.append(f"answer does not serialize: {exc}")
    if isinstance(rec.answer, SegPrompt):
        for t in rec.answer.targets:
            if not all(t.box.contains(p) for p in t.points):
                problems.append("keypoint outside its box")
    if not rec.id:
        problems.append("empty id")
    return problems


def read_records(path, lenient: bool = False) -> list[InstructionRecord]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if line.strip():
                try:
                    out.append(InstructionRecord.from_json(line, lenient))
                except (KeyError, ValueError) as exc:
                    raise RecordError(f"{path}:{n}: {exc}") from exc
    return out


def write_records(records: Iterable[InstructionRecord], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")


def validate_file(path) -> list[str]:
    problems = []
    seen = set()
    for n, rec in enumerate(read_records(path), 1):
        if rec.id in seen:
            problems.append(f"line {n}: duplicate id {rec.id!r}")
        seen.add(rec.id)
        problems.extend(f"line {n} ({rec.id}): {p}" for p in validate_record(rec))
    return problems


# --- scene annotations -----------------------------------------------------


@dataclass(frozen=True)
class AnnotatedObject:
    id: int
    category: str
    box: RotatedBox | None = None
    mask: BinaryMask | None = None
    attributes: dict = field(default_factory=dict, hash=False)
    role: str | None = None
    expressions: tuple[str, ...] = ()

    def __post_init__(self):
        if self.box is None and self.mask is None:
            raise RecordError(f"object {self.id} has neither a box nor a mask")


@dataclass(frozen=True)
class SceneAnnotation:
    id: str
    image: str
    width: int
    height: int
    objects: tuple[AnnotatedObject, ...]
    caption: str | None = None
    north_angle: float = 0.0

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise RecordError(f"scene {self.id}: dims must be positive")
        for o in self.objects:
            if o.mask is not None and (o.mask.width, o.mask.height) != (self.width, self.height):
                raise RecordError(f"scene {self.id} object {o.id}: mask size differs from the image")

    def categories(self) -> list[str]:
        return sorted({o.category for o in self.objects})

    def scene_graph(self) -> SceneGraph:
        ents = tuple(
            Entity(o.id, o.category, o.box, dict(o.attributes), o.role) for o in self.objects if o.box is not None
        )
        return SceneGraph(self.width, self.height, ents, self.north_angle)


def scene_from_dict(d: dict, base: Path | None = None) -> SceneAnnotation:
    objs = []
    for raw in d.get("objects", []):
        box = None
        if "corners" in raw:
            box = RotatedBox(tuple(tuple(p) for p in raw["corners"]))
        elif "params" in raw:
            box = rbb_from_params(BoxParams(*raw["params"]))
        mask = None
        if raw.get("mask"):
            mp = Path(raw["mask"])
            mask = read_mask(base / mp if base is not None and not mp.is_absolute() else mp)
        objs.append(
            AnnotatedObject(
                int(raw["id"]),
                raw["category"],
                box,
                mask,
                dict(raw.get("attributes", {})),
                raw.get("role"),
                tuple(raw.get("expressions", ())),
            )
        )
    return SceneAnnotation(
        str(d["id"]), d["image"], int(d["width"]), int(d["height"]), tuple(objs),
        d.get("caption"), float(d.get("north_angle", 0.0)),
    )


def read_jsonl(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def read_scenes(path) -> list[SceneAnnotation]:
    base = Path(path).parent
    return [scene_from_dict(d, base) for d in read_jsonl(path)]


# --- templates -------------------------------------------------------------

TEMPLATES: dict[TaskTag, tuple[str, ...]] = {
    TaskTag.DETECTION: (
        "Detect all {plural} in this image.",
        "Find every {singular} in the image.",
        "Locate all {plural}.",
        "Mark each {singular} in this image.",
        "Where are the {plural} in this image?",
        "Show me all {plural}.",
    ),
    TaskTag.SEG: (
        "Segment all {plural} in this image.",
        "Outline every {singular}.",
        "Give me the {plural} in this image.",
        "Highlight each {singular}.",
        "Segment every {singular} in the picture.",
    ),
    TaskTag.CHANGE: (
        "Outline every changed region between the two images.",
        "Mark all changed regions between the two images.",
        "Find each changed area between the two images.",
        "Highlight the changed regions between the two images.",
        "Locate all changed regions between the two images.",
    ),
    TaskTag.GEOLOC: (
        "Where was this image taken?",
        "Which city does this image show, and at what coordinates?",
        "Give the city and coordinates of this image.",
        "Geolocate this image.",
        "Name the city and the latitude and longitude of this scene.",
    ),
    TaskTag.CAPTION: (
        "Describe this image.",
        "Write a short caption for this image.",
        "What does this image show?",
        "Summarize the scene in one sentence.",
        "Give a brief description of this image.",
    ),
}


def pick(bank: Sequence[str], key: str, seed: int = 0) -> str:
    """Deterministic choice from ``bank`` keyed by record id."""
    h = int.from_bytes(hashlib.sha256(f"{seed}:{key}".encode("utf-8")).digest()[:8], "big")
    return bank[h % len(bank)]


def _prompt(tag: TaskTag, key: str, seed: int, templates=None, **kw) -> str:
    bank = (templates or TEMPLATES)[tag]
    return pick(bank, key, seed).format(**kw)


# --- conversions -----------------------------------------------------------


def _space_for(space: CoordSpace, width: int, height: int) -> CoordSpace:
    if space.mode == "normalized":
        return CoordSpace("normalized", space.bins, width, height)
    return CoordSpace.pixel(width, height)


def _quantize_box(box: RotatedBox, space: CoordSpace) -> RotatedBox:
    return RotatedBox(tuple(normalize(box.corners, space)))


def _quantize_polygon(poly: Polygon, space: CoordSpace) -> Polygon | None:
    pts = normalize(poly.vertices, space)
    ring = [p for i, p in enumerate(pts) if p != pts[i - 1]] if len(set(pts)) > 1 else []
    try:
        return Polygon(tuple(ring))
    except GeometryError:
        return None


def convert_detection(
    sa: SceneAnnotation,
    category: str,
    space: CoordSpace | None = None,
    seed: int = 0,
    templates=None,
) -> InstructionRecord:
    space = _space_for(space or CoordSpace("normalized", 1000, 1, 1), sa.width, sa.height)
    rid = f"{sa.id}:detection:{category}"
    boxes, dropped = [], []
    for o in sa.objects:
        if o.category != category or o.box is None:
            continue
        try:
            boxes.append(_quantize_box(o.box, space))
        except GeometryError as exc:
            log.warning("%s: dropping object %s after quantization: %s", rid, o.id, exc)
            dropped.append(o.id)
    meta = {"scene": sa.id, "category": category, "object_ids": [o.id for o in sa.objects if o.category == category and o.box is not None and o.id not in dropped]}
    if dropped:
        meta["dropped"] = dropped
    prompt = _prompt(TaskTag.DETECTION, rid, seed, templates, singular=category, plural=plural(category))
    return InstructionRecord(rid, TaskTag.DETECTION, (sa.image,), prompt, RboxList(tuple(boxes)), space, meta)


def convert_grounding(sa: SceneAnnotation, space: CoordSpace | None = None) -> list[InstructionRecord]:
    """One record per referring expression attached to an object."""
    space = _space_for(space or CoordSpace("normalized", 1000, 1, 1), sa.width, sa.height)
    out = []
    for o in sa.objects:
        if o.box is None:
            continue
        for k, expr in enumerate(o.expressions):
            rid = f"{sa.id}:grounding:{o.id}:{k}"
            try:
                box = _quantize_box(o.box, space)
            except GeometryError as exc:
                log.warning("%s: skipped, box degenerates after quantization: %s", rid, exc)
                continue
            meta = {"scene": sa.id, "category": o.category, "object_ids": [o.id]}
            out.append(InstructionRecord(rid, TaskTag.GROUNDING, (sa.image,), expr, RboxList((box,)), space, meta))
    return out


def convert_segmentation(
    sa: SceneAnnotation,
    category: str,
    n_keypoints: int = 3,
    space: CoordSpace | None = None,
    seed: int = 0,
    templates=None,
) -> InstructionRecord:
    space = _space_for(space or CoordSpace("normalized", 1000, 1, 1), sa.width, sa.height)
    rid = f"{sa.id}:seg:{category}"
    targets, ids = [], []
    for o in sa.objects:
        if o.category != category:
            continue
        if o.mask is None:
            raise RecordError(f"scene {sa.id}: object {o.id} ({category}) has no mask")
        if o.mask.count() == 0:
            log.warning("%s: object %s has an empty mask, skipped", rid, o.id)
            continue
        hbb = mask_to_hbb(o.mask)
        kps = sample_keypoints(o.mask, n_keypoints)
        lo, hi = normalize((hbb.min, hbb.max), space)
        targets.append(SegTarget(HorizontalBox(lo, hi), tuple(normalize(kps, space))))
        ids.append(o.id)
    prompt = _prompt(TaskTag.SEG, rid, seed, templates, singular=category, plural=plural(category))
    meta = {"scene": sa.id, "category": category, "object_ids": ids}
    return InstructionRecord(rid, TaskTag.SEG, (sa.image,), prompt, SegPrompt(tuple(targets)), space, meta)


def convert_change(
    mask: BinaryMask,
    image_a: str,
    image_b: str,
    caption: str | None = None,
    eps: float = 1.0,
    space: CoordSpace | None = None,
    record_id: str = "change",
    seed: int = 0,
    templates=None,
    min_pixels: int = 4,
) -> InstructionRecord:
    space = _space_for(space or CoordSpace("normalized", 1000, 1, 1), mask.width, mask.height)
    polys = []
    for p in trace_mask_to_polygons(mask, simplify_eps=eps, min_pixels=min_pixels):
        q = _quantize_polygon(p, space)
        if q is None:
            log.warning("%s: polygon collapsed after quantization, dropped", record_id)
            continue
        polys.append(q)
    prompt = caption.strip() if caption and caption.strip() else _prompt(TaskTag.CHANGE, record_id, seed, templates)
    meta = {"mask_pixels": mask.count()}
    return InstructionRecord(record_id, TaskTag.CHANGE, (image_a, image_b), prompt, PolyList(tuple(polys)), space, meta)


def convert_geoloc(
    image: str, city: str, lat: float, lon: float, record_id: str = "geoloc", seed: int = 0, templates=None
) -> InstructionRecord:
    answer = GeoLoc(city, lat, lon)
    prompt = _prompt(TaskTag.GEOLOC, record_id, seed, templates)
    return InstructionRecord(record_id, TaskTag.GEOLOC, (image,), prompt, answer, CoordSpace.pixel(), {})


def convert_caption(sa: SceneAnnotation, seed: int = 0, templates=None) -> InstructionRecord | None:
    if not sa.caption:
        return None
    rid = f"{sa.id}:caption"
    prompt = _prompt(TaskTag.CAPTION, rid, seed, templates)
    return InstructionRecord(rid, TaskTag.CAPTION, (sa.image,), prompt, Caption(sa.caption), CoordSpace.pixel(), {"scene": sa.id})


# --- segmenter prompts -----------------------------------------------------


def segmenter_prompt(rec: InstructionRecord) -> dict:
    if rec.tag is not TaskTag.SEG or not isinstance(rec.answer, SegPrompt):
        raise RecordError(f"record {rec.id}: segmenter prompts need seg records, got {rec.tag.value}")
    targets = []
    for t in rec.answer.targets:
        (x1, y1), (x2, y2) = denormalize((t.box.min, t.box.max), rec.space)
        pts = denormalize(t.points, rec.space)
        targets.append(
            {"box": [x1, y1, x2, y2], "points": [[p.x, p.y] for p in pts], "labels": [1] * len(pts)}
        )
    return {"id": rec.id, "image": rec.images[0], "targets": targets}


def emit_segmenter_prompts(records: Iterable[InstructionRecord], path) -> int:
    lines = [json.dumps(segmenter_prompt(r), sort_keys=True) for r in records]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for line in lines:
            fh.write(line + "\n")
    return len(lines)


# --- batch -----------------------------------------------------------------


def map_ordered(fn: Callable, items: Sequence, workers: int = 1) -> list:
    """``map`` over ``items`` in input order, optionally across processes."""
    if workers <= 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


TASKS = ("detection", "grounding", "seg", "change", "geoloc", "caption")


@dataclass(frozen=True)
class ConvertOptions:
    task: str
    space: CoordSpace = CoordSpace("normalized", 1000, 1, 1)
    n_keypoints: int = 3
    eps: float = 1.0
    seed: int = 0


def _convert_one(args) -> list[InstructionRecord]:
    d, base, opts = args
    tag = opts.task
    if tag == "change":
        mp = Path(d["mask"])
        mask = read_mask(base / mp if not mp.is_absolute() else mp)
        return [
            convert_change(
                mask, d["image_a"], d["image_b"], d.get("caption"), opts.eps, opts.space, str(d["id"]), opts.seed
            )
        ]
    if tag == "geoloc":
        return [convert_geoloc(d["image"], d["city"], d["lat"], d["lon"], str(d["id"]), opts.seed)]
    sa = scene_from_dict(d, base)
    if tag == "detection":
        return [convert_detection(sa, c, opts.space, opts.seed) for c in sa.categories()]
    if tag == "seg":
        cats = sorted({o.category for o in sa.objects if o.mask is not None})
        return [convert_segmentation(sa, c, opts.n_keypoints, opts.space, opts.seed) for c in cats]
    if tag == "grounding":
        return convert_grounding(sa, opts.space)
    if tag == "caption":
        rec = convert_caption(sa, opts.seed)
        return [rec] if rec else []
    raise RecordError(f"unknown task {tag!r}; supported: {', '.join(TASKS)}")


def convert_file(path, opts: ConvertOptions, workers: int = 1) -> list[InstructionRecord]:
    base = Path(path).parent
    rows = read_jsonl(path)
    chunks = map_ordered(_convert_one, [(d, base, opts) for d in rows], workers)
    return [r for chunk in chunks for r in chunk]


__all__ = [
    "InstructionRecord", "SceneAnnotation", "AnnotatedObject", "RecordError", "ConvertOptions", "TEMPLATES",
    "convert_detection", "convert_grounding", "convert_segmentation", "convert_change", "convert_geoloc",
    "convert_caption", "emit_segmenter_prompts", "segmenter_prompt", "validate_record", "validate_file",
    "read_records", "write_records", "read_scenes", "scene_from_dict", "convert_file", "map_ordered", "pick",
    "Point",
]
