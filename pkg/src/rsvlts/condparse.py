"""Multi-condition instruction decomposition and iterative resolution.

An instruction such as ``"detect all planes on the east bank of the river"``
is split into single-condition steps (select the category, then filter by
the spatial relation). :func:`resolve` executes the steps in order against a
:class:`Grounder`, each step narrowing the candidates left by the previous
one.

Grammar accepted by :func:`parse_conditions`::

    instruction := [polite] [head] {det} {modifier} noun+ {condition} [scope]
    head        := detect | find | locate | segment | show [me] | mark | ...
                 | what's the location of | where is | where are
    modifier    := superlative | size | color
    condition   := [that|which] [is|are] [located|situated]
                   ( [on|to|in|at] [the] direction [bank|side|part|edge] of [the] noun+
                   | above|below|under|over|near|beside [to] [the] noun+
                   | next|close to [the] noun+
                   | to|from [the] noun+          (argument of "nearest")
                   ) [and]
    scope       := in|of this|the image|picture|scene | between the two images

Execution order is always category, attributes, spatial relations, then
superlatives.
"""

from __future__ import annotations

import json
import logging
import math
import re
import threading
import time
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from typing import Protocol

from rsvlts.geom import BoxParams, GeometryError, Point, RotatedBox, polygon_area, rbb_from_params, rotated_iou
from rsvlts.textcodec import CoordSpace, ParseFailure, RboxList, TaskTag, parse_answer, serialize_point_set

log = logging.getLogger(__name__)

GEOGRAPHIC_RELATIONS = ("east_of", "west_of", "north_of", "south_of")
IMAGE_RELATIONS = ("left_of", "right_of", "above", "below")
RELATIONS = GEOGRAPHIC_RELATIONS + IMAGE_RELATIONS + ("near",)
SUPERLATIVES = ("largest", "smallest", "nearest")
ATTRIBUTE_KEYS = ("color", "size")

COLORS = {
    "red", "green", "blue", "white", "black", "gray", "yellow", "orange",
    "purple", "brown", "silver", "pink",
}
_COLOR_ALIASES = {"grey": "gray"}
_SIZE_WORDS = {"large": "large", "big": "large", "huge": "large", "small": "small", "tiny": "small", "little": "small"}
_SUPERLATIVE_WORDS = {
    "largest": "largest", "biggest": "largest",
    "smallest": "smallest", "tiniest": "smallest",
    "nearest": "nearest", "closest": "nearest",
}
_DIRECTION_WORDS = {
    "east": "east_of", "eastern": "east_of",
    "west": "west_of", "western": "west_of",
    "north": "north_of", "northern": "north_of",
    "south": "south_of", "southern": "south_of",
    "left": "left_of", "right": "right_of",
}
_DIRECT_RELATIONS = {
    "above": "above", "over": "above",
    "below": "below", "under": "below", "beneath": "below",
    "near": "near", "beside": "near",
}
_HEADS = [
    ("what's", "the", "location", "of"),
    ("what", "is", "the", "location", "of"),
    ("where", "is"),
    ("where", "are"),
    ("show", "me"),
    ("give", "me"),
    ("point", "out"),
    ("detect",), ("find",), ("locate",), ("segment",), ("show",), ("mark",),
    ("highlight",), ("identify",), ("select",), ("get",), ("outline",), ("output",),
]
_POLITE = [("please",), ("can", "you"), ("could", "you")]
_DETERMINERS = {"all", "the", "every", "each", "any", "a", "an", "some", "those", "these"}
_QUESTION_STARTS = {
    "is", "are", "does", "do", "did", "how", "what", "which", "can", "could", "was", "were",
    "has", "have", "why", "when", "who", "whose", "will", "should",
}
_FILLERS = {"that", "which", "is", "are", "located", "situated", "lying", "and", "on", "in", "at", "the", "to"}
_REGION_NOUNS = {"bank", "side", "part", "edge", "shore", "area"}
_SCOPE_SUFFIXES = [
    ("in", "this", "image"), ("in", "the", "image"), ("of", "this", "image"), ("of", "the", "image"),
    ("in", "this", "picture"), ("in", "the", "picture"), ("in", "the", "scene"), ("in", "this", "scene"),
    ("between", "the", "two", "images"), ("between", "the", "images"), ("across", "the", "two", "images"),
]
_STOP = (
    set(_DIRECTION_WORDS) | set(_DIRECT_RELATIONS) | _FILLERS
    | set(_SUPERLATIVE_WORDS)
    | {"of", "with", "from", "next", "close", "by", "along", "inside", "within", "between", "across", "who", "where"}
)


# --- types -----------------------------------------------------------------


@dataclass(frozen=True)
class SubInstruction:
    """One condition; ``args`` depend on ``kind``.

    ``select_category``: (category,); ``attribute``: (key, value);
    ``spatial_relation``: (relation, reference); ``superlative``: (metric,)
    or ("nearest", reference); ``opaque``: (instruction,).
    """

    kind: str
    args: tuple
    raw_text: str = ""

    def __str__(self):
        return f"{self.kind}({', '.join(self.args)})"

    def to_dict(self) -> dict:
        return {"kind": self.kind, "args": list(self.args), "text": self.raw_text}

    @classmethod
    def from_dict(cls, d: dict) -> "SubInstruction":
        return cls(d["kind"], tuple(d["args"]), d.get("text", ""))


def select_category(category: str, raw: str = "") -> SubInstruction:
    return SubInstruction("select_category", (category,), raw)


def attribute(key: str, value: str, raw: str = "") -> SubInstruction:
    return SubInstruction("attribute", (key, value), raw)


def spatial_relation(relation: str, reference: str, raw: str = "") -> SubInstruction:
    return SubInstruction("spatial_relation", (relation, reference), raw)


def superlative(metric: str, arg: str | None = None, raw: str = "") -> SubInstruction:
    return SubInstruction("superlative", (metric,) if arg is None else (metric, arg), raw)


@dataclass(frozen=True)
class ConditionChain:
    steps: tuple[SubInstruction, ...]

    def __post_init__(self):
        steps = tuple(self.steps)
        object.__setattr__(self, "steps", steps)
        if not steps:
            raise ValueError("a condition chain needs at least one step")
        if steps[0].kind == "opaque":
            if len(steps) != 1:
                raise ValueError("an opaque step cannot be combined with others")
        elif steps[0].kind != "select_category":
            raise ValueError("the first step must be select_category")
        elif any(s.kind in ("select_category", "opaque") for s in steps[1:]):
            raise ValueError("select_category may only appear first")

    @property
    def opaque(self) -> bool:
        return self.steps[0].kind == "opaque"

    def __len__(self):
        return len(self.steps)

    def to_dict(self) -> dict:
        return {"steps": [s.to_dict() for s in self.steps]}


@dataclass(frozen=True)
class Entity:
    id: int
    category: str
    box: RotatedBox
    attributes: dict = field(default_factory=dict, hash=False)
    role: str | None = None

    @property
    def center(self) -> tuple[float, float]:
        return self.box.center


@dataclass(frozen=True)
class SceneGraph:
    """Ground-truth scene for the oracle grounder.

    ``north_angle`` is the direction of geographic north in degrees,
    clockwise from image-up; 0 means north-up imagery.
    """

    width: int
    height: int
    entities: tuple[Entity, ...]
    north_angle: float = 0.0

    def __post_init__(self):
        ents = tuple(self.entities)
        object.__setattr__(self, "entities", ents)
        ids = [e.id for e in ents]
        if len(set(ids)) != len(ids):
            raise ValueError("entity ids must be unique")
        tol = 1e-9 * max(self.width, self.height)
        for e in ents:
            x0, y0, x1, y1 = e.box.bounds()
            if x0 < -tol or y0 < -tol or x1 > self.width + tol or y1 > self.height + tol:
                raise ValueError(f"entity {e.id} box leaves the {self.width}x{self.height} image")

    def by_id(self) -> dict[int, Entity]:
        return {e.id: e for e in self.entities}

    def to_dict(self) -> dict:
        return {
            "width": self.width,
            "height": self.height,
            "north_angle": self.north_angle,
            "entities": [
                {
                    "id": e.id,
                    "category": e.category,
                    "corners": [list(p) for p in e.box.corners],
                    "attributes": dict(e.attributes),
                    "role": e.role,
                }
                for e in self.entities
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneGraph":
        ents = []
        for raw in d["entities"]:
            if "corners" in raw:
                box = RotatedBox(tuple(tuple(p) for p in raw["corners"]))
            else:
                box = rbb_from_params(BoxParams(*raw["params"]))
            ents.append(Entity(int(raw["id"]), raw["category"], box, dict(raw.get("attributes", {})), raw.get("role")))
        return cls(int(d["width"]), int(d["height"]), tuple(ents), float(d.get("north_angle", 0.0)))


@dataclass(frozen=True)
class CandidateSet:
    entries: tuple[tuple[int, RotatedBox], ...]
    provenance: tuple[SubInstruction, ...] = ()

    def __len__(self):
        return len(self.entries)

    @property
    def ids(self) -> tuple[int, ...]:
        return tuple(i for i, _ in self.entries)

    @property
    def boxes(self) -> tuple[RotatedBox, ...]:
        return tuple(b for _, b in self.entries)


@dataclass(frozen=True)
class TraceStep:
    index: int
    step: SubInstruction
    in_count: int | None
    out_count: int
    skipped: bool = False

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "step": str(self.step),
            "text": self.step.raw_text,
            "in": self.in_count,
            "out": self.out_count,
            "skipped": self.skipped,
        }


@dataclass(frozen=True)
class Resolution:
    answer: RboxList
    ids: tuple[int, ...]
    trace: tuple[TraceStep, ...]

    def to_dict(self) -> dict:
        return {"ids": list(self.ids), "trace": [t.to_dict() for t in self.trace]}


class GroundingError(RuntimeError):
    def __init__(self, step_index: int, cause: Exception):
        super().__init__(f"step {step_index} failed: {cause}")
        self.step_index = step_index
        self.cause = cause


class MonotonicityViolation(RuntimeError):
    """A grounder returned more candidates than it was given."""


class Grounder(Protocol):
    def ground_category(self, category: str) -> CandidateSet: ...

    def filter_spatial(self, cands: CandidateSet, relation: str, reference: str) -> CandidateSet: ...

    def filter_attribute(self, cands: CandidateSet, key: str, value: str) -> CandidateSet: ...

    def rank_superlative(self, cands: CandidateSet, metric: str, arg: str | None = None) -> CandidateSet: ...


# --- parsing ---------------------------------------------------------------


def singular(word: str) -> str:
    if len(word) > 4 and word.endswith("ies"):
        return word[:-3] + "y"
    if word.endswith(("ches", "shes", "xes", "sses", "zes")):
        return word[:-2]
    if word.endswith("s") and not word.endswith(("ss", "us", "is")) and len(word) > 2:
        return word[:-1]
    return word


def plural(phrase: str) -> str:
    words = phrase.split()
    w = words[-1]
    if w.endswith("y") and len(w) > 1 and w[-2] not in "aeiou":
        w = w[:-1] + "ies"
    elif w.endswith(("s", "x", "ch", "sh", "z")):
        w = w + "es"
    else:
        w = w + "s"
    return " ".join(words[:-1] + [w])


def _noun_phrase(phrase: list[str]) -> str:
    return " ".join(phrase[:-1] + [singular(phrase[-1])])


def _tokens(text: str) -> list[str]:
    return re.findall(r"[a-z0-9]+(?:'[a-z]+)?", text.lower().replace("’", "'"))


def _starts(tokens: list[str], i: int, seq: tuple) -> bool:
    return tuple(tokens[i : i + len(seq)]) == seq


def parse_conditions(instruction: str, passthrough: bool = False) -> ConditionChain:
    """Decompose an instruction into a :class:`ConditionChain`.

    Raises :class:`ParseFailure` when no category head is recognizable or a
    condition falls outside the supported vocabulary. With ``passthrough``
    such instructions come back as a single opaque step instead.
    """
    try:
        return _parse(instruction)
    except ParseFailure:
        if passthrough:
            return ConditionChain((SubInstruction("opaque", (instruction.strip(),), instruction.strip()),))
        raise


def _parse(instruction: str) -> ConditionChain:
    toks = _tokens(instruction)
    if not toks:
        raise ParseFailure("empty instruction", instruction)
    for suffix in _SCOPE_SUFFIXES:
        for i in range(len(toks) - len(suffix), -1, -1):
            if _starts(toks, i, suffix):
                toks = toks[:i] + toks[i + len(suffix) :]
                break

    i = 0
    for polite in _POLITE:
        if _starts(toks, i, polite):
            i += len(polite)
    head_start = i
    for head in _HEADS:
        if _starts(toks, i, head):
            i += len(head)
            break
    else:
        if i < len(toks) and toks[i] in _QUESTION_STARTS:
            raise ParseFailure("question without a localizing head", instruction)
    while i < len(toks) and toks[i] in _DETERMINERS:
        i += 1

    modifiers: list[SubInstruction] = []
    while i < len(toks):
        t = toks[i]
        if t in _SUPERLATIVE_WORDS:
            modifiers.append(superlative(_SUPERLATIVE_WORDS[t], raw=t))
        elif t in _SIZE_WORDS:
            modifiers.append(attribute("size", _SIZE_WORDS[t], raw=t))
        elif t in COLORS or t in _COLOR_ALIASES:
            modifiers.append(attribute("color", _COLOR_ALIASES.get(t, t), raw=t))
        elif t in _DETERMINERS:
            pass
        else:
            break
        i += 1

    noun_start = i
    while i < len(toks) and toks[i] not in _STOP:
        i += 1
    noun = toks[noun_start:i]
    if not noun:
        raise ParseFailure("no category noun found", instruction)
    category = _noun_phrase(noun)
    head_text = " ".join(toks[head_start:i])

    spatial: list[SubInstruction] = []
    pending_nearest = [n for n, m in enumerate(modifiers) if m.args == ("nearest",)]
    while i < len(toks):
        t = toks[i]
        start = i
        if t in _DIRECTION_WORDS or t in _DIRECT_RELATIONS or (
            t in ("next", "close") and i + 1 < len(toks) and toks[i + 1] == "to"
        ):
            if t in _DIRECTION_WORDS:
                relation = _DIRECTION_WORDS[t]
                i += 1
                while i < len(toks) and toks[i] in _REGION_NOUNS:
                    i += 1
                if i < len(toks) and toks[i] in ("of", "to"):
                    i += 1
                elif not (i < len(toks) and toks[i] in ("the",)):
                    raise ParseFailure(f"expected 'of' after {t!r}", instruction)
            else:
                relation = _DIRECT_RELATIONS.get(t, "near")
                i += 2 if t in ("next", "close") else 1
                if i < len(toks) and toks[i] == "to":
                    i += 1
            ref, i = _reference(toks, i, instruction)
            # pull in a preceding "on the" / "to the" for the raw clause
            while start > 0 and toks[start - 1] in ("on", "to", "in", "at", "the"):
                start -= 1
            spatial.append(spatial_relation(relation, ref, raw=" ".join(toks[start:i])))
        elif _SUPERLATIVE_WORDS.get(t) == "nearest" and i + 1 < len(toks) and toks[i + 1] in ("to", "from"):
            ref, i = _reference(toks, i + 2, instruction)
            modifiers.append(superlative("nearest", ref, raw=f"nearest to the {ref}"))
        elif t in ("to", "from") and pending_nearest and _next_content(toks, i + 1) not in _STOP:
            ref, i = _reference(toks, i + 1, instruction)
            n = pending_nearest.pop(0)
            modifiers[n] = superlative("nearest", ref, raw=f"nearest to the {ref}")
        elif t in _FILLERS:
            i += 1
        else:
            raise ParseFailure(f"unsupported condition near {t!r}", instruction)
    if pending_nearest:
        raise ParseFailure("'nearest' needs a reference ('to the ...')", instruction)

    attrs = [m for m in modifiers if m.kind == "attribute"]
    sups = [m for m in modifiers if m.kind == "superlative"]
    steps = [select_category(category, raw=head_text)] + attrs + spatial + sups
    return ConditionChain(tuple(steps))


def _next_content(toks: list[str], i: int) -> str | None:
    while i < len(toks) and toks[i] in _DETERMINERS:
        i += 1
    return toks[i] if i < len(toks) else None


def _reference(toks: list[str], i: int, instruction: str) -> tuple[str, int]:
    while i < len(toks) and toks[i] in _DETERMINERS:
        i += 1
    start = i
    while i < len(toks) and toks[i] not in _STOP:
        i += 1
    if i == start:
        raise ParseFailure("spatial condition without a reference noun", instruction)
    return _noun_phrase(toks[start:i]), i


_RELATION_PHRASES = {
    "east_of": "on the east side of",
    "west_of": "on the west side of",
    "north_of": "to the north of",
    "south_of": "to the south of",
    "left_of": "to the left of",
    "right_of": "to the right of",
    "above": "above",
    "below": "below",
    "near": "near",
}


def describe(step: SubInstruction) -> str:
    """Canonical single-condition text for a step, as sent to a model grounder."""
    if step.kind == "select_category":
        return f"detect all {plural(step.args[0])}"
    if step.kind == "attribute":
        return f"select the {step.args[1]} ones"
    if step.kind == "spatial_relation":
        return f"select the ones {_RELATION_PHRASES.get(step.args[0], step.args[0])} the {step.args[1]}"
    if step.kind == "superlative":
        if len(step.args) > 1:
            return f"select the one nearest to the {step.args[1]}"
        return f"select the {step.args[0]} one"
    return step.args[0]


# --- resolution ------------------------------------------------------------


def resolve(chain: ConditionChain, grounder) -> Resolution:
    """Run ``chain`` step by step, feeding each step the previous candidates."""
    trace: list[TraceStep] = []
    cands: CandidateSet | None = None
    for idx, step in enumerate(chain.steps):
        if cands is not None and len(cands) == 0:
            trace.append(TraceStep(idx, step, 0, 0, skipped=True))
            continue
        before = None if cands is None else len(cands)
        try:
            if step.kind == "opaque":
                if not hasattr(grounder, "ground_text"):
                    raise ValueError("grounder cannot execute opaque instructions")
                out = grounder.ground_text(step.args[0])
            elif step.kind == "select_category":
                out = grounder.ground_category(step.args[0])
            elif step.kind == "attribute":
                out = grounder.filter_attribute(cands, *step.args)
            elif step.kind == "spatial_relation":
                out = grounder.filter_spatial(cands, *step.args)
            elif step.kind == "superlative":
                out = grounder.rank_superlative(cands, *step.args)
            else:
                raise ValueError(f"unknown step kind {step.kind!r}")
        except (GroundingError, MonotonicityViolation):
            raise
        except Exception as exc:
            raise GroundingError(idx, exc) from exc
        if before is not None:
            if len(out) > before:
                raise MonotonicityViolation(f"step {idx} grew candidates {before} -> {len(out)}")
            if not set(out.ids) <= set(cands.ids):
                raise MonotonicityViolation(f"step {idx} introduced new candidates")
        if step.kind == "superlative" and len(out) > 1:
            raise MonotonicityViolation(f"superlative step {idx} kept {len(out)} candidates")
        cands = CandidateSet(out.entries, (cands.provenance if cands else ()) + (step,))
        trace.append(TraceStep(idx, step, before, len(cands)))
    return Resolution(RboxList(cands.boxes), cands.ids, tuple(trace))


# --- oracle grounder -------------------------------------------------------


def _map_frame(x: float, y: float, north_deg: float) -> tuple[float, float]:
    """(east, north) coordinates of an image point."""
    a = math.radians(north_deg)
    return x * math.cos(a) + y * math.sin(a), x * math.sin(a) - y * math.cos(a)


def _aabb_distance(x: float, y: float, ext: tuple[float, float, float, float]) -> float:
    x0, y0, x1, y1 = ext
    dx = max(x0 - x, 0.0, x - x1)
    dy = max(y0 - y, 0.0, y - y1)
    return math.hypot(dx, dy)


class OracleGrounder:
    """Answers single-condition steps exactly from a :class:`SceneGraph`.

    Spatial relations compare an entity's center with the extreme coordinate
    of the reference region (every entity whose category or role equals the
    reference). Geographic relations use the scene's ``north_angle``; the
    image relations ignore it. ``near`` means the center lies within
    ``near_fraction`` of the image diagonal from the reference region's
    bounding box. Superlative ties go to the lowest id.
    """

    def __init__(self, scene: SceneGraph, near_fraction: float = 0.1):
        self.scene = scene
        self.near_fraction = near_fraction
        self._by_id = scene.by_id()

    def _reference(self, reference: str) -> list[Entity]:
        return [e for e in self.scene.entities if e.category == reference or e.role == reference]

    def ground_category(self, category: str) -> CandidateSet:
        return CandidateSet(tuple((e.id, e.box) for e in self.scene.entities if e.category == category))

    def filter_attribute(self, cands: CandidateSet, key: str, value: str) -> CandidateSet:
        if key not in ATTRIBUTE_KEYS:
            raise ValueError(f"unknown attribute {key!r}; supported: {', '.join(ATTRIBUTE_KEYS)}")
        return CandidateSet(tuple((i, b) for i, b in cands.entries if self._by_id[i].attributes.get(key) == value))

    def filter_spatial(self, cands: CandidateSet, relation: str, reference: str) -> CandidateSet:
        if relation not in RELATIONS:
            raise ValueError(f"unknown relation {relation!r}; supported: {', '.join(RELATIONS)}")
        refs = self._reference(reference)
        if not refs:
            return CandidateSet(())
        corners = [p for e in refs for p in e.box.corners]
        keep = []
        if relation in GEOGRAPHIC_RELATIONS:
            mapped = [_map_frame(p.x, p.y, self.scene.north_angle) for p in corners]
            e_lo, e_hi = min(m[0] for m in mapped), max(m[0] for m in mapped)
            n_lo, n_hi = min(m[1] for m in mapped), max(m[1] for m in mapped)
            for i, b in cands.entries:
                e, n = _map_frame(*b.center, self.scene.north_angle)
                ok = {
                    "east_of": e > e_hi,
                    "west_of": e < e_lo,
                    "north_of": n > n_hi,
                    "south_of": n < n_lo,
                }[relation]
                if ok:
                    keep.append((i, b))
        else:
            ext = (min(p.x for p in corners), min(p.y for p in corners), max(p.x for p in corners), max(p.y for p in corners))
            limit = self.near_fraction * math.hypot(self.scene.width, self.scene.height)
            for i, b in cands.entries:
                cx, cy = b.center
                ok = {
                    "left_of": lambda: cx < ext[0],
                    "right_of": lambda: cx > ext[2],
                    "above": lambda: cy < ext[1],
                    "below": lambda: cy > ext[3],
                    "near": lambda: _aabb_distance(cx, cy, ext) <= limit,
                }[relation]()
                if ok:
                    keep.append((i, b))
        return CandidateSet(tuple(keep))

    def rank_superlative(self, cands: CandidateSet, metric: str, arg: str | None = None) -> CandidateSet:
        if metric not in SUPERLATIVES:
            raise ValueError(f"unknown superlative {metric!r}; supported: {', '.join(SUPERLATIVES)}")
        if not cands.entries:
            return CandidateSet(())
        if metric == "nearest":
            if arg is None:
                raise ValueError("nearest needs a reference")
            refs = self._reference(arg)
            if not refs:
                return CandidateSet(())
            corners = [p for e in refs for p in e.box.corners]
            ext = (min(p.x for p in corners), min(p.y for p in corners), max(p.x for p in corners), max(p.y for p in corners))
            key = lambda entry: (_aabb_distance(*entry[1].center, ext), entry[0])  # noqa: E731
        elif metric == "largest":
            key = lambda entry: (-polygon_area(entry[1]), entry[0])  # noqa: E731
        else:
            key = lambda entry: (polygon_area(entry[1]), entry[0])  # noqa: E731
        return CandidateSet((min(cands.entries, key=key),))


# --- remote grounder -------------------------------------------------------


class GrounderTransportError(RuntimeError):
    pass


class RemoteGrounder:
    """Grounder backed by a model served over HTTP.

    Each step POSTs ``{"image_path", "instruction", "candidates"}`` (candidates
    as flat 8-number corner lists) and expects ``{"text"}`` back, read as a
    list of four-point sets. Replies that do not parse count as an empty
    answer and are recorded in :attr:`parse_failures`. Transport errors are
    retried with exponential backoff, ``attempts`` tries in total.
    """

    def __init__(
        self,
        url: str,
        image_path: str,
        timeout: float = 30.0,
        attempts: int = 3,
        backoff: float = 0.5,
        match_iou: float = 0.5,
        space: CoordSpace | None = None,
        sleep=time.sleep,
    ):
        self.url = url
        self.image_path = image_path
        self.timeout = timeout
        self.attempts = attempts
        self.backoff = backoff
        self.match_iou = match_iou
        self.space = space
        self._sleep = sleep
        self._lock = threading.Lock()
        self.retries = 0
        self.parse_failures: list[ParseFailure] = []

    def _post(self, instruction: str, candidates) -> str:
        body = json.dumps(
            {
                "image_path": self.image_path,
                "instruction": instruction,
                "candidates": [[c for p in b.corners for c in p] for b in candidates],
            }
        ).encode("utf-8")
        last: Exception | None = None
        for attempt in range(self.attempts):
            if attempt:
                with self._lock:
                    self.retries += 1
                self._sleep(self.backoff * 2 ** (attempt - 1))
            req = urllib.request.Request(self.url, data=body, headers={"Content-Type": "application/json"})
            try:
                with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                    return json.loads(resp.read().decode("utf-8"))["text"]
            except (urllib.error.URLError, TimeoutError, ConnectionError, OSError) as exc:
                last = exc
                log.warning("grounder request failed (attempt %d/%d): %s", attempt + 1, self.attempts, exc)
        raise GrounderTransportError(f"grounder unreachable after {self.attempts} attempts: {last}")

    def _boxes(self, text: str) -> tuple[RotatedBox, ...]:
        try:
            return parse_answer(text, TaskTag.GROUNDING, self.space).boxes
        except ParseFailure as exc:
            log.warning("unparseable grounder reply %r: %s", text, exc)
            with self._lock:
                self.parse_failures.append(exc)
            return ()

    def _ask(self, instruction: str, cands: CandidateSet | None) -> tuple[RotatedBox, ...]:
        return self._boxes(self._post(instruction, cands.boxes if cands else ()))

    def _match(self, cands: CandidateSet, boxes) -> CandidateSet:
        used: set[int] = set()
        for box in boxes:
            best, best_iou = None, self.match_iou
            for i, cand in cands.entries:
                if i in used:
                    continue
                iou = rotated_iou(box, cand)
                if iou >= best_iou:
                    best, best_iou = i, iou
            if best is not None:
                used.add(best)
        return CandidateSet(tuple(e for e in cands.entries if e[0] in used))

    def ground_text(self, instruction: str) -> CandidateSet:
        return CandidateSet(tuple(enumerate(self._ask(instruction, None))))

    def ground_category(self, category: str) -> CandidateSet:
        return self.ground_text(describe(select_category(category)))

    def filter_attribute(self, cands, key, value):
        return self._match(cands, self._ask(describe(attribute(key, value)), cands))

    def filter_spatial(self, cands, relation, reference):
        return self._match(cands, self._ask(describe(spatial_relation(relation, reference)), cands))

    def rank_superlative(self, cands, metric, arg=None):
        out = self._match(cands, self._ask(describe(superlative(metric, arg)), cands))
        return CandidateSet(out.entries[:1])


def chain_to_json(chain: ConditionChain) -> str:
    return json.dumps(chain.to_dict(), sort_keys=True)


__all__ = [
    "ConditionChain", "SubInstruction", "SceneGraph", "Entity", "CandidateSet", "Resolution",
    "TraceStep", "OracleGrounder", "RemoteGrounder", "GroundingError", "GrounderTransportError",
    "MonotonicityViolation", "parse_conditions", "resolve", "describe", "plural", "singular",
    "serialize_point_set", "Point", "GeometryError",
]
