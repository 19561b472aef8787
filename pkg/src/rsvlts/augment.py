"""Cyclic referring: localization records to region captions and back.

A localizing record (detection, grounding, seg or change) becomes one
``identify`` record per answer object, whose prompt embeds that object's
serialized coordinates and whose answer is a short phrase built from the
source prompt. The reverse transform reads the coordinates back out of the
prompt, so ``region_caption_to_rec(rec_to_region_caption(r)).answer`` equals
the source answer for single-object records.
"""

from __future__ import annotations

import hashlib
import logging
import re
from typing import Iterable

from rsvlts.condparse import _RELATION_PHRASES, parse_conditions
from rsvlts.convert import InstructionRecord, RecordError, pick
from rsvlts.textcodec import (
    Caption,
    ParseFailure,
    PolyList,
    RboxList,
    SegPrompt,
    TaskTag,
    find_groups,
    parse_answer,
    parse_point_set,
    payload_items,
    serialize_answer,
    single_item,
)

log = logging.getLogger(__name__)

LOCALIZING = (TaskTag.DETECTION, TaskTag.GROUNDING, TaskTag.SEG, TaskTag.CHANGE)

CAPTION_TEMPLATES = (
    "Could you describe the object at {pts}?",
    "What is the object at {pts}?",
    "Describe the region {pts}.",
    "Please caption the object located at {pts}.",
    "Identify the object inside {pts}.",
)
LOCATE_TEMPLATES = (
    "What's the location of {phrase} in this image?",
    "Where is {phrase} in this image?",
    "Locate {phrase} in this image.",
    "Find {phrase}.",
    "Show me {phrase}.",
)

_SUPERLATIVE_ADJ = {"largest": "large", "smallest": "small"}


def object_phrase(prompt: str) -> str:
    """Noun phrase for the object a localizing prompt asks about.

    Raises :class:`ParseFailure` when the prompt has no recognizable
    category head.
    """
    chain = parse_conditions(prompt)
    category = chain.steps[0].args[0]
    adjectives: list[str] = []
    tail: list[str] = []
    for step in chain.steps[1:]:
        if step.kind == "attribute":
            word = step.args[1]
        elif step.kind == "superlative":
            word = _SUPERLATIVE_ADJ.get(step.args[0])
            if word is None:
                tail.append(f"nearest to the {step.args[1]}")
                continue
        else:
            tail.append(f"{_RELATION_PHRASES[step.args[0]]} the {step.args[1]}")
            continue
        if word not in adjectives:
            adjectives.append(word)
    # sizes read before colors: "large red ship"
    adjectives.sort(key=lambda w: 0 if w in ("large", "small") else 1)
    words = adjectives + [category]
    article = "An" if words[0][0] in "aeiou" else "A"
    return " ".join([article] + words + tail)


def _units(r: InstructionRecord) -> int:
    if r.tag not in LOCALIZING or isinstance(r.answer, str):
        return 0
    return len(payload_items(r.answer))


def rec_to_region_caption(r: InstructionRecord, index: int = 0, seed: int | None = None) -> InstructionRecord | None:
    """Region-caption record for object ``index`` of ``r``, or None when ineligible."""
    if r.tag not in LOCALIZING:
        log.info("%s: %s records are not localizing, skipped", r.id, r.tag.value)
        return None
    n = _units(r)
    if n == 0:
        return None
    if not 0 <= index < n:
        raise IndexError(f"record {r.id} has {n} object(s), no index {index}")
    try:
        phrase = object_phrase(r.prompt)
    except ParseFailure as exc:
        log.info("%s: no object phrase in prompt (%s), skipped", r.id, exc)
        return None
    item = single_item(r.answer, index)
    pts = serialize_answer(item, r.space)
    key = f"{r.id}:{index}"
    template = CAPTION_TEMPLATES[0] if seed is None else pick(CAPTION_TEMPLATES, key, seed)
    meta = {"cyclic_of": r.id, "object_index": index, "source_tag": r.tag.value}
    images = r.images
    if r.tag is TaskTag.CHANGE:
        # the changed region is described on the later image
        images = r.images[-1:]
        meta["source_images"] = list(r.images)
    return InstructionRecord(
        f"{r.id}:cap{index}", TaskTag.IDENTIFY, images, template.format(pts=pts), Caption(phrase), r.space, meta
    )


def region_captions(r: InstructionRecord, seed: int | None = None) -> list[InstructionRecord]:
    out = []
    for i in range(_units(r)):
        rec = rec_to_region_caption(r, i, seed)
        if rec is None:
            break
        out.append(rec)
    return out


def _answer_shape(prompt: str) -> TaskTag:
    spans = find_groups(prompt)
    if not spans:
        raise ParseFailure("no point set in prompt", prompt)
    head = prompt[: spans[0][0]].rstrip()
    if head.endswith("box") and len(spans) >= 2:
        return TaskTag.SEG
    pts = parse_point_set(prompt)
    if len(pts) >= 4 and pts[0] == pts[-1]:
        return TaskTag.CHANGE
    return TaskTag.GROUNDING


def region_caption_to_rec(r: InstructionRecord, seed: int | None = None) -> InstructionRecord:
    """Localizing record asking for the region whose coordinates ``r.prompt`` embeds.

    The answer variant follows the embedded coordinates: four-corner sets
    give a grounding record, ``box {..} points {..}`` a seg record and closed
    rings a change record.
    """
    if r.tag is not TaskTag.IDENTIFY:
        raise RecordError(f"record {r.id}: expected an identify record, got {r.tag.value}")
    tag = _answer_shape(r.prompt)
    answer = parse_answer(r.prompt, tag, r.space)
    if isinstance(answer, (RboxList, SegPrompt, PolyList)) and not payload_items(answer):
        raise ParseFailure("prompt point set is empty", r.prompt)
    text = r.answer.text if isinstance(r.answer, Caption) else str(r.answer)
    phrase = text.strip().rstrip(".")
    first, _, rest = phrase.partition(" ")
    if first in ("A", "An", "The"):
        phrase = f"{first.lower()} {rest}"
    template = LOCATE_TEMPLATES[0] if seed is None else pick(LOCATE_TEMPLATES, r.id, seed)
    images = r.images
    if tag is TaskTag.CHANGE:
        images = tuple(r.meta.get("source_images", ()))
        if len(images) != 2:
            raise RecordError(f"record {r.id}: a polygon region needs the two source images in meta")
    m = re.search(r":cap(\d+)$", r.id)
    rid = f"{r.id[: m.start()]}:loc{m.group(1)}" if m else f"{r.id}:loc"
    meta = {"cyclic_of": r.id}
    return InstructionRecord(rid, tag, images, template.format(phrase=phrase), answer, r.space, meta)


def _rank(seed: int, key: str) -> bytes:
    return hashlib.sha256(f"{seed}:{key}".encode("utf-8")).digest()


def eligible_units(records: Iterable[InstructionRecord]) -> list[tuple[int, int]]:
    """(record position, object index) pairs that can be cycled."""
    units = []
    for pos, r in enumerate(records):
        if r.tag is TaskTag.IDENTIFY:
            try:
                _answer_shape(r.prompt)
            except ParseFailure:
                continue
            units.append((pos, 0))
            continue
        n = _units(r)
        if n == 0:
            continue
        try:
            object_phrase(r.prompt)
        except ParseFailure:
            continue
        units.extend((pos, i) for i in range(n))
    return units


def augment_corpus(
    records: list[InstructionRecord], ratio: float, seed: int = 0, stats: dict | None = None
) -> list[InstructionRecord]:
    """Originals followed by cyclic counterparts for a seeded sample of units.

    The sample holds ``round(ratio * n)`` of the ``n`` eligible units, chosen
    by a hash of ``seed`` and the record id, then emitted in corpus order.
    """
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"ratio must lie in [0, 1], got {ratio}")
    records = list(records)
    units = eligible_units(records)
    k = int(ratio * len(units) + 0.5)
    chosen = sorted(sorted(units, key=lambda u: _rank(seed, f"{records[u[0]].id}:{u[1]}"))[:k])
    extra = []
    skipped = 0
    for pos, idx in chosen:
        r = records[pos]
        try:
            if r.tag is TaskTag.IDENTIFY:
                extra.append(region_caption_to_rec(r, seed))
            else:
                extra.append(rec_to_region_caption(r, idx, seed))
        except (ParseFailure, RecordError) as exc:
            log.warning("%s: not augmented: %s", r.id, exc)
            skipped += 1
    if stats is not None:
        stats.update({"eligible": len(units), "sampled": k, "added": len(extra), "skipped": skipped})
    return records + extra
