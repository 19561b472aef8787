import json

import numpy as np
import pytest

from rsvlts.convert import (
    TEMPLATES,
    AnnotatedObject,
    ConvertOptions,
    InstructionRecord,
    RecordError,
    SceneAnnotation,
    convert_change,
    convert_detection,
    convert_file,
    convert_geoloc,
    convert_grounding,
    convert_segmentation,
    emit_segmenter_prompts,
    map_ordered,
    read_records,
    read_scenes,
    validate_file,
    validate_record,
    write_records,
)
from rsvlts.condparse import parse_conditions
from rsvlts.geom import BinaryMask, BoxParams, HorizontalBox, Point, RotatedBox, polygon_area, rasterize_polygon, rasterize_union, rbb_from_params
from rsvlts.selfcheck import mask_iou
from rsvlts.textcodec import CoordSpace, PolyList, RboxList, SegPrompt, TaskTag, denormalize, serialize_answer

PIX = CoordSpace.pixel()


def _box(cx, cy, w=8, h=6, t=0.0):
    return rbb_from_params(BoxParams(cx, cy, w, h, t))


def _scene(objects, w=100, h=100):
    return SceneAnnotation("s", "img.png", w, h, tuple(objects))


def _with_mask(oid, cat, box, w=100, h=100):
    return AnnotatedObject(oid, cat, box, rasterize_polygon(box, w, h))


def test_detection_enumerates_category():
    objs = [AnnotatedObject(i, "plane", _box(10 + 20 * i, 50)) for i in range(3)] + [AnnotatedObject(9, "ship", _box(50, 10))]
    rec = convert_detection(_scene(objs), "plane", PIX)
    assert rec.tag is TaskTag.DETECTION
    assert rec.answer.boxes == tuple(o.box for o in objs[:3])
    assert rec.meta["object_ids"] == [0, 1, 2]


def test_detection_absent_category():
    rec = convert_detection(_scene([AnnotatedObject(0, "ship", _box(50, 50))]), "plane")
    assert rec.answer == RboxList(())
    assert rec.answer_text == "{}"


def test_detection_single_object_params():
    p = BoxParams(40, 30, 20, 10, 0.3)
    rec = convert_detection(_scene([AnnotatedObject(0, "car", rbb_from_params(p))]), "car", PIX)
    assert rec.answer.boxes == (rbb_from_params(p),)


def test_detection_normalizes():
    rec = convert_detection(_scene([AnnotatedObject(0, "car", _box(50, 50, 20, 10))], 200, 100), "car")
    assert rec.space == CoordSpace("normalized", 1000, 200, 100)
    assert rec.answer_text == "{(200, 450), (300, 450), (300, 550), (200, 550)}"


def test_detection_drops_boxes_degenerate_after_quantization():
    tiny = RotatedBox(((10.0, 10.0), (10.01, 10.0), (10.01, 10.01), (10.0, 10.01)))
    rec = convert_detection(_scene([AnnotatedObject(0, "car", tiny), AnnotatedObject(1, "car", _box(50, 50))]), "car")
    assert len(rec.answer.boxes) == 1
    assert rec.meta["dropped"] == [0]


def test_templates_cover_tasks_and_parse():
    for tag, bank in TEMPLATES.items():
        assert len(bank) >= 5
    for t in TEMPLATES[TaskTag.DETECTION] + TEMPLATES[TaskTag.SEG]:
        chain = parse_conditions(t.format(singular="storage tank", plural="storage tanks"))
        assert chain.steps[0].args == ("storage tank",)
        assert len(chain) == 1


def test_template_choice_deterministic():
    sa = _scene([AnnotatedObject(0, "car", _box(50, 50))])
    assert convert_detection(sa, "car", seed=3).prompt == convert_detection(sa, "car", seed=3).prompt
    prompts = {convert_detection(SceneAnnotation(f"s{i}", "i.png", 100, 100, sa.objects), "car").prompt for i in range(40)}
    assert len(prompts) > 1


def test_segmentation_square():
    arr = np.zeros((20, 20), dtype=bool)
    arr[5:14, 3:12] = True
    obj = AnnotatedObject(0, "pond", None, BinaryMask.from_array(arr))
    rec = convert_segmentation(_scene([obj], 20, 20), "pond", 1, PIX)
    (t,) = rec.answer.targets
    assert t.box == HorizontalBox((3, 5), (11, 13))
    assert t.points == (Point(7, 9),)


def test_segmentation_three_distinct_points():
    box = _box(50, 50, 40, 20, 0.4)
    rec = convert_segmentation(_scene([_with_mask(0, "ship", box)]), "ship", 3, PIX)
    (t,) = rec.answer.targets
    assert len(set(t.points)) == 3
    bits = rasterize_polygon(box, 100, 100).bits
    assert all(bits[p.y, p.x] for p in t.points)


def test_segmentation_no_matches_and_missing_mask():
    sa = _scene([AnnotatedObject(4, "ship", _box(50, 50))])
    assert convert_segmentation(sa, "plane").answer == SegPrompt(())
    with pytest.raises(RecordError, match="4"):
        convert_segmentation(sa, "ship")


def test_segmentation_keypoints_inside_box_normalized():
    objs = [_with_mask(i, "car", _box(20 + 25 * i, 40 + 10 * i, 18, 7, 0.2 * i)) for i in range(3)]
    rec = convert_segmentation(_scene(objs), "car", 5)
    assert validate_record(rec) == []
    for t in rec.answer.targets:
        assert all(t.box.contains(p) for p in t.points)


def _mask(pixels, w=32, h=32):
    arr = np.zeros((h, w), dtype=bool)
    for x, y in pixels:
        arr[y, x] = True
    return BinaryMask.from_array(arr)


def test_change_empty_and_noise():
    assert convert_change(BinaryMask.zeros(16, 16), "a", "b").answer == PolyList(())
    assert convert_change(_mask([(3, 3)]), "a", "b").answer == PolyList(())


def test_change_two_blobs():
    arr = np.zeros((40, 40), dtype=bool)
    arr[2:12, 3:10] = True
    yy, xx = np.mgrid[:40, :40]
    arr[(yy - 28) ** 2 + (xx - 26) ** 2 <= 40] = True
    mask = BinaryMask.from_array(arr)
    rec = convert_change(mask, "a.png", "b.png", "new things", eps=1.0, space=PIX)
    assert rec.images == ("a.png", "b.png")
    assert rec.prompt == "new things"
    assert len(rec.answer.polygons) == 2
    assert mask_iou(rasterize_union(rec.answer.polygons, 40, 40).bits, arr) >= 0.95
    assert sum(polygon_area(p) for p in rec.answer.polygons) <= arr.sum() * 1.1


def test_change_template_when_no_caption():
    rec = convert_change(_mask([(x, y) for x in range(4) for y in range(4)]), "a", "b", None, record_id="c1")
    assert rec.prompt in TEMPLATES[TaskTag.CHANGE]


def test_geoloc():
    rec = convert_geoloc("img.png", "Hangzhou", 30.25, 120.17)
    assert rec.answer_text == "[Hangzhou, (30.25, 120.17)]"
    assert InstructionRecord.from_json(rec.to_json()) == rec
    with pytest.raises(ValueError):
        convert_geoloc("img.png", "X", 95, 0)


def test_grounding_uses_expressions():
    obj = AnnotatedObject(3, "ship", _box(50, 50), expressions=("the red ship", "the ship"))
    recs = convert_grounding(_scene([obj]), PIX)
    assert [r.prompt for r in recs] == ["the red ship", "the ship"]
    assert all(r.answer == RboxList((obj.box,)) for r in recs)


def test_record_json_fields():
    rec = convert_geoloc("img.png", "Paris", 48.8566, 2.3522, "g1")
    d = json.loads(rec.to_json())
    assert d["schema"] == "rsvlts/1"
    assert d["instruction"] == "[geoloc] " + rec.prompt
    assert set(d) == {"schema", "id", "tag", "images", "prompt", "instruction", "answer", "space", "meta"}


def test_from_json_rejects_wrong_schema():
    d = json.loads(convert_geoloc("i", "Paris", 1, 2).to_json())
    d["schema"] = "rsvlts/0"
    with pytest.raises(RecordError):
        InstructionRecord.from_dict(d)


def test_validator_flags_image_count():
    rec = convert_geoloc("i", "Paris", 1, 2)
    bad = InstructionRecord(rec.id, TaskTag.CHANGE, ("i",), "p", PolyList(()), rec.space)
    problems = validate_record(bad)
    assert any("2 image" in p for p in problems)
    bad2 = InstructionRecord(rec.id, TaskTag.DETECTION, ("i",), "p", rec.answer, rec.space)
    assert any("RboxList" in p for p in validate_record(bad2))


def test_emit_prompts(tmp_path):
    box = _box(50, 50, 30, 12)
    rec = convert_segmentation(_scene([_with_mask(0, "car", box, 100, 80)], 100, 80), "car", 2)
    n = emit_segmenter_prompts([rec], tmp_path / "p.jsonl")
    lines = (tmp_path / "p.jsonl").read_text().splitlines()
    assert n == 1 and len(lines) == 1
    d = json.loads(lines[0])
    (t,) = d["targets"]
    (target,) = rec.answer.targets
    lo, hi = target.box.min, target.box.max
    # independent denormalization: bin b covers [b, b+1) * extent / bins
    assert t["box"] == [(lo.x + 0.5) * 100 / 1000, (lo.y + 0.5) * 80 / 1000, (hi.x + 0.5) * 100 / 1000, (hi.y + 0.5) * 80 / 1000]
    assert t["points"] == [[p.x, p.y] for p in denormalize(target.points, rec.space)]
    assert t["labels"] == [1, 1]


def test_emit_prompts_empty_and_wrong_tag(tmp_path):
    assert emit_segmenter_prompts([], tmp_path / "e.jsonl") == 0
    assert (tmp_path / "e.jsonl").read_bytes() == b""
    with pytest.raises(RecordError):
        emit_segmenter_prompts([convert_geoloc("i", "Paris", 1, 2)], tmp_path / "x.jsonl")


def test_fixture_conversion_valid_and_deterministic(tmp_path, fixture_dir):
    for task, src in [("detection", "scenes"), ("grounding", "scenes"), ("seg", "scenes"), ("caption", "scenes"), ("change", "change"), ("geoloc", "geoloc")]:
        recs = convert_file(fixture_dir / f"{src}.jsonl", ConvertOptions(task))
        assert recs, task
        write_records(recs, tmp_path / f"{task}.jsonl")
        assert validate_file(tmp_path / f"{task}.jsonl") == []
        write_records(convert_file(fixture_dir / f"{src}.jsonl", ConvertOptions(task)), tmp_path / f"{task}2.jsonl")
        assert (tmp_path / f"{task}.jsonl").read_bytes() == (tmp_path / f"{task}2.jsonl").read_bytes()
        assert read_records(tmp_path / f"{task}.jsonl") == recs


def test_parallel_conversion_preserves_order(fixture_dir):
    opts = ConvertOptions("detection")
    assert convert_file(fixture_dir / "scenes.jsonl", opts, workers=2) == convert_file(fixture_dir / "scenes.jsonl", opts)


def test_map_ordered():
    assert map_ordered(abs, [-3, 1, -2], workers=2) == [3, 1, 2]


def test_read_scenes_loads_masks(fixture_dir):
    scenes = read_scenes(fixture_dir / "scenes.jsonl")
    airport = scenes[0]
    assert airport.objects[1].mask is not None
    assert airport.scene_graph().width == 100


def test_scene_requires_box_or_mask():
    with pytest.raises(RecordError):
        AnnotatedObject(0, "x")
