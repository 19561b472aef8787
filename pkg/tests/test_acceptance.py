"""Acceptance criteria, one test each; every test prints a PASS/FAIL line."""

import json
import math
import time

import numpy as np
import pytest

from rsvlts.augment import eligible_units, rec_to_region_caption, region_caption_to_rec
from rsvlts.condparse import OracleGrounder, parse_conditions, resolve
from rsvlts.convert import convert_grounding, read_scenes
from rsvlts.geom import BoxParams, Polygon, rbb_from_params, rbb_to_params
from rsvlts.metrics import evaluate, rates
from rsvlts.selfcheck import brute_force, check_iou, check_raster, check_trace, random_query, random_records, random_scene
from rsvlts.textcodec import (
    CoordSpace,
    GeoLoc,
    PolyList,
    RboxList,
    TaskTag,
    parse_answer,
    parse_point_set,
    serialize_answer,
    serialize_point_set,
    single_item,
)

from test_cli import SENTENCE, pipeline


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
        assert ok, detail

    return emit


def _coord(rng):
    if rng.random() < 0.5:
        return int(rng.integers(-5000, 5000))
    return float(rng.uniform(-5000, 5000))


def _cyclic_residual(a, b):
    best = math.inf
    for k in range(4):
        best = min(best, max(math.dist(a[i], b[(i + k) % 4]) for i in range(4)))
    return best


def test_1_roundtrips(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    pix = CoordSpace.pixel()
    bad = 0
    for i in range(10_000):
        kind = i % 4
        if kind == 0:
            pts = [(_coord(rng), _coord(rng)) for _ in range(int(rng.integers(0, 8)))]
            text = serialize_point_set(pts)
            ok = parse_point_set(text) == pts and serialize_point_set(parse_point_set(text)) == text
        elif kind == 1:
            boxes = []
            for _ in range(int(rng.integers(0, 4))):
                p = BoxParams(rng.uniform(-500, 500), rng.uniform(-500, 500), rng.uniform(1, 200), rng.uniform(1, 200), rng.uniform(-math.pi / 2, math.pi / 2 - 1e-9))
                boxes.append(rbb_from_params(p))
            payload = RboxList(tuple(boxes))
            text = serialize_answer(payload, pix)
            back = parse_answer(text, TaskTag.DETECTION, pix)
            ok = back == payload and serialize_answer(back, pix) == text
        elif kind == 2:
            polys = []
            while len(polys) < int(rng.integers(1, 4)):
                n = int(rng.integers(3, 9))
                ang = np.sort(rng.uniform(0, 2 * math.pi, n))
                r = rng.uniform(5, 100, n)
                try:
                    polys.append(Polygon(tuple((int(round(200 + r[j] * math.cos(ang[j]))), int(round(200 + r[j] * math.sin(ang[j])))) for j in range(n))))
                except ValueError:
                    continue
            payload = PolyList(tuple(polys))
            text = serialize_answer(payload, pix)
            back = parse_answer(text, TaskTag.CHANGE, pix)
            ok = back == payload and serialize_answer(back, pix) == text
        else:
            g = GeoLoc(f"City {i}", round(float(rng.uniform(-90, 90)), int(rng.integers(0, 7))), float(rng.uniform(-180, 180)))
            text = serialize_answer(g)
            back = parse_answer(text, TaskTag.GEOLOC)
            ok = back == g and serialize_answer(back) == text
        bad += not ok
    worst = 0.0
    for _ in range(1000):
        p = BoxParams(rng.uniform(-1e3, 1e3), rng.uniform(-1e3, 1e3), rng.uniform(0.5, 500), rng.uniform(0.5, 500), rng.uniform(-math.pi / 2, math.pi / 2 - 1e-9))
        box = rbb_from_params(p)
        again = rbb_from_params(rbb_to_params(box))
        worst = max(worst, _cyclic_residual(box.corners, again.corners) / math.hypot(p.w, p.h))
    secs = time.perf_counter() - t0
    ok = bad == 0 and worst < 1e-6 and secs < 10
    report(1, ok, f"{bad} of 10000 payloads failed to roundtrip; worst params residual {worst:.1e} x diagonal; {secs:.1f}s")


def test_2_geometry_oracles(report):
    t0 = time.perf_counter()
    iou = check_iou(200, seed=2, tol=1e-2, grid=1000)
    raster = check_raster(100, seed=2)
    trace = check_trace(100, seed=2, min_iou=0.95)
    secs = time.perf_counter() - t0
    ok = iou.passed and raster.passed and trace.passed and secs < 120
    report(2, ok, f"{iou.detail}; {raster.detail}; {trace.detail}; {secs:.1f}s")


def test_3_worked_examples(report, fixture_dir):
    chain = parse_conditions(SENTENCE)
    got = [(s.kind, s.args) for s in chain.steps]
    ok_chain = got == [("select_category", ("plane",)), ("spatial_relation", ("east_of", "river"))]
    pond = next(s for s in read_scenes(fixture_dir / "scenes.jsonl") if s.id == "ponds")
    rec = convert_grounding(pond, CoordSpace.pixel())[0]
    cap = rec_to_region_caption(rec)
    want_q = "Could you describe the object at {(100, 100), (100, 200), (200, 200), (200, 100)}?"
    ok_pond = (
        rec.prompt == "What's the location of the largest pond in this image?"
        and cap.prompt == want_q
        and cap.answer.text == "A large pond"
        and region_caption_to_rec(cap).answer == rec.answer
    )
    report(3, ok_chain and ok_pond, f"chain {got}; pond Q {cap.prompt!r} A {cap.answer.text!r}")


def test_4_resolution_equivalence(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    mismatches = multi = 0
    for _ in range(1000):
        scene = random_scene(rng)
        q = random_query(rng, scene)
        chain = parse_conditions(q.text)
        multi += len(chain.steps) > 1
        # resolve raises MonotonicityViolation if a step ever grows its input
        res = resolve(chain, OracleGrounder(scene))
        counts = [t.out_count for t in res.trace if not t.skipped]
        assert all(b <= a for a, b in zip(counts, counts[1:]))
        mismatches += set(res.ids) != brute_force(scene, q)
    secs = time.perf_counter() - t0
    ok = mismatches == 0 and secs < 60
    report(4, ok, f"{mismatches} of 1000 scenes differ ({multi} multi-condition); {secs:.1f}s")


def test_5_self_evaluation(report):
    gt = random_records(np.random.default_rng(5), 200)
    rep = evaluate(gt, {r.id: r.answer_text for r in gt})
    values = rates(rep)
    off = {k: v for k, v in values.items() if v != 1.0}
    geo = rep["tasks"]["geoloc"]
    ok = not off and rep["parse_failures"] == 0 and geo["mean_km"] == 0.0 and len(rep["tasks"]) == 6
    report(5, ok, f"{len(values)} rates, off-unity {off}; parse failures {rep['parse_failures']}; mean km {geo['mean_km']}")


def test_6_determinism(report, fixture_dir, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    a.mkdir()
    b.mkdir()
    ca, ra = pipeline(fixture_dir, a, seed=7)
    cb, rb = pipeline(fixture_dir, b, seed=7)
    same = ca.read_bytes() == cb.read_bytes() and ra.read_bytes() == rb.read_bytes()
    for task in ("detection", "grounding", "seg", "caption", "change", "geoloc"):
        same &= (a / f"{task}.jsonl").read_bytes() == (b / f"{task}.jsonl").read_bytes()
    n = len(ca.read_text().splitlines())
    rep = json.loads(ra.read_text())
    report(6, same, f"{n} records, report over {len(rep['tasks'])} tasks, byte-identical: {same}")


def test_7_involution(report):
    rng = np.random.default_rng(7)
    recs = []
    while len({p for p, _ in eligible_units(recs)}) < 1000:
        recs += random_records(rng, 300)
    units = eligible_units(recs)
    positions = sorted({p for p, _ in units})[:1000]
    keep = set(positions)
    bad = checked = 0
    for pos, i in units:
        if pos not in keep:
            continue
        r = recs[pos]
        back = region_caption_to_rec(rec_to_region_caption(r, i, seed=7), seed=7)
        checked += 1
        bad += back.answer != single_item(r.answer, i)
    report(7, bad == 0, f"{bad} of {checked} objects over {len(positions)} eligible records changed")
