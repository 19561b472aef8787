import json
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import pytest

from rsvlts.condparse import (
    CandidateSet,
    ConditionChain,
    Entity,
    GrounderTransportError,
    GroundingError,
    MonotonicityViolation,
    OracleGrounder,
    RemoteGrounder,
    SceneGraph,
    SubInstruction,
    attribute,
    describe,
    parse_conditions,
    plural,
    resolve,
    select_category,
    singular,
    spatial_relation,
    superlative,
)
from rsvlts.geom import BoxParams, RotatedBox, rbb_from_params
from rsvlts.selfcheck import brute_force, random_query, random_scene
from rsvlts.textcodec import ParseFailure, RboxList


def sq(cx, cy, half=3):
    return RotatedBox(((cx - half, cy - half), (cx + half, cy - half), (cx + half, cy + half), (cx - half, cy + half)))


def paper_scene(**kw):
    river = Entity(0, "river", RotatedBox(((45, 0), (55, 0), (55, 100), (45, 100))), {}, "river")
    planes = [Entity(i + 1, "plane", sq(x, 20 + 25 * i), {"color": "white"}) for i, x in enumerate((20, 60, 70))]
    return SceneGraph(100, 100, (river, *planes), **kw)


def steps(text):
    return [(s.kind, s.args) for s in parse_conditions(text).steps]


# --- parsing ---


def test_paper_sentence():
    assert steps("detect all planes on the east bank of the river") == [
        ("select_category", ("plane",)),
        ("spatial_relation", ("east_of", "river")),
    ]


def test_single_condition():
    assert steps("detect all planes") == [("select_category", ("plane",))]


def test_full_ordering():
    assert steps("find the largest red ship north of the harbor") == [
        ("select_category", ("ship",)),
        ("attribute", ("color", "red")),
        ("spatial_relation", ("north_of", "harbor")),
        ("superlative", ("largest",)),
    ]


@pytest.mark.parametrize(
    "text, expected",
    [
        ("What's the location of the largest pond in this image?", [("select_category", ("pond",)), ("superlative", ("largest",))]),
        ("locate the small gray storage tanks", [("select_category", ("storage tank",)), ("attribute", ("size", "small")), ("attribute", ("color", "gray"))]),
        ("find the ship nearest to the bridge", [("select_category", ("ship",)), ("superlative", ("nearest", "bridge"))]),
        ("show me the cars that are to the left of the road and near the bridge", [
            ("select_category", ("car",)), ("spatial_relation", ("left_of", "road")), ("spatial_relation", ("near", "bridge"))]),
        ("Please mark every building below the lake", [("select_category", ("building",)), ("spatial_relation", ("below", "lake"))]),
        ("the biggest grey plane", [("select_category", ("plane",)), ("attribute", ("color", "gray")), ("superlative", ("largest",))]),
    ],
)
def test_grammar_examples(text, expected):
    assert steps(text) == expected


def test_raw_text_kept():
    chain = parse_conditions("detect all planes on the east bank of the river")
    assert chain.steps[0].raw_text == "detect all planes"
    assert chain.steps[1].raw_text == "on the east bank of the river"


def test_parse_failures():
    for text in ["", "how many cars are there?", "detect all", "find ships with sails", "find ships east"]:
        with pytest.raises(ParseFailure):
            parse_conditions(text)


def test_passthrough_opaque():
    chain = parse_conditions("How many cars are there?", passthrough=True)
    assert chain.opaque
    assert chain.steps[0].args == ("How many cars are there?",)


def test_chain_invariants():
    with pytest.raises(ValueError):
        ConditionChain(())
    with pytest.raises(ValueError):
        ConditionChain((attribute("color", "red"),))
    with pytest.raises(ValueError):
        ConditionChain((select_category("a"), select_category("b")))


def test_parse_deterministic_and_total_on_generated():
    rng = np.random.default_rng(11)
    for _ in range(300):
        q = random_query(rng, random_scene(rng))
        assert parse_conditions(q.text) == parse_conditions(q.text)


def test_singular_plural():
    assert [singular(w) for w in ("planes", "ships", "harbors", "boxes", "churches", "ferries", "bus", "grass")] == [
        "plane", "ship", "harbor", "box", "church", "ferry", "bus", "grass"]
    assert [plural(w) for w in ("plane", "box", "ferry", "storage tank", "bay")] == [
        "planes", "boxes", "ferries", "storage tanks", "bays"]


def test_subinstruction_dict_roundtrip():
    s = spatial_relation("east_of", "river", "on the east bank of the river")
    assert SubInstruction.from_dict(s.to_dict()) == s


# --- resolution with the oracle ---


def test_paper_scene_resolution():
    res = resolve(parse_conditions("detect all planes on the east bank of the river"), OracleGrounder(paper_scene()))
    assert sorted(b.center[0] for b in res.answer.boxes) == [60, 70]
    assert [(t.in_count, t.out_count) for t in res.trace] == [(None, 3), (3, 2)]


def test_category_only():
    res = resolve(parse_conditions("detect all planes"), OracleGrounder(paper_scene()))
    assert len(res.answer.boxes) == 3


def test_empty_propagation():
    chain = ConditionChain((select_category("plane"), attribute("color", "purple"), superlative("largest")))
    res = resolve(chain, OracleGrounder(paper_scene()))
    assert res.answer == RboxList(())
    assert (res.trace[1].in_count, res.trace[1].out_count) == (3, 0)
    assert res.trace[2].skipped


def test_oracle_definitions():
    g = OracleGrounder(paper_scene())
    planes = g.ground_category("plane")
    assert g.filter_spatial(planes, "east_of", "river").ids == (2, 3)
    assert g.filter_spatial(planes, "west_of", "river").ids == (1,)
    assert g.filter_spatial(planes, "east_of", "lake").ids == ()
    # north-up: north is smaller y
    assert g.filter_spatial(planes, "north_of", "plane").ids == ()
    assert g.rank_superlative(planes, "nearest", "river").ids == (2,)


def test_north_angle_rotates_compass():
    # north pointing to image-right: geographic east is image-down
    g = OracleGrounder(paper_scene(north_angle=90.0))
    planes = g.ground_category("plane")
    assert g.filter_spatial(planes, "north_of", "river").ids == (2, 3)
    assert g.filter_spatial(planes, "right_of", "river").ids == (2, 3)


def test_largest_tie_goes_to_lowest_id():
    ents = (Entity(7, "pond", sq(20, 20, 5)), Entity(3, "pond", sq(60, 60, 5)), Entity(5, "pond", sq(80, 20, 2)))
    g = OracleGrounder(SceneGraph(100, 100, ents))
    assert g.rank_superlative(g.ground_category("pond"), "largest").ids == (3,)
    assert g.rank_superlative(g.ground_category("pond"), "smallest").ids == (5,)


def test_unknown_vocabulary_lists_supported():
    g = OracleGrounder(paper_scene())
    cands = g.ground_category("plane")
    with pytest.raises(ValueError, match="east_of"):
        g.filter_spatial(cands, "inside", "river")
    with pytest.raises(ValueError, match="largest"):
        g.rank_superlative(cands, "count")
    chain = ConditionChain((select_category("plane"), spatial_relation("inside", "river")))
    with pytest.raises(GroundingError) as e:
        resolve(chain, g)
    assert e.value.step_index == 1


def test_scene_invariants():
    with pytest.raises(ValueError):
        SceneGraph(100, 100, (Entity(1, "a", sq(10, 10)), Entity(1, "b", sq(20, 20))))
    with pytest.raises(ValueError):
        SceneGraph(50, 50, (Entity(1, "a", sq(49, 10)),))


def test_scene_dict_roundtrip():
    s = paper_scene(north_angle=12.5)
    assert SceneGraph.from_dict(json.loads(json.dumps(s.to_dict()))) == s


class GrowingGrounder(OracleGrounder):
    def filter_attribute(self, cands, key, value):
        return CandidateSet(cands.entries + ((99, sq(5, 5)),))


def test_monotonicity_enforced():
    chain = ConditionChain((select_category("plane"), attribute("color", "white")))
    with pytest.raises(MonotonicityViolation):
        resolve(chain, GrowingGrounder(paper_scene()))


def test_oracle_matches_brute_force():
    rng = np.random.default_rng(3)
    for _ in range(200):
        scene = random_scene(rng)
        q = random_query(rng, scene)
        res = resolve(parse_conditions(q.text), OracleGrounder(scene))
        assert set(res.ids) == brute_force(scene, q), q.text
        if q.superlative:
            assert len(res.ids) <= 1


def test_describe():
    assert describe(select_category("plane")) == "detect all planes"
    assert describe(spatial_relation("east_of", "river")) == "select the ones on the east side of the river"
    assert describe(superlative("largest")) == "select the largest one"


# --- remote grounder ---


class _Handler(BaseHTTPRequestHandler):
    def log_message(self, *a):
        pass

    def do_POST(self):
        srv = self.server
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        srv.requests.append(body)
        if srv.fail_first > 0:
            srv.fail_first -= 1
            time.sleep(srv.delay)
        reply = srv.replies.pop(0) if srv.replies else "{}"
        data = json.dumps({"text": reply}).encode()
        try:
            self.send_response(200)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)
        except (BrokenPipeError, ConnectionResetError):
            pass


@pytest.fixture
def server():
    srv = ThreadingHTTPServer(("127.0.0.1", 0), _Handler)
    srv.requests, srv.replies, srv.fail_first, srv.delay = [], [], 0, 0.0
    th = threading.Thread(target=srv.serve_forever, daemon=True)
    th.start()
    yield srv
    srv.shutdown()
    srv.server_close()


def _url(srv):
    return f"http://127.0.0.1:{srv.server_address[1]}/ground"


def test_remote_one_box(server):
    server.replies = ["{(10, 10), (20, 10), (20, 20), (10, 20)}"]
    g = RemoteGrounder(_url(server), "img.png", sleep=lambda s: None)
    cands = g.ground_category("plane")
    assert len(cands) == 1
    assert server.requests[0] == {"image_path": "img.png", "instruction": "detect all planes", "candidates": []}


def test_remote_unparseable_reply(server, caplog):
    server.replies = ["no such object"]
    g = RemoteGrounder(_url(server), "img.png", sleep=lambda s: None)
    assert len(g.ground_category("plane")) == 0
    assert len(g.parse_failures) == 1
    assert "unparseable" in caplog.text


def test_remote_retries_after_timeouts(server):
    server.fail_first, server.delay = 2, 0.5
    server.replies = ["{(10, 10), (20, 10), (20, 20), (10, 20)}"] * 3
    slept = []
    g = RemoteGrounder(_url(server), "img.png", timeout=0.1, sleep=slept.append)
    res = resolve(parse_conditions("detect all planes"), g)
    assert len(res.answer.boxes) == 1
    assert g.retries == 2
    assert slept == [0.5, 1.0]


def test_remote_transport_failure():
    g = RemoteGrounder("http://127.0.0.1:9/none", "img.png", timeout=0.2, sleep=lambda s: None)
    with pytest.raises(GroundingError) as e:
        resolve(parse_conditions("detect all planes"), g)
    assert isinstance(e.value.cause, GrounderTransportError)
    assert g.retries == 2


def test_remote_filter_matches_candidates(server):
    a = "{(0, 0), (10, 0), (10, 10), (0, 10)}"
    b = "{(50, 50), (60, 50), (60, 60), (50, 60)}"
    server.replies = [f"{a}; {b}", "{(50.5, 50), (60, 50), (60, 60.5), (50, 60)}"]
    g = RemoteGrounder(_url(server), "img.png", sleep=lambda s: None)
    res = resolve(parse_conditions("detect all planes east of the river"), g)
    assert res.ids == (1,)
    assert server.requests[1]["instruction"] == "select the ones on the east side of the river"
    assert server.requests[1]["candidates"] == [[0, 0, 10, 0, 10, 10, 0, 10], [50, 50, 60, 50, 60, 60, 50, 60]]


def test_remote_concurrent_chains(server):
    box = "{(0, 0), (10, 0), (10, 10), (0, 10)}"
    server.replies = [box] * 40
    g = RemoteGrounder(_url(server), "img.png", sleep=lambda s: None)
    out = []
    threads = [threading.Thread(target=lambda: out.append(len(resolve(parse_conditions("find planes"), g).ids))) for _ in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert out == [1] * 8
