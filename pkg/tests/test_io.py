import json
import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lgfa import io
from lgfa.completion import CompletionConfig, complete
from lgfa.errors import GeometryError, SchemaError
from lgfa.geom import CLASSES, Polyline, SemanticClass
from lgfa.map_model import FrameObservation, FramePolyline, GlobalPolyline, GlobalVectorMap, ObjectBox, Pose2D

DATA = Path(__file__).parent / "data"

finite = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)
point_lists = st.lists(st.tuples(finite, finite), min_size=2, max_size=8, unique=True)


@st.composite
def polylines(draw):
    c = draw(st.sampled_from(CLASSES))
    pts = np.array(draw(point_lists))
    # keep vertices well separated so the geometry is valid
    pts = pts + np.arange(len(pts))[:, None] * 10.0
    return Polyline(c, pts)


@st.composite
def frame_lists(draw):
    n = draw(st.integers(1, 4))
    ts = sorted(draw(st.sets(st.integers(0, 1000), min_size=n, max_size=n)))
    frames = []
    for t in ts:
        pose = Pose2D(draw(finite), draw(finite), draw(st.floats(-math.pi, math.pi)))
        polys = tuple(FramePolyline(p, draw(st.one_of(st.none(), st.integers(0, 50))))
                      for p in draw(st.lists(polylines(), max_size=4)))
        frames.append(FrameObservation(t, pose, polys))
    return frames


@st.composite
def maps(draw):
    m = GlobalVectorMap(scene=draw(st.text(max_size=5)), config={"resample_step": 0.2})
    for p in draw(st.lists(polylines(), max_size=6)):
        gid = len(m.of(p.class_id))
        m.elements[p.class_id].append(GlobalPolyline(
            gid, p, frozenset(draw(st.sets(st.integers(0, 99), min_size=1, max_size=3))),
            frozenset(draw(st.sets(st.integers(0, 99), max_size=3)))))
    return m


def _same_frames(a, b):
    assert len(a) == len(b)
    for fa, fb in zip(a, b):
        assert fa.frame_index == fb.frame_index and fa.ego_pose_ref == fb.ego_pose_ref
        assert len(fa.polylines) == len(fb.polylines)
        for pa, pb in zip(fa.polylines, fb.polylines):
            assert pa.class_id is pb.class_id and pa.persistent_id == pb.persistent_id
            assert np.array_equal(pa.geometry.pts, pb.geometry.pts)


def _same_maps(a, b):
    assert a.scene == b.scene and a.config == b.config
    for c in CLASSES:
        assert len(a.of(c)) == len(b.of(c))
        for ga, gb in zip(a.of(c), b.of(c)):
            assert ga.global_id == gb.global_id
            assert ga.support_frames == gb.support_frames and ga.source_ids == gb.source_ids
            assert np.array_equal(ga.geometry.pts, gb.geometry.pts)


@settings(max_examples=150)
@given(frame_lists())
def test_frames_roundtrip_bit_exact(frames):
    obj = json.loads(io.dumps(io.frames_to_obj(frames, "s")))
    _same_frames(frames, io.frames_from_obj(obj))


@settings(max_examples=150)
@given(maps())
def test_map_roundtrip_bit_exact(m):
    obj = json.loads(io.dumps(io.map_to_obj(m)))
    _same_maps(m, io.map_from_obj(obj))


def test_golden_map_byte_identical(tmp_path):
    src = DATA / "golden_map.json"
    m = io.read_map(src)
    out = tmp_path / "m.json"
    io.write_map(out, m)
    assert out.read_bytes() == src.read_bytes()
    assert m.of(SemanticClass.BOUNDARY)[1].global_id == 3
    assert m.of(SemanticClass.DIVIDER)[0].geometry.pts[2, 1] == -0.30000000000000004


def test_minimal_frame_file(tmp_path):
    p = tmp_path / "f.json"
    p.write_text('{"scene":"x","frames":[{"t":0,"ego_pose":[0,0,0],'
                 '"polylines":[{"class":"divider","id":null,"pts":[[0,0],[1,0]]}]}]}')
    (f,) = io.read_frames(p)
    assert f.counts()[SemanticClass.DIVIDER] == 1


def _frame_obj(**poly):
    el = {"class": "divider", "id": 1, "pts": [[0, 0], [1, 0]]}
    el.update(poly)
    return {"scene": "x", "frames": [{"t": 0, "ego_pose": [0, 0, 0], "polylines": [el]}]}


def test_unknown_class_names_string():
    with pytest.raises(SchemaError, match="lane_marker"):
        io.frames_from_obj(_frame_obj(**{"class": "lane_marker"}), "f.json")


@pytest.mark.parametrize("bad,err,where", [
    ({"pts": [[0, 0]]}, GeometryError, "frame 0, element 0"),
    ({"pts": [[0, 0], [1e400, 0]]}, GeometryError, "frame 0, element 0"),
    ({"pts": [[0, 0], ["a", 0]]}, SchemaError, "element 0"),
    ({"id": "3"}, SchemaError, "element 0"),
    ({"id": True}, SchemaError, "element 0"),
])
def test_frame_schema_errors(bad, err, where):
    with pytest.raises(err, match=where):
        io.frames_from_obj(_frame_obj(**bad), "f.json")


def test_missing_fields_and_bad_json(tmp_path):
    with pytest.raises(SchemaError, match="frames"):
        io.frames_from_obj({"scene": "x"})
    obj = _frame_obj()
    del obj["frames"][0]["polylines"][0]["id"]
    with pytest.raises(SchemaError, match="'id'"):
        io.frames_from_obj(obj)
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    with pytest.raises(SchemaError, match="invalid JSON"):
        io.read_frames(p)


def test_map_duplicate_gid_rejected():
    el = {"class": "divider", "gid": 0, "pts": [[0, 0], [1, 0]], "frames": [0]}
    with pytest.raises(SchemaError, match="duplicate gid"):
        io.map_from_obj({"scene": "", "config": {}, "elements": [el, el]})


def test_objects_roundtrip(tmp_path):
    boxes = {3: [ObjectBox(1.5, -2.0, 0.25, 4.5, 1.9, "car")], 7: []}
    p = tmp_path / "o.json"
    io.write_objects(p, boxes)
    assert io.read_objects(p) == boxes


def test_completed_roundtrip(tmp_path):
    gmap = GlobalVectorMap.from_polylines([Polyline(SemanticClass.DIVIDER, [[0.0, 0.0], [10.0, 0.0]])])
    frame = FrameObservation(4, Pose2D(), (
        FramePolyline(Polyline(SemanticClass.DIVIDER, [[0.0, 0.0], [4.0, 0.0]]), None),
        FramePolyline(Polyline(SemanticClass.DIVIDER, [[5.5, 0.0], [10.0, 0.0]]), None)))
    cm = complete(gmap, frame, Pose2D(), CompletionConfig())
    p = tmp_path / "c.json"
    io.write_completed(p, {4: cm}, "s")
    back = io.read_completed(p)
    assert set(back) == {4}
    (item,) = back[4].items
    assert [src for src, _ in item.runs()] == ["obs", "bridge", "obs"]
    assert np.array_equal(item.geometry.pts, cm.items[0].geometry.pts)


def test_completed_rejects_unknown_source():
    obj = {"scene": "", "config": {}, "elements": [
        {"class": "divider", "gid": 0, "frames": [0], "ids": [], "pts": [[0, 0], [1, 0]],
         "runs": [{"src": "guess", "pts": [[0, 0], [1, 0]]}]}]}
    with pytest.raises(SchemaError, match="guess"):
        io.completed_from_obj(obj)


def test_read_poses(tmp_path):
    p = tmp_path / "p.csv"
    p.write_text(",".join(io.POSE_COLUMNS) + "\n3,2,5,1.5,-0.25,90.0,,\n")
    poses = io.read_poses(p)
    assert poses[3].tx == 1.5 and poses[3].ty == -0.25
    assert poses[3].phi == pytest.approx(math.pi / 2)
