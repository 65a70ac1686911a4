import math

import numpy as np
from hypothesis import given, strategies as st

from lgfa.completion import CompletedMap
from lgfa.foreground import augment, box_to_map
from lgfa.map_model import FrameObservation, ObjectBox, Pose2D, wrap_angle


def test_identity_leaves_objects():
    b = ObjectBox(1.0, -2.0, 0.3, 4.0, 2.0, "car")
    assert box_to_map(b, Pose2D()) == b


def test_quarter_turn():
    out = box_to_map(ObjectBox(1.0, 0.0, 0.0, 4.0, 2.0), Pose2D(0, 0, math.pi / 2))
    assert abs(out.cx) < 1e-15 and out.cy == 1.0 and out.yaw == math.pi / 2


def test_corner_consistency_seed13():
    rng = np.random.default_rng(13)
    theta = Pose2D(*rng.uniform(-50, 50, 2), rng.uniform(-math.pi, math.pi))
    for _ in range(20):
        b = ObjectBox(*rng.uniform(-30, 30, 2), rng.uniform(-math.pi, math.pi), *rng.uniform(0.5, 6, 2), "obj")
        assert np.abs(box_to_map(b, theta).corners() - theta.apply(b.corners())).max() < 1e-12


def test_augment_attaches_unmodified():
    cm = CompletedMap()
    theta = Pose2D(3.0, 4.0, 0.2)
    boxes = [ObjectBox(1.0, 2.0, 0.5, 4.0, 2.0, "car")]
    af = augment(FrameObservation(7, Pose2D()), boxes, theta, cm)
    assert af.frame_index == 7 and af.completed_map is cm
    assert af.ego_in_map == theta and af.refined_pose == theta
    assert af.objects_in_map == [box_to_map(boxes[0], theta)]
    assert augment(FrameObservation(7, Pose2D()), None, theta, cm).objects_in_map == []


coords = st.floats(-100, 100, allow_nan=False)
angles = st.floats(-4, 4, allow_nan=False)


@given(coords, coords, angles, coords, coords, angles)
def test_round_trip(tx, ty, phi, cx, cy, yaw):
    theta = Pose2D(tx, ty, phi)
    b = ObjectBox(cx, cy, wrap_angle(yaw), 4.0, 2.0)
    back = box_to_map(box_to_map(b, theta), theta.inverse())
    assert abs(back.cx - b.cx) < 1e-9 and abs(back.cy - b.cy) < 1e-9
    assert abs(wrap_angle(back.yaw - b.yaw)) < 1e-9
    assert -math.pi < box_to_map(b, theta).yaw <= math.pi
