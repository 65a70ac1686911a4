import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from lgfa.errors import GeometryError
from lgfa.geom import CLASSES, SemanticClass
from lgfa.map_model import (
    GlobalVectorMap,
    ObjectBox,
    Pose2D,
    polyline,
    pose_apply,
    pose_compose,
    pose_inverse,
    transform_polyline,
    wrap_angle,
)

angles = st.floats(-10.0, 10.0, allow_nan=False)
coords = st.floats(-100.0, 100.0, allow_nan=False)
poses = st.builds(Pose2D, coords, coords, angles)


def rot(phi):
    return np.array([[math.cos(phi), -math.sin(phi)], [math.sin(phi), math.cos(phi)]])


def test_wrap_angle_range():
    assert wrap_angle(math.pi) == math.pi
    assert wrap_angle(-math.pi) == math.pi
    assert wrap_angle(3 * math.pi) == pytest.approx(math.pi)
    assert wrap_angle(0.1 + 2 * math.pi) == pytest.approx(0.1)


def test_apply_examples():
    assert np.allclose(pose_apply(Pose2D(), (3, 4)), (3, 4))
    assert np.allclose(pose_apply(Pose2D(1, 0, math.pi / 2), (1, 0)), (1, 1), atol=1e-15)
    T = Pose2D(0.5, -0.2, 0.3)
    oracle = rot(0.3) @ np.array([2.0, 1.0]) + np.array([0.5, -0.2])
    assert np.abs(pose_apply(T, (2, 1)) - oracle).max() < 1e-12


def test_apply_vectorised_matches_rows():
    rng = np.random.default_rng(0)
    T = Pose2D(1.0, 2.0, 0.5)
    P = rng.normal(size=(30, 2))
    out = T.apply(P)
    for p, q in zip(P, out):
        assert np.abs(rot(0.5) @ p + T.t - q).max() < 1e-12


def test_compose_examples():
    A = Pose2D(1.0, -2.0, 0.4)
    assert pose_compose(A, Pose2D()) == A
    B = pose_compose(Pose2D(1, 0, math.pi / 2), Pose2D(1, 0, math.pi / 2))
    assert B.phi == pytest.approx(math.pi)
    assert np.allclose(B.t, (1, 1))


def test_compose_identity_seed3():
    rng = np.random.default_rng(3)
    A = Pose2D(*rng.normal(size=2), rng.uniform(-math.pi, math.pi))
    B = Pose2D(*rng.normal(size=2), rng.uniform(-math.pi, math.pi))
    P = rng.normal(size=(100, 2)) * 10
    lhs = pose_compose(A, B).apply(P)
    rhs = A.apply(B.apply(P))
    assert np.abs(lhs - rhs).max() < 1e-12


def test_inverse_examples():
    assert pose_inverse(Pose2D()) == Pose2D()
    inv = pose_inverse(Pose2D(2, -3, 0))
    assert (inv.tx, inv.ty, inv.phi) == (-2, 3, 0)
    T = Pose2D(1, 2, 0.7)
    P = np.random.default_rng(1).normal(size=(50, 2))
    assert np.abs(T.inverse().apply(T.apply(P)) - P).max() < 1e-12


def test_non_finite_pose_rejected():
    with pytest.raises(GeometryError):
        Pose2D(float("nan"), 0, 0)


@given(poses, poses, poses)
def test_group_associativity(a, b, c):
    P = np.array([[0.0, 0.0], [1.0, 2.0], [-3.0, 5.0]])
    lhs = pose_compose(pose_compose(a, b), c).apply(P)
    rhs = pose_compose(a, pose_compose(b, c)).apply(P)
    assert np.abs(lhs - rhs).max() < 1e-9


@given(poses)
def test_group_identity_and_inverse(a):
    P = np.array([[0.0, 0.0], [1.0, 2.0], [-3.0, 5.0]])
    assert np.abs(pose_compose(a, Pose2D()).apply(P) - a.apply(P)).max() < 1e-9
    assert np.abs(pose_compose(Pose2D(), a).apply(P) - a.apply(P)).max() < 1e-9
    e = pose_compose(a, pose_inverse(a))
    assert abs(e.tx) < 1e-9 and abs(e.ty) < 1e-9 and abs(e.phi) < 1e-9


@given(poses)
def test_phi_always_wrapped(a):
    assert -math.pi < a.phi <= math.pi


def test_transform_polyline_keeps_class():
    p = polyline(SemanticClass.DIVIDER, [[0, 0], [1, 0]])
    q = transform_polyline(Pose2D(0, 0, math.pi / 2), p)
    assert q.class_id is SemanticClass.DIVIDER
    assert np.allclose(q.pts, [[0, 0], [0, 1]], atol=1e-15)


def test_from_polylines_ids_per_class():
    m = GlobalVectorMap.from_polylines([
        polyline(SemanticClass.DIVIDER, [[0, 0], [1, 0]]),
        polyline(SemanticClass.BOUNDARY, [[0, 1], [1, 1]]),
        polyline(SemanticClass.DIVIDER, [[0, 2], [1, 2]]),
    ])
    assert [g.global_id for g in m.of(SemanticClass.DIVIDER)] == [0, 1]
    assert [g.global_id for g in m.of(SemanticClass.BOUNDARY)] == [0]
    assert set(m.elements) == set(CLASSES)


def test_copy_is_independent():
    m = GlobalVectorMap.from_polylines([polyline(SemanticClass.DIVIDER, [[0, 0], [1, 0]])])
    c = m.copy()
    c.elements[SemanticClass.DIVIDER].clear()
    assert len(m.of(SemanticClass.DIVIDER)) == 1


def test_box_corners():
    b = ObjectBox(1.0, 2.0, math.pi / 2, 4.0, 2.0)
    corners = b.corners()
    assert np.allclose(corners, [[0, 4], [0, 0], [2, 0], [2, 4]])
    with pytest.raises(GeometryError):
        ObjectBox(0, 0, 0, 0.0, 1.0)
