import math

import numpy as np
import pytest

from lgfa.errors import SpecError
from lgfa.geom import CLASSES, SemanticClass, arc_length
from lgfa.map_model import Pose2D
from lgfa.rng import Xoshiro256, splitmix64
from lgfa.scenario import (
    ScenarioSpec,
    centerline,
    clip_to_disk,
    ego_pose_at,
    generate_gt,
    observable_gt,
    perturbations,
    perturbed_init,
    simulate_frames,
)

DIV, BND, PC = SemanticClass.DIVIDER, SemanticClass.BOUNDARY, SemanticClass.PED_CROSSING


# PRNG ---------------------------------------------------------------------

def test_splitmix64_reference_stream():
    st, outs = 0, []
    for _ in range(3):
        st, o = splitmix64(st)
        outs.append(o)
    assert outs == [0xE220A8397B1DCDAF, 0x6E789E6AA1B965F4, 0x06C45D188009454F]


def _xoshiro_ref(seed, n):
    """Independent xoshiro256** over numpy uint64 arithmetic."""
    with np.errstate(over="ignore"):
        s = []
        z = np.uint64(seed)
        for _ in range(4):
            z = z + np.uint64(0x9E3779B97F4A7C15)
            x = z
            x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
            x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
            s.append(x ^ (x >> np.uint64(31)))

        def rotl(x, k):
            return (x << np.uint64(k)) | (x >> np.uint64(64 - k))

        out = []
        for _ in range(n):
            out.append(int(rotl(s[1] * np.uint64(5), 7) * np.uint64(9)))
            t = s[1] << np.uint64(17)
            s[2] ^= s[0]
            s[3] ^= s[1]
            s[1] ^= s[2]
            s[0] ^= s[3]
            s[2] ^= t
            s[3] = rotl(s[3], 45)
        return out


@pytest.mark.parametrize("seed", [0, 1, 42, 2**63 + 5])
def test_xoshiro_matches_reference(seed):
    g = Xoshiro256(seed)
    assert [g.next_u64() for _ in range(50)] == _xoshiro_ref(seed, 50)


def test_uniform_and_normal_moments():
    g = Xoshiro256(7)
    u = np.array([g.uniform() for _ in range(20000)])
    assert u.min() >= 0 and u.max() < 1 and abs(u.mean() - 0.5) < 0.01
    z = np.array(g.normals(20000, 2.0))
    assert abs(z.mean()) < 0.05 and abs(z.std() - 2.0) < 0.05


# ground truth ---------------------------------------------------------------

def test_straight_default_layout():
    gt = generate_gt(ScenarioSpec())
    (div,) = gt.of(DIV)
    assert arc_length(div.geometry) == pytest.approx(100.0)
    assert np.all(div.geometry.pts[:, 1] == 0.0)
    bnd = sorted(g.geometry.pts[0, 1] for g in gt.of(BND))
    assert bnd == [-3.5, 3.5]
    assert len(gt.of(PC)) == 2


def test_curve_boundary_length_difference():
    R = 50.0
    spec = ScenarioSpec(template="curve", radius=R, length=R * math.pi / 2, crossings=())
    lens = sorted(arc_length(g.geometry) for g in generate_gt(spec).of(BND))
    assert lens[1] - lens[0] == pytest.approx(math.pi / 2 * spec.lane_count * spec.lane_width, abs=1e-3)


@pytest.mark.parametrize("template", ["straight", "curve"])
def test_crossing_perpendicular(template):
    spec = ScenarioSpec(template=template, crossings=(30.0,))
    (pc,) = generate_gt(spec).of(PC)
    d = pc.geometry.pts[1] - pc.geometry.pts[0]
    _, t, _ = centerline(spec, [30.0])
    assert abs(d @ t[0]) / np.hypot(*d) < 1e-9
    mid = pc.geometry.pts.mean(0)
    p, _, _ = centerline(spec, [30.0])
    assert np.abs(mid - p[0]).max() < 1e-9


def test_intersection_has_cross_road():
    gt = generate_gt(ScenarioSpec(template="intersection"))
    vertical = [g for g in gt.of(BND) if g.geometry.pts[0, 0] == g.geometry.pts[-1, 0]]
    assert len(vertical) == 4


def test_spec_errors():
    with pytest.raises(SpecError):
        generate_gt(ScenarioSpec(crossings=(120.0,)))
    with pytest.raises(SpecError):
        ScenarioSpec(dropout_rate=1.5)
    with pytest.raises(SpecError):
        ScenarioSpec(template="roundabout")
    with pytest.raises(SpecError):
        ScenarioSpec.from_dict({"lanes": 3})


# observations -----------------------------------------------------------------

def test_noiseless_frames_invert_to_gt_clip():
    spec = ScenarioSpec()
    gt = generate_gt(spec)
    for f in simulate_frames(gt, spec)[::5]:
        T = f.ego_pose_ref
        pieces = [(g.class_id, p) for g in gt.all() for p in clip_to_disk(g.geometry.pts, T.t, spec.fov_range)]
        assert len(pieces) == len(f.polylines)
        for (c, clip), fp in zip(pieces, f.polylines):
            back = T.apply(fp.geometry.pts)
            assert fp.class_id is c
            assert np.abs(back[[0, -1]] - clip[[0, -1]]).max() < 1e-9
            # every vertex lies on the clipped ground truth
            a, b = clip[:-1], clip[1:]
            for q in back:
                t = np.clip(((q - a) * (b - a)).sum(1) / ((b - a) ** 2).sum(1), 0, 1)
                assert np.hypot(*(a + t[:, None] * (b - a) - q).T).min() < 1e-9


def test_full_dropout_empties_frames():
    spec = ScenarioSpec(dropout_rate=1.0)
    assert all(len(f.polylines) == 0 for f in simulate_frames(generate_gt(spec), spec))


def test_dropout_law_of_large_numbers():
    spec = ScenarioSpec(length=1000.0, frame_count=200, crossings=(), seed=3)
    gt = generate_gt(spec)
    full = sum(len(f.polylines) for f in simulate_frames(gt, spec))
    kept = sum(len(f.polylines) for f in simulate_frames(gt, spec.replace(dropout_rate=0.4)))
    assert abs((1 - kept / full) - 0.4) <= 0.05


def test_fragmentation_splits_pieces():
    spec = ScenarioSpec(fragment_rate=1.0)
    gt = generate_gt(spec)
    f = simulate_frames(gt, spec)[10]
    ids = [fp.persistent_id for fp in f.polylines if fp.class_id is DIV]
    assert len(ids) == 2 and len(set(ids)) == 1


def test_simulation_deterministic():
    spec = ScenarioSpec(obs_noise=0.1, dropout_rate=0.3, fragment_rate=0.3, seed=11)
    gt = generate_gt(spec)
    a, b = simulate_frames(gt, spec), simulate_frames(gt, spec)
    for fa, fb in zip(a, b):
        assert len(fa.polylines) == len(fb.polylines)
        for pa, pb in zip(fa.polylines, fb.polylines):
            assert np.array_equal(pa.geometry.pts, pb.geometry.pts)
    c = simulate_frames(gt, spec.replace(seed=12))
    assert any(len(x.polylines) != len(y.polylines) or not np.array_equal(x.polylines[0].geometry.pts, y.polylines[0].geometry.pts)
               for x, y in zip(a, c))


def test_ego_advances_along_centerline():
    spec = ScenarioSpec(template="curve")
    p1, p2 = ego_pose_at(spec, 1), ego_pose_at(spec, 2)
    assert p2.phi - p1.phi == pytest.approx(spec.frame_spacing / spec.radius)


def test_observable_gt_inside_disks():
    spec = ScenarioSpec(template="intersection")
    gt = generate_gt(spec)
    obs = observable_gt(gt, spec)
    centers = np.array([ego_pose_at(spec, k).t for k in range(spec.frame_count)])
    for c in CLASSES:
        for g in obs.of(c):
            d = np.hypot(*(g.geometry.pts[:, None, :] - centers[None]).transpose(2, 0, 1)).min(1)
            assert d.max() <= spec.fov_range + 1e-9
    assert sum(arc_length(g.geometry) for g in obs.of(BND)) < sum(arc_length(g.geometry) for g in gt.of(BND))


# perturbations -----------------------------------------------------------------

@pytest.mark.parametrize("alpha", [1.0, 2.0, 3.0])
def test_perturbation_magnitudes(alpha):
    prot = perturbations(alpha)
    assert prot.K == 8
    for p in prot.poses:
        assert math.hypot(p.tx, p.ty) == pytest.approx(alpha, abs=1e-12)
        assert round(abs(math.degrees(p.phi)), 9) in (0.0, round(2.0 * alpha, 9))
    assert sum(1 for p in prot.poses if p.phi != 0) == 4


def test_perturbation_deterministic_and_range():
    assert perturbations(2.0) == perturbations(2.0)
    with pytest.raises(SpecError):
        perturbations(0.5)


def test_initial_error_equals_alpha():
    truth = Pose2D(10.0, -3.0, 0.7)
    for p in perturbations(3.0).poses:
        d = perturbed_init(truth, p).inverse().compose(truth)
        assert math.hypot(d.tx, d.ty) == pytest.approx(3.0, abs=1e-12)
