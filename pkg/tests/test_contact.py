import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from residskill.contact import (ContactParams, ContactSim, InitRanges, NonFinite, PegHoleGeometry, SimState,
                                contact_forces, contact_query, contact_wrench, insertion_depth,
                                peg_sample_points, sample_initial_pose, step)
from residskill.se3 import Pose6, Twist6, Wrench6

GEOM = PegHoleGeometry()
PARAMS = ContactParams()


def test_geometry_validation():
    assert GEOM.clearance == pytest.approx(0.001)
    with pytest.raises(ValueError):
        PegHoleGeometry(peg_side=0.021, hole_side=0.021)
    with pytest.raises(ValueError):
        ContactParams(mu=-0.1)
    ContactParams(mu=0.3)


def test_query_free_space_empty():
    assert contact_query(Pose6(z=0.01), GEOM) == []


def test_query_top_plane_contact():
    cs = contact_query(Pose6(x=0.025, z=-5e-4), GEOM)
    assert len(cs) >= 1
    for c in cs:
        assert c.normal.tolist() == [0.0, 0.0, 1.0]
        assert c.depth == pytest.approx(5e-4, abs=1e-12)


def test_query_wall_contact():
    # per-side gap is clearance / 2; push 0.2 mm past it
    off = GEOM.clearance / 2 + 2e-4
    cs = contact_query(Pose6(x=off, z=-0.01), GEOM)
    assert cs
    for c in cs:
        assert c.normal[2] == 0.0
        assert c.normal == pytest.approx([-1, 0, 0])
        assert c.depth == pytest.approx(2e-4, abs=1e-12)


def test_wrench_examples():
    assert contact_wrench([], Twist6(), PARAMS, Pose6()).to_array().tolist() == [0.0] * 6
    cs = contact_query(Pose6(x=0.025, z=-5e-4), GEOM, samples=np.array([[0.0, 0.0, 0.0]]))
    assert len(cs) == 1
    w = contact_wrench(cs, Twist6(), PARAMS, Pose6(x=0.025, z=-5e-4))
    assert w.fz == pytest.approx(5.0, abs=1e-12)
    assert abs(w.fx) + abs(w.fy) == 0.0


def test_step_free_space():
    s = SimState(Pose6(z=0.01), Twist6(), 0.0, Wrench6())
    s2, w = step(s, Twist6(vz=-0.01), 0.002, GEOM, PARAMS)
    assert s2.peg_pose.z == pytest.approx(0.01 - 2e-5, abs=1e-15)
    assert w.to_array().tolist() == [0.0] * 6
    assert s2.time == 0.002


def test_step_noop():
    s = SimState(Pose6(0.001, 0.002, 0.01, 0.1, -0.1, 0.02), Twist6(), 1.0, Wrench6())
    s2, w = step(s, Twist6(), 0.002, GEOM, PARAMS)
    assert np.array_equal(s2.peg_pose.to_array(), s.peg_pose.to_array())
    assert s2.time == pytest.approx(1.002)
    assert s2.last_wrench == w


def test_step_pressing_reaches_fixed_point():
    sim = ContactSim(GEOM, PARAMS)
    pose = np.array([0.025, 0.0, 1e-4, 0, 0, 0])
    cmd = np.array([0, 0, -0.01, 0, 0, 0])
    fz = []
    for _ in range(2000):
        pose, tw, w = sim.step_array(pose, cmd, 0.002)
        fz.append(w[2])
    assert fz[-1] > 0
    assert abs(fz[-1] - fz[-2]) < 1e-6
    # fixed point of the implicit update: the deflection cancels the commanded
    # step, with N coplanar contacts each seeing depth d + v*dt and rate v
    n = len(sim.contacts(pose)[2])
    v, dt = 0.01, 0.002
    m = dt * PARAMS.admittance_lin
    step_len = v * dt
    expected = step_len * (1 + m * n * PARAMS.k_n) / m - n * PARAMS.k_n * step_len - n * PARAMS.b_n * v
    assert fz[-1] == pytest.approx(expected, rel=1e-9)
    pts = sim.contacts(pose)[2]
    assert pts.max() <= PARAMS.max_penetration + 1e-6


def test_step_errors():
    s = SimState(Pose6(z=0.01), Twist6(), 0.0, Wrench6())
    with pytest.raises(ValueError):
        step(s, Twist6(), 0.0, GEOM, PARAMS)
    sim = ContactSim(GEOM, PARAMS)
    with pytest.raises(NonFinite):
        sim.step(s, np.array([np.nan, 0, 0, 0, 0, 0]), 0.002)


def test_step_deterministic(rng):
    sim = ContactSim(GEOM, PARAMS)
    pose = np.array([0.003, -0.001, 0.0005, 0.1, 0.12, 0.0])
    cmd = rng.normal(size=6) * [0.02, 0.02, 0.05, 0.2, 0.2, 0.2]
    a = sim.step_array(pose, cmd, 0.002)
    b = sim.step_array(pose, cmd, 0.002)
    for x, y in zip(a, b):
        assert np.array_equal(x, y)


def test_insertion_depth_examples():
    assert insertion_depth(Pose6(z=0.01), GEOM) == 0.0
    assert insertion_depth(Pose6(z=-0.005), GEOM) == pytest.approx(0.005)
    assert insertion_depth(Pose6(x=0.025, z=0.0), GEOM) == 0.0


def test_sample_initial_pose_examples(rng):
    p = sample_initial_pose(rng, InitRanges(incline_lo=0.1, incline_hi=0.1))
    assert abs(p.alpha) == 0.1 and abs(p.beta) == 0.1
    p = sample_initial_pose(rng, InitRanges(lateral_offset=0.0, axial_height=(0.02, 0.02)))
    assert (p.x, p.y, p.z) == (0.0, 0.0, 0.02)
    alphas = np.array([abs(sample_initial_pose(rng, InitRanges()).alpha) for _ in range(10_000)])
    assert alphas.min() >= 0.1 and alphas.max() <= 0.15


def test_sample_points_count():
    assert len(peg_sample_points(GEOM, 0)) == 8
    assert len(peg_sample_points(GEOM, 3)) == 8 + 12 * 3


contact_state = st.tuples(
    st.integers(1, 8), st.integers(0, 2**31 - 1), st.floats(0.0, 1.0), st.floats(0, 2e-3))


@settings(max_examples=200, deadline=None)
@given(contact_state)
def test_force_law_properties(args):
    n, seed, mu, scale = args
    rng = np.random.default_rng(seed)
    prm = ContactParams(mu=mu)
    nrm = rng.normal(size=(n, 3))
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    depths = rng.uniform(0, scale + 1e-9, n)
    pts = rng.normal(size=(n, 3)) * 0.01
    twist = rng.normal(size=6) * 0.05
    fn, ft, w = contact_forces(pts, nrm, depths, twist, np.zeros(3), prm)
    assert np.all(fn >= 0) and np.all(fn <= prm.f_cap)
    assert np.all(np.linalg.norm(ft, axis=1) <= mu * fn + 1e-9)
    # a penetrating point always pushes, so the wrench is nonzero iff contacts exist
    assert np.any(w != 0)


def test_wrench_zero_iff_no_contacts(rng):
    sim = ContactSim(GEOM, PARAMS)
    for _ in range(300):
        pose = np.concatenate([rng.uniform(-0.003, 0.003, 2), rng.uniform(-0.003, 0.002, 1),
                               rng.uniform(-0.15, 0.15, 3)])
        pts, nrm, dep = sim.contacts(pose)
        _, _, w = contact_forces(pts, nrm, dep, np.zeros(6), pose[:3], PARAMS)
        assert (len(dep) == 0) == bool(np.all(w == 0))
