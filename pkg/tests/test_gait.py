import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from quadstack import gait

TROT = gait.gait_preset("trot", period=0.4)
P = gait.PhaseGainParams()

NOMINAL_FEET = np.array([[0.3, -0.128], [0.3, 0.128], [-0.3, -0.128], [-0.3, 0.128]])


class TestSubphase:
    def test_trot_start(self):
        in_contact, phi = gait.subphase(0.0, TROT, leg=0)
        assert in_contact and phi == 0.0

    def test_quarter_period(self):
        in_contact, phi = gait.subphase(0.1, TROT, leg=0)
        assert in_contact
        assert_allclose(phi, 0.5)

    def test_offset_leg_starts_in_swing(self):
        in_contact, phi = gait.subphase(0.0, TROT, leg=1)
        assert not in_contact and phi == 0.0

    def test_piecewise_linear(self):
        ts = np.linspace(0.0, 0.199, 100)
        phis = [gait.subphase(t, TROT, 0)[1] for t in ts]
        assert_allclose(np.diff(phis), np.diff(phis)[0], atol=1e-9)

    def test_stand_preset_always_contact(self):
        stand = gait.gait_preset("stand")
        for t in np.linspace(0.0, 2.0, 50):
            for leg in range(4):
                assert gait.subphase(t, stand, leg)[0]


class TestPhaseGains:
    def test_contact_mid(self):
        assert_allclose(gait.phase_gain_contact(0.5, P), 0.9999994, atol=1e-6)

    def test_contact_edge(self):
        assert_allclose(gait.phase_gain_contact(0.0, P), 0.5, atol=1e-9)

    def test_contact_symmetry(self):
        for phi in (0.1, 0.3, 0.45):
            assert_allclose(gait.phase_gain_contact(phi, P),
                            gait.phase_gain_contact(1.0 - phi, P), atol=1e-12)

    def test_swing_edge(self):
        assert_allclose(gait.phase_gain_swing(0.0, P), 0.5, atol=1e-9)

    def test_swing_mid_near_zero(self):
        assert gait.phase_gain_swing(0.5, P) < 1e-5

    def test_swing_symmetry(self):
        for phi in (0.2, 0.35):
            assert_allclose(gait.phase_gain_swing(phi, P),
                            gait.phase_gain_swing(1.0 - phi, P), atol=1e-12)

    def test_transition_continuity(self):
        # end of contact vs start of swing differ by ~erf tail only
        assert abs(gait.total_weight(True, 1.0, P) - gait.total_weight(False, 0.0, P)) <= 1e-3

    @given(st.floats(0.0, 1.0), st.floats(0.02, 1.0), st.booleans())
    def test_weight_in_unit_interval(self, phi, sigma, contact):
        p = gait.PhaseGainParams(sigma, sigma, sigma, sigma)
        w = gait.total_weight(contact, phi, p)
        assert -1e-12 <= w <= 1.0 + 1e-12


class TestPolygon:
    def test_virtual_points_extremes(self):
        p = np.array([1.0, 0.0])
        prev, nxt = np.array([0.0, 0.0]), np.array([2.0, 2.0])
        xm, xp = gait.virtual_points(p, prev, nxt, 1.0)
        assert_allclose(xm, p)
        assert_allclose(xp, p)
        xm, xp = gait.virtual_points(p, prev, nxt, 0.0)
        assert_allclose(xm, prev)
        assert_allclose(xp, nxt)
        xm, _ = gait.virtual_points(p, prev, nxt, 0.5)
        assert_allclose(xm, [0.5, 0.0])

    def test_vertex_all_weights_one(self):
        verts = gait.support_polygon(NOMINAL_FEET, np.ones(4))
        assert_allclose(verts, NOMINAL_FEET, atol=1e-12)

    def test_vertex_midpoint_case(self):
        p = np.array([1.0, 0.0])
        xm, xp = np.array([0.0, 0.0]), np.array([2.0, 0.0])
        v = gait.polygon_vertex(p, xm, xp, 0.0, 1.0, 1.0)
        assert_allclose(v, [1.0, 0.0])

    def test_vertex_degenerate_raises(self):
        with pytest.raises(gait.DegenerateWeightsError):
            gait.polygon_vertex(np.zeros(2), np.zeros(2), np.zeros(2), 0.0, 0.0, 0.0)

    def test_vertices_inside_hull(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            w = rng.uniform(0.01, 1.0, size=4)
            verts = gait.support_polygon(NOMINAL_FEET, w)
            lo, hi = NOMINAL_FEET.min(axis=0), NOMINAL_FEET.max(axis=0)
            assert np.all(verts >= lo - 1e-12) and np.all(verts <= hi + 1e-12)

    def test_desired_com_translation_equivariance(self):
        w = np.array([0.9, 0.3, 0.4, 0.8])
        d = np.array([0.7, -0.2])
        com0 = gait.desired_com(gait.support_polygon(NOMINAL_FEET, w))
        com1 = gait.desired_com(gait.support_polygon(NOMINAL_FEET + d, w))
        assert_allclose(com1, com0 + d, atol=1e-12)

    def test_trot_zero_velocity_com_at_centroid(self):
        # symmetric rectangle + diagonal-pair weights: the vertex set is
        # point-symmetric, so the mean sits at the centroid at every phase
        for t in np.linspace(0.0, TROT.period, 81):
            weights = np.array([
                gait.total_weight(*gait.subphase(t, TROT, leg), P) for leg in range(4)
            ])
            com = gait.desired_com(gait.support_polygon(NOMINAL_FEET, weights))
            assert np.linalg.norm(com - NOMINAL_FEET.mean(axis=0)) <= 1e-9

    def test_com_continuity_across_switch(self):
        dt = 1e-3
        coms = []
        for t in np.arange(0.15, 0.25, dt):
            weights = np.array([
                gait.total_weight(*gait.subphase(t, TROT, leg), P) for leg in range(4)
            ])
            coms.append(gait.desired_com(gait.support_polygon(NOMINAL_FEET, weights)))
        steps = np.linalg.norm(np.diff(np.array(coms), axis=0), axis=1)
        assert np.max(steps) <= 1e-3


class TestFootstep:
    def test_raibert_term(self):
        out = gait.footstep(np.zeros(2), 0.3, np.array([1.0, 0.0]), np.array([1.0, 0.0]), z0=0.45)
        assert_allclose(out, [0.15, 0.0], atol=1e-12)

    def test_capture_term_vanishes_on_track(self):
        v = np.array([0.4, -0.2])
        out = gait.footstep(np.array([0.1, 0.2]), 0.25, v, v, z0=0.3)
        assert_allclose(out, [0.1, 0.2] + 0.5 * 0.25 * v, atol=1e-12)

    def test_capture_term_magnitude(self):
        out = gait.footstep(np.zeros(2), 0.0, np.zeros(2), np.array([0.2, 0.0]), z0=0.3, g=9.81)
        assert_allclose(out, [np.sqrt(0.3 / 9.81) * 0.2, 0.0], atol=1e-6)
        assert_allclose(out[0], 0.0350, atol=2e-4)

    def test_rejects_bad_params(self):
        with pytest.raises(ValueError):
            gait.footstep(np.zeros(2), 0.3, np.zeros(2), np.zeros(2), z0=-1.0)
