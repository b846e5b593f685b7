import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from herwcal import herw, metrics, planar, synth
from herwcal.dq import Pose, quat_to_matrix
from herwcal.errors import DegeneracyError, InvalidInputError
from oracles import random_pose


def angle_deg(u, v):
    return np.degrees(np.arccos(np.clip(abs(u @ v), -1.0, 1.0)))


def mirror(sc, t=0):
    """The second cost-equivalent solution: target below the carrier origin."""
    u_v, u_w = planar.up_vectors(sc.problem().pairs()[t, 0])
    gamma = planar.height_offset(sc.X[t], u_v)
    X = Pose.from_translation(-2 * gamma * u_v) @ sc.X[t]
    Ys = [Pose.from_translation(-2 * gamma * u_w) @ Y for Y in sc.Y]
    return X, Ys, u_v, u_w, gamma


class TestFitPlaneUp:
    def test_horizontal(self, rng):
        P = np.column_stack([rng.uniform(-10, 10, (30, 2)), np.zeros(30)])
        fit = planar.fit_plane_up(P)
        assert np.allclose(fit.up, [0, 0, 1], atol=1e-12) and fit.out_of_plane_rms < 1e-12

    def test_tilted(self, rng):
        xy = rng.uniform(-5, 5, (30, 2))
        P = np.column_stack([xy[:, 0], xy[:, 1], 3.0 - xy[:, 0]])  # x + z = 3
        assert np.allclose(planar.fit_plane_up(P).up, np.array([1, 0, 1]) / np.sqrt(2), atol=1e-12)

    def test_noisy_large_extent(self, rng):
        n = np.array([0.1, -0.2, 1.0])
        n /= np.linalg.norm(n)
        B = np.linalg.svd(n[None])[2][1:]
        P = rng.uniform(-25, 25, (500, 2)) @ B + rng.normal(0, 0.01, (500, 3))
        fit = planar.fit_plane_up(P)
        # eigen-oracle on the covariance
        w, V = np.linalg.eigh(np.cov(P.T))
        assert angle_deg(fit.up, V[:, 0]) < 1e-9
        assert angle_deg(fit.up, n) < 0.1
        assert abs(np.linalg.norm(fit.up) - 1) < 1e-12

    def test_orientation_policy(self, rng):
        P = np.column_stack([rng.uniform(-1, 1, (10, 2)), np.zeros(10)])
        assert planar.fit_plane_up(P, reference=(0, 0, -1)).up[2] == -1.0

    @pytest.mark.parametrize("P", [np.zeros((2, 3)), np.outer(np.arange(5.0), [1, 2, 3]), np.ones((6, 3))])
    def test_degenerate(self, P):
        with pytest.raises(DegeneracyError):
            planar.fit_plane_up(P)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_property_rotation_equivariance(seed):
    rng = np.random.default_rng(seed)
    P = rng.normal(size=(20, 3)) * [5.0, 3.0, 0.2]
    R = quat_to_matrix(random_pose(rng).rotation)
    u = planar.fit_plane_up(P).up
    ur = planar.fit_plane_up(P @ R.T).up
    assert min(np.linalg.norm(ur - R @ u), np.linalg.norm(ur + R @ u)) < 1e-9


class TestHeightOffset:
    def test_vertical(self):
        assert planar.height_offset(Pose.from_translation([0, 0, 1.5]), [0, 0, 1]) == 1.5

    def test_orthogonal(self):
        assert planar.height_offset(Pose.from_translation([0.3, -2, 0]), [0, 0, 1]) == 0.0

    def test_from_norm_and_in_plane_offset(self):
        h = np.sqrt(1.88**2 - 0.6**2)
        X = Pose.from_translation([0.6, 0.0, h])
        assert abs(np.linalg.norm(X.translation) - 1.88) < 1e-15
        assert abs(planar.height_offset(X, [0, 0, 1]) - 1.7817) < 1e-4


class TestCorrectSolution:
    def test_identity_when_above(self, rng):
        X, Ys = Pose.from_translation([0.6, 0, 1.78]), [random_pose(rng)]
        X2, Ys2, rec = planar.correct_solution(X, Ys, [0, 0, 1], [0, 0, 1], 1.78)
        assert X2 is X and Ys2[0] is Ys[0] and not rec.applied

    def test_mirrored_solution_restored(self):
        sc = synth.generate_planar(seed=1)
        Xm, Ysm, u_v, u_w, gamma = mirror(sc)
        gm = planar.height_offset(Xm, u_v)
        assert abs(gm + gamma) < 1e-9 and gm < 0
        X2, Ys2, rec = planar.correct_solution(Xm, Ysm, u_v, u_w, gm)
        assert rec.applied
        assert np.abs(X2.translation - sc.X[0].translation).max() < 1e-6
        assert np.abs(Ys2[0].translation - sc.Y[0].translation).max() < 1e-6
        assert planar.height_offset(X2, u_v) == pytest.approx(-gm, abs=1e-12)

    def test_two_cost_equivalent_candidates(self):
        sc = synth.generate_planar(seed=2)
        p = sc.problem(oracle_signs=True)
        Xm, Ysm, *_ = mirror(sc)
        c_true = herw.residual_cost(p, sc.X, sc.Y)
        c_mirror = herw.residual_cost(p, [Xm], Ysm)
        assert abs(c_true - c_mirror) < 1e-10
        assert abs(np.linalg.norm(Xm.translation) - sc.target_norms()[0]) < 1e-12

    def test_off_mirror_shift_costs_more(self):
        sc = synth.generate_planar(seed=2)
        p = sc.problem(oracle_signs=True)
        X = Pose.from_translation([0.0, 0.0, 0.05]) @ sc.X[0]
        assert herw.residual_cost(p, [X], sc.Y) > 1e-4


class TestCalibrateInfrastructure:
    def test_noiseless_recovers_truth(self):
        sc = synth.generate_planar(seed=3)
        res = planar.calibrate_infrastructure(sc.problem(), sc.target_norms())
        assert res.certified_global
        for truth, est in zip(sc.X + sc.Y, res.X + res.Y):
            e = metrics.calib_error(truth, est)
            assert e.t < 1e-6 and e.r < 1e-6
        assert len(res.corrections) == 1
        assert planar.height_offset(res.X[0], res.corrections[0].u_v) > 0
        assert res.residual_cost < 1e-12

    def test_noisy_single_target(self):
        sc = synth.add_noise(synth.generate_planar(seed=4), 0.02, 0.2, seed=5)
        res = planar.calibrate_infrastructure(sc.problem(), {0: 1.88})
        assert planar.height_offset(res.X[0], res.corrections[0].u_v) > 0
        e = metrics.calib_error(sc.Y[0], res.Y[0])
        assert e.t < 0.1 and e.r < 1.0

    def test_missing_prior(self):
        sc = synth.generate_planar(targets=((0.6, 0, 1.78), (-0.5, 0.4, 1.5)), seed=0)
        with pytest.raises(DegeneracyError, match="prior"):
            planar.calibrate_infrastructure(sc.problem(), {0: 1.88})

    @pytest.mark.parametrize("norms", [{0: 0.0}, {0: -1.0}, {1: 1.0}])
    def test_invalid_prior(self, norms):
        with pytest.raises(InvalidInputError):
            planar.calibrate_infrastructure(synth.generate_planar(seed=0).problem(), norms)

    def test_sloped_road_still_planar(self):
        sc = synth.generate_planar(seed=6, slope_deg=2.0)
        obs = metrics.check_observability(sc.problem())
        assert obs.planar and obs.prior_required
        res = planar.calibrate_infrastructure(sc.problem(), sc.target_norms())
        e = metrics.calib_error(sc.Y[0], res.Y[0])
        assert e.t < 1e-6

    def test_idempotent(self):
        sc = synth.add_noise(synth.generate_planar(seed=7), 0.02, 0.2, seed=8)
        res = planar.calibrate_infrastructure(sc.problem(), sc.target_norms())
        rec = res.corrections[0]
        X2, Ys2, again = planar.correct_solution(res.X[0], res.Y, rec.u_v, rec.u_w,
                                                 planar.height_offset(res.X[0], rec.u_v))
        assert not again.applied and X2 is res.X[0]

    def test_mounted_below_prefers_negative_height(self):
        sc = synth.generate_planar(seed=3)
        res = planar.calibrate_infrastructure(sc.problem(), sc.target_norms(), mounted_below=(0,))
        assert planar.height_offset(res.X[0], res.corrections[0].u_v) < 0
        Xm, Ysm, *_ = mirror(sc)
        assert np.abs(res.X[0].translation - Xm.translation).max() < 1e-6

    def test_sensor_moves_only_with_all_its_targets(self, monkeypatch):
        sc = synth.generate_planar(targets=((0.6, 0, 1.78), (-0.5, 0.4, 1.5)), seed=9)
        Xm, Ysm, *_ = mirror(sc, t=0)
        real = herw.calibrate

        def mirrored_first_target(problem, **kw):
            res = real(problem, **kw)
            res.X = [Xm, sc.X[1]]
            res.Y = list(sc.Y)
            return res

        monkeypatch.setattr(herw, "calibrate", mirrored_first_target)
        res = planar.calibrate_infrastructure(sc.problem(), sc.target_norms())
        applied = {r.target: r.applied for r in res.corrections}
        assert applied == {0: True, 1: False}
        assert np.array_equal(res.Y[0].translation, sc.Y[0].translation)
        assert all(not v.any() for r in res.corrections for v in r.shift_Y.values())

    def test_general_motion_passes_through(self):
        sc = synth.generate_general(15, seed=0)
        res = planar.calibrate_infrastructure(sc.problem(), {0: sc.target_norms()[0]})
        assert not res.planar_corrected and not res.corrections
        assert metrics.calib_error(sc.X[0], res.X[0]).t < 1e-6


def test_up_vectors_point_up_in_both_frames():
    sc = synth.generate_planar(seed=0, slope_deg=2.0)
    u_v, u_w = planar.up_vectors(sc.problem().pairs()[0, 0])
    tilt = np.array([0.0, -np.sin(np.radians(2.0)), np.cos(np.radians(2.0))])
    assert angle_deg(u_w, tilt) < 1e-6 and u_w @ tilt > 0
    assert np.allclose(u_v, [0, 0, 1], atol=1e-9)


def test_correction_record_serializes():
    sc = synth.generate_planar(seed=3)
    res = planar.calibrate_infrastructure(sc.problem(), sc.target_norms())
    d = res.corrections[0].as_dict()
    assert set(d) == {"target", "gamma_m", "applied", "u_v", "u_w", "shift_X_m", "shift_Y_m"}
    assert list(d["shift_Y_m"]) == ["0"]
