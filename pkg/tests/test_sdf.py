import io

import numpy as np
import pytest

from planarm.geometry import capsule_sdf
from planarm.model import JointState, make_model
from planarm.sdf import (
    BernsteinSdf,
    Obstacle,
    bernstein_basis,
    bernstein_basis_deriv,
    eca_constraint,
    fit_link_sdf,
    load_sdf_set,
    save_sdf_set,
    softmin,
    viability_sdf,
    whole_body_sdf,
    whole_body_values_batch,
)
from planarm.viability import braking_rollout


class TestBasis:
    def test_partition_of_unity(self):
        u = np.linspace(0, 1, 257)
        B = bernstein_basis(u, 12)
        assert np.allclose(B.sum(axis=1), 1.0, atol=1e-12)

    def test_derivative_matches_fd(self):
        u = np.linspace(0.05, 0.95, 64)
        h = 1e-7
        D = bernstein_basis_deriv(u, 9)
        fd = (bernstein_basis(u + h, 9) - bernstein_basis(u - h, 9)) / (2 * h)
        assert np.max(np.abs(D - fd)) < 1e-5


class TestFit:
    def test_coefficient_count(self):
        sdf = fit_link_sdf(0.4, 0.04, degree=12, sample_count=30_000, seed=0)
        assert sdf.coeffs.size == 144

    def test_constant_reproduction(self):
        # fitting a constant target recovers it everywhere (partition of unity)
        rng = np.random.default_rng(0)
        pts = rng.uniform(0, 1, size=(2000, 2))
        deg = 6
        from planarm.sdf import bernstein_basis as bb

        phi = np.einsum("ni,nj->nij", bb(pts[:, 0], deg), bb(pts[:, 1], deg)).reshape(2000, -1)
        A = 1e-10 * np.eye(deg * deg) + phi.T @ phi
        c = np.linalg.solve(A, phi.T @ np.full(2000, 3.7))
        sdf = BernsteinSdf(
            coeffs=c.reshape(deg, deg),
            domain_lo=np.zeros(2),
            domain_hi=np.ones(2),
            ridge_lambda=1e-10,
            fit_rmse=0.0,
        )
        probe = rng.uniform(0, 1, size=(500, 2))
        vals, _ = sdf.evaluate(probe)
        assert np.allclose(vals, 3.7, atol=1e-6)

    def test_capsule_rmse_under_2mm(self):
        sdf = fit_link_sdf(0.4, 0.04, degree=12, sample_count=20_000, seed=3)
        assert sdf.fit_rmse <= 0.002

    def test_degenerate_sampling_without_ridge_raises(self):
        with pytest.raises(np.linalg.LinAlgError, match="ill-conditioned"):
            fit_link_sdf(0.4, 0.04, degree=12, ridge_lambda=0.0, sample_count=1441, seed=0)

    def test_preconditions(self):
        with pytest.raises(ValueError):
            fit_link_sdf(0.4, 0.04, degree=1)
        with pytest.raises(ValueError):
            fit_link_sdf(0.4, 0.04, degree=12, sample_count=100)

    def test_sign_agreement_outside_band(self):
        sdf = fit_link_sdf(0.4, 0.04, degree=12, sample_count=30_000, seed=1)
        rng = np.random.default_rng(5)
        pts = rng.uniform(sdf.domain_lo, sdf.domain_hi, size=(10_000, 2))
        truth = capsule_sdf(pts, 0.4, 0.04)
        vals, _ = sdf.evaluate(pts)
        mask = np.abs(truth) >= 2 * sdf.fit_rmse
        assert np.all(np.sign(vals[mask]) == np.sign(truth[mask]))


class TestSoftmin:
    def test_sandwich(self):
        rng = np.random.default_rng(2)
        beta = 80.0
        for _ in range(200):
            v = rng.uniform(-1, 1, rng.integers(1, 10))
            s, w = softmin(v, beta)
            assert s <= v.min() + 1e-12
            assert s >= v.min() - np.log(v.size) / beta - 1e-12
            assert w.sum() == pytest.approx(1.0)

    def test_singleton_exact(self):
        s, _ = softmin(np.array([0.317]), 80.0)
        assert s == 0.317


@pytest.fixture(scope="module")
def arm():
    return make_model(
        link_lengths=[0.4, 0.35, 0.25],
        link_masses=[2.0, 1.5, 1.0],
        link_radii=[0.04, 0.04, 0.04],
    )


class TestWholeBody:
    def test_single_link_is_that_link(self):
        m = make_model(link_lengths=[0.4], link_masses=[1.0])
        sdfs = [fit_link_sdf(0.4, 0.04, sample_count=20_000, seed=0)]
        p = np.array([0.2, 0.1])
        res = whole_body_sdf(m, sdfs, np.array([0.0]), p)
        link_val, _ = sdfs[0].evaluate(p)
        assert res.value == pytest.approx(float(link_val), abs=1e-12)

    def test_softmin_bounds_vs_links(self, arm, sdf_set):
        rng = np.random.default_rng(3)
        beta = 80.0
        for _ in range(100):
            q = rng.uniform(arm.q_lower, arm.q_upper)
            p = rng.uniform(-0.6, 0.6, 2)
            res = whole_body_sdf(arm, sdf_set, q, p, beta=beta)
            from planarm.dynamics import link_frames

            pts, theta = link_frames(arm, q)
            per_link = []
            for i in range(arm.n):
                c, s = np.cos(theta[i]), np.sin(theta[i])
                local = np.array([[c, s], [-s, c]]) @ (p - pts[i])
                v, _ = sdf_set[i].evaluate(local)
                per_link.append(float(v))
            mn = min(per_link)
            assert res.value <= mn + 1e-12
            assert res.value >= mn - np.log(arm.n) / beta - 1e-12

    def test_gradients_match_fd(self, arm, sdf_set):
        rng = np.random.default_rng(4)
        h = 1e-6
        worst = 0.0
        checked = 0
        while checked < 200:
            q = rng.uniform(arm.q_lower, arm.q_upper)
            p = rng.uniform(-0.8, 0.8, 2)
            res = whole_body_sdf(arm, sdf_set, q, p)
            if res.outside:
                continue
            fd_p = np.zeros(2)
            for k in range(2):
                d = np.zeros(2)
                d[k] = h
                fd_p[k] = (
                    whole_body_sdf(arm, sdf_set, q, p + d).value
                    - whole_body_sdf(arm, sdf_set, q, p - d).value
                ) / (2 * h)
            fd_q = np.zeros(arm.n)
            for k in range(arm.n):
                d = np.zeros(arm.n)
                d[k] = h
                fd_q[k] = (
                    whole_body_sdf(arm, sdf_set, q + d, p).value
                    - whole_body_sdf(arm, sdf_set, q - d, p).value
                ) / (2 * h)
            scale = max(np.linalg.norm(np.concatenate([fd_p, fd_q])), 1e-3)
            err = np.linalg.norm(np.concatenate([res.d_p - fd_p, res.d_q - fd_q])) / scale
            worst = max(worst, err)
            checked += 1
        assert worst < 1e-3

    def test_translation_invariance(self, arm, sdf_set):
        rng = np.random.default_rng(6)
        for _ in range(50):
            q = rng.uniform(arm.q_lower, arm.q_upper)
            p = rng.uniform(-0.8, 0.8, 2)
            shift = rng.uniform(-3, 3, 2)
            a = whole_body_sdf(arm, sdf_set, q, p)
            b = whole_body_sdf(arm, sdf_set, q, p + shift, base=shift)
            assert a.value == pytest.approx(b.value, abs=1e-12)

    def test_batch_matches_scalar(self, arm, sdf_set):
        rng = np.random.default_rng(7)
        q = rng.uniform(arm.q_lower, arm.q_upper, size=(20, arm.n))
        p = np.array([0.3, 0.2])
        vals, _ = whole_body_values_batch(arm, sdf_set, q, p)
        for i in range(20):
            assert vals[i] == pytest.approx(whole_body_sdf(arm, sdf_set, q[i], p).value, abs=1e-12)


class TestViabilitySdf:
    def test_rest_equals_instantaneous(self, arm, sdf_set):
        rng = np.random.default_rng(8)
        for _ in range(100):
            q = rng.uniform(arm.q_lower, arm.q_upper)
            p = rng.uniform(-0.8, 0.8, 2)
            st = JointState(q=q, qd=np.zeros(arm.n))
            sv = viability_sdf(arm, sdf_set, st, p)
            s = whole_body_sdf(arm, sdf_set, q, p)
            assert sv.value == pytest.approx(s.value, abs=1e-15)
            assert sv.n_samples == 1

    def test_softmin_upper_bound(self, arm, sdf_set):
        rng = np.random.default_rng(9)
        for _ in range(30):
            st = JointState(
                q=rng.uniform(arm.q_lower, arm.q_upper),
                qd=rng.uniform(-arm.qd_max, arm.qd_max),
            )
            p = rng.uniform(-0.8, 0.8, 2)
            sv = viability_sdf(arm, sdf_set, st, p)
            s0 = whole_body_sdf(arm, sdf_set, st.q, p)
            assert sv.value <= s0.value + np.log(max(sv.n_samples, 1)) / 80.0 + 1e-9

    def test_swing_toward_obstacle_reduces_clearance(self):
        m = make_model(link_lengths=[0.4], link_masses=[1.0], qdd_max=[10.0])
        sdfs = [fit_link_sdf(0.4, 0.04, sample_count=20_000, seed=0)]
        p = np.array([0.35, 0.20])  # above the link, in the swing path
        st = JointState(q=[0.0], qd=[1.5])
        sv = viability_sdf(m, sdfs, st, p)
        s0 = whole_body_sdf(m, sdfs, st.q, p)
        assert sv.value < s0.value - 1e-3
        # dense hard-min oracle along the rollout
        roll = braking_rollout(m, st, 1e-4)
        dists = [whole_body_sdf(m, sdfs, qs, p).value for qs in roll.q]
        assert sv.value <= min(dists) + np.log(max(len(roll.q), 1)) / 80.0

    def test_cap_subsampling_flagged(self, arm, sdf_set):
        st = JointState(q=np.zeros(arm.n), qd=arm.qd_max.copy())
        sv = viability_sdf(arm, sdf_set, st, np.array([0.5, 0.5]), cap=50)
        assert sv.truncated
        assert sv.n_samples == 50

    def test_gradients_match_finite_differences(self, arm, sdf_set):
        # the rollout is piecewise smooth; keep probes away from zero
        # crossings so the two estimates see the same branch
        rng = np.random.default_rng(21)
        h = 1e-6
        checked = 0
        worst = 0.0
        while checked < 60:
            q = rng.uniform(arm.q_lower * 0.8, arm.q_upper * 0.8)
            qd = rng.uniform(-arm.qd_max, arm.qd_max)
            if np.min(np.abs(qd)) < 0.05:
                continue
            p = rng.uniform(-0.8, 0.8, 2)
            st = JointState(q=q, qd=qd)
            sv = viability_sdf(arm, sdf_set, st, p)
            fd = np.zeros(2 * arm.n + 2)
            for k in range(arm.n):
                d = np.zeros(arm.n)
                d[k] = h
                fd[k] = (
                    viability_sdf(arm, sdf_set, JointState(q=q + d, qd=qd), p).value
                    - viability_sdf(arm, sdf_set, JointState(q=q - d, qd=qd), p).value
                ) / (2 * h)
                fd[arm.n + k] = (
                    viability_sdf(arm, sdf_set, JointState(q=q, qd=qd + d), p).value
                    - viability_sdf(arm, sdf_set, JointState(q=q, qd=qd - d), p).value
                ) / (2 * h)
            for k in range(2):
                d = np.zeros(2)
                d[k] = h
                fd[2 * arm.n + k] = (
                    viability_sdf(arm, sdf_set, st, p + d).value
                    - viability_sdf(arm, sdf_set, st, p - d).value
                ) / (2 * h)
            grad = np.concatenate([sv.d_q, sv.d_qd, sv.d_p])
            scale = max(np.linalg.norm(fd), 1e-3)
            worst = max(worst, np.linalg.norm(grad - fd) / scale)
            checked += 1
        assert worst < 1e-3


class TestEcaConstraint:
    def test_static_obstacle_zero_q_grad_offset(self, arm, sdf_set):
        st = JointState(q=[0.2, -0.3, 0.4], qd=[0.0, 0.0, 0.0])
        obs = Obstacle(id="o", center=[0.5, 0.3], radius=0.05, velocity=[0.0, 0.0])
        hs, sv = eca_constraint(arm, sdf_set, st, obs, dt=0.005)
        assert hs.kind == "eca"
        # at rest b_e reduces to the (zero) obstacle-motion term
        assert hs.b == pytest.approx(float(sv.d_q @ st.qd) * 0.005, abs=1e-12)
        assert np.allclose(hs.g, 0.5 * sv.d_q * 0.005**2 + sv.d_qd * 0.005)

    def test_receding_obstacle_relaxes(self, arm, sdf_set):
        st = JointState(q=[0.2, -0.3, 0.4], qd=[0.5, 0.0, 0.0])
        p = np.array([0.5, 0.3])
        slow = Obstacle(id="o", center=p, radius=0.05, velocity=[0.0, 0.0])
        hs_slow, sv = eca_constraint(arm, sdf_set, st, slow, dt=0.005)
        away = 5.0 * sv.d_p / np.linalg.norm(sv.d_p)  # receding: grows S_v
        fast = Obstacle(id="o", center=p, radius=0.05, velocity=away)
        hs_fast, _ = eca_constraint(arm, sdf_set, st, fast, dt=0.005)
        assert hs_fast.b > hs_slow.b

    def test_first_order_consistency(self, arm, sdf_set):
        rng = np.random.default_rng(11)
        dt = 0.005
        diffs = []
        tried = 0
        while len(diffs) < 25 and tried < 300:
            tried += 1
            st = JointState(
                q=rng.uniform(arm.q_lower * 0.8, arm.q_upper * 0.8),
                qd=rng.uniform(-arm.qd_max, arm.qd_max) * 0.5,
            )
            p = rng.uniform(-0.7, 0.7, 2)
            obs = Obstacle(id="o", center=p, radius=0.05, velocity=[0.0, 0.0])
            hs, sv = eca_constraint(arm, sdf_set, st, obs, dt=dt)
            gn2 = float(hs.g @ hs.g)
            if gn2 < 1e-12 or not (0.02 < sv.value < 0.5):
                continue
            a = -hs.b * hs.g / gn2  # on the constraint boundary
            if np.max(np.abs(a)) > 50.0:
                continue
            q1 = st.q + dt * st.qd + 0.5 * dt**2 * a
            qd1 = st.qd + dt * a
            sv1 = viability_sdf(arm, sdf_set, JointState(q=q1, qd=qd1), p)
            diffs.append(abs(sv1.value - sv.value))
        assert len(diffs) >= 25
        assert np.median(diffs) < 200.0 * dt**2

    def test_bad_radius_rejected(self):
        with pytest.raises(ValueError):
            Obstacle(id="o", center=[0, 0], radius=0.0, velocity=[0, 0])


class TestSerialization:
    def test_set_round_trip(self, arm, sdf_set, tmp_path):
        path = tmp_path / "set.bin"
        save_sdf_set(sdf_set, path)
        back = load_sdf_set(path)
        assert len(back) == len(sdf_set)
        rng = np.random.default_rng(12)
        for a, b in zip(sdf_set, back):
            assert np.array_equal(a.coeffs, b.coeffs)
            assert a.fit_rmse == b.fit_rmse
            pts = rng.uniform(a.domain_lo, a.domain_hi, size=(50, 2))
            va, _ = a.evaluate(pts)
            vb, _ = b.evaluate(pts)
            assert np.array_equal(va, vb)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "x.bin"
        p.write_bytes(b"JUNK" + b"\0" * 32)
        with pytest.raises(ValueError, match="magic"):
            load_sdf_set(p)
