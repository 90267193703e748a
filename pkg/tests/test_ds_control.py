import numpy as np
import pytest

from planarm.ds_control import (
    AttractorField,
    DampingSpec,
    damping_matrix,
    ds_velocity,
    passive_force,
    potential,
)
from planarm.dynamics import dynamics_terms, forward_kinematics, jacobian
from planarm.model import JointState, desk_model, make_model


def field_at(x_star=(0.5, 0.3), P=None):
    if P is None:
        P = -25.0 * np.eye(2)
    return AttractorField(x_star=np.asarray(x_star), P=P)


class TestDsVelocity:
    def test_fixed_point(self):
        f = field_at()
        assert np.allclose(ds_velocity(f, f.x_star), [0.0, 0.0])

    def test_reference_gain(self):
        f = field_at(P=-25.0 * np.eye(2))
        x = f.x_star + np.array([0.1, 0.0])
        assert np.allclose(ds_velocity(f, x), [-5.0, 0.0])

    def test_negative_gradient_of_potential(self):
        rng = np.random.default_rng(0)
        f = field_at(P=np.array([[-12.0, 3.0], [3.0, -20.0]]))
        h = 1e-6
        for _ in range(500):
            x = rng.uniform(-1, 1, 2)
            g = np.zeros(2)
            for k in range(2):
                d = np.zeros(2)
                d[k] = h
                g[k] = (potential(f, x + d) - potential(f, x - d)) / (2 * h)
            assert np.allclose(ds_velocity(f, x), -g, atol=1e-6)

    def test_invalid_P_rejected(self):
        with pytest.raises(ValueError):
            AttractorField(x_star=[0, 0], P=np.array([[1.0, 0.0], [0.0, -1.0]]))
        with pytest.raises(ValueError):
            AttractorField(x_star=[0, 0], P=np.array([[-1.0, 0.5], [0.0, -1.0]]))


class TestDampingMatrix:
    def test_isotropic(self):
        f = field_at()
        spec = DampingSpec(lambda1=7.0, lambda2=7.0)
        x = f.x_star + np.array([0.2, -0.1])
        assert np.allclose(damping_matrix(f, spec, x), 7.0 * np.eye(2))

    def test_axis_aligned(self):
        f = field_at(x_star=(0, 0), P=-1.0 * np.eye(2))
        spec = DampingSpec(lambda1=2.0, lambda2=1.0)
        x = np.array([-0.3, 0.0])  # f points along +x
        assert np.allclose(damping_matrix(f, spec, x), np.diag([2.0, 1.0]), atol=1e-12)

    def test_eigenstructure(self):
        rng = np.random.default_rng(1)
        spec = DampingSpec(lambda1=11.0, lambda2=4.0)
        f = field_at(P=np.array([[-9.0, 2.0], [2.0, -15.0]]))
        for _ in range(100):
            x = rng.uniform(-1, 1, 2)
            fx = ds_velocity(f, x)
            if np.linalg.norm(fx) < spec.eta_f:
                continue
            D = damping_matrix(f, spec, x)
            ev = np.sort(np.linalg.eigvalsh(D))
            assert np.allclose(ev, [4.0, 11.0], atol=1e-10)
            v1 = fx / np.linalg.norm(fx)
            assert np.allclose(D @ v1, spec.lambda1 * v1, atol=1e-10)

    def test_small_field_fallback(self):
        f = field_at()
        spec = DampingSpec(lambda1=5.0, lambda2=3.0)
        D = damping_matrix(f, spec, f.x_star)
        assert np.allclose(D, 3.0 * np.eye(2))

    def test_psd_and_frame_orthonormal(self):
        rng = np.random.default_rng(2)
        spec = DampingSpec()
        f = field_at()
        for _ in range(200):
            x = rng.uniform(-1, 1, 2)
            D = damping_matrix(f, spec, x)
            xd = rng.normal(size=2)
            assert xd @ D @ xd >= -1e-12
            fx = ds_velocity(f, x)
            nf = np.linalg.norm(fx)
            if nf >= spec.eta_f:
                v1 = fx / nf
                v2 = np.array([-v1[1], v1[0]])
                V = np.stack([v1, v2], axis=1)
                assert np.max(np.abs(V.T @ V - np.eye(2))) < 1e-10


class TestPassiveForce:
    def test_perfect_tracking_zero_force(self):
        m = make_model(link_lengths=[0.5, 0.4], link_masses=[1, 1], gravity=(0.0, 0.0))
        f = field_at(x_star=(0.6, 0.2), P=-2.0 * np.eye(2))
        spec = DampingSpec(lambda1=10.0, lambda2=5.0)
        q = np.array([0.4, -0.7])
        x = forward_kinematics(m, q)
        fx = ds_velocity(f, x)
        J = jacobian(m, q)
        qd = np.linalg.lstsq(J, fx, rcond=None)[0]  # xdot = f(x) exactly
        F = passive_force(m, JointState(q=q, qd=qd), f, spec, sigma=0.0)
        assert np.max(np.abs(F)) < 1e-9

    def test_pure_dissipation_at_attractor(self):
        m = make_model(link_lengths=[0.5, 0.4], link_masses=[1, 1], gravity=(0.0, 0.0))
        spec = DampingSpec(lambda1=10.0, lambda2=5.0)
        q = np.array([0.4, -0.7])
        x = forward_kinematics(m, q)
        f = field_at(x_star=x, P=-2.0 * np.eye(2))
        qd = np.array([0.3, -0.2])
        J = jacobian(m, q)
        xd = J @ qd
        F = passive_force(m, JointState(q=q, qd=qd), f, spec, sigma=0.0)
        D = damping_matrix(f, spec, x)
        assert np.allclose(F, -D @ xd, atol=1e-12)

    def test_gravity_compensation_residual(self):
        m = desk_model()
        f = field_at()
        spec = DampingSpec()
        rng = np.random.default_rng(3)
        for _ in range(20):
            q = rng.uniform(m.q_lower * 0.8, m.q_upper * 0.8)
            st = JointState(q=q, qd=np.zeros(m.n))
            x = forward_kinematics(m, q)
            fld = AttractorField(x_star=x, P=-25.0 * np.eye(2))  # f = 0 at x
            F = passive_force(m, st, fld, spec, sigma=0.01)
            G = dynamics_terms(m, st).G
            J = jacobian(m, q)
            # J^T F reproduces the row-space part of G up to damped-pinv error
            resid = np.linalg.norm(J.T @ F - J.T @ np.linalg.solve(J @ J.T, J @ G))
            assert resid < 1e-2
