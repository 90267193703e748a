import numpy as np
import pytest

from planarm.ds_control import AttractorField
from planarm.model import JointState, desk_model, make_model
from planarm.scenario import ObstacleSpec, Push, Scenario, apply_toggle_overrides, scenario_from_dict
from planarm.sim import (
    Metrics,
    SimEngine,
    TrajectoryLog,
    check_safety,
    compute_metrics,
    load_log,
    log_field_names,
    loop_rate,
    min_obstacle_clearance_at,
    normalized_jerk_xy,
    path_length_xy,
    run_scenario,
    save_log,
)


def synthetic_log(t, x, wall=1e-3):
    n = 1
    fields = log_field_names(n, 0)
    rows = np.zeros((len(t), len(fields)))
    rows[:, fields.index("t")] = t
    rows[:, fields.index("x_0")] = x[:, 0]
    rows[:, fields.index("x_1")] = x[:, 1]
    rows[:, fields.index("wall_clock")] = wall
    dt = float(t[1] - t[0]) if len(t) > 1 else 0.005
    return TrajectoryLog(fields=fields, rows=rows, n=n, n_obstacles=0, control_dt=dt)


class TestMetricsMath:
    def test_nj_zero_on_constant_velocity(self):
        t = np.linspace(0, 2, 2001)
        x = np.stack([0.3 * t, -0.1 * t], axis=1)
        assert normalized_jerk_xy(t, x) == pytest.approx(0.0, abs=1e-12)

    def test_nj_sinusoid_analytic(self):
        # x(t) = [sin t, 0] on [0, 2 pi]: integral of jerk^2 = pi, L = 4
        t = np.linspace(0, 2 * np.pi, int(2 * np.pi * 1000) + 1)
        x = np.stack([np.sin(t), np.zeros_like(t)], axis=1)
        expected = np.pi / (16.0 * (2 * np.pi) ** 5)
        assert normalized_jerk_xy(t, x) == pytest.approx(expected, rel=0.01)

    def test_nj_time_rescaling(self):
        # x_a(t) = x(a t) scales NJ by a^10
        a = 1.7

        def traj(tt):
            return np.stack([np.sin(tt), 0.2 * np.cos(2 * tt)], axis=1)

        t1 = np.linspace(0, 2 * np.pi, 20001)
        t2 = np.linspace(0, 2 * np.pi / a, 20001)
        nj1 = normalized_jerk_xy(t1, traj(t1))
        nj2 = normalized_jerk_xy(t2, traj(a * t2))
        assert nj2 / nj1 == pytest.approx(a**10, rel=0.02)

    def test_nj_degenerate_path_raises(self):
        t = np.linspace(0, 1, 100)
        x = np.zeros((100, 2))
        with pytest.raises(ValueError, match="degenerate"):
            normalized_jerk_xy(t, x)

    def test_nj_needs_samples(self):
        with pytest.raises(ValueError):
            normalized_jerk_xy(np.array([0.0, 0.1, 0.2]), np.zeros((3, 2)))

    def test_path_length_stationary_and_segment(self):
        assert path_length_xy(np.zeros((10, 2))) == 0.0
        x = np.stack([np.linspace(0, 0.5, 50), np.zeros(50)], axis=1)
        assert path_length_xy(x) == pytest.approx(0.5, abs=1e-12)

    def test_path_length_circle(self):
        t = np.linspace(0, 2 * np.pi, 20001)
        r = 0.37
        x = np.stack([r * np.cos(t), r * np.sin(t)], axis=1)
        assert path_length_xy(x) == pytest.approx(2 * np.pi * r, rel=1e-3)

    def test_loop_rate(self):
        t = np.arange(1000) * 0.005
        x = np.stack([t, t], axis=1)
        log = synthetic_log(t, x, wall=0.005)
        assert loop_rate(log) == pytest.approx(200.0)
        single = synthetic_log(t[:1], x[:1], wall=0.004)
        assert loop_rate(single) == pytest.approx(250.0)


class TestLogIO:
    def test_round_trip_bitwise(self, tmp_path):
        sc = Scenario(duration=0.2)
        log, _ = run_scenario(sc)
        p = tmp_path / "run.log"
        save_log(log, p)
        back = load_log(p)
        assert back.fields == log.fields
        # NaN columns (inactive gates) must round-trip bit-exactly
        assert back.rows.tobytes() == log.rows.tobytes()
        assert back.n == log.n

    def test_rejects_unknown_schema(self, tmp_path):
        p = tmp_path / "bad.log"
        p.write_text('{"schema": "other/9", "fields": [], "n": 1, "n_obstacles": 0, "control_dt": 0.005}\n')
        with pytest.raises(ValueError, match="schema"):
            load_log(p)


class TestScenarioConfig:
    def test_from_dict_defaults(self):
        sc = scenario_from_dict({})
        assert sc.robot.n == 3
        assert sc.control_dt == 0.005
        assert not sc.sca_on

    def test_toggle_jnt_cannot_disable(self):
        with pytest.raises(ValueError):
            scenario_from_dict({"toggles": {"jnt": False}})
        with pytest.raises(ValueError):
            apply_toggle_overrides(Scenario(), ["jnt=off"])

    def test_toggle_overrides(self):
        sc = Scenario(sca_on=True)
        apply_toggle_overrides(sc, ["sca=off", "eca=on"])
        assert not sc.sca_on
        assert sc.eca_on

    def test_obstacle_motion(self):
        spec = ObstacleSpec(id="s", center=[0.5, 0.1], radius=0.05, kind="sinusoid",
                            axis=[0, 1], amplitude=0.1, omega=2.0)
        o = spec.at(0.0)
        assert np.allclose(o.center, [0.5, 0.1])
        assert np.allclose(o.velocity, [0.0, 0.2])
        o2 = spec.at(np.pi / 4)  # sin(pi/2) = 1
        assert np.allclose(o2.center, [0.5, 0.2])
        lin = ObstacleSpec(id="l", center=[0, 0], radius=0.05, kind="linear", velocity=[0.1, 0])
        assert np.allclose(lin.at(2.0).center, [0.2, 0.0])

    def test_toml_load(self, tmp_path):
        from planarm.scenario import load_scenario

        toml = """
[field]
x_star = [0.5, 0.2]
P = [[-4.0, 0.0], [0.0, -4.0]]

[toggles]
sca = false
eca = false

[run]
duration = 0.5
seed = 3

[[obstacles]]
center = [0.6, 0.4]
radius = 0.05
"""
        p = tmp_path / "s.toml"
        p.write_text(toml)
        sc = load_scenario(p)
        assert sc.duration == 0.5
        assert sc.seed == 3
        assert len(sc.obstacles) == 1
        assert sc.name == "s"


class TestRunScenario:
    def test_zero_duration_empty(self):
        sc = Scenario(duration=0.0)
        log, met = run_scenario(sc)
        assert log.rows.shape[0] == 0
        assert met.path_length == 0.0
        assert not met.converged

    def test_missing_model_file_errors_before_start(self):
        sc = Scenario(sca_on=True, sca_model_path="/nonexistent/path.bin")
        with pytest.raises(FileNotFoundError):
            run_scenario(sc)

    def test_determinism_bit_identical(self):
        sc = Scenario(duration=0.5, seed=4, initial_q=[0.3, -0.5, 0.8])
        log1, _ = run_scenario(sc)
        log2, _ = run_scenario(sc)
        assert log1.payload_bytes() == log2.payload_bytes()

    def test_joint_limits_hold_under_push(self):
        # the disturbance must stay within the arm's spare acceleration
        # authority; beyond it no torque policy can preserve the bounds
        sc = Scenario(
            duration=2.0,
            initial_q=[0.3, -0.5, 0.8],
            pushes=[Push(t_start=0.5, t_end=1.0, kind="joint", value=[0.04, 0.015, 0.001])],
        )
        log, _ = run_scenario(sc)
        assert check_safety(log, sc) == []

    def test_task_push_applies(self):
        quiet = Scenario(duration=1.0, initial_q=[0.3, -0.5, 0.8],
                         field=AttractorField(x_star=[0.9, 0.2], P=-2.0 * np.eye(2)))
        pushed = Scenario(duration=1.0, initial_q=[0.3, -0.5, 0.8],
                          field=AttractorField(x_star=[0.9, 0.2], P=-2.0 * np.eye(2)),
                          pushes=[Push(t_start=0.0, t_end=0.5, kind="task", value=[0.0, 25.0])])
        la, _ = run_scenario(quiet)
        lb, _ = run_scenario(pushed)
        assert not np.array_equal(la.columns("q"), lb.columns("q"))

    def test_integrator_first_order(self):
        # halving the physics step changes the final state at O(dt)
        base = dict(duration=0.5, initial_q=[0.4, -0.6, 0.9], initial_qd=[0.5, 0.3, -0.4])
        finals = []
        dts = [0.0025, 0.00125, 0.000625, 0.0003125]
        for pdt in dts:
            sc = Scenario(physics_dt=pdt, control_dt=0.005, **base)
            log, _ = run_scenario(sc)
            finals.append(np.r_[log.columns("q")[-1], log.columns("qd")[-1]])
        ref_sc = Scenario(physics_dt=0.00003125, control_dt=0.005, **base)
        ref_log, _ = run_scenario(ref_sc)
        ref = np.r_[ref_log.columns("q")[-1], ref_log.columns("qd")[-1]]
        errs = [np.linalg.norm(f - ref) for f in finals]
        slope = np.polyfit(np.log(dts), np.log(errs), 1)[0]
        assert 0.8 <= slope <= 1.2

    def test_metrics_converged_flag(self):
        sc = Scenario(duration=4.0, initial_q=[0.3, -0.5, 0.8],
                      field=AttractorField(x_star=[0.55, 0.35], P=-6.0 * np.eye(2)))
        log, met = run_scenario(sc)
        assert met.converged
        assert met.path_length > 0

    def test_metrics_csv_shape(self):
        sc = Scenario(duration=0.2)
        _, met = run_scenario(sc)
        row = met.csv_row("demo")
        assert len(row.split(",")) == len(Metrics.CSV_HEADER.split(","))


class TestClearanceHelper:
    def test_matches_manual(self):
        m = desk_model()
        q = np.zeros(3)
        from planarm.sdf import Obstacle

        obs = Obstacle(id="o", center=[0.2, 0.3], radius=0.05, velocity=[0, 0])
        d = min_obstacle_clearance_at(m, q, [obs])
        # straight chain along x: distance from (0.2, 0.3) to the x-axis is 0.3
        assert d == pytest.approx(0.3 - 0.04 - 0.05, abs=1e-12)

    def test_no_obstacles_inf(self):
        m = desk_model()
        assert min_obstacle_clearance_at(m, np.zeros(3), []) == float("inf")
