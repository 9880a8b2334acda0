import numpy as np
import pytest
from dataclasses import replace
from hypothesis import given, settings, strategies as st

from advskill import env as E
from advskill.env import CharState, EnvConfig, TaskGoal
from advskill.errors import SimulationFault, UsageError

CFG = EnvConfig()


def random_state(rng, n=None):
    shape = () if n is None else (n,)
    f = lambda lo, hi: rng.uniform(lo, hi, size=shape)
    return CharState(f(-3, 3), f(-3, 3), f(-np.pi, np.pi), f(-2, 2), f(-2, 2), f(-2, 2), f(0.2, 1.0), f(0, 1),
                     f(-np.pi, np.pi), f(-np.pi, np.pi), f(-3, 3), f(-3, 3))


def random_action(rng, n=None):
    shape = (E.ACTION_DIM,) if n is None else (n, E.ACTION_DIM)
    return rng.uniform(-1.5, 1.5, size=shape) * np.array([1, 1, 1, 1, 1, np.pi, np.pi])


def oracle_step(s, a, cfg):
    """Scalar re-implementation of one control step."""
    a = [min(max(v, lo), hi) for v, lo, hi in zip(a, E.ACTION_LOW, E.ACTION_HIGH)]
    x, y, th, vx, vy, om, h, u, q1, q2, dq1, dq2 = [float(v) for v in s.as_array()]
    dt = cfg.dt_control / cfg.substeps
    for _ in range(cfg.substeps):
        sl = u if u < cfg.u_fall else 1.0
        ax = (np.cos(th) * a[0] - np.sin(th) * a[1]) * cfg.a_max * sl
        ay = (np.sin(th) * a[0] + np.cos(th) * a[1]) * cfg.a_max * sl
        vx, vy = vx + (ax - cfg.c_v * vx) * dt, vy + (ay - cfg.c_v * vy) * dt
        th, om = th + om * dt, om + (a[2] * cfg.alpha_max * sl - cfg.c_omega * om) * dt
        x, y = x + vx * dt, y + vy * dt
        h = min(max(h + a[3] * cfg.h_rate * dt, 0.2), 1.0)
        dq1 += (cfg.kp * (a[5] - q1) - cfg.kd * dq1) * dt
        dq2 += (cfg.kp * (a[6] - q2) - cfg.kd * dq2) * dt
        q1 = min(max(q1 + dq1 * dt, -np.pi), np.pi)
        q2 = min(max(q2 + dq2 * dt, -np.pi), np.pi)
        u = min(max(u + cfg.k_rec * a[4] * dt, 0.0), 1.0)
    return np.array([x, y, th, vx, vy, om, h, u, q1, q2, dq1, dq2])


def test_reset_standing_and_fallen():
    rng = np.random.default_rng(0)
    for _ in range(100):
        s = E.reset(CFG, rng, 0.0)
        assert s.u == 1.0 and s.h == 1.0
        assert E.reset(CFG, rng, 1.0).u < 0.3


def test_reset_fallen_fraction():
    rng = np.random.default_rng(1)
    fallen = np.mean([E.is_fallen(E.reset(CFG, rng, 0.1)) for _ in range(10_000)])
    assert abs(fallen - 0.1) <= 0.01


def test_zero_action_from_rest_is_fixed_point():
    s = E.standing_state(0.7)
    nxt = E.step(s, np.zeros(E.ACTION_DIM), CFG)
    assert np.array_equal(nxt.as_array(), s.as_array())


def test_forward_push_from_rest():
    a = np.zeros(E.ACTION_DIM)
    a[0] = 1.0
    nxt = E.step(E.standing_state(0.0), a, CFG)
    assert nxt.vx > 0 and nxt.vy == 0


def test_step_matches_scalar_oracle():
    rng = np.random.default_rng(2)
    for _ in range(300):
        s, a = random_state(rng), random_action(rng)
        assert np.allclose(E.step(s, a, CFG).as_array(), oracle_step(s, a, CFG), atol=1e-6)


def test_batched_step_equals_single():
    rng = np.random.default_rng(3)
    s, a = random_state(rng, 16), random_action(rng, 16)
    batch = E.step(s, a, CFG).as_array()
    for i in range(16):
        assert np.array_equal(batch[i], E.step(s.take(i), a[i], CFG).as_array())


def test_step_rejects_non_finite():
    a = np.zeros(E.ACTION_DIM)
    a[2] = np.nan
    with pytest.raises(SimulationFault):
        E.step(E.standing_state(), a, CFG)


@given(st.integers(0, 2**31))
@settings(max_examples=100, deadline=None)
def test_ranges_hold_along_random_rollouts(seed):
    rng = np.random.default_rng(seed)
    s = random_state(rng, 4)
    for _ in range(20):
        s = E.step(s, random_action(rng, 4), CFG)
        assert np.all((s.h >= 0.2) & (s.h <= 1.0) & (s.u >= 0) & (s.u <= 1))
        assert np.all(np.abs(s.q1) <= np.pi) and np.all(np.isfinite(s.as_array()))


def test_local_velocity_examples():
    s = replace(E.standing_state(0.0), vx=np.float64(1.0))
    assert np.allclose(E.observe(s)[2:4], [1.0, 0.0])
    s = replace(E.standing_state(np.pi / 2), vx=np.float64(1.0))
    assert np.allclose(E.observe(s)[2:4], [0.0, -1.0])


def test_local_velocity_round_trip():
    rng = np.random.default_rng(4)
    s = random_state(rng, 200)
    local = E.observe(s)[:, 2:4]
    assert np.allclose(E.to_world(s, local), s.velocity, atol=1e-6)


@pytest.mark.parametrize("q, tip", [((0, 0), (0.8, 0)), ((np.pi / 2, 0), (0, 0.8)), ((0, np.pi / 2), (0.4, 0.4))])
def test_sword_tip(q, tip):
    s = replace(E.standing_state(), q1=np.float64(q[0]), q2=np.float64(q[1]))
    assert np.allclose(E.sword_tip_local(s), tip, atol=1e-12)


def test_goal_sampling_ranges():
    rng = np.random.default_rng(5)
    s = replace(E.standing_state(0.3), x=np.float64(2.0), y=np.float64(-1.0))
    for _ in range(3):
        g = E.sample_goal("reach", rng, s)
        assert np.linalg.norm(g.target - s.position) <= 1.0
        g = E.sample_goal("speed", rng, s)
        assert 0 <= g.speed <= 4 and np.isclose(np.linalg.norm(g.direction), 1)
        g = E.sample_goal("steering", rng, s)
        assert g.speed == 1.5 and np.isclose(np.linalg.norm(g.heading), 1)
        g = E.sample_goal("location", rng, s)
        assert np.linalg.norm(g.target - s.position) <= 5.0
        g = E.sample_goal("strike", rng, s)
        assert 2.0 <= np.linalg.norm(g.target - s.position) <= 5.0 and g.tilt == 0


def _reward(task, nxt, goal):
    return float(E.task_reward(task, nxt, np.zeros(E.ACTION_DIM), nxt, goal, CFG))


def test_task_reward_examples():
    s = E.standing_state(0.0)
    tip = E.sword_tip_world(s, CFG)
    assert _reward("reach", s, TaskGoal("reach", target=tip)) == pytest.approx(1.0)
    assert _reward("reach", s, TaskGoal("reach", target=tip + [0.5, 0])) == pytest.approx(0.286505, abs=1e-6)
    moving = replace(s, vx=np.float64(2.0))
    assert _reward("speed", moving, TaskGoal("speed", direction=np.array([1.0, 0]), speed=np.float64(2.0))) == 1.0
    steer = TaskGoal("steering", direction=np.array([1.0, 0]), speed=np.float64(2.0), heading=np.array([1.0, 0]))
    assert _reward("steering", moving, steer) == pytest.approx(1.0)
    assert _reward("location", s, TaskGoal("location", target=s.position)) == 1.0
    upright = TaskGoal("strike", target=np.array([3.0, 0]), tilt=np.float64(0.0), tilt_rate=np.float64(0.0))
    assert _reward("strike", s, upright) == 0.0
    assert _reward("strike", s, replace(upright, tilt=np.float64(np.pi / 2))) == pytest.approx(1.0)


def test_task_reward_variant_mismatch():
    s = E.standing_state()
    with pytest.raises(UsageError):
        _reward("reach", s, TaskGoal("location", target=np.zeros(2)))


def test_strike_tilt_rises_on_fast_contact():
    s = replace(E.standing_state(0.0), q1=np.float64(-0.5), dq1=np.float64(5.0))
    a = np.zeros(E.ACTION_DIM)
    a[5] = 0.5
    nxt = E.step(s, a, CFG)
    tip = E.sword_tip_world(nxt, CFG)
    goal = TaskGoal("strike", target=tip.copy(), tilt=np.float64(0.0), tilt_rate=np.float64(0.0))
    g2 = E.advance_goal(goal, s, nxt, CFG)
    assert g2.tilt > 0 and g2.tilt_rate > 0
    far = TaskGoal("strike", target=tip + [1.0, 0], tilt=np.float64(0.0), tilt_rate=np.float64(0.0))
    assert E.advance_goal(far, s, nxt, CFG).tilt == 0


@given(st.integers(0, 2**31), st.floats(-np.pi, np.pi))
@settings(max_examples=100, deadline=None)
def test_rotation_equivariance(seed, angle):
    rng = np.random.default_rng(seed)
    s = random_state(rng)
    a = random_action(rng)
    nxt = E.step(s, a, CFG)
    c, sn = np.cos(angle), np.sin(angle)
    R = np.array([[c, -sn], [sn, c]])

    def rot(state):
        p, v = R @ state.position, R @ state.velocity
        return replace(state, x=p[0], y=p[1], theta=state.theta + angle, vx=v[0], vy=v[1])

    assert np.allclose(E.observe(s), E.observe(rot(s)), atol=1e-6)
    goals = {
        "reach": TaskGoal("reach", target=rng.normal(size=2)),
        "speed": TaskGoal("speed", direction=E._unit(rng), speed=np.float64(rng.uniform(0, 4))),
        "steering": TaskGoal("steering", direction=E._unit(rng), speed=np.float64(1.5), heading=E._unit(rng)),
    }
    for task, g in goals.items():
        rg = replace(g, **{k: R @ getattr(g, k) for k in ("target", "direction", "heading") if getattr(g, k) is not None})
        r1 = E.task_reward(task, s, a, nxt, g, CFG)
        r2 = E.task_reward(task, rot(s), a, rot(nxt), rg, CFG)
        assert r1 == pytest.approx(r2, abs=1e-6)
        assert np.allclose(E.goal_features(g, s), E.goal_features(rg, rot(s)), atol=1e-6)


def test_perturbation_examples():
    s = E.standing_state()
    assert np.array_equal(E.apply_perturbation(s, np.zeros(2), CFG).as_array(), s.as_array())
    p = E.apply_perturbation(s, np.array([4.0, 0.0]), CFG)
    assert p.u == pytest.approx(0.4) and p.vx == 4.0
    s8 = replace(s, u=np.float64(0.8))
    assert E.apply_perturbation(s8, np.array([0.0, 6.0]), CFG).u == 0.0


def test_fallen_and_recovered_predicates():
    s = E.standing_state()
    assert E.is_fallen(replace(s, u=np.float64(0.29)))
    assert E.is_recovered(replace(s, u=np.float64(0.85)))
    assert not E.is_recovered(replace(s, u=np.float64(0.85), h=np.float64(0.5)))


def test_termination():
    s = E.standing_state()
    strike = TaskGoal("strike", target=np.zeros(2), tilt=np.float64(0), tilt_rate=np.float64(0))
    assert E.episode_terminated("strike", s, strike)
    assert not E.episode_terminated("strike", s, replace(strike, target=np.array([1.0, 0.0])))
    assert not E.episode_terminated("location", s, TaskGoal("location", target=np.zeros(2)))


def test_determinism():
    def run():
        rng = np.random.default_rng(9)
        s = E.reset(CFG, rng, 0.5)
        out = []
        for _ in range(50):
            s = E.step(s, random_action(rng), CFG)
            out.append(s.as_array())
        return np.array(out)

    assert np.array_equal(run(), run())
