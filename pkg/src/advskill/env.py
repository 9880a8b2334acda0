"""Planar character simulator and downstream tasks.

The character is a point root with heading, a posture height ``h``, an
uprightness scalar ``u`` and a two-link sword arm driven by PD servos. All
functions are vectorized: every :class:`CharState` field may be a scalar or
an array with a shared leading shape, and actions are ``(..., 7)`` arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace

import numpy as np

from .errors import ConfigError, SimulationFault, UsageError

STATE_FIELDS = ("x", "y", "theta", "vx", "vy", "omega", "h", "u", "q1", "q2", "dq1", "dq2")
ACTION_NAMES = ("a_fwd", "a_lat", "a_turn", "a_h", "a_bal", "t1", "t2")
FEATURE_NAMES = (
    "h", "u", "vx_local", "vy_local", "omega", "q1", "q2", "dq1", "dq2", "tip_x", "tip_y",
)
ACTION_DIM = len(ACTION_NAMES)
OBS_DIM = len(FEATURE_NAMES)

ACTION_LOW = np.array([-1.0, -1.0, -1.0, -1.0, 0.0, -np.pi, -np.pi])
ACTION_HIGH = np.array([1.0, 1.0, 1.0, 1.0, 1.0, np.pi, np.pi])

H_MIN, H_MAX = 0.2, 1.0
RECOVERED_MIN_HEIGHT = 0.8

TASKS = ("reach", "speed", "steering", "location", "strike")
GOAL_DIMS = {"reach": 2, "speed": 3, "steering": 4, "location": 2, "strike": 6}


@dataclass(frozen=True)
class EnvConfig:
    dt_control: float = 1.0 / 30.0
    substeps: int = 4
    a_max: float = 8.0
    alpha_max: float = 10.0
    c_v: float = 0.8
    c_omega: float = 2.0
    h_rate: float = 2.0
    kp: float = 40.0
    kd: float = 4.0
    link1: float = 0.4
    link2: float = 0.4
    k_rec: float = 2.0
    u_fall: float = 0.3
    u_rec: float = 0.8
    k_dist: float = 0.15
    # tasks
    reach_radius: float = 1.0
    speed_cap: float = 4.0
    steering_speed: float = 1.5
    location_radius: float = 5.0
    strike_min_dist: float = 2.0
    strike_max_dist: float = 5.0
    strike_contact_radius: float = 0.2
    strike_min_tip_speed: float = 1.0
    strike_tilt_gain: float = 1.0
    strike_body_radius: float = 0.3

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not v > 0:
                raise ConfigError(f"env.{f.name} must be positive, got {v}")
        if not 0 < self.u_fall < self.u_rec < 1:
            raise ConfigError("need 0 < u_fall < u_rec < 1")

    @property
    def dt_physics(self) -> float:
        return self.dt_control / self.substeps


@dataclass
class CharState:
    x: np.ndarray
    y: np.ndarray
    theta: np.ndarray
    vx: np.ndarray
    vy: np.ndarray
    omega: np.ndarray
    h: np.ndarray
    u: np.ndarray
    q1: np.ndarray
    q2: np.ndarray
    dq1: np.ndarray
    dq2: np.ndarray

    def as_array(self) -> np.ndarray:
        return np.stack(np.broadcast_arrays(*(np.asarray(getattr(self, f), dtype=np.float64) for f in STATE_FIELDS)), axis=-1)

    @classmethod
    def from_array(cls, arr) -> "CharState":
        arr = np.asarray(arr, dtype=np.float64)
        return cls(*(arr[..., i].copy() for i in range(len(STATE_FIELDS))))

    def copy(self) -> "CharState":
        return CharState.from_array(self.as_array())

    def take(self, idx) -> "CharState":
        return CharState.from_array(self.as_array()[idx])

    @property
    def position(self) -> np.ndarray:
        return np.stack(np.broadcast_arrays(self.x, self.y), axis=-1)

    @property
    def velocity(self) -> np.ndarray:
        return np.stack(np.broadcast_arrays(self.vx, self.vy), axis=-1)

    @property
    def heading_vec(self) -> np.ndarray:
        return np.stack([np.cos(self.theta), np.sin(self.theta)], axis=-1)


def standing_state(theta=0.0) -> CharState:
    theta = np.asarray(theta, dtype=np.float64)
    z = np.zeros_like(theta)
    return CharState(z.copy(), z.copy(), theta.copy(), z.copy(), z.copy(), z.copy(),
                     z + 1.0, z + 1.0, z.copy(), z.copy(), z.copy(), z.copy())


def stack_states(states: list[CharState]) -> CharState:
    return CharState.from_array(np.stack([s.as_array() for s in states]))


def reset(config: EnvConfig, rng: np.random.Generator, fall_prob: float) -> CharState:
    """Initial state; fallen with probability ``fall_prob``."""
    if not 0.0 <= fall_prob <= 1.0:
        raise ConfigError(f"fall_prob must be in [0, 1], got {fall_prob}")
    fallen = rng.random() < fall_prob
    theta = rng.uniform(-np.pi, np.pi)
    if not fallen:
        return standing_state(theta)
    vx, vy, om, dq1, dq2 = rng.normal(0.0, 0.3, size=5)
    return CharState(
        x=np.float64(0.0), y=np.float64(0.0), theta=np.float64(theta),
        vx=np.float64(vx), vy=np.float64(vy), omega=np.float64(om),
        h=np.float64(rng.uniform(H_MIN, H_MAX)), u=np.float64(rng.uniform(0.0, config.u_fall)),
        q1=np.float64(rng.uniform(-np.pi, np.pi)), q2=np.float64(rng.uniform(-np.pi, np.pi)),
        dq1=np.float64(dq1), dq2=np.float64(dq2),
    )


def clamp_action(action) -> np.ndarray:
    action = np.asarray(action, dtype=np.float64)
    if action.shape[-1] != ACTION_DIM:
        raise ConfigError(f"actions must have {ACTION_DIM} components, got shape {action.shape}")
    return np.clip(action, ACTION_LOW, ACTION_HIGH)


def _substep(s: CharState, a: np.ndarray, cfg: EnvConfig) -> CharState:
    dt = cfg.dt_physics
    a_fwd, a_lat, a_turn, a_h, a_bal, t1, t2 = (a[..., i] for i in range(ACTION_DIM))
    s_loc = np.where(s.u < cfg.u_fall, s.u, 1.0)
    c, sn = np.cos(s.theta), np.sin(s.theta)
    acc_x = (c * a_fwd - sn * a_lat) * cfg.a_max * s_loc
    acc_y = (sn * a_fwd + c * a_lat) * cfg.a_max * s_loc
    vx = s.vx + acc_x * dt - cfg.c_v * s.vx * dt
    vy = s.vy + acc_y * dt - cfg.c_v * s.vy * dt
    theta = s.theta + s.omega * dt
    omega = s.omega + a_turn * cfg.alpha_max * s_loc * dt - cfg.c_omega * s.omega * dt
    x = s.x + vx * dt
    y = s.y + vy * dt
    h = np.clip(s.h + a_h * cfg.h_rate * dt, H_MIN, H_MAX)
    ddq1 = cfg.kp * (t1 - s.q1) - cfg.kd * s.dq1
    ddq2 = cfg.kp * (t2 - s.q2) - cfg.kd * s.dq2
    dq1 = s.dq1 + ddq1 * dt
    dq2 = s.dq2 + ddq2 * dt
    q1 = np.clip(s.q1 + dq1 * dt, -np.pi, np.pi)
    q2 = np.clip(s.q2 + dq2 * dt, -np.pi, np.pi)
    u = np.clip(s.u + cfg.k_rec * a_bal * dt, 0.0, 1.0)
    return CharState(x, y, theta, vx, vy, omega, h, u, q1, q2, dq1, dq2)


def step(state: CharState, action, config: EnvConfig) -> CharState:
    """Advance one control step (``substeps`` explicit integrator substeps)."""
    a = np.asarray(action, dtype=np.float64)
    if not np.all(np.isfinite(a)) or not np.all(np.isfinite(state.as_array())):
        raise SimulationFault("non-finite state or action passed to step")
    a = clamp_action(a)
    s = state
    for _ in range(config.substeps):
        s = _substep(s, a, config)
    if not np.all(np.isfinite(s.as_array())):
        raise SimulationFault("simulation produced non-finite state")
    return s


def sword_tip_local(state: CharState, config: EnvConfig | None = None) -> np.ndarray:
    cfg = config or EnvConfig()
    q1, q2 = np.asarray(state.q1), np.asarray(state.q2)
    tx = cfg.link1 * np.cos(q1) + cfg.link2 * np.cos(q1 + q2)
    ty = cfg.link1 * np.sin(q1) + cfg.link2 * np.sin(q1 + q2)
    return np.stack([tx, ty], axis=-1)


def to_local(state: CharState, vec) -> np.ndarray:
    """Rotate world-frame vectors into the character frame, R(-theta) v."""
    vec = np.asarray(vec, dtype=np.float64)
    c, s = np.cos(state.theta), np.sin(state.theta)
    return np.stack([c * vec[..., 0] + s * vec[..., 1], -s * vec[..., 0] + c * vec[..., 1]], axis=-1)


def to_world(state: CharState, vec) -> np.ndarray:
    vec = np.asarray(vec, dtype=np.float64)
    c, s = np.cos(state.theta), np.sin(state.theta)
    return np.stack([c * vec[..., 0] - s * vec[..., 1], s * vec[..., 0] + c * vec[..., 1]], axis=-1)


def sword_tip_world(state: CharState, config: EnvConfig | None = None) -> np.ndarray:
    return state.position + to_world(state, sword_tip_local(state, config))


def observe(state: CharState, config: EnvConfig | None = None) -> np.ndarray:
    """Local-frame feature vector(s), ordered as :data:`FEATURE_NAMES`."""
    v_loc = to_local(state, state.velocity)
    tip = sword_tip_local(state, config)
    cols = np.broadcast_arrays(state.h, state.u, v_loc[..., 0], v_loc[..., 1], state.omega,
                               state.q1, state.q2, state.dq1, state.dq2, tip[..., 0], tip[..., 1])
    return np.stack(cols, axis=-1).astype(np.float64)


def apply_perturbation(state: CharState, impulse, config: EnvConfig) -> CharState:
    """Instantaneous push: velocity jumps by ``impulse``, uprightness drops by k_dist*|impulse|."""
    dv = np.asarray(impulse, dtype=np.float64)
    mag = np.linalg.norm(dv, axis=-1)
    return replace(
        state.copy(),
        vx=state.vx + dv[..., 0],
        vy=state.vy + dv[..., 1],
        u=np.clip(state.u - config.k_dist * mag, 0.0, 1.0),
    )


def is_fallen(state: CharState, config: EnvConfig | None = None):
    cfg = config or EnvConfig()
    return np.asarray(state.u) < cfg.u_fall


def is_recovered(state: CharState, config: EnvConfig | None = None):
    cfg = config or EnvConfig()
    return (np.asarray(state.u) >= cfg.u_rec) & (np.asarray(state.h) >= RECOVERED_MIN_HEIGHT)


# ---------------------------------------------------------------- tasks


@dataclass
class TaskGoal:
    """Goal of one task; array fields may carry a leading batch axis.

    ``target`` is a world position (reach, location, strike); ``direction``
    and ``heading`` are world unit vectors; ``tilt`` / ``tilt_rate`` track the
    strike target falling over.
    """

    task: str
    target: np.ndarray | None = None
    direction: np.ndarray | None = None
    speed: np.ndarray | None = None
    heading: np.ndarray | None = None
    tilt: np.ndarray | None = None
    tilt_rate: np.ndarray | None = None

    def _array_fields(self):
        return [f.name for f in fields(self) if f.name != "task" and getattr(self, f.name) is not None]

    def take(self, idx) -> "TaskGoal":
        return replace(self, **{n: np.asarray(getattr(self, n))[idx] for n in self._array_fields()})

    def assign(self, idx, other: "TaskGoal") -> None:
        for n in self._array_fields():
            getattr(self, n)[idx] = getattr(other, n)

    def copy(self) -> "TaskGoal":
        return replace(self, **{n: np.array(getattr(self, n), dtype=np.float64) for n in self._array_fields()})

    @staticmethod
    def stack(goals: list["TaskGoal"]) -> "TaskGoal":
        first = goals[0]
        return replace(first, **{n: np.stack([np.asarray(getattr(g, n)) for g in goals]) for n in first._array_fields()})


def _check_task(task: str) -> None:
    if task not in TASKS:
        raise ConfigError(f"unknown task {task!r}; expected one of {TASKS}")


def _uniform_disc(rng, radius, inner=0.0):
    ang = rng.uniform(-np.pi, np.pi)
    r = np.sqrt(rng.uniform(inner**2, radius**2))
    return np.array([r * np.cos(ang), r * np.sin(ang)])


def _unit(rng):
    ang = rng.uniform(-np.pi, np.pi)
    return np.array([np.cos(ang), np.sin(ang)])


def sample_goal(task: str, rng: np.random.Generator, state: CharState, config: EnvConfig | None = None) -> TaskGoal:
    """Goal for a single (unbatched) state."""
    _check_task(task)
    cfg = config or EnvConfig()
    root = np.array([float(state.x), float(state.y)])
    if task == "reach":
        return TaskGoal(task, target=root + _uniform_disc(rng, cfg.reach_radius))
    if task == "speed":
        return TaskGoal(task, direction=_unit(rng), speed=np.float64(rng.uniform(0.0, cfg.speed_cap)))
    if task == "steering":
        return TaskGoal(task, direction=_unit(rng), speed=np.float64(cfg.steering_speed), heading=_unit(rng))
    if task == "location":
        return TaskGoal(task, target=root + _uniform_disc(rng, cfg.location_radius))
    return TaskGoal(
        task,
        target=root + _uniform_disc(rng, cfg.strike_max_dist, cfg.strike_min_dist),
        tilt=np.float64(0.0),
        tilt_rate=np.float64(0.0),
    )


def goal_features(goal: TaskGoal, state: CharState) -> np.ndarray:
    """Goal expressed in the character's local frame (policy input)."""
    t = goal.task
    if t in ("reach", "location"):
        return to_local(state, goal.target - state.position)
    if t == "speed":
        d = to_local(state, goal.direction)
        return np.concatenate([d, np.asarray(goal.speed)[..., None] * np.ones(d.shape[:-1] + (1,))], axis=-1)
    if t == "steering":
        return np.concatenate([to_local(state, goal.direction), to_local(state, goal.heading)], axis=-1)
    if t == "strike":
        rel = to_local(state, goal.target - state.position)
        # the target does not translate; its velocity in the local frame is -R(-theta) v_root
        vel = to_local(state, -state.velocity)
        tilt = np.asarray(goal.tilt)[..., None] * np.ones(rel.shape[:-1] + (1,))
        rate = np.asarray(goal.tilt_rate)[..., None] * np.ones(rel.shape[:-1] + (1,))
        return np.concatenate([rel, vel, tilt, rate], axis=-1)
    raise ConfigError(f"unknown task {t!r}")


def advance_goal(goal: TaskGoal, state: CharState, next_state: CharState, config: EnvConfig) -> TaskGoal:
    """Strike only: tilt the target when the sword tip hits it fast enough."""
    if goal.task != "strike":
        return goal
    tip0, tip1 = sword_tip_world(state, config), sword_tip_world(next_state, config)
    tip_speed = np.linalg.norm(tip1 - tip0, axis=-1) / config.dt_control
    contact = np.linalg.norm(tip1 - goal.target, axis=-1) < config.strike_contact_radius
    hit = contact & (tip_speed > config.strike_min_tip_speed)
    rate = np.where(hit, np.maximum(goal.tilt_rate, config.strike_tilt_gain * tip_speed), goal.tilt_rate)
    tilt = np.clip(goal.tilt + rate * config.dt_control, 0.0, np.pi / 2)
    rate = np.where(tilt >= np.pi / 2, 0.0, rate)
    return replace(goal, tilt=tilt, tilt_rate=rate)


def task_reward(task: str, state: CharState, action, next_state: CharState, goal: TaskGoal,
                config: EnvConfig | None = None):
    """Task reward for the transition ``state -> next_state``.

    Strike reads the tilt stored in ``goal``; pass the goal returned by
    :func:`advance_goal` for this transition.
    """
    _check_task(task)
    if goal.task != task:
        raise UsageError(f"goal is for task {goal.task!r}, reward requested for {task!r}")
    if task == "reach":
        err = goal.target - sword_tip_world(next_state, config)
        return np.exp(-5.0 * np.sum(err**2, axis=-1))
    if task == "speed":
        along = np.sum(goal.direction * next_state.velocity, axis=-1)
        return np.exp(-0.25 * (goal.speed - along) ** 2)
    if task == "steering":
        along = np.sum(goal.direction * next_state.velocity, axis=-1)
        facing = np.sum(goal.heading * next_state.heading_vec, axis=-1)
        return 0.7 * np.exp(-0.25 * (goal.speed - along) ** 2) + 0.3 * facing
    if task == "location":
        err = goal.target - next_state.position
        return np.exp(-0.5 * np.sum(err**2, axis=-1))
    return 1.0 - np.cos(goal.tilt)


def episode_terminated(task: str, state: CharState, goal: TaskGoal, config: EnvConfig | None = None):
    """Early termination: only Strike, when the body touches the target."""
    _check_task(task)
    cfg = config or EnvConfig()
    if task != "strike":
        return np.zeros(np.shape(state.x), dtype=bool)
    return np.linalg.norm(goal.target - state.position, axis=-1) < cfg.strike_body_radius
