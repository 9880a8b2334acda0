import numpy as np
import pytest

from advskill import env as envmod
from advskill.env import TASKS, TaskGoal, standing_state
from advskill.errors import ConfigError
from advskill.models import HighLevelModel
from advskill.motiondata import build_default_dataset
from advskill.nncore import GaussianPolicy, MlpSpec
from advskill.pretrain import PretrainRun, PretrainRunConfig
from advskill.tasktrain import (
    TASK_METRIC_FIELDS,
    TaskTrainConfig,
    _frozen_digest,
    evaluate_task,
    hlp_act,
    hlp_reward,
    run_task_training,
)


@pytest.fixture(scope="module")
def llp():
    ds = build_default_dataset(np.random.default_rng(0), kinds=("idle", "walk", "turn"), n_frames=30)
    cfg = PretrainRunConfig(n_envs=2, latent_dim=3, policy_hidden=(16,), value_hidden=(16,), disc_hidden=(16,))
    return PretrainRun(cfg, ds).model


def quick(task, **kw):
    base = dict(task=task, iterations=2, n_envs=3, episode_len=30, goal_resample=15, hidden=(16,), epochs=1,
                minibatches=2)
    return TaskTrainConfig(**{**base, **kw})


@pytest.mark.parametrize("task", TASKS)
def test_smoke_each_task(llp, task, tmp_path):
    hl, rows = run_task_training(llp, quick(task), tmp_path)
    assert len(rows) == 2 and hl.task == task
    lines = (tmp_path / "task_metrics.csv").read_text().splitlines()
    assert lines[0] == ",".join(TASK_METRIC_FIELDS) and len(lines) == 3
    back = HighLevelModel.load(tmp_path / f"hlp_{task}.ckpt", expect_latent_dim=3)
    assert all(np.array_equal(back.policy.params[k], hl.policy.params[k]) for k in hl.policy.params)
    for r in rows:
        assert all(np.isfinite(r[k]) for k in TASK_METRIC_FIELDS)


def test_low_level_stays_frozen(llp):
    before = _frozen_digest(llp)
    run_task_training(llp, quick("location", iterations=3))
    assert _frozen_digest(llp) == before


def test_low_level_only_sees_unit_latents(llp, monkeypatch):
    seen = []
    original = type(llp).act

    def spy(self, obs, z, noise=None):
        seen.append(np.linalg.norm(z, axis=-1))
        return original(self, obs, z, noise)

    monkeypatch.setattr(type(llp), "act", spy)
    run_task_training(llp, quick("speed"))
    norms = np.concatenate(seen)
    assert len(norms) > 0 and np.allclose(norms, 1.0, atol=1e-6)


def test_training_is_deterministic(llp):
    a = run_task_training(llp, quick("steering", seed=4))[1]
    b = run_task_training(llp, quick("steering", seed=4))[1]
    assert a == b


def test_config_validation():
    with pytest.raises(ConfigError):
        TaskTrainConfig(task="dance")
    with pytest.raises(ConfigError):
        TaskTrainConfig(hold_steps=0)
    with pytest.raises(ConfigError):
        TaskTrainConfig(episode_len=301)


def origin_policy(d=4, var=1e-6):
    pol = GaussianPolicy.create(MlpSpec(3, (), d), var, np.random.default_rng(0), np.float64)
    pol.params = {k: np.zeros_like(v) for k, v in pol.params.items()}
    return pol


def test_latents_are_projected_even_near_origin():
    pol = origin_policy()
    z_raw, z, logp = hlp_act(pol, np.zeros((50, 3)), np.random.default_rng(0))
    assert np.max(np.linalg.norm(z_raw, axis=1)) < 1e-2
    assert np.allclose(np.linalg.norm(z, axis=1), 1.0, atol=1e-6)
    assert np.allclose(z, z_raw / np.linalg.norm(z_raw, axis=1, keepdims=True))
    # log-probability is taken in the unnormalized space
    assert np.allclose(logp, pol.logprob(np.zeros((50, 3)), z_raw))


def test_zero_sample_is_redrawn():
    pol = origin_policy()
    z_raw, z, _ = hlp_act(pol, np.zeros((2, 3)), np.random.default_rng(1), noise=np.zeros((2, 4)))
    assert np.all(np.linalg.norm(z_raw, axis=1) > 1e-8)
    assert np.allclose(np.linalg.norm(z, axis=1), 1.0)
    with pytest.raises(ConfigError):
        hlp_act(pol, np.zeros((2, 3)))


def test_single_row_act():
    pol = origin_policy(var=0.01)
    z_raw, z, logp = hlp_act(pol, np.zeros(3), np.random.default_rng(2))
    assert z.shape == (4,) and isinstance(logp, float)


def test_reward_combines_task_and_style(llp):
    zeroed = type(llp)(llp.policy, llp.value, type(llp.discenc)(llp.discenc.obs_dim, llp.discenc.latent_dim,
                                                              llp.discenc.trunk_dims,
                                                              {k: np.zeros_like(v) for k, v in
                                                               llp.discenc.params.items()}),
                       llp.stats, llp.env_config)
    s = standing_state(0.0)
    goal = TaskGoal("location", target=np.array([0.0, 0.0]))
    a = np.zeros(7)
    nxt = envmod.step(s, a, llp.env_config)
    goal = TaskGoal("location", target=nxt.position.copy())
    total, task, style = hlp_reward(zeroed, "location", s, a, nxt, goal, 0.9, 0.1)
    assert float(task) == pytest.approx(1.0)
    assert float(style) == pytest.approx(np.log(2.0))
    assert float(total) == pytest.approx(0.969315, abs=1e-6)
    total0, task0, _ = hlp_reward(zeroed, "location", s, a, nxt, goal, 0.9, 0.0)
    assert float(total0) == pytest.approx(0.9 * float(task0))


def test_reward_upper_bound(llp):
    rng = np.random.default_rng(3)
    for _ in range(20):
        s = envmod.reset(llp.env_config, rng, 0.5)
        a = rng.uniform(-1, 1, 7)
        nxt = envmod.step(s, a, llp.env_config)
        goal = envmod.sample_goal("reach", rng, s)
        total, _, _ = hlp_reward(llp, "reach", s, a, nxt, goal, 0.9, 0.1)
        assert float(total) <= 0.9 + 0.1 * 9.2104 + 1e-9


def test_latent_dim_mismatch_rejected(llp, tmp_path):
    hl, _ = run_task_training(llp, quick("location", iterations=1), tmp_path)
    with pytest.raises(ConfigError):
        HighLevelModel.load(tmp_path / "hlp_location.ckpt", expect_latent_dim=5)


def test_evaluation_is_deterministic(llp):
    hl, _ = run_task_training(llp, quick("location", iterations=1))
    a = evaluate_task(llp, "location", 4, 7, hl, episode_len=30)
    b = evaluate_task(llp, "location", 4, 7, hl, episode_len=30)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
    base = evaluate_task(llp, "location", 4, 7, None, episode_len=30)
    assert base[0].shape == (4,) and np.all(base[0] >= 0)
    speed = evaluate_task(llp, "speed", 2, 1, None, episode_len=10)
    assert np.all(np.isnan(speed[0]))
