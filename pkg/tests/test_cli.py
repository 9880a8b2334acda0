import csv
import json

import numpy as np
import pytest

from advskill.cli import main
from advskill.config import build_config, read_config_file
from advskill.errors import ConfigError
from advskill.motiondata import load_dataset

SMALL_PRETRAIN = """
[data]
kinds = ["idle", "walk"]
n_frames = 40

[pretrain]
iterations = 2
n_envs = 2
steps_per_iter = 10
episode_len = 30
max_hold = 30
latent_dim = 3
policy_hidden = [8]
value_hidden = [8]
disc_hidden = [8]
disc_batch = 16
minibatches = 1
epochs = 1
checkpoint_every = 1

[task]
iterations = 2
n_envs = 2
episode_len = 30
goal_resample = 15
hidden = [8]
minibatches = 1
epochs = 1

[eval]
coverage_trajs = 3
traj_len = 10
transition_trajs = 3
dest_len = 10
recovery_trials = 3
recovery_timeout = 10
"""


@pytest.fixture(scope="module")
def small(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "small.ini"
    cfg.write_text(SMALL_PRETRAIN)
    assert main(["pretrain", "--config", str(cfg), "--out", str(root / "pre"), "--seed", "1"]) == 0
    return root, cfg


def test_config_precedence(tmp_path):
    path = tmp_path / "c.ini"
    path.write_text("[run]\nseed = 3\nout = \"a\"\n[pretrain]\niterations = 7\npolicy_hidden = [4, 4]\n")
    cfg = build_config(path)
    assert cfg.seed == 3 and cfg.out == "a" and cfg.pretrain.iterations == 7
    assert cfg.pretrain.policy_hidden == (4, 4)
    cfg = build_config(path, seed=9, out="b")
    assert cfg.seed == 9 and cfg.out == "b" and cfg.pretrain_config().seed == 9
    paper = build_config(path, preset="paper")
    assert paper.pretrain.iterations == 7 and paper.pretrain.latent_dim == 64 and paper.task.n_envs == 2048


@pytest.mark.parametrize("text", ["[pretrain]\nbogus = 1\n", "[nowhere]\nx = 1\n", "[pretrain]\nseed = 1\n",
                                  "[run]\npreset = huge\n", "[run]\nseed = -1\n", "[data]\nkinds = [\"fly\"]\n",
                                  "no section\n"])
def test_bad_config_rejected(tmp_path, text):
    path = tmp_path / "c.ini"
    path.write_text(text)
    with pytest.raises(ConfigError):
        build_config(path)
    assert main(["grad-check", "--config", str(path), "--instances", "1"]) == 2


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        read_config_file(tmp_path / "nope.ini")


def test_gen_data_is_deterministic(tmp_path, capsys):
    assert main(["gen-data", "--out", str(tmp_path / "a"), "--seed", "4"]) == 0
    assert main(["gen-data", "--out", str(tmp_path / "b"), "--seed", "4"]) == 0
    a, b = (tmp_path / "a" / "dataset.json").read_bytes(), (tmp_path / "b" / "dataset.json").read_bytes()
    assert a == b
    assert len(load_dataset(tmp_path / "a" / "dataset.json").clips) == 8
    cfg = tmp_path / "c.ini"
    cfg.write_text("[data]\nclips_per_kind = 2\n")
    assert main(["gen-data", "--out", str(tmp_path / "c"), "--config", str(cfg)]) == 0
    assert len(load_dataset(tmp_path / "c" / "dataset.json").clips) == 16


def test_pretrain_resume_matches(small, tmp_path):
    root, cfg = small
    out = tmp_path / "resumed"
    assert main(["pretrain", "--config", str(cfg), "--out", str(out), "--seed", "1",
                 "--resume", str(root / "pre" / "llp_iter0001.ckpt")]) == 0
    assert (out / "metrics.csv").read_bytes() == (root / "pre" / "metrics.csv").read_bytes()
    assert (out / "llp.ckpt").read_bytes() == (root / "pre" / "llp.ckpt").read_bytes()


def test_threads_flag_does_not_change_results(small, tmp_path):
    root, cfg = small
    assert main(["pretrain", "--config", str(cfg), "--out", str(tmp_path), "--seed", "1", "--threads", "1"]) == 0
    assert (tmp_path / "metrics.csv").read_bytes() == (root / "pre" / "metrics.csv").read_bytes()
    assert main(["pretrain", "--config", str(cfg), "--out", str(tmp_path), "--threads", "0"]) == 2


def test_train_task_and_rollout(small, tmp_path):
    root, cfg = small
    llp = str(root / "pre" / "llp.ckpt")
    assert main(["train-task", "--config", str(cfg), "--llp", llp, "--task", "dance", "--out", str(tmp_path)]) == 2
    assert main(["train-task", "--config", str(cfg), "--llp", llp, "--task", "reach", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "hlp_reach.ckpt").exists()
    assert len((tmp_path / "task_metrics.csv").read_text().splitlines()) == 3

    hlp = str(tmp_path / "hlp_reach.ckpt")
    assert main(["rollout", "--config", str(cfg), "--llp", llp, "--hlp", hlp, "--n", "2", "--steps", "12",
                 "--out", str(tmp_path / "r1")]) == 0
    rows = list(csv.DictReader(open(tmp_path / "r1" / "rollout.csv")))
    assert len(rows) == 24 and {"x", "y", "z0", "task_reward", "style_reward"} <= set(rows[0])
    assert main(["rollout", "--config", str(cfg), "--llp", llp, "--hlp", hlp, "--task", "speed"]) == 2


def test_rollout_fixed_latent(small, tmp_path):
    root, cfg = small
    llp = str(root / "pre" / "llp.ckpt")
    for name in ("a", "b"):
        assert main(["rollout", "--config", str(cfg), "--llp", llp, "--latent", "[2, 0, 0]", "--steps", "30",
                     "--out", str(tmp_path / name)]) == 0
    text = (tmp_path / "a" / "rollout.csv").read_text()
    assert text == (tmp_path / "b" / "rollout.csv").read_text()
    rows = list(csv.DictReader(text.splitlines()))
    assert len(rows) == 30
    assert {(r["z0"], r["z1"], r["z2"]) for r in rows} == {("1", "0", "0")}
    assert all(np.isnan(float(r["task_reward"])) for r in rows)
    assert main(["rollout", "--config", str(cfg), "--llp", llp, "--latent", "[1, 0]"]) == 2
    assert main(["rollout", "--config", str(cfg), "--llp", llp, "--latent", "oops"]) == 2


@pytest.mark.parametrize("cmd,name", [("eval-coverage", "coverage.csv"), ("eval-transitions", "transitions.csv"),
                                      ("eval-recovery", "recovery.csv")])
def test_eval_commands(small, tmp_path, cmd, name):
    root, cfg = small
    llp = str(root / "pre" / "llp.ckpt")
    for sub in ("a", "b"):
        assert main([cmd, "--config", str(cfg), "--llp", llp, "--out", str(tmp_path / sub)]) == 0
    assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert main([cmd, "--config", str(cfg), "--llp", str(tmp_path / "none.ckpt"), "--out", str(tmp_path)]) == 2


def test_grad_check_command(capsys):
    assert main(["grad-check", "--instances", "2"]) == 0
    lines = [ln for ln in capsys.readouterr().out.splitlines() if ln.startswith(("PASS", "FAIL"))]
    assert len(lines) >= 6 and all(ln.startswith("PASS") for ln in lines)
    assert main(["grad-check", "--instances", "0"]) == 2


def test_argparse_usage_errors():
    with pytest.raises(SystemExit) as exc:
        main(["pretrain", "--preset", "giant"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit):
        main([])


def test_paper_preset_values():
    cfg = build_config(preset="paper")
    p = cfg.pretrain
    assert (p.latent_dim, p.n_envs, p.steps_per_iter, p.disc_batch) == (64, 4096, 32, 4096)
    assert p.policy_hidden == (1024, 1024, 512) and p.disc_hidden == (1024, 1024, 512)
    assert p.stepsize == pytest.approx(2e-5) and p.beta == pytest.approx(0.5) and p.w_gp == pytest.approx(5.0)
    assert cfg.task.hidden == (1024, 512)
    assert json.loads(json.dumps(p.to_dict()))["latent_dim"] == 64
