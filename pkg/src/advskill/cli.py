"""Command-line entry point: ``advskill <command> [flags]``.

Exit status is 0 on success, 2 for usage or configuration errors and 1 for
failures during a run (including a failed gradient check).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import env as envmod
from .adversarial import net_input, style_reward
from .config import PRESETS, RunConfig, build_config
from .diagnostics import coverage_csv, coverage_histogram, recovery_csv, recovery_probe, transition_matrix, \
    transitions_csv
from .env import STATE_FIELDS, TASKS
from .errors import AdvSkillError, ConfigError, UsageError
from .gradcheck import TOLERANCE, nonfinite_guard_trips, run_grad_checks
from .latent import normalize, sample_prior
from .models import HighLevelModel, LowLevelModel
from .motiondata import MotionDataset, build_default_dataset, load_dataset, save_dataset
from .pretrain import run_pretraining
from .tasktrain import TaskEnvs, hlp_act, hlp_input, run_task_training

log = logging.getLogger("advskill")

COMMANDS = ("gen-data", "pretrain", "train-task", "rollout", "eval-coverage", "eval-transitions", "eval-recovery",
            "grad-check")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="PATH", help="override file (INI sections run/env/data/pretrain/task/eval)")
    p.add_argument("--seed", type=int, help="master seed (overrides run.seed)")
    p.add_argument("--out", metavar="DIR", help="output directory (overrides run.out)")
    p.add_argument("--preset", choices=PRESETS, help="default values to start from")
    p.add_argument("--threads", type=int, metavar="N", help="cap BLAS worker threads")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-iteration progress")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="advskill", description="Latent skill pre-training and reuse on a planar "
                                                                 "character.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("gen-data", help="write the synthetic motion dataset")
    _common(p)

    p = sub.add_parser("pretrain", help="pre-train the low-level policy")
    _common(p)
    p.add_argument("--data", metavar="PATH", help="dataset JSON (default: generate from the config)")
    p.add_argument("--resume", metavar="CKPT", help="continue a run from its checkpoint")

    p = sub.add_parser("train-task", help="train a high-level policy on a frozen low-level one")
    _common(p)
    p.add_argument("--llp", required=True, metavar="CKPT")
    p.add_argument("--task", required=True, help=f"one of {', '.join(TASKS)}")

    p = sub.add_parser("rollout", help="dump per-step trajectories to CSV")
    _common(p)
    p.add_argument("--llp", required=True, metavar="CKPT")
    p.add_argument("--hlp", metavar="CKPT", help="drive latents with a high-level policy")
    p.add_argument("--task", help="task for reward columns (default: the high-level policy's task)")
    p.add_argument("--latent", metavar="JSON", help="fixed latent, e.g. '[1, 0, 0, 0]' (normalized)")
    p.add_argument("--n", type=int, default=1, help="episodes")
    p.add_argument("--steps", type=int, default=300, help="control steps per episode")

    for name, what in (("eval-coverage", "clip coverage histogram"), ("eval-transitions", "skill transition matrix"),
                       ("eval-recovery", "fall recovery probe")):
        p = sub.add_parser(name, help=what)
        _common(p)
        p.add_argument("--llp", required=True, metavar="CKPT")
        if name != "eval-recovery":
            p.add_argument("--data", metavar="PATH", help="dataset JSON (default: generate from the config)")

    p = sub.add_parser("grad-check", help="finite-difference check of every loss gradient")
    _common(p)
    p.add_argument("--instances", type=int, default=100, help="random instances per loss family")
    return parser


def _dataset(cfg: RunConfig, path: str | None) -> MotionDataset:
    path = path or cfg.data.path
    if path:
        return load_dataset(path)
    return build_default_dataset(np.random.default_rng(cfg.seed), cfg.data.clips_per_kind, cfg.data.kinds,
                                 cfg.data.n_frames)


def _write(out: Path, name: str, text: str) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    target = out / name
    target.write_text(text, encoding="utf-8")
    print(f"wrote {target}")
    return target


def cmd_gen_data(args, cfg: RunConfig) -> int:
    ds = _dataset(cfg, None)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    save_dataset(ds, out / "dataset.json")
    print(f"wrote {out / 'dataset.json'} ({len(ds.clips)} clips, {ds.n_frames} frames)")
    return 0


def cmd_pretrain(args, cfg: RunConfig) -> int:
    ds = _dataset(cfg, args.data)
    run = run_pretraining(cfg.pretrain_config(), ds, cfg.out, resume_from=args.resume)
    last = run.metrics[-1] if run.metrics else {}
    print(f"pre-training finished at iteration {run.iteration}: "
          + ", ".join(f"{k}={last[k]:.4f}" for k in ("style_reward", "skill_reward", "enc_score") if k in last))
    return 0


def cmd_train_task(args, cfg: RunConfig) -> int:
    if args.task not in TASKS:
        raise UsageError(f"unknown task {args.task!r}; expected one of {', '.join(TASKS)}")
    llp = LowLevelModel.load(args.llp)
    _, rows = run_task_training(llp, cfg.task_config(args.task), cfg.out)
    print(f"task {args.task}: final normalized return {rows[-1]['normalized_return']:.4f}")
    return 0


def cmd_rollout(args, cfg: RunConfig) -> int:
    llp = LowLevelModel.load(args.llp)
    if args.n < 1 or args.steps < 1:
        raise UsageError("--n and --steps must be >= 1")
    hl = HighLevelModel.load(args.hlp, expect_latent_dim=llp.latent_dim) if args.hlp else None
    if hl is not None and args.latent:
        raise UsageError("--hlp and --latent are mutually exclusive")
    task = args.task or (hl.task if hl else None)
    if task is not None and task not in TASKS:
        raise UsageError(f"unknown task {task!r}")
    if hl is not None and task != hl.task:
        raise UsageError(f"high-level policy was trained for {hl.task!r}, not {task!r}")
    fixed = None
    if args.latent:
        try:
            fixed = normalize(json.loads(args.latent))
        except (ValueError, TypeError) as exc:
            raise UsageError(f"bad --latent: {exc}") from exc
        if fixed.shape != (llp.latent_dim,):
            raise UsageError(f"--latent needs {llp.latent_dim} components")
    seqs = np.random.SeedSequence(cfg.seed).spawn(args.n + 1)
    latent_rng = np.random.default_rng(seqs[0])
    env_rngs = [np.random.default_rng(s) for s in seqs[1:]]
    ecfg = llp.env_config
    d = llp.latent_dim
    header = ["episode", "step", *STATE_FIELDS, *(f"z{i}" for i in range(d)), "task_reward", "style_reward"]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    hold = cfg.task.hold_steps
    if task is not None:
        envs = TaskEnvs(task, llp, env_rngs, 0.0)
        states, goal = envs.states, envs.goal
    else:
        states = envmod.stack_states([envmod.reset(ecfg, r, 0.0) for r in env_rngs])
        goal = None
    z = np.tile(fixed, (args.n, 1)) if fixed is not None else sample_prior(latent_rng, d, args.n)
    for t in range(args.steps):
        if hl is not None and t % hold == 0:
            x = hlp_input(llp, envmod.observe(states, ecfg), envmod.goal_features(goal, states))
            _, z, _ = hlp_act(hl.policy, x, latent_rng)
        obs = envmod.observe(states, ecfg)
        a = llp.act(obs, z)
        nxt = envmod.step(states, a, ecfg)
        style = style_reward(llp.discenc, net_input(llp.stats, obs), net_input(llp.stats, envmod.observe(nxt, ecfg)))
        if goal is not None:
            new_goal = envmod.advance_goal(goal, states, nxt, ecfg)
            r_task = envmod.task_reward(task, states, a, nxt, new_goal, ecfg)
            goal = new_goal
        else:
            r_task = np.full(args.n, np.nan)
        arr = states.as_array()
        for i in range(args.n):
            w.writerow([i, t, *(f"{v:.9g}" for v in arr[i]), *(f"{v:.9g}" for v in z[i]),
                        f"{float(r_task[i]):.9g}", f"{float(style[i]):.9g}"])
        states = nxt
    _write(Path(cfg.out), "rollout.csv", buf.getvalue())
    return 0


def cmd_eval(args, cfg: RunConfig) -> int:
    llp = LowLevelModel.load(args.llp)
    ev = cfg.eval
    rng = np.random.default_rng(cfg.seed)
    out = Path(cfg.out)
    if args.command == "eval-recovery":
        res = recovery_probe(llp, ev.recovery_trials, rng, (ev.impulse_min, ev.impulse_max), ev.recovery_timeout)
        _write(out, "recovery.csv", recovery_csv(res))
        print(f"recovered {res.success_rate:.1%} of {ev.recovery_trials} trials")
        return 0
    ds = _dataset(cfg, args.data)
    if args.command == "eval-coverage":
        counts = coverage_histogram(llp, ds, ev.coverage_trajs, rng, ev.traj_len)
        _write(out, "coverage.csv", coverage_csv(ds, counts))
        print(f"{int(np.count_nonzero(counts))} of {len(counts)} clips matched")
    else:
        tm = transition_matrix(llp, ds, ev.transition_trajs, rng, dest_len=ev.dest_len)
        _write(out, "transitions.csv", transitions_csv(ds, tm))
        print(f"transition coverage {tm.coverage:.4f}")
    return 0


def cmd_grad_check(args, cfg: RunConfig) -> int:
    if args.instances < 1:
        raise UsageError("--instances must be >= 1")
    results = run_grad_checks(args.instances, cfg.seed)
    ok = True
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.family:<24} instances={r.instances}  "
              f"max_rel_err={r.max_rel_err:.3e}  (tol {TOLERANCE:g})")
        ok &= r.passed
    guard = nonfinite_guard_trips()
    print(f"{'PASS' if guard else 'FAIL'}  {'non-finite guard':<24} NaN input and NaN gradient are rejected")
    return 0 if ok and guard else 1


_HANDLERS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "train-task": cmd_train_task,
    "rollout": cmd_rollout,
    "eval-coverage": cmd_eval,
    "eval-transitions": cmd_eval,
    "eval-recovery": cmd_eval,
    "grad-check": cmd_grad_check,
}


def _thread_limit(n: int | None):
    if n is None:
        return nullcontext()
    if n < 1:
        raise UsageError("--threads must be >= 1")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = build_config(args.config, args.seed, args.preset, args.out)
        with _thread_limit(args.threads):
            return _HANDLERS[args.command](args, cfg)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except AdvSkillError as exc:
        print(f"failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
