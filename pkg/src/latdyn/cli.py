"""Command-line surface binding data generation, training, evaluation,
planning, exploration and trace analysis.

Every option can come from a `key=value` config file (via --config) and is
overridden by explicit flags. Each run writes a manifest of the resolved
values; because the manifest is itself a valid config file, any run can be
reproduced bit-exactly with `latdyn <command> --config <manifest>`.
"""

from __future__ import annotations

import argparse
import math
import os
import sys

import numpy as np

from . import objective as obj
from .charts import write_line_chart
from .envs import ENV_NAMES, make_env, generate_dataset
from .explorer import LoopConfig, PPOConfig, overall_loop
from .model import ModelConfig
from .objective import FULL_MODEL, KINDS
from .pipeline import (
    POLICY_KINDS,
    bc_train,
    default_plan_reward,
    evaluate,
    load_checkpoint,
    subgoal_trace,
)
from .planner import PlanConfig, mpc_episode
from .trajectory import load_dataset

# command -> option name -> (type, default, help); None default means required
OPTIONS = {
    "gen-data": {
        "env": (str, "grid", "environment name: grid or points"),
        "n": (int, 500, "number of expert trajectories"),
        "seed": (int, 0, "master seed"),
        "out": (str, None, "output dataset file"),
    },
    "train": {
        "data": (str, None, "dataset file"),
        "kind": (str, FULL_MODEL, f"one of {', '.join(KINDS)}"),
        "beta": (float, 0.0005, "auxiliary term weight"),
        "kl-start": (float, 0.2, "initial KL weight"),
        "kl-increment": (float, 0.0005, "KL weight increase per iteration"),
        "lr": (float, 0.001, "Adam learning rate"),
        "epochs": (int, 5, "passes over the training split"),
        "batch": (int, 8, "trajectories per minibatch"),
        "seed": (int, 0, "training seed"),
        "holdout": (float, 0.1, "held-out fraction (content-hash split)"),
        "latent-dim": (int, 8, "latent dimension"),
        "hidden-dim": (int, 32, "forward state dimension"),
        "backward-hidden-dim": (int, 32, "backward state dimension"),
        "decoder-hidden-dims": (str, "48", "comma-joined head hidden widths"),
        "out": (str, None, "output directory"),
    },
    "eval": {
        "model": (str, "", "checkpoint file (unused for expert/random)"),
        "kind": (str, "", "override kind; empty uses the checkpoint header"),
        "env": (str, "grid", "environment name"),
        "episodes": (int, 20, "episodes per seed"),
        "seeds": (str, "0,1,2,3,4", "comma-joined evaluation seeds"),
        "data": (str, "", "dataset whose held-out split is scored"),
        "samples": (int, 100, "importance samples for the likelihood bound"),
        "mode": (str, "greedy", "action decoding: greedy or sample"),
        "out": (str, None, "report file"),
    },
    "plan": {
        "model": (str, None, "checkpoint file"),
        "env": (str, "points", "environment name"),
        "m": (int, 2048, "candidate rollouts per replan"),
        "k": (int, 19, "steps executed between replans"),
        "horizon": (int, 38, "imagined rollout length"),
        "episodes": (int, 5, "episodes to run"),
        "episode-length": (int, 400, "step budget per episode"),
        "seed": (int, 0, "seed"),
        "out": (str, None, "report file"),
    },
    "explore": {
        "env": (str, "grid", "environment name"),
        "iterations": (int, 5, "loop iterations"),
        "seed": (int, 0, "seed"),
        "m": (int, 64, "candidate rollouts per replan"),
        "k": (int, 8, "steps executed between replans"),
        "horizon": (int, 16, "imagined rollout length"),
        "episode-length": (int, 64, "MPC episode step budget"),
        "warmup": (int, 50, "random warm-up trajectories"),
        "explore-trajectories": (int, 8, "policy rollouts per iteration"),
        "buffer-capacity": (int, 256, "replay buffer capacity"),
        "model-steps": (int, 20, "model updates per iteration"),
        "checkpoint-interval": (int, 0, "iterations between checkpoints"),
        "latent-dim": (int, 8, "latent dimension"),
        "hidden-dim": (int, 32, "forward state dimension"),
        "backward-hidden-dim": (int, 32, "backward state dimension"),
        "decoder-hidden-dims": (str, "48", "comma-joined head hidden widths"),
        "out": (str, None, "output directory"),
    },
    "trace": {
        "model": (str, None, "full_model checkpoint"),
        "seed": (int, 0, "episode seed"),
        "out": (str, None, "output directory"),
    },
    "nll": {
        "model": (str, None, "checkpoint file"),
        "data": (str, None, "dataset file"),
        "split": (str, "holdout", "holdout, train or all"),
        "samples": (int, 100, "importance samples"),
        "seed": (int, 0, "seed"),
        "out": (str, None, "report file"),
    },
}

_DESCRIPTIONS = {
    "gen-data": "generate an expert trajectory dataset",
    "train": "behavioral-cloning training for one model kind",
    "eval": "roll out a checkpoint and score held-out likelihoods",
    "plan": "latent-space model-predictive control episodes",
    "explore": "alternating plan/explore/train loop",
    "trace": "per-step future-prediction cost along one episode",
    "nll": "importance-weighted sequence NLL on a dataset",
}


class CliError(Exception):
    def __init__(self, message, code=2):
        super().__init__(message)
        self.code = code


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="latdyn")
    sub = parser.add_subparsers(dest="command", required=True)
    for command, options in OPTIONS.items():
        p = sub.add_parser(command, description=_DESCRIPTIONS[command])
        p.add_argument("--config", type=str, default=None,
                       help="key=value file; flags override its entries")
        for name, (typ, default, help_text) in options.items():
            p.add_argument(f"--{name}", type=typ, default=None, help=help_text)
    return parser


def load_config_file(path: str) -> dict:
    if not os.path.exists(path):
        raise CliError(f"config file not found: {path}", code=2)
    values = {}
    with open(path) as f:
        for line_no, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise CliError(f"{path}:{line_no}: expected key=value, got {line!r}", code=2)
            key, _, value = line.partition("=")
            values[key.strip()] = value.strip()
    return values


def resolve_options(command: str, args: argparse.Namespace) -> dict:
    """Merge defaults, config file and explicit flags (highest priority)."""
    table = OPTIONS[command]
    resolved = {name: default for name, (_, default, _) in table.items()}
    if args.config:
        file_values = load_config_file(args.config)
        declared = file_values.pop("command", command)
        if declared != command:
            raise CliError(
                f"config was written for command {declared!r}, not {command!r}", code=2)
        for key, raw in file_values.items():
            if key not in table:
                raise CliError(f"unknown config key {key!r} for {command}", code=2)
            typ = table[key][0]
            resolved[key] = typ(raw) if raw != "" else ""
    for name in table:
        flag_value = getattr(args, name.replace("-", "_"))
        if flag_value is not None:
            resolved[name] = flag_value
    missing = [n for n, v in resolved.items() if v is None]
    if missing:
        raise CliError(f"missing required option(s): {', '.join('--' + m for m in missing)}",
                       code=2)
    return resolved

def write_manifest(path, command: str, values: dict) -> None:
    lines = [f"command={command}"] + [f"{k}={values[k]}" for k in sorted(values)]
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def _require_file(path, what):
    if not os.path.exists(path):
        raise CliError(f"{what} not found: {path}", code=2)


def _model_config_from(values, obs_dim, action_dim, action_kind) -> ModelConfig:
    dims = tuple(int(d) for d in str(values["decoder-hidden-dims"]).split(","))
    return ModelConfig(obs_dim=obs_dim, action_dim=action_dim, action_kind=action_kind,
                       latent_dim=values["latent-dim"], hidden_dim=values["hidden-dim"],
                       backward_hidden_dim=values["backward-hidden-dim"],
                       decoder_hidden_dims=dims)


# ---------------------------------------------------------------------------
# command implementations


def cmd_gen_data(v) -> int:
    if v["env"] not in ENV_NAMES:
        raise CliError(f"unknown environment {v['env']!r}", code=2)
    env = make_env(v["env"])
    generate_dataset(env, v["n"], v["seed"], v["out"])
    write_manifest(v["out"] + ".manifest", "gen-data", v)
    print(f"wrote {v['n']} trajectories to {v['out']}")
    return 0


def cmd_train(v) -> int:
    _require_file(v["data"], "dataset file")
    if v["kind"] not in KINDS:
        raise CliError(f"unknown kind {v['kind']!r}; expected one of {KINDS}", code=2)
    ds = load_dataset(v["data"])
    train, _held = ds.split_holdout(v["holdout"]) if v["holdout"] > 0 else (ds.trajectories, [])
    if not train:
        raise CliError("dataset has no training trajectories after the holdout split", code=1)
    model_cfg = _model_config_from(v, ds.obs_dim, ds.action_dim, ds.action_kind)
    obj_cfg = obj.ObjectiveConfig(beta=v["beta"], kl_start=v["kl-start"],
                                  kl_increment=v["kl-increment"], learning_rate=v["lr"])
    steps = v["epochs"] * math.ceil(len(train) / v["batch"])
    os.makedirs(v["out"], exist_ok=True)
    _, rows = bc_train(train, v["kind"], model_cfg, obj_cfg, steps, v["batch"], v["seed"],
                       out_dir=v["out"])
    write_manifest(os.path.join(v["out"], "manifest.txt"), "train", v)
    print(f"trained {v['kind']} for {steps} steps; final loss {rows[-1].split(',')[1]}")
    return 0


def cmd_eval(v) -> int:
    kind = v["kind"]
    model = None
    if kind in ("expert", "random"):
        pass
    else:
        _require_file(v["model"], "checkpoint file")
        model, header_kind, _ = load_checkpoint(v["model"])
        kind = kind or header_kind
    if kind not in POLICY_KINDS:
        raise CliError(f"unknown kind {kind!r}", code=2)
    heldout = None
    if v["data"]:
        _require_file(v["data"], "dataset file")
        _, heldout = load_dataset(v["data"]).split_holdout()
    seeds = [int(s) for s in str(v["seeds"]).split(",")]
    report = evaluate(model, kind, v["env"], v["episodes"], seeds, heldout,
                      num_importance_samples=v["samples"], mode=v["mode"])
    lines = report.to_lines()
    with open(v["out"], "w") as f:
        f.write("\n".join(lines) + "\n")
    write_manifest(v["out"] + ".manifest", "eval", v)
    for line in lines[:5]:
        print(line)
    return 0


def cmd_plan(v) -> int:
    _require_file(v["model"], "checkpoint file")
    model, _, _ = load_checkpoint(v["model"])
    if v["env"] not in ENV_NAMES:
        raise CliError(f"unknown environment {v['env']!r}", code=2)
    reward_fn = default_plan_reward(v["env"])
    cfg = PlanConfig(m=v["m"], horizon=v["horizon"], k=v["k"])
    returns = []
    lines = []
    for e in range(v["episodes"]):
        env = make_env(v["env"])
        rng = np.random.default_rng(v["seed"] * 100_003 + e)
        o0 = env.reset(v["seed"] * 100_003 + e)
        result = mpc_episode(env, model, reward_fn, cfg, v["episode-length"], rng, o0)
        returns.append(result.trajectory.ret)
        lines.append(f"episode {e} return {result.trajectory.ret!r} "
                     f"replans {result.replan_count}")
    mean = float(np.mean(returns))
    stderr = float(np.std(returns, ddof=1) / np.sqrt(len(returns))) if len(returns) > 1 else 0.0
    lines.append(f"mean_return={mean!r} stderr={stderr!r}")
    for line in lines:
        print(line)
    if v["out"]:
        with open(v["out"], "w") as f:
            f.write("\n".join(lines) + "\n")
        write_manifest(v["out"] + ".manifest", "plan", v)
    return 0


def cmd_explore(v) -> int:
    if v["env"] not in ENV_NAMES:
        raise CliError(f"unknown environment {v['env']!r}", code=2)
    env = make_env(v["env"])
    from .model import SequenceModel

    model = SequenceModel(
        _model_config_from(v, env.obs_dim, env.action_dim, env.action_kind), seed=v["seed"])
    loop_cfg = LoopConfig(iterations=v["iterations"], warmup_trajectories=v["warmup"],
                          exploration_trajectories=v["explore-trajectories"],
                          buffer_capacity=v["buffer-capacity"],
                          model_steps_per_iteration=v["model-steps"],
                          episode_length=v["episode-length"],
                          checkpoint_interval=v["checkpoint-interval"])
    os.makedirs(v["out"], exist_ok=True)
    result = overall_loop(env, model, default_plan_reward(v["env"]),
                          PlanConfig(m=v["m"], horizon=v["horizon"], k=v["k"]),
                          PPOConfig(), obj.ObjectiveConfig(), loop_cfg,
                          np.random.default_rng(v["seed"]), out_dir=v["out"])
    write_manifest(os.path.join(v["out"], "manifest.txt"), "explore", v)
    print(f"ran {v['iterations']} iterations; buffer holds {len(result.buffer)} trajectories")
    return 0


def cmd_trace(v) -> int:
    _require_file(v["model"], "checkpoint file")
    model, kind, _ = load_checkpoint(v["model"])
    if kind != FULL_MODEL:
        raise CliError(f"trace needs a {FULL_MODEL} checkpoint, got {kind!r}", code=1)
    env = make_env("grid")
    result = subgoal_trace(model, kind, env, v["seed"], np.random.default_rng(v["seed"]))
    os.makedirs(v["out"], exist_ok=True)
    with open(os.path.join(v["out"], "trace.csv"), "w") as f:
        f.write("step,aux_cost\n")
        for i, c in enumerate(result.aux_costs):
            f.write(f"{i},{c!r}\n")
        f.write(f"# key_step={result.key_step} door_step={result.door_step} "
                f"success={result.success}\n")
    markers = {}
    if result.key_step is not None:
        markers["key"] = result.key_step
    if result.door_step is not None:
        markers["door"] = result.door_step
    write_line_chart(os.path.join(v["out"], "trace.svg"), {"aux cost": result.aux_costs},
                     title="future-prediction cost", x_label="step", y_label="-log p(b|z)",
                     markers=markers)
    write_manifest(os.path.join(v["out"], "manifest.txt"), "trace", v)
    print(f"trace length {result.length}, key at {result.key_step}, "
          f"door at {result.door_step}, success {result.success}")
    return 0


def cmd_nll(v) -> int:
    _require_file(v["model"], "checkpoint file")
    _require_file(v["data"], "dataset file")
    model, kind, _ = load_checkpoint(v["model"])
    ds = load_dataset(v["data"])
    train, held = ds.split_holdout()
    pool = {"holdout": held, "train": train, "all": ds.trajectories}.get(v["split"])
    if pool is None:
        raise CliError(f"unknown split {v['split']!r}; expected holdout, train or all", code=2)
    if not pool:
        raise CliError(f"split {v['split']!r} selected no trajectories", code=1)
    joint, obs_only = [], []
    for i, traj in enumerate(pool):
        j, o = obj.importance_nll(model, traj, v["samples"],
                                  np.random.default_rng(v["seed"] * 9_000_001 + i), kind)
        joint.append(j)
        obs_only.append(o)
    lines = [f"combined_nll={float(np.mean(joint))!r}",
             f"obs_nll={float(np.mean(obs_only))!r}",
             f"trajectories={len(pool)}",
             f"samples={v['samples']}"]
    if v["out"]:
        with open(v["out"], "w") as f:
            f.write("\n".join(lines) + "\n")
        write_manifest(v["out"] + ".manifest", "nll", v)
    for line in lines:
        print(line)
    return 0


_HANDLERS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "plan": cmd_plan,
    "explore": cmd_explore,
    "trace": cmd_trace,
    "nll": cmd_nll,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        values = resolve_options(args.command, args)
        return _HANDLERS[args.command](values)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (ValueError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
