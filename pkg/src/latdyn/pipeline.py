"""Imitation training, baselines, evaluation and trace analysis.

Three trainable kinds share one architecture and differ only in which
loss terms are active:

- ``full_model``: latent path on; reconstruction + KL + auxiliary terms.
- ``recurrent_decoder``: latent path off (zero latents); observation and
  action reconstruction only. This is exactly the full model with the
  latent path disabled, which keeps the ablation chain airtight.
- ``recurrent_policy``: latent path off; action reconstruction only.

Evaluation rolls checkpoints in the real environment and scores held-out
episodes with the importance-weighted likelihood bound. For the key-door
task, per-step auxiliary costs along a realized episode expose where the
model becomes confident about the future (the subgoal signal).
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import objective as obj
from .charts import write_line_chart
from .envs import KeyDoorGridEnv, make_env
from .model import ModelConfig, SequenceModel, load_model, reparameterize, save_model
from .objective import FULL_MODEL, KINDS, RECURRENT_DECODER, RECURRENT_POLICY
from .trajectory import CATEGORICAL, Trajectory

POLICY_KINDS = KINDS + ("expert", "random")


# ---------------------------------------------------------------------------
# behavioral cloning


def bc_train(trajectories, kind: str, model_config: ModelConfig,
             objective_config: obj.ObjectiveConfig, steps: int, batch_size: int,
             seed: int, out_dir=None):
    """Train one model kind on expert trajectories; returns (model, rows).

    Fully deterministic for a fixed seed: the parameter initialization,
    minibatch draws and posterior noise all derive from it. When out_dir
    is given, writes checkpoint.lhck, metrics.csv and loss.svg.
    """
    if not trajectories:
        raise ValueError("bc_train requires a nonempty dataset")
    if kind not in KINDS:
        raise ValueError(f"unknown kind {kind!r}; expected one of {KINDS}")
    sample = trajectories[0]
    if sample.observations.shape[1] != model_config.obs_dim:
        raise ValueError(
            f"dataset observation dim {sample.observations.shape[1]} does not match "
            f"model obs_dim {model_config.obs_dim}")
    model = SequenceModel(model_config, seed=seed)
    rng = np.random.default_rng(seed)
    rows = obj.fit_model(model, trajectories, objective_config, steps, batch_size, rng, kind)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        save_model(model, os.path.join(out_dir, "checkpoint.lhck"),
                   extra={"kind": kind, "seed": str(seed)})
        with open(os.path.join(out_dir, "metrics.csv"), "w") as f:
            f.write(obj.METRICS_HEADER + "\n")
            f.write("\n".join(rows) + "\n")
        totals = [float(r.split(",")[1]) for r in rows]
        write_line_chart(os.path.join(out_dir, "loss.svg"), {"total": totals},
                         title="training loss", x_label="iteration", y_label="loss")
    return model, rows


# ---------------------------------------------------------------------------
# acting


class ModelAgent:
    """Streams observations through the model and emits actions.

    The first action is decoded from the zero initial state; afterwards
    each incoming observation advances the forward state together with
    the latent that was used to act."""

    def __init__(self, model: SequenceModel, kind: str, rng, mode: str = "greedy"):
        if kind not in KINDS:
            raise ValueError(f"unknown kind {kind!r}")
        self.model = model
        self.kind = kind
        self.rng = rng
        self.mode = mode
        self.reset()

    def reset(self):
        self._state = self.model.initial_state()
        self._pending_z = None
        self._steps = 0

    def observe_and_act(self, observation):
        with ad.no_grad():
            if self._steps >= 1:
                self._state = self.model.forward_transition(observation, self._state,
                                                            self._pending_z)
            if self.kind == FULL_MODEL:
                dist = self.model.prior(self._state)
                z = reparameterize(dist, self.rng.standard_normal(dist.mean.value.shape))
                z.source = "prior"
            else:
                z = self.model.zero_latent()
            act_dist = self.model.decode_action(self._state, z)
            action = act_dist.mode_array() if self.mode == "greedy" \
                else act_dist.sample_array(self.rng)
        self._pending_z = z
        self._steps += 1
        return action


def act_from_model(model: SequenceModel, kind: str, observation_history, rng,
                   mode: str = "greedy"):
    """Replay an observation history and return the next action."""
    agent = ModelAgent(model, kind, rng, mode)
    action = None
    for obs in observation_history:
        action = agent.observe_and_act(obs)
    return action


def run_policy_episode(env, seed: int, policy_step) -> Trajectory:
    """Roll one episode with policy_step(observation) -> action."""
    obs = [env.reset(seed)]
    actions, rewards = [], []
    while not env.done:
        a = policy_step(obs[-1])
        o, r, done = env.step(a)
        obs.append(o)
        actions.append(a)
        rewards.append(r)
    return Trajectory(np.stack(obs), np.array(actions), np.array(rewards), env.action_kind)


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalReport:
    mean_reward: float
    stderr_reward: float | None
    success_rate: float
    obs_nll: float | None
    combined_nll: float | None
    aux_trace: list | None
    seeds: tuple
    per_seed_rewards: list = field(default_factory=list)

    def to_lines(self):
        rows = [f"mean_reward={self.mean_reward!r}",
                f"stderr_reward={'' if self.stderr_reward is None else repr(self.stderr_reward)}",
                f"success_rate={self.success_rate!r}",
                f"obs_nll={'' if self.obs_nll is None else repr(self.obs_nll)}",
                f"combined_nll={'' if self.combined_nll is None else repr(self.combined_nll)}",
                f"seeds={','.join(str(s) for s in self.seeds)}"]
        for s, r in zip(self.seeds, self.per_seed_rewards):
            rows.append(f"seed_{s}_mean_reward={r!r}")
        return rows


def evaluate(model: SequenceModel | None, kind: str, env_name: str, n_episodes: int,
             seeds, heldout=None, num_importance_samples: int = 100,
             mode: str = "greedy") -> EvalReport:
    """Roll out in the real environment over independent seeds; score
    held-out trajectories with the likelihood bound where the kind defines
    one. `kind` may also be 'expert' or 'random' for reference policies."""
    if n_episodes < 1:
        raise ValueError("need at least one episode")
    if kind not in POLICY_KINDS:
        raise ValueError(f"unknown kind {kind!r}; expected one of {POLICY_KINDS}")
    seeds = tuple(seeds)
    per_seed = []
    successes = 0
    total_eps = 0
    aux_trace = None
    for s in seeds:
        env = make_env(env_name)
        rng = np.random.default_rng(s)
        rewards = []
        for e in range(n_episodes):
            episode_seed = 100_000 * (s + 1) + e
            if kind == "expert":
                traj = _expert_episode(env, episode_seed)
            elif kind == "random":
                traj = _random_episode(env, episode_seed, rng)
            else:
                agent = ModelAgent(model, kind, rng, mode)
                traj = run_policy_episode(env, episode_seed, agent.observe_and_act)
            rewards.append(traj.ret)
            successes += bool(env.solved)
            total_eps += 1
            if aux_trace is None and kind == FULL_MODEL and traj.length >= 1:
                aux_trace = per_step_aux_costs(model, traj, np.random.default_rng(episode_seed))
        per_seed.append(float(np.mean(rewards)))
    stderr = float(np.std(per_seed, ddof=1) / np.sqrt(len(per_seed))) if len(per_seed) >= 2 else None

    obs_nll = combined_nll = None
    if heldout and kind in (FULL_MODEL, RECURRENT_DECODER):
        joint, obs_only = [], []
        for i, traj in enumerate(heldout):
            j, o = obj.importance_nll(model, traj, num_importance_samples,
                                      np.random.default_rng(7_000_000 + i), kind)
            joint.append(j)
            obs_only.append(o)
        obs_nll = float(np.mean(obs_only))
        combined_nll = float(np.mean(joint))
    return EvalReport(float(np.mean(per_seed)), stderr, successes / total_eps,
                      obs_nll, combined_nll, aux_trace, seeds, per_seed)


def _expert_episode(env, seed):
    obs = [env.reset(seed)]
    actions, rewards = [], []
    while not env.done:
        a = env.expert_action()
        o, r, done = env.step(a)
        obs.append(o)
        actions.append(a)
        rewards.append(r)
    return Trajectory(np.stack(obs), np.array(actions), np.array(rewards), env.action_kind)


def _random_episode(env, seed, rng):
    obs = [env.reset(seed)]
    actions, rewards = [], []
    while not env.done:
        if env.action_kind == CATEGORICAL:
            a = int(rng.integers(env.action_dim))
        else:
            a = rng.uniform(-1.0, 1.0, env.action_dim)
        o, r, done = env.step(a)
        obs.append(o)
        actions.append(a)
        rewards.append(r)
    return Trajectory(np.stack(obs), np.array(actions), np.array(rewards), env.action_kind)


# ---------------------------------------------------------------------------
# subgoal trace


@dataclass
class TraceResult:
    aux_costs: list
    key_step: int | None
    door_step: int | None
    success: bool

    @property
    def length(self) -> int:
        return len(self.aux_costs)


def per_step_aux_costs(model: SequenceModel, traj: Trajectory, rng) -> list:
    """Per-step negative log-likelihood of the future summary given the
    posterior latent, along a realized trajectory."""
    with ad.no_grad():
        records = model.teacher_forced_pass(traj, rng)
        return [-model.aux_decode(r.latent_aux).log_prob(ad.detach(r.b)).item()
                for r in records]


def subgoal_trace(model: SequenceModel, kind: str, env: KeyDoorGridEnv, episode_seed: int,
                  rng, mode: str = "greedy") -> TraceResult:
    """Run one key-door episode and score each step's future-prediction
    cost, annotating when the key is picked up and the door unlocked."""
    if kind != FULL_MODEL:
        raise ValueError(f"subgoal traces need a {FULL_MODEL} checkpoint, got {kind!r}")
    agent = ModelAgent(model, kind, rng, mode)
    obs = [env.reset(episode_seed)]
    actions, rewards = [], []
    key_step = door_step = None
    while not env.done:
        a = agent.observe_and_act(obs[-1])
        o, r, done = env.step(a)
        obs.append(o)
        actions.append(a)
        rewards.append(r)
        step_idx = len(actions) - 1
        if key_step is None and env.carried:
            key_step = step_idx
        if door_step is None and not env.door_locked:
            door_step = step_idx
    traj = Trajectory(np.stack(obs), np.array(actions), np.array(rewards), env.action_kind)
    costs = per_step_aux_costs(model, traj, np.random.default_rng(episode_seed))
    return TraceResult(costs, key_step, door_step, env.solved)


# ---------------------------------------------------------------------------
# checkpoint loading helper


def load_checkpoint(path):
    """Load a model checkpoint; returns (model, kind, extras)."""
    if not os.path.exists(path):
        raise FileNotFoundError(f"checkpoint file not found: {path}")
    model, extras = load_model(path)
    kind = extras.get("kind", FULL_MODEL)
    return model, kind, extras


def default_model_config(env, latent_dim=8, hidden_dim=32, backward_hidden_dim=32,
                         decoder_hidden_dims=(48,)) -> ModelConfig:
    return ModelConfig(obs_dim=env.obs_dim, action_dim=env.action_dim,
                       action_kind=env.action_kind, latent_dim=latent_dim,
                       hidden_dim=hidden_dim, backward_hidden_dim=backward_hidden_dim,
                       decoder_hidden_dims=decoder_hidden_dims)


def default_plan_reward(env_name: str):
    """Built-in planning rewards on imagined observations.

    points: negative distance to the next goal (observation carries the
    relative goal vector). grid: carried-key bit plus visible goal cells,
    a shaped stand-in that favors progress through the subgoal chain.
    """
    if env_name == "points":
        def reward(obs, action, t):
            return -float(np.hypot(obs[4], obs[5]))
        return reward
    if env_name == "grid":
        def reward(obs, action, t):
            goal_channel = obs[:-1].reshape(-1, 6)[:, 4]
            return float(obs[-1]) + 2.0 * float(goal_channel.sum())
        return reward
    raise ValueError(f"no built-in planning reward for environment {env_name!r}")
