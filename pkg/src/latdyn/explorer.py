"""Model-likelihood-driven exploration and the alternating data loop.

A recurrent exploration policy is trained with a clipped policy-gradient
update to maximize the negated training objective of the current
dynamics model: trajectories the model scores as unlikely earn high
reward, steering data collection toward poorly modeled regions. The
reward is one scalar per trajectory, broadcast to all of its steps with a
batch-mean baseline.

The overall loop alternates: plan with MPC, branch exploration rollouts
from states visited along the MPC episode, push everything into a
bounded FIFO replay buffer, update the policy, and train the model on a
mixture of fresh and replayed trajectories.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import objective as obj
from .autodiff import Node
from .model import Categorical, DiagGaussian, SequenceModel, _Mlp, _RecurrentCell, save_model
from .planner import PlanConfig, mpc_episode
from .trajectory import CATEGORICAL, Trajectory, save_dataset

LOG_STD_MIN, LOG_STD_MAX = -8.0, 4.0


@dataclass
class PolicyConfig:
    obs_dim: int
    action_dim: int
    action_kind: str = CATEGORICAL
    hidden_dim: int = 16
    head_hidden_dims: tuple = (16,)


class ExplorationPolicy:
    """Recurrent stochastic policy: gated cell over observations, then an
    action head (categorical logits or a clamped diagonal Gaussian)."""

    def __init__(self, config: PolicyConfig, seed: int = 0, params: ad.ParamStore | None = None):
        self.config = config
        self.params = params if params is not None else ad.ParamStore()
        rng = np.random.default_rng(seed)
        self.cell = _RecurrentCell(self.params, "pi/cell", config.obs_dim, config.hidden_dim, rng)
        heads = {"logits": config.action_dim} if config.action_kind == CATEGORICAL else \
            {"mean": config.action_dim, "logstd": config.action_dim}
        self.head = _Mlp(self.params, "pi/head", config.hidden_dim,
                         config.head_hidden_dims, heads, rng)
        self.adam: ad.AdamState | None = None

    def initial_state(self):
        z = ad.constant(np.zeros(self.config.hidden_dim))
        return (z, z)

    def action_dist(self, obs, state):
        """Consume one observation; return (distribution, new state)."""
        o = obs if isinstance(obs, Node) else ad.constant(obs)
        h, c = self.cell(o, state[0], state[1])
        out = self.head(h)
        if self.config.action_kind == CATEGORICAL:
            return Categorical(out["logits"]), (h, c)
        return DiagGaussian(out["mean"], ad.clamp(out["logstd"], LOG_STD_MIN, LOG_STD_MAX)), (h, c)

    def act(self, obs, state, rng, mode: str = "sample"):
        with ad.no_grad():
            dist, state = self.action_dist(obs, state)
            action = dist.mode_array() if mode == "greedy" else dist.sample_array(rng)
        return action, state

    def step_nodes(self, traj: Trajectory):
        """Re-run the policy over a trajectory under current parameters;
        yields (log-prob node, entropy node) per step."""
        state = self.initial_state()
        out = []
        for t in range(traj.length):
            dist, state = self.action_dist(traj.observations[t], state)
            if self.config.action_kind == CATEGORICAL:
                lp = dist.log_prob(int(traj.actions[t]))
                ent = dist.entropy()
            else:
                lp = dist.log_prob(np.asarray(traj.actions[t], dtype=np.float64))
                # Gaussian entropy: sum(log_std) + k/2 log(2 pi e)
                k = self.config.action_dim
                ent = ad.add(ad.sum_last(dist.log_std), 0.5 * k * (1.0 + np.log(2 * np.pi)))
            out.append((lp, ent))
        return out


@dataclass
class ReplayBuffer:
    """Bounded FIFO store of trajectories; eviction is strictly oldest-first."""

    capacity: int
    storage: list = field(default_factory=list)

    def add(self, traj: Trajectory) -> None:
        self.storage.append(traj)
        if len(self.storage) > self.capacity:
            del self.storage[: len(self.storage) - self.capacity]

    def extend(self, trajs) -> None:
        for t in trajs:
            self.add(t)

    def sample(self, rng, n: int):
        if not self.storage:
            raise ValueError("cannot sample from an empty buffer")
        idx = rng.choice(len(self.storage), size=n, replace=n > len(self.storage))
        return [self.storage[i] for i in idx]

    def dump(self, path, obs_dim, action_dim, action_kind) -> None:
        save_dataset(self.storage, path, obs_dim, action_dim, action_kind)

    def __len__(self):
        return len(self.storage)


@dataclass
class PPOConfig:
    clip_ratio: float = 0.2
    epochs: int = 4
    minibatch_size: int = 4        # trajectories per update step
    entropy_bonus: float = 0.01
    baseline: str = "mean-reward"  # or "none"
    learning_rate: float = 3e-3

    def __post_init__(self):
        if self.clip_ratio <= 0:
            raise ValueError("clip_ratio must be > 0")
        if self.baseline not in ("mean-reward", "none"):
            raise ValueError(f"unknown baseline {self.baseline!r}")


def exploration_reward(model: SequenceModel, traj: Trajectory, config: obj.ObjectiveConfig,
                       iteration: int, rng) -> float:
    """Negated regularized lower bound of the trajectory under the frozen
    model: high where the model fits poorly. Since LossBreakdown.total is
    already the negated bound, the reward equals `total`. No gradients are
    built."""
    with ad.no_grad():
        breakdown = obj.total_loss(model, traj, config, iteration, rng)
    return breakdown.total


def collect_exploration(env, policy: ExplorationPolicy, start_state_source,
                        num_trajectories: int, rng, max_steps: int = 64):
    """Roll the policy from states recorded along the latest MPC episode.

    Returns (trajectories, from_snapshots). When the environment cannot be
    restored (or no usable snapshot exists) rollouts start from fresh
    episode resets instead and the flag reports the fallback.
    """
    usable = []
    if start_state_source and hasattr(env, "restore"):
        usable = [s for s in start_state_source if not _snapshot_done(s)]
    from_snapshots = bool(usable)
    trajs = []
    for i in range(num_trajectories):
        if from_snapshots:
            snap = usable[int(rng.integers(len(usable)))]
            env.restore(snap)
            obs = env.observe()
        else:
            obs = env.reset(int(rng.integers(2**31 - 1)))
        observations = [obs]
        actions, rewards = [], []
        state = policy.initial_state()
        while not env.done and len(actions) < max_steps:
            a, state = policy.act(observations[-1], state, rng)
            o, r, done = env.step(a)
            observations.append(o)
            actions.append(a)
            rewards.append(r)
        if actions:
            trajs.append(Trajectory(np.stack(observations), np.array(actions),
                                    np.array(rewards), env.action_kind))
    return trajs, from_snapshots


def _snapshot_done(snap) -> bool:
    return isinstance(snap, dict) and bool(snap.get("done"))


def surrogate_loss(policy: ExplorationPolicy, trajs, advantages, old_logps,
                   config: PPOConfig) -> Node:
    """Clipped-ratio surrogate (negated, for minimization) plus entropy
    bonus; `old_logps` are per-step constants from the pre-update policy."""
    total = None
    n_steps = 0
    for traj, adv, olds in zip(trajs, advantages, old_logps):
        for (lp, ent), old in zip(policy.step_nodes(traj), olds):
            ratio = ad.exp(ad.sub(lp, old))
            clipped = ad.clamp(ratio, 1.0 - config.clip_ratio, 1.0 + config.clip_ratio)
            term = ad.minimum(ad.mul(ratio, adv), ad.mul(clipped, adv))
            term = ad.add(term, ad.mul(ent, config.entropy_bonus))
            total = term if total is None else ad.add(total, term)
            n_steps += 1
    return ad.mul(ad.neg(total), 1.0 / n_steps)


def ppo_update(policy: ExplorationPolicy, trajectories, rewards, config: PPOConfig, rng) -> dict:
    """Clipped policy-gradient update from per-trajectory rewards.

    Each trajectory's scalar reward (minus the batch-mean baseline) is the
    advantage of every action in it. Runs the configured epochs over
    shuffled trajectory minibatches.
    """
    if not trajectories:
        raise ValueError("ppo_update requires a nonempty batch")
    if len(rewards) != len(trajectories):
        raise ValueError("need exactly one reward per trajectory")
    rewards = np.asarray(rewards, dtype=np.float64)
    baseline = rewards.mean() if config.baseline == "mean-reward" else 0.0
    advantages = rewards - baseline

    with ad.no_grad():
        old_logps = [[lp.item() for lp, _ in policy.step_nodes(t)] for t in trajectories]

    if policy.adam is None:
        policy.adam = ad.AdamState(lr=config.learning_rate)
    order = np.arange(len(trajectories))
    losses = []
    for _ in range(config.epochs):
        order = rng.permutation(order)
        for lo in range(0, len(order), config.minibatch_size):
            idx = order[lo: lo + config.minibatch_size]
            policy.params.zero_grad()
            loss = surrogate_loss(policy, [trajectories[i] for i in idx],
                                  advantages[idx], [old_logps[i] for i in idx], config)
            ad.backward(loss)
            ad.adam_step(policy.params, policy.adam)
            losses.append(loss.item())
    return {
        "mean_reward": float(rewards.mean()),
        "mean_advantage": float(advantages.mean()),
        "first_loss": losses[0],
        "last_loss": losses[-1],
        "updates": len(losses),
    }


# ---------------------------------------------------------------------------
# the alternating loop


@dataclass
class LoopConfig:
    iterations: int = 5
    warmup_trajectories: int = 50
    warmup_max_steps: int = 32
    exploration_trajectories: int = 8
    exploration_max_steps: int = 32
    buffer_capacity: int = 256
    model_steps_per_iteration: int = 20
    warmup_model_steps: int = 40
    batch_size: int = 8
    fresh_fraction: float = 0.5    # fresh:buffered mixture for model training
    episode_length: int = 64
    checkpoint_interval: int = 0   # 0 disables periodic checkpoints


LOOP_METRICS_HEADER = "iteration,mpc_return,explore_reward_mean,model_total"


@dataclass
class LoopResult:
    metrics_rows: list
    counts: dict
    buffer: ReplayBuffer
    policy: ExplorationPolicy


def random_policy_trajectory(env, seed: int, rng, max_steps: int) -> Trajectory:
    obs = [env.reset(seed)]
    actions, rewards = [], []
    while not env.done and len(actions) < max_steps:
        if env.action_kind == CATEGORICAL:
            a = int(rng.integers(env.action_dim))
        else:
            a = rng.uniform(-1.0, 1.0, env.action_dim)
        o, r, done = env.step(a)
        obs.append(o)
        actions.append(a)
        rewards.append(r)
    return Trajectory(np.stack(obs), np.array(actions), np.array(rewards), env.action_kind)


def overall_loop(env, model: SequenceModel, reward_fn, plan_config: PlanConfig,
                 ppo_config: PPOConfig, objective_config: obj.ObjectiveConfig,
                 loop_config: LoopConfig, rng, out_dir=None,
                 policy: ExplorationPolicy | None = None) -> LoopResult:
    """Warm-up, then per iteration: MPC, exploration from MPC states,
    buffer update, policy update, model training on a fresh/replay mix."""
    if loop_config.iterations < 1:
        raise ValueError("iterations must be >= 1")
    if policy is None:
        policy = ExplorationPolicy(PolicyConfig(env.obs_dim, env.action_dim, env.action_kind),
                                   seed=int(rng.integers(2**31 - 1)))
    buffer = ReplayBuffer(loop_config.buffer_capacity)
    counts = {"mpc": 0, "explore": 0, "buffer_update": 0, "ppo": 0, "model_train": 0}

    # initialize buffer and model from the randomly initialized policy
    warmup = [random_policy_trajectory(env, int(rng.integers(2**31 - 1)), rng,
                                       loop_config.warmup_max_steps)
              for _ in range(loop_config.warmup_trajectories)]
    buffer.extend(warmup)
    obj.fit_model(model, warmup, objective_config, loop_config.warmup_model_steps,
                  loop_config.batch_size, rng)

    rows = []
    iteration_offset = loop_config.warmup_model_steps
    for it in range(loop_config.iterations):
        o0 = env.reset(int(rng.integers(2**31 - 1)))
        mpc = mpc_episode(env, model, reward_fn, plan_config,
                          loop_config.episode_length, rng, o0)
        counts["mpc"] += 1

        explore_trajs, _ = collect_exploration(env, policy, mpc.snapshots,
                                               loop_config.exploration_trajectories, rng,
                                               loop_config.exploration_max_steps)
        counts["explore"] += 1

        buffer.add(mpc.trajectory)
        buffer.extend(explore_trajs)
        counts["buffer_update"] += 1

        reward_rng_seed = int(rng.integers(2**31 - 1))
        rewards = [exploration_reward(model, t, objective_config,
                                      iteration_offset, np.random.default_rng(reward_rng_seed))
                   for t in explore_trajs]
        ppo_update(policy, explore_trajs, rewards, ppo_config, rng)
        counts["ppo"] += 1

        n_fresh = max(1, int(round(loop_config.batch_size * loop_config.fresh_fraction)))
        fresh_pool = explore_trajs if explore_trajs else [mpc.trajectory]
        mix = [fresh_pool[int(rng.integers(len(fresh_pool)))] for _ in range(n_fresh)]
        mix += buffer.sample(rng, loop_config.batch_size - n_fresh)
        metrics = obj.fit_model(model, mix, objective_config,
                                loop_config.model_steps_per_iteration,
                                len(mix), rng, start_iteration=iteration_offset)
        iteration_offset += loop_config.model_steps_per_iteration
        counts["model_train"] += 1

        model_total = float(metrics[-1].split(",")[1])
        mean_explore = float(np.mean(rewards)) if rewards else 0.0
        rows.append(f"{it},{mpc.trajectory.ret!r},{mean_explore!r},{model_total!r}")

        if out_dir is not None and loop_config.checkpoint_interval > 0 \
                and (it + 1) % loop_config.checkpoint_interval == 0:
            save_model(model, os.path.join(out_dir, f"model_iter{it + 1:04d}.lhck"))

    if out_dir is not None:
        with open(os.path.join(out_dir, "explore_metrics.csv"), "w") as f:
            f.write(LOOP_METRICS_HEADER + "\n")
            f.write("\n".join(rows) + "\n")
        save_model(model, os.path.join(out_dir, "model_final.lhck"))
        buffer.dump(os.path.join(out_dir, "replay_buffer.lhds"),
                    env.obs_dim, env.action_dim, env.action_kind)
    return LoopResult(rows, counts, buffer, policy)
