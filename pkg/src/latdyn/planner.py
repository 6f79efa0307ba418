"""Latent-space model-predictive control.

Receding-horizon planning with a random-shooting search over latent
sequences: sample m imagined rollouts whose latents come from the model's
own sequential prior (so plans stay on the training manifold), score each
by cumulative reward, then execute the best plan's first k actions in the
real environment, decoding each action from the real forward state and
the saved latent, and feeding the real observation back into the
transition. Replanning continues from the carried state.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .model import ForwardState, LatentSample, SequenceModel, reparameterize
from .trajectory import CATEGORICAL, Trajectory


@dataclass
class PlanConfig:
    m: int = 2048                 # candidate rollouts per replan
    horizon: int = 38             # imagined steps per candidate
    k: int = 19                   # real steps executed between replans
    action_mode: str = "greedy"   # action decoding during real execution

    def __post_init__(self):
        if self.m < 1:
            raise ValueError("need at least one candidate")
        if not 1 <= self.k <= self.horizon:
            raise ValueError("need 1 <= k <= horizon")
        if self.action_mode not in ("sample", "greedy"):
            raise ValueError(f"unknown action_mode {self.action_mode!r}")


@dataclass
class Candidate:
    """One imagined rollout: latent sequence, sampled trajectory, score."""

    latents: np.ndarray        # (horizon, latent_dim)
    observations: np.ndarray   # (horizon, obs_dim), sampled
    obs_means: np.ndarray      # (horizon, obs_dim), decoder means
    actions: np.ndarray        # (horizon,) ints or (horizon, action_dim)
    cumulative_reward: float


@dataclass
class SegmentResult:
    observations: list
    actions: list
    rewards: list
    final_state: ForwardState
    final_obs: np.ndarray
    snapshots: list
    latents_used: list
    terminated: bool


@dataclass
class MpcResult:
    trajectory: Trajectory
    replan_count: int
    snapshots: list
    best_imagined_rewards: list = field(default_factory=list)


def sample_candidates(model: SequenceModel, o_start, h_start: ForwardState | None,
                      config: PlanConfig, rng, reward_fn) -> list[Candidate]:
    """Imagine m independent rollouts from (o_start, h_start).

    Latents are drawn from the sequential prior at the running imagined
    state; actions and observations are sampled, and the reward is
    evaluated on the decoder's mean observation at each step.
    """
    m = config.m
    cfg = model.config
    h_start = h_start or model.initial_state()
    with ad.no_grad():
        state = ForwardState(ad.constant(np.tile(h_start.h.value, (m, 1))),
                             ad.constant(np.tile(h_start.c.value, (m, 1))))
        latents = np.empty((m, config.horizon, cfg.latent_dim))
        observations = np.empty((m, config.horizon, cfg.obs_dim))
        obs_means = np.empty((m, config.horizon, cfg.obs_dim))
        if cfg.action_kind == CATEGORICAL:
            actions = np.empty((m, config.horizon), dtype=np.int64)
        else:
            actions = np.empty((m, config.horizon, cfg.action_dim))
        rewards = np.zeros(m)
        for t in range(config.horizon):
            prior = model.prior(state)
            z = reparameterize(prior, rng.standard_normal((m, cfg.latent_dim)))
            act_dist = model.decode_action(state, z)
            a = act_dist.sample_array(rng)
            obs_dist = model.decode_observation(model.embed_action(a), state, z)
            o = obs_dist.sample_array(rng)
            mean = obs_dist.mean.value
            for i in range(m):
                rewards[i] += reward_fn(mean[i], a[i], t)
            latents[:, t] = z.z.value
            observations[:, t] = o
            obs_means[:, t] = mean
            actions[:, t] = a
            state = model.forward_transition(o, state, z)
    return [Candidate(latents[i], observations[i], obs_means[i], actions[i], float(rewards[i]))
            for i in range(m)]


def select_best(candidates) -> Candidate:
    """Argmax by cumulative reward; ties go to the earliest candidate."""
    if not candidates:
        raise ValueError("select_best requires a nonempty candidate list")
    best = candidates[0]
    for cand in candidates[1:]:
        if cand.cumulative_reward > best.cumulative_reward:
            best = cand
    return best


def execute_segment(env, model: SequenceModel, best: Candidate, k: int,
                    h_start: ForwardState, o_start, action_mode: str, rng) -> SegmentResult:
    """Run the first k planned latents against the real environment.

    Per step: decode the action from the real forward state and the saved
    latent, apply it, then advance the state with the real observation
    (imagined observations are never used after selection). Stops early if
    the environment terminates.
    """
    if k > len(best.latents):
        raise ValueError(f"segment of {k} steps exceeds planned horizon {len(best.latents)}")
    state = h_start
    obs = np.asarray(o_start)
    out = SegmentResult([], [], [], state, obs, [], [], False)
    with ad.no_grad():
        for i in range(k):
            z = LatentSample(ad.constant(best.latents[i]), best.latents[i], "prior")
            dist = model.decode_action(state, z)
            a = dist.mode_array() if action_mode == "greedy" else dist.sample_array(rng)
            obs, reward, done = env.step(a)
            state = model.forward_transition(obs, state, z)
            out.observations.append(obs)
            out.actions.append(a)
            out.rewards.append(reward)
            out.latents_used.append(best.latents[i])
            if hasattr(env, "snapshot"):
                out.snapshots.append(env.snapshot())
            if done:
                out.terminated = True
                break
    out.final_state = state
    out.final_obs = obs
    return out


def mpc_episode(env, model: SequenceModel, reward_fn, config: PlanConfig,
                episode_length: int, rng, initial_obs) -> MpcResult:
    """Alternate plan/execute until the episode ends or the step budget is
    spent; each plan starts from the last real observation and the carried
    forward state. Replans ceil(T/k) times absent early termination."""
    if episode_length < 1:
        raise ValueError("episode_length must be >= 1")
    obs_list = [np.asarray(initial_obs)]
    actions, rewards, snapshots, best_rewards = [], [], [], []
    state = model.initial_state()
    obs = obs_list[0]
    replans = 0
    steps_left = episode_length
    while steps_left > 0:
        candidates = sample_candidates(model, obs, state, config, rng, reward_fn)
        best = select_best(candidates)
        assert all(best.cumulative_reward >= c.cumulative_reward for c in candidates)
        replans += 1
        best_rewards.append(best.cumulative_reward)
        seg = execute_segment(env, model, best, min(config.k, steps_left), state, obs,
                              config.action_mode, rng)
        obs_list.extend(seg.observations)
        actions.extend(seg.actions)
        rewards.extend(seg.rewards)
        snapshots.extend(seg.snapshots)
        state = seg.final_state
        obs = seg.final_obs
        steps_left -= len(seg.actions)
        if seg.terminated:
            break
    traj = Trajectory(np.stack(obs_list), np.array(actions), np.array(rewards),
                      model.config.action_kind)
    return MpcResult(traj, replans, snapshots, best_rewards)
