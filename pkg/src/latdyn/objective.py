"""Training objective and likelihood evaluation for the sequence model.

The optimized quantity is a regularized evidence lower bound: per-step
observation and action reconstruction terms, an analytic KL between the
approximate posterior and the sequential prior (weighted by an annealed
coefficient), and an auxiliary term that rewards each latent for
predicting the backward state summarizing the remaining future. The
auxiliary target is detached: its gradient never reaches the backward
network, but does reach the auxiliary decoder and, through the latent
sample, the posterior.

Baselines reuse the same machinery with the latent path disabled: the
one-step decoder keeps both reconstruction terms, the plain policy keeps
only the action term. Evaluation uses an importance-weighted bound on the
sequence negative log-likelihood.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .model import BackwardState, DiagGaussian, SequenceModel, reparameterize
from .trajectory import CATEGORICAL, Trajectory

FULL_MODEL = "full_model"
RECURRENT_DECODER = "recurrent_decoder"
RECURRENT_POLICY = "recurrent_policy"
KINDS = (FULL_MODEL, RECURRENT_DECODER, RECURRENT_POLICY)


@dataclass
class ObjectiveConfig:
    beta: float = 0.0005            # auxiliary weight, constant
    kl_start: float = 0.2           # tuned in {0.15, 0.2, 0.25}
    kl_increment: float = 0.0005    # per training iteration
    kl_cap: float = 1.0
    learning_rate: float = 1e-3     # tuned in {1e-3, 5e-4, 1e-4, 5e-5}
    chunk_length: int = 250

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if not (0 < self.kl_start <= self.kl_cap):
            raise ValueError("need 0 < kl_start <= kl_cap")
        if self.kl_increment < 0:
            raise ValueError("kl_increment must be >= 0")


@dataclass
class LossBreakdown:
    """Scalar summary of one loss evaluation.

    `total` is the minimized objective and satisfies, exactly as stored:
    total == -(obs_recon + act_recon + beta*aux_total - kl_weight_used*kl_total).
    `total_node` carries the differentiable graph when one was built.
    """

    obs_recon: float
    act_recon: float
    kl_total: float
    aux_total: float
    total: float
    kl_weight_used: float
    total_node: Node | None = None
    aux_node: Node | None = None


def kl_schedule(iteration: int, config: ObjectiveConfig) -> float:
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    return min(config.kl_start + config.kl_increment * iteration, config.kl_cap)


def kl_diag_gaussian(q: DiagGaussian, p: DiagGaussian) -> Node:
    """Closed-form KL(q || p) for diagonal Gaussians, summed over the last
    axis; differentiable with respect to both parameter sets."""
    if q.mean.value.shape != p.mean.value.shape:
        raise ValueError(
            f"KL dimension mismatch: q {q.mean.value.shape} vs p {p.mean.value.shape}")
    d_ls = ad.sub(p.log_std, q.log_std)
    var_ratio = ad.exp(ad.mul(ad.sub(q.log_std, p.log_std), 2.0))
    sq_term = ad.mul(ad.square(ad.sub(q.mean, p.mean)), ad.exp(ad.mul(p.log_std, -2.0)))
    per_dim = ad.add(d_ls, ad.mul(ad.add(var_ratio, sq_term), 0.5))
    return ad.add(ad.sum_last(per_dim), -0.5 * q.mean.value.shape[-1])


def elbo(records, kl_weight: float) -> LossBreakdown:
    """Lower-bound terms of a teacher-forced pass (no auxiliary term)."""
    if not records:
        raise ValueError("elbo requires a nonempty record list")
    obs_node = records[0].obs_loglik
    act_node = records[0].act_loglik
    kl_node = None
    for rec in records[1:]:
        obs_node = ad.add(obs_node, rec.obs_loglik)
        act_node = ad.add(act_node, rec.act_loglik)
    for rec in records:
        if rec.posterior is not None:
            term = kl_diag_gaussian(rec.posterior, rec.prior)
            kl_node = term if kl_node is None else ad.add(kl_node, term)
    if kl_node is None:
        kl_node = ad.constant(0.0)
    return _assemble(obs_node, act_node, kl_node, ad.constant(0.0), 0.0, kl_weight)


def aux_cost(model: SequenceModel, latents, backward_states) -> Node:
    """Sum over steps of the future-summary log-likelihood log p(b_t | z_t).

    Each b_t enters as a stop-gradient target, so this term trains the
    auxiliary decoder and (through z_t) the posterior, never the backward
    network itself.
    """
    if len(latents) != len(backward_states):
        raise ValueError(f"{len(latents)} latents vs {len(backward_states)} backward states")
    total = None
    for z, b in zip(latents, backward_states):
        b_node = b.b if isinstance(b, BackwardState) else b
        ll = model.aux_decode(z).log_prob(ad.detach(b_node))
        total = ll if total is None else ad.add(total, ll)
    return total


def _assemble(obs_node, act_node, kl_node, aux_node, beta, kl_weight) -> LossBreakdown:
    recon = ad.add(ad.add(obs_node, act_node), ad.mul(aux_node, beta))
    total_node = ad.neg(ad.sub(recon, ad.mul(kl_node, kl_weight)))
    return LossBreakdown(
        obs_recon=obs_node.item(),
        act_recon=act_node.item(),
        kl_total=kl_node.item(),
        aux_total=aux_node.item(),
        total=total_node.item(),
        kl_weight_used=kl_weight,
        total_node=total_node,
        aux_node=aux_node,
    )


def total_loss(model: SequenceModel, traj: Trajectory, config: ObjectiveConfig,
               iteration: int, rng, kind: str = FULL_MODEL) -> LossBreakdown:
    """Full per-trajectory objective in minimization form.

    Trajectories longer than `config.chunk_length` are scored in chunks
    with the forward state carried (detached) across chunk boundaries.
    """
    _check_kind(kind)
    kl_weight = kl_schedule(iteration, config)
    latent_mode = "posterior" if kind == FULL_MODEL else "zero"
    obs_node = act_node = kl_node = aux_node = None
    state = None
    for chunk in _chunks(traj, config.chunk_length):
        records = model.teacher_forced_pass(chunk, rng, latent_mode=latent_mode,
                                            initial_state=state)
        state = _detached_state(records[-1].next_state)
        for rec in records:
            if kind != RECURRENT_POLICY:
                obs_node = rec.obs_loglik if obs_node is None else ad.add(obs_node, rec.obs_loglik)
            act_node = rec.act_loglik if act_node is None else ad.add(act_node, rec.act_loglik)
            if kind == FULL_MODEL:
                term = kl_diag_gaussian(rec.posterior, rec.prior)
                kl_node = term if kl_node is None else ad.add(kl_node, term)
        if kind == FULL_MODEL:
            term = aux_cost(model, [r.latent_aux for r in records], [r.b for r in records])
            aux_node = term if aux_node is None else ad.add(aux_node, term)
    zero = ad.constant(0.0)
    return _assemble(obs_node if obs_node is not None else zero, act_node,
                     kl_node if kl_node is not None else zero,
                     aux_node if aux_node is not None else zero,
                     config.beta if kind == FULL_MODEL else 0.0,
                     kl_weight if kind == FULL_MODEL else 0.0)


def _check_kind(kind):
    if kind not in KINDS:
        raise ValueError(f"unknown model kind {kind!r}; expected one of {KINDS}")


def _chunks(traj: Trajectory, chunk_length: int):
    if traj.length <= chunk_length:
        yield traj
        return
    for start in range(0, traj.length, chunk_length):
        stop = min(start + chunk_length, traj.length)
        yield Trajectory(traj.observations[start:stop + 1], traj.actions[start:stop],
                         traj.rewards[start:stop], traj.action_kind)


def _detached_state(state):
    from .model import ForwardState

    return ForwardState(ad.detach(state.h), ad.detach(state.c))


# ---------------------------------------------------------------------------
# batched training loss (padded, masked)


def batch_loss(model: SequenceModel, trajs, config: ObjectiveConfig, iteration: int,
               rng, kind: str = FULL_MODEL) -> LossBreakdown:
    """Mean of per-trajectory objectives over a padded batch.

    Episodes are padded at the end to the longest length in the batch;
    per-step terms are multiplied by 0/1 masks so padding contributes
    nothing. Trajectories longer than the chunk length fall back to the
    single-trajectory path.
    """
    _check_kind(kind)
    if not trajs:
        raise ValueError("batch_loss requires a nonempty batch")
    if any(t.length > config.chunk_length for t in trajs):
        parts = [total_loss(model, t, config, iteration, rng, kind) for t in trajs]
        n = float(len(parts))
        obs = ad.constant(sum(p.obs_recon for p in parts) / n)
        act = ad.constant(sum(p.act_recon for p in parts) / n)
        kl = ad.constant(sum(p.kl_total for p in parts) / n)
        aux = ad.constant(sum(p.aux_total for p in parts) / n)
        total_node = parts[0].total_node
        for p in parts[1:]:
            total_node = ad.add(total_node, p.total_node)
        total_node = ad.mul(total_node, 1.0 / n)
        out = LossBreakdown(obs.item(), act.item(), kl.item(), aux.item(),
                            total_node.item(), parts[0].kl_weight_used, total_node)
        return out

    kl_weight = kl_schedule(iteration, config)
    beta = config.beta if kind == FULL_MODEL else 0.0
    use_kl = kind == FULL_MODEL
    use_obs = kind != RECURRENT_POLICY
    b_n = len(trajs)
    t_max = max(t.length for t in trajs)
    cfg = model.config

    obs_pad = np.zeros((b_n, t_max + 1, cfg.obs_dim))
    if cfg.action_kind == CATEGORICAL:
        act_pad = np.zeros((b_n, t_max), dtype=np.int64)
    else:
        act_pad = np.zeros((b_n, t_max, cfg.action_dim))
    mask = np.zeros((b_n, t_max))
    for i, t in enumerate(trajs):
        obs_pad[i, : t.length + 1] = t.observations
        act_pad[i, : t.length] = t.actions
        mask[i, : t.length] = 1.0

    # masked right-to-left recurrence: padded steps carry the zero state
    bstates = None
    if kind == FULL_MODEL:
        bstates = [None] * t_max
        bs = model.initial_backward_state(b_n)
        for t in range(t_max, 0, -1):
            b_new, c_new = model.back(ad.constant(obs_pad[:, t]), bs.b, bs.c_b)
            m = np.repeat(mask[:, t - 1:t], cfg.backward_hidden_dim, axis=1)
            keep = ad.constant(m)
            drop = ad.constant(1.0 - m)
            bs = BackwardState(ad.add(ad.mul(b_new, keep), ad.mul(bs.b, drop)),
                               ad.add(ad.mul(c_new, keep), ad.mul(bs.c_b, drop)))
            bstates[t - 1] = bs

    state = model.initial_state(b_n)
    obs_vec = act_vec = kl_vec = aux_vec = None
    for t in range(1, t_max + 1):
        m_t = ad.constant(mask[:, t - 1])
        if kind == FULL_MODEL:
            prior = model.prior(state)
            post = model.posterior(state, bstates[t - 1])
            z = reparameterize(post, rng.standard_normal((b_n, cfg.latent_dim)))
            z.source = "posterior"
        else:
            z = model.zero_latent(b_n)
        a_prev = act_pad[:, t - 1]
        act_dist = model.decode_action(state, z)
        if cfg.action_kind == CATEGORICAL:
            act_ll = act_dist.log_prob(a_prev)
        else:
            act_ll = act_dist.log_prob(a_prev.astype(np.float64))
        act_vec = _masked_add(act_vec, act_ll, m_t)
        if use_obs:
            obs_dist = model.decode_observation(model.embed_action(a_prev), state, z)
            obs_vec = _masked_add(obs_vec, obs_dist.log_prob(obs_pad[:, t]), m_t)
        if use_kl:
            kl_vec = _masked_add(kl_vec, kl_diag_gaussian(post, prior), m_t)
            z_aux = model.aux_path_latent(state, bstates[t - 1], z.epsilon)
            aux_ll = model.aux_decode(z_aux).log_prob(ad.detach(bstates[t - 1].b))
            aux_vec = _masked_add(aux_vec, aux_ll, m_t)
        state = model.forward_transition(obs_pad[:, t], state, z)

    inv = 1.0 / b_n
    zero = ad.constant(0.0)
    obs_node = ad.mul(ad.total_sum(obs_vec), inv) if obs_vec is not None else zero
    act_node = ad.mul(ad.total_sum(act_vec), inv)
    kl_node = ad.mul(ad.total_sum(kl_vec), inv) if kl_vec is not None else zero
    aux_node = ad.mul(ad.total_sum(aux_vec), inv) if aux_vec is not None else zero
    return _assemble(obs_node, act_node, kl_node, aux_node, beta,
                     kl_weight if use_kl else 0.0)


def _masked_add(acc, term, mask_node):
    masked = ad.mul(term, mask_node)
    return masked if acc is None else ad.add(acc, masked)


# ---------------------------------------------------------------------------
# sequence negative log-likelihood (importance-weighted bound)


def sequence_nll(model: SequenceModel, traj: Trajectory, num_importance_samples: int,
                 rng, kind: str = FULL_MODEL, include_actions: bool = True) -> float:
    """Importance-weighted bound on the sequence NLL (lower is better).

    With one sample this equals the negated single-sample lower bound.
    For latent-free kinds the pass is deterministic and the value exact.
    The observation-only variant scores observations conditioned on the
    realized actions (action terms dropped from the weights).
    """
    joint, obs_only = importance_nll(model, traj, num_importance_samples, rng, kind)
    return joint if include_actions else obs_only


def importance_nll(model: SequenceModel, traj: Trajectory, num_importance_samples: int,
                   rng, kind: str = FULL_MODEL):
    """Return (combined NLL, observation-only NLL) from one evaluation."""
    _check_kind(kind)
    if num_importance_samples < 1:
        raise ValueError("need at least one importance sample")
    if kind != FULL_MODEL:
        with ad.no_grad():
            records = model.teacher_forced_pass(traj, rng, latent_mode="zero")
            obs = sum(r.obs_loglik.item() for r in records)
            act = sum(r.act_loglik.item() for r in records)
        return -(obs + act), -obs

    s = num_importance_samples
    cfg = model.config
    with ad.no_grad():
        bstates = model.backward_encode(traj.observations[1:])
        b_tiled = [BackwardState(ad.constant(np.tile(bs.b.value, (s, 1))),
                                 ad.constant(np.tile(bs.c_b.value, (s, 1))))
                   for bs in bstates]
        state = model.initial_state(s)
        w_joint = np.zeros(s)
        w_obs = np.zeros(s)
        for t in range(1, traj.length + 1):
            prior = model.prior(state)
            post = model.posterior(state, b_tiled[t - 1])
            z = reparameterize(post, rng.standard_normal((s, cfg.latent_dim)))
            obs_row = np.tile(traj.observations[t], (s, 1))
            a_prev = traj.actions[t - 1]
            if cfg.action_kind == CATEGORICAL:
                a_batch = np.full(s, int(a_prev), dtype=np.int64)
                act_ll = model.decode_action(state, z).log_prob(a_batch).value
                a_embed = model.embed_action(a_batch)
            else:
                a_batch = np.tile(np.asarray(a_prev, dtype=np.float64), (s, 1))
                act_ll = model.decode_action(state, z).log_prob(a_batch).value
                a_embed = model.embed_action(a_batch)
            obs_ll = model.decode_observation(a_embed, state, z).log_prob(obs_row).value
            prior_ll = prior.log_prob(z.z).value
            post_ll = post.log_prob(z.z).value
            w_joint += obs_ll + act_ll + prior_ll - post_ll
            w_obs += obs_ll + prior_ll - post_ll
            state = model.forward_transition(obs_row, state, z)
    return -_log_mean_exp(w_joint), -_log_mean_exp(w_obs)


def _log_mean_exp(w: np.ndarray) -> float:
    m = w.max()
    return float(m + np.log(np.mean(np.exp(w - m))))


# ---------------------------------------------------------------------------
# training driver


METRICS_HEADER = "iteration,total,obs_recon,act_recon,kl_total,aux_total,kl_weight"


def fit_model(model: SequenceModel, trajectories, config: ObjectiveConfig, steps: int,
              batch_size: int, rng, kind: str = FULL_MODEL, start_iteration: int = 0):
    """Run `steps` Adam iterations on minibatches; returns metrics rows.

    When the dataset fits in one batch the full set is used every step in
    a fixed order, which makes small overfitting runs exactly
    reproducible; otherwise minibatch indices are drawn from `rng`.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    adam = ad.AdamState(lr=config.learning_rate)
    rows = []
    n = len(trajectories)
    for k in range(steps):
        iteration = start_iteration + k
        if batch_size >= n:
            batch = list(trajectories)
        else:
            idx = rng.integers(0, n, size=batch_size)
            batch = [trajectories[i] for i in idx]
        model.params.zero_grad()
        breakdown = batch_loss(model, batch, config, iteration, rng, kind)
        ad.backward(breakdown.total_node)
        ad.adam_step(model.params, adam)
        rows.append(format_metrics_row(iteration, breakdown))
    return rows


def format_metrics_row(iteration: int, b: LossBreakdown) -> str:
    vals = [b.total, b.obs_recon, b.act_recon, b.kl_total, b.aux_total, b.kl_weight_used]
    return f"{iteration}," + ",".join(repr(v) for v in vals)
