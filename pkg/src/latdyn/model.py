"""Stochastic recurrent sequence model and its inference network.

The generative side runs a gated recurrent cell h_t = f(o_t, h_{t-1}, z_t)
with a per-step latent z_t drawn from a prior conditioned on h_{t-1}, an
observation decoder p(o_t | a_{t-1}, h_{t-1}, z_t) and an action decoder
p(a_{t-1} | h_{t-1}, z_t). The inference side runs a second recurrent cell
backward over the observations, b_t = g(o_t, b_{t+1}), and forms the
approximate posterior q(z_t | h_{t-1}, b_t) by reusing the generative
model's own forward state. A small extra decoder predicts b_t from z_t
alone; the training objective uses it to force latents to carry
information about the future (see objective.aux_cost).

All heads are feed-forward networks with tanh hidden layers producing
diagonal-Gaussian parameters (or categorical logits for discrete
actions). State vectors may carry a leading batch dimension; every method
is layout-agnostic, which is how candidate rollouts and importance
samples are vectorized.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .trajectory import CATEGORICAL, CONTINUOUS, Trajectory

LOG_STD_MIN = -8.0
LOG_STD_MAX = 4.0


@dataclass
class ModelConfig:
    obs_dim: int
    action_dim: int
    action_kind: str = CATEGORICAL
    latent_dim: int = 4
    hidden_dim: int = 16
    backward_hidden_dim: int = 16
    decoder_hidden_dims: tuple = (32,)

    def __post_init__(self):
        if isinstance(self.decoder_hidden_dims, int):
            self.decoder_hidden_dims = (self.decoder_hidden_dims,)
        self.decoder_hidden_dims = tuple(int(d) for d in self.decoder_hidden_dims)
        for name in ("obs_dim", "action_dim", "latent_dim", "hidden_dim", "backward_hidden_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.action_kind not in (CATEGORICAL, CONTINUOUS):
            raise ValueError(f"unknown action_kind {self.action_kind!r}")


@dataclass
class ForwardState:
    """Running summary of the past: gated-cell hidden and memory vectors."""

    h: Node
    c: Node


@dataclass
class BackwardState:
    """Running summary of the future observation suffix."""

    b: Node
    c_b: Node


@dataclass
class DiagGaussian:
    mean: Node
    log_std: Node

    def sample_array(self, rng) -> np.ndarray:
        eps = rng.standard_normal(self.mean.value.shape)
        return self.mean.value + np.exp(self.log_std.value) * eps

    def mode_array(self) -> np.ndarray:
        return self.mean.value.copy()

    def log_prob(self, x) -> Node:
        return ad.gaussian_logpdf(x, self.mean, self.log_std)


@dataclass
class Categorical:
    logits: Node

    def probs_array(self) -> np.ndarray:
        lp = ad.log_softmax(self.logits).value
        return np.exp(lp)

    def sample_array(self, rng):
        p = self.probs_array()
        if p.ndim == 1:
            return int(rng.choice(len(p), p=p))
        cum = np.cumsum(p, axis=-1)
        u = rng.random(p.shape[0])[:, None]
        return (u > cum).sum(axis=-1).astype(np.int64)

    def mode_array(self):
        v = self.logits.value
        return int(np.argmax(v)) if v.ndim == 1 else np.argmax(v, axis=-1)

    def log_prob(self, index) -> Node:
        return ad.pick(ad.log_softmax(self.logits), index)

    def entropy(self) -> Node:
        lp = ad.log_softmax(self.logits)
        return ad.neg(ad.sum_last(ad.mul(ad.exp(lp), lp)))


@dataclass
class LatentSample:
    """A reparameterized draw z = mean + exp(log_std) * epsilon."""

    z: Node
    epsilon: np.ndarray
    source: str  # "prior", "posterior" or "zero"


def reparameterize(dist: DiagGaussian, epsilon) -> LatentSample:
    epsilon = np.asarray(epsilon, dtype=np.float64)
    if epsilon.shape != dist.mean.value.shape:
        raise ValueError(f"epsilon shape {epsilon.shape} != mean shape {dist.mean.value.shape}")
    z = ad.add(dist.mean, ad.mul(ad.exp(dist.log_std), ad.constant(epsilon)))
    return LatentSample(z=z, epsilon=epsilon, source="")


@dataclass
class StepRecord:
    """Everything the objective needs for one teacher-forced step."""

    prior: DiagGaussian | None
    posterior: DiagGaussian | None
    latent: LatentSample
    obs_loglik: Node
    act_loglik: Node
    b: Node | None
    obs_dist: DiagGaussian = None
    act_dist: object = None
    next_state: "ForwardState" = None
    # Same value as `latent` but rebuilt through a posterior evaluation with
    # detached recurrent inputs, so the auxiliary cost cannot push gradients
    # into the backward network or the state trajectory.
    latent_aux: LatentSample = None


def _obtain(store: ad.ParamStore, name: str, init: np.ndarray) -> Node:
    """Fetch a parameter if the store already holds it (checkpoint load),
    otherwise register it with the given initial value."""
    if name in store:
        node = store[name]
        if node.value.shape != init.shape:
            raise ValueError(f"parameter {name!r} has shape {node.value.shape}, expected {init.shape}")
        return node
    return store.add(name, init)


def _uniform_init(rng, fan_in, fan_out):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class _Mlp:
    """Feed-forward trunk with tanh hidden layers and named linear heads."""

    def __init__(self, store, prefix, in_dim, hidden_dims, heads, rng):
        dims = [in_dim] + list(hidden_dims)
        self.layers = []
        for i in range(len(hidden_dims)):
            w = _obtain(store, f"{prefix}/l{i}/w", _uniform_init(rng, dims[i], dims[i + 1]))
            b = _obtain(store, f"{prefix}/l{i}/b", np.zeros(dims[i + 1]))
            self.layers.append((w, b))
        self.head_params = {}
        for name, out_dim in heads.items():
            w = _obtain(store, f"{prefix}/{name}/w", _uniform_init(rng, dims[-1], out_dim))
            b = _obtain(store, f"{prefix}/{name}/b", np.zeros(out_dim))
            self.head_params[name] = (w, b)

    def __call__(self, x: Node) -> dict:
        h = x
        for w, b in self.layers:
            h = ad.tanh(ad.affine(h, w, b))
        return {name: ad.affine(h, w, b) for name, (w, b) in self.head_params.items()}


class _RecurrentCell:
    """Standard gated cell (input, forget, candidate, output gates)."""

    def __init__(self, store, prefix, in_dim, hidden_dim, rng):
        self.hidden_dim = hidden_dim
        self.w = _obtain(store, f"{prefix}/w", _uniform_init(rng, in_dim + hidden_dim, 4 * hidden_dim))
        bias = np.zeros(4 * hidden_dim)
        bias[hidden_dim:2 * hidden_dim] = 1.0  # forget gate starts open
        self.b = _obtain(store, f"{prefix}/b", bias)

    def __call__(self, x: Node, h: Node, c: Node):
        gates = ad.affine(ad.concat([x, h]), self.w, self.b)
        i_g, f_g, g_g, o_g = ad.split(gates, [self.hidden_dim] * 4)
        c_new = ad.add(ad.mul(ad.sigmoid(f_g), c), ad.mul(ad.sigmoid(i_g), ad.tanh(g_g)))
        h_new = ad.mul(ad.sigmoid(o_g), ad.tanh(c_new))
        return h_new, c_new


class SequenceModel:
    """Generative model, inference network and future-summary decoder.

    Parameter names are grouped by role: ``gen/*`` for the generative
    side, ``inf/*`` for the inference side (backward cell and posterior
    head), ``aux/*`` for the future-summary decoder. The stop-gradient
    contract in the objective relies on this grouping.
    """

    def __init__(self, config: ModelConfig, seed: int = 0, params: ad.ParamStore | None = None):
        self.config = config
        self.params = params if params is not None else ad.ParamStore()
        self._build(np.random.default_rng(seed))

    def _build(self, rng):
        cfg = self.config
        store = self.params
        self.trans = _RecurrentCell(store, "gen/trans", cfg.obs_dim + cfg.latent_dim, cfg.hidden_dim, rng)
        self.prior_head = _Mlp(store, "gen/prior", cfg.hidden_dim, cfg.decoder_hidden_dims,
                               {"mean": cfg.latent_dim, "logstd": cfg.latent_dim}, rng)
        obs_in = cfg.action_dim + cfg.hidden_dim + cfg.latent_dim
        self.obs_head = _Mlp(store, "gen/obs", obs_in, cfg.decoder_hidden_dims,
                             {"mean": cfg.obs_dim, "logstd": cfg.obs_dim}, rng)
        act_heads = {"logits": cfg.action_dim} if cfg.action_kind == CATEGORICAL else \
            {"mean": cfg.action_dim, "logstd": cfg.action_dim}
        self.act_head = _Mlp(store, "gen/act", cfg.hidden_dim + cfg.latent_dim,
                             cfg.decoder_hidden_dims, act_heads, rng)
        self.back = _RecurrentCell(store, "inf/back", cfg.obs_dim, cfg.backward_hidden_dim, rng)
        self.post_head = _Mlp(store, "inf/post", cfg.hidden_dim + cfg.backward_hidden_dim,
                              cfg.decoder_hidden_dims, {"mean": cfg.latent_dim, "logstd": cfg.latent_dim}, rng)
        self.aux_head = _Mlp(store, "aux/dec", cfg.latent_dim, cfg.decoder_hidden_dims,
                             {"mean": cfg.backward_hidden_dim}, rng)

    # -- state helpers ------------------------------------------------------

    def initial_state(self, batch: int | None = None) -> ForwardState:
        shape = (self.config.hidden_dim,) if batch is None else (batch, self.config.hidden_dim)
        return ForwardState(ad.constant(np.zeros(shape)), ad.constant(np.zeros(shape)))

    def initial_backward_state(self, batch: int | None = None) -> BackwardState:
        d = self.config.backward_hidden_dim
        shape = (d,) if batch is None else (batch, d)
        return BackwardState(ad.constant(np.zeros(shape)), ad.constant(np.zeros(shape)))

    def zero_latent(self, batch: int | None = None) -> LatentSample:
        d = self.config.latent_dim
        shape = (d,) if batch is None else (batch, d)
        zeros = np.zeros(shape)
        return LatentSample(z=ad.constant(zeros), epsilon=zeros, source="zero")

    # -- core pieces --------------------------------------------------------

    def forward_transition(self, o, state: ForwardState, z) -> ForwardState:
        o = o if isinstance(o, Node) else ad.constant(o)
        z_node = z.z if isinstance(z, LatentSample) else z
        h, c = self.trans(ad.concat([o, z_node]), state.h, state.c)
        return ForwardState(h, c)

    def backward_encode(self, observations) -> list[BackwardState]:
        """Right-to-left recurrence over o_1..o_T; element t summarizes o_{t+1:T}."""
        obs = list(observations)
        if not obs:
            raise ValueError("backward_encode requires at least one observation")
        first = obs[0] if isinstance(obs[0], Node) else ad.constant(obs[0])
        batch = first.value.shape[0] if first.value.ndim == 2 else None
        state = self.initial_backward_state(batch)
        out: list[BackwardState] = [None] * len(obs)
        for t in range(len(obs) - 1, -1, -1):
            o = obs[t] if isinstance(obs[t], Node) else ad.constant(obs[t])
            b, c_b = self.back(o, state.b, state.c_b)
            state = BackwardState(b, c_b)
            out[t] = state
        return out

    def prior(self, state: ForwardState) -> DiagGaussian:
        heads = self.prior_head(state.h)
        return DiagGaussian(heads["mean"], ad.clamp(heads["logstd"], LOG_STD_MIN, LOG_STD_MAX))

    def posterior(self, state: ForwardState, bstate: BackwardState) -> DiagGaussian:
        heads = self.post_head(ad.concat([state.h, bstate.b]))
        return DiagGaussian(heads["mean"], ad.clamp(heads["logstd"], LOG_STD_MIN, LOG_STD_MAX))

    def embed_action(self, action) -> Node:
        """Categorical actions become one-hot rows; continuous pass through."""
        if self.config.action_kind == CONTINUOUS:
            return action if isinstance(action, Node) else ad.constant(action)
        n = self.config.action_dim
        if np.isscalar(action) or isinstance(action, (int, np.integer)):
            onehot = np.zeros(n)
            onehot[int(action)] = 1.0
        else:
            idx = np.asarray(action, dtype=np.intp)
            onehot = np.zeros((idx.shape[0], n))
            onehot[np.arange(idx.shape[0]), idx] = 1.0
        return ad.constant(onehot)

    def decode_observation(self, a_prev, state: ForwardState, z) -> DiagGaussian:
        z_node = z.z if isinstance(z, LatentSample) else z
        a_node = a_prev if isinstance(a_prev, Node) else self.embed_action(a_prev)
        heads = self.obs_head(ad.concat([a_node, state.h, z_node]))
        return DiagGaussian(heads["mean"], ad.clamp(heads["logstd"], LOG_STD_MIN, LOG_STD_MAX))

    def decode_action(self, state: ForwardState, z):
        z_node = z.z if isinstance(z, LatentSample) else z
        heads = self.act_head(ad.concat([state.h, z_node]))
        if self.config.action_kind == CATEGORICAL:
            return Categorical(heads["logits"])
        return DiagGaussian(heads["mean"], ad.clamp(heads["logstd"], LOG_STD_MIN, LOG_STD_MAX))

    def aux_decode(self, z) -> DiagGaussian:
        """Unit-variance Gaussian over backward states, mean from z alone."""
        z_node = z.z if isinstance(z, LatentSample) else z
        heads = self.aux_head(z_node)
        mean = heads["mean"]
        return DiagGaussian(mean, ad.constant(np.zeros(mean.value.shape)))

    # -- rollout and scoring -------------------------------------------------

    def generate(self, o0, state: ForwardState | None, steps: int, rng,
                 latents=None, action_mode: str = "sample", obs_mode: str = "sample"):
        """Roll the generative model forward for `steps` steps.

        Per step: draw z_t from the prior at the running state (or take it
        from `latents`), decode the action then the observation, and feed
        the sampled observation into the transition. Returns a
        GenerationResult whose trajectory starts at o0 and whose rewards
        are zeros (imagined transitions carry no environment reward).
        """
        if steps < 1:
            raise ValueError(f"generate needs steps >= 1, got {steps}")
        if latents is not None and len(latents) < steps:
            raise ValueError(f"{len(latents)} provided latents for {steps} steps")
        o0 = np.asarray(o0, dtype=np.float64)
        state = state or self.initial_state()
        observations = [o0]
        obs_means = []
        actions = []
        used_latents = []
        for t in range(steps):
            if latents is None:
                dist = self.prior(state)
                eps = rng.standard_normal(dist.mean.value.shape)
                z = reparameterize(dist, eps)
                z.source = "prior"
            else:
                z = latents[t]
            act_dist = self.decode_action(state, z)
            if action_mode == "greedy":
                action = act_dist.mode_array()
            else:
                action = act_dist.sample_array(rng)
            obs_dist = self.decode_observation(self.embed_action(action), state, z)
            o = obs_dist.mode_array() if obs_mode == "greedy" else obs_dist.sample_array(rng)
            observations.append(o)
            obs_means.append(obs_dist.mean.value.copy())
            actions.append(action)
            used_latents.append(z)
            state = self.forward_transition(o, state, z)
        traj = Trajectory(np.stack(observations), np.array(actions), np.zeros(steps),
                          self.config.action_kind)
        return GenerationResult(traj, used_latents, np.stack(obs_means), state)

    def teacher_forced_pass(self, traj: Trajectory, rng, latent_mode: str = "posterior",
                            latents=None, initial_state: ForwardState | None = None) -> list[StepRecord]:
        """Score a real trajectory step by step.

        The backward recurrence runs once over o_1..o_T; the forward
        unroll draws z_t from the posterior (or uses a zero latent when
        the latent path is disabled, or the provided `latents`), scores
        the true o_t and a_{t-1}, and always feeds the true o_t into the
        transition.
        """
        t_len = traj.length
        if t_len < 1:
            raise ValueError("trajectory must contain at least one step")
        if latents is not None:
            latent_mode = "given"
            if len(latents) < t_len:
                raise ValueError(f"{len(latents)} provided latents for {t_len} steps")
        bstates = self.backward_encode(traj.observations[1:]) if latent_mode == "posterior" else None
        state = initial_state if initial_state is not None else self.initial_state()
        records = []
        for t in range(1, t_len + 1):
            z_aux = None
            if latent_mode == "posterior":
                prior = self.prior(state)
                post = self.posterior(state, bstates[t - 1])
                eps = rng.standard_normal(post.mean.value.shape)
                z = reparameterize(post, eps)
                z.source = "posterior"
                b = bstates[t - 1].b
                z_aux = self.aux_path_latent(state, bstates[t - 1], eps)
            elif latent_mode == "zero":
                prior, post, b = None, None, None
                z = self.zero_latent()
            elif latent_mode == "given":
                prior, post, b = None, None, None
                z = latents[t - 1]
            else:
                raise ValueError(f"unknown latent_mode {latent_mode!r}")
            a_prev = traj.actions[t - 1]
            obs_dist = self.decode_observation(self.embed_action(a_prev), state, z)
            act_dist = self.decode_action(state, z)
            obs_ll = obs_dist.log_prob(traj.observations[t])
            if self.config.action_kind == CATEGORICAL:
                act_ll = act_dist.log_prob(int(a_prev))
            else:
                act_ll = act_dist.log_prob(np.asarray(a_prev, dtype=np.float64))
            state = self.forward_transition(traj.observations[t], state, z)
            records.append(StepRecord(prior, post, z, obs_ll, act_ll, b, obs_dist, act_dist,
                                      state, z_aux))
        return records

    def aux_path_latent(self, state: ForwardState, bstate: BackwardState, epsilon) -> LatentSample:
        """Posterior sample for the auxiliary cost: identical value to the
        regular sample (same epsilon), but evaluated on detached h and b so
        gradients reach only the posterior head itself (and downstream the
        auxiliary decoder), never the recurrent networks."""
        frozen_state = ForwardState(ad.detach(state.h), state.c)
        frozen_b = BackwardState(ad.detach(bstate.b), bstate.c_b)
        dist = self.posterior(frozen_state, frozen_b)
        z = reparameterize(dist, epsilon)
        z.source = "posterior"
        return z


@dataclass
class GenerationResult:
    trajectory: Trajectory
    latents: list
    obs_means: np.ndarray
    final_state: ForwardState


# ---------------------------------------------------------------------------
# checkpoints: plain-text header followed by the binary parameter blob


def write_checkpoint(path, header: dict, params: ad.ParamStore) -> None:
    body = "".join(f"{k}={header[k]}\n" for k in sorted(header)).encode("utf-8")
    with open(path, "wb") as f:
        f.write(f"LHCK1 {len(body)}\n".encode("ascii"))
        f.write(body)
        f.write(ad.dumps_params(params))


def read_checkpoint(path):
    with open(path, "rb") as f:
        first = f.readline()
        if not first.startswith(b"LHCK1 "):
            raise ValueError(f"bad checkpoint header line {first!r}")
        n = int(first.split()[1])
        header_bytes = f.read(n)
        blob = f.read()
    header = {}
    for line in header_bytes.decode("utf-8").splitlines():
        key, _, value = line.partition("=")
        header[key] = value
    return header, ad.loads_params(blob)


def save_model(model: SequenceModel, path, extra: dict | None = None) -> None:
    cfg = model.config
    header = {
        "obs_dim": cfg.obs_dim,
        "action_dim": cfg.action_dim,
        "action_kind": cfg.action_kind,
        "latent_dim": cfg.latent_dim,
        "hidden_dim": cfg.hidden_dim,
        "backward_hidden_dim": cfg.backward_hidden_dim,
        "decoder_hidden_dims": ",".join(str(d) for d in cfg.decoder_hidden_dims),
    }
    for k, v in (extra or {}).items():
        if k in header:
            raise ValueError(f"extra header key {k!r} collides with a config field")
        header[k] = v
    write_checkpoint(path, header, model.params)


def load_model(path):
    header, params = read_checkpoint(path)
    cfg = ModelConfig(
        obs_dim=int(header.pop("obs_dim")),
        action_dim=int(header.pop("action_dim")),
        action_kind=header.pop("action_kind"),
        latent_dim=int(header.pop("latent_dim")),
        hidden_dim=int(header.pop("hidden_dim")),
        backward_hidden_dim=int(header.pop("backward_hidden_dim")),
        decoder_hidden_dims=tuple(int(d) for d in header.pop("decoder_hidden_dims").split(",")),
    )
    model = SequenceModel(cfg, params=params)
    return model, header
