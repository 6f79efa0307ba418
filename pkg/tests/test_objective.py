import numpy as np
import pytest

from latdyn import autodiff as ad
from latdyn import objective as obj
from latdyn.model import DiagGaussian, ModelConfig, SequenceModel
from latdyn.trajectory import Trajectory


def make_model(seed=0, **overrides):
    cfg = dict(obs_dim=3, action_dim=3, latent_dim=2, hidden_dim=4,
               backward_hidden_dim=3, decoder_hidden_dims=(5,))
    cfg.update(overrides)
    return SequenceModel(ModelConfig(**cfg), seed=seed)


def make_traj(rng, t=4, obs_dim=3, action_dim=3):
    return Trajectory(rng.standard_normal((t + 1, obs_dim)),
                      rng.integers(0, action_dim, size=t), np.zeros(t))


def gauss(mean, log_std):
    return DiagGaussian(ad.constant(np.atleast_1d(mean)), ad.constant(np.atleast_1d(log_std)))


# ---------------------------------------------------------------------------
# KL


def test_kl_identical_distributions_zero():
    q = gauss([0.3, -1.0], [0.2, -0.1])
    assert abs(obj.kl_diag_gaussian(q, q).item()) < 1e-12


def _kl_monte_carlo(mu_q, ls_q, mu_p, ls_p, n, rng):
    z = mu_q + np.exp(ls_q) * rng.standard_normal(n)
    log_q = -0.5 * ((z - mu_q) / np.exp(ls_q)) ** 2 - ls_q - 0.5 * np.log(2 * np.pi)
    log_p = -0.5 * ((z - mu_p) / np.exp(ls_p)) ** 2 - ls_p - 0.5 * np.log(2 * np.pi)
    return (log_q - log_p).mean()


def test_kl_mean_shift_matches_monte_carlo():
    got = obj.kl_diag_gaussian(gauss(1.0, 0.0), gauss(0.0, 0.0)).item()
    assert abs(got - 0.5) < 1e-12
    mc = _kl_monte_carlo(1.0, 0.0, 0.0, 0.0, 1_000_000, np.random.default_rng(0))
    assert abs(got - mc) < 0.005


def test_kl_scale_mismatch_matches_monte_carlo():
    got = obj.kl_diag_gaussian(gauss(0.0, np.log(2.0)), gauss(0.0, 0.0)).item()
    assert abs(got - 0.80685) < 5e-6
    mc = _kl_monte_carlo(0.0, np.log(2.0), 0.0, 0.0, 1_000_000, np.random.default_rng(1))
    assert abs(got - mc) < 0.005


def test_kl_nonnegative_random_pairs():
    rng = np.random.default_rng(2)
    for _ in range(1000):
        q = gauss(rng.uniform(-2, 2, 3), rng.uniform(-1, 1, 3))
        p = gauss(rng.uniform(-2, 2, 3), rng.uniform(-1, 1, 3))
        assert obj.kl_diag_gaussian(q, p).item() >= 0.0


def test_kl_dimension_mismatch():
    with pytest.raises(ValueError, match="mismatch"):
        obj.kl_diag_gaussian(gauss([0.0, 0.0], [0.0, 0.0]), gauss(0.0, 0.0))


# ---------------------------------------------------------------------------
# schedule


def test_kl_schedule_values():
    cfg = obj.ObjectiveConfig(kl_start=0.2)
    assert obj.kl_schedule(0, cfg) == 0.2
    assert abs(obj.kl_schedule(100, cfg) - 0.25) < 1e-15
    assert obj.kl_schedule(10**6, cfg) == 1.0
    for start in (0.15, 0.2, 0.25):
        c = obj.ObjectiveConfig(kl_start=start)
        for n in (0, 1, 100, 10**6):
            assert obj.kl_schedule(n, c) == min(start + 0.0005 * n, 1.0)


def test_objective_config_validation():
    with pytest.raises(ValueError):
        obj.ObjectiveConfig(beta=-1.0)
    with pytest.raises(ValueError):
        obj.ObjectiveConfig(kl_start=0.0)


# ---------------------------------------------------------------------------
# elbo


def test_elbo_zero_weight_is_pure_reconstruction():
    m = make_model(seed=3)
    traj = make_traj(np.random.default_rng(4))
    records = m.teacher_forced_pass(traj, np.random.default_rng(5))
    b = obj.elbo(records, kl_weight=0.0)
    assert abs(b.total - (-(b.obs_recon + b.act_recon))) < 1e-12


def test_elbo_posterior_equals_prior_gives_zero_kl():
    m = make_model(seed=6)
    # copy the prior head into the posterior head and zero the b columns
    hdim = m.config.hidden_dim
    m.params["inf/post/l0/w"].value[...] = 0.0
    m.params["inf/post/l0/w"].value[:hdim] = m.params["gen/prior/l0/w"].value
    m.params["inf/post/l0/b"].value[...] = m.params["gen/prior/l0/b"].value
    for head in ("mean", "logstd"):
        m.params[f"inf/post/{head}/w"].value[...] = m.params[f"gen/prior/{head}/w"].value
        m.params[f"inf/post/{head}/b"].value[...] = m.params[f"gen/prior/{head}/b"].value
    traj = make_traj(np.random.default_rng(7))
    records = m.teacher_forced_pass(traj, np.random.default_rng(8))
    for rec in records:
        assert np.allclose(rec.posterior.mean.value, rec.prior.mean.value)
    b = obj.elbo(records, kl_weight=0.7)
    assert abs(b.kl_total) < 1e-12


def test_elbo_single_step_matches_hand_sum():
    # T=1: one obs term, one action term, one KL, all recomputed by hand
    m = make_model(seed=9)
    traj = make_traj(np.random.default_rng(10), t=1)
    rng = np.random.default_rng(11)
    records = m.teacher_forced_pass(traj, rng)
    rec = records[0]

    def logpdf(x, mu, ls):
        return float(np.sum(-0.5 * ((x - mu) / np.exp(ls)) ** 2 - ls)
                     - 0.5 * len(x) * np.log(2 * np.pi))

    obs_hand = logpdf(traj.observations[1], rec.obs_dist.mean.value, rec.obs_dist.log_std.value)
    logits = rec.act_dist.logits.value
    act_hand = float(logits[traj.actions[0]] - np.log(np.exp(logits - logits.max()).sum())
                     - logits.max())
    mu_q, ls_q = rec.posterior.mean.value, rec.posterior.log_std.value
    mu_p, ls_p = rec.prior.mean.value, rec.prior.log_std.value
    kl_hand = float(np.sum(ls_p - ls_q + 0.5 * (np.exp(2 * (ls_q - ls_p))
                                                + (mu_q - mu_p) ** 2 * np.exp(-2 * ls_p)) - 0.5))
    b = obj.elbo(records, kl_weight=0.3)
    assert abs(b.obs_recon - obs_hand) < 1e-9
    assert abs(b.act_recon - act_hand) < 1e-9
    assert abs(b.kl_total - kl_hand) < 1e-9
    assert abs(b.total - (-(obs_hand + act_hand - 0.3 * kl_hand))) < 1e-9


# ---------------------------------------------------------------------------
# auxiliary cost and the stop-gradient contract


def test_aux_cost_perfect_prediction_value():
    m = make_model(seed=12)
    traj = make_traj(np.random.default_rng(13), t=1)
    records = m.teacher_forced_pass(traj, np.random.default_rng(14))
    rec = records[0]
    # force the decoder mean onto the target by zeroing weights and writing
    # the bias equal to b
    for name, node in m.params.items():
        if name.startswith("aux/dec") and name.endswith("/w"):
            node.value[...] = 0.0
    m.params["aux/dec/l0/b"].value[...] = 0.0
    m.params["aux/dec/mean/b"].value[...] = rec.b.value
    val = obj.aux_cost(m, [rec.latent_aux], [rec.b]).item()
    k = m.config.backward_hidden_dim
    assert abs(val - (-(k / 2) * np.log(2 * np.pi))) < 1e-12


def test_aux_cost_length_mismatch():
    m = make_model(seed=15)
    traj = make_traj(np.random.default_rng(16), t=2)
    records = m.teacher_forced_pass(traj, np.random.default_rng(17))
    with pytest.raises(ValueError, match="latents"):
        obj.aux_cost(m, [records[0].latent_aux], [r.b for r in records])


def test_stop_gradient_contract():
    m = make_model(seed=18)
    traj = make_traj(np.random.default_rng(19), t=5)
    cfg = obj.ObjectiveConfig()

    # auxiliary term alone: zero gradient on every backward-network param,
    # nonzero on the auxiliary decoder and posterior head
    m.params.zero_grad()
    breakdown = obj.total_loss(m, traj, cfg, 0, np.random.default_rng(20))
    ad.backward(breakdown.aux_node)
    for name, node in m.params.items():
        if name.startswith("inf/back"):
            assert node.grad is None or not np.any(node.grad), name
        if name.startswith(("gen/trans", "gen/obs", "gen/act", "gen/prior")):
            assert node.grad is None or not np.any(node.grad), name
    assert any(np.any(m.params[n].grad) for n, _ in m.params.items()
               if n.startswith("aux/dec") and m.params[n].grad is not None)
    assert any(np.any(m.params[n].grad) for n, _ in m.params.items()
               if n.startswith("inf/post") and m.params[n].grad is not None)

    # the lower-bound terms do train the backward network
    m.params.zero_grad()
    breakdown = obj.total_loss(m, traj, cfg, 0, np.random.default_rng(20))
    elbo_node = ad.add(breakdown.total_node, ad.mul(breakdown.aux_node, cfg.beta))
    ad.backward(elbo_node)
    back_grads = [np.abs(node.grad).max() for name, node in m.params.items()
                  if name.startswith("inf/back") and node.grad is not None]
    assert back_grads and max(back_grads) > 0


# ---------------------------------------------------------------------------
# total_loss


def test_total_loss_identity_and_beta_zero():
    m = make_model(seed=21)
    traj = make_traj(np.random.default_rng(22))
    cfg = obj.ObjectiveConfig(beta=0.0)
    b = obj.total_loss(m, traj, cfg, iteration=10, rng=np.random.default_rng(23))
    klw = obj.kl_schedule(10, cfg)
    assert b.kl_weight_used == klw
    assert b.total == -((b.obs_recon + b.act_recon + 0.0 * b.aux_total) - klw * b.kl_total)

    cfg2 = obj.ObjectiveConfig(beta=0.0005)
    b2 = obj.total_loss(m, traj, cfg2, iteration=10, rng=np.random.default_rng(23))
    assert b2.total == -((b2.obs_recon + b2.act_recon + cfg2.beta * b2.aux_total)
                         - klw * b2.kl_total)
    # the two runs share every stochastic choice, so the lower-bound parts agree
    assert abs(b.obs_recon - b2.obs_recon) < 1e-12
    assert abs(b.kl_total - b2.kl_total) < 1e-12


def test_total_loss_gradients_match_finite_differences_small():
    # stop-gradient semantics: FD of the beta=0 objective plus FD of the
    # frozen-input auxiliary closure must equal the analytic gradient of
    # the full objective
    m = make_model(seed=24, obs_dim=2, action_dim=2, latent_dim=2,
                   hidden_dim=3, backward_hidden_dim=2, decoder_hidden_dims=(3,))
    traj = make_traj(np.random.default_rng(25), t=3, obs_dim=2, action_dim=2)
    cfg = obj.ObjectiveConfig(beta=0.0005)
    _assert_total_loss_grad_matches_fd(m, traj, cfg, tol=1e-4)


def _assert_total_loss_grad_matches_fd(m, traj, cfg, tol):
    seed = 1234
    m.params.zero_grad()
    full = obj.total_loss(m, traj, cfg, 0, np.random.default_rng(seed))
    ad.backward(full.total_node)
    analytic = {name: (node.grad.copy() if node.grad is not None else np.zeros_like(node.value))
                for name, node in m.params.items()}
    m.params.zero_grad()

    # frozen auxiliary inputs (detached values are constants of the check)
    records = m.teacher_forced_pass(traj, np.random.default_rng(seed))
    frozen_inputs = []
    state = m.initial_state()
    for rec in records:
        frozen_inputs.append((state.h.value.copy(), rec.b.value.copy(), rec.latent.epsilon))
        state = rec.next_state

    cfg0 = obj.ObjectiveConfig(beta=0.0, kl_start=cfg.kl_start,
                               kl_increment=cfg.kl_increment, kl_cap=cfg.kl_cap)

    def f_elbo():
        return obj.total_loss(m, traj, cfg0, 0, np.random.default_rng(seed)).total_node

    def f_aux():
        from latdyn.model import BackwardState, ForwardState

        total = None
        for h_val, b_val, eps in frozen_inputs:
            st = ForwardState(ad.constant(h_val), ad.constant(np.zeros_like(h_val)))
            bs = BackwardState(ad.constant(b_val), ad.constant(np.zeros_like(b_val)))
            z = m.aux_path_latent(st, bs, eps)
            ll = m.aux_decode(z).log_prob(ad.constant(b_val))
            total = ll if total is None else ad.add(total, ll)
        return ad.mul(total, -cfg.beta)

    worst = 0.0
    eps_fd = 1e-5
    for name, node in m.params.items():
        flat = node.value.reshape(-1)
        a = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps_fd
            fp = f_elbo().item() + f_aux().item()
            flat[i] = orig - eps_fd
            fm = f_elbo().item() + f_aux().item()
            flat[i] = orig
            fd = (fp - fm) / (2 * eps_fd)
            denom = max(1.0, abs(a[i]), abs(fd))
            worst = max(worst, abs(a[i] - fd) / denom)
    assert worst < tol, f"worst relative gradient error {worst}"


def test_total_loss_overfits_fixed_batch():
    rng = np.random.default_rng(26)
    m = make_model(seed=27)
    trajs = [make_traj(rng, t=3) for _ in range(4)]
    cfg = obj.ObjectiveConfig(learning_rate=1e-3)
    first = obj.batch_loss(m, trajs, cfg, 0, np.random.default_rng(0)).total
    rows = obj.fit_model(m, trajs, cfg, steps=200, batch_size=4, rng=np.random.default_rng(1))
    last = obj.batch_loss(m, trajs, cfg, 200, np.random.default_rng(0)).total
    assert last < first
    assert len(rows) == 200


def test_chunked_long_trajectory_covers_all_steps():
    m = make_model(seed=28)
    rng = np.random.default_rng(29)
    traj = make_traj(rng, t=23)
    cfg_whole = obj.ObjectiveConfig(chunk_length=250)
    cfg_chunked = obj.ObjectiveConfig(chunk_length=10)
    whole = obj.total_loss(m, traj, cfg_whole, 0, np.random.default_rng(5))
    chunked = obj.total_loss(m, traj, cfg_chunked, 0, np.random.default_rng(5))
    # chunking restarts the backward recurrence, so values differ, but both
    # must score all 23 steps (finite, same order of magnitude)
    assert np.isfinite(chunked.total)
    assert abs(chunked.act_recon - whole.act_recon) < abs(whole.act_recon)
    pieces = list(obj._chunks(traj, 10))
    assert [p.length for p in pieces] == [10, 10, 3]
    assert np.array_equal(pieces[1].observations[0], traj.observations[10])


# ---------------------------------------------------------------------------
# batched loss agrees with the single path


def test_batch_of_one_matches_single():
    m = make_model(seed=30)
    traj = make_traj(np.random.default_rng(31), t=5)
    cfg = obj.ObjectiveConfig()
    single = obj.total_loss(m, traj, cfg, 3, np.random.default_rng(77))
    batched = obj.batch_loss(m, [traj], cfg, 3, np.random.default_rng(77))
    assert abs(single.total - batched.total) < 1e-10
    assert abs(single.kl_total - batched.kl_total) < 1e-10


def test_batch_mean_of_equal_length_trajectories():
    m = make_model(seed=32)
    rng = np.random.default_rng(33)
    trajs = [make_traj(rng, t=4) for _ in range(3)]
    cfg = obj.ObjectiveConfig()
    batched = obj.batch_loss(m, trajs, cfg, 0, np.random.default_rng(3))
    assert np.isfinite(batched.total)
    # identity holds for the batch-averaged breakdown as stored
    assert batched.total == -((batched.obs_recon + batched.act_recon
                               + cfg.beta * batched.aux_total)
                              - batched.kl_weight_used * batched.kl_total)


def test_batch_loss_masks_padding():
    m = make_model(seed=34)
    rng = np.random.default_rng(35)
    short = make_traj(rng, t=2)
    long = make_traj(rng, t=6)
    cfg = obj.ObjectiveConfig()
    both = obj.batch_loss(m, [short, long], cfg, 0, np.random.default_rng(9))
    assert np.isfinite(both.total)
    # padding must not change the short trajectory's contribution:
    # compare against the two single losses averaged (same noise per row is
    # not reproducible across layouts, so compare loosely via determinism)
    again = obj.batch_loss(m, [short, long], cfg, 0, np.random.default_rng(9))
    assert both.total == again.total


# ---------------------------------------------------------------------------
# sequence NLL


def test_sequence_nll_one_sample_is_negated_single_sample_bound():
    m = make_model(seed=36)
    traj = make_traj(np.random.default_rng(37), t=4)
    got = obj.sequence_nll(m, traj, 1, np.random.default_rng(55))

    # independent recomputation with the same noise stream
    rng = np.random.default_rng(55)
    with ad.no_grad():
        bstates = m.backward_encode(traj.observations[1:])
        state = m.initial_state(1)
        w = 0.0
        for t in range(1, traj.length + 1):
            from latdyn.model import BackwardState, reparameterize

            b = BackwardState(ad.constant(bstates[t - 1].b.value[None, :]),
                              ad.constant(bstates[t - 1].c_b.value[None, :]))
            prior = m.prior(state)
            post = m.posterior(state, b)
            z = reparameterize(post, rng.standard_normal((1, m.config.latent_dim)))
            a = np.full(1, traj.actions[t - 1])
            act_ll = m.decode_action(state, z).log_prob(a).value[0]
            obs_row = traj.observations[t][None, :]
            obs_ll = m.decode_observation(m.embed_action(a), state, z).log_prob(obs_row).value[0]
            w += obs_ll + act_ll + prior.log_prob(z.z).value[0] - post.log_prob(z.z).value[0]
            state = m.forward_transition(obs_row, state, z)
    assert abs(got - (-w)) < 1e-9


def test_sequence_nll_more_samples_tightens_on_average():
    m = make_model(seed=38)
    rng = np.random.default_rng(39)
    trajs = [make_traj(rng, t=4) for _ in range(12)]
    one = np.mean([obj.sequence_nll(m, t, 1, np.random.default_rng(100 + i))
                   for i, t in enumerate(trajs)])
    many = np.mean([obj.sequence_nll(m, t, 100, np.random.default_rng(100 + i))
                    for i, t in enumerate(trajs)])
    assert many <= one


def test_sequence_nll_entropy_floor_for_iid_model():
    # zero all weights: the model emits iid Gaussians with bias means and
    # uniform actions; prior and posterior coincide so the latent terms
    # cancel exactly and the expected NLL is the analytic entropy plus
    # log(action count) per step
    m = make_model(seed=40)
    for name, node in m.params.items():
        node.value[...] = 0.0
    m.params["gen/obs/logstd/b"].value[...] = -1.0
    rng = np.random.default_rng(41)
    t_len = 10
    sigma = np.exp(-1.0)
    per_step = (m.config.obs_dim * (0.5 * np.log(2 * np.pi * np.e) + np.log(sigma))
                + np.log(m.config.action_dim))
    nlls = []
    for _ in range(30):
        gen = m.generate(np.zeros(3), None, t_len, rng)
        nlls.append(obj.sequence_nll(m, gen.trajectory, 10, rng))
    floor = t_len * per_step
    spread = abs(floor) * 0.25 + 3.0
    assert abs(np.mean(nlls) - floor) < spread


def test_sequence_nll_zero_latent_kind_is_exact():
    m = make_model(seed=42)
    traj = make_traj(np.random.default_rng(43), t=4)
    a = obj.sequence_nll(m, traj, 1, np.random.default_rng(0), kind=obj.RECURRENT_DECODER)
    b = obj.sequence_nll(m, traj, 100, np.random.default_rng(9), kind=obj.RECURRENT_DECODER)
    assert a == b
    with ad.no_grad():
        records = m.teacher_forced_pass(traj, np.random.default_rng(0), latent_mode="zero")
        expected = -(sum(r.obs_loglik.item() for r in records)
                     + sum(r.act_loglik.item() for r in records))
    assert abs(a - expected) < 1e-12


def test_metrics_row_format():
    b = obj.LossBreakdown(1.0, 2.0, 3.0, 4.0, 5.0, 0.25)
    row = obj.format_metrics_row(7, b)
    assert row == "7,5.0,1.0,2.0,3.0,4.0,0.25"
    assert obj.METRICS_HEADER.count(",") == row.count(",")