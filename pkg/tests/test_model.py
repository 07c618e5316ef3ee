"""Model-layer tests: theory integrator, step composition, rollouts, ITE."""

import numpy as np
import pytest

import cfswarm.tensor as T
from cfswarm.blocks import gnn_forward, treatment_head
from cfswarm.boids import SimConfig, simulate
from cfswarm.errors import ContractError, DimensionError
from cfswarm.model import (CrnModel, ModelDims, ModelVariant, predict_ite,
                           scale_row, theory_step, treatment_matrix)
from cfswarm.rng import Rng, derive_seed
from cfswarm.tensor import Tensor


SMALL = ModelDims(hidden=6, latent=3, feat=6, gnn_hidden=6, gnn_edge=6,
                  mlp_hidden=6, g_hidden=4, g_latent=2, g_feat=4,
                  rnn_hidden=6)


def small_cfg():
    return SimConfig(n_agents=4, n_steps=8, burn_in=5,
                     t_i_start=5, t_i_end=7).validate()


def zero_store(model, seed=0):
    store = model.init_store(seed)
    for name, t in store.params.items():
        store.params[name] = Tensor(np.zeros_like(t.array))
    return store


def batch_from_sim(cfg, n, seed=0, intervention=None):
    eps = [simulate(cfg, seed + i, intervention) for i in range(n)]
    x_local = np.stack([e.x_local for e in eps]).astype(np.float64)
    x_global = np.stack([e.x_global for e in eps]).astype(np.float64)
    treatment = np.stack([e.treatment for e in eps]).astype(np.float64)
    return x_local, x_global, treatment


# theory integrator ---------------------------------------------------------


def lone_state(heading, pos=(0.0, 0.0)):
    positions = np.array([[list(pos)]], dtype=np.float64)
    headings = np.array([[list(heading)]], dtype=np.float64)
    return positions, headings


def test_theory_step_zero_angle_goes_straight():
    cfg = SimConfig(n_agents=1).validate()
    positions, headings = lone_state((1.0, 0.0))
    theta = np.zeros((1, 1, 1))
    x_loc, x_g, new_pos, new_head = theory_step(theta, positions, headings,
                                                np.zeros(1), cfg)
    step = cfg.speed * cfg.dt
    assert np.allclose(new_head.array, [[[1.0, 0.0]]], atol=1e-12)
    assert np.allclose(new_pos.array, [[[step, 0.0]]], atol=1e-12)
    assert np.allclose(x_loc.array[0, 0],
                       [step, 0.0, cfg.speed, 0.0, 0.0], atol=1e-12)


def test_theory_step_clamps_quarter_turn_to_limit():
    cfg = SimConfig(n_agents=1).validate()
    positions, headings = lone_state((1.0, 0.0))
    theta = np.full((1, 1, 1), np.pi / 2)
    x_loc, _, _, new_head = theory_step(theta, positions, headings,
                                        np.zeros(1), cfg)
    beta = cfg.max_turn_rad
    assert abs(x_loc.array[0, 0, 4] - beta) < 1e-12
    assert np.allclose(new_head.array[0, 0],
                       [np.cos(beta), np.sin(beta)], atol=1e-12)


def test_theory_step_far_agents_turn_toward_centroid():
    # both agents sit attraction_radius/2 past the centroid on the x axis
    cfg = SimConfig(n_agents=2).validate()
    positions = np.array([[[-5.0, 0.0], [5.0, 0.0]]])
    headings = np.array([[[0.0, 1.0], [0.0, 1.0]]])
    theta = np.zeros((1, 2, 1))
    x_loc, _, _, new_head = theory_step(theta, positions, headings,
                                        np.zeros(1), cfg)
    beta = cfg.max_turn_rad
    # desired dirs are (1,0) and (-1,0); both turns clamp at the limit
    assert abs(x_loc.array[0, 0, 4] + beta) < 1e-12
    assert abs(x_loc.array[0, 1, 4] - beta) < 1e-12
    assert np.allclose(new_head.array[0, 0],
                       [np.sin(beta), np.cos(beta)], atol=1e-12)
    assert np.allclose(new_head.array[0, 1],
                       [-np.sin(beta), np.cos(beta)], atol=1e-12)


def test_theory_step_orientation_blend_gated_by_treatment():
    # spacing 2.0 falls between the untreated radius 1.0 and treated 4.0
    cfg = SimConfig(n_agents=2).validate()
    positions = np.array([[[0.0, 0.0], [2.0, 0.0]]])
    headings = np.array([[[1.0, 0.0], [0.0, 1.0]]])
    theta = np.zeros((1, 2, 1))
    off = theory_step(theta, positions, headings, np.zeros(1), cfg)[0]
    on = theory_step(theta, positions, headings, np.ones(1), cfg)[0]
    # untreated: no zone applies, both keep their headings
    assert abs(off.array[0, 0, 4]) < 1e-12
    assert abs(off.array[0, 1, 4]) < 1e-12
    # treated: blend of own and neighbour heading is 45 deg, clamped to 30
    beta = cfg.max_turn_rad
    assert abs(on.array[0, 0, 4] - beta) < 1e-12
    assert abs(on.array[0, 1, 4] + beta) < 1e-12


def test_theory_step_zone_free_matches_plain_integrator():
    # triangle of radius 2: no repulsion/orientation pairs, nobody far
    cfg = SimConfig(n_agents=3).validate()
    ang = np.array([0.0, 2.1, 4.2])
    positions = 2.0 * np.stack([np.cos(ang), np.sin(ang)], axis=1)[None]
    positions = np.ascontiguousarray(positions)
    rng = np.random.default_rng(7)
    phi = rng.uniform(-np.pi, np.pi, size=3)
    headings = np.stack([np.cos(phi), np.sin(phi)], axis=1)[None]
    theta = rng.uniform(-1.0, 1.0, size=(1, 3, 1))
    x_loc, _, new_pos, new_head = theory_step(theta, positions, headings,
                                              np.zeros(1), cfg)
    turn = np.clip(theta[..., 0], -cfg.max_turn_rad, cfg.max_turn_rad)
    c, s = np.cos(turn), np.sin(turn)
    hx, hy = headings[..., 0], headings[..., 1]
    ex = hx * c - hy * s
    ey = hx * s + hy * c
    assert np.allclose(new_head.array[..., 0], ex, atol=1e-9)
    assert np.allclose(new_head.array[..., 1], ey, atol=1e-9)
    exp_pos = positions + cfg.speed * cfg.dt * np.stack([ex, ey], axis=2)
    assert np.allclose(new_pos.array, exp_pos, atol=1e-9)
    assert np.allclose(x_loc.array[..., 4], turn, atol=1e-9)


def test_theory_step_outputs_consistent():
    cfg = small_cfg()
    x_local, _, _ = batch_from_sim(cfg, 3, seed=11)
    positions = x_local[:, 4, :, 0:2]
    headings = x_local[:, 4, :, 2:4] / cfg.speed
    rng = np.random.default_rng(0)
    theta = rng.uniform(-2.0, 2.0, size=(3, cfg.n_agents, 1))
    a_row = np.array([0.0, 1.0, 0.0])
    x_loc, x_g, new_pos, new_head = theory_step(theta, positions, headings,
                                                a_row, cfg)
    arr = x_loc.array
    # layout: position, velocity, realized turn; heading rows stay unit
    assert np.allclose(arr[..., 0:2], new_pos.array, atol=0)
    assert np.allclose(arr[..., 2:4], cfg.speed * new_head.array, atol=0)
    norms = np.sqrt((new_head.array ** 2).sum(axis=2))
    assert np.max(np.abs(norms - 1.0)) < 1e-12
    assert np.max(np.abs(arr[..., 4])) <= cfg.max_turn_rad + 1e-12
    # realized turn equals the angle between old and new heading
    cross = headings[..., 0] * new_head.array[..., 1] \
        - headings[..., 1] * new_head.array[..., 0]
    dot = (headings * new_head.array).sum(axis=2)
    assert np.allclose(arr[..., 4], np.arctan2(cross, dot), atol=1e-9)
    # group spin of the predicted state, recomputed directly
    cen = new_pos.array.mean(axis=1, keepdims=True)
    rel = new_pos.array - cen
    rel = rel / np.sqrt((rel ** 2).sum(axis=2, keepdims=True) + 1e-24)
    spin = rel[..., 0] * new_head.array[..., 1] \
        - rel[..., 1] * new_head.array[..., 0]
    assert np.allclose(x_g.array[:, 0], np.abs(spin.mean(axis=1)), atol=1e-9)
    assert np.all(x_g.array >= 0.0) and np.all(x_g.array <= 1.0 + 1e-12)


# step composition oracles ---------------------------------------------------


def bound_model(variant, cfg, seed=0):
    model = CrnModel(variant, cfg, SMALL)
    store = model.init_store(seed)
    tape = T.Tape(record=False)
    leaves = store.bind(tape)
    return model, store, leaves


def test_prior_step_composes_gnn_and_head():
    cfg = small_cfg()
    model, _, leaves = bound_model(ModelVariant.TGV_CRN, cfg)
    rng = np.random.default_rng(1)
    h = rng.normal(size=(2, cfg.n_agents, SMALL.hidden))
    mu, sig = model.prior_step(leaves, T._lift(h))
    feat = gnn_forward(model.prior_net, leaves, T._lift(h))
    mu2, sig2 = model.prior_head(leaves, feat)
    assert np.array_equal(mu.array, mu2.array)
    assert np.array_equal(sig.array, sig2.array)


def test_encode_and_decode_steps_compose():
    cfg = small_cfg()
    model, _, leaves = bound_model(ModelVariant.TGV_CRN, cfg)
    rng = np.random.default_rng(2)
    b, k = 2, cfg.n_agents
    h = rng.normal(size=(b, k, SMALL.hidden))
    x_sc = rng.normal(size=(b, k, 5))
    z = rng.normal(size=(b, k, SMALL.latent))

    mu, sig = model.encode_step(leaves, x_sc, h)
    inp = np.concatenate([x_sc, h], axis=2)
    mu2, sig2 = model.enc_head(leaves, gnn_forward(model.enc_net, leaves,
                                                   T._lift(inp)))
    assert np.array_equal(mu.array, mu2.array)
    assert np.array_equal(sig.array, sig2.array)

    mu, sig = model.decode_step(leaves, z, h)
    inp = np.concatenate([z, h], axis=2)
    mu2, sig2 = model.dec_head(leaves, gnn_forward(model.dec_net, leaves,
                                                   T._lift(inp)))
    assert np.array_equal(mu.array, mu2.array)
    assert np.array_equal(sig.array, sig2.array)


def test_recurrence_with_zero_params_halves_state():
    cfg = small_cfg()
    model = CrnModel(ModelVariant.TGV_CRN, cfg, SMALL)
    store = zero_store(model)
    tape = T.Tape(record=False)
    leaves = store.bind(tape)
    rng = np.random.default_rng(3)
    b, k = 2, cfg.n_agents
    h = rng.normal(size=(b, k, SMALL.hidden))
    x_sc = rng.normal(size=(b, k, 5))
    z = rng.normal(size=(b, k, SMALL.latent))
    h2 = model.recurrence_step(leaves, x_sc, z, h)
    assert np.allclose(h2.array, 0.5 * h, atol=1e-15)


def test_outcome_step_zero_params_is_half():
    cfg = small_cfg()
    model = CrnModel(ModelVariant.TGV_CRN, cfg, SMALL)
    store = zero_store(model)
    leaves = store.bind(T.Tape(record=False))
    rng = np.random.default_rng(4)
    z = rng.normal(size=(3, cfg.n_agents, SMALL.latent))
    y = model.outcome_step(leaves, z, np.full((3, 1), 0.4), np.ones((3, 1)))
    assert np.array_equal(y.array, np.full((3, 1), 0.5))


def test_outcome_step_pools_agents_symmetrically():
    cfg = small_cfg()
    model, _, leaves = bound_model(ModelVariant.TGV_CRN, cfg, seed=5)
    rng = np.random.default_rng(5)
    z = rng.normal(size=(2, cfg.n_agents, SMALL.latent))
    x_g = rng.uniform(size=(2, 1))
    a = np.array([[0.0], [1.0]])
    y = model.outcome_step(leaves, z, x_g, a)
    perm = np.random.default_rng(6).permutation(cfg.n_agents)
    y_p = model.outcome_step(leaves, z[:, perm], x_g, a)
    assert np.allclose(y.array, y_p.array, atol=1e-12)


def test_treatment_head_matches_pooled_mlp():
    cfg = small_cfg()
    model, _, leaves = bound_model(ModelVariant.TGV_CRN, cfg, seed=7)
    rng = np.random.default_rng(7)
    z = rng.normal(size=(2, cfg.n_agents, SMALL.latent))
    pooled = z.mean(axis=1)
    prob, logit = treatment_head(model.mlp_a, leaves, T._lift(pooled))
    direct = model.mlp_a(leaves, T._lift(pooled))
    assert np.allclose(logit.array, direct.array, atol=1e-15)
    assert np.allclose(prob.array, 1.0 / (1.0 + np.exp(-direct.array)),
                       atol=1e-15)


# rollout contracts ----------------------------------------------------------


def test_rollout_rejects_bad_shapes():
    cfg = small_cfg()
    model, _, leaves = bound_model(ModelVariant.TGV_CRN, cfg)
    x_local, x_global, treatment = batch_from_sim(cfg, 2, seed=0)
    with pytest.raises(ContractError):
        model.rollout(leaves, x_local, x_global, treatment, "test")
    with pytest.raises(DimensionError):
        model.rollout(leaves, x_local[:, :, :3], x_global, treatment, "infer")
    with pytest.raises(DimensionError):
        model.rollout(leaves, x_local[:, :6], x_global[:, :6],
                      treatment[:, :6], "infer")
    with pytest.raises(ContractError):
        model.rollout(leaves, x_local, x_global, treatment[:, :6], "infer")
    with pytest.raises(DimensionError):
        model.rollout(leaves, x_local, x_global[:, :, 0], treatment, "infer")


def test_rollout_train_needs_rng_when_sampling():
    cfg = small_cfg()
    model, _, leaves = bound_model(ModelVariant.TGV_CRN, cfg)
    x_local, x_global, treatment = batch_from_sim(cfg, 1, seed=0)
    with pytest.raises(ContractError):
        model.rollout(leaves, x_local, x_global, treatment, "train")


def test_rollout_output_shapes():
    cfg = small_cfg()
    model, _, leaves = bound_model(ModelVariant.TGV_CRN, cfg)
    x_local, x_global, treatment = batch_from_sim(cfg, 3, seed=2,
                                                  intervention=6)
    out = model.rollout(leaves, x_local, x_global, treatment, "train",
                        rng=Rng(0))
    b, t, k = 3, cfg.n_steps, cfg.n_agents
    assert out.stacked("y_hat").shape == (b, t, 1)
    assert out.stacked("a_prob").shape == (b, t, 1)
    assert out.stacked("a_logits").shape == (b, t, 1)
    assert out.stacked("x_loc_hat").shape == (b, t, k, 5)
    assert out.stacked("x_g_hat").shape == (b, t, 1)
    assert out.batch_size == b
    y = out.stacked("y_hat")
    assert np.all(y > 0.0) and np.all(y < 1.0)
    prob = out.stacked("a_prob")
    assert np.all(prob > 0.0) and np.all(prob < 1.0)


def test_variant_gating_tg_skips_elbo():
    cfg = small_cfg()
    model, _, leaves = bound_model(ModelVariant.TG_CRN, cfg)
    x_local, x_global, treatment = batch_from_sim(cfg, 2, seed=3)
    # TG forces mean latents, so no rng is needed even in train mode
    out = model.rollout(leaves, x_local, x_global, treatment, "train")
    assert float(out.kl_sum.array) == 0.0
    assert float(out.recon_sum.array) == 0.0
    assert out.elbo_steps == 0
    assert out.g_kl_sum is None and out.g_recon_sum is None
    assert model.enc_net is None
    with pytest.raises(ContractError):
        model.encode_step(leaves, np.zeros((2, cfg.n_agents, 5)),
                          np.zeros((2, cfg.n_agents, SMALL.hidden)))


def test_variant_gating_tgv_accumulates_elbo():
    cfg = small_cfg()
    model, _, leaves = bound_model(ModelVariant.TGV_CRN, cfg)
    x_local, x_global, treatment = batch_from_sim(cfg, 2, seed=3)
    out = model.rollout(leaves, x_local, x_global, treatment, "train",
                        rng=Rng(1))
    assert out.elbo_steps == cfg.burn_in
    assert float(out.kl_sum.array) > 0.0
    assert np.isfinite(float(out.recon_sum.array))
    assert out.g_kl_sum is None and out.g_recon_sum is None


def test_variant_gating_gv_runs_global_branch():
    cfg = small_cfg()
    model, _, leaves = bound_model(ModelVariant.GV_CRN, cfg)
    x_local, x_global, treatment = batch_from_sim(cfg, 2, seed=3)
    out = model.rollout(leaves, x_local, x_global, treatment, "train",
                        rng=Rng(1))
    assert float(out.g_kl_sum.array) > 0.0
    assert np.isfinite(float(out.g_recon_sum.array))
    assert out.elbo_steps == cfg.burn_in
    # infer mode leaves the ELBO untouched
    quiet = model.rollout(leaves, x_local, x_global, treatment, "infer")
    assert float(quiet.kl_sum.array) == 0.0
    assert quiet.elbo_steps == 0


def test_rollout_deterministic_given_seed():
    cfg = small_cfg()
    model, store, _ = bound_model(ModelVariant.TGV_CRN, cfg)
    x_local, x_global, treatment = batch_from_sim(cfg, 2, seed=4,
                                                  intervention=5)

    def run():
        leaves = store.bind(T.Tape(record=False))
        out = model.rollout(leaves, x_local, x_global, treatment, "train",
                            rng=Rng(derive_seed(9, "roll")))
        return out.stacked("y_hat"), out.stacked("x_loc_hat")

    y1, x1 = run()
    y2, x2 = run()
    assert np.array_equal(y1, y2)
    assert np.array_equal(x1, x2)


def test_identical_episodes_share_weights_in_batch():
    cfg = small_cfg()
    model, _, leaves = bound_model(ModelVariant.TGV_CRN, cfg)
    x_local, x_global, treatment = batch_from_sim(cfg, 1, seed=5,
                                                  intervention=7)
    xb = np.repeat(x_local, 2, axis=0)
    gb = np.repeat(x_global, 2, axis=0)
    ab = np.repeat(treatment, 2, axis=0)
    out = model.rollout(leaves, xb, gb, ab, "infer")
    y = out.stacked("y_hat")
    xh = out.stacked("x_loc_hat")
    assert np.array_equal(y[0], y[1])
    assert np.array_equal(xh[0], xh[1])


def test_trace_recon_recomputes_offline():
    cfg = small_cfg()
    model, _, leaves = bound_model(ModelVariant.TGV_CRN, cfg)
    x_local, x_global, treatment = batch_from_sim(cfg, 2, seed=6)
    out = model.rollout(leaves, x_local, x_global, treatment, "train",
                        rng=Rng(2), trace=True)
    assert len(out.traces["mu_pri"]) == cfg.n_steps
    assert len(out.traces["mu_enc"]) == cfg.burn_in
    nll = 0.0
    for t in range(cfg.burn_in):
        mu = out.traces["mu_dec"][t]
        sig = out.traces["sigma_dec"][t]
        target = x_local[:, t + 1, :, 4:5]
        resid = 0.5 * ((target - mu) / sig) ** 2
        nll += float(np.sum(resid + np.log(sig) + 0.5 * np.log(2 * np.pi)))
    assert abs(nll - float(out.recon_sum.array)) < 1e-9 * max(1.0, abs(nll))
    kl = 0.0
    for t in range(cfg.burn_in):
        mu_q, sig_q = out.traces["mu_enc"][t], out.traces["sigma_enc"][t]
        mu_p, sig_p = out.traces["mu_pri"][t], out.traces["sigma_pri"][t]
        kl += float(np.sum(np.log(sig_p / sig_q)
                           + (sig_q ** 2 + (mu_q - mu_p) ** 2)
                           / (2.0 * sig_p ** 2) - 0.5))
    assert abs(kl - float(out.kl_sum.array)) < 1e-9 * max(1.0, abs(kl))


def test_theory_proposal_trace_is_squashed():
    cfg = small_cfg()
    model, _, leaves = bound_model(ModelVariant.TGV_CRN, cfg)
    x_local, x_global, treatment = batch_from_sim(cfg, 2, seed=8)
    out = model.rollout(leaves, x_local, x_global, treatment, "infer",
                        trace=True)
    for mu in out.traces["mu_dec"]:
        assert np.max(np.abs(mu)) <= np.pi
    # predicted headings stay unit rows and the turn stays inside the limit
    xh = out.stacked("x_loc_hat")
    norms = np.sqrt((xh[..., 2:4] ** 2).sum(axis=3)) / cfg.speed
    assert np.max(np.abs(norms - 1.0)) < 1e-9
    assert np.max(np.abs(xh[..., 4])) <= cfg.max_turn_rad + 1e-12
    xg = out.stacked("x_g_hat")
    assert np.all(xg >= 0.0) and np.all(xg <= 1.0 + 1e-12)


def test_equivariance_under_agent_permutation():
    cfg = small_cfg()
    rng = np.random.default_rng(12)
    for variant in (ModelVariant.TGV_CRN, ModelVariant.GV_CRN):
        model, store, _ = bound_model(variant, cfg, seed=13)
        x_local, x_global, treatment = batch_from_sim(cfg, 2, seed=9,
                                                      intervention=6)
        for _ in range(3):
            perm = rng.permutation(cfg.n_agents)
            leaves = store.bind(T.Tape(record=False))
            base = model.rollout(leaves, x_local, x_global, treatment,
                                 "infer")
            leaves = store.bind(T.Tape(record=False))
            swap = model.rollout(leaves, x_local[:, :, perm], x_global,
                                 treatment, "infer")
            assert np.allclose(base.stacked("y_hat"), swap.stacked("y_hat"),
                               atol=1e-9)
            assert np.allclose(base.stacked("a_prob"),
                               swap.stacked("a_prob"), atol=1e-9)
            assert np.allclose(base.stacked("x_loc_hat")[:, :, perm],
                               swap.stacked("x_loc_hat"), atol=1e-9)


def test_baseline_rollout_shapes_and_determinism():
    cfg = small_cfg()
    model, store, leaves = bound_model(ModelVariant.RNN_BASELINE, cfg)
    x_local, x_global, treatment = batch_from_sim(cfg, 2, seed=10,
                                                  intervention=5)
    out = model.rollout(leaves, x_local, x_global, treatment, "train")
    assert out.stacked("y_hat").shape == (2, cfg.n_steps, 1)
    assert out.stacked("x_loc_hat").shape == (2, cfg.n_steps, cfg.n_agents, 5)
    assert out.stacked("x_g_hat").shape == (2, cfg.n_steps, 1)
    assert float(out.kl_sum.array) == 0.0
    assert out.elbo_steps == 0
    leaves = store.bind(T.Tape(record=False))
    rep = model.rollout(leaves, x_local, x_global, treatment, "train")
    assert np.array_equal(out.stacked("y_hat"), rep.stacked("y_hat"))


def test_scale_row_values():
    cfg = small_cfg()
    row = scale_row(cfg)
    assert row.shape == (5,)
    assert np.allclose(row, [1.0 / cfg.box_half, 1.0 / cfg.box_half,
                             1.0 / cfg.speed, 1.0 / cfg.speed,
                             1.0 / cfg.max_turn_rad], atol=0)


def test_init_store_deterministic_and_tagged():
    cfg = small_cfg()
    model = CrnModel(ModelVariant.TGV_CRN, cfg, SMALL)
    s1, s2 = model.init_store(3), model.init_store(3)
    assert s1.params.keys() == s2.params.keys()
    for name in s1.params:
        assert np.array_equal(s1.params[name].array, s2.params[name].array)
    s3 = model.init_store(4)
    assert any(not np.array_equal(s1.params[n].array, s3.params[n].array)
               for n in s1.params)
    assert s1.meta["variant"] == "tgv_crn"
    baseline = CrnModel(ModelVariant.RNN_BASELINE, cfg, SMALL)
    assert baseline.init_store(0).meta["variant"] == "rnn_baseline"


# treatment matrix and ITE prediction ---------------------------------------


def test_treatment_matrix_absorbing():
    a = treatment_matrix(3, 6, 2)
    assert a.shape == (3, 6)
    assert np.array_equal(a[0], [0, 0, 1, 1, 1, 1])
    assert np.array_equal(treatment_matrix(2, 4, None), np.zeros((2, 4)))
    with pytest.raises(ContractError):
        treatment_matrix(1, 6, 6)
    with pytest.raises(ContractError):
        treatment_matrix(1, 6, -1)


def test_predict_ite_arm_layout():
    cfg = small_cfg()
    model, store, _ = bound_model(ModelVariant.TGV_CRN, cfg)
    x_local, x_global, _ = batch_from_sim(cfg, 3, seed=20)
    out = predict_ite(model, store, x_local, x_global, chunk=2)
    arms = cfg.intervention_steps
    assert out["arms"] == arms + [None]
    n_arms = len(arms) + 1
    assert out["y_all"].shape == (3, n_arms, cfg.n_steps)
    assert out["a_all"].shape == (3, n_arms, cfg.n_steps)
    assert out["y_final"].shape == (3, n_arms)
    assert out["tau_hat"].shape == (3, n_arms - 1)
    assert np.array_equal(out["y_final"], out["y_all"][:, :, -1])
    assert np.allclose(out["tau_hat"],
                       out["y_final"][:, :-1] - out["y_final"][:, -1:],
                       atol=0)
    assert set(out["best_timing"]).issubset(set(arms))
    assert "x_loc_hat" not in out
    traced = predict_ite(model, store, x_local, x_global, chunk=2,
                         trace=True)
    assert traced["x_loc_hat"].shape == (3, n_arms, cfg.n_steps,
                                         cfg.n_agents, 5)
    assert traced["x_g_hat"].shape == (3, n_arms, cfg.n_steps, 1)


def test_predict_ite_chunking_invariant():
    cfg = small_cfg()
    model, store, _ = bound_model(ModelVariant.TGV_CRN, cfg, seed=21)
    x_local, x_global, _ = batch_from_sim(cfg, 5, seed=21)
    one = predict_ite(model, store, x_local, x_global, chunk=5)
    two = predict_ite(model, store, x_local, x_global, chunk=2)
    assert np.array_equal(one["y_all"], two["y_all"])
    assert np.array_equal(one["best_timing"], two["best_timing"])


def test_predict_ite_deterministic_and_mc_seeded():
    cfg = small_cfg()
    model, store, _ = bound_model(ModelVariant.TGV_CRN, cfg, seed=22)
    x_local, x_global, _ = batch_from_sim(cfg, 2, seed=22)
    a = predict_ite(model, store, x_local, x_global)
    b = predict_ite(model, store, x_local, x_global)
    assert np.array_equal(a["y_all"], b["y_all"])
    mc1 = predict_ite(model, store, x_local, x_global, mc_samples=3, seed=5)
    mc2 = predict_ite(model, store, x_local, x_global, mc_samples=3, seed=5)
    assert np.array_equal(mc1["y_all"], mc2["y_all"])
    mc3 = predict_ite(model, store, x_local, x_global, mc_samples=3, seed=6)
    assert not np.array_equal(mc1["y_all"], mc3["y_all"])
    assert not np.array_equal(a["y_all"], mc1["y_all"])


def test_predict_ite_zero_params_gives_zero_effect():
    cfg = small_cfg()
    model = CrnModel(ModelVariant.TGV_CRN, cfg, SMALL)
    store = zero_store(model)
    x_local, x_global, _ = batch_from_sim(cfg, 2, seed=23)
    out = predict_ite(model, store, x_local, x_global)
    assert np.array_equal(out["y_final"], np.full_like(out["y_final"], 0.5))
    assert np.array_equal(out["tau_hat"], np.zeros_like(out["tau_hat"]))
    # argmax ties resolve to the earliest intervention step
    assert np.all(out["best_timing"] == cfg.intervention_steps[0])


def test_predict_ite_only_burn_in_prefix_matters():
    cfg = small_cfg()
    model, store, _ = bound_model(ModelVariant.TGV_CRN, cfg, seed=24)
    x_local, x_global, _ = batch_from_sim(cfg, 2, seed=24)
    noisy_l = x_local.copy()
    noisy_g = x_global.copy()
    noisy_l[:, cfg.burn_in:] = 123.0
    noisy_g[:, cfg.burn_in:] = 0.77
    a = predict_ite(model, store, x_local, x_global)
    b = predict_ite(model, store, noisy_l, noisy_g)
    assert np.array_equal(a["y_all"], b["y_all"])
    assert np.array_equal(a["tau_hat"], b["tau_hat"])
