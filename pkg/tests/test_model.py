"""Factorized model: branch contracts, fusion normalization, composite
loss, the C-T baseline, and the factorization separation properties."""

import numpy as np
import pytest

from fnt import losses as ls
from fnt import model as md
from fnt import tensor as tt
from fnt.errors import ValidationError
from fnt.verification import micro_model_config


def small_config(**over):
    base = dict(
        vocab_size=6, feature_dim=4, model_dim=8, heads=2, ffn_dim=16, encoder_layers=1,
        subsample_factor=2, blank_hidden=8, blank_layers=1, joint_dim=8, predictor_dim=8,
        predictor_heads=2, predictor_ffn_dim=16, predictor_layers=1, context_dim=8,
        context_layers=1, context_heads=2, context_ffn_dim=16,
    )
    base.update(over)
    return md.ModelConfig(**base)


@pytest.fixture
def feats(rng):
    return rng.standard_normal((10, 4))


def test_config_validation():
    with pytest.raises(ValidationError):
        small_config(vocab_size=1).validate()
    with pytest.raises(ValidationError):
        small_config(lambda_lm=-0.1).validate()
    with pytest.raises(ValidationError):
        small_config(architecture="rnn").validate()
    with pytest.raises(ValidationError):
        small_config(architecture="ct", token_level=True).validate()
    with pytest.raises(ValidationError):
        md.ModelConfig.from_dict({"vocab_size": 6, "feature_dim": 4, "bogus": 1})


def test_encode_zero_layers_is_positional_subsample(f64, rng, feats):
    m = md.build_model(small_config(encoder_layers=0), seed=1)
    out = m.encode(feats).data
    from fnt.blocks import add_positions

    expect = add_positions(m.subsampler(tt.Tensor(feats)), start=0).data
    assert np.array_equal(out, expect)


def test_encode_shapes_and_determinism(f64, rng):
    m = md.build_model(small_config(subsample_factor=4), seed=1)
    x = rng.standard_normal((16, 4))
    h1 = m.encode(x).data
    h2 = m.encode(x).data
    assert h1.shape[0] == 4
    assert np.array_equal(h1, h2)


def test_blank_branch_zero_joint_weights_gives_projected_bias(f64, rng, feats):
    m = md.build_model(small_config(), seed=2)
    m.params["joint.enc.w"].data = np.zeros_like(m.params["joint.enc.w"].data)
    m.params["joint.pred.w"].data = np.zeros_like(m.params["joint.pred.w"].data)
    b_joint = m.params["joint.enc.b"].data + m.params["joint.pred.b"].data
    expect = float(np.tanh(b_joint) @ m.params["joint.out.w"].data[:, 0] + m.params["joint.out.b"].data[0])
    h = m.encode(feats)
    z_b = m.blank_logits(h, [1, 2]).data
    assert np.allclose(z_b, expect, atol=1e-12)


def test_blank_branch_shape(f64, rng):
    m = md.build_model(small_config(), seed=2)
    h = m.encode(rng.standard_normal((6, 4)))  # T' = 3
    z_b = m.blank_logits(h, [1, 2])
    assert z_b.shape == (3, 3)


def test_vocab_predictor_causality(f64, rng):
    m = md.build_model(small_config(predictor_layers=2), seed=3)
    y1 = [1, 2, 3, 4]
    y2 = [1, 2, 5, 4]  # perturb position 2 (0-based)
    z1 = m.lm_forward(y1).data
    z2 = m.lm_forward(y2).data
    assert np.array_equal(z1[: 3], z2[: 3])  # rows 0..2 predict from prefixes before the change
    assert not np.allclose(z1[3], z2[3])


def test_vocab_predictor_rows_are_log_distributions(f64, rng):
    m = md.build_model(small_config(), seed=3)
    z = m.lm_forward([2, 4, 1]).data
    assert z.shape == (4, 7)
    assert np.abs(np.exp(z).sum(axis=1) - 1).max() <= 1e-9


def test_uniform_lm_configuration_perplexity(f64):
    """Zeroed head: uniform over the V+1 LM classes (V tokens + boundary)."""
    from fnt.training import evaluate_perplexity

    m = md.build_model(small_config(), seed=4)
    m.params["vocab_pred.head.w"].data = np.zeros_like(m.params["vocab_pred.head.w"].data)
    m.params["vocab_pred.head.b"].data = np.zeros_like(m.params["vocab_pred.head.b"].data)
    ppl = evaluate_perplexity(m, [[1, 2, 3], [4, 5]])
    assert abs(ppl - (m.config.vocab_size + 1)) <= 1e-4


def test_ctc_projection_zero_weights_uniform(f64, rng, feats):
    m = md.build_model(small_config(), seed=5)
    m.params["ctc_proj.w"].data = np.zeros_like(m.params["ctc_proj.w"].data)
    m.params["ctc_proj.b"].data = np.zeros_like(m.params["ctc_proj.b"].data)
    z = m.ctc_logprobs(m.encode(feats)).data
    assert np.allclose(z, -np.log(7), atol=1e-12)


def test_ctc_projection_rows_sum_to_one(rng, feats):
    m = md.build_model(small_config(), seed=5)
    z = m.ctc_logprobs(m.encode(feats)).data
    assert np.abs(np.exp(z).sum(axis=1) - 1).max() <= 1e-6


def test_ctc_projection_feeds_ctc_loss_oracle(f64, rng):
    m = md.build_model(small_config(), seed=5)
    z = m.ctc_logprobs(m.encode(rng.standard_normal((6, 4))))
    y = [1, 2]
    (loss, _), feasible = ls.ctc_loss(z.data, y)
    ref = ls.brute_force_ctc_loss(z.data, y)
    assert feasible and abs(loss - ref) <= 1e-9


def test_fusion_beta_zero_keeps_encoder_scores(f64, rng, feats):
    m = md.build_model(small_config(), seed=6)
    m.params["fusion.beta"].data = np.asarray(0.0)
    h = m.encode(feats)
    z_v_t = m.ctc_logprobs(h)
    p = m.predictor_states([1, 2])
    z_v_l = m.lm_logprobs(p)
    z_b = m.blank_logits(h, [1, 2])
    t, u = z_b.shape
    enc = z_v_t.data[:, 1:]
    lm = z_v_l.data[:, 1:]
    fused_pre = enc[:, None, :] + 0.0 * lm[None, :, :]
    expect = np.concatenate([z_b.data[:, :, None], fused_pre], axis=2)
    expect = expect - np.log(np.exp(expect).sum(axis=2, keepdims=True))
    got = m.fused_log_posterior(z_b, z_v_t, z_v_l).data
    assert np.abs(got - expect).max() <= 1e-12


def test_fusion_all_equal_inputs_uniform(f64):
    m = md.build_model(small_config(), seed=6)
    t, u, v = 3, 2, m.config.vocab_size
    z_b = tt.Tensor(np.zeros((t, u)))
    z_v_t = tt.Tensor(np.zeros((t, v + 1)))
    z_v_l = tt.Tensor(np.zeros((u, v + 1)))
    post = np.exp(m.fused_log_posterior(z_b, z_v_t, z_v_l).data)
    assert np.allclose(post, 1.0 / (v + 1), atol=1e-12)


def test_fusion_matches_scalar_reference(f64, rng):
    m = md.build_model(small_config(), seed=7)
    t, u, v = 3, 2, m.config.vocab_size
    z_b = rng.standard_normal((t, u))
    z_v_t = rng.standard_normal((t, v + 1))
    z_v_l = rng.standard_normal((u, v + 1))
    beta = float(m.params["fusion.beta"].data)
    got = m.fused_log_posterior(tt.Tensor(z_b), tt.Tensor(z_v_t), tt.Tensor(z_v_l)).data
    for i in range(t):
        for j in range(u):
            pre = np.empty(v + 1)
            pre[0] = z_b[i, j]
            for k in range(1, v + 1):
                pre[k] = z_v_t[i, k] + beta * z_v_l[j, k]
            ref = pre - np.log(np.exp(pre).sum())
            assert np.abs(got[i, j] - ref).max() <= 1e-6


def test_posterior_sums_to_one_float32(rng, feats):
    m = md.build_model(small_config(), seed=8)
    lp = m.joint_log_posterior(feats, [1, 3]).data
    assert np.abs(np.exp(lp).sum(axis=2) - 1).max() <= 1e-5


def test_total_loss_lambda_zero_equals_transducer(f64, rng, feats):
    m = md.build_model(small_config(lambda_lm=0.0, lambda_ctc=0.0), seed=9)
    out = m.forward_losses(feats, [1, 2])
    assert abs(out["total"].item() - out["rnnt"].item()) <= 1e-12


def test_total_loss_default_lambdas():
    cfg = md.ModelConfig(vocab_size=6, feature_dim=4)
    assert cfg.lambda_ctc == 0.1
    assert cfg.lambda_lm == 0.5


def test_total_loss_composition(f64, rng, feats):
    m = md.build_model(small_config(lambda_lm=0.5, lambda_ctc=0.1), seed=9)
    out = m.forward_losses(feats, [1, 2])
    expect = out["rnnt"].item() + 0.5 * out["lm"].item() + 0.1 * out["ctc"].item()
    assert abs(out["total"].item() - expect) <= 1e-9


def test_end_to_end_gradient_micro_model(f64, rng):
    m = md.build_model(micro_model_config(), seed=10)
    feats = rng.standard_normal((6, 4))
    # rel_floor 1e-5: sub-floor gradient entries are held to absolute error
    # (the FD noise floor at h=1e-5 sits above relative resolution there)
    report = tt.grad_check(lambda: m.forward_losses(feats, [1, 3])["total"], list(m.params),
                           rel_floor=1e-5)
    assert report["max_rel_err"] <= 1e-4


def test_beta_gradient_nonzero(rng, feats):
    m = md.build_model(small_config(), seed=11)
    with tt.GradTape() as tape:
        out = m.forward_losses(feats, [1, 2])
        tape.backward(out["total"])
    assert m.params["fusion.beta"].grad is not None
    assert abs(float(m.params["fusion.beta"].grad)) > 0


def test_factorization_separation_label_history_never_changes_encoder_scores(rng, feats):
    m = md.build_model(small_config(), seed=12)
    h = m.encode(feats)
    z1 = m.ctc_logprobs(h).data
    z2 = m.ctc_logprobs(m.encode(feats)).data
    assert np.array_equal(z1, z2)
    # and the LM branch moves while the encoder branch stays put
    za = m.lm_forward([1, 2, 3]).data
    zb = m.lm_forward([4, 5, 1]).data
    assert not np.allclose(za, zb)


def test_ct_joint_shape_and_loss_nonnegative(f64, rng, feats):
    m = md.build_model(small_config(architecture="ct"), seed=13)
    lp = m.joint_log_posterior(feats, [1, 2])
    assert lp.shape == (5, 3, 7)
    out = m.forward_losses(feats, [1, 2])
    assert out["total"].item() >= 0
    assert out["lm"] is None and out["ctc"] is None


def test_ct_gradient(f64, rng):
    cfg = micro_model_config()
    cfg.architecture = "ct"
    m = md.build_model(cfg, seed=14)
    feats = rng.standard_normal((6, 4))
    report = tt.grad_check(lambda: m.forward_losses(feats, [1, 3])["total"], list(m.params),
                           rel_floor=1e-5)
    assert report["max_rel_err"] <= 1e-4


def test_mfnt_forward_bit_identical_across_runs(rng, feats):
    a = md.build_model(small_config(), seed=15)
    b = md.build_model(small_config(), seed=15)
    la = a.forward_losses(feats, [1, 2])["total"].item()
    lb = b.forward_losses(feats, [1, 2])["total"].item()
    assert la == lb


def test_ct_overfits_single_utterance(rng):
    """Desk-scale sanity: the baseline drives one utterance's loss below
    0.01 within 500 steps."""
    from fnt.training import Adam

    cfg = small_config(architecture="ct")
    m = md.build_model(cfg, seed=0)
    feats = rng.standard_normal((10, 4)).astype(np.float32)
    y = [1, 3, 2]
    opt = Adam(list(m.params), lr=5e-3, warmup_steps=20)
    loss = np.inf
    for step in range(1, 501):
        m.params.zero_grads()
        with tt.GradTape() as tape:
            out = m.forward_losses(feats, y)
            tape.backward(out["total"])
        opt.step()
        loss = out["total"].item()
        if loss < 0.01:
            break
    assert loss < 0.01 and step <= 500


def test_backward_leaves_finite_grads_on_reachable_params(rng):
    m = md.build_model(small_config(), seed=18)
    feats = rng.standard_normal((10, 4))
    with tt.GradTape() as tape:
        out = m.forward_losses(feats, [1, 2])
        tape.backward(out["total"])
    touched = 0
    for p in m.params:
        if p.grad is not None:
            assert np.isfinite(p.grad).all(), p.name
            assert p.grad.shape == p.data.shape
            touched += 1
    assert touched == len(m.params)  # every parameter is reachable here
