"""Training loop: parameter-freeze at lr=0 (warmup-adjusted), exact
checkpoint resume, metrics log schema, name-scoped predictor loading, LM
pretraining, and divergence handling."""

import json
import math
import os

import numpy as np
import pytest

from fnt import checkpoint as ck
from fnt import corpus as cp
from fnt import model as md
from fnt import tensor as tt
from fnt import training as tr
from fnt.errors import DivergenceError, FormatError, ValidationError


def small_config(**over):
    base = dict(
        vocab_size=10, feature_dim=6, model_dim=8, heads=2, ffn_dim=16, encoder_layers=1,
        subsample_factor=2, blank_hidden=8, blank_layers=1, joint_dim=8, predictor_dim=8,
        predictor_heads=2, predictor_ffn_dim=16, predictor_layers=1, context_dim=8,
        context_layers=1, context_heads=2, context_ffn_dim=16,
    )
    base.update(over)
    return md.ModelConfig(**base)


@pytest.fixture
def corpus_dir(tmp_path):
    spec = cp.CorpusSpec(seed=9, vocab_size=10, sessions=6, dev_sessions=2, test_sessions=2,
                         utterances_per_session=3, tokens_per_utt=(2, 4), frames_per_token=(4, 6),
                         feature_dim=6, confusable_pairs=1, entity_tokens=2, topics=2)
    cp.gen_corpus(spec, tmp_path / "corpus")
    return tmp_path / "corpus"


@pytest.fixture
def items(corpus_dir):
    return tr.build_train_items(cp.load_split(corpus_dir, "train"))


def test_train_config_validation():
    with pytest.raises(ValidationError):
        tr.TrainConfig(seed=0, lr=0).validate()
    with pytest.raises(ValidationError):
        tr.TrainConfig(seed=0, steps=0).validate()
    with pytest.raises(ValidationError):
        tr.TrainConfig.from_dict({"seed": 0, "bogus": 1})


def test_one_step_with_tiny_lr_and_no_warmup_keeps_checksum_close(items):
    """lr -> 0 limit: parameters unchanged (checksum equality at lr=0 is
    approximated by scaling the update to exactly zero via warmup=0, lr
    epsilon is disallowed by validation, so drive the update to zero
    through a zero-gradient scale)."""
    m = md.build_model(small_config(), seed=1)
    before = m.params.checksum()
    opt = tr.Adam(list(m.params), lr=1e-3)
    # no backward ran: all grads are None, step must be a no-op
    opt.step()
    assert m.params.checksum() == before


def test_adam_moves_parameters(items):
    m = md.build_model(small_config(), seed=1)
    before = m.params.checksum()
    tc = tr.TrainConfig(seed=1, steps=2, batch_size=2, augment=False)
    tr.train(m, items, tc)
    assert m.params.checksum() != before


def test_metrics_log_schema(tmp_path, items):
    m = md.build_model(small_config(), seed=2)
    path = tmp_path / "metrics.jsonl"
    tc = tr.TrainConfig(seed=2, steps=3, batch_size=2, augment=False)
    tr.train(m, items, tc, metrics=tr.MetricsLog(str(path)))
    records = tr.MetricsLog.read(str(path))
    assert len(records) == 3
    for i, rec in enumerate(records, 1):
        assert rec["step"] == i
        for key in ("loss_total", "loss_rnnt", "loss_lm", "loss_ctc", "beta", "lr"):
            assert key in rec
        assert math.isfinite(rec["loss_total"])
    # append-only: a second run extends the file
    tr.train(md.build_model(small_config(), seed=3), items,
             tr.TrainConfig(seed=3, steps=1, batch_size=1, augment=False),
             metrics=tr.MetricsLog(str(path)))
    assert len(tr.MetricsLog.read(str(path))) == 4


def test_checkpoint_round_trip_bit_identical_posteriors(tmp_path, items):
    m = md.build_model(small_config(), seed=4)
    tc = tr.TrainConfig(seed=4, steps=2, batch_size=2, augment=False)
    path = str(tmp_path / "m.lfck")
    tr.train(m, items, tc, ckpt_path=path)
    m2, loaded = tr.load_model_from_checkpoint(path)
    feats = items[0].feats
    a = m.joint_log_posterior(feats, items[0].tokens).data
    b = m2.joint_log_posterior(feats, items[0].tokens).data
    assert np.array_equal(a, b)
    assert loaded["header"]["blank_index"] == 0
    assert loaded["header"]["conformer_order"]


def test_checkpoint_rejects_corruption(tmp_path, items):
    m = md.build_model(small_config(), seed=4)
    path = str(tmp_path / "m.lfck")
    ck.save_checkpoint(path, m)
    blob = open(path, "rb").read()
    open(path, "wb").write(b"XXXX" + blob[4:])
    with pytest.raises(FormatError):
        ck.load_checkpoint(path)


def test_resume_reproduces_loss_curve_exactly(tmp_path, items):
    cfgkw = dict(batch_size=2, lr=2e-3, warmup_steps=4, augment=True)
    # uninterrupted run: 8 steps
    m_full = md.build_model(small_config(), seed=5)
    log_full = tmp_path / "full.jsonl"
    tr.train(m_full, items, tr.TrainConfig(seed=5, steps=8, **cfgkw),
             metrics=tr.MetricsLog(str(log_full)))

    # interrupted run: 4 steps, checkpoint, resume to 8
    m_a = md.build_model(small_config(), seed=5)
    path = str(tmp_path / "mid.lfck")
    log_ab = tmp_path / "ab.jsonl"
    tr.train(m_a, items, tr.TrainConfig(seed=5, steps=4, **cfgkw),
             metrics=tr.MetricsLog(str(log_ab)), ckpt_path=path)
    m_b = md.build_model(small_config(), seed=5)
    tr.train(m_b, items, tr.TrainConfig(seed=5, steps=8, **cfgkw),
             metrics=tr.MetricsLog(str(log_ab)), resume=ck.load_checkpoint(path))

    full = [r["loss_total"] for r in tr.MetricsLog.read(str(log_full))]
    ab = [r["loss_total"] for r in tr.MetricsLog.read(str(log_ab))]
    assert ab == full
    assert m_b.params.checksum() == m_full.params.checksum()


def test_lambda_overrides_applied(items):
    m = md.build_model(small_config(), seed=6)
    tc = tr.TrainConfig(seed=6, steps=1, batch_size=1, lambda_lm=0.0, lambda_ctc=0.0, augment=False)
    tr.train(m, items, tc)
    assert m.config.lambda_lm == 0.0
    assert m.config.lambda_ctc == 0.0


def test_divergence_aborts_with_exit_state(tmp_path, items):
    m = md.build_model(small_config(), seed=7)
    m.params["ctc_proj.w"].data[0, 0] = np.nan  # blown-up parameter mid-run
    tc = tr.TrainConfig(seed=7, steps=2, batch_size=1, augment=False)
    with pytest.raises(DivergenceError):
        tr.train(m, items, tc, ckpt_path=str(tmp_path / "diverged.lfck"))
    assert os.path.exists(tmp_path / "diverged.lfck")


# -------------------------------------------------------------- lm pretrain

def test_lm_pretrain_improves_held_out_perplexity(corpus_dir):
    recs = cp.load_split(corpus_dir, "train", with_features=False)
    seqs = [r.tokens for r in recs]
    dev = [r.tokens for r in cp.load_split(corpus_dir, "dev", with_features=False)]
    fresh = md.build_model(small_config(), seed=8)
    before = tr.evaluate_perplexity(fresh, dev)
    assert before < fresh.config.vocab_size * 2  # sanity: finite
    tc = tr.TrainConfig(seed=8, steps=120, batch_size=4, lr=3e-3, warmup_steps=20, augment=False)
    tr.lm_pretrain(fresh, seqs, tc)
    after = tr.evaluate_perplexity(fresh, dev)
    assert after < before


def test_lm_pretrain_touches_only_predictor(corpus_dir, tmp_path):
    recs = cp.load_split(corpus_dir, "train", with_features=False)
    seqs = [r.tokens for r in recs]
    m = md.build_model(small_config(), seed=9)
    frozen_names = [p.name for p in m.params if not p.name.startswith("vocab_pred.")]
    before = {n: m.params[n].data.copy() for n in frozen_names}
    tc = tr.TrainConfig(seed=9, steps=10, batch_size=2, augment=False)
    path = str(tmp_path / "lm.lfck")
    tr.lm_pretrain(m, seqs, tc, ckpt_path=path)
    for n in frozen_names:
        assert np.array_equal(before[n], m.params[n].data), n

    # name-scoped load into a fresh model: predictor matches, rest fresh
    fresh = md.build_model(small_config(), seed=9)
    fresh_enc = fresh.params["encoder.layer0.attn.q.w"].data.copy()
    names = tr.load_predictor_weights(fresh, path)
    assert all(n.startswith("vocab_pred.") for n in names)
    assert np.array_equal(fresh.params["vocab_pred.head.w"].data, m.params["vocab_pred.head.w"].data)
    assert np.array_equal(fresh.params["encoder.layer0.attn.q.w"].data, fresh_enc)


def test_load_predictor_rejects_checkpoint_without_predictor(tmp_path, items):
    ct = md.build_model(small_config(architecture="ct"), seed=10)
    path = str(tmp_path / "ct.lfck")
    ck.save_checkpoint(path, ct)
    m = md.build_model(small_config(), seed=10)
    with pytest.raises(ValidationError):
        tr.load_predictor_weights(m, path)


def test_evaluate_wer_aggregates_per_session(corpus_dir):
    m = md.build_model(small_config(), seed=11)
    recs = cp.load_split(corpus_dir, "test")
    total, per_session, hyps = tr.evaluate_wer(m, recs, mode="gt")
    assert total.ref_len == sum(len(r.tokens) for r in recs)
    assert set(per_session) == {r.session_id for r in recs}
    assert len(hyps) == len(recs)
    summed = sum((r.errors for r in per_session.values()))
    assert summed == total.errors


def test_adam_lr_zero_one_step_keeps_checksum(items):
    """lr=0 optimizer step with real gradients leaves every parameter
    untouched (the run-config validator requires lr>0; the optimizer
    itself honors the degenerate case)."""
    m = md.build_model(small_config(), seed=12)
    before = m.params.checksum()
    opt = tr.Adam(list(m.params), lr=0.0)
    m.params.zero_grads()
    with tt.GradTape() as tape:
        out = m.forward_losses(items[0].feats, items[0].tokens)
        tape.backward(out["total"])
    opt.step()
    assert m.params.checksum() == before
