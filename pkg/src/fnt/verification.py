"""Verification harnesses: finite-difference gradient suite over every
block plus the end-to-end micro-model, and brute-force oracle fuzzing for
the lattice losses and the corpus history signal. Shared by the CLI
commands and the acceptance tests. All gradient work runs in float64.
"""

from __future__ import annotations

import numpy as np

from . import blocks as bk
from . import corpus as cp
from . import losses as ls
from . import tensor as tt
from .model import ModelConfig, build_model
from .params import ParamSet


def micro_model_config(vocab_size=4, feature_dim=4):
    return ModelConfig(
        vocab_size=vocab_size, feature_dim=feature_dim, model_dim=8, heads=2, ffn_dim=16,
        conv_kernel=3, encoder_layers=1, subsample_factor=2, blank_hidden=8, blank_layers=1,
        joint_dim=8, predictor_dim=8, predictor_heads=2, predictor_ffn_dim=16, predictor_layers=1,
        context_dim=8, context_layers=1, context_heads=2, context_ffn_dim=16,
    )


def gradient_suite(seed=0, h=1e-5):
    """Max FD relative error per block and for the end-to-end micro-model."""
    report = {}
    with tt.dtype_scope("float64"):
        rng = np.random.default_rng(seed)

        def check(name, fn, params):
            report[name] = tt.grad_check(fn, params, h=h)["max_rel_err"]

        ps = ParamSet(seed)
        mha = bk.MultiHeadAttention(ps, "mha", 8, 2)
        q = tt.Parameter(rng.standard_normal((3, 8)), "q")
        k = tt.Parameter(rng.standard_normal((4, 8)), "k")
        v = tt.Parameter(rng.standard_normal((4, 8)), "v")
        mask = np.ones((3, 4), dtype=bool)
        mask[0, 1] = False
        check("attention", lambda: tt.sum_(tt.tanh(mha(q, k, v, mask))), [q, k, v] + list(ps))

        ps = ParamSet(seed + 1)
        layer = bk.TransformerLayer(ps, "tl", 8, 2, 16)
        x = tt.Parameter(rng.standard_normal((4, 8)), "x")
        check("transformer_layer",
              lambda: tt.sum_(tt.tanh(layer(x, self_mask=bk.causal_mask(4)))), [x] + list(ps))

        ps = ParamSet(seed + 2)
        xl = tt.Parameter(rng.standard_normal((4, 8)), "xl")
        ctx = tt.Parameter(rng.standard_normal((5, 6)), "ctx")
        layer_x = bk.TransformerLayer(ps, "tlx", 8, 2, 16, cross_attention=True, ctx_dim=6)
        # zero-init cross output projection has structurally zero gradients
        # upstream of it, so perturb it to exercise the cross path
        ps["tlx.cross.out.w"].data = rng.standard_normal((8, 8)) * 0.3
        check("transformer_layer_cross",
              lambda: tt.sum_(tt.tanh(layer_x(xl, self_mask=bk.causal_mask(4), context=ctx))),
              [xl, ctx] + list(ps))

        ps = ParamSet(seed + 3)
        conf = bk.ConformerLayer(ps, "cf", 8, 2, 16, 3)
        xc = tt.Parameter(rng.standard_normal((5, 8)), "xc")
        check("conformer_layer", lambda: tt.sum_(tt.tanh(conf(xc))), [xc] + list(ps))

        ps = ParamSet(seed + 4)
        lstm = bk.LstmStack(ps, "lstm", 4, 6, 2)
        xr = tt.Parameter(rng.standard_normal((3, 4)), "xr")
        check("lstm", lambda: tt.sum_(tt.tanh(lstm(xr))), [xr] + list(ps))

        ps = ParamSet(seed + 5)
        sub = bk.Subsampler(ps, "sub", 4, 8, 4)
        xs = tt.Parameter(rng.standard_normal((8, 4)), "xs")
        check("subsampler", lambda: tt.sum_(tt.tanh(sub(xs))), [xs] + list(ps))

        cpool = tt.Parameter(rng.standard_normal((5, 6)), "cpool")
        check("mean_std_pool", lambda: tt.sum_(tt.tanh(tt.mean_std_pool(cpool))), [cpool])

        model = build_model(micro_model_config(), seed + 6)
        feats = rng.standard_normal((6, 4))
        y = [1, 3]
        # deeper graph: gradient entries below ~1e-5 sit at the FD noise
        # floor, so they are held to absolute (1e-9) rather than relative error
        report["mfnt_micro_end_to_end"] = tt.grad_check(
            lambda: model.forward_losses(feats, y)["total"], list(model.params),
            h=h, rel_floor=1e-5,
        )["max_rel_err"]
    return report


def lattice_oracle_suite(seed=0, cases=500, t_max=4, u_max=3, v_max=3):
    """|DP - enumeration| for transducer and CTC over fuzzed tiny instances."""
    rng = np.random.default_rng(seed)
    td = cd = 0.0
    t_checked = c_checked = infeasible = 0
    with tt.dtype_scope("float64"):
        for _ in range(cases):
            t = int(rng.integers(1, t_max + 1))
            u = int(rng.integers(0, u_max + 1))
            v = int(rng.integers(2, v_max + 1))
            y = rng.integers(1, v + 1, size=u).tolist()

            joint = rng.standard_normal((t, u + 1, v + 1))
            joint = joint - np.log(np.exp(joint).sum(axis=2, keepdims=True))
            loss, _ = ls.transducer_loss(joint, y)
            ref = ls.brute_force_transducer_loss(joint, y)
            td = max(td, abs(loss - ref))
            t_checked += 1

            frames = rng.standard_normal((t, v + 1))
            frames = frames - np.log(np.exp(frames).sum(axis=1, keepdims=True))
            (closs, _), feasible = ls.ctc_loss(frames, y)
            cref = ls.brute_force_ctc_loss(frames, y)
            if np.isinf(cref):
                assert not feasible
                infeasible += 1
            else:
                cd = max(cd, abs(closs - cref))
                c_checked += 1
    return {
        "cases": cases,
        "transducer_max_abs_diff": float(td),
        "ctc_max_abs_diff": float(cd),
        "transducer_checked": t_checked,
        "ctc_checked": c_checked,
        "ctc_infeasible_agreed": infeasible,
    }


def corpus_oracle_suite(seed=0, sessions=60):
    """History-aware vs blind oracle error and entropy gap on a small default corpus."""
    spec = cp.CorpusSpec(seed=seed, sessions=sessions, dev_sessions=4, test_sessions=20)
    aware, blind, slots = cp.oracle_confusable_errors(spec, "test")
    h_neutral, h_with = cp.history_entropy_gap(spec, "test")
    ctrl = cp.CorpusSpec(seed=seed, sessions=sessions, dev_sessions=4, test_sessions=20,
                         entity_rate=0.0, confusable_pairs=0, entity_tokens=0)
    c_aware, c_blind, c_slots = cp.oracle_confusable_errors(ctrl, "test")
    return {
        "aware_error": float(aware),
        "blind_error": float(blind),
        "confusable_slots": int(slots),
        "aware_below_blind": bool(aware < blind),
        "entropy_without_history": float(h_neutral),
        "entropy_with_history": float(h_with),
        "entropy_drops": bool(h_with < h_neutral),
        "control_gap": float(abs(c_aware - c_blind)),
        "control_slots": int(c_slots),
    }
