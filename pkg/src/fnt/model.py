"""Transducer models: the conformer-transducer baseline and the modified
factorized transducer with blank/vocabulary separation, CTC-projected
encoder scores, and learnable-weight fusion of the LM branch.

Index conventions, asserted everywhere: transducer blank and CTC blank sit
at index 0 of their output spaces; the vocabulary predictor's output is
V+1 wide with the utterance-boundary symbol at index 0 and tokens 1..V
above it, mirroring the CTC layout. Fusion consumes the V token columns
of both.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import longform as lf
from . import losses as ls
from . import tensor as tt
from .blocks import (
    ConformerLayer,
    Linear,
    LstmStack,
    Subsampler,
    TransformerStack,
    add_positions,
    causal_mask,
)
from .errors import NumericsError, ValidationError
from .params import ParamSet

BLANK_ID = 0
BOUNDARY_ID = 0  # end-of-utterance column of the LM head

ARCHITECTURES = ("ct", "mfnt")
SENTENCE_MODES = ("off", "output_add", "prelinear_concat", "both")
CONTEXT_MODES = ("joint", "frozen_external")


@dataclass
class ModelConfig:
    vocab_size: int
    feature_dim: int
    architecture: str = "mfnt"
    model_dim: int = 32
    heads: int = 2
    ffn_dim: int = 64
    conv_kernel: int = 3
    encoder_layers: int = 2
    subsample_factor: int = 2
    blank_hidden: int = 32
    blank_layers: int = 1
    joint_dim: int = 32
    predictor_dim: int = 32
    predictor_heads: int = 2
    predictor_ffn_dim: int = 64
    predictor_layers: int = 2
    lambda_lm: float = 0.5
    lambda_ctc: float = 0.1
    sentence_mode: str = "off"
    token_level: bool = False
    context_mode: str = "joint"
    context_dim: int = 32
    context_layers: int = 2
    context_heads: int = 2
    context_ffn_dim: int = 64
    renorm_output_add: bool = True
    dropout: float = 0.0

    def validate(self):
        if self.vocab_size < 2:
            raise ValidationError("vocab_size must be >= 2")
        if self.lambda_lm < 0 or self.lambda_ctc < 0:
            raise ValidationError("lambda weights must be >= 0")
        if self.architecture not in ARCHITECTURES:
            raise ValidationError(f"architecture must be one of {ARCHITECTURES}")
        if self.sentence_mode not in SENTENCE_MODES:
            raise ValidationError(f"sentence_mode must be one of {SENTENCE_MODES}")
        if self.context_mode not in CONTEXT_MODES:
            raise ValidationError(f"context_mode must be one of {CONTEXT_MODES}")
        if self.subsample_factor not in (1, 2, 4):
            raise ValidationError("subsample_factor must be 1, 2, or 4")
        if self.architecture == "ct" and self.text_integration:
            raise ValidationError("text integration requires the factorized architecture")
        return self

    @property
    def text_integration(self):
        return self.sentence_mode != "off" or self.token_level

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


class _EncoderMixin:
    """Shared conformer encoder: subsample, positions, conformer stack."""

    def _build_encoder(self, cfg):
        self.subsampler = Subsampler(
            self.params, "encoder.subsample", cfg.feature_dim, cfg.model_dim, cfg.subsample_factor
        )
        self.encoder_layers = [
            ConformerLayer(
                self.params, f"encoder.layer{i}", cfg.model_dim, cfg.heads, cfg.ffn_dim, cfg.conv_kernel
            )
            for i in range(cfg.encoder_layers)
        ]

    def encode(self, feats):
        """Isolated utterance encoding: subsample, positions, conformer stack."""
        h = self.subsampler(tt.Tensor(feats))
        h = add_positions(h, start=0)
        for layer in self.encoder_layers:
            h = layer(h)
        return h

    def encode_utterance(self, feats, history=None, block_history=False):
        if history is not None and history.speech_active:
            window = history.speech_window()
            if window:
                return lf.longform_speech_encode(self, window, feats, block_history=block_history)
        return self.encode(feats)


def _joint_table(joint_enc, joint_pred, joint_out, h, z, out_dim):
    """tanh-fused additive joint over all (frame, prefix) pairs."""
    t, u = h.shape[0], z.shape[0]
    a = tt.reshape(joint_enc(h), (t, 1, -1))
    b = tt.reshape(joint_pred(z), (1, u, -1))
    mixed = tt.tanh(a + b)
    j = mixed.shape[2]
    flat = tt.reshape(mixed, (t * u, j))
    out = joint_out(flat)
    return tt.reshape(out, (t, u, out_dim)) if out_dim > 1 else tt.reshape(out, (t, u))


class MfntModel(_EncoderMixin):
    """Factorized transducer: blank branch, LM branch, CTC projection, fusion."""

    architecture = "mfnt"

    def __init__(self, config, seed):
        config.validate()
        if config.architecture != "mfnt":
            raise ValidationError("MfntModel requires architecture='mfnt'")
        self.config = config
        self.seed = seed
        self.params = ParamSet(seed)
        cfg = config
        self._build_encoder(cfg)
        v = cfg.vocab_size

        self.ctc_proj = Linear(self.params, "ctc_proj", cfg.model_dim, v + 1)

        self.blank_embed = self.params.normal(
            "blank_pred.embed", (v + 1, cfg.blank_hidden), 1.0 / math.sqrt(cfg.blank_hidden)
        )
        self.blank_lstm = LstmStack(
            self.params, "blank_pred.lstm", cfg.blank_hidden, cfg.blank_hidden, cfg.blank_layers
        )
        self.joint_enc = Linear(self.params, "joint.enc", cfg.model_dim, cfg.joint_dim)
        self.joint_pred = Linear(self.params, "joint.pred", cfg.blank_hidden, cfg.joint_dim)
        self.joint_out = Linear(self.params, "joint.out", cfg.joint_dim, 1)

        self.pred_embed = self.params.normal(
            "vocab_pred.embed", (v + 1, cfg.predictor_dim), 1.0 / math.sqrt(cfg.predictor_dim)
        )
        self.pred_stack = TransformerStack(
            self.params,
            "vocab_pred.encoder",
            cfg.predictor_layers,
            cfg.predictor_dim,
            cfg.predictor_heads,
            cfg.predictor_ffn_dim,
            cross_attention=cfg.token_level,
            ctx_dim=cfg.context_dim,
        )
        self.lm_head = Linear(self.params, "vocab_pred.head", cfg.predictor_dim, v + 1)

        self.beta = self.params.constant("fusion.beta", 1.0)

        self.context_encoder = None
        self.context_table = None
        if cfg.text_integration and cfg.context_mode == "joint":
            self.context_encoder = lf.ContextEncoder(
                self.params, "context", v, cfg.context_dim, cfg.context_layers,
                cfg.context_heads, cfg.context_ffn_dim,
            )
        if cfg.sentence_mode in ("output_add", "both"):
            self.sentence_out = Linear(
                self.params, "sentence_fusion.out", 2 * cfg.context_dim, v + 1, zero_init=True
            )
        if cfg.sentence_mode in ("prelinear_concat", "both"):
            self.sentence_proj = Linear(
                self.params, "sentence_fusion.proj", 2 * cfg.context_dim, cfg.predictor_dim
            )
            # extra head columns for the projected context; zero so a fresh
            # long-form model reproduces the baseline
            self.head_ctx = Linear(
                self.params, "sentence_fusion.head_ctx", cfg.predictor_dim, v + 1, zero_init=True
            )

    # -- long-form wiring ------------------------------------------------
    def attach_context_table(self, table):
        if self.config.context_mode != "frozen_external":
            raise ValidationError("model not configured for a frozen context table")
        if table.dim != self.config.context_dim:
            raise ValidationError(
                f"context table dim {table.dim} != configured context_dim {self.config.context_dim}"
            )
        self.context_table = table

    def context_for(self, history):
        """Context embeddings C and pooled c~ for one utterance, or (None, None)."""
        cfg = self.config
        if history is None or not cfg.text_integration or not history.text_active:
            return None, None
        window = history.text_window()
        if cfg.context_mode == "joint":
            c = self.context_encoder(window)
        else:
            if self.context_table is None:
                raise ValidationError("frozen_external context mode needs attach_context_table()")
            c = self.context_table(window, cfg.vocab_size)
        c_tilde = None
        if cfg.sentence_mode != "off":
            c_tilde = tt.reshape(tt.mean_std_pool(c), (1, 2 * cfg.context_dim))
        return c, c_tilde

    # -- branches ----------------------------------------------------------
    def ctc_logprobs(self, h):
        return tt.log_softmax(self.ctc_proj(h), axis=-1)

    def blank_logits(self, h, y):
        ids = np.concatenate([[BLANK_ID], np.asarray(y, dtype=np.int64)])
        z = self.blank_lstm(tt.embedding(self.blank_embed, ids))
        return _joint_table(self.joint_enc, self.joint_pred, self.joint_out, h, z, 1)

    def predictor_states(self, y, context=None):
        ids = np.concatenate([[BLANK_ID], np.asarray(y, dtype=np.int64)])
        x = tt.embedding(self.pred_embed, ids)
        x = add_positions(x)
        mask = causal_mask(len(ids))
        if self.config.token_level and context is not None:
            return self.pred_stack(x, self_mask=mask, context=context)
        # history window disabled: cross-attention sublayers are bypassed
        for layer in self.pred_stack.layers:
            x = _layer_no_cross(layer, x, mask)
        return self.pred_stack.ln_out(x)

    def lm_logprobs(self, p, c_tilde=None):
        """LM branch output: (L+1) x (V+1) log-distributions (boundary at 0)."""
        cfg = self.config
        hidden = tt.relu(p)
        logits = self.lm_head(hidden)
        if c_tilde is not None and cfg.sentence_mode in ("prelinear_concat", "both"):
            extra = self.head_ctx(tt.relu(self.sentence_proj(c_tilde)))
            logits = logits + extra  # broadcast 1 x (V+1) over positions
        z = tt.log_softmax(logits, axis=-1)
        if c_tilde is not None and cfg.sentence_mode in ("output_add", "both"):
            z = z + self.sentence_out(c_tilde)
            if cfg.renorm_output_add:
                z = tt.log_softmax(z, axis=-1)
        return z

    def lm_forward(self, y, history=None):
        c, c_tilde = self.context_for(history)
        p = self.predictor_states(y, context=c)
        return self.lm_logprobs(p, c_tilde)

    def fused_log_posterior(self, z_b, z_v_t, z_v_l):
        """softmax over [blank logit, V fused vocabulary scores] per (t, l)."""
        t, u = z_b.shape
        v = self.config.vocab_size
        enc_part = tt.reshape(z_v_t[:, 1:], (t, 1, v))
        lm_part = tt.reshape(z_v_l[:, 1:], (1, u, v))
        z_v = enc_part + self.beta * lm_part
        pre = tt.concat([tt.reshape(z_b, (t, u, 1)), z_v], axis=2)
        return tt.log_softmax(pre, axis=2)

    def joint_log_posterior(self, feats, y, history=None):
        h = self.encode_utterance(feats, history)
        c, c_tilde = self.context_for(history)
        z_v_t = self.ctc_logprobs(h)
        p = self.predictor_states(y, context=c)
        z_v_l = self.lm_logprobs(p, c_tilde)
        z_b = self.blank_logits(h, y)
        return self.fused_log_posterior(z_b, z_v_t, z_v_l)

    def forward_losses(self, feats, y, history=None, rng=None):
        """Composite loss and its components for one utterance."""
        cfg = self.config
        y = [int(t) for t in y]
        h = self.encode_utterance(feats, history)
        c, c_tilde = self.context_for(history)
        if rng is not None and cfg.dropout > 0:
            h = tt.dropout(h, cfg.dropout, rng)
        z_v_t = self.ctc_logprobs(h)
        p = self.predictor_states(y, context=c)
        if rng is not None and cfg.dropout > 0:
            p = tt.dropout(p, cfg.dropout, rng)
        z_v_l = self.lm_logprobs(p, c_tilde)
        z_b = self.blank_logits(h, y)
        log_post = self.fused_log_posterior(z_b, z_v_t, z_v_l)

        l_rnnt = ls.transducer_loss(log_post, y)
        lm_targets = np.asarray(y + [BOUNDARY_ID], dtype=np.int64)
        l_lm = ls.lm_loss(z_v_l, lm_targets)
        l_ctc, feasible = ls.ctc_loss(z_v_t, y)
        total = l_rnnt + tt.scale(l_lm, cfg.lambda_lm)
        if feasible:
            total = total + tt.scale(l_ctc, cfg.lambda_ctc)
        return {
            "total": total,
            "rnnt": l_rnnt,
            "lm": l_lm,
            "ctc": l_ctc if feasible else None,
            "ctc_feasible": feasible,
        }

    # -- stepwise decoding hooks ----------------------------------------
    def utterance_decoder(self, feats, history=None):
        return _MfntUtteranceDecoder(self, feats, history)


def _layer_no_cross(layer, x, mask):
    """Run a transformer layer with its cross-attention sublayer bypassed."""
    if x.shape[0] == 0:
        raise NumericsError("transformer_layer: zero-length input")
    h = layer.ln1(x)
    x = x + layer.attn(h, h, h, mask)
    h = layer.ln2(x)
    return x + layer.ffn(h)


class _MfntUtteranceDecoder:
    """Per-utterance cached state for frame-synchronous decoding."""

    def __init__(self, model, feats, history):
        self.model = model
        h = model.encode_utterance(feats, history)
        self.h = h.data
        self.z_v_t = model.ctc_logprobs(h).data
        self.c, self.c_tilde = model.context_for(history)
        self.beta_val = float(model.beta.data)
        self.n_frames = self.h.shape[0]
        # per-frame encoder joint contribution, precomputed
        self._joint_enc = model.joint_enc(h).data

    def start(self):
        state = _DecodeState(tokens=(), lstm=self.model.blank_lstm.init_state())
        row = tt.embedding(self.model.blank_embed, np.array([BLANK_ID]))
        out, state.lstm = self.model.blank_lstm.step(row, state.lstm)
        state.blank_h = out
        state.lm_row = self._lm_row(state.tokens)
        return state

    def advance(self, state, tok):
        new = _DecodeState(tokens=state.tokens + (int(tok),), lstm=state.lstm)
        row = tt.embedding(self.model.blank_embed, np.array([int(tok)]))
        out, new.lstm = self.model.blank_lstm.step(row, new.lstm)
        new.blank_h = out
        new.lm_row = self._lm_row(new.tokens)
        return new

    def _lm_row(self, tokens):
        p = self.model.predictor_states(list(tokens), context=self.c)
        z = self.model.lm_logprobs(p, self.c_tilde)
        return z.data[-1]

    def logprobs(self, state, t):
        """(V+1) log-posterior at frame t for the state's prefix: blank at 0."""
        mixed = np.tanh(self._joint_enc[t] + self.model.joint_pred(state.blank_h).data[0])
        z_b = float(mixed @ self.model.joint_out.w.data[:, 0] + self.model.joint_out.b.data[0])
        fused = self.z_v_t[t, 1:] + self.beta_val * state.lm_row[1:]
        pre = np.concatenate([[z_b], fused])
        m = pre.max()
        return pre - (m + np.log(np.exp(pre - m).sum()))


class _DecodeState:
    __slots__ = ("tokens", "lstm", "blank_h", "lm_row")

    def __init__(self, tokens, lstm):
        self.tokens = tokens
        self.lstm = lstm
        self.blank_h = None
        self.lm_row = None


class CtModel(_EncoderMixin):
    """Vanilla conformer transducer: additive tanh joint over V+1 symbols."""

    architecture = "ct"

    def __init__(self, config, seed):
        config.validate()
        if config.architecture != "ct":
            raise ValidationError("CtModel requires architecture='ct'")
        self.config = config
        self.seed = seed
        self.params = ParamSet(seed)
        cfg = config
        self._build_encoder(cfg)
        v = cfg.vocab_size
        self.pred_embed = self.params.normal(
            "predictor.embed", (v + 1, cfg.blank_hidden), 1.0 / math.sqrt(cfg.blank_hidden)
        )
        self.pred_lstm = LstmStack(
            self.params, "predictor.lstm", cfg.blank_hidden, cfg.blank_hidden, cfg.blank_layers
        )
        self.joint_enc = Linear(self.params, "joint.enc", cfg.model_dim, cfg.joint_dim)
        self.joint_pred = Linear(self.params, "joint.pred", cfg.blank_hidden, cfg.joint_dim)
        self.joint_out = Linear(self.params, "joint.out", cfg.joint_dim, v + 1)

    def joint_log_posterior(self, feats, y, history=None):
        h = self.encode_utterance(feats, history)
        ids = np.concatenate([[BLANK_ID], np.asarray(y, dtype=np.int64)])
        z = self.pred_lstm(tt.embedding(self.pred_embed, ids))
        table = _joint_table(self.joint_enc, self.joint_pred, self.joint_out, h, z, self.config.vocab_size + 1)
        return tt.log_softmax(table, axis=2)

    def forward_losses(self, feats, y, history=None, rng=None):
        y = [int(t) for t in y]
        log_post = self.joint_log_posterior(feats, y, history)
        l_rnnt = ls.transducer_loss(log_post, y)
        return {"total": l_rnnt, "rnnt": l_rnnt, "lm": None, "ctc": None, "ctc_feasible": True}

    def utterance_decoder(self, feats, history=None):
        return _CtUtteranceDecoder(self, feats, history)


class _CtUtteranceDecoder:
    def __init__(self, model, feats, history):
        self.model = model
        h = model.encode_utterance(feats, history)
        self.h = h.data
        self.n_frames = self.h.shape[0]
        self._joint_enc = model.joint_enc(h).data

    def start(self):
        state = _DecodeState(tokens=(), lstm=self.model.pred_lstm.init_state())
        row = tt.embedding(self.model.pred_embed, np.array([BLANK_ID]))
        out, state.lstm = self.model.pred_lstm.step(row, state.lstm)
        state.blank_h = out
        return state

    def advance(self, state, tok):
        new = _DecodeState(tokens=state.tokens + (int(tok),), lstm=state.lstm)
        row = tt.embedding(self.model.pred_embed, np.array([int(tok)]))
        out, new.lstm = self.model.pred_lstm.step(row, new.lstm)
        new.blank_h = out
        return new

    def logprobs(self, state, t):
        mixed = np.tanh(self._joint_enc[t] + self.model.joint_pred(state.blank_h).data[0])
        pre = mixed @ self.model.joint_out.w.data + self.model.joint_out.b.data
        m = pre.max()
        return pre - (m + np.log(np.exp(pre - m).sum()))


def build_model(config, seed):
    config.validate()
    if config.architecture == "ct":
        return CtModel(config, seed)
    return MfntModel(config, seed)
