"""Training loop (Adam with linear warmup), LM-only pretraining, metrics
logging, and WER/perplexity evaluation helpers.

Batch items are processed in a fixed order with sequential gradient
accumulation, so single-threaded runs are bit-deterministic and a resumed
checkpoint reproduces the interrupted loss curve exactly.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import checkpoint as ck
from . import corpus as cp
from . import decoding as dec
from . import losses as ls
from . import tensor as tt
from . import wer as wr
from .errors import DivergenceError, NumericsError, ValidationError
from .longform import SessionHistory
from .model import BOUNDARY_ID, build_model


@dataclass
class TrainConfig:
    seed: int
    steps: int = 500
    batch_size: int = 8
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-9
    warmup_steps: int = 200
    checkpoint_interval: int = 0  # 0: final checkpoint only
    precision: str = "float32"
    n_text: int = 0
    n_speech: int = 0
    lambda_lm: float = None  # override model config when set
    lambda_ctc: float = None
    augment: bool = True
    aug_freq_width: int = None  # defaults to feature_dim // 4
    aug_num_freq: int = 2
    aug_time_ratio: float = 0.05
    aug_num_time: int = 2
    single_thread: bool = True

    def validate(self):
        if self.lr <= 0:
            raise ValidationError("lr must be > 0")
        if self.steps < 1:
            raise ValidationError("steps must be >= 1")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if self.precision not in ("float32", "float64"):
            raise ValidationError("precision must be float32 or float64")
        if self.n_text < 0 or self.n_speech < 0:
            raise ValidationError("history windows must be >= 0")
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.98, eps=1e-9, warmup_steps=0):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.warmup_steps = warmup_steps
        self.t = 0
        self.m = {p.name: np.zeros_like(p.data) for p in self.params}
        self.v = {p.name: np.zeros_like(p.data) for p in self.params}

    def current_lr(self):
        if self.warmup_steps > 0:
            return self.lr * min(1.0, (self.t + 1) / self.warmup_steps)
        return self.lr

    def step(self):
        lr_t = self.current_lr()
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p in self.params:
            if p.grad is None:
                continue
            g = p.grad
            m = self.m[p.name]
            v = self.v[p.name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p.data = p.data - (lr_t * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)

    def load_state(self, state):
        self.t = state["t"]
        for name in self.m:
            if name in state["m"]:
                self.m[name] = np.asarray(state["m"][name], dtype=self.m[name].dtype).copy()
                self.v[name] = np.asarray(state["v"][name], dtype=self.v[name].dtype).copy()


class MetricsLog:
    """Append-only structured records, one JSON object per line."""

    def __init__(self, path):
        self.path = path
        if path is not None:
            os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)

    def write(self, **fields):
        if self.path is None:
            return
        with open(self.path, "a") as f:
            f.write(json.dumps(fields, sort_keys=True) + "\n")

    @staticmethod
    def read(path):
        records = []
        with open(path) as f:
            for line in f:
                line = line.strip()
                if line:
                    records.append(json.loads(line))
        return records


# ---------------------------------------------------------------------
# training data assembly
# ---------------------------------------------------------------------

@dataclass
class TrainItem:
    session_id: str
    utt_index: int
    feats: np.ndarray
    tokens: list
    prev_tokens: list = field(default_factory=list)  # all previous gt transcripts, oldest first
    prev_feats: list = field(default_factory=list)

    def history(self, n_text, n_speech):
        """Teacher-forced history windows (gt transcripts, true features)."""
        if n_text == 0 and n_speech == 0:
            return None
        h = SessionHistory(self.session_id, n_text=n_text, n_speech=n_speech)
        for toks, feats in zip(self.prev_tokens, self.prev_feats):
            h.append(toks, "gt", feats)
        return h


def build_train_items(records):
    """Attach per-utterance gt history to manifest records (grouped by session)."""
    sessions = cp.group_sessions(records)
    items = []
    for sid, utts in sessions.items():
        prev_t, prev_f = [], []
        for rec in utts:
            items.append(
                TrainItem(sid, rec.utt_index, rec.feats, list(rec.tokens), list(prev_t), list(prev_f))
            )
            prev_t = prev_t + [list(rec.tokens)]
            prev_f = prev_f + [rec.feats]
    return items


def _augment(feats, tc, feature_dim, rng):
    width = tc.aug_freq_width if tc.aug_freq_width is not None else feature_dim // 4
    return cp.spec_augment(feats, width, tc.aug_num_freq, tc.aug_time_ratio, tc.aug_num_time, rng)


# ---------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------

def train(model, items, tc, metrics=None, ckpt_path=None, resume=None):
    """Adam steps on the composite loss; returns the final checkpoint path.

    ``resume`` is a loaded checkpoint dict; parameters, optimizer moments,
    step counter, and RNG state are restored before continuing.
    """
    tc.validate()
    if not items:
        raise ValidationError("no training items")
    if tc.lambda_lm is not None and hasattr(model.config, "lambda_lm"):
        model.config.lambda_lm = tc.lambda_lm
    if tc.lambda_ctc is not None and hasattr(model.config, "lambda_ctc"):
        model.config.lambda_ctc = tc.lambda_ctc
    metrics = metrics or MetricsLog(None)
    opt = Adam(list(model.params), tc.lr, tc.beta1, tc.beta2, tc.adam_eps, tc.warmup_steps)
    start_step = 0
    if resume is not None:
        model.params.load_arrays(resume["params"])
        if resume["optimizer"] is not None:
            opt.load_state(resume["optimizer"])
        start_step = resume["step"]
        rng = ck.restore_rng(resume["rng_state"])
    else:
        rng = np.random.default_rng(tc.seed)

    feature_dim = model.config.feature_dim
    for step in range(start_step + 1, tc.steps + 1):
        idx = rng.integers(0, len(items), size=tc.batch_size)
        batch = [items[int(i)] for i in idx]
        model.params.zero_grads()
        sums = {"total": 0.0, "rnnt": 0.0, "lm": 0.0, "ctc": 0.0}
        ctc_feasible = 0
        for item in batch:
            feats = _augment(item.feats, tc, feature_dim, rng) if tc.augment else item.feats
            history = item.history(tc.n_text, tc.n_speech)
            try:
                with tt.GradTape() as tape:
                    out = model.forward_losses(feats, item.tokens, history=history, rng=rng)
                    tape.backward(tt.scale(out["total"], 1.0 / tc.batch_size))
            except NumericsError as exc:
                if ckpt_path:
                    ck.save_checkpoint(ckpt_path, model, step, tc.to_dict(), opt, rng)
                raise DivergenceError(f"non-finite values at step {step}: {exc}") from exc
            sums["total"] += out["total"].item()
            sums["rnnt"] += out["rnnt"].item()
            if out["lm"] is not None:
                sums["lm"] += out["lm"].item()
            if out["ctc"] is not None and out["ctc_feasible"]:
                sums["ctc"] += out["ctc"].item()
                ctc_feasible += 1
        record = {
            "step": step,
            "loss_total": sums["total"] / tc.batch_size,
            "loss_rnnt": sums["rnnt"] / tc.batch_size,
            "loss_lm": sums["lm"] / tc.batch_size,
            "loss_ctc": sums["ctc"] / max(ctc_feasible, 1),
            "beta": float(model.params["fusion.beta"].data) if "fusion.beta" in model.params else None,
            "lr": opt.current_lr(),
        }
        if not math.isfinite(record["loss_total"]):
            if ckpt_path:
                ck.save_checkpoint(ckpt_path, model, step, tc.to_dict(), opt, rng)
            raise DivergenceError(f"non-finite loss at step {step}: {record['loss_total']}")
        opt.step()
        metrics.write(**record)
        if ckpt_path and tc.checkpoint_interval and step % tc.checkpoint_interval == 0:
            ck.save_checkpoint(ckpt_path, model, step, tc.to_dict(), opt, rng)
    if ckpt_path:
        ck.save_checkpoint(ckpt_path, model, tc.steps, tc.to_dict(), opt, rng)
    return ckpt_path


def lm_pretrain(model, token_seqs, tc, metrics=None, ckpt_path=None):
    """Train only the vocabulary predictor (as a plain LM) on token sequences."""
    tc.validate()
    if not token_seqs:
        raise ValidationError("no pretraining sequences")
    metrics = metrics or MetricsLog(None)
    lm_params = [p for p in model.params if p.name.startswith("vocab_pred.")]
    opt = Adam(lm_params, tc.lr, tc.beta1, tc.beta2, tc.adam_eps, tc.warmup_steps)
    rng = np.random.default_rng(tc.seed)
    for step in range(1, tc.steps + 1):
        idx = rng.integers(0, len(token_seqs), size=tc.batch_size)
        model.params.zero_grads()
        total = 0.0
        for i in idx:
            y = token_seqs[int(i)]
            with tt.GradTape() as tape:
                z = model.lm_forward(y)
                loss = ls.lm_loss(z, np.asarray(list(y) + [BOUNDARY_ID], dtype=np.int64))
                tape.backward(tt.scale(loss, 1.0 / tc.batch_size))
            total += loss.item()
        record = {"step": step, "loss_lm": total / tc.batch_size, "lr": opt.current_lr()}
        if not math.isfinite(record["loss_lm"]):
            raise DivergenceError(f"non-finite LM loss at step {step}")
        opt.step()
        metrics.write(**record)
    if ckpt_path:
        ck.save_checkpoint(ckpt_path, model, tc.steps, tc.to_dict(), opt, rng)
    return ckpt_path


def load_model_from_checkpoint(path, seed=None):
    loaded = ck.load_checkpoint(path)
    from .model import ModelConfig  # local import to avoid cycle at module load

    config = ModelConfig.from_dict(loaded["header"]["config"])
    model = build_model(config, seed if seed is not None else loaded["header"]["seed"])
    model.params.load_arrays(loaded["params"])
    return model, loaded


def load_predictor_weights(model, path):
    """Name-scoped load of the vocabulary predictor from a (pretrain) checkpoint."""
    loaded = ck.load_checkpoint(path)
    names = model.params.load_arrays(loaded["params"], prefix="vocab_pred.", strict=False)
    if not names:
        raise ValidationError(f"{path}: no vocab_pred.* parameters found")
    return names


# ---------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------

def evaluate_wer(model, records, mode="gt", n_text=0, n_speech=0, beam=1, metrics=None):
    """Session-ordered decode of manifest records; per-session and corpus WER."""
    sessions = cp.group_sessions(records)
    per_session = {}
    total = wr.WerReport()
    all_hyps = []
    for sid, utts in sessions.items():
        hyps = dec.session_decode(model, utts, mode, n_text=n_text, n_speech=n_speech, beam=beam)
        sess_report = wr.WerReport()
        for rec, hyp in zip(utts, hyps):
            report = wr.wer(rec.tokens, hyp.tokens)
            sess_report = sess_report + report
            all_hyps.append(hyp)
            if metrics is not None:
                metrics.write(
                    utt=f"{sid}:{rec.utt_index}", mode=mode, n_text=n_text, n_speech=n_speech,
                    beam=beam, wer=report.wer, errors=report.errors, ref_len=report.ref_len,
                )
        per_session[sid] = sess_report
        total = total + sess_report
    return total, per_session, all_hyps


def evaluate_perplexity(model, token_seqs):
    """Held-out perplexity of the vocabulary predictor as a standalone LM."""
    nll = 0.0
    count = 0
    for y in token_seqs:
        z = model.lm_forward(list(y))
        targets = np.asarray(list(y) + [BOUNDARY_ID], dtype=np.int64)
        nll += float(-z.data[np.arange(len(targets)), targets].sum())
        count += len(targets)
    return float(np.exp(nll / count))
