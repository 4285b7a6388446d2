"""Frame-synchronous transducer decoding: greedy, prefix beam with
hypothesis merging, and session-level decoding with gt/hyp history.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product

import numpy as np

from . import losses as ls
from .errors import ValidationError
from .longform import SessionHistory

MAX_SYMBOLS_PER_FRAME = 5  # guards the transducer's unbounded-emission pathology


@dataclass
class DecodeHypothesis:
    tokens: list
    log_score: float
    history_mode: str = None  # 'gt' | 'hyp' | None
    session_id: str = None
    utt_index: int = None


def greedy_decode(model, feats, history=None, max_symbols_per_frame=MAX_SYMBOLS_PER_FRAME):
    """Argmax over V+1 per step: emit and stay on the frame (bounded), advance on blank."""
    dec = model.utterance_decoder(feats, history)
    state = dec.start()
    score = 0.0
    for t in range(dec.n_frames):
        emitted = 0
        while True:
            lp = dec.logprobs(state, t)
            k = int(np.argmax(lp))
            if k == 0 or emitted >= max_symbols_per_frame:
                score += lp[0]
                break
            score += lp[k]
            state = dec.advance(state, k)
            emitted += 1
    return DecodeHypothesis(list(state.tokens), float(score))


def beam_decode(model, feats, history=None, beam=4, max_symbols_per_frame=MAX_SYMBOLS_PER_FRAME):
    """Prefix beam search; identical prefixes are merged by log-sum-exp.

    Within a frame, stopped (blank-taken) and still-expanding hypotheses
    compete in one top-``beam`` pool per expansion round, stopped winning
    ties, so ``beam=1`` reproduces the greedy rule exactly, including the
    per-frame emission cap.
    """
    if beam < 1:
        raise ValidationError("beam must be >= 1")
    dec = model.utterance_decoder(feats, history)
    pool = {(): (0.0, dec.start())}  # prefix -> (score, state); all have consumed frames < t

    for t in range(dec.n_frames):
        stopped = {}  # prefix -> [score, state]; frame t consumed
        expanding = dict(pool)
        for rnd in range(max_symbols_per_frame + 1):
            if not expanding:
                break
            new_expanding = {}
            for prefix, (score, state) in expanding.items():
                lp = dec.logprobs(state, t)
                blank_score = score + float(lp[0])
                if prefix in stopped:
                    stopped[prefix][0] = float(np.logaddexp(stopped[prefix][0], blank_score))
                else:
                    stopped[prefix] = [blank_score, state]
                if rnd < max_symbols_per_frame:
                    order = np.argsort(-lp[1:], kind="stable")[:beam] + 1
                    for k in order:
                        child = prefix + (int(k),)
                        child_score = score + float(lp[k])
                        if child in new_expanding:
                            prev = new_expanding[child]
                            new_expanding[child] = (float(np.logaddexp(prev[0], child_score)), prev[1])
                        else:
                            new_expanding[child] = (child_score, dec.advance(state, int(k)))
            # joint top-beam pool over stopped and expanding; stopped wins ties
            union = [(-s, 0, p) for p, (s, _) in stopped.items()]
            union += [(-s, 1, p) for p, (s, _) in new_expanding.items()]
            union.sort()
            kept = union[:beam]
            stopped = {p: stopped[p] for (_, flag, p) in kept if flag == 0}
            expanding = {p: new_expanding[p] for (_, flag, p) in kept if flag == 1}
        pool = {p: (s, state) for p, (s, state) in stopped.items()}
    best_prefix, (best_score, _) = max(pool.items(), key=lambda kv: kv[1][0])
    return DecodeHypothesis(list(best_prefix), float(best_score))


def decode_utterance(model, feats, history=None, beam=1, max_symbols_per_frame=MAX_SYMBOLS_PER_FRAME):
    if beam <= 1:
        return greedy_decode(model, feats, history, max_symbols_per_frame)
    return beam_decode(model, feats, history, beam, max_symbols_per_frame)


def session_decode(model, utterances, mode, n_text=0, n_speech=0, beam=1,
                   max_symbols_per_frame=MAX_SYMBOLS_PER_FRAME):
    """Decode one session in utterance order, threading text/speech history.

    ``mode='gt'`` fills the text history with reference transcriptions;
    ``'hyp'`` with this run's own outputs. Speech history always uses the
    true features. With both windows at zero every utterance is decoded in
    isolation (no long-form machinery at all).
    """
    if mode not in ("gt", "hyp"):
        raise ValidationError(f"mode must be 'gt' or 'hyp', got {mode!r}")
    if not utterances:
        return []
    sid = utterances[0].session_id
    indices = [u.utt_index for u in utterances]
    if indices != list(range(len(utterances))) or any(u.session_id != sid for u in utterances):
        raise ValidationError(f"session {sid}: utterances out of order or mixed: {indices}")

    use_history = n_text > 0 or n_speech > 0
    history = SessionHistory(sid, n_text=n_text, n_speech=n_speech) if use_history else None
    hyps = []
    for rec in utterances:
        hyp = decode_utterance(model, rec.feats, history, beam, max_symbols_per_frame)
        hyp.history_mode = mode
        hyp.session_id = sid
        hyp.utt_index = rec.utt_index
        hyps.append(hyp)
        if use_history:
            hist_tokens = rec.tokens if mode == "gt" else hyp.tokens
            history.append(hist_tokens, mode, rec.feats)
    return hyps


def sequence_log_prob(model, feats, y, history=None):
    """Exact log P(y | x): minus the transducer loss of the model's lattice."""
    log_post = model.joint_log_posterior(feats, y, history)
    if len(y) == 0:
        loss, _ = ls.transducer_loss(log_post.data, [])
    else:
        loss, _ = ls.transducer_loss(log_post.data, y)
    return -loss


def exhaustive_best_sequence(model, feats, history=None, max_len=3):
    """Search oracle: enumerate every label sequence up to ``max_len``."""
    v = model.config.vocab_size
    best, best_lp = [], -np.inf
    for n in range(max_len + 1):
        for y in product(range(1, v + 1), repeat=n):
            lp = sequence_log_prob(model, feats, list(y), history)
            if lp > best_lp:
                best, best_lp = list(y), lp
    return best, float(best_lp)
