"""Long-form history machinery.

Three mechanisms over the factorized transducer:

* a context encoder turning the previous N transcriptions into per-token
  embeddings ``C`` (jointly trained transformer, or a frozen read-only
  embedding table standing in for a large pretrained text encoder);
* sentence-level integration of the pooled (mean+std) history vector into
  the vocabulary predictor's output and/or pre-linear hidden state;
* a history-extended speech encoder where previous utterances' frames
  serve as extra keys/values for the current utterance's frames.

History windows are runtime values: a window of 0 disables the machinery
entirely (the model is then exactly the history-free baseline), while a
nonzero window with an empty history (session-initial utterance) maps to
a learned no-history embedding.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tt
from .blocks import TransformerStack, add_positions
from .errors import FormatError, MissingEmbeddingError, NumericsError, ValidationError

CONTEXT_MAGIC = b"LFCE"
CONTEXT_VERSION = 1


def separator_id(vocab_size):
    return vocab_size + 1


def no_history_id(vocab_size):
    return vocab_size + 2


def join_history_ids(token_lists, vocab_size):
    """Concatenate history utterances with one separator id between each."""
    ids = []
    for i, toks in enumerate(token_lists):
        if i:
            ids.append(separator_id(vocab_size))
        ids.extend(int(t) for t in toks)
    return np.asarray(ids, dtype=np.int64)


class ContextEncoder:
    """Jointly trained history encoder: embeddings + bidirectional transformer."""

    def __init__(self, ps, name, vocab_size, dim, layers, heads, ffn_dim):
        self.vocab_size = vocab_size
        self.embed = ps.normal(f"{name}.embed", (vocab_size + 3, dim), 1.0 / np.sqrt(dim))
        self.stack = TransformerStack(ps, f"{name}.encoder", layers, dim, heads, ffn_dim)

    def __call__(self, token_lists):
        ids = join_history_ids(token_lists, self.vocab_size) if token_lists else np.array([], dtype=np.int64)
        if ids.size == 0:  # no history, or every history transcript empty
            return tt.embedding(self.embed, np.array([no_history_id(self.vocab_size)]))
        x = tt.embedding(self.embed, ids)
        x = add_positions(x)
        return self.stack(x)  # no causal mask: bidirectional


class FrozenContextTable:
    """Read-only per-token embedding table loaded from an LFCE file.

    Row index equals token id; row V+1 is the separator, row V+2 the
    no-history embedding. Lookups carry no gradients.
    """

    def __init__(self, rows, path=None):
        self.rows = np.asarray(rows, dtype=np.float32)
        self.rows.flags.writeable = False
        self.path = path

    @property
    def dim(self):
        return self.rows.shape[1]

    def __call__(self, token_lists, vocab_size):
        ids = join_history_ids(token_lists, vocab_size) if token_lists else np.array([], dtype=np.int64)
        if ids.size == 0:
            ids = np.array([no_history_id(vocab_size)], dtype=np.int64)
        missing = [int(i) for i in ids if i >= self.rows.shape[0] or i < 0]
        if missing:
            raise MissingEmbeddingError(missing)
        return tt.Tensor(self.rows[ids].astype(tt.default_dtype()))


def write_context_table(path, rows):
    rows = np.asarray(rows, dtype=np.float32)
    if rows.ndim != 2:
        raise ValidationError("context table must be 2-D (rows x dim)")
    with open(path, "wb") as f:
        f.write(CONTEXT_MAGIC)
        f.write(struct.pack("<HII", CONTEXT_VERSION, rows.shape[0], rows.shape[1]))
        f.write(rows.astype("<f4").tobytes())


def read_context_table(path):
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 14:
        raise FormatError(f"context table too short: {len(blob)} bytes")
    if blob[:4] != CONTEXT_MAGIC:
        raise FormatError(f"bad magic {blob[:4]!r}, expected {CONTEXT_MAGIC!r}")
    version, n_rows, dim = struct.unpack("<HII", blob[4:14])
    if version != CONTEXT_VERSION:
        raise FormatError(f"unsupported context table version {version}")
    expected = 14 + 4 * n_rows * dim
    if len(blob) != expected:
        raise FormatError(f"context table truncated: expected {expected} bytes, got {len(blob)}")
    rows = np.frombuffer(blob[14:], dtype="<f4").reshape(n_rows, dim)
    return FrozenContextTable(rows, path=path)


# ---------------------------------------------------------------------
# session history
# ---------------------------------------------------------------------

@dataclass
class HistoryEntry:
    tokens: list
    provenance: str  # 'gt' | 'hyp'


@dataclass
class SessionHistory:
    """Previous utterances of one session, windowed per mechanism."""

    session_id: str
    n_text: int = 0
    n_speech: int = 0
    entries: list = field(default_factory=list)  # HistoryEntry, oldest first
    features: list = field(default_factory=list)  # feature matrices, oldest first

    def append(self, tokens, provenance, feats=None):
        if self.entries and self.entries[-1].provenance != provenance:
            raise ValidationError("history provenance must be uniform within a decode run")
        self.entries.append(HistoryEntry(list(int(t) for t in tokens), provenance))
        self.features.append(feats)

    def text_window(self):
        if self.n_text <= 0:
            return []
        return [e.tokens for e in self.entries[-self.n_text :]]

    def speech_window(self):
        if self.n_speech <= 0:
            return []
        window = [f for f in self.features[-self.n_speech :] if f is not None]
        return window

    @property
    def text_active(self):
        return self.n_text > 0

    @property
    def speech_active(self):
        return self.n_speech > 0


# ---------------------------------------------------------------------
# long-form speech encoder
# ---------------------------------------------------------------------

def longform_speech_encode(model, history_feats, feats, block_history=False):
    """Encode the current utterance with previous utterances as extra context.

    Each utterance is subsampled independently, then concatenated along
    time. Positions are continuous across the span with the current
    utterance anchored at 0 (history runs backwards into negative
    positions), so an empty history reproduces the isolated encoder
    exactly. Self-attention spans the whole concatenation; with
    ``block_history`` the current frames are forbidden from attending to
    history (probe for quantifying the conv module's boundary leakage).
    Only the current utterance's frames are returned.
    """
    if feats.shape[0] < model.subsampler.factor:
        raise NumericsError("longform_speech_encode: current utterance too short for subsampling")
    hist = [model.subsampler(tt.Tensor(f)) for f in history_feats]
    cur = model.subsampler(tt.Tensor(feats))
    t_hist = sum(h.shape[0] for h in hist)
    t_cur = cur.shape[0]

    parts = []
    offset = -t_hist
    for h in hist:
        parts.append(add_positions(h, start=offset))
        offset += h.shape[0]
    parts.append(add_positions(cur, start=0))
    x = parts[0] if len(parts) == 1 else tt.concat(parts, axis=0)

    mask = None
    if block_history and t_hist:
        n = t_hist + t_cur
        mask = np.ones((n, n), dtype=bool)
        mask[t_hist:, :t_hist] = False

    for layer in model.encoder_layers:
        x = layer(x, mask=mask)
    if t_hist:
        return x[t_hist:, :]
    return x
