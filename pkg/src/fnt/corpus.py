"""Deterministic synthetic session corpus with genuine history dependence.

Each session draws a topic, a few recurring entity tokens, one member of
every confusable token pair, and a session-wide feature bias (a
speaker/channel analog). Confusable pair members share a feature
prototype up to a sigma/10 perturbation, so audio alone cannot tell them
apart; within a session the same member recurs, so the previous
transcriptions do. That gap is the headroom the long-form models exploit,
and the control corpus (no entities, no confusables) removes it.

Features are per-token prototypes plus bias plus Gaussian noise, repeated
for a sampled duration. Everything derives from the corpus seed and the
session index, so regeneration is byte-identical regardless of order.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict, dataclass, fields

import numpy as np

from .errors import FormatError, ValidationError
from .params import name_seed

FEATURE_MAGIC = b"LFNT"
FEATURE_VERSION = 1

SPLITS = ("train", "dev", "test")


@dataclass
class CorpusSpec:
    seed: int
    vocab_size: int = 24
    sessions: int = 210            # training sessions
    dev_sessions: int = 24
    test_sessions: int = 24
    utterances_per_session: int = 5
    tokens_per_utt: tuple = (3, 5)
    frames_per_token: tuple = (4, 7)
    feature_dim: int = 16
    noise_sigma: float = 0.3
    session_bias_sigma: float = 1.0
    entity_rate: float = 0.10
    confusable_pairs: int = 2
    confusable_rate: float = 0.35
    entity_tokens: int = 4
    topics: int = 4

    def validate(self):
        if self.vocab_size < 8:
            raise ValidationError("vocab_size must be >= 8")
        if self.n_content < self.topics:
            raise ValidationError(
                f"vocab too small: {self.n_content} content tokens for {self.topics} topics"
            )
        if not (0 <= self.entity_rate <= 1 and 0 <= self.confusable_rate <= 1):
            raise ValidationError("rates must be in [0, 1]")
        if self.entity_rate + self.confusable_rate > 0.95:
            raise ValidationError("entity_rate + confusable_rate too close to 1")
        lo, hi = self.tokens_per_utt
        if lo < 1 or hi < lo:
            raise ValidationError("bad tokens_per_utt range")
        lo, hi = self.frames_per_token
        if lo < 1 or hi < lo:
            raise ValidationError("bad frames_per_token range")
        return self

    # vocabulary layout: blank=0; pair members next; content; entities at the top
    @property
    def pair_ids(self):
        return [(1 + 2 * i, 2 + 2 * i) for i in range(self.confusable_pairs)]

    @property
    def entity_ids(self):
        if self.entity_tokens == 0 or self.entity_rate == 0:
            return []
        return list(range(self.vocab_size - self.entity_tokens + 1, self.vocab_size + 1))

    @property
    def content_ids(self):
        lo = 1 + 2 * self.confusable_pairs
        hi = self.vocab_size - (self.entity_tokens if self.entity_ids else 0)
        return list(range(lo, hi + 1))

    @property
    def n_content(self):
        return len(self.content_ids)

    def to_dict(self):
        d = asdict(self)
        d["tokens_per_utt"] = list(self.tokens_per_utt)
        d["frames_per_token"] = list(self.frames_per_token)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown corpus config keys: {sorted(unknown)}")
        d = dict(d)
        for key in ("tokens_per_utt", "frames_per_token"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class UtteranceRecord:
    session_id: str
    utt_index: int
    feature_file: str
    tokens: list
    text: str

    def load_features(self, base_dir):
        if self.feature_file == "-":
            return None
        return read_features(os.path.join(base_dir, self.feature_file))


# ---------------------------------------------------------------------
# feature files
# ---------------------------------------------------------------------

def write_features(path, mat):
    mat = np.asarray(mat, dtype=np.float32)
    if mat.ndim != 2:
        raise ValidationError("feature matrix must be 2-D")
    if not np.isfinite(mat).all():
        raise ValidationError("feature matrix must be finite")
    with open(path, "wb") as f:
        f.write(FEATURE_MAGIC)
        f.write(struct.pack("<HII", FEATURE_VERSION, mat.shape[0], mat.shape[1]))
        f.write(mat.astype("<f4").tobytes())


def read_features(path):
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 14:
        raise FormatError(f"feature file too short: {len(blob)} bytes")
    if blob[:4] != FEATURE_MAGIC:
        raise FormatError(f"bad magic {blob[:4]!r}, expected {FEATURE_MAGIC!r}")
    version, t, d = struct.unpack("<HII", blob[4:14])
    if version != FEATURE_VERSION:
        raise FormatError(f"unsupported feature file version {version}")
    expected = 14 + 4 * t * d
    if len(blob) != expected:
        raise FormatError(f"feature file truncated: expected {expected} bytes, got {len(blob)}")
    return np.frombuffer(blob[14:], dtype="<f4").reshape(t, d).copy()


# ---------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------

def write_manifest(path, records):
    with open(path, "w") as f:
        for r in records:
            toks = " ".join(str(t) for t in r.tokens)
            f.write(f"{r.session_id}\t{r.utt_index}\t{r.feature_file}\t{toks}\t{r.text}\n")


def read_manifest(path):
    records = []
    with open(path) as f:
        for ln, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 5:
                raise FormatError(f"{path}:{ln}: expected 5 tab-separated fields, got {len(parts)}")
            sid, idx, feat, toks, text = parts
            records.append(
                UtteranceRecord(sid, int(idx), feat, [int(t) for t in toks.split()] if toks else [], text)
            )
    return records


def group_sessions(records):
    """Group records by session, validating dense in-order utterance indices."""
    sessions = {}
    for r in records:
        sessions.setdefault(r.session_id, []).append(r)
    for sid, utts in sessions.items():
        indices = [u.utt_index for u in utts]
        if indices != list(range(len(utts))):
            raise ValidationError(f"session {sid}: utterance indices not dense from 0: {indices}")
    return sessions


# ---------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------

def token_word(tok):
    return f"tk{tok}"


def _prototypes(spec):
    rng = np.random.default_rng(name_seed(spec.seed, "prototypes"))
    protos = np.zeros((spec.vocab_size + 1, spec.feature_dim), dtype=np.float64)
    protos[1:] = rng.standard_normal((spec.vocab_size, spec.feature_dim))
    for a, b in spec.pair_ids:
        direction = rng.standard_normal(spec.feature_dim)
        direction /= np.linalg.norm(direction)
        protos[b] = protos[a] + (spec.noise_sigma / 10.0) * direction
    return protos


def _topic_table(spec):
    """Round-robin partition of content ids into per-topic pools."""
    pools = [[] for _ in range(spec.topics)]
    for i, tok in enumerate(spec.content_ids):
        pools[i % spec.topics].append(tok)
    return pools


@dataclass
class SessionDraw:
    session_id: str
    topic: int
    entities: list
    pair_member: list  # chosen member index per pair
    bias: np.ndarray
    utterances: list  # list of token lists


def _draw_session(spec, split, index, pools):
    rng = np.random.default_rng(name_seed(spec.seed, f"session:{split}:{index}"))
    topic = int(rng.integers(spec.topics))
    entities = list(rng.choice(spec.entity_ids, size=min(2, len(spec.entity_ids)), replace=False)) if spec.entity_ids else []
    pair_member = [int(rng.integers(2)) for _ in spec.pair_ids]
    bias = rng.normal(0.0, spec.session_bias_sigma, spec.feature_dim)
    utterances = []
    lo, hi = spec.tokens_per_utt
    for _ in range(spec.utterances_per_session):
        n = int(rng.integers(lo, hi + 1))
        toks = []
        for _ in range(n):
            r = rng.random()
            if r < spec.entity_rate and entities:
                toks.append(int(rng.choice(entities)))
            elif r < spec.entity_rate + spec.confusable_rate and spec.pair_ids:
                k = int(rng.integers(len(spec.pair_ids)))
                toks.append(spec.pair_ids[k][pair_member[k]])
            else:
                pool = pools[topic] if rng.random() < 0.85 else spec.content_ids
                toks.append(int(pool[rng.integers(len(pool))]))
        utterances.append(toks)
    return SessionDraw(f"{split}-{index:04d}", topic, entities, pair_member, bias, utterances)


def _render_features(spec, draw, utt_index, protos):
    rng = np.random.default_rng(name_seed(spec.seed, f"feats:{draw.session_id}:{utt_index}"))
    lo, hi = spec.frames_per_token
    rows = []
    for tok in draw.utterances[utt_index]:
        n_frames = int(rng.integers(lo, hi + 1))
        base = protos[tok] + draw.bias
        rows.append(base + rng.normal(0.0, spec.noise_sigma, (n_frames, spec.feature_dim)))
    return np.concatenate(rows, axis=0).astype(np.float32)


def iter_sessions(spec, split):
    """Session draws for a split (token content only; features rendered on demand)."""
    spec.validate()
    counts = {"train": spec.sessions, "dev": spec.dev_sessions, "test": spec.test_sessions}
    pools = _topic_table(spec)
    for i in range(counts[split]):
        yield _draw_session(spec, split, i, pools)


def gen_corpus(spec, out_dir, text_only=False):
    """Write manifests (and feature files) for all three splits."""
    spec.validate()
    os.makedirs(out_dir, exist_ok=True)
    feat_dir = os.path.join(out_dir, "features")
    if not text_only:
        os.makedirs(feat_dir, exist_ok=True)
    protos = _prototypes(spec)
    manifest_paths = {}
    for split in SPLITS:
        records = []
        for draw in iter_sessions(spec, split):
            for u, toks in enumerate(draw.utterances):
                if text_only:
                    feat_rel = "-"
                else:
                    feat_rel = os.path.join("features", f"{draw.session_id}_{u:02d}.lfnt")
                    write_features(os.path.join(out_dir, feat_rel), _render_features(spec, draw, u, protos))
                records.append(
                    UtteranceRecord(
                        draw.session_id, u, feat_rel, toks, " ".join(token_word(t) for t in toks)
                    )
                )
        path = os.path.join(out_dir, f"{split}.tsv")
        write_manifest(path, records)
        manifest_paths[split] = path
    with open(os.path.join(out_dir, "corpus.json"), "w") as f:
        json.dump({"spec": spec.to_dict(), "text_only": text_only}, f, indent=2, sort_keys=True)
    return manifest_paths


def load_split(corpus_dir, split, with_features=True):
    """Manifest records of one split, features attached as .feats."""
    records = read_manifest(os.path.join(corpus_dir, f"{split}.tsv"))
    sessions = group_sessions(records)
    out = []
    for sid in sessions:
        for r in sessions[sid]:
            r.feats = r.load_features(corpus_dir) if with_features else None
            out.append(r)
    return out


def corpus_spec_of(corpus_dir):
    with open(os.path.join(corpus_dir, "corpus.json")) as f:
        return CorpusSpec.from_dict(json.load(f)["spec"])


# ---------------------------------------------------------------------
# feature masking augmentation
# ---------------------------------------------------------------------

def spec_augment(feats, f_width, num_freq, p_s, num_time, rng):
    """Zero ``num_freq`` frequency bands of width <= f_width and
    ``num_time`` spans of length <= p_s * T. Training-time only."""
    out = np.array(feats, copy=True)
    t_len, d = out.shape
    for _ in range(num_freq):
        w = int(rng.integers(0, f_width + 1)) if f_width > 0 else 0
        if w:
            start = int(rng.integers(0, d - w + 1))
            out[:, start : start + w] = 0.0
    t_max = int(p_s * t_len)
    for _ in range(num_time):
        w = int(rng.integers(0, t_max + 1)) if t_max > 0 else 0
        if w:
            start = int(rng.integers(0, t_len - w + 1))
            out[start : start + w, :] = 0.0
    return out


def expected_masked_fraction(t_len, d, f_width, num_freq, p_s, num_time):
    """Exact expectation of the masked cell fraction, by enumerating draws."""

    def cover_prob(n, max_w):
        # P(position j covered by one mask), width uniform on {0..max_w},
        # start uniform on {0..n-w}
        p = np.zeros(n)
        if max_w <= 0:
            return p
        for w in range(0, max_w + 1):
            if w == 0:
                continue
            starts = n - w + 1
            for j in range(n):
                covering = min(j, n - w) - max(0, j - w + 1) + 1
                p[j] += covering / starts / (max_w + 1)
        return p

    pf = cover_prob(d, f_width)
    pt = cover_prob(t_len, int(p_s * t_len))
    col_unmasked = (1 - pf) ** num_freq
    row_unmasked = (1 - pt) ** num_time
    masked = 1 - np.outer(row_unmasked, col_unmasked)
    return float(masked.mean())


# ---------------------------------------------------------------------
# generator-aware oracles (the headroom measurements)
# ---------------------------------------------------------------------

def oracle_confusable_errors(spec, split="test", window=2):
    """Token error of history-aware vs history-blind oracles on confusable slots.

    Both oracles know the generator's pair structure and see, for each
    slot, the pair identity (audio reveals that much). The aware oracle
    also sees the previous ``window`` reference transcriptions and picks
    the member observed there; the blind oracle always picks the first
    member. Returns (aware_error, blind_error, n_slots).
    """
    spec.validate()
    member_of = {}
    for pi, (a, b) in enumerate(spec.pair_ids):
        member_of[a] = (pi, 0)
        member_of[b] = (pi, 1)
    aware_err = blind_err = slots = 0
    for draw in iter_sessions(spec, split):
        for u, toks in enumerate(draw.utterances):
            history = [t for prev in draw.utterances[max(0, u - window) : u] for t in prev]
            seen = {}
            for t in history:
                if t in member_of:
                    pi, m = member_of[t]
                    seen[pi] = m
            for t in toks:
                if t not in member_of:
                    continue
                pi, m = member_of[t]
                slots += 1
                blind_err += int(m != 0)
                aware_err += int(m != seen.get(pi, 0))
    if slots == 0:
        return 0.0, 0.0, 0
    return aware_err / slots, blind_err / slots, slots


def history_entropy_gap(spec, split="test", window=2):
    """Empirical next-token entropy on confusable slots, with and without
    the previous ``window`` transcriptions. Counts-based estimate.

    Returns (entropy_without_history, entropy_with_history) in nats.
    """
    spec.validate()
    member_of = {}
    for pi, (a, b) in enumerate(spec.pair_ids):
        member_of[a] = (pi, 0)
        member_of[b] = (pi, 1)

    uncond = {}
    cond = {}
    for draw in iter_sessions(spec, split):
        for u, toks in enumerate(draw.utterances):
            history = [t for prev in draw.utterances[max(0, u - window) : u] for t in prev]
            seen = {}
            for t in history:
                if t in member_of:
                    pi, m = member_of[t]
                    seen[pi] = m
            for t in toks:
                if t not in member_of:
                    continue
                pi, m = member_of[t]
                uncond.setdefault(pi, []).append(m)
                cond.setdefault((pi, seen.get(pi)), []).append(m)

    def entropy(groups):
        total = sum(len(v) for v in groups.values())
        h = 0.0
        for v in groups.values():
            counts = np.bincount(np.asarray(v), minlength=2)
            probs = counts / counts.sum()
            hi = -sum(p * np.log(p) for p in probs if p > 0)
            h += (len(v) / total) * hi
        return h

    if not uncond:
        return 0.0, 0.0
    return entropy(uncond), entropy(cond)
