"""Structured run configuration: a key=value tree file plus overrides.

One file configures everything; keys are dotted paths into three sections
(``model.``, ``train.``, ``corpus.``) plus a ``decode.`` section for the
decoding commands. Values are parsed as JSON scalars or lists, with bare
words taken as strings. ``--set key=value`` flags apply on top.

Canonical schema (defaults in parentheses):

  model.vocab_size (required for train)   model.feature_dim (required)
  model.architecture (mfnt|ct)            model.model_dim (32)
  model.heads (2)                         model.ffn_dim (64)
  model.conv_kernel (3)                   model.encoder_layers (2)
  model.subsample_factor (2; 1|2|4)       model.blank_hidden (32)
  model.blank_layers (1)                  model.joint_dim (32)
  model.predictor_dim (32)                model.predictor_heads (2)
  model.predictor_ffn_dim (64)            model.predictor_layers (2)
  model.lambda_lm (0.5)                   model.lambda_ctc (0.1)
  model.sentence_mode (off|output_add|prelinear_concat|both)
  model.token_level (false)               model.context_mode (joint|frozen_external)
  model.context_dim (32)                  model.context_layers (2)
  model.context_heads (2)                 model.context_ffn_dim (64)
  model.renorm_output_add (true)          model.dropout (0.0)

  train.seed (required, or --seed)        train.steps (500)
  train.batch_size (8)                    train.lr (1e-3)
  train.beta1 (0.9)                       train.beta2 (0.98)
  train.adam_eps (1e-9)                   train.warmup_steps (200)
  train.checkpoint_interval (0)           train.precision (float32)
  train.n_text (0)                        train.n_speech (0)
  train.lambda_lm / train.lambda_ctc (null: use model values)
  train.augment (true)                    train.aug_freq_width (null: D/4)
  train.aug_num_freq (2)                  train.aug_time_ratio (0.05)
  train.aug_num_time (2)                  train.single_thread (true)

  corpus.seed (required, or --seed)       corpus.vocab_size (24)
  corpus.sessions (210)                   corpus.dev_sessions (24)
  corpus.test_sessions (24)               corpus.utterances_per_session (5)
  corpus.tokens_per_utt ([3,5])           corpus.frames_per_token ([4,7])
  corpus.feature_dim (16)                 corpus.noise_sigma (0.3)
  corpus.session_bias_sigma (1.0)         corpus.entity_rate (0.1)
  corpus.confusable_pairs (2)             corpus.confusable_rate (0.35)
  corpus.entity_tokens (4)                corpus.topics (4)

  decode.mode (gt|hyp)                    decode.n_text (0)
  decode.n_speech (0)                     decode.beam (1)
  decode.max_symbols_per_frame (5)
"""

from __future__ import annotations

import json

from .errors import ValidationError

SECTIONS = ("model", "train", "corpus", "decode")


def parse_value(raw):
    raw = raw.strip()
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw  # bare word: string


def parse_config_file(path):
    tree = {s: {} for s in SECTIONS}
    with open(path) as f:
        for ln, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValidationError(f"{path}:{ln}: expected key = value")
            key, raw = line.split("=", 1)
            _assign(tree, key.strip(), parse_value(raw), f"{path}:{ln}")
    return tree


def apply_overrides(tree, overrides):
    for item in overrides:
        if "=" not in item:
            raise ValidationError(f"--set needs key=value, got {item!r}")
        key, raw = item.split("=", 1)
        _assign(tree, key.strip(), parse_value(raw), "--set")
    return tree


def _assign(tree, key, value, where):
    parts = key.split(".")
    if len(parts) != 2 or parts[0] not in SECTIONS:
        raise ValidationError(f"{where}: key must be <section>.<name> with section in {SECTIONS}, got {key!r}")
    tree[parts[0]][parts[1]] = value


def empty_tree():
    return {s: {} for s in SECTIONS}
