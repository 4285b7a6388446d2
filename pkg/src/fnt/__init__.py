"""Factorized neural transducer ASR with long-form text and speech history,
trained and evaluated on a synthetic session corpus whose utterances are
genuinely history-dependent.
"""

from .corpus import CorpusSpec, gen_corpus, load_split, read_features, spec_augment, write_features
from .decoding import DecodeHypothesis, beam_decode, greedy_decode, session_decode
from .longform import FrozenContextTable, SessionHistory, read_context_table, write_context_table
from .model import CtModel, MfntModel, ModelConfig, build_model
from .tensor import GradTape, Parameter, Tensor, dtype_scope, grad_check, set_default_dtype
from .training import Adam, MetricsLog, TrainConfig, evaluate_perplexity, evaluate_wer, lm_pretrain, train
from .wer import WerReport
from .wer import wer as token_wer  # `fnt.wer` stays the submodule

__version__ = "0.1.0"

__all__ = [
    "Adam", "beam_decode", "build_model", "CorpusSpec", "CtModel", "DecodeHypothesis",
    "dtype_scope", "evaluate_perplexity", "evaluate_wer", "FrozenContextTable", "gen_corpus",
    "grad_check", "GradTape", "greedy_decode", "lm_pretrain", "load_split", "MetricsLog",
    "MfntModel", "ModelConfig", "Parameter", "read_context_table", "read_features",
    "session_decode", "SessionHistory", "set_default_dtype", "spec_augment", "Tensor",
    "token_wer", "train", "TrainConfig", "WerReport", "write_context_table", "write_features",
]
