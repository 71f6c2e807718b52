"""LSTM language model whose hidden and cell activations are recoded by a gradient step on an error signal."""

from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RecodingConfig, TrainConfig, desk_profile, load_config, parse_config
from .corpus import CorpusError, Vocabulary, batchify, build_vocab, decode, encode
from .estimator import RecodingLanguageModel
from .harness import EvalReport, TraceRecord, ablate, evaluate, trace, trace_perplexity, train
from .lstm import DivergenceError, LmParameters, anneal_lr, lstm_step
from .network import RecurrentLM
from .recoder import recode, signal_gradients
from .signals import bae_signal, mcd_signal, surprisal, surprisal_signal
from .verifier import check_theorem1, check_theorem2, finite_diff_grad, gradcheck_suite, relative_error

__version__ = "0.1.0"

__all__ = [
    "Checkpoint", "CheckpointError", "ConfigError", "CorpusError", "DivergenceError", "EvalReport",
    "LmParameters", "RecodingConfig", "RecodingLanguageModel", "RecurrentLM", "TraceRecord", "TrainConfig",
    "Vocabulary", "ablate", "anneal_lr", "bae_signal", "batchify", "build_vocab", "check_theorem1",
    "check_theorem2", "decode", "desk_profile", "encode", "evaluate", "finite_diff_grad", "gradcheck_suite",
    "load_checkpoint", "load_config", "lstm_step", "mcd_signal", "parse_config", "recode", "relative_error",
    "save_checkpoint", "signal_gradients", "surprisal", "surprisal_signal", "trace", "trace_perplexity", "train",
]
