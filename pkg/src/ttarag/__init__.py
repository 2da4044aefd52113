"""Retrieval-augmented QA with per-query test-time adaptation.

The generator is a small from-scratch causal transformer; before answering a
query it is briefly fine-tuned to predict the suffixes of the retrieved
passages, then restored bit-exactly afterwards. The package also ships the
experiment harness: a synthetic domain-shift benchmark, judges, sweeps,
ablations and timing reports.
"""

from .adapt import AdaptationConfig, AdaptationError, AdaptationTrace, adapt, adaptation_loss, pair_loss
from .benchmark import SyntheticBenchmark, generate_benchmark, write_benchmark
from .evaluation import Judgement, RunReport, evaluate_run, judge_exact, judge_f1, sweep
from .lm import (
    LmConfig,
    ParameterSnapshot,
    TransformerLm,
    Vocab,
    build_vocab,
    load_checkpoint,
    pretrain,
    save_checkpoint,
)
from .pipeline import Answer, Pipeline, PipelineConfig, QueryRecord, load_dataset
from .retrieval import Bm25Index, Document, build_index, ingest
from .segment import PrefixSuffixPair, build_adaptation_set, filter_passages, split_passage
from .tensor import Tensor, backward, clip_global_norm, masked_cross_entropy, no_grad

__version__ = "0.1.0"

__all__ = [
    "AdaptationConfig",
    "AdaptationError",
    "AdaptationTrace",
    "Answer",
    "Bm25Index",
    "Document",
    "Judgement",
    "LmConfig",
    "ParameterSnapshot",
    "Pipeline",
    "PipelineConfig",
    "PrefixSuffixPair",
    "QueryRecord",
    "RunReport",
    "SyntheticBenchmark",
    "Tensor",
    "TransformerLm",
    "Vocab",
    "adapt",
    "adaptation_loss",
    "backward",
    "build_adaptation_set",
    "build_index",
    "build_vocab",
    "clip_global_norm",
    "evaluate_run",
    "filter_passages",
    "generate_benchmark",
    "ingest",
    "judge_exact",
    "judge_f1",
    "load_checkpoint",
    "load_dataset",
    "masked_cross_entropy",
    "no_grad",
    "pair_loss",
    "pretrain",
    "save_checkpoint",
    "split_passage",
    "sweep",
    "write_benchmark",
]
