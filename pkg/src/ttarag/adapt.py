"""Per-query test-time adaptation of the language model.

For each prefix/suffix example the model is trained to continue the prefix,
conditioned on the query: the input is query <sep> prefix suffix and the loss
covers suffix positions only. Gradients are averaged over an accumulation
window, clipped by global norm, and applied with AdamW (or plain SGD so the
averaged-gradient update rule can be tested literally). Optimizer state is
fresh for every call; nothing leaks between queries.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .lm import SEP, TransformerLm, Vocab, ParameterSnapshot
from .segment import PrefixSuffixPair


@dataclass(frozen=True)
class AdaptationConfig:
    learning_rate: float = 1e-5
    accumulation_steps: int = 2
    pair_budget: int = 3
    clip_norm: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.01
    optimizer: str = "adamw"  # "adamw" | "plain-sgd"

    def __post_init__(self):
        # learning_rate 0 is allowed: it is the documented way to run the
        # full adaptation path as a no-op for baseline comparisons.
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.accumulation_steps < 1:
            raise ValueError("accumulation_steps must be >= 1")
        if self.pair_budget < 0:
            raise ValueError("pair_budget must be >= 0")
        if self.clip_norm < 0:
            raise ValueError("clip_norm must be >= 0")
        if self.optimizer not in ("adamw", "plain-sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class AdaptationTrace:
    pair_losses: list[float] = field(default_factory=list)
    grad_norms: list[float] = field(default_factory=list)
    clip_factors: list[float] = field(default_factory=list)
    updates: int = 0
    seconds: float = 0.0


class AdaptationError(RuntimeError):
    """Adaptation aborted; the model has been restored to its snapshot."""

    def __init__(self, message: str, trace: AdaptationTrace):
        super().__init__(message)
        self.trace = trace


class OptimizerState:
    def __init__(self, params):
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0


def encode_pair(vocab: Vocab, query: str, pair: PrefixSuffixPair):
    """Token ids for query <sep> prefix suffix, plus the suffix span."""
    ids = vocab.encode(query) + [SEP] + vocab.encode(pair.prefix)
    suffix_ids = vocab.encode(pair.suffix)
    start = len(ids)
    ids = ids + suffix_ids
    return np.asarray(ids, dtype=np.int64), start, len(ids)


def pair_loss(model: TransformerLm, vocab: Vocab, query: str, pair: PrefixSuffixPair):
    """Mean cross-entropy over the suffix tokens of one example."""
    ids, start, end = encode_pair(vocab, query, pair)
    if end == start:
        raise ValueError("pair_loss: suffix encodes to no tokens")
    if len(ids) > model.config.context_len:
        raise ValueError(
            f"pair_loss: example length {len(ids)} exceeds context {model.config.context_len}"
        )
    logits = model.forward_logits(ids[:-1])
    targets = ids[1:]
    # label position j predicts ids[j+1]; suffix tokens occupy [start, end)
    mask = np.zeros(len(targets), dtype=bool)
    mask[start - 1 : end - 1] = True
    return T.masked_cross_entropy(logits, targets, mask)


def adaptation_loss(model: TransformerLm, vocab: Vocab, query: str, pairs: list[PrefixSuffixPair]):
    """Sum of per-example losses (evaluation only, no gradients)."""
    if not pairs:
        raise ValueError("adaptation_loss: no pairs; caller should skip adaptation")
    with T.no_grad():
        return sum(float(pair_loss(model, vocab, query, p).data) for p in pairs)


def optimizer_step(params, grads, state: OptimizerState, config: AdaptationConfig) -> None:
    """Apply one update from already-averaged gradients.

    AdamW uses bias-corrected moments with decoupled weight decay (decay acts
    on the parameter directly, scaled by the learning rate). plain-sgd applies
    the averaged gradient as-is.
    """
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("optimizer_step: non-finite gradient")
    lr = config.learning_rate
    if config.optimizer == "plain-sgd":
        for p, g in zip(params, grads):
            p.data -= lr * g
        return
    state.t += 1
    bc1 = 1.0 - config.beta1**state.t
    bc2 = 1.0 - config.beta2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= config.beta1
        m += (1.0 - config.beta1) * g
        v *= config.beta2
        v += (1.0 - config.beta2) * g * g
        mhat = m / bc1
        vhat = v / bc2
        p.data -= lr * (mhat / (np.sqrt(vhat) + config.epsilon) + config.weight_decay * p.data)


def adapt(
    model: TransformerLm,
    vocab: Vocab,
    query: str,
    pairs: list[PrefixSuffixPair],
    config: AdaptationConfig,
    pristine: ParameterSnapshot | None = None,
) -> AdaptationTrace:
    """Run one adaptation pass over `pairs`, leaving the model adapted.

    The model must still be at its pre-trained snapshot; when `pristine` is
    given this is asserted via the mutation counter, otherwise a snapshot is
    captured here. On any non-finite loss or gradient the snapshot is
    restored and AdaptationError raised.
    """
    if not pairs:
        raise ValueError("adapt: empty pair list; caller should skip adaptation")
    if pristine is not None:
        if model.generation != pristine.generation:
            raise ValueError(
                "adapt: model has been mutated since the pristine snapshot was taken"
            )
    else:
        pristine = model.snapshot()

    params = model.parameters()
    state = OptimizerState(params)
    trace = AdaptationTrace()
    t0 = time.perf_counter()
    model.zero_grad()
    pending = 0

    def flush(count: int):
        grads = [
            (p.grad if p.grad is not None else np.zeros_like(p.data)) / count for p in params
        ]
        norm = math.sqrt(sum(float(np.square(g).sum()) for g in grads))
        if not math.isfinite(norm):
            raise FloatingPointError("adapt: non-finite gradient norm")
        factor = T.clip_global_norm(grads, config.clip_norm)
        optimizer_step(params, grads, state, config)
        model.mark_mutation()
        trace.grad_norms.append(norm)
        trace.clip_factors.append(factor)
        trace.updates += 1
        model.zero_grad()

    try:
        for pair in pairs:
            loss = pair_loss(model, vocab, query, pair)
            value = float(loss.data)
            if not math.isfinite(value):
                raise FloatingPointError(f"adapt: non-finite loss on pair from {pair.source_id!r}")
            trace.pair_losses.append(value)
            T.backward(loss)
            pending += 1
            if pending == config.accumulation_steps:
                flush(pending)
                pending = 0
        if pending:
            flush(pending)
    except FloatingPointError as exc:
        model.restore(pristine)
        trace.seconds = time.perf_counter() - t0
        raise AdaptationError(str(exc), trace) from exc

    trace.seconds = time.perf_counter() - t0
    return trace
