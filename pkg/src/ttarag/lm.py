"""Word-level tokenizer and a small causal transformer language model.

The model is deliberately tiny (CPU-friendly) but complete: learned token and
position embeddings, pre-norm attention/MLP blocks, snapshot/restore of every
parameter, greedy decoding, and a binary checkpoint format.

Reserved token ids (fixed): 0 = <pad>, 1 = <unk>, 2 = <eos>, 3 = <sep>.
"""

from __future__ import annotations

import json
import math
import re
import time
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

PAD, UNK, EOS, SEP = 0, 1, 2, 3
RESERVED = ["<pad>", "<unk>", "<eos>", "<sep>"]

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")
_RESERVED_RE = re.compile("(" + "|".join(re.escape(t) for t in RESERVED) + ")")
_RESERVED_IDS = {t: i for i, t in enumerate(RESERVED)}

CHECKPOINT_MAGIC = b"TTRAGCK1"
CHECKPOINT_VERSION = 1


def tokenize(text: str) -> list[str]:
    """Whitespace-delimited words, with each punctuation character on its own."""
    return _TOKEN_RE.findall(text)


class Vocab:
    """Bijective token<->id maps over the non-reserved tokens."""

    def __init__(self, tokens: list[str]):
        self.id_to_token = list(RESERVED) + list(tokens)
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise ValueError("Vocab: duplicate tokens")

    def __len__(self) -> int:
        return len(self.id_to_token)

    def encode(self, text: str) -> list[int]:
        """Token ids; reserved tokens may be written literally, e.g. "<sep>"."""
        if "<" not in text:
            return [self.token_to_id.get(t, UNK) for t in tokenize(text)]
        ids: list[int] = []
        for part in _RESERVED_RE.split(text):
            if part in _RESERVED_IDS:
                ids.append(_RESERVED_IDS[part])
            else:
                ids.extend(self.token_to_id.get(t, UNK) for t in tokenize(part))
        return ids

    def decode(self, ids: list[int]) -> str:
        words = [self.id_to_token[i] for i in ids if i not in (PAD, EOS, SEP)]
        return " ".join(words)


def build_vocab(corpus, min_freq: int = 1) -> Vocab:
    """Count word tokens in `corpus` (a string or an iterable of strings).

    Tokens seen fewer than `min_freq` times encode to <unk>. Token ids are
    assigned by descending frequency, ties broken alphabetically, so the
    mapping is deterministic for a given corpus.
    """
    if isinstance(corpus, str):
        corpus = [corpus]
    counts: Counter[str] = Counter()
    empty = True
    for chunk in corpus:
        toks = tokenize(chunk)
        if toks:
            empty = False
        counts.update(toks)
    if empty:
        raise ValueError("build_vocab: empty corpus")
    kept = sorted((t for t, c in counts.items() if c >= min_freq), key=lambda t: (-counts[t], t))
    return Vocab(kept)


@dataclass(frozen=True)
class LmConfig:
    vocab_size: int
    d_model: int = 128
    n_layers: int = 2
    n_heads: int = 4
    context_len: int = 256
    seed: int = 42

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"LmConfig: d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )


@dataclass
class ParameterSnapshot:
    """Bit-exact copy of every model parameter, keyed by name."""

    config: LmConfig
    values: dict[str, np.ndarray]
    generation: int = 0


class TransformerLm:
    """Pre-norm causal transformer over word tokens.

    One instance serves one query at a time: adaptation mutates parameters in
    place. `generation` counts in-place parameter mutations so callers can
    assert the model is still at a known snapshot.
    """

    def __init__(self, config: LmConfig):
        self.config = config
        self.generation = 0
        rng = np.random.default_rng(config.seed)
        D, V, C = config.d_model, config.vocab_size, config.context_len
        H = 4 * D

        def w(*shape):
            return Tensor(rng.normal(0.0, 0.02, size=shape), requires_grad=True)

        def zeros(*shape):
            return Tensor(np.zeros(shape), requires_grad=True)

        def ones(*shape):
            return Tensor(np.ones(shape), requires_grad=True)

        self.params: dict[str, Tensor] = {}
        p = self.params
        p["tok_emb"] = w(V, D)
        p["pos_emb"] = w(C, D)
        for i in range(config.n_layers):
            pre = f"layers.{i}."
            p[pre + "ln1.gain"], p[pre + "ln1.bias"] = ones(D), zeros(D)
            for name in ("wq", "wk", "wv", "wo"):
                p[pre + name] = w(D, D)
                p[pre + name + "_b"] = zeros(D)
            p[pre + "ln2.gain"], p[pre + "ln2.bias"] = ones(D), zeros(D)
            p[pre + "w1"], p[pre + "w1_b"] = w(D, H), zeros(H)
            p[pre + "w2"], p[pre + "w2_b"] = w(H, D), zeros(D)
        p["ln_f.gain"], p["ln_f.bias"] = ones(D), zeros(D)
        p["head"] = w(D, V)

        # Additive causal mask, reused across calls (constant, no grad).
        m = np.triu(np.full((C, C), -np.inf), k=1)
        self._mask = m

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_params(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def snapshot(self) -> ParameterSnapshot:
        values = {name: p.data.copy() for name, p in self.params.items()}
        return ParameterSnapshot(config=self.config, values=values, generation=self.generation)

    def restore(self, snap: ParameterSnapshot) -> None:
        if snap.config != self.config:
            raise ValueError(
                f"restore: snapshot config {snap.config} does not match model config {self.config}"
            )
        for name, p in self.params.items():
            src = snap.values[name]
            if src.shape != p.data.shape:
                raise ValueError(f"restore: shape mismatch for {name}")
            np.copyto(p.data, src)
        self.generation = snap.generation

    def mark_mutation(self):
        self.generation += 1

    def forward_logits(self, ids) -> Tensor:
        """Logits of shape (T, V); position t sees only ids[0..t]."""
        ids = np.asarray(ids, dtype=np.int64)
        Tlen = ids.shape[0]
        cfg = self.config
        if Tlen == 0:
            raise ValueError("forward_logits: empty input")
        if Tlen > cfg.context_len:
            raise ValueError(
                f"forward_logits: sequence length {Tlen} exceeds context {cfg.context_len}"
            )
        p = self.params
        D, Hn = cfg.d_model, cfg.n_heads
        dh = D // Hn
        inv_sqrt = 1.0 / math.sqrt(dh)
        mask = Tensor(self._mask[:Tlen, :Tlen])

        x = T.add(T.embedding(p["tok_emb"], ids), T.embedding(p["pos_emb"], np.arange(Tlen)))
        for i in range(cfg.n_layers):
            pre = f"layers.{i}."
            h = T.layer_norm(x, p[pre + "ln1.gain"], p[pre + "ln1.bias"])
            q = T.add(T.matmul(h, p[pre + "wq"]), p[pre + "wq_b"])
            k = T.add(T.matmul(h, p[pre + "wk"]), p[pre + "wk_b"])
            v = T.add(T.matmul(h, p[pre + "wv"]), p[pre + "wv_b"])
            heads = []
            for j in range(Hn):
                s, e = j * dh, (j + 1) * dh
                qj = T.slice_axis(q, 1, s, e)
                kj = T.slice_axis(k, 1, s, e)
                vj = T.slice_axis(v, 1, s, e)
                scores = T.add(T.scale(T.matmul(qj, T.transpose(kj)), inv_sqrt), mask)
                heads.append(T.matmul(T.softmax(scores), vj))
            o = T.add(T.matmul(T.concat(heads, axis=1), p[pre + "wo"]), p[pre + "wo_b"])
            x = T.add(x, o)
            h2 = T.layer_norm(x, p[pre + "ln2.gain"], p[pre + "ln2.bias"])
            m = T.add(T.matmul(h2, p[pre + "w1"]), p[pre + "w1_b"])
            m = T.add(T.matmul(T.gelu(m), p[pre + "w2"]), p[pre + "w2_b"])
            x = T.add(x, m)
        x = T.layer_norm(x, p["ln_f.gain"], p["ln_f.bias"])
        return T.matmul(x, p["head"])

    def greedy_generate(self, prompt_ids: list[int], max_new_tokens: int) -> list[int]:
        """Greedy continuation; ties resolve to the lowest token id.

        Stops at <eos>, at the token budget, or when the context fills up.
        Always reads the model's current parameters.
        """
        ids = list(prompt_ids)
        if len(ids) > self.config.context_len:
            raise ValueError("greedy_generate: prompt exceeds context length")
        out: list[int] = []
        with T.no_grad():
            for _ in range(max_new_tokens):
                if len(ids) >= self.config.context_len:
                    break
                logits = self.forward_logits(np.asarray(ids, dtype=np.int64))
                nxt = int(np.argmax(logits.data[-1]))
                out.append(nxt)
                if nxt == EOS:
                    break
                ids.append(nxt)
        return out


@dataclass
class PretrainResult:
    snapshot: ParameterSnapshot
    step_losses: list[float] = field(default_factory=list)
    held_out_loss: float = float("nan")
    seconds: float = 0.0


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, recent: list[float]):
        super().__init__(f"non-finite loss at step {step}; recent losses: {recent}")
        self.step = step
        self.recent = recent


def _stream_ids(lines: list[str], vocab: Vocab) -> tuple[np.ndarray, np.ndarray]:
    """Token stream with <eos> terminating each record, plus record offsets."""
    ids: list[int] = []
    starts: list[int] = []
    for line in lines:
        starts.append(len(ids))
        ids.extend(vocab.encode(line))
        ids.append(EOS)
    return np.asarray(ids, dtype=np.int64), np.asarray(starts, dtype=np.int64)


def stream_loss(model: TransformerLm, ids: np.ndarray, window: int = 128) -> float:
    """Mean next-token cross-entropy of a token stream, in eval mode."""
    total, count = 0.0, 0
    with T.no_grad():
        for start in range(0, len(ids) - 1, window):
            chunk = ids[start : start + window + 1]
            if len(chunk) < 2:
                break
            logits = model.forward_logits(chunk[:-1])
            logp = T.log_softmax_rows(logits.data)
            picked = logp[np.arange(len(chunk) - 1), chunk[1:]]
            total += -picked.sum()
            count += len(chunk) - 1
    return total / max(count, 1)


def pretrain(
    lines: list[str],
    vocab: Vocab,
    config: LmConfig,
    steps: int,
    lr: float = 1e-3,
    window: int = 128,
    held_out_fraction: float = 0.05,
    clip: float = 1.0,
    log_every: int = 0,
) -> tuple[TransformerLm, PretrainResult]:
    """Train a fresh model on the next-token task over a line corpus.

    Record boundaries are marked with <eos>. The tail `held_out_fraction` of
    the stream is kept aside to measure generalization. Raises
    TrainingDiverged on a non-finite loss.
    """
    if not lines:
        raise ValueError("pretrain: empty corpus")
    model = TransformerLm(config)
    ids, starts = _stream_ids(lines, vocab)
    n_held = max(int(len(ids) * held_out_fraction), window + 1)
    n_held = min(n_held, max(len(ids) // 5, 2))
    train_ids = ids[: len(ids) - n_held]
    held_ids = ids[len(ids) - n_held :]
    if len(train_ids) < 2:
        raise ValueError("pretrain: corpus too small to form a training window")
    # windows start at record boundaries so question/answer structure stays intact
    anchors = starts[starts < len(train_ids) - 1]
    if anchors.size == 0:
        anchors = np.asarray([0], dtype=np.int64)

    rng = np.random.default_rng(config.seed + 1)
    opt_m = [np.zeros_like(p.data) for p in model.parameters()]
    opt_v = [np.zeros_like(p.data) for p in model.parameters()]
    b1, b2, eps = 0.9, 0.999, 1e-8
    losses: list[float] = []
    t0 = time.perf_counter()
    for step in range(steps):
        start = int(anchors[rng.integers(anchors.size)])
        chunk = train_ids[start : start + window + 1]
        logits = model.forward_logits(chunk[:-1])
        loss = T.masked_cross_entropy(logits, chunk[1:], np.ones(len(chunk) - 1, dtype=bool))
        value = float(loss.data)
        if not math.isfinite(value):
            raise TrainingDiverged(step, losses[-5:])
        losses.append(value)
        model.zero_grad()
        T.backward(loss)
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in model.parameters()]
        T.clip_global_norm(grads, clip)
        t = step + 1
        bc1, bc2 = 1.0 - b1**t, 1.0 - b2**t
        for p, g, m, v in zip(model.parameters(), grads, opt_m, opt_v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        model.mark_mutation()
        if log_every and (step + 1) % log_every == 0:
            print(f"  step {step + 1}/{steps}  loss {value:.4f}")

    result = PretrainResult(
        snapshot=model.snapshot(),
        step_losses=losses,
        held_out_loss=stream_loss(model, held_ids, window),
        seconds=time.perf_counter() - t0,
    )
    return model, result


def save_checkpoint(path, model: TransformerLm, vocab: Vocab) -> None:
    """Binary layout: magic, u64 header length, JSON header, raw parameters.

    The header lists the model config, the vocab in id order, and a manifest
    of (name, shape) entries; parameter buffers follow concatenated in
    manifest order as little-endian float64.
    """
    cfg = model.config
    manifest = [[name, list(p.data.shape)] for name, p in model.params.items()]
    header = {
        "format_version": CHECKPOINT_VERSION,
        "config": {
            "vocab_size": cfg.vocab_size,
            "d_model": cfg.d_model,
            "n_layers": cfg.n_layers,
            "n_heads": cfg.n_heads,
            "context_len": cfg.context_len,
            "seed": cfg.seed,
        },
        "vocab": vocab.id_to_token,
        "params": manifest,
    }
    blob = json.dumps(header, ensure_ascii=False, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(len(blob).to_bytes(8, "little"))
        fh.write(blob)
        for name, _ in manifest:
            fh.write(model.params[name].data.astype("<f8").tobytes())


def load_checkpoint(path) -> tuple[TransformerLm, Vocab]:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"load_checkpoint: bad magic {magic!r}")
        (hlen,) = (int.from_bytes(fh.read(8), "little"),)
        header = json.loads(fh.read(hlen).decode("utf-8"))
        if header["format_version"] != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header['format_version']}")
        cfg = LmConfig(**header["config"])
        tokens = header["vocab"]
        if tokens[: len(RESERVED)] != RESERVED:
            raise ValueError("load_checkpoint: reserved tokens missing or reordered")
        vocab = Vocab(tokens[len(RESERVED) :])
        model = TransformerLm(cfg)
        for name, shape in header["params"]:
            n = int(np.prod(shape)) if shape else 1
            buf = np.frombuffer(fh.read(n * 8), dtype="<f8").reshape(shape)
            if name not in model.params or model.params[name].data.shape != tuple(shape):
                raise ValueError(f"load_checkpoint: unexpected parameter {name} {shape}")
            np.copyto(model.params[name].data, buf)
    return model, vocab
