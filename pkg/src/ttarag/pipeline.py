"""End-to-end per-query flow: retrieve, segment, adapt, generate, restore.

Three modes share the same retrieval and prompting:

* naive   — generate with the pristine model, no parameter updates
* ttarag  — adapt on prefix/suffix pairs before generating, then restore
* wo-seg  — ablation: adapt on whole passages (no segmentation)

A pipeline instance owns its model exclusively while answering a query; the
pristine snapshot is immutable and may be shared across replicas.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

from .adapt import AdaptationConfig, AdaptationError, AdaptationTrace, adapt, encode_pair
from .lm import ParameterSnapshot, TransformerLm, Vocab
from .retrieval import Bm25Index, Document
from .segment import DEFAULT_MIN_PASSAGE_WORDS, build_adaptation_set

MODE_NAIVE = "naive"
MODE_TTARAG = "ttarag"
MODE_WOSEG = "wo-seg"
MODES = (MODE_NAIVE, MODE_TTARAG, MODE_WOSEG)


@dataclass(frozen=True)
class QueryRecord:
    id: str
    domain: str
    question: str
    answers: list[str]

    def __post_init__(self):
        if not self.question.strip():
            raise ValueError(f"QueryRecord {self.id!r}: empty question")
        if not self.answers:
            raise ValueError(f"QueryRecord {self.id!r}: no gold answers")


@dataclass
class Answer:
    query_id: str
    text: str
    mode: str
    trace: AdaptationTrace | None = None
    fallback: str | None = None  # set when an adapting mode answered naively
    timings: dict[str, float] = field(default_factory=dict)


def load_dataset(path) -> list[QueryRecord]:
    """QA records from a JSONL file with id, domain, question, answers."""
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            try:
                records.append(
                    QueryRecord(
                        id=str(rec["id"]),
                        domain=str(rec["domain"]),
                        question=str(rec["question"]),
                        answers=[str(a) for a in rec["answers"]],
                    )
                )
            except (KeyError, ValueError) as exc:
                raise ValueError(f"{path}, line {lineno}: {exc}") from exc
    return records


def format_prompt(question: str, passages: list[str]) -> str:
    """The fixed generation template; also used to format pretraining text."""
    lines = ["Context:"]
    lines.extend(passages)
    lines.append("Question: " + question)
    lines.append("Answer:")
    return "\n".join(lines)


@dataclass
class PipelineConfig:
    retrieval_k: int = 5
    min_passage_words: int = DEFAULT_MIN_PASSAGE_WORDS
    max_new_tokens: int = 12
    adaptation: AdaptationConfig = field(default_factory=AdaptationConfig)


class Pipeline:
    def __init__(
        self,
        model: TransformerLm,
        vocab: Vocab,
        index: Bm25Index,
        config: PipelineConfig | None = None,
        pristine: ParameterSnapshot | None = None,
    ):
        self.model = model
        self.vocab = vocab
        self.index = index
        self.config = config or PipelineConfig()
        self.pristine = pristine or model.snapshot()

    def assemble_prompt(self, question: str, passages: list[Document]) -> str:
        """Deterministic prompt, truncated to fit the context window.

        Room is reserved for `max_new_tokens`; when the full passage list does
        not fit, the lowest-ranked passages are dropped first.
        """
        budget = self.model.config.context_len - self.config.max_new_tokens
        texts = [p.text for p in passages]
        while True:
            prompt = format_prompt(question, texts)
            if len(self.vocab.encode(prompt)) <= budget:
                return prompt
            if not texts:
                raise ValueError("assemble_prompt: question alone exceeds the context window")
            texts.pop()

    def _generate(self, prompt: str) -> str:
        ids = self.vocab.encode(prompt)
        out = self.model.greedy_generate(ids, self.config.max_new_tokens)
        return self.vocab.decode(out)

    def _retrieve(self, question: str) -> list[Document]:
        return [doc for doc, _ in self.index.retrieve(question, self.config.retrieval_k)]

    def answer_naive(self, query: QueryRecord) -> Answer:
        timings = {}
        t0 = time.perf_counter()
        passages = self._retrieve(query.question)
        timings["retrieve"] = time.perf_counter() - t0
        t0 = time.perf_counter()
        text = self._generate(self.assemble_prompt(query.question, passages))
        timings["generate"] = time.perf_counter() - t0
        return Answer(query_id=query.id, text=text, mode=MODE_NAIVE, timings=timings)

    def answer_ttarag(self, query: QueryRecord) -> Answer:
        return self._answer_adapted(query, MODE_TTARAG, segmented=True)

    def answer_woseg(self, query: QueryRecord) -> Answer:
        return self._answer_adapted(query, MODE_WOSEG, segmented=False)

    def _answer_adapted(self, query: QueryRecord, mode: str, segmented: bool) -> Answer:
        if self.model.generation != self.pristine.generation:
            raise RuntimeError("pipeline: model is not at the pristine snapshot")
        cfg = self.config
        timings = {}
        t0 = time.perf_counter()
        passages = self._retrieve(query.question)
        timings["retrieve"] = time.perf_counter() - t0

        t0 = time.perf_counter()
        pairs = build_adaptation_set(
            passages, cfg.adaptation.pair_budget, cfg.min_passage_words, segmented=segmented
        )
        # examples that cannot fit the context window alongside the query are unusable
        limit = self.model.config.context_len
        pairs = [
            p for p in pairs if len(encode_pair(self.vocab, query.question, p)[0]) <= limit
        ]
        timings["segment"] = time.perf_counter() - t0

        trace: AdaptationTrace | None = None
        fallback: str | None = None
        if pairs:
            t0 = time.perf_counter()
            try:
                trace = adapt(
                    self.model, self.vocab, query.question, pairs, cfg.adaptation, self.pristine
                )
            except AdaptationError as exc:
                trace = exc.trace
                fallback = f"adaptation failed: {exc}"
            timings["adapt"] = time.perf_counter() - t0
        else:
            fallback = "no adaptation examples"
            timings["adapt"] = 0.0

        try:
            t0 = time.perf_counter()
            text = self._generate(self.assemble_prompt(query.question, passages))
            timings["generate"] = time.perf_counter() - t0
        finally:
            self.model.restore(self.pristine)
        return Answer(
            query_id=query.id, text=text, mode=mode, trace=trace, fallback=fallback, timings=timings
        )

    def answer(self, query: QueryRecord, mode: str) -> Answer:
        if mode == MODE_NAIVE:
            return self.answer_naive(query)
        if mode == MODE_TTARAG:
            return self.answer_ttarag(query)
        if mode == MODE_WOSEG:
            return self.answer_woseg(query)
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
