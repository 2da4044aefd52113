"""Synthetic domain-shift benchmark for desk-scale experiments.

Each domain gets its own disjoint content vocabulary (entities, attributes,
values, a domain tag) and one passage per fact:

    in the <tag> archive, the <attr> of <entity> is <value>.

Questions ask "what is the <attr> of <entity>?" and the gold answer is the
value, which occurs verbatim in exactly one passage. One domain is held out:
its passages are retrievable but none of its content words appear in the
pretraining text, so answering its questions requires using the retrieved
context, not pretrained weights.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .pipeline import QueryRecord, format_prompt
from .retrieval import Document, build_index

_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"

# words used by the passage/question/prompt templates, never as content words
TEMPLATE_WORDS = frozenset(
    "in the archive of is what context question answer".split()
)

DEFAULT_N_DOMAINS = 5
DEFAULT_FACTS_PER_DOMAIN = 300
DEFAULT_QUERIES = 200
ATTRS_PER_DOMAIN = 5


class _WordGen:
    """Deterministic pseudo-word source with global uniqueness."""

    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.used = set(TEMPLATE_WORDS)

    def word(self, syllables: int = 2) -> str:
        while True:
            w = "".join(
                _CONSONANTS[self.rng.integers(len(_CONSONANTS))]
                + _VOWELS[self.rng.integers(len(_VOWELS))]
                for _ in range(syllables)
            )
            if w not in self.used:
                self.used.add(w)
                return w


@dataclass
class DomainSpec:
    name: str
    tag: str
    attrs: list[str]
    entities: list[str]
    facts: list[tuple[str, str, str]]  # (entity, attr, value)


@dataclass
class SyntheticBenchmark:
    seed: int
    domains: list[DomainSpec]
    held_out: str
    documents: list[Document]
    pretrain_lines: list[str]
    queries: list[QueryRecord]
    meta: dict = field(default_factory=dict)


def passage_text(tag: str, entity: str, attr: str, value: str) -> str:
    return f"in the {tag} archive, the {attr} of {entity} is {value}."


def question_text(entity: str, attr: str) -> str:
    return f"what is the {attr} of {entity}?"


def answer_text(entity: str, attr: str, value: str) -> str:
    # full restatement: generation then walks the same token chain that
    # passage suffixes train, which is what lets adaptation updates transfer
    return f"the {attr} of {entity} is {value}."


def generate_benchmark(
    seed: int,
    n_domains: int = DEFAULT_N_DOMAINS,
    facts_per_domain: int = DEFAULT_FACTS_PER_DOMAIN,
    queries_per_domain: int = DEFAULT_QUERIES,
    qa_examples_per_domain: int = 150,
    copy_examples: int = 400,
    copy_pool_size: int = 150,
    context_k: int = 5,
) -> SyntheticBenchmark:
    """Build the benchmark deterministically from `seed`.

    The last domain is held out. Pretraining lines contain the other domains'
    fact passages plus prompt-formatted QA examples whose contexts come from a
    BM25 index over pretraining-domain passages only, so no held-out content
    word can leak into the pretraining text.

    `copy_examples` QA lines are built from one-off random combinations of a
    shared word pool; their answers exist only in the example's own context,
    which makes memorization useless and trains an answer-extraction circuit
    that does not depend on any particular content word.
    """
    if n_domains < 2:
        raise ValueError("generate_benchmark: need at least two domains")
    rng = np.random.default_rng(seed)
    gen = _WordGen(rng)

    domains: list[DomainSpec] = []
    for d in range(n_domains):
        tag = gen.word(3)
        attrs = [gen.word(2) for _ in range(ATTRS_PER_DOMAIN)]
        # one fact per entity: the entity word is a unique key for its passage
        entities = [gen.word(3) for _ in range(facts_per_domain)]
        facts = [(e, attrs[i % len(attrs)], gen.word(3)) for i, e in enumerate(entities)]
        domains.append(DomainSpec(name=f"domain-{tag}", tag=tag, attrs=attrs, entities=entities, facts=facts))
    held_out = domains[-1]

    documents: list[Document] = []
    for spec in domains:
        for i, (e, a, v) in enumerate(spec.facts):
            documents.append(
                Document(id=f"{spec.name}-p{i:04d}", domain=spec.name, text=passage_text(spec.tag, e, a, v))
            )

    # Supervision for the pretraining domains, three forms per sampled fact:
    # the bare passage, a prompt-formatted QA example (teaches the answer
    # slot), and a question <sep> passage line matching the shape of the
    # test-time adaptation inputs.
    pretrain_docs = [doc for doc in documents if doc.domain != held_out.name]
    pretrain_index = build_index(pretrain_docs)
    pretrain_lines: list[str] = [doc.text for doc in pretrain_docs]
    for spec in domains[:-1]:
        n_qa = min(qa_examples_per_domain, len(spec.facts))
        picks = rng.choice(len(spec.facts), size=n_qa, replace=False)
        for fi in sorted(int(i) for i in picks):
            e, a, v = spec.facts[fi]
            q = question_text(e, a)
            ctx = [doc.text for doc, _ in pretrain_index.retrieve(q, context_k)]
            pretrain_lines.append(
                format_prompt(q, ctx).replace("\n", " ") + " " + answer_text(e, a, v)
            )
            pretrain_lines.append(f"{q} <sep> {passage_text(spec.tag, e, a, v)}")

    # copy-task examples: fresh (entity, value) pairings from a fixed pool,
    # the matching passage at a random context position
    pool = [gen.word(3) for _ in range(copy_pool_size)]
    for _ in range(copy_examples):
        picks = rng.choice(len(pool), size=2 + 2 * context_k, replace=False)
        tag, attr = pool[picks[0]], pool[picks[1]]
        entities = [pool[i] for i in picks[2 : 2 + context_k]]
        values = [pool[i] for i in picks[2 + context_k :]]
        slot = int(rng.integers(context_k))
        ctx = [passage_text(tag, e, attr, v) for e, v in zip(entities, values)]
        q = question_text(entities[slot], attr)
        pretrain_lines.append(
            format_prompt(q, ctx).replace("\n", " ")
            + " "
            + answer_text(entities[slot], attr, values[slot])
        )
        pretrain_lines.append(f"{q} <sep> {ctx[slot]}")

    queries: list[QueryRecord] = []
    n_q = min(queries_per_domain, len(held_out.facts))
    picks = rng.choice(len(held_out.facts), size=n_q, replace=False)
    for j, fi in enumerate(sorted(int(i) for i in picks)):
        e, a, v = held_out.facts[fi]
        queries.append(
            QueryRecord(
                id=f"{held_out.name}-q{j:04d}",
                domain=held_out.name,
                question=question_text(e, a),
                answers=[v],
            )
        )

    meta = {
        "seed": seed,
        "n_domains": n_domains,
        "facts_per_domain": facts_per_domain,
        "queries": len(queries),
        "held_out": held_out.name,
        "domains": [d.name for d in domains],
        "documents": len(documents),
        "pretrain_lines": len(pretrain_lines),
    }
    return SyntheticBenchmark(
        seed=seed,
        domains=domains,
        held_out=held_out.name,
        documents=documents,
        pretrain_lines=pretrain_lines,
        queries=queries,
        meta=meta,
    )


def write_benchmark(bench: SyntheticBenchmark, out_dir) -> dict[str, Path]:
    """Write corpus.jsonl, pretrain.txt, dataset.jsonl and benchmark.json.

    Output bytes depend only on the benchmark contents, so identical seeds
    produce identical files.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "corpus": out / "corpus.jsonl",
        "pretrain": out / "pretrain.txt",
        "dataset": out / "dataset.jsonl",
        "meta": out / "benchmark.json",
    }
    with open(paths["corpus"], "w", encoding="utf-8") as fh:
        for doc in bench.documents:
            fh.write(json.dumps({"id": doc.id, "domain": doc.domain, "text": doc.text}, sort_keys=True) + "\n")
    with open(paths["pretrain"], "w", encoding="utf-8") as fh:
        for line in bench.pretrain_lines:
            fh.write(line + "\n")
    with open(paths["dataset"], "w", encoding="utf-8") as fh:
        for q in bench.queries:
            fh.write(
                json.dumps(
                    {"id": q.id, "domain": q.domain, "question": q.question, "answers": q.answers},
                    sort_keys=True,
                )
                + "\n"
            )
    with open(paths["meta"], "w", encoding="utf-8") as fh:
        json.dump(bench.meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return paths
