"""Corpus ingestion and Okapi BM25 ranking.

Corpus files are UTF-8 JSON lines with fields `id`, `domain`, `text`. The
index is immutable once built; concurrent retrieval is safe.
"""

from __future__ import annotations

import json
import math
import re
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

_WORD_RE = re.compile(r"\w+")


def terms(text: str) -> list[str]:
    """Lowercased word terms; punctuation does not index."""
    return _WORD_RE.findall(text.lower())


@dataclass(frozen=True)
class Document:
    id: str
    domain: str
    text: str


@dataclass
class Bm25Index:
    """Okapi BM25 with idf = ln(1 + (D - df + 0.5) / (df + 0.5)).

    Zero-score documents are never returned: a document must share at least
    one term with the query to be a candidate.
    """

    k1: float = 1.2
    b: float = 0.75
    docs: list[Document] = field(default_factory=list)
    doc_ids: dict[str, int] = field(default_factory=dict)
    term_counts: list[Counter] = field(default_factory=list)
    doc_lens: list[int] = field(default_factory=list)
    doc_freq: Counter = field(default_factory=Counter)
    avg_len: float = 0.0
    # postings[term] = (doc positions, term frequencies), built lazily for speed
    _postings: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict, repr=False)
    _norm: np.ndarray | None = field(default=None, repr=False)
    _order: np.ndarray | None = field(default=None, repr=False)

    def add(self, doc: Document) -> None:
        if doc.id in self.doc_ids:
            raise ValueError(f"duplicate document id {doc.id!r}")
        self.doc_ids[doc.id] = len(self.docs)
        self.docs.append(doc)
        tc = Counter(terms(doc.text))
        self.term_counts.append(tc)
        self.doc_lens.append(sum(tc.values()))
        for t in tc:
            self.doc_freq[t] += 1

    def finalize(self) -> None:
        n = len(self.docs)
        self.avg_len = (sum(self.doc_lens) / n) if n else 0.0
        lens = np.asarray(self.doc_lens, dtype=np.float64)
        self._norm = self.k1 * (1.0 - self.b + self.b * lens / self.avg_len) if n else np.zeros(0)
        by_term: dict[str, tuple[list[int], list[int]]] = {}
        for pos, tc in enumerate(self.term_counts):
            for t, c in tc.items():
                slot = by_term.setdefault(t, ([], []))
                slot[0].append(pos)
                slot[1].append(c)
        self._postings = {
            t: (np.asarray(ps, dtype=np.int64), np.asarray(cs, dtype=np.float64))
            for t, (ps, cs) in by_term.items()
        }
        # rank of each doc position under ascending id ordering, for tie breaks
        order = sorted(range(n), key=lambda i: self.docs[i].id)
        ranks = np.empty(n, dtype=np.int64)
        for rank, pos in enumerate(order):
            ranks[pos] = rank
        self._order = ranks

    def idf(self, term: str) -> float:
        df = self.doc_freq.get(term, 0)
        n = len(self.docs)
        return math.log(1.0 + (n - df + 0.5) / (df + 0.5))

    def score(self, query_terms: list[str], doc_id: str) -> float:
        """Okapi score of one document for the given query terms."""
        if doc_id not in self.doc_ids:
            raise KeyError(f"unknown document id {doc_id!r}")
        pos = self.doc_ids[doc_id]
        tc = self.term_counts[pos]
        norm = self.k1 * (1.0 - self.b + self.b * self.doc_lens[pos] / self.avg_len)
        s = 0.0
        for t in query_terms:
            f = tc.get(t, 0)
            if f == 0:
                continue
            s += self.idf(t) * f * (self.k1 + 1.0) / (f + norm)
        return s

    def retrieve(self, query: str, k: int) -> list[tuple[Document, float]]:
        """Top-k documents by descending score; ties break by ascending id."""
        if k < 1:
            raise ValueError("retrieve: k must be >= 1")
        n = len(self.docs)
        if n == 0:
            return []
        scores = np.zeros(n)
        for t in terms(query):
            post = self._postings.get(t)
            if post is None:
                continue
            pos, f = post
            scores[pos] += self.idf(t) * f * (self.k1 + 1.0) / (f + self._norm[pos])
        hit = np.flatnonzero(scores > 0.0)
        if hit.size == 0:
            return []
        picked = hit[np.lexsort((self._order[hit], -scores[hit]))][:k]
        return [(self.docs[i], float(scores[i])) for i in picked]


def build_index(docs: list[Document], k1: float = 1.2, b: float = 0.75) -> Bm25Index:
    index = Bm25Index(k1=k1, b=b)
    for d in docs:
        index.add(d)
    index.finalize()
    return index


def ingest(path, k1: float = 1.2, b: float = 0.75):
    """Read a JSONL corpus file into (documents, index, malformed lines).

    Malformed lines are skipped and reported as (line number, reason).
    A duplicate id aborts ingestion, naming both offending lines.
    """
    docs: list[Document] = []
    malformed: list[tuple[int, str]] = []
    seen: dict[str, int] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                malformed.append((lineno, f"invalid JSON: {exc.msg}"))
                continue
            if not isinstance(rec, dict) or not {"id", "domain", "text"} <= rec.keys():
                malformed.append((lineno, "missing required fields id/domain/text"))
                continue
            doc_id = str(rec["id"])
            if doc_id in seen:
                raise ValueError(
                    f"duplicate document id {doc_id!r} on lines {seen[doc_id]} and {lineno}"
                )
            seen[doc_id] = lineno
            docs.append(Document(id=doc_id, domain=str(rec["domain"]), text=str(rec["text"])))
    index = build_index(docs, k1=k1, b=b)
    return docs, index, malformed
