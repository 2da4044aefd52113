"""Turn retrieved passages into prefix/suffix adaptation examples.

Passages below a minimum word count are dropped. A surviving passage is split
once: preferentially right after the first punctuation-terminated word that
leaves at least three words on each side, otherwise at the word-count
midpoint. Word counting is whitespace-based and the punctuation mark stays
with the prefix.
"""

from __future__ import annotations

from dataclasses import dataclass

SPLIT_MARKS = frozenset(".,;:!?")
MIN_SIDE_WORDS = 3
DEFAULT_MIN_PASSAGE_WORDS = 6


@dataclass(frozen=True)
class PrefixSuffixPair:
    prefix: str
    suffix: str
    source_id: str
    split_kind: str  # "punctuation" | "midpoint" | "whole" (unsegmented ablation)


def word_count(text: str) -> int:
    return len(text.split())


def filter_passages(passages: list, min_len: int) -> list:
    """Keep passages with at least `min_len` word tokens, preserving order."""
    if min_len < 0:
        raise ValueError("filter_passages: min_len must be >= 0")
    return [p for p in passages if word_count(_text_of(p)) >= min_len]


def _text_of(passage) -> str:
    return passage.text if hasattr(passage, "text") else passage


def split_passage(text: str, source_id: str = "") -> PrefixSuffixPair | None:
    """Split one passage into a prefix/suffix pair, or None if too short.

    Scans words left to right; the first word ending in . , ; : ! or ? that
    leaves >= 3 words on both sides wins. With no qualifying mark the first
    floor(n/2) words become the prefix. Passages under 6 words are
    unsplittable.
    """
    words = text.split()
    n = len(words)
    if n < 2 * MIN_SIDE_WORDS:
        return None
    cut = 0
    for i, w in enumerate(words, start=1):
        if w[-1] in SPLIT_MARKS and i >= MIN_SIDE_WORDS and n - i >= MIN_SIDE_WORDS:
            cut = i
            break
    if cut:
        kind = "punctuation"
    else:
        cut = n // 2
        kind = "midpoint"
    return PrefixSuffixPair(
        prefix=" ".join(words[:cut]),
        suffix=" ".join(words[cut:]),
        source_id=source_id,
        split_kind=kind,
    )


def whole_passage_example(text: str, source_id: str = "") -> PrefixSuffixPair:
    """Unsegmented variant: the whole passage is the prediction target."""
    return PrefixSuffixPair(prefix="", suffix=" ".join(text.split()), source_id=source_id, split_kind="whole")


def build_adaptation_set(
    ranked_passages: list,
    budget: int,
    min_len: int = DEFAULT_MIN_PASSAGE_WORDS,
    segmented: bool = True,
) -> list[PrefixSuffixPair]:
    """One example per passage in retrieval-rank order, stopping at `budget`.

    An empty result means the caller should skip adaptation.
    """
    if budget < 0:
        raise ValueError("build_adaptation_set: budget must be >= 0")
    pairs: list[PrefixSuffixPair] = []
    for passage in filter_passages(ranked_passages, min_len):
        if len(pairs) >= budget:
            break
        text = _text_of(passage)
        source = getattr(passage, "id", "")
        if segmented:
            pair = split_passage(text, source)
            if pair is not None:
                pairs.append(pair)
        else:
            pairs.append(whole_passage_example(text, source))
    return pairs
