"""Judges, accuracy/delta reports, sweeps and timing accounting.

The default judge is normalized containment: a prediction is correct when
some gold answer's token sequence occurs contiguously in the normalized
prediction. A token-F1 judge and a remote JSON-over-HTTP judge can be
swapped in; judges are pure functions of (prediction, golds).
"""

from __future__ import annotations

import json
import re
import string
import time
import urllib.request
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

from .lm import TransformerLm
from .pipeline import MODE_NAIVE, Pipeline, PipelineConfig, QueryRecord

_PUNCT_TABLE = str.maketrans("", "", string.punctuation)

JUDGE_KINDS = ("exact", "token-f1", "remote")
F1_THRESHOLD = 0.5


def normalize(text: str) -> str:
    """Lowercase, strip punctuation, collapse whitespace."""
    return " ".join(text.lower().translate(_PUNCT_TABLE).split())


@dataclass(frozen=True)
class Judgement:
    query_id: str
    verdict: str  # "correct" | "incorrect"
    judge_kind: str

    @property
    def correct(self) -> bool:
        return self.verdict == "correct"


def judge_exact(prediction: str, golds: list[str]) -> str:
    """Correct iff a normalized gold occurs as a contiguous token run."""
    pred = normalize(prediction).split()
    for gold in golds:
        g = normalize(gold).split()
        if not g or len(g) > len(pred):
            continue
        if any(pred[i : i + len(g)] == g for i in range(len(pred) - len(g) + 1)):
            return "correct"
    return "incorrect"


def judge_f1(prediction: str, gold: str) -> float:
    """Token-level F1 over normalized bags of words."""
    p = Counter(normalize(prediction).split())
    g = Counter(normalize(gold).split())
    if not p or not g:
        return 1.0 if p == g else 0.0
    overlap = sum((p & g).values())
    if overlap == 0:
        return 0.0
    precision = overlap / sum(p.values())
    recall = overlap / sum(g.values())
    return 2 * precision * recall / (precision + recall)


class RemoteJudge:
    """One POST per judgement.

    Request body:  {"question": str, "prediction": str, "golds": [str, ...]}
    Response body: {"verdict": "correct" | "incorrect"}
    """

    def __init__(self, url: str, timeout: float = 10.0):
        self.url = url
        self.timeout = timeout

    def __call__(self, question: str, prediction: str, golds: list[str]) -> str:
        payload = json.dumps(
            {"question": question, "prediction": prediction, "golds": list(golds)}
        ).encode("utf-8")
        req = urllib.request.Request(
            self.url, data=payload, headers={"Content-Type": "application/json"}
        )
        with urllib.request.urlopen(req, timeout=self.timeout) as resp:
            body = json.loads(resp.read().decode("utf-8"))
        verdict = body.get("verdict")
        if verdict not in ("correct", "incorrect"):
            raise ValueError(f"remote judge returned invalid verdict {verdict!r}")
        return verdict


def judge(question: str, prediction: str, golds: list[str], kind: str, remote: RemoteJudge | None = None) -> str:
    if kind == "exact":
        return judge_exact(prediction, golds)
    if kind == "token-f1":
        best = max(judge_f1(prediction, g) for g in golds)
        return "correct" if best >= F1_THRESHOLD else "incorrect"
    if kind == "remote":
        if remote is None:
            raise ValueError("remote judge requested but no judge URL configured")
        return remote(question, prediction, golds)
    raise ValueError(f"unknown judge kind {kind!r}; expected one of {JUDGE_KINDS}")


@dataclass
class DomainStats:
    n: int = 0
    correct: int = 0

    @property
    def accuracy(self) -> float:
        return 100.0 * self.correct / self.n if self.n else 0.0


@dataclass
class RunReport:
    mode: str
    judge_kind: str
    per_domain: dict[str, DomainStats] = field(default_factory=dict)
    n_queries: int = 0
    n_correct: int = 0
    delta_vs_naive: dict[str, float] = field(default_factory=dict)
    loss_trajectory: list[float] = field(default_factory=list)
    fallbacks: int = 0
    total_seconds: float = 0.0
    answers: list = field(default_factory=list)
    judgements: list[Judgement] = field(default_factory=list)

    @property
    def overall_accuracy(self) -> float:
        return 100.0 * self.n_correct / self.n_queries if self.n_queries else 0.0

    @property
    def avg_seconds(self) -> float:
        return self.total_seconds / self.n_queries if self.n_queries else 0.0


def _attach_delta(report: RunReport, baseline: RunReport) -> None:
    for dom, stats in report.per_domain.items():
        base = baseline.per_domain.get(dom)
        if base is not None:
            report.delta_vs_naive[dom] = stats.accuracy - base.accuracy
    report.delta_vs_naive["overall"] = report.overall_accuracy - baseline.overall_accuracy


def evaluate_run(
    records: list[QueryRecord],
    mode: str,
    pipeline: Pipeline,
    judge_kind: str = "exact",
    remote: RemoteJudge | None = None,
    baseline: RunReport | None = None,
    parallel: int = 1,
) -> RunReport:
    """Answer every record in `mode`, judge, and aggregate.

    Per-query wall-clock covers the answer call only. For adapted modes the
    delta row needs naive accuracies: pass a precomputed `baseline`, or one
    naive pass will be run here first. With parallel > 1, replica pipelines
    answer disjoint shards; results merge sorted by query id.
    """
    if not records:
        raise ValueError("evaluate_run: empty dataset")
    if baseline is None and mode != MODE_NAIVE:
        baseline = evaluate_run(records, MODE_NAIVE, pipeline, judge_kind, remote, parallel=parallel)

    def run_one(pl: Pipeline, rec: QueryRecord):
        t0 = time.perf_counter()
        ans = pl.answer(rec, mode)
        elapsed = time.perf_counter() - t0
        return rec, ans, elapsed

    results = []
    if parallel <= 1:
        for rec in records:
            results.append(run_one(pipeline, rec))
    else:
        replicas = [pipeline] + [
            replicate_pipeline(pipeline) for _ in range(parallel - 1)
        ]
        shards = [records[i::parallel] for i in range(parallel)]
        with ThreadPoolExecutor(max_workers=parallel) as pool:
            futures = [
                pool.submit(lambda pl=pl, sh=sh: [run_one(pl, r) for r in sh])
                for pl, sh in zip(replicas, shards)
            ]
            for fut in futures:
                results.extend(fut.result())
    results.sort(key=lambda item: item[0].id)

    report = RunReport(mode=mode, judge_kind=judge_kind)
    loss_sums: list[float] = []
    loss_counts: list[int] = []
    for rec, ans, elapsed in results:
        verdict = judge(rec.question, ans.text, rec.answers, judge_kind, remote)
        stats = report.per_domain.setdefault(rec.domain, DomainStats())
        stats.n += 1
        report.n_queries += 1
        if verdict == "correct":
            stats.correct += 1
            report.n_correct += 1
        if ans.fallback is not None:
            report.fallbacks += 1
        if ans.trace is not None:
            for i, value in enumerate(ans.trace.pair_losses):
                if i == len(loss_sums):
                    loss_sums.append(0.0)
                    loss_counts.append(0)
                loss_sums[i] += value
                loss_counts[i] += 1
        report.total_seconds += elapsed
        report.answers.append(ans)
        report.judgements.append(Judgement(query_id=rec.id, verdict=verdict, judge_kind=judge_kind))
    report.loss_trajectory = [s / c for s, c in zip(loss_sums, loss_counts)]
    if baseline is not None:
        _attach_delta(report, baseline)
    return report


def replicate_pipeline(pipeline: Pipeline) -> Pipeline:
    """Independent model instance restored from the shared pristine snapshot."""
    model = TransformerLm(pipeline.model.config)
    model.restore(pipeline.pristine)
    return Pipeline(
        model,
        pipeline.vocab,
        pipeline.index,
        config=pipeline.config,
        pristine=pipeline.pristine,
    )


@dataclass
class SweepRow:
    setting: str
    value: float | int | None
    accuracy: float
    avg_seconds: float


SWEEP_AXES = ("learning_rate", "pair_count")


def sweep(
    records: list[QueryRecord],
    axis: str,
    grid: list[float],
    pipeline: Pipeline,
    judge_kind: str = "exact",
    mode: str = "ttarag",
    parallel: int = 1,
) -> list[SweepRow]:
    """One evaluation per grid point, all else fixed; first row is the naive baseline."""
    if axis not in SWEEP_AXES:
        raise ValueError(f"unknown sweep axis {axis!r}; expected one of {SWEEP_AXES}")
    if not grid:
        raise ValueError("sweep: empty grid")
    baseline = evaluate_run(records, MODE_NAIVE, pipeline, judge_kind, parallel=parallel)
    rows = [SweepRow("naive", None, baseline.overall_accuracy, baseline.avg_seconds)]
    base_cfg = pipeline.config
    for value in grid:
        if axis == "learning_rate":
            adapt_cfg = _replace_adaptation(base_cfg, learning_rate=float(value))
            label = format(float(value), "g")
        else:
            adapt_cfg = _replace_adaptation(base_cfg, pair_budget=int(value))
            label = str(int(value))
        swept = Pipeline(
            pipeline.model, pipeline.vocab, pipeline.index, config=adapt_cfg, pristine=pipeline.pristine
        )
        rep = evaluate_run(records, mode, swept, judge_kind, baseline=baseline, parallel=parallel)
        rows.append(SweepRow(label, value, rep.overall_accuracy, rep.avg_seconds))
    return rows


def _replace_adaptation(cfg: PipelineConfig, **changes) -> PipelineConfig:
    from dataclasses import replace

    return replace(cfg, adaptation=replace(cfg.adaptation, **changes))
