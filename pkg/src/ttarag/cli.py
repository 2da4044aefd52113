"""Command-line entry point.

Subcommands: gen-bench, pretrain, index, run, sweep, ablate, report.
Every command reads an optional flat key=value config file, applies flag
overrides, echoes the effective config into the output directory, and exits
0 on success, 1 on usage errors, 2 on runtime failures.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import benchmark as bench_mod
from . import evaluation, reporting, retrieval
from .adapt import AdaptationConfig
from .config import RunConfig, UsageError, echo_config, merge_config, parse_config_file, require_paths
from .lm import LmConfig, build_vocab, load_checkpoint, pretrain, save_checkpoint
from .pipeline import MODE_NAIVE, MODE_TTARAG, MODE_WOSEG, Pipeline, PipelineConfig, load_dataset


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int)


def _add_model_flags(p: argparse.ArgumentParser):
    p.add_argument("--d-model", dest="d_model", type=int)
    p.add_argument("--n-layers", dest="n_layers", type=int)
    p.add_argument("--n-heads", dest="n_heads", type=int)
    p.add_argument("--context-len", dest="context_len", type=int)


def _add_adaptation_flags(p: argparse.ArgumentParser):
    p.add_argument("--lr", type=float)
    p.add_argument("--accum-steps", dest="accum_steps", type=int)
    p.add_argument("--pair-budget", dest="pair_budget", type=int)
    p.add_argument("--clip-norm", dest="clip_norm", type=float)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--optimizer", choices=["adamw", "plain-sgd"])


def _add_run_flags(p: argparse.ArgumentParser):
    p.add_argument("--corpus")
    p.add_argument("--dataset")
    p.add_argument("--checkpoint")
    p.add_argument("--mode", choices=["naive", "ttarag", "wo-seg", "woseg"])
    p.add_argument("--k", type=int)
    p.add_argument("--judge", choices=["exact", "token-f1", "remote"])
    p.add_argument("--judge-url", dest="judge_url")
    p.add_argument("--max-new-tokens", dest="max_new_tokens", type=int)
    p.add_argument("--min-passage-words", dest="min_passage_words", type=int)
    p.add_argument("--parallel", type=int)
    p.add_argument("--limit", type=int, help="evaluate only the first N dataset records")
    _add_adaptation_flags(p)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ttarag",
        description="Retrieval-augmented QA with per-query test-time adaptation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-bench", help="generate the synthetic domain-shift benchmark")
    _add_common(p)
    p.add_argument("--domains", type=int)
    p.add_argument("--facts-per-domain", dest="facts_per_domain", type=int)
    p.add_argument("--queries", type=int)

    p = sub.add_parser("pretrain", help="build the vocab and pretrain a checkpoint")
    _add_common(p)
    _add_model_flags(p)
    p.add_argument("--train-text", dest="train_text")
    p.add_argument("--corpus")
    p.add_argument("--dataset")
    p.add_argument("--steps", type=int)
    p.add_argument("--pretrain-lr", dest="pretrain_lr", type=float)
    p.add_argument("--window", type=int)
    p.add_argument("--min-freq", dest="min_freq", type=int)

    p = sub.add_parser("index", help="validate a corpus and write index statistics")
    _add_common(p)
    p.add_argument("--corpus")

    p = sub.add_parser("run", help="evaluate one pipeline mode over a dataset")
    _add_common(p)
    _add_run_flags(p)

    p = sub.add_parser("sweep", help="accuracy across a learning-rate or pair-count grid")
    _add_common(p)
    _add_run_flags(p)
    p.add_argument("--axis", choices=["lr", "learning_rate", "pairs", "pair_count"])
    p.add_argument("--grid", help="comma-separated grid values")

    p = sub.add_parser("ablate", help="compare segmented and unsegmented adaptation")
    _add_common(p)
    _add_run_flags(p)

    p = sub.add_parser("report", help="re-render reports from a run's answers file")
    _add_common(p)
    p.add_argument("--answers", required=False)
    p.add_argument("--dataset")
    p.add_argument("--judge", choices=["exact", "token-f1", "remote"])
    p.add_argument("--judge-url", dest="judge_url")

    return parser


def _config_from_args(args: argparse.Namespace) -> RunConfig:
    file_values = parse_config_file(args.config) if args.config else {}
    flag_values = {
        key: value
        for key, value in vars(args).items()
        if key not in ("command", "config", "answers") and value is not None
    }
    return merge_config(file_values, flag_values)


def _mode_of(cfg: RunConfig) -> str:
    return MODE_WOSEG if cfg.mode in ("wo-seg", "woseg") else cfg.mode


def _adaptation_config(cfg: RunConfig) -> AdaptationConfig:
    return AdaptationConfig(
        learning_rate=cfg.lr,
        accumulation_steps=cfg.accum_steps,
        pair_budget=cfg.pair_budget,
        clip_norm=cfg.clip_norm,
        weight_decay=cfg.weight_decay,
        beta1=cfg.beta1,
        beta2=cfg.beta2,
        epsilon=cfg.epsilon,
        optimizer=cfg.optimizer,
    )


def _load_pipeline(cfg: RunConfig) -> tuple[Pipeline, list]:
    require_paths(cfg, "corpus", "dataset", "checkpoint")
    model, vocab = load_checkpoint(cfg.checkpoint)
    _, index, malformed = retrieval.ingest(cfg.corpus)
    for lineno, reason in malformed:
        print(f"warning: {cfg.corpus}:{lineno}: {reason}", file=sys.stderr)
    records = load_dataset(cfg.dataset)
    if cfg.limit:
        records = records[: cfg.limit]
    pipe = Pipeline(
        model,
        vocab,
        index,
        config=PipelineConfig(
            retrieval_k=cfg.k,
            min_passage_words=cfg.min_passage_words,
            max_new_tokens=cfg.max_new_tokens,
            adaptation=_adaptation_config(cfg),
        ),
    )
    return pipe, records


def _remote(cfg: RunConfig):
    return evaluation.RemoteJudge(cfg.judge_url) if cfg.judge == "remote" else None


def cmd_gen_bench(cfg: RunConfig) -> int:
    bench = bench_mod.generate_benchmark(
        seed=cfg.seed,
        n_domains=cfg.domains,
        facts_per_domain=cfg.facts_per_domain,
        queries_per_domain=cfg.queries,
    )
    paths = bench_mod.write_benchmark(bench, cfg.out)
    echo_config(cfg, cfg.out)
    print(f"benchmark written to {cfg.out}: {bench.meta['documents']} passages, "
          f"{bench.meta['queries']} queries, held-out {bench.held_out}")
    for name, path in paths.items():
        print(f"  {name}: {path}")
    return 0


def cmd_pretrain(cfg: RunConfig) -> int:
    require_paths(cfg, "train_text")
    lines = Path(cfg.train_text).read_text(encoding="utf-8").splitlines()
    vocab_sources = list(lines)
    if cfg.corpus:
        require_paths(cfg, "corpus")
        docs, _, _ = retrieval.ingest(cfg.corpus)
        vocab_sources.extend(doc.text for doc in docs)
    if cfg.dataset:
        require_paths(cfg, "dataset")
        vocab_sources.extend(rec.question for rec in load_dataset(cfg.dataset))
    vocab = build_vocab(vocab_sources, min_freq=cfg.min_freq)
    lm_cfg = LmConfig(
        vocab_size=len(vocab),
        d_model=cfg.d_model,
        n_layers=cfg.n_layers,
        n_heads=cfg.n_heads,
        context_len=cfg.context_len,
        seed=cfg.seed,
    )
    print(f"vocab size {len(vocab)}; pretraining {cfg.steps} steps (window {cfg.window})")
    model, result = pretrain(
        lines, vocab, lm_cfg, steps=cfg.steps, lr=cfg.pretrain_lr, window=cfg.window,
        log_every=max(cfg.steps // 10, 1),
    )
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "checkpoint.bin"
    save_checkpoint(ckpt, model, vocab)
    reporting.write_pretrain_curve(result.step_losses, result.held_out_loss, out)
    echo_config(cfg, cfg.out)
    print(f"held-out loss {result.held_out_loss:.4f} after {result.seconds:.1f}s; checkpoint: {ckpt}")
    return 0


def cmd_index(cfg: RunConfig) -> int:
    require_paths(cfg, "corpus")
    docs, index, malformed = retrieval.ingest(cfg.corpus)
    for lineno, reason in malformed:
        print(f"warning: {cfg.corpus}:{lineno}: {reason}", file=sys.stderr)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    stats = {
        "documents": len(docs),
        "avg_len": index.avg_len,
        "k1": index.k1,
        "b": index.b,
        "terms": len(index.doc_freq),
        "doc_freq": dict(sorted(index.doc_freq.items())),
        "malformed_lines": [[n, r] for n, r in malformed],
    }
    path = out / "index_stats.json"
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(stats, fh, indent=2, sort_keys=True)
        fh.write("\n")
    echo_config(cfg, cfg.out)
    print(f"indexed {len(docs)} documents, {stats['terms']} terms; stats: {path}")
    return 0


def cmd_run(cfg: RunConfig) -> int:
    pipe, records = _load_pipeline(cfg)
    mode = _mode_of(cfg)
    report = evaluation.evaluate_run(
        records, mode, pipe, judge_kind=cfg.judge, remote=_remote(cfg), parallel=cfg.parallel
    )
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    reporting.write_answers(report, out / "answers.jsonl")
    baseline = None
    if mode != MODE_NAIVE and report.delta_vs_naive:
        # rebuild the naive row for the text table from the recorded deltas
        baseline = _baseline_from_delta(report)
    reporting.write_run_report(report, out, baseline)
    echo_config(cfg, cfg.out)
    print(reporting.render_text_table(report, baseline))
    return 0


def _baseline_from_delta(report: evaluation.RunReport) -> evaluation.RunReport:
    base = evaluation.RunReport(mode=MODE_NAIVE, judge_kind=report.judge_kind)
    for dom, stats in report.per_domain.items():
        delta = report.delta_vs_naive.get(dom, 0.0)
        n = stats.n
        correct = round((stats.accuracy - delta) * n / 100.0)
        base.per_domain[dom] = evaluation.DomainStats(n=n, correct=int(correct))
        base.n_queries += n
        base.n_correct += int(correct)
    return base


def cmd_sweep(cfg: RunConfig) -> int:
    pipe, records = _load_pipeline(cfg)
    axis = "learning_rate" if cfg.axis in ("lr", "learning_rate") else "pair_count"
    try:
        grid = [float(v) if axis == "learning_rate" else int(v) for v in cfg.grid.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"cannot parse grid {cfg.grid!r}") from None
    if not grid:
        raise UsageError("empty sweep grid")
    rows = evaluation.sweep(
        records, axis, grid, pipe, judge_kind=cfg.judge, mode=_mode_of(cfg), parallel=cfg.parallel
    )
    paths = reporting.write_sweep(rows, axis, cfg.out)
    echo_config(cfg, cfg.out)
    for row in rows:
        print(f"  {row.setting:>10}  acc {row.accuracy:5.1f}%  avg {row.avg_seconds:.3f}s")
    print(f"sweep artifacts: {paths['csv']}, {paths['figure']}")
    return 0


def cmd_ablate(cfg: RunConfig) -> int:
    pipe, records = _load_pipeline(cfg)
    naive = evaluation.evaluate_run(records, MODE_NAIVE, pipe, judge_kind=cfg.judge, parallel=cfg.parallel)
    reports = {MODE_NAIVE: naive}
    for mode in (MODE_TTARAG, MODE_WOSEG):
        reports[mode] = evaluation.evaluate_run(
            records, mode, pipe, judge_kind=cfg.judge, baseline=naive, parallel=cfg.parallel
        )
    paths = reporting.write_ablation(
        {m: reports[m] for m in (MODE_TTARAG, MODE_WOSEG, MODE_NAIVE)}, cfg.out
    )
    echo_config(cfg, cfg.out)
    for mode in (MODE_TTARAG, MODE_WOSEG, MODE_NAIVE):
        print(f"  {mode:<8} accuracy {reports[mode].overall_accuracy:5.1f}%")
    print(f"ablation artifacts: {paths['csv']}, {paths['txt']}")
    return 0


def cmd_report(cfg: RunConfig, answers_path: str | None) -> int:
    if not answers_path:
        answers_path = str(Path(cfg.out) / "answers.jsonl")
    if not Path(answers_path).exists():
        raise UsageError(f"answers file not found: {answers_path}")
    require_paths(cfg, "dataset")
    records = {rec.id: rec for rec in load_dataset(cfg.dataset)}
    from .adapt import AdaptationTrace
    from .pipeline import Answer

    report = evaluation.RunReport(mode="?", judge_kind=cfg.judge)
    remote = _remote(cfg)
    with open(answers_path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            if rec["id"] not in records:
                raise UsageError(f"answer id {rec['id']!r} not present in dataset")
            query = records[rec["id"]]
            report.mode = rec.get("mode", report.mode)
            ans = Answer(
                query_id=rec["id"],
                text=rec.get("text", ""),
                mode=rec.get("mode", "?"),
                fallback=rec.get("fallback"),
                timings=rec.get("timings", {}),
            )
            if "pair_losses" in rec:
                ans.trace = AdaptationTrace(pair_losses=list(rec["pair_losses"]))
            verdict = evaluation.judge(query.question, ans.text, query.answers, cfg.judge, remote)
            stats = report.per_domain.setdefault(query.domain, evaluation.DomainStats())
            stats.n += 1
            report.n_queries += 1
            if verdict == "correct":
                stats.correct += 1
                report.n_correct += 1
            if ans.fallback is not None:
                report.fallbacks += 1
            report.total_seconds += sum(ans.timings.values())
            report.answers.append(ans)
            report.judgements.append(
                evaluation.Judgement(query_id=rec["id"], verdict=verdict, judge_kind=cfg.judge)
            )
    loss_sums: dict[int, list[float]] = {}
    for ans in report.answers:
        if ans.trace is not None:
            for i, v in enumerate(ans.trace.pair_losses):
                loss_sums.setdefault(i, []).append(v)
    report.loss_trajectory = [sum(vs) / len(vs) for _, vs in sorted(loss_sums.items())]
    paths = reporting.write_run_report(report, cfg.out)
    echo_config(cfg, cfg.out)
    print(reporting.render_text_table(report))
    print(f"report artifacts: {paths['csv']}, {paths['txt']}")
    return 0


_COMMANDS = {
    "gen-bench": cmd_gen_bench,
    "pretrain": cmd_pretrain,
    "index": cmd_index,
    "run": cmd_run,
    "sweep": cmd_sweep,
    "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    try:
        cfg = _config_from_args(args)
        if args.command == "report":
            return cmd_report(cfg, getattr(args, "answers", None))
        return _COMMANDS[args.command](cfg)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - single line on stderr, exit 2
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
