"""Command-line surface: gen-data, train, eval, gradcheck, score, compare.

Every command takes --config (JSON run config), --seed (overrides the config
seed; FIELDRANK_SEED is the environment fallback) and --out. Commands are
deterministic under their seed and compose through the corpus, run, and
report file formats.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import baselines, config as cfgmod, corpus as corpusmod, evaluation, figures
from .checks import run_gradcheck
from .errors import ConfigError, DataError
from .model import Ranker, load_checkpoint, save_checkpoint
from .training import train, write_loss_csv

GRADCHECK_TOLERANCE = 1e-4


def _resolve_seed(args, cfg, required: bool) -> int | None:
    if getattr(args, "seed", None) is not None:
        return args.seed
    if cfg.get("seed") is not None:
        return int(cfg["seed"])
    env = os.environ.get("FIELDRANK_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"FIELDRANK_SEED must be an integer, got {env!r}") from None
    if required:
        raise ConfigError("a seed is required: pass --seed, set it in the config, "
                          "or export FIELDRANK_SEED")
    return None


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _apply_model_overrides(args, cfg: dict) -> None:
    model = cfg["model"]
    if getattr(args, "fields", None):
        wanted = [f.strip() for f in args.fields.split(",") if f.strip()]
        by_name = {f["name"]: f for f in model["fields"]}
        unknown = [f for f in wanted if f not in by_name]
        if unknown:
            raise ConfigError(f"--fields names not in model config: {unknown}")
        model["fields"] = [by_name[f] for f in wanted]
    if getattr(args, "no_masking", False):
        model["use_masking"] = False
    if getattr(args, "no_field_dropout", False):
        model["use_field_dropout"] = False
    if getattr(args, "query_repr", None):
        model["query_representation"] = args.query_repr
    if getattr(args, "matching", None):
        model["matching"] = args.matching


def cmd_gen_data(args) -> int:
    cfg = cfgmod.load_run_config(args.config)
    seed = _resolve_seed(args, cfg, required=True)
    synth = cfgmod.synthetic_config_from(cfg, seed)
    corpus = corpusmod.generate_synthetic(synth)
    out = _out_dir(args)
    corpusmod.save_corpus(corpus, out)
    print(f"wrote {len(corpus.documents)} documents, {len(corpus.queries)} queries to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = cfgmod.load_run_config(args.config)
    _apply_model_overrides(args, cfg)
    seed = _resolve_seed(args, cfg, required=True)
    model_config = cfgmod.model_config_from(cfg)
    loss_config = cfgmod.loss_config_from(cfg)
    schedule = cfgmod.schedule_from(cfg, seed)
    corpus = corpusmod.load_corpus(args.corpus)
    splits = corpusmod.split(corpus.query_ids(), cfgmod.split_ratios_from(cfg), seed)
    result = train(corpus, splits, model_config, loss_config, schedule)

    out = _out_dir(args)
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    for ckpt in result.checkpoints:
        save_checkpoint(ckpt_dir / f"step_{ckpt.step:06d}.json", ckpt.params, model_config,
                        meta={"step": ckpt.step, "instances_seen": ckpt.instances_seen})
    save_checkpoint(out / "best.json", result.best_params, model_config,
                    meta={"steps": result.steps, "instances_seen": result.instances_seen,
                          "best_valid_loss": result.best_valid_loss})
    write_loss_csv(result.loss_rows, out / "loss_curve.csv")
    figures.plot_loss_curve(result.loss_rows, out / "loss_curve.png")
    print(f"trained {result.steps} steps ({result.instances_seen} instances); "
          f"best validation loss {result.best_valid_loss:.6f}; outputs in {out}")
    return 0


def _eval_run(args, cfg, corpus, query_ids):
    scorer = getattr(args, "scorer", "neural")
    if scorer == "neural":
        if not args.checkpoint:
            raise ConfigError("neural evaluation requires --checkpoint")
        ranker = Ranker.load(args.checkpoint)
        return evaluation.neural_run(ranker.params, ranker.config, corpus, query_ids)
    stats = baselines.build_collection_stats(corpus.documents.values())
    if scorer == "bm25":
        section = cfg["eval"]["bm25"]
        return baselines.bm25_run(corpus, query_ids, stats,
                                  k1=section["k1"], b=section["b"])
    if scorer == "bm25f":
        section = cfg["eval"]["bm25f"]
        weights = baselines.Bm25fWeights(field_weights=dict(section["field_weights"]),
                                         length_norms=dict(section["length_norms"]),
                                         k1=section["k1"])
        return baselines.bm25f_run(corpus, query_ids, stats, weights)
    raise ConfigError(f"unknown scorer {scorer!r}")


def cmd_eval(args) -> int:
    cfg = cfgmod.load_run_config(args.config)
    seed = _resolve_seed(args, cfg, required=False) or 0
    corpus = corpusmod.load_corpus(args.corpus)
    if args.drop_field:
        corpus = corpusmod.with_fields_removed(corpus, args.drop_field)
    splits = corpusmod.split(corpus.query_ids(), cfgmod.split_ratios_from(cfg), seed)
    split_names = {"train": 0, "valid": 1, "test": 2}
    if args.split == "all":
        query_ids = corpus.query_ids()
    elif args.split in split_names:
        query_ids = splits[split_names[args.split]]
    else:
        raise ConfigError(f"unknown split {args.split!r}")
    out = _out_dir(args)

    if args.checkpoint_series:
        entries = []
        series_dir = Path(args.checkpoint_series)
        paths = sorted(series_dir.glob("step_*.json"))
        if not paths:
            raise DataError(f"no step_*.json checkpoints under {series_dir}")
        params0 = config0 = None
        for path in paths:
            params, model_config, meta = load_checkpoint(path)
            entries.append((int(meta["instances_seen"]), params))
            params0, config0 = params, model_config
        rows = evaluation.learning_curve(entries, config0, corpus, query_ids,
                                         shuffles=cfg["eval"]["shuffles"])
        evaluation.write_learning_curve_csv(rows, out / "learning_curve.csv")
        figures.plot_learning_curve(rows, out / "learning_curve.png")
        print(f"learning curve over {len(rows)} checkpoints written to {out}")
        return 0

    run = _eval_run(args, cfg, corpus, query_ids)
    report = evaluation.evaluate_run(run, evaluation.judgments_for(corpus, query_ids),
                                     shuffles=cfg["eval"]["shuffles"],
                                     rng=np.random.default_rng(seed))
    evaluation.write_run_tsv(run, out / "run.tsv")
    evaluation.write_report_csv(report, out / "report.csv")
    label = args.checkpoint if args.scorer == "neural" else args.scorer
    evaluation.write_report_summary(report, out / "report_summary.txt", str(label))
    figures.plot_report_histogram(report, out / "report.png")
    print(f"{len(report.per_query)} queries: mean NDCG@1 {report.mean_ndcg_at_1:.4f}, "
          f"mean NDCG@10 {report.mean_ndcg_at_10:.4f}; outputs in {out}")
    return 0


def cmd_gradcheck(args) -> int:
    cfg = cfgmod.load_run_config(args.config)
    seed = _resolve_seed(args, cfg, required=False) or 0
    results = run_gradcheck(seed=seed)
    width = max(len(name) for name in results)
    for name, err in results.items():
        print(f"{name:<{width}}  {err:.3e}")
    worst = max(results.values())
    print(f"{'max relative error':<{width}}  {worst:.3e}  "
          f"(tolerance {GRADCHECK_TOLERANCE:.0e})")
    if args.out:
        out = _out_dir(args)
        with open(out / "gradcheck.csv", "w", encoding="utf-8", newline="\n") as f:
            f.write("check,max_relative_error\n")
            for name, err in results.items():
                f.write(f"{name},{err:.10g}\n")
    return 0 if worst < GRADCHECK_TOLERANCE else 1


def cmd_score(args) -> int:
    corpus = corpusmod.load_corpus(args.corpus)
    ranker = Ranker.load(args.checkpoint)
    doc = corpus.get_document(args.doc)
    score = ranker.score(args.query, doc)
    print(f"{score:.10g}")
    return 0


def cmd_compare(args) -> int:
    report_a = evaluation.read_report_csv(args.report_a)
    report_b = evaluation.read_report_csv(args.report_b)
    ids_a = [m.query_id for m in sorted(report_a.per_query, key=lambda m: m.query_id)]
    ids_b = [m.query_id for m in sorted(report_b.per_query, key=lambda m: m.query_id)]
    if ids_a != ids_b:
        raise DataError("reports cover different query sets; cannot pair them")
    a_by_id = {m.query_id: m for m in report_a.per_query}
    b_by_id = {m.query_id: m for m in report_b.per_query}
    label_a = args.label_a or Path(args.report_a).stem
    label_b = args.label_b or Path(args.report_b).stem

    rows = []
    print(f"{'model':<28}{'NDCG@1':>10}{'NDCG@10':>10}")
    print(f"{'A: ' + label_a:<28}{report_a.mean_ndcg_at_1:>10.4f}"
          f"{report_a.mean_ndcg_at_10:>10.4f}")
    print(f"{'B: ' + label_b:<28}{report_b.mean_ndcg_at_1:>10.4f}"
          f"{report_b.mean_ndcg_at_10:>10.4f}")
    print()
    print("paired t-test (A vs B, 95% level)")
    for metric, getter in (("NDCG@1", lambda m: m.ndcg_at_1),
                           ("NDCG@10", lambda m: m.ndcg_at_10)):
        a_vals = [getter(a_by_id[q]) for q in ids_a]
        b_vals = [getter(b_by_id[q]) for q in ids_a]
        result = evaluation.paired_t_test(a_vals, b_vals)
        verdict = "yes" if result.significant else "no"
        note = " (degenerate zero-variance)" if result.degenerate else ""
        print(f"  {metric:<8} t={result.statistic:+.4f}  p={result.p_value:.3e}  "
              f"significant: {verdict}{note}")
        rows.append((metric, result))

    if args.out:
        out = _out_dir(args)
        with open(out / "comparison.csv", "w", encoding="utf-8", newline="\n") as f:
            f.write("metric,mean_a,mean_b,diff,t_statistic,p_value,significant\n")
            means = {"NDCG@1": (report_a.mean_ndcg_at_1, report_b.mean_ndcg_at_1),
                     "NDCG@10": (report_a.mean_ndcg_at_10, report_b.mean_ndcg_at_10)}
            for metric, result in rows:
                ma, mb = means[metric]
                f.write(f"{metric},{ma:.10g},{mb:.10g},{ma - mb:.10g},"
                        f"{result.statistic:.10g},{result.p_value:.10g},"
                        f"{str(result.significant).lower()}\n")
        figures.plot_comparison(label_a, report_a, label_b, report_b, out / "comparison.png")
    return 0


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", default=None, help="JSON run config file")
    parser.add_argument("--seed", type=int, default=None,
                        help="seed override (env fallback: FIELDRANK_SEED)")
    parser.add_argument("--out", default=None, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fieldrank",
                                     description="multi-field neural ranking engine")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a seeded synthetic corpus")
    _add_common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the ranker on a corpus")
    _add_common(p)
    p.add_argument("--corpus", required=True, help="corpus directory")
    p.add_argument("--fields", default=None,
                   help="comma-separated subset of model fields to use")
    p.add_argument("--no-masking", action="store_true",
                   help="ablation: disable field-level masking")
    p.add_argument("--no-field-dropout", action="store_true",
                   help="ablation: disable field-level dropout")
    p.add_argument("--query-repr", choices=["per_field", "shared"], default=None,
                   help="ablation: per-field vs single shared query representation")
    p.add_argument("--matching", choices=["joint", "score_aggregation"], default=None,
                   help="ablation: joint matching vs per-field score aggregation")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a split and report NDCG")
    _add_common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--checkpoint", default=None, help="neural checkpoint to evaluate")
    p.add_argument("--checkpoint-series", default=None,
                   help="directory of step_*.json checkpoints: emit a learning curve")
    p.add_argument("--scorer", choices=["neural", "bm25", "bm25f"], default="neural")
    p.add_argument("--split", choices=["train", "valid", "test", "all"], default="test")
    p.add_argument("--drop-field", action="append", default=[],
                   help="remove a document field at evaluation time (repeatable)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of all gradients")
    _add_common(p)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("score", help="score one query-document pair")
    _add_common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--query", required=True)
    p.add_argument("--doc", required=True, help="document id")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("compare", help="paired t-test between two report CSVs")
    _add_common(p)
    p.add_argument("report_a")
    p.add_argument("report_b")
    p.add_argument("--label-a", default=None)
    p.add_argument("--label-b", default=None)
    p.set_defaults(func=cmd_compare)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    needs_out = args.command in ("gen-data", "train", "eval")
    if needs_out and not args.out:
        parser.error(f"{args.command} requires --out")
    try:
        return args.func(args)
    except (ConfigError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
