"""Acceptance criteria.

One test per criterion; each prints a single [PASS]/[FAIL] line with the
measured values. The directional criteria train small ranking models on the
seeded 2000-query synthetic corpus and share them through a session cache.
Run with ``pytest tests/test_acceptance.py -v -s``.
"""

import math
import time

import numpy as np
import pytest
from scipy import stats as scipy_stats
from scipy.special import betainc

from fieldrank import autodiff as ad
from fieldrank import evaluation
from fieldrank.autodiff import Tape
from fieldrank.baselines import Bm25fWeights, bm25, bm25f
from fieldrank.checks import run_gradcheck, toy_model_config
from fieldrank.cli import main as cli_main
from fieldrank.config import (desk_model_config, load_run_config, model_config_from,
                              reference_grids, reference_model_config, stride_options)
from fieldrank.corpus import (Document, SyntheticConfig, generate_synthetic, split,
                              with_fields_removed)
from fieldrank.evaluation import evaluate_run, ndcg_at_k, paired_t_test
from fieldrank.model import (FieldConfig, FieldMask, ModelConfig, aggregate_field,
                             document_repr, encode_instance, match, query_repr)
from fieldrank.text import encode_text
from fieldrank.training import (LossConfig, TrainSchedule, initial_parameters,
                                pairwise_loss, sample_triples, train)

SEEDS = (101, 102, 103)
GRADCHECK_TOLERANCE = 1e-4
TRAIN_KWARGS = dict(learning_rate=3e-3, epochs=1, triples_per_query=30,
                    patience=2, checkpoint_every=50)
FIELD_NAMES = ("title", "url", "body", "anchors", "clicked_queries")


def report(criterion: str, passed: bool, detail: str) -> None:
    print(f"\n[{'PASS' if passed else 'FAIL'}] {criterion}: {detail}")
    assert passed, f"{criterion}: {detail}"


class AcceptanceContext:
    """Shared corpora and trained models, built lazily, one per session."""

    def __init__(self):
        self._corpora = {}
        self._models = {}
        self.train_seconds = {}

    def corpus(self, seed):
        if seed not in self._corpora:
            corpus = generate_synthetic(SyntheticConfig(seed=seed))
            splits = split(corpus.query_ids(), seed=seed)
            grades = evaluation.judgments_for(corpus, splits[2])
            self._corpora[seed] = (corpus, splits, grades)
        return self._corpora[seed]

    def variant_config(self, variant: str) -> ModelConfig:
        base = desk_model_config()
        if variant == "all":
            return base
        if variant.startswith("single_"):
            name = variant[len("single_"):]
            fields = tuple(FieldConfig(**{**vars(f), "keep_prob": 1.0})
                           for f in base.fields if f.name == name)
            return ModelConfig(**{**vars(base), "fields": fields})
        if variant == "score_aggregation":
            return ModelConfig(**{**vars(base), "matching": "score_aggregation"})
        if variant == "shared_query":
            return ModelConfig(**{**vars(base), "query_representation": "shared"})
        if variant == "no_field_dropout":
            return ModelConfig(**{**vars(base), "use_field_dropout": False})
        raise ValueError(variant)

    def model(self, seed, variant):
        key = (seed, variant)
        if key not in self._models:
            corpus, splits, _ = self.corpus(seed)
            config = self.variant_config(variant)
            schedule = TrainSchedule(seed=seed, **TRAIN_KWARGS)
            start = time.monotonic()
            result = train(corpus, splits, config, LossConfig(), schedule)
            self.train_seconds[key] = time.monotonic() - start
            self._models[key] = (result, config)
        return self._models[key]

    def test_report(self, seed, variant, drop_fields=()):
        result, config = self.model(seed, variant)
        corpus, splits, grades = self.corpus(seed)
        if drop_fields:
            corpus = with_fields_removed(corpus, list(drop_fields))
        run = evaluation.neural_run(result.best_params, config, corpus, splits[2])
        return evaluate_run(run, grades, rng=np.random.default_rng(0))


@pytest.fixture(scope="session")
def ctx():
    return AcceptanceContext()


class TestCriterion01GradientIntegrity:
    def test_every_op_and_full_graph(self):
        start = time.monotonic()
        results = run_gradcheck(seed=0, epsilon=1e-5)
        elapsed = time.monotonic() - start
        worst = max(results.values())
        passed = worst < GRADCHECK_TOLERANCE and elapsed < 60.0
        report("criterion 1 (gradient integrity)", passed,
               f"max relative error {worst:.2e} over {len(results)} checks "
               f"(tolerance {GRADCHECK_TOLERANCE:.0e}), {elapsed:.1f}s")


class TestCriterion02MaskingSemantics:
    def test_masking(self):
        start = time.monotonic()
        config = toy_model_config()
        params = initial_parameters(config, TrainSchedule(seed=3, **TRAIN_KWARGS))

        # (a) a zero instance mask yields an exactly zero field representation
        fc = config.fields[1]  # anchors
        rows = [encode_instance(encode_text(t, fc.max_tokens), fc, params, config)
                for t in ("xx yy", "zz")]
        zero_repr = aggregate_field(ad.stack(rows), FieldMask.for_count(0, 2))
        part_a = bool(np.all(zero_repr.data == 0.0))

        # (b) perturbing masked-slot content leaves the pairwise loss and every
        # parameter gradient bitwise unchanged
        doc2 = Document(id="x2", title="blue whale", url="www.whale.com",
                        body="unused", anchors=["big whale"],
                        clicked_queries=["whale facts"])

        def loss_and_grads(masked_slot_text):
            params.zero_grads()
            with Tape() as tape:
                q = query_repr("red fox", params, config)
                blocks = []
                for field in config.fields:
                    if field.name == "anchors":
                        slots = [encode_text("fast fox", field.max_tokens),
                                 encode_text(masked_slot_text, field.max_tokens)]
                        reprs = [encode_instance(e, field, params, config)
                                 for e in slots]
                        blocks.append(aggregate_field(
                            ad.stack(reprs), FieldMask.for_count(1, 2)))
                    else:
                        texts = ["red fox news"] if field.max_instances == 1 else []
                        doc = Document(id="x1", title="red fox news",
                                       url="www.fox.com", body="red fox body",
                                       anchors=[], clicked_queries=texts and [])
                        blocks.append(_field_block(doc, field, params, config))
                d1 = ad.concat(blocks)
                s1 = match(q, d1, params, config)
                s2 = match(q, document_repr(doc2, params, config), params, config)
                loss = pairwise_loss([(s1, s2)], [(4, 0)])
            tape.backward(loss)
            grads = {name: t.grad.copy() for name, t in params.items()
                     if t.grad is not None}
            return float(loss.data), grads

        loss_pad, grads_pad = loss_and_grads("")
        loss_garbage, grads_garbage = loss_and_grads("totally unrelated garbage words")
        part_b = loss_pad == loss_garbage and set(grads_pad) == set(grads_garbage) \
            and all(np.array_equal(grads_pad[k], grads_garbage[k]) for k in grads_pad)

        # (c) a field that never occurs in training leaves its encoder
        # parameters bitwise at initialization after 100+ steps
        cfg = SyntheticConfig(n_queries=60, docs_per_query=6, seed=9,
                              clicked_query_coverage=0.0)
        corpus = generate_synthetic(cfg)
        splits = split(corpus.query_ids(), seed=9)
        schedule = TrainSchedule(seed=9, learning_rate=1e-3, epochs=6,
                                 triples_per_query=8, patience=6)
        init = initial_parameters(config, schedule)
        init_values = {n: t.data.copy() for n, t in init.items()}
        result = train(corpus, splits, config, LossConfig(batch_size=16), schedule)
        final = result.checkpoints[-1].params
        prefix = "field.clicked_queries."
        untouched = all(np.array_equal(final[n].data, init_values[n])
                        for n in final.names() if n.startswith(prefix))
        trained = any(not np.array_equal(final[n].data, init_values[n])
                      for n in final.names() if n.startswith("field.title."))
        part_c = result.steps >= 100 and untouched and trained

        elapsed = time.monotonic() - start
        passed = part_a and part_b and part_c and elapsed < 60.0
        report("criterion 2 (masking semantics)", passed,
               f"zero repr: {part_a}, bitwise-invariant loss/grads: {part_b}, "
               f"encoder untouched after {result.steps} steps: {part_c}, "
               f"{elapsed:.1f}s")


def _field_block(doc, field, params, config):
    from fieldrank.model import prepare_field_instances
    encodings, n_present = prepare_field_instances(doc, field)
    reprs = [encode_instance(e, field, params, config) for e in encodings]
    return aggregate_field(ad.stack(reprs),
                           FieldMask.for_count(n_present, field.max_instances))


class TestCriterion03AllFieldsBeatBestSingle:
    def test_h1_directional(self, ctx):
        details = []
        passed = True
        for seed in SEEDS:
            start = time.monotonic()
            all_report = ctx.test_report(seed, "all")
            singles = {name: ctx.test_report(seed, f"single_{name}")
                       for name in FIELD_NAMES}
            best_name = max(singles, key=lambda n: singles[n].mean_ndcg_at_10)
            best = singles[best_name]
            margin = all_report.mean_ndcg_at_10 - best.mean_ndcg_at_10
            ttest = paired_t_test(all_report.values(10), best.values(10))
            elapsed = time.monotonic() - start
            seed_train = sum(ctx.train_seconds.get((seed, v), 0.0)
                             for v in ["all"] + [f"single_{n}" for n in FIELD_NAMES])
            ok = margin >= 0.01 and ttest.p_value < 0.05 and seed_train < 600.0
            passed = passed and ok
            details.append(
                f"seed {seed}: all {all_report.mean_ndcg_at_10:.4f} vs "
                f"best single ({best_name}) {best.mean_ndcg_at_10:.4f}, "
                f"margin {margin:+.4f}, p {ttest.p_value:.1e}, "
                f"train {seed_train:.0f}s, wall {elapsed:.0f}s")
        report("criterion 3 (all fields beat best single field, 3 seeds)",
               passed, "; ".join(details))


class TestCriterion04JointBeatsScoreAggregation:
    def test_h3_directional(self, ctx):
        seed = SEEDS[0]
        joint = ctx.test_report(seed, "all")
        agg = ctx.test_report(seed, "score_aggregation")
        margin = joint.mean_ndcg_at_10 - agg.mean_ndcg_at_10
        ttest = paired_t_test(joint.values(10), agg.values(10))
        passed = margin > 0 and ttest.p_value < 0.05
        report("criterion 4 (joint representation beats score aggregation)",
               passed,
               f"joint {joint.mean_ndcg_at_10:.4f} vs score-agg "
               f"{agg.mean_ndcg_at_10:.4f}, margin {margin:+.4f}, "
               f"p {ttest.p_value:.1e}")


class TestCriterion05PerFieldQueryBeatsShared:
    def test_h4_directional(self, ctx):
        seed = SEEDS[0]
        per_field = ctx.test_report(seed, "all")
        shared = ctx.test_report(seed, "shared_query")
        margin = per_field.mean_ndcg_at_10 - shared.mean_ndcg_at_10
        ttest = paired_t_test(per_field.values(10), shared.values(10))
        passed = margin > 0 and ttest.p_value < 0.05
        report("criterion 5 (per-field query representations beat shared)",
               passed,
               f"per-field {per_field.mean_ndcg_at_10:.4f} vs shared "
               f"{shared.mean_ndcg_at_10:.4f}, margin {margin:+.4f}, "
               f"p {ttest.p_value:.1e}")


class TestCriterion06FieldDropoutRobustness:
    def test_h5_directional(self, ctx):
        details = []
        passed = True
        for seed in SEEDS:
            with_drop = ctx.test_report(seed, "all")
            with_drop_nocq = ctx.test_report(seed, "all",
                                             drop_fields=("clicked_queries",))
            without = ctx.test_report(seed, "no_field_dropout")
            without_nocq = ctx.test_report(seed, "no_field_dropout",
                                           drop_fields=("clicked_queries",))
            delta_drop = with_drop.mean_ndcg_at_10 - with_drop_nocq.mean_ndcg_at_10
            delta_plain = without.mean_ndcg_at_10 - without_nocq.mean_ndcg_at_10
            ok = delta_drop < delta_plain
            passed = passed and ok
            details.append(f"seed {seed}: dropout loss {delta_drop:+.4f} vs "
                           f"no-dropout loss {delta_plain:+.4f}")
        report("criterion 6 (field dropout loses less without clicked queries, "
               "3 seeds)", passed, "; ".join(details))


class TestCriterion07MetricOracles:
    def test_metric_oracles(self):
        rng = np.random.default_rng(2024)
        worst_ndcg = 0.0
        for _ in range(10_000):
            n = int(rng.integers(1, 12))
            grades = rng.integers(0, 5, size=n).tolist()
            k = int(rng.integers(1, 12))

            def oracle_dcg(seq):
                total = 0.0
                for position, grade in enumerate(seq[:k], start=1):
                    total += (2 ** grade - 1) / math.log2(position + 1)
                return total

            ideal = oracle_dcg(sorted(grades, reverse=True))
            expected = 0.0 if ideal == 0 else oracle_dcg(grades) / ideal
            worst_ndcg = max(worst_ndcg, abs(ndcg_at_k(grades, k) - expected))

        worst_p = 0.0
        for n in (5, 30, 100):
            for trial in range(40):
                local = np.random.default_rng(n * 1000 + trial)
                a = local.normal(size=n)
                b = a + local.normal(scale=0.4, size=n) + local.normal(scale=0.05)
                ours = paired_t_test(a.tolist(), b.tolist())
                ref = scipy_stats.ttest_rel(a, b)
                worst_p = max(worst_p, abs(ours.p_value - ref.pvalue))

        passed = worst_ndcg < 1e-12 and worst_p < 1e-6
        report("criterion 7 (metric oracles)", passed,
               f"NDCG vs brute force max diff {worst_ndcg:.2e} (1e4 cases), "
               f"t-test p vs scipy max diff {worst_p:.2e}")


class TestCriterion08BaselineOracles:
    def test_baseline_oracles(self):
        from collections import Counter

        from fieldrank.baselines import CollectionStats

        # BM25 hand-computed example: N=3, df=1, tf=1, len == avglen
        stats = CollectionStats(n_docs=3, concat_doc_freq={"term": 1},
                                concat_avg_len=2.0, field_doc_freq={},
                                field_avg_len={})
        got = bm25(["term"], ["term", "x"], stats, k1=1.2, b=0.75)
        bm25_err = abs(got - math.log(2.5 / 1.5))

        # BM25F single-field identity on 20 random instances
        rng = np.random.default_rng(88)
        vocab = [f"w{i}" for i in range(25)]
        worst_identity = 0.0
        for _ in range(20):
            docs = [[vocab[int(rng.integers(25))]
                     for _ in range(int(rng.integers(4, 14)))] for _ in range(9)]
            df = Counter()
            total_len = 0
            for d in docs:
                df.update(set(d))
                total_len += len(d)
            stats = CollectionStats(n_docs=9, concat_doc_freq=dict(df),
                                    concat_avg_len=total_len / 9,
                                    field_doc_freq={"body": dict(df)},
                                    field_avg_len={"body": total_len / 9})
            b = float(rng.uniform(0.0, 1.0))
            k1 = float(rng.uniform(0.6, 2.0))
            doc = docs[0]
            query = [vocab[int(rng.integers(25))] for _ in range(4)]
            got = bm25f(query, {"body": doc}, stats,
                        Bm25fWeights(field_weights={"body": 1.0},
                                     length_norms={"body": b}, k1=k1))
            tf = Counter(doc)
            norm = 1.0 - b + b * len(doc) / stats.field_avg_len["body"]
            expected = sum(stats.idf(t) * (tf[t] / norm) / (k1 + tf[t] / norm)
                           for t in query if tf.get(t, 0) > 0)
            worst_identity = max(worst_identity, abs(got - expected))

        passed = bm25_err < 1e-9 and worst_identity < 1e-9
        report("criterion 8 (baseline oracles)", passed,
               f"BM25 hand value err {bm25_err:.2e} (score 0.51083), "
               f"BM25F single-field identity max err {worst_identity:.2e}")


class TestCriterion09ProtocolConformance:
    def test_protocol(self, ctx):
        # triple sampling: cap and uniformity over label pairs
        judgments = {}
        for grade, prefix in ((4, "a"), (2, "b"), (0, "c")):
            for i in range(30):
                judgments[f"{prefix}{i}"] = grade
        rng = np.random.default_rng(55)
        counts = {(4, 2): 0, (4, 0): 0, (2, 0): 0}
        draws = 0
        cap_ok = True
        for _ in range(200):
            triples = sample_triples("q", judgments, cap=50, rng=rng)
            cap_ok = cap_ok and len(triples) == 50
            for t in triples:
                counts[(t.grade1, t.grade2)] += 1
                draws += 1
        chi2 = sum((c - draws / 3) ** 2 / (draws / 3) for c in counts.values())
        chi_p = float(scipy_stats.chi2.sf(chi2, df=2))

        # splits: 80/10/10 and query-disjoint on the acceptance corpus
        corpus, splits, _ = ctx.corpus(SEEDS[0])
        sizes = tuple(len(s) for s in splits)
        disjoint = not (set(splits[0]) & set(splits[1])) \
            and not (set(splits[0]) & set(splits[2])) \
            and not (set(splits[1]) & set(splits[2]))
        exhaustive = set().union(*splits) == set(corpus.query_ids())

        # batch size 64 and the canonical grids, verbatim in config
        cfg = load_run_config(None)
        grids = cfg["grids"]
        grids_ok = (
            cfg["loss"]["batch_size"] == 64
            and grids["learning_rate"] == [1e-3, 5e-4, 1e-4, 5e-5, 1e-5]
            and grids["layer_sizes"] == [100, 300, 500]
            and grids["conv_windows_long_text"] == [1, 3, 10, 20, 50]
            and grids["conv_windows_short_text"] == [1, 3, 5, 10]
            and grids["keep_probs"] == [0.5, 0.8, 1.0]
            and stride_options(20) == [1, 5, 10, 20]
            and stride_options(3) == [1, 1, 1, 3]
        )
        reference = reference_model_config()
        reference.validate()
        full_ok = model_config_from({"model": reference.to_dict()}) == reference

        passed = (cap_ok and draws == 10_000 and chi_p > 0.01
                  and sizes == (1600, 200, 200) and disjoint and exhaustive
                  and grids_ok and full_ok)
        report("criterion 9 (protocol conformance)", passed,
               f"cap respected: {cap_ok}, chi-square p {chi_p:.3f} on {draws} draws, "
               f"splits {sizes} disjoint: {disjoint and exhaustive}, "
               f"batch 64 + grids verbatim: {grids_ok and full_ok}")


class TestCriterion10Reproducibility:
    def test_reproducibility(self, ctx, tmp_path):
        # byte-identical checkpoints from identical config + seed
        import json
        cfg_path = tmp_path / "config.json"
        cfg_path.write_text(json.dumps({
            "seed": 6,
            "synthetic": {"n_queries": 60, "docs_per_query": 8},
            "train": {"learning_rate": 2e-3, "epochs": 1, "triples_per_query": 6,
                      "checkpoint_every": 5},
        }), encoding="utf-8")
        corpus_dir = tmp_path / "corpus"
        assert cli_main(["gen-data", "--config", str(cfg_path),
                         "--out", str(corpus_dir)]) == 0
        outs = []
        for name in ("a", "b"):
            out = tmp_path / name
            assert cli_main(["train", "--config", str(cfg_path), "--corpus",
                             str(corpus_dir), "--out", str(out)]) == 0
            outs.append(out)
        identical = (outs[0] / "best.json").read_bytes() == \
            (outs[1] / "best.json").read_bytes()
        ckpt_names = sorted(p.name for p in (outs[0] / "checkpoints").glob("*.json"))
        ckpts_identical = all(
            (outs[0] / "checkpoints" / n).read_bytes() ==
            (outs[1] / "checkpoints" / n).read_bytes() for n in ckpt_names)

        # learning curve rises over the first three checkpoints of the
        # acceptance training run
        result, config = ctx.model(SEEDS[0], "all")
        corpus, splits, _ = ctx.corpus(SEEDS[0])
        entries = [(c.instances_seen, c.params) for c in result.checkpoints[:3]]
        rows = evaluation.learning_curve(entries, config, corpus, splits[2],
                                         shuffles=5)
        xs = [r[0] for r in rows]
        ys = [r[1] for r in rows]
        monotone = len(rows) == 3 and xs == sorted(xs) \
            and ys[0] < ys[1] < ys[2]

        passed = identical and ckpts_identical and monotone
        report("criterion 10 (reproducibility and learning curve)", passed,
               f"byte-identical best checkpoint: {identical}, "
               f"{len(ckpt_names)} step checkpoints identical: {ckpts_identical}, "
               f"first-three learning curve {['%.4f' % y for y in ys]} "
               f"monotone: {monotone}")
