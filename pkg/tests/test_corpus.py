"""Corpus tests: file formats, splits, instance selection, and the synthetic
generator's coverage and field-ordering guarantees."""

import numpy as np
import pytest

from fieldrank import evaluation
from fieldrank.corpus import (Corpus, Document, JudgedQuery, SyntheticConfig,
                              generate_synthetic, load_corpus, oracle_field_score,
                              save_corpus, select_instances, split,
                              with_fields_removed)
from fieldrank.errors import ConfigError, DataError


class TestSelectInstances:
    def test_most_common_first_with_first_occurrence_ties(self):
        instances = (["a"] * 5 + ["b"] * 3 + ["c"] * 3 + ["d", "e", "f", "g"])
        assert select_instances(instances, 5) == ["a", "b", "c", "d", "e"]

    def test_few_instances_all_kept(self):
        assert select_instances(["x", "y"], 5) == ["x", "y"]

    def test_empty(self):
        assert select_instances([], 5) == []

    def test_dedupes_repeats(self):
        assert select_instances(["a", "b", "a"], 5) == ["a", "b"]


class TestSplit:
    def test_100_queries_split_80_10_10(self):
        qids = [f"q{i}" for i in range(100)]
        train, valid, test = split(qids, seed=3)
        assert (len(train), len(valid), len(test)) == (80, 10, 10)

    def test_disjoint_and_exhaustive(self):
        qids = [f"q{i}" for i in range(83)]
        parts = split(qids, seed=5)
        union = set()
        total = 0
        for p in parts:
            union.update(p)
            total += len(p)
        assert union == set(qids)
        assert total == len(qids)

    def test_sizes_within_one_of_ratios(self):
        qids = [f"q{i}" for i in range(83)]
        parts = split(qids, ratios=(0.8, 0.1, 0.1), seed=5)
        for part, ratio in zip(parts, (0.8, 0.1, 0.1)):
            assert abs(len(part) - 83 * ratio) <= 1

    def test_same_seed_same_split(self):
        qids = [f"q{i}" for i in range(50)]
        assert split(qids, seed=9) == split(qids, seed=9)
        assert split(qids, seed=9) != split(qids, seed=10)

    def test_too_few_queries(self):
        with pytest.raises(DataError):
            split(["q1", "q2"], seed=0)

    def test_bad_ratios(self):
        with pytest.raises(ConfigError):
            split([f"q{i}" for i in range(20)], ratios=(0.5, 0.2, 0.2), seed=0)


def small_corpus():
    documents = {
        "d1": Document(id="d1", title="alpha beta", url="www.ab.com",
                       body="alpha beta gamma", anchors=["alpha"],
                       clicked_queries=["alpha beta", "beta"]),
        "d2": Document(id="d2", title="delta", url="www.d.org/x",
                       body="delta epsilon", anchors=[], clicked_queries=[]),
    }
    queries = [JudgedQuery("q1", "alpha", {"d1": 4, "d2": 0}),
               JudgedQuery("q2", "delta", {"d1": 0, "d2": 3})]
    return Corpus(documents=documents, queries=queries)


class TestFileFormats:
    def test_round_trip_is_lossless(self, tmp_path):
        corpus = small_corpus()
        save_corpus(corpus, tmp_path)
        loaded = load_corpus(tmp_path)
        assert loaded.documents == corpus.documents
        assert loaded.queries == corpus.queries

    def test_second_save_is_byte_identical(self, tmp_path):
        corpus = small_corpus()
        a = tmp_path / "a"
        b = tmp_path / "b"
        save_corpus(corpus, a)
        save_corpus(load_corpus(a), b)
        for name in ("documents.jsonl", "queries.jsonl", "judgments.tsv"):
            assert (a / name).read_bytes() == (b / name).read_bytes()

    def test_empty_files_give_empty_corpus(self, tmp_path):
        for name in ("documents.jsonl", "queries.jsonl", "judgments.tsv"):
            (tmp_path / name).write_text("", encoding="utf-8")
        corpus = load_corpus(tmp_path)
        assert corpus.documents == {} and corpus.queries == []

    def test_missing_title_names_the_line(self, tmp_path):
        save_corpus(small_corpus(), tmp_path)
        lines = (tmp_path / "documents.jsonl").read_text().splitlines()
        lines[1] = lines[1].replace('"title": "delta"', '"title": ""')
        (tmp_path / "documents.jsonl").write_text("\n".join(lines) + "\n")
        with pytest.raises(DataError, match="line 2"):
            load_corpus(tmp_path)

    def test_unknown_field_rejected(self, tmp_path):
        save_corpus(small_corpus(), tmp_path)
        lines = (tmp_path / "documents.jsonl").read_text().splitlines()
        lines[0] = lines[0][:-1] + ', "surprise": 1}'
        (tmp_path / "documents.jsonl").write_text("\n".join(lines) + "\n")
        with pytest.raises(DataError, match="unknown fields"):
            load_corpus(tmp_path)

    def test_judgment_for_unknown_document(self, tmp_path):
        save_corpus(small_corpus(), tmp_path)
        with open(tmp_path / "judgments.tsv", "a", encoding="utf-8") as f:
            f.write("q1\tmissing\t3\n")
        with pytest.raises(DataError, match="unknown document"):
            load_corpus(tmp_path)

    def test_invalid_grade(self, tmp_path):
        save_corpus(small_corpus(), tmp_path)
        with open(tmp_path / "judgments.tsv", "a", encoding="utf-8") as f:
            f.write("q1\td2\t7\n")
        with pytest.raises(DataError, match="outside"):
            load_corpus(tmp_path)


class TestWithFieldsRemoved:
    def test_removed_field_is_empty_everywhere(self):
        corpus = small_corpus()
        stripped = with_fields_removed(corpus, ["clicked_queries"])
        assert all(not d.clicked_queries for d in stripped.documents.values())
        # original untouched
        assert corpus.documents["d1"].clicked_queries

    def test_unknown_field_rejected(self):
        with pytest.raises(DataError):
            with_fields_removed(small_corpus(), ["bogus"])


class TestSyntheticGenerator:
    @pytest.fixture(scope="class")
    def coverage_corpus(self):
        # 10^4 documents for the law-of-large-numbers coverage check
        cfg = SyntheticConfig(n_queries=1000, docs_per_query=10, seed=42)
        return generate_synthetic(cfg)

    def test_coverage_converges(self, coverage_corpus):
        docs = list(coverage_corpus.documents.values())
        assert len(docs) == 10_000
        anchor_cov = sum(bool(d.anchors) for d in docs) / len(docs)
        clicked_cov = sum(bool(d.clicked_queries) for d in docs) / len(docs)
        assert abs(anchor_cov - 0.61) < 0.01
        assert abs(clicked_cov - 0.73) < 0.01

    def test_same_seed_is_byte_identical(self, tmp_path):
        cfg = SyntheticConfig(n_queries=30, docs_per_query=5, seed=5)
        a = tmp_path / "a"
        b = tmp_path / "b"
        save_corpus(generate_synthetic(cfg), a)
        save_corpus(generate_synthetic(cfg), b)
        for name in ("documents.jsonl", "queries.jsonl", "judgments.tsv"):
            assert (a / name).read_bytes() == (b / name).read_bytes()

    def test_zero_coverage_means_no_instances(self):
        cfg = SyntheticConfig(n_queries=20, docs_per_query=5, seed=1,
                              anchor_coverage=0.0, clicked_query_coverage=0.0)
        corpus = generate_synthetic(cfg)
        for d in corpus.documents.values():
            assert d.anchors == [] and d.clicked_queries == []

    def test_every_query_has_two_distinct_grades(self, coverage_corpus):
        for q in coverage_corpus.queries:
            assert len(set(q.judgments.values())) >= 2

    def test_documents_are_valid(self, coverage_corpus):
        for d in list(coverage_corpus.documents.values())[:200]:
            d.validate()

    def test_clicked_queries_oracle_beats_title_oracle(self):
        cfg = SyntheticConfig(n_queries=400, docs_per_query=10, seed=11)
        corpus, latents = generate_synthetic(cfg, with_latents=True)
        qby = {q.query_id: q for q in corpus.queries}
        grades = evaluation.judgments_for(corpus, corpus.query_ids())

        def oracle_run(field):
            return {qid: [(doc_id, oracle_field_score(latents, qby[qid],
                                                      corpus.documents[doc_id], field))
                          for doc_id in sorted(qby[qid].judgments)]
                    for qid in corpus.query_ids()}

        rng = np.random.default_rng(0)
        cq = evaluation.evaluate_run(oracle_run("clicked_queries"), grades, rng=rng)
        rng = np.random.default_rng(0)
        title = evaluation.evaluate_run(oracle_run("title"), grades, rng=rng)
        assert cq.mean_ndcg_at_10 > title.mean_ndcg_at_10

    def test_vocab_too_small_rejected(self):
        with pytest.raises(ConfigError):
            SyntheticConfig(vocab_size=100, topic_count=40).validate()

    def test_grades_follow_affinity_bins(self):
        cfg = SyntheticConfig(n_queries=50, docs_per_query=10, seed=3)
        corpus, latents = generate_synthetic(cfg, with_latents=True)
        for q in corpus.queries:
            for doc_id, grade in q.judgments.items():
                affinity = latents.doc_affinity[doc_id]
                expected = sum(affinity >= e for e in cfg.grade_bin_edges)
                assert grade == expected
