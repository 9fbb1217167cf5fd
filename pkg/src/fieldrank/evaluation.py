"""NDCG@k metrics, tie-shuffled run evaluation, paired t-test, query-length
buckets, and learning curves.

Runs are evaluated telescoping-style: only the judged candidates of each
query are re-ranked. Score ties are broken by random permutation, repeated
over several shuffles, and the average is reported.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import Corpus
from .errors import ConfigError, DataError
from .model import EncodingCache, ModelConfig, ParameterStore, batch_scores
from .text import normalize


def dcg_at_k(grades: Sequence[int], k: int) -> float:
    return sum((2.0 ** g - 1.0) / math.log2(p + 2.0)
               for p, g in enumerate(grades[:k]))


def ndcg_at_k(grades: Sequence[int], k: int) -> float:
    """Normalized DCG with exponential gain; all-zero grades score 0."""
    if k < 1:
        raise ConfigError("k must be >= 1")
    ideal = dcg_at_k(sorted(grades, reverse=True), k)
    if ideal == 0.0:
        return 0.0
    return dcg_at_k(grades, k) / ideal


@dataclass(frozen=True)
class QueryMetrics:
    query_id: str
    ndcg_at_1: float
    ndcg_at_10: float


@dataclass(frozen=True)
class TTestResult:
    statistic: float
    p_value: float
    significant: bool  # at the 95% level
    degenerate: bool = False


@dataclass
class MetricReport:
    per_query: list[QueryMetrics]
    mean_ndcg_at_1: float
    mean_ndcg_at_10: float

    def values(self, k: int) -> list[float]:
        if k == 1:
            return [m.ndcg_at_1 for m in self.per_query]
        if k == 10:
            return [m.ndcg_at_10 for m in self.per_query]
        raise ConfigError("report holds NDCG at 1 and 10 only")


def evaluate_run(scored: dict[str, list[tuple[str, float]]],
                 judgments: dict[str, dict[str, int]],
                 shuffles: int = 10,
                 rng: np.random.Generator | None = None) -> MetricReport:
    """Average NDCG@1/@10 per query over tie-breaking shuffles.

    For each shuffle, documents with equal scores are ordered by a random
    permutation; a tie-free run is identical across shuffles.
    """
    if shuffles < 1:
        raise ConfigError("shuffles must be >= 1")
    if rng is None:
        rng = np.random.default_rng(0)
    per_query = []
    for qid in sorted(scored):
        candidates = scored[qid]
        if not candidates:
            raise DataError(f"query {qid!r} has no scored candidates")
        grades_map = judgments.get(qid, {})
        scores = np.array([s for _, s in candidates])
        grades = np.array([grades_map.get(doc_id, 0) for doc_id, _ in candidates])
        total1 = 0.0
        total10 = 0.0
        for _ in range(shuffles):
            perm = rng.permutation(len(candidates))
            order = np.lexsort((perm, -scores))
            ranked = grades[order].tolist()
            total1 += ndcg_at_k(ranked, 1)
            total10 += ndcg_at_k(ranked, 10)
        per_query.append(QueryMetrics(qid, total1 / shuffles, total10 / shuffles))
    if not per_query:
        raise DataError("no queries to evaluate")
    return MetricReport(
        per_query=per_query,
        mean_ndcg_at_1=sum(m.ndcg_at_1 for m in per_query) / len(per_query),
        mean_ndcg_at_10=sum(m.ndcg_at_10 for m in per_query) / len(per_query),
    )


# ---------------------------------------------------------------------------
# paired t-test (regularized incomplete beta evaluated by continued fraction)
# ---------------------------------------------------------------------------

def _beta_continued_fraction(a: float, b: float, x: float) -> float:
    max_iterations = 300
    eps = 3e-16
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, max_iterations + 1):
        m2 = 2 * m
        numerator = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + numerator * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + numerator / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        numerator = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + numerator * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + numerator / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            break
    return h


def regularized_incomplete_beta(a: float, b: float, x: float) -> float:
    if a <= 0 or b <= 0:
        raise ConfigError("beta parameters must be positive")
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _beta_continued_fraction(a, b, x) / a
    return 1.0 - front * _beta_continued_fraction(b, a, 1.0 - x) / b


def student_t_p_value(t: float, dof: int) -> float:
    """Two-sided p-value for a Student-t statistic."""
    if dof < 1:
        raise ConfigError("degrees of freedom must be >= 1")
    return regularized_incomplete_beta(dof / 2.0, 0.5, dof / (dof + t * t))


def paired_t_test(sample_a: Sequence[float], sample_b: Sequence[float]) -> TTestResult:
    """Two-sided paired t-test at the 95% level.

    Zero-variance differences are handled explicitly: all-zero differences
    report p = 1 (not significant), while a constant nonzero difference is
    flagged degenerate with p approaching 0.
    """
    if len(sample_a) != len(sample_b):
        raise DataError("paired t-test requires equal-length samples")
    n = len(sample_a)
    if n < 2:
        raise DataError("paired t-test requires at least 2 pairs")
    diffs = np.asarray(sample_a, dtype=np.float64) - np.asarray(sample_b, dtype=np.float64)
    mean = float(diffs.mean())
    sd = float(diffs.std(ddof=1))
    if sd == 0.0:
        if mean == 0.0:
            return TTestResult(statistic=0.0, p_value=1.0, significant=False)
        return TTestResult(statistic=math.copysign(math.inf, mean), p_value=0.0,
                           significant=True, degenerate=True)
    t = mean / (sd / math.sqrt(n))
    p = student_t_p_value(t, n - 1)
    return TTestResult(statistic=t, p_value=p, significant=p < 0.05)


# ---------------------------------------------------------------------------
# query-length buckets
# ---------------------------------------------------------------------------

def bucket_by_query_length(queries: Sequence[tuple[str, str]]) -> tuple[list[str], ...]:
    """Split (query_id, text) pairs into three near-equal buckets by token count.

    Sorting is by (token count, query id); earlier buckets absorb the
    remainder, so sizes differ by at most one.
    """
    if len(queries) < 3:
        raise DataError("bucketing requires at least 3 queries")
    ordered = sorted(queries, key=lambda q: (len(normalize(q[1])), q[0]))
    n = len(ordered)
    base, rem = divmod(n, 3)
    sizes = [base + (1 if i < rem else 0) for i in range(3)]
    buckets = []
    start = 0
    for s in sizes:
        buckets.append([qid for qid, _ in ordered[start:start + s]])
        start += s
    return tuple(buckets)


# ---------------------------------------------------------------------------
# runs, reports, learning curve
# ---------------------------------------------------------------------------

def neural_run(params: ParameterStore, config: ModelConfig, corpus: Corpus,
               query_ids: Sequence[str], cache: EncodingCache | None = None,
               chunk: int = 32) -> dict[str, list[tuple[str, float]]]:
    """Score every judged candidate of the given queries (eval mode, batched)."""
    queries_by_id = {q.query_id: q for q in corpus.queries}
    if cache is None:
        cache = EncodingCache()
    run: dict[str, list[tuple[str, float]]] = {}
    ordered = sorted(query_ids)
    for start in range(0, len(ordered), chunk):
        block = ordered[start:start + chunk]
        texts = []
        docs = []
        pairs = []
        spans = []
        for qi, qid in enumerate(block):
            query = queries_by_id[qid]
            texts.append(query.text)
            doc_ids = sorted(query.judgments)
            lo = len(pairs)
            for doc_id in doc_ids:
                pairs.append((qi, len(docs)))
                docs.append(corpus.documents[doc_id])
            spans.append((qid, doc_ids, lo))
        scores = batch_scores(texts, docs, pairs, params, config, cache=cache).data
        for qid, doc_ids, lo in spans:
            run[qid] = [(doc_id, float(scores[lo + i])) for i, doc_id in enumerate(doc_ids)]
    return run


def judgments_for(corpus: Corpus, query_ids: Sequence[str]) -> dict[str, dict[str, int]]:
    queries_by_id = {q.query_id: q for q in corpus.queries}
    return {qid: dict(queries_by_id[qid].judgments) for qid in query_ids}


def learning_curve(entries: Sequence[tuple[int, ParameterStore]], config: ModelConfig,
                   corpus: Corpus, query_ids: Sequence[str], shuffles: int = 10,
                   ) -> list[tuple[int, float]]:
    """Evaluate checkpoints on a fixed test set: (instances seen, NDCG@10)."""
    grades = judgments_for(corpus, query_ids)
    cache = EncodingCache()
    rows = []
    for instances_seen, params in sorted(entries, key=lambda e: e[0]):
        run = neural_run(params, config, corpus, query_ids, cache=cache)
        report = evaluate_run(run, grades, shuffles=shuffles,
                              rng=np.random.default_rng(0))
        rows.append((instances_seen, report.mean_ndcg_at_10))
    return rows


def write_learning_curve_csv(rows: Sequence[tuple[int, float]], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("training_instances_seen,ndcg_at_10\n")
        for instances, value in rows:
            f.write(f"{instances},{value:.10g}\n")


def write_run_tsv(run: dict[str, list[tuple[str, float]]], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for qid in sorted(run):
            for doc_id, score in sorted(run[qid], key=lambda d: (-d[1], d[0])):
                f.write(f"{qid}\t{doc_id}\t{score:.10g}\n")


def read_run_tsv(path: str | Path) -> dict[str, list[tuple[str, float]]]:
    run: dict[str, list[tuple[str, float]]] = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise DataError(f"{Path(path).name} line {lineno}: expected 3 columns")
            qid, doc_id, score_text = parts
            try:
                score = float(score_text)
            except ValueError:
                raise DataError(f"{Path(path).name} line {lineno}: bad score") from None
            run.setdefault(qid, []).append((doc_id, score))
    return run


def write_report_csv(report: MetricReport, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("query_id,ndcg_at_1,ndcg_at_10\n")
        for m in sorted(report.per_query, key=lambda m: m.query_id):
            f.write(f"{m.query_id},{m.ndcg_at_1:.10g},{m.ndcg_at_10:.10g}\n")


def read_report_csv(path: str | Path) -> MetricReport:
    per_query = []
    with open(path, encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != ["query_id", "ndcg_at_1", "ndcg_at_10"]:
            raise DataError(f"{Path(path).name}: unexpected report header")
        for row in reader:
            per_query.append(QueryMetrics(row["query_id"], float(row["ndcg_at_1"]),
                                          float(row["ndcg_at_10"])))
    if not per_query:
        raise DataError(f"{Path(path).name}: empty report")
    return MetricReport(
        per_query=per_query,
        mean_ndcg_at_1=sum(m.ndcg_at_1 for m in per_query) / len(per_query),
        mean_ndcg_at_10=sum(m.ndcg_at_10 for m in per_query) / len(per_query),
    )


def write_report_summary(report: MetricReport, path: str | Path, label: str) -> None:
    lines = [
        f"run: {label}",
        f"queries: {len(report.per_query)}",
        f"mean NDCG@1:  {report.mean_ndcg_at_1:.4f}",
        f"mean NDCG@10: {report.mean_ndcg_at_10:.4f}",
        "",
    ]
    Path(path).write_text("\n".join(lines), encoding="utf-8")
