"""Classical scorers: BM25 over concatenated fields and BM25F.

BM25F merges per-field term frequencies into a single pseudo-frequency
before saturation rather than interpolating per-field scores linearly.
Both scorers share Robertson/Sparck-Jones idf with 0.5 smoothing, floored
at zero, computed over concatenated-field statistics.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field as dataclass_field
from typing import Iterable, Sequence

from .corpus import Corpus, Document
from .errors import ConfigError, DataError
from .text import normalize, split_url

BASELINE_FIELDS = ("title", "url", "body", "anchors", "clicked_queries")


def field_tokens(doc: Document, field_name: str) -> list[str]:
    """All tokens of a field, instances concatenated; URLs use the URL splitter."""
    tokenizer = split_url if field_name == "url" else normalize
    tokens: list[str] = []
    for inst in doc.instances(field_name):
        tokens.extend(tokenizer(inst))
    return tokens


def document_tokens(doc: Document, fields: Sequence[str] = BASELINE_FIELDS) -> list[str]:
    tokens: list[str] = []
    for f in fields:
        tokens.extend(field_tokens(doc, f))
    return tokens


@dataclass
class CollectionStats:
    n_docs: int
    concat_doc_freq: dict[str, int]
    concat_avg_len: float
    field_doc_freq: dict[str, dict[str, int]]
    field_avg_len: dict[str, float]

    def idf(self, term: str) -> float:
        df = self.concat_doc_freq.get(term, 0)
        return max(0.0, math.log((self.n_docs - df + 0.5) / (df + 0.5)))


def build_collection_stats(docs: Iterable[Document],
                           fields: Sequence[str] = BASELINE_FIELDS) -> CollectionStats:
    n_docs = 0
    concat_df: Counter[str] = Counter()
    field_df: dict[str, Counter[str]] = {f: Counter() for f in fields}
    concat_len_total = 0
    field_len_total = {f: 0 for f in fields}
    for doc in docs:
        n_docs += 1
        seen_concat: set[str] = set()
        for f in fields:
            tokens = field_tokens(doc, f)
            field_len_total[f] += len(tokens)
            field_df[f].update(set(tokens))
            seen_concat.update(tokens)
            concat_len_total += len(tokens)
        concat_df.update(seen_concat)
    if n_docs == 0:
        raise DataError("cannot build statistics over an empty collection")
    return CollectionStats(
        n_docs=n_docs,
        concat_doc_freq=dict(concat_df),
        concat_avg_len=concat_len_total / n_docs,
        field_doc_freq={f: dict(c) for f, c in field_df.items()},
        field_avg_len={f: field_len_total[f] / n_docs for f in fields},
    )


def bm25(query_tokens: Sequence[str], doc_tokens: Sequence[str], stats: CollectionStats,
         k1: float = 1.2, b: float = 0.75) -> float:
    """Okapi BM25 over one token stream; duplicated query terms count twice."""
    if stats.n_docs < 1:
        raise DataError("BM25 requires a nonempty collection")
    if stats.concat_avg_len <= 0:
        raise DataError("BM25 requires a positive average document length")
    tf = Counter(doc_tokens)
    length_norm = 1.0 - b + b * len(doc_tokens) / stats.concat_avg_len
    score = 0.0
    for term in query_tokens:
        f = tf.get(term, 0)
        if f == 0:
            continue
        score += stats.idf(term) * f * (k1 + 1.0) / (f + k1 * length_norm)
    return score


@dataclass(frozen=True)
class Bm25fWeights:
    field_weights: dict[str, float]
    length_norms: dict[str, float] = dataclass_field(default_factory=dict)
    k1: float = 1.2

    def validate(self) -> None:
        if not self.field_weights:
            raise ConfigError("BM25F requires at least one field weight")
        if any(w < 0 for w in self.field_weights.values()):
            raise ConfigError("BM25F field weights must be nonnegative")
        if all(w == 0 for w in self.field_weights.values()):
            raise ConfigError("BM25F requires at least one positive field weight")
        for f, b in self.length_norms.items():
            if not 0.0 <= b <= 1.0:
                raise ConfigError(f"BM25F length normalization for {f!r} must be in [0, 1]")
        if self.k1 <= 0:
            raise ConfigError("BM25F k1 must be positive")

    def length_norm(self, field_name: str) -> float:
        return self.length_norms.get(field_name, 0.75)


def bm25f(query_tokens: Sequence[str], fielded_doc: dict[str, list[str]],
          stats: CollectionStats, weights: Bm25fWeights) -> float:
    """Fielded BM25: cross-field pseudo-frequency, then balanced saturation.

    pseudo_tf(t) = sum over fields of w_f * tf_f(t) / (1 - b_f + b_f * len_f / avg_f)
    score = sum over query terms of idf(t) * pseudo_tf / (k1 + pseudo_tf)
    """
    weights.validate()
    if stats.n_docs < 1:
        raise DataError("BM25F requires a nonempty collection")
    field_tf: dict[str, Counter[str]] = {}
    field_len: dict[str, int] = {}
    for f, tokens in fielded_doc.items():
        field_tf[f] = Counter(tokens)
        field_len[f] = len(tokens)

    score = 0.0
    for term in query_tokens:
        pseudo = 0.0
        for f, w in weights.field_weights.items():
            if w == 0.0 or f not in field_tf:
                continue
            avg = stats.field_avg_len.get(f, 0.0)
            if avg <= 0:
                continue
            b = weights.length_norm(f)
            norm = 1.0 - b + b * field_len[f] / avg
            pseudo += w * field_tf[f].get(term, 0) / norm
        if pseudo > 0.0:
            score += stats.idf(term) * pseudo / (weights.k1 + pseudo)
    return score


def interpolate_scores(scores: Sequence[float], weights: Sequence[float]) -> float:
    """Convex combination of per-field scores."""
    if len(scores) != len(weights):
        raise ConfigError("one weight per score required")
    if any(w < 0 for w in weights):
        raise ConfigError("interpolation weights must be nonnegative")
    if abs(sum(weights) - 1.0) > 1e-9:
        raise ConfigError("interpolation weights must sum to 1")
    return sum(s * w for s, w in zip(scores, weights))


# ---------------------------------------------------------------------------
# producing run files
# ---------------------------------------------------------------------------

def bm25_run(corpus: Corpus, query_ids: Sequence[str], stats: CollectionStats,
             k1: float = 1.2, b: float = 0.75,
             fields: Sequence[str] = BASELINE_FIELDS) -> dict[str, list[tuple[str, float]]]:
    queries_by_id = {q.query_id: q for q in corpus.queries}
    run: dict[str, list[tuple[str, float]]] = {}
    for qid in sorted(query_ids):
        query = queries_by_id[qid]
        q_tokens = normalize(query.text)
        scored = []
        for doc_id in sorted(query.judgments):
            tokens = document_tokens(corpus.documents[doc_id], fields)
            scored.append((doc_id, bm25(q_tokens, tokens, stats, k1, b)))
        run[qid] = scored
    return run


def bm25f_run(corpus: Corpus, query_ids: Sequence[str], stats: CollectionStats,
              weights: Bm25fWeights) -> dict[str, list[tuple[str, float]]]:
    queries_by_id = {q.query_id: q for q in corpus.queries}
    run: dict[str, list[tuple[str, float]]] = {}
    for qid in sorted(query_ids):
        query = queries_by_id[qid]
        q_tokens = normalize(query.text)
        scored = []
        for doc_id in sorted(query.judgments):
            doc = corpus.documents[doc_id]
            fielded = {f: field_tokens(doc, f) for f in weights.field_weights}
            scored.append((doc_id, bm25f(q_tokens, fielded, stats, weights)))
        run[qid] = scored
    return run


def tune_bm25f_weights(corpus: Corpus, query_ids: Sequence[str], stats: CollectionStats,
                       candidates: Sequence[Bm25fWeights]) -> Bm25fWeights:
    """Pick the candidate weighting with the best NDCG@10 on the given queries."""
    from .evaluation import evaluate_run, judgments_for

    if not candidates:
        raise ConfigError("no candidate weightings to tune over")
    grades = judgments_for(corpus, query_ids)
    best = None
    best_score = -1.0
    for weights in candidates:
        run = bm25f_run(corpus, query_ids, stats, weights)
        report = evaluate_run(run, grades)
        if report.mean_ndcg_at_10 > best_score:
            best_score = report.mean_ndcg_at_10
            best = weights
    return best
