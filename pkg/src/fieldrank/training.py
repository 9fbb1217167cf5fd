"""Pairwise training: triple sampling, gain-weighted cross-entropy, Adam.

Each training instance is a query with two documents of different grades.
The loss is the grade-gain-weighted cross entropy of the softmax pairing of
the two predicted scores, averaged over a batch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dataclass_field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .corpus import Corpus
from .errors import ConfigError, DataError
from .model import (EncodingCache, ModelConfig, ParameterStore, batch_scores,
                    init_parameters)


@dataclass(frozen=True)
class TrainingTriple:
    query_id: str
    doc1_id: str
    doc2_id: str
    grade1: int
    grade2: int

    def __post_init__(self):
        if self.grade1 == self.grade2:
            raise ConfigError("training triple requires distinct grades")


@dataclass(frozen=True)
class LossConfig:
    gain_base: float = 2.0
    batch_size: int = 64

    def validate(self) -> None:
        if self.gain_base <= 1.0:
            raise ConfigError("gain_base must exceed 1 so the gain is strictly increasing")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")


def gain(grade: int, base: float = 2.0) -> float:
    """Exponential relevance gain, the same shape NDCG uses."""
    return base ** grade - 1.0


def loss_weights(grade1: int, grade2: int, base: float = 2.0) -> tuple[float, float]:
    g1, g2 = gain(grade1, base), gain(grade2, base)
    total = g1 + g2
    if total <= 0.0:
        raise ConfigError("gain sum is zero; grades must differ and be nonnegative")
    return g1 / total, g2 / total


def pair_probability(score1: float, score2: float) -> float:
    """Softmax probability that the first document outranks the second."""
    m = max(score1, score2)
    e1 = math.exp(score1 - m)
    e2 = math.exp(score2 - m)
    return e1 / (e1 + e2)


def pairwise_loss(score_pairs: Sequence[tuple[Tensor, Tensor]],
                  grade_pairs: Sequence[tuple[int, int]],
                  cfg: LossConfig = LossConfig()) -> Tensor:
    """Mean gain-weighted cross entropy over a batch of scored triples.

    Uses -log p1 = softplus(s2 - s1) and -log(1 - p1) = softplus(s1 - s2),
    which is overflow-safe and differentiable.
    """
    if not score_pairs or len(score_pairs) != len(grade_pairs):
        raise ConfigError("need one grade pair per score pair")
    terms = []
    for (s1, s2), (y1, y2) in zip(score_pairs, grade_pairs):
        w1, w2 = loss_weights(y1, y2, cfg.gain_base)
        diff = ad.sub(s1, s2)
        terms.append(ad.add(ad.scale(ad.softplus(ad.scale(diff, -1.0)), w1),
                            ad.scale(ad.softplus(diff), w2)))
    return ad.scale(ad.add_n(terms), 1.0 / len(terms))


def pairwise_loss_batched(scores1: Tensor, scores2: Tensor,
                          grade_pairs: Sequence[tuple[int, int]],
                          cfg: LossConfig = LossConfig()) -> Tensor:
    """Vectorized twin of ``pairwise_loss`` over aligned score vectors."""
    n = len(grade_pairs)
    if scores1.shape != (n,) or scores2.shape != (n,):
        raise ConfigError("score vectors must align with the grade pairs")
    weights = [loss_weights(y1, y2, cfg.gain_base) for y1, y2 in grade_pairs]
    w1 = ad.constant([w[0] for w in weights])
    w2 = ad.constant([w[1] for w in weights])
    diff = ad.sub(scores1, scores2)
    terms = ad.add(ad.hadamard(w1, ad.softplus(ad.scale(diff, -1.0))),
                   ad.hadamard(w2, ad.softplus(diff)))
    return ad.scale(ad.sum_all(terms), 1.0 / n)


def _softplus_float(x: float) -> float:
    return math.log1p(math.exp(-abs(x))) + max(x, 0.0)


def pairwise_loss_value(score_pairs: Sequence[tuple[float, float]],
                        grade_pairs: Sequence[tuple[int, int]],
                        cfg: LossConfig = LossConfig()) -> float:
    """Float-only twin of ``pairwise_loss`` for validation passes."""
    if not score_pairs or len(score_pairs) != len(grade_pairs):
        raise ConfigError("need one grade pair per score pair")
    total = 0.0
    for (s1, s2), (y1, y2) in zip(score_pairs, grade_pairs):
        w1, w2 = loss_weights(y1, y2, cfg.gain_base)
        d = s1 - s2
        total += w1 * _softplus_float(-d) + w2 * _softplus_float(d)
    return total / len(score_pairs)


# ---------------------------------------------------------------------------
# triple sampling
# ---------------------------------------------------------------------------

def sample_triples(query_id: str, judgments: dict[str, int], cap: int = 50,
                   rng: np.random.Generator | None = None) -> list[TrainingTriple]:
    """Emit up to ``cap`` triples with the higher grade first.

    All possible triples are returned when there are at most ``cap``;
    otherwise draws pick a label pair uniformly, then documents uniformly
    within each label, without repeating a triple.
    """
    by_grade: dict[int, list[str]] = {}
    for doc_id in sorted(judgments):
        by_grade.setdefault(judgments[doc_id], []).append(doc_id)
    grades = sorted(by_grade, reverse=True)
    pairs = [(hi, lo) for i, hi in enumerate(grades) for lo in grades[i + 1:]]
    if not pairs:
        return []

    sizes = {p: len(by_grade[p[0]]) * len(by_grade[p[1]]) for p in pairs}
    total = sum(sizes.values())
    if total <= cap:
        return [TrainingTriple(query_id, d1, d2, hi, lo)
                for hi, lo in pairs
                for d1 in by_grade[hi] for d2 in by_grade[lo]]

    if rng is None:
        raise ConfigError(f"query {query_id!r}: rng required to sample "
                          f"{cap} of {total} possible triples")
    used: dict[tuple[int, int], set[tuple[str, str]]] = {p: set() for p in pairs}
    out: list[TrainingTriple] = []
    for _ in range(cap):
        eligible = [p for p in pairs if len(used[p]) < sizes[p]]
        if not eligible:
            break
        hi, lo = eligible[int(rng.integers(len(eligible)))]
        his, los = by_grade[hi], by_grade[lo]
        if len(used[(hi, lo)]) * 2 > sizes[(hi, lo)]:
            remaining = [(a, b) for a in his for b in los
                         if (a, b) not in used[(hi, lo)]]
            d1, d2 = remaining[int(rng.integers(len(remaining)))]
        else:
            while True:
                d1 = his[int(rng.integers(len(his)))]
                d2 = los[int(rng.integers(len(los)))]
                if (d1, d2) not in used[(hi, lo)]:
                    break
        used[(hi, lo)].add((d1, d2))
        out.append(TrainingTriple(query_id, d1, d2, hi, lo))
    return out


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    step: int = 0
    first_moment: dict[str, np.ndarray] = dataclass_field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = dataclass_field(default_factory=dict)


def adam_update(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray,
                step: int, lr: float, beta1: float, beta2: float, eps: float) -> None:
    """Bias-corrected Adam update, in place."""
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1 ** step)
    v_hat = v / (1.0 - beta2 ** step)
    param -= lr * m_hat / (np.sqrt(v_hat) + eps)


_SPARSE_ROW_THRESHOLD = 4096  # wide embeddings get the row-sparse update path


class Adam:
    def __init__(self, params: ParameterStore, learning_rate: float,
                 beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-8):
        if learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        self.params = params
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.state = AdamState()
        self._active_rows: dict[str, np.ndarray] = {}

    def step(self) -> None:
        self.state.step += 1
        for name, tensor in self.params.items():
            grad = tensor.grad
            if grad is None:
                # a parameter that has never received gradient stays put,
                # bit for bit (its moments are identically zero)
                if name not in self.state.first_moment:
                    continue
                grad = np.zeros_like(tensor.data)
            if name not in self.state.first_moment:
                self.state.first_moment[name] = np.zeros_like(tensor.data)
                self.state.second_moment[name] = np.zeros_like(tensor.data)
            first = self.state.first_moment[name]
            second = self.state.second_moment[name]
            if tensor.data.ndim == 2 and tensor.data.shape[0] > _SPARSE_ROW_THRESHOLD:
                # rows with zero gradient and zero moments would get a zero
                # update; restricting the pass to ever-touched rows is exact
                active = self._active_rows.setdefault(
                    name, np.zeros(tensor.data.shape[0], dtype=bool))
                active |= np.any(grad != 0.0, axis=1)
                rows = np.flatnonzero(active)
                if rows.size == 0:
                    continue
                p_rows = tensor.data[rows]
                m_rows = first[rows]
                v_rows = second[rows]
                adam_update(p_rows, grad[rows], m_rows, v_rows, self.state.step,
                            self.learning_rate, self.beta1, self.beta2, self.epsilon)
                tensor.data[rows] = p_rows
                first[rows] = m_rows
                second[rows] = v_rows
            else:
                adam_update(tensor.data, grad, first, second, self.state.step,
                            self.learning_rate, self.beta1, self.beta2, self.epsilon)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainSchedule:
    seed: int
    learning_rate: float = 1e-3
    epochs: int = 5
    triples_per_query: int = 50
    patience: int = 3
    checkpoint_every: int = 0  # extra checkpoints every N steps; epoch ends always
    max_steps: int = 0  # 0 means no cap
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8

    def validate(self) -> None:
        if self.epochs < 1 or self.patience < 1:
            raise ConfigError("epochs and patience must be >= 1")
        if self.triples_per_query < 1:
            raise ConfigError("triples_per_query must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")


@dataclass
class TrainingCheckpoint:
    step: int
    instances_seen: int
    params: ParameterStore


@dataclass
class TrainResult:
    checkpoints: list[TrainingCheckpoint]
    loss_rows: list[tuple[int, float | None, float | None]]  # step, train, valid
    best_params: ParameterStore
    best_valid_loss: float
    steps: int
    instances_seen: int


def _batch_setup(triples: Sequence[TrainingTriple], corpus: Corpus, queries_by_id: dict):
    """Deduplicated queries/documents plus pair index lists for a triple batch."""
    query_index: dict[str, int] = {}
    doc_index: dict[str, int] = {}
    texts: list[str] = []
    docs = []
    pairs: list[tuple[int, int]] = []
    for t in triples:
        if t.query_id not in query_index:
            query_index[t.query_id] = len(texts)
            texts.append(queries_by_id[t.query_id].text)
        for doc_id in (t.doc1_id, t.doc2_id):
            if doc_id not in doc_index:
                doc_index[doc_id] = len(docs)
                docs.append(corpus.documents[doc_id])
    for t in triples:  # first all doc1 pairs, then all doc2 pairs
        pairs.append((query_index[t.query_id], doc_index[t.doc1_id]))
    for t in triples:
        pairs.append((query_index[t.query_id], doc_index[t.doc2_id]))
    return texts, docs, pairs


def _batch_loss(triples: Sequence[TrainingTriple], corpus: Corpus, queries_by_id: dict,
                params: ParameterStore, config: ModelConfig, loss_cfg: LossConfig,
                mode: str, rng: np.random.Generator | None,
                cache: EncodingCache) -> Tensor:
    texts, docs, pairs = _batch_setup(triples, corpus, queries_by_id)
    scores = batch_scores(texts, docs, pairs, params, config, mode, rng, cache)
    n = len(triples)
    s1 = ad.slice1d(scores, 0, n)
    s2 = ad.slice1d(scores, n, 2 * n)
    return pairwise_loss_batched(s1, s2, [(t.grade1, t.grade2) for t in triples],
                                 loss_cfg)


def _validation_loss(triples: Sequence[TrainingTriple], corpus: Corpus,
                     queries_by_id: dict, params: ParameterStore, config: ModelConfig,
                     loss_cfg: LossConfig, cache: EncodingCache,
                     chunk: int = 256) -> float:
    # eval mode, no tape, chunked to bound the working set
    score_pairs: list[tuple[float, float]] = []
    grade_pairs: list[tuple[int, int]] = []
    for start in range(0, len(triples), chunk):
        part = triples[start:start + chunk]
        texts, docs, pairs = _batch_setup(part, corpus, queries_by_id)
        scores = batch_scores(texts, docs, pairs, params, config, cache=cache).data
        n = len(part)
        score_pairs.extend(zip(scores[:n].tolist(), scores[n:].tolist()))
        grade_pairs.extend((t.grade1, t.grade2) for t in part)
    return pairwise_loss_value(score_pairs, grade_pairs, loss_cfg)


def _schedule_rngs(schedule: TrainSchedule):
    seeds = np.random.SeedSequence(schedule.seed).spawn(4)
    return tuple(np.random.default_rng(s) for s in seeds)


def initial_parameters(model_config: ModelConfig, schedule: TrainSchedule) -> ParameterStore:
    """The exact parameter initialization a training run with this schedule uses."""
    init_rng, _, _, _ = _schedule_rngs(schedule)
    return init_parameters(model_config, init_rng)


def sample_split_triples(corpus: Corpus, query_ids: Sequence[str], cap: int,
                         rng: np.random.Generator) -> list[TrainingTriple]:
    queries_by_id = {q.query_id: q for q in corpus.queries}
    triples: list[TrainingTriple] = []
    for qid in sorted(query_ids):
        triples.extend(sample_triples(qid, queries_by_id[qid].judgments, cap, rng))
    return triples


def train(corpus: Corpus, splits: tuple[Sequence[str], ...], model_config: ModelConfig,
          loss_config: LossConfig, schedule: TrainSchedule) -> TrainResult:
    """Run pairwise training and return checkpoints plus the loss curve.

    Model selection keeps the parameters with the lowest validation loss;
    training stops early after ``patience`` epochs without improvement.
    """
    model_config.validate()
    loss_config.validate()
    schedule.validate()
    train_qids, valid_qids = list(splits[0]), list(splits[1])
    if set(train_qids) & set(valid_qids):
        raise DataError("train and validation splits must be disjoint")

    init_rng, sample_rng, shuffle_rng, dropout_rng = _schedule_rngs(schedule)

    queries_by_id = {q.query_id: q for q in corpus.queries}
    train_triples = sample_split_triples(corpus, train_qids, schedule.triples_per_query,
                                         sample_rng)
    if not train_triples:
        raise DataError("empty training set: no query has two distinct grades")
    valid_triples = sample_split_triples(corpus, valid_qids, schedule.triples_per_query,
                                         sample_rng)

    params = init_parameters(model_config, init_rng)
    optimizer = Adam(params, schedule.learning_rate, schedule.adam_beta1,
                     schedule.adam_beta2, schedule.adam_epsilon)
    cache = EncodingCache()

    loss_rows: list[tuple[int, float | None, float | None]] = []
    checkpoints: list[TrainingCheckpoint] = []
    best_valid = math.inf
    best_params = params.copy()
    bad_epochs = 0
    step = 0
    instances_seen = 0
    batch_size = loss_config.batch_size
    stop = False

    for _epoch in range(schedule.epochs):
        order = shuffle_rng.permutation(len(train_triples))
        for start in range(0, len(order), batch_size):
            batch = [train_triples[i] for i in order[start:start + batch_size]]
            params.zero_grads()
            with Tape() as tape:
                loss = _batch_loss(batch, corpus, queries_by_id, params, model_config,
                                   loss_config, "train", dropout_rng, cache)
            tape.backward(loss)
            optimizer.step()
            step += 1
            instances_seen += len(batch)
            loss_rows.append((step, float(loss.data), None))
            if schedule.checkpoint_every and step % schedule.checkpoint_every == 0:
                checkpoints.append(TrainingCheckpoint(step, instances_seen, params.copy()))
            if schedule.max_steps and step >= schedule.max_steps:
                stop = True
                break

        checkpoints.append(TrainingCheckpoint(step, instances_seen, params.copy()))
        if valid_triples:
            valid_loss = _validation_loss(valid_triples, corpus, queries_by_id, params,
                                          model_config, loss_config, cache)
            loss_rows.append((step, None, valid_loss))
            if valid_loss < best_valid:
                best_valid = valid_loss
                best_params = params.copy()
                bad_epochs = 0
            else:
                bad_epochs += 1
                if bad_epochs >= schedule.patience:
                    stop = True
        else:
            best_params = params.copy()
        if stop:
            break

    if math.isinf(best_valid):
        best_params = params.copy()
    return TrainResult(checkpoints=checkpoints, loss_rows=loss_rows,
                       best_params=best_params, best_valid_loss=best_valid,
                       steps=step, instances_seen=instances_seen)


def write_loss_csv(rows: Sequence[tuple[int, float | None, float | None]],
                   path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("step,train_loss,valid_loss\n")
        for step, train_loss, valid_loss in rows:
            t = "" if train_loss is None else f"{train_loss:.10g}"
            v = "" if valid_loss is None else f"{valid_loss:.10g}"
            f.write(f"{step},{t},{v}\n")
