"""Gradient integrity checks: per-op programs and the full scoring graph.

Each program builds a small random computation ending in a scalar and is
verified against central finite differences. The toy model includes an
always-empty field so the finite differences also confirm that masking
really zeroes the gradients of missing instances.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import SparseVector, Tensor, grad_check
from .corpus import Document
from .model import (FieldConfig, ModelConfig, QueryTowerConfig, document_repr,
                    init_parameters, match, query_repr)
from .training import pairwise_loss


def _t(rng: np.random.Generator, *shape: int) -> Tensor:
    return Tensor(rng.uniform(-1.5, 1.5, size=shape), requires_grad=True)


def _prog_add(rng):
    a, b = _t(rng, 5), _t(rng, 5)
    return lambda: ad.sum_all(ad.tanh(ad.add(a, b))), [a, b]


def _prog_sub(rng):
    a, b = _t(rng, 4), _t(rng, 4)
    return lambda: ad.sum_all(ad.tanh(ad.sub(a, b))), [a, b]


def _prog_add_n(rng):
    parts = [_t(rng, 3) for _ in range(4)]
    return lambda: ad.sum_all(ad.tanh(ad.add_n(parts))), parts


def _prog_scale(rng):
    x = _t(rng, 6)
    return lambda: ad.sum_all(ad.tanh(ad.scale(x, 0.7))), [x]


def _prog_hadamard(rng):
    a, b = _t(rng, 5), _t(rng, 5)
    return lambda: ad.sum_all(ad.hadamard(a, b)), [a, b]


def _prog_tanh(rng):
    x = _t(rng, 2, 3)
    return lambda: ad.sum_all(ad.tanh(x)), [x]


def _prog_softplus(rng):
    x = _t(rng, 5)
    return lambda: ad.sum_all(ad.softplus(x)), [x]


def _prog_concat(rng):
    a, b, c = _t(rng, 2), _t(rng, 3), _t(rng, 4)
    return lambda: ad.sum_all(ad.tanh(ad.concat([a, b, c]))), [a, b, c]


def _prog_slice1d(rng):
    x = _t(rng, 7)
    return lambda: ad.sum_all(ad.tanh(ad.slice1d(x, 2, 6))), [x]


def _prog_stack(rng):
    parts = [_t(rng, 4) for _ in range(3)]
    return lambda: ad.sum_all(ad.tanh(ad.stack(parts))), parts


def _prog_sum_rows(rng):
    x = _t(rng, 4, 3)
    return lambda: ad.sum_all(ad.tanh(ad.sum_rows(x))), [x]


def _prog_vdot(rng):
    a, b = _t(rng, 6), _t(rng, 6)
    return lambda: ad.vdot(ad.tanh(a), b), [a, b]


def _prog_dense_vector(rng):
    x, w, b = _t(rng, 4), _t(rng, 4, 3), _t(rng, 3)
    return lambda: ad.sum_all(ad.tanh(ad.dense(x, w, b))), [x, w, b]


def _prog_dense_matrix(rng):
    x, w, b = _t(rng, 5, 4), _t(rng, 4, 3), _t(rng, 3)
    return lambda: ad.sum_all(ad.tanh(ad.dense(x, w, b))), [x, w, b]


def _prog_conv1d_stride1(rng):
    x, w, b = _t(rng, 6, 3), _t(rng, 3, 3, 2), _t(rng, 2)
    return lambda: ad.sum_all(ad.tanh(ad.conv1d(x, w, b, 1))), [x, w, b]


def _prog_conv1d_stride2(rng):
    x, w, b = _t(rng, 7, 2), _t(rng, 3, 2, 3), _t(rng, 3)
    return lambda: ad.sum_all(ad.tanh(ad.conv1d(x, w, b, 2))), [x, w, b]


def _prog_pool_max(rng):
    x = _t(rng, 5, 3)
    return lambda: ad.sum_all(ad.pool(x, "max")), [x]


def _prog_pool_avg(rng):
    x = _t(rng, 5, 3)
    return lambda: ad.sum_all(ad.tanh(ad.pool(x, "avg"))), [x]


def _prog_pool_valid_rows(rng):
    x = _t(rng, 6, 2)
    return lambda: ad.sum_all(ad.pool(x, "avg", valid_rows=3)), [x]


def _prog_l2_normalize_rows(rng):
    # rows are bounded away from zero so the normalization is smooth
    data = rng.uniform(-1.5, 1.5, size=(4, 3))
    data += np.where(data >= 0, 0.5, -0.5)
    x = Tensor(data, requires_grad=True)
    return lambda: ad.sum_all(ad.tanh(ad.l2_normalize_rows(x))), [x]


def _prog_sparse_embed(rng):
    dim = 30
    emb = _t(rng, dim, 4)
    vectors = []
    for _ in range(3):
        nnz = int(rng.integers(1, 4))
        idx = rng.choice(dim, size=nnz, replace=False)
        vectors.append(SparseVector(dim, idx, rng.uniform(0.5, 2.0, size=nnz)))
    vectors.append(SparseVector.empty(dim))  # padding row
    return lambda: ad.sum_all(ad.tanh(ad.sparse_embed(vectors, emb))), [emb]


def _prog_sparse_embed_packed(rng):
    dim = 30
    emb = _t(rng, dim, 4)
    counts = rng.integers(1, 4, size=7)
    counts[0] = 0  # leading, interior and trailing padding tokens
    counts[3] = 0
    counts[-1] = 0
    total = int(counts.sum())
    indices = rng.integers(0, dim, size=total)  # duplicates across tokens allowed
    values = rng.uniform(0.5, 2.0, size=total)
    return (lambda: ad.sum_all(ad.tanh(ad.sparse_embed_packed(indices, values,
                                                              counts, emb))), [emb])


def _prog_conv1d_batched(rng):
    x, w, b = _t(rng, 3, 6, 2), _t(rng, 3, 2, 3), _t(rng, 3)
    return lambda: ad.sum_all(ad.tanh(ad.conv1d(x, w, b, 2))), [x, w, b]


def _prog_pool_batched_max(rng):
    x = _t(rng, 3, 4, 2)
    return lambda: ad.sum_all(ad.pool(x, "max")), [x]


def _prog_pool_batched_avg(rng):
    x = _t(rng, 3, 4, 2)
    return lambda: ad.sum_all(ad.tanh(ad.pool(x, "avg"))), [x]


def _prog_l2_normalize_batched(rng):
    data = rng.uniform(-1.5, 1.5, size=(2, 3, 3))
    data += np.where(data >= 0, 0.5, -0.5)
    x = Tensor(data, requires_grad=True)
    return lambda: ad.sum_all(ad.tanh(ad.l2_normalize_rows(x))), [x]


def _prog_reshape(rng):
    x = _t(rng, 6, 2)
    return lambda: ad.sum_all(ad.tanh(ad.reshape(x, (3, 2, 2)))), [x]


def _prog_take_rows(rng):
    x = _t(rng, 4, 3)
    idx = [0, 2, 2, 3]  # a repeated row accumulates gradient
    return lambda: ad.sum_all(ad.tanh(ad.take_rows(x, idx))), [x]


def _prog_slice_cols(rng):
    x = _t(rng, 3, 6)
    return lambda: ad.sum_all(ad.tanh(ad.slice_cols(x, 1, 4))), [x]


def _prog_hconcat(rng):
    a, b = _t(rng, 3, 2), _t(rng, 3, 4)
    return lambda: ad.sum_all(ad.tanh(ad.hconcat([a, b]))), [a, b]


def _prog_segment_mean_rows(rng):
    x = _t(rng, 6, 3)
    offsets = [0, 0, 2, 2, 6, 6]  # leading, interior and trailing empty segments
    divisors = [1, 2, 1, 4, 1]
    return (lambda: ad.sum_all(ad.tanh(ad.segment_mean_rows(x, offsets, divisors))), [x])


def _prog_matvec(rng):
    x, w = _t(rng, 4, 3), _t(rng, 3)
    return lambda: ad.sum_all(ad.tanh(ad.matvec(x, w))), [x, w]


def _prog_add_scalar(rng):
    x, s = _t(rng, 5), Tensor(rng.uniform(-1, 1), requires_grad=True)
    return lambda: ad.sum_all(ad.tanh(ad.add_scalar(x, s))), [x, s]


OP_PROGRAMS: dict[str, Callable] = {
    "add": _prog_add,
    "sub": _prog_sub,
    "add_n": _prog_add_n,
    "scale": _prog_scale,
    "hadamard": _prog_hadamard,
    "tanh": _prog_tanh,
    "softplus": _prog_softplus,
    "concat": _prog_concat,
    "slice1d": _prog_slice1d,
    "stack": _prog_stack,
    "sum_rows": _prog_sum_rows,
    "vdot": _prog_vdot,
    "dense_vector": _prog_dense_vector,
    "dense_matrix": _prog_dense_matrix,
    "conv1d_stride1": _prog_conv1d_stride1,
    "conv1d_stride2": _prog_conv1d_stride2,
    "pool_max": _prog_pool_max,
    "pool_avg": _prog_pool_avg,
    "pool_valid_rows": _prog_pool_valid_rows,
    "l2_normalize_rows": _prog_l2_normalize_rows,
    "sparse_embed": _prog_sparse_embed,
    "sparse_embed_packed": _prog_sparse_embed_packed,
    "conv1d_batched": _prog_conv1d_batched,
    "pool_batched_max": _prog_pool_batched_max,
    "pool_batched_avg": _prog_pool_batched_avg,
    "l2_normalize_batched": _prog_l2_normalize_batched,
    "reshape": _prog_reshape,
    "take_rows": _prog_take_rows,
    "slice_cols": _prog_slice_cols,
    "hconcat": _prog_hconcat,
    "segment_mean_rows": _prog_segment_mean_rows,
    "matvec": _prog_matvec,
    "add_scalar": _prog_add_scalar,
}


def toy_model_config(pool_over_true_length: bool = False) -> ModelConfig:
    """All dims at most 8, dropout off; small enough for finite differences."""
    return ModelConfig(
        fields=(
            FieldConfig(name="title", max_instances=1, max_tokens=4, conv1_window=2,
                        conv1_stride=1, conv2_window=2, conv2_stride=1, conv_channels=3,
                        pooling="max", output_dim=3),
            FieldConfig(name="anchors", max_instances=2, max_tokens=3, conv1_window=2,
                        conv1_stride=1, conv2_window=1, conv2_stride=1, conv_channels=3,
                        pooling="avg", output_dim=2),
            FieldConfig(name="clicked_queries", max_instances=2, max_tokens=3,
                        conv1_window=2, conv1_stride=1, conv2_window=1, conv2_stride=1,
                        conv_channels=2, pooling="max", output_dim=2),
        ),
        query=QueryTowerConfig(max_tokens=3, conv1_window=2, conv1_stride=1,
                               conv2_window=1, conv2_stride=1, conv_channels=3,
                               pooling="max"),
        embed_dim=4,
        matching_hidden_dim=4,
        dropout_keep_prob=1.0,
        use_field_dropout=False,
        pool_over_true_length=pool_over_true_length,
    )


def toy_documents() -> tuple[Document, Document]:
    # clicked_queries is left empty on one side to exercise masking
    doc1 = Document(id="t1", title="red fox jumps", url="www.fox.com",
                    body="unused", anchors=["fast fox", "red"], clicked_queries=[])
    doc2 = Document(id="t2", title="blue whale swims", url="www.whale.com",
                    body="unused", anchors=["big whale"],
                    clicked_queries=["whale facts", "big sea whale"])
    return doc1, doc2


def scoring_graph_gradcheck(seed: int = 0, epsilon: float = 1e-5,
                            pool_over_true_length: bool = False) -> float:
    config = toy_model_config(pool_over_true_length)
    params = init_parameters(config, np.random.default_rng(seed))
    doc, _ = toy_documents()

    def f():
        q = query_repr("red fox", params, config)
        d = document_repr(doc, params, config)
        return match(q, d, params, config)

    return grad_check(f, params.tensors(), epsilon=epsilon, coord_limit=64,
                      rng=np.random.default_rng(seed + 1))


def batched_graph_gradcheck(seed: int = 0, epsilon: float = 1e-5,
                            matching: str = "joint") -> float:
    """Finite differences through the batched forward path and batched loss."""
    from .model import batch_scores
    from .training import pairwise_loss_batched

    config = toy_model_config()
    if matching != "joint":
        config = ModelConfig(**{**vars(config), "matching": matching})
    params = init_parameters(config, np.random.default_rng(seed))
    doc1, doc2 = toy_documents()

    def f():
        scores = batch_scores(["red fox", "big whale"], [doc1, doc2],
                              [(0, 0), (1, 1), (0, 1), (1, 0)], params, config)
        s1 = ad.slice1d(scores, 0, 2)
        s2 = ad.slice1d(scores, 2, 4)
        return pairwise_loss_batched(s1, s2, [(4, 0), (3, 1)])

    return grad_check(f, params.tensors(), epsilon=epsilon, coord_limit=64,
                      rng=np.random.default_rng(seed + 1))


def training_step_gradcheck(seed: int = 0, epsilon: float = 1e-5) -> float:
    config = toy_model_config()
    params = init_parameters(config, np.random.default_rng(seed))
    doc1, doc2 = toy_documents()

    def f():
        q = query_repr("red fox", params, config)
        s1 = match(q, document_repr(doc1, params, config), params, config)
        s2 = match(q, document_repr(doc2, params, config), params, config)
        return pairwise_loss([(s1, s2)], [(4, 0)])

    return grad_check(f, params.tensors(), epsilon=epsilon, coord_limit=64,
                      rng=np.random.default_rng(seed + 1))


def run_gradcheck(seed: int = 0, epsilon: float = 1e-5) -> dict[str, float]:
    """Max relative finite-difference error for every op and the full graphs."""
    rng = np.random.default_rng(seed)
    results: dict[str, float] = {}
    for name, build in OP_PROGRAMS.items():
        f, params = build(rng)
        results[name] = grad_check(f, params, epsilon=epsilon)
    results["scoring_graph"] = scoring_graph_gradcheck(seed, epsilon)
    results["scoring_graph_true_length_pooling"] = scoring_graph_gradcheck(
        seed, epsilon, pool_over_true_length=True)
    results["training_step"] = training_step_gradcheck(seed, epsilon)
    results["batched_graph"] = batched_graph_gradcheck(seed, epsilon)
    results["batched_graph_score_aggregation"] = batched_graph_gradcheck(
        seed, epsilon, matching="score_aggregation")
    return results
