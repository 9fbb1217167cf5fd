"""Multi-field neural ranker: per-field instance encoders, masked field
aggregation, field-level dropout, per-field query representations, and a
Hadamard matching network.

A document representation is the concatenation, in configured field order, of
masked averages of instance representations. Each instance runs through the
same encoder shape (shared tri-gram embedding, two 1-D convolutions, pooling,
a dense projection, tanh everywhere); hyperparameters differ per field. The
query tower reuses that encoder and emits one slice per document field, and
the matching network scores the Hadamard product of the two representations
with a single hidden layer, never a per-field dot product.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field as dataclass_field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import Document, select_instances
from .errors import ConfigError, DataError
from .text import (DEFAULT_SPACE, TRIGRAM_DIM, EncodedText, SparseVector,
                   encode_tokens, normalize, split_url)

CHECKPOINT_FORMAT = "fieldrank-checkpoint-v1"
FIELD_ORDER = ("title", "url", "body", "anchors", "clicked_queries")


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

def conv_output_length(seq: int, window: int, stride: int) -> int:
    """Output length of a valid (unpadded) convolution; raises if too short."""
    if seq < window:
        raise ConfigError(f"sequence length {seq} shorter than window {window}")
    return (seq - window) // stride + 1


@dataclass(frozen=True)
class FieldConfig:
    """Per-field encoder hyperparameters."""

    name: str
    max_instances: int
    max_tokens: int
    conv1_window: int
    conv1_stride: int
    conv2_window: int
    conv2_stride: int
    conv_channels: int
    pooling: str
    output_dim: int
    keep_prob: float = 1.0  # field-level dropout keep probability
    splitter: str = "text"  # "text" or "url"

    def validate(self) -> None:
        if self.max_instances < 1:
            raise ConfigError(f"field {self.name!r}: max_instances must be >= 1")
        if self.max_tokens < 1:
            raise ConfigError(f"field {self.name!r}: max_tokens must be >= 1")
        if self.output_dim < 1 or self.conv_channels < 1:
            raise ConfigError(f"field {self.name!r}: dimensions must be >= 1")
        if self.conv1_window < 1 or self.conv2_window < 1:
            raise ConfigError(f"field {self.name!r}: conv windows must be >= 1")
        if self.conv1_stride < 1 or self.conv2_stride < 1:
            raise ConfigError(f"field {self.name!r}: conv strides must be >= 1")
        if self.pooling not in ("max", "avg"):
            raise ConfigError(f"field {self.name!r}: pooling must be 'max' or 'avg'")
        if not 0.0 < self.keep_prob <= 1.0:
            raise ConfigError(f"field {self.name!r}: keep_prob must be in (0, 1]")
        if self.splitter not in ("text", "url"):
            raise ConfigError(f"field {self.name!r}: splitter must be 'text' or 'url'")
        try:
            out1 = conv_output_length(self.max_tokens, self.conv1_window, self.conv1_stride)
            conv_output_length(out1, self.conv2_window, self.conv2_stride)
        except ConfigError as exc:
            raise ConfigError(f"field {self.name!r}: {exc}") from None


@dataclass(frozen=True)
class QueryTowerConfig:
    """Query encoder hyperparameters; output width is derived from the fields."""

    max_tokens: int
    conv1_window: int
    conv1_stride: int
    conv2_window: int
    conv2_stride: int
    conv_channels: int
    pooling: str

    def validate(self) -> None:
        if self.max_tokens < 1 or self.conv_channels < 1:
            raise ConfigError("query tower: dimensions must be >= 1")
        if self.pooling not in ("max", "avg"):
            raise ConfigError("query tower: pooling must be 'max' or 'avg'")
        try:
            out1 = conv_output_length(self.max_tokens, self.conv1_window, self.conv1_stride)
            conv_output_length(out1, self.conv2_window, self.conv2_stride)
        except ConfigError as exc:
            raise ConfigError(f"query tower: {exc}") from None


@dataclass(frozen=True)
class ModelConfig:
    fields: tuple[FieldConfig, ...]
    query: QueryTowerConfig
    trigram_dim: int = TRIGRAM_DIM
    embed_dim: int = 300
    matching_hidden_dim: int = 300
    dropout_keep_prob: float = 1.0  # conventional dropout on dense outputs
    use_masking: bool = True
    use_field_dropout: bool = True
    query_representation: str = "per_field"  # "per_field" | "shared"
    matching: str = "joint"  # "joint" | "score_aggregation"
    pool_over_true_length: bool = False

    def validate(self) -> None:
        if not self.fields:
            raise ConfigError("model requires at least one field")
        names = [f.name for f in self.fields]
        if len(set(names)) != len(names):
            raise ConfigError("duplicate field names in model config")
        for f in self.fields:
            f.validate()
        self.query.validate()
        if self.trigram_dim != TRIGRAM_DIM:
            raise ConfigError(
                f"trigram_dim must be {TRIGRAM_DIM} (37-symbol alphabet cubed)")
        if self.embed_dim < 1 or self.matching_hidden_dim < 1:
            raise ConfigError("embed_dim and matching_hidden_dim must be >= 1")
        if not 0.0 < self.dropout_keep_prob <= 1.0:
            raise ConfigError("dropout_keep_prob must be in (0, 1]")
        if self.query_representation not in ("per_field", "shared"):
            raise ConfigError("query_representation must be 'per_field' or 'shared'")
        if self.matching not in ("joint", "score_aggregation"):
            raise ConfigError("matching must be 'joint' or 'score_aggregation'")
        if self.query_representation == "shared":
            dims = {f.output_dim for f in self.fields}
            if len(dims) != 1:
                raise ConfigError(
                    "shared query representation requires equal per-field output dims")

    def total_field_dim(self) -> int:
        return sum(f.output_dim for f in self.fields)

    def query_output_dim(self) -> int:
        if self.query_representation == "shared":
            return self.fields[0].output_dim
        return self.total_field_dim()

    def field_slices(self) -> list[tuple[FieldConfig, int, int]]:
        slices = []
        offset = 0
        for f in self.fields:
            slices.append((f, offset, offset + f.output_dim))
            offset += f.output_dim
        return slices

    def per_field_match_hidden(self) -> int:
        # score-aggregation variant splits the matching budget across fields
        return max(2, -(-self.matching_hidden_dim // len(self.fields)))

    def to_dict(self) -> dict:
        return {
            "fields": [vars(f).copy() for f in self.fields],
            "query": vars(self.query).copy(),
            "trigram_dim": self.trigram_dim,
            "embed_dim": self.embed_dim,
            "matching_hidden_dim": self.matching_hidden_dim,
            "dropout_keep_prob": self.dropout_keep_prob,
            "use_masking": self.use_masking,
            "use_field_dropout": self.use_field_dropout,
            "query_representation": self.query_representation,
            "matching": self.matching,
            "pool_over_true_length": self.pool_over_true_length,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "ModelConfig":
        known = {"fields", "query", "trigram_dim", "embed_dim", "matching_hidden_dim",
                 "dropout_keep_prob", "use_masking", "use_field_dropout",
                 "query_representation", "matching", "pool_over_true_length"}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        for key in ("fields", "query"):
            if key not in raw:
                raise ConfigError(f"model config missing required key {key!r}")
        try:
            fields = tuple(FieldConfig(**f) for f in raw["fields"])
            query = QueryTowerConfig(**raw["query"])
        except TypeError as exc:
            raise ConfigError(f"bad field or query config: {exc}") from None
        cfg = cls(fields=fields, query=query,
                  **{k: raw[k] for k in known - {"fields", "query"} if k in raw})
        cfg.validate()
        return cfg


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

class ParameterStore:
    """Named registry of all trainable tensors."""

    def __init__(self):
        self._tensors: dict[str, Tensor] = {}

    def register(self, name: str, data: np.ndarray) -> Tensor:
        if name in self._tensors:
            raise ConfigError(f"parameter {name!r} registered twice")
        t = Tensor(data, requires_grad=True)
        self._tensors[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._tensors[name]
        except KeyError:
            raise ConfigError(f"unknown parameter {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def names(self) -> list[str]:
        return list(self._tensors)

    def items(self) -> Iterable[tuple[str, Tensor]]:
        return self._tensors.items()

    def tensors(self) -> list[Tensor]:
        return list(self._tensors.values())

    def zero_grads(self) -> None:
        for t in self._tensors.values():
            t.grad = None

    def copy(self) -> "ParameterStore":
        out = ParameterStore()
        for name, t in self._tensors.items():
            out.register(name, t.data.copy())
        return out


def _xavier(rng: np.random.Generator, shape: tuple[int, ...],
            fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def _register_encoder(store: ParameterStore, rng: np.random.Generator, prefix: str,
                      embed_dim: int, channels: int, w1: int, w2: int,
                      out_dim: int) -> None:
    store.register(f"{prefix}.conv1.weight",
                   _xavier(rng, (w1, embed_dim, channels), w1 * embed_dim, w1 * channels))
    store.register(f"{prefix}.conv1.bias", np.zeros(channels))
    store.register(f"{prefix}.conv2.weight",
                   _xavier(rng, (w2, channels, channels), w2 * channels, w2 * channels))
    store.register(f"{prefix}.conv2.bias", np.zeros(channels))
    store.register(f"{prefix}.dense.weight", _xavier(rng, (channels, out_dim), channels, out_dim))
    store.register(f"{prefix}.dense.bias", np.zeros(out_dim))


def init_parameters(config: ModelConfig, rng: np.random.Generator) -> ParameterStore:
    """Create every trainable tensor in a fixed, reproducible order."""
    config.validate()
    store = ParameterStore()
    store.register("embedding", rng.uniform(-0.1, 0.1, size=(config.trigram_dim,
                                                             config.embed_dim)))
    for f in config.fields:
        _register_encoder(store, rng, f"field.{f.name}", config.embed_dim,
                          f.conv_channels, f.conv1_window, f.conv2_window, f.output_dim)
    _register_encoder(store, rng, "query", config.embed_dim, config.query.conv_channels,
                      config.query.conv1_window, config.query.conv2_window,
                      config.query_output_dim())
    total = config.total_field_dim()
    if config.matching == "joint":
        hidden = config.matching_hidden_dim
        store.register("match.hidden.weight", _xavier(rng, (total, hidden), total, hidden))
        store.register("match.hidden.bias", np.zeros(hidden))
        store.register("match.out.weight", _xavier(rng, (hidden,), hidden, 1))
        store.register("match.out.bias", np.zeros(()))
    else:
        hidden = config.per_field_match_hidden()
        for f in config.fields:
            store.register(f"match.{f.name}.hidden.weight",
                           _xavier(rng, (f.output_dim, hidden), f.output_dim, hidden))
            store.register(f"match.{f.name}.hidden.bias", np.zeros(hidden))
            store.register(f"match.{f.name}.out.weight", _xavier(rng, (hidden,), hidden, 1))
            store.register(f"match.{f.name}.out.bias", np.zeros(()))
    return store


def validate_parameters(params: ParameterStore, config: ModelConfig) -> None:
    """Check that a parameter set matches the wiring the config implies."""
    expected = init_parameters(config, np.random.default_rng(0))
    missing = set(expected.names()) - set(params.names())
    extra = set(params.names()) - set(expected.names())
    if missing or extra:
        raise ConfigError(
            f"checkpoint/config mismatch: missing {sorted(missing)}, extra {sorted(extra)}")
    for name, t in expected.items():
        if params[name].shape != t.shape:
            raise ConfigError(
                f"checkpoint/config mismatch: {name} has shape {params[name].shape}, "
                f"expected {t.shape}")


# ---------------------------------------------------------------------------
# masking
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FieldMask:
    """Binary presence marker per instance slot; rows expand to all-0 or all-1."""

    present: np.ndarray = dataclass_field(repr=False)

    @classmethod
    def for_count(cls, n_present: int, max_instances: int) -> "FieldMask":
        if not 0 <= n_present <= max_instances:
            raise ConfigError("present count out of range")
        mask = np.zeros(max_instances, dtype=np.float64)
        mask[:n_present] = 1.0
        return cls(present=mask)

    @property
    def count(self) -> int:
        return int(self.present.sum())

    def expand(self, dim: int) -> np.ndarray:
        return np.repeat(self.present[:, None], dim, axis=1)


def aggregate_field(instance_reprs: Tensor, mask: FieldMask) -> Tensor:
    """Masked average over instance rows.

    Multiplying by the constant-row mask zeroes both the representations and
    the gradients of missing instances; the divisor counts only present
    instances, so an all-missing field yields an exact zero vector.
    """
    n_slots, dim = instance_reprs.shape
    if mask.present.shape != (n_slots,):
        raise ConfigError("mask length does not match instance count")
    masked = ad.hadamard(instance_reprs, ad.constant(mask.expand(dim)))
    return ad.scale(ad.sum_rows(masked), 1.0 / max(1, mask.count))


def field_dropout(field_reprs: Sequence[Tensor], keep_probs: Sequence[float],
                  rng: np.random.Generator | None, mode: str) -> list[Tensor]:
    """Randomly zero whole field representations during training.

    Kept fields are scaled by 1/keep_prob (inverted dropout), so evaluation
    is the identity regardless of the rng.
    """
    if len(field_reprs) != len(keep_probs):
        raise ConfigError("one keep probability per field required")
    for kp in keep_probs:
        if not 0.0 < kp <= 1.0:
            raise ConfigError("field dropout keep_prob must be in (0, 1]")
    if mode != "train":
        return list(field_reprs)
    if rng is None:
        raise ConfigError("train-mode field dropout requires an rng")
    out = []
    for r, kp in zip(field_reprs, keep_probs):
        if kp >= 1.0:
            out.append(r)
        elif rng.random() < kp:
            out.append(ad.scale(r, 1.0 / kp))
        else:
            out.append(ad.scale(r, 0.0))
    return out


# ---------------------------------------------------------------------------
# encoders
# ---------------------------------------------------------------------------

def _rows_touching_content(true_len: int, window: int, stride: int, out_len: int) -> int:
    """How many valid-conv output rows have a window starting inside real content."""
    if true_len <= 0:
        return 0
    return min(out_len, -(-true_len // stride))


def _encode_token_sequence(encoded: EncodedText, settings, prefix: str,
                           params: ParameterStore, config: ModelConfig,
                           mode: str, rng: np.random.Generator | None) -> Tensor:
    x = ad.sparse_embed(encoded.vectors, params["embedding"])
    x = ad.l2_normalize_rows(x)  # unit-norm words so long words do not dominate
    x = ad.tanh(ad.conv1d(x, params[f"{prefix}.conv1.weight"],
                          params[f"{prefix}.conv1.bias"], settings.conv1_stride))
    x = ad.tanh(ad.conv1d(x, params[f"{prefix}.conv2.weight"],
                          params[f"{prefix}.conv2.bias"], settings.conv2_stride))
    valid_rows = None
    if config.pool_over_true_length:
        out1 = conv_output_length(settings.max_tokens, settings.conv1_window,
                                  settings.conv1_stride)
        out2 = conv_output_length(out1, settings.conv2_window, settings.conv2_stride)
        t1 = _rows_touching_content(encoded.true_length, settings.conv1_window,
                                    settings.conv1_stride, out1)
        t2 = _rows_touching_content(t1, settings.conv2_window, settings.conv2_stride, out2)
        valid_rows = max(1, t2)
    v = ad.pool(x, settings.pooling, valid_rows)
    v = ad.tanh(ad.dense(v, params[f"{prefix}.dense.weight"], params[f"{prefix}.dense.bias"]))
    if mode == "train" and config.dropout_keep_prob < 1.0:
        if rng is None:
            raise ConfigError("train-mode dropout requires an rng")
        keep = config.dropout_keep_prob
        mask = (rng.random(v.shape[0]) < keep).astype(np.float64) / keep
        v = ad.hadamard(v, ad.constant(mask))
    return v


def encode_instance(encoded: EncodedText, field: FieldConfig, params: ParameterStore,
                    config: ModelConfig, mode: str = "eval",
                    rng: np.random.Generator | None = None) -> Tensor:
    """Encode one text instance of a field into its representation vector."""
    if len(encoded.vectors) != field.max_tokens:
        raise ConfigError(
            f"field {field.name!r}: expected {field.max_tokens} token slots, "
            f"got {len(encoded.vectors)}")
    return _encode_token_sequence(encoded, field, f"field.{field.name}", params,
                                  config, mode, rng)


def _empty_encoding(max_tokens: int) -> EncodedText:
    return encode_tokens([], max_tokens)


def prepare_field_instances(doc: Document, field: FieldConfig) -> tuple[list[EncodedText], int]:
    """Select, tokenize and pad a document field to its instance slots.

    Instances that normalize to nothing count as missing. Returns one encoding
    per slot (padding slots are all-empty vectors) plus the present count.
    """
    tokenizer = split_url if field.splitter == "url" else normalize
    tokenized = [tokenizer(t) for t in doc.instances(field.name)]
    usable = [(raw, toks) for raw, toks in zip(doc.instances(field.name), tokenized) if toks]
    chosen_raw = select_instances([raw for raw, _ in usable], field.max_instances)
    by_text = {}
    for raw, toks in usable:
        by_text.setdefault(raw, toks)
    encodings = [encode_tokens(by_text[raw], field.max_tokens) for raw in chosen_raw]
    n_present = len(encodings)
    encodings += [_empty_encoding(field.max_tokens)] * (field.max_instances - n_present)
    return encodings, n_present


def document_repr(doc: Document, params: ParameterStore, config: ModelConfig,
                  mode: str = "eval", rng: np.random.Generator | None = None) -> Tensor:
    """Concatenate field-dropout-applied masked field representations."""
    field_reprs = []
    for fc in config.fields:
        encodings, n_present = prepare_field_instances(doc, fc)
        reprs = [encode_instance(e, fc, params, config, mode, rng) for e in encodings]
        stacked = ad.stack(reprs)
        if config.use_masking:
            fr = aggregate_field(stacked, FieldMask.for_count(n_present, fc.max_instances))
        else:
            # ablation: plain average over all slots, padding included
            fr = ad.scale(ad.sum_rows(stacked), 1.0 / fc.max_instances)
        field_reprs.append(fr)
    if config.use_field_dropout:
        field_reprs = field_dropout(field_reprs, [fc.keep_prob for fc in config.fields],
                                    rng, mode)
    return ad.concat(field_reprs)


def query_repr(query_text: str, params: ParameterStore, config: ModelConfig,
               mode: str = "eval", rng: np.random.Generator | None = None) -> Tensor:
    """Encode the query; slice i of the output belongs to document field i."""
    tokens = normalize(query_text)
    if not tokens:
        raise DataError(f"query {query_text!r} is empty after normalization")
    encoded = encode_tokens(tokens, config.query.max_tokens)
    q = _encode_token_sequence(encoded, config.query, "query", params, config, mode, rng)
    if config.query_representation == "shared":
        q = ad.concat([q] * len(config.fields))
    return q


def match(query_vec: Tensor, doc_vec: Tensor, params: ParameterStore,
          config: ModelConfig) -> Tensor:
    """Score the Hadamard product of the representations with a hidden layer."""
    if query_vec.shape != doc_vec.shape:
        raise ConfigError(
            f"match dim mismatch: query {query_vec.shape} vs doc {doc_vec.shape}")
    if config.matching == "joint":
        h = ad.tanh(ad.dense(ad.hadamard(query_vec, doc_vec),
                             params["match.hidden.weight"], params["match.hidden.bias"]))
        return ad.add(ad.vdot(h, params["match.out.weight"]), params["match.out.bias"])
    # score aggregation: one small matcher per field, uniformly interpolated
    scores = []
    for fc, lo, hi in config.field_slices():
        qi = ad.slice1d(query_vec, lo, hi)
        di = ad.slice1d(doc_vec, lo, hi)
        h = ad.tanh(ad.dense(ad.hadamard(qi, di),
                             params[f"match.{fc.name}.hidden.weight"],
                             params[f"match.{fc.name}.hidden.bias"]))
        scores.append(ad.add(ad.vdot(h, params[f"match.{fc.name}.out.weight"]),
                             params[f"match.{fc.name}.out.bias"]))
    return ad.scale(ad.add_n(scores), 1.0 / len(scores))


# ---------------------------------------------------------------------------
# batched forward path
# ---------------------------------------------------------------------------
#
# The per-instance functions above are the reference semantics; the batched
# path below computes the same forward pass with one op per layer for a whole
# batch, which is what training and bulk evaluation use. Missing instances
# are simply not encoded: their contribution is an exact zero either way.

class EncodingCache:
    """Per-run cache of token-level encodings (pure functions of the text)."""

    def __init__(self):
        self._fields: dict[tuple, tuple[list[EncodedText], int]] = {}
        self._queries: dict[tuple, EncodedText] = {}

    def field_instances(self, doc: Document, field: FieldConfig):
        key = (doc.id, field.name, field.max_instances, field.max_tokens, field.splitter)
        hit = self._fields.get(key)
        if hit is None:
            hit = self._fields[key] = prepare_field_instances(doc, field)
        return hit

    def query(self, text: str, max_tokens: int) -> EncodedText:
        key = (text, max_tokens)
        hit = self._queries.get(key)
        if hit is None:
            tokens = normalize(text)
            if not tokens:
                raise DataError(f"query {text!r} is empty after normalization")
            hit = self._queries[key] = encode_tokens(tokens, max_tokens)
        return hit


def _encode_instance_batch(packs: Sequence[EncodedText], settings, prefix: str,
                           params: ParameterStore, config: ModelConfig,
                           mode: str, rng: np.random.Generator | None) -> Tensor:
    n_inst = len(packs)
    seq = settings.max_tokens
    if any(p.token_counts.size != seq for p in packs):
        raise ConfigError("instance encodings do not match the configured token count")
    flat_idx = (np.concatenate([p.flat_indices for p in packs])
                if n_inst else np.empty(0, dtype=np.int64))
    flat_val = (np.concatenate([p.flat_values for p in packs])
                if n_inst else np.empty(0, dtype=np.float64))
    counts = (np.concatenate([p.token_counts for p in packs])
              if n_inst else np.empty(0, dtype=np.int64))

    x = ad.sparse_embed_packed(flat_idx, flat_val, counts, params["embedding"])
    x = ad.reshape(x, (n_inst, seq, config.embed_dim))
    x = ad.l2_normalize_rows(x)
    x = ad.tanh(ad.conv1d(x, params[f"{prefix}.conv1.weight"],
                          params[f"{prefix}.conv1.bias"], settings.conv1_stride))
    x = ad.tanh(ad.conv1d(x, params[f"{prefix}.conv2.weight"],
                          params[f"{prefix}.conv2.bias"], settings.conv2_stride))
    v = ad.pool(x, settings.pooling)
    v = ad.tanh(ad.dense(v, params[f"{prefix}.dense.weight"],
                         params[f"{prefix}.dense.bias"]))
    if mode == "train" and config.dropout_keep_prob < 1.0:
        if rng is None:
            raise ConfigError("train-mode dropout requires an rng")
        keep = config.dropout_keep_prob
        mask = (rng.random(v.shape) < keep).astype(np.float64) / keep
        v = ad.hadamard(v, ad.constant(mask))
    return v


def batch_document_reprs(docs: Sequence[Document], params: ParameterStore,
                         config: ModelConfig, mode: str = "eval",
                         rng: np.random.Generator | None = None,
                         cache: EncodingCache | None = None) -> Tensor:
    """Document representations as rows of one matrix [n_docs, total dim]."""
    if config.pool_over_true_length:
        # per-instance pooling lengths vary; fall back to the reference path
        return ad.stack([document_repr(d, params, config, mode, rng) for d in docs])
    if cache is None:
        cache = EncodingCache()
    n_docs = len(docs)
    blocks = []
    for fc in config.fields:
        packs: list[EncodedText] = []
        counts: list[int] = []
        for doc in docs:
            encodings, n_present = cache.field_instances(doc, fc)
            kept = n_present if config.use_masking else fc.max_instances
            packs.extend(encodings[:kept])
            counts.append(kept)
        if sum(counts) == 0:
            blocks.append(ad.constant(np.zeros((n_docs, fc.output_dim))))
            continue
        reprs = _encode_instance_batch(packs, fc, f"field.{fc.name}", params,
                                       config, mode, rng)
        offsets = np.concatenate([[0], np.cumsum(counts)])
        divisors = [max(1, c) for c in counts]
        blocks.append(ad.segment_mean_rows(reprs, offsets, divisors))
    if config.use_field_dropout and mode == "train":
        if rng is None:
            raise ConfigError("train-mode field dropout requires an rng")
        dropped = []
        for fc, block in zip(config.fields, blocks):
            if fc.keep_prob >= 1.0:
                dropped.append(block)
                continue
            keep = (rng.random(n_docs) < fc.keep_prob).astype(np.float64) / fc.keep_prob
            mask = np.repeat(keep[:, None], fc.output_dim, axis=1)
            dropped.append(ad.hadamard(block, ad.constant(mask)))
        blocks = dropped
    return ad.hconcat(blocks)


def batch_query_reprs(texts: Sequence[str], params: ParameterStore, config: ModelConfig,
                      mode: str = "eval", rng: np.random.Generator | None = None,
                      cache: EncodingCache | None = None) -> Tensor:
    """Query representations as rows of one matrix."""
    if config.pool_over_true_length:
        return ad.stack([query_repr(t, params, config, mode, rng) for t in texts])
    if cache is None:
        cache = EncodingCache()
    packs = [cache.query(t, config.query.max_tokens) for t in texts]
    q = _encode_instance_batch(packs, config.query, "query", params, config, mode, rng)
    if config.query_representation == "shared":
        q = ad.hconcat([q] * len(config.fields))
    return q


def batch_match(query_rows: Tensor, doc_rows: Tensor, params: ParameterStore,
                config: ModelConfig) -> Tensor:
    """Row-wise matching scores for aligned query/document representations."""
    if query_rows.shape != doc_rows.shape:
        raise ConfigError(f"match dim mismatch: query {query_rows.shape} vs "
                          f"doc {doc_rows.shape}")
    if config.matching == "joint":
        h = ad.tanh(ad.dense(ad.hadamard(query_rows, doc_rows),
                             params["match.hidden.weight"], params["match.hidden.bias"]))
        return ad.add_scalar(ad.matvec(h, params["match.out.weight"]),
                             params["match.out.bias"])
    scores = []
    for fc, lo, hi in config.field_slices():
        qi = ad.slice_cols(query_rows, lo, hi)
        di = ad.slice_cols(doc_rows, lo, hi)
        h = ad.tanh(ad.dense(ad.hadamard(qi, di),
                             params[f"match.{fc.name}.hidden.weight"],
                             params[f"match.{fc.name}.hidden.bias"]))
        scores.append(ad.add_scalar(ad.matvec(h, params[f"match.{fc.name}.out.weight"]),
                                    params[f"match.{fc.name}.out.bias"]))
    return ad.scale(ad.add_n(scores), 1.0 / len(scores))


def batch_scores(query_texts: Sequence[str], docs: Sequence[Document],
                 pairs: Sequence[tuple[int, int]], params: ParameterStore,
                 config: ModelConfig, mode: str = "eval",
                 rng: np.random.Generator | None = None,
                 cache: EncodingCache | None = None) -> Tensor:
    """Scores for (query index, document index) pairs, as one 1-D tensor."""
    if cache is None:
        cache = EncodingCache()
    q_matrix = batch_query_reprs(query_texts, params, config, mode, rng, cache)
    d_matrix = batch_document_reprs(docs, params, config, mode, rng, cache)
    q_rows = ad.take_rows(q_matrix, [q for q, _ in pairs])
    d_rows = ad.take_rows(d_matrix, [d for _, d in pairs])
    return batch_match(q_rows, d_rows, params, config)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path: str | Path, params: ParameterStore, config: ModelConfig,
                    meta: dict | None = None) -> None:
    """Write parameters and config as a JSON manifest; saving is byte-stable."""
    tensors = []
    for name in sorted(params.names()):
        t = params[name]
        payload = base64.b64encode(t.data.astype("<f8").tobytes()).decode("ascii")
        tensors.append({"name": name, "shape": list(t.shape), "data": payload})
    doc = {"format": CHECKPOINT_FORMAT, "config": config.to_dict(),
           "meta": dict(meta or {}), "tensors": tensors}
    Path(path).write_text(
        json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n", encoding="utf-8")


def load_checkpoint(path: str | Path) -> tuple[ParameterStore, ModelConfig, dict]:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"checkpoint {path}: invalid JSON ({exc})") from None
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise DataError(f"checkpoint {path}: unknown format {doc.get('format')!r}")
    config = ModelConfig.from_dict(doc["config"])
    params = ParameterStore()
    for entry in doc["tensors"]:
        shape = tuple(entry["shape"])
        data = np.frombuffer(base64.b64decode(entry["data"]), dtype="<f8")
        if data.size != int(np.prod(shape, dtype=np.int64)):
            raise DataError(f"checkpoint {path}: tensor {entry['name']!r} size mismatch")
        params.register(entry["name"], data.reshape(shape).astype(np.float64))
    validate_parameters(params, config)
    return params, config, doc.get("meta", {})


class Ranker:
    """Bundles parameters and config for convenient scoring."""

    def __init__(self, params: ParameterStore, config: ModelConfig):
        config.validate()
        validate_parameters(params, config)
        self.params = params
        self.config = config

    @classmethod
    def initialize(cls, config: ModelConfig, seed: int) -> "Ranker":
        return cls(init_parameters(config, np.random.default_rng(seed)), config)

    @classmethod
    def load(cls, path: str | Path) -> "Ranker":
        params, config, _ = load_checkpoint(path)
        return cls(params, config)

    def save(self, path: str | Path, meta: dict | None = None) -> None:
        save_checkpoint(path, self.params, self.config, meta)

    def score(self, query_text: str, doc: Document) -> float:
        q = query_repr(query_text, self.params, self.config)
        d = document_repr(doc, self.params, self.config)
        return float(match(q, d, self.params, self.config).data)

    def score_candidates(self, query_text: str, docs: Sequence[Document],
                         cache: EncodingCache | None = None) -> list[float]:
        pairs = [(0, i) for i in range(len(docs))]
        scores = batch_scores([query_text], docs, pairs, self.params, self.config,
                              cache=cache)
        return scores.data.tolist()
