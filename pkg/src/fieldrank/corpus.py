"""Corpus records, file formats, split management, and a synthetic generator.

The synthetic corpus is built so the document fields carry complementary,
relevance-correlated signal: clicked queries are the cleanest but have
incomplete coverage, titles are short and fairly clean, anchors are medium,
bodies are long and diluted, and URLs compress topic words into single
tokens. Which fields are most informative also depends on a per-query type
(navigational vs informational), so no fixed per-field weighting is optimal.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field as dataclass_field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, DataError

DOCUMENT_FIELDS = ("title", "url", "body", "anchors", "clicked_queries")
GRADE_NAMES = ("bad", "fair", "good", "excellent", "perfect")  # grades 0..4


@dataclass
class Document:
    """One retrievable record: single-instance text fields plus instance bags."""

    id: str
    title: str
    url: str
    body: str
    anchors: list[str] = dataclass_field(default_factory=list)
    clicked_queries: list[str] = dataclass_field(default_factory=list)

    def instances(self, field_name: str) -> list[str]:
        if field_name == "title":
            return [self.title]
        if field_name == "url":
            return [self.url]
        if field_name == "body":
            return [self.body]
        if field_name == "anchors":
            return list(self.anchors)
        if field_name == "clicked_queries":
            return list(self.clicked_queries)
        raise DataError(f"unknown document field {field_name!r}")

    def validate(self) -> None:
        if not self.id:
            raise DataError("document id must be nonempty")
        if not self.title or not self.body:
            raise DataError(f"document {self.id!r}: title and body must be nonempty")


@dataclass
class JudgedQuery:
    query_id: str
    text: str
    judgments: dict[str, int] = dataclass_field(default_factory=dict)

    def validate(self) -> None:
        if not self.judgments:
            raise DataError(f"query {self.query_id!r} has no judgments")
        for doc_id, grade in self.judgments.items():
            if not isinstance(grade, int) or not 0 <= grade <= 4:
                raise DataError(
                    f"query {self.query_id!r}, doc {doc_id!r}: grade must be an int in [0, 4]")


@dataclass
class Corpus:
    documents: dict[str, Document]
    queries: list[JudgedQuery]

    def query_ids(self) -> list[str]:
        return [q.query_id for q in self.queries]

    def get_query(self, query_id: str) -> JudgedQuery:
        for q in self.queries:
            if q.query_id == query_id:
                return q
        raise DataError(f"unknown query id {query_id!r}")

    def get_document(self, doc_id: str) -> Document:
        try:
            return self.documents[doc_id]
        except KeyError:
            raise DataError(f"unknown document id {doc_id!r}") from None


def select_instances(instances: Sequence[str], max_instances: int) -> list[str]:
    """Keep the most common distinct instances, first occurrence breaking ties."""
    counts: dict[str, int] = {}
    first: dict[str, int] = {}
    for i, text in enumerate(instances):
        counts[text] = counts.get(text, 0) + 1
        first.setdefault(text, i)
    ordered = sorted(counts, key=lambda t: (-counts[t], first[t]))
    return ordered[:max_instances]


def with_fields_removed(corpus: Corpus, field_names: Sequence[str]) -> Corpus:
    """Copy of the corpus with the given fields emptied on every document.

    Used for test-time ablations; single-instance fields become empty strings,
    which downstream treats as missing instances.
    """
    for name in field_names:
        if name not in DOCUMENT_FIELDS:
            raise DataError(f"unknown document field {name!r}")
    removed = set(field_names)
    documents = {}
    for doc_id, d in corpus.documents.items():
        documents[doc_id] = Document(
            id=d.id,
            title="" if "title" in removed else d.title,
            url="" if "url" in removed else d.url,
            body="" if "body" in removed else d.body,
            anchors=[] if "anchors" in removed else list(d.anchors),
            clicked_queries=[] if "clicked_queries" in removed else list(d.clicked_queries),
        )
    return Corpus(documents=documents, queries=[
        JudgedQuery(q.query_id, q.text, dict(q.judgments)) for q in corpus.queries])


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------

def split(query_ids: Sequence[str], ratios: Sequence[float] = (0.8, 0.1, 0.1),
          seed: int = 0) -> tuple[list[str], ...]:
    """Query-disjoint partition; assignment comes from seeded id hashing.

    Sizes follow the ratios within one query (largest-remainder rounding).
    """
    if len(query_ids) < 10:
        raise DataError("split requires at least 10 queries")
    if len(set(query_ids)) != len(query_ids):
        raise DataError("split requires distinct query ids")
    if abs(sum(ratios) - 1.0) > 1e-9 or any(r < 0 for r in ratios):
        raise ConfigError("split ratios must be nonnegative and sum to 1")

    def key(qid: str) -> str:
        return hashlib.sha256(f"{seed}:{qid}".encode("utf-8")).hexdigest()

    ordered = sorted(query_ids, key=key)
    n = len(ordered)
    ideal = [n * r for r in ratios]
    counts = [int(x) for x in ideal]
    remainders = sorted(range(len(ratios)), key=lambda i: ideal[i] - counts[i], reverse=True)
    for i in remainders[:n - sum(counts)]:
        counts[i] += 1
    out = []
    start = 0
    for c in counts:
        out.append(sorted(ordered[start:start + c]))
        start += c
    return tuple(out)


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

def save_corpus(corpus: Corpus, directory: str | Path) -> None:
    """Write documents.jsonl, queries.jsonl, judgments.tsv (UTF-8, LF)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / "documents.jsonl", "w", encoding="utf-8", newline="\n") as f:
        for doc_id in sorted(corpus.documents):
            d = corpus.documents[doc_id]
            f.write(json.dumps({"id": d.id, "title": d.title, "url": d.url,
                                "body": d.body, "anchors": d.anchors,
                                "clicked_queries": d.clicked_queries},
                               sort_keys=True, ensure_ascii=False) + "\n")
    with open(directory / "queries.jsonl", "w", encoding="utf-8", newline="\n") as f:
        for q in sorted(corpus.queries, key=lambda q: q.query_id):
            f.write(json.dumps({"query_id": q.query_id, "text": q.text},
                               sort_keys=True, ensure_ascii=False) + "\n")
    with open(directory / "judgments.tsv", "w", encoding="utf-8", newline="\n") as f:
        for q in sorted(corpus.queries, key=lambda q: q.query_id):
            for doc_id in sorted(q.judgments):
                f.write(f"{q.query_id}\t{doc_id}\t{q.judgments[doc_id]}\n")


def _parse_jsonl(path: Path, required: set[str]) -> Iterable[tuple[int, dict]]:
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path.name} line {lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(record, dict):
                raise DataError(f"{path.name} line {lineno}: expected an object")
            missing = required - set(record)
            if missing:
                raise DataError(f"{path.name} line {lineno}: missing {sorted(missing)}")
            unknown = set(record) - required
            if unknown:
                raise DataError(f"{path.name} line {lineno}: unknown fields {sorted(unknown)}")
            yield lineno, record


def load_corpus(directory: str | Path) -> Corpus:
    directory = Path(directory)
    documents: dict[str, Document] = {}
    doc_keys = {"id", "title", "url", "body", "anchors", "clicked_queries"}
    for lineno, rec in _parse_jsonl(directory / "documents.jsonl", doc_keys):
        doc = Document(id=rec["id"], title=rec["title"], url=rec["url"], body=rec["body"],
                       anchors=list(rec["anchors"]),
                       clicked_queries=list(rec["clicked_queries"]))
        try:
            doc.validate()
        except DataError as exc:
            raise DataError(f"documents.jsonl line {lineno}: {exc}") from None
        if doc.id in documents:
            raise DataError(f"documents.jsonl line {lineno}: duplicate id {doc.id!r}")
        documents[doc.id] = doc

    queries: dict[str, JudgedQuery] = {}
    for lineno, rec in _parse_jsonl(directory / "queries.jsonl", {"query_id", "text"}):
        if rec["query_id"] in queries:
            raise DataError(f"queries.jsonl line {lineno}: duplicate id {rec['query_id']!r}")
        queries[rec["query_id"]] = JudgedQuery(query_id=rec["query_id"], text=rec["text"])

    with open(directory / "judgments.tsv", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise DataError(f"judgments.tsv line {lineno}: expected 3 tab-separated columns")
            qid, doc_id, grade_text = parts
            if qid not in queries:
                raise DataError(f"judgments.tsv line {lineno}: unknown query {qid!r}")
            if doc_id not in documents:
                raise DataError(f"judgments.tsv line {lineno}: unknown document {doc_id!r}")
            try:
                grade = int(grade_text)
            except ValueError:
                raise DataError(f"judgments.tsv line {lineno}: grade must be an integer") from None
            if not 0 <= grade <= 4:
                raise DataError(f"judgments.tsv line {lineno}: grade {grade} outside [0, 4]")
            queries[qid].judgments[doc_id] = grade

    result = Corpus(documents=documents, queries=list(queries.values()))
    for q in result.queries:
        q.validate()
    return result


# ---------------------------------------------------------------------------
# synthetic generation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticConfig:
    n_queries: int = 2000
    docs_per_query: int = 10
    vocab_size: int = 900
    topic_count: int = 40
    words_per_topic: int = 16
    anchor_coverage: float = 0.61
    clicked_query_coverage: float = 0.73
    noise_rate: float = 0.15
    decoy_rate: float = 0.3  # chance a weak doc gets one strongly on-topic field
    grade_bin_edges: tuple[float, ...] = (0.2, 0.4, 0.6, 0.8)
    seed: int = 0

    def validate(self) -> None:
        if self.n_queries < 1 or self.docs_per_query < 2:
            raise ConfigError("need at least 1 query and 2 docs per query")
        for name in ("anchor_coverage", "clicked_query_coverage"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1]")
        if not 0.0 <= self.noise_rate <= 1.0:
            raise ConfigError("noise_rate must be in [0, 1]")
        if not 0.0 <= self.decoy_rate <= 1.0:
            raise ConfigError("decoy_rate must be in [0, 1]")
        if self.topic_count < 2 or self.words_per_topic < 4:
            raise ConfigError("need at least 2 topics with 4 words each")
        if self.vocab_size < self.topic_count * self.words_per_topic + 20:
            raise ConfigError("vocab_size too small for topic separation")
        if self.topic_count * _SYLLABLES_PER_TOPIC + 60 > 19 * 5 * 19:
            raise ConfigError("too many topics for disjoint syllable pools")
        if self.vocab_size - self.topic_count * self.words_per_topic > 3600:
            raise ConfigError("noise vocabulary exceeds the noise syllable pool")
        if list(self.grade_bin_edges) != sorted(self.grade_bin_edges) or \
                len(self.grade_bin_edges) != 4:
            raise ConfigError("grade_bin_edges must be 4 increasing thresholds")


@dataclass
class SyntheticLatents:
    """Ground-truth generator state, for oracle checks on the corpus."""

    topic_words: list[list[str]]
    topic_word_sets: list[set[str]]
    noise_words: list[str]
    query_topic: dict[str, int]
    query_type: dict[str, str]
    doc_affinity: dict[str, float]
    doc_decoy_field: dict[str, str | None]


# per-field signal: the chance a content token reveals the query topic is
# base * (floor + slope * affinity). Clicked queries are the high-accuracy
# field; the long body carries a large topical background with only a weak
# relevance slope, so its per-token evidence is plentiful but blunt.
_FIELD_SIGNAL = {
    "title": (0.52, 0.0, 1.0),
    "url": (0.60, 0.0, 1.0),
    "body": (1.0, 0.28, 0.26),
    "anchors": (0.64, 0.0, 1.0),
    "clicked_queries": (0.98, 0.0, 1.0),
}
# query-type modulation: navigational queries light up url/title, informational
# queries light up body/anchors, so field usefulness varies per query
_TYPE_MODULATION = {
    "nav": {"title": 1.15, "url": 1.3, "body": 0.6, "anchors": 0.9, "clicked_queries": 1.0},
    "info": {"title": 0.85, "url": 0.5, "body": 1.25, "anchors": 1.1, "clicked_queries": 1.0},
}
# body text on pages nobody links to barely tracks relevance (unvetted
# content): its signal slope collapses when anchors are absent. Whether to
# trust one field thus depends on the state of ANOTHER field, which
# cross-field (joint) matching can pick up but a fixed sum of per-field
# scores cannot
_BODY_SLOPE_WITHOUT_ANCHORS = 0.5
# share of signal tokens copied verbatim from the query, per field
_QUERY_ECHO = {"title": 0.45, "url": 0.35, "body": 0.30,
               "anchors": 0.40, "clicked_queries": 0.55}

_CONSONANTS = "bcdfghjklmnpqrstvwz"
_VOWELS = "aeiou"
_SYLLABLES_PER_TOPIC = 6


class _WeightedWords:
    """Precomputed cumulative weights for fast seeded draws."""

    def __init__(self, words: Sequence[str], weights: np.ndarray):
        self.words = list(words)
        self.cumulative = np.cumsum(weights / weights.sum())

    def draw(self, rng: np.random.Generator) -> str:
        return self.words[int(np.searchsorted(self.cumulative, rng.random()))]


def _make_word_pools(cfg: "SyntheticConfig",
                     rng: np.random.Generator) -> tuple[list[list[str]], list[str]]:
    """Topic word lists plus shared noise words.

    Each topic owns a few consonant-vowel-consonant syllables and its words
    are pairs of them, so a topic's vocabulary shares character n-grams the
    way real topical jargon shares roots. Noise words come from a separate
    syllable pool.
    """
    syllables = [c1 + v + c2 for c1 in _CONSONANTS for v in _VOWELS for c2 in _CONSONANTS]
    order = rng.permutation(len(syllables))
    syllables = [syllables[i] for i in order]
    need = cfg.topic_count * _SYLLABLES_PER_TOPIC
    noise_syllables = syllables[need:need + 60]
    if cfg.words_per_topic > _SYLLABLES_PER_TOPIC ** 2:
        raise ConfigError(
            f"words_per_topic cannot exceed {_SYLLABLES_PER_TOPIC ** 2}")

    topic_words = []
    for t in range(cfg.topic_count):
        pool = syllables[t * _SYLLABLES_PER_TOPIC:(t + 1) * _SYLLABLES_PER_TOPIC]
        combos = [a + b for a in pool for b in pool]
        picks = rng.permutation(len(combos))[:cfg.words_per_topic]
        topic_words.append([combos[i] for i in picks])

    n_noise = cfg.vocab_size - cfg.topic_count * cfg.words_per_topic
    noise_combos = [a + b for a in noise_syllables for b in noise_syllables]
    picks = rng.permutation(len(noise_combos))[:n_noise]
    noise_words = [noise_combos[i] for i in picks]
    return topic_words, noise_words


def _zipf_weights(n: int) -> np.ndarray:
    return 1.0 / (np.arange(n) + 1.0)


def _grade_for(affinity: float, edges: Sequence[float]) -> int:
    return int(sum(affinity >= e for e in edges))


def _affinity_for_slot(slot: int, rng: np.random.Generator) -> float:
    # guarantee a grade spread per query: one near-perfect doc, a strong one,
    # two mid docs, the rest weak; thresholding then always yields >= 2 grades
    if slot == 0:
        return rng.uniform(0.82, 1.0)
    if slot == 1:
        return rng.uniform(0.55, 0.85)
    if slot in (2, 3):
        return rng.uniform(0.28, 0.62)
    return rng.uniform(0.0, 0.38)


_EVIDENCE_SPREAD = 0.2


def _field_evidence(base_affinity: float, rng: np.random.Generator) -> dict[str, float]:
    """Independent per-field evidence levels around the document's affinity."""
    return {f: float(np.clip(base_affinity + rng.uniform(-_EVIDENCE_SPREAD,
                                                         _EVIDENCE_SPREAD), 0.0, 1.0))
            for f in DOCUMENT_FIELDS}


def generate_synthetic(cfg: SyntheticConfig, with_latents: bool = False):
    """Build a seeded corpus of judged queries over multi-field documents."""
    cfg.validate()
    rng = np.random.default_rng(np.random.PCG64(cfg.seed))

    topic_words, noise_words = _make_word_pools(cfg, rng)
    topic_draws = [_WeightedWords(words, _zipf_weights(len(words))) for words in topic_words]
    noise_draw = _WeightedWords(noise_words, np.ones(len(noise_words)))
    tlds = ["com", "org", "net", "io"]

    latents = SyntheticLatents(topic_words=topic_words,
                               topic_word_sets=[set(w) for w in topic_words],
                               noise_words=list(noise_words),
                               query_topic={}, query_type={}, doc_affinity={},
                               doc_decoy_field={})

    def content_token(topic: int, query_tokens: list[str], distractor: int,
                      p_signal: float, query_echo: float) -> str:
        if rng.random() < p_signal:
            if query_tokens and rng.random() < query_echo:
                return query_tokens[int(rng.integers(len(query_tokens)))]
            return topic_draws[topic].draw(rng)
        if rng.random() < cfg.noise_rate:
            return noise_draw.draw(rng)
        return topic_draws[distractor].draw(rng)

    documents: dict[str, Document] = {}
    queries: list[JudgedQuery] = []
    doc_counter = 0
    length_probs = np.array([0.10, 0.28, 0.27, 0.15, 0.12, 0.08])

    for qi in range(cfg.n_queries):
        query_id = f"q{qi:05d}"
        topic = int(rng.integers(cfg.topic_count))
        qlen = int(rng.choice(np.arange(1, 7), p=length_probs))
        qlen = min(qlen, cfg.words_per_topic)
        q_tokens = [topic_draws[topic].draw(rng) for _ in range(qlen)]
        qtype = "nav" if rng.random() < 0.35 else "info"
        latents.query_topic[query_id] = topic
        latents.query_type[query_id] = qtype

        judgments: dict[str, int] = {}
        for slot in range(cfg.docs_per_query):
            doc_id = f"d{doc_counter:06d}"
            doc_counter += 1
            base_affinity = _affinity_for_slot(slot, rng)
            # relevance is conjunctive: a document is only as good as its
            # second-weakest aspect, so broad cross-field agreement is what
            # separates grades, not any one strong field
            evidence = _field_evidence(base_affinity, rng)
            affinity = sorted(evidence.values())[1]
            latents.doc_affinity[doc_id] = affinity
            distractor = int(rng.integers(cfg.topic_count - 1))
            if distractor >= topic:
                distractor += 1
            # a weak document may carry one misleadingly on-topic field, so no
            # single field can be trusted without cross-field agreement
            decoy_field = None
            if affinity < cfg.grade_bin_edges[1] and rng.random() < cfg.decoy_rate:
                decoy_field = DOCUMENT_FIELDS[int(rng.integers(len(DOCUMENT_FIELDS)))]
            latents.doc_decoy_field[doc_id] = decoy_field

            anchors_present = rng.random() < cfg.anchor_coverage

            def draw(field_name: str) -> str:
                base, floor, slope = _FIELD_SIGNAL[field_name]
                base *= _TYPE_MODULATION[qtype][field_name]
                if field_name == "body" and not anchors_present:
                    slope *= _BODY_SLOPE_WITHOUT_ANCHORS
                a = 0.95 if field_name == decoy_field else evidence[field_name]
                p_signal = float(np.clip(base * (floor + slope * a), 0.02, 0.98))
                return content_token(topic, q_tokens, distractor, p_signal,
                                     _QUERY_ECHO[field_name])

            title = " ".join(draw("title") for _ in range(int(rng.integers(3, 6))))
            url = f"www.{draw('url')}{draw('url')}.{tlds[int(rng.integers(len(tlds)))]}"
            url += f"/{draw('url')}"
            if rng.random() < 0.5:
                url += f"-{draw('url')}"
            body = " ".join(draw("body") for _ in range(int(rng.integers(30, 61))))

            anchors: list[str] = []
            if anchors_present:
                for _ in range(int(rng.integers(1, 5))):
                    if anchors and rng.random() < 0.35:
                        anchors.append(anchors[int(rng.integers(len(anchors)))])
                    else:
                        anchors.append(" ".join(
                            draw("anchors") for _ in range(int(rng.integers(2, 4)))))
            clicked: list[str] = []
            if rng.random() < cfg.clicked_query_coverage:
                for _ in range(int(rng.integers(2, 6))):
                    clicked.append(" ".join(
                        draw("clicked_queries") for _ in range(int(rng.integers(2, 5)))))

            documents[doc_id] = Document(id=doc_id, title=title, url=url, body=body,
                                         anchors=anchors, clicked_queries=clicked)
            judgments[doc_id] = _grade_for(affinity, cfg.grade_bin_edges)

        queries.append(JudgedQuery(query_id=query_id, text=" ".join(q_tokens),
                                   judgments=judgments))

    corpus = Corpus(documents=documents, queries=queries)
    if with_latents:
        return corpus, latents
    return corpus


def oracle_field_score(latents: SyntheticLatents, query: JudgedQuery, doc: Document,
                       field_name: str) -> float:
    """Score a document field with the generator's own topic knowledge.

    Fraction of the field's tokens that belong to the query's latent topic;
    an empty field scores zero. Used to verify the built-in field ordering.
    """
    from .text import normalize, split_url  # local import avoids a cycle

    topic_set = latents.topic_word_sets[latents.query_topic[query.query_id]]
    tokenizer = split_url if field_name == "url" else normalize
    tokens: list[str] = []
    for inst in doc.instances(field_name):
        tokens.extend(tokenizer(inst))
    if not tokens:
        return 0.0
    return sum(t in topic_set for t in tokens) / len(tokens)
