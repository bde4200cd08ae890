"""Click-log data model, chronological splitting, synthetic generation,
and lossless file serialization.

A dataset is a list of search requests, each carrying N candidate
documents with exactly one clicked, plus a propensity weight for
position-bias correction.
"""

import hashlib
import json
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (
    ConfigurationError,
    DataError,
    LabelError,
    ParseError,
    SchemaError,
    SplitError,
)

FILE_FORMAT = "qcrank-dataset"
FILE_VERSION = 1


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Schema:
    """Declared sparse/dense field names per role (query vs. document)."""

    query_sparse: tuple = ()
    query_dense: tuple = ()
    doc_sparse: tuple = ()
    doc_dense: tuple = ()

    def to_dict(self):
        return {
            "query_sparse": list(self.query_sparse),
            "query_dense": list(self.query_dense),
            "doc_sparse": list(self.doc_sparse),
            "doc_dense": list(self.doc_dense),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            query_sparse=tuple(d["query_sparse"]),
            query_dense=tuple(d["query_dense"]),
            doc_sparse=tuple(d["doc_sparse"]),
            doc_dense=tuple(d["doc_dense"]),
        )


@dataclass(frozen=True)
class DocumentRecord:
    doc_id: str
    sparse_fields: dict  # field name -> tuple of (token, count)
    dense_fields: dict   # field name -> float


@dataclass(frozen=True)
class QueryRecord:
    query_id: str
    sparse_fields: dict
    dense_fields: dict
    candidates: tuple  # tuple of DocumentRecord, length N
    clicked_index: int
    propensity_weight: float = 1.0
    timestamp: int = 0

    @property
    def num_candidates(self):
        return len(self.candidates)


@dataclass(frozen=True)
class Dataset:
    schema: Schema
    records: tuple
    split_tag: str = "train"

    def __len__(self):
        return len(self.records)


@dataclass(frozen=True)
class PairExample:
    """One training unit: a query plus an ordered document pair.

    `label` is 1 iff `doc_a` is the clicked document. `cluster_paths`
    is filled in by the ranking pipeline for the QC-* model variants.
    """

    query: QueryRecord
    doc_a: DocumentRecord
    doc_b: DocumentRecord
    label: int
    weight: float
    cluster_paths: tuple = ()


@dataclass(frozen=True)
class SynthConfig:
    """Knobs for the synthetic click-log generator."""

    num_train: int = 1000
    num_dev: int = 200
    num_test: int = 200
    num_planted_clusters: int = 2
    vocab_size: int = 100            # tokens per planted cluster
    cluster_click_rules: tuple = ()  # per cluster: "recency" | "content"
    noise_rate: float = 0.0
    rng_seed: int = 0
    num_candidates: int = 6
    tokens_per_query: int = 3
    tokens_per_doc: int = 4
    overlap_tokens: int = 2          # query tokens copied into the target doc
    shared_token_fraction: float = 0.1
    conflict_rate: float = 0.0       # P(target doc is also the least recent)
    propensity_table: tuple = ()     # per-position observation probability

    def resolved_rules(self):
        if self.cluster_click_rules:
            return tuple(self.cluster_click_rules)
        return tuple(
            "recency" if c % 2 == 0 else "content"
            for c in range(self.num_planted_clusters)
        )

    def validate(self):
        if self.num_planted_clusters < 2:
            raise ConfigurationError("num_planted_clusters must be >= 2")
        if not (0.0 <= self.noise_rate < 0.5):
            raise ConfigurationError("noise_rate must be in [0, 0.5)")
        if not (0.0 <= self.conflict_rate <= 1.0):
            raise ConfigurationError("conflict_rate must be in [0, 1]")
        if self.num_candidates < 2:
            raise ConfigurationError("num_candidates must be >= 2")
        if min(self.num_train, self.num_dev, self.num_test) < 1:
            raise ConfigurationError("each split needs at least one query")
        rules = self.resolved_rules()
        if len(rules) != self.num_planted_clusters:
            raise ConfigurationError("one click rule per planted cluster required")
        for r in rules:
            if r not in ("recency", "content"):
                raise ConfigurationError(f"unknown click rule {r!r}")
        if self.propensity_table:
            if len(self.propensity_table) != self.num_candidates:
                raise ConfigurationError("propensity_table length must equal N")
            if any(p <= 0 for p in self.propensity_table):
                raise ConfigurationError("propensities must be positive")


SYNTH_SCHEMA = Schema(
    query_sparse=("ngrams", "category", "language"),
    query_dense=("hour",),
    doc_sparse=("subject_ngrams",),
    doc_dense=("recency", "match_score"),
)

_LANGUAGES = ("en", "fr", "de")


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------

def validate_record(record: QueryRecord, schema: Schema):
    """Raise SchemaError / LabelError if the record breaks an invariant."""
    n = len(record.candidates)
    if n < 2:
        raise SchemaError(f"{record.query_id}: needs at least 2 candidates")
    if not (0 <= record.clicked_index < n):
        raise SchemaError(
            f"{record.query_id}: clicked_index {record.clicked_index} not in [0, {n})"
        )
    if record.propensity_weight <= 0:
        raise SchemaError(f"{record.query_id}: propensity_weight must be positive")
    for name in record.sparse_fields:
        if name not in schema.query_sparse:
            raise SchemaError(f"{record.query_id}: undeclared query sparse field {name!r}")
    for name in record.dense_fields:
        if name not in schema.query_dense:
            raise SchemaError(f"{record.query_id}: undeclared query dense field {name!r}")
    for doc in record.candidates:
        for name in doc.sparse_fields:
            if name not in schema.doc_sparse:
                raise SchemaError(f"{doc.doc_id}: undeclared doc sparse field {name!r}")
        for name in doc.dense_fields:
            if name not in schema.doc_dense:
                raise SchemaError(f"{doc.doc_id}: undeclared doc dense field {name!r}")
        for name, toks in doc.sparse_fields.items():
            for tok, cnt in toks:
                if cnt <= 0 or int(cnt) != cnt:
                    raise SchemaError(f"{doc.doc_id}: count for {tok!r} must be a positive integer")
    for name, toks in record.sparse_fields.items():
        for tok, cnt in toks:
            if cnt <= 0 or int(cnt) != cnt:
                raise SchemaError(f"{record.query_id}: count for {tok!r} must be a positive integer")


def validate_dataset(dataset: Dataset):
    n = None
    for record in dataset.records:
        validate_record(record, dataset.schema)
        if n is None:
            n = len(record.candidates)
        elif len(record.candidates) != n:
            raise SchemaError(
                f"{record.query_id}: candidate count {len(record.candidates)} != {n}"
            )


# ---------------------------------------------------------------------------
# Synthetic generation
# ---------------------------------------------------------------------------

def _cluster_vocab(cluster: int, size: int):
    return [f"c{cluster}_tok{j}" for j in range(size)]


def _shared_vocab(config: SynthConfig):
    n_shared = max(1, int(round(config.shared_token_fraction * config.vocab_size)))
    return [f"shared_tok{j}" for j in range(n_shared)]


def rule_click_index(rule: str, query_tokens, candidates):
    """The candidate the cluster's rule would click (before noise).

    Ties resolve to the lowest index, matching the generator.
    """
    if rule == "recency":
        values = [doc.dense_fields["recency"] for doc in candidates]
    else:
        qset = set(query_tokens)
        values = []
        for doc in candidates:
            toks = [t for t, _ in doc.sparse_fields.get("subject_ngrams", ())]
            values.append(len(qset.intersection(toks)))
    return int(np.argmax(values))


def _counted(tokens):
    counts = {}
    for t in tokens:
        counts[t] = counts.get(t, 0) + 1
    return tuple(sorted(counts.items()))


def _gen_query(config, rng, query_id, timestamp, shared, rules, cluster):
    vocab = _cluster_vocab(cluster, config.vocab_size)
    q_tokens = []
    for _ in range(config.tokens_per_query):
        if rng.random() < config.shared_token_fraction:
            q_tokens.append(shared[rng.integers(len(shared))])
        else:
            q_tokens.append(vocab[rng.integers(len(vocab))])
    category = f"cat{cluster}" if rng.random() < 0.5 else f"cat{rng.integers(config.num_planted_clusters)}"
    language = _LANGUAGES[rng.integers(len(_LANGUAGES))]

    n = config.num_candidates
    target = int(rng.integers(n))
    docs = []
    unique_q = list(dict.fromkeys(q_tokens))
    for j in range(n):
        d_tokens = []
        for _ in range(config.tokens_per_doc):
            if rng.random() < config.shared_token_fraction:
                d_tokens.append(shared[rng.integers(len(shared))])
            else:
                d_tokens.append(vocab[rng.integers(len(vocab))])
        if j == target:
            d_tokens.extend(unique_q[: config.overlap_tokens])
        overlap = len(set(q_tokens).intersection(d_tokens))
        docs.append(
            DocumentRecord(
                doc_id=f"{query_id}_d{j}",
                sparse_fields={"subject_ngrams": _counted(d_tokens)},
                dense_fields={
                    "recency": float(rng.random()),
                    "match_score": float(overlap),
                },
            )
        )

    if config.conflict_rate and rng.random() < config.conflict_rate:
        # Force the two click rules apart: the content-match target is
        # also the least recent candidate, so a ranker that blends the
        # two dense signals instead of picking per cluster always pays.
        floor = min(docs[j].dense_fields["recency"] for j in range(n) if j != target)
        docs[target] = replace(
            docs[target],
            dense_fields={**docs[target].dense_fields,
                          "recency": float(rng.random() * floor)},
        )

    rule = rules[cluster]
    clicked = rule_click_index(rule, q_tokens, docs)
    if rng.random() < config.noise_rate:
        clicked = int(rng.integers(n))

    if config.propensity_table:
        weight = 1.0 / config.propensity_table[clicked]
    else:
        weight = 1.0

    return QueryRecord(
        query_id=query_id,
        sparse_fields={
            "ngrams": _counted(q_tokens),
            "category": ((category, 1),),
            "language": ((language, 1),),
        },
        dense_fields={"hour": float(rng.integers(24))},
        candidates=tuple(docs),
        clicked_index=clicked,
        propensity_weight=weight,
        timestamp=timestamp,
    )


def generate_synthetic(config: SynthConfig):
    """Generate (train, dev, test) datasets with planted cluster structure.

    Pure function of the config: the same seed gives a bit-identical
    triple. Timestamps are strictly increasing across splits.
    """
    config.validate()
    rng = np.random.default_rng(config.rng_seed)
    shared = _shared_vocab(config)
    rules = config.resolved_rules()

    datasets = []
    ts = 0
    for tag, count in (
        ("train", config.num_train),
        ("dev", config.num_dev),
        ("test", config.num_test),
    ):
        records = []
        for i in range(count):
            cluster = int(rng.integers(config.num_planted_clusters))
            records.append(
                _gen_query(config, rng, f"{tag}_q{i}", ts, shared, rules, cluster)
            )
            ts += 1
        datasets.append(Dataset(schema=SYNTH_SCHEMA, records=tuple(records), split_tag=tag))
    return tuple(datasets)


def planted_cluster_of(record: QueryRecord):
    """Recover the planted cluster id from generated token names.

    Returns None when every token came from the shared pool.
    """
    for tok, _ in record.sparse_fields.get("ngrams", ()):
        if tok.startswith("c") and "_tok" in tok:
            return int(tok[1:].split("_")[0])
    return None


# ---------------------------------------------------------------------------
# Splitting
# ---------------------------------------------------------------------------

def split_chronological(records, boundaries):
    """Split records into (train, dev, test) at timestamp boundaries (t1, t2).

    train: ts <= t1; dev: t1 < ts <= t2; test: ts > t2. Raises SplitError
    if any split comes out empty or strict ordering cannot hold.
    """
    t1, t2 = boundaries
    if not t1 < t2:
        raise SplitError(f"boundaries must satisfy t1 < t2, got {boundaries}")
    train = tuple(r for r in records if r.timestamp <= t1)
    dev = tuple(r for r in records if t1 < r.timestamp <= t2)
    test = tuple(r for r in records if r.timestamp > t2)
    for name, part in (("train", train), ("dev", dev), ("test", test)):
        if not part:
            raise SplitError(f"{name} split is empty for boundaries {boundaries}")
    return train, dev, test


# ---------------------------------------------------------------------------
# Pair construction
# ---------------------------------------------------------------------------

def build_pairs(query: QueryRecord, rng=None):
    """Emit N-1 PairExamples: the clicked candidate against each other one.

    Document order within each pair is randomized (seeded via `rng`) so
    labels are balanced; the label is 1 iff doc_a is the clicked one.
    """
    n = len(query.candidates)
    clicked = query.clicked_index
    if not (0 <= clicked < n):
        raise LabelError(f"{query.query_id}: clicked_index out of range")
    if rng is None:
        rng = np.random.default_rng(0)
    pairs = []
    clicked_doc = query.candidates[clicked]
    for j in range(n):
        if j == clicked:
            continue
        other = query.candidates[j]
        if rng.random() < 0.5:
            pairs.append(PairExample(query, clicked_doc, other, 1, query.propensity_weight))
        else:
            pairs.append(PairExample(query, other, clicked_doc, 0, query.propensity_weight))
    return pairs


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def _doc_to_dict(doc: DocumentRecord):
    return {
        "doc_id": doc.doc_id,
        "sparse_fields": {k: [list(p) for p in v] for k, v in sorted(doc.sparse_fields.items())},
        "dense_fields": dict(sorted(doc.dense_fields.items())),
    }


def _doc_from_dict(d):
    return DocumentRecord(
        doc_id=d["doc_id"],
        sparse_fields={k: tuple((t, int(c)) for t, c in v) for k, v in d["sparse_fields"].items()},
        dense_fields={k: float(v) for k, v in d["dense_fields"].items()},
    )


def _record_to_dict(r: QueryRecord):
    return {
        "query_id": r.query_id,
        "timestamp": r.timestamp,
        "sparse_fields": {k: [list(p) for p in v] for k, v in sorted(r.sparse_fields.items())},
        "dense_fields": dict(sorted(r.dense_fields.items())),
        "candidates": [_doc_to_dict(d) for d in r.candidates],
        "clicked_index": r.clicked_index,
        "propensity_weight": r.propensity_weight,
    }


def _record_from_dict(d):
    return QueryRecord(
        query_id=d["query_id"],
        sparse_fields={k: tuple((t, int(c)) for t, c in v) for k, v in d["sparse_fields"].items()},
        dense_fields={k: float(v) for k, v in d["dense_fields"].items()},
        candidates=tuple(_doc_from_dict(x) for x in d["candidates"]),
        clicked_index=int(d["clicked_index"]),
        propensity_weight=float(d["propensity_weight"]),
        timestamp=int(d["timestamp"]),
    )


def save_dataset(dataset: Dataset, path):
    """Write one query per line (JSON), preceded by a schema header line."""
    validate_dataset(dataset)
    header = {
        "format": FILE_FORMAT,
        "version": FILE_VERSION,
        "schema": dataset.schema.to_dict(),
        "split_tag": dataset.split_tag,
        "num_records": len(dataset.records),
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for r in dataset.records:
            fh.write(json.dumps(_record_to_dict(r), sort_keys=True) + "\n")


def load_dataset(path) -> Dataset:
    """Load a dataset file; raises ParseError with the offending line number."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise DataError(f"cannot read dataset {path}: {exc}") from exc
    if not lines:
        raise ParseError("empty dataset file", line_number=1)
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise ParseError(str(exc), line_number=1) from exc
    if header.get("format") != FILE_FORMAT:
        raise ParseError("missing qcrank-dataset header", line_number=1)
    schema = Schema.from_dict(header["schema"])
    records = []
    for i, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            d = json.loads(line)
            record = _record_from_dict(d)
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise ParseError(str(exc), line_number=i) from exc
        validate_record(record, schema)
        records.append(record)
    dataset = Dataset(schema=schema, records=tuple(records), split_tag=header["split_tag"])
    validate_dataset(dataset)
    return dataset


def dataset_checksum(dataset: Dataset) -> str:
    """SHA-256 over the canonical serialized form."""
    h = hashlib.sha256()
    h.update(json.dumps(dataset.schema.to_dict(), sort_keys=True).encode())
    for r in dataset.records:
        h.update(json.dumps(_record_to_dict(r), sort_keys=True).encode())
    return h.hexdigest()
