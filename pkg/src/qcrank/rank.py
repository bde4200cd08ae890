"""Pairwise neural ranking models.

Four variants share one architecture: count-weighted embedding sums per
sparse field, concatenated with dense features for (query, docA, docB),
a ReLU stack, and a single sigmoid output neuron giving P(docA > docB).

  dprm      plain deep pairwise ranker
  qc-dprm   cluster paths fed as an extra sparse query field
  qc-wdprm  wide linear head over cluster x categorical cross features
  qc-mtlrm  auxiliary cluster-prediction head (softmax) with mix_rate

Everything runs in float64 with explicit reverse-mode gradients so the
finite-difference suite can pin them down.
"""

import json
from dataclasses import dataclass, field, asdict

import numpy as np
import scipy.sparse as sp

from . import cluster as cluster_mod
from .corpus import Dataset, PairExample, Schema, build_pairs
from .errors import (
    ConfigurationError,
    DataError,
    DimensionError,
    NumericError,
)
from .evaluation import rank_of_clicked
from .serialize import load_arrays, save_arrays

VARIANTS = ("dprm", "qc-dprm", "qc-wdprm", "qc-mtlrm")
CLUSTER_FIELD = "query_cluster"  # virtual sparse field for qc-dprm
LOG_CLAMP = 1e-12


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ModelConfig:
    variant: str = "dprm"
    embedding_dim: int = 40
    hidden_sizes: tuple = (256, 128, 64)
    dropout_rate: float = 0.0
    learning_rate: float = 0.1
    optimizer: str = "adagrad"  # "adagrad" | "adam"
    mix_rate: float = 0.9
    vocab_min_freq: int = 1
    cluster_head_hidden: int = 64
    batch_size: int = 256
    max_epochs: int = 20
    patience: int = 3
    rng_seed: int = 0
    wide_fields: tuple = ("language", "category")
    wide_l2: float = 1e-6

    def validate(self):
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"unknown variant {self.variant!r}")
        if not self.hidden_sizes:
            raise ConfigurationError("hidden_sizes must be nonempty")
        if self.mix_rate < 0:
            raise ConfigurationError("mix_rate must be non-negative")
        if not (0.0 <= self.dropout_rate < 1.0):
            raise ConfigurationError("dropout_rate must be in [0, 1)")
        if self.optimizer not in ("adagrad", "adam"):
            raise ConfigurationError(f"unknown optimizer {self.optimizer!r}")

    def to_dict(self):
        d = asdict(self)
        d["hidden_sizes"] = list(self.hidden_sizes)
        d["wide_fields"] = list(self.wide_fields)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["hidden_sizes"] = tuple(d["hidden_sizes"])
        d["wide_fields"] = tuple(d["wide_fields"])
        return cls(**d)


# ---------------------------------------------------------------------------
# Vocabularies
# ---------------------------------------------------------------------------

UNK = "<UNK>"


def build_field_vocab(token_freqs, min_freq):
    """token -> index with UNK at 0; tokens below min_freq fold into UNK."""
    kept = sorted(t for t, c in token_freqs.items() if c >= min_freq)
    vocab = {UNK: 0}
    for t in kept:
        vocab[t] = len(vocab)
    return vocab


def build_vocab(dataset: Dataset, min_freq=1):
    """Per-field vocabularies from the training split only.

    Keys are "q:<field>" for query sparse fields and "d:<field>" for
    document sparse fields (shared between docA and docB).
    """
    freqs = {}
    for f in dataset.schema.query_sparse:
        freqs["q:" + f] = {}
    for f in dataset.schema.doc_sparse:
        freqs["d:" + f] = {}
    for record in dataset.records:
        for f, toks in record.sparse_fields.items():
            bucket = freqs["q:" + f]
            for tok, cnt in toks:
                bucket[tok] = bucket.get(tok, 0) + cnt
        for doc in record.candidates:
            for f, toks in doc.sparse_fields.items():
                bucket = freqs["d:" + f]
                for tok, cnt in toks:
                    bucket[tok] = bucket.get(tok, 0) + cnt
    return {key: build_field_vocab(f, min_freq) for key, f in sorted(freqs.items())}


def cluster_vocabulary(assignment_lists):
    """Ordered flat vocabulary of cluster path labels (all granularities)."""
    labels = set()
    for labs in assignment_lists:
        labels.update(labs)
    def order(label):
        parts = tuple(int(p) for p in label.split("."))
        return (len(parts), parts)
    return tuple(sorted(labels, key=order))


def wide_cross_features(query_sparse_fields, cluster_labels, wide_fields):
    """Binary cross-feature names: one per (cluster label, wide token).

    Every cross contains exactly one cluster component. Queries with no
    cluster assignment produce an empty set.
    """
    crosses = set()
    for label in cluster_labels:
        for f in wide_fields:
            for tok, _ in query_sparse_fields.get(f, ()):
                crosses.add(f"cluster={label}&{f}={tok}")
    return crosses


def build_wide_vocab(records, assignments, wide_fields):
    """Exact (collision-free) cross-feature index map from training data."""
    names = set()
    for record in records:
        labels = assignments.get(record.query_id, [])
        names.update(wide_cross_features(record.sparse_fields, labels, wide_fields))
    return {name: i for i, name in enumerate(sorted(names))}


# ---------------------------------------------------------------------------
# Encoding
# ---------------------------------------------------------------------------

@dataclass
class EncodedPairs:
    """Design matrices for a list of pairs, ready for batched math."""

    n: int
    q_fields: dict        # "q:<field>" -> csr (n x V_field)
    a_fields: dict        # "d:<field>" -> csr for docA
    b_fields: dict        # "d:<field>" -> csr for docB
    dense_q: np.ndarray
    dense_a: np.ndarray
    dense_b: np.ndarray
    y: np.ndarray = None
    w: np.ndarray = None
    cluster_targets: sp.csr_matrix = None
    wide: sp.csr_matrix = None

    def subset(self, idx):
        return EncodedPairs(
            n=len(idx),
            q_fields={k: m[idx] for k, m in self.q_fields.items()},
            a_fields={k: m[idx] for k, m in self.a_fields.items()},
            b_fields={k: m[idx] for k, m in self.b_fields.items()},
            dense_q=self.dense_q[idx],
            dense_a=self.dense_a[idx],
            dense_b=self.dense_b[idx],
            y=None if self.y is None else self.y[idx],
            w=None if self.w is None else self.w[idx],
            cluster_targets=None if self.cluster_targets is None else self.cluster_targets[idx],
            wide=None if self.wide is None else self.wide[idx],
        )


def _sparse_from_token_lists(token_lists, vocab):
    indptr = [0]
    indices = []
    data = []
    for toks in token_lists:
        agg = {}
        for tok, cnt in toks:
            col = vocab.get(tok, 0)
            agg[col] = agg.get(col, 0.0) + float(cnt)
        for col in sorted(agg):
            indices.append(col)
            data.append(agg[col])
        indptr.append(len(indices))
    return sp.csr_matrix(
        (np.asarray(data, dtype=np.float64),
         np.asarray(indices, dtype=np.int64),
         np.asarray(indptr, dtype=np.int64)),
        shape=(len(token_lists), len(vocab)),
    )


class Encoder:
    """Turns PairExamples into EncodedPairs under frozen vocabularies."""

    def __init__(self, config: ModelConfig, schema: Schema, vocab,
                 cluster_vocab=(), wide_vocab=None):
        self.config = config
        self.schema = schema
        self.vocab = dict(vocab)
        self.cluster_vocab = tuple(cluster_vocab)
        self.cluster_index = {c: i for i, c in enumerate(self.cluster_vocab)}
        self.wide_vocab = dict(wide_vocab or {})
        if config.variant == "qc-dprm":
            qc_vocab = {UNK: 0}
            for c in self.cluster_vocab:
                qc_vocab[c] = len(qc_vocab)
            self.vocab["q:" + CLUSTER_FIELD] = qc_vocab

    @property
    def query_field_keys(self):
        keys = sorted("q:" + f for f in self.schema.query_sparse)
        if self.config.variant == "qc-dprm":
            keys = sorted(keys + ["q:" + CLUSTER_FIELD])
        return keys

    @property
    def doc_field_keys(self):
        return sorted("d:" + f for f in self.schema.doc_sparse)

    def encode(self, pairs):
        cfg = self.config
        q_fields = {}
        for key in self.query_field_keys:
            fname = key[2:]
            if fname == CLUSTER_FIELD:
                lists = [tuple((c, 1) for c in p.cluster_paths) for p in pairs]
            else:
                lists = [p.query.sparse_fields.get(fname, ()) for p in pairs]
            q_fields[key] = _sparse_from_token_lists(lists, self.vocab[key])
        a_fields = {}
        b_fields = {}
        for key in self.doc_field_keys:
            fname = key[2:]
            a_fields[key] = _sparse_from_token_lists(
                [p.doc_a.sparse_fields.get(fname, ()) for p in pairs], self.vocab[key])
            b_fields[key] = _sparse_from_token_lists(
                [p.doc_b.sparse_fields.get(fname, ()) for p in pairs], self.vocab[key])

        qd = sorted(self.schema.query_dense)
        dd = sorted(self.schema.doc_dense)
        dense_q = np.array(
            [[p.query.dense_fields.get(f, 0.0) for f in qd] for p in pairs],
            dtype=np.float64).reshape(len(pairs), len(qd))
        dense_a = np.array(
            [[p.doc_a.dense_fields.get(f, 0.0) for f in dd] for p in pairs],
            dtype=np.float64).reshape(len(pairs), len(dd))
        dense_b = np.array(
            [[p.doc_b.dense_fields.get(f, 0.0) for f in dd] for p in pairs],
            dtype=np.float64).reshape(len(pairs), len(dd))

        enc = EncodedPairs(
            n=len(pairs),
            q_fields=q_fields, a_fields=a_fields, b_fields=b_fields,
            dense_q=dense_q, dense_a=dense_a, dense_b=dense_b,
            y=np.array([p.label for p in pairs], dtype=np.float64),
            w=np.array([p.weight for p in pairs], dtype=np.float64),
        )

        if cfg.variant == "qc-mtlrm":
            indptr = [0]
            indices = []
            data = []
            for p in pairs:
                known = [self.cluster_index[c] for c in p.cluster_paths
                         if c in self.cluster_index]
                known = sorted(set(known))
                for col in known:
                    indices.append(col)
                    data.append(1.0 / len(known))
                indptr.append(len(indices))
            enc.cluster_targets = sp.csr_matrix(
                (np.asarray(data, dtype=np.float64),
                 np.asarray(indices, dtype=np.int64),
                 np.asarray(indptr, dtype=np.int64)),
                shape=(len(pairs), max(1, len(self.cluster_vocab))),
            )

        if cfg.variant == "qc-wdprm":
            indptr = [0]
            indices = []
            for p in pairs:
                names = wide_cross_features(
                    p.query.sparse_fields, p.cluster_paths, cfg.wide_fields)
                cols = sorted(self.wide_vocab[n] for n in names if n in self.wide_vocab)
                indices.extend(cols)
                indptr.append(len(indices))
            enc.wide = sp.csr_matrix(
                (np.ones(len(indices), dtype=np.float64),
                 np.asarray(indices, dtype=np.int64),
                 np.asarray(indptr, dtype=np.int64)),
                shape=(len(pairs), max(1, len(self.wide_vocab))),
            )
        return enc

    def input_dim(self):
        e = self.config.embedding_dim
        dim = len(self.query_field_keys) * e + len(self.schema.query_dense)
        dim += 2 * (len(self.doc_field_keys) * e + len(self.schema.doc_dense))
        return dim


def embed_features(params, encoder: "Encoder", sparse_fields, dense_fields,
                   role="query", cluster_paths=()):
    """Dense vector for one record: count-weighted embedding sums per
    sparse field, concatenated with its raw dense features.

    `role` is "query" or "doc". Unknown tokens fold into UNK.
    """
    if role == "query":
        keys = encoder.query_field_keys
        dense_names = sorted(encoder.schema.query_dense)
    else:
        keys = encoder.doc_field_keys
        dense_names = sorted(encoder.schema.doc_dense)
    parts = []
    for key in keys:
        fname = key[2:]
        if fname == CLUSTER_FIELD:
            toks = tuple((c, 1) for c in cluster_paths)
        else:
            toks = sparse_fields.get(fname, ())
        row = _sparse_from_token_lists([toks], encoder.vocab[key])
        parts.append(np.asarray(row @ params["emb:" + key]).ravel())
    parts.append(np.array([dense_fields.get(f, 0.0) for f in dense_names]))
    return np.concatenate(parts) if parts else np.zeros(0)


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

def init_params(config: ModelConfig, encoder: Encoder, rng=None):
    """He-normal hidden weights, uniform(-0.05, 0.05) embeddings, zero
    biases and wide weights. The cluster head is drawn last so a rank-only
    model shares the exact same prefix of the RNG stream."""
    if rng is None:
        rng = np.random.default_rng(config.rng_seed)
    e = config.embedding_dim
    params = {}
    for key in encoder.query_field_keys + encoder.doc_field_keys:
        v = len(encoder.vocab[key])
        params["emb:" + key] = rng.uniform(-0.05, 0.05, size=(v, e))
    sizes = [encoder.input_dim()] + list(config.hidden_sizes)
    for i in range(len(config.hidden_sizes)):
        fan_in = sizes[i]
        params[f"W{i}"] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(sizes[i], sizes[i + 1]))
        params[f"b{i}"] = np.zeros(sizes[i + 1])
    h = sizes[-1]
    params["out_w"] = rng.normal(0.0, np.sqrt(2.0 / h), size=(h,))
    params["out_b"] = np.zeros(1)
    if config.variant == "qc-wdprm":
        params["wide_w"] = np.zeros(max(1, len(encoder.wide_vocab)))
    if config.variant == "qc-mtlrm":
        hc = config.cluster_head_hidden
        nc = max(1, len(encoder.cluster_vocab))
        params["cl_W"] = rng.normal(0.0, np.sqrt(2.0 / h), size=(h, hc))
        params["cl_b"] = np.zeros(hc)
        params["cl_Ws"] = rng.normal(0.0, np.sqrt(2.0 / hc), size=(hc, nc))
        params["cl_bs"] = np.zeros(nc)
    return params


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------

def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _check_finite(arr, where):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {where}")


def forward_batch(config: ModelConfig, params, enc: EncodedPairs,
                  train_mode=False, dropout_rng=None):
    """Run the network on encoded pairs; returns a cache for backward.

    Dropout (inverted) applies to hidden activations only, and only when
    `train_mode` is set.
    """
    blocks = []
    slices = []
    pos = 0

    def add_block(name, arr):
        nonlocal pos
        blocks.append(arr)
        slices.append((name, pos, pos + arr.shape[1]))
        pos += arr.shape[1]

    for key in sorted(enc.q_fields):
        add_block(("q", key), np.asarray(enc.q_fields[key] @ params["emb:" + key]))
    add_block(("dense", "q"), enc.dense_q)
    for key in sorted(enc.a_fields):
        add_block(("a", key), np.asarray(enc.a_fields[key] @ params["emb:" + key]))
    add_block(("dense", "a"), enc.dense_a)
    for key in sorted(enc.b_fields):
        add_block(("b", key), np.asarray(enc.b_fields[key] @ params["emb:" + key]))
    add_block(("dense", "b"), enc.dense_b)

    x = np.hstack(blocks) if blocks else np.zeros((enc.n, 0))
    cache = {"x": x, "slices": slices, "zs": [], "hs": [x], "masks": []}

    h = x
    n_hidden = len(config.hidden_sizes)
    for i in range(n_hidden):
        z = h @ params[f"W{i}"] + params[f"b{i}"]
        _check_finite(z, f"hidden layer {i}")
        h = np.maximum(z, 0.0)
        if train_mode and config.dropout_rate > 0.0:
            keep = 1.0 - config.dropout_rate
            mask = (dropout_rng.random(h.shape) < keep) / keep
            h = h * mask
        else:
            mask = None
        cache["zs"].append(z)
        cache["masks"].append(mask)
        cache["hs"].append(h)

    logit = h @ params["out_w"] + params["out_b"][0]
    if config.variant == "qc-wdprm":
        logit = logit + np.asarray(enc.wide @ params["wide_w"]).ravel()
        cache_wide = params["wide_w"]
    else:
        cache_wide = None
    _check_finite(logit, "output neuron")
    p = _sigmoid(logit)
    cache["logit"] = logit
    cache["p"] = p
    cache["wide_w_snapshot"] = cache_wide

    if config.variant == "qc-mtlrm":
        zc = h @ params["cl_W"] + params["cl_b"]
        hc = np.maximum(zc, 0.0)
        logits_c = hc @ params["cl_Ws"] + params["cl_bs"]
        _check_finite(logits_c, "cluster head")
        cache["zc"] = zc
        cache["hc"] = hc
        cache["phat"] = _softmax(logits_c)
    return cache


def loss_rank(p, y):
    """Binary cross-entropy with probability clamped to [1e-12, 1-1e-12]."""
    p = np.clip(np.asarray(p, dtype=np.float64), LOG_CLAMP, 1.0 - LOG_CLAMP)
    y = np.asarray(y, dtype=np.float64)
    return -(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))


def loss_cluster(phat, p_c):
    """Cross-entropy -sum(p_c * log(phat)), same clamping as loss_rank."""
    phat = np.clip(np.asarray(phat, dtype=np.float64), LOG_CLAMP, 1.0 - LOG_CLAMP)
    p_c = np.asarray(p_c, dtype=np.float64)
    return -np.sum(p_c * np.log(phat), axis=-1)


def loss_joint(rank_losses, cluster_losses, mix_rate):
    """Mean over queries of (rank loss + mix_rate * cluster loss)."""
    r = np.asarray(rank_losses, dtype=np.float64)
    c = np.asarray(cluster_losses, dtype=np.float64)
    if r.shape != c.shape:
        raise DimensionError("loss lists must have equal length")
    if r.size == 0:
        raise DataError("empty loss lists")
    return float(np.mean(r + mix_rate * c))


def batch_loss(config, enc, cache):
    """Weighted mean per-pair loss of the current forward pass."""
    l = loss_rank(cache["p"], enc.y)
    if config.variant == "qc-mtlrm" and config.mix_rate != 0.0:
        ce = -np.asarray(
            enc.cluster_targets.multiply(
                np.log(np.clip(cache["phat"], LOG_CLAMP, 1.0 - LOG_CLAMP))
            ).sum(axis=1)
        ).ravel()
        l = l + config.mix_rate * ce
    total = float(np.mean(enc.w * l))
    if config.variant == "qc-wdprm":
        # Matches the L2 term added to the wide-weight gradient.
        total += 0.5 * config.wide_l2 * float(np.sum(cache["wide_w_snapshot"] ** 2))
    return total


def backward_batch(config: ModelConfig, params, enc: EncodedPairs, cache):
    """Gradients of `batch_loss` w.r.t. every parameter array.

    With mix_rate == 0 the cluster head contributes nothing: its terms
    are skipped entirely, so shared-layer gradients are bit-identical to
    a rank-only model's.
    """
    n = enc.n
    grads = {}
    scale = enc.w / n

    h_last = cache["hs"][-1]
    dlogit = scale * (cache["p"] - enc.y)
    grads["out_w"] = h_last.T @ dlogit
    grads["out_b"] = np.array([dlogit.sum()])
    dh = np.outer(dlogit, params["out_w"])

    if config.variant == "qc-wdprm":
        grads["wide_w"] = np.asarray(enc.wide.T @ dlogit).ravel() \
            + config.wide_l2 * params["wide_w"]

    if config.variant == "qc-mtlrm" and config.mix_rate != 0.0:
        lam = config.mix_rate
        dlogits_c = (cache["phat"] - np.asarray(enc.cluster_targets.todense())) \
            * (lam * scale)[:, None]
        grads["cl_Ws"] = cache["hc"].T @ dlogits_c
        grads["cl_bs"] = dlogits_c.sum(axis=0)
        dhc = dlogits_c @ params["cl_Ws"].T
        dzc = dhc * (cache["zc"] > 0)
        grads["cl_W"] = h_last.T @ dzc
        grads["cl_b"] = dzc.sum(axis=0)
        dh = dh + dzc @ params["cl_W"].T
    elif config.variant == "qc-mtlrm":
        grads["cl_Ws"] = np.zeros_like(params["cl_Ws"])
        grads["cl_bs"] = np.zeros_like(params["cl_bs"])
        grads["cl_W"] = np.zeros_like(params["cl_W"])
        grads["cl_b"] = np.zeros_like(params["cl_b"])

    for i in reversed(range(len(config.hidden_sizes))):
        mask = cache["masks"][i]
        if mask is not None:
            dh = dh * mask
        dz = dh * (cache["zs"][i] > 0)
        grads[f"W{i}"] = cache["hs"][i].T @ dz
        grads[f"b{i}"] = dz.sum(axis=0)
        dh = dz @ params[f"W{i}"].T

    dx = dh
    emb_grads = {}
    for name, lo, hi in cache["slices"]:
        role, key = name
        if role == "dense":
            continue
        block_grad = dx[:, lo:hi]
        mat = {"q": enc.q_fields, "a": enc.a_fields, "b": enc.b_fields}[role][key]
        g = np.asarray((mat.T @ block_grad))
        pkey = "emb:" + key
        if pkey in emb_grads:
            emb_grads[pkey] = emb_grads[pkey] + g
        else:
            emb_grads[pkey] = g
    grads.update(emb_grads)
    for key, val in params.items():
        if key not in grads:
            grads[key] = np.zeros_like(val)
    return grads


# ---------------------------------------------------------------------------
# Single-pair convenience wrappers
# ---------------------------------------------------------------------------

def forward_rank(config, params, encoder: Encoder, pair: PairExample,
                 train_mode=False, dropout_rng=None):
    """P(docA > docB) for one pair."""
    enc = encoder.encode([pair])
    cache = forward_batch(config, params, enc, train_mode, dropout_rng)
    return float(cache["p"][0])


def forward_cluster(config, params, encoder: Encoder, pair: PairExample):
    """Predicted cluster distribution for one pair (qc-mtlrm only)."""
    if config.variant != "qc-mtlrm":
        raise ConfigurationError("forward_cluster requires the qc-mtlrm variant")
    if not encoder.cluster_vocab:
        raise ConfigurationError("empty cluster vocabulary")
    enc = encoder.encode([pair])
    cache = forward_batch(config, params, enc)
    return cache["phat"][0]


def backward(config, params, encoder: Encoder, pair: PairExample):
    """Exact gradients of the per-pair loss (rank + mix_rate * cluster)."""
    enc = encoder.encode([pair])
    cache = forward_batch(config, params, enc)
    return backward_batch(config, params, enc, cache)


# ---------------------------------------------------------------------------
# Optimizers
# ---------------------------------------------------------------------------

class Adagrad:
    def __init__(self, params, lr, init_acc=0.1, eps=1e-8):
        self.lr = lr
        self.eps = eps
        self.acc = {k: np.full_like(v, init_acc) for k, v in params.items()}

    def step(self, params, grads):
        for k, g in grads.items():
            self.acc[k] += g * g
            params[k] -= self.lr * g / (np.sqrt(self.acc[k]) + self.eps)


class Adam:
    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.b1 = beta1
        self.b2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params, grads):
        self.t += 1
        bc1 = 1.0 - self.b1 ** self.t
        bc2 = 1.0 - self.b2 ** self.t
        for k, g in grads.items():
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            params[k] -= self.lr * (self.m[k] / bc1) / (np.sqrt(self.v[k] / bc2) + self.eps)


def make_optimizer(config, params):
    if config.optimizer == "adam":
        return Adam(params, config.learning_rate)
    return Adagrad(params, config.learning_rate)


# ---------------------------------------------------------------------------
# Model container and checkpointing
# ---------------------------------------------------------------------------

@dataclass
class Model:
    config: ModelConfig
    schema: Schema
    encoder: Encoder
    params: dict

    def save(self, path):
        manifest = {
            "format": "qcrank-checkpoint",
            "version": 1,
            "config": self.config.to_dict(),
            "schema": self.schema.to_dict(),
            "vocab": {k: sorted(v, key=v.get) for k, v in self.encoder.vocab.items()
                      if k != "q:" + CLUSTER_FIELD},
            "cluster_vocab": list(self.encoder.cluster_vocab),
            "wide_vocab": sorted(self.encoder.wide_vocab,
                                 key=self.encoder.wide_vocab.get),
        }
        save_arrays(path, manifest, self.params)

    @classmethod
    def load(cls, path):
        manifest, arrays = load_arrays(path)
        if manifest.get("format") != "qcrank-checkpoint":
            raise DataError(f"{path}: not a qcrank checkpoint")
        config = ModelConfig.from_dict(manifest["config"])
        schema = Schema.from_dict(manifest["schema"])
        vocab = {k: {t: i for i, t in enumerate(v)} for k, v in manifest["vocab"].items()}
        encoder = Encoder(
            config, schema, vocab,
            cluster_vocab=tuple(manifest["cluster_vocab"]),
            wide_vocab={n: i for i, n in enumerate(manifest["wide_vocab"])},
        )
        return cls(config=config, schema=schema, encoder=encoder, params=arrays)


# ---------------------------------------------------------------------------
# Scoring
# ---------------------------------------------------------------------------

def score_documents(model: Model, query, cluster_paths=()):
    """Per-candidate scores: score(d_a) = (1/N) sum_{b != a} f(q, d_a, d_b)."""
    n = len(query.candidates)
    if n < 2:
        raise DataError(f"{query.query_id}: need at least 2 candidates to score")
    pairs = []
    for a in range(n):
        for b in range(n):
            if a == b:
                continue
            pairs.append(PairExample(
                query, query.candidates[a], query.candidates[b],
                label=0, weight=1.0, cluster_paths=tuple(cluster_paths)))
    enc = model.encoder.encode(pairs)
    cache = forward_batch(model.config, model.params, enc)
    p = cache["p"].reshape(n, n - 1)
    return p.sum(axis=1) / n


def score_dataset(model: Model, dataset: Dataset, assignments=None):
    """Score every query; returns an (n_queries, N) array.

    `assignments` maps query_id -> cluster label list (QC-* variants).
    """
    assignments = assignments or {}
    pairs = []
    n = dataset.records[0].num_candidates if dataset.records else 0
    for record in dataset.records:
        paths = tuple(assignments.get(record.query_id, ()))
        for a in range(n):
            for b in range(n):
                if a != b:
                    pairs.append(PairExample(
                        record, record.candidates[a], record.candidates[b],
                        label=0, weight=1.0, cluster_paths=paths))
    if not pairs:
        return np.zeros((0, 0))
    enc = model.encoder.encode(pairs)
    cache = forward_batch(model.config, model.params, enc)
    p = cache["p"].reshape(len(dataset.records), n, n - 1)
    return p.sum(axis=2) / n


def dataset_ranks(model: Model, dataset: Dataset, assignments=None):
    scores = score_dataset(model, dataset, assignments)
    ranks = np.array([
        rank_of_clicked(scores[i], r.clicked_index)
        for i, r in enumerate(dataset.records)
    ])
    weights = np.array([r.propensity_weight for r in dataset.records])
    return ranks, weights, scores


def export_scores(model: Model, dataset: Dataset, path, assignments=None):
    """Write one line per (query_id, doc_id, score); header included."""
    try:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("query_id\tdoc_id\tscore\n")
            if dataset.records:
                scores = score_dataset(model, dataset, assignments)
                for i, record in enumerate(dataset.records):
                    for j, doc in enumerate(record.candidates):
                        fh.write(f"{record.query_id}\t{doc.doc_id}\t{float(scores[i, j])!r}\n")
    except OSError as exc:
        raise DataError(f"cannot write scores to {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def needs_clusters(variant):
    return variant in ("qc-dprm", "qc-wdprm", "qc-mtlrm")


def compute_assignments(datasets, tree, stats):
    """query_id -> cluster label list, for every record in the datasets."""
    out = {}
    for ds in datasets:
        for record in ds.records:
            out[record.query_id] = cluster_mod.assign_record(record, tree, stats)
    return out


@dataclass
class TrainResult:
    model: Model
    log: list          # per-epoch dicts: epoch, train_loss, dev_mrr
    best_epoch: int
    best_dev_mrr: float


def train(train_ds: Dataset, dev_ds: Dataset, config: ModelConfig,
          tree=None, stats=None, assignments=None):
    """Mini-batch SGD with propensity-weighted pair losses.

    Early-stops on dev MRR with the configured patience and returns the
    best-dev parameters. Deterministic for a fixed config seed.
    """
    config.validate()
    if not train_ds.records:
        raise DataError("empty training split")
    if needs_clusters(config.variant) and tree is None:
        raise ConfigurationError(f"{config.variant} requires a fitted cluster tree")

    if needs_clusters(config.variant) and assignments is None:
        if stats is None:
            stats = cluster_mod.Bm25Stats.from_dataset(train_ds)
        assignments = compute_assignments([train_ds, dev_ds], tree, stats)
    assignments = assignments or {}

    vocab = build_vocab(train_ds, config.vocab_min_freq)
    train_labels = [assignments.get(r.query_id, []) for r in train_ds.records]
    cvocab = cluster_vocabulary(train_labels) if needs_clusters(config.variant) else ()
    if config.variant == "qc-mtlrm" and not cvocab:
        raise ConfigurationError("cluster vocabulary is empty; check tree pruning")
    wvocab = None
    if config.variant == "qc-wdprm":
        wvocab = build_wide_vocab(train_ds.records, assignments, config.wide_fields)
    encoder = Encoder(config, train_ds.schema, vocab, cvocab, wvocab)

    pair_rng = np.random.default_rng((config.rng_seed, 1))
    pairs = []
    for record in train_ds.records:
        paths = tuple(assignments.get(record.query_id, ()))
        for p in build_pairs(record, pair_rng):
            pairs.append(PairExample(p.query, p.doc_a, p.doc_b, p.label, p.weight, paths))
    enc = encoder.encode(pairs)

    init_rng = np.random.default_rng((config.rng_seed, 2))
    params = init_params(config, encoder, init_rng)
    optimizer = make_optimizer(config, params)
    shuffle_rng = np.random.default_rng((config.rng_seed, 3))
    dropout_rng = np.random.default_rng((config.rng_seed, 4))

    model = Model(config=config, schema=train_ds.schema, encoder=encoder, params=params)
    best_params = {k: v.copy() for k, v in params.items()}
    best_mrr = -np.inf
    best_epoch = -1
    log = []
    since_best = 0

    order = np.arange(enc.n)
    for epoch in range(config.max_epochs):
        shuffle_rng.shuffle(order)
        total = 0.0
        batches = 0
        for start in range(0, enc.n, config.batch_size):
            idx = order[start:start + config.batch_size]
            batch = enc.subset(idx)
            cache = forward_batch(config, params, batch, train_mode=True,
                                  dropout_rng=dropout_rng)
            total += batch_loss(config, batch, cache)
            batches += 1
            grads = backward_batch(config, params, batch, cache)
            optimizer.step(params, grads)

        ranks, _, _ = dataset_ranks(model, dev_ds, assignments)
        dev_mrr = float(np.mean(1.0 / ranks)) if len(ranks) else 0.0
        log.append({
            "epoch": epoch,
            "train_loss": total / max(1, batches),
            "dev_mrr": dev_mrr,
        })
        if dev_mrr > best_mrr:
            best_mrr = dev_mrr
            best_epoch = epoch
            best_params = {k: v.copy() for k, v in params.items()}
            since_best = 0
        else:
            since_best += 1
            if since_best >= config.patience:
                break

    model.params = best_params
    return TrainResult(model=model, log=log, best_epoch=best_epoch,
                       best_dev_mrr=best_mrr)
