"""Divisive hierarchical query clustering.

A query is represented by pooled token counts from its own sparse fields
plus those of its top baseline-ranked candidates. The hierarchy is built
top-down: each node fits a rank-B subspace (truncated SVD + varimax) on
its members only and sends every member to the child of its largest
rotated coordinate.
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import linalg
from .corpus import Dataset, QueryRecord
from .errors import DataError, DimensionError, QcrankError
from .serialize import load_arrays, save_arrays


# ---------------------------------------------------------------------------
# Baseline BM25 ranking
# ---------------------------------------------------------------------------

def _doc_tokens(doc):
    out = []
    for toks in doc.sparse_fields.values():
        out.extend(toks)
    return out


def _query_tokens(query):
    out = []
    for toks in query.sparse_fields.values():
        out.extend(toks)
    return out


@dataclass(frozen=True)
class Bm25Stats:
    """Corpus statistics (document frequency, average length) from the
    training split; frozen before ranking dev/test candidates."""

    doc_freq: dict
    n_docs: int
    avg_doc_len: float

    @classmethod
    def from_dataset(cls, dataset: Dataset):
        df = {}
        n_docs = 0
        total_len = 0
        for record in dataset.records:
            for doc in record.candidates:
                n_docs += 1
                toks = _doc_tokens(doc)
                total_len += sum(c for _, c in toks)
                for tok in {t for t, _ in toks}:
                    df[tok] = df.get(tok, 0) + 1
        if n_docs == 0:
            raise DataError("cannot build BM25 stats from an empty dataset")
        return cls(doc_freq=df, n_docs=n_docs, avg_doc_len=total_len / n_docs)

    def idf(self, token):
        df = self.doc_freq.get(token, 0)
        return math.log(1.0 + (self.n_docs - df + 0.5) / (df + 0.5))


def bm25_score(query: QueryRecord, doc, stats: Bm25Stats, k1=1.2, b=0.75):
    """BM25 over shared sparse tokens; document length = total token count."""
    doc_counts = {}
    doc_len = 0
    for tok, cnt in _doc_tokens(doc):
        doc_counts[tok] = doc_counts.get(tok, 0) + cnt
        doc_len += cnt
    norm = k1 * (1.0 - b + b * doc_len / stats.avg_doc_len) if stats.avg_doc_len > 0 else k1
    score = 0.0
    for tok, qtf in _query_tokens(query):
        tf = doc_counts.get(tok)
        if tf:
            score += qtf * stats.idf(tok) * tf * (k1 + 1.0) / (tf + norm)
    return score


def baseline_rank(query: QueryRecord, candidates, stats: Bm25Stats, k1=1.2, b=0.75):
    """Candidates sorted by BM25 score, ties broken by descending recency
    dense feature then by doc_id."""
    def sort_key(doc):
        recency = doc.dense_fields.get("recency", 0.0)
        return (-bm25_score(query, doc, stats, k1, b), -recency, doc.doc_id)

    return sorted(candidates, key=sort_key)


# ---------------------------------------------------------------------------
# Query representation
# ---------------------------------------------------------------------------

def build_query_representation(query: QueryRecord, ranked_candidates, top_k=4):
    """Pooled token counts from the query plus its top_k ranked candidates.

    Tokens share one namespace across fields, so a bigram seen once in
    the query and twice among the top documents gets value 3.
    """
    counts = {}
    for tok, cnt in _query_tokens(query):
        counts[tok] = counts.get(tok, 0) + cnt
    for doc in ranked_candidates[: max(0, top_k)]:
        for tok, cnt in _doc_tokens(doc):
            counts[tok] = counts.get(tok, 0) + cnt
    return counts


def build_vocabulary(token_count_dicts):
    """Frozen token -> column index map (sorted token order)."""
    vocab = {}
    for counts in token_count_dicts:
        for tok in counts:
            vocab.setdefault(tok, None)
    return {tok: i for i, tok in enumerate(sorted(vocab))}


def vectorize(token_count_dicts, vocab, count_transform="raw"):
    """Stack count dicts into a CSR matrix over the frozen vocabulary.

    Unseen tokens are dropped. `count_transform` is "raw" or "log1p".
    """
    indptr = [0]
    indices = []
    data = []
    for counts in token_count_dicts:
        cols = sorted(vocab[t] for t in counts if t in vocab)
        inv = {vocab[t]: c for t, c in counts.items() if t in vocab}
        for col in cols:
            v = float(inv[col])
            if count_transform == "log1p":
                v = math.log1p(v)
            indices.append(col)
            data.append(v)
        indptr.append(len(indices))
    return sp.csr_matrix(
        (np.asarray(data), np.asarray(indices, dtype=np.int64), np.asarray(indptr, dtype=np.int64)),
        shape=(len(indptr) - 1, len(vocab)),
    )


# ---------------------------------------------------------------------------
# Cluster tree
# ---------------------------------------------------------------------------

@dataclass
class ClusterNode:
    path: tuple                     # branch indices from root, 0-based
    depth: int
    member_count: int
    subspace: linalg.SubspaceModel = None
    children: dict = field(default_factory=dict)
    pruned: bool = False
    degenerate: bool = False

    @property
    def label(self):
        """Human-readable 1-based path, e.g. "2.1"."""
        return ".".join(str(i + 1) for i in self.path)


@dataclass
class ClusterTree:
    root: ClusterNode
    vocab: dict
    depth: int
    branch: int
    min_leaf: int
    top_k_docs: int
    count_transform: str
    seed: int
    svd_oversample: int = 10
    svd_power_iters: int = 2

    def node_at(self, path):
        node = self.root
        for idx in path:
            if idx not in node.children:
                raise QcrankError(f"no cluster at path {path}")
            node = node.children[idx]
        return node

    def iter_nodes(self):
        stack = [self.root]
        while stack:
            node = stack.pop()
            yield node
            for idx in sorted(node.children, reverse=True):
                stack.append(node.children[idx])

    def valid_cluster_labels(self):
        """Labels of all non-pruned, non-root nodes (every granularity)."""
        return [n.label for n in self.iter_nodes() if n.path and not n.pruned]


def _node_seed(seed, path):
    # Depends only on (tree seed, node path) so sibling subtrees never
    # influence this node's sketch.
    return (int(seed) & 0x7FFFFFFF, len(path) + 1, *[p + 1 for p in path])


def _fit_node_subspace(X_members, branch, seed, path, oversample, power_iters):
    model = linalg.truncated_svd(
        X_members,
        k=branch,
        oversample=oversample,
        power_iters=power_iters,
        seed=_node_seed(seed, path),
    )
    scores = np.asarray(X_members @ model.basis)
    rotation, rotated = linalg.varimax(scores)
    return model.with_rotation(rotation), rotated


def _fit_subtree(X, member_idx, path, depth, tree: ClusterTree, assignments):
    node = ClusterNode(path=path, depth=depth, member_count=len(member_idx))
    if depth >= tree.depth:
        node.pruned = node.member_count < tree.min_leaf
        return node
    if node.member_count < tree.branch or X.shape[1] < tree.branch:
        # Too few members (or features) to subdivide; becomes a leaf.
        node.pruned = node.member_count < tree.min_leaf
        return node
    sub = X[member_idx]
    if sub.nnz == 0:
        node.degenerate = True
        node.pruned = node.member_count < tree.min_leaf
        return node

    model, rotated = _fit_node_subspace(
        sub, tree.branch, tree.seed, path, tree.svd_oversample, tree.svd_power_iters
    )
    node.subspace = model
    branch_of = np.argmax(rotated, axis=1)
    for b in range(tree.branch):
        child_members = member_idx[branch_of == b]
        child = _fit_subtree(X, child_members, path + (b,), depth + 1, tree, assignments)
        node.children[b] = child
        if assignments is not None and not child.pruned:
            for i in child_members:
                assignments[i].append(child.label)
    return node


def fit_hierarchy(
    X,
    depth=3,
    branch=7,
    min_leaf=50,
    top_k_docs=4,
    count_transform="raw",
    seed=0,
    vocab=None,
    oversample=10,
    power_iters=2,
):
    """Fit the divisive hierarchy on a CSR matrix of query vectors.

    Returns (ClusterTree, assignments) where assignments[i] is the list
    of non-pruned cluster labels query i belongs to (one per level).
    """
    if depth < 1 or branch < 2 or min_leaf < 1:
        raise DimensionError("need depth >= 1, branch >= 2, min_leaf >= 1")
    if X.shape[0] == 0:
        raise DataError("no query vectors to cluster")
    tree = ClusterTree(
        root=None,
        vocab=vocab or {},
        depth=depth,
        branch=branch,
        min_leaf=min_leaf,
        top_k_docs=top_k_docs,
        count_transform=count_transform,
        seed=seed,
        svd_oversample=oversample,
        svd_power_iters=power_iters,
    )
    assignments = [[] for _ in range(X.shape[0])]
    tree.root = _fit_subtree(X, np.arange(X.shape[0]), (), 0, tree, assignments)
    # Labels were collected deepest-first while unwinding the recursion.
    assignments = [list(reversed(a)) for a in assignments]
    return tree, assignments


def assign(vector, tree: ClusterTree):
    """Walk root -> leaf, descending into the argmax rotated dimension.

    `vector` is a 1 x vocab sparse row (or dense 1-D array). Returns the
    list of non-pruned cluster labels on the walked path.
    """
    if sp.issparse(vector):
        row = vector
    else:
        row = np.asarray(vector, dtype=np.float64).reshape(1, -1)
    if row.shape[1] != len(tree.vocab) and tree.vocab:
        raise DimensionError(
            f"vector has {row.shape[1]} dims, vocabulary has {len(tree.vocab)}"
        )
    labels = []
    node = tree.root
    while node.subspace is not None:
        z = linalg.project_rows(node.subspace, row).ravel()
        b = int(np.argmax(z))  # ties -> smallest index
        child = node.children.get(b)
        if child is None or child.pruned:
            break
        labels.append(child.label)
        node = child
    return labels


def assign_record(query: QueryRecord, tree: ClusterTree, stats: Bm25Stats):
    """Full assignment path for a raw record: rank, represent, assign."""
    ranked = baseline_rank(query, query.candidates, stats)
    counts = build_query_representation(query, ranked, tree.top_k_docs)
    row = vectorize([counts], tree.vocab, tree.count_transform)
    return assign(row, tree)


# ---------------------------------------------------------------------------
# Distinctive n-grams
# ---------------------------------------------------------------------------

def distinctive_ngrams(assignments, token_count_dicts, cluster_label, top_n=10, min_support=5):
    """Top tokens by cnt(token | cluster) / cnt(token), descending.

    `assignments[i]` is the label list for query i. Tokens whose global
    count falls below `min_support` are excluded; ties break
    lexicographically.
    """
    total = {}
    in_cluster = {}
    seen = False
    for labels, counts in zip(assignments, token_count_dicts):
        member = cluster_label in labels
        seen = seen or member
        for tok, cnt in counts.items():
            total[tok] = total.get(tok, 0) + cnt
            if member:
                in_cluster[tok] = in_cluster.get(tok, 0) + cnt
    if not seen:
        raise QcrankError(f"no queries assigned to cluster {cluster_label!r}")
    scored = [
        (tok, in_cluster[tok] / total[tok])
        for tok in in_cluster
        if total[tok] >= min_support
    ]
    scored.sort(key=lambda p: (-p[1], p[0]))
    return scored[:top_n]


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def save_tree(tree: ClusterTree, path):
    nodes = []
    arrays = {}

    def walk(node):
        entry = {
            "path": list(node.path),
            "depth": node.depth,
            "member_count": node.member_count,
            "pruned": node.pruned,
            "degenerate": node.degenerate,
            "has_subspace": node.subspace is not None,
            "children": sorted(node.children),
        }
        nodes.append(entry)
        if node.subspace is not None:
            key = "n_" + "_".join(str(i) for i in node.path)
            arrays[key + "_basis"] = node.subspace.basis
            arrays[key + "_svals"] = node.subspace.singular_values
            arrays[key + "_rot"] = node.subspace.rotation
        for b in sorted(node.children):
            walk(node.children[b])

    walk(tree.root)
    manifest = {
        "format": "qcrank-cluster-tree",
        "version": 1,
        "depth": tree.depth,
        "branch": tree.branch,
        "min_leaf": tree.min_leaf,
        "top_k_docs": tree.top_k_docs,
        "count_transform": tree.count_transform,
        "seed": tree.seed,
        "svd_oversample": tree.svd_oversample,
        "svd_power_iters": tree.svd_power_iters,
        "vocab": sorted(tree.vocab, key=tree.vocab.get),
        "nodes": nodes,
    }
    save_arrays(path, manifest, arrays)


def load_tree(path) -> ClusterTree:
    manifest, arrays = load_arrays(path)
    if manifest.get("format") != "qcrank-cluster-tree":
        raise QcrankError(f"{path}: not a cluster tree file")
    vocab = {tok: i for i, tok in enumerate(manifest["vocab"])}
    by_path = {}
    for entry in manifest["nodes"]:
        p = tuple(entry["path"])
        node = ClusterNode(
            path=p,
            depth=entry["depth"],
            member_count=entry["member_count"],
            pruned=entry["pruned"],
            degenerate=entry["degenerate"],
        )
        if entry["has_subspace"]:
            key = "n_" + "_".join(str(i) for i in p)
            node.subspace = linalg.SubspaceModel(
                basis=arrays[key + "_basis"],
                singular_values=arrays[key + "_svals"],
                rotation=arrays[key + "_rot"],
            )
        by_path[p] = node
        if p:
            by_path[p[:-1]].children[p[-1]] = node
    return ClusterTree(
        root=by_path[()],
        vocab=vocab,
        depth=manifest["depth"],
        branch=manifest["branch"],
        min_leaf=manifest["min_leaf"],
        top_k_docs=manifest["top_k_docs"],
        count_transform=manifest["count_transform"],
        seed=manifest["seed"],
        svd_oversample=manifest["svd_oversample"],
        svd_power_iters=manifest["svd_power_iters"],
    )


# ---------------------------------------------------------------------------
# End-to-end fitting from a dataset
# ---------------------------------------------------------------------------

def fit_from_dataset(
    train: Dataset,
    depth=3,
    branch=7,
    min_leaf=50,
    top_k_docs=4,
    count_transform="raw",
    seed=0,
    oversample=10,
    power_iters=2,
):
    """Build representations from a training split and fit the hierarchy.

    Returns (tree, assignments, stats, token_count_dicts).
    """
    if not train.records:
        raise DataError("training split is empty")
    stats = Bm25Stats.from_dataset(train)
    dicts = []
    for record in train.records:
        ranked = baseline_rank(record, record.candidates, stats)
        dicts.append(build_query_representation(record, ranked, top_k_docs))
    vocab = build_vocabulary(dicts)
    X = vectorize(dicts, vocab, count_transform)
    tree, assignments = fit_hierarchy(
        X,
        depth=depth,
        branch=branch,
        min_leaf=min_leaf,
        top_k_docs=top_k_docs,
        count_transform=count_transform,
        seed=seed,
        vocab=vocab,
        oversample=oversample,
        power_iters=power_iters,
    )
    return tree, assignments, stats, dicts
