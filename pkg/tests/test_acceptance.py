"""Acceptance suite.

Eight release criteria, one test each, in order: numerical core,
gradient checks, loss algebra, cluster recovery, metric oracles, the
cluster-aware vs. baseline quality trend, the mix_rate sweep shape, and
artifact determinism. Each test emits a single pass/fail line directly
to the real stdout so the verdicts are visible even under pytest's
output capture.

The trend and sweep criteria (6 and 7) train real models on a 50,000
query corpus and dominate the runtime.
"""

import itertools
import sys
import time

import numpy as np
import pytest
from sklearn.metrics import adjusted_rand_score

from qcrank import cluster, corpus, evaluation, linalg, rank
from qcrank.cli import DEFAULT_MIX_GRID, main


VERDICTS = []


def report(num, name, ok):
    """Record one verdict line; the conftest terminal-summary hook
    prints them after the run, outside pytest's output capture."""
    line = f"[criterion {num}] {name}: {'PASS' if ok else 'FAIL'}"
    VERDICTS.append(line)
    print(line)
    return ok


# ---------------------------------------------------------------------------
# Shared small-scale helpers
# ---------------------------------------------------------------------------

def make_dataset(num_train=60, seed=11, noise=0.0, clusters=2, **kw):
    cfg = corpus.SynthConfig(
        num_train=num_train, num_dev=max(10, num_train // 6), num_test=10,
        num_planted_clusters=clusters, vocab_size=40 * clusters,
        noise_rate=noise, rng_seed=seed, **kw)
    return corpus.generate_synthetic(cfg)


def small_config(**kw):
    base = dict(variant="dprm", embedding_dim=4, hidden_sizes=(8, 4), rng_seed=0)
    base.update(kw)
    return rank.ModelConfig(**base)


def make_encoder(config, train_ds, cluster_vocab=(), wide_vocab=None):
    vocab = rank.build_vocab(train_ds, config.vocab_min_freq)
    return rank.Encoder(config, train_ds.schema, vocab, cluster_vocab, wide_vocab)


def pairs_with_paths(train, cluster_paths):
    rng = np.random.default_rng(5)
    out = []
    for record in train.records[:4]:
        for p in corpus.build_pairs(record, rng):
            out.append(corpus.PairExample(
                p.query, p.doc_a, p.doc_b, p.label, p.weight,
                tuple(cluster_paths)))
    return out


def fd_worst_error(config, enc, params, pairs, n_probes=6, eps=1e-6):
    """Worst relative error between analytic and central-difference
    gradients over sampled entries of every parameter array."""
    encoded = enc.encode(pairs)

    def loss_at(p):
        cache = rank.forward_batch(config, p, encoded)
        return rank.batch_loss(config, encoded, cache)

    cache = rank.forward_batch(config, params, encoded)
    grads = rank.backward_batch(config, params, encoded, cache)
    rng = np.random.default_rng(0)
    worst = 0.0
    for key, g in grads.items():
        flat = params[key].ravel()
        gflat = g.ravel()
        idx = rng.choice(flat.size, size=min(n_probes, flat.size), replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            up = loss_at(params)
            flat[i] = orig - eps
            down = loss_at(params)
            flat[i] = orig
            fd = (up - down) / (2 * eps)
            denom = max(abs(fd), abs(gflat[i]), 1e-8)
            worst = max(worst, abs(fd - gflat[i]) / denom)
    return worst


# ---------------------------------------------------------------------------
# Criterion 1: numerical core
# ---------------------------------------------------------------------------

class TestCriterion1NumericalCore:
    def test_varimax_and_randomized_svd(self):
        start = time.time()
        rng = np.random.default_rng(0)
        max_orth = 0.0
        monotone = True
        for _ in range(100):
            n = int(rng.integers(6, 40))
            k = int(rng.integers(2, min(8, n)))
            A = rng.normal(size=(n, k))
            R, rotated = linalg.varimax(A)
            max_orth = max(max_orth, float(np.max(np.abs(R.T @ R - np.eye(k)))))
            before = linalg.varimax_criterion(A)
            after = linalg.varimax_criterion(rotated)
            monotone = monotone and (after >= before - 1e-12)

        svd_ok = True
        for seed in range(6):
            rng2 = np.random.default_rng(seed)
            X = rng2.normal(size=(200, 500))
            if seed % 2:
                # Planted low-rank structure plus noise.
                X = rng2.normal(size=(200, 12)) @ rng2.normal(size=(12, 500)) \
                    + 0.3 * X
            model = linalg.truncated_svd(X, k=10, seed=seed)
            approx_err = np.linalg.norm(X - (X @ model.basis) @ model.basis.T)
            s = np.linalg.svd(X, compute_uv=False)
            oracle_err = float(np.sqrt(np.sum(s[10:] ** 2)))
            svd_ok = svd_ok and approx_err <= 1.05 * oracle_err

        elapsed = time.time() - start
        ok = (max_orth < 1e-8) and monotone and svd_ok and elapsed < 30
        report(1, "numerical core (varimax + randomized truncated svd)", ok)
        assert max_orth < 1e-8
        assert monotone
        assert svd_ok
        assert elapsed < 30


# ---------------------------------------------------------------------------
# Criterion 2: gradient suite
# ---------------------------------------------------------------------------

class TestCriterion2Gradients:
    def test_all_variants_match_finite_differences(self):
        start = time.time()
        worst_by_variant = {}
        for variant in rank.VARIANTS:
            train, _, _ = make_dataset(num_train=20)
            config = small_config(variant=variant, mix_rate=0.7)
            cvocab = ("1", "2", "1.1") if rank.needs_clusters(variant) else ()
            paths = ("1", "1.1") if cvocab else ()
            wvocab = None
            if variant == "qc-wdprm":
                assignments = {r.query_id: list(paths) for r in train.records}
                wvocab = rank.build_wide_vocab(train.records, assignments,
                                               config.wide_fields)
            enc = make_encoder(config, train, cvocab, wvocab)
            params = rank.init_params(config, enc, np.random.default_rng(9))
            if variant == "qc-wdprm":
                params["wide_w"] = np.random.default_rng(2).normal(
                    0.1, 0.05, size=params["wide_w"].shape)
            worst_by_variant[variant] = fd_worst_error(
                config, enc, params, pairs_with_paths(train, paths))
        elapsed = time.time() - start
        worst = max(worst_by_variant.values())
        ok = worst < 1e-4 and elapsed < 60
        report(2, f"gradient suite (worst fd error {worst:.2e})", ok)
        assert worst < 1e-4, worst_by_variant
        assert elapsed < 60


# ---------------------------------------------------------------------------
# Criterion 3: loss algebra
# ---------------------------------------------------------------------------

class TestCriterion3LossAlgebra:
    def test_identities_and_mix_zero_bit_equality(self):
        # Joint loss: mean(r + lam*c) == mean(r) + lam*mean(c) to 1e-12.
        rng = np.random.default_rng(1)
        linear_ok = True
        for _ in range(1000):
            n = int(rng.integers(1, 50))
            r = rng.uniform(0, 5, size=n)
            c = rng.uniform(0, 5, size=n)
            lam = float(rng.uniform(0, 3))
            expected = float(np.mean(r)) + lam * float(np.mean(c))
            linear_ok = linear_ok and abs(rank.loss_joint(r, c, lam) - expected) < 1e-12

        # Cross-entropy H(p_c, phat) == H(p_c) + KL(p_c || phat) to 1e-10.
        decomp_ok = True
        for _ in range(200):
            k = int(rng.integers(2, 8))
            p_c = rng.dirichlet(np.ones(k))
            phat = rng.dirichlet(np.ones(k))
            ce = rank.loss_cluster(phat, p_c)
            ent = -np.sum(p_c * np.log(p_c))
            kl = np.sum(p_c * np.log(p_c / phat))
            decomp_ok = decomp_ok and abs(ce - (ent + kl)) < 1e-10

        # mix_rate 0: shared-layer gradients bit-equal to rank-only.
        train, _, _ = make_dataset(num_train=20)
        cfg0 = small_config(variant="qc-mtlrm", mix_rate=0.0)
        enc = make_encoder(cfg0, train, ("1", "2"))
        params = rank.init_params(cfg0, enc, np.random.default_rng(4))
        encoded = enc.encode(pairs_with_paths(train, ("1",)))
        cache = rank.forward_batch(cfg0, params, encoded)
        g0 = rank.backward_batch(cfg0, params, encoded, cache)
        cfg_rank = small_config(variant="dprm")
        cache_r = rank.forward_batch(cfg_rank, params, encoded)
        g_rank = rank.backward_batch(cfg_rank, params, encoded, cache_r)
        shared = [k for k in g0 if not k.startswith("cl_")]
        bit_ok = all(np.array_equal(g0[k], g_rank[k]) for k in shared)
        bit_ok = bit_ok and all(
            not np.any(g0[k]) for k in ("cl_W", "cl_b", "cl_Ws", "cl_bs"))

        ok = linear_ok and decomp_ok and bit_ok
        report(3, "loss algebra (joint identity, entropy+kl, mix 0 bit-equality)", ok)
        assert linear_ok
        assert decomp_ok
        assert bit_ok


# ---------------------------------------------------------------------------
# Criterion 4: clustering recovery
# ---------------------------------------------------------------------------

class TestCriterion4ClusterRecovery:
    def test_planted_partition_and_sibling_independence(self):
        start = time.time()
        cfg = corpus.SynthConfig(
            num_train=5000, num_dev=10, num_test=10,
            num_planted_clusters=4, vocab_size=200,
            noise_rate=0.1, rng_seed=7)
        train, _, _ = corpus.generate_synthetic(cfg)
        tree, assignments, stats, dicts = cluster.fit_from_dataset(
            train, depth=2, branch=4, min_leaf=20, seed=0, top_k_docs=6)

        truth = [corpus.planted_cluster_of(r) for r in train.records]
        keep = [i for i, t in enumerate(truth) if t is not None and assignments[i]]
        ari = adjusted_rand_score([truth[i] for i in keep],
                                  [assignments[i][0] for i in keep])

        # Refitting any first-level child's member submatrix standalone
        # must reproduce its subspace bit for bit.
        X = cluster.vectorize(dicts, tree.vocab, tree.count_transform)
        sibling_ok = True
        checked = 0
        for child in tree.root.children.values():
            if child.subspace is None:
                continue
            members = np.array([i for i, a in enumerate(assignments)
                                if a and a[0] == child.label])
            model, _ = cluster._fit_node_subspace(
                X[members], tree.branch, tree.seed, child.path,
                tree.svd_oversample, tree.svd_power_iters)
            sibling_ok = sibling_ok and \
                np.array_equal(model.basis, child.subspace.basis) and \
                np.array_equal(model.rotation, child.subspace.rotation)
            checked += 1

        elapsed = time.time() - start
        ok = ari >= 0.8 and sibling_ok and checked >= 2 and elapsed < 120
        report(4, f"clustering recovery (level-1 ari {ari:.3f})", ok)
        assert ari >= 0.8
        assert sibling_ok and checked >= 2
        assert elapsed < 120


# ---------------------------------------------------------------------------
# Criterion 5: metric oracles
# ---------------------------------------------------------------------------

class TestCriterion5MetricOracles:
    def test_scalar_and_permutation_oracles(self):
        rng = np.random.default_rng(3)
        scalar_ok = True
        for _ in range(10000):
            n = int(rng.integers(1, 9))
            ranks = rng.uniform(1, 6, size=n)
            weights = rng.uniform(0.1, 5, size=n)
            k = int(rng.integers(1, 7))
            m = sum(1.0 / r for r in ranks) / n
            s = sum(1 for r in ranks if r <= k) / n
            wm = sum(w / r for w, r in zip(weights, ranks)) / sum(weights)
            wa = sum(w * r for w, r in zip(weights, ranks)) / sum(weights)
            scalar_ok = scalar_ok and \
                abs(evaluation.mrr(ranks) - m) < 1e-12 and \
                abs(evaluation.success_at_k(ranks, k) - s) < 1e-12 and \
                abs(evaluation.wmrr(ranks, weights) - wm) < 1e-12 and \
                abs(evaluation.wacp(ranks, weights) - wa) < 1e-12

        # Fractional tie ranks equal the average over all tie-breaking
        # permutations, enumerated exhaustively for N <= 6.
        tie_ok = True
        for _ in range(150):
            n = int(rng.integers(2, 7))
            scores = list(rng.choice([0.1, 0.2, 0.3], size=n))
            clicked = int(rng.integers(n))
            total = 0
            count = 0
            for perm in itertools.permutations(range(n)):
                order = sorted(perm, key=lambda i: (-scores[i], perm.index(i)))
                total += order.index(clicked) + 1
                count += 1
            got = evaluation.rank_of_clicked(scores, clicked)
            tie_ok = tie_ok and abs(got - total / count) < 1e-12

        # Unit weights: wmrr is mrr, exactly.
        unit_ok = True
        for _ in range(100):
            ranks = rng.uniform(1, 6, size=int(rng.integers(1, 50)))
            unit_ok = unit_ok and \
                evaluation.wmrr(ranks, np.ones(len(ranks))) == evaluation.mrr(ranks)

        ok = scalar_ok and tie_ok and unit_ok
        report(5, "metric oracles (mrr, success@k, wmrr, wacp, tie ranks)", ok)
        assert scalar_ok
        assert tie_ok
        assert unit_ok


# ---------------------------------------------------------------------------
# Criteria 6 and 7: trend reproduction and mix_rate sweep shape
# ---------------------------------------------------------------------------

TREND_CORPUS = dict(
    num_train=50000, num_dev=2500, num_test=4000,
    num_planted_clusters=4, vocab_size=4000, noise_rate=0.1,
    tokens_per_doc=12, rng_seed=0)

TREND_MODEL = dict(
    embedding_dim=16, hidden_sizes=(64, 32), learning_rate=0.1,
    dropout_rate=0.25, batch_size=512, max_epochs=8, patience=3)


@pytest.fixture(scope="module")
def trend_workspace():
    """50k-query corpus with four planted clusters and opposing click
    rules, plus a fitted hierarchy, shared by criteria 6 and 7."""
    train, dev, test = corpus.generate_synthetic(corpus.SynthConfig(**TREND_CORPUS))
    tree, _, stats, _ = cluster.fit_from_dataset(
        train, depth=2, branch=4, min_leaf=50, seed=0, top_k_docs=6)
    assignments = rank.compute_assignments([train, dev, test], tree, stats)
    return {"train": train, "dev": dev, "test": test,
            "tree": tree, "stats": stats, "assignments": assignments}


def train_and_rank(ws, variant, seed, mix_rate=1.8, train_ds=None):
    config = rank.ModelConfig(variant=variant, mix_rate=mix_rate,
                              rng_seed=seed, **TREND_MODEL)
    result = rank.train(train_ds or ws["train"], ws["dev"], config,
                        tree=ws["tree"], stats=ws["stats"],
                        assignments=ws["assignments"])
    ranks, _, _ = rank.dataset_ranks(result.model, ws["test"], ws["assignments"])
    return np.asarray(ranks, dtype=np.float64)


class TestCriterion6Trend:
    def test_cluster_aware_models_beat_baseline(self, trend_workspace):
        start = time.time()
        ranks = {v: [] for v in rank.VARIANTS}
        for seed in (0, 1, 2):
            for variant in rank.VARIANTS:
                ranks[variant].append(
                    train_and_rank(trend_workspace, variant, seed))

        mean_mrr = {v: float(np.mean([evaluation.mrr(r) for r in ranks[v]]))
                    for v in rank.VARIANTS}
        rel = {v: 100.0 * (mean_mrr[v] - mean_mrr["dprm"]) / mean_mrr["dprm"]
               for v in rank.VARIANTS}

        # Paired t-test on per-query reciprocal ranks, seeds matched.
        rr_base = 1.0 / np.concatenate(ranks["dprm"])
        rr_mtl = 1.0 / np.concatenate(ranks["qc-mtlrm"])
        ttest = evaluation.paired_t_test(rr_mtl, rr_base)

        # The intermediate variants should not fall clearly below the
        # baseline nor clearly above the multi-task model.
        near = 0.5  # percent
        between_ok = all(
            rel[v] >= -near and rel[v] <= rel["qc-mtlrm"] + near
            for v in ("qc-dprm", "qc-wdprm"))

        elapsed = time.time() - start
        ok = (rel["qc-mtlrm"] >= 1.0 and ttest.significant and between_ok
              and elapsed < 1800)
        report(6, "trend (qc-mtlrm {:+.2f}% vs dprm, p {:.1e}; qc-dprm {:+.2f}%, "
                  "qc-wdprm {:+.2f}%)".format(
                      rel["qc-mtlrm"], ttest.p, rel["qc-dprm"], rel["qc-wdprm"]), ok)
        assert rel["qc-mtlrm"] >= 1.0, (mean_mrr, rel)
        assert ttest.significant, ttest
        assert between_ok, rel
        assert elapsed < 1800


class TestCriterion7SweepShape:
    def test_mix_rate_rise_then_fall(self, trend_workspace):
        # A 20k-query subset keeps the sweep affordable; the hierarchy
        # and dev/test splits are shared with criterion 6.
        ws = trend_workspace
        subset = corpus.Dataset(schema=ws["train"].schema,
                                records=ws["train"].records[:20000],
                                split_tag="train")
        grid = list(DEFAULT_MIX_GRID)
        mrrs = []
        for lam in grid:
            ranks = train_and_rank(ws, "qc-mtlrm", seed=0, mix_rate=lam,
                                   train_ds=subset)
            mrrs.append(evaluation.mrr(ranks))
        base_ranks = train_and_rank(ws, "dprm", seed=0, train_ds=subset)
        base = evaluation.mrr(base_ranks)
        rel = [100.0 * (m - base) / base for m in mrrs]

        # mix_rate 0 must reproduce the baseline exactly: with the
        # cluster loss switched off the shared parameters follow the
        # identical update sequence.
        exact_zero = mrrs[0] == base

        imax = int(np.argmax(rel))
        interior = 0 < imax < len(grid) - 1
        positive = [i for i, r in enumerate(rel) if r > 0]
        contiguous = bool(positive) and \
            positive == list(range(positive[0], positive[-1] + 1))
        rise_then_fall = interior and rel[imax] > rel[0] and rel[imax] > rel[-1]

        ok = exact_zero and rise_then_fall and contiguous and imax in positive
        profile = ", ".join(f"{lam:g}:{r:+.2f}%" for lam, r in zip(grid, rel))
        report(7, f"mix_rate sweep shape ({profile})", ok)
        assert exact_zero
        assert rise_then_fall, rel
        assert contiguous, rel
        assert imax in positive, rel


# ---------------------------------------------------------------------------
# Criterion 8: determinism
# ---------------------------------------------------------------------------

class TestCriterion8Determinism:
    def test_every_stage_rerun_is_byte_identical(self, tmp_path):
        def run_pipeline(root):
            root.mkdir(exist_ok=True)
            prefix = str(root / "data")
            assert main([
                "generate", "--out-prefix", prefix,
                "--num-train", "400", "--num-dev", "60", "--num-test", "60",
                "--clusters", "2", "--vocab-size", "80", "--noise", "0.0",
                "--seed", "5"]) == 0
            tree = str(root / "tree.bin")
            assert main([
                "cluster", "--train", prefix + ".train.jsonl",
                "--out", tree, "--report", str(root / "clusters.json"),
                "--depth", "1", "--branch", "2", "--min-leaf", "5",
                "--seed", "0"]) == 0
            common = ["--embedding-dim", "4", "--hidden-sizes", "16", "8",
                      "--epochs", "2", "--patience", "5", "--seed", "1"]
            for variant in ("dprm", "qc-mtlrm"):
                args = ["train", "--train", prefix + ".train.jsonl",
                        "--dev", prefix + ".dev.jsonl",
                        "--out", str(root / f"{variant}.ckpt"),
                        "--log", str(root / f"{variant}.json"),
                        "--variant", variant] + common
                if variant != "dprm":
                    args += ["--tree", tree]
                assert main(args) == 0
            assert main([
                "eval", "--checkpoint", str(root / "dprm.ckpt"),
                "--checkpoint", str(root / "qc-mtlrm.ckpt"),
                "--test", prefix + ".test.jsonl", "--tree", tree,
                "--stats-from", prefix + ".train.jsonl",
                "--out", str(root / "eval.json")]) == 0
            assert main([
                "sweep", "--param", "mix_rate",
                "--train", prefix + ".train.jsonl",
                "--dev", prefix + ".dev.jsonl",
                "--test", prefix + ".test.jsonl",
                "--tree", tree, "--grid", "0.0", "0.9",
                "--out", str(root / "sweep.csv")] + common) == 0
            return sorted(f for f in root.iterdir())

        root = tmp_path / "run"
        first = {f.name: f.read_bytes() for f in run_pipeline(root)}
        second = {f.name: f.read_bytes() for f in run_pipeline(root)}
        same = first == second
        report(8, f"determinism ({len(first)} artifacts byte-identical)", same)
        assert set(first) == set(second)
        assert same, [n for n in first if first[n] != second[n]]
