import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from sklearn.linear_model import LogisticRegression
from sklearn.metrics import balanced_accuracy_score, ndcg_score, roc_auc_score

from fairrank.data import SynthConfig, attribute_prior, generate_synthetic, split_dataset
from fairrank.errors import ContractError, ProbeError
from fairrank.evaluation import (MetricsReport, ProbeConfig, Scorer, auc, balanced_accuracy,
                                 evaluate, fairness_probe, fit_softmax_probe, ndcg_at_k,
                                 probe_users, reports_to_csv, score_impressions, summarize_rankings)
from fairrank.experiment import params_digest
from fairrank.model import dual_branch_forward, init_params
from fairrank.training import catalog_for, model_config_for


def brute_auc(y, s):
    pos, neg = s[y == 1], s[y == 0]
    wins = sum((p > n) + 0.5 * (p == n) for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


# -------------------------------------------------------------------- AUC

def test_auc_examples():
    assert auc([1, 0], [0.9, 0.1]) == 1.0
    assert auc([1, 0], [0.3, 0.3]) == 0.5
    assert auc([1, 0, 1, 0], [0.8, 0.7, 0.6, 0.5]) == 0.75


def test_auc_matches_brute_force_on_1000_impressions(rng):
    for _ in range(1000):
        n = rng.integers(2, 30)
        y = rng.integers(0, 2, size=n)
        y[rng.integers(n)] = 1 - y[0] if n > 1 else 1
        if y.min() == y.max():
            y[0] = 1 - y[0]
        s = rng.integers(0, 6, size=n) / 2.0  # plenty of ties
        assert abs(auc(y, s) - brute_auc(y, s)) <= 1e-12


def test_auc_agrees_with_sklearn(rng):
    y = rng.integers(0, 2, size=200)
    s = rng.normal(size=200)
    assert auc(y, s) == pytest.approx(roc_auc_score(y, s), abs=1e-12)


@given(st.lists(st.integers(0, 40), min_size=4, max_size=30), st.integers(0, 2**32 - 1))
def test_auc_is_invariant_to_monotone_transforms(raw, seed):
    s = np.array(raw) / 8.0
    y = np.random.default_rng(seed).integers(0, 2, size=s.size)
    y[0], y[1] = 0, 1
    base = auc(y, s)
    assert abs(auc(y, np.exp(s)) - base) <= 1e-12
    assert abs(auc(y, 3 * s + 1) - base) <= 1e-12


def test_auc_single_class_rejected_and_excluded():
    with pytest.raises(ContractError):
        auc([1, 1], [0.1, 0.2])
    summary = summarize_rankings([[1, 1], [1, 0]], [[0.1, 0.2], [0.9, 0.1]])
    assert summary.auc == 1.0 and summary.excluded_auc == 1


# ------------------------------------------------------------------- nDCG

def test_ndcg_examples():
    assert ndcg_at_k([1, 0, 0], [0.9, 0.5, 0.1]) == 1.0
    assert ndcg_at_k([0, 1, 0], [0.9, 0.5, 0.1], k=10) == pytest.approx(1 / math.log2(3), abs=1e-15)
    assert ndcg_at_k([1, 1, 1], [0.1, 0.9, 0.5]) == 1.0


def test_ndcg_no_positive_excluded():
    with pytest.raises(ContractError):
        ndcg_at_k([0, 0], [1.0, 2.0])
    summary = summarize_rankings([[0, 0], [0, 1]], [[0.3, 0.2], [0.9, 0.1]])
    assert summary.excluded_ndcg == 1
    assert summary.ndcg_at_10 == pytest.approx(1 / math.log2(3))


def test_ndcg_matches_sklearn_without_ties(rng):
    for _ in range(200):
        n = rng.integers(2, 25)
        y = rng.integers(0, 2, size=n)
        y[0] = 1
        s = rng.permutation(n).astype(float)
        assert ndcg_at_k(y, s, 10) == pytest.approx(ndcg_score([y], [s], k=10), abs=1e-12)


@given(st.lists(st.tuples(st.booleans(), st.integers(0, 5)), min_size=1, max_size=25), st.integers(1, 12))
def test_ndcg_bounded_and_one_iff_ideal_prefixes(items, k):
    y = np.array([int(a) for a, _ in items])
    if not y.any():
        y[0] = 1
    s = np.array([float(b) for _, b in items])
    v = ndcg_at_k(y, s, k)
    assert -1e-12 <= v <= 1 + 1e-12
    top = y[np.lexsort((np.arange(s.size), -s))][:k]
    ideal_top = np.sort(y)[::-1][:k]
    assert (abs(v - 1) < 1e-12) == bool(np.array_equal(top, ideal_top))


# ------------------------------------------------------------------- probe

def test_softmax_probe_agrees_with_sklearn(rng):
    X = rng.normal(size=(400, 6))
    y = (X[:, 0] + 0.5 * X[:, 1] + rng.normal(scale=0.8, size=400) > 0).astype(int)
    predict = fit_softmax_probe(X, y, 2, l2=1e-4)
    Z = (X - X.mean(0)) / X.std(0)
    ref = LogisticRegression(C=1 / (400 * 1e-4), tol=1e-10, max_iter=10_000).fit(Z, y)
    assert np.mean(predict(X) == ref.predict(Z)) >= 0.99


def test_balanced_accuracy_matches_sklearn(rng):
    y = rng.integers(0, 3, size=300)
    p = np.where(rng.random(300) < 0.6, y, rng.integers(0, 3, size=300))
    assert balanced_accuracy(y, p) == pytest.approx(balanced_accuracy_score(y, p), abs=1e-12)


@pytest.fixture(scope="module")
def probe_data():
    ds0 = split_dataset(generate_synthetic(SynthConfig(beta=0.0, num_news=1000, impressions_per_user=3, seed=5)))
    ds1 = split_dataset(generate_synthetic(SynthConfig(beta=1.0, num_news=1000, impressions_per_user=3, seed=5)))
    return ds0, ds1


def category_features(ds):
    """One-hot category rows (row 0 is the null news) as the top-k representation."""
    cats = np.array([n.category_id for n in ds.news])
    return np.vstack([np.zeros(ds.num_categories), np.eye(ds.num_categories)[cats]])


def oracle_ranker(ds):
    prior = attribute_prior(ds.num_categories, ds.num_attribute_classes)
    names = np.array([int(c[3:]) for c in ds.categories])
    cats = np.concatenate([[0], names[[n.category_id for n in ds.news]]])
    attrs = ds.attributes()
    return lambda users, pools: prior[attrs[users][:, None], cats[pools]]


def random_ranker(seed):
    return lambda users, pools: np.random.default_rng([seed, int(users[0])]).random(pools.shape)


def test_random_ranker_on_unbiased_data_is_chance(probe_data):
    ds0, _ = probe_data
    acc, per_seed = fairness_probe(random_ranker(0), category_features(ds0), ds0)
    assert abs(acc[10] - 0.5) <= 0.05 and len(per_seed[10]) == 5


def test_oracle_ranker_on_fully_biased_data_hits_ceiling(probe_data):
    _, ds1 = probe_data
    acc, _ = fairness_probe(oracle_ranker(ds1), category_features(ds1), ds1)
    assert acc[10] > 0.95


def test_shuffled_labels_are_chance(probe_data):
    _, ds1 = probe_data
    users = probe_users(ds1)
    shuffled = np.random.default_rng(0).permutation(ds1.attributes()[users])
    acc, _ = fairness_probe(oracle_ranker(ds1), category_features(ds1), ds1, users=users, attributes=shuffled)
    assert 0.45 <= acc[10] <= 0.55


def test_k_above_pool_size_rejected(probe_data):
    ds0, _ = probe_data
    with pytest.raises(ContractError):
        fairness_probe(random_ranker(0), category_features(ds0), ds0, ProbeConfig(pool_size=50, k_values=(60,)))


def test_too_few_users_per_class(probe_data):
    ds0, _ = probe_data
    users = probe_users(ds0)[:20]
    with pytest.raises(ProbeError):
        fairness_probe(random_ranker(0), category_features(ds0), ds0, users=users)


def test_thread_count_does_not_change_results(probe_data, monkeypatch):
    _, ds1 = probe_data
    cfg = ProbeConfig(probe_seeds=(0, 1))
    monkeypatch.setenv("FAIRRANK_THREADS", "1")
    one = fairness_probe(random_ranker(3), category_features(ds1), ds1, cfg)
    monkeypatch.setenv("FAIRRANK_THREADS", "4")
    four = fairness_probe(random_ranker(3), category_features(ds1), ds1, cfg)
    assert one == four


# ------------------------------------------------------------------ pipeline

class LabelScorer:
    """Scores every candidate by its click label: a perfect ranker."""

    def __init__(self, dataset, split):
        self.truth = {(u, i + 1): lab for u, imp in dataset.impressions(split) for i, lab in imp.items}

    def scores(self, users, cands):
        return np.array([[self.truth[(u, c)] for c in row] for u, row in zip(users, cands)], dtype=float)


def test_perfect_ranker_scores_one(tiny_config):
    from dataclasses import replace
    ds = split_dataset(generate_synthetic(replace(tiny_config, clicks_target=1)))
    labels, scores = score_impressions(LabelScorer(ds, "test"), ds, "test")
    summary = summarize_rankings(labels, scores)
    assert summary.auc == 1.0 and summary.ndcg_at_10 == 1.0


@pytest.fixture(scope="module")
def small_dataset():
    return split_dataset(generate_synthetic(SynthConfig(num_users=300, num_news=500, impressions_per_user=3, seed=7)))


def test_scorer_matches_training_forward_and_brute_auc(small_dataset, rng):
    mc = model_config_for(small_dataset, d_h=16, d_tok=8, d_cat=8)
    p = init_params(mc, 0)
    scorer = Scorer(p, mc, small_dataset)
    labels, scores = score_impressions(scorer, small_dataset, "test")
    imps = small_dataset.impressions("test")
    hist = small_dataset.history_matrix(mc.history_len)
    cat = catalog_for(small_dataset, mc)
    for j in rng.choice(len(imps), size=50, replace=False):
        u, imp = imps[j]
        cands = np.array([[i + 1 for i, _ in imp.items]])
        ref = dual_branch_forward(hist[[u]], cands, None, cat, p, mc, branches=False).scores.value[0]
        np.testing.assert_allclose(scores[j], ref, rtol=1e-12, atol=1e-14)
        assert auc(labels[j], scores[j]) == pytest.approx(brute_auc(np.array(labels[j]), ref), abs=1e-12)


def test_evaluate_is_deterministic_and_pure(small_dataset):
    mc = model_config_for(small_dataset, d_h=16, d_tok=8, d_cat=8)
    p = init_params(mc, 1)
    before = params_digest(p)
    cfg = ProbeConfig(probe_seeds=(0, 1))
    a = evaluate(p, mc, small_dataset, cfg, mode="base")
    b = evaluate(p, mc, small_dataset, cfg, mode="base")
    assert a.to_json() == b.to_json()
    assert params_digest(p) == before
    assert 0 <= a.acc_at_10 <= 1 and 0 <= a.acc_at_20 <= 1


def test_metrics_report_serialisation():
    r = MetricsReport(0.7, 0.4, 0.6, 0.55, 100, 400, "FairRank", 0.5, 3, {"note": 1})
    d = json.loads(r.to_json())
    assert {"auc", "ndcg_at_10", "acc_at_10", "acc_at_20", "lambda"} <= set(d)
    assert MetricsReport.from_dict(d) == r
    lines = reports_to_csv([r]).splitlines()
    assert lines[0].startswith("mode,lambda,seed,auc") and lines[1].startswith("FairRank,0.5,3,0.7")
