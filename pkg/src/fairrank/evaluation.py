"""Ranking accuracy (AUC, nDCG@k) and the attribute-leakage fairness probe."""
from __future__ import annotations

import csv
import io
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import rankdata

from . import autodiff as ad
from .errors import ContractError, ProbeError
from .model import attention_user, score, two_tower_user_batch

METRIC_FIELDS = ("auc", "ndcg_at_10", "acc_at_10", "acc_at_20")


# ------------------------------------------------------------------ metrics

def _check_binary(labels, scores):
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=np.float64)
    if labels.shape != scores.shape or labels.ndim != 1:
        raise ContractError(f"labels {labels.shape} and scores {scores.shape} must be equal-length vectors")
    return labels.astype(bool), scores


def auc(labels, scores):
    """P(random positive outscores random negative), ties count 1/2."""
    y, s = _check_binary(labels, scores)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ContractError("auc needs at least one positive and one negative label")
    ranks = rankdata(s)
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def ranking_order(scores):
    """Indices by descending score, ties broken by ascending index."""
    s = np.asarray(scores, dtype=np.float64)
    return np.lexsort((np.arange(s.size), -s))


def ndcg_at_k(labels, scores, k=10):
    """Binary-gain nDCG@k."""
    y, s = _check_binary(labels, scores)
    if k <= 0:
        raise ContractError("k must be positive")
    if not y.any():
        raise ContractError("ndcg needs at least one positive label")
    discounts = 1.0 / np.log2(np.arange(2, k + 2))
    gains = y[ranking_order(s)][:k].astype(float)
    ideal = np.sort(y)[::-1][:k].astype(float)
    return float((gains * discounts[:gains.size]).sum() / (ideal * discounts[:ideal.size]).sum())


@dataclass
class RankingSummary:
    auc: float
    ndcg_at_10: float
    num_impressions: int
    excluded_auc: int = 0
    excluded_ndcg: int = 0


def summarize_rankings(label_lists, score_lists, k=10):
    aucs, ndcgs, bad_auc, bad_ndcg = [], [], 0, 0
    for y, s in zip(label_lists, score_lists):
        y = np.asarray(y)
        if 0 < y.sum() < y.size:
            aucs.append(auc(y, s))
        else:
            bad_auc += 1
        if y.sum() > 0:
            ndcgs.append(ndcg_at_k(y, s, k))
        else:
            bad_ndcg += 1
    return RankingSummary(
        float(np.mean(aucs)) if aucs else float("nan"),
        float(np.mean(ndcgs)) if ndcgs else float("nan"),
        len(label_lists), bad_auc, bad_ndcg,
    )


# ------------------------------------------------------------------ scoring

class Scorer:
    """Read-only scoring of (user, candidate list) pairs with fixed parameters."""

    def __init__(self, params, model_config, dataset, two_tower=False, chunk=64):
        from .training import catalog_for

        self.params = params
        self.config = model_config
        self.two_tower = two_tower
        self.chunk = chunk
        self.H = catalog_for(dataset, model_config).encode(params).value  # (num_news+1, d_h)
        self.hist = dataset.history_matrix(model_config.history_len)

    def scores(self, users, cands):
        """users (B,), cands (B, M) shifted news indices -> (B, M) scores."""
        users = np.asarray(users, dtype=np.int64)
        cands = np.asarray(cands, dtype=np.int64)
        out = np.empty(cands.shape, dtype=np.float64)
        for start in range(0, len(users), self.chunk):
            sl = slice(start, start + self.chunk)
            out[sl] = self._score_chunk(self.hist[users[sl]], cands[sl])
        return out

    def _score_chunk(self, hist, cands):
        hist_h = ad.Node(self.H[hist])
        cand_h = ad.Node(self.H[cands])
        mask = hist != 0
        if self.two_tower:
            u, _, _ = two_tower_user_batch(hist_h, mask, self.params)
            u_all = np.broadcast_to(u.value[:, None, :], cand_h.shape)
            return score(ad.Node(u_all), cand_h, self.params, self.config.scorer).value
        u, _, _ = attention_user(hist_h, mask, cand_h, self.params)
        return score(u, cand_h, self.params, self.config.scorer).value


def score_impressions(scorer, dataset, split):
    """Scores for every impression of ``split``: (labels list, scores list)."""
    imps = dataset.impressions(split)
    labels, scores = [], []
    by_len = {}
    for pos, (u, imp) in enumerate(imps):
        by_len.setdefault(len(imp.items), []).append(pos)
    result = [None] * len(imps)
    for m, positions in sorted(by_len.items()):
        users = np.array([imps[p][0] for p in positions])
        cands = np.array([[i + 1 for i, _ in imps[p][1].items] for p in positions])
        s = scorer.scores(users, cands)
        for row, p in enumerate(positions):
            result[p] = s[row]
    for (u, imp), s in zip(imps, result):
        labels.append(np.array(imp.labels))
        scores.append(s)
    return labels, scores


def impression_auc(params, model_config, dataset, split, two_tower=False):
    scorer = Scorer(params, model_config, dataset, two_tower)
    return summarize_rankings(*score_impressions(scorer, dataset, split)).auc


# -------------------------------------------------------------------- probe

@dataclass
class ProbeConfig:
    pool_size: int = 100
    k_values: tuple = (10, 20)
    probe_train_fraction: float = 0.7
    probe_seeds: tuple = (0, 1, 2, 3, 4)
    l2: float = 1e-4
    tol: float = 1e-7
    max_iter: int = 20000

    def validate(self):
        if any(k > self.pool_size or k <= 0 for k in self.k_values):
            raise ContractError(f"every k must be in [1, pool_size={self.pool_size}], got {self.k_values}")
        if not 0 < self.probe_train_fraction < 1:
            raise ContractError("probe_train_fraction must lie in (0, 1)")
        if not self.probe_seeds:
            raise ContractError("need at least one probe seed")


def fit_softmax_probe(X, y, num_classes, l2=1e-4, tol=1e-7, max_iter=20000):
    """Single softmax layer fitted by full-batch accelerated gradient descent.

    Features are standardised on the training rows; the step is 1/L for the
    smoothness bound of L2-regularised softmax cross-entropy, with Nesterov
    momentum and gradient-based restarts.  Stops once the loss changes by
    less than ``tol``.  Returns a predict function.
    """
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    sd[sd < 1e-12] = 1.0
    Z = np.hstack([(X - mu) / sd, np.ones((X.shape[0], 1))])
    n, d = Z.shape
    Y = np.eye(num_classes)[y]
    rows = np.arange(n)
    step = 1.0 / (0.5 * np.linalg.eigvalsh(Z.T @ Z / n)[-1] + l2)

    def loss_grad(W):
        logits = Z @ W
        logits -= logits.max(axis=1, keepdims=True)
        P = np.exp(logits)
        P /= P.sum(axis=1, keepdims=True)
        loss = -np.log(np.maximum(P[rows, y], 1e-300)).mean() + 0.5 * l2 * (W[:-1] ** 2).sum()
        G = Z.T @ (P - Y) / n
        G[:-1] += l2 * W[:-1]
        return loss, G

    W = np.zeros((d, num_classes))
    V = W.copy()
    t = 1.0
    prev = np.inf
    for _ in range(max_iter):
        loss, G = loss_grad(V)
        W_next = V - step * G
        if abs(prev - loss) < tol:
            W = W_next
            break
        prev = loss
        if np.sum(G * (W_next - W)) > 0:  # momentum pointing uphill: restart
            t = 1.0
        t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        V = W_next + ((t - 1.0) / t_next) * (W_next - W)
        W, t = W_next, t_next

    def predict(Xq):
        Zq = np.hstack([(Xq - mu) / sd, np.ones((Xq.shape[0], 1))])
        return np.argmax(Zq @ W, axis=1)

    return predict


def balanced_accuracy(y_true, y_pred):
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    recalls = [np.mean(y_pred[y_true == c] == c) for c in np.unique(y_true)]
    return float(np.mean(recalls))


def stratified_split(labels, fraction, rng):
    train, test = [], []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(idx.size)]
        cut = int(round(idx.size * fraction))
        train.extend(idx[:cut])
        test.extend(idx[cut:])
    return np.sort(train), np.sort(test)


def probe_users(dataset, split="test"):
    return np.array(sorted({u for u, _ in dataset.impressions(split)}), dtype=np.int64)


def _threads():
    try:
        return max(1, int(os.environ.get("FAIRRANK_THREADS", "1")))
    except ValueError:
        return 1


def top_k_features(rank_fn, H, users, num_news, probe_seed, pool_size, k_values):
    """Mean hidden vector of each user's top-k news within a random pool.

    ``rank_fn(users, pools)`` returns (B, pool_size) scores.  Pools come from
    per-user substreams keyed by (probe_seed, user index).
    """
    pools = np.stack([np.random.default_rng([probe_seed, 17, int(u)]).choice(num_news, pool_size, replace=False)
                      for u in users]) + 1
    chunks = [slice(i, i + 256) for i in range(0, len(users), 256)]

    def run(sl):
        return rank_fn(users[sl], pools[sl])

    workers = _threads()
    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            parts = list(ex.map(run, chunks))
    else:
        parts = [run(sl) for sl in chunks]
    s = np.concatenate(parts) if parts else np.zeros((0, pool_size))
    order = np.stack([ranking_order(row) for row in s]) if len(s) else np.zeros((0, pool_size), dtype=int)
    ranked = np.take_along_axis(pools, order, axis=1)
    return {k: H[ranked[:, :k]].mean(axis=1) for k in k_values}


def probe_accuracy(features, attributes, num_classes, probe_seed, cfg):
    """Balanced held-out accuracy of a softmax probe predicting the attribute."""
    rng = np.random.default_rng([probe_seed, 23])
    train, test = stratified_split(attributes, cfg.probe_train_fraction, rng)
    for part, name in ((train, "train"), (test, "test")):
        counts = np.bincount(attributes[part], minlength=num_classes)
        present = np.unique(attributes)
        if (counts[present] < 10).any():
            raise ProbeError(f"probe {name} split has fewer than 10 users in some class: {counts.tolist()}")
    predict = fit_softmax_probe(features[train], attributes[train], num_classes, cfg.l2, cfg.tol, cfg.max_iter)
    return balanced_accuracy(attributes[test], predict(features[test]))


def fairness_probe(rank_fn, H, dataset, probe_config=None, users=None, attributes=None):
    """Acc@k for each k: probe-seed mean of balanced attribute-prediction accuracy.

    ``rank_fn(users, pools)`` scores candidate pools (shifted news indices);
    ``H`` holds the news hidden vectors used as the top-k representation.
    ``attributes`` overrides the dataset labels (e.g. a shuffled control).
    """
    cfg = probe_config or ProbeConfig()
    cfg.validate()
    users = probe_users(dataset) if users is None else np.asarray(users)
    attrs = dataset.attributes()[users] if attributes is None else np.asarray(attributes)
    per_k = {k: [] for k in cfg.k_values}
    for ps in cfg.probe_seeds:
        feats = top_k_features(rank_fn, H, users, dataset.num_news, ps, cfg.pool_size, cfg.k_values)
        for k in cfg.k_values:
            per_k[k].append(probe_accuracy(feats[k], attrs, dataset.num_attribute_classes, ps, cfg))
    return {k: float(np.mean(v)) for k, v in per_k.items()}, per_k


# ------------------------------------------------------------------- report

@dataclass
class MetricsReport:
    auc: float
    ndcg_at_10: float
    acc_at_10: float
    acc_at_20: float
    num_users: int
    num_impressions: int
    mode: str
    lam: float
    seed: int
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["lam"] = d.pop("lambda")
        return cls(**d)

    CSV_FIELDS = ("mode", "lambda", "seed", "auc", "ndcg_at_10", "acc_at_10", "acc_at_20",
                  "num_users", "num_impressions")

    def csv_row(self):
        d = self.to_dict()
        return {k: d[k] for k in self.CSV_FIELDS}


def reports_to_csv(reports, extra_columns=None):
    buf = io.StringIO()
    fields = list(MetricsReport.CSV_FIELDS) + list(extra_columns or ())
    w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    w.writeheader()
    for r in reports:
        w.writerow(r if isinstance(r, dict) else r.csv_row())
    return buf.getvalue()


def evaluate(params, model_config, dataset, probe_config=None, mode="FairRank", lam=0.5, seed=0,
             two_tower=None):
    """All four metrics on the test split."""
    two_tower = (mode == "two-tower") if two_tower is None else two_tower
    scorer = Scorer(params, model_config, dataset, two_tower)
    labels, scores = score_impressions(scorer, dataset, "test")
    if not labels:
        raise ContractError("evaluate: test split is empty")
    summary = summarize_rankings(labels, scores, k=10)
    cfg = probe_config or ProbeConfig()
    acc, per_seed = fairness_probe(scorer.scores, scorer.H, dataset, cfg)
    users = probe_users(dataset)
    return MetricsReport(
        summary.auc, summary.ndcg_at_10,
        acc.get(10, float("nan")), acc.get(20, float("nan")),
        int(users.size), summary.num_impressions, mode, float(lam), int(seed),
        extra={"excluded_auc": summary.excluded_auc, "excluded_ndcg": summary.excluded_ndcg,
               "acc_per_seed": {str(k): v for k, v in per_seed.items()}},
    )
