"""Negative sampling, the three losses, and the single-optimizer training loop.

The differentiable objective is ``L_R + L_A + L_D`` where the adversarial
cross-entropy reaches the shared user encoder only through gradient-reversal
nodes of scale ``lam``.  Encoder parameters therefore see
``dL_R - lam * dL_A + dL_D`` while the projections and discriminator see
``+dL_A (+ dL_D)``.  The *reported* total is ``L_R - lam * L_A + L_D``.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, ContractError, DataError, DivergenceError
from .model import ADVERSARY_PARAMS, Catalog, ModelConfig, dual_branch_forward, init_params

log = logging.getLogger(__name__)

MODES = ("base", "AL", "FairRank", "FairRank-no-KL", "FairRank-no-invariant", "two-tower")

# mode -> (adversarial branches, use KL, needs random-news branch, two-tower encoder)
_MODE_TERMS = {
    "base": ((), False, False, False),
    "AL": (("c",), False, False, False),
    "FairRank": (("c", "r"), True, True, False),
    "FairRank-no-KL": (("c", "r"), False, True, False),
    "FairRank-no-invariant": (("c",), True, True, False),
    "two-tower": ((), False, False, True),
}


def mode_terms(mode):
    try:
        return _MODE_TERMS[mode]
    except KeyError:
        raise ConfigError(f"unknown mode {mode!r}; expected one of {MODES}") from None


@dataclass
class TrainingConfig:
    lam: float = 0.5
    learning_rate: float = 1e-4
    batch_size: int = 32
    K: int = 4
    epochs: int = 3
    seed: int = 0
    mode: str = "FairRank"
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    # step-size multiplier for projection heads and discriminator (two-timescale minimax)
    adversary_lr_scale: float = 1.0

    def validate(self):
        mode_terms(self.mode)
        if self.lam < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")
        if self.learning_rate <= 0 or self.batch_size <= 0 or self.K <= 0 or self.epochs < 0:
            raise ConfigError("learning_rate, batch_size and K must be positive, epochs >= 0")


@dataclass
class TrainingSample:
    user_index: int
    history: np.ndarray    # (N,) shifted news indices
    positive: int          # shifted news index
    negatives: np.ndarray  # (K,)
    random_news: int
    attribute_label: int


@dataclass
class LossBreakdown:
    L_R: float
    L_A: float
    L_D: float
    L_total: float


@dataclass
class SampleStats:
    samples: int = 0
    skipped_no_negatives: int = 0


# ------------------------------------------------------------------ samples

def build_training_samples(dataset, K=4, seed=0, history_len=20, split="train", stats=None):
    """One sample per click in each ``split`` impression.

    Negatives are drawn uniformly without replacement from the impression's
    non-clicked items (with replacement when fewer than K exist); the random
    news is a fresh uniform draw from the whole catalog.
    """
    rng = np.random.default_rng(seed)
    hist = dataset.history_matrix(history_len)
    stats = stats if stats is not None else SampleStats()
    out = []
    for u, imp in dataset.impressions(split):
        idx = np.array([i for i, _ in imp.items], dtype=np.int64) + 1
        lab = np.array([l for _, l in imp.items], dtype=bool)
        neg_pool = idx[~lab]
        for pos in idx[lab]:
            if neg_pool.size == 0:
                stats.skipped_no_negatives += 1
                continue
            negs = rng.choice(neg_pool, size=K, replace=neg_pool.size < K)
            rand = int(rng.integers(dataset.num_news)) + 1
            out.append(TrainingSample(u, hist[u], int(pos), negs, rand, dataset.users[u].attribute))
    stats.samples += len(out)
    return out


@dataclass
class Batch:
    hist: np.ndarray    # (B, N)
    cands: np.ndarray   # (B, 1+K), positive first
    rand: np.ndarray    # (B,)
    labels: np.ndarray  # (B,)

    @classmethod
    def from_samples(cls, samples):
        return cls(
            np.stack([s.history for s in samples]),
            np.stack([np.concatenate([[s.positive], s.negatives]) for s in samples]),
            np.array([s.random_news for s in samples], dtype=np.int64),
            np.array([s.attribute_label for s in samples], dtype=np.int64),
        )


# ------------------------------------------------------------------- losses

def info_nce(scores):
    """Batch-mean ``-log softmax(scores)[:, 0]``; column 0 is the positive."""
    scores = ad.constant(scores)
    return ad.mean(ad.sub(ad.logsumexp(scores, axis=-1), ad.select(scores, 0, axis=-1)))


def info_nce_loss(pos_score, neg_scores):
    """Scalar InfoNCE for one positive and K negatives."""
    row = np.concatenate([[pos_score], np.asarray(neg_scores, dtype=np.float64)])
    if not np.all(np.isfinite(row)):
        raise ContractError("info_nce_loss: scores must be finite")
    return float(info_nce(row[None, :]).value)


def _weighted_mean(per_row, weights):
    w = np.asarray(weights, dtype=np.float64)
    total = w.sum()
    if total == 0:
        return ad.Node(0.0)
    return ad.sum(ad.mul(per_row, w / total))


def _check_labels(labels, num_classes):
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ContractError(f"attribute label out of range [0, {num_classes})")
    return labels


def adversarial_loss(z_hat, z_tilde, labels, weights=None):
    """Discriminator cross-entropy; the mean of both branches when ``z_tilde`` is given."""
    z_hat = ad.constant(z_hat)
    labels = _check_labels(labels, z_hat.shape[-1])
    weights = np.ones(len(labels)) if weights is None else weights
    ce = ad.cross_entropy(z_hat, labels)
    if z_tilde is not None:
        ce = ad.scale(ad.add(ce, ad.cross_entropy(z_tilde, labels)), 0.5)
    return _weighted_mean(ce, weights)


def kl_loss(z_hat, z_tilde, weights=None):
    """Batch-mean KL(z_hat || z_tilde) with clamping at 1e-12."""
    z_hat = ad.constant(z_hat)
    weights = np.ones(z_hat.shape[0]) if weights is None else weights
    return _weighted_mean(ad.kl_divergence(z_hat, z_tilde), weights)


def unified_loss(L_R, L_A, L_D, lam, mode):
    """Differentiable ``L_R + L_A + L_D`` and the reported total ``L_R - lam L_A + L_D``.

    The caller must have built ``L_A`` on reversal-path distributions; the
    returned node is what ``backward`` should be called on.
    """
    adv, use_kl, _, _ = mode_terms(mode)
    if adv and L_A is None:
        raise ConfigError(f"mode {mode} needs an adversarial loss")
    if use_kl and L_D is None:
        raise ConfigError(f"mode {mode} needs a KL loss")
    if not adv and L_A is not None:
        raise ConfigError(f"mode {mode} takes no adversarial loss")
    if not use_kl and L_D is not None:
        raise ConfigError(f"mode {mode} takes no KL loss")
    total = L_R
    la = ld = 0.0
    if L_A is not None:
        total = ad.add(total, L_A)
        la = float(L_A.value)
    if L_D is not None:
        total = ad.add(total, L_D)
        ld = float(L_D.value)
    lr = float(L_R.value)
    return total, LossBreakdown(lr, la, ld, lr - lam * la + ld)


def batch_loss(batch, catalog, params, model_config, mode, lam, reverse=True, parts=None):
    """Forward one batch and assemble the objective for ``mode``.

    ``parts`` restricts the differentiable sum to a subset of {"R", "A", "D"}
    (used for the decomposition checks); the breakdown always reports all.
    """
    adv, use_kl, needs_rand, two_tower = mode_terms(mode)
    out = dual_branch_forward(batch.hist, batch.cands, batch.rand if needs_rand else None,
                              catalog, params, model_config, lam=lam,
                              branches=bool(adv or use_kl), reverse=reverse, two_tower=two_tower)
    L_R = info_nce(out.scores)
    L_A = L_D = None
    if adv:
        w = ~out.cold
        z_t = out.z_tilde_adv if "r" in adv else None
        L_A = adversarial_loss(out.z_hat_adv, z_t, batch.labels, w)
    if use_kl:
        L_D = kl_loss(out.z_hat, out.z_tilde, ~out.cold)
    total, breakdown = unified_loss(L_R, L_A, L_D, lam, mode)
    if parts is not None:
        terms = {"R": L_R, "A": L_A, "D": L_D}
        chosen = [terms[p] for p in parts if terms[p] is not None]
        total = chosen[0]
        for t in chosen[1:]:
            total = ad.add(total, t)
    return total, breakdown


def loss_gradients(batch, catalog, params, model_config, mode, lam, reverse=True, parts=None):
    """Run forward + backward on a fresh tape; returns (grads dict, breakdown)."""
    params.zero_grad()
    with ad.Tape() as tape:
        total, breakdown = batch_loss(batch, catalog, params, model_config, mode, lam, reverse, parts)
    tape.backward(total)
    return {k: g.copy() for k, g in params.grads().items()}, breakdown


# ---------------------------------------------------------------------- fit

@dataclass
class EpochRecord:
    epoch: int
    L_R: float
    L_A: float
    L_D: float
    L_total: float
    val_AUC: float | None

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class FitResult:
    params: object
    model_config: ModelConfig
    log: list = field(default_factory=list)
    best_epoch: int = 0
    stats: SampleStats = field(default_factory=SampleStats)


def model_config_for(dataset, **overrides):
    return ModelConfig(vocab_size=dataset.vocab_size, num_categories=dataset.num_categories,
                       num_attributes=dataset.num_attribute_classes, **overrides)


def catalog_for(dataset, model_config):
    return Catalog(*dataset.catalog_arrays(model_config.max_title_len))


def _mean_breakdown(items):
    arr = np.array([[b.L_R, b.L_A, b.L_D, b.L_total] for b in items])
    return arr.mean(axis=0) if len(arr) else np.zeros(4)


def _adam_update(params, grads, state, config):
    arrays = params.arrays()
    if config.adversary_lr_scale == 1.0:
        ad.adam_step(arrays, grads, state, config.learning_rate, config.betas, config.eps)
        return
    adv = {k: arrays[k] for k in ADVERSARY_PARAMS}
    rest = {k: v for k, v in arrays.items() if k not in adv}
    step = state.step
    ad.adam_step(rest, grads, state, config.learning_rate, config.betas, config.eps)
    state.step = step
    ad.adam_step(adv, grads, state, config.learning_rate * config.adversary_lr_scale,
                 config.betas, config.eps)


def fit(dataset, config, model_config=None, on_epoch=None, validate=True):
    """Train with Adam on shuffled mini-batches; keep the best-validation-AUC epoch.

    Epoch 0 in the log is the untrained model evaluated on the epoch-1
    samples.  ``on_epoch`` receives each :class:`EpochRecord` as it is made.
    """
    from .evaluation import impression_auc  # local import: evaluation imports training

    config.validate()
    model_config = model_config or model_config_for(dataset)
    catalog = catalog_for(dataset, model_config)
    params = init_params(model_config, np.random.SeedSequence([config.seed, 7]))
    state = ad.AdamState()
    stats = SampleStats()
    has_val = validate and bool(dataset.impressions("validation"))
    two_tower = config.mode == "two-tower"

    def val_auc():
        if not has_val:
            return None
        return impression_auc(params, model_config, dataset, "validation", two_tower=two_tower)

    result = FitResult(params, model_config, stats=stats)
    best_auc, best_arrays = -math.inf, None
    for epoch in range(config.epochs + 1):
        samples = build_training_samples(dataset, config.K, [config.seed, 11, max(epoch, 1)],
                                         model_config.history_len, stats=stats if epoch else None)
        if not samples:
            raise DataError("no training samples: training split has no clicked impressions")
        order = np.random.default_rng([config.seed, 13, epoch]).permutation(len(samples))
        breakdowns = []
        for b_idx, start in enumerate(range(0, len(samples), config.batch_size)):
            batch = Batch.from_samples([samples[i] for i in order[start:start + config.batch_size]])
            if epoch == 0:
                _, br = batch_loss(batch, catalog, params, model_config, config.mode, config.lam)
                breakdowns.append(br)
                continue
            grads, br = loss_gradients(batch, catalog, params, model_config, config.mode, config.lam)
            if not math.isfinite(br.L_total) or not all(np.isfinite(g).all() for g in grads.values()):
                raise DivergenceError(b_idx, epoch)
            _adam_update(params, grads, state, config)
            breakdowns.append(br)
        m = _mean_breakdown(breakdowns)
        auc = val_auc()
        rec = EpochRecord(epoch, *map(float, m), auc)
        result.log.append(rec)
        log.info("epoch %d  L_R=%.4f L_A=%.4f L_D=%.4f total=%.4f val_AUC=%s",
                 epoch, *m, "n/a" if auc is None else f"{auc:.4f}")
        if on_epoch is not None:
            on_epoch(rec)
        if epoch == 0 and config.epochs > 0:
            continue
        score = auc if auc is not None else epoch
        if score > best_auc:
            best_auc, best_arrays, result.best_epoch = score, {k: v.copy() for k, v in params.arrays().items()}, epoch
    if best_arrays is not None:
        for k, node in params.named().items():
            node.value[...] = best_arrays[k]
    return result
