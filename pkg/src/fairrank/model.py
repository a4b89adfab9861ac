"""Candidate-aware news ranker with a dual-branch attribute discriminator.

Shapes used throughout (batched, news indices already shifted so that 0 is
the reserved null news used for history padding):

    hist   (B, N)   clicked-news indices, left padded with 0
    cands  (B, M)   candidate indices
    h      (n, d_h) news hidden vectors
    u      (B, M, d_h) candidate-aware user embeddings
"""
from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, ContractError, DataError, DimensionError

NULL_NEWS = 0
PAD_TOKEN = 0
UNK_TOKEN = 1

ENCODERS = ("attention",)
REJECTED_ENCODERS = {
    "cnn3d": "3-D convolutional interest matching",
    "transformer": "long-document transformer over concatenated news",
}
SCORERS = ("inner", "ffn")


@dataclass(frozen=True)
class NewsItem:
    news_id: str
    category_id: int
    title_tokens: tuple


@dataclass
class UserHistory:
    clicked: tuple  # shifted news indices, length N, 0 = padding

    @property
    def mask(self):
        return np.asarray(self.clicked) != NULL_NEWS


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    num_categories: int
    num_attributes: int = 2
    d_tok: int = 32
    d_cat: int = 16
    d_h: int = 64
    d_d: int = 32
    d_att: int = 32
    d_ffn: int = 32
    history_len: int = 20
    max_title_len: int = 16
    encoder: str = "attention"
    scorer: str = "inner"

    def __post_init__(self):
        if self.encoder in REJECTED_ENCODERS:
            raise ConfigError(
                f"encoder {self.encoder!r} ({REJECTED_ENCODERS[self.encoder]}) is not implemented; "
                f"use one of {ENCODERS}"
            )
        if self.encoder not in ENCODERS:
            raise ConfigError(f"unknown encoder {self.encoder!r}; expected one of {ENCODERS}")
        if self.scorer not in SCORERS:
            raise ConfigError(f"unknown scorer {self.scorer!r}; expected one of {SCORERS}")
        if self.num_attributes < 2:
            raise ConfigError("need at least 2 attribute classes")


@dataclass
class ModelParams:
    token_embedding: ad.Node
    category_embedding: ad.Node
    news_W: ad.Node
    news_b: ad.Node
    att_P_hist: ad.Node
    att_P_cand: ad.Node
    att_b: ad.Node
    att_w: ad.Node
    query_vector: ad.Node
    proj_c_W: ad.Node
    proj_c_b: ad.Node
    proj_r_W: ad.Node
    proj_r_b: ad.Node
    discriminator_W: ad.Node
    discriminator_b: ad.Node
    scorer_W1: ad.Node | None = None
    scorer_b1: ad.Node | None = None
    scorer_w2: ad.Node | None = None

    def named(self):
        return {f.name: getattr(self, f.name) for f in fields(self) if getattr(self, f.name) is not None}

    def arrays(self):
        return {k: v.value for k, v in self.named().items()}

    def grads(self):
        return {k: v.grad for k, v in self.named().items()}

    def zero_grad(self):
        for node in self.named().values():
            node.zero_grad()

    @classmethod
    def from_arrays(cls, arrays):
        return cls(**{k: ad.parameter(np.array(v, dtype=np.float64), name=k) for k, v in arrays.items()})

    def copy(self):
        return ModelParams.from_arrays({k: v.copy() for k, v in self.arrays().items()})


ENCODER_PARAMS = ("token_embedding", "category_embedding", "news_W", "news_b",
                  "att_P_hist", "att_P_cand", "att_b", "att_w", "query_vector")
ADVERSARY_PARAMS = ("proj_c_W", "proj_c_b", "proj_r_W", "proj_r_b",
                    "discriminator_W", "discriminator_b")


def init_params(config, seed):
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialisation from ``seed``."""
    rng = np.random.default_rng(seed)
    c = config

    def uni(shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    news_in = c.d_tok + c.d_cat
    arrays = {
        "token_embedding": uni((c.vocab_size, c.d_tok), c.d_tok),
        "category_embedding": uni((c.num_categories, c.d_cat), c.d_cat),
        "news_W": uni((news_in, c.d_h), news_in),
        "news_b": uni((c.d_h,), news_in),
        "att_P_hist": uni((c.d_h, c.d_att), 2 * c.d_h),
        "att_P_cand": uni((c.d_h, c.d_att), 2 * c.d_h),
        "att_b": uni((c.d_att,), 2 * c.d_h),
        "att_w": uni((c.d_att, 1), c.d_att),
        "query_vector": uni((c.d_att, 1), c.d_att),
        "proj_c_W": uni((c.d_h, c.d_d), c.d_h),
        "proj_c_b": uni((c.d_d,), c.d_h),
        "proj_r_W": uni((c.d_h, c.d_d), c.d_h),
        "proj_r_b": uni((c.d_d,), c.d_h),
        "discriminator_W": uni((c.num_attributes, c.d_d), c.d_d),
        "discriminator_b": uni((c.num_attributes,), c.d_d),
    }
    arrays["token_embedding"][PAD_TOKEN] = 0.0
    if c.scorer == "ffn":
        arrays["scorer_W1"] = uni((2 * c.d_h, c.d_ffn), 2 * c.d_h)
        arrays["scorer_b1"] = uni((c.d_ffn,), 2 * c.d_h)
        arrays["scorer_w2"] = uni((c.d_ffn, 1), c.d_ffn)
    return ModelParams.from_arrays(arrays)


# ------------------------------------------------------------------ encoders

def encode_news_batch(tokens, categories, params):
    """h = dense(concat(mean of non-pad title embeddings, category embedding)).

    tokens: (n, L) int, categories: (n,) int.  Returns a (n, d_h) node.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    categories = np.asarray(categories, dtype=np.int64)
    live = (tokens != PAD_TOKEN).astype(np.float64)
    counts = np.maximum(live.sum(axis=1, keepdims=True), 1.0)
    title = ad.bag(params.token_embedding, tokens, live / counts)
    cat = ad.take(params.category_embedding, categories)
    return ad.add(ad.matmul(ad.concat([title, cat], axis=-1), params.news_W), params.news_b)


def encode_news(item, params, max_title_len=None):
    """Hidden vector for a single :class:`NewsItem`."""
    vocab = params.token_embedding.shape[0]
    ncat = params.category_embedding.shape[0]
    toks = list(item.title_tokens)
    if max_title_len is not None:
        toks = toks[:max_title_len]
    if any(t < 0 or t >= vocab for t in toks) or not 0 <= item.category_id < ncat:
        raise DataError(f"news {item.news_id}: token or category index out of range")
    row = np.array([toks or [PAD_TOKEN]], dtype=np.int64)
    h = encode_news_batch(row, [item.category_id], params)
    return ad.reshape(h, (h.shape[-1],))


def attention_user(hist_h, hist_mask, cand_h, params):
    """Candidate-aware additive attention over clicked news.

    logit_i = w . tanh(P_h h_i + P_c c + b); padded positions get weight 0.
    Returns (u, alpha, cold) with u (B, M, d_h), alpha (B, M, N) and ``cold``
    flagging users whose history is entirely padding (u is then zero).
    """
    hist_mask = np.asarray(hist_mask, dtype=bool)
    B, N, d = hist_h.shape
    M = cand_h.shape[1]
    if cand_h.shape[0] != B or cand_h.shape[2] != d:
        raise DimensionError("candidate_aware_user", hist_h.shape, cand_h.shape)
    a_hist = ad.reshape(ad.matmul(hist_h, params.att_P_hist), (B, 1, N, -1))
    a_cand = ad.reshape(ad.matmul(cand_h, params.att_P_cand), (B, M, 1, -1))
    pre = ad.tanh(ad.add(ad.add(a_hist, a_cand), params.att_b))
    logits = ad.reshape(ad.matmul(pre, params.att_w), (B, M, N))
    alpha = ad.softmax(logits, axis=-1, mask=hist_mask[:, None, :])
    u = ad.matmul(alpha, hist_h)
    cold = ~hist_mask.any(axis=1)
    return u, alpha, cold


def two_tower_user_batch(hist_h, hist_mask, params):
    """Attention pooling with a learned query; returns u (B, d_h), alpha, cold."""
    hist_mask = np.asarray(hist_mask, dtype=bool)
    B, N, _ = hist_h.shape
    pre = ad.tanh(ad.add(ad.matmul(hist_h, params.att_P_hist), params.att_b))
    logits = ad.reshape(ad.matmul(pre, params.query_vector), (B, N))
    alpha = ad.softmax(logits, axis=-1, mask=hist_mask)
    u = ad.reshape(ad.matmul(ad.reshape(alpha, (B, 1, N)), hist_h), (B, -1))
    return u, alpha, ~hist_mask.any(axis=1)


def _as_history(history_h, mask):
    h = ad.constant(history_h)
    if h.value.ndim != 2:
        raise DimensionError("candidate_aware_user", h.shape, ())
    mask = np.ones(h.shape[0], dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    return ad.reshape(h, (1,) + h.shape), mask[None, :]


def candidate_aware_user(history_h, cand, params, mask=None):
    """Single-user form: history (N, d_h), candidate (d_h,) -> (u, alpha, cold)."""
    hist, m = _as_history(history_h, mask)
    c = ad.constant(cand)
    u, alpha, cold = attention_user(hist, m, ad.reshape(c, (1, 1, c.shape[-1])), params)
    return ad.reshape(u, (u.shape[-1],)), alpha.value[0, 0], bool(cold[0])


def two_tower_user(history_h, params, mask=None):
    hist, m = _as_history(history_h, mask)
    u, alpha, cold = two_tower_user_batch(hist, m, params)
    return ad.reshape(u, (u.shape[-1],)), alpha.value[0], bool(cold[0])


def score(u, h_c, params, kind="inner"):
    """Relevance f(u, h_c) over the last axis; inner product or a 1-hidden-layer MLP."""
    u, h_c = ad.constant(u), ad.constant(h_c)
    if u.shape != h_c.shape:
        raise DimensionError("score", u.shape, h_c.shape)
    if kind == "inner":
        return ad.dot(u, h_c)
    if kind != "ffn":
        raise ConfigError(f"unknown scorer {kind!r}")
    if params.scorer_W1 is None:
        raise ContractError("ffn scorer selected but params carry no scorer weights")
    x = ad.concat([u, h_c], axis=-1)
    lead = x.shape[:-1]
    if not lead:
        x = ad.reshape(x, (1, -1))
    hidden = ad.relu(ad.add(ad.matmul(x, params.scorer_W1), params.scorer_b1))
    out = ad.matmul(hidden, params.scorer_w2)
    return ad.reshape(out, lead)


@dataclass
class Distribution:
    probs: np.ndarray

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.ndim != 1 or (self.probs < 0).any() or abs(self.probs.sum() - 1.0) > 1e-9:
            raise ContractError(f"not a probability vector: {self.probs}")


def discriminate(d, params):
    """softmax(W d + b) with the shared discriminator; works on (d_d,) or (B, d_d)."""
    d = ad.constant(d)
    if d.shape[-1] != params.discriminator_W.shape[1]:
        raise DimensionError("discriminate", d.shape, params.discriminator_W.shape)
    single = d.value.ndim == 1
    x = ad.reshape(d, (1, -1)) if single else d
    z = ad.softmax(ad.add(ad.matmul(x, ad.transpose(params.discriminator_W)), params.discriminator_b))
    return ad.reshape(z, (z.shape[-1],)) if single else z


def project(u, W, b):
    """Branch head mapping a user embedding to the discriminator input."""
    return ad.tanh(ad.add(ad.matmul(u, W), b))


# -------------------------------------------------------------- full forward

@dataclass
class Catalog:
    """Padded title/category arrays with row 0 as the null news."""

    tokens: np.ndarray
    categories: np.ndarray

    def encode(self, params, indices=None):
        if indices is None:
            return encode_news_batch(self.tokens, self.categories, params)
        return encode_news_batch(self.tokens[indices], self.categories[indices], params)


@dataclass
class ForwardOutput:
    scores: ad.Node              # (B, M)
    u_c: ad.Node | None          # (B, d_h), user embedding for candidate column 0
    u_r: ad.Node | None          # (B, d_h)
    z_hat: ad.Node | None        # (B, |A|), identity path
    z_tilde: ad.Node | None
    z_hat_adv: ad.Node | None    # same values, reached through gradient reversal
    z_tilde_adv: ad.Node | None
    cold: np.ndarray             # (B,) bool


def _encode_batch_news(catalog, params, *index_arrays):
    flat = np.concatenate([np.asarray(a, dtype=np.int64).ravel() for a in index_arrays])
    uniq, inverse = np.unique(flat, return_inverse=True)
    h = catalog.encode(params, uniq)
    out, start = [], 0
    for a in index_arrays:
        a = np.asarray(a)
        sel = inverse[start:start + a.size].reshape(a.shape)
        start += a.size
        out.append(ad.take(h, sel))
    return out


def branch_heads(u_c, u_r, params, lam, reverse=True):
    """Projection + shared discriminator for each branch.

    Returns (z_hat, z_tilde, z_hat_adv, z_tilde_adv).  The ``_adv`` outputs pass
    through gradient reversal (scale ``lam``) when ``reverse`` is true, the plain
    ones never do.  ``u_r`` may be None.
    """
    def heads(u, W, b, rev):
        x = ad.grad_reverse(u, lam) if rev else u
        return discriminate(project(x, W, b), params)

    z_hat = heads(u_c, params.proj_c_W, params.proj_c_b, False)
    z_hat_adv = heads(u_c, params.proj_c_W, params.proj_c_b, True) if reverse else z_hat
    z_tilde = z_tilde_adv = None
    if u_r is not None:
        z_tilde = heads(u_r, params.proj_r_W, params.proj_r_b, False)
        z_tilde_adv = heads(u_r, params.proj_r_W, params.proj_r_b, True) if reverse else z_tilde
    return z_hat, z_tilde, z_hat_adv, z_tilde_adv


def dual_branch_forward(hist, cands, rand, catalog, params, config, lam=0.5,
                        branches=True, reverse=True, two_tower=False):
    """Scores for every candidate plus the debiasing branches.

    Column 0 of ``cands`` is the displayed candidate D_c whose user embedding
    feeds the u_c branch; ``rand`` (B,) is the random news D_r, encoded with the
    same attention parameters.  ``branches=False`` skips the discriminator.
    """
    hist = np.asarray(hist, dtype=np.int64)
    cands = np.asarray(cands, dtype=np.int64)
    B, M = cands.shape
    mask = hist != NULL_NEWS
    if two_tower:
        hist_h, cand_h = _encode_batch_news(catalog, params, hist, cands)
        u, _, cold = two_tower_user_batch(hist_h, mask, params)
        u_all = ad.add(ad.reshape(u, (B, 1, -1)), np.zeros((1, M, 1)))
        scores = score(u_all, cand_h, params, config.scorer)
        return ForwardOutput(scores, u, None, None, None, None, None, cold)

    use_rand = branches and rand is not None
    if use_rand:
        rand = np.asarray(rand, dtype=np.int64).reshape(B, 1)
        hist_h, cand_h, rand_h = _encode_batch_news(catalog, params, hist, cands, rand)
        all_h = ad.concat([cand_h, rand_h], axis=1)
    else:
        hist_h, cand_h = _encode_batch_news(catalog, params, hist, cands)
        all_h = cand_h
    u_all, _, cold = attention_user(hist_h, mask, all_h, params)
    u_cands = _slice_cols(u_all, 0, M) if use_rand else u_all
    scores = score(u_cands, cand_h, params, config.scorer)
    if not branches:
        return ForwardOutput(scores, None, None, None, None, None, None, cold)
    u_c = ad.select(u_all, 0, axis=1)
    u_r = ad.select(u_all, M, axis=1) if use_rand else None
    z_hat, z_tilde, z_hat_adv, z_tilde_adv = branch_heads(u_c, u_r, params, lam, reverse)
    return ForwardOutput(scores, u_c, u_r, z_hat, z_tilde, z_hat_adv, z_tilde_adv, cold)


def _slice_cols(x, start, stop):
    idx = np.arange(start, stop)
    return ad.take(x, idx, axis=1)
