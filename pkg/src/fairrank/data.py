"""Datasets: synthetic biased clickstreams, TSV ingestion, temporal splits.

On-disk layout (a dataset directory):

    news.tsv       news_id <TAB> category <TAB> space-separated title tokens
    behaviors.tsv  impression_id <TAB> user_id <TAB> attribute <TAB> history ids
                   <TAB> news_id-label ...
    meta.json      generator config and seed (synthetic data only)

Lines of behaviors.tsv are in temporal order; that order is the impression
index used by :func:`split_dataset`.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, ParseError, ReferentialIntegrityError
from .model import NULL_NEWS, PAD_TOKEN, UNK_TOKEN, NewsItem

SPLITS = ("train", "validation", "test")
PAD, UNK = "<pad>", "<unk>"


@dataclass
class Impression:
    impression_id: str
    items: list  # [(news index, label)], news index into Dataset.news
    index: int   # global temporal position
    split: str = ""

    @property
    def labels(self):
        return [lab for _, lab in self.items]


@dataclass
class UserRecord:
    user_id: str
    attribute: int
    history: list  # news indices, oldest first
    impressions: list = field(default_factory=list)


@dataclass
class Dataset:
    news: list
    users: list
    vocab: list        # token strings; 0 = <pad>, 1 = <unk>
    categories: list   # category names
    num_attribute_classes: int
    meta: dict = field(default_factory=dict, compare=False, repr=False)
    _cache: dict = field(default_factory=dict, compare=False, repr=False)

    @property
    def vocab_size(self):
        return len(self.vocab)

    @property
    def num_categories(self):
        return len(self.categories)

    @property
    def num_news(self):
        return len(self.news)

    def impressions(self, split=None):
        """(user index, Impression) pairs in temporal order."""
        out = [(u, imp) for u, rec in enumerate(self.users) for imp in rec.impressions
               if split is None or imp.split == split]
        out.sort(key=lambda t: t[1].index)
        return out

    def catalog_arrays(self, max_title_len):
        """Title (num_news+1, L) and category (num_news+1,) arrays; row 0 is the null news."""
        key = ("catalog", max_title_len)
        cached = self._cache.get(key)
        if cached is not None:
            return cached
        tokens = np.full((self.num_news + 1, max_title_len), PAD_TOKEN, dtype=np.int64)
        cats = np.zeros(self.num_news + 1, dtype=np.int64)
        for i, item in enumerate(self.news, start=1):
            t = item.title_tokens[:max_title_len]
            tokens[i, :len(t)] = t
            cats[i] = item.category_id
        self._cache[key] = (tokens, cats)
        return tokens, cats

    def history_matrix(self, history_len):
        """(num_users, N) shifted news indices, most recent N clicks, left padded with 0."""
        out = np.full((len(self.users), history_len), NULL_NEWS, dtype=np.int64)
        for u, rec in enumerate(self.users):
            recent = rec.history[-history_len:] if history_len else []
            if recent:
                out[u, history_len - len(recent):] = np.asarray(recent) + 1
        return out

    def attributes(self):
        return np.array([u.attribute for u in self.users], dtype=np.int64)


# ---------------------------------------------------------------- building

class _Builder:
    """Assigns ids in first-seen order; shared by the loader and the generator."""

    def __init__(self, vocab=None):
        self.fixed_vocab = vocab is not None
        self.vocab = list(vocab) if vocab is not None else [PAD, UNK]
        self.token_ids = {t: i for i, t in enumerate(self.vocab)}
        self.categories = []
        self.category_ids = {}
        self.news = []
        self.news_ids = {}
        self.users = []
        self.user_ids = {}
        self.num_impressions = 0

    def token(self, tok):
        idx = self.token_ids.get(tok)
        if idx is None:
            if self.fixed_vocab:
                return UNK_TOKEN
            idx = self.token_ids[tok] = len(self.vocab)
            self.vocab.append(tok)
        return idx

    def add_news(self, news_id, category, tokens, where):
        if news_id in self.news_ids:
            raise ParseError(*where, 1, f"duplicate news id {news_id!r}")
        cat = self.category_ids.get(category)
        if cat is None:
            cat = self.category_ids[category] = len(self.categories)
            self.categories.append(category)
        self.news_ids[news_id] = len(self.news)
        self.news.append(NewsItem(news_id, cat, tuple(self.token(t) for t in tokens)))

    def resolve(self, news_id, where):
        idx = self.news_ids.get(news_id)
        if idx is None:
            path, line = where
            raise ReferentialIntegrityError(f"{path}:{line}: unknown news id {news_id!r}")
        return idx

    def add_impression(self, imp_id, user_id, attribute, history, items, where):
        u = self.user_ids.get(user_id)
        if u is None:
            u = self.user_ids[user_id] = len(self.users)
            hist = [self.resolve(n, where) for n in history]
            self.users.append(UserRecord(user_id, attribute, hist))
        rec = self.users[u]
        if rec.attribute != attribute:
            raise ParseError(*where, 3, f"user {user_id!r} changes attribute {rec.attribute} -> {attribute}")
        resolved = [(self.resolve(n, where), lab) for n, lab in items]
        rec.impressions.append(Impression(imp_id, resolved, self.num_impressions))
        self.num_impressions += 1

    def build(self, num_attribute_classes=None, meta=None):
        if not self.users:
            raise DataError("no users")
        max_attr = max(u.attribute for u in self.users)
        k = max(2, max_attr + 1) if num_attribute_classes is None else num_attribute_classes
        return Dataset(self.news, self.users, self.vocab, self.categories, k, meta or {})


def _parse_news_line(line, where):
    parts = line.rstrip("\n").split("\t")
    if len(parts) != 3:
        raise ParseError(*where, min(len(parts) + 1, 4), f"expected 3 tab-separated fields, got {len(parts)}")
    news_id, category, title = parts
    if not news_id:
        raise ParseError(*where, 1, "empty news id")
    if not category:
        raise ParseError(*where, 2, "empty category")
    return news_id, category, title.split()


def _parse_behavior_line(line, where):
    parts = line.rstrip("\n").split("\t")
    if len(parts) != 5:
        raise ParseError(*where, min(len(parts) + 1, 6), f"expected 5 tab-separated fields, got {len(parts)}")
    imp_id, user_id, attr, history, items = parts
    try:
        attribute = int(attr)
    except ValueError:
        raise ParseError(*where, 3, f"attribute {attr!r} is not an integer") from None
    if attribute < 0:
        raise ParseError(*where, 3, f"negative attribute {attribute}")
    parsed = []
    for tok in items.split():
        nid, sep, lab = tok.rpartition("-")
        if not sep or lab not in ("0", "1") or not nid:
            raise ParseError(*where, 5, f"bad impression item {tok!r}, expected news_id-label")
        parsed.append((nid, int(lab)))
    if not parsed:
        raise ParseError(*where, 5, "impression has no items")
    return imp_id, user_id, attribute, history.split(), parsed


def load_dataset(news_path, behaviors_path, vocab=None):
    """Parse and validate a news/behaviors TSV pair.

    With ``vocab`` given (e.g. from a checkpoint) token ids follow it and
    unseen tokens map to ``<unk>``.
    """
    news_path, behaviors_path = Path(news_path), Path(behaviors_path)
    b = _Builder(vocab)
    with open(news_path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            where = (news_path, lineno)
            b.add_news(*_parse_news_line(line, where), where)
    with open(behaviors_path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            where = (behaviors_path, lineno)
            b.add_impression(*_parse_behavior_line(line, where), where)
    meta = {}
    meta_path = news_path.parent / "meta.json"
    if meta_path.exists():
        meta = json.loads(meta_path.read_text())
    return b.build(meta.get("num_attribute_classes"), meta)


def load_dataset_dir(directory, vocab=None):
    d = Path(directory)
    for name in ("news.tsv", "behaviors.tsv"):
        if not (d / name).exists():
            raise DataError(f"{d / name} not found")
    return load_dataset(d / "news.tsv", d / "behaviors.tsv", vocab=vocab)


def news_lines(dataset):
    for item in dataset.news:
        title = " ".join(dataset.vocab[t] for t in item.title_tokens)
        yield f"{item.news_id}\t{dataset.categories[item.category_id]}\t{title}\n"


def behavior_lines(dataset):
    nid = [n.news_id for n in dataset.news]
    for u, imp in dataset.impressions():
        rec = dataset.users[u]
        hist = " ".join(nid[i] for i in rec.history)
        items = " ".join(f"{nid[i]}-{lab}" for i, lab in imp.items)
        yield f"{imp.impression_id}\t{rec.user_id}\t{rec.attribute}\t{hist}\t{items}\n"


def save_dataset(dataset, directory, meta=None):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    with open(d / "news.tsv", "w", encoding="utf-8", newline="\n") as fh:
        fh.writelines(news_lines(dataset))
    with open(d / "behaviors.tsv", "w", encoding="utf-8", newline="\n") as fh:
        fh.writelines(behavior_lines(dataset))
    if meta is not None:
        (d / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return d


# --------------------------------------------------------------- splitting

def split_dataset(dataset, train_ratio=0.81, val_ratio=0.09, seed=0, temporal=True):
    """Tag every impression train/validation/test.

    ``temporal=True`` cuts the global impression order (earliest impressions
    train, latest test); otherwise impressions are shuffled with ``seed`` first.
    """
    if not (0 < train_ratio < 1 and 0 < val_ratio < 1 and train_ratio + val_ratio < 1):
        raise ConfigError(f"bad split ratios train={train_ratio} val={val_ratio}")
    order = dataset.impressions()
    n = len(order)
    n_train = int(round(n * train_ratio))
    n_val = int(round(n * val_ratio))
    if n_train == 0 or n_val == 0 or n - n_train - n_val <= 0:
        raise ConfigError(f"split of {n} impressions leaves an empty partition "
                          f"({n_train}/{n_val}/{n - n_train - n_val})")
    if not temporal:
        perm = np.random.default_rng(seed).permutation(n)
        order = [order[i] for i in perm]
    tags = {}
    for pos, (_, imp) in enumerate(order):
        tags[imp.index] = "train" if pos < n_train else "validation" if pos < n_train + n_val else "test"
    users = [replace(rec, impressions=[replace(imp, split=tags[imp.index]) for imp in rec.impressions])
             for rec in dataset.users]
    return replace(dataset, users=users, meta=dict(dataset.meta))


# --------------------------------------------------------------- synthesis

@dataclass
class SynthConfig:
    num_users: int = 2000
    num_news: int = 5000
    num_categories: int = 20
    beta: float = 0.8
    history_len_range: tuple = (10, 30)
    impressions_per_user: int = 10
    items_per_impression: int = 20
    clicks_target: int = 2
    seed: int = 0
    num_attribute_classes: int = 2
    tokens_per_category: int = 30
    shared_tokens: int = 200
    title_len_range: tuple = (4, 12)
    topical_token_prob: float = 0.7
    # exponents on category preference: how sharply clicks and displayed
    # candidates concentrate on a user's preferred categories
    click_sharpness: float = 8.0
    display_sharpness: float = 3.0

    def validate(self):
        if not 0.0 <= self.beta <= 1.0:
            raise ConfigError(f"beta must lie in [0, 1], got {self.beta}")
        for name in ("num_users", "num_news", "num_categories", "impressions_per_user",
                     "items_per_impression", "clicks_target", "tokens_per_category"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.num_attribute_classes < 2:
            raise ConfigError("num_attribute_classes must be >= 2")
        if self.num_categories < self.num_attribute_classes:
            raise ConfigError("need at least one category per attribute class")
        lo, hi = self.history_len_range
        if not 0 <= lo <= hi:
            raise ConfigError(f"bad history_len_range {self.history_len_range}")
        tlo, thi = self.title_len_range
        if not 1 <= tlo <= thi:
            raise ConfigError(f"bad title_len_range {self.title_len_range}")
        if self.clicks_target >= self.items_per_impression:
            raise ConfigError(f"infeasible: clicks_target={self.clicks_target} needs more than "
                              f"items_per_impression={self.items_per_impression} items")
        if hi + self.items_per_impression > self.num_news:
            raise ConfigError("infeasible: num_news too small for history plus one impression")

    def to_dict(self):
        d = asdict(self)
        d["history_len_range"] = list(self.history_len_range)
        d["title_len_range"] = list(self.title_len_range)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for k in ("history_len_range", "title_len_range"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


def attribute_prior(num_categories, num_classes):
    """Row a puts uniform mass on the a-th disjoint block of categories."""
    prior = np.zeros((num_classes, num_categories))
    for a, block in enumerate(np.array_split(np.arange(num_categories), num_classes)):
        prior[a, block] = 1.0 / len(block)
    return prior


def category_topics(num_categories, num_classes):
    """Topic of each category: its position inside its attribute block.

    Categories at the same position in different blocks share a topic, so
    title vocabulary carries no information about the attribute-linked block.
    """
    topics = np.zeros(num_categories, dtype=np.int64)
    for block in np.array_split(np.arange(num_categories), num_classes):
        topics[block] = np.arange(len(block))
    return topics


def _news_records(cfg):
    rng = np.random.default_rng([cfg.seed, 0])
    cats = rng.integers(cfg.num_categories, size=cfg.num_news)
    topics = category_topics(cfg.num_categories, cfg.num_attribute_classes)
    records = []
    for i, c in enumerate(cats):
        length = rng.integers(cfg.title_len_range[0], cfg.title_len_range[1] + 1)
        topical = rng.random(length) < cfg.topical_token_prob
        words = [f"t{topics[c]}w{rng.integers(cfg.tokens_per_category)}" if t else f"g{rng.integers(cfg.shared_tokens)}"
                 for t in topical]
        records.append((f"N{i + 1}", f"cat{c:02d}", words))
    return records, cats


def _user_records(cfg, u, cats, by_cat_count, prior):
    rng = np.random.default_rng([cfg.seed, 1, u])
    attribute = int(rng.integers(cfg.num_attribute_classes))
    pref = (1.0 - cfg.beta) * rng.dirichlet(np.ones(cfg.num_categories)) + cfg.beta * prior[attribute]

    click_w = pref ** cfg.click_sharpness
    news_click_w = (click_w / by_cat_count)[cats]
    display_w = pref ** cfg.display_sharpness
    news_display_w = (display_w / by_cat_count)[cats]

    lo, hi = cfg.history_len_range
    hist_len = int(rng.integers(lo, hi + 1))
    history = []
    if hist_len:
        p = news_click_w / news_click_w.sum()
        history = list(rng.choice(cfg.num_news, size=hist_len, replace=False, p=p))

    avail = news_display_w.copy()
    avail[history] = 0.0
    impressions = []
    for t in range(cfg.impressions_per_user):
        p = avail / avail.sum()
        shown = rng.choice(cfg.num_news, size=cfg.items_per_impression, replace=False, p=p)
        w = click_w[cats[shown]]
        clicked = rng.choice(len(shown), size=cfg.clicks_target, replace=False, p=w / w.sum())
        labels = np.zeros(len(shown), dtype=int)
        labels[clicked] = 1
        impressions.append((t, [(int(n), int(l)) for n, l in zip(shown, labels)]))
    return attribute, [int(n) for n in history], impressions


def generate_synthetic(config):
    """Biased clickstream where the attribute shifts category preference by ``beta``.

    Title tokens are drawn from the news's topic block (see
    :func:`category_topics`) or a shared block, so text is attribute-neutral and
    the bias lives in category preference alone.

    Each user's preference over categories is
    ``(1 - beta) * Dirichlet(1) + beta * prior[attribute]``.  History clicks and
    impression clicks are drawn proportional to ``pref ** click_sharpness``;
    impression candidates proportional to ``pref ** display_sharpness``.
    Every user has an independent RNG substream keyed by ``(seed, user index)``.
    """
    cfg = config
    cfg.validate()
    news, cats = _news_records(cfg)
    by_cat_count = np.maximum(np.bincount(cats, minlength=cfg.num_categories), 1)
    prior = attribute_prior(cfg.num_categories, cfg.num_attribute_classes)

    rows = []
    for u in range(cfg.num_users):
        attribute, history, imps = _user_records(cfg, u, cats, by_cat_count, prior)
        hist_ids = [news[i][0] for i in history]
        for t, items in imps:
            rows.append((t, u, attribute, hist_ids, [(news[i][0], lab) for i, lab in items]))
    rows.sort(key=lambda r: (r[0], r[1]))

    b = _Builder()
    for nid, cat, words in news:
        b.add_news(nid, cat, words, ("<synthetic news>", 0))
    for pos, (t, u, attribute, hist_ids, items) in enumerate(rows):
        b.add_impression(f"I{pos + 1}", f"U{u + 1}", attribute, hist_ids, items, ("<synthetic>", pos))
    meta = {"synth_config": cfg.to_dict(), "seed": cfg.seed,
            "num_attribute_classes": cfg.num_attribute_classes}
    return b.build(cfg.num_attribute_classes, meta)


def save_synthetic(config, directory):
    ds = generate_synthetic(config)
    save_dataset(ds, directory, meta=ds.meta)
    return ds
