import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fairrank import autodiff as ad
from fairrank import training
from fairrank.errors import ConfigError, ContractError, DivergenceError
from fairrank.model import ADVERSARY_PARAMS, ENCODER_PARAMS, init_params
from fairrank.training import (Batch, SampleStats, TrainingConfig, adversarial_loss,
                               build_training_samples, catalog_for, fit, info_nce_loss, kl_loss,
                               loss_gradients, model_config_for, unified_loss)
from conftest import FIVE_NEWS
from gradcheck import numeric_grad, rel_err


def small_model(dataset, **kw):
    return model_config_for(dataset, d_tok=8, d_cat=4, d_h=8, d_d=4, d_att=6, d_ffn=5, history_len=6, **kw)


@pytest.fixture(scope="module")
def setup(tiny_dataset):
    mc = small_model(tiny_dataset)
    samples = build_training_samples(tiny_dataset, 4, 0, mc.history_len)
    batch = Batch.from_samples(samples[:24])
    return tiny_dataset, mc, catalog_for(tiny_dataset, mc), batch


# -------------------------------------------------------------------- samples

def test_one_click_four_negatives_uses_all(make_dataset):
    ds = make_dataset(FIVE_NEWS, ["I1\tU1\t0\tN1\tN1-1 N2-0 N3-0 N4-0 N5-0"])
    (s,) = build_training_samples(ds, K=4, seed=0, split=None)
    assert sorted(s.negatives.tolist()) == [2, 3, 4, 5]  # shifted indices of N2..N5
    assert s.positive == 1


def test_three_clicks_three_samples(make_dataset):
    ds = make_dataset(FIVE_NEWS, ["I1\tU1\t1\tN1\tN1-1 N2-1 N3-1 N4-0 N5-0"])
    samples = build_training_samples(ds, K=4, seed=0, split=None)
    assert len(samples) == 3
    for s in samples:
        assert set(s.negatives.tolist()) <= {4, 5}  # drawn with replacement from the 2 non-clicks


def test_impression_without_negatives_is_tallied(make_dataset):
    ds = make_dataset(FIVE_NEWS, ["I1\tU1\t0\tN1\tN1-1 N2-1", "I2\tU2\t1\tN2\tN3-1 N4-0"])
    stats = SampleStats()
    samples = build_training_samples(ds, K=2, seed=0, split=None, stats=stats)
    assert len(samples) == 1 and stats.skipped_no_negatives == 2


def test_samples_are_deterministic(tiny_dataset):
    a = build_training_samples(tiny_dataset, 4, 9)
    b = build_training_samples(tiny_dataset, 4, 9)
    assert all(np.array_equal(x.negatives, y.negatives) and x.random_news == y.random_news
               for x, y in zip(a, b))


def test_random_news_follows_catalog_category_frequencies(tiny_dataset):
    cats = np.array([n.category_id for n in tiny_dataset.news])
    p = np.bincount(cats, minlength=tiny_dataset.num_categories) / cats.size
    drawn = []
    seed = 0
    while len(drawn) < 10_000:
        drawn += [s.random_news - 1 for s in build_training_samples(tiny_dataset, 4, [0, seed])]
        seed += 1
    n = len(drawn)
    counts = np.bincount(cats[np.array(drawn)], minlength=p.size)
    sigma = np.sqrt(n * p * (1 - p))
    assert (np.abs(counts - n * p) <= 3 * sigma).all()


def test_negatives_come_from_the_same_impression(tiny_dataset):
    by_imp = {}
    for u, imp in tiny_dataset.impressions("train"):
        by_imp.setdefault(u, []).append({i + 1 for i, lab in imp.items if not lab})
    for s in build_training_samples(tiny_dataset, 4, 0)[:200]:
        assert any(set(s.negatives.tolist()) <= pool for pool in by_imp[s.user_index])


# --------------------------------------------------------------------- losses

def test_info_nce_examples():
    assert abs(info_nce_loss(0.7, [0.7] * 4) - math.log(5)) <= 1e-12
    assert info_nce_loss(20.0, [0.0] * 4) < 1e-8
    assert info_nce_loss(2.0, [1.0] * 4) == pytest.approx(math.log(1 + 4 * math.exp(-1)), abs=1e-12)


@given(st.lists(st.floats(-30, 30), min_size=5, max_size=5), st.floats(-100, 100))
def test_info_nce_shift_invariant(scores, c):
    a = info_nce_loss(scores[0], scores[1:])
    b = info_nce_loss(scores[0] + c, [s + c for s in scores[1:]])
    assert abs(a - b) <= 1e-10 * max(1.0, abs(a))


def test_adversarial_loss_examples():
    u = np.array([[0.5, 0.5]])
    assert abs(float(adversarial_loss(u, u, [0]).value) - math.log(2)) <= 1e-12
    one_hot = np.array([[1.0, 0.0]])
    assert float(adversarial_loss(one_hot, one_hot, [0]).value) <= 1e-11
    got = float(adversarial_loss(np.array([[0.25, 0.75]]), np.array([[0.5, 0.5]]), [1]).value)
    assert got == pytest.approx(0.5 * (-math.log(0.75) - math.log(0.5)), abs=1e-12)


def test_adversarial_label_out_of_range():
    with pytest.raises(ContractError):
        adversarial_loss(np.array([[0.5, 0.5]]), None, [2])


def test_kl_examples():
    p = np.array([[0.3, 0.7]])
    assert float(kl_loss(p, p).value) == 0.0
    assert float(kl_loss(np.array([[1.0, 0.0]]), np.array([[0.5, 0.5]])).value) == pytest.approx(math.log(2), abs=1e-9)
    got = float(kl_loss(np.array([[0.5, 0.5]]), np.array([[0.25, 0.75]])).value)
    assert got == pytest.approx(0.5 * math.log(2) + 0.5 * math.log(2 / 3), abs=1e-12)


@given(st.integers(0, 2**32 - 1))
def test_kl_nonnegative_and_zero_only_on_equality(seed):
    r = np.random.default_rng(seed)
    p, q = r.dirichlet(np.ones(3), size=2)
    assert float(kl_loss(p[None], q[None]).value) >= 0
    assert float(kl_loss(p[None], p[None]).value) == 0


def test_unified_loss_report():
    nodes = [ad.Node(1.0), ad.Node(0.6), ad.Node(0.1)]
    _, br = unified_loss(*nodes, lam=0.5, mode="FairRank")
    assert br.L_total == pytest.approx(0.8, abs=1e-15)
    _, br = unified_loss(ad.Node(1.3), None, None, lam=0.5, mode="base")
    assert br.L_total == 1.3


@pytest.mark.parametrize("mode,L_A,L_D", [("FairRank", None, 0.1), ("FairRank", 0.6, None),
                                          ("base", 0.6, None), ("AL", 0.6, 0.1)])
def test_unified_loss_rejects_inconsistent_inputs(mode, L_A, L_D):
    wrap = lambda v: None if v is None else ad.Node(v)  # noqa: E731
    with pytest.raises(ConfigError):
        unified_loss(ad.Node(1.0), wrap(L_A), wrap(L_D), 0.5, mode)


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainingConfig(lam=-1).validate()
    with pytest.raises(ConfigError):
        TrainingConfig(mode="nope").validate()


# ------------------------------------------------------------------ gradients

@pytest.mark.parametrize("lam", [0.0, 0.5, 2.0])
def test_encoder_gradient_decomposes(setup, lam):
    ds, mc, cat, batch = setup
    p = init_params(mc, 1)
    full, _ = loss_gradients(batch, cat, p, mc, "FairRank", lam)
    parts = {k: loss_gradients(batch, cat, p, mc, "FairRank", lam, reverse=False, parts=k)[0] for k in "RAD"}
    for name in ENCODER_PARAMS:
        expect = parts["R"][name] - lam * parts["A"][name] + parts["D"][name]
        assert rel_err(full[name], expect, floor=1e-14).max() < 1e-8


def test_lambda_zero_equals_base_plus_kl_path(setup):
    ds, mc, cat, batch = setup
    p = init_params(mc, 2)
    full, _ = loss_gradients(batch, cat, p, mc, "FairRank", 0.0)
    base, _ = loss_gradients(batch, cat, p, mc, "base", 0.0)
    kl, _ = loss_gradients(batch, cat, p, mc, "FairRank", 0.0, reverse=False, parts="D")
    for name in ENCODER_PARAMS:
        assert rel_err(full[name], base[name] + kl[name], floor=1e-14).max() < 1e-8


def test_adversary_step_lowers_adversarial_loss(setup):
    ds, mc, cat, batch = setup
    p = init_params(mc, 3)
    grads, br = loss_gradients(batch, cat, p, mc, "FairRank", 0.5, reverse=False, parts="A")
    for name in ADVERSARY_PARAMS:
        p.named()[name].value[...] -= 1e-3 * grads[name]
    _, after = training.batch_loss(batch, cat, p, mc, "FairRank", 0.5)
    assert after.L_A < br.L_A


@pytest.mark.parametrize("mode,scorer", [("FairRank", "inner"), ("FairRank-no-invariant", "ffn"),
                                         ("AL", "inner"), ("two-tower", "ffn")])
def test_player_objectives_match_finite_differences(setup, mode, scorer):
    """Encoder grads follow L_R - lam L_A + L_D, adversary grads follow L_A + L_D."""
    ds, _, cat, batch = setup
    mc = small_model(ds, scorer=scorer)
    p = init_params(mc, 4)
    lam = 0.5
    grads, _ = loss_gradients(batch, cat, p, mc, mode, lam)

    def objective(adversary):
        _, br = training.batch_loss(batch, cat, p, mc, mode, lam)
        return br.L_A + br.L_D if adversary else br.L_total

    r = np.random.default_rng(0)
    for name, node in p.named().items():
        flat = node.value.reshape(-1)
        coords = r.choice(flat.size, size=min(flat.size, 12), replace=False)
        num = numeric_grad(lambda: objective(name in ADVERSARY_PARAMS), node.value, coords)
        assert rel_err(grads[name].reshape(-1)[coords], num).max() < 1e-5, name


# ------------------------------------------------------------------------ fit

@pytest.fixture(scope="module")
def hundred_samples(tiny_dataset):
    mc = small_model(tiny_dataset)
    n = 0
    users = []
    for u, rec in enumerate(tiny_dataset.users):
        users.append(u)
        n += sum(sum(imp.labels) for imp in rec.impressions if imp.split == "train")
        if n >= 100:
            break
    keep = set(users)
    from dataclasses import replace
    sub = replace(tiny_dataset, users=[r if u in keep else replace(r, impressions=[
        replace(i, split="test") for i in r.impressions]) for u, r in enumerate(tiny_dataset.users)])
    return sub, mc


def test_two_epochs_reduce_ranking_loss(hundred_samples):
    ds, mc = hundred_samples
    res = fit(ds, TrainingConfig(mode="base", epochs=2, learning_rate=1e-2, seed=0), mc)
    assert 100 <= res.stats.samples // 2 < 140
    assert res.log[-1].L_R < res.log[0].L_R


def test_fit_is_bitwise_deterministic(hundred_samples):
    ds, mc = hundred_samples
    cfg = TrainingConfig(mode="FairRank", epochs=1, learning_rate=1e-3, seed=5)
    a, b = fit(ds, cfg, mc), fit(ds, cfg, mc)
    assert all(a.params.arrays()[k].tobytes() == b.params.arrays()[k].tobytes() for k in a.params.arrays())
    assert [r.to_json() for r in a.log] == [r.to_json() for r in b.log]


def test_epoch_log_has_all_loss_fields(hundred_samples):
    ds, mc = hundred_samples
    res = fit(ds, TrainingConfig(mode="FairRank", epochs=1, seed=0), mc)
    assert [r.epoch for r in res.log] == [0, 1]
    assert res.log[1].L_A > 0 and res.log[1].L_D >= 0 and res.log[1].val_AUC is not None


def test_divergence_reports_batch(hundred_samples, monkeypatch):
    ds, mc = hundred_samples
    real = training.loss_gradients
    calls = {"n": 0}

    def poisoned(*a, **k):
        grads, br = real(*a, **k)
        calls["n"] += 1
        if calls["n"] == 3:
            grads["news_W"] = grads["news_W"] * np.nan
        return grads, br

    monkeypatch.setattr(training, "loss_gradients", poisoned)
    with pytest.raises(DivergenceError) as info:
        fit(ds, TrainingConfig(mode="base", epochs=1), mc)
    assert info.value.batch_index == 2 and info.value.epoch == 1
