import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import prf_by_hand
from retroconv.data import AugmentConfig, Sampler, SamplerConfig, ScenarioConfig, synth_corpus
from retroconv.errors import ConfigError, NumericAbort, ShapeError
from retroconv.network import ModelConfig, build_model, infer
from retroconv.train import (EvalCounts, LossConfig, OptimConfig, TrainState, confusion, evaluate, prf, sgd_step,
                             train, weighted_bce)

TINY = ModelConfig(backbone="stacked-k-blocks", backbone_widths=(4,), change_module="retro", arpp_dilations=(),
                   change_widths=(4,), decoder_levels=0)


def pixels(p, y):
    return np.full((1, 1, 1, 1, 1), p), np.full((1, 1, 1), y, np.uint8)


# --- loss ------------------------------------------------------------------

def test_loss_examples():
    assert weighted_bce(*pixels(0.5, 0), LossConfig(alpha=1))[0] == pytest.approx(math.log(2))
    assert weighted_bce(*pixels(0.5, 1), LossConfig(alpha=4))[0] == pytest.approx(4 * math.log(2))
    assert weighted_bce(*pixels(1.0, 1))[0] == pytest.approx(4e-7, rel=1e-3)
    assert weighted_bce(*pixels(1.0, 1))[0] < 1e-6


def test_loss_gradient_by_differences():
    rng = np.random.default_rng(0)
    p = rng.uniform(0.05, 0.95, (2, 1, 1, 3, 4))
    y = (rng.random((2, 3, 4)) < 0.4).astype(np.uint8)
    _, g = weighted_bce(p, y)
    eps = 1e-6
    for idx in [(0, 0, 0, 1, 2), (1, 0, 0, 2, 3), (0, 0, 0, 0, 0)]:
        hi, lo = p.copy(), p.copy()
        hi[idx] += eps
        lo[idx] -= eps
        num = (weighted_bce(hi, y)[0] - weighted_bce(lo, y)[0]) / (2 * eps)
        assert g[idx] == pytest.approx(num, rel=1e-6)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10**6), alpha=st.floats(0.1, 10))
def test_loss_properties(seed, alpha):
    rng = np.random.default_rng(seed)
    p = rng.uniform(1e-3, 1 - 1e-3, (2, 1, 1, 3, 3))
    y = (rng.random((2, 3, 3)) < 0.5).astype(np.uint8)
    loss = weighted_bce(p, y, LossConfig(alpha=alpha))[0]
    assert loss >= 0
    if y.any():
        assert weighted_bce(p, y, LossConfig(alpha=alpha * 1.5))[0] > loss
    bg = np.zeros_like(y)
    assert weighted_bce(p, bg, LossConfig(alpha=alpha))[0] == weighted_bce(p, bg, LossConfig(alpha=alpha * 2))[0]


def test_loss_zero_only_at_clamp_limits():
    y = np.array([[[1, 0]]], np.uint8)
    exact = np.array([1.0, 0.0]).reshape(1, 1, 1, 1, 2)
    cfg = LossConfig(alpha=1)
    assert weighted_bce(exact, y, cfg)[0] == pytest.approx(-math.log(1 - 1e-7), rel=1e-6)
    off = np.array([0.9, 0.0]).reshape(1, 1, 1, 1, 2)
    assert weighted_bce(off, y, cfg)[0] > weighted_bce(exact, y, cfg)[0]


def test_loss_shape_and_config_errors():
    with pytest.raises(ShapeError):
        weighted_bce(np.zeros((1, 1, 1, 2, 2)), np.zeros((1, 2, 3)))
    with pytest.raises(ConfigError):
        LossConfig(alpha=0)
    with pytest.raises(ConfigError):
        LossConfig(epsilon=0.5)


# --- optimiser ---------------------------------------------------------------

def state_with(rng):
    return TrainState({"a": rng.standard_normal((2, 3)), "b": rng.standard_normal(4), "none": None})


def test_zero_grad_decays_velocity():
    rng = np.random.default_rng(1)
    st_ = state_with(rng)
    before = {k: v.copy() for k, v in st_.params.items() if v is not None}
    st_.velocity["a"][:] = 2.0
    cfg = OptimConfig(base_lr=0.1, momentum=0.5, weight_decay=0.0)
    sgd_step(st_, {"a": np.zeros((2, 3)), "b": np.zeros(4)}, cfg)
    np.testing.assert_array_equal(st_.velocity["a"], 1.0)
    np.testing.assert_allclose(st_.params["a"], before["a"] - 0.1)
    assert np.array_equal(st_.params["b"], before["b"]) and st_.iteration == 1


def test_plain_gradient_descent():
    rng = np.random.default_rng(2)
    st_ = state_with(rng)
    before = st_.params["a"].copy()
    g = {"a": rng.standard_normal((2, 3)), "b": rng.standard_normal(4)}
    sgd_step(st_, g, OptimConfig(base_lr=0.3, momentum=0.0, weight_decay=0.0))
    np.testing.assert_allclose(st_.params["a"], before - 0.3 * g["a"])


def test_momentum_and_decay_formula():
    rng = np.random.default_rng(3)
    st_ = state_with(rng)
    p0 = st_.params["b"].copy()
    v0 = rng.standard_normal(4)
    st_.velocity["b"][:] = v0
    g = {"a": np.zeros((2, 3)), "b": rng.standard_normal(4)}
    cfg = OptimConfig(base_lr=0.2, momentum=0.9, weight_decay=0.01)
    sgd_step(st_, g, cfg)
    v = 0.9 * v0 + g["b"] + 0.01 * p0
    np.testing.assert_allclose(st_.velocity["b"], v)
    np.testing.assert_allclose(st_.params["b"], p0 - 0.2 * v)


def test_lr_schedule_boundary():
    cfg = OptimConfig(base_lr=1e-6, lr_decay_factor=0.1, decay_every_iters=20_000)
    assert cfg.lr_at(19_999) == 1e-6
    assert cfg.lr_at(20_000) == pytest.approx(1e-7, rel=1e-12)
    assert cfg.lr_at(40_000) == pytest.approx(1e-8, rel=1e-12)


def test_zero_lr_is_identity():
    rng = np.random.default_rng(4)
    st_ = state_with(rng)
    before = {k: v.copy() for k, v in st_.params.items() if v is not None}
    sgd_step(st_, {"a": rng.standard_normal((2, 3)), "b": rng.standard_normal(4)}, OptimConfig(base_lr=0.0))
    assert all(np.array_equal(st_.params[k], v) for k, v in before.items())


def test_non_finite_gradient_aborts():
    rng = np.random.default_rng(5)
    st_ = state_with(rng)
    g = {"a": np.array([[1.0, np.nan, 3.0], [0, 0, -7.0]]), "b": np.zeros(4)}
    with pytest.raises(NumericAbort, match="'a'.*7.000e\\+00"):
        sgd_step(st_, g, OptimConfig())


def test_optim_config_validation():
    with pytest.raises(ConfigError):
        OptimConfig(lr_decay_factor=0.0)
    with pytest.raises(ConfigError):
        OptimConfig(batch_size=0)


# --- training loop -------------------------------------------------------------

@pytest.fixture(scope="module")
def tiny_corpus():
    return synth_corpus([ScenarioConfig(count=12, size=(5, 8), speed=(1, 2))], 3, (16, 16), seed=4)


def tiny_sampler(corpus, seed=0):
    return Sampler(corpus, SamplerConfig(augment=AugmentConfig.off()), seed=seed)


def test_zero_iterations_leave_model(tiny_corpus):
    m = build_model(TINY, 1)
    r = train(m, tiny_sampler(tiny_corpus), LossConfig(), OptimConfig(max_iters=0))
    assert all(np.array_equal(r.model.params[k], m.params[k]) for k in m.graph.trainable())
    assert r.losses == []


def test_first_loss_matches_composition(tiny_corpus):
    m = build_model(TINY, 1)
    clips, masks = tiny_sampler(tiny_corpus).batch(4, True)
    expected = weighted_bce(infer(m, clips), masks)[0]
    r = train(m, tiny_sampler(tiny_corpus), LossConfig(), OptimConfig(max_iters=1))
    assert r.losses[0] == pytest.approx(expected, rel=1e-12)
    assert r.log_lines[0].startswith("iter 1 lr 0.02 loss ")


def test_training_is_deterministic_and_leaves_input(tiny_corpus):
    m = build_model(TINY, 2)
    before = {k: v.copy() for k, v in m.graph.trainable().items()}
    cfg = OptimConfig(max_iters=6, base_lr=0.01)
    a = train(m, tiny_sampler(tiny_corpus), LossConfig(), cfg, log_every=2)
    b = train(m, tiny_sampler(tiny_corpus), LossConfig(), cfg, log_every=2)
    assert a.log_lines == b.log_lines and a.losses == b.losses
    assert all(np.array_equal(m.params[k], v) for k, v in before.items())
    assert not all(np.array_equal(a.model.params[k], v) for k, v in before.items())
    assert [ln.split()[1] for ln in a.log_lines] == ["1", "2", "4", "6"]


def test_loss_falls_when_overfitting_one_clip(tiny_corpus):
    one = [s for s in tiny_corpus if 0.05 <= s.fg_ratio <= 0.6][:1]
    m = build_model(TINY, 3)
    r = train(m, tiny_sampler(one), LossConfig(), OptimConfig(max_iters=40, base_lr=0.05), static_synthesis=False)
    assert np.mean(r.losses[-5:]) < 0.8 * np.mean(r.losses[:5])


def test_static_flag_changes_batches(tiny_corpus):
    m = build_model(TINY, 4)
    cfg = OptimConfig(max_iters=3)
    with_s = train(m, tiny_sampler(tiny_corpus), LossConfig(), cfg, static_synthesis=True)
    without = train(m, tiny_sampler(tiny_corpus), LossConfig(), cfg, static_synthesis=False)
    assert with_s.losses != without.losses


# --- metrics ---------------------------------------------------------------

def test_prf_examples():
    assert prf(EvalCounts(3, 1, 2, 10)) == pytest.approx((0.75, 0.6, 2 / 3))
    assert prf(EvalCounts(5, 0, 0, 1)) == (1.0, 1.0, 1.0)
    assert prf(EvalCounts(0, 0, 4, 9)) == (0.0, 0.0, 0.0)
    assert prf(EvalCounts(0, 0, 0, 9)) == (0.0, 0.0, 0.0)


@settings(max_examples=200)
@given(tp=st.integers(0, 10**6), fp=st.integers(0, 10**6), fn=st.integers(0, 10**6), k=st.integers(1, 50))
def test_prf_oracle_and_scale_invariance(tp, fp, fn, k):
    got = prf(EvalCounts(tp, fp, fn, 0))
    assert got == prf_by_hand(tp, fp, fn)
    assert prf(EvalCounts(k * tp, k * fp, k * fn, 0)) == pytest.approx(got, rel=1e-12, abs=0)


def test_confusion_counts():
    pred = np.array([0.9, 0.2, 0.5, 0.49, 0.7, 0.1]).reshape(1, 1, 1, 2, 3)
    mask = np.array([[1, 1, 0], [0, 0, 0]], np.uint8)
    assert confusion(pred, mask) == EvalCounts(tp=1, fp=2, fn=1, tn=2)
    c = confusion(pred, mask)
    assert c.total == 6
    with pytest.raises(ShapeError):
        confusion(pred, np.zeros((2, 2)))


def test_perfect_and_blank_predictions():
    mask = np.zeros((4, 4), np.uint8)
    mask[1:3, 1:3] = 1
    assert prf(confusion(mask.astype(float), mask)) == (1.0, 1.0, 1.0)
    assert prf(confusion(np.zeros((4, 4)), mask))[1:] == (0.0, 0.0)


# --- evaluation ----------------------------------------------------------------

@pytest.fixture(scope="module")
def eval_setup():
    corpus = synth_corpus([ScenarioConfig(name="a", count=3, size=(5, 8)),
                           ScenarioConfig(name="b", background="noise-field", count=2, size=(5, 8))],
                          3, (16, 16), seed=5)
    return build_model(TINY, 6), corpus


def test_evaluate_single_sample(eval_setup):
    m, corpus = eval_setup
    rep = evaluate(m, corpus[:1])
    assert rep.overall == confusion(infer(m, corpus[0].clip), corpus[0].mask)


def test_evaluate_pools_counts(eval_setup):
    m, corpus = eval_setup
    rep = evaluate(m, corpus)
    by_tag = {}
    for s in corpus:
        by_tag[s.tag] = by_tag.get(s.tag, EvalCounts()) + confusion(infer(m, s.clip), s.mask)
    assert rep.scenarios == by_tag
    total = by_tag["a"] + by_tag["b"]
    assert rep.overall == total and rep.f_measure == prf(total)[2]
    assert evaluate(m, corpus + corpus).f_measure == pytest.approx(rep.f_measure, rel=1e-12)
    assert evaluate(m, corpus, workers=3).scenarios == rep.scenarios


def test_report_layout(eval_setup):
    m, corpus = eval_setup
    text = evaluate(m, corpus, scales=(1, 0.5)).render()
    lines = text.splitlines()
    assert lines[0].startswith("# scales 1,0.5") and "pooled" in lines[1]
    assert lines[2].split() == ["scenario", "P", "R", "F"]
    assert [ln.split()[0] for ln in lines[3:]] == ["a", "b", "Average"]
    d = evaluate(m, corpus).to_dict()
    assert d["aggregation"] == "pooled-counts" and set(d["scenarios"]) == {"a", "b"}


def test_evaluate_empty():
    with pytest.raises(ConfigError):
        evaluate(build_model(TINY, 0), [])

