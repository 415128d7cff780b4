import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import asrdefense.attacks as attacks_mod
import asrdefense.defenses as defenses_mod
from asrdefense.asr import AsrConfig, AsrModel, train
from asrdefense.corpus import CorpusConfig, synthesize_corpus
from asrdefense.defenses import (FinetuneConfig, Identity, SmoothingConfig, adv_finetune_asr, adv_finetune_joint,
                                 adv_finetune_joint_frozen, finetune, sample_epsilon, smooth)
from asrdefense.denoiser import DenoiserConfig, DenoiserModel

SMALL_DEN = DenoiserConfig(enc_dim=16, enc_kernel=8, enc_stride=4, sep_layers=2)


@pytest.fixture(scope="module")
def pretrained():
    corpus = synthesize_corpus(CorpusConfig(n_train=16, n_test=4, vocab_size=5, max_words=4))
    model = AsrModel(corpus.vocab, AsrConfig(channels=8), seed=0)
    train(model, corpus.train, epochs=5, lr=1e-2, batch_size=8)
    den = DenoiserModel(SMALL_DEN, seed=0)
    den.trained = True
    return corpus, model, den


def ft(**kw):
    base = dict(epochs=1, batch_size=8, iterations=2)
    base.update(kw)
    return FinetuneConfig(**base)


def params_of(model):
    return {k: v.data.copy() for k, v in model.params.items()}


def same(a, b):
    return all(np.array_equal(a[k], b[k]) for k in a)


def test_smoothing_identity_at_zero_sigma():
    x = np.random.default_rng(0).normal(size=100).astype(np.float32)
    out = smooth(x, SmoothingConfig(sigma=0.0), seed=5)
    assert np.array_equal(out, x)


def test_smoothing_statistics():
    sigma = 0.001
    draws = smooth(np.zeros(100_000), SmoothingConfig(sigma=sigma), seed=1)
    assert abs(draws.mean()) < 3 * sigma / np.sqrt(1e5)
    assert draws.std() == pytest.approx(sigma, rel=0.02)
    x = np.ones(10)
    assert np.array_equal(smooth(x, SmoothingConfig(), seed=2), smooth(x, SmoothingConfig(), seed=2))


def test_config_validation():
    with pytest.raises(ValueError):
        SmoothingConfig(sigma=-1)
    with pytest.raises(ValueError):
        SmoothingConfig(seed_policy="sometimes")
    with pytest.raises(ValueError):
        FinetuneConfig(variant="full")
    with pytest.raises(ValueError):
        FinetuneConfig(base_lr=0)
    with pytest.raises(ValueError):
        FinetuneConfig(eps_low=0.1, eps_high=0.01)
    cfg = FinetuneConfig()
    assert cfg.lr == pytest.approx(cfg.base_lr / 10)
    assert (cfg.eps_low, cfg.eps_high, cfg.iterations) == (1e-4, 0.02, 7)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_sample_epsilon_range(seed):
    e = sample_epsilon(np.random.default_rng(seed), 1e-4, 0.02)
    assert 1e-4 <= e <= 0.02


def test_sample_epsilon_log_uniform():
    rng = np.random.default_rng(0)
    logs = np.log([sample_epsilon(rng, 1e-4, 0.02) for _ in range(20_000)])
    lo, hi = np.log(1e-4), np.log(0.02)
    assert logs.mean() == pytest.approx((lo + hi) / 2, abs=0.05)
    assert logs.std() == pytest.approx((hi - lo) / np.sqrt(12), rel=0.03)
    assert sample_epsilon(rng, 0.0, 0.02) == 0.0


def test_refuses_untrained_components(pretrained):
    corpus, model, den = pretrained
    with pytest.raises(ValueError):
        adv_finetune_asr(AsrModel(corpus.vocab), corpus.train, ft())
    with pytest.raises(ValueError):
        adv_finetune_joint(DenoiserModel(SMALL_DEN), model.copy(), corpus.train, ft(variant="joint"))
    with pytest.raises(ValueError):
        finetune("joint", model.copy(), None, corpus.train, ft(variant="joint"))


def test_zero_budget_is_clean_training(pretrained):
    corpus, model, _ = pretrained
    m = model.copy()
    history = adv_finetune_asr(m, corpus.train, ft(eps_low=0.0, eps_high=0.0, epochs=4, batch_size=16))
    assert history[-1] <= history[0]


def test_joint_updates_both(pretrained):
    corpus, model, den = pretrained
    m, d = model.copy(), den.copy()
    before_m, before_d = params_of(m), params_of(d)
    adv_finetune_joint(d, m, corpus.train[:8], ft(variant="joint"))
    assert all(not np.array_equal(before_m[k], m.params[k].data) for k in before_m)
    assert any(not np.array_equal(before_d[k], d.params[k].data) for k in before_d)


def test_joint_frozen_keeps_recognizer(pretrained):
    corpus, model, den = pretrained
    m, d = model.copy(), den.copy()
    before_m, before_d = params_of(m), params_of(d)
    adv_finetune_joint_frozen(d, m, corpus.train, ft(variant="joint_frozen"))
    assert same(before_m, params_of(m))
    assert not same(before_d, params_of(d))


def test_identity_denoiser_matches_asr_only(pretrained):
    corpus, model, _ = pretrained
    a, b = model.copy(), model.copy()
    h_asr = adv_finetune_asr(a, corpus.train, ft(epochs=2))
    h_joint = adv_finetune_joint(Identity(), b, corpus.train, ft(epochs=2, variant="joint"), freeze_denoiser=True)
    assert h_asr == h_joint
    assert same(params_of(a), params_of(b))


def test_inner_and_outer_share_one_loss(pretrained, monkeypatch):
    assert attacks_mod.asr_loss is defenses_mod.asr_loss
    calls = []
    real = defenses_mod.asr_loss

    def spy(where):
        def wrapped(*args, **kw):
            calls.append(where)
            return real(*args, **kw)
        return wrapped
    monkeypatch.setattr(attacks_mod, "asr_loss", spy("inner"))
    monkeypatch.setattr(defenses_mod, "asr_loss", spy("outer"))
    corpus, model, _ = pretrained
    adv_finetune_asr(model.copy(), corpus.train[:8], ft(iterations=3))
    assert calls.count("inner") == 3 and calls.count("outer") == 1
