from itertools import groupby

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from asrdefense.asr import (SIL, AsrConfig, AsrModel, Utterance, Vocab, asr_loss, collapse, decode,
                            forward, moving_average, train, transcribe)
from asrdefense.autodiff import Tensor, exp, gradcheck
from asrdefense.corpus import CorpusConfig, synthesize_corpus
from asrdefense.signal import StftConfig

VOCAB = Vocab(("a", "b", "c"))


def small_model(seed=0, smooth=1, dtype=np.float32):
    cfg = AsrConfig(frontend=StftConfig(32, 8), channels=4, kernel=3, layers=2, smooth_frames=smooth)
    model = AsrModel(VOCAB, cfg, seed=seed)
    return model.astype(dtype) if dtype != np.float32 else model


def test_vocab_layout():
    assert VOCAB.tokens == (SIL, "a", "b", "c")
    assert VOCAB.index("a") == 1 and VOCAB.word(0) == SIL and len(VOCAB) == 4
    with pytest.raises(ValueError):
        Vocab((SIL, "a"))
    with pytest.raises(ValueError):
        Vocab(("a", "a"))


def test_posteriors_normalized_and_deterministic():
    x = np.random.default_rng(0).normal(0, 0.1, 200).astype(np.float32)
    a = forward(small_model(), Tensor(x)).data
    b = forward(small_model(), Tensor(x)).data
    np.testing.assert_allclose(np.exp(a).sum(-1), 1, atol=1e-5)
    assert a.shape == (1 + (200 - 32) // 8, 4)
    assert np.array_equal(a, b)


def test_too_short_input():
    with pytest.raises(ValueError):
        forward(small_model(), Tensor(np.zeros(10)))


@pytest.mark.parametrize("smooth", [1, 4])
def test_input_gradient_matches_finite_differences(smooth):
    model = small_model(smooth=smooth, dtype=np.float64)
    x = Tensor(np.random.default_rng(1).normal(0, 0.3, 96), requires_grad=True, dtype=np.float64)
    # rows of exp(logp) sum to one, so weight them to get a non-constant scalar
    w = Tensor(np.random.default_rng(9).normal(size=(model.n_frames(96), 4)), dtype=np.float64)
    assert gradcheck(lambda: (exp(forward(model, x)) * w).sum(), [x]) < 1e-3


def test_parameter_gradients_match_finite_differences():
    model = small_model(dtype=np.float64)
    x = np.random.default_rng(2).normal(0, 0.3, 96)
    labels = np.random.default_rng(3).integers(0, 4, model.n_frames(96))
    assert gradcheck(lambda: asr_loss(forward(model, Tensor(x, dtype=np.float64)), labels),
                     model.parameters()) < 1e-3


def test_moving_average_oracle():
    h = np.random.default_rng(4).normal(size=(2, 3, 11))
    for width in (1, 2, 5):
        got = moving_average(Tensor(h, dtype=np.float64), width).data
        half = width // 2
        padded = np.pad(h, [(0, 0), (0, 0), (half, width - 1 - half)], mode="reflect")
        want = np.stack([padded[..., t:t + width].mean(-1) for t in range(11)], axis=-1)
        np.testing.assert_allclose(got, want, atol=1e-12)


def test_loss_examples():
    labels = np.array([0, 1, 2, 3, 1])
    onehot = np.full((5, 4), -1e4)
    onehot[np.arange(5), labels] = 0.0
    assert asr_loss(Tensor(onehot, dtype=np.float64), labels).item() == 0
    uniform = np.full((5, 4), -np.log(4))
    assert asr_loss(Tensor(uniform, dtype=np.float64), labels).item() == pytest.approx(np.log(4))
    logits = np.random.default_rng(5).normal(size=(5, 4))
    logp = logits - np.log(np.exp(logits).sum(-1, keepdims=True))
    oracle = -sum(logp[t, labels[t]] for t in range(5)) / 5
    assert asr_loss(Tensor(logp, dtype=np.float64), labels).item() == pytest.approx(oracle, abs=1e-6)


def test_loss_errors():
    logp = Tensor(np.zeros((5, 4)))
    with pytest.raises(ValueError):
        asr_loss(logp, np.array([0, 1, 4, 0, 0]))
    with pytest.raises(ValueError):
        asr_loss(logp, np.array([0, 1]))


def test_decode_examples():
    def post(ids):
        p = np.full((len(ids), 4), -5.0)
        p[np.arange(len(ids)), ids] = 0.0
        return p
    assert decode(post([0, 1, 1, 0, 2]), VOCAB) == ("a", "b")
    assert decode(post([0, 0, 0]), VOCAB) == ()
    # ties go to the lower index
    assert decode(np.zeros((3, 4)), VOCAB) == ()
    assert decode(np.stack([post([1, 2]), post([3, 3])]), VOCAB) == [("a", "b"), ("c",)]


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 3), max_size=30))
def test_collapse_rules(ids):
    oracle = [k for k, _ in groupby(ids) if k != 0]
    assert collapse(ids) == oracle
    assert collapse(np.repeat(ids, 2)) == oracle


def test_utterance_validation():
    labels = np.array([0, 1, 1, 0, 2, 0])
    Utterance("u", np.zeros(10), ("a", "b"), labels).validate(VOCAB)
    with pytest.raises(ValueError):
        Utterance("u", np.zeros(10), ("a", "c"), labels).validate(VOCAB)


def test_memorizes_single_utterance():
    corpus = synthesize_corpus(CorpusConfig(n_train=1, n_test=1, vocab_size=5, max_words=3))
    model = AsrModel(corpus.vocab, AsrConfig(channels=16), seed=0)
    history = train(model, corpus.train, epochs=300, lr=1e-2, batch_size=1, average_last=0)
    assert history[-1] < 0.01
    assert transcribe(model, corpus.train[0].waveform[None])[0] == corpus.train[0].words


def test_training_deterministic_and_improves(tmp_path):
    corpus = synthesize_corpus(CorpusConfig(n_train=24, n_test=4, vocab_size=6))
    runs = []
    for _ in range(2):
        model = AsrModel(corpus.vocab, AsrConfig(channels=8), seed=1)
        runs.append((train(model, corpus.train, epochs=4, batch_size=8, out_dir=tmp_path / "m"), model))
    (h1, m1), (h2, m2) = runs
    assert h1 == h2
    assert all(np.array_equal(a.data, b.data) for a, b in zip(m1.parameters(), m2.parameters()))
    assert h1[-1] < h1[0]
    loaded = AsrModel.load(tmp_path / "m")
    x = Tensor(corpus.test[0].waveform)
    assert np.array_equal(forward(loaded, x).data, forward(m1, x).data)


def test_empty_corpus():
    with pytest.raises(ValueError):
        train(small_model(), [])
