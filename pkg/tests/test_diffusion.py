import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import fixture_path
from laeids.diffusion import (DenoiserParams, PretrainConfig, denoise_loss, extract_features, forward,
                              init_denoiser, load_memory, make_schedule, memory_from_bytes, memory_to_bytes,
                              pretrain, q_sample, save_memory)
from laeids.errors import EmptyInput, InvalidRange, LengthMismatch, ShapeMismatch, StepOutOfRange


def fd_check(params: DenoiserParams, x0, t, eps, sched, h=1e-6):
    """Max relative error between analytic and central-difference gradients."""
    _, g = denoise_loss(params, x0, t, eps, sched)
    ga = g.flatten()
    theta = params.flatten()
    num = np.empty_like(theta)
    for i in range(theta.size):
        tp, tm = theta.copy(), theta.copy()
        tp[i] += h
        tm[i] -= h
        lp, _ = denoise_loss(params.unflatten(tp), x0, t, eps, sched)
        lm, _ = denoise_loss(params.unflatten(tm), x0, t, eps, sched)
        num[i] = (lp - lm) / (2 * h)
    denom = np.maximum(np.maximum(np.abs(ga), np.abs(num)), 1e-7)
    return float(np.max(np.abs(ga - num) / denom))


def random_denoiser(rng, seed):
    L = int(rng.integers(2, 6))
    h1, h2 = int(rng.integers(2, 9)), int(rng.integers(2, 7))
    p = init_denoiser(L, (h1, h2), seed)
    # non-zero biases so every gradient path is exercised
    p = DenoiserParams([(W, rng.normal(0, 0.3, b.shape)) for W, b in p.layers])
    return p


def test_schedule_examples():
    s = make_schedule(1, 0.1, 0.1)
    assert s.betas.tolist() == [0.1]
    assert s.alpha_bars[0] == pytest.approx(0.9, abs=1e-15)
    s = make_schedule(2, 0.1, 0.3)
    assert s.betas == pytest.approx([0.1, 0.3], abs=1e-15)
    assert s.alpha_bars == pytest.approx([0.9, 0.63], abs=1e-15)
    for bad in [(2, 0.1, 1.0), (0, 0.1, 0.2), (3, 0.0, 0.1), (3, 0.3, 0.2)]:
        with pytest.raises(InvalidRange):
            make_schedule(*bad)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 200), st.floats(1e-5, 0.5), st.floats(0, 0.49))
def test_schedule_invariants(T, b0, extra):
    s = make_schedule(T, b0, b0 + extra)
    ab = s.alpha_bars
    assert np.all((s.betas > 0) & (s.betas < 1))
    assert np.all((ab > 0) & (ab < 1))
    assert np.all(np.diff(ab) < 0)


def test_q_sample_examples():
    s = make_schedule(10, 1e-3, 0.2)
    x0 = np.array([0.3, -1.0, 2.0])
    eps = np.array([0.5, 0.1, -0.7])
    t = 4
    ab = s.alpha_bar(t)
    assert np.allclose(q_sample(x0, t, np.zeros(3), s), np.sqrt(ab) * x0, rtol=0, atol=1e-15)
    assert np.allclose(q_sample(np.zeros(3), t, eps, s), np.sqrt(1 - ab) * eps, rtol=0, atol=1e-15)
    # alpha_bar = 0.64 exactly for a one-step schedule with beta 0.36
    assert q_sample([1.0], 1, [1.0], make_schedule(1, 0.36, 0.36)) == pytest.approx([1.4], abs=1e-15)
    with pytest.raises(LengthMismatch):
        q_sample([1.0, 2.0], 1, [1.0], s)
    with pytest.raises(StepOutOfRange):
        q_sample([1.0], 11, [1.0], s)
    with pytest.raises(StepOutOfRange):
        q_sample([1.0], 0, [1.0], s)


@settings(max_examples=40, deadline=None)
@given(st.floats(-5, 5), st.integers(1, 10),
       st.lists(st.floats(-3, 3), min_size=4, max_size=4), st.lists(st.floats(-3, 3), min_size=4, max_size=4))
def test_q_sample_linear(a, t, x0, eps):
    s = make_schedule(10, 1e-3, 0.2)
    lhs = q_sample(a * np.array(x0), t, a * np.array(eps), s)
    rhs = a * q_sample(np.array(x0), t, np.array(eps), s)
    assert np.allclose(lhs, rhs, rtol=1e-12, atol=1e-12)


def _zero(L, hidden):
    return DenoiserParams([(np.zeros_like(W), np.zeros_like(b)) for W, b in init_denoiser(L, hidden).layers])


def test_loss_examples():
    s = make_schedule(5, 1e-3, 0.1)
    z = _zero(4, (3, 2))
    loss, g = denoise_loss(z, np.ones(4), 2, np.zeros(4), s)
    assert loss == 0.0
    eps = np.array([0.3, -0.2, 0.5, 1.0])
    l1, _ = denoise_loss(z, np.ones(4), 2, eps, s)
    l2, _ = denoise_loss(z, np.ones(4), 2, 2 * eps, s)
    assert l2 == pytest.approx(4 * l1, rel=1e-15)
    with pytest.raises(ShapeMismatch):
        denoise_loss(z, np.ones(3), 2, np.zeros(3), s)


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(7)
    sched = make_schedule(20, 1e-3, 0.2)
    for k in range(5):
        p = random_denoiser(rng, k)
        assert p.n_params <= 200
        L = p.input_dim
        x0 = rng.uniform(0, 1, (3, L))
        eps = rng.standard_normal((3, L))
        t = rng.integers(1, 21, size=3)
        assert fd_check(p, x0, t, eps, sched) < 1e-4


def _images(n, H=4, W=4, seed=0):
    rng = np.random.default_rng(seed)
    base = rng.uniform(0, 1, (H, W))
    return np.clip(base + rng.normal(0, 0.05, (n, H, W)), 0, 1)


SMALL = PretrainConfig(epochs=30, batch_size=16, learning_rate=1e-3, seed=3, T=20, hidden=(16, 8))


def test_memorize_single_image():
    img = _images(1)
    mem = pretrain(np.repeat(img, 64, axis=0), SMALL)
    losses = mem.provenance["epoch_losses"]
    assert len(losses) == 30 and losses[-1] < losses[0]


def test_pretrain_deterministic_and_shapes():
    imgs = _images(40)
    a = pretrain(imgs, SMALL)
    b = pretrain(imgs, SMALL)
    assert np.array_equal(a.denoiser.flatten(), b.denoiser.flatten())
    assert a.representations.shape == (40, 8)
    assert a.feature_dim == 8
    assert a.t_extract == 5
    assert np.all(np.isfinite(a.representations))
    with pytest.raises(EmptyInput):
        pretrain([], SMALL)


def test_float32_mode():
    mem = pretrain(_images(20), PretrainConfig(epochs=2, T=10, hidden=(8, 4), dtype="float32"))
    assert mem.denoiser.dtype == np.float32
    assert extract_features(mem, _images(1)[0]).dtype == np.float32


def test_extract_examples():
    imgs = _images(10)
    mem = pretrain(imgs, SMALL)
    a = extract_features(mem, imgs[0])
    assert np.array_equal(a, extract_features(mem, imgs[0].copy()))
    assert a.shape == (8,)
    assert np.allclose(a, mem.representations[0], rtol=0, atol=1e-12)
    with pytest.raises(ShapeMismatch):
        extract_features(mem, np.zeros((3, 3)))
    mem.denoiser = _zero(16, (16, 8))
    # tanh(0) = 0
    assert np.array_equal(extract_features(mem, np.zeros((4, 4))), np.zeros(8))


def test_extract_is_penultimate_activation():
    imgs = _images(5)
    mem = pretrain(imgs, SMALL)
    s = mem.schedule
    x = q_sample(imgs[1].ravel(), mem.t_extract, np.zeros(16), s)
    _, hs = forward(mem.denoiser, np.append(x, mem.t_extract / s.T)[None, :])
    assert np.allclose(extract_features(mem, imgs[1]), hs[-1][0], rtol=0, atol=1e-15)


def test_memory_roundtrip_bit_identical(tmp_path):
    imgs = _images(12)
    mem = pretrain(imgs, SMALL, dataset="toy")
    save_memory(tmp_path / "m.fmem", mem)
    back = load_memory(tmp_path / "m.fmem")
    assert back.provenance == json.loads(json.dumps(mem.provenance))
    assert np.array_equal(back.schedule.betas, mem.schedule.betas)
    for im in imgs:
        assert extract_features(back, im).tobytes() == extract_features(mem, im).tobytes()
    assert memory_to_bytes(memory_from_bytes(memory_to_bytes(mem))) == memory_to_bytes(mem)


def test_synthetic_benign_curve_fixture():
    """500 synthetic benign images with default settings: the probe-median curve
    falls strictly while descending and stays monotone at 5-epoch resolution."""
    from laeids.imaging import ImageConfig, sessions_to_matrix
    from laeids.swarm_env import CorpusConfig, synth_corpus

    corpus = synth_corpus(CorpusConfig(500, 1, seed=42))
    X = sessions_to_matrix([s for s in corpus if s.label == "benign"], ImageConfig()).reshape(-1, 32, 32)
    mem = pretrain(X, PretrainConfig(seed=0))
    med = np.array(mem.provenance["epoch_medians"])
    with open(fixture_path("pretrain_curve.json")) as fh:
        frozen = json.load(fh)
    assert med == pytest.approx(frozen["epoch_medians"], rel=1e-9)
    assert np.all(np.diff(med[2:16]) < 0)
    blocks = [np.median(med[i:i + 5]) for i in range(0, 30, 5)]
    assert np.all(np.diff(blocks) < 0)
    assert med[-1] < med[2]
