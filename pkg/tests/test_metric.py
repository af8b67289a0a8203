import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from saqam.audio import BinauralSignal
from saqam.metric import (
    ContractError,
    InputError,
    deep_feature_distance,
    layer_distance,
    score,
    score_many,
    waveform_distances,
)
from saqam.model import ModelConfig, build_model


def oracle_layer(a, b):
    """Loop-level reference: normalise every position's channel vector, L1, mean."""
    a = a.reshape(a.shape[0], a.shape[1], -1)
    b = b.reshape(b.shape[0], b.shape[1], -1)
    out = []
    for i in range(a.shape[0]):
        vals = []
        for p in range(a.shape[2]):
            u = a[i, :, p] / np.sqrt(np.sum(a[i, :, p] ** 2) + 1e-10)
            v = b[i, :, p] / np.sqrt(np.sum(b[i, :, p] ** 2) + 1e-10)
            vals.append(np.sum(np.abs(u - v)))
        out.append(np.mean(vals))
    return np.array(out)


def _stack(rng, shapes):
    return {f"l{i}": torch.as_tensor(rng.standard_normal(s)) for i, s in enumerate(shapes)}


SHAPES = [(3, 8, 5, 7), (3, 16, 7), (3, 4, 1)]


def test_matches_loop_oracle():
    rng = np.random.default_rng(0)
    a, b = _stack(rng, SHAPES), _stack(rng, SHAPES)
    per = {}
    got = deep_feature_distance(a, b, per).numpy()
    layers = [oracle_layer(a[k].numpy(), b[k].numpy()) for k in a]
    np.testing.assert_allclose(got, np.mean(layers, axis=0), atol=1e-8)
    for k, ref in zip(a, layers):
        np.testing.assert_allclose(per[k].numpy(), ref, atol=1e-8)


def test_scale_invariance_per_position():
    rng = np.random.default_rng(1)
    a = torch.as_tensor(rng.standard_normal((2, 6, 9)))
    scale = torch.as_tensor(rng.uniform(0.1, 10, (2, 1, 9)))
    assert torch.allclose(layer_distance(a, a * scale), torch.zeros(2, dtype=torch.float64), atol=1e-7)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 2, 5, 4), elements=st.floats(-5, 5)))
def test_pseudo_metric_axioms(x):
    a, b, c = ({"l": torch.as_tensor(x[i])} for i in range(3))
    d = lambda p, q: float(deep_feature_distance(p, q)[0])  # noqa: E731
    assert d(a, a) == pytest.approx(0.0, abs=1e-6)
    assert d(a, b) >= 0
    assert d(a, b) == pytest.approx(d(b, a), abs=1e-12)
    assert d(a, c) <= d(a, b) + d(b, c) + 1e-9


def test_contract_errors():
    rng = np.random.default_rng(2)
    a = _stack(rng, SHAPES)
    with pytest.raises(ContractError):
        deep_feature_distance(a, {"l0": a["l0"]})
    with pytest.raises(ContractError):
        deep_feature_distance({"l0": a["l0"]}, {"l0": a["l0"][:, :4]})
    with pytest.raises(ContractError):
        deep_feature_distance({}, {})


@pytest.fixture(scope="module")
def model64():
    return build_model(ModelConfig(inception_width=12), seed=0).double().eval()


def test_waveform_distance_finite_differences(model64):
    rng = np.random.default_rng(3)
    a = torch.as_tensor(rng.standard_normal((1, 2, 4000)) * 0.1, dtype=torch.float64)
    b = torch.as_tensor(rng.standard_normal((1, 2, 4000)) * 0.1, dtype=torch.float64)
    direction = torch.as_tensor(rng.standard_normal(a.shape), dtype=torch.float64)
    for key in ("d1_lq", "d2_sq", "d3_ovrl"):
        x = a.clone().requires_grad_(True)
        waveform_distances(model64, x, b)[key].sum().backward()
        analytic = float((x.grad * direction).sum())
        h = 1e-7  # small enough to stay clear of max-pool and ReLU switch points
        with torch.no_grad():
            fp = float(waveform_distances(model64, a + h * direction, b)[key].sum())
            fm = float(waveform_distances(model64, a - h * direction, b)[key].sum())
        numeric = (fp - fm) / (2 * h)
        assert analytic == pytest.approx(numeric, rel=1e-5)


def _sig(seed, n=16000):
    return BinauralSignal(np.random.default_rng(seed).standard_normal((2, n)) * 0.1)


def test_score_identity_and_symmetry():
    m = build_model(ModelConfig(inception_width=12), 1)
    x, y = _sig(0), _sig(1)
    same = score(m, x, x)
    assert max(same.d1_lq, same.d2_sq, same.d3_ovrl) < 1e-5
    ab, ba = score(m, x, y), score(m, y, x)
    assert ab.d1_lq == pytest.approx(ba.d1_lq, rel=1e-5)
    assert ab.d1_lq > 0 and ab.d3_ovrl > 0
    assert set(ab.per_layer) >= {"tcn.0", "lq.frames", "sq.hidden"}


def test_score_handles_unequal_lengths():
    m = build_model(ModelConfig(inception_width=12), 1)
    r = score(m, _sig(0, 16000), _sig(1, 12000))
    assert np.isfinite([r.d1_lq, r.d2_sq, r.d3_ovrl]).all()


def test_score_input_errors():
    m = build_model(ModelConfig(inception_width=12), 1)
    with pytest.raises(InputError):
        score(m, _sig(0, 4000), _sig(1))
    with pytest.raises(InputError):
        score(m, BinauralSignal(np.zeros((2, 16000)), sample_rate=8000), _sig(1))


def test_score_many_matches_score():
    m = build_model(ModelConfig(inception_width=12), 1)
    pairs = [(_sig(i), _sig(i + 10)) for i in range(3)]
    batch = score_many(m, pairs, batch_size=2)
    for row, (x, y) in zip(batch, pairs):
        r = score(m, x, y)
        np.testing.assert_allclose(row, [r.d1_lq, r.d2_sq, r.d3_ovrl], rtol=1e-4)
