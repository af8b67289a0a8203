import numpy as np
import pytest
import torch
import torch.nn.functional as F

from saqam.audio import BinauralSignal, stft, torch_features
from saqam.losses import doa_loss, mtl_loss, triplet_loss
from saqam.metric import deep_feature_distance, select
from saqam.model import (
    ConfigError,
    ModelConfig,
    NumericError,
    build_model,
    doa_from_logits,
    forward,
    load_checkpoint,
    predict_doa,
    save_checkpoint,
)


@pytest.fixture(scope="module")
def model():
    return build_model(ModelConfig(), seed=0)


@pytest.fixture(scope="module")
def small():
    return build_model(ModelConfig(inception_width=12), seed=1)


def _features(n=48000, seed=0):
    x = np.random.default_rng(seed).standard_normal((2, n)) * 0.1
    return stft(BinauralSignal(x))


def test_canonical_shapes_three_seconds(model):
    out = forward(model, _features())
    assert out.lq_frames.shape == (186, 64)
    assert out.az_logits.shape == (186, 50)
    assert out.el_logits.shape == (186, 25)
    assert out.lq_embedding.shape == (64,)
    assert torch.allclose(out.lq_embedding, out.lq_frames.mean(0), atol=1e-6)
    probs = torch.softmax(out.az_logits, -1).sum(-1)
    assert torch.allclose(probs, torch.ones_like(probs), atol=1e-6)


def test_frequency_trace_and_receptive_field(model):
    out = forward(model, _features(8000))
    freqs = [v.shape[-2] for v in out.feature_stack.values()]
    assert freqs == [129, 65, 33, 17, 9, 5]
    assert ModelConfig().pooled_freq == 5
    assert ModelConfig().receptive_field == 61


def test_duration_covariant(small):
    for n in (8000, 16000, 20000):
        t = stft(BinauralSignal(np.zeros((2, n)) + 1e-3)).n_frames
        out = forward(small, _features(n))
        assert out.az_logits.shape[0] == t
        assert all(v.shape[-1] == t for v in out.body_stack.values())


def test_deterministic_build_and_forward():
    a, b = build_model(ModelConfig(inception_width=12), 7), build_model(ModelConfig(inception_width=12), 7)
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert torch.equal(pa, pb)
    f = _features(8000)
    oa, ob = forward(a, f), forward(a, f)
    for k in oa.body_stack:
        assert torch.equal(oa.body_stack[k], ob.body_stack[k])


def test_stack_ordering(small):
    out = forward(small, _features(8000))
    assert list(out.body_stack) == ["tcn.0", "tcn.1", "tcn.2", "tcn.3"]
    assert list(out.lq_stack) == ["lq.conv1", "lq.frames", "lq.embedding"]
    assert list(out.sq_stack) == ["sq.hidden", "sq.az_logits", "sq.el_logits"]


def test_input_mode_changes_stacks():
    f = _features(8000)
    both = build_model(ModelConfig(inception_width=12), 3)
    mag = build_model(ModelConfig(inception_width=12, input_mode="mag_only"), 3)
    a, b = forward(both, f), forward(mag, f)
    assert not torch.allclose(a.body_stack["tcn.3"], b.body_stack["tcn.3"])


def test_nan_input_rejected(small):
    f = _features(8000)
    f.mag[0, 3, 2] = np.nan
    with pytest.raises(NumericError):
        forward(small, f)


@pytest.mark.parametrize(
    "kwargs", [{"az_bins": 40}, {"lq_embed_dim": 32}, {"input_mode": "stereo"}, {"tcn_dilations": (1, 2)}, {"input_channels": 2}]
)
def test_config_errors(kwargs):
    with pytest.raises(ConfigError):
        ModelConfig(**kwargs)


def test_every_parameter_receives_gradient():
    torch.manual_seed(0)
    m = build_model(ModelConfig(inception_width=12), 2)
    waves = torch.randn(6, 2, 8000) * 0.1
    out = m(*torch_features(waves))
    roles = [select(out.lq_stack, slice(k, 6, 3)) for k in range(3)]
    lq = triplet_loss(deep_feature_distance(roles[0], roles[1]), deep_feature_distance(roles[0], roles[2]), 1.0).mean()
    sq = doa_loss(out.az_logits, out.el_logits, [3, 10, 20, 30, 40, 49], [0, 5, 10, 12, 20, 24])
    mtl_loss(lq, sq).backward()
    dead = [n for n, p in m.named_parameters() if p.grad is None or p.grad.norm() == 0]
    assert dead == []


def test_weight_norm_matches_raw_composition(small):
    block = small.tcn[1]
    conv = block.conv1
    g = conv.parametrizations.weight.original0
    v = conv.parametrizations.weight.original1
    w = g * v / v.norm(dim=(1, 2), keepdim=True)
    x = torch.randn(2, conv.in_channels, 40)
    raw = F.conv1d(x, w, conv.bias, padding=conv.padding, dilation=conv.dilation)
    assert torch.allclose(conv(x), raw, atol=1e-6)


def test_doa_tie_break_and_delta():
    p = doa_from_logits(torch.zeros(5, 50), torch.zeros(5, 25))
    assert (p.az_bin, p.el_bin) == (0, 0)
    logits = torch.full((5, 50), -10.0)
    logits[:, 37] = 10.0
    assert doa_from_logits(logits, torch.zeros(5, 25)).az_bin == 37


def test_predict_doa_runs(small):
    pred = predict_doa(small, _features(8000))
    assert 0 <= pred.az_bin < 50 and len(pred.az_frames) == 30


def test_checkpoint_round_trip(tmp_path, small):
    save_checkpoint(tmp_path / "m.pt", small, {"note": "x"})
    loaded, meta = load_checkpoint(tmp_path / "m.pt")
    assert meta == {"note": "x"}
    f = _features(8000)
    assert torch.equal(forward(small, f).lq_embedding, forward(loaded, f).lq_embedding)
    payload = torch.load(tmp_path / "m.pt", weights_only=False)
    payload["version"] = 99
    torch.save(payload, tmp_path / "bad.pt")
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "bad.pt")
