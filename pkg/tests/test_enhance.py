import numpy as np
import pytest
import torch

from saqam.audio import BinauralSignal, torch_istft, torch_stft
from saqam.corpus import synthetic_clean_pool
from saqam.enhance import (
    LOGMSE_EPS,
    MASK_BOUND,
    DegenerateError,
    EnhanceConfig,
    UNet,
    apply_mask,
    build_enhancement_set,
    enhance_forward,
    enhance_waves,
    evaluate_enhancer,
    external_measure,
    freeze,
    load_enhancer,
    logmse_loss,
    measures,
    mrstft,
    oracle_mask,
    save_enhancer,
    saqam_loss,
    si_sdr,
    train_enhancer,
)
from saqam.model import ModelConfig, NumericError, build_model


def _wave(seed, n=16000, scale=0.1):
    return torch.as_tensor(np.random.default_rng(seed).standard_normal((1, 2, n)) * scale)


def test_identity_mask_round_trip():
    x = _wave(0)
    spec = torch_stft(x)
    mask = torch.zeros(1, 4, *spec.shape[-2:], dtype=torch.float64)
    mask[:, 0::2] = 1.0
    y = torch_istft(apply_mask(spec, mask), x.shape[-1])
    assert torch.allclose(y[..., 256:-256], x[..., 256:-256], atol=1e-9)
    assert not torch_istft(apply_mask(spec, torch.zeros_like(mask)), x.shape[-1]).any()


def test_mask_is_complex_multiplication():
    spec = torch.complex(torch.randn(1, 2, 3, 4), torch.randn(1, 2, 3, 4))
    mask = torch.randn(1, 4, 3, 4)
    out = apply_mask(spec, mask)
    a, b = spec[0, 1, 2, 3], complex(mask[0, 2, 2, 3], mask[0, 3, 2, 3])
    assert complex(out[0, 1, 2, 3]) == pytest.approx(complex(a) * b, abs=1e-6)


def test_unet_output_bounded_and_shaped():
    torch.manual_seed(0)
    unet = UNet()
    mask, est, wave = enhance_waves(unet, _wave(1).float() * 50)
    assert mask.shape == (1, 4, 257, 61)
    assert mask.abs().max() <= MASK_BOUND
    assert wave.shape == (1, 2, 16000)
    with pytest.raises(NumericError):
        enhance_waves(unet, torch.full((1, 2, 16000), float("nan")))


def test_unet_gradients_reach_every_parameter():
    torch.manual_seed(0)
    unet = UNet()
    _, est, _ = enhance_waves(unet, _wave(2).float())
    logmse_loss(est, torch_stft(_wave(3).float())).backward()
    assert all(p.grad is not None and p.grad.abs().sum() > 0 for p in unet.parameters())


def test_logmse_floor_and_value():
    s = torch_stft(_wave(4))
    assert float(logmse_loss(s, s)) == pytest.approx(np.log(LOGMSE_EPS))
    assert float(logmse_loss(s, s)) == pytest.approx(-18.4207, abs=1e-4)
    d = s - torch_stft(_wave(5))
    expected = np.log(np.mean(np.abs(d.numpy()) ** 2) + LOGMSE_EPS)
    assert float(logmse_loss(s, torch_stft(_wave(5)))) == pytest.approx(expected)
    with pytest.raises(ValueError):
        logmse_loss(s, s[..., :3])


def test_logmse_gradient_finite_differences():
    target = torch_stft(_wave(6, 2048))
    x = torch_stft(_wave(7, 2048)).clone().requires_grad_(True)
    logmse_loss(x, target).backward()
    direction = torch.complex(torch.randn_like(target.real), torch.randn_like(target.real))
    analytic = float((x.grad.conj() * direction).real.sum())
    h = 1e-6
    numeric = (float(logmse_loss(x.detach() + h * direction, target)) - float(logmse_loss(x.detach() - h * direction, target))) / (2 * h)
    assert analytic == pytest.approx(numeric, rel=1e-5)


def test_si_sdr_orthogonal_construction():
    # Gram-Schmidt: est = ref + residual orthogonal to ref with equal energy -> 0 dB
    rng = np.random.default_rng(8)
    ref = rng.standard_normal(8000)
    r = rng.standard_normal(8000)
    r -= np.dot(r, ref) / np.dot(ref, ref) * ref
    r *= np.linalg.norm(ref) / np.linalg.norm(r)
    assert si_sdr(ref + r, ref) == pytest.approx(0.0, abs=0.1)
    assert si_sdr(ref + 0.1 * r, ref) == pytest.approx(20.0, abs=0.1)


def test_si_sdr_cap_and_scale_invariance():
    ref = np.random.default_rng(9).standard_normal(4000)
    assert si_sdr(2 * ref, ref) == 60.0
    est = ref + np.random.default_rng(10).standard_normal(4000)
    assert si_sdr(3 * est, ref) == pytest.approx(si_sdr(est, ref))
    with pytest.raises(DegenerateError):
        si_sdr(ref, np.zeros(4000))


def test_mrstft_properties():
    x = np.random.default_rng(11).standard_normal(16000)
    assert mrstft(x, x) == pytest.approx(0.0, abs=1e-9)
    y = x + 0.5 * np.random.default_rng(12).standard_normal(16000)
    assert mrstft(y, x) > mrstft(x + 0.05 * (y - x), x) > 0


def test_measures_and_errors():
    clean = BinauralSignal(np.random.default_rng(13).standard_normal((2, 8000)) * 0.1)
    m = measures(clean, clean)
    assert m["l2"] == 0.0 and m["si_sdr_db"] == 60.0
    with pytest.raises(DegenerateError):
        measures(clean, BinauralSignal(np.zeros((2, 8000))))
    with pytest.raises(ValueError):
        measures(clean, BinauralSignal(np.zeros((2, 100)) + 0.1))


def test_external_measure_command():
    clean = BinauralSignal(np.random.default_rng(14).standard_normal((2, 8000)) * 0.1)
    assert external_measure(clean, clean, "echo 4.5") == 4.5
    with pytest.raises(RuntimeError):
        external_measure(clean, clean, "")


@pytest.fixture(scope="module")
def pairs():
    return build_enhancement_set(synthetic_clean_pool(8, seed=3), 4, seed=1, length=16000)


def test_enhancement_set_snr_and_determinism(pairs):
    again = build_enhancement_set(synthetic_clean_pool(8, seed=3), 4, seed=1, length=16000)
    assert np.array_equal(pairs[2].noisy.samples, again[2].noisy.samples)
    for p in pairs:
        noise = p.noisy.samples - p.clean.samples
        snr = 10 * np.log10(p.clean.power() / np.mean(noise**2))
        assert snr == pytest.approx(p.snr_db, abs=0.05)


def test_oracle_mask_gain(pairs):
    gains = [
        measures(oracle_mask(p.noisy, p.clean), p.clean)["si_sdr_db"] - measures(p.noisy, p.clean)["si_sdr_db"]
        for p in pairs
    ]
    assert min(gains) >= 10.0


def test_saqam_loss_requires_frozen_metric():
    metric = build_model(ModelConfig(inception_width=12), 0)
    a, b = _wave(15).float(), _wave(16).float()
    with pytest.raises(ValueError):
        saqam_loss(metric, a, b)
    freeze(metric)
    x = a.clone().requires_grad_(True)
    loss = saqam_loss(metric, x, b)
    loss.backward()
    assert float(loss.detach()) > 0 and x.grad.abs().sum() > 0
    assert float(saqam_loss(metric, b, b)) < 1e-5


@pytest.mark.parametrize("regime", ["logmse", "scratch", "finetune"])
def test_train_regimes_run(pairs, regime):
    torch.manual_seed(0)
    unet = UNet(channels=(8, 8, 8, 8))
    metric = build_model(ModelConfig(inception_width=12), 0)
    cfg = EnhanceConfig(regime=regime, epochs=1, finetune_epochs=1, batch_size=2, crop_seconds=0.5)
    hist = train_enhancer(unet, pairs, cfg, None if regime == "logmse" else metric)
    expected = {"logmse": ["logmse"], "scratch": ["scratch"], "finetune": ["logmse", "finetune"]}[regime]
    assert hist.phase == expected
    assert np.isfinite(hist.epoch_loss).all()


def test_train_regime_errors(pairs):
    with pytest.raises(ValueError):
        train_enhancer(UNet(), pairs, EnhanceConfig(regime="scratch"))
    with pytest.raises(ValueError):
        train_enhancer(UNet(), pairs, EnhanceConfig(regime="other"), build_model(ModelConfig(inception_width=12)))


def test_enhancer_checkpoint_and_eval(tmp_path, pairs):
    torch.manual_seed(0)
    unet = UNet(channels=(8, 8, 8, 8))
    save_enhancer(tmp_path / "e.pt", unet, {"regime": "logmse"})
    loaded, meta = load_enhancer(tmp_path / "e.pt")
    assert meta == {"regime": "logmse"}
    a = enhance_forward(unet.eval(), pairs[0].noisy)[1]
    b = enhance_forward(loaded, pairs[0].noisy)[1]
    assert np.array_equal(a.samples, b.samples)
    noisy = evaluate_enhancer(None, pairs)
    assert set(noisy) == {"l2", "si_sdr_db", "mrstft"}
    with pytest.raises(ValueError):
        enhance_forward(unet, BinauralSignal(np.zeros((2, 8000))))
