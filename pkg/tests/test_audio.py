import numpy as np
import pytest
import scipy.io.wavfile
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from saqam.audio import (
    FFT_SIZE,
    HOP,
    SAMPLE_RATE,
    AudioFormatError,
    BinauralSignal,
    DegenerateInputError,
    ShapeError,
    SpectroFeatures,
    TooShortError,
    hamming,
    istft,
    mix_at_snr,
    n_frames,
    read_wav,
    stft,
    torch_features,
    torch_istft,
    torch_stft,
    write_wav,
)


def _noise(n, seed=0, scale=0.3):
    return BinauralSignal(np.random.default_rng(seed).standard_normal((2, n)) * scale)


def brute_dft(frame):
    n = len(frame)
    k = np.arange(n // 2 + 1)[:, None]
    return (frame[None, :] * np.exp(-2j * np.pi * k * np.arange(n)[None, :] / n)).sum(axis=1)


def sinc_resample(x, factor_down, taps=801, cutoff=0.95):
    """Integer-factor decimation by a long Blackman-windowed sinc, computed directly."""
    n = np.arange(taps) - taps // 2
    fc = cutoff / factor_down
    h = fc * np.sinc(fc * n) * np.blackman(taps)
    y = np.convolve(x, h, mode="same")
    return y[::factor_down]


def test_binaural_signal_validation():
    with pytest.raises(ShapeError):
        BinauralSignal(np.zeros((3, 10)))
    with pytest.raises(ValueError):
        BinauralSignal(np.array([[0.0, np.nan], [0.0, 0.0]]))
    with pytest.raises(ValueError):
        BinauralSignal(np.zeros((2, 4)), sample_rate=0)


def test_frame_count_examples():
    assert n_frames(48000) == 186
    assert n_frames(512) == 1
    with pytest.raises(TooShortError):
        stft(_noise(511))


@given(st.integers(512, 20000))
@settings(max_examples=60, deadline=None)
def test_frame_count_matches_enumeration(n):
    placements = sum(1 for start in range(0, n, HOP) if start + FFT_SIZE <= n)
    assert n_frames(n) == placements
    assert stft(_noise(n)).n_frames == placements


def test_stft_shapes_and_bounds():
    f = stft(_noise(48000))
    assert f.mag.shape == (2, 257, 186)
    assert (f.mag >= 0).all()
    assert (f.phase > -np.pi - 1e-12).all() and (f.phase <= np.pi + 1e-12).all()


def test_stft_matches_brute_force_dft():
    x = _noise(1024, seed=3)
    f = stft(x)
    frame = x.samples[1, 256:768] * hamming()
    np.testing.assert_allclose(f.complex()[1, :, 1], brute_dft(frame), atol=1e-9)


def test_sine_peak_bin():
    t = np.arange(16000) / SAMPLE_RATE
    f = stft(BinauralSignal.from_mono(np.sin(2 * np.pi * 1000 * t)))
    assert int(np.argmax(f.mag[0, :, 10])) == round(1000 * 512 / 16000) == 32


def test_parseval_per_frame():
    x = _noise(2048, seed=5)
    f = stft(x)
    frame = x.samples[0, 512:1024] * hamming()
    # one-sided spectrum: interior bins count twice
    m = f.mag[0, :, 2] ** 2
    energy = (m[0] + m[-1] + 2 * m[1:-1].sum()) / FFT_SIZE
    assert energy == pytest.approx(np.sum(frame**2), rel=1e-6)


def test_istft_round_trip_white_noise():
    x = _noise(48000, seed=1)
    y = istft(stft(x), 48000)
    interior = slice(256, 48000 - 256)
    assert np.max(np.abs(y.samples[:, interior] - x.samples[:, interior])) < 1e-4


def test_istft_zero_and_shape_error():
    f = stft(_noise(4096))
    zero = SpectroFeatures(np.zeros_like(f.mag), np.zeros_like(f.phase))
    assert not istft(zero, 4096).samples.any()
    bad = SpectroFeatures(f.mag[:, :100], f.phase[:, :100])
    with pytest.raises(ShapeError):
        istft(bad, 4096)


def test_torch_front_end_matches_numpy():
    x = _noise(8000, seed=2)
    f = stft(x)
    spec = torch_stft(torch.as_tensor(x.samples))
    np.testing.assert_allclose(spec.numpy(), f.complex(), atol=1e-9)
    back = torch_istft(spec, 8000).numpy()
    np.testing.assert_allclose(back[:, 256:-256], x.samples[:, 256:-256], atol=1e-9)
    mag, phase = torch_features(torch.as_tensor(x.samples))
    np.testing.assert_allclose(mag.numpy(), f.mag, atol=1e-8)


def test_torch_features_gradient_finite_on_silence():
    x = torch.zeros(1, 2, 2048, dtype=torch.float64, requires_grad=True)
    mag, phase = torch_features(x)
    (mag.sum() + phase.sum()).backward()
    assert torch.isfinite(x.grad).all()


def test_phase_gradient_exact_on_loud_bins_and_bounded_on_quiet_ones():
    from saqam.audio import PHASE_GRAD_FLOOR, _SafeAtan2

    def grads(re, im):
        re = torch.tensor(re, dtype=torch.float64, requires_grad=True)
        im = torch.tensor(im, dtype=torch.float64, requires_grad=True)
        _SafeAtan2.apply(im, re).backward()
        return float(re.grad), float(im.grad)

    # |z| = 1: exact atan2 derivative (-im/r^2, re/r^2) to 1e-7 relative
    g = grads(0.6, 0.8)
    assert g == pytest.approx((-0.8, 0.6), rel=1e-7)
    # far below the floor the derivative stays under 1 / (2 * floor)
    tiny = PHASE_GRAD_FLOOR * 1e-3
    assert max(abs(v) for v in grads(tiny, tiny)) < 1 / (2 * PHASE_GRAD_FLOOR)


# ---------------------------------------------------------------- mixing


def test_mix_snr_zero_db_power_ratio():
    sig, noise = _noise(16000, 1, scale=0.05), _noise(20000, 2, scale=0.2)
    stats = {}
    out = mix_at_snr(sig, noise, 0.0, rng=0, stats=stats)
    added = out.samples - sig.samples
    assert stats["clipped"] == 0
    assert np.mean(added**2) / sig.power() == pytest.approx(1.0, abs=1e-9)


def test_mix_closed_form_gain():
    rng = np.random.default_rng(0)
    sig = rng.standard_normal((2, 8000))
    sig /= np.sqrt(np.mean(sig**2))
    noise = rng.standard_normal((2, 8000))
    noise /= np.sqrt(np.mean(noise**2))
    stats = {}
    mix_at_snr(BinauralSignal(sig * 0.1), BinauralSignal(noise * 0.1), 20.0, rng=1, stats=stats)
    assert stats["gain"] == pytest.approx(10 ** (-20 / 20))


def test_mix_infinite_snr_and_errors():
    sig = _noise(1000)
    assert np.array_equal(mix_at_snr(sig, _noise(1000, 1), np.inf).samples, sig.samples)
    with pytest.raises(DegenerateInputError):
        mix_at_snr(BinauralSignal(np.zeros((2, 100))), _noise(100), 0.0)
    with pytest.raises(ShapeError):
        mix_at_snr(sig, _noise(10), 0.0)


@given(st.floats(-20, 30), st.integers(0, 2**16))
@settings(max_examples=40, deadline=None)
def test_mix_achieves_requested_snr(snr, seed):
    sig, noise = _noise(4000, seed, 0.05), _noise(6000, seed + 1, 0.05)
    stats = {}
    out = mix_at_snr(sig, noise, snr, rng=seed, stats=stats)
    if stats["clipped"] == 0:
        measured = 10 * np.log10(sig.power() / np.mean((out.samples - sig.samples) ** 2))
        assert measured == pytest.approx(snr, abs=0.01)


# ---------------------------------------------------------------- wav I/O


def test_wav_stereo_identity(tmp_path):
    x = (np.random.default_rng(0).integers(-2000, 2000, (48000, 2))).astype(np.int16)
    scipy.io.wavfile.write(tmp_path / "a.wav", 16000, x)
    sig = read_wav(tmp_path / "a.wav")
    assert sig.n_samples == 48000
    np.testing.assert_array_equal(sig.samples, x.T / 32768.0)


def test_wav_mono_duplicated(tmp_path):
    x = (np.random.default_rng(1).integers(-2000, 2000, 1000)).astype(np.int16)
    scipy.io.wavfile.write(tmp_path / "m.wav", 16000, x)
    sig = read_wav(tmp_path / "m.wav")
    assert np.array_equal(sig.left, sig.right)


def test_wav_resampled_tone_amplitude(tmp_path):
    t = np.arange(3 * 48000) / 48000
    tone = 0.5 * np.sin(2 * np.pi * 440 * t)
    scipy.io.wavfile.write(tmp_path / "hi.wav", 48000, tone.astype(np.float32))
    sig = read_wav(tmp_path / "hi.wav")
    assert sig.n_samples == 48000
    ref = sinc_resample(tone, 3)
    mid = slice(2000, 46000)
    amp = np.sqrt(2 * np.mean(sig.left[mid] ** 2))
    amp_ref = np.sqrt(2 * np.mean(ref[mid] ** 2))
    assert amp == pytest.approx(0.5, rel=0.01)
    assert amp == pytest.approx(amp_ref, rel=0.01)


def test_wav_round_trip_bit_stable(tmp_path):
    x = (np.random.default_rng(2).integers(-30000, 30000, (2, 5000)) / 32768.0)
    write_wav(tmp_path / "r.wav", BinauralSignal(x))
    a = read_wav(tmp_path / "r.wav")
    write_wav(tmp_path / "r2.wav", a)
    assert (tmp_path / "r.wav").read_bytes() == (tmp_path / "r2.wav").read_bytes()
    np.testing.assert_array_equal(a.samples, x)


def test_wav_errors(tmp_path):
    (tmp_path / "junk.wav").write_bytes(b"not a wav file")
    with pytest.raises((OSError, AudioFormatError, ValueError)):
        read_wav(tmp_path / "junk.wav")
    with pytest.raises(FileNotFoundError):
        read_wav(tmp_path / "missing.wav")
    x = np.zeros((100, 3), dtype=np.int16)
    scipy.io.wavfile.write(tmp_path / "three.wav", 16000, x)
    with pytest.raises(AudioFormatError):
        read_wav(tmp_path / "three.wav")
