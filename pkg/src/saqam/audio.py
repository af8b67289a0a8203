"""Audio containers, WAV I/O, mixing arithmetic and the STFT front-end.

Everything downstream works on 16 kHz two-channel signals and on the
512-point / hop-256 Hamming STFT computed here. The numpy functions are the
reference path; :func:`torch_stft` and :func:`torch_features` mirror them for
code that needs gradients back to the waveform.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np
import scipy.io.wavfile
import scipy.signal
import torch

log = logging.getLogger(__name__)

SAMPLE_RATE = 16000
FFT_SIZE = 512
HOP = 256
N_FREQ = FFT_SIZE // 2 + 1


class AudioError(Exception):
    """Base class for audio-core failures."""


class AudioFormatError(AudioError):
    pass


class TooShortError(AudioError, ValueError):
    pass


class DegenerateInputError(AudioError, ValueError):
    pass


class ShapeError(AudioError, ValueError):
    pass


@dataclass
class BinauralSignal:
    """Two-channel waveform.

    Attributes:
        samples: float array of shape ``(2, N)``.
        sample_rate: sampling rate in Hz.
    """

    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        x = np.asarray(self.samples, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] != 2:
            raise ShapeError(f"expected shape (2, N), got {x.shape}")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if not np.all(np.isfinite(x)):
            raise ValueError("non-finite samples")
        self.samples = x

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]

    @property
    def duration(self) -> float:
        return self.n_samples / self.sample_rate

    @property
    def left(self) -> np.ndarray:
        return self.samples[0]

    @property
    def right(self) -> np.ndarray:
        return self.samples[1]

    @classmethod
    def from_mono(cls, x, sample_rate: int = SAMPLE_RATE) -> "BinauralSignal":
        x = np.asarray(x, dtype=np.float64)
        return cls(np.stack([x, x.copy()]), sample_rate)

    def power(self) -> float:
        """Mean square over both channels jointly."""
        return float(np.mean(self.samples**2))


@dataclass
class SpectroFeatures:
    """Per-channel one-sided magnitude and phase maps, each ``(2, F, T)``."""

    mag: np.ndarray
    phase: np.ndarray
    hop: int = HOP
    fft_size: int = FFT_SIZE

    @property
    def n_frames(self) -> int:
        return self.mag.shape[-1]

    @property
    def n_freq(self) -> int:
        return self.mag.shape[-2]

    def complex(self) -> np.ndarray:
        return self.mag * np.exp(1j * self.phase)

    @classmethod
    def from_complex(cls, spec: np.ndarray, hop: int = HOP, fft_size: int = FFT_SIZE):
        return cls(np.abs(spec), np.angle(spec), hop, fft_size)


def hamming(n: int = FFT_SIZE) -> np.ndarray:
    # periodic window: overlap-adds to a constant at 50% overlap
    return scipy.signal.get_window("hamming", n, fftbins=True)


def n_frames(n_samples: int, fft_size: int = FFT_SIZE, hop: int = HOP) -> int:
    if n_samples < fft_size:
        raise TooShortError(f"need at least {fft_size} samples, got {n_samples}")
    return (n_samples - fft_size) // hop + 1


# ---------------------------------------------------------------- I/O


def resample(x: np.ndarray, sr_in: int, sr_out: int) -> np.ndarray:
    """Polyphase resampling along the last axis."""
    if sr_in == sr_out:
        return np.array(x, dtype=np.float64)
    frac = Fraction(sr_out, sr_in)
    return scipy.signal.resample_poly(x, frac.numerator, frac.denominator, axis=-1)


def read_wav(path, sample_rate: int = SAMPLE_RATE) -> BinauralSignal:
    """Read a PCM WAV file as a :class:`BinauralSignal`.

    Mono files are duplicated to both channels, integer PCM is scaled to
    [-1, 1] and the result is resampled to ``sample_rate`` when needed.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(path)
    try:
        sr, data = scipy.io.wavfile.read(path)
    except ValueError as exc:
        raise AudioFormatError(f"{path}: {exc}") from exc
    if data.dtype == np.int16:
        x = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        x = data.astype(np.float64) / 2147483648.0
    elif data.dtype == np.uint8:
        x = (data.astype(np.float64) - 128.0) / 128.0
    elif data.dtype in (np.float32, np.float64):
        x = data.astype(np.float64)
    else:
        raise AudioFormatError(f"{path}: unsupported sample type {data.dtype}")
    if x.ndim == 1:
        x = np.stack([x, x])
    elif x.shape[1] == 1:
        x = np.stack([x[:, 0], x[:, 0]])
    elif x.shape[1] == 2:
        x = x.T
    else:
        raise AudioFormatError(f"{path}: {x.shape[1]} channels, expected 1 or 2")
    if sr != sample_rate:
        x = resample(x, sr, sample_rate)
    return BinauralSignal(np.ascontiguousarray(x), sample_rate)


def write_wav(path, signal: BinauralSignal) -> None:
    """Write 16-bit PCM. Values outside [-1, 1] are clipped."""
    x = np.clip(signal.samples, -1.0, 1.0 - 1.0 / 32768.0)
    pcm = np.round(x * 32768.0).astype(np.int16)
    scipy.io.wavfile.write(Path(path), signal.sample_rate, pcm.T.copy())


# ---------------------------------------------------------------- STFT


def _frames(x: np.ndarray, fft_size: int, hop: int) -> np.ndarray:
    n = n_frames(x.shape[-1], fft_size, hop)
    view = np.lib.stride_tricks.sliding_window_view(x, fft_size, axis=-1)
    return view[..., ::hop, :][..., :n, :]


def stft(signal: BinauralSignal, fft_size: int = FFT_SIZE, hop: int = HOP) -> SpectroFeatures:
    """One-sided Hamming STFT of both channels without edge padding.

    The frame count is ``(N - fft_size) // hop + 1``.
    """
    frames = _frames(signal.samples, fft_size, hop) * hamming(fft_size)
    spec = np.fft.rfft(frames, axis=-1).transpose(0, 2, 1)  # (2, F, T)
    return SpectroFeatures.from_complex(spec, hop, fft_size)


def istft(features: SpectroFeatures, length: int) -> BinauralSignal:
    """Weighted overlap-add inverse of :func:`stft`.

    Samples not covered by any frame come back as zeros.
    """
    fft_size, hop = features.fft_size, features.hop
    if features.mag.shape != features.phase.shape or features.mag.ndim != 3:
        raise ShapeError("mag and phase must both be (2, F, T)")
    if features.n_freq != fft_size // 2 + 1:
        raise ShapeError(f"F={features.n_freq} inconsistent with fft_size={fft_size}")
    return BinauralSignal(_overlap_add(features.complex(), length, fft_size, hop))


def _overlap_add(spec: np.ndarray, length: int, fft_size: int, hop: int) -> np.ndarray:
    win = hamming(fft_size)
    frames = np.fft.irfft(spec.transpose(0, 2, 1), n=fft_size, axis=-1) * win
    t = frames.shape[1]
    total = max(length, (t - 1) * hop + fft_size)
    out = np.zeros((spec.shape[0], total))
    wsum = np.zeros(total)
    for i in range(t):
        out[:, i * hop : i * hop + fft_size] += frames[:, i]
        wsum[i * hop : i * hop + fft_size] += win**2
    nz = wsum > 1e-8
    out[:, nz] /= wsum[nz]
    return out[:, :length]


_WINDOWS: dict = {}


def _torch_window(fft_size: int, dtype, device) -> torch.Tensor:
    key = (fft_size, dtype, device)
    if key not in _WINDOWS:
        _WINDOWS[key] = torch.as_tensor(hamming(fft_size), dtype=dtype, device=device)
    return _WINDOWS[key]


def torch_stft(x: torch.Tensor, fft_size: int = FFT_SIZE, hop: int = HOP) -> torch.Tensor:
    """Differentiable twin of :func:`stft`: ``(..., N)`` -> complex ``(..., F, T)``."""
    if x.shape[-1] < fft_size:
        raise TooShortError(f"need at least {fft_size} samples, got {x.shape[-1]}")
    frames = x.unfold(-1, fft_size, hop) * _torch_window(fft_size, x.dtype, x.device)
    return torch.fft.rfft(frames, dim=-1).transpose(-1, -2)


def torch_istft(spec: torch.Tensor, length: int, fft_size: int = FFT_SIZE, hop: int = HOP) -> torch.Tensor:
    """Differentiable weighted overlap-add: complex ``(..., F, T)`` -> ``(..., length)``."""
    win = _torch_window(fft_size, spec.real.dtype, spec.device)
    frames = torch.fft.irfft(spec.transpose(-1, -2), n=fft_size, dim=-1) * win
    t = frames.shape[-2]
    total = max(length, (t - 1) * hop + fft_size)
    lead = frames.shape[:-2]
    # fold == overlap-add over the time axis
    folded = torch.nn.functional.fold(
        frames.reshape(-1, t, fft_size).transpose(1, 2),
        output_size=(1, total),
        kernel_size=(1, fft_size),
        stride=(1, hop),
    ).reshape(*lead, total)
    wsum = torch.nn.functional.fold(
        (win**2).reshape(1, fft_size, 1).expand(1, fft_size, t),
        output_size=(1, total),
        kernel_size=(1, fft_size),
        stride=(1, hop),
    ).reshape(total)
    wsum = torch.where(wsum > 1e-8, wsum, torch.ones_like(wsum))
    return (folded / wsum)[..., :length]


# Below this magnitude a bin's phase is noise; matches the log-magnitude floor.
PHASE_GRAD_FLOOR = 1e-4


class _SafeAtan2(torch.autograd.Function):
    """atan2 with a damped gradient near the origin.

    The exact derivative scales as 1/|z| and explodes on near-silent bins,
    which swamps waveform-domain optimisation. The backward pass divides by
    ``|z|^2 + PHASE_GRAD_FLOOR^2`` instead of ``|z|^2``; the forward value is
    exact and bins well above the floor get the true gradient.
    """

    @staticmethod
    def forward(ctx, y, x):
        ctx.save_for_backward(y, x)
        return torch.atan2(y, x)

    @staticmethod
    def backward(ctx, grad):
        y, x = ctx.saved_tensors
        scale = grad / (x * x + y * y + PHASE_GRAD_FLOOR**2)
        return scale * x, -scale * y


def torch_features(x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Waveform ``(..., 2, N)`` -> (mag, phase), each ``(..., 2, F, T)``."""
    spec = torch_stft(x)
    re, im = spec.real, spec.imag
    mag = torch.sqrt(re * re + im * im + 1e-20)
    return mag, _SafeAtan2.apply(im, re)


# ---------------------------------------------------------------- mixing


def mix_at_snr(
    signal: BinauralSignal,
    noise: BinauralSignal,
    snr_db: float,
    rng=None,
    stats: dict | None = None,
) -> BinauralSignal:
    """Add ``noise`` scaled to the requested SNR, measured over both channels.

    A random excerpt of ``noise`` of the signal's length is used. ``snr_db =
    inf`` returns the signal unchanged. The mix is clipped to [-1, 1]; the
    number of clipped samples is logged and stored in ``stats["clipped"]``.
    """
    n = signal.n_samples
    if noise.n_samples < n:
        raise ShapeError(f"noise has {noise.n_samples} samples, signal needs {n}")
    p_sig = signal.power()
    if p_sig <= 0.0:
        raise DegenerateInputError("signal has zero power")
    if np.isposinf(snr_db):
        if stats is not None:
            stats["clipped"] = 0
        return BinauralSignal(signal.samples.copy(), signal.sample_rate)
    rng = np.random.default_rng(rng)
    start = int(rng.integers(0, noise.n_samples - n + 1))
    seg = noise.samples[:, start : start + n]
    p_noise = float(np.mean(seg**2))
    if p_noise <= 0.0:
        raise DegenerateInputError("noise has zero power")
    gain = np.sqrt(p_sig / (p_noise * 10.0 ** (snr_db / 10.0)))
    mixed = signal.samples + gain * seg
    clipped = int(np.count_nonzero(np.abs(mixed) > 1.0))
    if clipped:
        log.debug("mix_at_snr clipped %d samples at %.1f dB", clipped, snr_db)
    if stats is not None:
        stats["clipped"] = clipped
        stats["gain"] = gain
    return BinauralSignal(np.clip(mixed, -1.0, 1.0), signal.sample_rate)


def crop_or_pad(x: np.ndarray, length: int, offset: int = 0) -> np.ndarray:
    """Take ``length`` samples from ``offset`` along the last axis, zero-padding the end."""
    out = x[..., offset : offset + length]
    if out.shape[-1] < length:
        pad = [(0, 0)] * (x.ndim - 1) + [(0, length - out.shape[-1])]
        out = np.pad(out, pad)
    return out
