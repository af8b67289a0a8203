"""Stand-in sources for desk-scale runs: speech-like utterances and noises.

The real pipeline uses recorded corpora. These generators produce signals
with the properties the metric cares about (harmonic voiced segments,
formant colouring, fricative bursts, pauses) so that everything runs
offline and deterministically.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
import scipy.signal

from .audio import SAMPLE_RATE, read_wav

NOISE_KINDS = ("white", "pink", "brown", "babble", "hum")


def _resonator(x, freq, bw, fs):
    r = np.exp(-np.pi * bw / fs)
    theta = 2 * np.pi * freq / fs
    a = [1.0, -2 * r * np.cos(theta), r * r]
    return scipy.signal.lfilter([1.0 - r], a, x)


def synth_utterance(seed, duration: float = 3.5, fs: int = SAMPLE_RATE, level: float = 0.25) -> np.ndarray:
    """A speech-like mono waveform: voiced syllables, fricatives and pauses."""
    rng = np.random.default_rng(seed)
    n = int(round(duration * fs))
    out = np.zeros(n)
    speaker_f0 = rng.uniform(90, 240)
    t = int(rng.uniform(0.02, 0.15) * fs)
    while t < n:
        seg = int(rng.uniform(0.08, 0.3) * fs)
        seg = min(seg, n - t)
        if seg < 64:
            break
        tt = np.arange(seg) / fs
        if rng.random() < 0.75:
            f0 = speaker_f0 * rng.uniform(0.85, 1.15) * (1 + rng.uniform(-0.15, 0.15) * tt / tt[-1])
            phase = 2 * np.pi * np.cumsum(f0) / fs
            n_harm = int(min(40, (fs / 2 - 200) // f0.max()))
            k = np.arange(1, n_harm + 1)[:, None]
            src = np.sum(np.sin(k * phase[None, :]) / k, axis=0)
            sig = np.zeros(seg)
            for _ in range(3):
                formant = rng.uniform(300, 3500)
                sig += _resonator(src, formant, rng.uniform(60, 200), fs) * rng.uniform(0.5, 1.0)
        else:
            lo = rng.uniform(2000, 4500)
            b, a = scipy.signal.butter(2, [lo, min(lo * 1.8, 7800)], btype="band", fs=fs)
            sig = scipy.signal.lfilter(b, a, rng.standard_normal(seg)) * 0.5
        env = np.hanning(seg) ** rng.uniform(0.5, 1.5)
        sig = sig * env
        peak = np.max(np.abs(sig)) + 1e-12
        out[t : t + seg] += sig / peak * rng.uniform(0.4, 1.0)
        t += seg
        if rng.random() < 0.35:
            t += int(rng.uniform(0.05, 0.3) * fs)
    rms = np.sqrt(np.mean(out**2)) + 1e-12
    out = out / rms * level * 0.3
    peak = np.max(np.abs(out))
    if peak > 0.9:
        out *= 0.9 / peak
    return out


def synthetic_clean_pool(n: int, seed: int = 0, duration: float = 3.5) -> list[np.ndarray]:
    seeds = np.random.SeedSequence(seed).spawn(n)
    return [synth_utterance(s, duration) for s in seeds]


def load_clean_pool(directory) -> list[np.ndarray]:
    """Load every WAV under ``directory`` as a mono 16 kHz array (left channel)."""
    paths = sorted(Path(directory).rglob("*.wav"))
    if not paths:
        raise FileNotFoundError(f"no .wav files under {directory}")
    return [read_wav(p).left.copy() for p in paths]


def make_noise(kind: str, n: int, rng, fs: int = SAMPLE_RATE) -> np.ndarray:
    """Unit-RMS mono noise of the given colour/type."""
    rng = np.random.default_rng(rng)
    if kind == "white":
        x = rng.standard_normal(n)
    elif kind in ("pink", "brown"):
        spec = np.fft.rfft(rng.standard_normal(n))
        f = np.fft.rfftfreq(n, 1 / fs)
        f[0] = f[1]
        spec /= f ** (0.5 if kind == "pink" else 1.0)
        x = np.fft.irfft(spec, n)
    elif kind == "babble":
        x = np.zeros(n)
        dur = n / fs + 0.1
        for _ in range(6):
            u = synth_utterance(rng.integers(2**32), dur, fs)
            x += u[:n]
    elif kind == "hum":
        t = np.arange(n) / fs
        f0 = rng.choice([50.0, 60.0]) * rng.uniform(0.98, 1.02)
        x = sum(np.sin(2 * np.pi * f0 * h * t + rng.uniform(0, 2 * np.pi)) / h for h in range(1, 8))
        x = x + 0.3 * rng.standard_normal(n)
    else:
        raise ValueError(f"unknown noise kind {kind!r}")
    return x / (np.sqrt(np.mean(x**2)) + 1e-12)
