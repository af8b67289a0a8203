"""Training-data simulation: BRIRs, binauralization, perturbations, triplets.

Angles follow the usual head-related convention: azimuth in (-180, 180]
with positive values to the listener's right, elevation in [-90, 90].
"""
from __future__ import annotations

import csv
import logging
import os
import shlex
import subprocess
import tempfile
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import scipy.signal

from .audio import (
    FFT_SIZE,
    HOP,
    SAMPLE_RATE,
    BinauralSignal,
    SpectroFeatures,
    crop_or_pad,
    istft,
    mix_at_snr,
    read_wav,
    resample,
    stft,
    write_wav,
)
from .corpus import NOISE_KINDS, make_noise

log = logging.getLogger(__name__)

HEAD_RADIUS_M = 0.09
SPEED_OF_SOUND = 343.0
MAX_ILD_DB = 6.0
DIRECT_DELAY = 16  # samples before the direct path, room for the fractional-delay kernel
CLIP_SECONDS = 3.0
CLIP_SAMPLES = int(CLIP_SECONDS * SAMPLE_RATE)
SHIFT_SAMPLES = int(0.25 * SAMPLE_RATE)

AZ_BINS = 50
EL_BINS = 25
BIN_WIDTH_DEG = 7.2

# level range per perturbation kind, in the kind's native unit
LEVEL_RANGES = {
    "additive_noise": (-20.0, 30.0),  # SNR dB
    "binaural_noise": (-20.0, 30.0),  # SNR dB
    "clip": (0.05, 1.0),  # threshold relative to signal peak
    "freq_mask": (1, 64),  # masked band width in STFT bins (integer)
    "resample": (0.5, 0.999),  # intermediate rate factor
    "pitch_shift": (-4.0, 4.0),  # semitones
}
PERTURBATIONS = tuple(LEVEL_RANGES)


class SimulationError(Exception):
    pass


class DomainError(SimulationError, ValueError):
    pass


class DataError(SimulationError, ValueError):
    pass


# ---------------------------------------------------------------- BRIRs


@dataclass
class Brir:
    left_ir: np.ndarray
    right_ir: np.ndarray
    azimuth_deg: float
    elevation_deg: float
    rt60_s: float = 0.0

    def __post_init__(self):
        self.left_ir = np.asarray(self.left_ir, dtype=np.float64)
        self.right_ir = np.asarray(self.right_ir, dtype=np.float64)
        if self.left_ir.shape != self.right_ir.shape or self.left_ir.ndim != 1:
            raise ValueError("left and right IRs must be 1-D and equally long")
        if not (np.all(np.isfinite(self.left_ir)) and np.all(np.isfinite(self.right_ir))):
            raise ValueError("non-finite impulse response")
        _check_angles(self.azimuth_deg, self.elevation_deg)

    @property
    def label(self) -> "SourceLabel":
        return SourceLabel.from_angles(self.azimuth_deg, self.elevation_deg)


@dataclass(frozen=True)
class SourceLabel:
    az_bin: int
    el_bin: int

    @classmethod
    def from_angles(cls, azimuth_deg: float, elevation_deg: float) -> "SourceLabel":
        return cls(azimuth_bin(azimuth_deg), elevation_bin(elevation_deg))


def azimuth_bin(azimuth_deg: float) -> int:
    return min(int(np.floor((azimuth_deg + 180.0) / BIN_WIDTH_DEG)), AZ_BINS - 1)


def elevation_bin(elevation_deg: float) -> int:
    return min(int(np.floor((elevation_deg + 90.0) / BIN_WIDTH_DEG)), EL_BINS - 1)


def _check_angles(az, el):
    if not (-180.0 < az <= 180.0):
        raise DomainError(f"azimuth {az} outside (-180, 180]")
    if not (-90.0 <= el <= 90.0):
        raise DomainError(f"elevation {el} outside [-90, 90]")


def interaural_cues(azimuth_deg: float, elevation_deg: float) -> tuple[float, float]:
    """(ITD seconds, ILD dB); positive values mean the right ear leads / is louder."""
    lateral = np.sin(np.radians(azimuth_deg)) * np.cos(np.radians(elevation_deg))
    return HEAD_RADIUS_M / SPEED_OF_SOUND * lateral, MAX_ILD_DB * lateral


def fractional_delay(delay: float, length: int, half_width: int = 16) -> np.ndarray:
    """Hann-windowed sinc impulse delayed by ``delay`` samples."""
    n = np.arange(length)
    d = n - delay
    h = np.sinc(d)
    win = np.where(np.abs(d) < half_width, 0.5 * (1 + np.cos(np.pi * d / half_width)), 0.0)
    return h * win


def synth_brir(
    azimuth_deg: float,
    elevation_deg: float = 0.0,
    rt60_s: float = 0.0,
    seed=None,
    drr_db: float = 6.0,
    fs: int = SAMPLE_RATE,
) -> Brir:
    """Spherical-head direct path plus an exponentially decaying noise tail.

    The tails of the two ears are independent draws with identical
    statistics; ``drr_db`` is the direct-to-reverberant energy ratio.
    """
    _check_angles(azimuth_deg, elevation_deg)
    if not (0.0 <= rt60_s <= 1.0):
        raise DomainError(f"rt60 {rt60_s} outside [0, 1]")
    itd, ild = interaural_cues(azimuth_deg, elevation_deg)
    tail_len = int(round(rt60_s * fs))
    length = 2 * DIRECT_DELAY + int(np.ceil(abs(itd) * fs)) + tail_len + 1
    lag = itd * fs
    # the lagging ear gets the extra delay
    left = fractional_delay(DIRECT_DELAY + max(lag, 0.0), length) * 10 ** (-ild / 40)
    right = fractional_delay(DIRECT_DELAY + max(-lag, 0.0), length) * 10 ** (ild / 40)
    if tail_len > 0:
        rng = np.random.default_rng(seed)
        t = np.arange(tail_len) / fs
        env = np.exp(-3.0 * np.log(10.0) * t / rt60_s)
        onset = DIRECT_DELAY + int(0.0025 * fs)
        direct_energy = 0.5 * (np.sum(left**2) + np.sum(right**2))
        target = direct_energy * 10 ** (-drr_db / 10)
        for ir in (left, right):
            tail = rng.standard_normal(tail_len) * env
            tail *= np.sqrt(target / np.sum(tail**2))
            end = min(length, onset + tail_len)
            ir[onset:end] += tail[: end - onset]
    peak = max(np.max(np.abs(left)), np.max(np.abs(right)))
    if peak > 1.0:
        left, right = left / peak, right / peak
    return Brir(left, right, float(azimuth_deg), float(elevation_deg), float(rt60_s))


def load_brir_set(csv_path) -> list[Brir]:
    """Load user BRIRs listed in a CSV.

    Columns: ``azimuth_deg, elevation_deg, rt60_s`` plus either ``path`` (a
    2-channel WAV) or ``left_path`` and ``right_path`` (mono WAVs). Relative
    paths resolve against the CSV's directory.
    """
    csv_path = Path(csv_path)
    out = []
    with open(csv_path, newline="") as fh:
        for row in csv.DictReader(fh):
            base = csv_path.parent
            if row.get("path"):
                sig = read_wav(base / row["path"])
                left, right = sig.left, sig.right
            else:
                left = read_wav(base / row["left_path"]).left
                right = read_wav(base / row["right_path"]).left
            out.append(
                Brir(
                    left,
                    right,
                    float(row["azimuth_deg"]),
                    float(row["elevation_deg"]),
                    float(row.get("rt60_s") or 0.0),
                )
            )
    return out


@dataclass
class BrirSampler:
    """Draws synthetic BRIRs; ``azimuths`` restricts directions to a grid."""

    azimuths: Sequence[float] | None = None
    azimuth_range: tuple[float, float] = (-90.0, 90.0)
    elevation_range: tuple[float, float] = (0.0, 0.0)
    rt60_range: tuple[float, float] = (0.08, 0.97)
    drr_db: float = 6.0

    def __call__(self, rng: np.random.Generator) -> Brir:
        if self.azimuths is not None:
            az = float(rng.choice(np.asarray(self.azimuths)))
        else:
            az = float(rng.uniform(*self.azimuth_range))
            if az <= -180.0:
                az += 360.0
        el = float(rng.uniform(*self.elevation_range))
        rt60 = float(rng.uniform(*self.rt60_range))
        return synth_brir(az, el, rt60, seed=rng.integers(2**32), drr_db=self.drr_db)


@dataclass
class BrirSetSampler:
    """Draws uniformly from a fixed list of (e.g. measured) BRIRs."""

    brirs: Sequence[Brir]

    def __call__(self, rng: np.random.Generator) -> Brir:
        return self.brirs[int(rng.integers(len(self.brirs)))]


# ---------------------------------------------------------------- rendering


def binauralize(mono, brir: Brir) -> BinauralSignal:
    """Convolve a mono source with both ears' IRs, keeping the source length."""
    mono = np.asarray(mono, dtype=np.float64)
    if mono.ndim != 1 or mono.size == 0:
        raise ValueError("mono source must be a non-empty 1-D array")
    n = mono.size
    out = np.stack(
        [
            scipy.signal.fftconvolve(mono, brir.left_ir)[:n],
            scipy.signal.fftconvolve(mono, brir.right_ir)[:n],
        ]
    )
    peak = np.max(np.abs(out))
    if peak > 1.0:
        out /= peak
    return BinauralSignal(out)


# ---------------------------------------------------------------- perturbations


def check_level(kind: str, level: float) -> None:
    if kind not in LEVEL_RANGES:
        raise DomainError(f"unknown perturbation {kind!r}; expected one of {PERTURBATIONS}")
    lo, hi = LEVEL_RANGES[kind]
    if not (lo <= level <= hi):
        raise DomainError(f"{kind} level {level} outside [{lo}, {hi}]")


def _binaural_noise(n: int, rng: np.random.Generator) -> BinauralSignal:
    kind = NOISE_KINDS[int(rng.integers(len(NOISE_KINDS)))]
    src = make_noise(kind, n, rng)
    brir = synth_brir(float(rng.uniform(-179.0, 180.0)), 0.0, float(rng.uniform(0.1, 0.6)), seed=rng.integers(2**32))
    directional = binauralize(src / 4.0, brir).samples
    diffuse = np.stack([make_noise("white", n, rng), make_noise("white", n, rng)])
    return BinauralSignal(directional + 0.1 * np.std(directional) * diffuse)


def mask_band(features: SpectroFeatures, start_bin: int, width: int) -> SpectroFeatures:
    """Zero ``width`` frequency bins from ``start_bin`` in both channels."""
    mag = features.mag.copy()
    mag[:, start_bin : start_bin + width, :] = 0.0
    return SpectroFeatures(mag, features.phase.copy(), features.hop, features.fft_size)


def _phase_vocoder_stretch(x: np.ndarray, rate: float, n_fft: int = 512, hop: int = 128) -> np.ndarray:
    """Time-stretch by ``rate`` (>1 shortens) keeping pitch."""
    win = scipy.signal.get_window("hann", n_fft)
    pad = np.pad(x, (n_fft // 2, n_fft // 2))
    frames = np.lib.stride_tricks.sliding_window_view(pad, n_fft)[::hop] * win
    spec = np.fft.rfft(frames, axis=-1)
    steps = np.arange(0, spec.shape[0] - 1, rate)
    omega = 2 * np.pi * hop * np.arange(spec.shape[1]) / n_fft
    phase = np.angle(spec[0])
    out = np.empty((len(steps), spec.shape[1]), dtype=complex)
    for i, s in enumerate(steps):
        k = int(s)
        frac = s - k
        mag = (1 - frac) * np.abs(spec[k]) + frac * np.abs(spec[k + 1])
        out[i] = mag * np.exp(1j * phase)
        dphi = np.angle(spec[k + 1]) - np.angle(spec[k]) - omega
        dphi -= 2 * np.pi * np.round(dphi / (2 * np.pi))
        phase = phase + omega + dphi
    ys = np.fft.irfft(out, n_fft, axis=-1) * win
    length = (len(steps) - 1) * hop + n_fft
    y = np.zeros(length)
    norm = np.zeros(length)
    for i, frame in enumerate(ys):
        y[i * hop : i * hop + n_fft] += frame
        norm[i * hop : i * hop + n_fft] += win**2
    y[norm > 1e-8] /= norm[norm > 1e-8]
    return y[n_fft // 2 : -(n_fft // 2) or None]


def pitch_shift(x: np.ndarray, semitones: float) -> np.ndarray:
    if semitones == 0:
        return np.array(x, dtype=np.float64)
    factor = 2.0 ** (semitones / 12.0)
    stretched = _phase_vocoder_stretch(x, 1.0 / factor)
    frac = Fraction(factor).limit_denominator(200)
    # resample to 1/factor of the length -> pitch scales by factor
    shifted = scipy.signal.resample_poly(stretched, frac.denominator, frac.numerator)
    return crop_or_pad(shifted, x.shape[-1])


def perturb(signal: BinauralSignal, kind: str, level: float, seed=None, noise: BinauralSignal | None = None, start_bin: int | None = None) -> BinauralSignal:
    """Apply one degradation at a given level.

    Args:
        kind: one of :data:`PERTURBATIONS`.
        level: severity in the kind's native unit (see :data:`LEVEL_RANGES`).
        seed: drives every random choice; equal seeds give equal noises, so
            the same noise can be added at several levels.
        noise: optional external noise for ``additive_noise``; a synthetic
            noise is generated otherwise.
        start_bin: first masked bin for ``freq_mask`` (random if omitted).
    """
    check_level(kind, level)
    rng = np.random.default_rng(seed)
    x = signal.samples
    n = signal.n_samples
    if kind == "additive_noise":
        if noise is None:
            nk = NOISE_KINDS[int(rng.integers(len(NOISE_KINDS)))]
            noise = BinauralSignal.from_mono(make_noise(nk, n, rng))
        return mix_at_snr(signal, noise, level, rng)
    if kind == "binaural_noise":
        return mix_at_snr(signal, _binaural_noise(n, rng), level, rng)
    if kind == "clip":
        thr = level * np.max(np.abs(x))
        return BinauralSignal(np.clip(x, -thr, thr), signal.sample_rate)
    if kind == "freq_mask":
        width = int(round(level))
        feats = stft(signal)
        if start_bin is None:
            start_bin = int(rng.integers(1, feats.n_freq - width))
        out = istft(mask_band(feats, start_bin, width), n).samples
        return BinauralSignal(out, signal.sample_rate)
    if kind == "resample":
        low = int(round(signal.sample_rate * level))
        y = resample(resample(x, signal.sample_rate, low), low, signal.sample_rate)
        return BinauralSignal(np.clip(crop_or_pad(y, n), -1, 1), signal.sample_rate)
    if kind == "pitch_shift":
        y = np.stack([pitch_shift(ch, level) for ch in x])
        return BinauralSignal(np.clip(y, -1, 1), signal.sample_rate)
    raise DomainError(kind)  # unreachable: check_level covers it


CODEC_ENV = "SAQAM_CODEC_CMD"


def external_codec(signal: BinauralSignal, command: str | None = None) -> BinauralSignal:
    """Round-trip through an external codec command (e.g. an MP3 encoder/decoder).

    ``command`` (or ``$SAQAM_CODEC_CMD``) is a shell template with ``{input}``
    and ``{output}`` placeholders, both WAV paths.
    """
    command = command or os.environ.get(CODEC_ENV)
    if not command:
        raise SimulationError(f"no codec command configured (set ${CODEC_ENV})")
    with tempfile.TemporaryDirectory() as tmp:
        src, dst = Path(tmp) / "in.wav", Path(tmp) / "out.wav"
        write_wav(src, signal)
        cmd = command.format(input=shlex.quote(str(src)), output=shlex.quote(str(dst)))
        subprocess.run(cmd, shell=True, check=True, capture_output=True)
        out = read_wav(dst)
    return BinauralSignal(crop_or_pad(out.samples, signal.n_samples), signal.sample_rate)


def augment_shift(signal: BinauralSignal, seed=None, length: int = CLIP_SAMPLES) -> BinauralSignal:
    """Add 0.25 s of silence at the start or the end, then crop back to ``length``."""
    rng = np.random.default_rng(seed)
    pad = np.zeros((2, SHIFT_SAMPLES))
    if rng.random() < 0.5:
        out = crop_or_pad(np.concatenate([pad, signal.samples], axis=1), length)
    else:
        y = np.concatenate([signal.samples, pad], axis=1)
        y = y[:, -length:]
        out = np.concatenate([np.zeros((2, length - y.shape[1])), y], axis=1)
    return BinauralSignal(out, signal.sample_rate)


# ---------------------------------------------------------------- triplets


@dataclass
class Triplet:
    anchor: BinauralSignal
    positive: BinauralSignal
    negative: BinauralSignal
    perturbation_id: str
    levels: tuple[float, float, float]
    utterance_ids: tuple[int, int, int]
    labels: tuple[SourceLabel, SourceLabel, SourceLabel] = field(default=None)
    azimuths: tuple[float, float, float] = field(default=None)

    def __post_init__(self):
        la, lp, ln = self.levels
        if not abs(la - lp) < abs(la - ln):
            raise DataError(f"levels {self.levels} violate the triplet ordering")
        if len(set(self.utterance_ids)) != 3:
            raise DataError(f"utterances {self.utterance_ids} are not distinct")

    @property
    def members(self) -> tuple[BinauralSignal, BinauralSignal, BinauralSignal]:
        return self.anchor, self.positive, self.negative


def excerpt(mono: np.ndarray, rng: np.random.Generator, length: int = CLIP_SAMPLES) -> np.ndarray:
    if mono.size > length:
        return mono[int(rng.integers(0, mono.size - length + 1)) :][:length]
    return crop_or_pad(mono, length)


def draw_levels(kind: str, rng: np.random.Generator, max_retries: int = 100) -> tuple[float, float, float]:
    """Three levels ordered (anchor, positive, negative).

    The first draw is the anchor; of the other two the closer one becomes the
    positive. Ties are redrawn.
    """
    lo, hi = LEVEL_RANGES[kind]
    for _ in range(max_retries):
        if kind == "freq_mask":
            a, b, c = (float(v) for v in rng.integers(lo, hi + 1, 3))
        else:
            a, b, c = (float(v) for v in rng.uniform(lo, hi, 3))
        if abs(a - b) == abs(a - c):
            continue
        return (a, b, c) if abs(a - b) < abs(a - c) else (a, c, b)
    raise DataError(f"could not draw strictly ordered levels for {kind} in {max_retries} tries")


def make_triplet(
    clean_pool: Sequence[np.ndarray],
    perturbation_id: str,
    seed=None,
    brir_sampler: Callable[[np.random.Generator], Brir] | None = None,
    length: int = CLIP_SAMPLES,
) -> Triplet:
    """Three different utterances, each rendered through its own BRIR, then
    degraded with the same perturbation (same seed, same noise) at three levels."""
    if len(clean_pool) < 3:
        raise DataError("clean pool needs at least 3 utterances")
    if perturbation_id not in LEVEL_RANGES:
        raise DomainError(f"unknown perturbation {perturbation_id!r}")
    rng = np.random.default_rng(seed)
    sampler = brir_sampler or BrirSampler()
    ids = tuple(int(i) for i in rng.choice(len(clean_pool), 3, replace=False))
    levels = draw_levels(perturbation_id, rng)
    pert_seed = int(rng.integers(2**32))
    members, labels, azimuths = [], [], []
    for idx, level in zip(ids, levels):
        brir = sampler(rng)
        clean = binauralize(excerpt(np.asarray(clean_pool[idx]), rng, length), brir)
        members.append(perturb(clean, perturbation_id, level, seed=pert_seed))
        labels.append(brir.label)
        azimuths.append(brir.azimuth_deg)
    return Triplet(*members, perturbation_id, levels, ids, tuple(labels), tuple(azimuths))


def make_doa_clip(
    clean_pool: Sequence[np.ndarray],
    azimuth_deg: float,
    elevation_deg: float = 0.0,
    seed=None,
    rt60_range: tuple[float, float] = (0.08, 0.5),
    perturbation: str | None = None,
    level: float | None = None,
    length: int = CLIP_SAMPLES,
) -> tuple[BinauralSignal, SourceLabel, int]:
    """One localization example: (signal, label, utterance index)."""
    rng = np.random.default_rng(seed)
    idx = int(rng.integers(len(clean_pool)))
    brir = synth_brir(azimuth_deg, elevation_deg, float(rng.uniform(*rt60_range)), seed=rng.integers(2**32))
    sig = binauralize(excerpt(np.asarray(clean_pool[idx]), rng, length), brir)
    if perturbation is not None:
        sig = perturb(sig, perturbation, level, seed=rng.integers(2**32))
    return sig, brir.label, idx


# ---------------------------------------------------------------- manifests


def write_triplets(triplets: Sequence[Triplet], out_dir) -> Path:
    """Write member WAVs and a JSON-lines manifest; returns the manifest path."""
    import json

    out_dir = Path(out_dir)
    (out_dir / "wav").mkdir(parents=True, exist_ok=True)
    manifest = out_dir / "triplets.jsonl"
    with open(manifest, "w") as fh:
        for i, t in enumerate(triplets):
            row = {
                "index": i,
                "perturbation": t.perturbation_id,
                "levels": list(t.levels),
                "utterance_ids": list(t.utterance_ids),
            }
            if t.labels is not None:
                row["az_bins"] = [lab.az_bin for lab in t.labels]
                row["el_bins"] = [lab.el_bin for lab in t.labels]
                row["azimuths"] = list(t.azimuths)
            for role, sig in zip(("anchor", "positive", "negative"), t.members):
                rel = f"wav/{i:06d}_{role}.wav"
                write_wav(out_dir / rel, sig)
                row[role] = rel
            fh.write(json.dumps(row) + "\n")
    return manifest


def validate_manifest(path) -> list[str]:
    """Re-check triplet invariants on a written manifest; returns problems found."""
    import json

    problems = []
    with open(path) as fh:
        for line in fh:
            row = json.loads(line)
            la, lp, ln = row["levels"]
            if not abs(la - lp) < abs(la - ln):
                problems.append(f"row {row['index']}: level ordering")
            if len(set(row["utterance_ids"])) != 3:
                problems.append(f"row {row['index']}: repeated utterance")
            for role in ("anchor", "positive", "negative"):
                if not (Path(path).parent / row[role]).is_file():
                    problems.append(f"row {row['index']}: missing {role} file")
    return problems
