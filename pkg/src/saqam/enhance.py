"""Binaural speech enhancement with complex ratio masks, trained with LogMSE
and/or the SAQAM distance as a loss."""
from __future__ import annotations

import logging
import os
import shlex
import subprocess
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import scipy.signal
import torch
import torch.nn.functional as F
from torch import nn

from .audio import SAMPLE_RATE, BinauralSignal, torch_istft, torch_stft, write_wav
from .binaural import binauralize, excerpt, synth_brir
from .corpus import NOISE_KINDS, make_noise
from .audio import mix_at_snr
from .metric import waveform_distances
from .model import NumericError, SaqamNet

log = logging.getLogger(__name__)

MASK_BOUND = 2.0
LOGMSE_EPS = 1e-8
SI_SDR_CAP = 60.0
MRSTFT_RESOLUTIONS = ((512, 128), (1024, 256), (2048, 512))
REGIMES = ("logmse", "scratch", "finetune")


class DegenerateError(ValueError):
    pass


@dataclass
class ComplexRatioMask:
    real: np.ndarray  # (2, F, T)
    imag: np.ndarray


class UNet(nn.Module):
    """Four stride-2 (frequency) encoder levels, four decoder levels with skips.

    Input planes are power-law compressed (re-L, im-L, re-R, im-R); the
    output is a bounded mask with the same four planes.
    """

    def __init__(self, channels=(16, 32, 32, 64), compress: float = 0.3):
        super().__init__()
        self.channels = tuple(channels)
        self.compress = compress
        self.enc = nn.ModuleList()
        ch = 4
        for c in channels:
            self.enc.append(nn.Sequential(nn.Conv2d(ch, c, 3, stride=(2, 1), padding=1), nn.ELU()))
            ch = c
        self.bottleneck = nn.Sequential(nn.Conv2d(ch, ch, 3, padding=1), nn.ELU())
        self.dec = nn.ModuleList()
        skips = (4,) + tuple(channels[:-1])
        for c_skip in reversed(skips):
            out = max(c_skip, 16)
            self.dec.append(nn.Sequential(nn.Conv2d(ch + c_skip, out, 3, padding=1), nn.ELU()))
            ch = out
        self.head = nn.Conv2d(ch, 4, 1)

    def planes(self, spec: torch.Tensor) -> torch.Tensor:
        """Complex ``(B, 2, F, T)`` -> compressed real planes ``(B, 4, F, T)``."""
        mag = torch.sqrt(spec.real**2 + spec.imag**2 + 1e-12)
        c = spec * (mag ** (self.compress - 1.0))
        return torch.stack([c[:, 0].real, c[:, 0].imag, c[:, 1].real, c[:, 1].imag], dim=1)

    def forward(self, spec: torch.Tensor) -> torch.Tensor:
        """Returns mask planes ``(B, 4, F, T)`` bounded to [-2, 2]."""
        x = self.planes(spec)
        skips = []
        for layer in self.enc:
            skips.append(x)
            x = layer(x)
        x = self.bottleneck(x)
        for layer, skip in zip(self.dec, reversed(skips)):
            x = F.interpolate(x, size=skip.shape[-2:], mode="nearest")
            x = layer(torch.cat([x, skip], dim=1))
        return MASK_BOUND * torch.tanh(self.head(x))


def apply_mask(spec: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Complex multiply each channel's STFT by its mask (re, im planes)."""
    m = torch.complex(mask[:, 0::2], mask[:, 1::2])
    return spec * m


def enhance_waves(unet: UNet, noisy: torch.Tensor):
    """Batched ``(B, 2, N)`` -> (mask planes, enhanced STFT, enhanced waveform)."""
    if not torch.isfinite(noisy).all():
        raise NumericError("NaN or Inf in noisy input")
    spec = torch_stft(noisy)
    mask = unet(spec)
    est = apply_mask(spec, mask)
    return mask, est, torch_istft(est, noisy.shape[-1])


@torch.no_grad()
def enhance_forward(unet: UNet, noisy: BinauralSignal) -> tuple[ComplexRatioMask, BinauralSignal]:
    if noisy.n_samples < SAMPLE_RATE:
        raise ValueError("enhancement input must be at least 1 s long")
    wave = torch.as_tensor(noisy.samples, dtype=torch.float32)[None]
    mask, _, out = enhance_waves(unet, wave)
    m = mask[0].double().numpy()
    return ComplexRatioMask(m[0::2], m[1::2]), BinauralSignal(out[0].double().numpy(), noisy.sample_rate)


def logmse_loss(est_stft: torch.Tensor, target_stft: torch.Tensor) -> torch.Tensor:
    """log(mean squared error of real and imaginary parts + 1e-8), over both channels."""
    if est_stft.shape != target_stft.shape:
        raise ValueError("shape mismatch")
    d = est_stft - target_stft
    return torch.log(torch.mean(d.real**2 + d.imag**2) + LOGMSE_EPS)


def freeze(model: nn.Module) -> nn.Module:
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


def saqam_loss(metric_model: SaqamNet, enhanced: torch.Tensor, clean: torch.Tensor) -> torch.Tensor:
    """Mean over the batch of D1 + D2 + D3 between enhanced and clean waveforms.

    The metric network must be frozen; gradients flow only into ``enhanced``.
    """
    if any(p.requires_grad for p in metric_model.parameters()):
        raise ValueError("metric model must be frozen (see freeze())")
    d = waveform_distances(metric_model, enhanced, clean)
    return (d["d1_lq"] + d["d2_sq"] + d["d3_ovrl"]).mean()


# ---------------------------------------------------------------- measures


def si_sdr(est: np.ndarray, ref: np.ndarray, cap: float = SI_SDR_CAP) -> float:
    ref_energy = float(np.dot(ref, ref))
    if ref_energy == 0.0:
        raise DegenerateError("reference signal is all zeros")
    alpha = float(np.dot(est, ref)) / ref_energy
    target = alpha * ref
    noise = est - target
    t_e, n_e = float(np.dot(target, target)), float(np.dot(noise, noise))
    if n_e <= 0.0 or t_e / n_e > 10 ** (cap / 10):
        return cap
    if t_e == 0.0:
        return -cap
    return float(max(10 * np.log10(t_e / n_e), -cap))


def _stft_mag(x, n_fft, hop):
    _, _, z = scipy.signal.stft(x, nperseg=n_fft, noverlap=n_fft - hop, window="hann", boundary=None, padded=False)
    return np.abs(z)


def mrstft(est: np.ndarray, ref: np.ndarray, resolutions=MRSTFT_RESOLUTIONS) -> float:
    """Mean over resolutions of spectral convergence + mean |log magnitude| difference."""
    vals = []
    for n_fft, hop in resolutions:
        if len(ref) < n_fft:
            continue
        se, sr = _stft_mag(est, n_fft, hop), _stft_mag(ref, n_fft, hop)
        sc = np.linalg.norm(sr - se) / max(np.linalg.norm(sr), 1e-12)
        lm = np.mean(np.abs(np.log(sr + 1e-7) - np.log(se + 1e-7)))
        vals.append(sc + lm)
    return float(np.mean(vals))


def measures(enhanced: BinauralSignal, clean: BinauralSignal) -> dict:
    """L2, Si-SDR (dB, capped) and multi-resolution STFT distance, per channel then averaged."""
    if enhanced.n_samples != clean.n_samples:
        raise ValueError("enhanced and clean must have equal length")
    if not np.any(clean.samples):
        raise DegenerateError("clean signal is all zeros")
    out = {"l2": [], "si_sdr_db": [], "mrstft": []}
    for e, c in zip(enhanced.samples, clean.samples):
        out["l2"].append(float(np.mean((e - c) ** 2)))
        out["si_sdr_db"].append(si_sdr(e, c))
        out["mrstft"].append(mrstft(e, c))
    return {k: float(np.mean(v)) for k, v in out.items()}


MEASURE_ENV = "SAQAM_MEASURE_CMD"


def external_measure(enhanced: BinauralSignal, clean: BinauralSignal, command: str | None = None) -> float:
    """Run an external scorer (e.g. PESQ/STOI) given as a shell template with
    ``{enhanced}`` and ``{clean}`` WAV placeholders; it must print one number."""
    command = command or os.environ.get(MEASURE_ENV)
    if not command:
        raise RuntimeError(f"no external measure configured (set ${MEASURE_ENV})")
    with tempfile.TemporaryDirectory() as tmp:
        e, c = Path(tmp) / "enhanced.wav", Path(tmp) / "clean.wav"
        write_wav(e, enhanced)
        write_wav(c, clean)
        cmd = command.format(enhanced=shlex.quote(str(e)), clean=shlex.quote(str(c)))
        res = subprocess.run(cmd, shell=True, check=True, capture_output=True, text=True)
    return float(res.stdout.strip().split()[-1])


# ---------------------------------------------------------------- data


@dataclass
class EnhancementPair:
    noisy: BinauralSignal
    clean: BinauralSignal
    snr_db: float


def build_enhancement_set(
    pool: Sequence[np.ndarray],
    n: int,
    seed: int,
    snr_range=(-5.0, 10.0),
    length: int = 3 * SAMPLE_RATE,
    azimuth_range=(-90.0, 90.0),
) -> list[EnhancementPair]:
    """Speech and a noise each rendered through their own synthetic BRIR, mixed at random SNR."""
    seeds = np.random.SeedSequence(seed).spawn(n)
    out = []
    for s in seeds:
        rng = np.random.default_rng(s)
        rt60 = float(rng.uniform(0.08, 0.5))
        speech_brir = synth_brir(float(rng.uniform(*azimuth_range)), 0.0, rt60, seed=rng.integers(2**32))
        clean = binauralize(excerpt(np.asarray(pool[int(rng.integers(len(pool)))]), rng, length), speech_brir)
        kind = NOISE_KINDS[int(rng.integers(len(NOISE_KINDS)))]
        noise_brir = synth_brir(float(rng.uniform(-179.0, 180.0)), 0.0, rt60, seed=rng.integers(2**32))
        noise = binauralize(make_noise(kind, length, rng) * 0.05, noise_brir)
        snr = float(rng.uniform(*snr_range))
        out.append(EnhancementPair(mix_at_snr(clean, noise, snr, rng), clean, snr))
    return out


def oracle_mask(noisy: BinauralSignal, clean: BinauralSignal, bound: float = MASK_BOUND) -> BinauralSignal:
    """Apply the clamped clean/noisy STFT ratio: an upper bound for bounded CRMs."""
    y = torch_stft(torch.as_tensor(noisy.samples))
    s = torch_stft(torch.as_tensor(clean.samples))
    ratio = s / torch.where(y.abs() > 1e-12, y, torch.full_like(y, 1e-12))
    m = torch.complex(ratio.real.clamp(-bound, bound), ratio.imag.clamp(-bound, bound))
    return BinauralSignal(torch_istft(y * m, noisy.n_samples).numpy(), noisy.sample_rate)


ENHANCER_FORMAT = "saqam-enhancer"


def save_enhancer(path, unet: UNet, metadata: dict | None = None) -> None:
    payload = {
        "format": ENHANCER_FORMAT,
        "version": 1,
        "channels": unet.channels,
        "compress": unet.compress,
        "state_dict": unet.state_dict(),
        "metadata": metadata or {},
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_enhancer(path) -> tuple[UNet, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != ENHANCER_FORMAT:
        raise ValueError(f"{path} is not an enhancer checkpoint")
    unet = UNet(tuple(payload["channels"]), payload["compress"])
    unet.load_state_dict(payload["state_dict"])
    unet.eval()
    return unet, payload["metadata"]


# ---------------------------------------------------------------- training


@dataclass
class EnhanceConfig:
    regime: str = "logmse"
    epochs: int = 20  # LogMSE epochs (pretraining for finetune)
    finetune_epochs: int = 5
    batch_size: int = 8
    lr: float = 1e-3
    finetune_lr: float = 1e-4
    lam: float = 1.0  # SAQAM weight in the scratch regime
    finetune_combined: bool = False  # keep LogMSE during finetuning
    crop_seconds: float = 0.0  # random training crop, 0 = whole clips
    saqam_crop_seconds: float | None = None  # crop fed to the metric, None = whole clip
    seed: int = 0


@dataclass
class EnhanceHistory:
    epoch_loss: list = field(default_factory=list)
    phase: list = field(default_factory=list)
    seconds: float = 0.0


def _stack(signals) -> torch.Tensor:
    return torch.as_tensor(np.stack([s.samples for s in signals]), dtype=torch.float32)


def _run_epochs(unet, pairs, epochs, lr, loss_fn, cfg, rng, hist, phase):
    opt = torch.optim.Adam([p for p in unet.parameters() if p.requires_grad], lr=lr)
    for _ in range(epochs):
        order = rng.permutation(len(pairs))
        losses = []
        for start in range(0, len(pairs), cfg.batch_size):
            batch = [pairs[i] for i in order[start : start + cfg.batch_size]]
            noisy, clean = _stack([p.noisy for p in batch]), _stack([p.clean for p in batch])
            crop = int(cfg.crop_seconds * SAMPLE_RATE) if cfg.crop_seconds else 0
            if crop and noisy.shape[-1] > crop:
                s = int(rng.integers(0, noisy.shape[-1] - crop + 1))
                noisy, clean = noisy[..., s : s + crop], clean[..., s : s + crop]
            _, est, wave = enhance_waves(unet, noisy)
            loss = loss_fn(est, wave, clean, rng)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
        hist.epoch_loss.append(float(np.mean(losses)))
        hist.phase.append(phase)
        log.info("%s epoch loss %.4f", phase, hist.epoch_loss[-1])


def train_enhancer(
    unet: UNet,
    pairs: Sequence[EnhancementPair],
    cfg: EnhanceConfig,
    metric_model: SaqamNet | None = None,
) -> EnhanceHistory:
    """Train in place under one regime.

    ``logmse``: LogMSE for ``epochs``. ``scratch``: LogMSE + lam * SAQAM for
    ``epochs``. ``finetune``: LogMSE for ``epochs`` (skip by passing an
    already-pretrained ``unet`` with ``epochs=0``), then SAQAM only (or
    LogMSE + SAQAM with ``finetune_combined``) for ``finetune_epochs``.
    """
    if cfg.regime not in REGIMES:
        raise ValueError(f"regime must be one of {REGIMES}")
    if cfg.regime != "logmse":
        if metric_model is None:
            raise ValueError(f"regime {cfg.regime!r} needs a metric model")
        freeze(metric_model)
    rng = np.random.default_rng(cfg.seed)
    torch.manual_seed(cfg.seed)
    crop = None if cfg.saqam_crop_seconds is None else int(cfg.saqam_crop_seconds * SAMPLE_RATE)

    def target_spec(clean):
        return torch_stft(clean)

    def sq(wave, clean, rng):
        if crop is not None and wave.shape[-1] > crop:
            s = int(rng.integers(0, wave.shape[-1] - crop + 1))
            wave, clean = wave[..., s : s + crop], clean[..., s : s + crop]
        return saqam_loss(metric_model, wave, clean)

    def loss_logmse(est, wave, clean, rng):
        return logmse_loss(est, target_spec(clean))

    def loss_scratch(est, wave, clean, rng):
        return logmse_loss(est, target_spec(clean)) + cfg.lam * sq(wave, clean, rng)

    def loss_finetune(est, wave, clean, rng):
        extra = logmse_loss(est, target_spec(clean)) if cfg.finetune_combined else 0.0
        return sq(wave, clean, rng) + extra

    hist = EnhanceHistory()
    t0 = time.time()
    unet.train()
    if cfg.regime == "scratch":
        _run_epochs(unet, pairs, cfg.epochs, cfg.lr, loss_scratch, cfg, rng, hist, "scratch")
    else:
        _run_epochs(unet, pairs, cfg.epochs, cfg.lr, loss_logmse, cfg, rng, hist, "logmse")
        if cfg.regime == "finetune":
            _run_epochs(unet, pairs, cfg.finetune_epochs, cfg.finetune_lr, loss_finetune, cfg, rng, hist, "finetune")
    unet.eval()
    hist.seconds = time.time() - t0
    return hist


@torch.no_grad()
def evaluate_enhancer(
    unet: UNet | None,
    pairs: Sequence[EnhancementPair],
    extra: dict[str, Callable] | None = None,
) -> dict:
    """Mean measures over ``pairs``; ``unet=None`` scores the noisy input itself."""
    rows = []
    for p in pairs:
        est = p.noisy if unet is None else enhance_forward(unet, p.noisy)[1]
        m = measures(est, p.clean)
        for name, fn in (extra or {}).items():
            m[name] = fn(est, p.clean)
        rows.append(m)
    return {k: float(np.mean([r[k] for r in rows])) for k in rows[0]}
