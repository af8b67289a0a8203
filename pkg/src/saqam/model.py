"""Shared-body multi-task network.

Layout: Inception-style feature extractor over (frequency, time) ->
weight-normalized dilated TCN over time -> two heads. The LQ head maps each
frame to a 64-d embedding and mean-pools it; the SQ head classifies azimuth
(50 bins) and elevation (25 bins) per frame. The time axis is never pooled,
so every head produces one estimate per STFT frame.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from torch.nn.utils.parametrizations import weight_norm

from .audio import N_FREQ, SpectroFeatures

INPUT_MODES = ("both", "mag_only", "phase_only")
CHECKPOINT_FORMAT = "saqam-checkpoint"
CHECKPOINT_VERSION = 1

ActivationStack = dict  # ordered name -> tensor (batch, channels, [freq,] time)


class ConfigError(ValueError):
    pass


class NumericError(ValueError):
    pass


@dataclass
class ModelConfig:
    inception_blocks: int = 6
    inception_width: int = 64
    tcn_blocks: int = 4
    tcn_kernel: int = 3
    tcn_channels: tuple = (32, 64, 64, 128)
    tcn_dilations: tuple = (1, 2, 4, 8)
    lq_embed_dim: int = 64
    sq_hidden: int = 128
    az_bins: int = 50
    el_bins: int = 25
    input_channels: int = 4
    input_mode: str = "both"
    n_freq: int = N_FREQ

    def __post_init__(self):
        self.tcn_channels = tuple(self.tcn_channels)
        self.tcn_dilations = tuple(self.tcn_dilations)
        self.validate()

    def validate(self) -> None:
        if (self.az_bins, self.el_bins, self.lq_embed_dim) != (50, 25, 64):
            raise ConfigError("az_bins, el_bins and lq_embed_dim are fixed at 50, 25 and 64")
        if self.input_channels != 4:
            raise ConfigError("input_channels must be 4 (mag-L, mag-R, phase-L, phase-R)")
        if self.input_mode not in INPUT_MODES:
            raise ConfigError(f"input_mode must be one of {INPUT_MODES}")
        if not (len(self.tcn_channels) == len(self.tcn_dilations) == self.tcn_blocks):
            raise ConfigError("tcn_channels and tcn_dilations need one entry per TCN block")
        if self.inception_blocks < 1 or self.inception_width < 3:
            raise ConfigError("need at least one Inception block of width >= 3")
        if self.tcn_kernel < 1 or self.tcn_kernel % 2 == 0:
            raise ConfigError("tcn_kernel must be odd")

    @property
    def pooled_freq(self) -> int:
        f = self.n_freq
        for _ in range(self.inception_blocks):
            f = -(-f // 2)
        return f

    @property
    def receptive_field(self) -> int:
        """Temporal receptive field of the TCN in frames."""
        return 1 + 2 * sum((self.tcn_kernel - 1) * d for d in self.tcn_dilations)


def _he(conv):
    """He-normal weights and zero bias; the framework default shrinks the
    signal layer by layer until the biases dominate the deep activations."""
    nn.init.kaiming_normal_(conv.weight, nonlinearity="relu")
    nn.init.zeros_(conv.bias)
    return conv


class InceptionBlock(nn.Module):
    def __init__(self, in_ch: int, width: int):
        super().__init__()
        b = width // 3
        widths = (width - 2 * b, b, b)
        self.branches = nn.ModuleList(
            _he(nn.Conv2d(in_ch, w, k, padding=k // 2)) for w, k in zip(widths, (1, 3, 5))
        )

    def forward(self, x):
        x = F.relu(torch.cat([br(x) for br in self.branches], dim=1))
        x = F.max_pool2d(x, 3, stride=1, padding=1)
        # halve the frequency axis only
        return F.max_pool2d(x, (2, 1), stride=(2, 1), ceil_mode=True)


class TemporalBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int, dilation: int):
        super().__init__()
        pad = dilation * (kernel - 1) // 2
        self.conv1 = weight_norm(_he(nn.Conv1d(in_ch, out_ch, kernel, padding=pad, dilation=dilation)))
        self.conv2 = weight_norm(_he(nn.Conv1d(out_ch, out_ch, kernel, padding=pad, dilation=dilation)))
        self.downsample = _he(nn.Conv1d(in_ch, out_ch, 1)) if in_ch != out_ch else None

    def forward(self, x):
        y = F.relu(self.conv1(x))
        y = self.conv2(y)
        res = x if self.downsample is None else self.downsample(x)
        return F.relu(y + res)


@dataclass
class ForwardOutput:
    lq_embedding: torch.Tensor  # (B, 64)
    lq_frames: torch.Tensor  # (B, T, 64)
    az_logits: torch.Tensor  # (B, T, 50)
    el_logits: torch.Tensor  # (B, T, 25)
    body_stack: ActivationStack = field(default_factory=dict)
    lq_stack: ActivationStack = field(default_factory=dict)
    sq_stack: ActivationStack = field(default_factory=dict)
    feature_stack: ActivationStack = field(default_factory=dict)

    def item(self, i: int) -> "ForwardOutput":
        pick = lambda d: {k: v[i] for k, v in d.items()}  # noqa: E731
        return ForwardOutput(
            self.lq_embedding[i],
            self.lq_frames[i],
            self.az_logits[i],
            self.el_logits[i],
            pick(self.body_stack),
            pick(self.lq_stack),
            pick(self.sq_stack),
            pick(self.feature_stack),
        )


class SaqamNet(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        blocks, ch = [], config.input_channels
        for _ in range(config.inception_blocks):
            blocks.append(InceptionBlock(ch, config.inception_width))
            ch = config.inception_width
        self.inception = nn.ModuleList(blocks)
        tcn, ch = [], config.inception_width * config.pooled_freq
        for out_ch, dil in zip(config.tcn_channels, config.tcn_dilations):
            tcn.append(TemporalBlock(ch, out_ch, config.tcn_kernel, dil))
            ch = out_ch
        self.tcn = nn.ModuleList(tcn)
        self.lq_conv1 = _he(nn.Conv1d(ch, config.lq_embed_dim, 3, padding=1))
        self.lq_conv2 = nn.Conv1d(config.lq_embed_dim, config.lq_embed_dim, 1)
        self.sq_hidden = _he(nn.Conv1d(ch, config.sq_hidden, 1))
        self.sq_az = nn.Conv1d(config.sq_hidden, config.az_bins, 1)
        self.sq_el = nn.Conv1d(config.sq_hidden, config.el_bins, 1)
        for head in (self.sq_az, self.sq_el):
            # near-uniform initial posteriors; saturated ones stall the EMD gradient
            nn.init.normal_(head.weight, std=0.01)
            nn.init.zeros_(head.bias)

    def n_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def input_planes(self, mag: torch.Tensor, phase: torch.Tensor) -> torch.Tensor:
        """Stack (B, 2, F, T) magnitude and phase into the 4 input planes.

        The encoding is an invertible re-expression of (mag-L, mag-R,
        phase-L, phase-R): left log-magnitude, right/left log-magnitude
        ratio, left phase, and the wrapped right-minus-left phase. Handing
        the interaural differences over directly makes localization learn
        several times faster than from two absolute wrapped phases. Planes
        disabled by ``input_mode`` are zeroed.
        """
        logmag = (torch.log(mag + 1e-4) + 4.0) / 4.0
        ipd = torch.remainder(phase[:, 1] - phase[:, 0] + np.pi, 2 * np.pi) - np.pi
        mags = torch.stack([logmag[:, 0], logmag[:, 1] - logmag[:, 0]], dim=1)
        phases = torch.stack([phase[:, 0], ipd], dim=1) / np.pi
        mode = self.config.input_mode
        if mode == "mag_only":
            phases = torch.zeros_like(phases)
        elif mode == "phase_only":
            mags = torch.zeros_like(mags)
        return torch.cat([mags, phases], dim=1)

    def forward(self, mag: torch.Tensor, phase: torch.Tensor, heads: str = "both") -> ForwardOutput:
        if mag.dim() == 3:
            mag, phase = mag[None], phase[None]
        if not (torch.isfinite(mag).all() and torch.isfinite(phase).all()):
            raise NumericError("NaN or Inf in model input")
        x = self.input_planes(mag, phase)
        feature_stack = {}
        for i, block in enumerate(self.inception):
            x = block(x)
            feature_stack[f"inception.{i}"] = x
        b, c, f, t = x.shape
        h = x.reshape(b, c * f, t)
        body = {}
        for i, block in enumerate(self.tcn):
            h = block(h)
            body[f"tcn.{i}"] = h

        lq, sq = {}, {}
        emb = frames = az = el = None
        if heads in ("both", "lq"):
            z = F.relu(self.lq_conv1(h))
            frames = self.lq_conv2(z)
            emb = frames.mean(dim=-1)
            lq = {"lq.conv1": z, "lq.frames": frames, "lq.embedding": emb[..., None]}
            frames = frames.transpose(1, 2)
        if heads in ("both", "sq"):
            s = F.relu(self.sq_hidden(h))
            az_l = self.sq_az(s)
            el_l = self.sq_el(s)
            sq = {"sq.hidden": s, "sq.az_logits": az_l, "sq.el_logits": el_l}
            az, el = az_l.transpose(1, 2), el_l.transpose(1, 2)
        return ForwardOutput(emb, frames, az, el, body, lq, sq, feature_stack)


def build_model(config: ModelConfig | None = None, seed: int = 0) -> SaqamNet:
    """Deterministically initialized network."""
    config = config or ModelConfig()
    config.validate()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = SaqamNet(config)
    return model


def features_to_tensors(features: SpectroFeatures, dtype=torch.float32):
    return (
        torch.as_tensor(features.mag, dtype=dtype)[None],
        torch.as_tensor(features.phase, dtype=dtype)[None],
    )


def forward(model: SaqamNet, features: SpectroFeatures) -> ForwardOutput:
    """Unbatched forward pass on one :class:`SpectroFeatures`."""
    mag, phase = features_to_tensors(features, next(model.parameters()).dtype)
    return model(mag, phase).item(0)


@dataclass
class DoaPrediction:
    az_frames: np.ndarray
    el_frames: np.ndarray
    az_bin: int
    el_bin: int
    az_probs: np.ndarray
    el_probs: np.ndarray


def doa_from_logits(az_logits, el_logits) -> DoaPrediction:
    """Frame-wise argmax and clip-level argmax of time-averaged softmaxes.

    Logits are ``(T, bins)``; ties resolve to the lowest index.
    """
    az = torch.softmax(torch.as_tensor(az_logits, dtype=torch.float64), dim=-1).numpy()
    el = torch.softmax(torch.as_tensor(el_logits, dtype=torch.float64), dim=-1).numpy()
    az_mean, el_mean = az.mean(axis=0), el.mean(axis=0)
    return DoaPrediction(
        az.argmax(axis=-1),
        el.argmax(axis=-1),
        int(np.argmax(az_mean)),
        int(np.argmax(el_mean)),
        az_mean,
        el_mean,
    )


@torch.no_grad()
def predict_doa(model: SaqamNet, features: SpectroFeatures) -> DoaPrediction:
    mag, phase = features_to_tensors(features, next(model.parameters()).dtype)
    out = model(mag, phase, heads="sq")
    return doa_from_logits(out.az_logits[0], out.el_logits[0])


def save_checkpoint(path, model: SaqamNet, metadata: dict | None = None) -> None:
    """Single-file checkpoint: format tag, version, config, parameters, metadata."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": dataclasses.asdict(model.config),
        "state_dict": model.state_dict(),
        "metadata": metadata or {},
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path) -> tuple[SaqamNet, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a SAQAM checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')}")
    model = SaqamNet(ModelConfig(**payload["config"]))
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload["metadata"]
