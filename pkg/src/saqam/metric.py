"""Deep-feature distances between two binaural signals.

D1 (listening quality) compares the LQ-head activations, D2 (spatialization
quality) the SQ-head activations and D3 (overall) the shared TCN block
outputs. Each layer is unit-normalized across channels at every
(frequency,) time position; a layer's distance is the L1 norm of the
difference across channels, averaged over positions, and the layer values
are averaged. Inputs need not share content, length or
alignment; the shorter input is zero-padded.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .audio import SAMPLE_RATE, BinauralSignal, torch_features
from .model import ActivationStack, ForwardOutput, SaqamNet

MIN_SECONDS = 0.5
_EPS = 1e-10


class ContractError(ValueError):
    pass


class InputError(ValueError):
    pass


def normalize_channels(x: torch.Tensor) -> torch.Tensor:
    """Unit L2 norm across the channel axis (dim 1) at every position."""
    return x / torch.sqrt((x * x).sum(dim=1, keepdim=True) + _EPS)


def layer_distance(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Per-item distance between two batched activations ``(B, C, ...)``.

    Range is [0, 2*sqrt(C)]: summing over channels keeps the scale
    comparable with triplet margins of order one.
    """
    diff = (normalize_channels(a) - normalize_channels(b)).abs().sum(dim=1)
    return diff.reshape(diff.shape[0], -1).mean(dim=1)


def deep_feature_distance(stack_a: ActivationStack, stack_b: ActivationStack, per_layer: dict | None = None) -> torch.Tensor:
    """Mean over layers of :func:`layer_distance`; returns shape ``(B,)``.

    Both stacks must list the same layers in the same order. When
    ``per_layer`` is given it is filled with each layer's contribution.
    """
    if list(stack_a) != list(stack_b):
        raise ContractError(f"layer lists differ: {list(stack_a)} vs {list(stack_b)}")
    if not stack_a:
        raise ContractError("empty activation stack")
    total = 0.0
    for name in stack_a:
        a, b = stack_a[name], stack_b[name]
        if a.shape != b.shape:
            raise ContractError(f"layer {name}: shapes {tuple(a.shape)} vs {tuple(b.shape)}")
        d = layer_distance(a, b)
        if per_layer is not None:
            per_layer[name] = d
        total = total + d
    return total / len(stack_a)


def select(stack: ActivationStack, index) -> ActivationStack:
    """Index the batch axis of every layer."""
    return {k: v[index] for k, v in stack.items()}


def sq_layers(stack: ActivationStack, include_logits: bool = True) -> ActivationStack:
    if include_logits:
        return stack
    return {k: v for k, v in stack.items() if "logits" not in k}


def distances(out_a: ForwardOutput, out_b: ForwardOutput, include_logits: bool = True, per_layer: dict | None = None) -> dict:
    """D1/D2/D3 between two batched forward outputs; missing heads are skipped."""
    res = {}
    if out_a.lq_stack:
        res["d1_lq"] = deep_feature_distance(out_a.lq_stack, out_b.lq_stack, per_layer)
    if out_a.sq_stack:
        res["d2_sq"] = deep_feature_distance(
            sq_layers(out_a.sq_stack, include_logits), sq_layers(out_b.sq_stack, include_logits), per_layer
        )
    res["d3_ovrl"] = deep_feature_distance(out_a.body_stack, out_b.body_stack, per_layer)
    return res


def pad_pair(a: torch.Tensor, b: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Zero-pad the shorter waveform (last axis) to the longer one's length."""
    n = max(a.shape[-1], b.shape[-1])
    pad = lambda x: torch.nn.functional.pad(x, (0, n - x.shape[-1]))  # noqa: E731
    return pad(a), pad(b)


def waveform_distances(model: SaqamNet, wave_a: torch.Tensor, wave_b: torch.Tensor, include_logits: bool = True, per_layer: dict | None = None) -> dict:
    """Differentiable D1/D2/D3 between batched waveforms ``(B, 2, N)``."""
    wave_a, wave_b = pad_pair(wave_a, wave_b)
    batch = wave_a.shape[0]
    mag, phase = torch_features(torch.cat([wave_a, wave_b]))
    out = model(mag, phase)
    sl_a, sl_b = slice(0, batch), slice(batch, 2 * batch)
    out_a = ForwardOutput(None, None, None, None, select(out.body_stack, sl_a), select(out.lq_stack, sl_a), select(out.sq_stack, sl_a))
    out_b = ForwardOutput(None, None, None, None, select(out.body_stack, sl_b), select(out.lq_stack, sl_b), select(out.sq_stack, sl_b))
    return distances(out_a, out_b, include_logits, per_layer)


@dataclass
class DistanceReport:
    d1_lq: float
    d2_sq: float
    d3_ovrl: float
    per_layer: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"d1_lq": self.d1_lq, "d2_sq": self.d2_sq, "d3_ovrl": self.d3_ovrl, "per_layer": dict(self.per_layer)}


def _as_tensor(x: BinauralSignal, dtype) -> torch.Tensor:
    if x.sample_rate != SAMPLE_RATE:
        raise InputError(f"expected {SAMPLE_RATE} Hz input, got {x.sample_rate}")
    if x.n_samples < MIN_SECONDS * SAMPLE_RATE:
        raise InputError(f"input shorter than {MIN_SECONDS} s")
    return torch.as_tensor(x.samples, dtype=dtype)[None]


@torch.no_grad()
def score(model: SaqamNet, x1: BinauralSignal, x2: BinauralSignal, include_logits: bool = True) -> DistanceReport:
    """Score ``x1`` against ``x2``; lower distances mean more similar.

    ``x2`` may be any reference: different speech, length or alignment.
    """
    dtype = next(model.parameters()).dtype
    a, b = _as_tensor(x1, dtype), _as_tensor(x2, dtype)
    per_layer: dict = {}
    d = waveform_distances(model, a, b, include_logits, per_layer)
    return DistanceReport(
        float(d["d1_lq"][0]),
        float(d["d2_sq"][0]),
        float(d["d3_ovrl"][0]),
        {k: float(v[0]) for k, v in per_layer.items()},
    )


@torch.no_grad()
def score_many(model: SaqamNet, pairs, include_logits: bool = True, batch_size: int = 8) -> np.ndarray:
    """Scores for a list of equal-length ``(x1, x2)`` pairs; returns ``(n, 3)``."""
    dtype = next(model.parameters()).dtype
    rows = []
    for i in range(0, len(pairs), batch_size):
        chunk = pairs[i : i + batch_size]
        a = torch.stack([torch.as_tensor(p[0].samples, dtype=dtype) for p in chunk])
        b = torch.stack([torch.as_tensor(p[1].samples, dtype=dtype) for p in chunk])
        d = waveform_distances(model, a, b, include_logits)
        rows.append(torch.stack([d["d1_lq"], d["d2_sq"], d["d3_ovrl"]], dim=1).numpy())
    return np.concatenate(rows) if rows else np.zeros((0, 3))
