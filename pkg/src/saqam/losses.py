"""Training objectives for the two heads and their multi-task combination."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import torch

SOFT_MASSES = {0: 0.4, 1: 0.2, 2: 0.1}


class LossDomainError(ValueError):
    pass


@dataclass(frozen=True)
class SoftLabel:
    probs: np.ndarray
    v: int
    wraparound: bool


def soft_label(v: int, n_bins: int, wraparound: bool) -> SoftLabel:
    """Discrete label smoothing around bin ``v``: 0.4 / 0.2 / 0.1 at distance 0 / 1 / 2.

    With ``wraparound`` the neighbours are taken modulo ``n_bins`` (azimuth
    is circular). Without it, mass falling outside the range is added to
    the nearest end bin so the distribution still sums to one.
    """
    if n_bins < 5:
        raise LossDomainError("soft labels need at least 5 bins")
    if not 0 <= v < n_bins:
        raise LossDomainError(f"bin {v} outside [0, {n_bins})")
    p = np.zeros(n_bins)
    for off in range(-2, 3):
        i = v + off
        i = i % n_bins if wraparound else min(max(i, 0), n_bins - 1)
        p[i] += SOFT_MASSES[abs(off)]
    return SoftLabel(p, v, wraparound)


@lru_cache(maxsize=None)
def _label_table(n_bins: int, wraparound: bool) -> np.ndarray:
    return np.stack([soft_label(v, n_bins, wraparound).probs for v in range(n_bins)])


def soft_label_tensor(bins, n_bins: int, wraparound: bool, dtype=torch.float32) -> torch.Tensor:
    """Rows of soft labels for a batch of bin indices."""
    table = torch.as_tensor(_label_table(n_bins, wraparound), dtype=dtype)
    return table[torch.as_tensor(bins, dtype=torch.long)]


def emd2(pred_probs: torch.Tensor, target_probs: torch.Tensor) -> torch.Tensor:
    """Squared EMD between distributions on the last axis: sum of squared CDF gaps."""
    return ((torch.cumsum(pred_probs, -1) - torch.cumsum(target_probs, -1)) ** 2).sum(-1)


def emd2_loss(pred_logits, label) -> torch.Tensor:
    """Squared EMD between ``softmax(pred_logits)`` and a label distribution.

    ``label`` is a :class:`SoftLabel` or a probability tensor broadcastable
    to the logits. Reduces only the bin axis.
    """
    logits = torch.as_tensor(pred_logits)
    probs = label.probs if isinstance(label, SoftLabel) else label
    target = torch.as_tensor(probs, dtype=logits.dtype)
    return emd2(torch.softmax(logits, dim=-1), target)


def doa_loss(az_logits, el_logits, az_bins, el_bins, kind: str = "emd") -> torch.Tensor:
    """Localization loss for a batch of framewise logits ``(B, T, bins)``.

    Per-frame losses are averaged over time and batch; the azimuth and
    elevation terms are summed. ``kind="xent"`` swaps EMD for soft-label
    cross-entropy.
    """
    az_t = soft_label_tensor(az_bins, az_logits.shape[-1], True, az_logits.dtype)[:, None, :]
    el_t = soft_label_tensor(el_bins, el_logits.shape[-1], False, el_logits.dtype)[:, None, :]
    if kind == "emd":
        return emd2_loss(az_logits, az_t).mean() + emd2_loss(el_logits, el_t).mean()
    if kind == "xent":
        ce = lambda lg, t: -(t * torch.log_softmax(lg, -1)).sum(-1).mean()  # noqa: E731
        return ce(az_logits, az_t) + ce(el_logits, el_t)
    raise LossDomainError(f"unknown DOA loss {kind!r}")


def triplet_loss(d_ap, d_an, delta) -> torch.Tensor:
    """Hinge ``max(0, d_ap - d_an + delta)``; elementwise for batched distances."""
    d_ap = torch.as_tensor(d_ap)
    d_an = torch.as_tensor(d_an, dtype=d_ap.dtype)
    if delta < 0:
        raise LossDomainError("margin must be non-negative")
    if bool((d_ap < 0).any()) or bool((d_an < 0).any()):
        raise LossDomainError("distances must be non-negative")
    # relu has a zero subgradient at the kink
    return torch.relu(d_ap - d_an + delta)


@dataclass(frozen=True)
class MarginSchedule:
    delta_start: float = 0.5
    delta_end: float = 1.5
    total_epochs: int = 100


def margin_at(schedule: MarginSchedule, epoch: float) -> float:
    """Linear ramp from ``delta_start`` at epoch 0 to ``delta_end`` at ``total_epochs``."""
    if not 0 <= epoch <= schedule.total_epochs:
        raise LossDomainError(f"epoch {epoch} outside [0, {schedule.total_epochs}]")
    if schedule.total_epochs == 0:
        return schedule.delta_end
    frac = epoch / schedule.total_epochs
    return schedule.delta_start + (schedule.delta_end - schedule.delta_start) * frac


def mtl_loss(triplet_term, emd_term, weights=(1.0, 1.0)):
    """Weighted sum of the LQ and SQ terms; a missing (``None``) term counts as 0."""
    w_lq, w_sq = weights
    if w_lq < 0 or w_sq < 0:
        raise LossDomainError("task weights must be non-negative")
    total = 0.0
    if triplet_term is not None and w_lq:
        total = total + w_lq * triplet_term
    if emd_term is not None and w_sq:
        total = total + w_sq * emd_term
    return total
