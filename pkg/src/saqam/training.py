"""Metric training: triplet loss on the LQ head, EMD on the SQ head, or both."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .audio import SAMPLE_RATE, BinauralSignal, torch_features
from .binaural import (
    BrirSampler,
    SourceLabel,
    Triplet,
    augment_shift,
    make_doa_clip,
    make_triplet,
)
from .losses import MarginSchedule, doa_loss, margin_at, mtl_loss, triplet_loss
from .metric import deep_feature_distance, select
from .model import SaqamNet

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 64  # triplets per step
    doa_batch_size: int = 64
    lr: float = 1e-4
    weights: tuple = (1.0, 1.0)  # (LQ, SQ)
    doa_loss: str = "emd"
    margin_start: float = 0.5
    margin_end: float = 1.5
    shift_prob: float = 0.5
    crop_seconds: float | None = None  # random sub-crop per step; None trains on whole clips
    seed: int = 0


@dataclass
class DoaExample:
    signal: BinauralSignal
    label: SourceLabel
    azimuth_deg: float = 0.0
    utterance_id: int = -1


@dataclass
class TrainHistory:
    epoch_loss: list = field(default_factory=list)
    epoch_lq: list = field(default_factory=list)
    epoch_sq: list = field(default_factory=list)
    margins: list = field(default_factory=list)
    seconds: float = 0.0


def _batch_waves(signals: Sequence[BinauralSignal], rng: np.random.Generator, shift_prob: float, crop: int | None) -> torch.Tensor:
    waves = []
    n = signals[0].n_samples if crop is None else crop
    start = None
    for sig in signals:
        if shift_prob and rng.random() < shift_prob:
            sig = augment_shift(sig, rng.integers(2**32), length=sig.n_samples)
        x = sig.samples
        if crop is not None and x.shape[1] > crop:
            if start is None:
                start = int(rng.integers(0, x.shape[1] - crop + 1))
            x = x[:, start : start + crop]
        waves.append(x[:, :n])
    return torch.as_tensor(np.stack(waves), dtype=torch.float32)


def train_metric(
    model: SaqamNet,
    triplets: Sequence[Triplet],
    doa_examples: Sequence[DoaExample],
    cfg: TrainConfig,
) -> TrainHistory:
    """Train ``model`` in place.

    Each step draws ``batch_size`` triplets (skipped when the LQ weight is 0)
    and ``doa_batch_size`` localization clips (skipped when the SQ weight is
    0). One epoch is one pass over the triplets, or over the DOA clips when
    there is no LQ task. The margin ramps linearly over the epochs.
    """
    w_lq, w_sq = cfg.weights
    use_lq = w_lq > 0 and len(triplets) > 0
    use_sq = w_sq > 0 and len(doa_examples) > 0
    if not (use_lq or use_sq):
        raise ValueError("nothing to train: both tasks disabled or empty")
    rng = np.random.default_rng(cfg.seed)
    torch.manual_seed(cfg.seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    schedule = MarginSchedule(cfg.margin_start, cfg.margin_end, max(cfg.epochs - 1, 1))
    crop = None if cfg.crop_seconds is None else int(cfg.crop_seconds * SAMPLE_RATE)
    hist = TrainHistory()
    t0 = time.time()
    model.train()
    n_items = len(triplets) if use_lq else len(doa_examples)
    step_size = cfg.batch_size if use_lq else cfg.doa_batch_size
    for epoch in range(cfg.epochs):
        delta = margin_at(schedule, min(epoch, schedule.total_epochs))
        order = rng.permutation(n_items)
        losses, lq_terms, sq_terms = [], [], []
        for start in range(0, n_items, step_size):
            idx = order[start : start + step_size]
            lq_term = sq_term = None
            if use_lq:
                batch = [triplets[i] for i in idx]
                sigs = [m for t in batch for m in t.members]
                mag, phase = torch_features(_batch_waves(sigs, rng, cfg.shift_prob, crop))
                out = model(mag, phase, heads="lq")
                b = len(batch)
                roles = [select(out.lq_stack, slice(k, 3 * b, 3)) for k in range(3)]
                d_ap = deep_feature_distance(roles[0], roles[1])
                d_an = deep_feature_distance(roles[0], roles[2])
                lq_term = triplet_loss(d_ap, d_an, delta).mean()
                lq_terms.append(float(lq_term.detach()))
            if use_sq:
                if use_lq:
                    didx = rng.integers(0, len(doa_examples), cfg.doa_batch_size)
                else:
                    didx = idx
                ex = [doa_examples[i] for i in didx]
                mag, phase = torch_features(_batch_waves([e.signal for e in ex], rng, cfg.shift_prob, crop))
                out = model(mag, phase, heads="sq")
                sq_term = doa_loss(
                    out.az_logits,
                    out.el_logits,
                    [e.label.az_bin for e in ex],
                    [e.label.el_bin for e in ex],
                    cfg.doa_loss,
                )
                sq_terms.append(float(sq_term.detach()))
            loss = mtl_loss(lq_term, sq_term, cfg.weights)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
        hist.epoch_loss.append(float(np.mean(losses)))
        hist.epoch_lq.append(float(np.mean(lq_terms)) if lq_terms else None)
        hist.epoch_sq.append(float(np.mean(sq_terms)) if sq_terms else None)
        hist.margins.append(delta)
        log.info("epoch %d loss %.4f lq %s sq %s (%.0fs)", epoch, hist.epoch_loss[-1], hist.epoch_lq[-1], hist.epoch_sq[-1], time.time() - t0)
    hist.seconds = time.time() - t0
    model.eval()
    return hist


# ---------------------------------------------------------------- datasets


def split_pool(pool: Sequence[np.ndarray], test_fraction: float = 0.25) -> tuple[list, list]:
    """Disjoint train/test utterance pools (held-out content)."""
    n_test = max(3, int(round(len(pool) * test_fraction)))
    return list(pool[n_test:]), list(pool[:n_test])


def _pmap(fn, args: list, workers: int) -> list:
    """Ordered map, in a process pool when ``workers > 1``. Every item carries
    its own seed, so the result does not depend on the worker count."""
    if workers <= 1 or len(args) < 2:
        return [fn(*a) for a in args]
    from concurrent.futures import ProcessPoolExecutor

    with ProcessPoolExecutor(workers) as ex:
        return list(ex.map(fn, *zip(*args), chunksize=max(1, len(args) // (4 * workers))))


def build_triplets(
    pool: Sequence[np.ndarray],
    n: int,
    kinds: Sequence[str],
    seed: int,
    brir_sampler=None,
    workers: int = 1,
) -> list[Triplet]:
    """``n`` triplets cycling through ``kinds``, each from its own child seed."""
    seeds = np.random.SeedSequence(seed).spawn(n)
    return _pmap(make_triplet, [(pool, kinds[i % len(kinds)], seeds[i], brir_sampler) for i in range(n)], workers)


def build_doa_set(
    pool: Sequence[np.ndarray],
    azimuths: Sequence[float],
    n: int,
    seed: int,
    rt60_range=(0.08, 0.5),
    snr_range: tuple[float, float] | None = (5.0, 30.0),
    workers: int = 1,
) -> list[DoaExample]:
    """Single-source clips spread evenly over ``azimuths``; optional additive
    noise augmentation with SNR drawn from ``snr_range``."""
    seeds = np.random.SeedSequence(seed).spawn(n)
    args = [(pool, float(azimuths[i % len(azimuths)]), seeds[i], rt60_range, snr_range) for i in range(n)]
    return _pmap(_doa_example, args, workers)


def _doa_example(pool, az, seed, rt60_range, snr_range) -> DoaExample:
    rng = np.random.default_rng(seed)
    pert = level = None
    if snr_range is not None:
        pert, level = "additive_noise", float(rng.uniform(*snr_range))
    sig, label, uid = make_doa_clip(pool, az, 0.0, rng.integers(2**32), rt60_range, pert, level)
    return DoaExample(sig, label, az, uid)


def grid_sampler(azimuths: Sequence[float], rt60_range=(0.08, 0.5)) -> BrirSampler:
    return BrirSampler(azimuths=list(azimuths), rt60_range=rt60_range)


# ---------------------------------------------------------------- measurements


@torch.no_grad()
def triplet_distances(model: SaqamNet, triplets: Sequence[Triplet], batch: int = 8) -> np.ndarray:
    """D1(a, p) and D1(a, n) for each triplet; shape ``(n, 2)``."""
    model.eval()
    rows = []
    for i in range(0, len(triplets), batch):
        chunk = triplets[i : i + batch]
        waves = torch.as_tensor(np.stack([m.samples for t in chunk for m in t.members]), dtype=torch.float32)
        out = model(*torch_features(waves), heads="lq")
        b = len(chunk)
        roles = [select(out.lq_stack, slice(k, 3 * b, 3)) for k in range(3)]
        rows.append(
            torch.stack([deep_feature_distance(roles[0], roles[1]), deep_feature_distance(roles[0], roles[2])], 1).numpy()
        )
    return np.concatenate(rows)


def triplet_accuracy(model: SaqamNet, triplets: Sequence[Triplet]) -> float:
    d = triplet_distances(model, triplets)
    return float(np.mean(d[:, 0] < d[:, 1]))


@torch.no_grad()
def doa_accuracy(model: SaqamNet, examples: Sequence[DoaExample], tolerance: int = 2, batch: int = 8) -> float:
    """Fraction of clips whose clip-level azimuth bin is within ``tolerance`` (circular)."""
    from .model import doa_from_logits

    model.eval()
    hits = []
    for i in range(0, len(examples), batch):
        chunk = examples[i : i + batch]
        waves = torch.as_tensor(np.stack([e.signal.samples for e in chunk]), dtype=torch.float32)
        out = model(*torch_features(waves), heads="sq")
        for k, e in enumerate(chunk):
            pred = doa_from_logits(out.az_logits[k], out.el_logits[k])
            err = abs(pred.az_bin - e.label.az_bin)
            err = min(err, 50 - err)
            hits.append(err <= tolerance)
    return float(np.mean(hits))
