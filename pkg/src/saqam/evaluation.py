"""Objective evaluation suite and the subjective-correlation harness.

Objective: overlap (common area) of same-quality vs different-quality
distance distributions, mean precision@K retrieval in the LQ embedding
space, and Spearman monotonicity of distances against perturbation level
or angular separation. Subjective: per-condition Spearman correlation of
metric distances against external MOS files.
"""
from __future__ import annotations

import csv
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.stats
import torch

from .audio import BinauralSignal
from .binaural import binauralize, excerpt, perturb, synth_brir
from .metric import score_many
from .model import SaqamNet

# SNR-style levels improve as they grow; the rest get worse
SEVERITY_SIGN = {
    "additive_noise": -1.0,
    "binaural_noise": -1.0,
    "clip": -1.0,
    "freq_mask": 1.0,
    "resample": -1.0,
    "pitch_shift": 1.0,
}


class EvalDataError(ValueError):
    pass


class UndefinedCorrelationError(ValueError):
    pass


def common_area(dist_same: Sequence[float], dist_diff: Sequence[float], n_bins: int = 50) -> float:
    """Overlap of the two normalized histograms over shared edges spanning the pooled range."""
    a = np.asarray(dist_same, dtype=np.float64)
    b = np.asarray(dist_diff, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise EvalDataError("both distance lists must be non-empty")
    lo = min(a.min(), b.min())
    hi = max(a.max(), b.max())
    if hi == lo:
        return 1.0
    edges = np.linspace(lo, hi, n_bins + 1)
    ha = np.histogram(a, edges)[0] / a.size
    hb = np.histogram(b, edges)[0] / b.size
    return float(np.minimum(ha, hb).sum())


def mean_precision_at_k(embeddings, labels, k: int, distances=None) -> float:
    """Mean over queries of the fraction of the ``k`` nearest others that
    share the query's label.

    Ranking is Euclidean on ``embeddings`` unless a precomputed ``(n, n)``
    ``distances`` matrix is given (then ``embeddings`` may be None). The
    query is excluded from its own ranking; distance ties go to the lower
    index.
    """
    y = np.asarray(labels)
    n = len(y)
    if k >= n:
        raise ValueError(f"k={k} must be smaller than the dataset size {n}")
    if len(np.unique(y)) == 1:
        return 1.0
    if distances is None:
        x = np.asarray(embeddings, dtype=np.float64)
        sq = np.sum(x * x, axis=1)
        d = sq[:, None] + sq[None, :] - 2 * x @ x.T
    else:
        d = np.array(distances, dtype=np.float64)
        if d.shape != (n, n):
            raise ValueError(f"distances must be ({n}, {n}), got {d.shape}")
    np.fill_diagonal(d, np.inf)
    order = np.argsort(d, axis=1, kind="stable")[:, :k]
    return float(np.mean(y[order] == y[:, None]))


def spearman(x: Sequence[float], y: Sequence[float]) -> float:
    """Pearson correlation of average ranks (ties share the mean rank)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("x and y must be 1-D and equally long")
    if x.size < 3:
        raise ValueError("need at least 3 points")
    rx = scipy.stats.rankdata(x, method="average")
    ry = scipy.stats.rankdata(y, method="average")
    if np.ptp(rx) == 0 or np.ptp(ry) == 0:
        raise UndefinedCorrelationError("constant input")
    rx -= rx.mean()
    ry -= ry.mean()
    return float(np.sum(rx * ry) / np.sqrt(np.sum(rx * rx) * np.sum(ry * ry)))


# ---------------------------------------------------------------- model-driven suites


@dataclass
class MonotonicityResult:
    sc: float
    levels: np.ndarray
    mean_distance: np.ndarray


def _render(pool, idx, brir, rng):
    return binauralize(excerpt(np.asarray(pool[idx]), rng), brir)


def monotonicity_suite(
    model: SaqamNet,
    perturbation_id: str,
    levels: Sequence[float],
    n_contents: int,
    pool: Sequence[np.ndarray],
    seed: int = 0,
    azimuths: Sequence[float] | None = None,
) -> MonotonicityResult:
    """Spearman correlation between perturbation severity and mean D1.

    For each content ``i`` a clean reference is rendered from a *different*
    utterance through the same BRIR; the test is utterance ``i`` degraded at
    each level. Severity is the level times :data:`SEVERITY_SIGN`, so a
    well-behaved metric scores close to +1.
    """
    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(n_contents):
        i, j = rng.choice(len(pool), 2, replace=False)
        az = float(rng.choice(azimuths)) if azimuths is not None else float(rng.uniform(-90, 90))
        brir = synth_brir(az, 0.0, float(rng.uniform(0.08, 0.5)), seed=rng.integers(2**32))
        test_clean = _render(pool, i, brir, rng)
        ref = _render(pool, j, brir, rng)
        pert_seed = int(rng.integers(2**32))
        for lv in levels:
            pairs.append((perturb(test_clean, perturbation_id, lv, seed=pert_seed), ref))
    d1 = score_many(model, pairs)[:, 0].reshape(n_contents, len(levels))
    mean_d = d1.mean(axis=0)
    severity = SEVERITY_SIGN[perturbation_id] * np.asarray(levels, dtype=np.float64)
    if len(levels) < 3:
        sc = float(np.sign(np.corrcoef(severity, mean_d)[0, 1])) if np.ptp(mean_d) > 0 else 0.0
    else:
        sc = spearman(severity, mean_d)
    return MonotonicityResult(sc, np.asarray(levels, dtype=np.float64), mean_d)


def angular_monotonicity(
    model: SaqamNet,
    pool: Sequence[np.ndarray],
    reference_az: float,
    test_azimuths: Sequence[float],
    n_contents: int,
    seed: int = 0,
) -> MonotonicityResult:
    """Spearman correlation between angular separation and mean D2 with non-matched content."""
    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(n_contents):
        i, j = rng.choice(len(pool), 2, replace=False)
        rt60 = float(rng.uniform(0.08, 0.5))
        ref = _render(pool, j, synth_brir(reference_az, 0.0, rt60, seed=rng.integers(2**32)), rng)
        clip = excerpt(np.asarray(pool[i]), rng)
        for az in test_azimuths:
            brir = synth_brir(float(az), 0.0, rt60, seed=rng.integers(2**32))
            pairs.append((binauralize(clip, brir), ref))
    d2 = score_many(model, pairs)[:, 1].reshape(n_contents, len(test_azimuths))
    mean_d = d2.mean(axis=0)
    sep = np.abs((np.asarray(test_azimuths, dtype=np.float64) - reference_az + 180.0) % 360.0 - 180.0)
    return MonotonicityResult(spearman(sep, mean_d), sep, mean_d)


@torch.no_grad()
def lq_embeddings(model: SaqamNet, signals: Sequence[BinauralSignal], batch: int = 8) -> np.ndarray:
    from .audio import torch_features

    model.eval()
    out = []
    for i in range(0, len(signals), batch):
        waves = torch.as_tensor(np.stack([s.samples for s in signals[i : i + batch]]), dtype=torch.float32)
        out.append(model(*torch_features(waves), heads="lq").lq_embedding.numpy())
    return np.concatenate(out)


@torch.no_grad()
def pairwise_distances(model: SaqamNet, signals: Sequence[BinauralSignal], head: str = "lq", batch: int = 8) -> np.ndarray:
    """Symmetric ``(n, n)`` matrix of D1 (``head="lq"``) or D2 (``"sq"``) between equal-length signals.

    Each signal goes through the network once; distances are then taken
    between the cached activation stacks.
    """
    from .audio import torch_features
    from .metric import deep_feature_distance

    model.eval()
    parts = []
    for i in range(0, len(signals), batch):
        waves = torch.as_tensor(np.stack([s.samples for s in signals[i : i + batch]]), dtype=torch.float32)
        out = model(*torch_features(waves), heads=head)
        parts.append(out.lq_stack if head == "lq" else out.sq_stack)
    stack = {k: torch.cat([p[k] for p in parts]) for k in parts[0]}
    n = len(signals)
    d = np.zeros((n, n))
    for i in range(n - 1):
        rest = {k: v[i + 1 :] for k, v in stack.items()}
        query = {k: v[i : i + 1].expand_as(rest[k]) for k, v in stack.items()}
        d[i, i + 1 :] = deep_feature_distance(query, rest).numpy()
    return d + d.T


@dataclass
class QualityGroups:
    signals: list
    labels: np.ndarray
    utterances: np.ndarray


def build_quality_groups(
    pool: Sequence[np.ndarray],
    groups: Sequence[tuple[str, float]],
    per_group: int,
    seed: int = 0,
    azimuths: Sequence[float] | None = None,
) -> QualityGroups:
    """Recordings sharing a (perturbation, level) per group, with non-matched content.

    Members of a group share one perturbation draw (the same noise signal),
    as triplet members do; content, direction and room differ per member.
    """
    rng = np.random.default_rng(seed)
    sigs, labels, utts = [], [], []
    for g, (kind, level) in enumerate(groups):
        pert_seed = int(rng.integers(2**32))
        for _ in range(per_group):
            i = int(rng.integers(len(pool)))
            az = float(rng.choice(azimuths)) if azimuths is not None else float(rng.uniform(-90, 90))
            brir = synth_brir(az, 0.0, float(rng.uniform(0.08, 0.5)), seed=rng.integers(2**32))
            clean = _render(pool, i, brir, rng)
            sigs.append(perturb(clean, kind, level, seed=pert_seed))
            labels.append(g)
            utts.append(i)
    return QualityGroups(sigs, np.asarray(labels), np.asarray(utts))


def content_robustness_distances(
    model: SaqamNet, groups: QualityGroups, n_pairs: int, seed: int = 0, column: int = 0
) -> tuple[np.ndarray, np.ndarray]:
    """D (column 0 = D1) for random same-group and different-group pairs,
    always with different utterances."""
    rng = np.random.default_rng(seed)
    n = len(groups.signals)
    same, diff = [], []
    while len(same) < n_pairs or len(diff) < n_pairs:
        a, b = (int(v) for v in rng.choice(n, 2, replace=False))
        if groups.utterances[a] == groups.utterances[b]:
            continue
        target = same if groups.labels[a] == groups.labels[b] else diff
        if len(target) < n_pairs:
            target.append((groups.signals[a], groups.signals[b]))
    d_same = score_many(model, same)[:, column]
    d_diff = score_many(model, diff)[:, column]
    return d_same, d_diff


# ---------------------------------------------------------------- subjective harness


def _read_rows(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def subjective_correlation(scores_csv, mos_csv, columns=("d1", "d2", "d3")) -> dict:
    """Per-dataset, per-distance Spearman correlation against MOS.

    ``scores_csv`` has ``condition_id, item_id, d1, d2, d3`` and ``mos_csv``
    has ``condition_id, rating`` (both optionally with a ``dataset`` column).
    Distances and ratings are averaged per condition; the correlation is
    taken between the *negated* mean distance and the mean rating, so a
    metric that tracks quality scores positive.
    """
    scores = _read_rows(scores_csv)
    mos = _read_rows(mos_csv)
    dist = defaultdict(lambda: defaultdict(list))
    rating = defaultdict(list)
    for row in scores:
        key = (row.get("dataset", ""), row["condition_id"])
        for c in columns:
            dist[key][c].append(float(row[c]))
    for row in mos:
        key = (row.get("dataset", ""), row["condition_id"])
        rating[key].append(float(row["rating"]))
    missing_mos = sorted(set(dist) - set(rating))
    missing_scores = sorted(set(rating) - set(dist))
    if missing_mos or missing_scores:
        raise EvalDataError(
            f"condition keys do not match; no MOS for {missing_mos}, no scores for {missing_scores}"
        )
    table = {}
    for ds in sorted({k[0] for k in dist}):
        keys = sorted(k for k in dist if k[0] == ds)
        mos_mean = [np.mean(rating[k]) for k in keys]
        table[ds] = {c: spearman([-np.mean(dist[k][c]) for k in keys], mos_mean) for c in columns}
    return table


def write_table(rows: list[dict], path, fmt: str | None = None) -> None:
    """Write dict rows as CSV, or as a Markdown table for ``.md`` paths."""
    path = Path(path)
    fmt = fmt or ("md" if path.suffix == ".md" else "csv")
    cols = list(rows[0])
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        if fmt == "md":
            fh.write("| " + " | ".join(cols) + " |\n")
            fh.write("|" + "---|" * len(cols) + "\n")
            for r in rows:
                fh.write("| " + " | ".join(_fmt(r[c]) for c in cols) + " |\n")
        else:
            w = csv.DictWriter(fh, cols)
            w.writeheader()
            for r in rows:
                w.writerow({c: _fmt(r[c]) for c in cols})


def _fmt(v):
    return f"{v:.6g}" if isinstance(v, float) else str(v)
