"""Command-line entry point: ``saqam <command> [options]``.

Commands: simulate, train, score, eval-objective, eval-subjective,
enhance-train, enhance-eval. Run ``saqam <command> -h`` for options and
``saqam config`` for the documented configuration keys.

Every command except ``score`` writes ``<out-dir>/<command>.manifest.json``
holding the resolved config, seed, code version and output paths. A command
whose manifest is complete and whose config and seed match is skipped unless
``--force`` is given.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, derive_seed, dump_config, load_config, relevant, schema_doc

log = logging.getLogger("saqam")


class ManifestConflict(RuntimeError):
    pass


# ---------------------------------------------------------------- manifests


def _manifest_path(out_dir: Path, command: str) -> Path:
    return out_dir / f"{command}.manifest.json"


def _write_manifest(out_dir: Path, step: str, cfg: dict, seed: int, outputs, extra=None, status="complete"):
    command = "enhance-train" if step.startswith("enhance-train") else step
    man = {
        "command": step,
        "status": status,
        "seed": seed,
        "code_version": __version__,
        "config": dump_config(relevant(cfg, command)),
        "outputs": sorted(str(p) for p in outputs),
    }
    man.update(extra or {})
    out_dir.mkdir(parents=True, exist_ok=True)
    _manifest_path(out_dir, step).write_text(json.dumps(man, indent=2) + "\n")


def _write_rows(path: Path, rows: list[dict]) -> None:
    from .evaluation import write_table

    write_table(rows, path)


# ---------------------------------------------------------------- data helpers


def _clean_pools(cfg, seed):
    from .corpus import load_clean_pool, synthetic_clean_pool
    from .training import split_pool

    if cfg["data.clean_dir"]:
        pool = load_clean_pool(cfg["data.clean_dir"])
    else:
        pool = synthetic_clean_pool(cfg["data.n_clean"], seed=derive_seed(seed, "clean-pool"))
    return split_pool(pool, cfg["data.test_fraction"])


def _brir_sampler(cfg):
    from .binaural import BrirSampler, BrirSetSampler, load_brir_set

    if cfg["data.brir_csv"]:
        return BrirSetSampler(load_brir_set(cfg["data.brir_csv"]))
    return BrirSampler(
        azimuths=list(cfg["data.azimuths"]) or None,
        azimuth_range=tuple(cfg["data.azimuth_range"]),
        rt60_range=tuple(cfg["data.rt60"]),
    )


def _doa_azimuths(cfg):
    if cfg["data.azimuths"]:
        return list(cfg["data.azimuths"])
    lo, hi = cfg["data.azimuth_range"]
    return list(np.linspace(lo, hi, 10))


# ---------------------------------------------------------------- commands


def cmd_simulate(args, cfg, out_dir: Path) -> int:
    from .binaural import validate_manifest, write_triplets
    from .training import build_triplets

    train_pool, _ = _clean_pools(cfg, args.seed)
    triplets = build_triplets(
        train_pool, cfg["data.n_triplets"], cfg["data.kinds"], derive_seed(args.seed, "triplets"),
        _brir_sampler(cfg), workers=args.workers,
    )
    manifest = write_triplets(triplets, out_dir / "triplets")
    problems = validate_manifest(manifest)
    for p in problems:
        log.error(p)
    rel = manifest.relative_to(out_dir)
    _write_manifest(out_dir, "simulate", cfg, args.seed, [rel], {"rows": len(triplets), "problems": len(problems)})
    print(f"wrote {len(triplets)} triplets to {manifest}")
    return 1 if problems else 0


def _model_config(cfg):
    from .model import ModelConfig

    return ModelConfig(
        inception_blocks=cfg["model.inception_blocks"],
        inception_width=cfg["model.inception_width"],
        input_mode=cfg["model.input_mode"],
    )


def cmd_train(args, cfg, out_dir: Path) -> int:
    from .model import build_model, save_checkpoint
    from .training import TrainConfig, build_doa_set, build_triplets, doa_accuracy, train_metric, triplet_accuracy

    seed, w = args.seed, args.workers
    train_pool, test_pool = _clean_pools(cfg, seed)
    sampler = _brir_sampler(cfg)
    weights = tuple(cfg["loss.weights"])
    if len(weights) != 2:
        raise ConfigError("loss.weights: expected two values")
    kinds = cfg["data.kinds"]
    tr = te = dtr = dte = []
    if weights[0] > 0:
        tr = build_triplets(train_pool, cfg["data.n_triplets"], kinds, derive_seed(seed, "triplets"), sampler, w)
        te = build_triplets(test_pool, cfg["data.n_test_triplets"], kinds, derive_seed(seed, "test-triplets"), sampler, w)
    if weights[1] > 0:
        az = _doa_azimuths(cfg)
        snr = tuple(cfg["data.doa_snr"]) or None
        dtr = build_doa_set(train_pool, az, cfg["data.n_doa"], derive_seed(seed, "doa"), tuple(cfg["data.rt60"]), snr, w)
        dte = build_doa_set(test_pool, az, cfg["data.n_test_doa"], derive_seed(seed, "test-doa"), tuple(cfg["data.rt60"]), snr, w)
    model = build_model(_model_config(cfg), derive_seed(seed, "model"))
    tc = TrainConfig(
        epochs=cfg["train.epochs"],
        batch_size=cfg["train.batch_size"],
        doa_batch_size=cfg["train.doa_batch_size"],
        lr=cfg["train.lr"],
        weights=weights,
        doa_loss=cfg["loss.doa"],
        margin_start=cfg["loss.margin"][0],
        margin_end=cfg["loss.margin"][1],
        shift_prob=cfg["train.shift_prob"],
        crop_seconds=cfg["train.crop_seconds"] or None,
        seed=derive_seed(seed, "train"),
    )
    hist = train_metric(model, tr, dtr, tc)
    save_checkpoint(out_dir / "model.pt", model, {"seed": seed, "config": dump_config(relevant(cfg, "train"))})
    _write_rows(
        out_dir / "history.csv",
        [
            {"epoch": i, "loss": l, "lq": "" if a is None else a, "sq": "" if b is None else b, "margin": m}
            for i, (l, a, b, m) in enumerate(zip(hist.epoch_loss, hist.epoch_lq, hist.epoch_sq, hist.margins))
        ],
    )
    metrics = []
    if te:
        metrics.append({"measure": "triplet_accuracy", "value": triplet_accuracy(model, te)})
    if dte:
        metrics.append({"measure": "doa_accuracy_2bins", "value": doa_accuracy(model, dte)})
    _write_rows(out_dir / "metrics.csv", metrics)
    _write_manifest(out_dir, "train", cfg, seed, ["model.pt", "history.csv", "metrics.csv"])
    for row in metrics:
        print(f"{row['measure']}: {row['value']:.3f}")
    return 0


def cmd_score(args, cfg, out_dir) -> int:
    from .audio import read_wav
    from .metric import score
    from .model import load_checkpoint

    model, _ = load_checkpoint(args.model)
    rep = score(model, read_wav(args.a), read_wav(args.b), include_logits=not args.no_logits)
    if args.json:
        print(json.dumps(rep.to_dict(), indent=2))
    else:
        print(f"D1 (LQ)   {rep.d1_lq:.6f}\nD2 (SQ)   {rep.d2_sq:.6f}\nD3 (OVRL) {rep.d3_ovrl:.6f}")
    return 0


def cmd_eval_objective(args, cfg, out_dir: Path) -> int:
    from .evaluation import (
        angular_monotonicity,
        build_quality_groups,
        common_area,
        content_robustness_distances,
        mean_precision_at_k,
        monotonicity_suite,
        pairwise_distances,
    )
    from .model import load_checkpoint

    model, _ = load_checkpoint(args.model)
    seed = derive_seed(args.seed, "eval")
    _, test_pool = _clean_pools(cfg, args.seed)
    az = list(cfg["data.azimuths"]) or None
    groups = []
    for g in cfg["eval.groups"]:
        kind, _, level = g.partition(":")
        try:
            groups.append((kind, float(level)))
        except ValueError:
            raise ConfigError(f"eval.groups: bad entry {g!r}, expected kind:level") from None
    qg = build_quality_groups(test_pool, groups, cfg["eval.per_group"], seed, az)
    dist = pairwise_distances(model, qg.signals)  # rank retrievals by D1, not embedding distance
    same, diff = content_robustness_distances(model, qg, cfg["eval.n_pairs"], seed)
    mono = monotonicity_suite(model, "additive_noise", cfg["eval.levels"], cfg["eval.n_contents"], test_pool, seed, az)
    ang = angular_monotonicity(
        model, test_pool, cfg["eval.reference_az"], cfg["eval.test_azimuths"], cfg["eval.n_contents"], seed
    )
    k = cfg["eval.k"]
    rows = [
        {"measure": f"mp@{k}", "value": mean_precision_at_k(None, qg.labels, k, distances=dist)},
        {"measure": "common_area_d1", "value": common_area(same, diff)},
        {"measure": "sc_d1_vs_snr", "value": mono.sc},
        {"measure": "sc_d2_vs_angle", "value": ang.sc},
    ]
    curves = [{"curve": "d1_vs_snr", "x": float(x), "mean_distance": float(y)} for x, y in zip(mono.levels, mono.mean_distance)]
    curves += [{"curve": "d2_vs_angle", "x": float(x), "mean_distance": float(y)} for x, y in zip(ang.levels, ang.mean_distance)]
    outputs = ["objective.csv", "objective.md", "curves.csv"]
    _write_rows(out_dir / "objective.csv", rows)
    _write_rows(out_dir / "objective.md", rows)
    _write_rows(out_dir / "curves.csv", curves)
    if cfg["eval.plots"]:
        outputs += _plot_curves(out_dir, mono, ang)
    _write_manifest(out_dir, "eval-objective", cfg, args.seed, outputs, {"model": str(args.model)})
    for r in rows:
        print(f"{r['measure']}: {r['value']:.3f}")
    return 0


def _plot_curves(out_dir: Path, mono, ang) -> list[str]:
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        log.warning("matplotlib not installed; skipping plots")
        return []
    names = []
    for name, res, xlabel, ylabel in (
        ("d1_vs_snr.png", mono, "SNR (dB)", "mean D1"),
        ("d2_vs_angle.png", ang, "angular separation (deg)", "mean D2"),
    ):
        fig, ax = plt.subplots(figsize=(4, 3))
        ax.plot(res.levels, res.mean_distance, "o-")
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        fig.tight_layout()
        fig.savefig(out_dir / name, dpi=120)
        plt.close(fig)
        names.append(name)
    return names


def cmd_eval_subjective(args, cfg, out_dir: Path) -> int:
    from .evaluation import subjective_correlation

    scores = args.scores or cfg["subjective.scores"]
    mos = args.mos or cfg["subjective.mos"]
    if not scores or not mos:
        raise ConfigError("subjective.scores and subjective.mos (or --scores/--mos) are required")
    for p in (scores, mos):
        if not Path(p).is_file():
            raise FileNotFoundError(p)
    table = subjective_correlation(scores, mos)
    rows = [{"dataset": ds or "all", **{f"sc_{c}": v for c, v in cols.items()}} for ds, cols in table.items()]
    _write_rows(out_dir / "subjective.csv", rows)
    _write_rows(out_dir / "subjective.md", rows)
    _write_manifest(out_dir, "eval-subjective", cfg, args.seed, ["subjective.csv", "subjective.md"])
    print((out_dir / "subjective.md").read_text(), end="")
    return 0


def _enhance_sets(cfg, seed):
    from .enhance import build_enhancement_set

    train_pool, test_pool = _clean_pools(cfg, seed)
    snr = tuple(cfg["enhance.snr"])
    train = build_enhancement_set(train_pool, cfg["enhance.n_train"], derive_seed(seed, "enhance-data"), snr)
    test = build_enhancement_set(test_pool, cfg["enhance.n_test"], derive_seed(seed, "enhance-test"), snr)
    return train, test


REGIME_ROWS = {"logmse": "LogMSE", "scratch": "Scratch", "finetune": "Finetune"}


def cmd_enhance_train(args, cfg, out_dir: Path) -> int:
    import torch

    from .enhance import EnhanceConfig, UNet, load_enhancer, save_enhancer, train_enhancer
    from .model import load_checkpoint

    regime = cfg["enhance.regime"]
    metric = None
    if regime != "logmse":
        if not cfg["enhance.metric"]:
            raise ConfigError(f"enhance.metric: regime {regime!r} needs a metric checkpoint")
        metric, _ = load_checkpoint(cfg["enhance.metric"])
    train, _ = _enhance_sets(cfg, args.seed)
    ec = EnhanceConfig(
        regime=regime,
        epochs=cfg["enhance.epochs"],
        finetune_epochs=cfg["enhance.finetune_epochs"],
        batch_size=cfg["enhance.batch_size"],
        lr=cfg["enhance.lr"],
        finetune_lr=cfg["enhance.finetune_lr"],
        lam=cfg["enhance.lam"],
        finetune_combined=cfg["enhance.combined"],
        crop_seconds=cfg["enhance.crop_seconds"],
        seed=derive_seed(args.seed, "enhance-train"),
    )
    pretrained = out_dir / "enhancer-logmse.pt"
    if regime == "finetune" and pretrained.is_file():
        # reuse the LogMSE model instead of pretraining again
        unet, _ = load_enhancer(pretrained)
        ec.epochs = 0
    else:
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(derive_seed(args.seed, "unet"))
            unet = UNet()
    hist = train_enhancer(unet, train, ec, metric)
    name = f"enhancer-{regime}.pt"
    save_enhancer(out_dir / name, unet, {"regime": regime, "seed": args.seed})
    _write_rows(
        out_dir / f"enhance-history-{regime}.csv",
        [{"epoch": i, "phase": p, "loss": l} for i, (p, l) in enumerate(zip(hist.phase, hist.epoch_loss))],
    )
    # one manifest per regime so the three runs resume independently
    _write_manifest(out_dir, f"enhance-train-{regime}", cfg, args.seed, [name, f"enhance-history-{regime}.csv"])
    print(f"saved {out_dir / name}")
    return 0


def cmd_enhance_eval(args, cfg, out_dir: Path) -> int:
    import os

    from .enhance import MEASURE_ENV, evaluate_enhancer, external_measure, load_enhancer

    _, test = _enhance_sets(cfg, args.seed)
    extra = {"external": external_measure} if os.environ.get(MEASURE_ENV) else None
    rows = [{"system": "Noisy", **evaluate_enhancer(None, test, extra)}]
    for regime, label in REGIME_ROWS.items():
        path = out_dir / f"enhancer-{regime}.pt"
        if path.is_file():
            unet, _ = load_enhancer(path)
            rows.append({"system": label, **evaluate_enhancer(unet, test, extra)})
    cols = ["system", "l2", "mrstft", "si_sdr_db"] + (["external"] if extra else [])
    rows = [{c: r[c] for c in cols} for r in rows]
    _write_rows(out_dir / "enhancement.csv", rows)
    _write_rows(out_dir / "enhancement.md", rows)
    _write_manifest(out_dir, "enhance-eval", cfg, args.seed, ["enhancement.csv", "enhancement.md"])
    print((out_dir / "enhancement.md").read_text(), end="")
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    common.add_argument("--seed", type=int, default=0, help="top-level seed (default 0)")
    common.add_argument("--workers", type=int, default=1, help="data-generation processes")
    common.add_argument("--out-dir", default="runs", help="output directory (default ./runs)")
    common.add_argument("--force", action="store_true", help="rerun even when the manifest is complete")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="saqam", description="Binaural speech quality metric toolkit")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="write a triplet dataset")
    s.add_argument("--n-triplets", type=int, help="shorthand for data.n_triplets")
    sub.add_parser("train", parents=[common], help="train the metric network")
    s = sub.add_parser("score", parents=[common], help="score two WAV files")
    s.add_argument("--model", required=True)
    s.add_argument("--a", required=True, help="test signal")
    s.add_argument("--b", required=True, help="reference signal")
    s.add_argument("--json", action="store_true", help="JSON report with per-layer distances")
    s.add_argument("--no-logits", action="store_true", help="leave the logit layers out of D2")
    s = sub.add_parser("eval-objective", parents=[common], help="retrieval, overlap and monotonicity suite")
    s.add_argument("--model", required=True)
    s = sub.add_parser("eval-subjective", parents=[common], help="correlate scores with MOS")
    s.add_argument("--scores")
    s.add_argument("--mos")
    s = sub.add_parser("enhance-train", parents=[common], help="train the enhancement U-Net")
    s.add_argument("--regime", choices=("logmse", "scratch", "finetune"))
    s.add_argument("--metric", help="metric checkpoint for the SAQAM loss")
    sub.add_parser("enhance-eval", parents=[common], help="compare trained enhancers")
    sub.add_parser("config", help="print the configuration keys")
    return p


COMMANDS = {
    "simulate": cmd_simulate,
    "train": cmd_train,
    "score": cmd_score,
    "eval-objective": cmd_eval_objective,
    "eval-subjective": cmd_eval_subjective,
    "enhance-train": cmd_enhance_train,
    "enhance-eval": cmd_enhance_eval,
}


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "config":
        print(schema_doc())
        return 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    overrides = list(args.set)
    if args.command == "simulate" and args.n_triplets is not None:
        overrides.append(f"data.n_triplets={args.n_triplets}")
    if args.command == "enhance-train":
        if args.regime:
            overrides.append(f"enhance.regime={args.regime}")
        if args.metric:
            overrides.append(f"enhance.metric={args.metric}")
    try:
        cfg = load_config(args.config, overrides)
        out_dir = Path(args.out_dir)
        step = args.command
        if step == "enhance-train":
            step = f"enhance-train-{cfg['enhance.regime']}"
        if step != "score":
            key = "enhance-train" if step.startswith("enhance-train") else step
            if _up_to_date_step(out_dir, step, key, cfg, args.seed, args.force):
                print(f"{step}: up to date ({_manifest_path(out_dir, step)}); use --force to rerun")
                return 0
            out_dir.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](args, cfg, out_dir)
    except (ConfigError, ManifestConflict, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def _up_to_date_step(out_dir, step, key, cfg, seed, force):
    # manifests are named by step but the config subset is chosen by command
    path = _manifest_path(out_dir, step)
    if force or not path.is_file():
        return False
    man = json.loads(path.read_text())
    if man.get("status") != "complete":
        return False
    if man.get("config") != dump_config(relevant(cfg, key)) or man.get("seed") != seed:
        raise ManifestConflict(f"{path} was produced with a different config or seed; use --force or another --out-dir")
    return all((out_dir / p).exists() for p in man.get("outputs", []))


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
