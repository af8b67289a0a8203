"""Plain-text ``key = value`` configuration with dotted keys.

A config file holds one setting per line (``#`` starts a comment)::

    model.inception_width = 24
    loss.weights = 1, 1
    train.crop_seconds = 1.0

Command-line overrides use the same syntax (``--set train.lr=1e-3``).
Unknown keys and unparsable values raise :class:`ConfigError` naming the key.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Key:
    kind: str  # int | float | str | bool | floats | strs
    default: object
    doc: str = ""
    choices: tuple = ()


def _floats(*v):
    return tuple(float(x) for x in v)


SCHEMA: dict[str, Key] = {
    # data
    "data.clean_dir": Key("str", "", "directory of clean mono WAVs; empty uses the synthetic speech pool"),
    "data.n_clean": Key("int", 64, "size of the synthetic clean pool"),
    "data.test_fraction": Key("float", 0.25, "held-out share of the clean pool"),
    "data.brir_csv": Key("str", "", "BRIR set CSV; empty synthesizes BRIRs"),
    "data.azimuths": Key("floats", (), "azimuth grid in degrees; empty draws uniformly from data.azimuth_range"),
    "data.azimuth_range": Key("floats", (-90.0, 90.0), "uniform azimuth range when no grid is given"),
    "data.rt60": Key("floats", (0.08, 0.5), "RT60 range in seconds"),
    "data.kinds": Key("strs", ("additive_noise", "binaural_noise"), "perturbations used for triplets"),
    "data.n_triplets": Key("int", 400, "training triplets"),
    "data.n_test_triplets": Key("int", 100, "held-out triplets"),
    "data.n_doa": Key("int", 200, "training localization clips"),
    "data.n_test_doa": Key("int", 100, "held-out localization clips"),
    "data.doa_snr": Key("floats", (5.0, 30.0), "SNR range of the noise added to localization clips"),
    # model
    "model.inception_blocks": Key("int", 6),
    "model.inception_width": Key("int", 64, "filters per Inception block, split over three branches"),
    "model.input_mode": Key("str", "both", "spectrogram planes fed to the network", ("both", "mag_only", "phase_only")),
    # loss
    "loss.weights": Key("floats", (1.0, 1.0), "(LQ triplet, SQ localization) weights; 0 disables a task"),
    "loss.doa": Key("str", "emd", "localization loss", ("emd", "xent")),
    "loss.margin": Key("floats", (0.5, 1.5), "triplet margin at the first and last epoch"),
    # training
    "train.epochs": Key("int", 50),
    "train.batch_size": Key("int", 64, "triplets per step"),
    "train.doa_batch_size": Key("int", 64, "localization clips per step"),
    "train.lr": Key("float", 1e-4),
    "train.crop_seconds": Key("float", 0.0, "random training crop; 0 trains on whole clips"),
    "train.shift_prob": Key("float", 0.5),
    # objective evaluation
    "eval.levels": Key("floats", (-10.0, -4.0, 2.0, 8.0, 14.0, 20.0), "additive-noise SNR levels for monotonicity"),
    "eval.n_contents": Key("int", 10, "contents averaged per level or angle"),
    "eval.groups": Key(
        "strs",
        (
            "additive_noise:-15", "additive_noise:-5", "additive_noise:5", "additive_noise:15", "additive_noise:25",
            "binaural_noise:-15", "binaural_noise:-5", "binaural_noise:5", "binaural_noise:15", "binaural_noise:25",
        ),
        "kind:level quality groups for retrieval and overlap",
    ),
    "eval.per_group": Key("int", 100, "recordings per quality group"),
    "eval.k": Key("int", 10, "retrieval depth for mean precision"),
    "eval.n_pairs": Key("int", 200, "same- and different-quality pairs for the overlap measure"),
    "eval.reference_az": Key("float", -81.0),
    "eval.test_azimuths": Key("floats", tuple(np.linspace(-81.0, 81.0, 10)), "test angles for the D2 sweep"),
    "eval.plots": Key("bool", False, "also write distance curves as PNG (needs matplotlib)"),
    # subjective evaluation
    "subjective.scores": Key("str", "", "CSV with condition_id, item_id, d1, d2, d3"),
    "subjective.mos": Key("str", "", "CSV with condition_id, rating"),
    # enhancement
    "enhance.regime": Key("str", "logmse", "", ("logmse", "scratch", "finetune")),
    "enhance.metric": Key("str", "", "metric checkpoint used by the SAQAM loss"),
    "enhance.n_train": Key("int", 600, "3-second training mixtures"),
    "enhance.n_test": Key("int", 60, "3-second test mixtures"),
    "enhance.snr": Key("floats", (-5.0, 10.0)),
    "enhance.epochs": Key("int", 20, "LogMSE epochs, or Scratch epochs"),
    "enhance.finetune_epochs": Key("int", 5),
    "enhance.batch_size": Key("int", 8),
    "enhance.lr": Key("float", 1e-3),
    "enhance.finetune_lr": Key("float", 1e-4),
    "enhance.lam": Key("float", 1.0, "SAQAM weight in the Scratch regime"),
    "enhance.combined": Key("bool", False, "keep LogMSE while finetuning"),
    "enhance.crop_seconds": Key("float", 0.0, "random training crop; 0 trains on whole clips"),
}

# which keys each command reads; used for documentation and the manifest
COMMAND_KEYS = {
    "simulate": ("data.",),
    "train": ("data.", "model.", "loss.", "train."),
    "score": (),
    "eval-objective": ("data.", "eval."),
    "eval-subjective": ("subjective.",),
    "enhance-train": ("data.clean_dir", "data.n_clean", "data.test_fraction", "enhance."),
    "enhance-eval": ("data.clean_dir", "data.n_clean", "data.test_fraction", "enhance."),
}


def _parse(key: str, raw: str):
    spec = SCHEMA[key]
    raw = raw.strip()
    try:
        if spec.kind == "int":
            val = int(raw)
        elif spec.kind == "float":
            val = float(raw)
        elif spec.kind == "bool":
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            val = low in ("true", "1", "yes")
        elif spec.kind == "floats":
            val = tuple(float(x) for x in raw.split(",") if x.strip())
        elif spec.kind == "strs":
            val = tuple(x.strip() for x in raw.split(",") if x.strip())
        else:
            val = raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {spec.kind}") from None
    if spec.choices and val not in spec.choices:
        raise ConfigError(f"{key}: {val!r} not in {spec.choices}")
    return val


def parse_lines(lines, origin: str = "<config>") -> dict:
    out = {}
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{n}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"{origin}:{n}: unknown key {key!r}")
        out[key] = _parse(key, raw)
    return out


def load_config(path=None, overrides=()) -> dict:
    """Defaults, then the file at ``path``, then ``key=value`` overrides."""
    cfg = {k: v.default for k, v in SCHEMA.items()}
    if path:
        p = Path(path)
        if not p.is_file():
            raise FileNotFoundError(f"config file not found: {p}")
        cfg.update(parse_lines(p.read_text().splitlines(), str(p)))
    cfg.update(parse_lines(overrides, "--set"))
    return cfg


def format_value(v) -> str:
    if isinstance(v, tuple):
        return ", ".join(format_value(x) for x in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def dump_config(cfg: dict) -> str:
    return "".join(f"{k} = {format_value(v)}\n" for k, v in cfg.items())


def relevant(cfg: dict, command: str) -> dict:
    prefixes = COMMAND_KEYS[command]
    return {k: v for k, v in cfg.items() if any(k.startswith(p) for p in prefixes)}


def derive_seed(seed: int, component: str) -> int:
    """Per-component seed: ``SeedSequence([seed, crc32(component)])``.

    Components used by the pipelines: ``clean-pool``, ``triplets``,
    ``test-triplets``, ``doa``, ``test-doa``, ``model``, ``train``, ``eval``,
    ``enhance-data``, ``enhance-test``, ``enhance-train``.
    """
    ss = np.random.SeedSequence([int(seed), zlib.crc32(component.encode())])
    return int(ss.generate_state(1)[0])


def schema_doc() -> str:
    lines = []
    for k, spec in SCHEMA.items():
        extra = f" one of {'|'.join(spec.choices)}" if spec.choices else ""
        lines.append(f"{k} ({spec.kind}, default {format_value(spec.default)}){extra}  {spec.doc}".rstrip())
    return "\n".join(lines)
