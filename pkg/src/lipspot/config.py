"""Run configuration: named presets plus ``key=value`` overrides.

Keys are flat and dotted (``kws.d_v``, ``train.lr``); every tunable of the
other modules appears in both presets, and unknown keys are rejected.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from pathlib import Path

PAPER = {
    "kws.d_feat": 256,
    "kws.d_v": 256,
    "kws.d_s": 16,
    "kws.dropout_p": 0.2,
    "kws.lrelu_slope": 0.01,
    "kws.bn_momentum": 0.1,
    "g2p.hidden_size": 64,
    "g2p.embedding_size": 128,
    "g2p.target_alphabet": "phonemes",
    "g2p.decoder_enabled": True,
    "model.final_backend": "sequence",
    "train.total_epochs": 100,
    "train.phase1_epochs": 20,
    "train.freeze_epochs": 1,
    "train.lr": 2e-3,
    "train.lr_decay_every": 20,
    "train.lr_decay_factor": 0.5,
    "train.batch_videos": 40,
    "train.n_p_phase1": 4,
    "train.n_p_phase2": 6,
    "train.alpha_phase1": 1.0,
    "train.alpha_phase2": 0.1,
    "train.phase1_subsets": "train",
    "train.phase2_subsets": "train,pretrain",
    "train.shuffle_labels": False,
    "train.grad_clip": 0.0,
    "train.train_frontend": False,
    "train.val_min_phonemes": 6,
    "eval.min_query_phonemes": 6,
    "eval.tolerance": 2,
    "synth.lexicon_words": 0,
    "synth.frames_per_phoneme": 3,
    "synth.noise_sigma": 0.1,
    "synth.words_min": 3,
    "synth.words_max": 8,
    "synth.n_utterances": 2000,
    "synth.validation_fraction": 0.05,
    "synth.test_fraction": 0.15,
    "synth.n_test_words": 0,
    "split.train": 0.75,
    "split.validation": 0.05,
    "split.test": 0.20,
    "split.n_p": 4,
}

# Reduced widths and schedule for CPU-only runs on the synthetic corpus. The
# curriculum keeps the full-scale proportions (phase 1 = first fifth of
# training, lr halved every fifth).
DESK = {
    **PAPER,
    "kws.d_feat": 32,
    "kws.d_v": 64,
    "kws.d_s": 16,
    "g2p.hidden_size": 32,
    "g2p.embedding_size": 64,
    "train.total_epochs": 25,
    "train.phase1_epochs": 5,
    "train.lr_decay_every": 5,
    "train.grad_clip": 5.0,
    "synth.lexicon_words": 400,
    "synth.frames_per_phoneme": 2,
    "synth.words_min": 3,
    "synth.words_max": 6,
    "synth.n_test_words": 50,
}

PRESETS = {"paper-faithful": PAPER, "desk-scale": DESK}


class ConfigError(ValueError):
    pass


def _coerce(key: str, value, default):
    if isinstance(value, str):
        if isinstance(default, bool):
            low = value.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ConfigError(f"{key}: expected a boolean, got {value!r}")
        if isinstance(default, int):
            try:
                return int(value)
            except ValueError:
                raise ConfigError(f"{key}: expected an integer, got {value!r}") from None
        if isinstance(default, float):
            try:
                return float(value)
            except ValueError:
                raise ConfigError(f"{key}: expected a number, got {value!r}") from None
        return value
    if isinstance(default, bool) != isinstance(value, bool):
        raise ConfigError(f"{key}: type mismatch for {value!r}")
    if isinstance(default, float) and isinstance(value, int):
        return float(value)
    return value


def resolve(preset: str = "desk-scale", overrides: dict | None = None) -> dict:
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    cfg = copy.deepcopy(PRESETS[preset])
    for key, value in (overrides or {}).items():
        if key not in cfg:
            raise ConfigError(f"unknown configuration key {key!r}")
        cfg[key] = _coerce(key, value, cfg[key])
    return cfg


def parse_overrides(items) -> dict:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def first_difference(a: dict, b: dict) -> str | None:
    for key in sorted(set(a) | set(b)):
        if a.get(key, "<missing>") != b.get(key, "<missing>"):
            return key
    return None


@dataclass
class RunConfig:
    dictionary: Path
    manifest: Path
    split_prefix: Path
    out_dir: Path
    preset: str = "desk-scale"
    overrides: dict = field(default_factory=dict)
    seed: int = 0

    def resolved(self) -> dict:
        return resolve(self.preset, self.overrides)
