"""Flat dotted-key experiment configuration with a strict schema.

Every key has an explicit default except ``train.missing_rates``.  Unknown
keys and wrongly typed values are collected and reported together.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

from .backbone import BackboneConfig
from .data import DatasetSpec, Dataset, generate_synthetic, load_features
from .fcm import FcmConfig
from .grm import GrmConfig
from .trainer import Ablations, TrainConfig

OUTPUT_ROOT_ENV = "BALM_OUTPUT_ROOT"
REQUIRED = object()


class ConfigError(ValueError):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


def _int(v):
    if isinstance(v, bool) or not isinstance(v, int):
        raise TypeError("expected an integer")
    return v


def _float(v):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise TypeError("expected a number")
    return float(v)


def _bool(v):
    if not isinstance(v, bool):
        raise TypeError("expected true/false")
    return v


def _str(v):
    if not isinstance(v, str):
        raise TypeError("expected a string")
    return v


def _opt(cast):
    return lambda v: None if v is None else cast(v)


def _list(cast):
    def conv(v):
        if not isinstance(v, list):
            raise TypeError("expected a list")
        return [cast(x) for x in v]
    return conv


# key -> (default, converter)
SCHEMA = {
    "data.M": (3, _int),
    "data.dims": ([16, 16, 16], _list(_int)),
    "data.classes": (4, _int),
    "data.n_train": (640, _int),
    "data.n_val": (320, _int),
    "data.n_test": (320, _int),
    "data.snr": ([3.0, 3.0, 3.0], _list(_float)),
    "data.seed": (0, _int),
    "data.modalities": (None, _opt(_list(_str))),
    "data.train_path": (None, _opt(_str)),
    "data.val_path": (None, _opt(_str)),
    "data.test_path": (None, _opt(_str)),
    "train.lr": (0.1, _float),
    "train.epochs": (200, _int),
    "train.batch_size": (32, _int),
    "train.missing_rates": (REQUIRED, _list(_float)),
    "train.loss_reduction": ("mean", _str),
    "grm.rho": (1.4, _float),
    "grm.tau": (0.5, _float),
    "grm.delta_floor": (1e-8, _float),
    "grm.mod_loss_mode": ("current", _str),
    "grm.detach_unimodal": (True, _bool),
    "fcm.epsilon": (1e-8, _float),
    "fcm.d_global": (None, _opt(_int)),
    "fcm.descriptor_scope": ("batch", _str),
    "model.variant": ("concat", _str),
    "model.d_emb": (32, _int),
    "model.d_h": (32, _int),
    "model.hidden": (64, _int),
    "ablation.fcm_on": (True, _bool),
    "ablation.grm_distribution_on": (True, _bool),
    "ablation.grm_spatial_on": (True, _bool),
    "output.dir": (None, _opt(_str)),
    "seeds": ([0], _list(_int)),
}

DATA_FILE_KEYS = ("data.train_path", "data.val_path", "data.test_path")


def resolve(raw: dict) -> dict:
    """Validate ``raw`` and return a complete flat config with defaults filled in."""
    if not isinstance(raw, dict):
        raise ConfigError(["config must be a JSON object"])
    problems = [f"unknown key: {k}" for k in sorted(raw) if k not in SCHEMA]
    out = {}
    for key, (default, conv) in SCHEMA.items():
        if key not in raw:
            if default is REQUIRED:
                problems.append(f"missing required key: {key}")
            else:
                out[key] = default
            continue
        try:
            out[key] = conv(raw[key])
        except TypeError as exc:
            problems.append(f"{key}: {exc}")
    if problems:
        raise ConfigError(problems)
    paths = [out[k] for k in DATA_FILE_KEYS]
    if any(p is not None for p in paths) and not all(p is not None for p in paths):
        raise ConfigError([f"{', '.join(DATA_FILE_KEYS)} must be given together"])
    if not out["seeds"]:
        raise ConfigError(["seeds: at least one seed is required"])
    # build every dataclass once so value errors surface at load time
    try:
        train_config(out, out["seeds"][0])
        if paths[0] is None:
            dataset_spec(out)
    except ValueError as exc:
        raise ConfigError([str(exc)]) from exc
    return out


def load(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise FileNotFoundError(f"cannot read config {path}: {exc.strerror}") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError([f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}"]) from exc
    return resolve(raw)


def _section(flat: dict, prefix: str) -> dict:
    n = len(prefix) + 1
    return {k[n:]: v for k, v in flat.items() if k.startswith(prefix + ".")}


def dataset_spec(flat: dict) -> DatasetSpec:
    d = _section(flat, "data")
    mods = d["modalities"]
    return DatasetSpec(
        M=d["M"], dims=tuple(d["dims"]), classes=d["classes"], n_train=d["n_train"],
        n_val=d["n_val"], n_test=d["n_test"], snr=tuple(d["snr"]), seed=d["seed"],
        modalities=None if mods is None else tuple(mods),
    )


def train_config(flat: dict, seed: int) -> TrainConfig:
    t = _section(flat, "train")
    return TrainConfig(
        lr=t["lr"], epochs=t["epochs"], batch_size=t["batch_size"],
        missing_rates=tuple(t["missing_rates"]), seed=seed,
        loss_reduction=t["loss_reduction"],
        grm=GrmConfig(**_section(flat, "grm")),
        fcm=FcmConfig(**_section(flat, "fcm")),
        model=BackboneConfig(**_section(flat, "model")),
        ablations=Ablations(**_section(flat, "ablation")),
    )


def load_datasets(flat: dict) -> dict[str, Dataset]:
    if flat["data.train_path"] is None:
        return dict(zip(("train", "val", "test"), generate_synthetic(dataset_spec(flat))))
    sets = {s: load_features(flat[f"data.{s}_path"]) for s in ("train", "val", "test")}
    classes = max(d.num_classes for d in sets.values())
    for d in sets.values():
        d.num_classes = classes
        if d.modalities != sets["train"].modalities:
            raise ConfigError([f"modalities differ between splits: {d.modalities}"])
    return sets


@dataclass
class RunPlan:
    seed: int
    snapshot: dict
    run_dir: Path


def output_root(flat: dict) -> Path:
    if flat["output.dir"] is not None:
        return Path(flat["output.dir"])
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


def plan_runs(flat: dict) -> list[RunPlan]:
    """One entry per seed; directory names are ``<config hash>-seed<seed>``.

    The hash covers everything except the seed list and output location, so
    the same experiment lands in the same directory name wherever it runs.
    """
    from .trainer import config_hash

    body = {k: v for k, v in flat.items() if k not in ("seeds", "output.dir")}
    h = config_hash(body)
    plans = []
    for s in flat["seeds"]:
        snapshot = dict(body)
        snapshot["seed"] = s
        plans.append(RunPlan(s, snapshot, output_root(flat) / f"{h}-seed{s}"))
    return plans
