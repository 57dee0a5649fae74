"""Experiment configuration: a nested YAML document, fully validated
before anything runs.  Validation is total: every problem is collected
and reported in one pass, and unknown keys are rejected at every level.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Any

import yaml

from .adapters import AdapterConfig
from .errors import NotFoundError, ValidationError
from .gan import DiscriminatorSpec, GeneratorSpec, TrainConfig
from .replay import ReplayConfig

_DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "out_dir": "runs/exp",
    "image_size": 32,
    "conditional": False,
    "model": {
        "latent_dim": 64,
        "embed_dim": 1,
        "init_size": 4,
        "g_channels": [32, 32, 16, 16],
        "g_upsample": [True, True, True, False],
        "d_base_channels": 16,
        "d_channels": [16, 32, 32, 32],
        "d_downsample": [True, True, True, False],
        "d_embed_planes": 4,
    },
    "adapter": {
        "k": 4,
        "z": 4,
        "beta": 1,
        "mode": "parallel",
        "residual_bias": True,
        "init": "near_identity",
    },
    "train": {
        "iterations_base": 3000,
        "iterations_task": 3000,
        "batch_size": 8,
        "lr": 1e-4,
        "beta1": 0.0,
        "beta2": 0.99,
        "gamma": 10.0,
        "loss_variant": "nonsat",
        "reinit_discriminator": False,
    },
    "data": {"train_size": 256, "eval_size": 128},
    "replay": {
        "n": 16,
        "lr": 5e-5,
        "beta1": 0.9,
        "beta2": 0.999,
        "epochs": 20,
        "classes_per_task": 2,
    },
    "eval": {"extractor_seed": 7, "feature_dim": 32, "fid_samples": 128},
    "tasks": [],
}

_FAMILIES = ("blobs", "stripes", "checkers", "rings")


def _is_dims(v):
    return isinstance(v, int) and not isinstance(v, bool) and v > 0


def _pow2(v):
    return _is_dims(v) and (v & (v - 1)) == 0


_CHECKS = {
    "seed": lambda v: isinstance(v, int) and not isinstance(v, bool),
    "out_dir": lambda v: isinstance(v, str) and bool(v),
    "image_size": lambda v: _pow2(v) and v >= 8,
    "conditional": lambda v: isinstance(v, bool),
    "model.latent_dim": _is_dims,
    "model.embed_dim": _is_dims,
    "model.init_size": _pow2,
    "model.g_channels": lambda v: isinstance(v, list) and v and all(_is_dims(c) for c in v),
    "model.g_upsample": lambda v: isinstance(v, list) and all(isinstance(c, bool) for c in v),
    "model.d_base_channels": _is_dims,
    "model.d_channels": lambda v: isinstance(v, list) and v and all(_is_dims(c) for c in v),
    "model.d_downsample": lambda v: isinstance(v, list) and all(isinstance(c, bool) for c in v),
    "model.d_embed_planes": _is_dims,
    "adapter.k": _is_dims,
    "adapter.z": _is_dims,
    "adapter.beta": lambda v: v in (0, 1) and not isinstance(v, bool),
    "adapter.mode": lambda v: v in ("parallel", "sequential"),
    "adapter.residual_bias": lambda v: isinstance(v, bool),
    "adapter.init": lambda v: v in ("near_identity", "zero"),
    "train.iterations_base": _is_dims,
    "train.iterations_task": _is_dims,
    "train.batch_size": _is_dims,
    "train.lr": lambda v: isinstance(v, (int, float)) and v > 0,
    "train.beta1": lambda v: isinstance(v, (int, float)) and 0 <= v < 1,
    "train.beta2": lambda v: isinstance(v, (int, float)) and 0 <= v < 1,
    "train.gamma": lambda v: isinstance(v, (int, float)) and v > 0,
    "train.loss_variant": lambda v: v in ("nonsat", "minimax"),
    "train.reinit_discriminator": lambda v: isinstance(v, bool),
    "data.train_size": _is_dims,
    "data.eval_size": _is_dims,
    "replay.n": _is_dims,
    "replay.lr": lambda v: isinstance(v, (int, float)) and v > 0,
    "replay.beta1": lambda v: isinstance(v, (int, float)) and 0 <= v < 1,
    "replay.beta2": lambda v: isinstance(v, (int, float)) and 0 <= v < 1,
    "replay.epochs": _is_dims,
    "replay.classes_per_task": _is_dims,
    "eval.extractor_seed": lambda v: isinstance(v, int) and not isinstance(v, bool),
    "eval.feature_dim": _is_dims,
    "eval.fid_samples": _is_dims,
}


@dataclass
class ExperimentConfig:
    raw: dict[str, Any]

    def __getitem__(self, dotted: str):
        node = self.raw
        for part in dotted.split("."):
            node = node[part]
        return node

    # -- spec builders ------------------------------------------------------

    def num_classes(self) -> int:
        return self["replay.classes_per_task"] if self["conditional"] else 1

    def generator_spec(self) -> GeneratorSpec:
        m = self.raw["model"]
        return GeneratorSpec(
            latent_dim=m["latent_dim"],
            embed_dim=m["embed_dim"],
            num_classes=self.num_classes(),
            conditional=self["conditional"],
            init_size=m["init_size"],
            init_channels=m["g_channels"][0],
            blocks=tuple(zip(m["g_channels"], m["g_upsample"])),
        )

    def discriminator_spec(self) -> DiscriminatorSpec:
        m = self.raw["model"]
        return DiscriminatorSpec(
            embed_planes=m["d_embed_planes"],
            num_classes=self.num_classes(),
            conditional=self["conditional"],
            base_channels=m["d_base_channels"],
            blocks=tuple(zip(m["d_channels"], m["d_downsample"])),
            final_size=self["image_size"] // 2 ** sum(m["d_downsample"]),
        )

    def adapter_config(self) -> AdapterConfig:
        a = self.raw["adapter"]
        return AdapterConfig(
            k=a["k"], z=a["z"], beta=a["beta"], mode=a["mode"],
            residual_bias=a["residual_bias"], init=a["init"],
        )

    def train_config(self, task_id: int) -> TrainConfig:
        t = self.raw["train"]
        return TrainConfig(
            gamma=float(t["gamma"]),
            lr=float(t["lr"]),
            beta1=float(t["beta1"]),
            beta2=float(t["beta2"]),
            batch_size=t["batch_size"],
            iterations=t["iterations_base"] if task_id == 0 else t["iterations_task"],
            seed=self["seed"],
            loss_variant=t["loss_variant"],
            reinit_discriminator=t["reinit_discriminator"],
        )

    def replay_config(self) -> ReplayConfig:
        r = self.raw["replay"]
        return ReplayConfig(
            n=r["n"], lr=float(r["lr"]), beta1=float(r["beta1"]), beta2=float(r["beta2"]),
            epochs=r["epochs"], classes_per_task=r["classes_per_task"],
        )


def _merge(defaults: dict, user: dict, prefix: str, failures: list[str]) -> dict:
    out = {}
    for key, dval in defaults.items():
        path = f"{prefix}{key}"
        if key in user:
            uval = user[key]
            if isinstance(dval, dict):
                if isinstance(uval, dict):
                    out[key] = _merge(dval, uval, path + ".", failures)
                else:
                    failures.append(f"{path}: expected a mapping")
                    out[key] = dval
            else:
                out[key] = uval
        else:
            out[key] = {k: v for k, v in dval.items()} if isinstance(dval, dict) else dval
    for key in user:
        if key not in defaults:
            failures.append(f"{prefix}{key}: unknown key")
    return out


def _validate_tasks(tasks, conditional: bool, failures: list[str]):
    if not isinstance(tasks, list) or not tasks:
        failures.append("tasks: at least one task (the base task) is required")
        return
    for i, t in enumerate(tasks):
        if not isinstance(t, dict):
            failures.append(f"tasks[{i}]: expected a mapping")
            continue
        keys = set(t)
        if "dir" in keys:
            extra = keys - {"dir"}
        else:
            extra = keys - {"family", "palette_seed"}
            if t.get("family") not in _FAMILIES:
                failures.append(f"tasks[{i}].family: must be one of {list(_FAMILIES)}")
            if not isinstance(t.get("palette_seed", 0), int):
                failures.append(f"tasks[{i}].palette_seed: expected an integer")
        for k in sorted(extra):
            failures.append(f"tasks[{i}].{k}: unknown key")


def validate(doc: Any) -> ExperimentConfig:
    failures: list[str] = []
    if not isinstance(doc, dict):
        raise ValidationError(["config root must be a mapping"])
    merged = _merge(_DEFAULTS, doc, "", failures)
    for dotted, check in _CHECKS.items():
        node = merged
        for part in dotted.split("."):
            node = node.get(part) if isinstance(node, dict) else None
        try:
            ok = node is not None and check(node)
        except Exception:
            ok = False
        if not ok:
            failures.append(f"{dotted}: invalid value {node!r}")
    _validate_tasks(merged.get("tasks"), merged.get("conditional"), failures)

    # structural consistency
    m = merged["model"]
    if isinstance(m.get("g_channels"), list) and isinstance(m.get("g_upsample"), list):
        if len(m["g_channels"]) != len(m["g_upsample"]):
            failures.append("model.g_channels and model.g_upsample must have equal length")
        elif _pow2(m.get("init_size", 0)) and _pow2(merged.get("image_size", 0)):
            out = m["init_size"] * 2 ** sum(1 for u in m["g_upsample"] if u)
            if out != merged["image_size"]:
                failures.append(
                    f"image_size {merged['image_size']} != init_size * 2^upsamples = {out}"
                )
    if isinstance(m.get("d_channels"), list) and isinstance(m.get("d_downsample"), list):
        if len(m["d_channels"]) != len(m["d_downsample"]):
            failures.append("model.d_channels and model.d_downsample must have equal length")
        elif _pow2(merged.get("image_size", 0)):
            down = 2 ** sum(1 for u in m["d_downsample"] if u)
            if merged["image_size"] // down < 1 or merged["image_size"] % down:
                failures.append("model.d_downsample: downsamples below 1x1 at image_size")
    a = merged["adapter"]
    if isinstance(m.get("g_channels"), list):
        for grp, name in ((a.get("k"), "adapter.k"), (a.get("z"), "adapter.z")):
            if _is_dims(grp):
                bad = [c for c in m["g_channels"] if _is_dims(c) and c % grp]
                if bad:
                    failures.append(f"{name}={grp} must divide every generator channel count {bad}")

    if failures:
        raise ValidationError(sorted(failures))
    return ExperimentConfig(merged)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise NotFoundError(f"no such config file: {path}")
    doc = yaml.safe_load(path.read_text()) or {}
    return validate(doc)
