"""Run configuration: strict nested schema with documented defaults.

Configs are YAML documents merged over the defaults below; unknown keys are
fatal so hyperparameter typos cannot pass silently. The fully resolved config
(defaults applied, overrides included) is echoed into every run directory.
"""

from __future__ import annotations

import copy
import os
from pathlib import Path

import yaml

from .errors import ConfigError
from .scenes import CylinderSpec, GTScene, make_camera_rig
from .training import TrainConfig

DEFAULT_CONFIG: dict = {
    "seed": 0,
    "workers": 1,
    "paths": {
        "dataset": "runs/dataset",
        "run": "runs/train",
    },
    "scene": {
        "family": "twist",
        "radius": 0.5,
        "height": 2.0,
        "radial_segments": 16,
        "axial_segments": 8,
        "ring_layers": 2,
        "twist_max": 1.8,
        "bend_max": 1.2,
        "train_expressions": [0.0, 0.5, 1.0],
        "sequence_frames": 25,
        "eval_every": 4,
        "sigma_inside": 50.0,
        "wrinkle_amplitude": 0.4,
        "wrinkle_freq_angular": 12,
        "wrinkle_freq_axial": 6,
        "strain_ref": 0.35,
    },
    "cameras": {
        "ring_count": 16,
        "elevated_count": 4,
        "image_size": 96,
        "focal": 100.0,
        "ring_radius": 3.2,
        "elevated_height": 1.8,
        "elevated_radius": 2.3,
        "eval_camera_stride": 4,
    },
    "grid": {
        "resolution": 64,
        "margin": 0.08,
    },
    "renderer": {
        "n_coarse": 128,
        "n_importance": 64,
        "background": [1.0, 1.0, 1.0],
        "t_near": 0.5,
        "t_far": 8.0,
        "gt_supersampling": 4,
    },
    "blendfield": {
        "tau": 1.0e6,
        "neighborhood": 20,
        "lambda_diff": 0.1,
        "smoothing_iters": 1,
    },
    "training": {
        "batch_rays": 1024,
        "lr": 5.0e-4,
        "lr_decay_factor": 0.1,
        "lr_decay_steps": 20000,
        "total_steps": 20000,
        "adam_beta1": 0.9,
        "adam_beta2": 0.999,
        "adam_eps": 1.0e-8,
        "sparsity_weight": 0.0,
        "variant": "full",
        "log_every": 100,
        "checkpoint_every": 5000,
    },
}


def _merge_strict(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key: {where}")
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"{where} must be a mapping")
            out[key] = _merge_strict(base[key], val, where)
        else:
            out[key] = val
    return out


def load_config(path: str | Path | None = None) -> dict:
    """Defaults merged with an optional YAML file; unknown keys are fatal."""
    if path is None:
        return copy.deepcopy(DEFAULT_CONFIG)
    text = Path(path).read_text()
    data = yaml.safe_load(text) or {}
    if not isinstance(data, dict):
        raise ConfigError(f"config root must be a mapping: {path}")
    return _merge_strict(DEFAULT_CONFIG, data)


def apply_overrides(config: dict, sets: list[str]) -> dict:
    """Apply --set key=value overrides with dotted paths; values parse as YAML."""
    out = copy.deepcopy(config)
    for item in sets:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, _, raw = item.partition("=")
        node = out
        parts = key.strip().split(".")
        for p in parts[:-1]:
            if not isinstance(node, dict) or p not in node:
                raise ConfigError(f"unknown config key: {key}")
            node = node[p]
        leaf = parts[-1]
        if not isinstance(node, dict) or leaf not in node:
            raise ConfigError(f"unknown config key: {key}")
        if isinstance(node[leaf], dict):
            raise ConfigError(f"cannot --set a whole section: {key}")
        node[leaf] = yaml.safe_load(raw)
    return out


def echo_config(config: dict, out_dir: str | Path, name: str = "config_resolved.yaml"):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / name).write_text(yaml.safe_dump(config, sort_keys=True))


def effective_workers(config: dict) -> int:
    """Configured worker count, capped by the BLENDFIELDS_THREADS env var."""
    workers = int(config["workers"])
    cap = os.environ.get("BLENDFIELDS_THREADS")
    if cap is not None:
        workers = min(workers, max(1, int(cap)))
    return max(1, workers)


def scene_from_config(config: dict) -> GTScene:
    s = config["scene"]
    spec = CylinderSpec(
        radius=s["radius"], height=s["height"],
        radial_segments=s["radial_segments"], axial_segments=s["axial_segments"],
        ring_layers=s["ring_layers"], twist_max=s["twist_max"], bend_max=s["bend_max"],
    )
    return GTScene(
        spec=spec, family=s["family"],
        train_expressions=tuple(s["train_expressions"]),
        sequence_frames=s["sequence_frames"], eval_every=s["eval_every"],
        sigma_inside=s["sigma_inside"], wrinkle_amplitude=s["wrinkle_amplitude"],
        wrinkle_freq_angular=s["wrinkle_freq_angular"],
        wrinkle_freq_axial=s["wrinkle_freq_axial"], strain_ref=s["strain_ref"],
    )


def cameras_from_config(config: dict, scene: GTScene):
    c = config["cameras"]
    return make_camera_rig(
        scene, ring_count=c["ring_count"], elevated_count=c["elevated_count"],
        image_size=c["image_size"], focal=c["focal"], ring_radius=c["ring_radius"],
        elevated_height=c["elevated_height"], elevated_radius=c["elevated_radius"],
    )


def grid_bbox_from_config(config: dict, scene: GTScene):
    import numpy as np

    spec = scene.spec
    m = config["grid"]["margin"] * max(2.0 * spec.radius, spec.height)
    lo = np.array([-spec.radius - m, -spec.radius - m, -m])
    hi = np.array([spec.radius + m, spec.radius + m, spec.height + m])
    return lo, hi


def train_config_from_config(config: dict) -> TrainConfig:
    t = config["training"]
    return TrainConfig(
        batch_rays=t["batch_rays"],
        n_coarse=config["renderer"]["n_coarse"],
        n_importance=config["renderer"]["n_importance"],
        lr=t["lr"], lr_decay_factor=t["lr_decay_factor"], lr_decay_steps=t["lr_decay_steps"],
        total_steps=t["total_steps"], beta1=t["adam_beta1"], beta2=t["adam_beta2"],
        eps=t["adam_eps"], sparsity_weight=t["sparsity_weight"], seed=config["seed"],
        use_residuals=(t["variant"] == "full"),
        residual_lr_scale=1.0 if t["variant"] == "full" else 0.0,
        log_every=t["log_every"], checkpoint_every=t["checkpoint_every"],
    )
