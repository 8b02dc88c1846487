"""Experiment configuration: one YAML file defines a whole experiment.

Every on-disk artifact embeds the config hash, so any output is traceable to
its exact configuration and stale inputs are refused downstream.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, replace

import yaml

from .errors import ConfigError
from .evalkit import SweepConfig
from .hyper import HyperParams
from .phantom import PhantomConfig
from .seg2d import Seg2DSpec
from .seg3d import Seg3DSpec


@dataclass(frozen=True)
class ExperimentConfig:
    out_dir: str = "runs/default"
    seed: int = 0
    threads: int = 4
    phantom: PhantomConfig = PhantomConfig()
    sweep: SweepConfig = SweepConfig()
    seg2d_spec: Seg2DSpec = Seg2DSpec()
    seg2d_hyper: HyperParams = HyperParams(lr=1e-3, batch_size=64,
                                           patches_per_epoch=2048, epochs=15)
    seg3d_spec: Seg3DSpec = Seg3DSpec()
    seg3d_hyper: HyperParams = HyperParams(lr=1e-4, batch_size=4,
                                           patches_per_epoch=64, epochs=30)

    def to_dict(self) -> dict:
        return {
            "out_dir": self.out_dir,
            "seed": self.seed,
            "threads": self.threads,
            "phantom": {
                "shape": list(self.phantom.shape),
                "voxel_size_um": list(self.phantom.voxel_size_um),
                "n_cells": self.phantom.n_cells,
                "radius_range_um": list(self.phantom.radius_range_um),
                "intensity_fg": self.phantom.intensity_fg,
                "intensity_bg": self.phantom.intensity_bg,
                "noise_sigma": self.phantom.noise_sigma,
                "blur_sigma_um": list(self.phantom.blur_sigma_um),
                "seed": self.phantom.seed,
            },
            "sweep": {
                "slice_counts": list(self.sweep.slice_counts),
                "alphas": list(self.sweep.alphas),
                "seeds": list(self.sweep.seeds),
                "threshold": self.sweep.threshold,
                "fg_bias": self.sweep.fg_bias,
                "tile_overlap": self.sweep.tile_overlap,
            },
            "seg2d": {"spec": self.seg2d_spec.to_dict(), "hyper": self.seg2d_hyper.to_dict()},
            "seg3d": {"spec": self.seg3d_spec.to_dict(), "hyper": self.seg3d_hyper.to_dict()},
        }

    def config_hash(self) -> str:
        js = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(js.encode("utf-8")).hexdigest()[:16]


_TOP_KEYS = {"out_dir", "seed", "threads", "phantom", "sweep", "seg2d", "seg3d"}


def _build(cls, d, name, tuple_fields=()):
    try:
        d = dict(d)
        for k in tuple_fields:
            if k not in d:
                continue
            if k == "pool_factors":
                d[k] = tuple(tuple(p) for p in d[k])
            else:
                d[k] = tuple(d[k])
        return cls(**d)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid {name} section: {e}") from e


def config_from_dict(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    unknown = set(raw) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    cfg = ExperimentConfig()
    kwargs = {}
    for key in ("out_dir", "seed", "threads"):
        if key in raw:
            kwargs[key] = raw[key]
    if "phantom" in raw:
        kwargs["phantom"] = _build(
            PhantomConfig, raw["phantom"], "phantom",
            ("shape", "voxel_size_um", "radius_range_um", "blur_sigma_um"))
    if "sweep" in raw:
        kwargs["sweep"] = _build(SweepConfig, raw["sweep"], "sweep",
                                 ("slice_counts", "alphas", "seeds"))
    for key, spec_cls, spec_tuples in (("seg2d", Seg2DSpec, ("conv_channels", "fc_sizes")),
                                       ("seg3d", Seg3DSpec, ("pool_factors", "patch_shape"))):
        if key in raw:
            section = dict(raw[key])
            bad = set(section) - {"spec", "hyper"}
            if bad:
                raise ConfigError(f"unknown {key} keys: {sorted(bad)}")
            if "spec" in section:
                kwargs[f"{key}_spec"] = _build(spec_cls, section["spec"],
                                               f"{key}.spec", spec_tuples)
            if "hyper" in section:
                kwargs[f"{key}_hyper"] = _build(HyperParams, section["hyper"], f"{key}.hyper")
    try:
        return replace(cfg, **kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as f:
            raw = yaml.safe_load(f)
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except yaml.YAMLError as e:
        raise ConfigError(f"cannot parse config {path}: {e}") from e
    return config_from_dict(raw or {})


def smoke_config(out_dir: str = "runs/smoke") -> ExperimentConfig:
    """Fast 16^3 configuration for end-to-end pipeline checks."""
    return ExperimentConfig(
        out_dir=out_dir,
        phantom=PhantomConfig(
            shape=(16, 16, 16), voxel_size_um=(1.0, 1.0, 1.0), n_cells=2,
            radius_range_um=(2.5, 4.0), intensity_fg=150.0, intensity_bg=20.0,
            noise_sigma=6.0, blur_sigma_um=(0.7, 0.7, 0.7),
        ),
        sweep=SweepConfig(slice_counts=(2, 5, 11), seeds=(0, 1)),
        seg2d_spec=Seg2DSpec(conv_channels=(8, 16, 32), fc_sizes=(32, 1), input_window=9),
        seg2d_hyper=HyperParams(lr=1e-3, batch_size=32, patches_per_epoch=512, epochs=8),
        seg3d_spec=Seg3DSpec(base_channels=8, patch_shape=(8, 16, 16)),
        seg3d_hyper=HyperParams(lr=3e-4, batch_size=2, patches_per_epoch=24, epochs=15),
    )
