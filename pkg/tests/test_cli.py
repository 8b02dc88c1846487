import hashlib
import json
from pathlib import Path

import numpy as np
import pytest
import yaml

from pseudovol.cli import main
from pseudovol.config import load_config, smoke_config
from pseudovol.errors import ConfigError

MICRO = {
    "out_dir": None,  # filled per test
    "seed": 0,
    "threads": 2,
    "phantom": {
        "shape": [8, 12, 12], "voxel_size_um": [1.0, 1.0, 1.0], "n_cells": 2,
        "radius_range_um": [2.0, 3.0], "intensity_fg": 150.0, "intensity_bg": 20.0,
        "noise_sigma": 5.0, "blur_sigma_um": [0.5, 0.5, 0.5], "seed": 0,
    },
    "sweep": {"slice_counts": [4], "alphas": [0.5], "seeds": [0],
              "threshold": 0.5, "fg_bias": 0.5, "tile_overlap": 0.5},
    "seg2d": {"spec": {"conv_channels": [4, 8, 8], "fc_sizes": [8, 1], "input_window": 9},
              "hyper": {"lr": 0.002, "batch_size": 16, "patches_per_epoch": 64,
                        "epochs": 2, "seed": 0}},
    "seg3d": {"spec": {"base_channels": 2, "patch_shape": [4, 8, 8]},
              "hyper": {"lr": 0.001, "batch_size": 2, "patches_per_epoch": 8,
                        "epochs": 2, "seed": 0}},
}


@pytest.fixture
def micro_config(tmp_path):
    cfg = dict(MICRO)
    cfg["out_dir"] = str(tmp_path / "run")
    path = tmp_path / "micro.yaml"
    path.write_text(yaml.safe_dump(cfg))
    return path


def _hash_tree(d: Path):
    out = {}
    for p in sorted(d.rglob("*")):
        if p.is_file():
            out[str(p.relative_to(d))] = hashlib.sha256(p.read_bytes()).hexdigest()
    return out


def test_generate_writes_eight_files_idempotently(micro_config, tmp_path):
    assert main(["generate", "--config", str(micro_config)]) == 0
    d = tmp_path / "run" / "phantoms" / "seed0"
    files = sorted(p.name for p in d.iterdir())
    assert len(files) == 8
    h1 = _hash_tree(d)
    assert main(["generate", "--config", str(micro_config)]) == 0
    assert _hash_tree(d) == h1


def test_unknown_config_key_exit_2(tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("out_dir: x\nnot_a_key: 1\n")
    assert main(["generate", "--config", str(bad)]) == 2


def test_bad_config_value_named_error(tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("phantom: {intensity_fg: 1.0, intensity_bg: 5.0}\n")
    with pytest.raises(ConfigError, match="phantom"):
        load_config(bad)


def test_full_pipeline_and_hash_guard(micro_config, tmp_path):
    c = ["--config", str(micro_config)]
    assert main(["generate", *c]) == 0
    assert main(["train2d", *c, "--slices", "4"]) == 0
    assert main(["pseudolabel", *c, "--slices", "4"]) == 0
    assert main(["train3d", *c, "--slices", "4"]) == 0
    assert main(["eval", *c, "--slices", "4", "--scheme", "seg2d"]) == 0
    run = tmp_path / "run"
    assert (run / "checkpoints" / "seg2d_s4_seed0.ckpt").exists()
    assert (run / "checkpoints" / "seg3d_s4_seed0_a0.5.ckpt").exists()
    pseudo = run / "pseudo" / "s4_seed0_a0.5"
    assert len(list(pseudo.glob("*.volg"))) == 12  # 4 files x 3 train volumes

    # alpha override lands in the artifact names and checkpoint header
    assert main(["pseudolabel", *c, "--slices", "4", "--alpha", "0.25"]) == 0
    assert main(["train3d", *c, "--slices", "4", "--alpha", "0.25"]) == 0
    ck = run / "checkpoints" / "seg3d_s4_seed0_a0.25.ckpt"
    assert ck.exists()
    from pseudovol.seg2d import read_checkpoint_header
    assert read_checkpoint_header(ck)["alpha"] == 0.25

    # stale artifacts are refused after the config changes
    changed = yaml.safe_load(micro_config.read_text())
    changed["phantom"]["n_cells"] = 3
    micro_config.write_text(yaml.safe_dump(changed))
    assert main(["train2d", *c, "--slices", "4"]) == 3


def test_missing_upstream_artifact_exit_3(micro_config):
    assert main(["train2d", "--config", str(micro_config), "--slices", "4"]) == 3
    assert main(["pseudolabel", "--config", str(micro_config), "--slices", "4"]) == 3


def test_sweep_csv_and_plots(micro_config, tmp_path):
    assert main(["sweep", "--config", str(micro_config)]) == 0
    run = tmp_path / "run"
    csv_path = run / "reports" / "sweep.csv"
    lines = csv_path.read_text().splitlines()
    assert lines[0].startswith("# config_hash=")
    assert len(lines) == 2 + 3  # comment + header + 3 scheme rows
    plots = sorted(p.name for p in (run / "plots").iterdir())
    assert plots == ["dice.svg", "precision.svg", "recall.svg"]
    # parse-back through the report reader
    assert main(["report", "--config", str(micro_config)]) == 0
    from pseudovol.cli import _read_sweep_csv
    reports = _read_sweep_csv(csv_path)
    assert len(reports) == 3


def test_smoke_config_is_valid():
    cfg = smoke_config()
    assert cfg.phantom.shape == (16, 16, 16)
    assert cfg.config_hash() == smoke_config().config_hash()
    # hash is sensitive to any field change
    from dataclasses import replace
    assert replace(cfg, seed=1).config_hash() != cfg.config_hash()
