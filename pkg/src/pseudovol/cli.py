"""Command-line pipeline: generate -> train2d -> pseudolabel -> train3d -> eval,
plus the one-shot sparsity sweep and report reader.

Exit codes: 0 success, 2 config error, 3 upstream-artifact error, 4 numerical
failure.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from .config import ExperimentConfig, load_config, smoke_config
from .errors import ArtifactError, ConfigError, NumericalError
from .evalkit import (SCHEME_2D, SCHEME_3D_PSEUDO, SCHEME_3D_SPARSE, metrics_report,
                      make_experiment_volumes, reports_from_csv, reports_to_csv,
                      run_sweep)
from .fuselabel import Alpha, FusedTargets, fuse, make_pseudo_labels
from .phantom import evenly_spaced_slices, sparsify_labels
from .seg2d import build_seg2d, load_seg2d, predict_volume_2d, save_checkpoint, train_seg2d
from .seg3d import (build_seg3d, load_seg3d, make_batch_source, predict_volume_3d,
                    train_seg3d)
from .volgrid import LabelVolume, ProbVolume, Volume3D, load_volume, save_volume


def _meta(cfg: ExperimentConfig, stage: str, seed: int) -> dict:
    return {"config_hash": cfg.config_hash(), "stage": stage, "seed": int(seed)}


def _check_hash(obj_meta, cfg: ExperimentConfig, what: str):
    got = (obj_meta or {}).get("config_hash")
    want = cfg.config_hash()
    if got != want:
        raise ArtifactError(
            f"{what}: config hash mismatch (artifact {got!r}, current config {want!r}); "
            "regenerate upstream artifacts"
        )


def _load_cfg(args) -> ExperimentConfig:
    if args.smoke:
        cfg = smoke_config()
    elif args.config:
        cfg = load_config(args.config)
    else:
        cfg = ExperimentConfig()
    if args.out:
        cfg = replace(cfg, out_dir=args.out)
    if getattr(args, "seed", None) is not None:
        pass  # condition seed, not the global one; consumed per-command
    torch.set_num_threads(cfg.threads)
    return cfg


def _phantom_dir(cfg, seed) -> Path:
    return Path(cfg.out_dir) / "phantoms" / f"seed{seed}"


def _volume_paths(cfg, seed):
    d = _phantom_dir(cfg, seed)
    names = [f"train{i}" for i in range(3)] + ["test"]
    return {n: (d / f"{n}_intensity.volg", d / f"{n}_labels.volg") for n in names}


def cmd_generate(args):
    cfg = _load_cfg(args)
    seed = args.seed or 0
    d = _phantom_dir(cfg, seed)
    d.mkdir(parents=True, exist_ok=True)
    train, test = make_experiment_volumes(cfg.phantom, cfg.seed, seed)
    meta = _meta(cfg, "generate", seed)
    for name, (vol, lab) in zip([f"train{i}" for i in range(3)] + ["test"], train + [test]):
        save_volume(vol, d / f"{name}_intensity.volg", meta=meta)
        save_volume(lab, d / f"{name}_labels.volg", meta=meta)
    print(f"wrote 8 VOLG files to {d}")
    return 0


def _load_phantoms(cfg, seed):
    out = []
    for name, (ip, lp) in _volume_paths(cfg, seed).items():
        if not ip.exists() or not lp.exists():
            raise ArtifactError(f"missing phantom files for {name}; run `generate` first")
        vol, lab = load_volume(ip), load_volume(lp)
        _check_hash(vol.meta, cfg, str(ip))
        _check_hash(lab.meta, cfg, str(lp))
        out.append((name, vol, lab))
    return out[:3], out[3]


def _sparse_train_set(cfg, seed, slices):
    train, _ = _load_phantoms(cfg, seed)
    plan = evenly_spaced_slices(cfg.phantom.shape[0], slices)
    return [(vol, sparsify_labels(lab, plan)) for _, vol, lab in train]


def _ckpt2d_path(cfg, slices, seed) -> Path:
    return Path(cfg.out_dir) / "checkpoints" / f"seg2d_s{slices}_seed{seed}.ckpt"


def _ckpt3d_path(cfg, slices, seed, alpha) -> Path:
    return Path(cfg.out_dir) / "checkpoints" / f"seg3d_s{slices}_seed{seed}_a{alpha:g}.ckpt"


def cmd_train2d(args):
    cfg = _load_cfg(args)
    seed, slices = args.seed or 0, args.slices
    sparse = _sparse_train_set(cfg, seed, slices)
    model = build_seg2d(cfg.seg2d_spec, seed=seed)
    model, history = train_seg2d(model, sparse, replace(cfg.seg2d_hyper, seed=seed))
    path = _ckpt2d_path(cfg, slices, seed)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, path, kind="seg2d",
                    header_extra={"meta": _meta(cfg, "train2d", seed), "slices": slices})
    print(f"trained seg2d ({len(history)} epochs, final loss {history[-1]:.4f}) -> {path}")
    return 0


def cmd_pseudolabel(args):
    cfg = _load_cfg(args)
    seed, slices = args.seed or 0, args.slices
    alpha = cfg.sweep.alphas[0] if args.alpha is None else args.alpha
    ckpt = _ckpt2d_path(cfg, slices, seed)
    if not ckpt.exists():
        raise ArtifactError(f"missing 2D checkpoint {ckpt}; run `train2d` first")
    from .seg2d import read_checkpoint_header
    _check_hash(read_checkpoint_header(ckpt).get("meta"), cfg, str(ckpt))
    model = load_seg2d(ckpt)
    sparse = _sparse_train_set(cfg, seed, slices)
    d = Path(cfg.out_dir) / "pseudo" / f"s{slices}_seed{seed}_a{alpha:g}"
    d.mkdir(parents=True, exist_ok=True)
    meta = _meta(cfg, "pseudolabel", seed)
    meta.update({"slices": slices, "alpha": alpha})
    for i, (vol, lab) in enumerate(sparse):
        probs = predict_volume_2d(model, vol)
        pseudo = make_pseudo_labels(probs, lab, "hard", cfg.sweep.threshold)
        fused = fuse(lab, pseudo, Alpha(alpha))
        save_volume(probs, d / f"train{i}_probs2d.volg", meta=meta)
        save_volume(ProbVolume(fused.targets, vol.voxel_size),
                    d / f"train{i}_targets.volg", meta=meta)
        save_volume(Volume3D(fused.weights, vol.voxel_size, "f32"),
                    d / f"train{i}_weights.volg", meta=meta)
        save_volume(Volume3D(fused.provenance, vol.voxel_size, "u8"),
                    d / f"train{i}_prov.volg", meta=meta)
    print(f"wrote pseudo-label artifacts to {d}")
    return 0


def _load_fused(cfg, slices, seed, alpha):
    d = Path(cfg.out_dir) / "pseudo" / f"s{slices}_seed{seed}_a{alpha:g}"
    fused = []
    for i in range(3):
        paths = [d / f"train{i}_{s}.volg" for s in ("targets", "weights", "prov")]
        for p in paths:
            if not p.exists():
                raise ArtifactError(f"missing fused-target artifact {p}; run `pseudolabel`")
        t, w, pr = (load_volume(p) for p in paths)
        for obj, p in zip((t, w, pr), paths):
            _check_hash(obj.meta, cfg, str(p))
        fused.append(FusedTargets(
            targets=np.asarray(t.probs, dtype=np.float32),
            weights=np.asarray(w.data, dtype=np.float32),
            provenance=np.asarray(pr.data, dtype=np.uint8),
            alpha=float(alpha),
        ))
    return fused


def cmd_train3d(args):
    cfg = _load_cfg(args)
    seed, slices = args.seed or 0, args.slices
    alpha = cfg.sweep.alphas[0] if args.alpha is None else args.alpha
    fused = _load_fused(cfg, slices, seed, alpha)
    train, _ = _load_phantoms(cfg, seed)
    vols = [vol for _, vol, _ in train]
    model = build_seg3d(cfg.seg3d_spec, seed=seed)
    source = make_batch_source(vols, fused, cfg.seg3d_spec.patch_shape,
                               fg_bias=cfg.sweep.fg_bias)
    model, history = train_seg3d(model, source, replace(cfg.seg3d_hyper, seed=seed))
    path = _ckpt3d_path(cfg, slices, seed, alpha)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, path, kind="seg3d",
                    header_extra={"meta": _meta(cfg, "train3d", seed),
                                  "slices": slices, "alpha": alpha})
    print(f"trained seg3d ({len(history)} epochs, final loss {history[-1]:.4f}) -> {path}")
    return 0


def cmd_eval(args):
    cfg = _load_cfg(args)
    seed, slices = args.seed or 0, args.slices
    alpha = cfg.sweep.alphas[0] if args.alpha is None else args.alpha
    _, (name, test_vol, test_lab) = _load_phantoms(cfg, seed)
    fraction = slices / cfg.phantom.shape[0]
    from .seg2d import read_checkpoint_header
    if args.scheme == SCHEME_2D:
        ckpt = _ckpt2d_path(cfg, slices, seed)
        if not ckpt.exists():
            raise ArtifactError(f"missing checkpoint {ckpt}")
        _check_hash(read_checkpoint_header(ckpt).get("meta"), cfg, str(ckpt))
        probs = predict_volume_2d(load_seg2d(ckpt), test_vol)
        rep = metrics_report(probs, test_lab, SCHEME_2D, fraction, 0.0, seed,
                             cfg.sweep.threshold)
    else:
        use_alpha = 0.0 if args.scheme == SCHEME_3D_SPARSE else alpha
        ckpt = _ckpt3d_path(cfg, slices, seed, use_alpha)
        if not ckpt.exists():
            raise ArtifactError(f"missing checkpoint {ckpt}")
        _check_hash(read_checkpoint_header(ckpt).get("meta"), cfg, str(ckpt))
        probs = predict_volume_3d(load_seg3d(ckpt), test_vol,
                                  tile_overlap=cfg.sweep.tile_overlap)
        rep = metrics_report(probs, test_lab, args.scheme, fraction, use_alpha, seed,
                             cfg.sweep.threshold)
    csv = reports_to_csv([rep])
    rdir = Path(cfg.out_dir) / "reports"
    rdir.mkdir(parents=True, exist_ok=True)
    out = rdir / f"eval_{args.scheme}_s{slices}_seed{seed}.csv"
    out.write_text(csv)
    print(csv, end="")
    print(f"wrote {out}")
    return 0


def _write_plots(reports, plot_dir: Path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plot_dir.mkdir(parents=True, exist_ok=True)
    schemes = [SCHEME_2D, SCHEME_3D_SPARSE, SCHEME_3D_PSEUDO]
    paths = []
    for metric in ("dice", "precision", "recall"):
        fig, ax = plt.subplots(figsize=(5, 4))
        for scheme in schemes:
            pts = {}
            for r in reports:
                if r.scheme == scheme:
                    pts.setdefault(r.labeled_fraction, []).append(getattr(r, metric))
            if not pts:
                continue
            xs = sorted(pts)
            ys = [float(np.median(pts[x])) for x in xs]
            ax.plot(xs, ys, marker="o", label=scheme)
        ax.set_xlabel("labeled fraction")
        ax.set_ylabel(metric)
        ax.set_ylim(0, 1.05)
        ax.legend()
        fig.tight_layout()
        path = plot_dir / f"{metric}.svg"
        fig.savefig(path)
        plt.close(fig)
        paths.append(path)
    return paths


def cmd_sweep(args):
    cfg = _load_cfg(args)
    reports = run_sweep(cfg.phantom, cfg.sweep, cfg.seg2d_spec, cfg.seg2d_hyper,
                        cfg.seg3d_spec, cfg.seg3d_hyper, global_seed=cfg.seed,
                        jobs=args.jobs,
                        progress=lambda sc, sd: print(f"condition slices={sc} seed={sd} done"))
    csv = reports_to_csv(reports)
    rdir = Path(cfg.out_dir) / "reports"
    rdir.mkdir(parents=True, exist_ok=True)
    csv_path = rdir / "sweep.csv"
    csv_path.write_text(f"# config_hash={cfg.config_hash()}\n" + csv)
    plots = _write_plots(reports, Path(cfg.out_dir) / "plots")
    print(f"wrote {csv_path} and {len(plots)} plots")
    return 0


def _read_sweep_csv(path: Path):
    text = path.read_text()
    lines = text.splitlines()
    if lines and lines[0].startswith("#"):
        text = "\n".join(lines[1:]) + "\n"
    return reports_from_csv(text)


def cmd_report(args):
    cfg = _load_cfg(args)
    path = Path(args.csv) if args.csv else Path(cfg.out_dir) / "reports" / "sweep.csv"
    if not path.exists():
        raise ArtifactError(f"no sweep CSV at {path}")
    reports = _read_sweep_csv(path)
    print(f"{'scheme':<14}{'fraction':>9}{'alpha':>7}{'seed':>6}{'dice':>8}"
          f"{'prec':>8}{'recall':>8}")
    for r in sorted(reports, key=lambda r: (r.labeled_fraction, r.scheme, r.alpha, r.seed)):
        print(f"{r.scheme:<14}{r.labeled_fraction:>9.3f}{r.alpha:>7.2f}{r.seed:>6}"
              f"{r.dice:>8.3f}{r.precision:>8.3f}{r.recall:>8.3f}")
    return 0


def make_parser():
    p = argparse.ArgumentParser(prog="pseudovol",
                                description="Two-phase 2D+3D segmentation pipeline on "
                                            "sparsely annotated volumes")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, slices=False):
        sp.add_argument("--config", type=str, default=None, help="experiment YAML")
        sp.add_argument("--out", type=str, default=None, help="override output dir")
        sp.add_argument("--seed", type=int, default=None, help="condition seed")
        sp.add_argument("--alpha", type=float, default=None, help="pseudo-label weight")
        sp.add_argument("--jobs", type=int, default=1, help="parallel conditions")
        sp.add_argument("--smoke", action="store_true", help="use fast 16^3 config")
        if slices:
            sp.add_argument("--slices", type=int, required=True,
                            help="number of labeled z-slices")

    common(sub.add_parser("generate", help="write phantom volumes"))
    common(sub.add_parser("train2d", help="train the 2D pseudo-labeler"), slices=True)
    common(sub.add_parser("pseudolabel", help="infer pseudo-labels and fuse"), slices=True)
    common(sub.add_parser("train3d", help="train the 3D model on fused targets"), slices=True)
    sp = sub.add_parser("eval", help="evaluate a checkpoint on the test volume")
    common(sp, slices=True)
    sp.add_argument("--scheme", choices=[SCHEME_2D, SCHEME_3D_SPARSE, SCHEME_3D_PSEUDO],
                    default=SCHEME_3D_PSEUDO)
    common(sub.add_parser("sweep", help="run the full sparsity sweep"))
    sp = sub.add_parser("report", help="print a sweep CSV as a table")
    common(sp)
    sp.add_argument("--csv", type=str, default=None)
    return p


_COMMANDS = {
    "generate": cmd_generate,
    "train2d": cmd_train2d,
    "pseudolabel": cmd_pseudolabel,
    "train3d": cmd_train3d,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "report": cmd_report,
}


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except ArtifactError as e:
        print(f"artifact error: {e}", file=sys.stderr)
        return 3
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
