"""Binarization, confusion-matrix metrics and the label-sparsity sweep.

The sweep compares three schemes per (slice count, seed) condition: the 2D
pseudo-labeler evaluated directly, the 3D model sparsely trained (alpha = 0,
same code path) and the 3D model trained with pseudo-labels (alpha > 0).
"""

from __future__ import annotations

import io
from dataclasses import dataclass, replace

import numpy as np

from .errors import PseudovolError
from .fuselabel import Alpha, fuse, make_pseudo_labels
from .hyper import HyperParams
from .phantom import PhantomConfig, evenly_spaced_slices, generate_phantom, sparsify_labels
from .seg2d import Seg2DSpec, build_seg2d, predict_volume_2d, train_seg2d
from .seg3d import (Seg3DSpec, build_seg3d, make_batch_source, predict_volume_3d,
                    train_seg3d)
from .volgrid import FOREGROUND, LabelVolume, ProbVolume

SCHEME_2D = "seg2d"
SCHEME_3D_SPARSE = "seg3d_sparse"
SCHEME_3D_PSEUDO = "seg3d_pseudo"

CSV_HEADER = "scheme,labeled_fraction,alpha,seed,tp,fp,fn,tn,dice,precision,recall,degenerate_flags"


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self):
        for name in ("tp", "fp", "fn", "tn"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass(frozen=True)
class MetricsReport:
    scheme: str
    labeled_fraction: float
    alpha: float
    seed: int
    counts: ConfusionCounts
    dice: float
    precision: float
    recall: float
    degenerate_flags: tuple = ()


def binarize(p: ProbVolume, thr: float = 0.5) -> np.ndarray:
    """Threshold probabilities; ties (p == thr) map to foreground."""
    if not (0.0 < thr < 1.0):
        raise ValueError(f"threshold must be in (0, 1), got {thr}")
    probs = p.probs if isinstance(p, ProbVolume) else np.asarray(p)
    return probs >= thr


def confusion(pred: np.ndarray, gt: LabelVolume) -> ConfusionCounts:
    """Voxel-wise confusion counts against a dense ground truth."""
    if not gt.is_dense():
        raise ValueError("ground truth contains UNLABELED voxels")
    pred = np.asarray(pred).astype(bool)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    truth = gt.labels == FOREGROUND
    tp = int(np.count_nonzero(pred & truth))
    fp = int(np.count_nonzero(pred & ~truth))
    fn = int(np.count_nonzero(~pred & truth))
    tn = int(np.count_nonzero(~pred & ~truth))
    return ConfusionCounts(tp, fp, fn, tn)


def dice(c: ConfusionCounts) -> float:
    denom = 2 * c.tp + c.fp + c.fn
    return 2.0 * c.tp / denom if denom else 0.0


def precision(c: ConfusionCounts) -> float:
    denom = c.tp + c.fp
    return c.tp / denom if denom else 0.0


def recall(c: ConfusionCounts) -> float:
    denom = c.tp + c.fn
    return c.tp / denom if denom else 0.0


def metrics_report(pred_probs, gt: LabelVolume, scheme: str, labeled_fraction: float,
                   alpha: float, seed: int, thr: float = 0.5) -> MetricsReport:
    c = confusion(binarize(pred_probs, thr), gt)
    flags = []
    if 2 * c.tp + c.fp + c.fn == 0:
        flags.append("dice_degenerate")
    if c.tp + c.fp == 0:
        flags.append("precision_degenerate")
    if c.tp + c.fn == 0:
        flags.append("recall_degenerate")
    return MetricsReport(
        scheme=scheme, labeled_fraction=labeled_fraction, alpha=alpha, seed=seed,
        counts=c, dice=dice(c), precision=precision(c), recall=recall(c),
        degenerate_flags=tuple(flags),
    )


# ---------------------------------------------------------------------------
# Sweep
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SweepConfig:
    slice_counts: tuple = (2, 5, 11, 22, 50)
    alphas: tuple = (0.5,)
    seeds: tuple = (0, 1, 2, 3, 4)
    threshold: float = 0.5
    fg_bias: float = 0.5
    tile_overlap: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "slice_counts", tuple(int(s) for s in self.slice_counts))
        object.__setattr__(self, "alphas", tuple(float(a) for a in self.alphas))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if any(a <= 0 for a in self.alphas):
            raise ValueError("sweep alphas must be > 0 (alpha=0 is the built-in baseline)")


def _derive_seed(*parts) -> int:
    h = np.uint64(0xCBF29CE484222325)
    for p in parts:
        h = np.uint64((int(h) ^ int(p)) * 0x100000001B3 % (1 << 64))
    return int(h % (1 << 63))


def make_experiment_volumes(base_phantom: PhantomConfig, global_seed: int, sweep_seed: int):
    """3 training phantoms + 1 test phantom, seeds derived deterministically."""
    out = []
    for vi in range(4):
        cfg = replace(base_phantom, seed=_derive_seed(global_seed, sweep_seed, vi))
        out.append(generate_phantom(cfg))
    return out[:3], out[3]


def run_condition(base_phantom: PhantomConfig, slice_count: int, seed: int,
                  sweep: SweepConfig, seg2d_spec: Seg2DSpec, seg2d_hyper: HyperParams,
                  seg3d_spec: Seg3DSpec, seg3d_hyper: HyperParams, global_seed: int = 0):
    """Run one (slice_count, seed) condition; returns list of MetricsReport."""
    depth = base_phantom.shape[0]
    fraction = slice_count / depth
    train, (test_vol, test_lab) = make_experiment_volumes(base_phantom, global_seed, seed)
    plan = evenly_spaced_slices(depth, slice_count)
    sparse = [(vol, sparsify_labels(lab, plan)) for vol, lab in train]

    reports = []

    def failed(scheme, alpha, stage):
        zero = ConfusionCounts(0, 0, 0, 0)
        return MetricsReport(scheme, fraction, alpha, seed, zero, 0.0, 0.0, 0.0,
                             (f"error:{stage}",))

    # phase 1: 2D pseudo-labeler
    try:
        model2d = build_seg2d(seg2d_spec, seed=_derive_seed(global_seed, seed, 101))
        model2d, _ = train_seg2d(model2d, sparse, replace(seg2d_hyper, seed=seed))
        probs2d_test = predict_volume_2d(model2d, test_vol)
        reports.append(metrics_report(probs2d_test, test_lab, SCHEME_2D, fraction,
                                      0.0, seed, sweep.threshold))
    except PseudovolError:
        reports.append(failed(SCHEME_2D, 0.0, "train2d"))
        reports.append(failed(SCHEME_3D_SPARSE, 0.0, "train2d"))
        for a in sweep.alphas:
            reports.append(failed(SCHEME_3D_PSEUDO, a, "train2d"))
        return reports

    pseudo = [
        make_pseudo_labels(predict_volume_2d(model2d, vol), lab, "hard", sweep.threshold)
        for vol, lab in sparse
    ]
    train_vols = [vol for vol, _ in sparse]

    def run_3d(alpha_value, scheme):
        fused = [fuse(lab, ps, Alpha(alpha_value)) for (_, lab), ps in zip(sparse, pseudo)]
        model = build_seg3d(seg3d_spec, seed=_derive_seed(global_seed, seed, 301))
        source = make_batch_source(train_vols, fused, seg3d_spec.patch_shape,
                                   fg_bias=sweep.fg_bias)
        model, _ = train_seg3d(model, source, replace(seg3d_hyper, seed=seed))
        probs = predict_volume_3d(model, test_vol, tile_overlap=sweep.tile_overlap)
        return metrics_report(probs, test_lab, scheme, fraction, alpha_value, seed,
                              sweep.threshold)

    try:
        reports.append(run_3d(0.0, SCHEME_3D_SPARSE))
    except PseudovolError:
        reports.append(failed(SCHEME_3D_SPARSE, 0.0, "train3d_sparse"))
    for a in sweep.alphas:
        try:
            reports.append(run_3d(a, SCHEME_3D_PSEUDO))
        except PseudovolError:
            reports.append(failed(SCHEME_3D_PSEUDO, a, "train3d_pseudo"))
    return reports


def run_sweep(base_phantom: PhantomConfig, sweep: SweepConfig, seg2d_spec: Seg2DSpec,
              seg2d_hyper: HyperParams, seg3d_spec: Seg3DSpec, seg3d_hyper: HyperParams,
              global_seed: int = 0, jobs: int = 1, progress=None):
    """Full sparsity sweep; conditions ordered (slice_count, seed)."""
    conditions = [(sc, sd) for sc in sweep.slice_counts for sd in sweep.seeds]
    args = [
        (base_phantom, sc, sd, sweep, seg2d_spec, seg2d_hyper, seg3d_spec,
         seg3d_hyper, global_seed)
        for sc, sd in conditions
    ]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_run_condition_star, args))
    else:
        results = []
        for a in args:
            results.append(_run_condition_star(a))
            if progress:
                progress(a[1], a[2])
    reports = [r for rs in results for r in rs]
    return reports


def _run_condition_star(a):
    return run_condition(*a)


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------

def _fmt(x: float) -> str:
    return f"{x:.6g}"


def reports_to_csv(reports) -> str:
    buf = io.StringIO()
    buf.write(CSV_HEADER + "\n")
    for r in reports:
        c = r.counts
        buf.write(",".join([
            r.scheme, _fmt(r.labeled_fraction), _fmt(r.alpha), str(r.seed),
            str(c.tp), str(c.fp), str(c.fn), str(c.tn),
            _fmt(r.dice), _fmt(r.precision), _fmt(r.recall),
            ";".join(r.degenerate_flags),
        ]) + "\n")
    return buf.getvalue()


def reports_from_csv(text: str):
    lines = [ln for ln in text.strip().splitlines() if ln]
    if not lines or lines[0] != CSV_HEADER:
        raise ValueError("unrecognized CSV header")
    out = []
    for ln in lines[1:]:
        parts = ln.split(",")
        if len(parts) != 12:
            raise ValueError(f"bad CSV row: {ln!r}")
        counts = ConfusionCounts(*(int(p) for p in parts[4:8]))
        flags = tuple(f for f in parts[11].split(";") if f)
        out.append(MetricsReport(
            scheme=parts[0], labeled_fraction=float(parts[1]), alpha=float(parts[2]),
            seed=int(parts[3]), counts=counts, dice=float(parts[8]),
            precision=float(parts[9]), recall=float(parts[10]), degenerate_flags=flags,
        ))
    return out
