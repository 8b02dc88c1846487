"""Two-phase 2D+3D semi-supervised segmentation of sparsely annotated volumes."""

__version__ = "0.1.0"

from .volgrid import (BACKGROUND, FOREGROUND, UNLABELED, LabelVolume, PatchSpec,
                      ProbVolume, Volume3D, extract_patch, fuse_predictions,
                      load_volume, save_volume)
from .phantom import PhantomConfig, SparsityPlan, generate_phantom, sparsify_labels
from .fuselabel import (Alpha, FusedTargets, fuse, make_pseudo_labels, weighted_bce,
                        weighted_bce_grad)
from .evalkit import (ConfusionCounts, MetricsReport, SweepConfig, binarize,
                      confusion, dice, precision, recall, run_sweep)
from .hyper import HyperParams

__all__ = [
    "BACKGROUND", "FOREGROUND", "UNLABELED", "Volume3D", "LabelVolume", "ProbVolume",
    "PatchSpec", "extract_patch", "fuse_predictions", "load_volume", "save_volume",
    "PhantomConfig", "SparsityPlan", "generate_phantom", "sparsify_labels",
    "Alpha", "FusedTargets", "fuse", "make_pseudo_labels", "weighted_bce",
    "weighted_bce_grad", "ConfusionCounts", "MetricsReport", "SweepConfig",
    "binarize", "confusion", "dice", "precision", "recall", "run_sweep",
    "HyperParams",
]
