"""Synthetic neuron-soma-like phantom volumes with dense ground truth.

Cells are random ellipsoids (overlap allowed); intensity is a two-level field
blurred anisotropically with additive Gaussian noise. Everything is a pure
function of the config (PCG64 generator seeded explicitly), so reruns are
bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .volgrid import BACKGROUND, FOREGROUND, UNLABELED, LabelVolume, Volume3D


@dataclass(frozen=True)
class PhantomConfig:
    shape: tuple = (50, 114, 114)
    voxel_size_um: tuple = (2.0, 0.88, 0.88)
    n_cells: int = 12
    radius_range_um: tuple = (5.0, 10.0)
    intensity_fg: float = 150.0
    intensity_bg: float = 20.0
    noise_sigma: float = 8.0
    blur_sigma_um: tuple = (2.0, 0.88, 0.88)
    seed: int = 0

    def __post_init__(self):
        if len(self.shape) != 3 or any(int(s) <= 0 for s in self.shape):
            raise ValueError(f"bad shape {self.shape}")
        rmin, rmax = self.radius_range_um
        if not (0 < rmin <= rmax):
            raise ValueError(f"bad radius range {self.radius_range_um}")
        if any(s < 0 for s in self.blur_sigma_um) or self.noise_sigma < 0:
            raise ValueError("sigmas must be >= 0")
        if not (self.intensity_fg > self.intensity_bg >= 0):
            raise ValueError("need intensity_fg > intensity_bg >= 0")
        if self.n_cells < 0:
            raise ValueError("n_cells must be >= 0")
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        object.__setattr__(self, "voxel_size_um", tuple(float(v) for v in self.voxel_size_um))


@dataclass(frozen=True)
class SparsityPlan:
    """Which z-slices carry ground truth; everything else becomes UNLABELED."""

    labeled_slice_indices: tuple
    axis: str = "z"

    def __post_init__(self):
        idx = tuple(int(i) for i in self.labeled_slice_indices)
        if len(set(idx)) != len(idx):
            raise ValueError("duplicate slice indices")
        if list(idx) != sorted(idx):
            raise ValueError("slice indices must be sorted")
        if self.axis != "z":
            raise ValueError("only z-axis slicing is supported")
        object.__setattr__(self, "labeled_slice_indices", idx)


def evenly_spaced_slices(depth: int, count: int) -> SparsityPlan:
    """Deterministic slice selection: centers of `count` equal z-bins."""
    if not (0 <= count <= depth):
        raise ValueError(f"count {count} out of range for depth {depth}")
    idx = sorted({int((i + 0.5) * depth / count) for i in range(count)}) if count else []
    # collisions can only happen for count > depth, excluded above
    return SparsityPlan(tuple(idx))


def generate_phantom(cfg: PhantomConfig):
    """Return (intensity Volume3D, dense LabelVolume) for the config."""
    vs = np.asarray(cfg.voxel_size_um, dtype=np.float64)
    if cfg.radius_range_um[0] / vs.max() < 1.0:
        raise ValueError(
            f"min cell radius {cfg.radius_range_um[0]}um is below one voxel "
            f"({vs.max()}um)"
        )
    rng = np.random.default_rng(cfg.seed)
    labels = np.zeros(cfg.shape, dtype=np.uint8)
    dims = np.asarray(cfg.shape, dtype=np.float64)
    zz, yy, xx = [np.arange(n, dtype=np.float64) for n in cfg.shape]
    for _ in range(cfg.n_cells):
        center = rng.uniform(0.0, dims - 1.0)
        radius_um = rng.uniform(*cfg.radius_range_um)
        r_vox = radius_um / vs  # per-axis radii in voxels
        lo = np.maximum(np.floor(center - r_vox).astype(int), 0)
        hi = np.minimum(np.ceil(center + r_vox).astype(int) + 1, cfg.shape)
        dz = (zz[lo[0]:hi[0]] - center[0]) / r_vox[0]
        dy = (yy[lo[1]:hi[1]] - center[1]) / r_vox[1]
        dx = (xx[lo[2]:hi[2]] - center[2]) / r_vox[2]
        inside = (
            dz[:, None, None] ** 2 + dy[None, :, None] ** 2 + dx[None, None, :] ** 2
        ) <= 1.0
        region = labels[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
        region[inside] = FOREGROUND

    intensity = np.where(
        labels == FOREGROUND, np.float64(cfg.intensity_fg), np.float64(cfg.intensity_bg)
    )
    blur_vox = np.asarray(cfg.blur_sigma_um, dtype=np.float64) / vs
    if blur_vox.any():
        intensity = gaussian_filter(intensity, sigma=blur_vox, mode="reflect")
    if cfg.noise_sigma > 0:
        intensity = intensity + rng.normal(0.0, cfg.noise_sigma, size=cfg.shape)
    intensity = np.clip(intensity, 0.0, None).astype(np.float32)
    vol = Volume3D(intensity, voxel_size=cfg.voxel_size_um, dtype_tag="f32")
    lab = LabelVolume(labels, voxel_size=cfg.voxel_size_um)
    return vol, lab


def sparsify_labels(dense: LabelVolume, plan: SparsityPlan) -> LabelVolume:
    """Keep dense labels on planned z-slices; mark all other voxels UNLABELED."""
    if not dense.is_dense():
        raise ValueError("input labels must be dense (no UNLABELED voxels)")
    depth = dense.shape[0]
    for i in plan.labeled_slice_indices:
        if not (0 <= i < depth):
            raise ValueError(f"slice index {i} out of range for depth {depth}")
    out = np.full(dense.shape, UNLABELED, dtype=np.uint8)
    for i in plan.labeled_slice_indices:
        out[i] = dense.labels[i]
    return LabelVolume(out, voxel_size=dense.voxel_size)
