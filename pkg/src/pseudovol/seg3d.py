"""3D U-Net: patch sampling, weighted-loss training, tiled whole-volume inference.

The first pooling level is anisotropy-aware ((1,2,2) by default): patch depth
32 at 2um spacing vs lateral 64 at 0.88um would otherwise collapse z
resolution early.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from . import netops
from .errors import NumericalError
from .fuselabel import FusedTargets, weighted_bce_torch
from .hyper import HyperParams
from .seg2d import (CKPT_MAGIC, _load_payloads, normalize_volume,
                    read_checkpoint_header, save_checkpoint)
from .volgrid import PatchSpec, ProbVolume, Volume3D, extract_patch, fuse_predictions
from .errors import ArtifactError


@dataclass(frozen=True)
class Seg3DSpec:
    depth_levels: int = 3
    base_channels: int = 16
    pool_factors: tuple = ((1, 2, 2), (2, 2, 2))
    patch_shape: tuple = (32, 64, 64)
    skip_connections: bool = True
    group_norm: bool = False

    def __post_init__(self):
        pools = tuple(tuple(int(f) for f in p) for p in self.pool_factors)
        if len(pools) != self.depth_levels - 1:
            raise ValueError("need depth_levels - 1 pool factors")
        patch = tuple(int(s) for s in self.patch_shape)
        cum = np.ones(3, dtype=int)
        for p in pools:
            cum *= np.asarray(p)
        for dim, c in zip(patch, cum):
            if dim % c != 0:
                raise ValueError(
                    f"patch shape {patch} not divisible by cumulative pools {tuple(cum)}"
                )
        object.__setattr__(self, "pool_factors", pools)
        object.__setattr__(self, "patch_shape", patch)

    def to_dict(self):
        return {
            "depth_levels": self.depth_levels,
            "base_channels": self.base_channels,
            "pool_factors": [list(p) for p in self.pool_factors],
            "patch_shape": list(self.patch_shape),
            "skip_connections": self.skip_connections,
            "group_norm": self.group_norm,
        }

    @staticmethod
    def from_dict(d):
        return Seg3DSpec(
            depth_levels=d["depth_levels"],
            base_channels=d["base_channels"],
            pool_factors=tuple(tuple(p) for p in d["pool_factors"]),
            patch_shape=tuple(d["patch_shape"]),
            skip_connections=d.get("skip_connections", True),
            group_norm=d.get("group_norm", False),
        )


def _fan_in_uniform(gen, shape):
    fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else int(shape[0])
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return torch.as_tensor(gen.uniform(-bound, bound, size=shape), dtype=torch.float32)


class _ConvBlock(torch.nn.Module):
    """Two same-padded 3x3x3 convs with ReLU, optional group normalization."""

    def __init__(self, gen, c_in, c_out, group_norm):
        super().__init__()
        self.w1 = torch.nn.Parameter(_fan_in_uniform(gen, (c_out, c_in, 3, 3, 3)))
        self.b1 = torch.nn.Parameter(_fan_in_uniform(gen, (c_out,)))
        self.w2 = torch.nn.Parameter(_fan_in_uniform(gen, (c_out, c_out, 3, 3, 3)))
        self.b2 = torch.nn.Parameter(_fan_in_uniform(gen, (c_out,)))
        self.norm1 = torch.nn.GroupNorm(min(8, c_out), c_out) if group_norm else None
        self.norm2 = torch.nn.GroupNorm(min(8, c_out), c_out) if group_norm else None

    def forward(self, x):
        h = netops.conv3d(x, self.w1, self.b1)
        if self.norm1 is not None:
            h = self.norm1(h)
        h = netops.relu(h)
        h = netops.conv3d(h, self.w2, self.b2)
        if self.norm2 is not None:
            h = self.norm2(h)
        return netops.relu(h)


class Seg3DNet(torch.nn.Module):
    """Encoder-decoder with skip connections and a sigmoid head."""

    def __init__(self, spec: Seg3DSpec, seed: int):
        super().__init__()
        self.spec = spec
        self.seed = int(seed)
        self.epoch = 0
        gen = np.random.default_rng(seed)
        ch = [spec.base_channels * (2 ** i) for i in range(spec.depth_levels)]
        self.encoders = torch.nn.ModuleList()
        c_in = 1
        for c in ch:
            self.encoders.append(_ConvBlock(gen, c_in, c, spec.group_norm))
            c_in = c
        self.decoders = torch.nn.ModuleList()
        self.up_convs = torch.nn.ParameterList()
        self.up_biases = torch.nn.ParameterList()
        for lvl in range(spec.depth_levels - 2, -1, -1):
            # 1x1x1 conv after nearest upsampling to halve channels
            self.up_convs.append(
                torch.nn.Parameter(_fan_in_uniform(gen, (ch[lvl], ch[lvl + 1], 1, 1, 1)))
            )
            self.up_biases.append(torch.nn.Parameter(_fan_in_uniform(gen, (ch[lvl],))))
            dec_in = ch[lvl] * 2 if spec.skip_connections else ch[lvl]
            self.decoders.append(_ConvBlock(gen, dec_in, ch[lvl], spec.group_norm))
        self.head_w = torch.nn.Parameter(_fan_in_uniform(gen, (1, ch[0], 1, 1, 1)))
        self.head_b = torch.nn.Parameter(_fan_in_uniform(gen, (1,)))

    def forward(self, x):
        spec = self.spec
        skips = []
        h = x
        for lvl, enc in enumerate(self.encoders):
            h = enc(h)
            if lvl < spec.depth_levels - 1:
                skips.append(h)
                h = netops.maxpool(h, spec.pool_factors[lvl])
        for i, dec in enumerate(self.decoders):
            lvl = spec.depth_levels - 2 - i
            h = netops.upsample(h, spec.pool_factors[lvl])
            h = netops.conv3d(h, self.up_convs[i], self.up_biases[i])
            if spec.skip_connections:
                h = torch.cat([skips[lvl], h], dim=1)
            h = dec(h)
        h = netops.conv3d(h, self.head_w, self.head_b)
        return netops.sigmoid(h)

    def layer_order(self):
        return [name for name, _ in self.named_parameters()]


def build_seg3d(spec: Seg3DSpec, seed: int) -> Seg3DNet:
    model = Seg3DNet(spec, seed)
    # surface indivisible configurations immediately
    _ = spec.patch_shape
    return model


def foreground_centers(fused: FusedTargets):
    """Voxels eligible as foreground patch centers: target >= 0.5 AND weight > 0.

    Zero-weight voxels never steer sampling, so an alpha=0 run is unaffected by
    whatever values the pseudo-targets hold.
    """
    return np.argwhere((fused.targets >= 0.5) & (fused.weights > 0))


def sample_patches(volumes, fused_targets, n: int, seed: int, fg_bias: float = 0.5,
                   patch_shape=(32, 64, 64)):
    """Draw n (image, target, weight) patch triples, reflect-padded at borders.

    A fraction fg_bias of draws is centered on a foreground-target voxel, the
    rest uniform over the volume. Deterministic per seed.
    """
    if n <= 0:
        raise ValueError("n must be positive")
    if not (0.0 <= fg_bias <= 1.0):
        raise ValueError("fg_bias must be in [0, 1]")
    patch_shape = tuple(int(s) for s in patch_shape)
    rng = np.random.default_rng(seed)
    norm = [normalize_volume(v.data) for v in volumes]
    fg_lists = [foreground_centers(f) for f in fused_targets]
    images = np.empty((n, 1) + patch_shape, dtype=np.float32)
    targets = np.empty((n, 1) + patch_shape, dtype=np.float32)
    weights = np.empty((n, 1) + patch_shape, dtype=np.float32)
    half = np.asarray(patch_shape) // 2
    for i in range(n):
        vi = int(rng.integers(0, len(volumes)))
        shape = volumes[vi].shape
        use_fg = rng.random() < fg_bias and len(fg_lists[vi]) > 0
        if use_fg:
            center = fg_lists[vi][int(rng.integers(0, len(fg_lists[vi])))]
        else:
            center = np.array([rng.integers(0, s) for s in shape])
        spec = PatchSpec(tuple(center - half), patch_shape)
        images[i, 0], _ = extract_patch(norm[vi], spec, pad_mode="reflect")
        targets[i, 0], _ = extract_patch(fused_targets[vi].targets, spec, pad_mode="reflect")
        weights[i, 0], _ = extract_patch(fused_targets[vi].weights, spec, pad_mode="reflect")
    return images, targets, weights


def train_seg3d(model: Seg3DNet, batch_source, hyper: HyperParams):
    """Gradient descent on the weighted BCE over sampled patches.

    batch_source(step_seed, n) -> (images, targets, weights) arrays. On a
    non-finite loss the last finite-loss parameters are kept and a
    NumericalError raised.
    """
    opt = torch.optim.Adam(model.parameters(), lr=hyper.lr)
    history = []
    last_good = None
    steps = max(1, hyper.patches_per_epoch // hyper.batch_size)
    for epoch in range(hyper.epochs):
        epoch_losses = []
        for step in range(steps):
            step_seed = hyper.seed * 1_000_003 + epoch * 1009 + step
            images, targets, weights = batch_source(step_seed, hyper.batch_size)
            pred = model(torch.from_numpy(images))
            loss = weighted_bce_torch(
                pred, torch.from_numpy(targets), torch.from_numpy(weights)
            )
            if not torch.isfinite(loss):
                if last_good is not None:
                    model.load_state_dict(last_good)
                raise NumericalError(
                    f"non-finite 3D training loss at epoch {epoch} step {step}"
                )
            last_good = {k: v.detach().clone() for k, v in model.state_dict().items()}
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_losses.append(loss.item())
        history.append(float(np.mean(epoch_losses)))
        model.epoch = epoch + 1
    return model, history


def make_batch_source(volumes, fused_targets, patch_shape, fg_bias: float = 0.5):
    def source(step_seed, n):
        return sample_patches(volumes, fused_targets, n, step_seed,
                              fg_bias=fg_bias, patch_shape=patch_shape)
    return source


def _tile_origins(dim, patch, overlap):
    step = max(1, int(round(patch * (1.0 - overlap))))
    if dim <= patch:
        return [-((patch - dim) // 2)]  # single centered tile
    origins = list(range(0, dim - patch, step))
    origins.append(dim - patch)
    return origins


def predict_volume_3d(model: Seg3DNet, v: Volume3D, tile_overlap: float = 0.5,
                      blend: str = "uniform") -> ProbVolume:
    """Tile the volume into patches, predict each, fuse back into one map."""
    if not (0.0 <= tile_overlap < 1.0):
        raise ValueError("tile_overlap must be in [0, 1)")
    patch = model.spec.patch_shape
    norm = normalize_volume(v.data)
    patches = []
    with torch.no_grad():
        for oz in _tile_origins(v.shape[0], patch[0], tile_overlap):
            for oy in _tile_origins(v.shape[1], patch[1], tile_overlap):
                for ox in _tile_origins(v.shape[2], patch[2], tile_overlap):
                    spec = PatchSpec((oz, oy, ox), patch)
                    block, _ = extract_patch(norm, spec, pad_mode="reflect")
                    pred = model(torch.from_numpy(block[None, None]))
                    patches.append((spec, pred.numpy()[0, 0]))
    return fuse_predictions(patches, v.shape, blend=blend, voxel_size=v.voxel_size)


def load_seg3d(path) -> Seg3DNet:
    header = read_checkpoint_header(path)
    if header.get("kind") != "seg3d":
        raise ArtifactError(f"{path}: not a seg3d checkpoint")
    model = Seg3DNet(Seg3DSpec.from_dict(header["spec"]), header["seed"])
    model.epoch = header["epoch"]
    tensors = _load_payloads(path, header)
    with torch.no_grad():
        for name, param in model.named_parameters():
            param.copy_(torch.from_numpy(tensors[name].copy()))
    return model


def save_seg3d(model, path, header_extra=None):
    save_checkpoint(model, path, kind="seg3d", header_extra=header_extra)
