"""Lightweight 2D CNN pseudo-labeler.

The model classifies the center pixel of an odd-sized window: three valid
convolutions, then two fully connected layers realized as convolutions so the
same graph runs fully convolutionally over a reflect-padded slice. By
construction, dense slice inference equals per-pixel window classification.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np
import torch

from . import netops
from .errors import ArtifactError, NumericalError
from .hyper import HyperParams
from .volgrid import FOREGROUND, UNLABELED, LabelVolume, ProbVolume, Volume3D

CKPT_MAGIC = b"CKPT0001"


@dataclass(frozen=True)
class Seg2DSpec:
    conv_channels: tuple = (16, 32, 64)
    kernel: int = 3
    fc_sizes: tuple = (128, 1)
    input_window: int = 33

    def __post_init__(self):
        if len(self.conv_channels) != 3:
            raise ValueError("exactly three convolutional layers are required")
        if len(self.fc_sizes) != 2 or self.fc_sizes[1] != 1:
            raise ValueError("exactly two fully connected layers (last size 1) required")
        if self.kernel % 2 == 0 or self.kernel < 1:
            raise ValueError("kernel size must be odd and positive")
        if self.input_window % 2 == 0:
            raise ValueError("input window must be odd")
        if self.fc_kernel < 1:
            raise ValueError(
                f"window {self.input_window} too small for three {self.kernel}x{self.kernel} convs"
            )
        object.__setattr__(self, "conv_channels", tuple(int(c) for c in self.conv_channels))
        object.__setattr__(self, "fc_sizes", tuple(int(c) for c in self.fc_sizes))

    @property
    def fc_kernel(self) -> int:
        # spatial extent left after three valid convolutions
        return self.input_window - 3 * (self.kernel - 1)

    @property
    def half_window(self) -> int:
        return self.input_window // 2

    def to_dict(self):
        return {
            "conv_channels": list(self.conv_channels),
            "kernel": self.kernel,
            "fc_sizes": list(self.fc_sizes),
            "input_window": self.input_window,
        }


def _fan_in_uniform(gen, shape):
    fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else int(shape[0])
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return torch.as_tensor(gen.uniform(-bound, bound, size=shape), dtype=torch.float32)


class Seg2DNet(torch.nn.Module):
    def __init__(self, spec: Seg2DSpec, seed: int):
        super().__init__()
        self.spec = spec
        self.seed = int(seed)
        self.epoch = 0
        gen = np.random.default_rng(seed)
        c1, c2, c3 = spec.conv_channels
        k, fck, fc1 = spec.kernel, spec.fc_kernel, spec.fc_sizes[0]
        shapes = [
            ("conv1_w", (c1, 1, k, k)), ("conv1_b", (c1,)),
            ("conv2_w", (c2, c1, k, k)), ("conv2_b", (c2,)),
            ("conv3_w", (c3, c2, k, k)), ("conv3_b", (c3,)),
            ("fc1_w", (fc1, c3, fck, fck)), ("fc1_b", (fc1,)),
            ("fc2_w", (1, fc1, 1, 1)), ("fc2_b", (1,)),
        ]
        for name, shape in shapes:
            self.register_parameter(name, torch.nn.Parameter(_fan_in_uniform(gen, shape)))

    def forward(self, x):
        """x: B,1,H,W with H,W >= input_window; output: B,1,H',W' logits-free probs."""
        h = netops.relu(netops.conv2d(x, self.conv1_w, self.conv1_b, padding="valid"))
        h = netops.relu(netops.conv2d(h, self.conv2_w, self.conv2_b, padding="valid"))
        h = netops.relu(netops.conv2d(h, self.conv3_w, self.conv3_b, padding="valid"))
        h = netops.relu(netops.conv2d(h, self.fc1_w, self.fc1_b, padding="valid"))
        h = netops.conv2d(h, self.fc2_w, self.fc2_b, padding="valid")
        return netops.sigmoid(h)

    def layer_order(self):
        return [name for name, _ in self.named_parameters()]


def build_seg2d(spec: Seg2DSpec, seed: int) -> Seg2DNet:
    return Seg2DNet(spec, seed)


def normalize_volume(data: np.ndarray) -> np.ndarray:
    """Zero-mean unit-variance normalization over the whole volume."""
    data = np.asarray(data, dtype=np.float32)
    return (data - data.mean()) / (data.std() + 1e-6)


def labeled_pixel_index(volumes):
    """Per-class (volume, z, y, x) coordinates of labeled pixels.

    Only voxels with label != UNLABELED ever appear here; training draws its
    supervision exclusively from this index.
    """
    fg, bg = [], []
    for vi, (_, lab) in enumerate(volumes):
        coords = np.argwhere(lab.labels != UNLABELED)
        if coords.size == 0:
            continue
        vals = lab.labels[coords[:, 0], coords[:, 1], coords[:, 2]]
        vidx = np.full((len(coords), 1), vi)
        stacked = np.hstack([vidx, coords])
        fg.append(stacked[vals == FOREGROUND])
        bg.append(stacked[vals != FOREGROUND])
    fg = np.vstack(fg) if fg else np.empty((0, 4), dtype=int)
    bg = np.vstack(bg) if bg else np.empty((0, 4), dtype=int)
    return fg, bg


def _extract_windows(padded_slices, coords, half):
    out = np.empty((len(coords), 1, 2 * half + 1, 2 * half + 1), dtype=np.float32)
    for i, (vi, z, y, x) in enumerate(coords):
        sl = padded_slices[vi][z]
        out[i, 0] = sl[y : y + 2 * half + 1, x : x + 2 * half + 1]
    return out


def train_seg2d(model: Seg2DNet, volumes, hyper: HyperParams,
                patience: int = 10, min_delta: float = 1e-4):
    """Train on labeled pixels only, class-balanced 1:1 FG/BG windows.

    volumes: list of (Volume3D, LabelVolume) pairs, labels possibly sparse.
    Returns (model, history) where history is the per-epoch mean loss.
    """
    fg, bg = labeled_pixel_index(volumes)
    if len(fg) + len(bg) == 0:
        raise ValueError("no labeled pixels available for training")
    half = model.spec.half_window
    padded = [
        np.pad(normalize_volume(vol.data), ((0, 0), (half, half), (half, half)), mode="reflect")
        for vol, _ in volumes
    ]
    rng = np.random.default_rng(hyper.seed)
    opt = torch.optim.Adam(model.parameters(), lr=hyper.lr)
    history = []
    best, stale = np.inf, 0
    steps = max(1, hyper.patches_per_epoch // hyper.batch_size)
    n_fg = hyper.batch_size // 2
    for epoch in range(hyper.epochs):
        epoch_losses = []
        for _ in range(steps):
            picks = []
            if len(fg) and len(bg):
                picks.append(fg[rng.integers(0, len(fg), size=n_fg)])
                picks.append(bg[rng.integers(0, len(bg), size=hyper.batch_size - n_fg)])
            else:
                pool = fg if len(fg) else bg
                picks.append(pool[rng.integers(0, len(pool), size=hyper.batch_size)])
            coords = np.vstack(picks)
            windows = torch.from_numpy(_extract_windows(padded, coords, half))
            targets = np.array(
                [volumes[vi][1].labels[z, y, x] == FOREGROUND for vi, z, y, x in coords],
                dtype=np.float32,
            )
            targets = torch.from_numpy(targets).reshape(-1, 1, 1, 1)
            pred = model(windows)
            p = torch.clamp(pred, 1e-7, 1.0 - 1e-7)
            loss = -(targets * torch.log(p) + (1 - targets) * torch.log1p(-p)).mean()
            if not torch.isfinite(loss):
                raise NumericalError(f"non-finite 2D training loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_losses.append(loss.item())
        mean_loss = float(np.mean(epoch_losses))
        history.append(mean_loss)
        model.epoch = epoch + 1
        if mean_loss < best - min_delta:
            best, stale = mean_loss, 0
        else:
            stale += 1
            if stale >= patience:
                break
    return model, history


def predict_volume_2d(model: Seg2DNet, v: Volume3D) -> ProbVolume:
    """Slice-wise dense inference: every z-slice processed independently."""
    half = model.spec.half_window
    data = normalize_volume(v.data)
    depth = data.shape[0]
    out = np.empty(v.shape, dtype=np.float32)
    with torch.no_grad():
        for z in range(depth):
            sl = np.pad(data[z], half, mode="reflect")
            t = torch.from_numpy(sl[None, None])
            out[z] = model(t).numpy()[0, 0]
    np.clip(out, 0.0, 1.0, out=out)
    return ProbVolume(out, voxel_size=v.voxel_size)


# ---------------------------------------------------------------------------
# Checkpoints: CKPT framing mirrors the VOLG container (magic, length-prefixed
# JSON header, raw little-endian f32 payloads in declared layer order).
# ---------------------------------------------------------------------------

def save_checkpoint(model, path, kind: str, header_extra: dict | None = None):
    params = dict(model.named_parameters())
    order = model.layer_order()
    header = {
        "kind": kind,
        "seed": model.seed,
        "epoch": model.epoch,
        "spec": model.spec.to_dict(),
        "layers": [{"name": n, "shape": list(params[n].shape)} for n in order],
    }
    if header_extra:
        header.update(header_extra)
    js = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", len(js)))
        f.write(js)
        for n in order:
            f.write(params[n].detach().numpy().astype("<f4").tobytes(order="C"))


def read_checkpoint_header(path):
    with open(path, "rb") as f:
        magic = f.read(len(CKPT_MAGIC))
        if magic != CKPT_MAGIC:
            raise ArtifactError(f"{path}: not a checkpoint file")
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen).decode("utf-8"))
    return header


def _load_payloads(path, header):
    offset = len(CKPT_MAGIC) + 4 + len(
        json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    )
    tensors = {}
    with open(path, "rb") as f:
        f.seek(offset)
        for layer in header["layers"]:
            shape = tuple(layer["shape"])
            n = int(np.prod(shape))
            buf = f.read(n * 4)
            if len(buf) != n * 4:
                raise ArtifactError(f"{path}: truncated payload for {layer['name']}")
            tensors[layer["name"]] = np.frombuffer(buf, dtype="<f4").reshape(shape)
        if f.read(1):
            raise ArtifactError(f"{path}: trailing bytes after payloads")
    return tensors


def load_seg2d(path) -> Seg2DNet:
    header = read_checkpoint_header(path)
    if header.get("kind") != "seg2d":
        raise ArtifactError(f"{path}: not a seg2d checkpoint")
    spec = Seg2DSpec(
        conv_channels=tuple(header["spec"]["conv_channels"]),
        kernel=header["spec"]["kernel"],
        fc_sizes=tuple(header["spec"]["fc_sizes"]),
        input_window=header["spec"]["input_window"],
    )
    model = Seg2DNet(spec, header["seed"])
    model.epoch = header["epoch"]
    tensors = _load_payloads(path, header)
    with torch.no_grad():
        for name, param in model.named_parameters():
            param.copy_(torch.from_numpy(tensors[name].copy()))
    return model
