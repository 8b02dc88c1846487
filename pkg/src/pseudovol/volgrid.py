"""Volumetric data model, VOLG file I/O, patch extraction and prediction fusion.

Axis order is (Z, Y, X) everywhere in memory and on disk. Converters to other
conventions belong at I/O boundaries, not here.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ArtifactError

MAGIC = b"VOLG0001"

BACKGROUND = 0
FOREGROUND = 1
UNLABELED = 2

_DTYPES = {
    "f32": np.dtype("<f4"),
    "u8": np.dtype("<u1"),
    "u16": np.dtype("<u2"),
}


def _as_triple(t, name):
    t = tuple(t)
    if len(t) != 3:
        raise ValueError(f"{name} must have 3 components, got {t!r}")
    return t


@dataclass(frozen=True)
class Volume3D:
    """Scalar intensity grid with voxel-size metadata, axis order (Z,Y,X)."""

    data: np.ndarray
    voxel_size: tuple = (1.0, 1.0, 1.0)
    dtype_tag: str = "f32"
    meta: dict | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.dtype_tag not in _DTYPES:
            raise ValueError(f"unknown dtype tag {self.dtype_tag!r}")
        vs = _as_triple(self.voxel_size, "voxel_size")
        if any(not (v > 0) for v in vs):
            raise ValueError(f"voxel_size must be strictly positive, got {vs}")
        data = np.ascontiguousarray(self.data, dtype=_DTYPES[self.dtype_tag])
        if data.ndim != 3:
            raise ValueError(f"volume data must be 3D, got shape {data.shape}")
        if self.dtype_tag == "f32" and not np.isfinite(data).all():
            raise ValueError("volume contains NaN/Inf values")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "voxel_size", vs)

    @property
    def shape(self):
        return self.data.shape


@dataclass(frozen=True)
class LabelVolume:
    """Tri-state per-voxel annotation: BACKGROUND=0, FOREGROUND=1, UNLABELED=2."""

    labels: np.ndarray
    voxel_size: tuple = (1.0, 1.0, 1.0)
    meta: dict | None = field(default=None, compare=False)

    def __post_init__(self):
        labels = np.ascontiguousarray(self.labels, dtype=np.uint8)
        if labels.ndim != 3:
            raise ValueError(f"label data must be 3D, got shape {labels.shape}")
        if labels.max(initial=0) > UNLABELED:
            raise ValueError("labels must be in {0, 1, 2}")
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "voxel_size", _as_triple(self.voxel_size, "voxel_size"))

    @property
    def shape(self):
        return self.labels.shape

    def labeled_mask(self):
        return self.labels != UNLABELED

    def is_dense(self):
        return bool((self.labels != UNLABELED).all())


@dataclass(frozen=True)
class ProbVolume:
    """Per-voxel probability field, values in [0, 1]."""

    probs: np.ndarray
    voxel_size: tuple = (1.0, 1.0, 1.0)
    meta: dict | None = field(default=None, compare=False)

    def __post_init__(self):
        probs = np.ascontiguousarray(self.probs, dtype=np.float32)
        if probs.ndim != 3:
            raise ValueError(f"prob data must be 3D, got shape {probs.shape}")
        if not np.isfinite(probs).all():
            raise ValueError("probabilities contain NaN/Inf")
        if probs.size and (probs.min() < 0.0 or probs.max() > 1.0):
            raise ValueError("probabilities must lie in [0, 1]")
        probs.setflags(write=False)
        object.__setattr__(self, "probs", probs)
        object.__setattr__(self, "voxel_size", _as_triple(self.voxel_size, "voxel_size"))

    @property
    def shape(self):
        return self.probs.shape


@dataclass(frozen=True)
class PatchSpec:
    """A sub-block location: integer origin (may be negative, padding allowed)."""

    origin: tuple
    shape: tuple

    def __post_init__(self):
        origin = tuple(int(o) for o in _as_triple(self.origin, "origin"))
        shape = tuple(int(s) for s in _as_triple(self.shape, "shape"))
        if any(s <= 0 for s in shape):
            raise ValueError(f"patch shape must be positive, got {shape}")
        if any(o < -s for o, s in zip(origin, shape)):
            raise ValueError(f"origin {origin} too far outside for shape {shape}")
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "shape", shape)


# ---------------------------------------------------------------------------
# VOLG file format
# ---------------------------------------------------------------------------

def _volg_header(obj, kind, dtype_tag, meta):
    header = {
        "shape": [int(s) for s in obj.shape],
        "voxel_size": [float(v) for v in obj.voxel_size],
        "dtype": dtype_tag,
        "kind": kind,
    }
    merged_meta = dict(obj.meta or {})
    if meta:
        merged_meta.update(meta)
    if merged_meta:
        header["meta"] = merged_meta
    return header


def save_volume(obj, path, meta=None):
    """Write a Volume3D / LabelVolume / ProbVolume as a VOLG file.

    Byte output is deterministic for identical input (sorted JSON header,
    little-endian C-order payload).
    """
    if isinstance(obj, Volume3D):
        kind, dtype_tag, payload = "intensity", obj.dtype_tag, obj.data
    elif isinstance(obj, LabelVolume):
        kind, dtype_tag, payload = "labels", "u8", obj.labels
    elif isinstance(obj, ProbVolume):
        kind, dtype_tag, payload = "probs", "f32", obj.probs
    else:
        raise TypeError(f"cannot save object of type {type(obj).__name__}")
    header = _volg_header(obj, kind, dtype_tag, meta)
    js = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    raw = np.ascontiguousarray(payload, dtype=_DTYPES[dtype_tag]).tobytes(order="C")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(js)))
        f.write(js)
        f.write(raw)


def load_volume(path):
    """Read a VOLG file back into the matching volume type."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < len(MAGIC) + 4 or blob[: len(MAGIC)] != MAGIC:
        raise ArtifactError(f"{path}: not a VOLG file (bad magic)")
    (hlen,) = struct.unpack_from("<I", blob, len(MAGIC))
    hstart = len(MAGIC) + 4
    if hstart + hlen > len(blob):
        raise ArtifactError(f"{path}: truncated header")
    try:
        header = json.loads(blob[hstart : hstart + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ArtifactError(f"{path}: bad header JSON: {e}") from e
    for key in ("shape", "voxel_size", "dtype", "kind"):
        if key not in header:
            raise ArtifactError(f"{path}: header missing {key!r}")
    dtype_tag = header["dtype"]
    if dtype_tag not in _DTYPES:
        raise ArtifactError(f"{path}: unknown dtype tag {dtype_tag!r}")
    shape = tuple(int(s) for s in header["shape"])
    dtype = _DTYPES[dtype_tag]
    expected = int(np.prod(shape)) * dtype.itemsize
    payload = blob[hstart + hlen :]
    if len(payload) != expected:
        raise ArtifactError(
            f"{path}: payload size mismatch (header declares {expected} bytes, "
            f"file has {len(payload)})"
        )
    data = np.frombuffer(payload, dtype=dtype).reshape(shape)
    voxel_size = tuple(float(v) for v in header["voxel_size"])
    meta = header.get("meta")
    kind = header["kind"]
    try:
        if kind == "intensity":
            return Volume3D(data, voxel_size, dtype_tag, meta=meta)
        if kind == "labels":
            if dtype_tag != "u8":
                raise ArtifactError(f"{path}: label payload must be u8")
            return LabelVolume(data, voxel_size, meta=meta)
        if kind == "probs":
            if dtype_tag != "f32":
                raise ArtifactError(f"{path}: prob payload must be f32")
            return ProbVolume(data, voxel_size, meta=meta)
    except ValueError as e:
        raise ArtifactError(f"{path}: {e}") from e
    raise ArtifactError(f"{path}: unknown kind {kind!r}")


# ---------------------------------------------------------------------------
# Patch extraction
# ---------------------------------------------------------------------------

def _mirror_indices(idx, n):
    # reflect without repeating the edge sample (np.pad mode="reflect")
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * n - 2
    idx = np.mod(idx, period)
    return np.where(idx >= n, period - idx, idx)


def extract_patch(vol, spec: PatchSpec, pad_mode: str = "reflect"):
    """Extract a dense block per spec; returns (block, validity mask).

    Out-of-bounds voxels are filled by mirroring (reflect) or with zeros, and
    flagged False in the validity mask.
    """
    if pad_mode not in ("reflect", "zero"):
        raise ValueError(f"unknown pad_mode {pad_mode!r}")
    data = vol.data if isinstance(vol, Volume3D) else vol
    if isinstance(vol, LabelVolume):
        data = vol.labels
    elif isinstance(vol, ProbVolume):
        data = vol.probs
    data = np.asarray(data)
    axes_idx, axes_valid = [], []
    for ax in range(3):
        idx = spec.origin[ax] + np.arange(spec.shape[ax])
        valid = (idx >= 0) & (idx < data.shape[ax])
        if not valid.any():
            raise ValueError("patch entirely outside volume")
        axes_idx.append(idx)
        axes_valid.append(valid)
    if pad_mode == "reflect":
        gathered = [_mirror_indices(i, n) for i, n in zip(axes_idx, data.shape)]
    else:
        gathered = [np.clip(i, 0, n - 1) for i, n in zip(axes_idx, data.shape)]
    block = data[np.ix_(*gathered)]
    vz, vy, vx = axes_valid
    valid = vz[:, None, None] & vy[None, :, None] & vx[None, None, :]
    if pad_mode == "zero":
        block = block.copy()
        block[~valid] = 0
    return block, valid


# ---------------------------------------------------------------------------
# Prediction fusion
# ---------------------------------------------------------------------------

def _hann_window(n):
    # offset raised cosine, strictly positive so border voxels keep weight
    i = np.arange(n)
    return np.sin(np.pi * (i + 0.5) / n) ** 2


def fuse_predictions(patches, shape, blend: str = "uniform", voxel_size=(1.0, 1.0, 1.0)):
    """Recombine overlapping probability patches into one ProbVolume.

    Each voxel becomes the weighted average of all covering patch values
    (uniform: weight 1; hann: separable raised-cosine). Patch parts outside
    `shape` are ignored. Every voxel must be covered at least once.
    """
    if blend not in ("uniform", "hann"):
        raise ValueError(f"unknown blend {blend!r}")
    shape = tuple(int(s) for s in shape)
    acc = np.zeros(shape, dtype=np.float64)
    wsum = np.zeros(shape, dtype=np.float64)
    for spec, block in patches:
        block = np.asarray(block)
        if block.shape != spec.shape:
            raise ValueError(f"block shape {block.shape} != spec shape {spec.shape}")
        if blend == "uniform":
            win = np.ones(spec.shape, dtype=np.float64)
        else:
            wz, wy, wx = (_hann_window(n) for n in spec.shape)
            win = wz[:, None, None] * wy[None, :, None] * wx[None, None, :]
        dst, src = [], []
        for ax in range(3):
            lo = max(spec.origin[ax], 0)
            hi = min(spec.origin[ax] + spec.shape[ax], shape[ax])
            if hi <= lo:
                dst = None
                break
            dst.append(slice(lo, hi))
            src.append(slice(lo - spec.origin[ax], hi - spec.origin[ax]))
        if dst is None:
            continue
        dst, src = tuple(dst), tuple(src)
        acc[dst] += block[src] * win[src]
        wsum[dst] += win[src]
    if (wsum == 0).any():
        n = int((wsum == 0).sum())
        raise ValueError(f"{n} voxels not covered by any patch")
    probs = (acc / wsum).astype(np.float32)
    np.clip(probs, 0.0, 1.0, out=probs)
    return ProbVolume(probs, voxel_size)
