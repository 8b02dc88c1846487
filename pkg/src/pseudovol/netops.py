"""Differentiable tensor ops both networks are built from, plus grad_check.

The ops are thin, contract-enforcing wrappers over torch; grad_check certifies
the backend by comparing autograd gradients against central finite differences
in double precision. Any backend that passes grad_check is acceptable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F


def _check_odd(*ks):
    for k in ks:
        if k % 2 == 0:
            raise ValueError(f"kernel sizes must be odd, got {ks}")


def conv2d(x, w, b, padding: str = "same"):
    """Cross-correlation, stride 1. x: B,C,H,W; w: K,C,kh,kw; b: K."""
    if x.shape[1] != w.shape[1]:
        raise ValueError(f"channel mismatch: input {x.shape[1]} vs kernel {w.shape[1]}")
    if padding == "same":
        _check_odd(w.shape[2], w.shape[3])
        pad = (w.shape[2] // 2, w.shape[3] // 2)
    elif padding == "valid":
        pad = (0, 0)
    else:
        raise ValueError(f"unknown padding {padding!r}")
    return F.conv2d(x, w, b, stride=1, padding=pad)


def conv3d(x, w, b, padding: str = "same"):
    """Cross-correlation, stride 1. x: B,C,D,H,W; w: K,C,kd,kh,kw; b: K."""
    if x.shape[1] != w.shape[1]:
        raise ValueError(f"channel mismatch: input {x.shape[1]} vs kernel {w.shape[1]}")
    if padding == "same":
        _check_odd(w.shape[2], w.shape[3], w.shape[4])
        pad = (w.shape[2] // 2, w.shape[3] // 2, w.shape[4] // 2)
    elif padding == "valid":
        pad = (0, 0, 0)
    else:
        raise ValueError(f"unknown padding {padding!r}")
    return F.conv3d(x, w, b, stride=1, padding=pad)


def maxpool(x, window):
    """Per-window maximum; spatial dims must divide by the window."""
    window = tuple(int(w) for w in window)
    spatial = x.shape[2:]
    if len(window) != len(spatial):
        raise ValueError(f"window rank {len(window)} != spatial rank {len(spatial)}")
    for d, w in zip(spatial, window):
        if w < 1 or d % w != 0:
            raise ValueError(f"dim {d} not divisible by pool window {w}")
    if len(window) == 2:
        return F.max_pool2d(x, kernel_size=window, stride=window)
    if len(window) == 3:
        return F.max_pool3d(x, kernel_size=window, stride=window)
    raise ValueError("only 2D/3D pooling supported")


def upsample(x, factor, mode: str = "nearest"):
    """Nearest-neighbor replication by integer factors per spatial axis."""
    if mode != "nearest":
        raise ValueError(f"unknown mode {mode!r}")
    factor = tuple(int(f) for f in factor)
    if any(f < 1 for f in factor):
        raise ValueError(f"factors must be >= 1, got {factor}")
    out = x
    for ax, f in enumerate(factor):
        if f > 1:
            out = torch.repeat_interleave(out, f, dim=ax + 2)
    return out


def dense(x, w, b):
    """Affine map. x: B,N; w: M,N; b: M."""
    if x.shape[1] != w.shape[1]:
        raise ValueError(f"feature mismatch: input {x.shape[1]} vs weights {w.shape[1]}")
    return x @ w.t() + b


def sigmoid(x):
    return torch.sigmoid(x)


def relu(x):
    return torch.relu(x)


@dataclass(frozen=True)
class GradCheckReport:
    op_name: str
    max_rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def grad_check(fn, inputs: dict, h: float = 1e-5, tol: float = 1e-4,
               max_coords: int = 200, seed: int = 0, op_name: str = "op") -> GradCheckReport:
    """Certify analytic gradients of `fn` against central finite differences.

    `fn` maps keyword tensors to a tensor; a fixed random projection reduces
    its output to a scalar. Evaluation runs in float64. Tensors larger than
    `max_coords` are subsampled (deterministically) rather than swept fully.
    """
    gen = np.random.default_rng(seed)
    tensors = {}
    for name, arr in inputs.items():
        t = torch.as_tensor(np.asarray(arr), dtype=torch.float64).clone()
        t.requires_grad_(True)
        tensors[name] = t

    def scalar(vals):
        out = fn(**vals)
        if not torch.isfinite(out).all():
            raise ValueError(f"{op_name}: non-finite forward output")
        proj = torch.as_tensor(
            np.random.default_rng(seed + 1).standard_normal(tuple(out.shape)),
            dtype=torch.float64,
        )
        return (out * proj).sum()

    s = scalar(tensors)
    grads = torch.autograd.grad(s, list(tensors.values()), allow_unused=True)
    max_rel = 0.0
    with torch.no_grad():
        frozen = {k: v.detach().clone() for k, v in tensors.items()}
        for (name, t), g in zip(tensors.items(), grads):
            flat = frozen[name].reshape(-1)
            n = flat.numel()
            coords = np.arange(n) if n <= max_coords else gen.choice(n, max_coords, replace=False)
            g_flat = (
                torch.zeros(n, dtype=torch.float64) if g is None else g.reshape(-1)
            )
            for c in coords:
                orig = flat[c].item()
                flat[c] = orig + h
                fp = scalar(frozen).item()
                flat[c] = orig - h
                fm = scalar(frozen).item()
                flat[c] = orig
                numeric = (fp - fm) / (2.0 * h)
                analytic = g_flat[c].item()
                if not (np.isfinite(numeric) and np.isfinite(analytic)):
                    raise ValueError(f"{op_name}: non-finite gradient at {name}[{c}]")
                denom = max(abs(analytic), abs(numeric), 1e-8)
                max_rel = max(max_rel, abs(analytic - numeric) / denom)
    return GradCheckReport(op_name=op_name, max_rel_error=float(max_rel), tolerance=tol)
