"""Training hyperparameters shared by the 2D and 3D models."""

from __future__ import annotations

from dataclasses import dataclass, asdict


@dataclass(frozen=True)
class HyperParams:
    lr: float = 1e-3
    batch_size: int = 64
    patches_per_epoch: int = 256
    epochs: int = 20
    seed: int = 0
    optimizer: str = "adam"

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size <= 0 or self.patches_per_epoch <= 0 or self.epochs <= 0:
            raise ValueError("hyperparameters must be positive")
        if self.optimizer != "adam":
            raise ValueError(f"unsupported optimizer {self.optimizer!r}")

    def to_dict(self):
        return asdict(self)
