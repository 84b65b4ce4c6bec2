"""Multi-instance containers: a bag is the unit the scorer sees.

Tabular samples are one-instance bags; texture images become bags of
flattened, per-patch standardized windows plus the grid geometry needed to
put saliency back into pixel space.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError

Array = np.ndarray


@dataclass
class Geometry:
    """Patch-grid bookkeeping for bags extracted from an image."""
    image_id: str
    height: int
    width: int
    patch: int
    stride: int

    def grid(self) -> tuple[int, int]:
        rows = (self.height - self.patch) // self.stride + 1
        cols = (self.width - self.patch) // self.stride + 1
        return rows, cols

    def window_origin(self, j: int) -> tuple[int, int]:
        rows, cols = self.grid()
        if not 0 <= j < rows * cols:
            raise ContractError(f"window {j} outside {rows}x{cols} grid")
        return (j // cols) * self.stride, (j % cols) * self.stride


@dataclass
class Bag:
    """A labeled set of instances scored jointly."""
    id: str
    instances: Array                  # (n, d) float64, n >= 1
    y: int                            # 1 anomaly, 0 normal
    class_id: int | None = None      # anomaly class for split bookkeeping
    geometry: Geometry | None = None
    mask: Array | None = None        # (height, width) uint8 in {0, 1}

    def __post_init__(self):
        self.instances = np.asarray(self.instances, dtype=np.float64)
        if self.instances.ndim != 2 or self.instances.shape[0] < 1:
            raise ContractError(f"bag {self.id!r} needs a (n>=1, d) instance matrix, "
                                f"got shape {self.instances.shape}")
        if self.y not in (0, 1):
            raise ContractError(f"bag {self.id!r} label must be 0 or 1, got {self.y}")
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=np.uint8)

    @property
    def n_instances(self) -> int:
        return self.instances.shape[0]

    @property
    def dim(self) -> int:
        return self.instances.shape[1]


def check_dims(bags) -> int:
    """Common instance dimension of a bag collection, or a ContractError."""
    bags = list(bags)
    if not bags:
        raise ContractError("empty bag collection")
    d = bags[0].dim
    for b in bags:
        if b.dim != d:
            raise ContractError(f"bag {b.id!r} has dimension {b.dim}, expected {d}")
    return d
