from dataclasses import dataclass, field

import numpy as np

from .exceptions import ContractViolation

MAP_KINDS = ("cam", "gradcam", "confidence", "uncertainty", "entropy", "variance", "mean_prob", "image")


@dataclass
class PixelMap:
    """A single-channel 2-D map of finite reals."""

    values: np.ndarray
    kind: str = "cam"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ContractViolation(f"PixelMap needs a 2-d array, got shape {v.shape}")
        if not np.isfinite(v).all():
            raise ContractViolation("PixelMap values must be finite")
        if self.kind not in MAP_KINDS:
            raise ContractViolation(f"unknown map kind {self.kind!r}")
        self.values = v

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]

    @property
    def shape(self):
        return self.values.shape

    def normalized(self):
        """Min-max scaled copy in [0, 1]; a constant map becomes all zeros."""
        lo, hi = self.values.min(), self.values.max()
        span = hi - lo
        vals = np.zeros_like(self.values) if span <= 0 else (self.values - lo) / span
        return PixelMap(vals, self.kind, dict(self.meta))

    def upsampled(self, factor):
        f = int(factor)
        return PixelMap(np.kron(self.values, np.ones((f, f))), self.kind, dict(self.meta))
