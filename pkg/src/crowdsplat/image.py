"""Float image planes and linear (no gamma) PNG input/output."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np

ROLES = ("rgb", "alpha", "mask", "normal")

# Tiny overshoot tolerated before clipping back into [0, 1]; anything larger
# is a real range violation and raises.
_RANGE_TOL = 1e-6


@dataclass
class ImageBuffer:
    """A float image plane with values in [0, 1].

    data is (height, width, channels) float64, row major. The role tag records
    what the plane means (rgb / alpha / mask / normal) but does not change the
    numeric contract.
    """

    data: np.ndarray
    role: str = "rgb"

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3 or arr.shape[2] not in (1, 3, 4):
            raise ValueError(f"image data must be (H, W, C) with C in (1, 3, 4), got {arr.shape}")
        if self.role not in ROLES:
            raise ValueError(f"unknown image role {self.role!r}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("image data contains non-finite values")
        lo, hi = arr.min(initial=0.0), arr.max(initial=1.0)
        if lo < -_RANGE_TOL or hi > 1.0 + _RANGE_TOL:
            raise ValueError(f"image data outside [0, 1]: min={lo}, max={hi}")
        # In-range values pass through clip unchanged, so this only removes
        # sub-tolerance floating-point overshoot.
        self.data = np.ascontiguousarray(np.clip(arr, 0.0, 1.0))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @classmethod
    def full(cls, width: int, height: int, value, channels: int = 3, role: str = "rgb") -> "ImageBuffer":
        arr = np.empty((height, width, channels), dtype=np.float64)
        arr[:] = np.asarray(value, dtype=np.float64)
        return cls(arr, role)

    @classmethod
    def zeros(cls, width: int, height: int, channels: int = 1, role: str = "mask") -> "ImageBuffer":
        return cls(np.zeros((height, width, channels)), role)

    def same_shape(self, other: "ImageBuffer") -> bool:
        return self.data.shape == other.data.shape


def require_same_shape(a: ImageBuffer, b: ImageBuffer, what: str = "images") -> None:
    if a.data.shape != b.data.shape:
        raise ValueError(f"{what} have mismatched shapes: {a.data.shape} vs {b.data.shape}")


def save_png(image: ImageBuffer, path: str | Path, bit_depth: int | None = None) -> None:
    """Write a linear-encoded PNG (no gamma). Normal maps default to 16 bit."""
    if bit_depth is None:
        bit_depth = 16 if image.role == "normal" else 8
    if bit_depth not in (8, 16):
        raise ValueError("bit_depth must be 8 or 16")
    scale = 255.0 if bit_depth == 8 else 65535.0
    dtype = np.uint8 if bit_depth == 8 else np.uint16
    quantized = np.round(image.data * scale).astype(dtype)
    if quantized.shape[2] == 1:
        out = quantized[:, :, 0]
    else:
        out = quantized[:, :, ::-1]  # cv2 expects BGR order
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    ok, encoded = cv2.imencode(".png", out)
    if not ok:
        raise IOError(f"PNG encoding failed for {path}")
    from .fileio import atomic_write_bytes

    atomic_write_bytes(path, encoded.tobytes())


def load_png(path: str | Path, role: str = "rgb") -> ImageBuffer:
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise IOError(f"cannot read PNG {path}")
    if raw.dtype == np.uint8:
        scale = 255.0
    elif raw.dtype == np.uint16:
        scale = 65535.0
    else:
        raise IOError(f"unsupported PNG sample type {raw.dtype} in {path}")
    arr = raw.astype(np.float64) / scale
    if arr.ndim == 3:
        arr = arr[:, :, ::-1]  # BGR -> RGB
    return ImageBuffer(arr, role)
