"""Image-plane containers: intrinsics, intensity images, flow and depth fields."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Fraction of valid pixels below which a flow field carries no usable signal.
DEGENERATE_FRACTION = 0.05


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @classmethod
    def default(cls) -> Intrinsics:
        return cls(fx=64.0, fy=64.0, cx=39.5, cy=29.5, width=80, height=60)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def to_normalized(self, u, v):
        return (np.asarray(u, dtype=np.float64) - self.cx) / self.fx, (np.asarray(v, dtype=np.float64) - self.cy) / self.fy

    def to_pixel(self, x, y):
        return np.asarray(x) * self.fx + self.cx, np.asarray(y) * self.fy + self.cy

    def pixel_grid(self) -> tuple[np.ndarray, np.ndarray]:
        """Pixel-center coordinates ``(u, v)``, each of shape (H, W)."""
        v, u = np.mgrid[0 : self.height, 0 : self.width].astype(np.float64)
        return u, v

    def normalized_grid(self) -> tuple[np.ndarray, np.ndarray]:
        return self.to_normalized(*self.pixel_grid())

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy, "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d: dict) -> Intrinsics:
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]), int(d["width"]), int(d["height"]))


def _check_shape(arr: np.ndarray, intr: Intrinsics, what: str) -> None:
    if arr.shape[:2] != intr.shape:
        raise ValueError(f"{what} shape {arr.shape[:2]} does not match intrinsics {intr.shape}")


@dataclass(frozen=True, eq=False)
class ImageBuffer:
    """Grayscale intensity image in [0, 1] with the camera intrinsics attached."""

    pixels: np.ndarray
    intrinsics: Intrinsics

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim == 3:
            # RGB(A) ingest: mean of the colour channels
            px = px[..., :3].mean(axis=2)
        if px.ndim != 2:
            raise ValueError("image must be HxW or HxWxC")
        _check_shape(px, self.intrinsics, "image")
        if px.size and (px.min() < 0.0 or px.max() > 1.0):
            raise ValueError("pixel intensities must lie in [0, 1]")
        px = px.copy()
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape

    def to_uint8(self) -> np.ndarray:
        return np.rint(self.pixels * 255.0).astype(np.uint8)

    @classmethod
    def from_uint8(cls, data: np.ndarray, intr: Intrinsics) -> ImageBuffer:
        return cls(np.asarray(data, dtype=np.float64) / 255.0, intr)


@dataclass(frozen=True, eq=False)
class FlowField:
    """Per-pixel displacement (du, dv) in pixels plus a validity mask."""

    vectors: np.ndarray  # (H, W, 2)
    valid: np.ndarray  # (H, W) bool

    def __post_init__(self):
        vec = np.array(self.vectors, dtype=np.float64)
        valid = np.array(self.valid, dtype=bool)
        if vec.ndim != 3 or vec.shape[2] != 2 or vec.shape[:2] != valid.shape:
            raise ValueError("flow vectors must be (H, W, 2) matching the (H, W) mask")
        valid &= np.all(np.isfinite(vec), axis=2)
        vec[~valid] = 0.0
        vec.setflags(write=False)
        valid.setflags(write=False)
        object.__setattr__(self, "vectors", vec)
        object.__setattr__(self, "valid", valid)

    @property
    def shape(self) -> tuple[int, int]:
        return self.valid.shape

    @property
    def valid_fraction(self) -> float:
        return float(self.valid.mean()) if self.valid.size else 0.0

    @property
    def degenerate(self) -> bool:
        return self.valid_fraction < DEGENERATE_FRACTION

    def magnitude(self) -> np.ndarray:
        return np.linalg.norm(self.vectors, axis=2)

    def median(self) -> np.ndarray:
        if not self.valid.any():
            return np.full(2, np.nan)
        return np.median(self.vectors[self.valid], axis=0)


@dataclass(frozen=True, eq=False)
class DepthMap:
    depths: np.ndarray  # (H, W) meters
    valid: np.ndarray  # (H, W) bool

    def __post_init__(self):
        d = np.array(self.depths, dtype=np.float64)
        valid = np.array(self.valid, dtype=bool)
        if d.shape != valid.shape:
            raise ValueError("depth and mask shapes differ")
        valid &= np.isfinite(d) & (d > 0)
        d[~valid] = np.inf
        d.setflags(write=False)
        valid.setflags(write=False)
        object.__setattr__(self, "depths", d)
        object.__setattr__(self, "valid", valid)

    @property
    def shape(self) -> tuple[int, int]:
        return self.valid.shape
