"""Optical flow estimation and photometric error.

Flow is pyramidal Lucas-Kanade (OpenCV) solved on a regular pixel grid and
bilinearly filled to a dense field. Grid points failing the minimum-eigenvalue
test, the window-residual test, or landing outside the frame are invalid.
"""

from __future__ import annotations

from dataclasses import dataclass

import cv2
import numpy as np

from .images import FlowField, ImageBuffer


@dataclass(frozen=True)
class FlowEstimatorConfig:
    """Pyramidal LK settings.

    ``min_eigenvalue`` is OpenCV's normalized threshold (eigenvalue of the
    window gradient matrix divided by the window area). ``max_residual`` is
    the mean absolute window residual after tracking, in 0-255 units; ``None``
    disables it. ``stride`` is the spacing of the tracked pixel grid.
    """

    pyramid_levels: int = 3
    window: int = 7
    iterations: int = 30
    min_eigenvalue: float = 1e-4
    stride: int = 4
    max_residual: float | None = 8.0

    def __post_init__(self):
        if self.pyramid_levels < 1:
            raise ValueError("pyramid_levels must be >= 1")
        if self.window < 3 or self.window % 2 == 0:
            raise ValueError("window must be odd and >= 3")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _check_pair(a: ImageBuffer, b: ImageBuffer) -> None:
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")


def _bilinear(img: np.ndarray, y: np.ndarray, x: np.ndarray) -> np.ndarray:
    h, w = img.shape
    x = np.clip(x, 0.0, w - 1.0)
    y = np.clip(y, 0.0, h - 1.0)
    x0 = np.minimum(np.floor(x).astype(np.intp), max(w - 2, 0))
    y0 = np.minimum(np.floor(y).astype(np.intp), max(h - 2, 0))
    ax, ay = x - x0, y - y0
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    top = img[y0, x0] * (1 - ax) + img[y0, x1] * ax
    bot = img[y1, x0] * (1 - ax) + img[y1, x1] * ax
    return top * (1 - ay) + bot * ay


def estimate_flow(src: ImageBuffer, dst: ImageBuffer, cfg: FlowEstimatorConfig | None = None) -> FlowField:
    """Flow from ``src`` to ``dst``: pixel p of ``src`` appears at p + flow in ``dst``."""
    cfg = cfg or FlowEstimatorConfig()
    _check_pair(src, dst)
    h, w = src.shape
    s = cfg.stride
    gv, gu = np.mgrid[0:h:s, 0:w:s]
    gh, gw = gv.shape
    pts = np.stack([gu, gv], axis=-1).reshape(-1, 1, 2).astype(np.float32)
    nxt, status, err = cv2.calcOpticalFlowPyrLK(
        src.to_uint8(),
        dst.to_uint8(),
        pts,
        None,
        winSize=(cfg.window, cfg.window),
        maxLevel=cfg.pyramid_levels - 1,
        criteria=(cv2.TERM_CRITERIA_EPS | cv2.TERM_CRITERIA_COUNT, cfg.iterations, 0.01),
        minEigThreshold=cfg.min_eigenvalue,
    )
    grid = (nxt - pts).reshape(gh, gw, 2).astype(np.float64)
    ok = status.reshape(gh, gw) > 0
    if cfg.max_residual is not None:
        ok &= err.reshape(gh, gw) <= cfg.max_residual
    if s == 1:
        dense, dense_ok = grid, ok
    else:
        vv, uu = np.mgrid[0:h, 0:w] / float(s)
        dense = np.stack([_bilinear(grid[..., c], vv, uu) for c in range(2)], axis=-1)
        gi = np.minimum(np.rint(vv).astype(int), gh - 1)
        gj = np.minimum(np.rint(uu).astype(int), gw - 1)
        dense_ok = ok[gi, gj]
        # grid samples keep their exact tracked values
        dense[::s, ::s] = grid
        dense_ok[::s, ::s] = ok
    vv, uu = np.mgrid[0:h, 0:w]
    tu, tv = uu + dense[..., 0], vv + dense[..., 1]
    valid = dense_ok & (tu >= -0.5) & (tu < w - 0.5) & (tv >= -0.5) & (tv < h - 0.5)
    return FlowField(dense, valid)


def photometric_error(a: ImageBuffer, b: ImageBuffer) -> float:
    """Mean absolute intensity difference on the 0-255 scale."""
    _check_pair(a, b)
    return float(np.mean(np.abs(a.pixels - b.pixels)) * 255.0)
