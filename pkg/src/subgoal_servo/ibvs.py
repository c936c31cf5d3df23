"""Flow-driven image-based visual servoing.

The controller stacks the per-pixel interaction matrix

    L(x, y, Z) = [[-1/Z, 0, x/Z, x*y, -(1 + x^2), y],
                  [0, -1/Z, y/Z, 1 + y^2, -x*y, -x]]

over sampled valid pixels and solves the damped least-squares problem

    min_v ||A v - f||^2 + damping * ||v||^2,   A = diag(fx, fy) L

for the camera twist ``v`` that best reproduces the target flow ``f``.
One unit of flow corresponds to one control frame.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Twist
from .images import DEGENERATE_FRACTION, DepthMap, FlowField, Intrinsics


class DegenerateFlowError(RuntimeError):
    """Too few usable pixels to determine a twist."""


@dataclass(frozen=True)
class SolverConfig:
    damping: float = 1e-3
    max_linear: float = 0.5  # m/s
    max_angular: float = 0.5  # rad/s
    stride: int = 4
    # flow-as-depth proxy: Z = clip(alpha / (|flow| + eps), z_min, z_max)
    alpha: float = 1.0  # px*m
    eps_z: float = 1e-3  # px
    z_min: float = 0.1
    z_max: float = 10.0
    # motion depth: used before any motion, and the translational parallax
    # (px per unit inverse depth) a pixel needs before its depth is trusted
    z_nominal: float = 2.0
    min_parallax: float = 0.05

    def __post_init__(self):
        if self.damping < 0:
            raise ValueError("damping must be >= 0")
        if not (self.max_linear > 0 and self.max_angular > 0):
            raise ValueError("speed caps must be positive")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if not (0 < self.z_min < self.z_max):
            raise ValueError("need 0 < z_min < z_max")
        if not (self.alpha > 0 and self.eps_z > 0):
            raise ValueError("alpha and eps_z must be positive")
        if not (self.z_min <= self.z_nominal <= self.z_max):
            raise ValueError("z_nominal must lie in [z_min, z_max]")
        if self.min_parallax <= 0:
            raise ValueError("min_parallax must be positive")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def interaction_row(x: float, y: float, Z: float) -> np.ndarray:
    """The 2x6 interaction matrix at normalized coords (x, y) and depth Z."""
    if not Z > 0:
        raise ValueError(f"depth must be positive, got {Z}")
    return np.array(
        [
            [-1.0 / Z, 0.0, x / Z, x * y, -(1.0 + x * x), y],
            [0.0, -1.0 / Z, y / Z, 1.0 + y * y, -x * y, -x],
        ]
    )


def interaction_stack(x: np.ndarray, y: np.ndarray, Z: np.ndarray) -> np.ndarray:
    """Vectorized interaction matrices, shape (N, 2, 6)."""
    x, y, Z = (np.asarray(a, dtype=np.float64).ravel() for a in (x, y, Z))
    if np.any(Z <= 0):
        raise ValueError("depths must be positive")
    iz = 1.0 / Z
    L = np.zeros((x.size, 2, 6))
    L[:, 0, 0] = -iz
    L[:, 0, 2] = x * iz
    L[:, 0, 3] = x * y
    L[:, 0, 4] = -(1.0 + x * x)
    L[:, 0, 5] = y
    L[:, 1, 1] = -iz
    L[:, 1, 2] = y * iz
    L[:, 1, 3] = 1.0 + y * y
    L[:, 1, 4] = -x * y
    L[:, 1, 5] = -x
    return L


def flow_depth(flow: FlowField, cfg: SolverConfig) -> DepthMap:
    """Inverse flow magnitude as a depth proxy, clamped to [z_min, z_max]."""
    z = np.clip(cfg.alpha / (flow.magnitude() + cfg.eps_z), cfg.z_min, cfg.z_max)
    return DepthMap(z, flow.valid)


def nominal_depth(intr: Intrinsics, cfg: SolverConfig) -> DepthMap:
    return DepthMap(np.full(intr.shape, cfg.z_nominal), np.ones(intr.shape, dtype=bool))


def motion_depth(flow: FlowField, motion: Twist, intr: Intrinsics, cfg: SolverConfig) -> DepthMap | None:
    """Depth from the flow a known camera motion produced between two frames.

    ``motion`` is the twist integrated over the frame interval (already
    multiplied by dt). The rotational part of the flow is removed and the
    remainder is projected on the translational flow per unit inverse depth:

        1/Z = <f - f_rot, f_trans> / |f_trans|^2

    For a translation parallel to the image plane this is the inverse flow
    magnitude scaled by fx*|v|. Pixels with too little parallax or a
    non-positive inverse depth take the median of the rest. Returns ``None``
    when fewer than ``DEGENERATE_FRACTION`` of the pixels are usable.
    """
    x, y = intr.normalized_grid()
    L = interaction_stack(x, y, np.ones_like(x)).reshape(intr.shape + (2, 6))
    scale = np.array([intr.fx, intr.fy])
    v = motion.as_vector()
    f_trans = (L[..., :3] @ v[:3]) * scale
    f_rot = (L[..., 3:] @ v[3:]) * scale
    den = np.sum(f_trans**2, axis=-1)
    inv_z = np.sum((flow.vectors - f_rot) * f_trans, axis=-1) / np.maximum(den, 1e-12)
    ok = flow.valid & (den > cfg.min_parallax**2) & (inv_z > 1.0 / cfg.z_max)
    if ok.mean() < DEGENERATE_FRACTION:
        return None
    z = np.clip(1.0 / np.where(ok, inv_z, 1.0), cfg.z_min, cfg.z_max)
    z = np.where(ok, z, np.median(z[ok]))
    return DepthMap(z, np.ones(intr.shape, dtype=bool))


def predicted_flow(twist: Twist, depth: DepthMap, intr: Intrinsics) -> FlowField:
    x, y = intr.normalized_grid()
    valid = depth.valid
    vec = np.zeros(depth.shape + (2,))
    if valid.any():
        L = interaction_stack(x[valid], y[valid], depth.depths[valid])
        xy_dot = L @ twist.as_vector()
        vec[valid] = xy_dot * np.array([intr.fx, intr.fy])
    return FlowField(vec, valid)


def clamp_twist(t: np.ndarray, cfg: SolverConfig) -> np.ndarray:
    """Uniformly rescale so both speed caps hold; the 6-vector direction is kept."""
    lin = np.linalg.norm(t[:3])
    ang = np.linalg.norm(t[3:])
    scale = 1.0
    if lin > cfg.max_linear:
        scale = min(scale, cfg.max_linear / lin)
    if ang > cfg.max_angular:
        scale = min(scale, cfg.max_angular / ang)
    return t * scale


def build_system(
    target: FlowField, depth: DepthMap, intr: Intrinsics, stride: int
) -> tuple[np.ndarray, np.ndarray]:
    """Stack A (2N x 6) and f (2N) over stride-sampled pixels valid in both fields."""
    mask = np.zeros(target.shape, dtype=bool)
    mask[::stride, ::stride] = True
    mask &= target.valid & depth.valid
    v, u = np.nonzero(mask)
    x, y = intr.to_normalized(u, v)
    L = interaction_stack(x, y, depth.depths[v, u])
    A = (L * np.array([intr.fx, intr.fy])[None, :, None]).reshape(-1, 6)
    f = target.vectors[v, u].reshape(-1)
    return A, f


def solve_velocity(
    target: FlowField, depth: DepthMap, intr: Intrinsics, cfg: SolverConfig, clamp: bool = True
) -> Twist:
    if target.shape != depth.shape or target.shape != intr.shape:
        raise ValueError("flow, depth and intrinsics dimensions differ")
    if target.degenerate:
        raise DegenerateFlowError(f"only {target.valid_fraction:.1%} of flow pixels are valid")
    A, f = build_system(target, depth, intr, cfg.stride)
    n_pts = A.shape[0] // 2
    if n_pts < 3:
        raise DegenerateFlowError(f"{n_pts} sample pixels; need at least 3")
    N = A.T @ A + cfg.damping * np.eye(6)
    rhs = A.T @ f
    if np.linalg.cond(N) > 1e14:
        raise DegenerateFlowError("sample pixels do not constrain all six velocity components")
    t = np.linalg.solve(N, rhs)
    if clamp:
        t = clamp_twist(t, cfg)
    return Twist.from_vector(t)
