"""Analytic world model: textured planar quads seen through a pinhole camera.

Everything here is exact: depth is the camera-frame z of the ray hit, flow is
obtained by reprojecting hit points, and collisions are tested against the
quad geometry directly. The world frame shares the camera convention at
identity (x right, y down, z forward), so world "vertical" is the y axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from shapely.geometry import MultiPoint, Point

from .geometry import Pose
from .images import DepthMap, FlowField, ImageBuffer, Intrinsics

OCCLUSION_TOLERANCE = 1e-3  # meters
_NEAR = 1e-6


@dataclass(frozen=True)
class Texture:
    """Checkerboard modulated by smooth value noise, in quad-local meters."""

    checker_period: float = 0.5
    base: float = 0.5
    contrast: float = 0.3
    noise_seed: int = 0
    noise_scale: float = 0.2
    noise_amplitude: float = 0.25

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(frozen=True)
class TexturedQuad:
    origin: tuple[float, float, float]
    edge_u: tuple[float, float, float]
    edge_v: tuple[float, float, float]
    texture: Texture = field(default_factory=Texture)
    hole: tuple[float, float, float, float] | None = None  # (s0, s1, t0, t1) in [0,1]^2

    def __post_init__(self):
        eu = np.asarray(self.edge_u, dtype=np.float64)
        ev = np.asarray(self.edge_v, dtype=np.float64)
        if np.linalg.norm(np.cross(eu, ev)) < 1e-12 * max(1.0, np.linalg.norm(eu) * np.linalg.norm(ev)):
            raise ValueError("quad edges must be linearly independent")
        if self.hole is not None:
            s0, s1, t0, t1 = self.hole
            if not (0.0 <= s0 < s1 <= 1.0 and 0.0 <= t0 < t1 <= 1.0):
                raise ValueError(f"hole {self.hole} must lie inside the unit square")
        for name in ("origin", "edge_u", "edge_v"):
            object.__setattr__(self, name, tuple(float(x) for x in getattr(self, name)))
        if self.hole is not None:
            object.__setattr__(self, "hole", tuple(float(x) for x in self.hole))

    @property
    def normal(self) -> np.ndarray:
        n = np.cross(self.edge_u, self.edge_v)
        return n / np.linalg.norm(n)

    def point(self, s, t) -> np.ndarray:
        o, eu, ev = (np.asarray(a) for a in (self.origin, self.edge_u, self.edge_v))
        return o + np.multiply.outer(s, eu) + np.multiply.outer(t, ev)

    def solid_rects(self) -> list[tuple[float, float, float, float]]:
        """The quad minus its hole as axis-aligned rectangles in local coords."""
        if self.hole is None:
            return [(0.0, 1.0, 0.0, 1.0)]
        s0, s1, t0, t1 = self.hole
        rects = [(0.0, 1.0, 0.0, t0), (0.0, 1.0, t1, 1.0), (0.0, s0, t0, t1), (s1, 1.0, t0, t1)]
        return [r for r in rects if r[1] > r[0] and r[3] > r[2]]

    def to_dict(self) -> dict:
        return {
            "origin": list(self.origin),
            "edge_u": list(self.edge_u),
            "edge_v": list(self.edge_v),
            "texture": self.texture.to_dict(),
            "hole": list(self.hole) if self.hole is not None else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> TexturedQuad:
        return cls(
            origin=tuple(d["origin"]),
            edge_u=tuple(d["edge_u"]),
            edge_v=tuple(d["edge_v"]),
            texture=Texture(**d["texture"]),
            hole=tuple(d["hole"]) if d.get("hole") is not None else None,
        )


class _NoiseLattice:
    def __init__(self, tex: Texture, extent_u: float, extent_v: float):
        rng = np.random.default_rng(tex.noise_seed)
        nu = int(np.ceil(extent_u / tex.noise_scale)) + 2
        nv = int(np.ceil(extent_v / tex.noise_scale)) + 2
        self.values = rng.random((nu, nv))
        self.scale = tex.noise_scale

    def __call__(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        gu = np.clip(a / self.scale, 0.0, self.values.shape[0] - 1.000001)
        gv = np.clip(b / self.scale, 0.0, self.values.shape[1] - 1.000001)
        i = np.floor(gu).astype(int)
        j = np.floor(gv).astype(int)
        fu = gu - i
        fv = gv - j
        fu = fu * fu * (3 - 2 * fu)
        fv = fv * fv * (3 - 2 * fv)
        V = self.values
        top = V[i, j] * (1 - fv) + V[i, j + 1] * fv
        bot = V[i + 1, j] * (1 - fv) + V[i + 1, j + 1] * fv
        return top * (1 - fu) + bot * fu


@dataclass(frozen=True, eq=False)
class Scene:
    quads: tuple[TexturedQuad, ...]
    background: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "quads", tuple(self.quads))
        if not self.quads:
            raise ValueError("a scene needs at least one quad")
        if not 0.0 <= self.background <= 1.0:
            raise ValueError("background intensity must lie in [0, 1]")
        lattices = []
        for q in self.quads:
            lattices.append(_NoiseLattice(q.texture, np.linalg.norm(q.edge_u), np.linalg.norm(q.edge_v)))
        object.__setattr__(self, "_lattices", tuple(lattices))
        # precomputed per-quad geometry for the ray caster
        geo = []
        for q in self.quads:
            eu = np.asarray(q.edge_u)
            ev = np.asarray(q.edge_v)
            G = np.array([[eu @ eu, eu @ ev], [eu @ ev, ev @ ev]])
            geo.append((np.asarray(q.origin), eu, ev, np.cross(eu, ev), np.linalg.inv(G)))
        object.__setattr__(self, "_geometry", tuple(geo))

    def shade(self, k: int, s: np.ndarray, t: np.ndarray) -> np.ndarray:
        q = self.quads[k]
        tex = q.texture
        a = s * np.linalg.norm(q.edge_u)
        b = t * np.linalg.norm(q.edge_v)
        checker = (np.floor(a / tex.checker_period) + np.floor(b / tex.checker_period)) % 2
        noise = self._lattices[k](a, b)
        val = tex.base + tex.contrast * (checker - 0.5) + tex.noise_amplitude * (noise - 0.5)
        return np.clip(val, 0.0, 1.0)

    def to_dict(self) -> dict:
        return {"background": self.background, "quads": [q.to_dict() for q in self.quads]}

    @classmethod
    def from_dict(cls, d: dict) -> Scene:
        return cls(tuple(TexturedQuad.from_dict(q) for q in d["quads"]), float(d["background"]))


@dataclass(frozen=True)
class CollisionBody:
    """Vertical cylinder centred on the camera position."""

    radius: float = 0.15
    height: float = 0.1

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("radius must be positive")
        if not self.height >= 0:
            raise ValueError("height must be non-negative")


@dataclass
class RayHits:
    depth: np.ndarray  # ray parameter == camera-frame z, inf on miss
    quad: np.ndarray  # quad index, -1 on miss
    s: np.ndarray
    t: np.ndarray

    @property
    def hit(self) -> np.ndarray:
        return self.quad >= 0


def cast_rays(scene: Scene, camera: Pose, x: np.ndarray, y: np.ndarray) -> RayHits:
    """Intersect camera rays through normalized coordinates (x, y) with the scene.

    Ray directions are ``R @ [x, y, 1]`` so the ray parameter at a hit is the
    camera-frame depth of the hit point.
    """
    shape = np.shape(x)
    dirs_cam = np.stack([x, y, np.ones(shape)], axis=-1).reshape(-1, 3)
    dirs = dirs_cam @ camera.R.T
    o = camera.translation
    n_rays = dirs.shape[0]
    best = np.full(n_rays, np.inf)
    quad = np.full(n_rays, -1, dtype=int)
    s_best = np.zeros(n_rays)
    t_best = np.zeros(n_rays)
    for k, (origin, eu, ev, nrm, Ginv) in enumerate(scene._geometry):
        denom = dirs @ nrm
        with np.errstate(divide="ignore", invalid="ignore"):
            lam = ((origin - o) @ nrm) / denom
        ok = np.isfinite(lam) & (lam > _NEAR) & (lam < best)
        if not ok.any():
            continue
        idx = np.nonzero(ok)[0]
        rel = o + lam[idx, None] * dirs[idx] - origin
        st = np.stack([rel @ eu, rel @ ev], axis=1) @ Ginv.T
        s, t = st[:, 0], st[:, 1]
        inside = (s >= 0) & (s <= 1) & (t >= 0) & (t <= 1)
        hole = scene.quads[k].hole
        if hole is not None:
            s0, s1, t0, t1 = hole
            inside &= ~((s > s0) & (s < s1) & (t > t0) & (t < t1))
        idx = idx[inside]
        best[idx] = lam[idx]
        quad[idx] = k
        s_best[idx] = s[inside]
        t_best[idx] = t[inside]
    return RayHits(best.reshape(shape), quad.reshape(shape), s_best.reshape(shape), t_best.reshape(shape))


def shade_hits(scene: Scene, hits: RayHits) -> np.ndarray:
    out = np.full(hits.quad.shape, float(scene.background))
    for k in range(len(scene.quads)):
        m = hits.quad == k
        if m.any():
            out[m] = scene.shade(k, hits.s[m], hits.t[m])
    return out


def render(scene: Scene, camera: Pose, intr: Intrinsics) -> tuple[ImageBuffer, DepthMap]:
    """Nearest-sample render; intensities quantized to 8-bit levels."""
    x, y = intr.normalized_grid()
    hits = cast_rays(scene, camera, x, y)
    img = np.rint(shade_hits(scene, hits) * 255.0) / 255.0
    return ImageBuffer(img, intr), DepthMap(hits.depth, hits.hit)


def ground_truth_flow(scene: Scene, cam_a: Pose, cam_b: Pose, intr: Intrinsics) -> FlowField:
    x, y = intr.normalized_grid()
    hits = cast_rays(scene, cam_a, x, y)
    valid = hits.hit.copy()
    pts_a = np.stack([x * hits.depth, y * hits.depth, hits.depth], axis=-1)
    pts_a[~valid] = 0.0
    world = cam_a.transform_points(pts_a)
    pb = cam_b.inverse_transform_points(world)
    zb = pb[..., 2]
    valid &= zb > _NEAR
    with np.errstate(divide="ignore", invalid="ignore"):
        xb = np.where(valid, pb[..., 0] / zb, 0.0)
        yb = np.where(valid, pb[..., 1] / zb, 0.0)
    ub, vb = intr.to_pixel(xb, yb)
    valid &= (ub >= -0.5) & (ub < intr.width - 0.5) & (vb >= -0.5) & (vb < intr.height - 0.5)
    # occlusion: the first surface along cam_b's ray must be the same point
    back = cast_rays(scene, cam_b, xb, yb)
    valid &= np.abs(back.depth - zb) <= OCCLUSION_TOLERANCE
    u, v = intr.pixel_grid()
    vec = np.stack([ub - u, vb - v], axis=-1)
    return FlowField(np.where(valid[..., None], vec, 0.0), valid)


def _clip_polygon(poly: list[np.ndarray], axis: int, bound: float, keep_above: bool) -> list[np.ndarray]:
    out: list[np.ndarray] = []
    if not poly:
        return out

    def inside(p):
        return p[axis] >= bound if keep_above else p[axis] <= bound

    prev = poly[-1]
    for cur in poly:
        if inside(cur):
            if not inside(prev):
                out.append(_edge_cross(prev, cur, axis, bound))
            out.append(cur)
        elif inside(prev):
            out.append(_edge_cross(prev, cur, axis, bound))
        prev = cur
    return out


def _edge_cross(p, q, axis, bound):
    u = (bound - p[axis]) / (q[axis] - p[axis])
    return p + u * (q - p)


def _horizontal_clearance(quad: TexturedQuad, body: CollisionBody, center: np.ndarray) -> float:
    lo = center[1] - 0.5 * body.height
    hi = center[1] + 0.5 * body.height
    best = np.inf
    for s0, s1, t0, t1 in quad.solid_rects():
        corners = [quad.point(s, t) for s, t in ((s0, t0), (s1, t0), (s1, t1), (s0, t1))]
        poly = _clip_polygon(corners, 1, lo, keep_above=True)
        poly = _clip_polygon(poly, 1, hi, keep_above=False)
        if not poly:
            continue
        hull = MultiPoint([(p[0], p[2]) for p in poly]).convex_hull
        best = min(best, hull.distance(Point(center[0], center[2])))
    return best


def check_collision(scene: Scene, body: CollisionBody, camera: Pose) -> bool:
    """True iff the body cylinder overlaps any solid part of any quad."""
    c = camera.translation
    return any(_horizontal_clearance(q, body, c) < body.radius for q in scene.quads)
