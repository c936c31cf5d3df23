"""Seeded door-crossing and reaching scenarios, and their JSON form."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import Pose, interpolate_pose, look_rotation, quat_from_axis_angle, quat_multiply
from .images import Intrinsics
from .scene import Scene, TexturedQuad, Texture

DEFAULT_KEYFRAMES = 9
FLOOR_Y = 1.0  # world y of the floor; y points down, camera height ~1 m

DOOR_PROMPT = "fly through the door"
REACH_PROMPT = "reach the target patch"


@dataclass(frozen=True)
class Door:
    """Rectangular aperture in a wall plane, crossed along ``normal``."""

    center: tuple[float, float, float]
    normal: tuple[float, float, float]
    width: float
    height: float

    def signed_distance(self, p) -> float:
        return float(np.dot(np.asarray(p) - np.asarray(self.center), self.normal))

    def contains(self, p) -> bool:
        """Whether ``p`` (assumed on the door plane) lies inside the aperture."""
        d = np.asarray(p) - np.asarray(self.center)
        lateral = np.cross((0.0, 1.0, 0.0), self.normal)
        return abs(float(d @ lateral)) <= 0.5 * self.width and abs(d[1]) <= 0.5 * self.height


@dataclass(frozen=True, eq=False)
class Scenario:
    task: str  # "door" | "reach"
    seed: int
    scene: Scene
    start: Pose
    keyframes: tuple[Pose, ...]
    prompt: str
    intrinsics: Intrinsics = field(default_factory=Intrinsics.default)
    door: Door | None = None

    def __post_init__(self):
        object.__setattr__(self, "keyframes", tuple(self.keyframes))
        if len(self.keyframes) < 2:
            raise ValueError("a reference trajectory needs at least two keyframes")

    @property
    def goal(self) -> Pose:
        return self.keyframes[-1]

    def with_start(self, start: Pose) -> Scenario:
        return Scenario(self.task, self.seed, self.scene, start, self.keyframes, self.prompt, self.intrinsics, self.door)

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "seed": self.seed,
            "prompt": self.prompt,
            "intrinsics": self.intrinsics.to_dict(),
            "scene": self.scene.to_dict(),
            "start": self.start.to_tuple(),
            "keyframes": [k.to_tuple() for k in self.keyframes],
            "door": None
            if self.door is None
            else {
                "center": list(self.door.center),
                "normal": list(self.door.normal),
                "width": self.door.width,
                "height": self.door.height,
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> Scenario:
        door = d.get("door")
        return cls(
            task=d["task"],
            seed=int(d["seed"]),
            scene=Scene.from_dict(d["scene"]),
            start=Pose.from_tuple(d["start"]),
            keyframes=tuple(Pose.from_tuple(k) for k in d["keyframes"]),
            prompt=d["prompt"],
            intrinsics=Intrinsics.from_dict(d["intrinsics"]),
            door=None
            if door is None
            else Door(tuple(door["center"]), tuple(door["normal"]), float(door["width"]), float(door["height"])),
        )

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path) -> Scenario:
        return cls.from_dict(json.loads(Path(path).read_text()))


def _random_texture(rng: np.random.Generator) -> Texture:
    return Texture(
        checker_period=float(rng.uniform(0.35, 0.55)),
        base=float(rng.uniform(0.4, 0.6)),
        contrast=float(rng.uniform(0.2, 0.35)),
        noise_seed=int(rng.integers(0, 2**31 - 1)),
        noise_scale=float(rng.uniform(0.15, 0.25)),
        noise_amplitude=float(rng.uniform(0.25, 0.4)),
    )


def _polyline_samples(points: list[np.ndarray], count: int) -> tuple[np.ndarray, np.ndarray]:
    """Arc-length-uniform samples; returns positions and the segment index of each."""
    seg = np.array([np.linalg.norm(b - a) for a, b in zip(points[:-1], points[1:])])
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    pos, which = [], []
    for s in np.linspace(0.0, cum[-1], count):
        i = min(int(np.searchsorted(cum, s, side="right")) - 1, len(seg) - 1)
        u = (s - cum[i]) / seg[i] if seg[i] > 0 else 0.0
        pos.append(points[i] + u * (points[i + 1] - points[i]))
        which.append((i, u))
    return np.array(pos), np.array(which)


def make_door_scenario(seed: int, n_keyframes: int = DEFAULT_KEYFRAMES, intrinsics: Intrinsics | None = None) -> Scenario:
    rng = np.random.default_rng([seed, 0xD00])
    intr = intrinsics or Intrinsics.default()
    wall_z = float(rng.uniform(2.4, 3.2))
    back_z = wall_z + float(rng.uniform(2.0, 2.6))
    door_w, door_h = 1.0, 2.0
    lateral = float(rng.uniform(0.3, 0.9)) * (1 if rng.random() < 0.5 else -1)
    door_x = -lateral
    half = 3.0
    top = -1.6
    wall_h = FLOOR_Y - top
    hole = (
        (half - 0.5 * door_w) / (2 * half),
        (half + 0.5 * door_w) / (2 * half),
        (wall_h - door_h) / wall_h,
        1.0,
    )
    wall = TexturedQuad((door_x - half, top, wall_z), (2 * half, 0, 0), (0, wall_h, 0), _random_texture(rng), hole)
    back = TexturedQuad((door_x - half, top, back_z), (2 * half, 0, 0), (0, wall_h, 0), _random_texture(rng))
    floor = TexturedQuad((door_x - half, FLOOR_Y, -1.5), (2 * half, 0, 0), (0, 0, back_z + 1.5), _random_texture(rng))
    scene = Scene((wall, back, floor), background=0.0)
    door_center = (door_x, FLOOR_Y - 0.5 * door_h, wall_z)
    door = Door(door_center, (0.0, 0.0, 1.0), door_w, door_h)

    # start: offset from the door axis, heading off the door by 5-25 degrees
    start_pos = np.array([0.0, float(rng.uniform(-0.1, 0.1)), 0.0])
    to_door = np.asarray(door_center) - start_pos
    yaw_err = math.radians(float(rng.uniform(5.0, 25.0))) * (1 if rng.random() < 0.5 else -1)
    q_aim = look_rotation((to_door[0], 0.0, to_door[2]))
    q_err = quat_from_axis_angle((0, 1, 0), yaw_err)
    q_tilt = quat_multiply(
        quat_from_axis_angle((1, 0, 0), math.radians(float(rng.uniform(-4, 4)))),
        quat_from_axis_angle((0, 0, 1), math.radians(float(rng.uniform(-3, 3)))),
    )
    start = Pose(quat_multiply(quat_multiply(q_err, q_aim), q_tilt), start_pos)

    level = np.array([1.0, 0.0, 0.0, 0.0])
    approach = np.array([door_x, door_center[1], wall_z - 0.7])
    beyond = np.array([door_x, door_center[1], wall_z + 0.5])
    pos, which = _polyline_samples([start_pos, approach, beyond], n_keyframes)
    keys = []
    for p, (seg, u) in zip(pos, which):
        if seg == 0:
            q = interpolate_pose(start, Pose(level, p), u).rotation
        else:
            q = level
        keys.append(Pose(q, p))
    keys[0] = start
    return Scenario("door", seed, scene, start, tuple(keys), DOOR_PROMPT, intr, door)


def make_reach_scenario(seed: int, n_keyframes: int = DEFAULT_KEYFRAMES, intrinsics: Intrinsics | None = None) -> Scenario:
    rng = np.random.default_rng([seed, 0x2EAC])
    intr = intrinsics or Intrinsics.default()
    table_y = FLOOR_Y - 0.25
    table = TexturedQuad((-1.5, table_y, -0.5), (3.0, 0, 0), (0, 0, 3.0), _random_texture(rng))
    target_xz = np.array([float(rng.uniform(-0.3, 0.3)), float(rng.uniform(0.9, 1.4))])
    patch_tex = Texture(
        checker_period=0.06,
        base=float(rng.uniform(0.3, 0.7)),
        contrast=0.5,
        noise_seed=int(rng.integers(0, 2**31 - 1)),
        noise_scale=0.05,
        noise_amplitude=0.3,
    )
    patch = TexturedQuad(
        (target_xz[0] - 0.12, table_y - 0.005, target_xz[1] - 0.12), (0.24, 0, 0), (0, 0, 0.24), patch_tex
    )
    scene = Scene((patch, table), background=0.0)
    goal_pos = np.array([target_xz[0], table_y - 0.35, target_xz[1]])
    # looking straight down, image "down" along world +z
    goal_q = look_rotation((0.0, 1.0, 0.0), down_hint=(0.0, 0.0, 1.0))
    goal_q = quat_multiply(goal_q, quat_from_axis_angle((0, 0, 1), math.radians(float(rng.uniform(-20, 20)))))
    goal = Pose(goal_q, goal_pos)
    start_pos = goal_pos + np.array([float(rng.uniform(-0.3, 0.3)), float(rng.uniform(-0.3, -0.15)), float(rng.uniform(-0.6, -0.4))])
    look_at = np.array([target_xz[0], table_y, target_xz[1]]) + rng.normal(0.0, 0.05, 3) * np.array([1, 0, 1])
    start = Pose(look_rotation(look_at - start_pos, down_hint=(0.0, 0.0, 1.0)), start_pos)
    keys = [interpolate_pose(start, goal, u) for u in np.linspace(0.0, 1.0, n_keyframes)]
    keys[0], keys[-1] = start, goal
    return Scenario("reach", seed, scene, start, tuple(keys), REACH_PROMPT, intr, None)


def make_scenario(task: str, seed: int, **kw) -> Scenario:
    if task == "door":
        return make_door_scenario(seed, **kw)
    if task == "reach":
        return make_reach_scenario(seed, **kw)
    raise ValueError(f"unknown task {task!r}")
