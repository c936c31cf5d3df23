"""Sub-goal generation: the keyframe oracle and the remote sub-goal protocol.

A foresight model maps (current image, task prompt, optional auxiliary view)
to the next image the servo loop should reach. :class:`KeyframeOracle` does
this from a scenario's reference trajectory; :class:`RemoteForesight` asks an
HTTP server speaking the JSON protocol below, and :func:`serve_oracle` runs
such a server in-process.

Wire protocol::

    POST /subgoal
    {"current": <base64 PNG>, "prompt": <str>, "aux": <base64 PNG> | null}
    -> 200 {"subgoal": <base64 PNG>}

Any non-200 reply is a transport error.
"""

from __future__ import annotations

import base64
import json
import math
import threading
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Sequence

import cv2
import numpy as np

from .flow import photometric_error
from .geometry import Pose, compose, interpolate_pose, quat_from_rotvec, weighted_pose_distance
from .images import ImageBuffer, Intrinsics
from .scenarios import Scenario
from .scene import render


class ForesightTransportError(RuntimeError):
    pass


@dataclass(frozen=True)
class GoalNoise:
    sigma_t: float = 0.0  # m, per axis
    sigma_r: float = 0.0  # rad, per axis of the rotation vector
    sigma_px: float = 0.0  # intensity std, 0-255 units

    def __post_init__(self):
        if min(self.sigma_t, self.sigma_r, self.sigma_px) < 0:
            raise ValueError("noise standard deviations must be >= 0")

    @property
    def off(self) -> bool:
        return self.sigma_t == 0 and self.sigma_r == 0 and self.sigma_px == 0


@dataclass(frozen=True)
class OracleConfig:
    n: int = 9
    goal_noise: GoalNoise = field(default_factory=GoalNoise)
    noise_seed: int = 0
    beta: float = 1.0  # m/rad, rotation weight when localizing on the trajectory

    def __post_init__(self):
        if self.n < 2:
            raise ValueError("n must be >= 2")

    def to_dict(self) -> dict:
        return {"n": self.n, "goal_noise": dict(self.goal_noise.__dict__), "noise_seed": self.noise_seed, "beta": self.beta}

    @classmethod
    def from_dict(cls, d: dict) -> OracleConfig:
        return cls(int(d.get("n", 9)), GoalNoise(**d.get("goal_noise", {})), int(d.get("noise_seed", 0)), float(d.get("beta", 1.0)))


@dataclass(frozen=True, eq=False)
class ForesightRequest:
    current: ImageBuffer
    prompt: str
    aux: ImageBuffer | None = None
    # privileged simulator state; never sent over the wire
    pose: Pose | None = None

    def __post_init__(self):
        if not self.prompt:
            raise ValueError("prompt must be non-empty")


def sample_keyframes(keyframes: Sequence[Pose], n: int) -> list[Pose]:
    """``n`` poses uniformly spaced in keyframe index along the trajectory."""
    if n < 2:
        raise ValueError("n must be >= 2")
    last = len(keyframes) - 1
    out = []
    for u in np.linspace(0.0, last, n):
        i = min(int(math.floor(u)), last - 1) if last > 0 else 0
        frac = u - i
        if frac <= 1e-12:
            out.append(keyframes[i])
        elif frac >= 1 - 1e-12:
            out.append(keyframes[i + 1])
        else:
            out.append(interpolate_pose(keyframes[i], keyframes[i + 1], frac))
    return out


def oracle_progress(current: Pose, trajectory: Sequence[Pose], beta: float = 1.0) -> int:
    """Index of the nearest keyframe; ties go to the larger index."""
    if not trajectory:
        raise ValueError("empty trajectory")
    dists = [weighted_pose_distance(current, k, beta) for k in trajectory]
    best = min(dists)
    return max(i for i, d in enumerate(dists) if d <= best + 1e-12)


def goal_converged(last_goal: ImageBuffer, new_goal: ImageBuffer, eps_p: float) -> bool:
    return photometric_error(last_goal, new_goal) < eps_p


class Foresight:
    """Interface: ``next_subgoal(request) -> ImageBuffer``."""

    def next_subgoal(self, req: ForesightRequest) -> ImageBuffer:
        raise NotImplementedError


class KeyframeOracle(Foresight):
    """Returns renders of the reference trajectory one keyframe ahead of the robot.

    With a pose in the request the oracle localizes by weighted pose distance;
    without one it localizes by the keyframe render photometrically closest to
    the current image. The auxiliary view is accepted and ignored.
    """

    def __init__(self, scenario: Scenario, cfg: OracleConfig | None = None):
        self.scenario = scenario
        self.cfg = cfg or OracleConfig()
        self.keyframes = sample_keyframes(scenario.keyframes, self.cfg.n)
        self._clean: dict[int, ImageBuffer] = {}
        self._goals: dict[int, tuple[ImageBuffer, Pose]] = {}

    @property
    def intrinsics(self) -> Intrinsics:
        return self.scenario.intrinsics

    def _render(self, pose: Pose) -> ImageBuffer:
        return render(self.scenario.scene, pose, self.intrinsics)[0]

    def keyframe_image(self, k: int) -> ImageBuffer:
        if k not in self._clean:
            self._clean[k] = self._render(self.keyframes[k])
        return self._clean[k]

    def goal(self, k: int) -> tuple[ImageBuffer, Pose]:
        """Possibly corrupted sub-goal for keyframe ``k``; deterministic per index."""
        if k in self._goals:
            return self._goals[k]
        noise = self.cfg.goal_noise
        pose = self.keyframes[k]
        if noise.off:
            result = (self.keyframe_image(k), pose)
        else:
            rng = np.random.default_rng([self.scenario.seed, self.cfg.noise_seed, k])
            jitter = Pose(quat_from_rotvec(rng.normal(0.0, noise.sigma_r, 3)), rng.normal(0.0, noise.sigma_t, 3))
            pose = compose(pose, jitter)
            img = self._render(pose).pixels
            if noise.sigma_px > 0:
                img = img + rng.normal(0.0, noise.sigma_px / 255.0, img.shape)
            img = np.rint(np.clip(img, 0.0, 1.0) * 255.0) / 255.0
            result = (ImageBuffer(img, self.intrinsics), pose)
        self._goals[k] = result
        return result

    def localize(self, req: ForesightRequest) -> int:
        if req.pose is not None:
            return oracle_progress(req.pose, self.keyframes, self.cfg.beta)
        errs = [photometric_error(req.current, self.keyframe_image(k)) for k in range(len(self.keyframes))]
        best = min(errs)
        return max(i for i, e in enumerate(errs) if e <= best)

    def next_index(self, req: ForesightRequest) -> int:
        return min(self.localize(req) + 1, len(self.keyframes) - 1)

    def propose(self, req: ForesightRequest) -> tuple[ImageBuffer, Pose, int]:
        """Sub-goal image, the pose it was rendered from, and its keyframe index."""
        k = self.next_index(req)
        img, pose = self.goal(k)
        return img, pose, k

    def next_subgoal(self, req: ForesightRequest) -> ImageBuffer:
        return self.propose(req)[0]


# --- wire format -------------------------------------------------------------


def encode_png(img: ImageBuffer) -> str:
    ok, buf = cv2.imencode(".png", img.to_uint8())
    if not ok:
        raise ValueError("PNG encoding failed")
    return base64.b64encode(buf.tobytes()).decode("ascii")


def decode_png(data: str, intr: Intrinsics) -> ImageBuffer:
    raw = np.frombuffer(base64.b64decode(data), dtype=np.uint8)
    arr = cv2.imdecode(raw, cv2.IMREAD_UNCHANGED)
    if arr is None:
        raise ValueError("invalid PNG payload")
    if arr.ndim == 3:
        arr = cv2.cvtColor(arr, cv2.COLOR_BGR2RGB)
    return ImageBuffer(arr.astype(np.float64) / 255.0, intr)


def request_to_json(req: ForesightRequest) -> dict:
    return {
        "current": encode_png(req.current),
        "prompt": req.prompt,
        "aux": encode_png(req.aux) if req.aux is not None else None,
    }


def request_from_json(body: dict, intr: Intrinsics, aux_intr: Intrinsics | None = None) -> ForesightRequest:
    if not isinstance(body.get("prompt"), str) or "current" not in body:
        raise ValueError("request needs 'current' and 'prompt'")
    aux = body.get("aux")
    return ForesightRequest(
        current=decode_png(body["current"], intr),
        prompt=body["prompt"],
        aux=decode_png(aux, aux_intr or intr) if aux is not None else None,
    )


class RemoteForesight(Foresight):
    """Synchronous client for a sub-goal server."""

    def __init__(self, url: str, intrinsics: Intrinsics, timeout: float = 30.0):
        self.url = url.rstrip("/") + "/subgoal"
        self.intrinsics = intrinsics
        self.timeout = timeout

    def next_subgoal(self, req: ForesightRequest) -> ImageBuffer:
        payload = json.dumps(request_to_json(req)).encode()
        http_req = urllib.request.Request(self.url, data=payload, headers={"Content-Type": "application/json"}, method="POST")
        try:
            with urllib.request.urlopen(http_req, timeout=self.timeout) as resp:
                if resp.status != 200:
                    raise ForesightTransportError(f"server replied {resp.status}")
                body = json.loads(resp.read())
        except urllib.error.HTTPError as exc:
            raise ForesightTransportError(f"server replied {exc.code}") from exc
        except (urllib.error.URLError, OSError) as exc:
            raise ForesightTransportError(str(exc)) from exc
        if "subgoal" not in body:
            raise ForesightTransportError("response lacks 'subgoal'")
        return decode_png(body["subgoal"], self.intrinsics)


def _handler_for(foresight: Foresight, intr: Intrinsics):
    class Handler(BaseHTTPRequestHandler):
        def do_POST(self):
            if self.path.rstrip("/") != "/subgoal":
                self._reply(404, {"error": "not found"})
                return
            try:
                length = int(self.headers.get("Content-Length", 0))
                req = request_from_json(json.loads(self.rfile.read(length)), intr)
            except (ValueError, KeyError, json.JSONDecodeError) as exc:
                self._reply(400, {"error": str(exc)})
                return
            self._reply(200, {"subgoal": encode_png(foresight.next_subgoal(req))})

        def _reply(self, code: int, body: dict):
            data = json.dumps(body).encode()
            self.send_response(code)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)

        def log_message(self, *args):
            pass

    return Handler


class ForesightServer:
    """Loopback HTTP server wrapping a foresight model; usable as a context manager."""

    def __init__(self, foresight: Foresight, intrinsics: Intrinsics, host: str = "127.0.0.1", port: int = 0):
        self._httpd = ThreadingHTTPServer((host, port), _handler_for(foresight, intrinsics))
        self._thread = threading.Thread(target=self._httpd.serve_forever, daemon=True)

    @property
    def url(self) -> str:
        host, port = self._httpd.server_address[:2]
        return f"http://{host}:{port}"

    def start(self) -> ForesightServer:
        self._thread.start()
        return self

    def stop(self) -> None:
        self._httpd.shutdown()
        self._httpd.server_close()

    def __enter__(self) -> ForesightServer:
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()


def serve_oracle(scenario: Scenario, cfg: OracleConfig | None = None, port: int = 0) -> ForesightServer:
    return ForesightServer(KeyframeOracle(scenario, cfg), scenario.intrinsics, port=port)
