"""Synthetic indoor corridor world with three cameras and a front LiDAR.

The corridor is a centerline made of straight runs and circular arcs with
walls at +-width/2. Sensors are rendered by 2-D raycasting against the
wall polylines (and optional cylindrical pillars); walls have finite height
so the 16 LiDAR elevation rows and the camera rows see real structure.

Conventions: heading is counter-clockwise from +x, so a left turn raises the
heading. Steering output is -1 (full left) .. +1 (full right). LiDAR column
0 and camera x1 look left; column 449 and camera x3 look right.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np


class WorldError(RuntimeError):
    pass


class OffCorridorError(WorldError):
    pass


# -- world description --------------------------------------------------------

@dataclass(frozen=True)
class WorldSpec:
    width_m: float = 2.0
    # ("straight", length) | ("left" | "right", radius, angle_deg)
    segments: tuple = (("straight", 20.0),)
    reflectivity_pattern: str = "stripes:0.6"
    left_rgb: tuple = (0.85, 0.35, 0.25)
    right_rgb: tuple = (0.25, 0.45, 0.85)
    left_reflectivity: float = 0.75
    right_reflectivity: float = 0.35
    # (arc length s, lateral offset d (+left), radius)
    obstacles: tuple = ()
    seed: int = 0

    def mirrored(self):
        flip = {"left": "right", "right": "left"}
        segs = tuple((flip.get(s[0], s[0]),) + tuple(s[1:]) for s in self.segments)
        return replace(self, segments=segs, left_rgb=self.right_rgb, right_rgb=self.left_rgb,
                       left_reflectivity=self.right_reflectivity,
                       right_reflectivity=self.left_reflectivity,
                       obstacles=tuple((s, -d, r) for s, d, r in self.obstacles))

    # key = value text format
    def to_text(self):
        segs = ", ".join(":".join(_fmt(v) for v in s) for s in self.segments)
        lines = [
            f"width_m = {_fmt(self.width_m)}",
            f"segments = {segs}",
            f"reflectivity_pattern = {self.reflectivity_pattern}",
            f"left_rgb = {','.join(_fmt(v) for v in self.left_rgb)}",
            f"right_rgb = {','.join(_fmt(v) for v in self.right_rgb)}",
            f"left_reflectivity = {_fmt(self.left_reflectivity)}",
            f"right_reflectivity = {_fmt(self.right_reflectivity)}",
            f"seed = {self.seed}",
        ]
        if self.obstacles:
            lines.append("obstacles = " + ", ".join(":".join(_fmt(v) for v in o) for o in self.obstacles))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        kv = {}
        for raw in text.splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"world spec: expected 'key = value', got {raw!r}")
            k, v = (p.strip() for p in line.split("=", 1))
            kv[k] = v
        known = {"width_m", "segments", "reflectivity_pattern", "left_rgb", "right_rgb",
                 "left_reflectivity", "right_reflectivity", "seed", "obstacles",
                 "random_segments", "turn_radii", "left_fraction"}
        unknown = set(kv) - known
        if unknown:
            raise ValueError(f"world spec: unknown keys {sorted(unknown)}")
        seed = int(kv.get("seed", 0))
        width = float(kv.get("width_m", 2.0))
        if "segments" in kv:
            segs = tuple(_parse_segment(s) for s in kv["segments"].split(",") if s.strip())
        elif "random_segments" in kv:
            radii = tuple(float(r) for r in kv.get("turn_radii", "1.6,2.5,4").split(","))
            segs = random_segments(int(kv["random_segments"]), seed, radii,
                                   float(kv.get("left_fraction", 0.5)))
        else:
            segs = (("straight", 20.0),)
        spec = cls(width_m=width, segments=segs, seed=seed)
        if "reflectivity_pattern" in kv:
            spec = replace(spec, reflectivity_pattern=kv["reflectivity_pattern"])
        for key in ("left_rgb", "right_rgb"):
            if key in kv:
                spec = replace(spec, **{key: tuple(float(v) for v in kv[key].split(","))})
        for key in ("left_reflectivity", "right_reflectivity"):
            if key in kv:
                spec = replace(spec, **{key: float(kv[key])})
        if kv.get("obstacles"):
            obs = tuple(tuple(float(v) for v in o.split(":")) for o in kv["obstacles"].split(","))
            spec = replace(spec, obstacles=obs)
        return spec


def _fmt(v):
    return repr(v) if isinstance(v, float) else str(v)


def _parse_segment(token):
    parts = [p.strip() for p in token.strip().split(":")]
    kind = parts[0]
    if kind == "straight" and len(parts) == 2:
        return ("straight", float(parts[1]))
    if kind in ("left", "right") and len(parts) == 3:
        return (kind, float(parts[1]), float(parts[2]))
    raise ValueError(f"bad segment {token!r}")


def random_segments(n_turns, seed, radii=(1.6, 2.5, 4.0), left_fraction=0.5,
                    straight_range=(3.0, 7.0), angle_choices=(45.0, 60.0, 90.0)):
    """Alternate straights and arcs; the overall heading stays within +-135 deg.

    ``left_fraction`` is the share of turning arc length that bends left.
    """
    rng = np.random.default_rng(seed)
    segs = [("straight", float(rng.uniform(*straight_range)))]
    heading = 0.0
    for _ in range(n_turns):
        left = rng.random() < left_fraction
        angle = float(rng.choice(angle_choices))
        if left and heading + angle > 135:
            left = False
        elif not left and heading - angle < -135:
            left = True
        heading += angle if left else -angle
        segs.append(("left" if left else "right", float(rng.choice(radii)), angle))
        segs.append(("straight", float(rng.uniform(*straight_range))))
    return tuple(segs)


@dataclass(frozen=True)
class SensorRig:
    camera_yaws_deg: tuple = (60.0, 0.0, -60.0)  # x1 left, x2 center, x3 right
    camera_fov_deg: float = 60.0
    image_hw: tuple = (120, 192)
    camera_height: float = 0.3
    lidar_fov_deg: float = 180.0
    lidar_beams: int = 450
    lidar_rows: int = 16
    lidar_vfov_deg: float = 30.0
    lidar_height: float = 0.3
    max_range: float = 10.0
    wall_height: float = 1.0
    floor_reflectivity: float = 0.15
    obstacle_reflectivity: float = 0.9

    @property
    def azimuth_resolution_deg(self):
        return self.lidar_fov_deg / self.lidar_beams

    def lidar_azimuths(self):
        # column 0 is the leftmost beam
        res = self.azimuth_resolution_deg
        return np.deg2rad(self.lidar_fov_deg / 2 - (np.arange(self.lidar_beams) + 0.5) * res)

    def lidar_pitches(self):
        half = self.lidar_vfov_deg / 2
        return np.deg2rad(np.linspace(half, -half, self.lidar_rows))

    def camera_focal(self):
        return (self.image_hw[1] / 2) / math.tan(math.radians(self.camera_fov_deg / 2))

    def camera_column_angles(self):
        w = self.image_hw[1]
        return np.arctan((w / 2 - (np.arange(w) + 0.5)) / self.camera_focal())


PAPER_RIG = SensorRig()
TINY_RIG = SensorRig(image_hw=(60, 96), lidar_beams=226, lidar_rows=8)


@dataclass(frozen=True)
class Pose:
    x: float
    y: float
    heading: float

    def __post_init__(self):
        object.__setattr__(self, "heading", wrap_angle(self.heading))


def wrap_angle(a):
    """Wrap to (-pi, pi]."""
    a = math.fmod(a + math.pi, 2 * math.pi)
    if a <= 0:
        a += 2 * math.pi
    return a - math.pi


# -- geometry -------------------------------------------------------------------

SURF_NONE, SURF_LEFT, SURF_RIGHT, SURF_OBSTACLE = 0, 1, 2, 3


@dataclass
class World:
    spec: WorldSpec
    ds: float = 0.1
    center: np.ndarray = field(init=False)
    heading: np.ndarray = field(init=False)
    s: np.ndarray = field(init=False)
    kind: np.ndarray = field(init=False)  # -1 right arc, 0 straight, +1 left arc

    def __post_init__(self):
        spec = self.spec
        if spec.width_m <= 0.4:
            raise WorldError("corridor must be wider than the vehicle (0.4 m)")
        pts = [(0.0, 0.0)]
        heads = [0.0]
        kinds = [0]
        x, y, th = 0.0, 0.0, 0.0
        for seg in spec.segments:
            if seg[0] == "straight":
                n = max(1, int(round(seg[1] / self.ds)))
                step = seg[1] / n
                for _ in range(n):
                    x += step * math.cos(th)
                    y += step * math.sin(th)
                    pts.append((x, y))
                    heads.append(th)
                    kinds.append(0)
            else:
                radius, ang = float(seg[1]), math.radians(seg[2])
                if radius <= spec.width_m / 2 + 0.2:
                    raise WorldError(f"turn radius {radius} too tight for width {spec.width_m}")
                sign = 1.0 if seg[0] == "left" else -1.0
                n = max(2, int(round(radius * ang / self.ds)))
                dth = sign * ang / n
                chord = 2 * radius * math.sin(ang / n / 2)
                for _ in range(n):
                    mid = th + dth / 2
                    x += chord * math.cos(mid)
                    y += chord * math.sin(mid)
                    th += dth
                    pts.append((x, y))
                    heads.append(th)
                    kinds.append(int(sign))
        self.center = np.array(pts)
        self.heading = np.array(heads)
        self.kind = np.array(kinds)
        d = np.linalg.norm(np.diff(self.center, axis=0), axis=1)
        self.s = np.concatenate([[0.0], np.cumsum(d)])
        n = np.stack([-np.sin(self.heading), np.cos(self.heading)], axis=1)
        half = spec.width_m / 2
        left = self.center + half * n
        right = self.center - half * n
        # wall segments: A, B, surface id, texture coordinate at A
        self.seg_a = np.concatenate([left[:-1], right[:-1]])
        self.seg_b = np.concatenate([left[1:], right[1:]])
        self.seg_surf = np.concatenate([np.full(len(left) - 1, SURF_LEFT), np.full(len(right) - 1, SURF_RIGHT)])
        self.seg_s0 = np.concatenate([self.s[:-1], self.s[:-1]])
        self.seg_ds = np.concatenate([np.diff(self.s), np.diff(self.s)])
        self.seg_mid = 0.5 * (self.seg_a + self.seg_b)
        obs = []
        for s_obs, d_obs, r_obs in spec.obstacles:
            p, h = self.point_at(s_obs)
            obs.append((p[0] - d_obs * math.sin(h), p[1] + d_obs * math.cos(h), r_obs))
        self.obstacles = np.array(obs).reshape(-1, 3)
        self.pattern_period = _parse_pattern(spec.reflectivity_pattern)

    @property
    def length(self):
        return float(self.s[-1])

    def point_at(self, s):
        s = float(np.clip(s, 0.0, self.length))
        i = int(np.searchsorted(self.s, s, side="right") - 1)
        i = min(i, len(self.s) - 2)
        t = (s - self.s[i]) / max(self.s[i + 1] - self.s[i], 1e-12)
        p = self.center[i] + t * (self.center[i + 1] - self.center[i])
        return p, float(self.heading[i + 1] if t > 0.5 else self.heading[i])

    def nearest(self, x, y):
        """(index, arc length, signed lateral offset +left) of the closest centerline point."""
        d2 = (self.center[:, 0] - x) ** 2 + (self.center[:, 1] - y) ** 2
        i = int(np.argmin(d2))
        h = self.heading[i]
        dx, dy = x - self.center[i, 0], y - self.center[i, 1]
        lateral = -math.sin(h) * dx + math.cos(h) * dy
        along = math.cos(h) * dx + math.sin(h) * dy
        return i, float(self.s[i] + along), float(lateral)

    def check_inside(self, pose):
        i, s, lat = self.nearest(pose.x, pose.y)
        if abs(lat) > self.spec.width_m / 2 or s < -0.5 or s > self.length + 0.5:
            raise OffCorridorError(f"pose ({pose.x:.2f}, {pose.y:.2f}) is outside the corridor")
        return i, s, lat

    def surface_reflectivity(self, surf, tex):
        base = np.where(surf == SURF_LEFT, self.spec.left_reflectivity, self.spec.right_reflectivity)
        return base * self.stripe(tex)

    def stripe(self, tex):
        # square wave: bright / dark bands along the wall
        phase = np.floor(tex / (self.pattern_period / 2)).astype(np.int64) % 2
        return np.where(phase == 0, 1.0, 0.55)


def _parse_pattern(p):
    kind, _, val = p.partition(":")
    if kind != "stripes":
        raise ValueError(f"unsupported reflectivity pattern {p!r}")
    period = float(val or 0.6)
    if period <= 0:
        raise ValueError("stripe period must be positive")
    return period


def raycast(world, ox, oy, angles, max_range):
    """Cast horizontal rays from (ox, oy) at absolute ``angles``.

    Returns (distance, surface id, texture coordinate); misses give
    distance = max_range and surface SURF_NONE.
    """
    angles = np.asarray(angles, dtype=np.float64)
    dx, dy = np.cos(angles), np.sin(angles)
    dist = np.full(angles.shape, np.inf)
    surf = np.zeros(angles.shape, dtype=np.int64)
    tex = np.zeros(angles.shape)

    near = np.hypot(world.seg_mid[:, 0] - ox, world.seg_mid[:, 1] - oy) < max_range + world.ds
    if near.any():
        a, b = world.seg_a[near], world.seg_b[near]
        ex, ey = b[:, 0] - a[:, 0], b[:, 1] - a[:, 1]
        ax, ay = a[:, 0] - ox, a[:, 1] - oy
        denom = dx[:, None] * ey[None, :] - dy[:, None] * ex[None, :]
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (ax[None, :] * ey[None, :] - ay[None, :] * ex[None, :]) / denom
            u = (ax[None, :] * dy[:, None] - ay[None, :] * dx[:, None]) / denom
        ok = (np.abs(denom) > 1e-12) & (t > 1e-9) & (u >= 0) & (u <= 1)
        t = np.where(ok, t, np.inf)
        k = np.argmin(t, axis=1)
        tk = t[np.arange(len(angles)), k]
        hit = np.isfinite(tk)
        idx = np.flatnonzero(near)[k]
        dist = np.where(hit, tk, dist)
        surf = np.where(hit, world.seg_surf[idx], surf)
        uk = u[np.arange(len(angles)), k]
        tex = np.where(hit, world.seg_s0[idx] + uk * world.seg_ds[idx], tex)

    for cx, cy, r in world.obstacles:
        fx, fy = cx - ox, cy - oy
        bproj = fx * dx + fy * dy
        c = fx * fx + fy * fy - r * r
        disc = bproj * bproj - c
        with np.errstate(invalid="ignore"):
            t = np.where(disc >= 0, bproj - np.sqrt(np.maximum(disc, 0)), np.inf)
        t = np.where(t > 1e-9, t, np.inf)
        closer = t < dist
        dist = np.where(closer, t, dist)
        surf = np.where(closer, SURF_OBSTACLE, surf)
        tex = np.where(closer, 0.0, tex)

    miss = ~np.isfinite(dist) | (dist >= max_range)
    dist = np.where(miss, max_range, dist)
    surf = np.where(miss, SURF_NONE, surf)
    return dist, surf, tex


# -- sensors --------------------------------------------------------------------

def raycast_lidar(world, pose, rig=PAPER_RIG):
    """(2, rows, beams) depth map: normalised range and reflectivity."""
    world.check_inside(pose)
    az = rig.lidar_azimuths()
    d_h, surf, tex = raycast(world, pose.x, pose.y, pose.heading + az, rig.max_range)
    pitch = rig.lidar_pitches()[:, None]
    tanp, cosp = np.tan(pitch), np.cos(pitch)
    hit = surf[None, :] != SURF_NONE
    z = rig.lidar_height + d_h[None, :] * tanp
    wall_ok = hit & (z >= 0) & (z <= rig.wall_height)
    with np.errstate(divide="ignore"):
        d_floor = np.where(tanp < 0, rig.lidar_height / -tanp, np.inf) * np.ones_like(d_h)[None, :]
    floor_first = d_floor < np.where(wall_ok, d_h[None, :], np.inf)
    floor_ok = floor_first & (d_floor < rig.max_range)

    refl_wall = np.where(surf == SURF_OBSTACLE, rig.obstacle_reflectivity,
                         world.surface_reflectivity(surf, tex))
    rng_3d = np.full(floor_ok.shape, rig.max_range)
    refl = np.zeros(floor_ok.shape)
    use_wall = wall_ok & ~floor_first
    rng_3d = np.where(use_wall, d_h[None, :] / cosp, rng_3d)
    refl = np.where(use_wall, refl_wall[None, :], refl)
    rng_3d = np.where(floor_ok, d_floor / cosp, rng_3d)
    refl = np.where(floor_ok, rig.floor_reflectivity, refl)
    depth = np.clip(rng_3d / rig.max_range, 0.0, 1.0)
    return np.stack([depth, refl]).astype(np.float32)


SKY_RGB = np.array([0.62, 0.64, 0.68])
FLOOR_RGB = np.array([0.45, 0.42, 0.38])
OBSTACLE_RGB = np.array([0.7, 0.7, 0.7])


def attenuation(d):
    return 1.0 / (1.0 + 0.25 * d)


def background_image(rig=PAPER_RIG):
    h, w = rig.image_hw
    f = rig.camera_focal()
    rows = np.arange(h) + 0.5
    below = rows > h / 2
    with np.errstate(divide="ignore"):
        zf = np.where(below, f * rig.camera_height / (rows - h / 2), np.inf)
    floor = FLOOR_RGB[:, None] * attenuation(np.minimum(zf, rig.max_range))[None, :]
    col = np.where(below[None, :], floor, SKY_RGB[:, None])
    return np.repeat(col[:, :, None], w, axis=2)


def render_camera(world, pose, index, rig=PAPER_RIG):
    """(3, H, W) flat-shaded image in [0, 1] for camera ``index`` (0, 1, 2)."""
    world.check_inside(pose)
    h, w = rig.image_hw
    f = rig.camera_focal()
    yaw = math.radians(rig.camera_yaws_deg[index])
    rel = rig.camera_column_angles()
    d, surf, tex = raycast(world, pose.x, pose.y, pose.heading + yaw + rel, rig.max_range)
    z = d * np.cos(rel)
    top = h / 2 - f * (rig.wall_height - rig.camera_height) / z
    bot = h / 2 + f * rig.camera_height / z
    rows = (np.arange(h) + 0.5)[:, None]
    is_obs = surf == SURF_OBSTACLE
    on_wall = (surf != SURF_NONE)[None, :] & (rows >= top[None, :]) & (rows < bot[None, :])
    base = np.where((surf == SURF_LEFT)[:, None], np.array(world.spec.left_rgb)[None, :],
                    np.array(world.spec.right_rgb)[None, :])
    shade = world.stripe(tex) * attenuation(d)
    wall_rgb = base * shade[:, None]
    wall_rgb = np.where(is_obs[:, None], OBSTACLE_RGB[None, :] * attenuation(d)[:, None], wall_rgb)
    img = background_image(rig)
    img = np.where(on_wall[None, :, :], wall_rgb.T[:, None, :], img)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


# -- driving --------------------------------------------------------------------

@dataclass(frozen=True)
class Vehicle:
    wheelbase: float = 0.5
    max_steer_deg: float = 25.0
    lookahead: float = 1.5
    deadband: float = 0.03


def expert_steer(world, pose, vehicle=Vehicle()):
    """Pure pursuit toward the centerline point ``lookahead`` metres ahead.

    Returns the normalised command in [-1, 1], +1 = full right.
    """
    i, s, _ = world.check_inside(pose)
    target_s = s + vehicle.lookahead
    if target_s > world.length:
        raise WorldError("no centerline point within lookahead")
    p, _ = world.point_at(target_s)
    dx, dy = p[0] - pose.x, p[1] - pose.y
    c, sn = math.cos(pose.heading), math.sin(pose.heading)
    fx, fy = c * dx + sn * dy, -sn * dx + c * dy
    alpha = math.atan2(fy, fx)
    ld = math.hypot(fx, fy)
    kappa = 2.0 * math.sin(alpha) / max(ld, 1e-6)
    delta = math.atan(vehicle.wheelbase * kappa)
    y = -delta / math.radians(vehicle.max_steer_deg)
    if abs(y) < vehicle.deadband:
        return 0.0
    return float(np.clip(y, -1.0, 1.0))


def drive(pose, command, distance, vehicle=Vehicle(), substeps=4):
    """Kinematic bicycle update for ``distance`` metres at a fixed command."""
    delta = -float(np.clip(command, -1, 1)) * math.radians(vehicle.max_steer_deg)
    x, y, th = pose.x, pose.y, pose.heading
    step = distance / substeps
    for _ in range(substeps):
        x += step * math.cos(th)
        y += step * math.sin(th)
        th += step * math.tan(delta) / vehicle.wheelbase
    return Pose(x, y, th)


def steering_bin(y):
    """Index 0..6 of the seven steering categories."""
    y = float(y)
    if y == 0.0:
        return 3
    if y < 0:
        if y < -0.67:
            return 0
        if y < -0.33:
            return 1
        return 2
    if y <= 0.33:
        return 4
    if y <= 0.67:
        return 5
    return 6


def steering_bins(ys):
    return np.array([steering_bin(v) for v in np.asarray(ys).ravel()], dtype=np.int64)


@dataclass(frozen=True)
class GenConfig:
    frames: int = 100
    seed: int = 0
    rate_hz: float = 5.0
    speed: float = 1.0  # m/s while recording
    steer_noise: float = 0.25  # OU perturbation std on the applied command
    noise_tau: float = 1.0  # seconds
    camera_noise: float = 0.03
    exposure_jitter: float = 0.15
    start_margin: float = 0.5


def render_frame(world, pose, rig=PAPER_RIG):
    cams = [render_camera(world, pose, k, rig) for k in range(3)]
    return cams, raycast_lidar(world, pose, rig)


def simulate(world, cfg: GenConfig, rig=PAPER_RIG, vehicle=Vehicle(), on_frame=None):
    """Drive the expert (plus OU command noise) and record ``cfg.frames`` frames.

    ``on_frame(index, x1, x2, x3, x4, y, info)`` receives every frame in order.
    Returns per-frame bookkeeping (pose, arc length, turn kind, bin).
    """
    rng = np.random.default_rng(cfg.seed)
    step = cfg.speed / cfg.rate_hz
    end_s = world.length - vehicle.lookahead - 0.5
    if end_s <= cfg.start_margin + step:
        raise WorldError("world too short to record any frame")
    log = []
    pose = None
    noise = 0.0
    decay = math.exp(-1.0 / (cfg.rate_hz * cfg.noise_tau))
    idx = 0
    while idx < cfg.frames:
        if pose is None:
            s0 = float(rng.uniform(cfg.start_margin, min(cfg.start_margin + 2.0, end_s - step)))
            p, h = world.point_at(s0)
            pose = Pose(float(p[0]), float(p[1]), h)
            noise = 0.0
        try:
            i, s, lat = world.check_inside(pose)
        except OffCorridorError as exc:
            raise OffCorridorError(f"{exc}; trajectory tail: {log[-5:]}") from None
        if s >= end_s:
            pose = None
            continue
        y = expert_steer(world, pose, vehicle)
        cams, lidar = render_frame(world, pose, rig)
        if cfg.camera_noise or cfg.exposure_jitter:
            gain = 1.0 + cfg.exposure_jitter * (2 * rng.random() - 1)
            cams = [np.clip(c * gain + rng.normal(0, cfg.camera_noise, c.shape), 0, 1).astype(np.float32)
                    for c in cams]
        info = dict(x=pose.x, y=pose.y, heading=pose.heading, s=s, lateral=lat,
                    kind=int(world.kind[i]), steer=y)
        log.append(info)
        if on_frame is not None:
            on_frame(idx, cams[0], cams[1], cams[2], lidar, y, info)
        idx += 1
        noise = decay * noise + math.sqrt(1 - decay ** 2) * cfg.steer_noise * rng.normal()
        if abs(lat) > 0.3 * world.spec.width_m:
            noise = 0.0  # let the expert recover before perturbing again
        pose = drive(pose, float(np.clip(y + noise, -1, 1)), step, vehicle)
    return log
