"""Synthetic LIDAR tracklet generation.

Each scene has one labeled target box following a noisy constant-velocity
path, a few unlabeled distractor boxes, and static ground clutter. Box
points are sampled on sensor-visible faces with 1/r^2 density falloff plus
Gaussian sensor noise; everything is deterministic for a fixed seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..geom import Box3d, BoxSpec, PoseBev, box_frame_to_world, crop_points_in_box, wrap_angle

SENSOR_POS = np.array([0.0, 1.8, 0.0])


@dataclass(frozen=True)
class SceneConfig:
    n_tracklets: int = 8
    frames: int = 40
    w_range: tuple = (1.7, 2.1)
    l_range: tuple = (3.9, 4.7)
    h_range: tuple = (1.4, 1.7)
    speed_range: tuple = (0.15, 0.85)  # meters per frame
    turn_noise_deg: float = 2.5
    accel_noise: float = 0.05
    sensor_noise: float = 0.015
    base_density: float = 55.0  # points per square meter at 10 m
    min_target_points: int = 15
    n_distractors: int = 3
    clutter_density: float = 0.5  # points per square meter of ground
    clutter_radius: tuple = (3.0, 26.0)
    spawn_radius: tuple = (8.0, 18.0)
    max_radius: float = 26.0
    min_radius: float = 5.0
    seed: int = 0

    def __post_init__(self):
        for name in ("w_range", "l_range", "h_range", "speed_range", "spawn_radius"):
            lo, hi = getattr(self, name)
            if not (0 < lo <= hi):
                raise ValueError(f"{name} must be a positive (lo, hi) range")


# canonical-frame face definitions: (axis, sign); axis 0=x(l), 1=y(h), 2=z(w)
_FACES = ((0, 1.0), (0, -1.0), (2, 1.0), (2, -1.0), (1, 1.0))


def _face_geometry(spec: BoxSpec, axis: int, sign: float):
    half = {0: spec.l / 2.0, 1: spec.h / 2.0, 2: spec.w / 2.0}
    spans = [i for i in range(3) if i != axis]
    area = 4.0 * half[spans[0]] * half[spans[1]]
    return half, spans, area


def sample_box_points(
    box: Box3d,
    base_density: float,
    noise: float,
    rng: np.random.Generator,
    min_points: int = 0,
) -> np.ndarray:
    """Sample LIDAR-like returns on the box faces visible from the sensor."""
    spec = box.spec
    r = max(2.0, math.hypot(box.pose.x, box.pose.z))
    density = base_density * (10.0 / r) ** 2
    c, s = math.cos(box.pose.theta), math.sin(box.pose.theta)
    inset = min(0.05, 3.0 * noise) if noise > 0 else 0.0
    visible = []
    for axis, sign in _FACES:
        half, spans, area = _face_geometry(spec, axis, sign)
        normal_c = np.zeros(3)
        normal_c[axis] = sign
        # canonical -> world rotation acts on (x, z) only
        normal_w = np.array(
            [
                c * normal_c[0] - s * normal_c[2],
                normal_c[1],
                s * normal_c[0] + c * normal_c[2],
            ]
        )
        center_c = np.zeros(3)
        center_c[axis] = sign * half[axis]
        center_w = box_frame_to_world(center_c[None, :], box)[0]
        ray = center_w - SENSOR_POS
        if float(np.dot(normal_w, ray)) < 0.0:
            visible.append((axis, sign, half, spans, area))
    if not visible:
        return np.empty((0, 3))

    chunks = []
    total = 0
    for axis, sign, half, spans, area in visible:
        count = int(rng.poisson(density * area))
        if count > 0:
            chunks.append(_sample_face(box, axis, sign, half, spans, count, inset, rng))
            total += count
    if total < min_points:
        # top up on the largest visible face so near boxes are never empty
        axis, sign, half, spans, _ = max(visible, key=lambda f: f[4])
        chunks.append(
            _sample_face(box, axis, sign, half, spans, min_points - total, inset, rng)
        )
    pts = np.concatenate(chunks, axis=0) if chunks else np.empty((0, 3))
    if noise > 0 and pts.shape[0]:
        pts = pts + rng.normal(0.0, noise, size=pts.shape)
    return pts


def _sample_face(box, axis, sign, half, spans, count, inset, rng):
    local = np.zeros((count, 3))
    local[:, axis] = sign * (half[axis] - inset)
    for span_axis in spans:
        lim = max(half[span_axis] - inset, 1e-3)
        local[:, span_axis] = rng.uniform(-lim, lim, size=count)
    return box_frame_to_world(local, box)


def _steered_heading(pos: np.ndarray, heading: float, cfg: SceneConfig, rng) -> float:
    r = math.hypot(pos[0], pos[1])
    if r > cfg.max_radius - 1.5:
        return wrap_angle(math.atan2(-pos[1], -pos[0]) + rng.normal(0.0, 0.2))
    if r < cfg.min_radius + 1.0:
        return wrap_angle(math.atan2(pos[1], pos[0]) + rng.normal(0.0, 0.2))
    return heading


def _motion_path(cfg: SceneConfig, rng: np.random.Generator, start_xz=None) -> list:
    if start_xz is None:
        radius = rng.uniform(*cfg.spawn_radius)
        phi = rng.uniform(0.0, 2.0 * math.pi)
        pos = np.array([radius * math.cos(phi), radius * math.sin(phi)])
    else:
        pos = np.array(start_xz, dtype=float)
    heading = rng.uniform(-math.pi, math.pi)
    speed = rng.uniform(*cfg.speed_range)
    turn_sigma = math.radians(cfg.turn_noise_deg)
    poses = []
    for _ in range(cfg.frames):
        poses.append(PoseBev(float(pos[0]), float(pos[1]), heading))
        heading = _steered_heading(pos, heading, cfg, rng)
        heading = wrap_angle(heading + rng.normal(0.0, turn_sigma))
        speed = float(np.clip(speed + rng.normal(0.0, cfg.accel_noise), *cfg.speed_range))
        pos = pos + speed * np.array([math.cos(heading), math.sin(heading)])
    return poses


@dataclass
class SyntheticTracklet:
    tid: str
    label: str
    boxes: list  # Box3d per frame
    frames: list  # (n, 3) world points per frame, internal convention


def _random_spec(cfg: SceneConfig, rng) -> BoxSpec:
    return BoxSpec(
        w=float(rng.uniform(*cfg.w_range)),
        l=float(rng.uniform(*cfg.l_range)),
        h=float(rng.uniform(*cfg.h_range)),
    )


def generate_tracklet(cfg: SceneConfig, index: int) -> SyntheticTracklet:
    """Build one scene: target, distractors, clutter, all frames."""
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 101, index]))
    spec = _random_spec(cfg, rng)
    y_center = spec.h / 2.0
    target_poses = _motion_path(cfg, rng)
    boxes = [Box3d(p, spec, y_center) for p in target_poses]

    distractors = []
    for _ in range(cfg.n_distractors):
        d_spec = _random_spec(cfg, rng)
        offset_r = rng.uniform(4.0, 9.0)
        offset_a = rng.uniform(0.0, 2.0 * math.pi)
        start = (
            target_poses[0].x + offset_r * math.cos(offset_a),
            target_poses[0].z + offset_r * math.sin(offset_a),
        )
        d_poses = _motion_path(cfg, rng, start_xz=start)
        distractors.append((d_spec, d_poses))

    # static ground clutter, re-observed each frame with fresh sensor noise
    r_lo, r_hi = cfg.clutter_radius
    area = math.pi * (r_hi**2 - r_lo**2)
    n_clutter = int(rng.poisson(cfg.clutter_density * area))
    radii = np.sqrt(rng.uniform(r_lo**2, r_hi**2, size=n_clutter))
    angles = rng.uniform(0.0, 2.0 * math.pi, size=n_clutter)
    clutter = np.column_stack(
        [radii * np.cos(angles), np.zeros(n_clutter), radii * np.sin(angles)]
    )

    frames = []
    for t in range(cfg.frames):
        parts = []
        target_pts = sample_box_points(
            boxes[t], cfg.base_density, cfg.sensor_noise, rng, cfg.min_target_points
        )
        if crop_points_in_box(target_pts, boxes[t]).shape[0] == 0:
            center = np.array([[boxes[t].pose.x, y_center, boxes[t].pose.z]])
            target_pts = np.concatenate([target_pts, center], axis=0)
        parts.append(target_pts)
        for d_spec, d_poses in distractors:
            pose = _pushed_away(d_poses[t], target_poses[t])
            d_box = Box3d(pose, d_spec, d_spec.h / 2.0)
            parts.append(sample_box_points(d_box, cfg.base_density, cfg.sensor_noise, rng))
        if n_clutter:
            parts.append(clutter + rng.normal(0.0, cfg.sensor_noise, size=clutter.shape))
        frames.append(np.concatenate([p for p in parts if p.shape[0]], axis=0))
    return SyntheticTracklet(tid=f"t{index:04d}", label="car", boxes=boxes, frames=frames)


def _pushed_away(pose: PoseBev, target: PoseBev, min_dist: float = 3.2) -> PoseBev:
    dx, dz = pose.x - target.x, pose.z - target.z
    d = math.hypot(dx, dz)
    if d >= min_dist:
        return pose
    if d < 1e-9:
        return PoseBev(target.x + min_dist, target.z, pose.theta)
    scale = min_dist / d
    return PoseBev(target.x + dx * scale, target.z + dz * scale, pose.theta)


def generate_synthetic(cfg: SceneConfig) -> list:
    """All tracklets of a synthetic dataset, in memory."""
    return [generate_tracklet(cfg, i) for i in range(cfg.n_tracklets)]
