"""Non-learned candidate generators: a constant-velocity Kalman filter, a
particle filter, and the idealized exhaustive grid that always contains the
ground truth."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geom import BoxSpec, PoseBev, Rect, wrap_angle


@dataclass(frozen=True)
class KalmanConfig:
    # process noise std devs per frame
    q_pos: float = 0.1
    q_theta: float = math.radians(2.0)
    q_vel: float = 0.2
    # measurement noise std devs
    r_pos: float = 0.2
    r_theta: float = math.radians(3.0)
    # initial uncertainty
    p0_pos: float = 0.3
    p0_theta: float = math.radians(4.0)
    p0_vel: float = 0.5


@dataclass
class KalmanState:
    """Mean (x, z, theta, vx, vz) and its 5x5 covariance."""

    mean: np.ndarray
    cov: np.ndarray


# state transition: position integrates velocity, heading is a random walk
_F = np.array(
    [
        [1.0, 0.0, 0.0, 1.0, 0.0],
        [0.0, 1.0, 0.0, 0.0, 1.0],
        [0.0, 0.0, 1.0, 0.0, 0.0],
        [0.0, 0.0, 0.0, 1.0, 0.0],
        [0.0, 0.0, 0.0, 0.0, 1.0],
    ]
)
_H = np.eye(3, 5)


def _q_matrix(cfg: KalmanConfig) -> np.ndarray:
    return np.diag(
        [cfg.q_pos**2, cfg.q_pos**2, cfg.q_theta**2, cfg.q_vel**2, cfg.q_vel**2]
    )


def _r_matrix(cfg: KalmanConfig) -> np.ndarray:
    return np.diag([cfg.r_pos**2, cfg.r_pos**2, cfg.r_theta**2])


def kalman_init(pose: PoseBev, cfg: KalmanConfig = KalmanConfig()) -> KalmanState:
    mean = np.array([pose.x, pose.z, pose.theta, 0.0, 0.0])
    cov = np.diag(
        [cfg.p0_pos**2, cfg.p0_pos**2, cfg.p0_theta**2, cfg.p0_vel**2, cfg.p0_vel**2]
    )
    return KalmanState(mean=mean, cov=cov)


def kalman_predict(state: KalmanState, cfg: KalmanConfig = KalmanConfig()) -> KalmanState:
    mean = _F @ state.mean
    mean[2] = wrap_angle(mean[2])
    cov = _F @ state.cov @ _F.T + _q_matrix(cfg)
    return KalmanState(mean=mean, cov=0.5 * (cov + cov.T))


def kalman_propose(
    state: KalmanState,
    spec: BoxSpec,
    count: int,
    rng: np.random.Generator,
    cfg: KalmanConfig = KalmanConfig(),
) -> tuple[KalmanState, list[Rect]]:
    """Predict one frame ahead and emit candidate rects.

    The first rect sits at the predicted mean; the rest are draws from the
    predicted (x, z, theta) Gaussian. Returns the predicted state so the
    caller can apply the measurement update after selecting a pose.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    predicted = kalman_predict(state, cfg)
    mx, mz, mt = predicted.mean[:3]
    rects = [Rect(float(mx), float(mz), wrap_angle(float(mt)), spec.w, spec.l)]
    if count > 1:
        samples = rng.multivariate_normal(predicted.mean[:3], predicted.cov[:3, :3], size=count - 1)
        for sx, sz, st in samples:
            rects.append(Rect(float(sx), float(sz), wrap_angle(float(st)), spec.w, spec.l))
    return predicted, rects


def kalman_update(
    state: KalmanState, observed: PoseBev, cfg: KalmanConfig = KalmanConfig()
) -> KalmanState:
    """Standard measurement update with the selected pose as observation."""
    innovation = np.array(
        [
            observed.x - state.mean[0],
            observed.z - state.mean[1],
            wrap_angle(observed.theta - state.mean[2]),
        ]
    )
    s_mat = _H @ state.cov @ _H.T + _r_matrix(cfg)
    gain = state.cov @ _H.T @ np.linalg.inv(s_mat)
    mean = state.mean + gain @ innovation
    mean[2] = wrap_angle(mean[2])
    cov = (np.eye(5) - gain @ _H) @ state.cov
    return KalmanState(mean=mean, cov=0.5 * (cov + cov.T))


@dataclass(frozen=True)
class ParticleConfig:
    sigma_xz: float = 0.3
    sigma_theta: float = math.radians(3.0)
    weight_eps: float = 1e-3


@dataclass
class ParticleSet:
    """(count, 3) particle states (x, z, theta) with normalized weights."""

    states: np.ndarray
    weights: np.ndarray


def particle_init(pose: PoseBev, count: int) -> ParticleSet:
    if count < 1:
        raise ValueError("count must be >= 1")
    states = np.tile(np.array([pose.x, pose.z, pose.theta]), (count, 1))
    return ParticleSet(states=states, weights=np.full(count, 1.0 / count))


def _systematic_resample(weights: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    n = weights.shape[0]
    positions = (rng.random() + np.arange(n)) / n
    return np.searchsorted(np.cumsum(weights), positions)


def particle_step(
    ps: ParticleSet,
    scores,
    rng: np.random.Generator,
    spec: BoxSpec,
    cfg: ParticleConfig = ParticleConfig(),
) -> tuple[ParticleSet, list[Rect]]:
    """Reweight by the previous frame's candidate scores, resample
    systematically, diffuse, and emit the particles as candidate rects."""
    scores = np.asarray(scores, dtype=float)
    if scores.shape[0] != ps.states.shape[0]:
        raise ValueError(
            f"score count {scores.shape[0]} != particle count {ps.states.shape[0]}"
        )
    w = np.maximum(scores, 0.0) + cfg.weight_eps
    w = w / w.sum()
    idx = _systematic_resample(w, rng)
    states = ps.states[idx].copy()
    n = states.shape[0]
    states[:, 0] += rng.normal(0.0, cfg.sigma_xz, size=n)
    states[:, 1] += rng.normal(0.0, cfg.sigma_xz, size=n)
    states[:, 2] += rng.normal(0.0, cfg.sigma_theta, size=n)
    states[:, 2] = np.array([wrap_angle(t) for t in states[:, 2]])
    new_ps = ParticleSet(states=states, weights=np.full(n, 1.0 / n))
    rects = [Rect(float(x), float(z), float(t), spec.w, spec.l) for x, z, t in states]
    return new_ps, rects


@dataclass(frozen=True)
class ExhaustiveGridSpec:
    xz_extent: float = 2.0
    xz_step: float = 0.25
    theta_extent_deg: float = 10.0
    theta_step_deg: float = 2.5

    def offsets(self):
        n_xz = int(round(2 * self.xz_extent / self.xz_step)) + 1
        n_t = int(round(2 * self.theta_extent_deg / self.theta_step_deg)) + 1
        xz = np.linspace(-self.xz_extent, self.xz_extent, n_xz)
        th = np.radians(np.linspace(-self.theta_extent_deg, self.theta_extent_deg, n_t))
        return xz, th


def exhaustive_propose(
    prev: PoseBev,
    gt: PoseBev,
    spec: BoxSpec,
    grid: ExhaustiveGridSpec = ExhaustiveGridSpec(),
) -> list[Rect]:
    """Uniform pose grid around the previous pose with the exact ground
    truth appended last. Evaluation-only idealization."""
    xz, th = grid.offsets()
    rects = []
    for dx in xz:
        for dz in xz:
            for dt in th:
                rects.append(
                    Rect(
                        prev.x + float(dx),
                        prev.z + float(dz),
                        wrap_angle(prev.theta + float(dt)),
                        spec.w,
                        spec.l,
                    )
                )
    rects.append(Rect(gt.x, gt.z, gt.theta, spec.w, spec.l))
    return rects
