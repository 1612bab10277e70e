"""Online tracking loop.

Each step rasterizes the search region around the previous pose and the
accumulated model cloud, generates candidates from the configured search
mode, crops and ranks candidate shapes with the 3D Siamese network, adopts
the winner as the new pose, and grows the model cloud.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from .geom import (
    Aggregation,
    Box3d,
    BoxSpec,
    PoseBev,
    Rect,
    aggregate_model,
    center_distance,
    crop_points_in_box,
    lift_to_3d,
    oriented_iou,
    project_to_bev,
    resample_fixed,
)
from .bev import rasterize_bev
from .pipeline import NetBundle
from .rpn2d import build_anchor_grid, decode_and_rank
from .search import (
    ExhaustiveGridSpec,
    KalmanConfig,
    ParticleConfig,
    exhaustive_propose,
    kalman_init,
    kalman_propose,
    kalman_update,
    particle_init,
    particle_step,
)
from .train import crop_candidates

SEARCH_MODES = ("rpn", "kf", "pf", "exhaustive")
SELECTORS = ("siamese", "oracle")


@dataclass(frozen=True)
class TrackConfig:
    search: str = "rpn"
    topk: int = 16
    aggregation: Aggregation = Aggregation.ALL
    selector: str = "siamese"
    kalman: KalmanConfig = field(default_factory=KalmanConfig)
    particle: ParticleConfig = field(default_factory=ParticleConfig)
    exhaustive: ExhaustiveGridSpec = field(default_factory=ExhaustiveGridSpec)
    record_streams: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.search not in SEARCH_MODES:
            raise ValueError(f"unknown search mode {self.search!r}")
        if self.selector not in SELECTORS:
            raise ValueError(f"unknown selector {self.selector!r}")
        if self.topk < 1:
            raise ValueError("topk must be >= 1")


@dataclass
class TrackerState:
    spec: BoxSpec
    y_center: float
    prev_pose: PoseBev
    model_pc: np.ndarray  # canonical frame
    history: list  # per-frame canonical crops
    aggregation: Aggregation
    kalman: object = None
    particles: object = None
    last_scores: np.ndarray | None = None
    rng: np.random.Generator | None = None


@dataclass
class StepDiag:
    candidates: int
    score: float
    fallback: bool
    ms_raster: float
    ms_propose: float
    ms_rank: float
    stream: list | None = None  # (Rect, 3d score) per candidate, in order


@dataclass
class TrackletResult:
    boxes: list  # predicted Box3d per frame after the first
    diags: list  # StepDiag per prediction


def init_tracker(frame0: np.ndarray, gt0: Box3d, cfg: TrackConfig) -> TrackerState:
    """Start a tracker from the ground-truth box of the first frame."""
    model = crop_points_in_box(frame0, gt0)
    if model.shape[0] == 0:
        warnings.warn("initial box encloses no points; model starts empty", stacklevel=2)
    state = TrackerState(
        spec=gt0.spec,
        y_center=gt0.y_center,
        prev_pose=gt0.pose,
        model_pc=model,
        history=[model],
        aggregation=cfg.aggregation,
        rng=np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x7AC4])),
    )
    if cfg.search == "kf":
        state.kalman = kalman_init(gt0.pose, cfg.kalman)
    elif cfg.search == "pf":
        state.particles = particle_init(gt0.pose, cfg.topk)
    return state


def _propose(state: TrackerState, cfg: TrackConfig, bundle: NetBundle, model_bev, search_bev, gt):
    """Candidate rects from the configured search mode, most favored first."""
    if cfg.search == "rpn":
        out = bundle.rpn.propose(model_bev, search_bev)
        grid = build_anchor_grid(state.prev_pose, state.spec, search_bev)
        proposals = decode_and_rank(out, grid, bundle.cfg.rpn.window_gamma, cfg.topk)
        return [p.rect for p in proposals], [p.raw_score for p in proposals]
    if cfg.search == "kf":
        state.kalman, rects = kalman_propose(
            state.kalman, state.spec, cfg.topk, state.rng, cfg.kalman
        )
        return rects, None
    if cfg.search == "pf":
        scores = (
            state.last_scores
            if state.last_scores is not None
            else np.ones(state.particles.states.shape[0])
        )
        state.particles, rects = particle_step(
            state.particles, scores, state.rng, state.spec, cfg.particle
        )
        return rects, None
    if gt is None:
        raise ValueError("exhaustive search requires the ground-truth pose")
    return exhaustive_propose(state.prev_pose, gt.pose, state.spec, cfg.exhaustive), None


def track_step(
    state: TrackerState,
    frame: np.ndarray,
    bundle: NetBundle,
    cfg: TrackConfig,
    gt: Box3d | None = None,
) -> tuple[Box3d, StepDiag]:
    """Advance the tracker by one frame; returns the prediction and
    per-stage diagnostics. ``gt`` is consulted only by the idealized
    exhaustive mode and the oracle selector."""
    pcfg = bundle.cfg
    t0 = time.perf_counter()
    search_bev = rasterize_bev(
        frame, state.prev_pose, pcfg.bev.search_extent, pcfg.bev.search_px, pcfg.bev, state.y_center
    )
    model_src = state.model_pc if state.model_pc.shape[0] else np.empty((0, 3))
    model_bev = rasterize_bev(
        model_src, PoseBev(0.0, 0.0, 0.0), pcfg.bev.model_extent, pcfg.bev.model_px, pcfg.bev
    )
    t1 = time.perf_counter()
    rects, raw_scores = _propose(state, cfg, bundle, model_bev, search_bev, gt)
    t2 = time.perf_counter()

    shapes = crop_candidates(frame, rects, state.spec, state.y_center)
    fallback = False
    if cfg.selector == "oracle":
        if gt is None:
            raise ValueError("oracle selector requires the ground-truth box")
        gt_rect = project_to_bev(gt)
        scores = np.array([oriented_iou(r, gt_rect) for r in rects])
        best = int(np.argmax(scores))
    elif len(rects) == 1:
        # single candidate: the 3D network cannot change the outcome
        best = 0
        scores = np.array([raw_scores[0] if raw_scores else 1.0])
    else:
        samples = []
        any_points = False
        for shape in shapes:
            if shape.shape[0] > 0:
                # fixed-size resampling only duplicates points below 2048,
                # and the encoder collapses duplicates, so the draw is
                # skipped there for an identical latent
                if shape.shape[0] > 2048:
                    samples.append(resample_fixed(shape, 2048, state.rng))
                else:
                    samples.append(shape)
                any_points = True
            else:
                samples.append(None)
        if not any_points:
            best = _fallback_index(cfg, state, rects)
            scores = np.full(len(rects), -1.0)
            fallback = True
        else:
            if state.model_pc.shape[0] > 0:
                model_shape = resample_fixed(state.model_pc, 2048, state.rng)
            else:
                best = _fallback_index(cfg, state, rects)
                scores = np.full(len(rects), -1.0)
                fallback = True
                model_shape = None
            if model_shape is not None:
                model_latent = bundle.sim.encode_shape(model_shape)
                best, scores = bundle.sim.rank_candidates(model_latent, samples)
    t3 = time.perf_counter()

    winner = rects[best]
    state.prev_pose = PoseBev(winner.x, winner.z, winner.theta)
    state.history.append(shapes[best])
    state.model_pc = aggregate_model(state.aggregation, state.history)
    if cfg.search == "kf":
        state.kalman = kalman_update(state.kalman, state.prev_pose, cfg.kalman)
    elif cfg.search == "pf":
        state.last_scores = np.asarray(scores, dtype=float)

    diag = StepDiag(
        candidates=len(rects),
        score=float(scores[best]),
        fallback=fallback,
        ms_raster=(t1 - t0) * 1e3,
        ms_propose=(t2 - t1) * 1e3,
        ms_rank=(t3 - t2) * 1e3,
        stream=list(zip(rects, scores.tolist())) if cfg.record_streams else None,
    )
    return lift_to_3d(winner, state.spec, state.y_center), diag


def _fallback_index(cfg: TrackConfig, state: TrackerState, rects) -> int:
    if cfg.search == "exhaustive":
        dists = [center_distance(r, state.prev_pose) for r in rects]
        return int(np.argmin(dists))
    return 0  # rpn rects come sorted; kf mean and pf particles lead their lists


def run_tracklet(frames, gt_boxes, bundle: NetBundle, cfg: TrackConfig) -> TrackletResult:
    """Track one object through a frame sequence.

    Ground truth is consumed at frame 0 (and per frame by the idealized
    exhaustive mode or the oracle selector); steps are strictly online.
    """
    frames = list(frames)
    gt_boxes = list(gt_boxes)
    if len(frames) < 2:
        raise ValueError("a tracklet needs at least two frames")
    if len(gt_boxes) != len(frames):
        raise ValueError("one ground-truth box per frame is required")
    state = init_tracker(frames[0], gt_boxes[0], cfg)
    needs_gt = cfg.search == "exhaustive" or cfg.selector == "oracle"
    boxes = []
    diags = []
    for t in range(1, len(frames)):
        gt = gt_boxes[t] if needs_gt else None
        box, diag = track_step(state, frames[t], bundle, cfg, gt)
        boxes.append(box)
        diags.append(diag)
    return TrackletResult(boxes=boxes, diags=diags)
