"""Anchor sampling, the composite tracking loss, and the end-to-end
training loop over tracklets.

One optimization step consumes one search region: the model and search
rasters are built from ground-truth poses, both networks run forward, and
the weighted sum of classification, regression, similarity-regression, and
completion losses is backpropagated through the shared parameter store.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import net
from .bev import rasterize_bev
from .geom import (
    Box3d,
    BoxSpec,
    PoseBev,
    Rect,
    center_distance,
    crop_points_in_box,
    gaussian_score,
    lift_to_3d,
    oriented_iou,
    project_to_bev,
    rects_may_overlap,
    resample_fixed,
)
from .net import ParamStore, PlateauSchedule, Tensor, sgd_step, take_flat, take_rows
from .pipeline import NetBundle, PipelineConfig, build_nets
from .rpn2d import (
    GRID_SIZE,
    N_ANGLES,
    AnchorGrid,
    build_anchor_grid,
)
from .sim3d import ShapeSiamese

N_TOTAL = 48
N_PER_TIER = 16
TIER_POS, TIER_MID, TIER_ZERO = 2, 1, 0


@dataclass(frozen=True)
class LossWeights:
    lam_cls: float = 1e-2
    lam_reg: float = 1.0
    lam_tr: float = 1e-2
    lam_comp: float = 1e-6

    def __post_init__(self):
        if min(self.lam_cls, self.lam_reg, self.lam_tr, self.lam_comp) < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass
class AnchorBatch:
    """Fixed-size training selection over one frame's anchor grid."""

    indices: np.ndarray  # (48,) anchor indices
    tiers: np.ndarray  # (48,) TIER_* codes
    deltas: np.ndarray  # (48, 2) target (dx, dz), zero for negatives
    ious: np.ndarray  # (48,) IoU vs ground truth, for inspection

    @property
    def n_pos(self) -> int:
        return int(np.sum(self.tiers == TIER_POS))

    @property
    def cls_targets(self) -> np.ndarray:
        return (self.tiers == TIER_POS).astype(float)


def anchor_ious(grid: AnchorGrid, gt: Rect) -> np.ndarray:
    """Oriented IoU of every anchor against the ground-truth rect.

    A vectorized separating-axis test rejects disjoint anchors exactly;
    only overlapping ones go through polygon clipping.
    """
    xs, zs, ts = grid.flat_arrays()
    ious = np.zeros(grid.count)
    overlap = rects_may_overlap(gt, xs, zs, ts, grid.w, grid.l)
    for idx in np.nonzero(overlap)[0]:
        ious[idx] = oriented_iou(grid.rect_from_index(int(idx)), gt)
    return ious


def select_training_anchors(grid: AnchorGrid, gt: Rect, rng: np.random.Generator) -> AnchorBatch:
    """Select exactly 48 anchors: up to 16 positives (IoU in (0.5, 1]),
    up to 16 mid negatives (IoU in (0, 0.5]), remainder from zero-overlap
    anchors. Positive delta targets are the normalized center offsets."""
    ious = anchor_ious(grid, gt)
    pos_pool = np.nonzero(ious > 0.5)[0]
    mid_pool = np.nonzero((ious > 0.0) & (ious <= 0.5))[0]
    zero_pool = np.nonzero(ious == 0.0)[0]

    n_pos = min(N_PER_TIER, pos_pool.size)
    n_mid = min(N_PER_TIER, mid_pool.size)
    n_zero = N_TOTAL - n_pos - n_mid
    if zero_pool.size < n_zero:
        raise ValueError(
            f"cannot build a 48-anchor batch: only {zero_pool.size} "
            f"zero-overlap anchors available"
        )
    picks = [
        rng.choice(pos_pool, size=n_pos, replace=False) if n_pos else np.empty(0, dtype=np.intp),
        rng.choice(mid_pool, size=n_mid, replace=False) if n_mid else np.empty(0, dtype=np.intp),
        rng.choice(zero_pool, size=n_zero, replace=False),
    ]
    indices = np.concatenate(picks).astype(np.intp)
    tiers = np.concatenate(
        [
            np.full(n_pos, TIER_POS),
            np.full(n_mid, TIER_MID),
            np.full(n_zero, TIER_ZERO),
        ]
    ).astype(np.int8)
    deltas = np.zeros((N_TOTAL, 2))
    for row in range(n_pos):
        rect = grid.rect_from_index(int(indices[row]))
        deltas[row, 0] = (gt.x - rect.x) / grid.w
        deltas[row, 1] = (gt.z - rect.z) / grid.l
    return AnchorBatch(indices=indices, tiers=tiers, deltas=deltas, ious=ious[indices])


def _cls_flat_indices(anchor_indices: np.ndarray) -> np.ndarray:
    # anchor index (i*17 + j)*5 + k -> position in the (5, 17, 17) logits
    i = anchor_indices // (GRID_SIZE * N_ANGLES)
    j = (anchor_indices // N_ANGLES) % GRID_SIZE
    k = anchor_indices % N_ANGLES
    return k * GRID_SIZE * GRID_SIZE + i * GRID_SIZE + j


def _reg_flat_indices(anchor_indices: np.ndarray, component: int) -> np.ndarray:
    i = anchor_indices // (GRID_SIZE * N_ANGLES)
    j = (anchor_indices // N_ANGLES) % GRID_SIZE
    k = anchor_indices % N_ANGLES
    return (k * 2 + component) * GRID_SIZE * GRID_SIZE + i * GRID_SIZE + j


def rpn_loss(cls_logits: Tensor, reg: Tensor, batch: AnchorBatch) -> tuple[Tensor, Tensor]:
    """BCE over the 48 selected anchors and smooth L1 over the positives.

    L_cls averages over all 48; L_reg averages (gamma_x + gamma_z) over
    2 * n_pos and is 0 when there are no positives.
    """
    probs = take_flat(cls_logits, _cls_flat_indices(batch.indices)).sigmoid()
    l_cls = net.bce(probs, batch.cls_targets).sum() * (1.0 / N_TOTAL)
    n_pos = batch.n_pos
    if n_pos == 0:
        return l_cls, Tensor(np.asarray(0.0, dtype=cls_logits.data.dtype))
    pos = batch.indices[:n_pos]
    dx = take_flat(reg, _reg_flat_indices(pos, 0))
    dz = take_flat(reg, _reg_flat_indices(pos, 1))
    gamma = net.smooth_l1(dx, batch.deltas[:n_pos, 0]).sum() + net.smooth_l1(
        dz, batch.deltas[:n_pos, 1]
    ).sum()
    l_reg = gamma * (1.0 / (2.0 * n_pos))
    return l_cls, l_reg


def _similarity_rows(latents: Tensor, n_candidates: int) -> Tensor:
    """Cosine similarity of rows 1..n against row 0 of a latent batch."""
    model = take_rows(latents, np.array([0]))
    cands = take_rows(latents, np.arange(1, n_candidates + 1))
    dots = (cands * model).sum(axis=1)
    cn = (cands * cands).sum(axis=1).sqrt()
    mn = (model * model).sum(axis=1).sqrt()
    return dots / (cn * mn)


def _tracking_core(
    sim: ShapeSiamese,
    candidate_shapes,
    model_shape: np.ndarray,
    candidate_rects,
    gt: Rect,
    sigma: float,
):
    """Shared implementation returning (L_tr, latent batch, present indices).

    Row 0 of the latent batch is the model shape; the remaining rows follow
    ``present``, the indices of the non-empty candidates.
    """
    present = [
        i for i, c in enumerate(candidate_shapes) if c is not None and len(c) > 0
    ]
    latents = sim.encode_batch_t([model_shape] + [candidate_shapes[i] for i in present])
    n_total = len(candidate_shapes)
    if not present:
        return Tensor(np.asarray(0.0, dtype=latents.data.dtype)), latents, present
    sims = _similarity_rows(latents, len(present))
    rho = np.array(
        [gaussian_score(center_distance(candidate_rects[i], gt), sigma) for i in present]
    )
    residual = sims - rho
    l_tr = (residual * residual).sum() * (1.0 / n_total)
    return l_tr, latents, present


def tracking_loss(
    sim: ShapeSiamese,
    candidate_shapes,
    model_shape: np.ndarray,
    candidate_rects,
    gt: Rect,
    sigma: float = 1.0,
) -> Tensor:
    """Mean squared residual between candidate-vs-model cosine similarity
    and the Gaussian score of the candidate's center distance to the ground
    truth. Empty candidates (None entries) contribute 0 while the
    normalizer stays the full candidate count."""
    l_tr, _, _ = _tracking_core(sim, candidate_shapes, model_shape, candidate_rects, gt, sigma)
    return l_tr


def completion_loss(sim: ShapeSiamese, model_shape: np.ndarray, target: np.ndarray) -> Tensor:
    """Chamfer distance between the decoded reconstruction of the model
    shape and the accumulated ground-truth cloud."""
    target = np.asarray(target).reshape(-1, 3)
    if target.shape[0] == 0:
        warnings.warn("empty completion target, contributing 0", stacklevel=2)
        return Tensor(np.asarray(0.0, dtype=sim.dtype))
    latent = sim.encode_batch_t([model_shape])
    decoded = sim.decode_t(latent).reshape(sim.cfg.decoder_m, 3)
    return net.chamfer_loss(decoded, target)


def total_loss(parts: dict, weights: LossWeights) -> Tensor:
    """Weighted sum of the loss parts; missing or weight-0 parts drop out
    without affecting the others."""
    terms = []
    for key, lam in (
        ("cls", weights.lam_cls),
        ("reg", weights.lam_reg),
        ("tr", weights.lam_tr),
        ("comp", weights.lam_comp),
    ):
        part = parts.get(key)
        if part is not None and lam != 0.0:
            terms.append(part * lam)
    if not terms:
        return Tensor(np.asarray(0.0))
    out = terms[0]
    for term in terms[1:]:
        out = out + term
    return out


@dataclass(frozen=True)
class TrainConfig:
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    epochs: int = 3
    frames_per_tracklet: int = 12  # sampled per epoch; 0 means all
    lr: float = 1e-4
    momentum: float = 0.9
    plateau_factor: float = 10.0
    plateau_patience: int = 2
    val_fraction: float = 0.1
    val_frames_per_tracklet: int = 6
    search_jitter: float = 0.0
    complete_candidates: bool = False
    seed: int = 0


@dataclass
class StepRecord:
    epoch: int
    step: int
    l_cls: float
    l_reg: float
    l_tr: float
    l_comp: float
    total: float
    lr: float


@dataclass
class FitResult:
    bundle: NetBundle
    history: list
    val_losses: list


def crop_candidates(frame: np.ndarray, rects, spec: BoxSpec, y_center: float):
    """Canonical-frame crops of one frame for many candidate rects, with a
    shared coarse prefilter around the candidate cluster."""
    pts = np.asarray(frame, dtype=float).reshape(-1, 3)
    if pts.shape[0] == 0 or not rects:
        return [np.empty((0, 3)) for _ in rects]
    cx = np.array([r.x for r in rects])
    cz = np.array([r.z for r in rects])
    mx, mz = cx.mean(), cz.mean()
    circum = 0.5 * math.hypot(spec.l, spec.w)
    radius = np.max(np.hypot(cx - mx, cz - mz)) + circum + 1e-6
    near = (
        ((pts[:, 0] - mx) ** 2 + (pts[:, 2] - mz) ** 2 <= radius * radius)
        & (np.abs(pts[:, 1] - y_center) <= 0.5 * spec.h)
    )
    subset = pts[near]
    return [
        crop_points_in_box(subset, lift_to_3d(r, spec, y_center)) for r in rects
    ]


class _TrackletFrames:
    """Per-tracklet cache of loaded frames and ground-truth crops."""

    def __init__(self, tracklet):
        self.tracklet = tracklet
        self.boxes: list[Box3d] = list(tracklet.boxes)
        self._frames: dict[int, np.ndarray] = {}
        self._crops: dict[int, np.ndarray] = {}

    def frame(self, i: int) -> np.ndarray:
        if i not in self._frames:
            self._frames[i] = self.tracklet.load_frame(i)
        return self._frames[i]

    def gt_crop(self, i: int) -> np.ndarray:
        if i not in self._crops:
            self._crops[i] = crop_points_in_box(self.frame(i), self.boxes[i])
        return self._crops[i]

    def model_concat(self, upto: int) -> np.ndarray:
        parts = [self.gt_crop(i) for i in range(upto)]
        parts = [p for p in parts if p.shape[0] > 0] or [np.empty((0, 3))]
        return np.concatenate(parts, axis=0)


def _frame_step(
    bundle: NetBundle,
    cache: _TrackletFrames,
    t: int,
    cfg: TrainConfig,
    rng: np.random.Generator,
) -> dict | None:
    """Compute the loss parts for frame ``t`` of one tracklet, or None if
    the accumulated model cloud is empty."""
    pcfg = bundle.cfg
    boxes = cache.boxes
    spec = boxes[0].spec
    y_center = boxes[0].y_center
    gt_rect = project_to_bev(boxes[t])
    model_concat = cache.model_concat(t)
    if model_concat.shape[0] == 0:
        return None

    prev = boxes[t - 1].pose
    if cfg.search_jitter > 0.0:
        prev = PoseBev(
            prev.x + rng.uniform(-cfg.search_jitter, cfg.search_jitter),
            prev.z + rng.uniform(-cfg.search_jitter, cfg.search_jitter),
            prev.theta,
        )
    frame = cache.frame(t)
    search_bev = rasterize_bev(
        frame, prev, pcfg.bev.search_extent, pcfg.bev.search_px, pcfg.bev, y_center
    )
    model_bev = rasterize_bev(
        model_concat, PoseBev(0.0, 0.0, 0.0), pcfg.bev.model_extent, pcfg.bev.model_px, pcfg.bev
    )
    grid = build_anchor_grid(prev, spec, search_bev)
    batch = select_training_anchors(grid, gt_rect, rng)

    parts: dict[str, Tensor | None] = {"cls": None, "reg": None, "tr": None, "comp": None}
    w = cfg.weights
    need_rpn = w.lam_cls != 0.0 or w.lam_reg != 0.0
    need_tr = w.lam_tr != 0.0
    need_comp = w.lam_comp != 0.0

    if need_rpn:
        cls_logits, reg = bundle.rpn.forward(
            bundle.rpn.embed(model_bev), bundle.rpn.embed(search_bev)
        )
        parts["cls"], parts["reg"] = rpn_loss(cls_logits, reg, batch)

    if need_tr or need_comp:
        model_shape = resample_fixed(model_concat, 2048, rng)
        latents = None
        n_present = 0
        if need_tr:
            rects = [grid.rect_from_index(int(i)) for i in batch.indices]
            shapes = crop_candidates(frame, rects, spec, y_center)
            # below 2048 points resampling only adds duplicates the encoder
            # collapses again, so only oversized crops are subsampled
            shapes = [
                resample_fixed(s, 2048, rng) if s.shape[0] > 2048 else s
                for s in shapes
            ]
            l_tr, latents, present = _tracking_core(
                bundle.sim, shapes, model_shape, rects, gt_rect, pcfg.sigma
            )
            parts["tr"] = l_tr
            n_present = len(present)
        else:
            latents = bundle.sim.encode_batch_t([model_shape])
        if need_comp:
            m = bundle.sim.cfg.decoder_m
            model_latent = take_rows(latents, np.array([0]))
            decoded = bundle.sim.decode_t(model_latent).reshape(m, 3)
            l_comp = net.chamfer_loss(decoded, model_concat)
            if cfg.complete_candidates and n_present > 0:
                # variant: candidate reconstructions also pull toward the
                # accumulated cloud, averaged over candidates
                cand = bundle.sim.decode_t(take_rows(latents, np.arange(1, n_present + 1)))
                acc = None
                for row in range(n_present):
                    term = net.chamfer_loss(
                        take_rows(cand.reshape(n_present * m, 3),
                                  np.arange(row * m, (row + 1) * m)),
                        model_concat,
                    )
                    acc = term if acc is None else acc + term
                l_comp = l_comp + acc * (1.0 / n_present)
            parts["comp"] = l_comp

    return parts


def _split_tracklets(tracklets, cfg: TrainConfig):
    ordered = sorted(tracklets, key=lambda tr: str(tr.tid))
    if len(ordered) < 2 or cfg.val_fraction <= 0.0:
        return ordered, []
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 3]))
    perm = rng.permutation(len(ordered))
    n_val = max(1, int(round(cfg.val_fraction * len(ordered))))
    val_idx = set(perm[:n_val].tolist())
    train = [tr for i, tr in enumerate(ordered) if i not in val_idx]
    val = [tr for i, tr in enumerate(ordered) if i in val_idx]
    return train, val


def fit(tracklets, cfg: TrainConfig, dtype=np.float32, log=None) -> FitResult:
    """Train both networks over ground-truth tracklets.

    ``tracklets`` is any sequence of objects with ``tid``, ``boxes``
    (list of Box3d), and ``load_frame(i)``. Deterministic for a fixed seed.
    """
    tracklets = list(tracklets)
    if not tracklets:
        raise ValueError("training requires at least one tracklet")
    if all(len(tr.boxes) < 2 for tr in tracklets):
        raise ValueError("training requires a tracklet with at least two frames")

    bundle = build_nets(cfg.pipeline, seed=cfg.seed, dtype=dtype)
    sched = PlateauSchedule(
        lr=cfg.lr, factor=cfg.plateau_factor, patience=cfg.plateau_patience
    )
    train_set, val_set = _split_tracklets(tracklets, cfg)
    caches = {str(tr.tid): _TrackletFrames(tr) for tr in train_set + val_set}

    history: list[StepRecord] = []
    val_losses: list[float] = []
    step = 0
    lr = sched.lr
    for epoch in range(cfg.epochs):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1, epoch]))
        plan: list[tuple[str, int]] = []
        for tr in train_set:
            frames = np.arange(1, len(tr.boxes))
            if cfg.frames_per_tracklet and frames.size > cfg.frames_per_tracklet:
                frames = np.sort(rng.choice(frames, size=cfg.frames_per_tracklet, replace=False))
            plan.extend((str(tr.tid), int(t)) for t in frames)
        order = rng.permutation(len(plan))

        for pos in order:
            tid, t = plan[pos]
            parts = _frame_step(bundle, caches[tid], t, cfg, rng)
            if parts is None:
                continue
            loss = total_loss(parts, cfg.weights)
            bundle.store.zero_grad()
            loss.backward()
            bundle.store.fill_missing_grads()
            sgd_step(bundle.store, lr, cfg.momentum)
            step += 1
            history.append(
                StepRecord(
                    epoch=epoch,
                    step=step,
                    l_cls=_part_value(parts, "cls"),
                    l_reg=_part_value(parts, "reg"),
                    l_tr=_part_value(parts, "tr"),
                    l_comp=_part_value(parts, "comp"),
                    total=loss.item(),
                    lr=lr,
                )
            )

        val_loss = _validation_loss(bundle, caches, val_set, cfg, epoch)
        val_losses.append(val_loss)
        lr = sched.update(val_loss)
        if log is not None:
            last = history[-1] if history else None
            log(
                f"epoch {epoch}: steps={step} val_loss={val_loss:.6f} lr={lr:g}"
                + (f" last_total={last.total:.6f}" if last else "")
            )
    return FitResult(bundle=bundle, history=history, val_losses=val_losses)


def _part_value(parts: dict, key: str) -> float:
    part = parts.get(key)
    return float(part.item()) if part is not None else 0.0


def _validation_loss(bundle, caches, val_set, cfg: TrainConfig, epoch: int) -> float:
    if not val_set:
        return _train_proxy_loss(bundle, caches, cfg, epoch)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2, epoch]))
    totals = []
    for tr in val_set:
        n = len(tr.boxes)
        if n < 2:
            continue
        count = min(cfg.val_frames_per_tracklet, n - 1)
        frames = np.unique(np.linspace(1, n - 1, count).round().astype(int))
        for t in frames:
            parts = _frame_step(bundle, caches[str(tr.tid)], int(t), cfg, rng)
            if parts is not None:
                totals.append(total_loss(parts, cfg.weights).item())
    return float(np.mean(totals)) if totals else 0.0


def _train_proxy_loss(bundle, caches, cfg: TrainConfig, epoch: int) -> float:
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2, epoch]))
    totals = []
    for tid, cache in sorted(caches.items()):
        n = len(cache.boxes)
        if n < 2:
            continue
        t = 1 + (epoch % (n - 1))
        parts = _frame_step(bundle, cache, t, cfg, rng)
        if parts is not None:
            totals.append(total_loss(parts, cfg.weights).item())
    return float(np.mean(totals)) if totals else 0.0
