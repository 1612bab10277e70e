"""BEV Siamese network and region proposal head.

The shared backbone maps a 127 px crop to a 6x6 feature map and a 255 px
crop to 22x22 (total stride 8). Classification and regression branches each
adapt both maps with 3x3 convs, correlate them depthwise down to 17x17, and
finish with 1x1 heads: 5 sigmoid scores and 5 (dx, dz) pairs per cell, one
per heading-offset anchor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import net
from .bev import BevImage
from .geom import BoxSpec, PoseBev, Rect, wrap_angle
from .net import ParamStore, Tensor

# (kernel, stride) per conv layer with 3x3/2 max pools after the first two
BACKBONE_LAYERS = ((11, 2), (5, 1), (3, 1), (3, 1), (3, 1))
POOL_AFTER = (0, 1)
TOTAL_STRIDE = 8
GRID_SIZE = 17
N_ANGLES = 5
ANGLE_OFFSETS_DEG = (-5.0, -2.5, 0.0, 2.5, 5.0)
MODEL_FM = 6
SEARCH_FM = 22


@dataclass(frozen=True)
class RpnConfig:
    in_channels: int = 3
    widths: tuple = (16, 32, 32, 32, 64)
    adapter_width: int = 64
    window_gamma: float = 0.3


@dataclass
class RpnOutput:
    """Per-anchor scores and center offsets, laid out (row, col, angle)."""

    cls: np.ndarray  # (17, 17, 5) in (0, 1)
    reg: np.ndarray  # (17, 17, 5, 2)


@dataclass(frozen=True)
class Proposal:
    rect: Rect
    raw_score: float
    windowed_score: float
    anchor_index: int


@dataclass
class AnchorGrid:
    """17x17x5 anchor rectangles tied to a search raster.

    ``xs``/``zs`` hold world centers per cell; all anchors share the
    tracked object's (w, l) and the five heading offsets around the
    previous heading.
    """

    xs: np.ndarray  # (17, 17)
    zs: np.ndarray  # (17, 17)
    thetas: np.ndarray  # (5,)
    w: float
    l: float
    feature_stride_m: float

    @property
    def count(self) -> int:
        return GRID_SIZE * GRID_SIZE * N_ANGLES

    def rect(self, i: int, j: int, k: int) -> Rect:
        return Rect(float(self.xs[i, j]), float(self.zs[i, j]), float(self.thetas[k]), self.w, self.l)

    def rect_from_index(self, index: int) -> Rect:
        i, rem = divmod(index, GRID_SIZE * N_ANGLES)
        j, k = divmod(rem, N_ANGLES)
        return self.rect(i, j, k)

    def flat_arrays(self):
        """Anchor centers and headings flattened in anchor-index order."""
        xs = np.repeat(self.xs.ravel(), N_ANGLES)
        zs = np.repeat(self.zs.ravel(), N_ANGLES)
        ts = np.tile(self.thetas, GRID_SIZE * GRID_SIZE)
        return xs, zs, ts


def _he_conv(rng: np.random.Generator, f: int, c: int, k: int, dtype) -> np.ndarray:
    std = math.sqrt(2.0 / (c * k * k))
    return (rng.standard_normal((f, c, k, k)) * std).astype(dtype)


class SiamRpn:
    """Backbone plus RPN branches over a shared parameter store."""

    def __init__(self, store: ParamStore, cfg: RpnConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        self.store = store
        self.dtype = dtype
        widths = cfg.widths
        c_in = cfg.in_channels
        self.convs = []
        for i, ((k, _s), c_out) in enumerate(zip(BACKBONE_LAYERS, widths)):
            w = store.add(f"backbone.conv{i + 1}.w", _he_conv(rng, c_out, c_in, k, dtype))
            b = store.add(f"backbone.conv{i + 1}.b", np.zeros(c_out, dtype=dtype))
            self.convs.append((w, b))
            c_in = c_out
        d = widths[-1]
        a = cfg.adapter_width
        self.adapters = {}
        for branch in ("cls", "reg"):
            for side in ("model", "search"):
                w = store.add(f"rpn.{branch}_{side}.w", _he_conv(rng, a, d, 3, dtype))
                b = store.add(f"rpn.{branch}_{side}.b", np.zeros(a, dtype=dtype))
                self.adapters[(branch, side)] = (w, b)
        # tiny/zero head inits keep raw correlation magnitudes from blowing
        # up initial scores and decoded offsets
        self.cls_head = (
            store.add("rpn.cls_head.w", 1e-3 * _he_conv(rng, N_ANGLES, a, 1, dtype)),
            store.add("rpn.cls_head.b", np.zeros(N_ANGLES, dtype=dtype)),
        )
        self.reg_head = (
            store.add("rpn.reg_head.w", np.zeros((2 * N_ANGLES, a, 1, 1), dtype=dtype)),
            store.add("rpn.reg_head.b", np.zeros(2 * N_ANGLES, dtype=dtype)),
        )

    def embed(self, bev) -> Tensor:
        """Run the backbone on a (C, 127, 127) or (C, 255, 255) raster."""
        x = bev.channels if isinstance(bev, BevImage) else bev
        if isinstance(x, Tensor):
            t = x
        else:
            t = Tensor(np.asarray(x, dtype=self.dtype))
        c, h, w = t.data.shape
        if c != self.cfg.in_channels or h != w or h not in (127, 255):
            raise ValueError(
                f"expected ({self.cfg.in_channels}, 127, 127) or "
                f"({self.cfg.in_channels}, 255, 255) input, got {t.data.shape}"
            )
        out = t
        for i, ((k, s), (wt, bt)) in enumerate(zip(BACKBONE_LAYERS, self.convs)):
            out = net.conv2d(out, wt, bt, stride=s)
            if i < len(BACKBONE_LAYERS) - 1:
                out = out.relu()
            if i in POOL_AFTER:
                out = net.maxpool2d(out, 3, 2)
        return out

    def forward(self, model_fm: Tensor, search_fm: Tensor) -> tuple[Tensor, Tensor]:
        """RPN branches: returns cls logits (5, 17, 17) and reg (10, 17, 17)."""
        if model_fm.data.shape[-1] != MODEL_FM or search_fm.data.shape[-1] != SEARCH_FM:
            raise ValueError(
                f"expected {MODEL_FM}x{MODEL_FM} model and {SEARCH_FM}x{SEARCH_FM} "
                f"search maps, got {model_fm.data.shape} / {search_fm.data.shape}"
            )
        maps = {}
        for branch in ("cls", "reg"):
            mw, mb = self.adapters[(branch, "model")]
            sw, sb = self.adapters[(branch, "search")]
            template = net.conv2d(model_fm, mw, mb)
            search = net.conv2d(search_fm, sw, sb)
            maps[branch] = net.xcorr_depthwise(search, template)
        cls_logits = net.conv2d(maps["cls"], self.cls_head[0], self.cls_head[1])
        reg = net.conv2d(maps["reg"], self.reg_head[0], self.reg_head[1])
        return cls_logits, reg

    def propose(self, model_bev: BevImage, search_bev: BevImage) -> RpnOutput:
        """Inference pass producing numpy score/offset grids."""
        with net.no_grad():
            cls_logits, reg = self.forward(self.embed(model_bev), self.embed(search_bev))
        scores = 1.0 / (1.0 + np.exp(-cls_logits.data))
        cls = scores.transpose(1, 2, 0)
        pairs = reg.data.reshape(N_ANGLES, 2, GRID_SIZE, GRID_SIZE).transpose(2, 3, 0, 1)
        return RpnOutput(cls=np.ascontiguousarray(cls), reg=np.ascontiguousarray(pairs))


def anchor_flat_index(i: int, j: int, k: int) -> int:
    return (i * GRID_SIZE + j) * N_ANGLES + k


def build_anchor_grid(prev: PoseBev, spec: BoxSpec, image: BevImage) -> AnchorGrid:
    """Anchor centers on the backbone's output grid: cell (8, 8) maps
    exactly to the previous pose; heading offsets span +-5 degrees."""
    stride_m = TOTAL_STRIDE * image.resolution
    offs = (np.arange(GRID_SIZE) - GRID_SIZE // 2) * stride_m
    xi, zj = np.meshgrid(offs, offs, indexing="ij")
    c, s = math.cos(prev.theta), math.sin(prev.theta)
    xs = prev.x + c * xi - s * zj
    zs = prev.z + s * xi + c * zj
    thetas = np.array(
        [wrap_angle(prev.theta + math.radians(d)) for d in ANGLE_OFFSETS_DEG]
    )
    return AnchorGrid(xs=xs, zs=zs, thetas=thetas, w=spec.w, l=spec.l, feature_stride_m=stride_m)


def cosine_window(size: int = GRID_SIZE) -> np.ndarray:
    """Outer product of Hann profiles, peaking at 1 in the center cell."""
    h = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(size) / (size - 1))
    return np.outer(h, h)


def decode_and_rank(
    out: RpnOutput,
    grid: AnchorGrid,
    window_gamma: float = 0.3,
    top_c: int = 16,
) -> list[Proposal]:
    """Decode anchor offsets into world rects and rank by the cosine-window
    blended score, descending with stable index tie-break."""
    if top_c <= 0:
        raise ValueError(f"top_c must be positive, got {top_c}")
    if top_c > grid.count:
        raise ValueError(f"top_c {top_c} exceeds anchor count {grid.count}")
    window = cosine_window()
    blended = (1.0 - window_gamma) * out.cls + window_gamma * window[:, :, None]
    order = np.argsort(-blended.ravel(), kind="stable")[:top_c]
    proposals = []
    for flat in order:
        i, rem = divmod(int(flat), GRID_SIZE * N_ANGLES)
        j, k = divmod(rem, N_ANGLES)
        dx, dz = out.reg[i, j, k]
        x = grid.xs[i, j] + dx * grid.w
        z = grid.zs[i, j] + dz * grid.l
        proposals.append(
            Proposal(
                rect=Rect(float(x), float(z), float(grid.thetas[k]), grid.w, grid.l),
                raw_score=float(out.cls[i, j, k]),
                windowed_score=float(blended[i, j, k]),
                anchor_index=int(flat),
            )
        )
    return proposals
