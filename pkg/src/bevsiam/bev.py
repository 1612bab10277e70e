"""Rasterization of point clouds into multi-channel bird-eye-view images.

A raster is taken in a crop frame centered on a pose and rotated so the
pose's heading runs along the image row axis. Channels are ``n_slices``
per-band normalized max heights, one overall max-height map, and one
log-saturated density map; all values lie in [0, 1].
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geom import PoseBev
from .ioutil import atomic_write_bytes


class OutOfExtentError(ValueError):
    """Raised when a point lies outside a raster's square extent."""


@dataclass(frozen=True)
class BevConfig:
    n_slices: int = 1
    vertical_extent: float = 1.0
    model_extent: float = 2.5
    search_extent: float = 5.0
    model_px: int = 127
    search_px: int = 255
    density_saturation: int = 63

    def __post_init__(self):
        if self.n_slices < 1:
            raise ValueError("n_slices must be >= 1")
        if self.vertical_extent <= 0 or self.model_extent <= 0 or self.search_extent <= 0:
            raise ValueError("extents must be positive")
        if self.model_px % 2 == 0 or self.search_px % 2 == 0:
            raise ValueError("pixel sizes must be odd")

    @property
    def n_channels(self) -> int:
        return self.n_slices + 2


@dataclass
class BevImage:
    """(n_slices + 2, px, px) raster with its world mapping."""

    channels: np.ndarray
    resolution: float
    origin_pose: PoseBev
    extent: float

    @property
    def out_px(self) -> int:
        return self.channels.shape[-1]


def rasterize_bev(
    pc: np.ndarray,
    center: PoseBev,
    extent: float,
    out_px: int,
    cfg: BevConfig,
    y_center: float = 0.0,
) -> BevImage:
    """Rasterize a cloud into a BEV image around ``center``.

    Points are rotated into the heading-aligned crop frame; points outside
    the square extent or the vertical band ``y_center +- vertical_extent``
    are dropped (boundary included). An empty selection yields an all-zero
    image.
    """
    if out_px % 2 == 0:
        raise ValueError("out_px must be odd")
    if extent <= 0:
        raise ValueError("extent must be positive")
    pts = np.asarray(pc, dtype=float).reshape(-1, 3)
    res = 2.0 * extent / out_px
    channels = np.zeros((cfg.n_channels, out_px, out_px), dtype=np.float32)
    image = BevImage(channels, res, center, extent)
    if pts.shape[0] == 0:
        return image

    c, s = math.cos(center.theta), math.sin(center.theta)
    dx = pts[:, 0] - center.x
    dz = pts[:, 2] - center.z
    xc = c * dx + s * dz
    zc = -s * dx + c * dz
    dy = pts[:, 1] - y_center

    ve = cfg.vertical_extent
    keep = (
        (np.abs(xc) <= extent)
        & (np.abs(zc) <= extent)
        & (np.abs(dy) <= ve)
    )
    if not np.any(keep):
        return image
    xc, zc, dy = xc[keep], zc[keep], dy[keep]

    rows = np.clip(np.floor((xc + extent) / res).astype(np.intp), 0, out_px - 1)
    cols = np.clip(np.floor((zc + extent) / res).astype(np.intp), 0, out_px - 1)
    flat = rows * out_px + cols

    band_h = 2.0 * ve / cfg.n_slices
    band_idx = np.clip(np.floor((dy + ve) / band_h).astype(np.intp), 0, cfg.n_slices - 1)
    band_frac = np.clip((dy + ve - band_idx * band_h) / band_h, 0.0, 1.0)
    for k in range(cfg.n_slices):
        sel = band_idx == k
        if np.any(sel):
            plane = np.zeros(out_px * out_px, dtype=np.float32)
            np.maximum.at(plane, flat[sel], band_frac[sel].astype(np.float32))
            channels[k] = plane.reshape(out_px, out_px)

    overall = np.zeros(out_px * out_px, dtype=np.float32)
    np.maximum.at(overall, flat, ((dy + ve) / (2.0 * ve)).astype(np.float32))
    channels[cfg.n_slices] = overall.reshape(out_px, out_px)

    counts = np.bincount(flat, minlength=out_px * out_px).astype(np.float32)
    dens = np.log1p(counts) / math.log1p(cfg.density_saturation)
    channels[cfg.n_slices + 1] = np.minimum(dens, 1.0).reshape(out_px, out_px)
    return image


def world_to_pixel(image: BevImage, point_xz) -> tuple[float, float]:
    """Map a world (x, z) point to fractional (row, col) pixel coordinates."""
    x, z = float(point_xz[0]), float(point_xz[1])
    p = image.origin_pose
    c, s = math.cos(p.theta), math.sin(p.theta)
    dx, dz = x - p.x, z - p.z
    xc = c * dx + s * dz
    zc = -s * dx + c * dz
    if abs(xc) > image.extent or abs(zc) > image.extent:
        raise OutOfExtentError(
            f"point ({x:.3f}, {z:.3f}) outside +-{image.extent} m crop extent"
        )
    half = (image.out_px - 1) / 2.0
    return xc / image.resolution + half, zc / image.resolution + half


def pixel_to_world(image: BevImage, row_col) -> tuple[float, float]:
    """Inverse of :func:`world_to_pixel` for fractional pixel coordinates."""
    row, col = float(row_col[0]), float(row_col[1])
    half = (image.out_px - 1) / 2.0
    xc = (row - half) * image.resolution
    zc = (col - half) * image.resolution
    p = image.origin_pose
    c, s = math.cos(p.theta), math.sin(p.theta)
    return c * xc - s * zc + p.x, s * xc + c * zc + p.z


def write_pgm_channels(image: BevImage, out_dir, tag: str) -> list:
    """Dump each channel as an 8-bit binary PGM named ``<tag>_c<k>.pgm``."""
    from pathlib import Path

    out_dir = Path(out_dir)
    paths = []
    for k in range(image.channels.shape[0]):
        plane = np.clip(np.round(image.channels[k] * 255.0), 0, 255).astype(np.uint8)
        header = f"P5\n{plane.shape[1]} {plane.shape[0]}\n255\n".encode("ascii")
        path = out_dir / f"{tag}_c{k}.pgm"
        atomic_write_bytes(path, header + plane.tobytes())
        paths.append(path)
    return paths
