"""Construction and persistence of the full network pair (BEV RPN plus 3D
shape Siamese) over one shared parameter store."""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .bev import BevConfig
from .net import ParamStore, load_checkpoint, save_checkpoint
from .rpn2d import RpnConfig, SiamRpn
from .sim3d import ShapeSiamese, Sim3dConfig


@dataclass(frozen=True)
class PipelineConfig:
    bev: BevConfig = field(default_factory=BevConfig)
    rpn: RpnConfig = field(default_factory=RpnConfig)
    sim: Sim3dConfig = field(default_factory=Sim3dConfig)
    sigma: float = 1.0  # gaussian distance-score width, meters

    def __post_init__(self):
        if self.rpn.in_channels != self.bev.n_channels:
            raise ValueError(
                f"rpn in_channels {self.rpn.in_channels} must match "
                f"bev channel count {self.bev.n_channels}"
            )


@dataclass
class NetBundle:
    store: ParamStore
    rpn: SiamRpn
    sim: ShapeSiamese
    cfg: PipelineConfig


def build_nets(cfg: PipelineConfig, seed: int = 0, dtype=np.float32) -> NetBundle:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xB57C]))
    store = ParamStore()
    rpn = SiamRpn(store, cfg.rpn, rng, dtype=dtype)
    sim = ShapeSiamese(store, cfg.sim, rng, dtype=dtype)
    return NetBundle(store=store, rpn=rpn, sim=sim, cfg=cfg)


def _config_meta(cfg: PipelineConfig) -> dict:
    b, r, s = cfg.bev, cfg.rpn, cfg.sim
    return {
        "bev.n_slices": b.n_slices,
        "bev.vertical_extent": repr(b.vertical_extent),
        "bev.model_extent": repr(b.model_extent),
        "bev.search_extent": repr(b.search_extent),
        "bev.model_px": b.model_px,
        "bev.search_px": b.search_px,
        "bev.density_saturation": b.density_saturation,
        "rpn.in_channels": r.in_channels,
        "rpn.widths": ",".join(str(w) for w in r.widths),
        "rpn.adapter_width": r.adapter_width,
        "rpn.window_gamma": repr(r.window_gamma),
        "sim.mlp_widths": ",".join(str(w) for w in s.mlp_widths),
        "sim.latent_k": s.latent_k,
        "sim.decoder_m": s.decoder_m,
        "sim.decoder_hidden": s.decoder_hidden,
        "sigma": repr(cfg.sigma),
    }


def config_from_meta(meta: dict) -> PipelineConfig:
    bev = BevConfig(
        n_slices=int(meta["bev.n_slices"]),
        vertical_extent=float(meta["bev.vertical_extent"]),
        model_extent=float(meta["bev.model_extent"]),
        search_extent=float(meta["bev.search_extent"]),
        model_px=int(meta["bev.model_px"]),
        search_px=int(meta["bev.search_px"]),
        density_saturation=int(meta["bev.density_saturation"]),
    )
    rpn = RpnConfig(
        in_channels=int(meta["rpn.in_channels"]),
        widths=tuple(int(w) for w in meta["rpn.widths"].split(",")),
        adapter_width=int(meta["rpn.adapter_width"]),
        window_gamma=float(meta["rpn.window_gamma"]),
    )
    sim = Sim3dConfig(
        mlp_widths=tuple(int(w) for w in meta["sim.mlp_widths"].split(",")),
        latent_k=int(meta["sim.latent_k"]),
        decoder_m=int(meta["sim.decoder_m"]),
        decoder_hidden=int(meta["sim.decoder_hidden"]),
    )
    return PipelineConfig(bev=bev, rpn=rpn, sim=sim, sigma=float(meta["sigma"]))


def save_nets(bundle: NetBundle, path, extra_meta: dict | None = None) -> None:
    arrays = OrderedDict(bundle.store.items())
    meta = _config_meta(bundle.cfg)
    for key, value in (extra_meta or {}).items():
        meta[f"extra.{key}"] = value
    save_checkpoint(path, OrderedDict((k, t.data) for k, t in arrays.items()), meta)


def load_nets(path, dtype=np.float32) -> NetBundle:
    arrays, meta = load_checkpoint(path)
    cfg = config_from_meta(meta)
    bundle = build_nets(cfg, seed=0, dtype=dtype)
    bundle.store.load_arrays(arrays)
    return bundle
