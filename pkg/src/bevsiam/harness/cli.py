"""Command-line entry points: synth | train | track | eval | compare-search.

Exit codes: 0 on success, 1 on usage errors, 2 on runtime errors. All
randomness is governed by --seed; every run drops its resolved
configuration next to its outputs.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from ..evalrep import OpeSummary, emit_report, ope_metrics, proposal_curves
from ..geom import Aggregation, project_to_bev
from ..ioutil import atomic_write_text
from ..pipeline import PipelineConfig, load_nets, save_nets
from ..track import TrackConfig, run_tracklet
from ..train import LossWeights, TrainConfig, fit
from .data import (
    load_sequence,
    read_track_results,
    require_verified,
    save_dataset,
    write_loss_history,
    write_track_results,
)
from .synth import SceneConfig, generate_synthetic

CURVE_COUNTS = (1, 2, 4, 8, 12, 16, 24, 32, 48, 64, 96, 128, 160)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _build_parser() -> _Parser:
    parser = _Parser(prog="bevsiam", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--tracklets", type=int, default=8)
    p.add_argument("--frames", type=int, default=40)
    p.add_argument("--distractors", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train", help="train the networks on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=3)
    p.add_argument("--frames-per-tracklet", type=int, default=12)
    p.add_argument("--lambda-cls", type=float, default=1e-2)
    p.add_argument("--lambda-reg", type=float, default=1.0)
    p.add_argument("--lambda-tr", type=float, default=1e-2)
    p.add_argument("--lambda-comp", type=float, default=1e-6)
    p.add_argument("--sigma", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--force", action="store_true")

    p = sub.add_parser("track", help="run the tracker over a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True, help="results CSV path")
    p.add_argument("--search", choices=("rpn", "kf", "pf", "exhaustive"), default="rpn")
    p.add_argument("--topk", type=int, default=16)
    p.add_argument(
        "--aggregation", choices=tuple(a.value for a in Aggregation), default="all"
    )
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--force", action="store_true")

    p = sub.add_parser("eval", help="OPE metrics for a results CSV")
    p.add_argument("--data", required=True)
    p.add_argument("--results", required=True)
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument("--label", default=None)
    p.add_argument("--force", action="store_true")

    p = sub.add_parser("compare-search", help="proposal curves for rpn/kf/pf")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True, help="figure directory")
    p.add_argument("--max-candidates", type=int, default=160)
    p.add_argument(
        "--aggregation", choices=tuple(a.value for a in Aggregation), default="all"
    )
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--force", action="store_true")
    return parser


def _write_config(out_dir: Path, args: argparse.Namespace) -> None:
    resolved = {k: v for k, v in sorted(vars(args).items())}
    out_dir.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out_dir / "config.json", json.dumps(resolved, indent=1, sort_keys=True))


def _cmd_synth(args) -> int:
    cfg = SceneConfig(
        n_tracklets=args.tracklets,
        frames=args.frames,
        n_distractors=args.distractors,
        seed=args.seed,
    )
    tracklets = generate_synthetic(cfg)
    manifest = save_dataset(args.out, tracklets, config=dataclasses.asdict(cfg), seed=args.seed)
    _write_config(Path(args.out), args)
    print(f"wrote {len(tracklets)} tracklets to {args.out} ({manifest})")
    return 0


def _cmd_train(args) -> int:
    ds = load_sequence(args.data)
    require_verified(ds, args.force)
    weights = LossWeights(
        lam_cls=args.lambda_cls,
        lam_reg=args.lambda_reg,
        lam_tr=args.lambda_tr,
        lam_comp=args.lambda_comp,
    )
    cfg = TrainConfig(
        pipeline=PipelineConfig(sigma=args.sigma),
        weights=weights,
        epochs=args.epochs,
        frames_per_tracklet=args.frames_per_tracklet,
        seed=args.seed,
    )
    result = fit(ds.tracklets, cfg, log=print)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "checkpoint.bstk"
    save_nets(result.bundle, ckpt, extra_meta={"seed": args.seed})
    write_loss_history(out / "loss_history.csv", result.history)
    _write_config(out, args)
    print(f"checkpoint: {ckpt}")
    return 0


def _run_dataset(ds, bundle, cfg: TrackConfig, seed: int):
    """Track every tracklet; yields (tracklet, result) pairs."""
    for idx, tr in enumerate(sorted(ds.tracklets, key=lambda t: t.tid)):
        run_cfg = dataclasses.replace(cfg, seed=seed + 7919 * idx)
        frames = tr.load_frames()
        yield tr, run_tracklet(frames, tr.boxes, bundle, run_cfg)


def _cmd_track(args) -> int:
    ds = load_sequence(args.data)
    require_verified(ds, args.force)
    bundle = load_nets(args.ckpt)
    cfg = TrackConfig(
        search=args.search,
        topk=args.topk,
        aggregation=Aggregation(args.aggregation),
        seed=args.seed,
    )
    rows = []
    for tr, result in _run_dataset(ds, bundle, cfg, args.seed):
        for t, (box, diag) in enumerate(zip(result.boxes, result.diags), start=1):
            rows.append(
                (
                    tr.tid,
                    t,
                    box,
                    diag.score,
                    diag.candidates,
                    diag.ms_raster,
                    diag.ms_propose,
                    diag.ms_rank,
                )
            )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_track_results(out, rows)
    _write_config(out.parent, args)
    print(f"results: {out} ({len(rows)} predictions)")
    return 0


def _cmd_eval(args) -> int:
    ds = load_sequence(args.data)
    require_verified(ds, args.force)
    rows = read_track_results(args.results)
    by_tid: dict[str, dict[int, object]] = {}
    for tid, frame, box, _score in rows:
        by_tid.setdefault(tid, {})[frame] = box
    label = args.label or Path(args.results).stem
    runs = []
    all_preds = []
    all_gts = []
    for tid in sorted(by_tid):
        tr = ds.tracklet(tid)
        frames = sorted(by_tid[tid])
        preds = [by_tid[tid][f] for f in frames]
        gts = [tr.boxes[f] for f in frames]
        runs.append((f"{label}/{tid}", ope_metrics(preds, gts)))
        all_preds.extend(preds)
        all_gts.extend(gts)
    pooled = ope_metrics(all_preds, all_gts)
    runs.insert(0, (label, pooled))
    paths = emit_report(runs, args.out)
    _write_config(Path(args.out), args)
    print(f"{label}: {pooled.formatted()}  ({paths['report']})")
    return 0


def _cmd_compare_search(args) -> int:
    ds = load_sequence(args.data)
    require_verified(ds, args.force)
    bundle = load_nets(args.ckpt)
    counts = [c for c in CURVE_COUNTS if c <= args.max_candidates]
    if not counts or counts[-1] != args.max_candidates:
        counts.append(args.max_candidates)
    runs = []
    for mode in ("rpn", "kf", "pf"):
        cfg = TrackConfig(
            search=mode,
            topk=args.max_candidates,
            aggregation=Aggregation(args.aggregation),
            record_streams=True,
            seed=args.seed,
        )
        streams = []
        gt_rects = []
        for tr, result in _run_dataset(ds, bundle, cfg, args.seed):
            for t, diag in enumerate(result.diags, start=1):
                streams.append(diag.stream)
                gt_rects.append(project_to_bev(tr.boxes[t]))
        curve = proposal_curves(streams, gt_rects, counts)
        runs.append((mode, curve))
        at16 = min(range(len(counts)), key=lambda i: abs(counts[i] - 16))
        print(
            f"{mode}: oracle@{counts[at16]} {curve.oracle[at16].formatted()}  "
            f"selector@{counts[at16]} {curve.selector[at16].formatted()}"
        )
    paths = emit_report(runs, args.out)
    _write_config(Path(args.out), args)
    print(f"report: {paths['report']}")
    return 0


_COMMANDS = {
    "synth": _cmd_synth,
    "train": _cmd_train,
    "track": _cmd_track,
    "eval": _cmd_eval,
    "compare-search": _cmd_compare_search,
}


def run_command(argv) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as err:
        print(str(err), file=sys.stderr)
        return 1
    except SystemExit as err:  # --help lands here
        return int(err.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except BrokenPipeError:
        return 2
    except Exception as err:
        print(f"bevsiam {args.command}: error: {err}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run_command(sys.argv[1:]))
