"""Dataset persistence and ingestion.

On-disk layout:
    dataset/manifest.json
    dataset/frames/<tid>/<frame>.bin   # float32 LE (x, y, z, intensity)
    dataset/labels/<tid>.json          # {"frames": [{frame,x,y,z,theta,w,h,l}]}

Frame files use a sensor convention with z up; loading remaps to the
internal y-up frame. Labels are stored in the internal convention with y
the vertical box center. The manifest carries a content hash that
consumers verify before trusting a dataset.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from ..geom import Box3d, BoxSpec, PoseBev
from ..ioutil import atomic_write_bytes, atomic_write_text

MANIFEST_FORMAT = "bevsiam-dataset-v1"
RECORD_BYTES = 16  # four little-endian float32 values

# column permutation between internal (y up) and sensor (z up) frames;
# it is its own inverse
_SWAP_YZ = (0, 2, 1)


class DatasetError(ValueError):
    pass


class FrameParseError(DatasetError):
    def __init__(self, path, offset: int, message: str):
        super().__init__(f"{path}: byte offset {offset}: {message}")
        self.offset = offset


@dataclass
class Tracklet:
    tid: str
    label: str
    frame_paths: list
    boxes: list

    @property
    def n_frames(self) -> int:
        return len(self.frame_paths)

    def load_frame(self, i: int) -> np.ndarray:
        return load_frame(self.frame_paths[i])

    def load_frames(self) -> list:
        return [self.load_frame(i) for i in range(self.n_frames)]


@dataclass
class SequenceDataset:
    root: Path
    tracklets: list
    manifest: dict

    def tracklet(self, tid: str) -> Tracklet:
        for tr in self.tracklets:
            if tr.tid == tid:
                return tr
        raise KeyError(tid)

    def verify_content(self) -> bool:
        return compute_content_hash(self.root) == self.manifest.get("content_sha256")


def write_frame(path, points_internal: np.ndarray) -> None:
    pts = np.asarray(points_internal, dtype=np.float32).reshape(-1, 3)
    sensor = pts[:, _SWAP_YZ]
    rec = np.zeros((sensor.shape[0], 4), dtype="<f4")
    rec[:, :3] = sensor
    atomic_write_bytes(path, rec.tobytes())


def load_frame(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"missing frame file {path}")
    raw = path.read_bytes()
    if len(raw) % RECORD_BYTES != 0:
        offset = (len(raw) // RECORD_BYTES) * RECORD_BYTES
        raise FrameParseError(
            path, offset, f"trailing {len(raw) - offset} bytes are not a full record"
        )
    rec = np.frombuffer(raw, dtype="<f4").reshape(-1, 4)
    return rec[:, :3][:, _SWAP_YZ].astype(float)


def _box_to_json(frame_idx: int, box: Box3d) -> dict:
    return {
        "frame": frame_idx,
        "x": box.pose.x,
        "y": box.y_center,
        "z": box.pose.z,
        "theta": box.pose.theta,
        "w": box.spec.w,
        "h": box.spec.h,
        "l": box.spec.l,
    }


def _box_from_json(entry: dict) -> Box3d:
    spec = BoxSpec(w=entry["w"], l=entry["l"], h=entry["h"])
    return Box3d(PoseBev(entry["x"], entry["z"], entry["theta"]), spec, entry["y"])


def compute_content_hash(root) -> str:
    """SHA-256 over every frame and label file, path-prefixed, in sorted
    relative-path order."""
    root = Path(root)
    digest = hashlib.sha256()
    paths = sorted(
        list((root / "frames").rglob("*.bin")) + list((root / "labels").glob("*.json"))
    )
    for path in paths:
        digest.update(str(path.relative_to(root)).encode())
        digest.update(b"\0")
        digest.update(path.read_bytes())
    return digest.hexdigest()


def save_dataset(root, tracklets, config: dict | None = None, seed: int | None = None) -> Path:
    """Write synthetic tracklets (objects with tid/label/boxes/frames) into
    the dataset layout and return the manifest path."""
    root = Path(root)
    entries = []
    for tr in tracklets:
        frame_dir = root / "frames" / tr.tid
        for i, pts in enumerate(tr.frames):
            write_frame(frame_dir / f"{i:04d}.bin", pts)
        label = {
            "tid": tr.tid,
            "class": tr.label,
            "frames": [_box_to_json(i, b) for i, b in enumerate(tr.boxes)],
        }
        atomic_write_text(root / "labels" / f"{tr.tid}.json", json.dumps(label, indent=1, sort_keys=True))
        entries.append({"tid": tr.tid, "class": tr.label, "frames": len(tr.frames)})
    manifest = {
        "format": MANIFEST_FORMAT,
        "seed": seed,
        "config": config or {},
        "tracklets": entries,
        "content_sha256": compute_content_hash(root),
    }
    path = root / "manifest.json"
    atomic_write_text(path, json.dumps(manifest, indent=1, sort_keys=True))
    return path


def load_sequence(root) -> SequenceDataset:
    """Load a dataset directory, checking layout consistency (content hash
    verification is a separate, heavier step)."""
    root = Path(root)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise DatasetError(f"no manifest.json under {root}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format") != MANIFEST_FORMAT:
        raise DatasetError(f"unsupported dataset format {manifest.get('format')!r}")
    tracklets = []
    for entry in manifest["tracklets"]:
        tid = entry["tid"]
        label_path = root / "labels" / f"{tid}.json"
        if not label_path.exists():
            raise DatasetError(f"missing label file {label_path}")
        label = json.loads(label_path.read_text())
        boxes = [_box_from_json(e) for e in sorted(label["frames"], key=lambda e: e["frame"])]
        frame_paths = [root / "frames" / tid / f"{i:04d}.bin" for i in range(entry["frames"])]
        for p in frame_paths:
            if not p.exists():
                raise DatasetError(f"missing frame file {p}")
        if len(boxes) != len(frame_paths):
            raise DatasetError(f"{tid}: {len(boxes)} labels for {len(frame_paths)} frames")
        spec0 = boxes[0].spec
        if any(b.spec != spec0 for b in boxes):
            raise DatasetError(f"{tid}: box dimensions vary along the tracklet")
        tracklets.append(
            Tracklet(tid=tid, label=label.get("class", "car"), frame_paths=frame_paths, boxes=boxes)
        )
    return SequenceDataset(root=root, tracklets=tracklets, manifest=manifest)


def require_verified(ds: SequenceDataset, force: bool = False) -> None:
    if force:
        return
    if not ds.verify_content():
        raise DatasetError(
            f"{ds.root}: content hash mismatch with manifest; pass --force to override"
        )


# -- results CSV --------------------------------------------------------------

TRACK_CSV_HEADER = (
    "tracklet_id,frame,x,z,theta,w,h,l,score,candidates,ms_raster,ms_propose,ms_rank"
)


def write_track_results(path, rows) -> None:
    """Rows: (tid, frame, Box3d, score, candidates, ms_raster, ms_propose, ms_rank)."""
    lines = [TRACK_CSV_HEADER]
    for tid, frame, box, score, cand, ms_r, ms_p, ms_k in rows:
        lines.append(
            f"{tid},{frame},{box.pose.x!r},{box.pose.z!r},{box.pose.theta!r},"
            f"{box.spec.w!r},{box.spec.h!r},{box.spec.l!r},{score!r},{cand},"
            f"{ms_r:.3f},{ms_p:.3f},{ms_k:.3f}"
        )
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_track_results(path):
    """Parse a results CSV back into (tid, frame, Box3d, score) tuples.

    The CSV stores the planar state only; y_center is reconstructed as h/2,
    which evaluation never consults (metrics are footprint-based).
    """
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != TRACK_CSV_HEADER:
        raise DatasetError(f"{path}: unrecognized results header")
    out = []
    for line in lines[1:]:
        if not line:
            continue
        parts = line.split(",")
        tid, frame = parts[0], int(parts[1])
        x, z, theta, w, h, l, score = (float(v) for v in parts[2:9])
        box = Box3d(PoseBev(x, z, theta), BoxSpec(w=w, l=l, h=h), h / 2.0)
        out.append((tid, frame, box, score))
    return out


def write_loss_history(path, records) -> None:
    lines = ["epoch,step,l_cls,l_reg,l_tr,l_comp,total,lr"]
    for r in records:
        lines.append(
            f"{r.epoch},{r.step},{r.l_cls!r},{r.l_reg!r},{r.l_tr!r},"
            f"{r.l_comp!r},{r.total!r},{r.lr!r}"
        )
    atomic_write_text(path, "\n".join(lines) + "\n")
