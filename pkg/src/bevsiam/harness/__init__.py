from .data import (
    DatasetError,
    FrameParseError,
    SequenceDataset,
    Tracklet,
    compute_content_hash,
    load_frame,
    load_sequence,
    read_track_results,
    require_verified,
    save_dataset,
    write_frame,
    write_loss_history,
    write_track_results,
)
from .synth import SceneConfig, SyntheticTracklet, generate_synthetic, generate_tracklet, sample_box_points
from .cli import run_command

__all__ = [
    "DatasetError",
    "FrameParseError",
    "SequenceDataset",
    "Tracklet",
    "compute_content_hash",
    "load_frame",
    "load_sequence",
    "read_track_results",
    "require_verified",
    "save_dataset",
    "write_frame",
    "write_loss_history",
    "write_track_results",
    "SceneConfig",
    "SyntheticTracklet",
    "generate_synthetic",
    "generate_tracklet",
    "sample_box_points",
    "run_command",
]
