"""BEV-proposal-driven 3D single-object tracking in LIDAR point clouds.

A 2D bird-eye-view Siamese region proposal network generates candidate
boxes, a 3D point-cloud Siamese network with shape-completion
regularization ranks them, and Kalman/particle/exhaustive baselines plus
one-pass evaluation support the comparison harness.
"""

__version__ = "0.1.0"

from . import bev, evalrep, geom, net, pipeline, rpn2d, search, sim3d, track, train

__all__ = [
    "bev",
    "evalrep",
    "geom",
    "net",
    "pipeline",
    "rpn2d",
    "search",
    "sim3d",
    "track",
    "train",
    "__version__",
]
