"""Loss primitives with gradients: binary cross entropy, smooth L1,
cosine similarity, and Chamfer distance."""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

from .tensor import Tensor, _acc, _result

PROB_EPS = 1e-7


def bce(p: Tensor, target) -> Tensor:
    """Elementwise binary cross entropy of probabilities against {0,1}
    targets; probabilities are clamped to [1e-7, 1 - 1e-7]."""
    t = np.asarray(target, dtype=p.data.dtype)
    pc = p.clip(PROB_EPS, 1.0 - PROB_EPS)
    one = Tensor(np.ones_like(pc.data))
    return -(pc.log() * t + (one - pc).log() * (1.0 - t))


def smooth_l1(pred: Tensor, target) -> Tensor:
    """Elementwise smooth L1: 0.5 d^2 for |d| < 1, |d| - 0.5 otherwise."""
    t = np.asarray(target, dtype=pred.data.dtype)
    diff = pred.data - t
    absd = np.abs(diff)
    quad = absd < 1.0
    out, rec = _result(np.where(quad, 0.5 * diff * diff, absd - 0.5), (pred,))
    if rec:

        def backward():
            _acc(pred, out.grad * np.where(quad, diff, np.sign(diff)))

        out._backward = backward
    return out


def cosine_similarity(u: Tensor, v: Tensor) -> Tensor:
    """Cosine of the angle between two 1-D vectors."""
    nu = float(np.linalg.norm(u.data))
    nv = float(np.linalg.norm(v.data))
    if nu == 0.0 or nv == 0.0:
        raise ValueError("cosine similarity undefined for a zero-norm vector")
    dot = (u * v).sum()
    return dot / ((u * u).sum().sqrt() * (v * v).sum().sqrt())


def chamfer_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    """Symmetric Chamfer distance from a differentiable (m, 3) cloud to a
    fixed target cloud: both directed sums of squared NN distances.

    Gradients flow to ``pred`` with the nearest-neighbor assignments from
    the forward pass held fixed.
    """
    tgt = np.asarray(target, dtype=pred.data.dtype).reshape(-1, 3)
    if pred.data.shape[0] == 0 or tgt.shape[0] == 0:
        raise ValueError("chamfer requires two non-empty clouds")
    d_pt, idx_pt = cKDTree(tgt).query(pred.data, k=1)
    d_tp, idx_tp = cKDTree(pred.data).query(tgt, k=1)
    value = np.asarray(np.sum(d_pt**2) + np.sum(d_tp**2), dtype=pred.data.dtype)
    out, rec = _result(value, (pred,))
    if rec:

        def backward():
            g = 2.0 * (pred.data - tgt[idx_pt])
            back = np.zeros_like(pred.data)
            np.add.at(back, idx_tp, 2.0 * (pred.data[idx_tp] - tgt))
            _acc(pred, out.grad * (g + back))

        out._backward = backward
    return out
