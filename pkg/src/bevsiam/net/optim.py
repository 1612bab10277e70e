"""Parameter storage, SGD with momentum, and plateau-driven LR decay."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


class ParamStore:
    """Named trainable parameters with per-parameter momentum buffers.

    Declaration (insertion) order is the canonical serialization order.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._velocity: dict[str, np.ndarray] = {}

    def add(self, name: str, data: np.ndarray) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(data), requires_grad=True)
        self._params[name] = t
        self._velocity[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def velocity(self, name: str) -> np.ndarray:
        return self._velocity[name]

    def n_scalars(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def fill_missing_grads(self) -> None:
        """Give zero gradients to parameters whose subgraph was disabled
        (e.g. a loss term with weight 0 that was skipped entirely)."""
        for t in self._params.values():
            if t.grad is None:
                t.grad = np.zeros_like(t.data)

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self._params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, t in self._params.items():
            if name not in arrays:
                raise KeyError(f"missing parameter {name!r}")
            src = np.asarray(arrays[name])
            if src.shape != t.data.shape:
                raise ValueError(
                    f"shape mismatch for {name!r}: {src.shape} vs {t.data.shape}"
                )
            t.data = src.astype(t.data.dtype)
            self._velocity[name] = np.zeros_like(t.data)


def sgd_step(store: ParamStore, lr: float, momentum: float = 0.9) -> None:
    """v <- momentum * v + g; p <- p - lr * v."""
    for name, t in store.items():
        if t.grad is None:
            raise ValueError(f"parameter {name!r} has no gradient")
        v = store.velocity(name)
        v *= momentum
        v += t.grad
        t.data = t.data - lr * v


@dataclass
class PlateauSchedule:
    """Divide the learning rate by ``factor`` after the validation loss
    stalls for more than ``patience`` consecutive updates."""

    lr: float = 1e-4
    factor: float = 10.0
    patience: int = 2
    min_rel_improve: float = 1e-4
    best_loss: float | None = field(default=None)
    stall_count: int = field(default=0)

    def update(self, val_loss: float) -> float:
        if not np.isfinite(val_loss):
            raise ValueError(f"validation loss must be finite, got {val_loss}")
        improved = self.best_loss is None or val_loss < self.best_loss * (
            1.0 - self.min_rel_improve
        )
        if improved:
            self.best_loss = val_loss
            self.stall_count = 0
        else:
            self.stall_count += 1
            if self.stall_count > self.patience:
                self.lr /= self.factor
                self.stall_count = 0
        return self.lr
