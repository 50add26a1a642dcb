"""SGD with Nesterov momentum, learning-rate-scaled ADADELTA, and annealing."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any

import numpy as np

logger = logging.getLogger(__name__)


@dataclass
class OptimizerState:
    velocity: np.ndarray
    learning_rate: float
    momentum: float = 0.9
    kind: str = "sgd"
    rms_decay: float = 0.99
    epsilon: float = 1e-6
    rms_grad: np.ndarray | None = None
    rms_update: np.ndarray | None = None
    rejected: int = 0

    @classmethod
    def create(cls, size: int, kind: str = "sgd", learning_rate: float = 1e-3, momentum: float = 0.9,
               rms_decay: float = 0.99, epsilon: float = 1e-6) -> "OptimizerState":
        if kind not in ("sgd", "adadelta"):
            raise ValueError(f"unknown optimizer {kind!r}")
        state = cls(np.zeros(size), learning_rate, momentum, kind, rms_decay, epsilon)
        if kind == "adadelta":
            state.rms_grad = np.zeros(size)
            state.rms_update = np.zeros(size)
        return state

    def step(self, params: np.ndarray, grad: np.ndarray) -> bool:
        if self.kind == "adadelta":
            return adadelta_step(params, grad, self)
        return sgd_nesterov_step(params, grad, self)


def _nesterov(params, direction, state):
    state.velocity *= state.momentum
    state.velocity -= state.learning_rate * direction
    params += state.momentum * state.velocity - state.learning_rate * direction


def sgd_nesterov_step(params: np.ndarray, grad: np.ndarray, state: OptimizerState) -> bool:
    """``v <- mu v - lr g``; ``w <- w + mu v - lr g``, in place.

    A gradient with non-finite entries is rejected: nothing changes and the
    function returns False.
    """
    if grad.shape != params.shape:
        raise ValueError("gradient and parameter shapes differ")
    if not np.all(np.isfinite(grad)):
        state.rejected += 1
        logger.warning("rejected non-finite gradient")
        return False
    _nesterov(params, grad, state)
    return True


def adadelta_step(params: np.ndarray, grad: np.ndarray, state: OptimizerState) -> bool:
    """ADADELTA direction, then the learning rate and Nesterov momentum as in SGD.

    The accumulators track the raw ADADELTA delta (before the learning-rate
    scaling), so the adaptive per-parameter rates behave as in plain ADADELTA.
    """
    if grad.shape != params.shape:
        raise ValueError("gradient and parameter shapes differ")
    if not np.all(np.isfinite(grad)):
        state.rejected += 1
        logger.warning("rejected non-finite gradient")
        return False
    rho, eps = state.rms_decay, state.epsilon
    state.rms_grad *= rho
    state.rms_grad += (1 - rho) * grad * grad
    delta = np.sqrt(state.rms_update + eps) / np.sqrt(state.rms_grad + eps) * grad
    state.rms_update *= rho
    state.rms_update += (1 - rho) * delta * delta
    _nesterov(params, delta, state)
    return True


def clip_by_norm(grad: np.ndarray, max_norm: float | None) -> np.ndarray:
    if max_norm is None:
        return grad
    norm = float(np.linalg.norm(grad))
    if norm > max_norm:
        return grad * (max_norm / norm)
    return grad


@dataclass
class Snapshot:
    score: float
    index: int
    payload: Any = field(repr=False, default=None)


@dataclass
class AnnealSchedule:
    """Early-stopping learning-rate annealing; lower scores are better.

    After ``patience`` evaluations in a row without a new best score the
    learning rate is divided by ``lr_decay_factor`` and training resumes from
    the newer of the two lowest-scoring snapshots.  Training stops once the
    rate falls below ``lr_floor``.
    """

    patience: int
    lr_decay_factor: float
    lr_initial: float
    lr_floor: float
    lr: float = field(init=False)
    best_snapshots: list[Snapshot] = field(default_factory=list)
    stale: int = 0
    evaluations: int = 0
    restore: Snapshot | None = None

    def __post_init__(self):
        if self.patience < 1:
            raise ValueError("patience must be at least 1")
        if not self.lr_floor < self.lr_initial:
            raise ValueError("lr_floor must be below lr_initial")
        self.lr = self.lr_initial

    @classmethod
    def wsj(cls) -> "AnnealSchedule":
        return cls(patience=11, lr_decay_factor=10.0, lr_initial=1e-5, lr_floor=1e-7)

    @classmethod
    def timit(cls) -> "AnnealSchedule":
        return cls(patience=6, lr_decay_factor=2.0, lr_initial=1e-4, lr_floor=1e-6)

    @property
    def best_score(self) -> float:
        return self.best_snapshots[0].score if self.best_snapshots else np.inf


def anneal_update(schedule: AnnealSchedule, eval_score: float, payload: Any = None) -> str:
    """Record one evaluation; returns ``continue``, ``decay_lr_and_restore`` or ``stop``.

    On ``decay_lr_and_restore`` the snapshot to resume from is left in
    ``schedule.restore``.
    """
    if not np.isfinite(eval_score):
        raise ValueError("evaluation score must be finite")
    schedule.evaluations += 1
    improved = eval_score < schedule.best_score
    snap = Snapshot(float(eval_score), schedule.evaluations, payload)
    schedule.best_snapshots = sorted(schedule.best_snapshots + [snap], key=lambda s: (s.score, s.index))[:2]
    schedule.restore = None
    if improved:
        schedule.stale = 0
        return "continue"
    schedule.stale += 1
    if schedule.stale < schedule.patience:
        return "continue"
    schedule.stale = 0
    schedule.lr /= schedule.lr_decay_factor
    if schedule.lr < schedule.lr_floor:
        return "stop"
    schedule.restore = max(schedule.best_snapshots, key=lambda s: s.index)
    return "decay_lr_and_restore"
