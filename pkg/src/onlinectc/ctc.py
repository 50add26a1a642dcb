"""Log-domain CTC forward-backward lattices and the softmax-input gradient.

``log_y`` is always a ``(T, K)`` array of per-frame log posteriors with the
blank in column 0.  Lattice rows are indexed by frame (0-based rows for frame
``t = row + 1``) and extended-label position.  The backward variable excludes
the emission at its own frame, so ``alpha[t] + beta[t]`` is the log mass of
all paths through ``(t, u)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .labels import BLANK, ExtendedSeq

NEG_INF = -np.inf


class NumericError(ValueError):
    """Non-finite values where finite ones are required."""


class UnreachableTargetError(ArithmeticError):
    """p(z|x) = 0, so the gradient is undefined."""


@dataclass
class CtcGrad:
    values: np.ndarray
    log_prob: float


def log_softmax(a: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(a, axis=axis, keepdims=True)
    s = a - m
    return s - np.log(np.sum(np.exp(s), axis=axis, keepdims=True))


def logsumexp(x: np.ndarray, axis=None) -> np.ndarray | float:
    x = np.asarray(x)
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True)) + m
    if axis is None:
        return float(out.reshape(()))
    return np.squeeze(out, axis=axis)


def check_log_softmax(log_y: np.ndarray, tol: float = 1e-9) -> None:
    if log_y.ndim != 2 or log_y.shape[0] < 1:
        raise ValueError("log_y must be a non-empty (T, K) array")
    if np.isnan(log_y).any() or np.isposinf(log_y).any():
        raise NumericError("non-finite softmax input")
    if np.any(np.abs(logsumexp(log_y, axis=1)) > tol):
        raise ValueError("rows of log_y must log-sum-exp to 0")


def forward_init(log_y0: np.ndarray, ext: ExtendedSeq) -> np.ndarray:
    """alpha row at t = 1: blank at u = 1, first label at u = 2."""
    row = np.full(len(ext), NEG_INF)
    row[0] = log_y0[BLANK]
    if len(ext) > 1:
        row[1] = log_y0[ext.ids[1]]
    return row


def forward_step(prev: np.ndarray, log_y_t: np.ndarray, ext: ExtendedSeq) -> np.ndarray:
    acc = prev.copy()
    acc[1:] = np.logaddexp(acc[1:], prev[:-1])
    if len(prev) > 3:
        jump = np.where(ext.skip[2:], prev[:-2], NEG_INF)
        acc[2:] = np.logaddexp(acc[2:], jump)
    return acc + log_y_t[ext.ids]


def forward_range(log_y: np.ndarray, ext: ExtendedSeq, alpha_prev: np.ndarray) -> np.ndarray:
    """Advance a stored alpha row over every frame of ``log_y``.

    Returns one row per frame of ``log_y``; ``alpha_prev`` itself is not
    included.  Resuming from the last returned row is exactly equivalent to
    an unbroken pass.
    """
    if not np.all(np.isfinite(log_y) | np.isneginf(log_y)):
        raise NumericError("non-finite softmax input")
    rows = np.empty((log_y.shape[0], len(ext)))
    prev = alpha_prev
    for i in range(log_y.shape[0]):
        prev = rows[i] = forward_step(prev, log_y[i], ext)
    return rows


def forward(log_y: np.ndarray, ext: ExtendedSeq, init: np.ndarray | None = None) -> np.ndarray:
    """Full alpha lattice, ``(T, |z'|)``; ``init`` overrides the t = 1 row."""
    first = forward_init(log_y[0], ext) if init is None else init
    rest = forward_range(log_y[1:], ext, first)
    return np.vstack([first[None, :], rest])


def backward_step(nxt: np.ndarray, log_y_next: np.ndarray, ext: ExtendedSeq) -> np.ndarray:
    e = nxt + log_y_next[ext.ids]
    acc = e.copy()
    acc[:-1] = np.logaddexp(acc[:-1], e[1:])
    if len(e) > 3:
        jump = np.where(ext.skip[2:], e[2:], NEG_INF)
        acc[:-2] = np.logaddexp(acc[:-2], jump)
    return acc


def backward_from(log_y: np.ndarray, ext: ExtendedSeq, last: np.ndarray) -> np.ndarray:
    """Backward lattice over the frames of ``log_y`` given its final row.

    ``last`` is the row at the last frame of ``log_y``; rows for earlier frames
    use the emissions of the following frame.
    """
    T = log_y.shape[0]
    beta = np.empty((T, len(ext)))
    beta[-1] = last
    for i in range(T - 2, -1, -1):
        beta[i] = backward_step(beta[i + 1], log_y[i + 1], ext)
    return beta


def backward_init(ext: ExtendedSeq) -> np.ndarray:
    row = np.full(len(ext), NEG_INF)
    row[-1] = 0.0
    if len(ext) > 1:
        row[-2] = 0.0
    return row


def backward_full(log_y: np.ndarray, ext: ExtendedSeq) -> np.ndarray:
    return backward_from(log_y, ext, backward_init(ext))


def seq_log_prob(alpha: np.ndarray) -> float:
    """ln p(z|x) from a complete alpha lattice; -inf if the target is unreachable."""
    last = alpha[-1]
    if len(last) == 1:
        return float(last[0])
    return float(np.logaddexp(last[-1], last[-2]))


def ctc_gradient(
    log_y: np.ndarray,
    ext: ExtendedSeq,
    alpha: np.ndarray,
    beta: np.ndarray,
    log_prob: float | None = None,
) -> CtcGrad:
    """``y_k^t - (1/p) sum_{u in B(z,k)} alpha(t,u) beta(t,u)`` for every row.

    ``alpha``, ``beta`` and ``log_y`` must cover the same frames.  ``log_prob``
    defaults to the sequence probability; pass the prefix-set probability for
    the EM loss.
    """
    if log_prob is None:
        log_prob = seq_log_prob(alpha)
    if not np.isfinite(log_prob):
        raise UnreachableTargetError("p(z|x) = 0")
    gamma = np.exp(alpha + beta - log_prob)
    occupancy = gamma @ ext.onehot(log_y.shape[1])
    values = np.exp(log_y) - occupancy
    return CtcGrad(values, float(log_prob))


def ctc_loss_grad(log_y: np.ndarray, ext: ExtendedSeq) -> CtcGrad:
    """Whole-sequence CTC: returns the gradient and ln p(z|x)."""
    alpha = forward(log_y, ext)
    beta = backward_full(log_y, ext)
    return ctc_gradient(log_y, ext, alpha, beta)
