"""Windowed CTC error computation for truncated BPTT training.

Iteration ``n`` of the unroll schedule covers frames ``[tau_start, tau_end]``
of a sequence, of which ``(tau_prev, tau_end]`` are new.  When the window
reaches the end of the sequence the ordinary CTC errors are computed on the
window (truncated CTC, "TR").  Otherwise the errors come from the EM loss
``-ln p(Z | x_{1:tau})`` over the set of target prefixes, applied only to the
frames that will drop out of the window before the next iteration.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .ctc import (
    backward_from,
    backward_init,
    ctc_gradient,
    forward_init,
    forward_range,
    logsumexp,
    seq_log_prob,
)
from .labels import BLANK, ExtendedSeq

logger = logging.getLogger(__name__)


class InvalidConfigError(ValueError):
    pass


class DegenerateWindowError(ArithmeticError):
    """Every alpha entry at the window end is zero."""


@dataclass(frozen=True)
class WindowPlan:
    n: int
    h: int
    h_prime: int
    tau_prev: int
    tau_start: int
    tau_end: int
    tau_next_start: int
    final: bool

    @property
    def length(self) -> int:
        return self.tau_end - self.tau_start + 1

    def clip(self, start: int, end: int | None = None) -> "WindowPlan":
        """Re-express this (stream-level) plan in the local frame numbering
        of a sequence occupying stream frames ``start..end``.

        ``end`` is None while the sequence end has not been reached.
        """
        off = start - 1
        tau_end = self.tau_end if end is None else min(self.tau_end, end)
        return WindowPlan(
            n=self.n,
            h=self.h,
            h_prime=self.h_prime,
            tau_prev=max(self.tau_prev, off) - off,
            tau_start=max(self.tau_start, start) - off,
            tau_end=tau_end - off,
            tau_next_start=max(self.tau_next_start, start) - off,
            final=end is not None and end <= self.tau_end,
        )


def plan_window(n: int, h: int, h_prime: int, T: int | None = None) -> WindowPlan:
    """Window indices of iteration ``n``; ``T=None`` for an unbounded stream."""
    if h_prime < 1 or h < h_prime:
        raise InvalidConfigError(f"need h >= h' >= 1, got h={h}, h'={h_prime}")
    if n < 1:
        raise InvalidConfigError("iterations are numbered from 1")
    tau_end = n * h_prime if T is None else min(n * h_prime, T)
    tau_prev = (n - 1) * h_prime if T is None else min((n - 1) * h_prime, T)
    return WindowPlan(
        n=n,
        h=h,
        h_prime=h_prime,
        tau_prev=tau_prev,
        tau_start=max(1, n * h_prime - h + 1),
        tau_end=tau_end,
        tau_next_start=max(1, (n + 1) * h_prime - h + 1),
        final=T is not None and tau_end == T,
    )


def iter_plans(T: int, h: int, h_prime: int):
    n = 0
    while True:
        n += 1
        plan = plan_window(n, h, h_prime, T)
        yield plan
        if plan.final:
            return


@dataclass
class CtcCarry:
    """Forward variable of one sequence, kept between iterations.

    ``alpha`` holds the rows still inside the unroll window, starting at local
    frame ``first_frame``.  ``continuous`` selects the blank-forcing first-row
    initialization used for sequences that follow another one in a stream.
    """

    ext: ExtendedSeq
    alpha: np.ndarray
    first_frame: int = 1
    frames_consumed: int = 0
    continuous: bool = False

    @classmethod
    def start(cls, ext: ExtendedSeq, continuous: bool = False) -> "CtcCarry":
        return cls(ext, np.empty((0, len(ext))), 1, 0, continuous)

    @property
    def alpha_row(self) -> np.ndarray:
        return self.alpha[-1]

    def advance(self, y_window: np.ndarray, plan: WindowPlan) -> None:
        """Extend alpha over the new frames ``(tau_prev, tau_end]``."""
        if self.frames_consumed != plan.tau_prev:
            raise ValueError(f"carry at frame {self.frames_consumed}, plan expects {plan.tau_prev}")
        new = y_window[plan.tau_prev + 1 - plan.tau_start :]
        if len(new) == 0:
            return
        if self.frames_consumed == 0:
            first = continuous_init(new[0], self.ext) if self.continuous else forward_init(new[0], self.ext)
            rows = np.vstack([first[None, :], forward_range(new[1:], self.ext, first)])
        else:
            rows = forward_range(new, self.ext, self.alpha_row)
        self.alpha = np.vstack([self.alpha, rows]) if len(self.alpha) else rows
        self.frames_consumed = plan.tau_end

    def window_alpha(self, plan: WindowPlan) -> np.ndarray:
        return self.alpha[plan.tau_start - self.first_frame : plan.tau_end - self.first_frame + 1]

    def trim(self, keep_from: int) -> None:
        drop = keep_from - self.first_frame
        if drop > 0:
            self.alpha = self.alpha[drop:]
            self.first_frame = keep_from


def continuous_init(log_y0: np.ndarray, ext: ExtendedSeq) -> np.ndarray:
    """First alpha row with the blank forced: only ``u = 1`` is reachable."""
    row = np.full(len(ext), -np.inf)
    row[0] = log_y0[BLANK]
    return row


@dataclass
class WindowErrors:
    """Softmax-input errors for local frames ``tau_start..tau_end``.

    ``loss`` is ``-ln p(z|x)`` for TR windows and ``-ln p(Z|x_{1:tau})`` for
    EM windows; it is NaN when nothing was computed.  ``eligible`` counts
    the frames that received (possibly zero-valued) errors.
    """

    values: np.ndarray
    mode: str
    tau_start: int
    tau_end: int
    loss: float = float("nan")
    skipped: bool = False
    eligible: int = 0


def ctc_tr_window(y_window: np.ndarray, carry: CtcCarry, plan: WindowPlan) -> WindowErrors:
    if not plan.final:
        raise ValueError("CTC-TR applies to the final window only")
    carry.advance(y_window, plan)
    errors = np.zeros_like(y_window)
    alpha = carry.window_alpha(plan)
    log_prob = seq_log_prob(alpha)
    if not np.isfinite(log_prob):
        logger.debug("unreachable target in final window n=%d", plan.n)
        return WindowErrors(errors, "tr", plan.tau_start, plan.tau_end, skipped=True)
    beta = backward_from(y_window, carry.ext, backward_init(carry.ext))
    errors = ctc_gradient(y_window, carry.ext, alpha, beta, log_prob).values
    return WindowErrors(errors, "tr", plan.tau_start, plan.tau_end, -log_prob, eligible=plan.length)


def ctc_em_backward_init(ext: ExtendedSeq, tau: int | None = None) -> np.ndarray:
    """beta_tau at its own frame: one (log 0) for every position."""
    return np.zeros(len(ext))


def prefix_set_log_prob(alpha: np.ndarray, tau: int) -> float:
    """ln p(Z|x_{1:tau}) = log sum_u alpha(tau, u); ``tau`` is 1-based."""
    return float(logsumexp(alpha[tau - 1]))


def ctc_em_window(
    y_window: np.ndarray, carry: CtcCarry, plan: WindowPlan, emit: bool = True
) -> WindowErrors:
    """EM errors on ``[tau_start, tau_next_start - 1]``, zeros on the rest.

    With ``emit=False`` only the forward variable is advanced (pre-training).
    """
    if plan.final:
        raise ValueError("CTC-EM applies to non-final windows only")
    carry.advance(y_window, plan)
    errors = np.zeros_like(y_window)
    span = plan.tau_next_start - plan.tau_start
    result = WindowErrors(errors, "em", plan.tau_start, plan.tau_end)
    if emit and span > 0:
        alpha = carry.window_alpha(plan)
        log_pz = prefix_set_log_prob(alpha, len(alpha))
        if not np.isfinite(log_pz):
            logger.debug("degenerate EM window n=%d", plan.n)
            result.skipped = True
        else:
            beta = backward_from(y_window, carry.ext, ctc_em_backward_init(carry.ext))
            grad = ctc_gradient(y_window[:span], carry.ext, alpha[:span], beta[:span], log_pz)
            errors[:span] = grad.values
            result.loss = -log_pz
            result.eligible = span
    carry.trim(plan.tau_next_start)
    return result


def window_errors(
    y_window: np.ndarray, carry: CtcCarry, plan: WindowPlan, emit_em: bool = True
) -> WindowErrors:
    """CTC(h; h') errors for one sequence at one iteration."""
    if plan.final:
        return ctc_tr_window(y_window, carry, plan)
    return ctc_em_window(y_window, carry, plan, emit=emit_em)


def prefix_log_probs(alpha_row: np.ndarray) -> np.ndarray:
    """ln p(z_{1:m}|x_{1:tau}) for m = 0..|z| from the alpha row at tau."""
    m_probs = [alpha_row[0]]
    for m in range(1, (len(alpha_row) - 1) // 2 + 1):
        m_probs.append(np.logaddexp(alpha_row[2 * m - 1], alpha_row[2 * m]))
    return np.array(m_probs)


def hard_em_alignment(alpha: np.ndarray, tau: int) -> int:
    """Most probable prefix length at ``tau``; ties go to the shorter prefix."""
    probs = prefix_log_probs(alpha[tau - 1])
    if np.all(np.isneginf(probs)):
        raise DegenerateWindowError("alpha row is all zero")
    return int(np.argmax(probs))
