"""Synchronized multi-stream BPTT(h; h') training.

Every iteration runs the network over the next ``h'`` frames of all streams
as one batch, reuses the stored activations of the older window frames,
computes per-stream CTC window errors (optionally on a thread pool), and
back-propagates through the whole window.  Per-stream gradients are reduced
in stream order, so results do not depend on the number of worker threads.
"""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .decode import ErrorReport, best_path_decode, edit_distance
from .network import ActivationTape, ParamVector, RnnState, net_forward
from .network import net_backward
from .online import InvalidConfigError, WindowPlan, plan_window
from .optim import AnnealSchedule, OptimizerState, anneal_update, clip_by_norm
from .streaming import TrainingStream, Utterance, advance_window, assemble_errors, build_streams

logger = logging.getLogger(__name__)


@dataclass
class TrainOptions:
    h: int
    h_prime: int
    n_streams: int = 1
    pretrain_frames: int = 0
    eval_interval: int = 100_000
    workers: int = 1
    order_seed: int = 0
    dropout_seed: int = 0
    gap: int = 0
    continuous: bool = True
    reset_at_boundaries: bool = False
    max_grad_norm: float | None = None

    def __post_init__(self):
        if self.h_prime < 1 or self.h < self.h_prime:
            raise InvalidConfigError(f"need h >= h' >= 1, got h={self.h}, h'={self.h_prime}")
        if self.n_streams < 1:
            raise InvalidConfigError("need at least one stream")
        if self.workers < 1:
            raise InvalidConfigError("need at least one worker")

    @property
    def total_unroll(self) -> int:
        return self.n_streams * self.h


@dataclass
class StepMetrics:
    n: int
    frames: int  # stream frames processed this step (n_streams * h')
    real_frames: int  # of which belong to data rather than end-of-stream padding
    tr_sequences: int
    tr_loss: float  # summed over sequences finishing in this step
    em_windows: int
    grad_norm: float
    accepted: bool
    mode: str


class TrainRun:
    """Mutable training state: streams, RNN state, retained tape, counters."""

    def __init__(
        self,
        params: ParamVector,
        dataset: Sequence[Utterance],
        options: TrainOptions,
        optimizer: OptimizerState,
        gap_frame: np.ndarray | None = None,
    ):
        self.params = params
        self.dataset = dataset
        self.options = options
        self.optimizer = optimizer
        self.gap_frame = gap_frame
        self.epoch = 0
        self.frames_seen = 0
        self.steps = 0
        self.peak_live_frames = 0
        self.rng = np.random.default_rng(options.dropout_seed)
        self._pool = ThreadPoolExecutor(options.workers) if options.workers > 1 else None
        self._start_epoch()

    @property
    def h(self) -> int:
        return self.options.h

    @property
    def h_prime(self) -> int:
        return self.options.h_prime

    @property
    def mode(self) -> str:
        return "pretrain" if self.frames_seen < self.options.pretrain_frames else "full"

    @property
    def exhausted(self) -> bool:
        return all(s.exhausted for s in self.streams)

    def _start_epoch(self) -> None:
        o = self.options
        self.streams: list[TrainingStream] = build_streams(
            self.dataset, o.n_streams, o.order_seed + self.epoch, o.gap, self.gap_frame, o.continuous
        )
        self.state = RnnState.zeros(self.params.config, o.n_streams)
        self.tape: ActivationTape | None = None
        self.n = 0

    def next_epoch(self) -> None:
        self.epoch += 1
        self._start_epoch()

    def close(self) -> None:
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    def _resets(self, plan: WindowPlan) -> np.ndarray | None:
        if not self.options.reset_at_boundaries:
            return None
        out = np.zeros((self.h_prime, len(self.streams)), bool)
        for b, s in enumerate(self.streams):
            for seg in s.segments:
                if plan.tau_prev < seg.start <= plan.tau_end:
                    out[seg.start - plan.tau_prev - 1, b] = True
        return out


def window_gradient(run: TrainRun, plan: WindowPlan, emit_em: bool):
    """Forward the new frames, compute errors, back-propagate.

    Returns (per-stream gradients, per-stream segment results, tape).
    """
    B = len(run.streams)
    frames = np.stack([s.window_frames(plan.tau_prev + 1, plan.tau_end) for s in run.streams], axis=1)
    new_tape, run.state = net_forward(
        run.params, frames, run.state, dropout_on=True, rng=run.rng, resets=run._resets(plan)
    )
    tape = ActivationTape.concat(run.tape, new_tape)
    if len(tape) != plan.length:
        raise RuntimeError(f"tape holds {len(tape)} frames, window needs {plan.length}")
    run.peak_live_frames = max(run.peak_live_frames, len(tape) * B)
    K = run.params.config.output_dim

    def job(b):
        res = advance_window(run.streams[b], plan, tape.log_y[:, b], emit_em=emit_em)
        return res, assemble_errors(res, plan, K)

    if run._pool is None:
        outputs = [job(b) for b in range(B)]
    else:
        outputs = list(run._pool.map(job, range(B)))
    errors = np.stack([e for _, e in outputs], axis=1)
    grads = net_backward(run.params, tape, errors)
    return grads, [r for r, _ in outputs], tape


def reduce_gradients(grads: np.ndarray) -> np.ndarray:
    """Mean over streams, accumulated in stream order."""
    total = np.zeros(grads.shape[1])
    for g in grads:
        total += g
    return total / grads.shape[0]


def train_step(run: TrainRun) -> StepMetrics | None:
    """One synchronized iteration; None once every stream is exhausted."""
    if run.exhausted:
        return None
    run.n += 1
    plan = plan_window(run.n, run.h, run.h_prime)
    mode = run.mode
    grads, results, tape = window_gradient(run, plan, emit_em=mode == "full")
    grad = clip_by_norm(reduce_gradients(grads), run.options.max_grad_norm)
    accepted = run.optimizer.step(run.params.data, grad)
    run.tape = tape.slice(plan.tau_next_start - plan.tau_start)
    frames = len(run.streams) * run.h_prime
    real = sum(max(0, min(plan.tau_end, len(s)) - plan.tau_prev) for s in run.streams)
    run.frames_seen += frames
    run.steps += 1
    tr, tr_loss, em = 0, 0.0, 0
    for per_stream in results:
        for r in per_stream:
            if r.errors.mode == "tr":
                if not r.errors.skipped:
                    tr += 1
                    tr_loss += r.errors.loss
            elif not r.errors.skipped and r.errors.eligible:
                em += 1
    return StepMetrics(plan.n, frames, real, tr, tr_loss, em, float(np.linalg.norm(grad)), accepted, mode)


# evaluation -----------------------------------------------------------------


def forward_log_probs(
    params: ParamVector, sequences: Sequence[np.ndarray], chunk: int = 256
) -> list[np.ndarray]:
    """Log posteriors of each sequence, run as one zero-padded batch from zero state."""
    if not sequences:
        return []
    B = len(sequences)
    T = max(len(x) for x in sequences)
    D = params.config.input_dim
    batch = np.zeros((T, B, D))
    for b, x in enumerate(sequences):
        batch[: len(x), b] = x
    state = RnnState.zeros(params.config, B)
    outs = []
    for lo in range(0, T, chunk):
        tape, state = net_forward(params, batch[lo : lo + chunk], state)
        outs.append(tape.log_y)
    log_y = np.concatenate(outs)
    return [log_y[: len(x), b] for b, x in enumerate(sequences)]


def decode_streams(params: ParamVector, streams: Sequence[TrainingStream]) -> list[list[int]]:
    """Best-path hypotheses over each whole stream, without state resets."""
    log_ys = forward_log_probs(params, [s.frames for s in streams])
    return [best_path_decode(ly) for ly in log_ys]


def stream_reference(stream: TrainingStream) -> list[int]:
    return [k for _, target in stream.utterances() for k in target]


def score_streams(log_ys: Sequence[np.ndarray], streams: Sequence[TrainingStream]) -> ErrorReport:
    """Best-path token errors of whole-stream posteriors against the stream references."""
    report = ErrorReport()
    for stream, log_y in zip(streams, log_ys):
        report = report + edit_distance(stream_reference(stream), best_path_decode(log_y))
    return report


def intermediate_eval(params: ParamVector, dev_streams: Sequence[TrainingStream]) -> float:
    """Token error rate of best-path decoding over the dev streams."""
    log_ys = forward_log_probs(params, [s.frames for s in dev_streams])
    return score_streams(log_ys, dev_streams).rate


def utterance_error(params: ParamVector, utterances: Sequence[Utterance]) -> ErrorReport:
    """Best-path token errors with the state reset for every utterance."""
    report = ErrorReport()
    log_ys = forward_log_probs(params, [u.features for u in utterances])
    for u, ly in zip(utterances, log_ys):
        report = report + edit_distance(list(u.target), best_path_decode(ly))
    return report


# training loop ----------------------------------------------------------------


@dataclass
class FitResult:
    history: list[dict] = field(default_factory=list)
    stopped: str = "budget"
    best_params: np.ndarray | None = None
    best_score: float = float("inf")


def fit(
    run: TrainRun,
    max_frames: int,
    dev_streams: Sequence[TrainingStream] | None = None,
    schedule: AnnealSchedule | None = None,
    log_file=None,
    max_epochs: int | None = None,
    on_eval: Callable[[TrainRun, dict], None] | None = None,
    anneal_start: int = 0,
) -> FitResult:
    """Train until ``max_frames`` stream frames, an annealing stop, or ``max_epochs``.

    Every ``eval_interval`` frames the dev streams are decoded; with a
    schedule the learning rate follows :func:`anneal_update` once
    ``anneal_start`` frames have been seen.  Metrics records are written as
    JSON lines to ``log_file`` when given.
    """
    result = FitResult()
    if schedule is not None:
        run.optimizer.learning_rate = schedule.lr
    next_eval = run.frames_seen + run.options.eval_interval
    loss_sum, loss_count = 0.0, 0
    started = time.perf_counter()

    def evaluate():
        nonlocal loss_sum, loss_count
        record = {
            "frames_seen": run.frames_seen,
            "epoch": run.epoch,
            "loss": loss_sum / loss_count if loss_count else None,
            "lr": run.optimizer.learning_rate,
            "mode": run.mode,
            "seconds": round(time.perf_counter() - started, 3),
        }
        loss_sum, loss_count = 0.0, 0
        action = "continue"
        if dev_streams:
            score = intermediate_eval(run.params, dev_streams)
            record["dev_error"] = score
            if score < result.best_score:
                result.best_score = score
                result.best_params = run.params.data.copy()
            if schedule is not None and run.frames_seen >= anneal_start:
                payload = (run.params.data.copy(), run.optimizer.velocity.copy())
                action = anneal_update(schedule, score, payload)
                if action == "decay_lr_and_restore":
                    data, velocity = schedule.restore.payload
                    run.params.data[:] = data
                    run.optimizer.velocity[:] = velocity
                run.optimizer.learning_rate = schedule.lr
        record["action"] = action
        result.history.append(record)
        if log_file is not None:
            log_file.write(json.dumps(record) + "\n")
            log_file.flush()
        logger.info("eval %s", record)
        if on_eval is not None:
            on_eval(run, record)
        return action

    while run.frames_seen < max_frames:
        metrics = train_step(run)
        if metrics is None:
            if max_epochs is not None and run.epoch + 1 >= max_epochs:
                result.stopped = "epochs"
                break
            run.next_epoch()
            continue
        loss_sum += metrics.tr_loss
        loss_count += metrics.tr_sequences
        if run.frames_seen >= next_eval:
            next_eval += run.options.eval_interval
            if evaluate() == "stop":
                result.stopped = "anneal"
                return result
    if not result.history or result.history[-1]["frames_seen"] != run.frames_seen:
        evaluate()
    return result
