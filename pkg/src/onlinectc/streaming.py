"""Continuous training streams and CTC-TR coverage analytics.

A stream is a concatenation of utterances.  Frames are numbered globally
from 1 inside a stream; each utterance occupies a contiguous span recorded
in the boundary table.  The RNN runs over the stream without being reset,
and the CTC bookkeeping restarts at every boundary.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .labels import ExtendedSeq, extend_labels
from .online import CtcCarry, WindowErrors, WindowPlan, continuous_init, window_errors

logger = logging.getLogger(__name__)


@dataclass
class Utterance:
    features: np.ndarray  # (T, D)
    target: tuple[int, ...]
    name: str = ""

    def __len__(self):
        return self.features.shape[0]


@dataclass
class Segment:
    """One entry of the boundary table; ``source`` is -1 for gap segments."""

    start: int
    end: int
    target: tuple[int, ...]
    ext: ExtendedSeq = field(repr=False)
    source: int
    follows: bool

    @property
    def length(self) -> int:
        return self.end - self.start + 1


@dataclass
class SegmentErrors:
    segment: int
    first_frame: int  # global frame of errors.values[0]
    errors: WindowErrors


@dataclass
class StreamStats:
    tr_windows: int = 0
    em_windows: int = 0
    unreachable: int = 0
    degenerate: int = 0
    tr_loss: float = 0.0


class TrainingStream:
    def __init__(self, frames: np.ndarray, segments: list[Segment], continuous: bool = True):
        self.frames = frames
        self.segments = segments
        self.continuous = continuous
        self.carries: dict[int, CtcCarry] = {}
        self.position = 0
        self._next = 0
        self.stats = StreamStats()

    def __len__(self):
        return self.frames.shape[0]

    @property
    def empty(self) -> bool:
        return not self.segments

    @property
    def exhausted(self) -> bool:
        return self.position >= len(self)

    @property
    def current_segment(self) -> int | None:
        for i, seg in enumerate(self.segments):
            if seg.start <= self.position + 1 <= seg.end:
                return i
        return None

    def window_frames(self, start: int, stop: int) -> np.ndarray:
        """Frames ``start..stop`` (global, inclusive), zero-padded past the end."""
        out = np.zeros((stop - start + 1, self.frames.shape[1]))
        lo, hi = start - 1, min(stop, len(self))
        if hi > lo:
            out[: hi - lo] = self.frames[lo:hi]
        return out

    def rewind(self) -> None:
        self.carries.clear()
        self.position = 0
        self._next = 0
        self.stats = StreamStats()

    def utterances(self) -> list[tuple[np.ndarray, tuple[int, ...]]]:
        """(frames, target) of every non-gap segment, in boundary order."""
        out = []
        for seg in self.segments:
            if seg.source >= 0:
                out.append((self.frames[seg.start - 1 : seg.end], seg.target))
        return out


def concat_stream(
    utterances: Sequence[Utterance],
    sources: Sequence[int] | None = None,
    gap: int = 0,
    gap_frame: np.ndarray | None = None,
    continuous: bool = True,
) -> TrainingStream:
    """Concatenate utterances into one stream with a boundary table.

    ``gap`` silence frames with an empty target are placed between
    consecutive utterances.
    """
    if sources is None:
        sources = range(len(utterances))
    chunks, segments = [], []
    pos = 0
    dim = utterances[0].features.shape[1] if utterances else 0
    if gap_frame is None:
        gap_frame = np.zeros(dim)
    for k, (utt, src) in enumerate(zip(utterances, sources)):
        if k > 0 and gap > 0:
            chunks.append(np.tile(gap_frame, (gap, 1)))
            segments.append(Segment(pos + 1, pos + gap, (), extend_labels(()), -1, True))
            pos += gap
        T = len(utt)
        chunks.append(np.asarray(utt.features, dtype=float))
        segments.append(Segment(pos + 1, pos + T, tuple(utt.target), extend_labels(utt.target), int(src), k > 0))
        pos += T
    frames = np.concatenate(chunks) if chunks else np.zeros((0, dim))
    return TrainingStream(frames, segments, continuous)


def build_streams(
    dataset: Sequence[Utterance],
    n_streams: int,
    order_seed: int,
    gap: int = 0,
    gap_frame: np.ndarray | None = None,
    continuous: bool = True,
) -> list[TrainingStream]:
    """Shuffle by seed and deal utterances round-robin into ``n_streams``."""
    if not dataset:
        raise ValueError("dataset is empty")
    if n_streams < 1:
        raise ValueError("need at least one stream")
    order = np.random.default_rng(order_seed).permutation(len(dataset))
    streams = []
    for i in range(n_streams):
        idx = [int(j) for j in order[i::n_streams]]
        streams.append(concat_stream([dataset[j] for j in idx], idx, gap, gap_frame, continuous))
    empty = sum(s.empty for s in streams)
    if empty:
        logger.warning("%d of %d streams are empty (only %d sequences)", empty, n_streams, len(dataset))
    return streams


def continuous_forward_init(log_y_first: np.ndarray, ext: ExtendedSeq) -> np.ndarray:
    """Forward row forcing the blank at the first frame of a sequence."""
    return continuous_init(log_y_first, ext)


def advance_window(
    stream: TrainingStream, plan: WindowPlan, log_y_window: np.ndarray, emit_em: bool = True
) -> list[SegmentErrors]:
    """CTC errors of every sequence touched by this iteration's window.

    ``plan`` is the stream-level plan (``T`` unknown); ``log_y_window`` holds
    the softmax outputs for stream frames ``plan.tau_start..plan.tau_end``.
    Sequences that end inside the window get truncated CTC; the others get
    EM errors (or none, when ``emit_em`` is False).
    """
    if stream.position != plan.tau_prev:
        raise ValueError(f"stream at frame {stream.position}, plan expects {plan.tau_prev}")
    while stream._next < len(stream.segments) and stream.segments[stream._next].start <= plan.tau_end:
        i = stream._next
        seg = stream.segments[i]
        if len(seg.ext.labels) and seg.length < seg.ext.min_frames(seg.follows and stream.continuous):
            logger.debug("segment %d cannot emit its target in %d frames; skipped", i, seg.length)
            stream.stats.unreachable += 1
        else:
            stream.carries[i] = CtcCarry.start(seg.ext, continuous=seg.follows and stream.continuous)
        stream._next += 1
    results = []
    for i in sorted(stream.carries):
        seg = stream.segments[i]
        local = plan.clip(seg.start, seg.end if seg.end <= plan.tau_end else None)
        first = max(plan.tau_start, seg.start)
        last = min(plan.tau_end, seg.end)
        y = log_y_window[first - plan.tau_start : last - plan.tau_start + 1]
        res = window_errors(y, stream.carries[i], local, emit_em)
        if local.final:
            del stream.carries[i]
            stream.stats.tr_windows += 1
            if res.skipped:
                stream.stats.unreachable += 1
            else:
                stream.stats.tr_loss += res.loss
        else:
            stream.stats.em_windows += 1
            stream.stats.degenerate += int(res.skipped)
        results.append(SegmentErrors(i, first, res))
    stream.position = plan.tau_end
    return results


def assemble_errors(results: Iterable[SegmentErrors], plan: WindowPlan, num_labels: int) -> np.ndarray:
    """Place per-sequence errors into one ``(plan.length, K)`` window array."""
    out = np.zeros((plan.length, num_labels))
    for r in results:
        lo = r.first_frame - plan.tau_start
        out[lo : lo + len(r.errors.values)] += r.errors.values
    return out


# coverage analytics -------------------------------------------------------


def ctc_tr_coverage(T: int, h: int, h_prime: int, offset: int) -> float:
    """Fraction of a length-T sequence inside the final (CTC-TR) window.

    The sequence occupies stream frames ``offset + 1 .. offset + T``.
    """
    if not 0 <= offset < h_prime:
        raise ValueError(f"offset must lie in [0, {h_prime})")
    if T < 1 or h < h_prime:
        raise ValueError("need T >= 1 and h >= h'")
    end = offset + T
    n = math.ceil(end / h_prime)
    window_start = max(1, n * h_prime - h + 1)
    return (end - max(window_start, offset + 1) + 1) / T


def average_coverage(T: int, h: int, h_prime: int) -> float:
    return sum(ctc_tr_coverage(T, h, h_prime, o) for o in range(h_prime)) / h_prime


def maximum_coverage(T: int, h: int, h_prime: int) -> float:
    # covered frames form a suffix for every offset, so the union is the largest one
    return max(ctc_tr_coverage(T, h, h_prime, o) for o in range(h_prime))


@dataclass
class CoverageReport:
    h: int
    h_prime: int
    per_length: dict[int, tuple[float, float]]
    average: float
    maximum: float

    def to_text(self) -> str:
        lines = [f"# h={self.h} h'={self.h_prime}", "length\taverage\tmaximum"]
        for T, (avg, mx) in sorted(self.per_length.items()):
            lines.append(f"{T}\t{100 * avg:.2f}\t{100 * mx:.2f}")
        lines.append(f"total\t{100 * self.average:.2f}\t{100 * self.maximum:.2f}")
        return "\n".join(lines) + "\n"


def coverage_report(length_histogram: Mapping[int, int] | Iterable[tuple[int, int]], h: int, h_prime: int) -> CoverageReport:
    """Frame-weighted average and maximum CTC-TR coverage of a corpus."""
    hist = dict(length_histogram.items() if isinstance(length_histogram, Mapping) else length_histogram)
    per_length = {}
    frames = avg_frames = max_frames = 0.0
    for T, count in hist.items():
        if count <= 0:
            continue
        avg, mx = average_coverage(T, h, h_prime), maximum_coverage(T, h, h_prime)
        per_length[T] = (avg, mx)
        frames += count * T
        avg_frames += count * T * avg
        max_frames += count * T * mx
    if frames == 0:
        raise ValueError("histogram has no sequences")
    return CoverageReport(h, h_prime, per_length, avg_frames / frames, max_frames / frames)


def read_histogram(path: str | Path) -> dict[int, int]:
    """Two whitespace-separated columns per line: length, count."""
    hist: dict[int, int] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ValueError(f"{path}:{lineno}: expected 'length count'")
        T, count = int(float(parts[0])), int(float(parts[1]))
        hist[T] = hist.get(T, 0) + count
    return hist


def length_histogram(lengths: Iterable[int]) -> dict[int, int]:
    hist: dict[int, int] = {}
    for T in lengths:
        hist[int(T)] = hist.get(int(T), 0) + 1
    return hist
