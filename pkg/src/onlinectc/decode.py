"""Best-path and prefix beam-search decoding, and edit-distance metrics."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Hashable, Sequence

import numpy as np

from .labels import BLANK, collapse_path


def best_path_decode(log_y: np.ndarray) -> list[int]:
    """Per-frame argmax (ties to the lowest index, i.e. blank) then collapse."""
    return collapse_path(np.argmax(log_y, axis=1).tolist())


def beam_search_decode(log_y: np.ndarray, width: int) -> tuple[list[int], float]:
    """CTC prefix beam search without a language model.

    Every prefix carries the log mass of paths ending in a blank and in its
    last label.  Candidates are ranked by total mass, ties broken by the
    lexicographically smaller label sequence.  Returns the best retained
    labeling and its log probability.
    """
    if width < 1:
        raise ValueError("beam width must be at least 1")
    T, K = log_y.shape
    NEG = -np.inf
    beams: dict[tuple[int, ...], tuple[float, float]] = {(): (0.0, NEG)}
    for t in range(T):
        row = log_y[t]
        nxt: dict[tuple[int, ...], list[float]] = {}

        def add(prefix, blank, label):
            cur = nxt.get(prefix)
            if cur is None:
                nxt[prefix] = [blank, label]
            else:
                cur[0] = np.logaddexp(cur[0], blank)
                cur[1] = np.logaddexp(cur[1], label)

        for prefix, (pb, pnb) in beams.items():
            total = np.logaddexp(pb, pnb)
            add(prefix, total + row[BLANK], NEG)
            if prefix:
                # repeated last label without an intervening blank stays merged
                add(prefix, NEG, pnb + row[prefix[-1]])
            for k in range(1, K):
                if prefix and prefix[-1] == k:
                    add(prefix + (k,), NEG, pb + row[k])
                else:
                    add(prefix + (k,), NEG, total + row[k])
        ranked = sorted(nxt.items(), key=lambda kv: (-np.logaddexp(*kv[1]), kv[0]))
        beams = {p: (v[0], v[1]) for p, v in ranked[:width]}
    best, (pb, pnb) = min(beams.items(), key=lambda kv: (-np.logaddexp(*kv[1]), kv[0]))
    return list(best), float(np.logaddexp(pb, pnb))


@dataclass
class ErrorReport:
    substitutions: int = 0
    insertions: int = 0
    deletions: int = 0
    tokens: int = 0

    @property
    def errors(self) -> int:
        return self.substitutions + self.insertions + self.deletions

    @property
    def rate(self) -> float:
        return self.errors / max(1, self.tokens)

    def __add__(self, other: "ErrorReport") -> "ErrorReport":
        return ErrorReport(
            self.substitutions + other.substitutions,
            self.insertions + other.insertions,
            self.deletions + other.deletions,
            self.tokens + other.tokens,
        )

    def as_dict(self) -> dict:
        return {
            "substitutions": self.substitutions,
            "insertions": self.insertions,
            "deletions": self.deletions,
            "tokens": self.tokens,
            "errors": self.errors,
            "rate": self.rate,
        }


def edit_distance(ref: Sequence[Hashable], hyp: Sequence[Hashable]) -> ErrorReport:
    """Unit-cost Levenshtein alignment of ``hyp`` against ``ref``."""
    n, m = len(ref), len(hyp)
    d = np.zeros((n + 1, m + 1), dtype=np.int64)
    d[:, 0] = np.arange(n + 1)
    d[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            sub = d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1])
            d[i, j] = min(sub, d[i - 1, j] + 1, d[i, j - 1] + 1)
    s = ins = dels = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i, j] == d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            s += int(ref[i - 1] != hyp[j - 1])
            i, j = i - 1, j - 1
        elif i > 0 and d[i, j] == d[i - 1, j] + 1:
            dels += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return ErrorReport(s, ins, dels, n)


def char_error(ref: str, hyp: str) -> ErrorReport:
    return edit_distance(list(ref), list(hyp))


def word_error(ref: str, hyp: str) -> ErrorReport:
    return edit_distance(ref.split(), hyp.split())
