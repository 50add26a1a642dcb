"""Alphabets, blank-extended targets and the CTC collapse mapping.

Label ids are dense integers with the blank fixed at id 0; the labels of the
alphabet occupy ids ``1..len(alphabet)``.  Positions ``u`` inside an extended
target are 1-based in the public helpers (``transitions``, ``positions_of``)
and 0-based in the stored arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Hashable, Iterable, Sequence

import numpy as np

BLANK = 0
BLANK_TOKEN = "<b>"


class InvalidLabelError(ValueError):
    """A token or label id is not part of the alphabet."""


@dataclass(frozen=True)
class Alphabet:
    labels: tuple[str, ...]
    blank_id: int = BLANK

    def __post_init__(self):
        if self.blank_id != BLANK:
            raise ValueError("blank must be index 0")
        if len(set(self.labels)) != len(self.labels):
            raise ValueError("alphabet labels must be distinct")
        if BLANK_TOKEN in self.labels:
            raise ValueError(f"{BLANK_TOKEN!r} is reserved for the blank")
        object.__setattr__(self, "_index", {tok: i + 1 for i, tok in enumerate(self.labels)})

    @classmethod
    def from_tokens(cls, tokens: Iterable[str]) -> "Alphabet":
        return cls(tuple(tokens))

    def __len__(self):
        return len(self.labels)

    @property
    def size(self) -> int:
        """|L'|, the softmax width."""
        return len(self.labels) + 1

    def encode(self, tokens: Iterable[str]) -> list[int]:
        try:
            return [self._index[t] for t in tokens]
        except KeyError as exc:
            raise InvalidLabelError(f"token {exc.args[0]!r} not in alphabet") from None

    def decode(self, ids: Iterable[int]) -> list[str]:
        out = []
        for i in ids:
            i = int(i)
            if i == BLANK:
                out.append(BLANK_TOKEN)
            elif 1 <= i <= len(self.labels):
                out.append(self.labels[i - 1])
            else:
                raise InvalidLabelError(f"label id {i} out of range")
        return out


@dataclass(frozen=True, eq=False)
class ExtendedSeq:
    """Target ``z`` with blanks interleaved: ``z' = (b, z1, b, z2, ..., b)``.

    ``skip[u]`` (0-based) is True when the lattice may jump from ``u - 2`` to
    ``u``, i.e. ``z'_u`` is a label that differs from ``z'_{u-2}``.
    """

    labels: tuple[int, ...]
    ids: np.ndarray = field(repr=False)
    skip: np.ndarray = field(repr=False)

    def __len__(self):
        return len(self.ids)

    def transitions(self, u: int) -> tuple[int, int]:
        """Return ``(f(u), g(u))`` for 1-based ``u``.

        ``f(u)`` may be 0 and ``g(u)`` may be ``len + 1``; those are the
        zero-probability boundary cells.
        """
        n = len(self.ids)
        if not 1 <= u <= n:
            raise IndexError(f"u={u} outside 1..{n}")
        k = u - 1
        f = u - 2 if self.skip[k] or (u == 2 and self.ids[k] != BLANK) else u - 1
        g = u + 2 if (k + 2 < n and self.skip[k + 2]) or (u == n - 1 and self.ids[k] != BLANK) else u + 1
        return f, g

    def positions_of(self, k: int) -> list[int]:
        """``B(z, k)``: 1-based positions holding label ``k``."""
        return [int(u) + 1 for u in np.flatnonzero(self.ids == k)]

    def onehot(self, num_labels: int) -> np.ndarray:
        """``(|z'|, num_labels)`` indicator matrix of ``B(z, k)``."""
        m = np.zeros((len(self.ids), num_labels))
        m[np.arange(len(self.ids)), self.ids] = 1.0
        return m

    def min_frames(self, force_blank_start: bool = False) -> int:
        """Shortest input that can emit this target."""
        z = self.labels
        repeats = sum(1 for a, b in zip(z, z[1:]) if a == b)
        return len(z) + repeats + (1 if force_blank_start and z else 0)


def extend_labels(z: Sequence[int], alphabet: Alphabet | None = None) -> ExtendedSeq:
    z = tuple(int(t) for t in z)
    upper = len(alphabet) if alphabet is not None else None
    for t in z:
        if t < 1 or (upper is not None and t > upper):
            raise InvalidLabelError(f"label id {t} is not a non-blank label")
    ids = np.zeros(2 * len(z) + 1, dtype=np.int64)
    ids[1::2] = z
    skip = np.zeros(len(ids), dtype=bool)
    for u in range(3, len(ids), 2):
        skip[u] = ids[u] != ids[u - 2]
    return ExtendedSeq(z, ids, skip)


def extend_tokens(tokens: Sequence[Hashable], blank: Hashable) -> list:
    """Token-level form of the blank extension, for display and tests."""
    out = [blank]
    for t in tokens:
        out += [t, blank]
    return out


def collapse_path(path: Iterable[Hashable], blank: Hashable = BLANK) -> list:
    """Merge consecutive repeats, then drop blanks."""
    out = []
    prev = None
    for p in path:
        if p != prev and p != blank:
            out.append(p)
        prev = p
    return out
