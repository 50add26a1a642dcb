"""Brute-force oracles for checking the lattice code.

Everything here is deliberately naive: path probabilities come from explicit
enumeration of ``K**T`` paths, and gradients from central differences.  None
of it calls into the lattice module, so agreement between the two is
meaningful.
"""

from __future__ import annotations

import logging
from typing import Callable, Sequence

import numpy as np

from .labels import BLANK, ExtendedSeq

logger = logging.getLogger(__name__)

MAX_PATHS = 10**6


class OracleTooLargeError(ValueError):
    """Enumeration would exceed the instance-size guard."""


def _all_paths(num_labels: int, T: int) -> np.ndarray:
    if num_labels**T > MAX_PATHS:
        raise OracleTooLargeError(f"{num_labels}**{T} paths exceed {MAX_PATHS}")
    grids = np.indices((num_labels,) * T).reshape(T, -1)
    return grids.T  # (K**T, T)


def enumerate_paths(y: np.ndarray):
    """All paths for a ``(T, K)`` matrix of linear posteriors.

    Returns ``(paths, probs, codes)`` where ``codes`` identifies the collapsed
    labeling of each path uniquely (see :func:`labeling_code`).
    """
    T, K = y.shape
    paths = _all_paths(K, T)
    probs = np.prod(y[np.arange(T), paths], axis=1)
    codes = _collapse_codes(paths, K)
    return paths, probs, codes


def _collapse_codes(paths: np.ndarray, K: int) -> np.ndarray:
    prev = np.concatenate([np.full((paths.shape[0], 1), -1), paths[:, :-1]], axis=1)
    keep = (paths != BLANK) & (paths != prev)
    rank = np.cumsum(keep, axis=1) - 1
    weights = np.where(keep, paths * (K ** np.maximum(rank, 0)).astype(np.int64), 0)
    return weights.sum(axis=1)


def labeling_code(z: Sequence[int], K: int) -> int:
    """Integer identifying a labeling; digits are labels in base K (never 0)."""
    return sum(int(t) * K**i for i, t in enumerate(z))


def enum_seq_prob(y: np.ndarray, z: Sequence[int]) -> float:
    """p(z|x) = sum of the probabilities of all paths that collapse to z."""
    _, probs, codes = enumerate_paths(np.asarray(y, dtype=float))
    return float(probs[codes == labeling_code(z, y.shape[1])].sum())


def enum_prefix_prob(y: np.ndarray, z: Sequence[int], tau: int) -> float:
    """p(Z|x_{1:tau}) where Z holds every prefix z_{1:m}, 0 <= m <= |z|."""
    y = np.asarray(y, dtype=float)[:tau]
    K = y.shape[1]
    _, probs, codes = enumerate_paths(y)
    wanted = [labeling_code(z[:m], K) for m in range(len(z) + 1)]
    return float(probs[np.isin(codes, wanted)].sum())


def enum_labeling_probs(y: np.ndarray) -> dict[tuple[int, ...], float]:
    """Probability of every reachable labeling."""
    paths, probs, _ = enumerate_paths(np.asarray(y, dtype=float))
    out: dict[tuple[int, ...], float] = {}
    for path, p in zip(paths, probs):
        key = []
        prev = None
        for s in path:
            if s != prev and s != BLANK:
                key.append(int(s))
            prev = s
        key = tuple(key)
        out[key] = out.get(key, 0.0) + float(p)
    return out


def beta_tau_m_lattice(y: np.ndarray, ext: ExtendedSeq, tau: int, m: int) -> np.ndarray:
    """Linear-domain backward lattice for the single prefix ``z_{1:m}``.

    Rows cover frames ``1..tau``.  At ``tau`` the lattice is one exactly at
    positions ``u = 2m`` and ``u = 2m + 1`` (1-based); earlier rows follow the
    standard backward recursion, written out position by position.
    """
    if not 0 <= m <= len(ext.labels):
        raise ValueError(f"m={m} outside 0..{len(ext.labels)}")
    U = len(ext)
    ids = ext.ids
    beta = np.zeros((tau, U))
    for u in (2 * m, 2 * m + 1):
        if 1 <= u <= U:
            beta[tau - 1, u - 1] = 1.0
    for t in range(tau - 2, -1, -1):
        for u in range(U):
            total = 0.0
            for i in (u, u + 1, u + 2):
                if i >= U:
                    continue
                if i == u + 2 and (ids[u] == BLANK or ids[i] == ids[u]):
                    continue
                total += beta[t + 1, i] * y[t + 1, ids[i]]
            beta[t, u] = total
    return beta


def alpha_naive(y: np.ndarray, ext: ExtendedSeq, tau: int) -> np.ndarray:
    """Linear-domain forward lattice, written out position by position."""
    U = len(ext)
    ids = ext.ids
    alpha = np.zeros((tau, U))
    alpha[0, 0] = y[0, BLANK]
    if U > 1:
        alpha[0, 1] = y[0, ids[1]]
    for t in range(1, tau):
        for u in range(U):
            total = alpha[t - 1, u]
            if u >= 1:
                total += alpha[t - 1, u - 1]
            if u >= 2 and ids[u] != BLANK and ids[u - 2] != ids[u]:
                total += alpha[t - 1, u - 2]
            alpha[t, u] = total * y[t, ids[u]]
    return alpha


def finite_diff(loss_fn: Callable[[np.ndarray], float], point: np.ndarray, epsilon: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of ``loss_fn`` at ``point``.

    Coordinates whose two evaluations are not both finite come back as NaN.
    """
    x = np.array(point, dtype=float)
    grad = np.empty_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + epsilon
        fp = loss_fn(x)
        flat[j] = orig - epsilon
        fm = loss_fn(x)
        flat[j] = orig
        if np.isfinite(fp) and np.isfinite(fm):
            g[j] = (fp - fm) / (2 * epsilon)
        else:
            logger.warning("finite_diff: non-finite loss at coordinate %d", j)
            g[j] = np.nan
    return grad


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """Largest entrywise ``|a - b| / max(|a|, |b|, floor)``."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def simulate_tr_coverage(T: int, h: int, h_prime: int, offset: int) -> float:
    """Walk the unroll windows frame by frame and mark CTC-TR frames.

    The sequence occupies stream frames ``offset + 1 .. offset + T``.
    """
    start, end = offset + 1, offset + T
    covered = np.zeros(T, dtype=bool)
    n = 0
    while True:
        n += 1
        win_start = max(1, n * h_prime - h + 1)
        win_end = n * h_prime
        if win_end >= end:
            for t in range(win_start, win_end + 1):
                if start <= t <= end:
                    covered[t - start] = True
            break
    return float(covered.mean())


def monte_carlo_coverage(T: int, h: int, h_prime: int, draws: int, rng: np.random.Generator) -> float:
    """Average CTC-TR coverage over uniformly drawn stream offsets."""
    offsets = rng.integers(0, h_prime, size=draws)
    cache: dict[int, float] = {}
    total = 0.0
    for o in offsets:
        o = int(o)
        if o not in cache:
            cache[o] = simulate_tr_coverage(T, h, h_prime, o)
        total += cache[o]
    return total / draws
