"""Connectionist Temporal Classification over frame-level log-distributions.

The blank symbol is vocabulary id 0 throughout.  All recursions run in log
space; probability-space alphas underflow even at toy sizes.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product

import numpy as np

from .numerics import logsumexp

BLANK = 0

__all__ = ["BLANK", "CtcResult", "collapse", "ctc_loss_grad", "ctc_brute_force", "ctc_greedy_decode"]


@dataclass
class CtcResult:
    loss: float  # -log p(target | frames)
    grad_logits: np.ndarray  # (T, v) gradient w.r.t. pre-softmax logits


def collapse(path) -> list[int]:
    """Merge adjacent repeats, then drop blanks."""
    out = []
    prev = None
    for t in path:
        if t != prev:
            out.append(t)
        prev = t
    return [t for t in out if t != BLANK]


def _count_adjacent_repeats(target) -> int:
    return sum(1 for a, b in zip(target, target[1:]) if a == b)


def min_frames(target) -> int:
    """Smallest T for which the target is CTC-reachable."""
    return len(target) + _count_adjacent_repeats(target)


def _validate(log_probs: np.ndarray, target) -> None:
    T, v = log_probs.shape
    row_mass = logsumexp(log_probs, axis=1)
    if not np.allclose(row_mass, 0.0, atol=1e-8):
        raise ValueError("ctc: log_probs rows are not normalized log-distributions")
    if len(target) == 0:
        raise ValueError("ctc: empty target")
    if any(t < 0 or t >= v for t in target):
        raise ValueError("ctc: target id out of vocabulary range")
    if BLANK in target:
        raise ValueError("ctc: blank id in target")
    if T < min_frames(target):
        raise ValueError(
            f"ctc: infeasible target: need at least {min_frames(target)} frames, got {T}"
        )


def ctc_loss_grad(log_probs: np.ndarray, target) -> CtcResult:
    """Forward-backward CTC loss and analytic gradient w.r.t. logits.

    `log_probs` is (T, v) with normalized rows; `target` is a blank-free id
    sequence.  The gradient uses the standard softmax composition
    grad[t, k] = exp(log_probs[t, k]) - posterior[t, k], so each row sums
    to zero.
    """
    log_probs = np.asarray(log_probs, dtype=np.float64)
    _validate(log_probs, target)
    T, v = log_probs.shape
    L = len(target)
    # blank-interleaved label sequence: - y1 - y2 - ... - yL -
    ext = np.empty(2 * L + 1, dtype=np.int64)
    ext[0::2] = BLANK
    ext[1::2] = np.asarray(target, dtype=np.int64)
    S = ext.size

    lp = log_probs[:, ext]  # (T, S) frame scores at extended labels
    neg = -np.inf

    alpha = np.full((T, S), neg)
    alpha[0, 0] = lp[0, 0]
    if S > 1:
        alpha[0, 1] = lp[0, 1]
    # skip transition allowed into s when ext[s] is a label differing from ext[s-2]
    can_skip = np.zeros(S, dtype=bool)
    can_skip[2:] = (ext[2:] != BLANK) & (ext[2:] != ext[:-2])

    for t in range(1, T):
        stay = alpha[t - 1]
        prev1 = np.concatenate(([neg], alpha[t - 1, :-1]))
        prev2 = np.concatenate(([neg, neg], alpha[t - 1, :-2]))
        prev2 = np.where(can_skip, prev2, neg)
        alpha[t] = np.logaddexp(np.logaddexp(stay, prev1), prev2) + lp[t]

    log_p = logsumexp(alpha[T - 1, max(S - 2, 0):])

    beta = np.full((T, S), neg)
    beta[T - 1, S - 1] = 0.0
    if S > 1:
        beta[T - 1, S - 2] = 0.0
    # forward skip out of s allowed when ext[s+2] is a label differing from ext[s]
    can_skip_fwd = np.zeros(S, dtype=bool)
    can_skip_fwd[: S - 2] = can_skip[2:]
    for t in range(T - 2, -1, -1):
        stay = beta[t + 1] + lp[t + 1]
        nxt1 = np.concatenate((beta[t + 1, 1:] + lp[t + 1, 1:], [neg]))
        nxt2 = np.concatenate((beta[t + 1, 2:] + lp[t + 1, 2:], [neg, neg]))
        nxt2 = np.where(can_skip_fwd, nxt2, neg)
        beta[t] = np.logaddexp(np.logaddexp(stay, nxt1), nxt2)

    # posterior over vocabulary: sum alpha*beta over extended positions per label
    gamma = alpha + beta - log_p  # (T, S) log posteriors of extended states
    post = np.zeros((T, v))
    for s in range(S):
        post[:, ext[s]] += np.exp(gamma[:, s])

    grad = np.exp(log_probs) - post
    return CtcResult(loss=float(-log_p), grad_logits=grad)


def ctc_brute_force(log_probs: np.ndarray, target) -> float:
    """Enumeration oracle: sum probability over all v^T paths whose collapse
    equals the target; returns -log of the sum.  Guarded to v^T <= 1e7."""
    log_probs = np.asarray(log_probs, dtype=np.float64)
    T, v = log_probs.shape
    if v**T > 10_000_000:
        raise ValueError(f"ctc_brute_force: v^T = {v}**{T} exceeds enumeration guard")
    target = list(target)
    if len(target) > T:
        raise ValueError("ctc_brute_force: target longer than frame count (probability 0)")
    terms = []
    for path in product(range(v), repeat=T):
        if collapse(path) == target:
            terms.append(sum(log_probs[t, k] for t, k in enumerate(path)))
    if not terms:
        raise ValueError("ctc_brute_force: no path collapses to target (probability 0)")
    return float(-logsumexp(np.array(terms)))


def ctc_greedy_decode(log_probs: np.ndarray) -> list[int]:
    """Per-frame argmax followed by collapse."""
    return collapse(np.argmax(np.asarray(log_probs), axis=1).tolist())
