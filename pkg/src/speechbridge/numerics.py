"""Dense float64 numerics shared by every module: seeded RNG, stable
log-softmax, the Adam optimizer, and a central finite-difference gradient
checker.

Matrices are plain 2-D float64 numpy arrays in row-major (C) order.
Parameter collections are ``dict[str, np.ndarray]`` keyed by tensor name.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Rng",
    "AdamState",
    "log_softmax",
    "logsumexp",
    "adam_step",
    "finite_diff_check",
    "check_finite",
]


def _stable_tag_hash(tag) -> int:
    """Map a string/int tag to a stable 64-bit integer (hash() is salted)."""
    if isinstance(tag, (int, np.integer)):
        return int(tag) & 0xFFFFFFFFFFFFFFFF
    digest = hashlib.blake2b(str(tag).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


@dataclass
class Rng:
    """Deterministic random stream built on numpy's counter-based Philox
    generator.  Identical seeds (and child tags) give identical streams on
    every platform.  Child streams are derived statelessly from the parent
    seed plus hashed tags, so consumers never share hidden state.
    """

    seed: int
    spawn_key: tuple[int, ...] = ()
    gen: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self.spawn_key)
        self.gen = np.random.Generator(np.random.Philox(ss))

    @classmethod
    def from_seed(cls, seed: int) -> "Rng":
        return cls(seed=int(seed))

    def child(self, *tags) -> "Rng":
        """Independent stream keyed by (seed, *tags); same tags, same stream."""
        key = self.spawn_key + tuple(_stable_tag_hash(t) for t in tags)
        return Rng(seed=self.seed, spawn_key=key)

    # thin passthroughs so call sites read naturally
    def normal(self, scale: float, shape) -> np.ndarray:
        return self.gen.normal(0.0, scale, size=shape)

    def uniform(self, low: float, high: float, shape=None):
        return self.gen.uniform(low, high, size=shape)

    def integers(self, low: int, high: int, size=None):
        return self.gen.integers(low, high, size=size)

    def choice(self, n: int, size: int, replace: bool = True) -> np.ndarray:
        return self.gen.choice(n, size=size, replace=replace)


def check_finite(x: np.ndarray, what: str = "input") -> None:
    if not np.all(np.isfinite(x)):
        raise ValueError(f"non-finite values in {what}")


def logsumexp(x: np.ndarray, axis=None):
    """max-shifted log(sum(exp(x))); tolerates -inf entries."""
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    out = np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True)) + m
    return out.item() if axis is None else np.squeeze(out, axis=axis)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise (or vector) log-softmax: x - max - log(sum(exp(x - max))).

    Raises on empty or non-finite input.
    """
    x = np.asarray(logits, dtype=np.float64)
    if x.size == 0:
        raise ValueError("log_softmax: empty input")
    check_finite(x, "log_softmax input")
    m = np.max(x, axis=-1, keepdims=True)
    shifted = x - m
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


@dataclass
class AdamState:
    """First/second moment accumulators plus step counter, keyed like the
    parameter dict they track."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def init(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
            step=0,
        )


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update, in place.

    `params` and `state` are the explicit mutable state; everything else is
    read-only.  Shapes of params and grads must match.  A tensor whose
    gradient is exactly all-zero keeps its value (its moments still decay);
    stale momentum never moves untouched parameters.
    """
    if lr <= 0:
        raise ValueError(f"adam_step: lr must be positive, got {lr}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(
                f"adam_step: shape mismatch for {name}: {p.shape} vs {g.shape}"
            )
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        v *= beta2
        if not np.any(g):
            continue
        m += (1.0 - beta1) * g
        v += (1.0 - beta2) * (g * g)
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


def finite_diff_check(
    loss_fn,
    params: dict[str, np.ndarray],
    analytic_grads: dict[str, np.ndarray],
    epsilon: float = 1e-5,
) -> float:
    """Central-difference check of `analytic_grads` against `loss_fn`.

    Perturbs every coordinate by +/-epsilon and returns the max over
    coordinates of |fd - an| / max(1, |fd|, |an|).  `loss_fn` takes the
    params dict and must be deterministic (verified by double evaluation).
    """
    if not (0.0 < epsilon <= 1e-2):
        raise ValueError(f"finite_diff_check: epsilon out of (0, 1e-2]: {epsilon}")
    base1 = float(loss_fn(params))
    base2 = float(loss_fn(params))
    if base1 != base2:
        raise ValueError(
            f"finite_diff_check: loss_fn is not deterministic ({base1} != {base2})"
        )
    worst = 0.0
    for name, p in params.items():
        an = analytic_grads[name]
        flat = p.reshape(-1)
        an_flat = np.asarray(an).reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            f_plus = float(loss_fn(params))
            flat[i] = orig - epsilon
            f_minus = float(loss_fn(params))
            flat[i] = orig
            fd = (f_plus - f_minus) / (2.0 * epsilon)
            rel = abs(fd - an_flat[i]) / max(1.0, abs(fd), abs(an_flat[i]))
            worst = max(worst, rel)
    return worst
