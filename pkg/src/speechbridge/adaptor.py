"""The trainable bridge from speech features to the LM embedding space:
softmax-weighted layer collapse, bidirectional encoder blocks, a strided
1-D convolution that halves the sequence length, and a final linear
projection to the embedding dimension.

Forward and backward are hand-written; `adaptor_backward` returns the
gradient for every trainable tensor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import Rng
from .speechsim import FeatureStack, Utterance, weighted_sum, weighted_sum_backward
from .toylm import block_backward, block_forward

__all__ = [
    "AdaptorConfig",
    "init_adaptor_params",
    "length_adapt",
    "length_adapt_backward",
    "adaptor_forward",
    "adaptor_backward",
    "similarity_map",
]


@dataclass
class AdaptorConfig:
    blocks: int = 2
    hidden: int = 64
    heads: int = 4
    kernel: int = 3
    stride: int = 2
    max_frames: int = 512

    def __post_init__(self):
        if self.stride < 1:
            raise ValueError("AdaptorConfig: stride must be >= 1")
        if self.kernel < self.stride:
            raise ValueError("AdaptorConfig: kernel must be >= stride")
        if self.hidden % self.heads != 0:
            raise ValueError("AdaptorConfig: hidden must be divisible by heads")


def init_adaptor_params(
    config: AdaptorConfig, feature_dim: int, n_layers: int, lm_dim: int, rng: Rng
) -> dict[str, np.ndarray]:
    h, k = config.hidden, config.kernel
    t: dict[str, np.ndarray] = {}
    t["layer_w"] = np.zeros((1, n_layers))
    t["in_proj"] = rng.child("in").normal(1.0 / np.sqrt(feature_dim), (feature_dim, h))
    t["in_bias"] = np.zeros((1, h))
    t["pos"] = rng.child("pos").normal(0.02, (config.max_frames, h))
    for b in range(config.blocks):
        r = rng.child("block", b)
        sq = 1.0 / np.sqrt(h)
        t[f"b{b}.wq"] = r.child("wq").normal(sq, (h, h))
        t[f"b{b}.wk"] = r.child("wk").normal(sq, (h, h))
        t[f"b{b}.wv"] = r.child("wv").normal(sq, (h, h))
        t[f"b{b}.wo"] = r.child("wo").normal(sq, (h, h))
        t[f"b{b}.w1"] = r.child("w1").normal(sq, (h, 4 * h))
        t[f"b{b}.b1"] = np.zeros((1, 4 * h))
        t[f"b{b}.w2"] = r.child("w2").normal(1.0 / np.sqrt(4 * h), (4 * h, h))
        t[f"b{b}.b2"] = np.zeros((1, h))
        t[f"b{b}.ln1.g"] = np.ones((1, h))
        t[f"b{b}.ln1.b"] = np.zeros((1, h))
        t[f"b{b}.ln2.g"] = np.ones((1, h))
        t[f"b{b}.ln2.b"] = np.zeros((1, h))
    # conv stored 2-D (kernel*hidden, hidden) so checkpoints stay matrix-shaped
    t["conv"] = rng.child("conv").normal(1.0 / np.sqrt(k * h), (k * h, h))
    t["conv_bias"] = np.zeros((1, h))
    t["out_proj"] = rng.child("out").normal(1.0 / np.sqrt(h), (h, lm_dim))
    t["out_bias"] = np.zeros((1, lm_dim))
    return t


def out_length(T: int, kernel: int, stride: int) -> int:
    return (T - kernel) // stride + 1


def length_adapt(features: np.ndarray, kernel: np.ndarray, stride: int) -> np.ndarray:
    """Valid (no padding) 1-D convolution along time.

    `kernel` is (k*h, h) viewed as k taps of (h, h); output length is
    floor((T - k)/stride) + 1.
    """
    T, h = features.shape
    k = kernel.shape[0] // h
    if T < k:
        raise ValueError(f"length_adapt: {T} frames < kernel width {k}")
    taps = kernel.reshape(k, h, h)
    Tp = out_length(T, k, stride)
    out = np.zeros((Tp, h))
    for j in range(k):
        out += features[j : j + (Tp - 1) * stride + 1 : stride] @ taps[j]
    return out


def length_adapt_backward(
    d_out: np.ndarray, features: np.ndarray, kernel: np.ndarray, stride: int
):
    """Returns (d_features, d_kernel) for length_adapt."""
    T, h = features.shape
    k = kernel.shape[0] // h
    taps = kernel.reshape(k, h, h)
    Tp = d_out.shape[0]
    d_feat = np.zeros_like(features)
    d_taps = np.zeros_like(taps)
    for j in range(k):
        sl = slice(j, j + (Tp - 1) * stride + 1, stride)
        d_feat[sl] += d_out @ taps[j].T
        d_taps[j] = features[sl].T @ d_out
    return d_feat, d_taps.reshape(k * h, h)


def adaptor_forward(
    utt: Utterance,
    params: dict[str, np.ndarray],
    config: AdaptorConfig,
    cache: list | None = None,
) -> np.ndarray:
    """Collapse layers, run encoder blocks, halve the length, project to the
    LM embedding dimension.  Returns (T', d)."""
    stack = utt.frames
    x0 = weighted_sum(stack, params["layer_w"])
    x1 = x0 @ params["in_proj"] + params["in_bias"]
    T = x1.shape[0]
    if T > config.max_frames:
        raise ValueError(f"adaptor_forward: {T} frames exceed max_frames {config.max_frames}")
    h = x1 + params["pos"][:T]
    block_caches = []
    for b in range(config.blocks):
        h, c = block_forward(h, params, f"b{b}", config.heads, causal=False)
        block_caches.append(c)
    y = length_adapt(h, params["conv"], config.stride) + params["conv_bias"]
    out = y @ params["out_proj"] + params["out_bias"]
    if cache is not None:
        cache.clear()
        cache.extend([stack, x0, block_caches, h, y])
    return out


def adaptor_backward(
    d_out: np.ndarray,
    params: dict[str, np.ndarray],
    config: AdaptorConfig,
    cache: list,
    grads: dict[str, np.ndarray],
) -> None:
    """Accumulate gradients of a scalar loss into `grads` given d_out from
    adaptor_forward."""
    stack, x0, block_caches, h, y = cache
    grads["out_proj"] += y.T @ d_out
    grads["out_bias"] += d_out.sum(axis=0, keepdims=True)
    dy = d_out @ params["out_proj"].T
    dh, d_conv = length_adapt_backward(dy, h, params["conv"], config.stride)
    grads["conv"] += d_conv
    grads["conv_bias"] += dy.sum(axis=0, keepdims=True)
    for b in range(config.blocks - 1, -1, -1):
        dh = block_backward(dh, params, f"b{b}", config.heads, block_caches[b], grads)
    T = dh.shape[0]
    grads["pos"][:T] += dh
    dx1 = dh
    grads["in_proj"] += x0.T @ dx1
    grads["in_bias"] += dx1.sum(axis=0, keepdims=True)
    dx0 = dx1 @ params["in_proj"].T
    grads["layer_w"] += weighted_sum_backward(stack, params["layer_w"], dx0).reshape(1, -1)


def similarity_map(
    speech_emb: np.ndarray,
    text_tokens,
    W: np.ndarray,
    diagnostics: dict | None = None,
) -> np.ndarray:
    """Cosine similarity between each speech embedding row and each text
    token's embedding row; zero-norm rows yield 0 and bump the diagnostics
    counter."""
    tok_emb = W[np.asarray(text_tokens, dtype=np.int64)]
    s_norm = np.linalg.norm(speech_emb, axis=1)
    t_norm = np.linalg.norm(tok_emb, axis=1)
    zero_rows = int(np.sum(s_norm == 0.0) + np.sum(t_norm == 0.0))
    if diagnostics is not None:
        diagnostics["zero_norm_rows"] = diagnostics.get("zero_norm_rows", 0) + zero_rows
    s_safe = np.where(s_norm == 0.0, 1.0, s_norm)
    t_safe = np.where(t_norm == 0.0, 1.0, t_norm)
    sims = (speech_emb / s_safe[:, None]) @ (tok_emb / t_safe[:, None]).T
    sims[s_norm == 0.0, :] = 0.0
    sims[:, t_norm == 0.0] = 0.0
    return sims
