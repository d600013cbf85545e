"""A small frozen causal LM with tied input/output embeddings.

The embedding table W (v x d) is the single parameter block used both to
look up token embeddings and, transposed, to project hidden states to
logits.  Forward and backward passes are written by hand in numpy; there is
no autodiff.  After instruction pretraining the parameter dict is frozen
(arrays made read-only) and downstream stages may only differentiate with
respect to the *input embeddings*.
"""

from __future__ import annotations

import string
from dataclasses import dataclass, field

import numpy as np

from .numerics import AdamState, Rng, adam_step, log_softmax

BLANK_ID = 0
BOS_ID = 1
EOS_ID = 2
PAD_ID = 3

_SPECIALS = ["<blank>", "<bos>", "<eos>", "<pad>"]
_DEFAULT_CHARS = " " + string.ascii_lowercase + string.ascii_uppercase + string.digits + ".,?:'!"


class Vocab:
    """Character vocabulary with reserved ids: blank=0, bos=1, eos=2, pad=3."""

    def __init__(self, chars: str = _DEFAULT_CHARS):
        if len(set(chars)) != len(chars):
            raise ValueError("Vocab: duplicate characters")
        self.symbols = list(_SPECIALS) + list(chars)
        self.char_to_id = {c: i + len(_SPECIALS) for i, c in enumerate(chars)}

    @property
    def size(self) -> int:
        return len(self.symbols)

    def tokenize(self, text: str) -> list[int]:
        ids = []
        for pos, ch in enumerate(text):
            if ch not in self.char_to_id:
                raise ValueError(f"out-of-vocabulary character {ch!r} at position {pos}")
            ids.append(self.char_to_id[ch])
        return ids

    def detokenize(self, ids) -> str:
        chars = []
        for i in ids:
            if i < len(_SPECIALS) or i >= self.size:
                raise ValueError(f"detokenize: id {i} is reserved or out of range")
            chars.append(self.symbols[i])
        return "".join(chars)


def tokenize(text: str, vocab: Vocab) -> list[int]:
    return vocab.tokenize(text)


def detokenize(ids, vocab: Vocab) -> str:
    return vocab.detokenize(ids)


@dataclass
class LmConfig:
    d: int = 64
    layers: int = 2
    heads: int = 4
    ff_dim: int = 256
    max_len: int = 256

    def __post_init__(self):
        if self.d % self.heads != 0:
            raise ValueError("LmConfig: d must be divisible by heads")
        for name in ("d", "layers", "heads", "ff_dim", "max_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"LmConfig: {name} must be >= 1")


class FrozenParamsError(RuntimeError):
    """Raised on any attempt to apply gradients to frozen parameters."""


@dataclass
class LmParams:
    config: LmConfig
    vocab: Vocab
    tensors: dict[str, np.ndarray]
    frozen: bool = False

    @property
    def W(self) -> np.ndarray:
        """The tied embedding table, v x d."""
        return self.tensors["W"]

    def freeze(self) -> None:
        self.frozen = True
        for arr in self.tensors.values():
            arr.flags.writeable = False

    def require_trainable(self) -> None:
        if self.frozen:
            raise FrozenParamsError("attempted gradient application to frozen LM parameters")


def init_lm_params(config: LmConfig, vocab: Vocab, rng: Rng) -> LmParams:
    d, ff = config.d, config.ff_dim
    t: dict[str, np.ndarray] = {}
    t["W"] = rng.child("W").normal(0.05, (vocab.size, d))
    t["pos"] = rng.child("pos").normal(0.02, (config.max_len, d))
    for l in range(config.layers):
        r = rng.child("layer", l)
        sq = 1.0 / np.sqrt(d)
        t[f"l{l}.wq"] = r.child("wq").normal(sq, (d, d))
        t[f"l{l}.wk"] = r.child("wk").normal(sq, (d, d))
        t[f"l{l}.wv"] = r.child("wv").normal(sq, (d, d))
        t[f"l{l}.wo"] = r.child("wo").normal(sq, (d, d))
        t[f"l{l}.w1"] = r.child("w1").normal(sq, (d, ff))
        t[f"l{l}.b1"] = np.zeros((1, ff))
        t[f"l{l}.w2"] = r.child("w2").normal(1.0 / np.sqrt(ff), (ff, d))
        t[f"l{l}.b2"] = np.zeros((1, d))
        t[f"l{l}.ln1.g"] = np.ones((1, d))
        t[f"l{l}.ln1.b"] = np.zeros((1, d))
        t[f"l{l}.ln2.g"] = np.ones((1, d))
        t[f"l{l}.ln2.b"] = np.zeros((1, d))
    t["lnf.g"] = np.ones((1, d))
    t["lnf.b"] = np.zeros((1, d))
    return LmParams(config=config, vocab=vocab, tensors=t)


# ---------------------------------------------------------------------------
# layer-norm / attention / block primitives with explicit backward passes
# ---------------------------------------------------------------------------

_LN_EPS = 1e-5


def _ln_fwd(x, g, b):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv)


def _ln_bwd(dy, g, cache):
    xhat, inv = cache
    n = xhat.shape[1]
    dg = (dy * xhat).sum(axis=0, keepdims=True)
    db = dy.sum(axis=0, keepdims=True)
    dxhat = dy * g
    dx = inv * (dxhat - dxhat.mean(axis=1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=1, keepdims=True))
    return dx, dg, db


def _softmax_rows(x):
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=-1, keepdims=True)


def _attn_fwd(a, p, prefix, heads: int, causal: bool):
    """Multi-head self-attention on a (T, d) input; returns output and cache."""
    T, d = a.shape
    hd = d // heads
    q = a @ p[f"{prefix}.wq"]
    k = a @ p[f"{prefix}.wk"]
    v = a @ p[f"{prefix}.wv"]
    qh = q.reshape(T, heads, hd).transpose(1, 0, 2)  # (h, T, hd)
    kh = k.reshape(T, heads, hd).transpose(1, 0, 2)
    vh = v.reshape(T, heads, hd).transpose(1, 0, 2)
    scores = qh @ kh.transpose(0, 2, 1) / np.sqrt(hd)  # (h, T, T)
    if causal:
        mask = np.triu(np.ones((T, T), dtype=bool), k=1)
        scores = np.where(mask, -np.inf, scores)
    att = _softmax_rows(scores)
    oh = att @ vh  # (h, T, hd)
    o = oh.transpose(1, 0, 2).reshape(T, d)
    out = o @ p[f"{prefix}.wo"]
    return out, (a, qh, kh, vh, att, o)


def _attn_bwd(dout, p, prefix, heads: int, cache, grads):
    a, qh, kh, vh, att, o = cache
    T, d = a.shape
    hd = d // heads
    if grads is not None:
        grads[f"{prefix}.wo"] += o.T @ dout
    do = dout @ p[f"{prefix}.wo"].T
    doh = do.reshape(T, heads, hd).transpose(1, 0, 2)
    datt = doh @ vh.transpose(0, 2, 1)  # (h, T, T)
    dvh = att.transpose(0, 2, 1) @ doh
    # softmax backward per row
    dscores = att * (datt - (datt * att).sum(axis=-1, keepdims=True))
    dscores /= np.sqrt(hd)
    dqh = dscores @ kh
    dkh = dscores.transpose(0, 2, 1) @ qh
    dq = dqh.transpose(1, 0, 2).reshape(T, d)
    dk = dkh.transpose(1, 0, 2).reshape(T, d)
    dv = dvh.transpose(1, 0, 2).reshape(T, d)
    if grads is not None:
        grads[f"{prefix}.wq"] += a.T @ dq
        grads[f"{prefix}.wk"] += a.T @ dk
        grads[f"{prefix}.wv"] += a.T @ dv
    da = dq @ p[f"{prefix}.wq"].T + dk @ p[f"{prefix}.wk"].T + dv @ p[f"{prefix}.wv"].T
    return da


def block_forward(h, p, prefix, heads: int, causal: bool):
    """Pre-norm attention + feed-forward block; returns output and cache."""
    a, ln1c = _ln_fwd(h, p[f"{prefix}.ln1.g"], p[f"{prefix}.ln1.b"])
    att_out, attc = _attn_fwd(a, p, prefix, heads, causal)
    h1 = h + att_out
    a2, ln2c = _ln_fwd(h1, p[f"{prefix}.ln2.g"], p[f"{prefix}.ln2.b"])
    pre = a2 @ p[f"{prefix}.w1"] + p[f"{prefix}.b1"]
    act = np.maximum(pre, 0.0)
    ff = act @ p[f"{prefix}.w2"] + p[f"{prefix}.b2"]
    h2 = h1 + ff
    return h2, (ln1c, attc, h1, ln2c, a2, pre, act)


def block_backward(dh2, p, prefix, heads: int, cache, grads):
    """Backward of block_forward; returns dh.  `grads` may be None to skip
    parameter gradients (frozen usage)."""
    ln1c, attc, h1, ln2c, a2, pre, act = cache
    if grads is not None:
        grads[f"{prefix}.w2"] += act.T @ dh2
        grads[f"{prefix}.b2"] += dh2.sum(axis=0, keepdims=True)
    dact = dh2 @ p[f"{prefix}.w2"].T
    dpre = dact * (pre > 0.0)
    if grads is not None:
        grads[f"{prefix}.w1"] += a2.T @ dpre
        grads[f"{prefix}.b1"] += dpre.sum(axis=0, keepdims=True)
    da2 = dpre @ p[f"{prefix}.w1"].T
    dh1_ln, dg2, db2 = _ln_bwd(da2, p[f"{prefix}.ln2.g"], ln2c)
    if grads is not None:
        grads[f"{prefix}.ln2.g"] += dg2
        grads[f"{prefix}.ln2.b"] += db2
    dh1 = dh2 + dh1_ln
    da = _attn_bwd(dh1, p, prefix, heads, attc, grads)
    dh_ln, dg1, db1 = _ln_bwd(da, p[f"{prefix}.ln1.g"], ln1c)
    if grads is not None:
        grads[f"{prefix}.ln1.g"] += dg1
        grads[f"{prefix}.ln1.b"] += db1
    return dh1 + dh_ln


def lm_forward(input_embeddings: np.ndarray, params: LmParams, cache: list | None = None) -> np.ndarray:
    """Causal transformer over a (T, d) embedding sequence -> (T, d) hidden
    states.  Positional embeddings are added internally.  Pass a list as
    `cache` to enable lm_backward."""
    cfg = params.config
    T = input_embeddings.shape[0]
    if T > cfg.max_len:
        raise ValueError(f"lm_forward: sequence length {T} exceeds max_len {cfg.max_len}")
    p = params.tensors
    h = input_embeddings + p["pos"][:T]
    if cache is not None:
        cache.clear()
    for l in range(cfg.layers):
        h, c = block_forward(h, p, f"l{l}", cfg.heads, causal=True)
        if cache is not None:
            cache.append(c)
    hf, lnfc = _ln_fwd(h, p["lnf.g"], p["lnf.b"])
    if cache is not None:
        cache.append(lnfc)
    return hf


def lm_backward(
    d_hidden: np.ndarray,
    params: LmParams,
    cache: list,
    grads: dict[str, np.ndarray] | None = None,
) -> np.ndarray:
    """Backward of lm_forward.  Returns gradient w.r.t. the input embedding
    rows; accumulates parameter gradients into `grads` when given (training
    the LM itself), or skips them when None (frozen LM, stage-2 usage)."""
    cfg = params.config
    p = params.tensors
    lnfc = cache[-1]
    dh, dgf, dbf = _ln_bwd(d_hidden, p["lnf.g"], lnfc)
    if grads is not None:
        grads["lnf.g"] += dgf
        grads["lnf.b"] += dbf
    for l in range(cfg.layers - 1, -1, -1):
        dh = block_backward(dh, p, f"l{l}", cfg.heads, cache[l], grads)
    if grads is not None:
        T = dh.shape[0]
        grads["pos"][:T] += dh
    return dh


def lm_logits(hidden: np.ndarray, params: LmParams) -> np.ndarray:
    """Tied projection: hidden (T, d) x W^T -> logits (T, v)."""
    return hidden @ params.W.T


def embed(ids, params: LmParams) -> np.ndarray:
    return params.W[np.asarray(ids, dtype=np.int64)]


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------


def _next_log_probs(ctx: np.ndarray, params: LmParams) -> np.ndarray:
    hidden = lm_forward(ctx, params)
    return log_softmax(lm_logits(hidden[-1:], params))[0]


def greedy_generate(context_embeddings: np.ndarray, params: LmParams, max_new: int) -> list[int]:
    ctx = context_embeddings
    out: list[int] = []
    for _ in range(max_new):
        nxt = int(np.argmax(_next_log_probs(ctx, params)))
        if nxt == EOS_ID:
            break
        out.append(nxt)
        ctx = np.vstack([ctx, params.W[nxt]])
    return out


def beam_generate(
    context_embeddings: np.ndarray,
    params: LmParams,
    beam_size: int,
    max_new: int,
    length_norm: float = 1.0,
) -> list[int]:
    """Beam search with length-normalized scoring.

    A hypothesis finishes by emitting EOS (whose log-probability is included
    in its score) or by reaching max_new tokens.  The normalized score is
    total logprob / n^length_norm where n counts emitted tokens including
    the terminating EOS.  Ties broken toward earlier expansion order.
    """
    if beam_size < 1:
        raise ValueError("beam_generate: beam_size must be >= 1")
    if max_new < 1:
        raise ValueError("beam_generate: max_new must be >= 1")
    live: list[tuple[list[int], float, np.ndarray]] = [([], 0.0, context_embeddings)]
    finished: list[tuple[list[int], float, int]] = []  # (tokens, logprob, scored_len)
    for _ in range(max_new):
        # expand every vocabulary continuation of every live beam; EOS
        # expansions move to the finished pool, the rest compete for
        # beam_size survivor slots
        candidates: list[tuple[list[int], float, np.ndarray, int]] = []
        for toks, lp, ctx in live:
            step_lp = _next_log_probs(ctx, params)
            for tok in range(step_lp.shape[0]):
                new_lp = lp + float(step_lp[tok])
                if tok == EOS_ID:
                    finished.append((toks, new_lp, len(toks) + 1))
                else:
                    candidates.append((toks, new_lp, ctx, tok))
        if not candidates:
            break
        candidates.sort(key=lambda c: -c[1])
        live = [
            (toks + [tok], lp, np.vstack([ctx, params.W[tok]]))
            for toks, lp, ctx, tok in candidates[:beam_size]
        ]
    for toks, lp, _ in live:
        finished.append((toks, lp, max(len(toks), 1)))
    best = max(finished, key=lambda f: f[1] / (f[2] ** length_norm))
    return best[0]


def constrained_generate(
    context_embeddings: np.ndarray,
    params: LmParams,
    allowed: list[list[int]],
) -> list[int]:
    """Pick the allowed token sequence with the highest length-normalized
    log-probability, scored exactly by teacher forcing (EOS term included)."""
    if not allowed:
        raise ValueError("constrained_generate: empty allowed list")
    best_opt, best_score = None, -np.inf
    for opt in allowed:
        if not opt:
            raise ValueError("constrained_generate: empty option")
        ctx = np.vstack([context_embeddings, params.W[np.asarray(opt)]])
        hidden = lm_forward(ctx, params)
        start = context_embeddings.shape[0]
        lps = log_softmax(lm_logits(hidden[start - 1 :], params))
        score = 0.0
        for j, tok in enumerate(opt):
            score += float(lps[j, tok])
        score += float(lps[len(opt), EOS_ID])
        score /= len(opt) + 1
        if score > best_score:
            best_opt, best_score = opt, score
    return list(best_opt)


def generate(
    context_embeddings: np.ndarray,
    params: LmParams,
    mode: str = "greedy",
    beam_size: int = 1,
    max_new: int = 128,
    allowed: list[list[int]] | None = None,
) -> list[int]:
    """Autoregressive continuation in embedding space; stops at EOS or
    max_new.  With `allowed`, returns exactly one member of the set."""
    if allowed is not None:
        return constrained_generate(context_embeddings, params, allowed)
    if mode == "greedy" or beam_size == 1:
        return greedy_generate(context_embeddings, params, max_new)
    if mode == "beam":
        return beam_generate(context_embeddings, params, beam_size, max_new)
    raise ValueError(f"generate: unknown mode {mode!r}")


# ---------------------------------------------------------------------------
# instruction pretraining
# ---------------------------------------------------------------------------


@dataclass
class InstructionExample:
    """Prompt-wrapped input text plus the expected completion."""

    prompt: str
    target: str


def weighted_ce_loss_and_dlogits(logits: np.ndarray, positions: np.ndarray, targets: np.ndarray, weights: np.ndarray):
    """Weighted CE over `positions` rows of logits (predicting `targets`);
    returns (loss, d_logits) with d_logits zero off the scored rows."""
    lps = log_softmax(logits[positions])
    n = len(positions)
    loss = -float((weights * lps[np.arange(n), targets]).sum())
    probs = np.exp(lps)
    probs[np.arange(n), targets] -= 1.0
    d = np.zeros_like(logits)
    d[positions] = probs * weights[:, None]
    return loss, d


def masked_ce_loss_and_dlogits(logits: np.ndarray, positions: np.ndarray, targets: np.ndarray):
    """Mean CE over `positions` rows of logits (predicting `targets`)."""
    n = len(positions)
    return weighted_ce_loss_and_dlogits(logits, positions, targets, np.full(n, 1.0 / n))


def _example_loss_grads(ex_ids: np.ndarray, target_start: int, params: LmParams, grads, target_weight: float = 0.5):
    """Next-token CE over the whole sequence of one example, with the loss
    mass split between the prompt span and the target span (incl. terminal
    EOS).  The split keeps short answers from drowning in the prompt's
    language-modeling loss.

    ex_ids = [BOS, prompt..., target..., EOS].
    """
    ids_in = ex_ids[:-1]
    emb = embed(ids_in, params)
    cache: list = []
    hidden = lm_forward(emb, params, cache)
    logits = lm_logits(hidden, params)
    positions = np.arange(0, len(ids_in))
    targets = ex_ids[1:]
    n_prompt = target_start - 1
    n_target = len(ids_in) - n_prompt
    weights = np.empty(len(ids_in))
    weights[:n_prompt] = (1.0 - target_weight) / max(n_prompt, 1)
    weights[n_prompt:] = target_weight / n_target
    loss, dlogits = weighted_ce_loss_and_dlogits(logits, positions, targets, weights)
    if grads is not None:
        grads["W"] += dlogits.T @ hidden
        dhidden = dlogits @ params.W
        demb = lm_backward(dhidden, params, cache, grads)
        np.add.at(grads["W"], ids_in, demb)
    # answer-span rows, for token-prediction accuracy probes
    tgt_positions = np.arange(target_start - 1, len(ids_in))
    return loss, tgt_positions, ex_ids[target_start:], logits


def token_prediction_accuracy(logits: np.ndarray, positions: np.ndarray, targets: np.ndarray) -> float:
    pred = np.argmax(logits[positions], axis=1)
    return float(np.mean(pred == targets))


def exact_match_rate(examples, params: LmParams, max_new: int = 64) -> float:
    vocab = params.vocab
    hits = 0
    for ex in examples:
        ctx_ids = [BOS_ID] + vocab.tokenize(ex.prompt)
        out = greedy_generate(embed(ctx_ids, params), params, max_new=max_new)
        try:
            text = vocab.detokenize(out)
        except ValueError:
            text = ""
        hits += text == ex.target
    return hits / len(examples)


def pretrain_toylm(
    corpus: list[InstructionExample],
    config: LmConfig,
    rng: Rng,
    vocab: Vocab | None = None,
    batch_size: int = 16,
    lr_max: float = 1e-3,
    warmup: int = 300,
    max_epochs: int = 20,
    holdout_fraction: float = 0.1,
    target_exact_match: float = 0.95,
    eval_max_new: int = 64,
    log: list | None = None,
) -> LmParams:
    """Next-token CE training on instruction examples until a held-out
    slice reaches the exact-match threshold; returns frozen params.

    Raises if the threshold is not reached within max_epochs, reporting the
    best score seen.
    """
    from .training import lr_schedule  # local import to avoid module cycle

    if not corpus:
        raise ValueError("pretrain_toylm: empty corpus")
    vocab = vocab or Vocab()
    n_hold = max(1, int(len(corpus) * holdout_fraction))
    perm = rng.child("split").gen.permutation(len(corpus))
    holdout = [corpus[i] for i in perm[:n_hold]]
    train = [corpus[i] for i in perm[n_hold:]]

    params = init_lm_params(config, vocab, rng.child("init"))
    state = AdamState.init(params.tensors)

    encoded = []
    for ex in train:
        prompt_ids = vocab.tokenize(ex.prompt)
        tgt_ids = vocab.tokenize(ex.target)
        ids = np.array([BOS_ID] + prompt_ids + tgt_ids + [EOS_ID], dtype=np.int64)
        encoded.append((ids, 1 + len(prompt_ids)))

    steps_per_epoch = max(1, len(encoded) // batch_size)
    best = 0.0
    step = 0
    for epoch in range(max_epochs):
        order = rng.child("epoch", epoch).gen.permutation(len(encoded))
        for b in range(steps_per_epoch):
            step += 1
            idx = order[b * batch_size : (b + 1) * batch_size]
            grads = {k: np.zeros_like(v) for k, v in params.tensors.items()}
            batch_loss = 0.0
            for i in idx:
                ids, tstart = encoded[i]
                loss, *_ = _example_loss_grads(ids, tstart, params, grads)
                batch_loss += loss
            for g in grads.values():
                g /= len(idx)
            lr = lr_schedule(step, warmup, lr_max)
            params.require_trainable()
            adam_step(params.tensors, grads, state, lr)
            if log is not None and step % 50 == 0:
                log.append({"step": step, "lr": lr, "loss": batch_loss / len(idx)})
        score = exact_match_rate(holdout, params, max_new=eval_max_new)
        if log is not None:
            log.append({"epoch": epoch, "holdout_exact_match": score})
        best = max(best, score)
        if score >= target_exact_match:
            params.freeze()
            return params
    raise RuntimeError(
        f"pretrain_toylm: exact match {best:.3f} below threshold "
        f"{target_exact_match} after {max_epochs} epochs"
    )
