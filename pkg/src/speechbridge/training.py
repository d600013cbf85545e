"""Two-stage adaptor training and multi-instruction target synthesis.

Stage 1 aligns adaptor outputs with the frozen LM embedding space by
minimizing CTC loss against transcriptions through the transposed embedding
table.  Stage 2 embeds the adaptor output between prompt prefix/postfix
embeddings, runs the frozen LM, and minimizes cross-entropy on the target
span.  Targets are either gold transcriptions (T), LM-generated outputs for
sampled prompts (MI), or their union (TMI).

Both loops are stateless in their randomness: every batch draw is keyed by
(seed, step), so save/load/resume reproduces uninterrupted training
bit-exactly.  Early stopping fires after `patience` consecutive
non-improving evaluations; the best-metric checkpoint is returned.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .adaptor import AdaptorConfig, adaptor_backward, adaptor_forward
from .checkpoint import load_checkpoint, save_checkpoint
from .ctc import ctc_greedy_decode, ctc_loss_grad
from .evalmetrics import edit_distance
from .numerics import AdamState, Rng, adam_step, log_softmax
from .speechsim import Utterance, speed_perturb
from .tasks import PromptCollection, PromptTemplate, asr_template
from .toylm import (
    BOS_ID,
    EOS_ID,
    LmParams,
    embed,
    greedy_generate,
    lm_backward,
    lm_forward,
    lm_logits,
    masked_ce_loss_and_dlogits,
)

__all__ = [
    "ScheduleConfig",
    "TrainingExample",
    "DivergenceError",
    "lr_schedule",
    "perturbed_copies",
    "transcription_examples",
    "synthesize_mi_targets",
    "filter_regime",
    "train_stage1",
    "train_stage2",
    "save_train_state",
    "load_train_state",
    "stage1_validation_cer",
    "stage2_token_accuracy",
]

PERTURB_FACTORS = (0.9, 1.0, 1.1)


class DivergenceError(RuntimeError):
    pass


def lr_schedule(step: int, warmup: int, lr_max: float) -> float:
    """Linear warmup to lr_max at `warmup` steps, then inverse-sqrt decay."""
    if step < 1:
        raise ValueError(f"lr_schedule: step must be >= 1, got {step}")
    return lr_max * min(step / warmup, math.sqrt(warmup / step))


@dataclass
class ScheduleConfig:
    warmup: int = 500
    lr_max: float = 3e-4
    eval_every: int = 200
    patience: int = 4
    max_steps: int = 6000
    batch_size: int = 8


@dataclass
class TrainingExample:
    utt: Utterance
    template: PromptTemplate
    target: list[int]
    kind: str  # "transcription" | "synthetic"

    def __post_init__(self):
        if self.kind not in ("transcription", "synthetic"):
            raise ValueError(f"TrainingExample: bad kind {self.kind!r}")


def perturbed_copies(utts: list[Utterance], factors=PERTURB_FACTORS) -> list[Utterance]:
    return [speed_perturb(u, f) for u in utts for f in factors]


def transcription_examples(utts: list[Utterance], vocab) -> list[TrainingExample]:
    tpl = asr_template()
    return [
        TrainingExample(utt=u, template=tpl, target=vocab.tokenize(u.text), kind="transcription")
        for u in utts
    ]


def synthesize_mi_targets(
    utts: list[Utterance],
    lm: LmParams,
    prompts: PromptCollection,
    rng: Rng,
    factors=PERTURB_FACTORS,
    max_new: int = 128,
) -> list[TrainingExample]:
    """Generate LM targets for six distinct sampled prompts per utterance
    and assign two to each of the three speed-perturbed copies.

    Targets come from greedy decoding over the prompt-wrapped embeddings of
    the gold transcription; the frozen LM defines the supervision, never a
    hand-written rule.
    """
    if not lm.frozen:
        raise ValueError("synthesize_mi_targets: LM must be frozen")
    need = 2 * len(factors)
    vocab = lm.vocab
    out: list[TrainingExample] = []
    for u in utts:
        templates = prompts.sample_distinct(need, rng.child("mi", u.id))
        text_ids = vocab.tokenize(u.text)
        targets = []
        for tpl in templates:
            ctx = np.vstack(
                [
                    embed([BOS_ID] + vocab.tokenize(tpl.prefix), lm),
                    embed(text_ids, lm),
                    embed(vocab.tokenize(tpl.postfix), lm),
                ]
            )
            targets.append(greedy_generate(ctx, lm, max_new=max_new))
        for ci, f in enumerate(factors):
            copy = speed_perturb(u, f)
            for j in range(2):
                tpl = templates[2 * ci + j]
                out.append(
                    TrainingExample(utt=copy, template=tpl, target=targets[2 * ci + j], kind="synthetic")
                )
    return out


def filter_regime(examples: list[TrainingExample], regime: str) -> list[TrainingExample]:
    if regime == "T":
        return [e for e in examples if e.kind == "transcription"]
    if regime == "MI":
        return [e for e in examples if e.kind == "synthetic"]
    if regime == "TMI":
        return list(examples)
    raise ValueError(f"unknown regime {regime!r} (expected T, MI, or TMI)")


# ---------------------------------------------------------------------------
# shared loop machinery
# ---------------------------------------------------------------------------


@dataclass
class TrainState:
    params: dict[str, np.ndarray]
    adam: AdamState
    step: int = 0
    best_metric: float = math.inf
    best_step: int = 0
    evals_since_best: int = 0
    best_params: dict[str, np.ndarray] = field(default_factory=dict)


def _deep_copy(params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: v.copy() for k, v in params.items()}


def _run_loop(state, schedule, batch_fn, eval_fn, minimize, log, stage_name):
    """Generic step/eval/early-stop loop; mutates and returns `state`.

    `batch_fn(step, params) -> (loss, grads)`; `eval_fn(params) -> metric`.
    `minimize` selects the metric direction; strict improvement resets the
    patience counter.
    """
    if not state.best_params:
        state.best_params = _deep_copy(state.params)
        if state.best_metric == math.inf and not minimize:
            state.best_metric = -math.inf
    while state.step < schedule.max_steps and state.evals_since_best < schedule.patience:
        state.step += 1
        lr = lr_schedule(state.step, schedule.warmup, schedule.lr_max)
        loss, grads = batch_fn(state.step, state.params)
        if not math.isfinite(loss):
            raise DivergenceError(f"{stage_name}: non-finite loss at step {state.step}")
        adam_step(state.params, grads, state.adam, lr)
        if log is not None:
            log.append({"stage": stage_name, "step": state.step, "lr": lr, "loss": loss})
        if state.step % schedule.eval_every == 0:
            metric = eval_fn(state.params)
            improved = metric < state.best_metric if minimize else metric > state.best_metric
            if improved:
                state.best_metric = metric
                state.best_step = state.step
                state.best_params = _deep_copy(state.params)
                state.evals_since_best = 0
            else:
                state.evals_since_best += 1
            if log is not None:
                log.append(
                    {
                        "stage": stage_name,
                        "step": state.step,
                        "val_metric": metric,
                        "best_metric": state.best_metric,
                        "evals_since_best": state.evals_since_best,
                    }
                )
    return state


# ---------------------------------------------------------------------------
# stage 1: CTC alignment
# ---------------------------------------------------------------------------


def _stage1_example(utt, vocab, adaptor_params, acfg, W, grads):
    cache = [] if grads is not None else None
    out = adaptor_forward(utt, adaptor_params, acfg, cache)
    logits = out @ W.T
    log_probs = log_softmax(logits)
    res = ctc_loss_grad(log_probs, vocab.tokenize(utt.text))
    if grads is not None:
        d_out = res.grad_logits @ W
        adaptor_backward(d_out, adaptor_params, acfg, cache, grads)
    return res.loss


def stage1_validation_cer(val_utts, vocab, adaptor_params, acfg, W) -> float:
    """Corpus CER of greedy CTC decoding over the validation set."""
    edits, chars = 0, 0
    for u in val_utts:
        out = adaptor_forward(u, adaptor_params, acfg)
        hyp = ctc_greedy_decode(log_softmax(out @ W.T))
        ref = vocab.tokenize(u.text)
        edits += edit_distance(hyp, ref)
        chars += len(ref)
    return edits / chars


def train_stage1(
    train_utts: list[Utterance],
    val_utts: list[Utterance],
    adaptor_params: dict[str, np.ndarray],
    acfg: AdaptorConfig,
    lm: LmParams,
    schedule: ScheduleConfig,
    rng: Rng,
    log: list | None = None,
    state: TrainState | None = None,
) -> tuple[dict[str, np.ndarray], TrainState]:
    """Minimize CTC loss over adaptor parameters against the frozen tied
    embedding table; select the checkpoint with the lowest validation CER."""
    if not lm.frozen:
        raise ValueError("train_stage1: LM (embedding table) must be frozen")
    vocab, W = lm.vocab, lm.W
    n = len(train_utts)

    def batch_fn(step, params):
        idx = rng.child("batch", step).choice(n, size=schedule.batch_size)
        grads = {k: np.zeros_like(v) for k, v in params.items()}
        total = 0.0
        for i in idx:
            total += _stage1_example(train_utts[int(i)], vocab, params, acfg, W, grads)
        for g in grads.values():
            g /= len(idx)
        return total / len(idx), grads

    def eval_fn(params):
        return stage1_validation_cer(val_utts, vocab, params, acfg, W)

    state = state or TrainState(params=adaptor_params, adam=AdamState.init(adaptor_params))
    state = _run_loop(state, schedule, batch_fn, eval_fn, minimize=True, log=log, stage_name="stage1")
    return state.best_params, state


# ---------------------------------------------------------------------------
# stage 2: CE through the frozen LM
# ---------------------------------------------------------------------------


def _assemble(ex: TrainingExample, speech: np.ndarray, lm: LmParams):
    vocab = lm.vocab
    pre_ids = [BOS_ID] + vocab.tokenize(ex.template.prefix)
    post_ids = vocab.tokenize(ex.template.postfix)
    parts = [embed(pre_ids, lm), speech, embed(post_ids, lm)]
    if ex.target:
        parts.append(embed(ex.target, lm))
    emb = np.vstack(parts)
    base = len(pre_ids) + speech.shape[0] + len(post_ids)
    positions = np.arange(base - 1, emb.shape[0])
    targets = np.array(list(ex.target) + [EOS_ID], dtype=np.int64)
    return emb, positions, targets, len(pre_ids)


def stage2_example_loss(
    ex: TrainingExample,
    adaptor_params: dict[str, np.ndarray],
    acfg: AdaptorConfig,
    lm: LmParams,
    grads: dict[str, np.ndarray] | None = None,
):
    """CE on the target span only, averaged per target token; gradients flow
    through the frozen LM into the adaptor.  Returns (loss, n_correct,
    n_tokens) so callers can pool token-prediction accuracy."""
    acache = [] if grads is not None else None
    speech = adaptor_forward(ex.utt, adaptor_params, acfg, acache)
    emb, positions, targets, speech_start = _assemble(ex, speech, lm)
    lmcache: list = []
    hidden = lm_forward(emb, lm, lmcache)
    logits = lm_logits(hidden, lm)
    loss, dlogits = masked_ce_loss_and_dlogits(logits, positions, targets)
    if grads is not None:
        dhidden = dlogits @ lm.W
        demb = lm_backward(dhidden, lm, lmcache, grads=None)
        dspeech = demb[speech_start : speech_start + speech.shape[0]]
        adaptor_backward(dspeech, adaptor_params, acfg, acache, grads)
    n_correct = int(np.sum(np.argmax(logits[positions], axis=1) == targets))
    return loss, n_correct, len(targets)


def stage2_token_accuracy(examples, adaptor_params, acfg, lm) -> float:
    correct, total = 0, 0
    for ex in examples:
        _, c, t = stage2_example_loss(ex, adaptor_params, acfg, lm, grads=None)
        correct += c
        total += t
    return correct / total


def train_stage2(
    examples: list[TrainingExample],
    val_examples: list[TrainingExample],
    stage1_params: dict[str, np.ndarray] | None,
    acfg: AdaptorConfig,
    lm: LmParams,
    regime: str,
    schedule: ScheduleConfig,
    rng: Rng,
    log: list | None = None,
    state: TrainState | None = None,
    allow_random_init: bool = False,
) -> tuple[dict[str, np.ndarray], TrainState]:
    """CE training on prompt-embedded speech with the frozen LM; selects the
    checkpoint with the highest validation token-prediction accuracy.

    `stage1_params` must come from a stage-1 checkpoint; omitting either
    stage is reported not to converge.  `allow_random_init=True` is the
    explicit escape hatch used to regression-test that observation.
    """
    if stage1_params is None and not allow_random_init:
        raise ValueError("train_stage2: missing stage-1 initialization")
    if not lm.frozen:
        raise ValueError("train_stage2: LM must be frozen")
    pool = filter_regime(examples, regime)
    if not pool:
        raise ValueError(f"train_stage2: empty example pool for regime {regime}")
    val_pool = filter_regime(val_examples, regime)
    n = len(pool)

    def batch_fn(step, params):
        idx = rng.child("batch", step).choice(n, size=schedule.batch_size)
        grads = {k: np.zeros_like(v) for k, v in params.items()}
        total = 0.0
        for i in idx:
            loss, _, _ = stage2_example_loss(pool[int(i)], params, acfg, lm, grads)
            total += loss
        for g in grads.values():
            g /= len(idx)
        return total / len(idx), grads

    def eval_fn(params):
        return stage2_token_accuracy(val_pool, params, acfg, lm)

    if state is None:
        init = _deep_copy(stage1_params) if stage1_params is not None else None
        if init is None:
            raise ValueError("train_stage2: random init requires an explicit params dict in stage1_params")
        state = TrainState(params=init, adam=AdamState.init(init), best_metric=-math.inf)
    state = _run_loop(state, schedule, batch_fn, eval_fn, minimize=False, log=log, stage_name=f"stage2-{regime}")
    return state.best_params, state


# ---------------------------------------------------------------------------
# train-state persistence (BZMM)
# ---------------------------------------------------------------------------


def save_train_state(path, state: TrainState) -> None:
    tensors: dict[str, np.ndarray] = {}
    for k, v in state.params.items():
        tensors[f"param.{k}"] = v
    for k, v in state.adam.m.items():
        tensors[f"adam.m.{k}"] = v
    for k, v in state.adam.v.items():
        tensors[f"adam.v.{k}"] = v
    for k, v in state.best_params.items():
        tensors[f"best.{k}"] = v
    tensors["meta"] = np.array(
        [[float(state.step), float(state.adam.step), state.best_metric, float(state.best_step), float(state.evals_since_best)]]
    )
    save_checkpoint(path, tensors)


def load_train_state(path) -> TrainState:
    tensors, _ = load_checkpoint(path)
    meta = tensors.pop("meta")
    params = {k[len("param."):]: v for k, v in tensors.items() if k.startswith("param.")}
    m = {k[len("adam.m."):]: v for k, v in tensors.items() if k.startswith("adam.m.")}
    v = {k[len("adam.v."):]: v2 for k, v2 in tensors.items() if k.startswith("adam.v.")}
    best = {k[len("best."):]: v2 for k, v2 in tensors.items() if k.startswith("best.")}
    adam = AdamState(m=m, v=v, step=int(meta[0, 1]))
    return TrainState(
        params=params,
        adam=adam,
        step=int(meta[0, 0]),
        best_metric=float(meta[0, 2]),
        best_step=int(meta[0, 3]),
        evals_since_best=int(meta[0, 4]),
        best_params=best,
    )
