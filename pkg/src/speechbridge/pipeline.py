"""End-to-end orchestration: instruction corpus construction, LM
pretraining, the two training stages, target synthesis, evaluation, and
similarity-map export.  The CLI maps subcommands onto these functions;
tests drive them directly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .adaptor import AdaptorConfig, adaptor_forward, init_adaptor_params, similarity_map
from .evalmetrics import EvalReport, ModelBundle, TaskSpec, default_task_specs, eval_task
from .numerics import Rng
from .speechsim import CorpusSpec, Utterance, build_lexicon, synth_corpus
from .tasks import (
    TASK_IDS,
    instruction_example_text,
    make_template,
    mi_prompt_collection,
)
from .toylm import InstructionExample, LmConfig, LmParams, Vocab, pretrain_toylm
from .training import (
    ScheduleConfig,
    TrainingExample,
    perturbed_copies,
    synthesize_mi_targets,
    train_stage1,
    train_stage2,
    transcription_examples,
)

__all__ = [
    "PretrainConfig",
    "build_instruction_corpus",
    "pretrain_lm",
    "make_adaptor",
    "run_stage1",
    "build_stage2_pools",
    "run_stage2",
    "evaluate_bundle",
    "similarity_csv",
]


@dataclass
class PretrainConfig:
    examples_per_task: int = 1500
    batch_size: int = 16
    lr_max: float = 1e-3
    warmup: int = 300
    max_epochs: int = 20
    target_exact_match: float = 0.95


def build_instruction_corpus(
    spec: CorpusSpec, n_per_task: int, rng: Rng, tasks=TASK_IDS
) -> list[InstructionExample]:
    """Instruction examples over lexicon sentences for every toy task; the
    contains task alternates present/absent query words."""
    from .speechsim import random_sentence

    lexicon = build_lexicon(spec)
    out = []
    for task_id in tasks:
        for i in range(n_per_task):
            r = rng.child(task_id, i)
            sentence = random_sentence(lexicon, spec, r.child("s"))
            if task_id == "contains":
                words = sentence.split(" ")
                if i % 2 == 0:
                    param = words[int(r.child("w").integers(0, len(words)))]
                else:
                    param = lexicon[int(r.child("w").integers(0, len(lexicon)))]
                tpl = make_template(task_id, param)
            else:
                tpl = make_template(task_id)
            prompt, target = instruction_example_text(tpl, sentence)
            out.append(InstructionExample(prompt=prompt, target=target))
    return out


def pretrain_lm(
    corpus_spec: CorpusSpec,
    lm_config: LmConfig,
    pre_cfg: PretrainConfig,
    rng: Rng,
    log: list | None = None,
) -> LmParams:
    corpus = build_instruction_corpus(corpus_spec, pre_cfg.examples_per_task, rng.child("corpus"))
    return pretrain_toylm(
        corpus,
        lm_config,
        rng.child("train"),
        batch_size=pre_cfg.batch_size,
        lr_max=pre_cfg.lr_max,
        warmup=pre_cfg.warmup,
        max_epochs=pre_cfg.max_epochs,
        target_exact_match=pre_cfg.target_exact_match,
        log=log,
    )


def make_adaptor(corpus_spec: CorpusSpec, acfg: AdaptorConfig, lm: LmParams, rng: Rng):
    return init_adaptor_params(acfg, corpus_spec.feature_dim, corpus_spec.n_layers, lm.config.d, rng)


def run_stage1(
    train_utts: list[Utterance],
    val_utts: list[Utterance],
    adaptor_params,
    acfg: AdaptorConfig,
    lm: LmParams,
    schedule: ScheduleConfig,
    rng: Rng,
    log: list | None = None,
    augment: bool = True,
):
    """Speed-perturbed CTC training; returns (best params, final state)."""
    pool = perturbed_copies(train_utts) if augment else list(train_utts)
    return train_stage1(pool, val_utts, adaptor_params, acfg, lm, schedule, rng, log=log)


def build_stage2_pools(
    utts: list[Utterance],
    lm: LmParams,
    corpus_spec: CorpusSpec,
    rng: Rng,
    mi_max_new: int = 128,
) -> list[TrainingExample]:
    """Union pool: transcription targets on the three perturbed copies plus
    six synthetic multi-instruction targets per utterance."""
    lexicon = build_lexicon(corpus_spec)
    prompts = mi_prompt_collection(lexicon)
    t_pool = transcription_examples(perturbed_copies(utts), lm.vocab)
    mi_pool = synthesize_mi_targets(utts, lm, prompts, rng, max_new=mi_max_new)
    return t_pool + mi_pool


def run_stage2(
    train_pool: list[TrainingExample],
    val_pool: list[TrainingExample],
    stage1_params,
    acfg: AdaptorConfig,
    lm: LmParams,
    regime: str,
    schedule: ScheduleConfig,
    rng: Rng,
    log: list | None = None,
    allow_random_init: bool = False,
):
    return train_stage2(
        train_pool,
        val_pool,
        stage1_params,
        acfg,
        lm,
        regime,
        schedule,
        rng,
        log=log,
        allow_random_init=allow_random_init,
    )


def evaluate_bundle(
    bundle: ModelBundle,
    eval_utts: list[Utterance],
    corpus_spec: CorpusSpec,
    regime: str,
    tasks: list[TaskSpec] | None = None,
) -> EvalReport:
    lexicon = build_lexicon(corpus_spec)
    report = EvalReport(regime=regime)
    for task in tasks or default_task_specs():
        report.rows.extend(eval_task(bundle, eval_utts, task, lexicon))
    return report


def similarity_csv(bundle: ModelBundle, utt: Utterance, path) -> np.ndarray:
    """Speech-frame x text-token cosine matrix, written as CSV with the
    token characters as the header row."""
    tokens = bundle.lm.vocab.tokenize(utt.text)
    speech = adaptor_forward(utt, bundle.adaptor_params, bundle.adaptor_config)
    sims = similarity_map(speech, tokens, bundle.lm.W)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(ch for ch in utt.text) + "\n")
        for row in sims:
            fh.write(",".join(f"{x:.6f}" for x in row) + "\n")
    return sims


def write_jsonl(path, records) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
