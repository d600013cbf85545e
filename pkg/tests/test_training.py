import math

import numpy as np
import pytest

from speechbridge.adaptor import AdaptorConfig, adaptor_forward, init_adaptor_params
from speechbridge.numerics import AdamState, Rng, finite_diff_check, log_softmax
from speechbridge.speechsim import CorpusSpec, synth_corpus, synth_utterance
from speechbridge.tasks import asr_template, make_template, mi_prompt_collection
from speechbridge.toylm import (
    LmConfig,
    Vocab,
    embed,
    init_lm_params,
    masked_ce_loss_and_dlogits,
)
from speechbridge import training
from speechbridge.training import (
    DivergenceError,
    ScheduleConfig,
    TrainingExample,
    TrainState,
    filter_regime,
    load_train_state,
    lr_schedule,
    perturbed_copies,
    save_train_state,
    synthesize_mi_targets,
    train_stage1,
    train_stage2,
    transcription_examples,
)


def tiny_lm(seed=0, d=16, layers=1, heads=2, ff_dim=24, frozen=True):
    vocab = Vocab()
    cfg = LmConfig(d=d, layers=layers, heads=heads, ff_dim=ff_dim, max_len=128)
    lm = init_lm_params(cfg, vocab, Rng.from_seed(seed))
    if frozen:
        lm.freeze()
    return lm


def tiny_adaptor(lm_dim, seed=1, feature_dim=8, n_layers=2, hidden=8, max_frames=24):
    cfg = AdaptorConfig(blocks=1, hidden=hidden, heads=2, kernel=3, stride=2, max_frames=max_frames)
    params = init_adaptor_params(cfg, feature_dim, n_layers, lm_dim, Rng.from_seed(seed))
    return cfg, params


def tiny_corpus(n=6, sigma=0.1, seed=2, feature_dim=8, n_layers=2):
    spec = CorpusSpec(
        n_utterances=n, words_min=1, words_max=2, sigma=sigma,
        feature_dim=feature_dim, n_layers=n_layers, lexicon_size=8,
    )
    return spec, synth_corpus(spec, Rng.from_seed(seed))


def test_lr_schedule_shape():
    assert lr_schedule(500, 500, 1e-4) == pytest.approx(1e-4)
    assert lr_schedule(250, 500, 1e-4) == pytest.approx(5e-5)
    assert lr_schedule(2000, 500, 1e-4) == pytest.approx(5e-5)  # sqrt(1/4)
    with pytest.raises(ValueError):
        lr_schedule(0, 500, 1e-4)


def test_masked_ce_ignores_non_target_rows():
    rng = Rng.from_seed(3)
    logits = rng.normal(1.0, (10, 7))
    positions = np.array([6, 7, 8])
    targets = np.array([1, 2, 3])
    loss1, _ = masked_ce_loss_and_dlogits(logits, positions, targets)
    noisy = logits.copy()
    noisy[:6] = rng.child("noise").normal(5.0, (6, 7))
    loss2, _ = masked_ce_loss_and_dlogits(noisy, positions, targets)
    assert loss1 == loss2


def test_regime_filter_contract():
    spec, utts = tiny_corpus()
    vocab = Vocab()
    t_ex = transcription_examples(utts, vocab)
    s_ex = [TrainingExample(u, make_template("upper"), [5, 6], "synthetic") for u in utts]
    pool = t_ex + s_ex
    assert all(e.kind == "transcription" for e in filter_regime(pool, "T"))
    assert all(e.kind == "synthetic" for e in filter_regime(pool, "MI"))
    assert len(filter_regime(pool, "TMI")) == len(pool)
    with pytest.raises(ValueError, match="regime"):
        filter_regime(pool, "X")


def test_training_example_rejects_bad_kind():
    spec, utts = tiny_corpus(n=1)
    with pytest.raises(ValueError, match="kind"):
        TrainingExample(utts[0], asr_template(), [5], "gold")


def test_stage1_gradient_through_ctc_head():
    lm = tiny_lm()
    acfg, params = tiny_adaptor(lm.config.d)
    vocab = lm.vocab
    spec = CorpusSpec(feature_dim=8, n_layers=2, sigma=0.1)
    utt = synth_utterance("u", "ab", vocab, spec, Rng.from_seed(7))

    def loss(p):
        return training._stage1_example(utt, vocab, p, acfg, lm.W, None)

    grads = {k: np.zeros_like(v) for k, v in params.items()}
    training._stage1_example(utt, vocab, params, acfg, lm.W, grads)
    err = finite_diff_check(loss, params, grads, epsilon=1e-5)
    assert err < 1e-4


def test_stage2_gradient_through_frozen_lm():
    lm = tiny_lm(layers=2)
    acfg, params = tiny_adaptor(lm.config.d)
    vocab = lm.vocab
    spec = CorpusSpec(feature_dim=8, n_layers=2, sigma=0.1)
    utt = synth_utterance("u", "ab", vocab, spec, Rng.from_seed(8))
    ex = TrainingExample(utt, asr_template(), vocab.tokenize("ab"), "transcription")

    def loss(p):
        return training.stage2_example_loss(ex, p, acfg, lm, grads=None)[0]

    grads = {k: np.zeros_like(v) for k, v in params.items()}
    training.stage2_example_loss(ex, params, acfg, lm, grads)
    err = finite_diff_check(loss, params, grads, epsilon=1e-5)
    assert err < 1e-4


def test_mi_recipe_counts_and_determinism():
    lm = tiny_lm()
    spec, utts = tiny_corpus(n=2)
    coll = mi_prompt_collection([f"w{i}" for i in range(10)])
    ex1 = synthesize_mi_targets(utts, lm, coll, Rng.from_seed(5), max_new=8)
    assert len(ex1) == 6 * len(utts)
    # two targets per perturbed copy, three copies per utterance
    per_copy = {}
    for e in ex1[:6]:
        per_copy.setdefault(e.utt.id, []).append(e)
    assert len(per_copy) == 3
    assert all(len(v) == 2 for v in per_copy.values())
    assert all(e.kind == "synthetic" for e in ex1)
    # six distinct templates per utterance
    assert len({(e.template.prefix, e.template.param) for e in ex1[:6]}) == 6

    ex2 = synthesize_mi_targets(utts, lm, coll, Rng.from_seed(5), max_new=8)
    assert [(e.utt.id, e.target) for e in ex1] == [(e.utt.id, e.target) for e in ex2]


def test_mi_requires_six_distinct_templates():
    lm = tiny_lm()
    spec, utts = tiny_corpus(n=1)
    from speechbridge.tasks import PromptCollection

    small = PromptCollection([make_template("upper"), make_template("count")])
    with pytest.raises(ValueError, match="need"):
        synthesize_mi_targets(utts, lm, small, Rng.from_seed(1))


def test_mi_requires_frozen_lm():
    lm = tiny_lm(frozen=False)
    spec, utts = tiny_corpus(n=1)
    coll = mi_prompt_collection([f"w{i}" for i in range(10)])
    with pytest.raises(ValueError, match="frozen"):
        synthesize_mi_targets(utts, lm, coll, Rng.from_seed(1))


def test_stage2_requires_stage1_init_and_frozen_lm():
    lm = tiny_lm()
    acfg, params = tiny_adaptor(lm.config.d)
    spec, utts = tiny_corpus(n=2)
    pool = transcription_examples(utts, lm.vocab)
    sched = ScheduleConfig(max_steps=1, eval_every=1, batch_size=1)
    with pytest.raises(ValueError, match="stage-1"):
        train_stage2(pool, pool, None, acfg, lm, "T", sched, Rng.from_seed(1))
    lm2 = tiny_lm(frozen=False)
    with pytest.raises(ValueError, match="frozen"):
        train_stage2(pool, pool, params, acfg, lm2, "T", sched, Rng.from_seed(1))


def test_early_stopping_exact_patience():
    evals = []

    def batch_fn(step, params):
        return 1.0, {k: np.zeros_like(v) for k, v in params.items()}

    def eval_fn(params):
        evals.append(1)
        return 0.5  # never improves after the first evaluation

    params = {"w": np.zeros((1, 1))}
    state = TrainState(params=params, adam=AdamState.init(params))
    sched = ScheduleConfig(warmup=10, eval_every=2, patience=3, max_steps=1000, batch_size=1)
    state = training._run_loop(state, sched, batch_fn, eval_fn, minimize=True, log=None, stage_name="t")
    # first eval improves (inf -> 0.5); then exactly `patience` non-improving
    assert len(evals) == 1 + 3
    assert state.evals_since_best == 3
    assert state.step == 8


def test_divergence_raises_with_step():
    def batch_fn(step, params):
        return math.nan, {k: np.zeros_like(v) for k, v in params.items()}

    params = {"w": np.zeros((1, 1))}
    state = TrainState(params=params, adam=AdamState.init(params))
    sched = ScheduleConfig(eval_every=10, max_steps=5, batch_size=1)
    with pytest.raises(DivergenceError, match="step 1"):
        training._run_loop(state, sched, batch_fn, lambda p: 0.0, True, None, "t")


@pytest.mark.slow
def test_stage1_smoke_and_frozen_w_unchanged():
    lm = tiny_lm(seed=4)
    w_before = lm.W.copy()
    acfg, params = tiny_adaptor(lm.config.d, max_frames=64)
    spec, utts = tiny_corpus(n=8, sigma=0.05)
    sched = ScheduleConfig(warmup=20, lr_max=3e-3, eval_every=10, patience=2, max_steps=40, batch_size=4)
    log = []
    best, state = train_stage1(utts, utts[:4], params, acfg, lm, sched, Rng.from_seed(6), log=log)
    assert state.step > 0
    np.testing.assert_array_equal(lm.W, w_before)
    losses = [e["loss"] for e in log if "loss" in e]
    assert losses[-1] < losses[0]


@pytest.mark.slow
def test_checkpoint_resume_bit_exact(tmp_path):
    lm = tiny_lm(seed=9)
    acfg, params = tiny_adaptor(lm.config.d, max_frames=64)
    spec, utts = tiny_corpus(n=6, sigma=0.05, seed=11)
    rng = Rng.from_seed(13)

    def fresh_params():
        return {k: v.copy() for k, v in params.items()}

    # uninterrupted: 20 steps
    sched20 = ScheduleConfig(warmup=10, lr_max=1e-3, eval_every=5, patience=100, max_steps=20, batch_size=2)
    _, state_a = train_stage1(utts, utts[:2], fresh_params(), acfg, lm, sched20, rng)

    # interrupted at 10, saved, loaded, resumed to 20
    sched10 = ScheduleConfig(warmup=10, lr_max=1e-3, eval_every=5, patience=100, max_steps=10, batch_size=2)
    _, state_b = train_stage1(utts, utts[:2], fresh_params(), acfg, lm, sched10, rng)
    path = tmp_path / "resume.bzmm"
    save_train_state(path, state_b)
    loaded = load_train_state(path)
    assert loaded.step == 10
    _, state_c = train_stage1(utts, utts[:2], loaded.params, acfg, lm, sched20, rng, state=loaded)

    for k in state_a.params:
        np.testing.assert_array_equal(state_a.params[k], state_c.params[k])
    for k in state_a.adam.m:
        np.testing.assert_array_equal(state_a.adam.m[k], state_c.adam.m[k])
    assert state_a.best_metric == state_c.best_metric
    assert state_a.step == state_c.step


@pytest.mark.slow
def test_same_seed_identical_loss_curves():
    lm = tiny_lm(seed=21)
    acfg, params = tiny_adaptor(lm.config.d, max_frames=64)
    spec, utts = tiny_corpus(n=6, sigma=0.05, seed=22)
    sched = ScheduleConfig(warmup=10, lr_max=1e-3, eval_every=50, patience=10, max_steps=15, batch_size=2)

    def run():
        log = []
        train_stage1(
            utts, utts[:2], {k: v.copy() for k, v in params.items()}, acfg, lm, sched,
            Rng.from_seed(30), log=log,
        )
        return [e["loss"] for e in log if "loss" in e]

    assert run() == run()


def test_perturbed_copies_three_way():
    spec, utts = tiny_corpus(n=2)
    copies = perturbed_copies(utts)
    assert len(copies) == 6
    assert copies[0].text == utts[0].text
    t0 = utts[0].base_frames.shape[0]
    assert copies[0].base_frames.shape[0] == round(t0 / 0.9)
    assert copies[1].base_frames.shape[0] == t0
    assert copies[2].base_frames.shape[0] == round(t0 / 1.1)
