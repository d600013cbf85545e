import math
from functools import lru_cache

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from speechbridge.evalmetrics import (
    EvalReport,
    MetricRow,
    TaskSpec,
    bleu,
    chrf,
    edit_distance,
    mcc,
    normalize_text,
    wer_cer,
)
from speechbridge.numerics import Rng


def test_normalize_examples():
    assert normalize_text("Hello, World!") == "hello world"
    assert normalize_text("  a   b ") == "a b"


@given(st.text(max_size=60))
def test_normalize_idempotent(s):
    assert normalize_text(normalize_text(s)) == normalize_text(s)


def test_wer_cer_examples():
    assert wer_cer("a b c", "a b c") == (0.0, 0.0)
    wer, _ = wer_cer("a b c", "a x c")
    assert wer == pytest.approx(1 / 3)
    _, cer = wer_cer("ab", "")
    assert cer == 1.0
    with pytest.raises(ValueError, match="empty"):
        wer_cer("", "x")


def reference_edit_distance(a, b):
    """Memoized recursive Levenshtein, independent of the DP implementation."""

    @lru_cache(maxsize=None)
    def rec(i, j):
        if i == 0:
            return j
        if j == 0:
            return i
        return min(
            rec(i - 1, j) + 1,
            rec(i, j - 1) + 1,
            rec(i - 1, j - 1) + (a[i - 1] != b[j - 1]),
        )

    return rec(len(a), len(b))


def test_edit_distance_matches_memoized_reference_500_pairs():
    rng = Rng.from_seed(77)
    alphabet = "abcd "
    for i in range(500):
        r = rng.child(i)
        la, lb = int(r.integers(0, 9)), int(r.integers(0, 9))
        a = "".join(alphabet[int(k)] for k in r.child("a").integers(0, 5, size=la))
        b = "".join(alphabet[int(k)] for k in r.child("b").integers(0, 5, size=lb))
        assert edit_distance(a, b) == reference_edit_distance(a, b)


# --- independent BLEU oracle: published formula, different mechanics -------


def oracle_bleu(refs, hyps):
    def tok(s):
        out = ""
        for ch in s:
            out += f" {ch} " if (not ch.isalnum() and not ch.isspace()) else ch
        return out.split()

    def ngrams(tokens, n):
        return [tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1)]

    correct = {n: 0 for n in range(1, 5)}
    total = {n: 0 for n in range(1, 5)}
    sys_len = ref_len = 0
    for ref, hyp in zip(refs, hyps):
        rt, ht = tok(ref), tok(hyp)
        sys_len += len(ht)
        ref_len += len(rt)
        for n in range(1, 5):
            rlist = ngrams(rt, n)
            for g in ngrams(ht, n):
                total[n] += 1
                if g in rlist:
                    rlist.remove(g)  # clip by consuming reference ngrams
                    correct[n] += 1
    if sys_len == 0:
        return 0.0
    logsum, smooth = 0.0, 1.0
    for n in range(1, 5):
        if total[n] == 0:
            return 0.0
        if correct[n] == 0:
            smooth *= 2.0
            p = 1.0 / (smooth * total[n])
        else:
            p = correct[n] / total[n]
        logsum += math.log(p)
    bp = 1.0 if sys_len >= ref_len else math.exp(1 - ref_len / sys_len)
    return 100.0 * bp * math.exp(logsum / 4)


def random_corpus(rng: Rng, n_pairs: int):
    words = ["cat", "dog", "runs", "fast", "blue", "sky", "the", "a"]
    refs, hyps = [], []
    for i in range(n_pairs):
        r = rng.child(i)
        lr = int(r.integers(1, 9))
        lh = int(r.integers(0, 9))
        refs.append(" ".join(words[int(k)] for k in r.child("r").integers(0, len(words), size=lr)))
        hyps.append(" ".join(words[int(k)] for k in r.child("h").integers(0, len(words), size=lh)))
    return refs, hyps


def test_bleu_trivial_bounds():
    refs = ["the cat runs fast", "a blue sky"]
    assert bleu(refs, list(refs)) == pytest.approx(100.0)
    assert bleu(refs, ["", ""]) == 0.0
    with pytest.raises(ValueError):
        bleu(["a"], ["a", "b"])


def test_bleu_matches_independent_oracle_20_corpora():
    rng = Rng.from_seed(123)
    for c in range(20):
        refs, hyps = random_corpus(rng.child("corpus", c), n_pairs=8)
        assert bleu(refs, hyps) == pytest.approx(oracle_bleu(refs, hyps), abs=0.1)


def test_bleu_duplication_invariance():
    # exact once every n-gram order has matches (exp smoothing only enters
    # for zero counts, where 1/(2^k * total) depends on corpus size)
    refs = ["the cat runs fast today", "a blue sky over the sea is nice"]
    hyps = ["the cat runs fast now", "a blue sky over the sea was nice"]
    assert bleu(refs + refs, hyps + hyps) == pytest.approx(bleu(refs, hyps), abs=1e-9)


def test_chrf_trivial_and_hand_computed():
    assert chrf(["abc def"], ["abc def"]) == pytest.approx(100.0)
    assert chrf(["aaa"], ["bbb"]) == 0.0
    # single pair abc/abd: P1=R1=2/3, P2=R2=1/2, P3=R3=0, orders 4..6 empty
    # avg P = avg R = (2/3 + 1/2 + 0)/3 = 7/18; F(beta=2) = P = 7/18
    assert chrf(["abc"], ["abd"]) == pytest.approx(100.0 * 7 / 18)
    with pytest.raises(ValueError):
        chrf(["a"], ["a", "b"])


def test_chrf_duplication_invariance():
    rng = Rng.from_seed(10)
    refs, hyps = random_corpus(rng, 5)
    assert chrf(refs + refs, hyps + hyps) == pytest.approx(chrf(refs, hyps), abs=1e-9)


def test_mcc_trivial_cases():
    g = [True, True, False, False]
    assert mcc(g, g) == pytest.approx(1.0)
    assert mcc([not x for x in g], g) == pytest.approx(-1.0)
    assert mcc([True] * 4, g) == 0.0
    with pytest.raises(ValueError):
        mcc([True], [True, False])


def test_mcc_matches_closed_form_100_random():
    rng = Rng.from_seed(55)
    for i in range(100):
        r = rng.child(i)
        n = int(r.integers(2, 30))
        preds = r.child("p").integers(0, 2, size=n).astype(bool)
        golds = r.child("g").integers(0, 2, size=n).astype(bool)
        tp = np.sum(preds & golds)
        tn = np.sum(~preds & ~golds)
        fp = np.sum(preds & ~golds)
        fn = np.sum(~preds & golds)
        denom = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
        want = 0.0 if denom == 0 else (tp * tn - fp * fn) / math.sqrt(denom)
        assert mcc(preds, golds) == pytest.approx(want, abs=1e-12)


def test_metrics_symmetric_under_corpus_reordering():
    rng = Rng.from_seed(31)
    refs, hyps = random_corpus(rng, 7)
    perm = Rng.from_seed(32).gen.permutation(7)
    refs_p = [refs[i] for i in perm]
    hyps_p = [hyps[i] for i in perm]
    assert bleu(refs, hyps) == pytest.approx(bleu(refs_p, hyps_p), abs=1e-9)
    assert chrf(refs, hyps) == pytest.approx(chrf(refs_p, hyps_p), abs=1e-9)


def test_task_spec_rejects_unknown_metric():
    with pytest.raises(ValueError, match="unknown metric"):
        TaskSpec("t", "repeat", ["nope"])


def test_eval_report_json_roundtrip():
    rep = EvalReport(
        regime="T",
        rows=[
            MetricRow("transcription", "cer", 0.12, 10, {"syn": (0.12, 10)}),
            MetricRow("reverse", "accuracy", 0.5, 10, {"syn": (0.5, 10)}),
        ],
    )
    back = EvalReport.from_json_dict(rep.to_json_dict())
    assert back == rep
