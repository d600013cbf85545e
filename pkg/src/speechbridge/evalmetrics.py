"""Evaluation stack: text normalization, WER/CER, corpus BLEU and chrF,
MCC, accuracy, and the zero-shot task harness that drives a frozen
adaptor+LM bundle over an evaluation corpus.

Conventions, frozen so scores are stable across runs:
  - normalization = lowercase, strip punctuation/symbol characters,
    collapse whitespace runs, trim
  - BLEU: n-grams 1..4, 13a-style tokenization (pad punctuation with
    spaces, split on whitespace), exponential smoothing of zero counts,
    brevity penalty, mixed case
  - chrF: character n-grams 1..6, beta=2, whitespace removed
  - report totals are per-language values averaged with sample-count
    weights (equal to the plain corpus value when there is one language)
"""

from __future__ import annotations

import math
import unicodedata
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .adaptor import AdaptorConfig, adaptor_forward
from .numerics import Rng
from .speechsim import Utterance
from .tasks import PromptTemplate, asr_template, make_template, task_output
from .toylm import BOS_ID, LmParams, embed, generate

__all__ = [
    "normalize_text",
    "edit_distance",
    "wer_cer",
    "bleu",
    "chrf",
    "mcc",
    "TaskSpec",
    "ModelBundle",
    "MetricRow",
    "EvalReport",
    "eval_task",
    "default_task_specs",
]


# ---------------------------------------------------------------------------
# text metrics
# ---------------------------------------------------------------------------


def normalize_text(s: str) -> str:
    out = []
    for ch in s.lower():
        if unicodedata.category(ch)[0] in ("P", "S"):
            continue
        out.append(ch)
    return " ".join("".join(out).split())


def edit_distance(a, b) -> int:
    """Unit-cost Levenshtein distance over two sequences."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, start=1):
        cur = [i]
        for j, y in enumerate(b, start=1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


def wer_cer(ref: str, hyp: str) -> tuple[float, float]:
    """(word error rate, character error rate); callers normalize first."""
    if not ref:
        raise ValueError("wer_cer: empty reference")
    ref_words, hyp_words = ref.split(), hyp.split()
    wer = edit_distance(ref_words, hyp_words) / len(ref_words)
    cer = edit_distance(list(ref), list(hyp)) / len(ref)
    return wer, cer


def _tokenize_13a(s: str) -> list[str]:
    # pad punctuation/symbols with spaces, then split; enough for the toy
    # character set and unicode-aware via str.isalnum
    out = []
    for ch in s:
        if not ch.isalnum() and not ch.isspace():
            out.append(f" {ch} ")
        else:
            out.append(ch)
    return "".join(out).split()


def _ngram_counts(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu(refs: list[str], hyps: list[str]) -> float:
    """Corpus BLEU in [0, 100]: orders 1..4, exp smoothing, brevity
    penalty, mixed case, 13a-style tokenization."""
    if len(refs) != len(hyps):
        raise ValueError(f"bleu: {len(refs)} refs vs {len(hyps)} hyps")
    correct = [0] * 4
    total = [0] * 4
    sys_len = 0
    ref_len = 0
    for ref, hyp in zip(refs, hyps):
        rt = _tokenize_13a(ref)
        ht = _tokenize_13a(hyp)
        sys_len += len(ht)
        ref_len += len(rt)
        for n in range(1, 5):
            hc = _ngram_counts(ht, n)
            rc = _ngram_counts(rt, n)
            correct[n - 1] += sum(min(c, rc[g]) for g, c in hc.items())
            total[n - 1] += sum(hc.values())
    if sys_len == 0:
        return 0.0
    log_prec_sum = 0.0
    smooth = 1.0
    for n in range(4):
        if total[n] == 0:
            return 0.0
        if correct[n] == 0:
            smooth *= 2.0
            p = 1.0 / (smooth * total[n])
        else:
            p = correct[n] / total[n]
        log_prec_sum += math.log(p)
    bp = 1.0 if sys_len >= ref_len else math.exp(1.0 - ref_len / sys_len)
    return 100.0 * bp * math.exp(log_prec_sum / 4.0)


def _char_ngrams(s: str, n: int) -> Counter:
    return Counter(s[i : i + n] for i in range(len(s) - n + 1))


def chrf(refs: list[str], hyps: list[str], order: int = 6, beta: float = 2.0) -> float:
    """Corpus chrF in [0, 100]; whitespace removed before counting."""
    if len(refs) != len(hyps):
        raise ValueError(f"chrf: {len(refs)} refs vs {len(hyps)} hyps")
    hyp_tot = [0] * order
    ref_tot = [0] * order
    common = [0] * order
    for ref, hyp in zip(refs, hyps):
        r = "".join(ref.split())
        h = "".join(hyp.split())
        for n in range(1, order + 1):
            hc = _char_ngrams(h, n)
            rc = _char_ngrams(r, n)
            hyp_tot[n - 1] += sum(hc.values())
            ref_tot[n - 1] += sum(rc.values())
            common[n - 1] += sum((hc & rc).values())
    prec, rec, eff = 0.0, 0.0, 0
    for n in range(order):
        if hyp_tot[n] > 0 and ref_tot[n] > 0:
            prec += common[n] / hyp_tot[n]
            rec += common[n] / ref_tot[n]
            eff += 1
    if eff == 0:
        return 0.0
    prec /= eff
    rec /= eff
    if prec + rec == 0:
        return 0.0
    b2 = beta * beta
    return 100.0 * (1 + b2) * prec * rec / (b2 * prec + rec)


def mcc(preds, golds) -> float:
    """Matthews correlation over binary labels; 0 when any factor of the
    denominator vanishes."""
    if len(preds) != len(golds):
        raise ValueError(f"mcc: {len(preds)} preds vs {len(golds)} golds")
    p = np.asarray(preds, dtype=bool)
    g = np.asarray(golds, dtype=bool)
    tp = int(np.sum(p & g))
    tn = int(np.sum(~p & ~g))
    fp = int(np.sum(p & ~g))
    fn = int(np.sum(~p & g))
    denom = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    if denom == 0:
        return 0.0
    return (tp * tn - fp * fn) / math.sqrt(denom)


# ---------------------------------------------------------------------------
# zero-shot task harness
# ---------------------------------------------------------------------------

KNOWN_METRICS = ("cer", "wer", "accuracy", "bleu", "chrf", "mcc")


@dataclass
class TaskSpec:
    """What to run and how to score it for one evaluation task."""

    name: str
    task_id: str
    metrics: list[str]
    answer_options: list[str] | None = None
    beam_size: int = 5
    max_new: int = 192

    def __post_init__(self):
        for m in self.metrics:
            if m not in KNOWN_METRICS:
                raise ValueError(f"TaskSpec {self.name}: unknown metric {m!r}")


@dataclass
class ModelBundle:
    """Frozen adaptor + LM pair used for decoding."""

    lm: LmParams
    adaptor_params: dict[str, np.ndarray]
    adaptor_config: AdaptorConfig


@dataclass
class MetricRow:
    task: str
    metric: str
    value: float
    count: int
    per_language: dict[str, tuple[float, int]] = field(default_factory=dict)


@dataclass
class EvalReport:
    regime: str
    rows: list[MetricRow] = field(default_factory=list)

    def value(self, task: str, metric: str) -> float:
        for r in self.rows:
            if r.task == task and r.metric == metric:
                return r.value
        raise KeyError(f"no row for ({task}, {metric})")

    def to_json_dict(self) -> dict:
        return {
            "regime": self.regime,
            "rows": [
                {
                    "task": r.task,
                    "metric": r.metric,
                    "value": r.value,
                    "count": r.count,
                    "per_language": {k: list(v) for k, v in r.per_language.items()},
                }
                for r in self.rows
            ],
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "EvalReport":
        rows = [
            MetricRow(
                task=r["task"],
                metric=r["metric"],
                value=r["value"],
                count=r["count"],
                per_language={k: (v[0], v[1]) for k, v in r["per_language"].items()},
            )
            for r in d["rows"]
        ]
        return cls(regime=d["regime"], rows=rows)


def default_task_specs() -> list[TaskSpec]:
    counts = [str(i) for i in range(1, 9)]
    return [
        TaskSpec("transcription", "repeat", ["cer", "wer"]),
        TaskSpec("reverse", "reverse", ["accuracy", "bleu", "chrf"]),
        TaskSpec("uppercase", "upper", ["accuracy"]),
        TaskSpec("word-count", "count", ["accuracy"], answer_options=counts),
        TaskSpec("contains-word", "contains", ["accuracy", "mcc"], answer_options=["yes", "no"]),
    ]


def _contains_query(utt: Utterance, idx: int, lexicon: list[str]) -> str:
    """Deterministic per-utterance query word, roughly balanced between
    present and absent."""
    r = Rng.from_seed(4242).child("contains", utt.id)
    words = utt.text.split(" ")
    if idx % 2 == 0:
        return words[int(r.integers(0, len(words)))]
    return lexicon[int(r.integers(0, len(lexicon)))]


def instantiate_template(task: TaskSpec, utt: Utterance, idx: int, lexicon: list[str]) -> tuple[PromptTemplate, str]:
    """Per-utterance (template, gold target) for an eval task."""
    if task.task_id == "contains":
        w = _contains_query(utt, idx, lexicon)
        tpl = make_template("contains", w)
    elif task.task_id == "repeat":
        tpl = asr_template()
    else:
        tpl = make_template(task.task_id)
    return tpl, task_output(tpl.task_id, utt.text, tpl.param)


def decode_utterance(bundle: ModelBundle, utt: Utterance, template: PromptTemplate, task: TaskSpec) -> str:
    """Run the adaptor, wrap in prompt embeddings, decode per task spec."""
    lm = bundle.lm
    vocab = lm.vocab
    speech = adaptor_forward(utt, bundle.adaptor_params, bundle.adaptor_config)
    ctx = np.vstack(
        [
            embed([BOS_ID] + vocab.tokenize(template.prefix), lm),
            speech,
            embed(vocab.tokenize(template.postfix), lm),
        ]
    )
    if task.answer_options is not None:
        allowed = [vocab.tokenize(o) for o in task.answer_options]
        out = generate(ctx, lm, allowed=allowed, beam_size=task.beam_size)
    else:
        out = generate(ctx, lm, mode="beam", beam_size=task.beam_size, max_new=task.max_new)
    try:
        return vocab.detokenize(out)
    except ValueError:
        return ""


def _score(metric: str, golds: list[str], hyps: list[str]) -> float:
    if metric == "accuracy":
        return float(np.mean([g == h for g, h in zip(golds, hyps)]))
    if metric in ("cer", "wer"):
        nref = [normalize_text(g) for g in golds]
        nhyp = [normalize_text(h) for h in hyps]
        w_tot, c_tot, wn, cn = 0.0, 0.0, 0, 0
        for r, h in zip(nref, nhyp):
            rw = r.split()
            w_tot += edit_distance(rw, h.split())
            wn += len(rw)
            c_tot += edit_distance(list(r), list(h))
            cn += len(r)
        return float(w_tot / wn if metric == "wer" else c_tot / cn)
    if metric == "bleu":
        return bleu(golds, hyps)
    if metric == "chrf":
        return chrf(golds, hyps)
    if metric == "mcc":
        return mcc([h == "yes" for h in hyps], [g == "yes" for g in golds])
    raise ValueError(f"unknown metric {metric!r}")


def eval_task(
    bundle: ModelBundle,
    eval_set: list[Utterance],
    task: TaskSpec,
    lexicon: list[str],
) -> list[MetricRow]:
    """Decode every utterance and score with the task's metrics, reporting
    per-language and count-weighted overall values."""
    by_lang: dict[str, tuple[list[str], list[str]]] = {}
    for idx, utt in enumerate(eval_set):
        template, gold = instantiate_template(task, utt, idx, lexicon)
        hyp = decode_utterance(bundle, utt, template, task)
        golds, hyps = by_lang.setdefault(utt.language, ([], []))
        golds.append(gold)
        hyps.append(hyp)
    rows = []
    for metric in task.metrics:
        per_language = {}
        num, den = 0.0, 0
        for lang, (golds, hyps) in sorted(by_lang.items()):
            v = _score(metric, golds, hyps)
            per_language[lang] = (v, len(golds))
            num += v * len(golds)
            den += len(golds)
        rows.append(
            MetricRow(
                task=task.name,
                metric=metric,
                value=num / den if den else 0.0,
                count=den,
                per_language=per_language,
            )
        )
    return rows
