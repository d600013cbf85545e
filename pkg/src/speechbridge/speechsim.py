"""Synthetic speech frontend: deterministic text-to-frame rendering,
multi-layer feature simulation, softmax-weighted layer collapse, and speed
perturbation.

Every character has a fixed unit-norm prototype vector keyed by its
vocabulary id; an utterance is the concatenation of each character's
prototype repeated for a small random duration, plus optional Gaussian
noise.  A stack of fixed random rotations of the base frames stands in for
the hidden layers of a pretrained speech encoder, so that learning a
weighted sum over layers is meaningful.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .numerics import Rng, check_finite
from .toylm import Vocab

# frozen frontend keys: prototypes and layer rotations never depend on the
# corpus seed, mirroring a pretrained encoder's fixed weights
_PROTO_SEED = 0x5EEDF00D
_LAYER_SEED = 0x10AD5EED

__all__ = [
    "CorpusSpec",
    "FeatureStack",
    "Utterance",
    "char_prototype",
    "prototype_table",
    "synth_utterance",
    "synth_corpus",
    "encode_layers",
    "weighted_sum",
    "weighted_sum_backward",
    "speed_perturb",
    "save_corpus_jsonl",
    "load_corpus_jsonl",
]


@dataclass
class FeatureStack:
    """L feature matrices of identical shape (T, f)."""

    layers: list[np.ndarray]

    def __post_init__(self):
        shapes = {a.shape for a in self.layers}
        if len(shapes) != 1:
            raise ValueError(f"FeatureStack: inconsistent layer shapes {shapes}")
        for a in self.layers:
            check_finite(a, "FeatureStack layer")

    @property
    def T(self) -> int:
        return self.layers[0].shape[0]

    @property
    def f(self) -> int:
        return self.layers[0].shape[1]

    @property
    def L(self) -> int:
        return len(self.layers)


@dataclass
class Utterance:
    id: str
    text: str
    language: str
    base_frames: np.ndarray  # (T, f) rendering before the simulated layers
    n_layers: int

    @property
    def frames(self) -> FeatureStack:
        """Layer stack, derived on demand; eager storage for thousands of
        utterances times three perturbed copies would cost hundreds of MB."""
        return encode_layers(self.base_frames, self.n_layers)


@dataclass
class CorpusSpec:
    n_utterances: int = 2000
    words_min: int = 2
    words_max: int = 4
    charset: str = "abcdefghijklmnopqrstuvwxyz"
    sigma: float = 0.3
    feature_dim: int = 32
    n_layers: int = 8
    lexicon_size: int = 24
    lexicon_seed: int = 1717
    word_len_min: int = 2
    word_len_max: int = 4
    duration_choices: tuple[int, ...] = (2, 3)
    languages: tuple[str, ...] = ("syn",)
    # frame-count floor: keeps every utterance CTC-feasible through the
    # stride-2/kernel-3 length adaptor even after 1.1x speed perturbation
    min_frames_factor: float = 2.3
    min_frames_extra: int = 4

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("CorpusSpec: sigma must be >= 0")
        if self.n_layers < 1:
            raise ValueError("CorpusSpec: n_layers must be >= 1")
        if self.words_min < 1 or self.words_max < self.words_min:
            raise ValueError("CorpusSpec: bad words range")
        if min(self.duration_choices) < 1:
            raise ValueError("CorpusSpec: durations must be >= 1")


# memo caches for the frozen frontend constants; values are deterministic
# functions of their keys so concurrent recomputation is harmless
_proto_cache: dict[tuple[int, int], np.ndarray] = {}
_rotation_cache: dict[tuple[int, int], np.ndarray] = {}


def char_prototype(char_id: int, feature_dim: int) -> np.ndarray:
    """Fixed unit-norm pseudo-random vector for one vocabulary id."""
    key = (char_id, feature_dim)
    if key not in _proto_cache:
        v = Rng.from_seed(_PROTO_SEED).child(char_id, feature_dim).normal(1.0, (feature_dim,))
        v /= np.linalg.norm(v)
        v.flags.writeable = False
        _proto_cache[key] = v
    return _proto_cache[key]


def prototype_table(vocab: Vocab, feature_dim: int) -> np.ndarray:
    return np.stack([char_prototype(i, feature_dim) for i in range(vocab.size)])


def _layer_rotation(layer: int, feature_dim: int) -> np.ndarray:
    key = (layer, feature_dim)
    if key not in _rotation_cache:
        g = Rng.from_seed(_LAYER_SEED).child(layer, feature_dim)
        q, _ = np.linalg.qr(g.normal(1.0, (feature_dim, feature_dim)))
        q.flags.writeable = False
        _rotation_cache[key] = q
    return _rotation_cache[key]


def encode_layers(base_frames: np.ndarray, L: int) -> FeatureStack:
    """Simulated encoder stack: layer l = base_frames @ R_l with fixed
    seed-keyed near-orthonormal rotations; layer L//2 is the identity copy."""
    if L < 1:
        raise ValueError("encode_layers: L must be >= 1")
    f = base_frames.shape[1]
    layers = []
    for l in range(L):
        if l == L // 2:
            layers.append(base_frames.copy())
        else:
            layers.append(base_frames @ _layer_rotation(l, f))
    return FeatureStack(layers)


def weighted_sum(stack: FeatureStack, w: np.ndarray) -> np.ndarray:
    """Softmax(w)-weighted convex combination of the layers."""
    w = np.asarray(w, dtype=np.float64).reshape(-1)
    if w.size != stack.L:
        raise ValueError(f"weighted_sum: {w.size} weights for {stack.L} layers")
    e = np.exp(w - np.max(w))
    probs = e / e.sum()
    out = np.zeros((stack.T, stack.f))
    for p, layer in zip(probs, stack.layers):
        out += p * layer
    return out


def weighted_sum_backward(stack: FeatureStack, w: np.ndarray, d_out: np.ndarray) -> np.ndarray:
    """Gradient of a scalar loss w.r.t. the raw layer weights w."""
    w = np.asarray(w, dtype=np.float64).reshape(-1)
    e = np.exp(w - np.max(w))
    probs = e / e.sum()
    # d loss / d prob_l, then softmax jacobian
    dp = np.array([float(np.sum(d_out * layer)) for layer in stack.layers])
    return probs * (dp - float(np.dot(dp, probs)))


def _render_text(text: str, vocab: Vocab, spec: CorpusSpec, rng: Rng) -> np.ndarray:
    ids = vocab.tokenize(text)
    durations = rng.child("dur").gen.choice(spec.duration_choices, size=len(ids)).astype(np.int64)
    repeats = sum(1 for a, b in zip(ids, ids[1:]) if a == b)
    floor = int(np.ceil(spec.min_frames_factor * (len(ids) + repeats))) + spec.min_frames_extra
    # round-robin duration bumps until the frame-count floor is met
    i = 0
    while durations.sum() < floor:
        durations[i % len(durations)] += 1
        i += 1
    rows = []
    for tok, dur in zip(ids, durations):
        proto = char_prototype(tok, spec.feature_dim)
        rows.extend([proto] * int(dur))
    base = np.array(rows)
    if spec.sigma > 0:
        base = base + rng.child("noise").normal(spec.sigma, base.shape)
    return base


def synth_utterance(
    utt_id: str, text: str, vocab: Vocab, spec: CorpusSpec, rng: Rng, language: str = "syn"
) -> Utterance:
    if not text:
        raise ValueError("synth_utterance: empty text")
    base = _render_text(text, vocab, spec, rng)
    return Utterance(
        id=utt_id, text=text, language=language, base_frames=base, n_layers=spec.n_layers
    )


def build_lexicon(spec: CorpusSpec) -> list[str]:
    """Fixed word list shared by speech synthesis and the text task corpus.

    Each word gets a distinct initial character (so the pool size is capped
    by the charset); word identity then has a low-order cue the way natural
    words carry redundancy, which keeps word-membership questions learnable
    at toy scale.
    """
    if spec.lexicon_size > len(spec.charset):
        raise ValueError("CorpusSpec: lexicon_size exceeds distinct initials in charset")
    rng = Rng.from_seed(spec.lexicon_seed).child("lexicon")
    chars = list(spec.charset)
    initials = [chars[int(i)] for i in rng.child("init").gen.permutation(len(chars))]
    words = []
    for i in range(spec.lexicon_size):
        r = rng.child(i)
        n = int(r.integers(spec.word_len_min, spec.word_len_max + 1))
        rest = "".join(chars[int(j)] for j in r.integers(0, len(chars), size=n - 1))
        words.append(initials[i] + rest)
    return words


def random_sentence(lexicon: list[str], spec: CorpusSpec, rng: Rng) -> str:
    """Words drawn without replacement: duplicate words would make verbatim
    copying ambiguous and word-membership questions ill-posed."""
    n = int(rng.child("n").integers(spec.words_min, spec.words_max + 1))
    idx = rng.child("w").choice(len(lexicon), size=min(n, len(lexicon)), replace=False)
    return " ".join(lexicon[int(i)] for i in idx)


def synth_corpus(spec: CorpusSpec, rng: Rng, vocab: Vocab | None = None, prefix: str = "utt") -> list[Utterance]:
    """Deterministic synthetic corpus; same seed, bit-identical output."""
    vocab = vocab or Vocab()
    lexicon = build_lexicon(spec)
    utts = []
    for i in range(spec.n_utterances):
        r = rng.child("utt", i)
        text = random_sentence(lexicon, spec, r.child("text"))
        lang = spec.languages[i % len(spec.languages)]
        utts.append(synth_utterance(f"{prefix}-{i:05d}", text, vocab, spec, r.child("render"), lang))
    return utts


def speed_perturb(utt: Utterance, factor: float) -> Utterance:
    """Resample the frame axis by linear interpolation to round(T/factor)
    frames; text unchanged.  factor 1.0 returns identical frames."""
    if factor <= 0:
        raise ValueError("speed_perturb: factor must be positive")
    if factor == 1.0:
        return Utterance(utt.id, utt.text, utt.language, utt.base_frames, utt.n_layers)
    T = utt.base_frames.shape[0]
    new_T = int(round(T / factor))
    n_tokens = len(utt.text)
    if new_T < n_tokens:
        raise ValueError(
            f"speed_perturb: {new_T} frames < {n_tokens} tokens (CTC infeasible)"
        )
    # linear interpolation at evenly spaced source positions
    src = np.linspace(0.0, T - 1.0, new_T)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, T - 1)
    frac = (src - lo)[:, None]
    base = utt.base_frames[lo] * (1.0 - frac) + utt.base_frames[hi] * frac
    return Utterance(
        id=f"{utt.id}@{factor:g}",
        text=utt.text,
        language=utt.language,
        base_frames=base,
        n_layers=utt.n_layers,
    )


def nearest_prototype_decode(base_frames: np.ndarray, vocab: Vocab) -> str:
    """Classify each frame to its nearest character prototype and collapse
    repeats; exact on sigma=0 corpora."""
    protos = prototype_table(vocab, base_frames.shape[1])
    sims = base_frames @ protos.T
    ids = np.argmax(sims, axis=1)
    chars = []
    prev = None
    for i in ids:
        if i != prev:
            chars.append(vocab.symbols[int(i)])
        prev = i
    return "".join(chars)


# ---------------------------------------------------------------------------
# persistence: JSON Lines with a shared header record
# ---------------------------------------------------------------------------


def save_corpus_jsonl(utts: list[Utterance], spec: CorpusSpec, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        header = {
            "kind": "header",
            "feature_dim": spec.feature_dim,
            "n_layers": spec.n_layers,
            "sigma": spec.sigma,
            "charset": spec.charset,
        }
        fh.write(json.dumps(header) + "\n")
        for u in utts:
            rec = {
                "id": u.id,
                "text": u.text,
                "language": u.language,
                "frames": u.base_frames.tolist(),
            }
            fh.write(json.dumps(rec) + "\n")


def load_corpus_jsonl(path) -> list[Utterance]:
    utts = []
    with open(path, encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        if header.get("kind") != "header":
            raise ValueError("corpus file missing header record")
        L = int(header["n_layers"])
        for line in fh:
            rec = json.loads(line)
            base = np.array(rec["frames"], dtype=np.float64)
            utts.append(
                Utterance(
                    id=rec["id"],
                    text=rec["text"],
                    language=rec["language"],
                    base_frames=base,
                    n_layers=L,
                )
            )
    return utts
