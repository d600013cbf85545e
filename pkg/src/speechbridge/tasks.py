"""The five deterministic toy text tasks and their prompt templates.

Each task is a pure string function, so LM mastery and modality transfer
are independently checkable against exact gold outputs.  The transcription
prompt ("Repeat the sentence: ") is kept out of the multi-instruction
collection: synthetic targets deliberately never supervise verbatim
transcription.
"""

from __future__ import annotations

from dataclasses import dataclass

from .numerics import Rng

ASR_PREFIX = "Repeat the sentence: "
ASR_POSTFIX = ". "

__all__ = [
    "PromptTemplate",
    "PromptCollection",
    "ASR_PREFIX",
    "ASR_POSTFIX",
    "task_output",
    "asr_template",
    "mi_prompt_collection",
    "TASK_IDS",
]

TASK_IDS = ("repeat", "reverse", "upper", "count", "contains")


@dataclass(frozen=True)
class PromptTemplate:
    prefix: str
    postfix: str
    task_id: str
    param: str = ""  # query word for the contains task

    def __post_init__(self):
        if not self.prefix:
            raise ValueError("PromptTemplate: empty prefix")


@dataclass
class PromptCollection:
    templates: list[PromptTemplate]

    @property
    def size(self) -> int:
        return len(self.templates)

    def sample_distinct(self, n: int, rng: Rng) -> list[PromptTemplate]:
        if self.size < n:
            raise ValueError(f"PromptCollection: need {n} templates, have {self.size}")
        idx = rng.gen.choice(self.size, size=n, replace=False)
        return [self.templates[int(i)] for i in idx]


def task_output(task_id: str, text: str, param: str = "") -> str:
    """Gold output of a task on a sentence."""
    words = text.split(" ")
    if task_id == "repeat":
        return text
    if task_id == "reverse":
        return " ".join(reversed(words))
    if task_id == "upper":
        return text.upper()
    if task_id == "count":
        return str(len(words))
    if task_id == "contains":
        return "yes" if param in words else "no"
    raise ValueError(f"unknown task {task_id!r}")


def make_template(task_id: str, param: str = "") -> PromptTemplate:
    prefixes = {
        "repeat": ASR_PREFIX,
        "reverse": "Reverse the words: ",
        "upper": "Uppercase the sentence: ",
        "count": "Count the words: ",
        "contains": f"Does the text contain the word {param}? ",
    }
    return PromptTemplate(prefix=prefixes[task_id], postfix=". ", task_id=task_id, param=param)


def asr_template() -> PromptTemplate:
    return make_template("repeat")


def mi_prompt_collection(lexicon: list[str], n_contains: int = 8, seed: int = 99) -> PromptCollection:
    """Non-transcription prompt pool: reverse, upper, count, plus contains
    templates instantiated with a fixed sample of lexicon words."""
    rng = Rng.from_seed(seed).child("mi-prompts")
    idx = rng.gen.choice(len(lexicon), size=min(n_contains, len(lexicon)), replace=False)
    templates = [make_template("reverse"), make_template("upper"), make_template("count")]
    templates += [make_template("contains", lexicon[int(i)]) for i in idx]
    return PromptCollection(templates)


def instruction_example_text(template: PromptTemplate, sentence: str) -> tuple[str, str]:
    """(prompt-wrapped input text, gold target) for LM pretraining."""
    prompt = template.prefix + sentence + template.postfix
    return prompt, task_output(template.task_id, sentence, template.param)
