"""Multiple-choice prompting evaluation and validation perplexity.

Scores each candidate answer's conditional log-likelihood under the model,
selects the argmax, and aggregates answer perplexities over a dataset in
base 2 (validation perplexity uses the natural base; both bases are carried
in result metadata so the two metrics cannot be confused).

Prompt template, version "mcp-v1":

    {question}\n{label}. {text}\n...{label}. {text}\nAnswer:

Demonstrations render the same block followed by a space and the correct
label; blocks are joined by a blank line. The scored continuation is a
space plus the answer label (or the full answer text when score_target is
"text").

Any object with ``ctx_len``, ``encode(text)``, and ``logprob_rows(tokens)``
can be scored; a ``next_token_logprobs_batch(sequences)`` method is used as
a batched fast path when present.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Protocol, Sequence

import numpy as np

from .errors import PersistenceError, ValidationError

TEMPLATE_VERSION = "mcp-v1"
ANSWERS_PPL_LOG_BASE = 2      # dataset-level answer perplexity
VALIDATION_PPL_LOG_BASE = "e"  # validation perplexity over raw text
DEFAULT_SHOTS = 5
LN2 = math.log(2.0)


class ScoringModel(Protocol):
    ctx_len: int

    def encode(self, text: str) -> list[int]: ...

    def logprob_rows(self, tokens: Sequence[int]) -> np.ndarray: ...


@dataclass(frozen=True)
class McpItem:
    question: str
    choices: tuple[tuple[str, str], ...]  # (label, answer text), ordered
    correct_index: int
    demos: tuple["McpItem", ...] = ()

    def __post_init__(self):
        choices = tuple((str(l), str(t)) for l, t in self.choices)
        object.__setattr__(self, "choices", choices)
        object.__setattr__(self, "demos", tuple(self.demos))
        if len(choices) < 2:
            raise ValidationError("item needs at least 2 choices")
        labels = [l for l, _ in choices]
        if len(set(labels)) != len(labels):
            raise ValidationError(f"duplicate choice labels {labels}")
        if not 0 <= self.correct_index < len(choices):
            raise ValidationError(f"correct_index {self.correct_index} out of range")

    @property
    def correct_label(self) -> str:
        return self.choices[self.correct_index][0]


@dataclass(frozen=True)
class McpDataset:
    items: tuple[McpItem, ...]
    name: str = "unnamed"
    format_version: int = 1

    def __post_init__(self):
        object.__setattr__(self, "items", tuple(self.items))
        if not self.items:
            raise ValidationError("dataset must contain at least one item")


# ---------------------------------------------------------------------------
# Prompt rendering
# ---------------------------------------------------------------------------

def render_item_block(item: McpItem, with_answer: bool) -> str:
    lines = [item.question]
    lines += [f"{label}. {text}" for label, text in item.choices]
    block = "\n".join(lines) + "\nAnswer:"
    if with_answer:
        block += f" {item.correct_label}"
    return block


def render_context(demos: Sequence[McpItem]) -> str:
    """Rendered demonstrations, blank-line separated, ending with a separator."""
    if not demos:
        return ""
    return "\n\n".join(render_item_block(d, with_answer=True) for d in demos) + "\n\n"


def answer_continuation(item: McpItem, choice_index: int, score_target: str) -> str:
    if score_target == "label":
        return " " + item.choices[choice_index][0]
    if score_target == "text":
        return " " + item.choices[choice_index][1]
    raise ValueError(f"score_target must be 'label' or 'text', got {score_target!r}")


def _demos_for(item: McpItem, dataset: McpDataset, idx: int, shots: int, seed: int):
    """The item's own demos when present, else seeded draws from other items."""
    if item.demos:
        return item.demos
    if shots <= 0:
        return ()
    others = [j for j in range(len(dataset.items)) if j != idx]
    if len(others) < shots:
        raise ValidationError(f"cannot draw {shots} demos from {len(others)} other items")
    rng = np.random.Generator(
        np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(idx,)))
    )
    return tuple(dataset.items[int(j)] for j in rng.choice(others, shots, replace=False))


# ---------------------------------------------------------------------------
# Likelihood scoring
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AnswerScore:
    """Total conditional log-probability of the answer tokens."""

    nats: float
    bits: float
    n_tokens: int


def answer_logprob(
    model: ScoringModel, context: str, question: str, answer: str
) -> AnswerScore:
    """Sum of per-token conditional log-probs of ``answer`` given the prefix.

    ``context`` is the rendered demonstration text (may be empty) and
    ``question`` the rendered query block; prompt tokens contribute nothing
    to the score.
    """
    prefix = model.encode(context + question)
    ans = model.encode(answer)
    if not prefix:
        raise ValueError("prompt prefix must be non-empty")
    if not ans:
        raise ValueError("answer must be non-empty")
    full = list(prefix) + list(ans)
    if len(full) > model.ctx_len:
        raise ValueError(
            f"prompt+answer length {len(full)} exceeds ctx_len {model.ctx_len}"
        )
    rows = model.logprob_rows(full)
    positions = range(len(prefix) - 1, len(full) - 1)
    nats = float(sum(float(rows[t, full[t + 1]]) for t in positions))
    return AnswerScore(nats=nats, bits=nats / LN2, n_tokens=len(ans))


def _score_item_choices(
    model: ScoringModel, item: McpItem, demos: Sequence[McpItem], score_target: str
) -> list[AnswerScore]:
    context = render_context(demos)
    question = render_item_block(item, with_answer=False)
    prefix = model.encode(context + question)
    sequences, ans_lens = [], []
    for ci in range(len(item.choices)):
        ans = model.encode(answer_continuation(item, ci, score_target))
        full = prefix + ans
        if len(full) > model.ctx_len:
            raise ValueError(
                f"prompt+answer length {len(full)} exceeds ctx_len {model.ctx_len}"
            )
        sequences.append(full)
        ans_lens.append(len(ans))
    batch_fn = getattr(model, "next_token_logprobs_batch", None)
    if batch_fn is not None:
        per_tok = batch_fn(sequences)
        sums = [float(np.sum(lp[len(prefix) - 1 :])) for lp in per_tok]
    else:
        sums = []
        for seq in sequences:
            rows = model.logprob_rows(seq)
            sums.append(
                float(sum(float(rows[t, seq[t + 1]]) for t in range(len(prefix) - 1, len(seq) - 1)))
            )
    return [
        AnswerScore(nats=s, bits=s / LN2, n_tokens=n) for s, n in zip(sums, ans_lens)
    ]


def choose(
    model: ScoringModel,
    item: McpItem,
    demos: Sequence[McpItem] = (),
    score_target: str = "label",
) -> str:
    """Label with the maximal answer log-prob; ties go to the earliest choice."""
    scores = _score_item_choices(model, item, demos, score_target)
    best = 0
    for i in range(1, len(scores)):
        if scores[i].nats > scores[best].nats:
            best = i
    return item.choices[best][0]


# ---------------------------------------------------------------------------
# Dataset-level metrics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class McpResult:
    accuracy: float
    ppl_correct: float
    ppl_incorrect: float
    n_items: int
    shots: int
    score_target: str
    seed: int
    log_base_answers: int = ANSWERS_PPL_LOG_BASE
    log_base_validation: str = VALIDATION_PPL_LOG_BASE
    template_version: str = TEMPLATE_VERSION

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "ppl_correct": self.ppl_correct,
            "ppl_incorrect": self.ppl_incorrect,
            "n_items": self.n_items,
            "shots": self.shots,
            "score_target": self.score_target,
            "seed": self.seed,
            "bases": {
                "answers_ppl": self.log_base_answers,
                "validation_ppl": self.log_base_validation,
            },
            "template_version": self.template_version,
        }


def _item_scores(model, dataset, shots, seed, score_target):
    for idx, item in enumerate(dataset.items):
        demos = _demos_for(item, dataset, idx, shots, seed)
        yield item, _score_item_choices(model, item, demos, score_target)


def answers_perplexity(
    model: ScoringModel,
    dataset: McpDataset,
    subset: str,
    shots: int = DEFAULT_SHOTS,
    seed: int = 0,
    score_target: str = "label",
    per_token: bool = False,
) -> float:
    """Base-2 answer perplexity aggregated over the dataset.

    subset "correct" uses each item's correct answer; "incorrect-averaged"
    uses the mean log-prob over the item's incorrect choices. The default
    normalizes by item count; ``per_token`` switches to token-count
    normalization (never used for the headline metrics).
    """
    if subset not in ("correct", "incorrect-averaged"):
        raise ValueError(f"subset must be 'correct' or 'incorrect-averaged', got {subset!r}")
    total_bits = 0.0
    total_norm = 0.0
    for item, scores in _item_scores(model, dataset, shots, seed, score_target):
        if subset == "correct":
            s = scores[item.correct_index]
            bits, norm = s.bits, s.n_tokens
        else:
            wrong = [s for i, s in enumerate(scores) if i != item.correct_index]
            bits = sum(s.bits for s in wrong) / len(wrong)
            norm = sum(s.n_tokens for s in wrong) / len(wrong)
        total_bits += bits
        total_norm += norm if per_token else 1.0
    return float(2.0 ** (-total_bits / total_norm))


def accuracy(
    model: ScoringModel,
    dataset: McpDataset,
    shots: int = DEFAULT_SHOTS,
    seed: int = 0,
    score_target: str = "label",
) -> float:
    """Fraction of items whose argmax choice is the correct label."""
    hits = 0
    for item, scores in _item_scores(model, dataset, shots, seed, score_target):
        best = 0
        for i in range(1, len(scores)):
            if scores[i].nats > scores[best].nats:
                best = i
        hits += best == item.correct_index
    return hits / len(dataset.items)


def evaluate_dataset(
    model: ScoringModel,
    dataset: McpDataset,
    shots: int = DEFAULT_SHOTS,
    seed: int = 0,
    score_target: str = "label",
) -> McpResult:
    """accuracy + both answer perplexities in a single pass over the items."""
    hits = 0
    bits_correct = 0.0
    bits_incorrect = 0.0
    for item, scores in _item_scores(model, dataset, shots, seed, score_target):
        best = 0
        for i in range(1, len(scores)):
            if scores[i].nats > scores[best].nats:
                best = i
        hits += best == item.correct_index
        bits_correct += scores[item.correct_index].bits
        wrong = [s for i, s in enumerate(scores) if i != item.correct_index]
        bits_incorrect += sum(s.bits for s in wrong) / len(wrong)
    n = len(dataset.items)
    return McpResult(
        accuracy=hits / n,
        ppl_correct=float(2.0 ** (-bits_correct / n)),
        ppl_incorrect=float(2.0 ** (-bits_incorrect / n)),
        n_items=n,
        shots=shots,
        score_target=score_target,
        seed=seed,
    )


# ---------------------------------------------------------------------------
# Validation perplexity
# ---------------------------------------------------------------------------

def validation_perplexity(
    model: ScoringModel,
    token_stream: Sequence[int],
    stride: Optional[int] = None,
) -> float:
    """exp(mean next-token NLL in nats) over non-overlapping ctx_len windows.

    ``stride`` defaults to ctx_len (no overlap); the first token of each
    window is never a prediction target. A final window shorter than two
    tokens contributes nothing.
    """
    tokens = np.asarray(token_stream, dtype=np.int64)
    if tokens.ndim != 1 or tokens.size == 0:
        raise ValueError("token stream must be a non-empty 1-D sequence")
    ctx = model.ctx_len
    stride = ctx if stride is None else stride
    if not 1 <= stride <= ctx:
        raise ValueError(f"stride must lie in [1, ctx_len={ctx}]")

    windows = []
    for start in range(0, len(tokens), stride):
        win = tokens[start : start + ctx]
        if win.size >= 2:
            windows.append(win)
        if start + ctx >= len(tokens):
            break

    total_nll = 0.0
    total_count = 0
    batch_fn = getattr(model, "next_token_logprobs_batch", None)
    if windows and batch_fn is not None:
        for lp in batch_fn(windows):
            total_nll -= float(np.sum(lp))
            total_count += lp.size
    else:
        for win in windows:
            rows = model.logprob_rows(win)
            lp = rows[np.arange(win.size - 1), win[1:]]
            total_nll -= float(np.sum(lp))
            total_count += win.size - 1
    if total_count == 0:
        raise ValueError("token stream too short to predict any position")
    return float(math.exp(total_nll / total_count))


# ---------------------------------------------------------------------------
# Dataset serialization (JSON lines)
# ---------------------------------------------------------------------------

def _item_to_dict(item: McpItem, include_demos: bool = True) -> dict:
    d = {
        "question": item.question,
        "choices": [{"label": l, "text": t} for l, t in item.choices],
        "answer_label": item.correct_label,
    }
    if include_demos and item.demos:
        d["demos"] = [_item_to_dict(dm, include_demos=False) for dm in item.demos]
    return d


def _item_from_dict(d: dict) -> McpItem:
    choices = tuple((c["label"], c["text"]) for c in d["choices"])
    labels = [l for l, _ in choices]
    if d["answer_label"] not in labels:
        raise ValidationError(f"answer_label {d['answer_label']!r} not among {labels}")
    demos = tuple(_item_from_dict(dm) for dm in d.get("demos", []))
    return McpItem(
        question=d["question"],
        choices=choices,
        correct_index=labels.index(d["answer_label"]),
        demos=demos,
    )


def save_dataset(dataset: McpDataset, path) -> None:
    lines = [
        json.dumps(
            {
                "kind": "mcp_dataset",
                "name": dataset.name,
                "format_version": dataset.format_version,
                "template_version": TEMPLATE_VERSION,
            },
            sort_keys=True,
        )
    ]
    lines += [json.dumps(_item_to_dict(it), sort_keys=True) for it in dataset.items]
    try:
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    except OSError as e:
        raise PersistenceError(f"cannot write dataset {path!r}: {e}") from e


def load_dataset(path) -> McpDataset:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise PersistenceError(f"cannot read dataset {path!r}: {e}") from e
    lines = [line for line in text.split("\n") if line]
    if not lines:
        raise ValidationError(f"{path!r}: empty dataset file")
    first = json.loads(lines[0])
    name, version, start = "unnamed", 1, 0
    if first.get("kind") == "mcp_dataset":
        name = first.get("name", "unnamed")
        version = first.get("format_version", 1)
        start = 1
    items = tuple(_item_from_dict(json.loads(line)) for line in lines[start:])
    return McpDataset(items, name=name, format_version=version)
