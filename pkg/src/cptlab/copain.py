"""Language-agnostic in-context pattern-inference benchmark.

Seven list-manipulation tasks over small integers or lowercase characters,
rendered as bare few-shot prompts with no natural-language instruction and
scored by exact match on the completion. Generation, demo selection, and
evaluation are all seeded and reproducible.

Prompt format (style "plain"):

    85, 24, 63: 85
    29, 47, 79: 79
    59, 77, 41: 77
    19, 81, 88: <- completion starts here, after "colon space"
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import MalformedExampleError, PersistenceError, ValidationError

FORMAT_VERSION = 1
PROMPT_STYLE = "plain"

TASK_MAX3 = "max3"
TASK_MIN3 = "min3"
TASK_MEDIAN3 = "median3"
TASK_EVEN_AMONG_ODD4 = "even_among_odd4"
TASK_ODD_AMONG_EVEN4 = "odd_among_even4"
TASK_ALPHA_FIRST3 = "alpha_first3"
TASK_ALPHA_LAST3 = "alpha_last3"

ALL_TASKS = (
    TASK_MAX3,
    TASK_MIN3,
    TASK_MEDIAN3,
    TASK_EVEN_AMONG_ODD4,
    TASK_ODD_AMONG_EVEN4,
    TASK_ALPHA_FIRST3,
    TASK_ALPHA_LAST3,
)

INT_TASKS_3 = (TASK_MAX3, TASK_MIN3, TASK_MEDIAN3)
PARITY_TASKS = (TASK_EVEN_AMONG_ODD4, TASK_ODD_AMONG_EVEN4)
CHAR_TASKS = (TASK_ALPHA_FIRST3, TASK_ALPHA_LAST3)

EXAMPLES_PER_TASK = 150
DEMO_POOL_PER_TASK = 32
DEFAULT_SHOTS = 3

INT_LO, INT_HI = 0, 99  # inclusive


def _validate_items(task: str, items: tuple) -> None:
    if task in INT_TASKS_3:
        if len(items) != 3 or len(set(items)) != 3:
            raise MalformedExampleError(f"{task}: need 3 pairwise-distinct integers")
        if not all(isinstance(x, int) and INT_LO <= x <= INT_HI for x in items):
            raise MalformedExampleError(f"{task}: integers must lie in [0, 99]")
    elif task in PARITY_TASKS:
        if len(items) != 4 or not all(
            isinstance(x, int) and INT_LO <= x <= INT_HI for x in items
        ):
            raise MalformedExampleError(f"{task}: need 4 integers in [0, 99]")
        n_even = sum(1 for x in items if x % 2 == 0)
        want_even = 1 if task == TASK_EVEN_AMONG_ODD4 else 3
        if n_even != want_even:
            raise MalformedExampleError(
                f"{task}: expected exactly {want_even} even element(s), got {n_even}"
            )
    elif task in CHAR_TASKS:
        if len(items) != 3 or len(set(items)) != 3:
            raise MalformedExampleError(f"{task}: need 3 pairwise-distinct characters")
        if not all(isinstance(x, str) and len(x) == 1 and "a" <= x <= "z" for x in items):
            raise MalformedExampleError(f"{task}: items must be lowercase a-z")
    else:
        raise MalformedExampleError(f"unknown task {task!r}")


def solve(task: str, items: Sequence) -> int | str:
    """The oracle answer for a structurally valid example."""
    items = tuple(items)
    _validate_items(task, items)
    if task == TASK_MAX3:
        return max(items)
    if task == TASK_MIN3:
        return min(items)
    if task == TASK_MEDIAN3:
        return sorted(items)[1]
    if task == TASK_EVEN_AMONG_ODD4:
        return next(x for x in items if x % 2 == 0)
    if task == TASK_ODD_AMONG_EVEN4:
        return next(x for x in items if x % 2 == 1)
    if task == TASK_ALPHA_FIRST3:
        return min(items)
    return max(items)  # alpha_last3


@dataclass(frozen=True)
class CopainExample:
    task: str
    items: tuple
    answer: int | str

    def __post_init__(self):
        object.__setattr__(self, "items", tuple(self.items))
        expected = solve(self.task, self.items)
        if self.answer != expected:
            raise MalformedExampleError(
                f"{self.task}{self.items}: answer {self.answer!r} != oracle {expected!r}"
            )

    @classmethod
    def make(cls, task: str, items: Sequence) -> "CopainExample":
        items = tuple(items)
        return cls(task, items, solve(task, items))


@dataclass(frozen=True)
class CopainSuite:
    """150 query examples per task plus a disjoint per-task demo pool."""

    queries: dict[str, tuple[CopainExample, ...]]
    demo_pools: dict[str, tuple[CopainExample, ...]]
    seed: int
    format_version: int = FORMAT_VERSION

    def __post_init__(self):
        if set(self.queries) != set(ALL_TASKS) or set(self.demo_pools) != set(ALL_TASKS):
            raise ValidationError("suite must cover exactly the 7 tasks")
        for task in ALL_TASKS:
            q, p = self.queries[task], self.demo_pools[task]
            if len(q) != EXAMPLES_PER_TASK:
                raise ValidationError(
                    f"{task}: {len(q)} queries, expected {EXAMPLES_PER_TASK}"
                )
            if not p:
                raise ValidationError(f"{task}: empty demo pool")
            items_seen = [e.items for e in q] + [e.items for e in p]
            if len(set(items_seen)) != len(items_seen):
                raise ValidationError(f"{task}: duplicate (task, items) pair")

    def total_queries(self) -> int:
        return sum(len(q) for q in self.queries.values())


def _sample_example(task: str, rng: np.random.Generator) -> tuple:
    if task in INT_TASKS_3:
        while True:
            items = tuple(int(x) for x in rng.integers(INT_LO, INT_HI + 1, size=3))
            if len(set(items)) == 3:
                return items
    if task in PARITY_TASKS:
        minority_even = task == TASK_EVEN_AMONG_ODD4
        minority = 2 * int(rng.integers(0, 50)) + (0 if minority_even else 1)
        majority = [
            2 * int(x) + (1 if minority_even else 0) for x in rng.integers(0, 50, size=3)
        ]
        items = majority + [minority]
        order = rng.permutation(4)
        return tuple(items[i] for i in order)
    letters = rng.choice(26, size=3, replace=False)
    return tuple(chr(ord("a") + int(i)) for i in letters)


def generate_suite(seed: int) -> CopainSuite:
    """Deterministic suite: queries first, then the disjoint demo pool."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    queries, pools = {}, {}
    for task in ALL_TASKS:
        seen: set[tuple] = set()
        examples: list[CopainExample] = []
        while len(examples) < EXAMPLES_PER_TASK + DEMO_POOL_PER_TASK:
            items = _sample_example(task, rng)
            if items in seen:
                continue
            seen.add(items)
            examples.append(CopainExample.make(task, items))
        queries[task] = tuple(examples[:EXAMPLES_PER_TASK])
        pools[task] = tuple(examples[EXAMPLES_PER_TASK:])
    return CopainSuite(queries, pools, seed)


# ---------------------------------------------------------------------------
# Prompt rendering and parsing
# ---------------------------------------------------------------------------

def render_answer(answer) -> str:
    return str(answer)


def _render_line(example: CopainExample, with_answer: bool) -> str:
    items = ", ".join(str(x) for x in example.items)
    return f"{items}: {render_answer(example.answer)}" if with_answer else f"{items}: "


def render_prompt(
    query: CopainExample,
    demos: Sequence[CopainExample],
    style: str = PROMPT_STYLE,
) -> str:
    """Demo lines with answers, then the query line ending after "colon space"."""
    if style != PROMPT_STYLE:
        raise ValueError(f"unknown prompt style {style!r}")
    if len(demos) < 1:
        raise ValueError("need at least one demonstration")
    if any(d.task != query.task for d in demos):
        raise ValueError("demos must all share the query's task")
    if any(d.items == query.items for d in demos):
        raise ValueError("query must not appear among its demos")
    lines = [_render_line(d, with_answer=True) for d in demos]
    lines.append(_render_line(query, with_answer=False))
    return "\n".join(lines)


def infer_task(items: tuple, answer) -> str:
    """The unique task consistent with one solved demonstration."""
    for task in ALL_TASKS:
        try:
            if solve(task, items) == answer:
                return task
        except MalformedExampleError:
            continue
    raise MalformedExampleError(f"no task consistent with {items} -> {answer!r}")


def parse_prompt(text: str) -> tuple[list[CopainExample], tuple]:
    """Companion parser: (demo examples, query items). Inverse of render_prompt."""
    lines = text.split("\n")
    if len(lines) < 2:
        raise ValidationError("prompt must contain at least one demo and a query")
    demos_raw = []
    for line in lines[:-1]:
        head, sep, tail = line.partition(": ")
        if not sep or not tail:
            raise ValidationError(f"demo line {line!r} has no answer")
        demos_raw.append((_parse_items(head), _parse_value(tail)))
    qhead, sep, qtail = lines[-1].partition(": ")
    if not sep or qtail:
        raise ValidationError(f"query line {lines[-1]!r} must end after 'colon space'")
    query_items = _parse_items(qhead)
    task = infer_task(*demos_raw[0])
    demos = [CopainExample(task, items, answer) for items, answer in demos_raw]
    return demos, query_items


def _parse_items(text: str) -> tuple:
    return tuple(_parse_value(part) for part in text.split(", "))


def _parse_value(text: str):
    return int(text) if text.strip("-").isdigit() else text


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CopainResult:
    per_task: dict[str, float]
    overall: float
    suite_seed: int
    eval_seed: int
    shots: int

    def to_dict(self) -> dict:
        return {
            "per_task": dict(self.per_task),
            "overall": self.overall,
            "suite_seed": self.suite_seed,
            "eval_seed": self.eval_seed,
            "shots": self.shots,
        }


def _demo_indices(pool_size: int, shots: int, eval_seed: int, task_idx: int, query_idx: int):
    rng = np.random.Generator(
        np.random.PCG64(np.random.SeedSequence(eval_seed, spawn_key=(task_idx, query_idx)))
    )
    return rng.choice(pool_size, size=shots, replace=False)


def iter_prompts(suite: CopainSuite, shots: int, eval_seed: int):
    """Yield (task, query, prompt) with per-query seeded demo selection."""
    if shots < 1:
        raise ValueError("shots must be at least 1")
    for task_idx, task in enumerate(ALL_TASKS):
        pool = suite.demo_pools[task]
        if shots > len(pool):
            raise ValueError(f"{task}: {shots} shots exceeds pool of {len(pool)}")
        for query_idx, query in enumerate(suite.queries[task]):
            idx = _demo_indices(len(pool), shots, eval_seed, task_idx, query_idx)
            demos = [pool[int(i)] for i in idx]
            yield task, query, render_prompt(query, demos)


def normalize_completion(completion: str) -> str:
    """Truncate at the first newline and strip surrounding whitespace."""
    return completion.split("\n", 1)[0].strip()


def evaluate(
    completion_fn: Callable[[str], str],
    suite: CopainSuite,
    shots: int = DEFAULT_SHOTS,
    eval_seed: int = 0,
) -> CopainResult:
    """Exact-match accuracy per task and the unweighted mean over tasks."""
    prompts = [(t, q, p) for t, q, p in iter_prompts(suite, shots, eval_seed)]
    completions = [completion_fn(p) for _, _, p in prompts]
    return _score(prompts, completions, suite.seed, eval_seed, shots)


def evaluate_batched(
    batch_completion_fn: Callable[[list[str]], list[str]],
    suite: CopainSuite,
    shots: int = DEFAULT_SHOTS,
    eval_seed: int = 0,
) -> CopainResult:
    """Same scoring as evaluate(), completing all prompts in one call."""
    prompts = [(t, q, p) for t, q, p in iter_prompts(suite, shots, eval_seed)]
    completions = batch_completion_fn([p for _, _, p in prompts])
    if len(completions) != len(prompts):
        raise ValidationError("batch completion count != prompt count")
    return _score(prompts, completions, suite.seed, eval_seed, shots)


def _score(prompts, completions, suite_seed, eval_seed, shots) -> CopainResult:
    hits = {task: 0 for task in ALL_TASKS}
    counts = {task: 0 for task in ALL_TASKS}
    for (task, query, _), completion in zip(prompts, completions):
        counts[task] += 1
        if normalize_completion(completion) == render_answer(query.answer):
            hits[task] += 1
    per_task = {task: hits[task] / counts[task] for task in ALL_TASKS}
    overall = sum(per_task.values()) / len(ALL_TASKS)
    return CopainResult(per_task, overall, suite_seed, eval_seed, shots)


def oracle_completion_fn(prompt: str) -> str:
    """Parse the prompt, infer the task from a demo, and answer via solve()."""
    demos, query_items = parse_prompt(prompt)
    return render_answer(solve(demos[0].task, query_items))


# ---------------------------------------------------------------------------
# Serialization (JSON lines)
# ---------------------------------------------------------------------------

def save_suite(suite: CopainSuite, path) -> None:
    """Header record, then one example per line {task, items, answer, split}."""
    lines = [
        json.dumps(
            {
                "kind": "copain_suite",
                "format_version": suite.format_version,
                "seed": suite.seed,
                "examples_per_task": EXAMPLES_PER_TASK,
                "demo_pool_per_task": DEMO_POOL_PER_TASK,
            },
            sort_keys=True,
        )
    ]
    for split, groups in (("query", suite.queries), ("demo", suite.demo_pools)):
        for task in ALL_TASKS:
            for ex in groups[task]:
                lines.append(
                    json.dumps(
                        {
                            "task": ex.task,
                            "items": list(ex.items),
                            "answer": ex.answer,
                            "split": split,
                        },
                        sort_keys=True,
                    )
                )
    try:
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    except OSError as e:
        raise PersistenceError(f"cannot write suite {path!r}: {e}") from e


def load_suite(path) -> CopainSuite:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise PersistenceError(f"cannot read suite {path!r}: {e}") from e
    lines = [line for line in text.split("\n") if line]
    if not lines:
        raise ValidationError(f"{path!r}: empty suite file")
    header = json.loads(lines[0])
    if header.get("kind") != "copain_suite":
        raise ValidationError(f"{path!r}: missing copain_suite header record")
    queries = {task: [] for task in ALL_TASKS}
    pools = {task: [] for task in ALL_TASKS}
    for line in lines[1:]:
        rec = json.loads(line)
        items = tuple(rec["items"])
        ex = CopainExample(rec["task"], items, rec["answer"])
        (queries if rec.get("split", "query") == "query" else pools)[ex.task].append(ex)
    return CopainSuite(
        {t: tuple(v) for t, v in queries.items()},
        {t: tuple(v) for t, v in pools.items()},
        seed=header.get("seed", 0),
        format_version=header.get("format_version", FORMAT_VERSION),
    )
