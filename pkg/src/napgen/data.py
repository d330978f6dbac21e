"""Seeded synthetic dataset of table-text questions with gold programs or spans.

Contexts are pseudo-table rows rendered as terse sentences ("equity was
3566.0 ."). Within one example every row carries a distinct metric phrase, so
questions can reference rows by metric alone; gold programs compute over the
referenced values, with the remaining rows acting as distractors. Every answer
string comes from the executor, so the dataset can never disagree with its own
programs.

Row phrasing is deliberately minimal. The encoder trains from scratch, and the
operand-matching circuit it needs (mark the numbers whose metric the question
names) only emerges within a small epoch budget when the metric word sits
directly beside the value token.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .dsl import (
    Constant,
    NumberLiteral,
    Program,
    ProgramExecutionError,
    ProgramStep,
    StepRef,
    execute_program,
    parse_program,
    render_answer,
    serialize_program,
)


class GenSpecError(ValueError):
    """Bad generation spec (unknown keys, invalid distributions, bad ranges)."""


class DatasetError(ValueError):
    """Unreadable or inconsistent dataset file."""


@dataclass
class Example:
    id: str
    question_tokens: list[str]
    sentence_tokens: list[str]
    numbers: dict[int, float]            # local position -> value
    answer: str
    step_count: int                      # 0 for span-gold examples
    gold_program: Program | None = None
    gold_span: tuple[int, ...] | None = None  # local positions, contiguous

    def to_dict(self) -> dict:
        if self.gold_program is not None:
            gold = {"kind": "program", "program": serialize_program(self.gold_program),
                    "answer": self.answer}
        else:
            gold = {"kind": "span", "positions": list(self.gold_span or ()),
                    "answer": self.answer}
        return {
            "id": self.id,
            "question_tokens": self.question_tokens,
            "sentence_tokens": self.sentence_tokens,
            "numbers": {str(pos): value for pos, value in self.numbers.items()},
            "gold": gold,
            "step_count": self.step_count,
        }

    @staticmethod
    def from_dict(doc: dict) -> "Example":
        gold = doc["gold"]
        program = None
        span = None
        if gold["kind"] == "program":
            program = parse_program(gold["program"])
        elif gold["kind"] == "span":
            span = tuple(int(p) for p in gold["positions"])
        else:
            raise DatasetError(f"unknown gold kind {gold['kind']!r}")
        return Example(
            id=doc["id"],
            question_tokens=list(doc["question_tokens"]),
            sentence_tokens=list(doc["sentence_tokens"]),
            numbers={int(pos): float(value) for pos, value in doc["numbers"].items()},
            answer=gold["answer"],
            step_count=int(doc["step_count"]),
            gold_program=program,
            gold_span=span,
        )


def save_jsonl(path, examples: list[Example]) -> None:
    with open(path, "w") as fh:
        for ex in examples:
            json.dump(ex.to_dict(), fh)
            fh.write("\n")


def load_jsonl(path) -> list[Example]:
    examples = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                examples.append(Example.from_dict(json.loads(line)))
            except (KeyError, ValueError) as err:
                raise DatasetError(f"{path}:{lineno}: {err}") from None
    return examples


@dataclass
class GenSpec:
    n_examples: int = 1000
    step_dist: dict[int, float] = field(default_factory=lambda: {1: 0.5, 2: 0.3, 3: 0.2})
    span_fraction: float = 0.0
    numbers_range: tuple[int, int] = (4, 8)
    value_range: tuple[float, float] = (1.0, 9999.0)
    seed: int = 0
    splits: tuple[float, float, float] = (0.8, 0.1, 0.1)

    def __post_init__(self):
        if self.n_examples <= 0:
            raise GenSpecError("n_examples must be positive")
        if not self.step_dist:
            raise GenSpecError("step_dist must not be empty")
        for k, p in self.step_dist.items():
            if not 1 <= int(k) <= 10:
                raise GenSpecError(f"step count {k} outside 1..10")
            if p < 0:
                raise GenSpecError("step_dist probabilities must be nonnegative")
        if abs(sum(self.step_dist.values()) - 1.0) > 1e-9:
            raise GenSpecError("step_dist must sum to 1")
        if not 0.0 <= self.span_fraction <= 1.0:
            raise GenSpecError("span_fraction must be in [0, 1]")
        lo, hi = self.numbers_range
        if lo < 2 or hi < lo:
            raise GenSpecError("numbers_range must satisfy 2 <= lo <= hi")
        if hi > len(_METRICS):
            raise GenSpecError(
                f"numbers_range upper bound {hi} exceeds the "
                f"{len(_METRICS)} distinct metric phrases available")
        vlo, vhi = self.value_range
        if vlo <= 0 or vhi <= vlo:
            raise GenSpecError("value_range must satisfy 0 < lo < hi")
        if abs(sum(self.splits) - 1.0) > 1e-9:
            raise GenSpecError("splits must sum to 1")

    def to_dict(self) -> dict:
        return {
            "n_examples": self.n_examples,
            "step_dist": {str(k): v for k, v in self.step_dist.items()},
            "span_fraction": self.span_fraction,
            "numbers_range": list(self.numbers_range),
            "value_range": list(self.value_range),
            "seed": self.seed,
            "splits": list(self.splits),
        }

    @staticmethod
    def from_dict(doc: dict) -> "GenSpec":
        known = {"n_examples", "step_dist", "span_fraction", "numbers_range",
                 "value_range", "seed", "splits"}
        unknown = set(doc) - known
        if unknown:
            raise GenSpecError(f"unknown spec keys: {sorted(unknown)}")
        kwargs: dict = {}
        if "n_examples" in doc:
            kwargs["n_examples"] = int(doc["n_examples"])
        if "step_dist" in doc:
            kwargs["step_dist"] = {int(k): float(v) for k, v in doc["step_dist"].items()}
        if "span_fraction" in doc:
            kwargs["span_fraction"] = float(doc["span_fraction"])
        if "numbers_range" in doc:
            kwargs["numbers_range"] = tuple(int(v) for v in doc["numbers_range"])
        if "value_range" in doc:
            kwargs["value_range"] = tuple(float(v) for v in doc["value_range"])
        if "seed" in doc:
            kwargs["seed"] = int(doc["seed"])
        if "splits" in doc:
            kwargs["splits"] = tuple(float(v) for v in doc["splits"])
        return GenSpec(**kwargs)


# each example draws its row metrics without replacement, so a metric phrase
# appears in at most one row and the question can name rows unambiguously
_METRICS: tuple[tuple[str, ...], ...] = (
    ("revenue",), ("income",), ("cost",), ("margin",), ("assets",),
    ("liabilities",), ("sales",), ("inventory",), ("equity",), ("dividends",),
    ("payroll",), ("depreciation",), ("receivables",), ("debt",), ("backlog",),
    ("cash", "flow"), ("interest", "expense"), ("capital", "expenditure"),
)
# one of these marks the row a span question asks about
_QUALIFIERS = ("restated", "audited", "estimated", "projected", "adjusted")


@dataclass
class _Row:
    metric: tuple[str, ...]
    value: float

    def phrase(self) -> list[str]:
        return list(self.metric)


def _sample_value(rng: np.random.Generator, spec: GenSpec, used: set[float]) -> float:
    lo, hi = spec.value_range
    for _ in range(1000):
        value = round(float(rng.uniform(lo, hi)), 1)
        if value not in used and value != 0.0:
            used.add(value)
            return value
    raise RuntimeError("could not sample a fresh value; value_range too narrow")


def _sample_rows(rng: np.random.Generator, spec: GenSpec, count: int,
                 taken: set | None = None, used_values: set | None = None) -> list[_Row]:
    """Rows with distinct metrics, so each is referable by its metric phrase alone."""
    taken = taken if taken is not None else set()
    used_values = used_values if used_values is not None else set()
    free = [m for m in _METRICS if m not in taken]
    if count > len(free):
        raise RuntimeError(f"need {count} distinct metrics, only {len(free)} left")
    picks = rng.permutation(len(free))[:count]
    rows = []
    for pick in picks:
        metric = free[int(pick)]
        taken.add(metric)
        rows.append(_Row(metric=metric, value=_sample_value(rng, spec, used_values)))
    return rows


def _mentions(rng: np.random.Generator, rows: list[_Row]) -> list[_Row]:
    order = list(rows)
    rng.shuffle(order)
    return order


def _join_refs(rows: list[_Row]) -> list[str]:
    tokens: list[str] = []
    for i, row in enumerate(rows):
        if i > 0:
            tokens.extend([","] if i < len(rows) - 1 else ["and"])
        tokens.extend(row.phrase())
    return tokens


def _lit(row: _Row) -> NumberLiteral:
    return NumberLiteral(row.value)


def _chain(operator: str, rows: list[_Row]) -> list[ProgramStep]:
    steps = [ProgramStep(operator, _lit(rows[0]), _lit(rows[1]))]
    for i, row in enumerate(rows[2:]):
        steps.append(ProgramStep(operator, StepRef(i), _lit(row)))
    return steps


def _t_sum2(rng, rows):
    m = _mentions(rng, rows)
    q = ["what", "is", "the", "sum", "of", *m[0].phrase(), "and", *m[1].phrase(), "?"]
    return q, Program(tuple(_chain("add", rows)))


def _t_product(rng, rows):
    m = _mentions(rng, rows)
    q = ["what", "is", "the", "product", "of", *m[0].phrase(), "and", *m[1].phrase(), "?"]
    return q, Program((ProgramStep("multiply", _lit(rows[0]), _lit(rows[1])),))


def _t_diff(rng, rows):
    m = _mentions(rng, rows)
    q = ["what", "is", "the", "difference", "between", *m[0].phrase(), "and",
         *m[1].phrase(), "?"]
    return q, Program((ProgramStep("subtract", _lit(m[0]), _lit(m[1])),))


def _t_more(rng, rows):
    m = _mentions(rng, rows)
    q = ["how", "much", "more", "was", *m[0].phrase(), "than", *m[1].phrase(), "?"]
    return q, Program((ProgramStep("subtract", _lit(m[0]), _lit(m[1])),))


def _t_ratio(rng, rows):
    m = _mentions(rng, rows)
    q = ["what", "is", "the", "ratio", "of", *m[0].phrase(), "to", *m[1].phrase(), "?"]
    return q, Program((ProgramStep("divide", _lit(m[0]), _lit(m[1])),))


def _t_greater(rng, rows):
    m = _mentions(rng, rows)
    q = ["was", *m[0].phrase(), "greater", "than", *m[1].phrase(), "?"]
    return q, Program((ProgramStep("greater", _lit(m[0]), _lit(m[1])),))


def _t_square(rng, rows):
    q = ["what", "is", "the", "square", "of", *rows[0].phrase(), "?"]
    return q, Program((ProgramStep("exp", _lit(rows[0]), Constant("const_2")),))


def _total_template(n_rows: int):
    def template(rng, rows):
        m = _mentions(rng, rows)
        q = ["what", "is", "the", "total", "of", *_join_refs(m), "?"]
        return q, Program(tuple(_chain("add", rows)))

    template.rows = n_rows
    return template


def _average_template(n_rows: int):
    def template(rng, rows):
        m = _mentions(rng, rows)
        q = ["what", "is", "the", "average", "of", *_join_refs(m), "?"]
        steps = _chain("add", rows)
        steps.append(ProgramStep("divide", StepRef(len(steps) - 1),
                                 Constant(f"const_{n_rows}")))
        return q, Program(tuple(steps))

    template.rows = n_rows
    return template


def _t_rel_change(rng, rows):
    m = _mentions(rng, rows)
    q = ["what", "is", "the", "relative", "increase", "of", *m[0].phrase(),
         "over", *m[1].phrase(), "?"]
    program = Program((
        ProgramStep("subtract", _lit(m[0]), _lit(m[1])),
        ProgramStep("divide", StepRef(0), _lit(m[1])),
    ))
    return q, program


def _t_pct_of_total(rng, rows):
    m = _mentions(rng, rows)
    part = rows[int(rng.integers(len(rows)))]
    q = ["what", "percentage", "of", "the", "total", "of", *m[0].phrase(), "and",
         *m[1].phrase(), "came", "from", *part.phrase(), "?"]
    steps = (
        ProgramStep("add", _lit(rows[0]), _lit(rows[1])),
        ProgramStep("divide", _lit(part), StepRef(0)),
        ProgramStep("multiply", StepRef(1), Constant("const_100")),
    )
    return q, Program(steps)


for _t in (_t_sum2, _t_product, _t_diff, _t_more, _t_ratio, _t_greater):
    _t.rows = 2
_t_square.rows = 1
_t_rel_change.rows = 2
_t_pct_of_total.rows = 2


def _templates_for(step_count: int) -> list:
    if step_count == 1:
        return [_t_sum2, _t_product, _t_diff, _t_more, _t_ratio, _t_greater, _t_square]
    if step_count == 2:
        return [_total_template(3), _average_template(2), _t_rel_change]
    if step_count == 3:
        return [_total_template(4), _average_template(3), _t_pct_of_total]
    return [_total_template(step_count + 1), _average_template(step_count)]


class _Retry(Exception):
    pass


def _row_sentence(row: _Row, base: int, numbers: dict[int, float],
                  qualifier: str | None = None) -> list[str]:
    tokens = [qualifier] if qualifier is not None else []
    tokens.extend([*row.phrase(), "was"])
    numbers[base + len(tokens)] = row.value
    tokens.append(repr(row.value))
    tokens.append(".")
    return tokens


def _context_sorted(rows: list[_Row], placed: list[_Row]) -> list[_Row]:
    order = {id(row): i for i, row in enumerate(placed)}
    return sorted(rows, key=lambda row: order[id(row)])


def generate_example(rng: np.random.Generator, spec: GenSpec, index: int) -> Example:
    """One example from its own rng stream; resamples degenerate draws."""
    ex_id = f"ex-{index:06d}"
    for _ in range(100):
        try:
            return _generate_once(rng, spec, ex_id)
        except (_Retry, ProgramExecutionError):
            continue
    raise RuntimeError(f"could not generate a valid example for {ex_id}")


def _generate_once(rng: np.random.Generator, spec: GenSpec, ex_id: str) -> Example:
    taken: set = set()
    used_values: set[float] = set()
    lo, hi = spec.numbers_range

    if rng.random() < spec.span_fraction:
        n_rows = int(rng.integers(lo, hi + 1))
        rows = _sample_rows(rng, spec, n_rows, taken, used_values)
        marked = rows[int(rng.integers(len(rows)))]
        qualifier = _QUALIFIERS[int(rng.integers(len(_QUALIFIERS)))]
        question = ["which", "item", "was", qualifier, "?"]
        rng.shuffle(rows)
        numbers: dict[int, float] = {}
        sentences: list[str] = []
        span = None
        for row in rows:
            base = len(question) + len(sentences)
            if row is marked:
                # the metric tokens right after the qualifier word
                span = tuple(base + 1 + j for j in range(len(row.metric)))
                sentences.extend(_row_sentence(row, base, numbers, qualifier))
            else:
                sentences.extend(_row_sentence(row, base, numbers))
        return Example(
            id=ex_id,
            question_tokens=question,
            sentence_tokens=sentences,
            numbers=numbers,
            answer=" ".join(marked.metric),
            step_count=0,
            gold_span=span,
        )

    steps = sorted(spec.step_dist)
    probs = np.array([spec.step_dist[k] for k in steps])
    step_count = int(steps[rng.choice(len(steps), p=probs / probs.sum())])
    templates = _templates_for(step_count)
    template = templates[int(rng.integers(len(templates)))]

    targets = _sample_rows(rng, spec, template.rows, taken, used_values)

    n_rows = int(rng.integers(lo, hi + 1))
    n_rows = max(n_rows, len(targets) + 1)
    distractors = _sample_rows(rng, spec, n_rows - len(targets), taken, used_values)

    placed = list(targets) + list(distractors)
    rng.shuffle(placed)
    ordered_targets = _context_sorted(targets, placed)
    # question built after placement so commutative golds follow context order
    question, program = template(rng, ordered_targets)
    execute_program(program)  # degenerate draws raise and trigger a resample
    example = Example(
        id=ex_id,
        question_tokens=question,
        sentence_tokens=[],
        numbers={},
        answer="",
        step_count=step_count,
        gold_program=program,
    )
    numbers: dict[int, float] = {}
    sentences: list[str] = []
    for row in placed:
        base = len(question) + len(sentences)
        sentences.extend(_row_sentence(row, base, numbers))
    example.sentence_tokens = sentences
    example.numbers = numbers
    example.answer = render_answer(execute_program(program))
    return example


def generate_dataset(spec: GenSpec) -> dict[str, list[Example]]:
    """Deterministic splits from per-example rng streams spawned off the seed."""
    streams = np.random.SeedSequence(spec.seed).spawn(spec.n_examples)
    examples = [
        generate_example(np.random.Generator(np.random.PCG64(stream)), spec, i)
        for i, stream in enumerate(streams)
    ]
    n_train = int(round(spec.n_examples * spec.splits[0]))
    n_dev = int(round(spec.n_examples * spec.splits[1]))
    return {
        "train": examples[:n_train],
        "dev": examples[n_train:n_train + n_dev],
        "test": examples[n_train + n_dev:],
    }
