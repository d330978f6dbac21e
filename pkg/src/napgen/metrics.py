"""Execution accuracy, program accuracy, exact match, and numeracy-focused F1."""

from __future__ import annotations

import string
from dataclasses import dataclass, field

from .dsl import (
    COMMUTATIVE_OPERATORS,
    AnswerValue,
    Boolean,
    Numeric,
    Program,
    ProgramStep,
    round5,
    serialize_operand,
    serialize_program,
)

_ARTICLES = {"a", "an", "the"}
_PUNCT_TABLE = str.maketrans("", "", string.punctuation)


def _as_number(token: str) -> float | None:
    stripped = token.replace(",", "")
    if stripped in ("", ".", "-", "+"):
        return None
    try:
        value = float(stripped)
    except ValueError:
        return None
    return 0.0 if value == 0.0 else value


def normalize_answer(text: str) -> list[str]:
    """Lowercase, drop articles and punctuation, canonicalize number tokens."""
    tokens = []
    for raw in text.lower().split():
        number = _as_number(raw)
        if number is not None:
            tokens.append(str(number))
            continue
        word = raw.translate(_PUNCT_TABLE)
        if not word or word in _ARTICLES:
            continue
        tokens.append(word)
    return tokens


def exact_match(prediction: str, gold: str) -> bool:
    return normalize_answer(prediction) == normalize_answer(gold)


def numeracy_f1(prediction: str, gold: str) -> float:
    """Token-bag F1 where any number disagreement zeroes the score."""
    pred_bag = set(normalize_answer(prediction))
    gold_bag = set(normalize_answer(gold))
    pred_numbers = {t for t in pred_bag if _as_number(t) is not None}
    gold_numbers = {t for t in gold_bag if _as_number(t) is not None}
    if (pred_numbers or gold_numbers) and pred_numbers != gold_numbers:
        return 0.0
    overlap = len(pred_bag & gold_bag)
    precision = overlap / len(pred_bag) if pred_bag else 1.0
    recall = overlap / len(gold_bag) if gold_bag else 1.0
    if precision == 0.0 and recall == 0.0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def exe_acc(prediction: AnswerValue, gold: AnswerValue) -> bool:
    """Answer equality at 5 decimals; booleans compare exactly; kinds never cross."""
    if isinstance(prediction, Boolean) and isinstance(gold, Boolean):
        return prediction.value == gold.value
    if isinstance(prediction, Numeric) and isinstance(gold, Numeric):
        return round5(prediction.value) == round5(gold.value)
    return False


def _commutative_canonical(program: Program) -> Program:
    steps = []
    for step in program.steps:
        if step.operator in COMMUTATIVE_OPERATORS:
            a, b = sorted((step.first, step.second), key=serialize_operand)
            steps.append(ProgramStep(step.operator, a, b))
        else:
            steps.append(step)
    return Program(tuple(steps))


def prog_acc(prediction: Program, gold: Program, allow_commutative: bool = False) -> bool:
    """Canonical serialization equality. No credit for reordered operands unless asked."""
    if allow_commutative:
        prediction = _commutative_canonical(prediction)
        gold = _commutative_canonical(gold)
    return serialize_program(prediction) == serialize_program(gold)


@dataclass
class ExampleResult:
    """Per-example scoring record fed to aggregate().

    step_count is the gold program length, 0 for span-gold examples.
    exe_ok and prog_ok are None exactly when the example has no gold program.
    """

    step_count: int
    em: bool
    f1: float
    exe_ok: bool | None = None
    prog_ok: bool | None = None


@dataclass
class BucketMetrics:
    count: int
    em: float
    f1: float


@dataclass
class MetricsReport:
    n_examples: int
    n_program: int
    n_span: int
    exe_acc: float
    prog_acc: float
    em: float
    f1: float
    per_step_buckets: dict[str, BucketMetrics] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "n_examples": self.n_examples,
            "n_program": self.n_program,
            "n_span": self.n_span,
            "exe_acc": self.exe_acc,
            "prog_acc": self.prog_acc,
            "em": self.em,
            "f1": self.f1,
            "per_step_buckets": {
                name: {"count": b.count, "em": b.em, "f1": b.f1}
                for name, b in self.per_step_buckets.items()
            },
        }


def step_bucket(step_count: int) -> str:
    if step_count <= 0:
        return "0"
    if step_count <= 3:
        return str(step_count)
    return ">3"


_NUMERIC_BUCKETS = ("1", "2", "3", ">3")


def aggregate(results: list[ExampleResult]) -> MetricsReport:
    """Overall and per-step-bucket metrics.

    exe_acc and prog_acc average over program-gold examples only; EM and F1
    cover everything. Bucket counts always sum to n_examples; the four numeric
    buckets are always present, a "0" bucket appears only when spans do.
    """
    if not results:
        raise ValueError("cannot aggregate an empty result list")
    program_results = [r for r in results if r.exe_ok is not None]
    n_program = len(program_results)
    buckets: dict[str, list[ExampleResult]] = {name: [] for name in _NUMERIC_BUCKETS}
    for r in results:
        buckets.setdefault(step_bucket(r.step_count), []).append(r)
    per_bucket = {}
    order = (["0"] if "0" in buckets else []) + list(_NUMERIC_BUCKETS)
    for name in order:
        rows = buckets[name]
        per_bucket[name] = BucketMetrics(
            count=len(rows),
            em=sum(r.em for r in rows) / len(rows) if rows else 0.0,
            f1=sum(r.f1 for r in rows) / len(rows) if rows else 0.0,
        )
    return MetricsReport(
        n_examples=len(results),
        n_program=n_program,
        n_span=len(results) - n_program,
        exe_acc=sum(r.exe_ok for r in program_results) / n_program if n_program else 0.0,
        prog_acc=sum(r.prog_ok for r in program_results) / n_program if n_program else 0.0,
        em=sum(r.em for r in results) / len(results),
        f1=sum(r.f1 for r in results) / len(results),
        per_step_buckets=per_bucket,
    )
