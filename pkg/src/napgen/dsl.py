"""Grammar, validation, serialization, and execution of numerical reasoning programs.

A program is a comma-separated list of binary operation steps, e.g.

    subtract(19520.0,21579.0), divide(#0,21579.0)

Operands are number literals, named constants (const_2, const_100, ...), or
references to earlier step results (#0, #1, ...). Execution runs in double
precision; answers are compared at 5 decimal places with ties rounded away
from zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from decimal import Decimal, ROUND_HALF_UP

OPERATORS = ("add", "subtract", "multiply", "divide", "exp", "greater")

COMMUTATIVE_OPERATORS = frozenset({"add", "multiply"})

# const_0 .. const_10, then the common order-of-magnitude values, then -1.
CONSTANT_NAMES: tuple[str, ...] = tuple(
    [f"const_{i}" for i in range(11)]
    + ["const_100", "const_1000", "const_10000", "const_100000", "const_1000000", "const_m1"]
)

CONSTANT_VALUES: dict[str, float] = {name: float(name[6:]) for name in CONSTANT_NAMES[:-1]}
CONSTANT_VALUES["const_m1"] = -1.0


class ProgramError(Exception):
    """Base class for anything wrong with a program."""


class ProgramParseError(ProgramError):
    def __init__(self, reason: str, position: int):
        super().__init__(f"parse error at position {position}: {reason}")
        self.reason = reason
        self.position = position


class ProgramValidationError(ProgramError):
    pass


class ProgramExecutionError(ProgramError):
    pass


@dataclass(frozen=True)
class NumberLiteral:
    value: float


@dataclass(frozen=True)
class Constant:
    name: str

    @property
    def value(self) -> float:
        return CONSTANT_VALUES[self.name]


@dataclass(frozen=True)
class StepRef:
    index: int


Operand = NumberLiteral | Constant | StepRef


@dataclass(frozen=True)
class ProgramStep:
    operator: str
    first: Operand
    second: Operand


@dataclass(frozen=True)
class Numeric:
    value: float


@dataclass(frozen=True)
class Boolean:
    value: bool


AnswerValue = Numeric | Boolean


@dataclass(frozen=True)
class Program:
    steps: tuple[ProgramStep, ...]

    def __post_init__(self):
        validate_program(self)

    def __len__(self) -> int:
        return len(self.steps)


def validate_program(program: Program) -> None:
    """Reject empty programs, bad operators, bad references, and non-finite literals.

    Boolean results are terminal: a step whose operator is greater may never be
    referenced by a later step.
    """
    if not program.steps:
        raise ProgramValidationError("program has no steps")
    boolean_steps = set()
    for i, step in enumerate(program.steps):
        if step.operator not in OPERATORS:
            raise ProgramValidationError(f"unknown operator {step.operator!r} in step {i}")
        for operand in (step.first, step.second):
            if isinstance(operand, NumberLiteral):
                if not math.isfinite(operand.value):
                    raise ProgramValidationError(f"non-finite literal in step {i}")
            elif isinstance(operand, Constant):
                if operand.name not in CONSTANT_VALUES:
                    raise ProgramValidationError(f"unknown constant {operand.name!r} in step {i}")
            elif isinstance(operand, StepRef):
                if operand.index < 0 or operand.index >= i:
                    raise ProgramValidationError(
                        f"step {i} references #{operand.index}, which is not an earlier step"
                    )
                if operand.index in boolean_steps:
                    raise ProgramValidationError(
                        f"step {i} uses the boolean result of step {operand.index} as a number"
                    )
            else:
                raise ProgramValidationError(f"unknown operand type in step {i}")
        if step.operator == "greater":
            boolean_steps.add(i)


class _Scanner:
    """Hand-rolled scanner so parse errors carry a position and a reason."""

    def __init__(self, text: str):
        self.text = text
        self.pos = 0

    def skip_ws(self) -> None:
        while self.pos < len(self.text) and self.text[self.pos].isspace():
            self.pos += 1

    def peek(self) -> str:
        return self.text[self.pos] if self.pos < len(self.text) else ""

    def expect(self, ch: str) -> None:
        if self.peek() != ch:
            raise ProgramParseError(f"expected {ch!r}", self.pos)
        self.pos += 1

    def take_while(self, pred) -> str:
        start = self.pos
        while self.pos < len(self.text) and pred(self.text[self.pos]):
            self.pos += 1
        return self.text[start:self.pos]


def _parse_operand(sc: _Scanner) -> Operand:
    sc.skip_ws()
    start = sc.pos
    if sc.peek() == "#":
        sc.pos += 1
        digits = sc.take_while(str.isdigit)
        if not digits:
            raise ProgramParseError("expected step index after '#'", sc.pos)
        return StepRef(int(digits))
    word = sc.take_while(lambda c: c.isalnum() or c in "._+-")
    if not word:
        raise ProgramParseError("expected an operand", start)
    if word.startswith("const_"):
        if word not in CONSTANT_VALUES:
            raise ProgramParseError(f"unknown constant {word!r}", start)
        return Constant(word)
    try:
        value = float(word)
    except ValueError:
        raise ProgramParseError(f"bad number literal {word!r}", start) from None
    if not math.isfinite(value):
        raise ProgramParseError(f"non-finite number literal {word!r}", start)
    return NumberLiteral(value)


def _parse_step(sc: _Scanner) -> ProgramStep:
    sc.skip_ws()
    start = sc.pos
    name = sc.take_while(lambda c: c.isalpha() or c == "_").lower()
    if not name:
        raise ProgramParseError("expected an operator name", start)
    if name not in OPERATORS:
        raise ProgramParseError(f"unknown operator {name!r}", start)
    sc.skip_ws()
    sc.expect("(")
    first = _parse_operand(sc)
    sc.skip_ws()
    sc.expect(",")
    second = _parse_operand(sc)
    sc.skip_ws()
    sc.expect(")")
    return ProgramStep(name, first, second)


def parse_program(text: str) -> Program:
    """Parse the canonical comma-separated step syntax into a validated Program."""
    sc = _Scanner(text)
    steps = [_parse_step(sc)]
    sc.skip_ws()
    while sc.peek() == ",":
        sc.pos += 1
        steps.append(_parse_step(sc))
        sc.skip_ws()
    if sc.pos != len(sc.text):
        raise ProgramParseError("trailing characters after program", sc.pos)
    try:
        return Program(tuple(steps))
    except ProgramValidationError as err:
        raise ProgramParseError(str(err), len(text)) from err


def format_number(value: float) -> str:
    """Render a literal with at least one decimal digit; -0.0 collapses to 0.0."""
    value = float(value)
    if value == 0.0:
        value = 0.0
    text = repr(value)
    if "." not in text and "e" not in text and "E" not in text:
        text += ".0"
    return text


def serialize_operand(operand: Operand) -> str:
    if isinstance(operand, NumberLiteral):
        return format_number(operand.value)
    if isinstance(operand, Constant):
        return operand.name
    return f"#{operand.index}"


def serialize_program(program: Program) -> str:
    steps = []
    for step in program.steps:
        steps.append(
            f"{step.operator}({serialize_operand(step.first)},{serialize_operand(step.second)})"
        )
    return ", ".join(steps)


def round5(x: float) -> float:
    """Round to 5 decimal places, ties away from zero.

    Uses the shortest decimal representation of x so values written with 5 or
    fewer decimals round the way a human reading them would expect.
    """
    if not math.isfinite(x):
        raise ProgramExecutionError(f"cannot round non-finite value {x!r}")
    if abs(x) >= 1e15:
        return float(x)
    return float(Decimal(repr(x)).quantize(Decimal("0.00001"), rounding=ROUND_HALF_UP))


def render_answer(value: AnswerValue) -> str:
    """Canonical answer string: 5-decimal rounded number, or yes/no."""
    if isinstance(value, Boolean):
        return "yes" if value.value else "no"
    return format_number(round5(value.value))


def _resolve(operand: Operand, results: list[AnswerValue]) -> float:
    if isinstance(operand, NumberLiteral):
        return operand.value
    if isinstance(operand, Constant):
        return operand.value
    result = results[operand.index]
    if isinstance(result, Boolean):
        raise ProgramExecutionError(
            f"step #{operand.index} produced a boolean, which cannot be used as a number"
        )
    return result.value


def execute_program(program: Program) -> AnswerValue:
    """Run every step in order and return the final step's value."""
    results: list[AnswerValue] = []
    for i, step in enumerate(program.steps):
        a = _resolve(step.first, results)
        b = _resolve(step.second, results)
        op = step.operator
        if op == "add":
            value: AnswerValue = Numeric(a + b)
        elif op == "subtract":
            value = Numeric(a - b)
        elif op == "multiply":
            value = Numeric(a * b)
        elif op == "divide":
            if b == 0.0:
                raise ProgramExecutionError(f"division by zero in step {i}")
            value = Numeric(a / b)
        elif op == "exp":
            try:
                raised = a ** b
            except (OverflowError, ZeroDivisionError) as err:
                raise ProgramExecutionError(f"exp failed in step {i}: {err}") from None
            if isinstance(raised, complex) or not math.isfinite(raised):
                raise ProgramExecutionError(f"exp produced a non-finite value in step {i}")
            value = Numeric(float(raised))
        else:
            value = Boolean(a > b)
        if isinstance(value, Numeric) and not math.isfinite(value.value):
            raise ProgramExecutionError(f"step {i} produced a non-finite value")
        results.append(value)
    return results[-1]


def execute_text(text: str) -> AnswerValue:
    return execute_program(parse_program(text))
