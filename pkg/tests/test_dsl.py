import math

import numpy as np
import pytest

from napgen.dsl import (
    CONSTANT_NAMES,
    CONSTANT_VALUES,
    OPERATORS,
    Boolean,
    Constant,
    NumberLiteral,
    Numeric,
    Program,
    ProgramExecutionError,
    ProgramParseError,
    ProgramStep,
    ProgramValidationError,
    StepRef,
    execute_program,
    execute_text,
    format_number,
    parse_program,
    render_answer,
    round5,
    serialize_program,
)

# Reference programs with hand-checked answers at 5-decimal rounding.
REFERENCE_CASES = [
    ("subtract(19520,21579), divide(#0,21579)", "-0.09542"),
    ("add(390,268), add(#0,77)", "735.0"),
    ("add(4082,1256), add(#0,301)", "5639.0"),
    ("add(603,649), add(#0,628), divide(#1,3)", "626.66667"),
    ("add(140,56), add(#0,56), add(#1,21)", "273.0"),
]


@pytest.mark.parametrize("text,expected", REFERENCE_CASES)
def test_reference_programs_execute_to_expected_answers(text, expected):
    assert render_answer(execute_text(text)) == expected


def test_operator_table():
    assert OPERATORS == ("add", "subtract", "multiply", "divide", "exp", "greater")
    assert len(CONSTANT_NAMES) == 17
    assert CONSTANT_VALUES["const_m1"] == -1.0
    assert CONSTANT_VALUES["const_1000000"] == 1000000.0


def test_basic_arithmetic():
    assert execute_text("add(2,3)").value == 5.0
    assert execute_text("subtract(2,3)").value == -1.0
    assert execute_text("multiply(4,2.5)").value == 10.0
    assert execute_text("divide(1,8)").value == 0.125
    assert execute_text("exp(5,2)").value == 25.0
    assert execute_text("exp(2,0.5)").value == pytest.approx(math.sqrt(2))


def test_greater_renders_yes_no():
    assert render_answer(execute_text("greater(3,2)")) == "yes"
    assert render_answer(execute_text("greater(1,2)")) == "no"
    assert render_answer(execute_text("greater(2,2)")) == "no"


def test_constants_resolve():
    assert execute_text("multiply(3,const_100)").value == 300.0
    assert execute_text("multiply(3,const_m1)").value == -3.0


def test_step_refs_chain():
    value = execute_text("add(1,2), multiply(#0,#0)")
    assert value.value == 9.0


class TestParsing:
    def test_round_trip_canonical(self):
        text = "add(390.0,268.0), add(#0,77.0)"
        assert serialize_program(parse_program(text)) == text

    def test_parse_accepts_integer_literals(self):
        program = parse_program("add(390,268)")
        assert program.steps[0].first == NumberLiteral(390.0)

    def test_serialize_appends_decimal(self):
        program = Program((ProgramStep("add", NumberLiteral(5.0), NumberLiteral(2.5)),))
        assert serialize_program(program) == "add(5.0,2.5)"

    def test_whitespace_tolerated_between_steps(self):
        program = parse_program("add(1,2),add(#0,3)")
        assert len(program) == 2

    @pytest.mark.parametrize("bad", [
        "",
        "add(1,)",
        "add(1 2)",
        "frobnicate(1,2)",
        "add(1,2))",
        "add(1,2), ",
        "add(#0,1)",           # self/forward reference
        "add(1,2), add(#5,1)", # forward reference
        "add(1,2) add(3,4)",   # missing comma
        "add(const_42,1)",     # unknown constant
        "#0",
        "add(1,nan)",
    ])
    def test_malformed_inputs_raise_parse_errors(self, bad):
        with pytest.raises(ProgramParseError):
            parse_program(bad)

    def test_parse_error_carries_position(self):
        with pytest.raises(ProgramParseError) as info:
            parse_program("add(1,]")
        assert info.value.position is not None

    def test_round_trip_random_programs(self):
        rng = np.random.default_rng(42)
        for _ in range(200):
            n_steps = int(rng.integers(1, 6))
            steps = []
            for i in range(n_steps):
                operands = []
                for _ in range(2):
                    kind = rng.integers(3) if i > 0 else rng.integers(2)
                    if kind == 0:
                        operands.append(NumberLiteral(round(float(rng.uniform(-1e4, 1e4)), 2)))
                    elif kind == 1:
                        operands.append(Constant(CONSTANT_NAMES[rng.integers(17)]))
                    else:
                        operands.append(StepRef(int(rng.integers(i))))
                op = OPERATORS[rng.integers(4)]  # arithmetic only, keeps refs legal
                steps.append(ProgramStep(op, operands[0], operands[1]))
            program = Program(tuple(steps))
            assert parse_program(serialize_program(program)) == program


class TestValidation:
    def test_empty_program_rejected(self):
        with pytest.raises(ProgramValidationError):
            Program(())

    def test_boolean_feeding_arithmetic_rejected(self):
        steps = (
            ProgramStep("greater", NumberLiteral(1.0), NumberLiteral(2.0)),
            ProgramStep("add", StepRef(0), NumberLiteral(3.0)),
        )
        with pytest.raises(ProgramValidationError):
            Program(steps)

    def test_greater_mid_program_allowed_if_unreferenced(self):
        steps = (
            ProgramStep("greater", NumberLiteral(1.0), NumberLiteral(2.0)),
            ProgramStep("add", NumberLiteral(1.0), NumberLiteral(3.0)),
        )
        assert len(Program(steps)) == 2

    def test_non_finite_literal_rejected(self):
        with pytest.raises(ProgramValidationError):
            Program((ProgramStep("add", NumberLiteral(float("inf")), NumberLiteral(1.0)),))


class TestExecutionErrors:
    def test_divide_by_zero(self):
        with pytest.raises(ProgramExecutionError):
            execute_text("divide(1,0)")

    def test_exp_overflow(self):
        with pytest.raises(ProgramExecutionError):
            execute_text("exp(const_1000000,const_1000000)")

    def test_exp_complex_result(self):
        with pytest.raises(ProgramExecutionError):
            execute_text("exp(const_m1,0.5)")

    def test_answer_kinds(self):
        assert isinstance(execute_text("add(1,2)"), Numeric)
        assert isinstance(execute_text("greater(1,2)"), Boolean)


class TestRounding:
    # round5 rounds half away from zero, unlike bankers rounding
    @pytest.mark.parametrize("value,expected", [
        (0.000005, 1e-05),
        (-0.000005, -1e-05),
        (0.000015, 2e-05),
        (2.5e-6, 0.0),  # below the half threshold at 5 decimals
        (1.234565, 1.23457),
        (735.0, 735.0),
    ])
    def test_half_away_from_zero(self, value, expected):
        assert round5(value) == expected

    @pytest.mark.parametrize("value,expected", [
        (1.234565, "1.23457"),
        (-0.095419999, "-0.09542"),
        (735.0, "735.0"),
        (626.6666666667, "626.66667"),
    ])
    def test_rendered_form(self, value, expected):
        assert format_number(round5(value)) == expected

    def test_negative_zero_normalized(self):
        assert format_number(round5(-0.0000001)) == "0.0"

    def test_round5_rejects_non_finite(self):
        with pytest.raises(ProgramExecutionError):
            round5(float("nan"))

    def test_huge_magnitudes_pass_through(self):
        assert round5(1e16) == 1e16


def test_render_answer_formats():
    assert render_answer(Numeric(735.0)) == "735.0"
    assert render_answer(Numeric(-0.0954199)) == "-0.09542"
    assert render_answer(Boolean(True)) == "yes"
    assert render_answer(Boolean(False)) == "no"


def test_execute_program_matches_execute_text():
    program = parse_program("add(390.0,268.0), add(#0,77.0)")
    assert execute_program(program).value == execute_text("add(390,268), add(#0,77)").value
