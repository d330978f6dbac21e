"""Autoregressive baseline decoder.

A single-layer gated recurrent (LSTM-style) cell emits one token per step:
an operator, a parenthesis, a comma, an operand, or EOF. Operands point either
at special-token embeddings (constants, step refs) or at encoder positions,
scored over the concatenated memory matrix. A structural grammar mask keeps
every prefix parseable, so decoding is sequential by construction: token t
cannot be scored before token t-1 is chosen.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import FfnParams, Tensor
from .dsl import (
    CONSTANT_NAMES,
    OPERATORS,
    Constant,
    NumberLiteral,
    Operand,
    Program,
    ProgramStep,
    ProgramValidationError,
    StepRef,
    serialize_program,
)
from .encoder import EncoderOutput, ModelInput, align_operand

BOS, EOF, LPAREN, RPAREN, COMMA = 0, 1, 2, 3, 4
OP_BASE = 5
CONST_BASE = OP_BASE + len(OPERATORS)
STEP_BASE = CONST_BASE + len(CONSTANT_NAMES)


def special_token_count(n_max_steps: int) -> int:
    return STEP_BASE + n_max_steps


@dataclass
class ArConfig:
    n_max_steps: int = 5
    max_tokens: int | None = None  # default: enough for n_max_steps full steps

    @property
    def token_budget(self) -> int:
        if self.max_tokens is not None:
            return self.max_tokens
        return 6 * self.n_max_steps + 1

    def to_dict(self) -> dict:
        return {"n_max_steps": self.n_max_steps, "max_tokens": self.max_tokens}

    @staticmethod
    def from_dict(doc: dict) -> "ArConfig":
        return ArConfig(**doc)


@dataclass
class ArParams:
    special_emb: Tensor  # (S, d) embeddings for grammar tokens, constants, step refs
    w_init: Tensor       # (d, d) maps [CLS] to the initial hidden state
    b_init: Tensor
    w_x: Tensor          # (d, 4d) input-to-gates
    w_h: Tensor          # (d, 4d) hidden-to-gates
    b_gates: Tensor
    w_query: Tensor      # (2d, d) [hidden; attention context] -> pointer query
    b_query: Tensor

    @staticmethod
    def create(rng: np.random.Generator, d_model: int, config: ArConfig) -> "ArParams":
        import math

        def linear(fan_in, fan_out):
            scale = math.sqrt(2.0 / (fan_in + fan_out))
            return Tensor(rng.normal(0.0, scale, size=(fan_in, fan_out)), requires_grad=True)

        d = d_model
        S = special_token_count(config.n_max_steps)
        return ArParams(
            special_emb=Tensor(rng.normal(0.0, 1.0 / math.sqrt(d), size=(S, d)),
                               requires_grad=True),
            w_init=linear(d, d),
            b_init=Tensor(np.zeros(d), requires_grad=True),
            w_x=linear(d, 4 * d),
            w_h=linear(d, 4 * d),
            b_gates=Tensor(np.zeros(4 * d), requires_grad=True),
            w_query=linear(2 * d, d),
            b_query=Tensor(np.zeros(d), requires_grad=True),
        )

    def named(self) -> dict[str, Tensor]:
        return {
            "ar.special_emb": self.special_emb,
            "ar.w_init": self.w_init,
            "ar.b_init": self.b_init,
            "ar.w_x": self.w_x,
            "ar.w_h": self.w_h,
            "ar.b_gates": self.b_gates,
            "ar.w_query": self.w_query,
            "ar.b_query": self.b_query,
        }


@dataclass
class DecoderState:
    hidden: Tensor             # (1, d)
    cell: Tensor               # (1, d)
    phase: str                 # grammar phase
    steps_done: int
    history: list[int] = field(default_factory=list)


# grammar phases
_P_OP = "op"                 # start of the program: operator only
_P_LPAREN = "lparen"
_P_FIRST = "first_operand"
_P_COMMA = "comma"
_P_SECOND = "second_operand"
_P_RPAREN = "rparen"
_P_OP_OR_EOF = "op_or_eof"


def init_state(enc: EncoderOutput, params: ArParams) -> DecoderState:
    hidden = ad.tanh(ad.matmul(enc.cls, params.w_init) + params.b_init)
    cell = Tensor(np.zeros_like(hidden.data))
    return DecoderState(hidden=hidden, cell=cell, phase=_P_OP, steps_done=0)


def build_memory(enc: EncoderOutput, params: ArParams) -> Tensor:
    """Special-token embeddings stacked above the encoder states."""
    return ad.concat([params.special_emb, enc.hidden], axis=0)


def legal_token_mask(phase: str, steps_done: int, model_input: ModelInput,
                     n_max_steps: int) -> np.ndarray:
    S = special_token_count(n_max_steps)
    mask = np.zeros(S + len(model_input), dtype=bool)
    if phase == _P_OP:
        mask[OP_BASE:OP_BASE + 6] = True
    elif phase == _P_OP_OR_EOF:
        mask[OP_BASE:OP_BASE + 6] = True
        mask[EOF] = True
    elif phase == _P_LPAREN:
        mask[LPAREN] = True
    elif phase == _P_COMMA:
        mask[COMMA] = True
    elif phase == _P_RPAREN:
        mask[RPAREN] = True
    elif phase in (_P_FIRST, _P_SECOND):
        mask[CONST_BASE:CONST_BASE + len(CONSTANT_NAMES)] = True
        mask[STEP_BASE:STEP_BASE + steps_done] = True
        for pos in model_input.number_values:
            mask[S + pos] = True
    else:
        raise ValueError(f"unknown grammar phase {phase!r}")
    return mask


def _advance_phase(phase: str, steps_done: int) -> tuple[str, int]:
    transitions = {
        _P_OP: _P_LPAREN,
        _P_OP_OR_EOF: _P_LPAREN,
        _P_LPAREN: _P_FIRST,
        _P_FIRST: _P_COMMA,
        _P_COMMA: _P_SECOND,
        _P_SECOND: _P_RPAREN,
    }
    if phase == _P_RPAREN:
        return _P_OP_OR_EOF, steps_done + 1
    return transitions[phase], steps_done


def ar_step(state: DecoderState, prev_token: int, memory: Tensor,
            model_input: ModelInput, params: ArParams, n_max_steps: int
            ) -> tuple[Tensor, np.ndarray, DecoderState]:
    """One decoder tick: returns masked logits over the memory rows and the new state."""
    d = state.hidden.shape[1]
    x = ad.narrow(memory, 0, prev_token, 1) if prev_token != BOS \
        else ad.narrow(params.special_emb, 0, BOS, 1)
    gates = ad.matmul(x, params.w_x) + ad.matmul(state.hidden, params.w_h) + params.b_gates
    i_gate = ad.sigmoid(ad.narrow(gates, 1, 0, d))
    f_gate = ad.sigmoid(ad.narrow(gates, 1, d, d))
    g_gate = ad.tanh(ad.narrow(gates, 1, 2 * d, d))
    o_gate = ad.sigmoid(ad.narrow(gates, 1, 3 * d, d))
    cell = ad.add(ad.mul(f_gate, state.cell), ad.mul(i_gate, g_gate))
    hidden = ad.mul(o_gate, ad.tanh(cell))

    scores = ad.matmul(hidden, ad.swapaxes(memory, 0, 1)) * (1.0 / np.sqrt(d))
    attention = ad.softmax(scores, axis=-1)
    context = ad.matmul(attention, memory)
    query = ad.tanh(ad.matmul(ad.concat([hidden, context], axis=1), params.w_query)
                    + params.b_query)
    logits = ad.matmul(query, ad.swapaxes(memory, 0, 1))  # (1, S + T)

    legal = legal_token_mask(state.phase, state.steps_done, model_input, n_max_steps)
    masked = logits + Tensor(np.where(legal, 0.0, -1e30))
    new_state = DecoderState(hidden=hidden, cell=cell, phase=state.phase,
                             steps_done=state.steps_done, history=state.history)
    return masked, legal, new_state


def _consume(state: DecoderState, token: int) -> DecoderState:
    state.history.append(token)
    if token == EOF:
        return state
    state.phase, state.steps_done = _advance_phase(state.phase, state.steps_done)
    return state


def gold_token_sequence(program: Program, model_input: ModelInput) -> list[int]:
    """Teacher-forcing targets: op ( operand , operand ) per step, then EOF."""
    S_offset = special_token_count(model_input.n_max_steps)

    def operand_id(operand: Operand) -> int:
        if isinstance(operand, Constant):
            return CONST_BASE + CONSTANT_NAMES.index(operand.name)
        if isinstance(operand, StepRef):
            return STEP_BASE + operand.index
        return S_offset + align_operand(operand, model_input)

    ids = []
    for step in program.steps:
        ids.extend([
            OP_BASE + OPERATORS.index(step.operator),
            LPAREN,
            operand_id(step.first),
            COMMA,
            operand_id(step.second),
            RPAREN,
        ])
    ids.append(EOF)
    return ids


def teacher_forced_loss(enc: EncoderOutput, model_input: ModelInput,
                        gold_tokens: list[int], params: ArParams,
                        config: ArConfig) -> Tensor:
    """Sum of per-position NLL with the gold history fed back at every step."""
    memory = build_memory(enc, params)
    state = init_state(enc, params)
    prev = BOS
    total: Tensor | None = None
    for token in gold_tokens:
        logits, _, state = ar_step(state, prev, memory, model_input, params,
                                   config.n_max_steps)
        log_probs = ad.log_softmax(ad.reshape(logits, (logits.shape[1],)), axis=-1)
        nll = ad.nll_loss(log_probs, token)
        total = nll if total is None else ad.add(total, nll)
        state = _consume(state, token)
        prev = token
    assert total is not None
    return total


@dataclass
class ArDecodeResult:
    tokens: list[int]
    program: Program | None
    truncated: bool

    def serialized(self) -> str | None:
        return None if self.program is None else serialize_program(self.program)


def tokens_to_program(tokens: list[int], model_input: ModelInput) -> Program | None:
    """Rebuild a program from emitted tokens; incomplete trailing steps are dropped.

    Returns None when no complete step exists or the steps do not validate
    (e.g. a comparison result fed into arithmetic).
    """
    S = special_token_count(model_input.n_max_steps)
    steps = []
    current: list = []

    def to_operand(token: int) -> Operand:
        if CONST_BASE <= token < CONST_BASE + len(CONSTANT_NAMES):
            return Constant(CONSTANT_NAMES[token - CONST_BASE])
        if STEP_BASE <= token < S:
            return StepRef(token - STEP_BASE)
        return NumberLiteral(model_input.number_values[token - S])

    for token in tokens:
        if token == EOF:
            break
        if OP_BASE <= token < OP_BASE + 6:
            current = [OPERATORS[token - OP_BASE]]
        elif token in (LPAREN, COMMA):
            continue
        elif token == RPAREN:
            if len(current) == 3:
                steps.append(ProgramStep(current[0], current[1], current[2]))
            current = []
        else:
            current.append(to_operand(token))
    if not steps:
        return None
    try:
        return Program(tuple(steps))
    except ProgramValidationError:
        return None


def greedy_decode(enc: EncoderOutput, model_input: ModelInput, params: ArParams,
                  config: ArConfig) -> ArDecodeResult:
    """Argmax decoding until EOF or the token budget runs out."""
    with ad.no_grad():
        memory = build_memory(enc, params)
        state = init_state(enc, params)
        prev = BOS
        tokens: list[int] = []
        truncated = True
        for _ in range(config.token_budget):
            logits, _, state = ar_step(state, prev, memory, model_input, params,
                                       config.n_max_steps)
            token = int(np.argmax(logits.data[0]))
            tokens.append(token)
            if token == EOF:
                truncated = False
                break
            state = _consume(state, token)
            prev = token
    return ArDecodeResult(tokens=tokens, program=tokens_to_program(tokens, model_input),
                          truncated=truncated)


def paced_decode(enc: EncoderOutput, model_input: ModelInput, params: ArParams,
                 config: ArConfig, n_tokens: int) -> list[int]:
    """Run exactly n_tokens argmax ticks, ignoring EOF; used to time length-L decodes."""
    with ad.no_grad():
        memory = build_memory(enc, params)
        state = init_state(enc, params)
        prev = BOS
        tokens: list[int] = []
        for _ in range(n_tokens):
            logits, _, state = ar_step(state, prev, memory, model_input, params,
                                       config.n_max_steps)
            scores = logits.data[0].copy()
            scores[EOF] = -np.inf  # keep the clock running for the full budget
            token = int(np.argmax(scores))
            tokens.append(token)
            state = _consume(state, token)
            prev = token
    return tokens
