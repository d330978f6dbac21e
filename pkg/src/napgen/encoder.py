"""Trainable transformer encoder and the model input layout.

Input layout per example: [CLS], the constant tokens, the step-result slots
#0..#(n-1), then question tokens, then sentence tokens. Numbers in the text
share a single placeholder token; their values live in a position-to-value
side map so the executor can recover them after operand selection. A config
flag switches numbers to digit-sequence tokenization instead.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import FfnParams, Tensor
from .dsl import (
    CONSTANT_NAMES,
    Constant,
    NumberLiteral,
    Operand,
    Program,
    StepRef,
)
from .data import Example

PAD_TOKEN = "[PAD]"
CLS_TOKEN = "[CLS]"
NUM_TOKEN = "[NUM]"
UNK_TOKEN = "[UNK]"
SPECIAL_TOKENS = (PAD_TOKEN, CLS_TOKEN, NUM_TOKEN, UNK_TOKEN)
DIGIT_TOKENS = tuple("0123456789.-")


class InputError(Exception):
    """Raised when an example cannot be turned into a model input."""


@dataclass
class Vocab:
    token_to_id: dict[str, int]
    n_max_steps: int

    @property
    def size(self) -> int:
        return len(self.token_to_id)

    def id(self, token: str) -> int:
        return self.token_to_id.get(token, self.token_to_id[UNK_TOKEN])

    def to_dict(self) -> dict:
        return {"token_to_id": self.token_to_id, "n_max_steps": self.n_max_steps}

    @staticmethod
    def from_dict(doc: dict) -> "Vocab":
        return Vocab(token_to_id=dict(doc["token_to_id"]), n_max_steps=int(doc["n_max_steps"]))


def step_token(k: int) -> str:
    return f"#{k}"


def build_vocab(examples: list[Example], n_max_steps: int) -> Vocab:
    """Deterministic vocabulary: specials, constants, step slots, digits, then sorted words."""
    words = set()
    for ex in examples:
        tokens = ex.question_tokens + ex.sentence_tokens
        for pos, token in enumerate(tokens):
            if pos not in ex.numbers:
                words.add(token)
    ordered = list(SPECIAL_TOKENS)
    ordered.extend(CONSTANT_NAMES)
    ordered.extend(step_token(k) for k in range(n_max_steps))
    ordered.extend(t for t in DIGIT_TOKENS if t not in words)
    ordered.extend(sorted(words))
    return Vocab({token: i for i, token in enumerate(ordered)}, n_max_steps)


@dataclass
class ModelInput:
    token_ids: np.ndarray            # (T,) int64
    tokens: list[str]                # surface forms, used to render span answers
    candidate_mask: np.ndarray       # (T,) bool, true at number/constant/step positions
    number_values: dict[int, float]  # model position -> numeric value
    const_positions: dict[int, str]  # model position -> constant name
    step_positions: dict[int, int]   # model position -> step index
    context_start: int               # first question-token position
    n_max_steps: int
    local_to_model: dict[int, int] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.tokens)

    def operand_at(self, position: int) -> Operand:
        if position in self.number_values:
            return NumberLiteral(self.number_values[position])
        if position in self.const_positions:
            return Constant(self.const_positions[position])
        if position in self.step_positions:
            return StepRef(self.step_positions[position])
        raise InputError(f"position {position} is not a candidate")


def _number_surface(value: float) -> str:
    text = repr(float(value))
    return text[:-2] if text.endswith(".0") else text


def build_input(ex: Example, vocab: Vocab, max_len: int = 256,
                digit_tokens: bool = False) -> ModelInput:
    """Lay out one example; checks length and, for program golds, operand alignment."""
    n = vocab.n_max_steps
    tokens: list[str] = [CLS_TOKEN]
    ids: list[int] = [vocab.id(CLS_TOKEN)]
    const_positions: dict[int, str] = {}
    for name in CONSTANT_NAMES:
        const_positions[len(tokens)] = name
        tokens.append(name)
        ids.append(vocab.id(name))
    step_positions: dict[int, int] = {}
    for k in range(n):
        step_positions[len(tokens)] = k
        tokens.append(step_token(k))
        ids.append(vocab.id(step_token(k)))
    context_start = len(tokens)

    number_values: dict[int, float] = {}
    local_to_model: dict[int, int] = {}
    local_tokens = ex.question_tokens + ex.sentence_tokens
    for local_pos, token in enumerate(local_tokens):
        local_to_model[local_pos] = len(tokens)
        if local_pos in ex.numbers:
            value = ex.numbers[local_pos]
            surface = _number_surface(value)
            if digit_tokens:
                number_values[len(tokens)] = value
                for ch in surface:
                    tokens.append(ch)
                    ids.append(vocab.id(ch))
            else:
                number_values[len(tokens)] = value
                tokens.append(surface)
                ids.append(vocab.id(NUM_TOKEN))
        else:
            tokens.append(token)
            ids.append(vocab.id(token))

    if len(tokens) > max_len:
        raise InputError(f"example {ex.id} needs {len(tokens)} tokens, limit is {max_len}")

    candidate_mask = np.zeros(len(tokens), dtype=bool)
    for pos in const_positions:
        candidate_mask[pos] = True
    for pos in step_positions:
        candidate_mask[pos] = True
    for pos in number_values:
        candidate_mask[pos] = True

    model_input = ModelInput(
        token_ids=np.asarray(ids, dtype=np.int64),
        tokens=tokens,
        candidate_mask=candidate_mask,
        number_values=number_values,
        const_positions=const_positions,
        step_positions=step_positions,
        context_start=context_start,
        n_max_steps=n,
        local_to_model=local_to_model,
    )
    if ex.gold_program is not None:
        align_program(ex.gold_program, model_input)
    return model_input


def align_operand(operand: Operand, model_input: ModelInput) -> int:
    """Map a gold operand to its candidate position in the model input."""
    if isinstance(operand, NumberLiteral):
        for pos, value in model_input.number_values.items():
            if math.isclose(value, operand.value, rel_tol=1e-12, abs_tol=1e-12):
                return pos
        raise InputError(f"no context number matches literal {operand.value!r}")
    if isinstance(operand, Constant):
        for pos, name in model_input.const_positions.items():
            if name == operand.name:
                return pos
        raise InputError(f"constant {operand.name} missing from input layout")
    for pos, k in model_input.step_positions.items():
        if k == operand.index:
            return pos
    raise InputError(f"step reference #{operand.index} exceeds the step slot count")


def align_program(program: Program, model_input: ModelInput) -> list[tuple[int, int]]:
    """Per-step (first, second) candidate positions for a gold program."""
    pairs = []
    if len(program) > model_input.n_max_steps:
        raise InputError(
            f"gold program has {len(program)} steps, layout allows {model_input.n_max_steps}"
        )
    for step in program.steps:
        pairs.append((align_operand(step.first, model_input),
                      align_operand(step.second, model_input)))
    return pairs


@dataclass
class EncoderConfig:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    ffn_hidden: int = 256
    max_len: int = 256
    digit_tokens: bool = False

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")

    def to_dict(self) -> dict:
        return {
            "d_model": self.d_model,
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "ffn_hidden": self.ffn_hidden,
            "max_len": self.max_len,
            "digit_tokens": self.digit_tokens,
        }

    @staticmethod
    def from_dict(doc: dict) -> "EncoderConfig":
        return EncoderConfig(**doc)


_POSITION_CACHE: dict[tuple[int, int], np.ndarray] = {}


def sinusoidal_positions(max_len: int, d_model: int) -> np.ndarray:
    key = (max_len, d_model)
    if key not in _POSITION_CACHE:
        positions = np.arange(max_len)[:, None]
        dims = np.arange(d_model)[None, :]
        angles = positions / np.power(10000.0, (2 * (dims // 2)) / d_model)
        table = np.zeros((max_len, d_model))
        table[:, 0::2] = np.sin(angles[:, 0::2])
        table[:, 1::2] = np.cos(angles[:, 1::2])
        _POSITION_CACHE[key] = table
    return _POSITION_CACHE[key]


@dataclass
class EncoderLayerParams:
    ln1_g: Tensor
    ln1_b: Tensor
    w_qkv: Tensor
    b_qkv: Tensor
    w_out: Tensor
    b_out: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    ffn: FfnParams


@dataclass
class EncoderParams:
    tok_emb: Tensor
    layers: list[EncoderLayerParams]
    ln_f_g: Tensor
    ln_f_b: Tensor
    config: EncoderConfig = field(default_factory=EncoderConfig)

    @staticmethod
    def create(rng: np.random.Generator, vocab_size: int, config: EncoderConfig) -> "EncoderParams":
        d = config.d_model

        def linear(fan_in, fan_out):
            scale = math.sqrt(2.0 / (fan_in + fan_out))
            return Tensor(rng.normal(0.0, scale, size=(fan_in, fan_out)), requires_grad=True)

        layers = []
        for _ in range(config.n_layers):
            layers.append(EncoderLayerParams(
                ln1_g=Tensor(np.ones(d), requires_grad=True),
                ln1_b=Tensor(np.zeros(d), requires_grad=True),
                w_qkv=linear(d, 3 * d),
                b_qkv=Tensor(np.zeros(3 * d), requires_grad=True),
                w_out=linear(d, d),
                b_out=Tensor(np.zeros(d), requires_grad=True),
                ln2_g=Tensor(np.ones(d), requires_grad=True),
                ln2_b=Tensor(np.zeros(d), requires_grad=True),
                ffn=FfnParams.create(rng, d, config.ffn_hidden, d),
            ))
        return EncoderParams(
            tok_emb=Tensor(rng.normal(0.0, 1.0 / math.sqrt(d), size=(vocab_size, d)),
                           requires_grad=True),
            layers=layers,
            ln_f_g=Tensor(np.ones(d), requires_grad=True),
            ln_f_b=Tensor(np.zeros(d), requires_grad=True),
            config=config,
        )

    def named(self) -> dict[str, Tensor]:
        out = {"encoder.tok_emb": self.tok_emb}
        for i, layer in enumerate(self.layers):
            prefix = f"encoder.layer{i}."
            out[prefix + "ln1_g"] = layer.ln1_g
            out[prefix + "ln1_b"] = layer.ln1_b
            out[prefix + "w_qkv"] = layer.w_qkv
            out[prefix + "b_qkv"] = layer.b_qkv
            out[prefix + "w_out"] = layer.w_out
            out[prefix + "b_out"] = layer.b_out
            out[prefix + "ln2_g"] = layer.ln2_g
            out[prefix + "ln2_b"] = layer.ln2_b
            for name, tensor in layer.ffn.tensors().items():
                out[prefix + "ffn." + name] = tensor
        out["encoder.ln_f_g"] = self.ln_f_g
        out["encoder.ln_f_b"] = self.ln_f_b
        return out


@dataclass
class EncoderOutput:
    hidden: Tensor  # (T, d)
    cls: Tensor     # (1, d), the [CLS] row


def _self_attention(x: Tensor, layer: EncoderLayerParams, config: EncoderConfig) -> Tensor:
    T = x.shape[0]
    d = config.d_model
    heads = config.n_heads
    dh = d // heads
    qkv = ad.matmul(x, layer.w_qkv) + layer.b_qkv
    q = ad.narrow(qkv, 1, 0, d)
    k = ad.narrow(qkv, 1, d, d)
    v = ad.narrow(qkv, 1, 2 * d, d)
    q = ad.swapaxes(ad.reshape(q, (T, heads, dh)), 0, 1)
    k = ad.swapaxes(ad.reshape(k, (T, heads, dh)), 0, 1)
    v = ad.swapaxes(ad.reshape(v, (T, heads, dh)), 0, 1)
    scores = ad.matmul(q, ad.swapaxes(k, 1, 2)) * (1.0 / math.sqrt(dh))
    weights = ad.softmax(scores, axis=-1)
    context = ad.matmul(weights, v)
    merged = ad.reshape(ad.swapaxes(context, 0, 1), (T, d))
    return ad.matmul(merged, layer.w_out) + layer.b_out


def encoder_layer_forward(x: Tensor, layer: EncoderLayerParams, config: EncoderConfig) -> Tensor:
    """Pre-norm block: attention then feed-forward, both with residuals."""
    h = x + _self_attention(ad.layer_norm(x, layer.ln1_g, layer.ln1_b), layer, config)
    return h + ad.ffn_forward(ad.layer_norm(h, layer.ln2_g, layer.ln2_b), layer.ffn)


def encode(model_input: ModelInput, params: EncoderParams) -> EncoderOutput:
    config = params.config
    T = len(model_input)
    positions = sinusoidal_positions(config.max_len, config.d_model)[:T]
    x = ad.embed_lookup(params.tok_emb, model_input.token_ids) * math.sqrt(config.d_model)
    x = x + Tensor(positions)
    for layer in params.layers:
        x = encoder_layer_forward(x, layer, config)
    hidden = ad.layer_norm(x, params.ln_f_g, params.ln_f_b)
    return EncoderOutput(hidden=hidden, cls=ad.narrow(hidden, 0, 0, 1))
