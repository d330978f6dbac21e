"""Non-autoregressive program generation head.

One forward pass predicts the step count, soft-masks the encoder states toward
operand tokens, and runs an independent tuple generator per step slot. Each
generator picks two operand positions, an operator, and an operand order; no
step ever reads another step's output, so the per-step work is a stack of
batched matmuls. A predicted length of 0 switches to span extraction over the
extractor probabilities.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import FfnParams, Tensor
from .data import Example
from .dsl import OPERATORS, Program, ProgramStep
from .encoder import EncoderOutput, InputError, ModelInput, align_program

GREATER_ID = OPERATORS.index("greater")

_NEG_INF = -1e30


@dataclass
class LossWeights:
    """Per-term loss coefficients: extractor, length, operand, operator, order."""

    extractor: float = 1.0
    length: float = 1.0
    operand: float = 1.0
    operator: float = 1.0
    order: float = 1.0

    def to_dict(self) -> dict:
        return {
            "extractor": self.extractor,
            "length": self.length,
            "operand": self.operand,
            "operator": self.operator,
            "order": self.order,
        }

    @staticmethod
    def from_dict(doc: dict) -> "LossWeights":
        return LossWeights(**doc)


# Best published settings, keyed by model size and dataset.
LOSS_WEIGHT_PRESETS: dict[str, LossWeights] = {
    "base-convfinqa": LossWeights(extractor=1.2, length=1.1, operand=1.0,
                                  operator=2.0, order=1.5),
    "base-multihiertt": LossWeights(extractor=1.0, length=1.0, operand=1.0,
                                    operator=2.0, order=1.0),
    "large-convfinqa": LossWeights(extractor=1.0, length=1.0, operand=1.0,
                                   operator=2.0, order=1.5),
    "large-multihiertt": LossWeights(extractor=1.0, length=1.0, operand=1.0,
                                     operator=2.0, order=1.5),
}


@dataclass
class NapgConfig:
    n_max_steps: int = 5
    head_hidden: int = 64
    loss_weights: LossWeights = field(default_factory=LossWeights)
    span_contiguous: bool = True  # extend the best span token across prob > 0.5 neighbors

    def to_dict(self) -> dict:
        return {
            "n_max_steps": self.n_max_steps,
            "head_hidden": self.head_hidden,
            "loss_weights": self.loss_weights.to_dict(),
            "span_contiguous": self.span_contiguous,
        }

    @staticmethod
    def from_dict(doc: dict) -> "NapgConfig":
        doc = dict(doc)
        weights = doc.get("loss_weights")
        if isinstance(weights, str):
            if weights not in LOSS_WEIGHT_PRESETS:
                known = ", ".join(sorted(LOSS_WEIGHT_PRESETS))
                raise ValueError(f"unknown loss weight preset {weights!r} (known: {known})")
            doc["loss_weights"] = LOSS_WEIGHT_PRESETS[weights]
        elif isinstance(weights, dict):
            doc["loss_weights"] = LossWeights.from_dict(weights)
        elif weights is not None:
            raise TypeError("loss_weights must be a preset name or a mapping")
        else:
            doc.pop("loss_weights", None)
        return NapgConfig(**doc)


@dataclass
class NapgParams:
    length_ffn: FfnParams     # d -> n_max_steps + 1
    extractor_ffn: FfnParams  # d -> 2, per token
    operand_ffn: FfnParams    # stacked per step: d -> 1 position logit
    operator_ffn: FfnParams   # stacked per step: d -> 6
    order_ffn: FfnParams      # stacked per step: d -> 2

    @staticmethod
    def create(rng: np.random.Generator, d_model: int, config: NapgConfig) -> "NapgParams":
        n = config.n_max_steps
        h = config.head_hidden
        return NapgParams(
            length_ffn=FfnParams.create(rng, d_model, h, n + 1),
            extractor_ffn=FfnParams.create(rng, d_model, h, 2),
            operand_ffn=FfnParams.create(rng, d_model, h, 1, stack=n),
            operator_ffn=FfnParams.create(rng, d_model, h, len(OPERATORS), stack=n),
            order_ffn=FfnParams.create(rng, d_model, h, 2, stack=n),
        )

    def named(self) -> dict[str, Tensor]:
        out = {}
        for block, params in (("length_ffn", self.length_ffn),
                              ("extractor_ffn", self.extractor_ffn)):
            for name, tensor in params.tensors().items():
                out[f"napg.{block}.{name}"] = tensor
        # stacked blocks carry one independent parameter slice per step on axis 0
        for block, params in (("operand_ffn", self.operand_ffn),
                              ("operator_ffn", self.operator_ffn),
                              ("order_ffn", self.order_ffn)):
            for name, tensor in params.tensors().items():
                out[f"napg.steps.{block}.{name}"] = tensor
        return out


@dataclass
class ExtractorOutput:
    token_logits: Tensor  # (T, 2) raw per-token operand-class logits
    token_prob: Tensor    # (T, 1) probability that each token is an operand
    masked: Tensor        # (T, d) states blended toward the zero mask embedding


@dataclass
class StepOutput:
    operand_probs: np.ndarray   # (T,), zero outside this step's candidates
    selected: tuple[int, int]   # two distinct positions, ascending
    operator_probs: np.ndarray  # (len(OPERATORS),)
    order_probs: np.ndarray     # (2,)


@dataclass
class ProgramPrediction:
    program: Program
    length: int


@dataclass
class SpanPrediction:
    positions: tuple[int, ...]
    text: str


Prediction = ProgramPrediction | SpanPrediction


@dataclass
class TrainingTargets:
    token_operand: np.ndarray  # (T,) 0/1 operand indicator
    length: int                # gold step count, 0 for spans
    pairs: np.ndarray          # (L, 2) gold positions in program order
    operators: np.ndarray      # (L,)
    orders: np.ndarray         # (L,) 1 when program order reverses input order


def predict_length(enc: EncoderOutput, params: NapgParams) -> Tensor:
    """Distribution over 0..n steps from the [CLS] state; class 0 means span."""
    return ad.softmax(ad.ffn_forward(enc.cls, params.length_ffn), axis=-1)


def extract_operands(enc: EncoderOutput, params: NapgParams) -> ExtractorOutput:
    logits = ad.ffn_forward(enc.hidden, params.extractor_ffn)  # (T, 2)
    probs = ad.softmax(logits, axis=-1)
    token_prob = ad.narrow(probs, 1, 1, 1)  # (T, 1), class 1 = operand
    d = enc.hidden.shape[1]
    masked = ad.soft_mask(enc.hidden, token_prob, np.zeros(d))
    return ExtractorOutput(token_logits=logits, token_prob=token_prob, masked=masked)


def step_candidate_masks(model_input: ModelInput) -> np.ndarray:
    """(n, T) candidate masks; step i may not reference step slots k >= i."""
    n = model_input.n_max_steps
    base = model_input.candidate_mask
    masks = np.broadcast_to(base, (n, base.size)).copy()
    for pos, k in model_input.step_positions.items():
        masks[:k + 1, pos] = False
    return masks


def _mask_additive(masks: np.ndarray) -> np.ndarray:
    return np.where(masks, 0.0, _NEG_INF)


def _slice_ffn(params: FfnParams, start: int, length: int) -> FfnParams:
    return FfnParams(
        w1=ad.narrow(params.w1, 0, start, length), b1=ad.narrow(params.b1, 0, start, length),
        w2=ad.narrow(params.w2, 0, start, length), b2=ad.narrow(params.b2, 0, start, length),
    )


def _operand_scores(ext: ExtractorOutput, model_input: ModelInput,
                    params: NapgParams, k: int) -> tuple[Tensor, np.ndarray]:
    """Masked operand logits for the first k step slots; returns (k, T) logits."""
    masks = step_candidate_masks(model_input)[:k]
    sliced = _slice_ffn(params.operand_ffn, 0, k)
    logits = ad.reshape(ad.ffn_forward(ext.masked, sliced), (k, len(model_input)))
    return logits + Tensor(_mask_additive(masks)), masks


def _pooled_step_states(ext: ExtractorOutput, enc: EncoderOutput,
                        operand_probs: Tensor, positions: np.ndarray) -> Tensor:
    """mean of [CLS] and the two chosen operand states under each step's soft mask."""
    k = operand_probs.shape[0]
    p = ad.reshape(operand_probs, (k, operand_probs.shape[1], 1))
    step_masked = ad.mul(ext.masked, p)  # zero mask embedding: blend reduces to a scale
    chosen = ad.gather_per_row(step_masked, positions)      # (k, 2, d)
    total = ad.tsum(chosen, axis=1) + enc.cls               # (k, d) + (1, d)
    return total * (1.0 / 3.0)


def _tuple_log_probs(ext: ExtractorOutput, enc: EncoderOutput, model_input: ModelInput,
                     params: NapgParams, k: int, positions: np.ndarray
                     ) -> tuple[Tensor, Tensor, Tensor]:
    """Log probabilities for operands, operators, and order of the first k steps."""
    operand_logits, _ = _operand_scores(ext, model_input, params, k)
    operand_log_probs = ad.log_softmax(operand_logits, axis=-1)
    operand_probs = ad.softmax(operand_logits, axis=-1)
    pooled = _pooled_step_states(ext, enc, operand_probs, positions)
    pooled3 = ad.reshape(pooled, (k, 1, pooled.shape[1]))
    op_logits = ad.reshape(ad.ffn_forward(pooled3, _slice_ffn(params.operator_ffn, 0, k)),
                           (k, len(OPERATORS)))
    order_logits = ad.reshape(ad.ffn_forward(pooled3, _slice_ffn(params.order_ffn, 0, k)),
                              (k, 2))
    return operand_log_probs, ad.log_softmax(op_logits, axis=-1), ad.log_softmax(order_logits, axis=-1)


def _top_two(probs: np.ndarray, mask: np.ndarray) -> tuple[int, int]:
    if int(mask.sum()) < 2:
        raise InputError("need at least two candidate positions for a step")
    order = np.argsort(-probs, kind="stable")  # ties break toward lower positions
    picked = [int(p) for p in order if mask[p]][:2]
    return (min(picked), max(picked))


def step_generate(i: int, ext: ExtractorOutput, enc: EncoderOutput,
                  model_input: ModelInput, params: NapgParams) -> StepOutput:
    """Run a single step slot's tuple generator; reads nothing from other steps."""
    with ad.no_grad():
        masks = step_candidate_masks(model_input)
        one = _slice_ffn(params.operand_ffn, i, 1)
        logits = ad.reshape(ad.ffn_forward(ext.masked, one), (1, len(model_input)))
        logits = logits + Tensor(_mask_additive(masks[i:i + 1]))
        probs = ad.softmax(logits, axis=-1)
        selected = _top_two(probs.data[0], masks[i])
        pooled = _pooled_step_states(ext, enc, probs, np.array([selected]))
        pooled3 = ad.reshape(pooled, (1, 1, pooled.shape[1]))
        op_probs = ad.softmax(ad.reshape(
            ad.ffn_forward(pooled3, _slice_ffn(params.operator_ffn, i, 1)),
            (1, len(OPERATORS))), axis=-1)
        order_probs = ad.softmax(ad.reshape(
            ad.ffn_forward(pooled3, _slice_ffn(params.order_ffn, i, 1)), (1, 2)), axis=-1)
    return StepOutput(
        operand_probs=probs.data[0],
        selected=selected,
        operator_probs=op_probs.data[0],
        order_probs=order_probs.data[0],
    )


def build_targets(ex: Example, model_input: ModelInput) -> TrainingTargets:
    T = len(model_input)
    token_operand = np.zeros(T, dtype=np.int64)
    if ex.gold_program is None:
        if not ex.gold_span:
            raise InputError(f"example {ex.id} has neither a program nor a span")
        for local in ex.gold_span:
            token_operand[model_input.local_to_model[local]] = 1
        return TrainingTargets(
            token_operand=token_operand,
            length=0,
            pairs=np.zeros((0, 2), dtype=np.int64),
            operators=np.zeros(0, dtype=np.int64),
            orders=np.zeros(0, dtype=np.int64),
        )
    pairs = np.asarray(align_program(ex.gold_program, model_input), dtype=np.int64)
    for a, b in pairs:
        token_operand[a] = 1
        token_operand[b] = 1
    operators = np.asarray(
        [OPERATORS.index(step.operator) for step in ex.gold_program.steps], dtype=np.int64)
    orders = np.asarray([1 if a > b else 0 for a, b in pairs], dtype=np.int64)
    return TrainingTargets(
        token_operand=token_operand,
        length=len(ex.gold_program),
        pairs=pairs,
        operators=operators,
        orders=orders,
    )


def compute_loss(enc: EncoderOutput, model_input: ModelInput, targets: TrainingTargets,
                 params: NapgParams, config: NapgConfig) -> tuple[Tensor, dict[str, float]]:
    """Weighted joint loss; step terms cover only the gold step count."""
    w = config.loss_weights
    ext = extract_operands(enc, params)
    extractor_nll = ad.nll_loss(ad.log_softmax(ext.token_logits, axis=-1),
                                targets.token_operand, reduction="mean")
    length_logits = ad.reshape(ad.ffn_forward(enc.cls, params.length_ffn),
                               (config.n_max_steps + 1,))
    length_nll = ad.nll_loss(ad.log_softmax(length_logits, axis=-1), targets.length)
    total = ad.mul(extractor_nll, w.extractor) + ad.mul(length_nll, w.length)
    terms = {
        "extractor": float(extractor_nll.data),
        "length": float(length_nll.data),
        "operand": 0.0,
        "operator": 0.0,
        "order": 0.0,
    }
    L = targets.length
    if L > 0:
        operand_lp, op_lp, order_lp = _tuple_log_probs(
            ext, enc, model_input, params, L, targets.pairs)
        operand_nll = ad.add(
            ad.nll_loss(operand_lp, targets.pairs[:, 0], reduction="sum"),
            ad.nll_loss(operand_lp, targets.pairs[:, 1], reduction="sum"),
        )
        op_nll = ad.nll_loss(op_lp, targets.operators, reduction="sum")
        order_nll = ad.nll_loss(order_lp, targets.orders, reduction="sum")
        total = total + ad.mul(operand_nll, w.operand) + ad.mul(op_nll, w.operator) \
            + ad.mul(order_nll, w.order)
        terms["operand"] = float(operand_nll.data)
        terms["operator"] = float(op_nll.data)
        terms["order"] = float(order_nll.data)
    return total, terms


def _extract_span(token_prob: np.ndarray, model_input: ModelInput,
                  contiguous: bool) -> SpanPrediction:
    start = model_input.context_start
    context = token_prob[start:]
    best = start + int(np.argmax(context))
    positions = [best]
    if contiguous:
        left = best - 1
        while left >= start and token_prob[left] > 0.5:
            positions.insert(0, left)
            left -= 1
        right = best + 1
        while right < len(model_input) and token_prob[right] > 0.5:
            positions.append(right)
            right += 1
    text = " ".join(model_input.tokens[p] for p in positions)
    return SpanPrediction(positions=tuple(positions), text=text)


def decode(enc: EncoderOutput, model_input: ModelInput, params: NapgParams,
           config: NapgConfig) -> Prediction:
    """Greedy assembly of the most likely program (or span when length is 0).

    All step slots are evaluated regardless of the predicted length, so the
    decode cost does not depend on the program being built. Candidate masks
    forbid forward references, and the operator argmax excludes the comparison
    operator everywhere but the final step, so the output always validates.
    """
    n = config.n_max_steps
    with ad.no_grad():
        length_probs = predict_length(enc, params).data[0]
        ext = extract_operands(enc, params)
        length = int(np.argmax(length_probs))
        operand_logits, masks = _operand_scores(ext, model_input, params, n)
        operand_probs = ad.softmax(operand_logits, axis=-1).data
        selections = np.zeros((n, 2), dtype=np.int64)
        for i in range(n):
            selections[i] = _top_two(operand_probs[i], masks[i])
        pooled = _pooled_step_states(ext, enc, Tensor(operand_probs), selections)
        pooled3 = ad.reshape(pooled, (n, 1, pooled.shape[1]))
        op_probs = ad.softmax(ad.reshape(
            ad.ffn_forward(pooled3, params.operator_ffn), (n, len(OPERATORS))), axis=-1).data
        order_probs = ad.softmax(ad.reshape(
            ad.ffn_forward(pooled3, params.order_ffn), (n, 2)), axis=-1).data

    if length == 0:
        return _extract_span(ext.token_prob.data[:, 0], model_input, config.span_contiguous)

    steps = []
    for i in range(length):
        allowed = op_probs[i].copy()
        if i < length - 1:
            allowed[GREATER_ID] = -1.0  # comparison results are terminal
        operator = OPERATORS[int(np.argmax(allowed))]
        a, b = selections[i]
        if int(np.argmax(order_probs[i])) == 1:
            a, b = b, a
        steps.append(ProgramStep(operator, model_input.operand_at(int(a)),
                                 model_input.operand_at(int(b))))
    return ProgramPrediction(program=Program(tuple(steps)), length=length)
