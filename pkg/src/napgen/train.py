"""Training loop, model bundles, checkpoint IO, and dataset evaluation."""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import ar as ar_mod
from . import autodiff as ad
from . import napg as napg_mod
from .ar import ArConfig, ArParams
from .autodiff import Adam, CheckpointError, Tensor, load_checkpoint, save_checkpoint
from .data import Example, load_jsonl
from .dsl import ProgramExecutionError, execute_program, render_answer, serialize_program
from .encoder import (
    EncoderConfig,
    EncoderParams,
    InputError,
    ModelInput,
    Vocab,
    build_input,
    build_vocab,
    encode,
)
from .metrics import (
    ExampleResult,
    MetricsReport,
    aggregate,
    exact_match,
    exe_acc,
    numeracy_f1,
    prog_acc,
)
from .napg import NapgConfig, NapgParams, Prediction, ProgramPrediction, SpanPrediction


class ConfigError(ValueError):
    """Raised for invalid run configurations; the CLI maps these to exit code 2."""


class TrainDivergedError(RuntimeError):
    """Raised when the loss goes non-finite; carries the offending example id."""


@dataclass
class RunConfig:
    model: str = "napg"                  # "napg" or "ar"
    dataset_dir: str = "data"
    out_dir: str = "runs/default"
    seed: int = 0
    epochs: int = 30
    batch_size: int = 8
    learning_rate: float = 1e-3
    # decoupled decay; the synthetic tasks need it to generalize rather than
    # memorize, see the dataset-size notes in README
    weight_decay: float = 0.1
    eval_split: str = "dev"
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    napg: NapgConfig = field(default_factory=NapgConfig)
    ar: ArConfig = field(default_factory=ArConfig)

    def __post_init__(self):
        if self.model not in ("napg", "ar"):
            raise ConfigError(f"model must be 'napg' or 'ar', got {self.model!r}")
        if self.epochs < 1:
            raise ConfigError("epochs must be at least 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        if not (self.learning_rate > 0):
            raise ConfigError("learning_rate must be positive")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "dataset_dir": self.dataset_dir,
            "out_dir": self.out_dir,
            "seed": self.seed,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "weight_decay": self.weight_decay,
            "eval_split": self.eval_split,
            "encoder": self.encoder.to_dict(),
            "napg": self.napg.to_dict(),
            "ar": self.ar.to_dict(),
        }

    @staticmethod
    def from_dict(doc: dict) -> "RunConfig":
        known = {"model", "dataset_dir", "out_dir", "seed", "epochs", "batch_size",
                 "learning_rate", "weight_decay", "eval_split", "encoder", "napg", "ar"}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        doc = dict(doc)
        try:
            if "encoder" in doc:
                doc["encoder"] = EncoderConfig.from_dict(doc["encoder"])
            if "napg" in doc:
                doc["napg"] = NapgConfig.from_dict(doc["napg"])
            if "ar" in doc:
                doc["ar"] = ArConfig.from_dict(doc["ar"])
            return RunConfig(**doc)
        except (TypeError, ValueError, KeyError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"invalid run config: {exc}") from exc

    @staticmethod
    def from_json(path) -> "RunConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError("config root must be a JSON object")
        return RunConfig.from_dict(doc)


def _assign_named(named: dict[str, Tensor], arrays: dict[str, np.ndarray],
                  path: str) -> None:
    if set(named) != set(arrays):
        missing = sorted(set(named) - set(arrays))
        extra = sorted(set(arrays) - set(named))
        raise CheckpointError(
            f"{path}: parameter names do not match (missing {missing}, extra {extra})")
    for name, tensor in named.items():
        if tensor.data.shape != arrays[name].shape:
            raise CheckpointError(
                f"{path}: shape mismatch for {name}: "
                f"{arrays[name].shape} vs expected {tensor.data.shape}")
        tensor.data = arrays[name].astype(np.float64)


@dataclass
class NapgModel:
    vocab: Vocab
    encoder_config: EncoderConfig
    config: NapgConfig
    encoder_params: EncoderParams
    params: NapgParams

    kind = "napg"

    @staticmethod
    def create(rng: np.random.Generator, vocab: Vocab, encoder_config: EncoderConfig,
               config: NapgConfig) -> "NapgModel":
        return NapgModel(
            vocab=vocab,
            encoder_config=encoder_config,
            config=config,
            encoder_params=EncoderParams.create(rng, vocab.size, encoder_config),
            params=NapgParams.create(rng, encoder_config.d_model, config),
        )

    def named_params(self) -> dict[str, Tensor]:
        return {**self.encoder_params.named(), **self.params.named()}

    def prepare(self, ex: Example) -> ModelInput:
        return build_input(ex, self.vocab, max_len=self.encoder_config.max_len,
                           digit_tokens=self.encoder_config.digit_tokens)

    def loss(self, model_input: ModelInput, ex: Example) -> Tensor:
        targets = napg_mod.build_targets(ex, model_input)
        enc = encode(model_input, self.encoder_params)
        total, _ = napg_mod.compute_loss(enc, model_input, targets, self.params,
                                         self.config)
        return total

    def decode(self, model_input: ModelInput) -> Prediction:
        enc = encode(model_input, self.encoder_params)
        return napg_mod.decode(enc, model_input, self.params, self.config)

    def save(self, path, extra_meta: dict | None = None) -> None:
        meta = {
            "vocab": self.vocab.to_dict(),
            "encoder": self.encoder_config.to_dict(),
            "napg": self.config.to_dict(),
        }
        if extra_meta:
            meta.update(extra_meta)
        save_checkpoint(path, "napg", self.named_params(), meta)

    @staticmethod
    def load(path) -> "NapgModel":
        kind, arrays, meta = load_checkpoint(path)
        if kind != "napg":
            raise CheckpointError(f"{path}: expected a napg checkpoint, found {kind!r}")
        model = NapgModel.create(
            np.random.default_rng(0),
            Vocab.from_dict(meta["vocab"]),
            EncoderConfig.from_dict(meta["encoder"]),
            NapgConfig.from_dict(meta["napg"]),
        )
        _assign_named(model.named_params(), arrays, str(path))
        return model


@dataclass
class ArModel:
    vocab: Vocab
    encoder_config: EncoderConfig
    config: ArConfig
    encoder_params: EncoderParams
    params: ArParams

    kind = "ar"

    @staticmethod
    def create(rng: np.random.Generator, vocab: Vocab, encoder_config: EncoderConfig,
               config: ArConfig) -> "ArModel":
        return ArModel(
            vocab=vocab,
            encoder_config=encoder_config,
            config=config,
            encoder_params=EncoderParams.create(rng, vocab.size, encoder_config),
            params=ArParams.create(rng, encoder_config.d_model, config),
        )

    def named_params(self) -> dict[str, Tensor]:
        return {**self.encoder_params.named(), **self.params.named()}

    def prepare(self, ex: Example) -> ModelInput:
        return build_input(ex, self.vocab, max_len=self.encoder_config.max_len,
                           digit_tokens=self.encoder_config.digit_tokens)

    def loss(self, model_input: ModelInput, ex: Example) -> Tensor:
        if ex.gold_program is None:
            raise InputError(f"example {ex.id} has no gold program; the sequential "
                             "decoder only trains on program golds")
        gold = ar_mod.gold_token_sequence(ex.gold_program, model_input)
        enc = encode(model_input, self.encoder_params)
        return ar_mod.teacher_forced_loss(enc, model_input, gold, self.params,
                                          self.config)

    def decode(self, model_input: ModelInput) -> ar_mod.ArDecodeResult:
        enc = encode(model_input, self.encoder_params)
        return ar_mod.greedy_decode(enc, model_input, self.params, self.config)

    def save(self, path, extra_meta: dict | None = None) -> None:
        meta = {
            "vocab": self.vocab.to_dict(),
            "encoder": self.encoder_config.to_dict(),
            "ar": self.config.to_dict(),
        }
        if extra_meta:
            meta.update(extra_meta)
        save_checkpoint(path, "ar", self.named_params(), meta)

    @staticmethod
    def load(path) -> "ArModel":
        kind, arrays, meta = load_checkpoint(path)
        if kind != "ar":
            raise CheckpointError(f"{path}: expected an ar checkpoint, found {kind!r}")
        model = ArModel.create(
            np.random.default_rng(0),
            Vocab.from_dict(meta["vocab"]),
            EncoderConfig.from_dict(meta["encoder"]),
            ArConfig.from_dict(meta["ar"]),
        )
        _assign_named(model.named_params(), arrays, str(path))
        return model


Model = NapgModel | ArModel


def load_model(path) -> Model:
    kind, _, _ = load_checkpoint(path)
    if kind == "napg":
        return NapgModel.load(path)
    if kind == "ar":
        return ArModel.load(path)
    raise CheckpointError(f"{path}: unknown model kind {kind!r}")


def _span_text(ex: Example) -> str:
    tokens = ex.question_tokens + ex.sentence_tokens
    return " ".join(tokens[p] for p in (ex.gold_span or ()))


def _predicted_program(decoded) -> tuple:
    """Normalize a decode result to (program | None, span_text | None)."""
    if isinstance(decoded, ProgramPrediction):
        return decoded.program, None
    if isinstance(decoded, SpanPrediction):
        return None, decoded.text
    return decoded.program, None  # autoregressive result, never a span


def score_example(ex: Example, decoded, allow_commutative: bool = False
                  ) -> tuple[ExampleResult, dict]:
    program, span_text = _predicted_program(decoded)
    if program is not None:
        try:
            value = execute_program(program)
            answer_text = render_answer(value)
        except ProgramExecutionError:
            value, answer_text = None, ""
        predicted = serialize_program(program)
    else:
        value = None
        answer_text = span_text or ""
        predicted = answer_text

    em = exact_match(answer_text, ex.answer)
    f1 = numeracy_f1(answer_text, ex.answer)
    exe_ok = prog_ok = None
    if ex.gold_program is not None:
        gold_value = execute_program(ex.gold_program)
        exe_ok = value is not None and exe_acc(value, gold_value)
        prog_ok = program is not None and prog_acc(program, ex.gold_program,
                                                   allow_commutative=allow_commutative)
    result = ExampleResult(step_count=ex.step_count, em=em, f1=f1,
                           exe_ok=exe_ok, prog_ok=prog_ok)
    record = {
        "id": ex.id,
        "prediction": predicted,
        "answer": answer_text,
        "gold_answer": ex.answer,
        "em": em,
        "f1": f1,
        "exe_ok": exe_ok,
        "prog_ok": prog_ok,
        "step_count": ex.step_count,
    }
    return result, record


def _oracle_prediction(ex: Example) -> Prediction:
    if ex.gold_program is not None:
        return ProgramPrediction(program=ex.gold_program, length=len(ex.gold_program))
    return SpanPrediction(positions=ex.gold_span or (), text=_span_text(ex))


def evaluate(model: Model | None, examples: list[Example],
             model_inputs: list[ModelInput] | None = None,
             oracle: bool = False, allow_commutative: bool = False
             ) -> tuple[MetricsReport, list[dict]]:
    """Decode every example and aggregate metrics.

    oracle=True scores the gold annotations against themselves (upper bound,
    no model required).
    """
    results = []
    records = []
    for i, ex in enumerate(examples):
        if oracle:
            decoded = _oracle_prediction(ex)
        else:
            assert model is not None
            model_input = model_inputs[i] if model_inputs is not None \
                else model.prepare(ex)
            decoded = model.decode(model_input)
        result, record = score_example(ex, decoded, allow_commutative=allow_commutative)
        results.append(result)
        records.append(record)
    return aggregate(results), records


def load_split(dataset_dir, name: str) -> list[Example]:
    path = Path(dataset_dir) / f"{name}.jsonl"
    if not path.exists():
        raise ConfigError(f"dataset split not found: {path}")
    return load_jsonl(path)


def create_model(config: RunConfig, vocab: Vocab) -> Model:
    rng = np.random.default_rng(config.seed)
    if config.model == "napg":
        return NapgModel.create(rng, vocab, config.encoder, config.napg)
    return ArModel.create(rng, vocab, config.encoder, config.ar)


@dataclass
class TrainResult:
    model: Model
    history: list[dict]
    best_epoch: int
    best_report: MetricsReport
    best_path: str
    last_path: str
    log_path: str

    def to_dict(self) -> dict:
        return {
            "best_epoch": self.best_epoch,
            "best_dev": self.best_report.to_dict(),
            "best_checkpoint": self.best_path,
            "last_checkpoint": self.last_path,
            "training_log": self.log_path,
            "history": self.history,
        }


def _selection_metric(report: MetricsReport) -> float:
    return report.prog_acc if report.n_program > 0 else report.em


def _batched(order: np.ndarray, size: int):
    for start in range(0, len(order), size):
        yield order[start:start + size]


def train_model(config: RunConfig,
                stop_when: Callable[[dict], bool] | None = None,
                log: Callable[[str], None] | None = None) -> TrainResult:
    """Seeded end-to-end training with per-epoch dev metrics and best-dev checkpoints.

    stop_when sees each epoch's history row and may end training early;
    the best checkpoint so far is still the one reported.
    """
    train_examples = load_split(config.dataset_dir, "train")
    dev_examples = load_split(config.dataset_dir, config.eval_split)
    if not train_examples:
        raise ConfigError("training split is empty")

    n_max = config.napg.n_max_steps if config.model == "napg" else config.ar.n_max_steps
    deepest = max((ex.step_count for ex in train_examples + dev_examples), default=0)
    if deepest > n_max:
        raise ConfigError(
            f"dataset contains {deepest}-step programs but the model allows {n_max}")

    vocab = build_vocab(train_examples, n_max)
    model = create_model(config, vocab)

    try:
        train_inputs = [model.prepare(ex) for ex in train_examples]
        dev_inputs = [model.prepare(ex) for ex in dev_examples]
        if config.model == "ar":
            for ex in train_examples:
                if ex.gold_program is None:
                    raise ConfigError(f"example {ex.id} has no gold program; "
                                      "the sequential decoder cannot train on spans")
    except InputError as exc:
        raise ConfigError(str(exc)) from exc

    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    best_path = out_dir / "best.json"
    last_path = out_dir / "last.json"
    log_path = out_dir / "training_log.csv"
    (out_dir / "config.json").write_text(json.dumps(config.to_dict(), indent=2) + "\n")

    rng = np.random.default_rng(config.seed)
    optimizer = Adam(model.named_params(), lr=config.learning_rate,
                     weight_decay=config.weight_decay)

    history: list[dict] = []
    best_epoch = 0
    best_score = -1.0
    best_report: MetricsReport | None = None

    for epoch in range(1, config.epochs + 1):
        started = time.perf_counter()
        epoch_loss = 0.0
        order = rng.permutation(len(train_examples))
        for batch in _batched(order, config.batch_size):
            optimizer.zero_grad()
            scale = 1.0 / len(batch)
            for idx in batch:
                ex = train_examples[idx]
                loss = model.loss(train_inputs[idx], ex)
                value = float(loss.data)
                if not np.isfinite(value):
                    raise TrainDivergedError(
                        f"loss became {value} at epoch {epoch} on example {ex.id}")
                epoch_loss += value
                (loss * scale).backward()
            optimizer.step()
        train_loss = epoch_loss / len(train_examples)

        report, _ = evaluate(model, dev_examples, model_inputs=dev_inputs)
        seconds = time.perf_counter() - started
        row = {
            "epoch": epoch,
            "train_loss": train_loss,
            "dev_em": report.em,
            "dev_f1": report.f1,
            "dev_exe_acc": report.exe_acc,
            "dev_prog_acc": report.prog_acc,
            "seconds": seconds,
        }
        history.append(row)
        if log is not None:
            log(f"epoch {epoch}: loss {train_loss:.4f} "
                f"dev prog_acc {report.prog_acc:.3f} em {report.em:.3f} "
                f"({seconds:.1f}s)")

        score = _selection_metric(report)
        if score > best_score:
            best_score = score
            best_epoch = epoch
            best_report = report
            model.save(best_path, {"epoch": epoch, "dev": report.to_dict()})
        model.save(last_path, {"epoch": epoch, "dev": report.to_dict()})

        if stop_when is not None and stop_when(row):
            break

    with open(log_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(history[0].keys()))
        writer.writeheader()
        writer.writerows(history)

    assert best_report is not None
    return TrainResult(model=model, history=history, best_epoch=best_epoch,
                       best_report=best_report, best_path=str(best_path),
                       last_path=str(last_path), log_path=str(log_path))
