"""Decode-speed benchmark.

Timing covers program generation only: every example is encoded once up front,
outside the clock. The non-autoregressive decoder is timed on its full decode;
the autoregressive baseline is paced to exactly six tokens per gold step so its
measured work tracks program length deterministically even with untrained
weights. Warmup decodes are discarded, repeats are averaged per example.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

from . import ar as ar_mod
from . import autodiff as ad
from . import napg as napg_mod
from .data import Example
from .encoder import encode
from .train import ConfigError, Model, NapgModel


@dataclass
class LengthBucket:
    step_count: int
    count: int
    mean_seconds: float

    def to_dict(self) -> dict:
        return {"step_count": self.step_count, "count": self.count,
                "mean_seconds": self.mean_seconds}


@dataclass
class BenchReport:
    decoder: str
    n_max_steps: int
    n_examples: int
    repeats: int
    warmup: int
    total_seconds: float            # mean over repeats, summed over examples
    examples_per_second: float
    per_length: list[LengthBucket]  # ascending step count
    repeat_totals: list[float]

    def to_dict(self) -> dict:
        return {
            "decoder": self.decoder,
            "n_max_steps": self.n_max_steps,
            "n_examples": self.n_examples,
            "repeats": self.repeats,
            "warmup": self.warmup,
            "total_seconds": self.total_seconds,
            "examples_per_second": self.examples_per_second,
            "per_length": [bucket.to_dict() for bucket in self.per_length],
            "repeat_totals": self.repeat_totals,
        }

    def bucket_seconds(self) -> dict[int, float]:
        return {b.step_count: b.mean_seconds for b in self.per_length}


def _decode_fn(model: Model, enc, model_input, step_count: int):
    if isinstance(model, NapgModel):
        return lambda: napg_mod.decode(enc, model_input, model.params, model.config)
    budget = 6 * step_count
    return lambda: ar_mod.paced_decode(enc, model_input, model.params, model.config,
                                       budget)


def bench_decode(model: Model, examples: list[Example], repeats: int = 3,
                 warmup: int = 2) -> BenchReport:
    """Wall-clock decode times per example, bucketed by gold program length."""
    if repeats < 1:
        raise ConfigError("repeats must be at least 1")
    for ex in examples:
        if ex.gold_program is None:
            raise ConfigError(f"example {ex.id} has no gold program; benchmark "
                              "datasets must be program-only so lengths are defined")

    runners = []
    with ad.no_grad():
        for ex in examples:
            model_input = model.prepare(ex)
            enc = encode(model_input, model.encoder_params)
            runners.append(_decode_fn(model, enc, model_input, ex.step_count))

    for runner in runners[:warmup]:
        runner()

    elapsed = [0.0] * len(examples)
    repeat_totals = []
    for _ in range(repeats):
        total = 0.0
        for i, runner in enumerate(runners):
            start = time.perf_counter()
            runner()
            dt = time.perf_counter() - start
            elapsed[i] += dt
            total += dt
        repeat_totals.append(total)

    means = [t / repeats for t in elapsed]
    by_length: dict[int, list[float]] = {}
    for ex, mean in zip(examples, means):
        by_length.setdefault(ex.step_count, []).append(mean)
    per_length = [
        LengthBucket(step_count=k, count=len(v), mean_seconds=sum(v) / len(v))
        for k, v in sorted(by_length.items())
    ]
    total_seconds = sum(means)
    return BenchReport(
        decoder=model.kind,
        n_max_steps=model.config.n_max_steps,
        n_examples=len(examples),
        repeats=repeats,
        warmup=min(warmup, len(examples)),
        total_seconds=total_seconds,
        examples_per_second=len(examples) / total_seconds if total_seconds > 0 else 0.0,
        per_length=per_length,
        repeat_totals=repeat_totals,
    )


def speedup(baseline: BenchReport, contender: BenchReport) -> float:
    """How many times faster the contender decodes the same dataset."""
    if contender.total_seconds <= 0:
        raise ValueError("contender total time must be positive")
    return baseline.total_seconds / contender.total_seconds


def compare(napg_report: BenchReport, ar_report: BenchReport) -> dict:
    return {
        "napg": napg_report.to_dict(),
        "ar": ar_report.to_dict(),
        "speedup": speedup(ar_report, napg_report),
    }
