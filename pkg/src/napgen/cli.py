"""Command-line interface.

Subcommands: gen-data, train, eval, exec, bench. Reports are JSON, printed to
stdout or written to --out. Exit codes: 0 success, 2 usage or configuration
problems, 1 runtime failures. NAPGEN_LOG controls verbosity (debug, info,
warning; default info), and log lines go to stderr so stdout stays parseable.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .autodiff import CheckpointError
from .data import DatasetError, GenSpec, GenSpecError, generate_dataset, load_jsonl, save_jsonl
from .dsl import (
    ProgramError,
    ProgramExecutionError,
    execute_text,
    render_answer,
)
from .encoder import InputError
from .metrics import step_bucket
from .train import (
    ConfigError,
    RunConfig,
    TrainDivergedError,
    evaluate,
    load_model,
    train_model,
)

logger = logging.getLogger("napgen")


def _setup_logging() -> None:
    name = os.environ.get("NAPGEN_LOG", "info").upper()
    level = getattr(logging, name, logging.INFO)
    logging.basicConfig(level=level, stream=sys.stderr, format="%(message)s")


def _emit(report: dict, out: str | None) -> None:
    text = json.dumps(report, indent=2)
    if out:
        Path(out).write_text(text + "\n")
        logger.info("report written to %s", out)
    else:
        print(text)


def _load_json(path: str) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    return doc


def cmd_gen_data(args) -> int:
    spec_doc = _load_json(args.config) if args.config else {}
    if args.seed is not None:
        spec_doc["seed"] = args.seed  # the flag wins over the config file
    spec = GenSpec.from_dict(spec_doc)
    splits = generate_dataset(spec)
    out_dir = Path(args.out or "data")
    out_dir.mkdir(parents=True, exist_ok=True)

    summary: dict = {"out_dir": str(out_dir), "seed": spec.seed, "splits": {}}
    for name, examples in splits.items():
        path = out_dir / f"{name}.jsonl"
        save_jsonl(path, examples)
        histogram: dict[str, int] = {}
        for ex in examples:
            bucket = step_bucket(ex.step_count)
            histogram[bucket] = histogram.get(bucket, 0) + 1
        summary["splits"][name] = {
            "path": str(path),
            "n_examples": len(examples),
            "step_histogram": dict(sorted(histogram.items())),
        }
        logger.info("%s: %d examples -> %s", name, len(examples), path)
    _emit(summary, None if args.out_report is None else args.out_report)
    return 0


def cmd_train(args) -> int:
    config = RunConfig.from_json(args.config)
    if args.seed is not None:
        config.seed = args.seed
    if args.out_dir is not None:
        config.out_dir = args.out_dir

    result = train_model(config, log=logger.info)
    report = result.to_dict()
    report["model"] = config.model

    if args.plots:
        from .plots import ensure_dir, training_curve_chart

        plot_dir = ensure_dir(args.plots)
        training_curve_chart(result.history,
                             plot_dir / "training_curves.png",
                             plot_dir / "training_curves.csv")
        report["plots"] = str(plot_dir)
    _emit(report, args.out)
    return 0


def cmd_eval(args) -> int:
    if not args.oracle and not args.checkpoint:
        raise ConfigError("eval needs --checkpoint (or --oracle)")
    examples = load_jsonl(args.dataset)
    model = load_model(args.checkpoint) if args.checkpoint else None
    report, records = evaluate(model, examples, oracle=args.oracle,
                               allow_commutative=args.commutative)

    doc = report.to_dict()
    if args.records:
        doc["examples"] = records
    if args.plots:
        from .plots import ensure_dir, eval_bucket_chart

        plot_dir = ensure_dir(args.plots)
        eval_bucket_chart(report, plot_dir / "eval_buckets.png",
                          plot_dir / "eval_buckets.csv")
        doc["plots"] = str(plot_dir)
    _emit(doc, args.out)
    return 0


def cmd_exec(args) -> int:
    value = execute_text(args.program)
    print(render_answer(value))
    return 0


def cmd_bench(args) -> int:
    from .bench import bench_decode, compare

    napg_model = load_model(args.napg)
    ar_model = load_model(args.ar)
    if napg_model.kind != "napg" or ar_model.kind != "ar":
        raise ConfigError("--napg and --ar must point at checkpoints of those kinds")
    if napg_model.vocab.token_to_id != ar_model.vocab.token_to_id:
        raise ConfigError("checkpoints were built from different vocabularies")

    examples = load_jsonl(args.dataset)
    napg_report = bench_decode(napg_model, examples, repeats=args.repeats,
                               warmup=args.warmup)
    ar_report = bench_decode(ar_model, examples, repeats=args.repeats,
                             warmup=args.warmup)
    doc = compare(napg_report, ar_report)

    if args.plots:
        from .plots import bench_length_chart, ensure_dir

        plot_dir = ensure_dir(args.plots)
        bench_length_chart([napg_report, ar_report],
                           plot_dir / "bench_times.png",
                           plot_dir / "bench_times.csv")
        doc["plots"] = str(plot_dir)
    _emit(doc, args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="napgen",
        description="Non-autoregressive numerical program generation toolkit.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="generate a synthetic dataset")
    gen.add_argument("--config", help="generation spec JSON")
    gen.add_argument("--seed", type=int, help="overrides the spec seed")
    gen.add_argument("--out", help="output directory (default: data)")
    gen.add_argument("--out-report", help="write the summary JSON here")
    gen.set_defaults(fn=cmd_gen_data)

    train = sub.add_parser("train", help="train a model from a run config")
    train.add_argument("--config", required=True, help="run config JSON")
    train.add_argument("--seed", type=int, help="overrides the config seed")
    train.add_argument("--out-dir", help="overrides the config out_dir")
    train.add_argument("--out", help="write the training report JSON here")
    train.add_argument("--plots", help="directory for training curve PNG + CSV")
    train.set_defaults(fn=cmd_train)

    ev = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    ev.add_argument("--checkpoint", help="model checkpoint JSON")
    ev.add_argument("--dataset", required=True, help="dataset JSONL file")
    ev.add_argument("--oracle", action="store_true",
                    help="score gold annotations against themselves")
    ev.add_argument("--commutative", action="store_true",
                    help="count operand-swapped add/multiply steps as correct")
    ev.add_argument("--records", action="store_true",
                    help="include per-example records in the report")
    ev.add_argument("--out", help="write the report JSON here")
    ev.add_argument("--plots", help="directory for bucket chart PNG + CSV")
    ev.set_defaults(fn=cmd_eval)

    ex = sub.add_parser("exec", help="execute one program string")
    ex.add_argument("program", help='e.g. "add(390.0,268.0), add(#0,77.0)"')
    ex.set_defaults(fn=cmd_exec)

    bench = sub.add_parser("bench", help="decode-speed benchmark, NAPG vs AR")
    bench.add_argument("--napg", required=True, help="non-autoregressive checkpoint")
    bench.add_argument("--ar", required=True, help="autoregressive checkpoint")
    bench.add_argument("--dataset", required=True, help="dataset JSONL file")
    bench.add_argument("--repeats", type=int, default=3)
    bench.add_argument("--warmup", type=int, default=2)
    bench.add_argument("--out", help="write the benchmark JSON here")
    bench.add_argument("--plots", help="directory for time-vs-length PNG + CSV")
    bench.set_defaults(fn=cmd_bench)
    return parser


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, GenSpecError, DatasetError, CheckpointError, InputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ProgramExecutionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ProgramError as exc:
        # covers parse and validation problems in exec and dataset golds
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TrainDivergedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
