# Copyright (c) 2021 Leiden University Medical Center
#
# Permission is hereby granted, free of charge, to any person obtaining a copy
# of this software and associated documentation files (the "Software"), to deal
# in the Software without restriction, including without limitation the rights
# to use, copy, modify, merge, publish, distribute, sublicense, and/or sell
# copies of the Software, and to permit persons to whom the Software is
# furnished to do so, subject to the following conditions:
#
# The above copyright notice and this permission notice shall be included in
# all copies or substantial portions of the Software.
#
# THE SOFTWARE IS PROVIDED "AS IS", WITHOUT WARRANTY OF ANY KIND, EXPRESS OR
# IMPLIED, INCLUDING BUT NOT LIMITED TO THE WARRANTIES OF MERCHANTABILITY,
# FITNESS FOR A PARTICULAR PURPOSE AND NONINFRINGEMENT. IN NO EVENT SHALL THE
# AUTHORS OR COPYRIGHT HOLDERS BE LIABLE FOR ANY CLAIM, DAMAGES OR OTHER
# LIABILITY, WHETHER IN AN ACTION OF CONTRACT, TORT OR OTHERWISE, ARISING FROM,
# OUT OF OR IN CONNECTION WITH THE SOFTWARE OR THE USE OR OTHER DEALINGS IN THE
# SOFTWARE.

"""Command line interface for the credit rating pipeline.

Exit status is 0 on success, 2 for usage and input errors and 1 for
anything else.
"""

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

import pandas as pd

from .c2g import build_graph, is_connected
from .config import (PipelineConfig, apply_environment, dump_config,
                     load_config)
from .data import (FeatureSchema, ProcessedRecord, RATINGS, fit_schema,
                   generate_synthetic, load_csv,
                   load_processed_csv, load_schema, preprocess,
                   preprocess_all, save_schema, smote, stratified_split,
                   write_processed_csv)
from .errors import (CheckpointError, ConfigError, ContractViolation,
                     DataError)
from .evaluation import (baseline_logreg, baseline_mlp, evaluate,
                         format_table, predict_all)
from .model import load_checkpoint, save_checkpoint
from .train import (GraphCache, effective_model_config, fit,
                    write_history_csv)

logger = logging.getLogger(__name__)

EXIT_INTERNAL_ERROR = 1
EXIT_USAGE_ERROR = 2

#: Errors caused by what the user passed in, as opposed to bugs.
INPUT_ERRORS = (ConfigError, DataError, ContractViolation, CheckpointError,
                OSError)


def _available_cpus() -> int:
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:  # pragma: no cover
        return os.cpu_count() or 1


def _float_list(text: str) -> List[float]:
    try:
        return [float(part) for part in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"expected comma separated numbers, got {text!r}")


def _common_options() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="TOML",
                        help="Pipeline configuration file.")
    common.add_argument("--seed", type=int,
                        help="Random seed. Overrides the configuration file "
                             "and the CCRGNN_SEED environment variable.")
    common.add_argument("--threads", type=int, default=_available_cpus(),
                        help="Maximum number of worker threads. Default: "
                             "the number of available cores.")
    verbosity = common.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="count", default=0,
                           help="Report progress. Repeat for debug output.")
    verbosity.add_argument("-q", "--quiet", action="store_true",
                           help="Only report errors.")
    return common


def _argument_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ccrgnn")
    parser.description = (
        "Corporate credit rating with graph attention networks. Encode "
        "corporate records, train CCR-GNN, evaluate it against logistic "
        "regression and MLP baselines, and inspect the feature graphs.")
    common = _common_options()
    subparsers = parser.add_subparsers(dest="command", metavar="COMMAND")
    subparsers.required = True

    synth = subparsers.add_parser(
        "synth", parents=[common],
        help="Generate a synthetic encoded dataset.")
    synth.add_argument("-o", "--output", required=True,
                       help="Processed CSV to write.")
    synth.add_argument("--schema-output",
                       help="Schema JSON to write. Default: next to the "
                            "output with a .schema.json suffix.")
    synth.add_argument("-n", type=int, help="Number of records.")
    synth.add_argument("-d", type=int, help="Number of features.")
    synth.add_argument("-m", type=int, help="Number of classes.")
    synth.add_argument("--separation", type=float,
                       help="Spread of the class prototypes.")
    synth.add_argument("--noise", type=float,
                       help="Standard deviation of the sample noise.")
    synth.add_argument("--imbalance", type=_float_list,
                       help="Comma separated class proportions.")

    prep = subparsers.add_parser(
        "preprocess", parents=[common],
        help="Clean and encode a raw CSV file.")
    prep.add_argument("input", help="Raw CSV with a 'rating' column.")
    prep.add_argument("-o", "--output", required=True,
                      help="Processed CSV to write. With --test-output, "
                           "this receives the training split.")
    prep.add_argument("--schema",
                      help="Apply this schema instead of fitting one.")
    prep.add_argument("--schema-output",
                      help="Where to write the fitted schema. Default: next "
                           "to the output with a .schema.json suffix.")
    prep.add_argument("--drop-fraction", type=float,
                      help="Drop features missing in more than this "
                           "fraction of records.")
    prep.add_argument("--test-output",
                      help="Split off a stratified test set and write it "
                           "here. The training split is SMOTE balanced "
                           "unless disabled in the configuration.")

    train = subparsers.add_parser(
        "train", parents=[common], help="Train CCR-GNN.")
    train.add_argument("--train", dest="train_csv",
                       help="Processed training CSV.")
    train.add_argument("-o", "--output",
                       help="Checkpoint to write. Default: model.ckpt in "
                            "the output directory.")
    train.add_argument("--history",
                       help="History CSV to write. Default: history.csv in "
                            "the output directory.")
    train.add_argument("--epochs", type=int)
    train.add_argument("--batch-size", type=int)
    train.add_argument("--lr", type=float, help="Initial learning rate.")

    evaluation = subparsers.add_parser(
        "eval", parents=[common], help="Evaluate a checkpoint.")
    evaluation.add_argument("checkpoint")
    evaluation.add_argument("--test", dest="test_csv",
                            help="Processed test CSV.")
    evaluation.add_argument("-o", "--output",
                            help="Write the metrics as JSON to this file.")

    predict = subparsers.add_parser(
        "predict", parents=[common],
        help="Predict ratings and class probabilities.")
    predict.add_argument("checkpoint")
    predict.add_argument("input", help="Processed CSV.")
    predict.add_argument("-o", "--output",
                         help="CSV to write. Default: standard output.")

    graph = subparsers.add_parser(
        "graph-dump", parents=[common],
        help="Write the feature graph of one record.")
    graph.add_argument("input", help="Processed CSV, or raw CSV together "
                                     "with --schema.")
    graph.add_argument("--record-id", required=True)
    graph.add_argument("--schema", help="Schema to encode a raw CSV with.")
    graph.add_argument("--checkpoint",
                       help="Take the threshold step from this checkpoint.")
    graph.add_argument("--step", type=float, help="Threshold step.")
    graph.add_argument("--format", choices=("dot", "json"), default="dot")
    graph.add_argument("-o", "--output",
                       help="File to write. Default: standard output.")

    bench = subparsers.add_parser(
        "bench", parents=[common],
        help="Compare CCR-GNN with logistic regression and an MLP.")
    bench.add_argument("--train", dest="train_csv",
                       help="Processed training CSV. Synthesised when "
                            "neither --train nor --test is given.")
    bench.add_argument("--test", dest="test_csv",
                       help="Processed test CSV.")
    bench.add_argument("--epochs", type=int,
                       help="CCR-GNN training epochs.")
    bench.add_argument("--baseline-epochs", type=int)
    bench.add_argument("-o", "--output",
                       help="JSON report to write. Default: bench.json in "
                            "the output directory.")

    dump = subparsers.add_parser(
        "dump-config", parents=[common],
        help="Write the effective configuration as TOML.")
    dump.add_argument("-o", "--output",
                      help="File to write. Default: standard output.")
    return parser


def _configure_logging(args: argparse.Namespace):
    if args.quiet:
        level = logging.ERROR
    elif args.verbose >= 2:
        level = logging.DEBUG
    elif args.verbose == 1:
        level = logging.INFO
    else:
        level = logging.WARNING
    logging.basicConfig(
        level=level, stream=sys.stderr,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def _resolve_config(args: argparse.Namespace) -> PipelineConfig:
    config = (load_config(args.config) if args.config
              else PipelineConfig())
    config = apply_environment(config)
    if args.seed is not None:
        config = config.with_seed(args.seed)
    if args.threads < 1:
        raise ConfigError("--threads must be at least 1")
    config.train = dataclasses.replace(config.train, workers=args.threads)
    return config


def _write_text(text: str, path: Optional[str]):
    if path is None:
        sys.stdout.write(text)
    else:
        with open(path, "wt", encoding="utf-8") as out_h:
            out_h.write(text)


def _default_schema_path(output: str) -> str:
    return str(Path(output).with_suffix(".schema.json"))


def _out_path(config: PipelineConfig, given: Optional[str],
              name: str) -> str:
    if given is not None:
        return given
    return os.path.join(config.data.out_dir, name)


def _required_path(given: Optional[str], configured: Optional[str],
                   flag: str) -> str:
    path = given if given is not None else configured
    if path is None:
        raise ConfigError(f"No input file: pass {flag} or set it in the "
                          f"configuration file")
    return path


def _balance(records: List[ProcessedRecord], config: PipelineConfig
             ) -> List[ProcessedRecord]:
    if not config.schema.smote:
        return records
    return smote(records, config.schema.smote_k, config.seed)


def cmd_synth(args: argparse.Namespace, config: PipelineConfig):
    options = config.synth
    overrides = {key: value for key, value in
                 (("n", args.n), ("d", args.d), ("m", args.m),
                  ("separation", args.separation), ("noise", args.noise),
                  ("imbalance", args.imbalance))
                 if value is not None}
    options = dataclasses.replace(options, **overrides)
    records = generate_synthetic(options.n, options.d, options.m,
                                 options.separation, options.imbalance,
                                 config.seed, options.noise)
    write_processed_csv(records, args.output)
    schema_path = args.schema_output or _default_schema_path(args.output)
    save_schema(FeatureSchema.describe(records), schema_path)
    logger.info("wrote %d records to %s", len(records), args.output)


def cmd_preprocess(args: argparse.Namespace, config: PipelineConfig):
    raw = load_csv(args.input)
    if args.schema:
        schema = load_schema(args.schema)
    else:
        fraction = (args.drop_fraction if args.drop_fraction is not None
                    else config.schema.missing_drop_fraction)
        schema = fit_schema(raw, fraction)
        save_schema(schema, args.schema_output or
                    _default_schema_path(args.output))
    records = preprocess_all(raw, schema)
    if args.test_output:
        train, test = stratified_split(records, config.schema.test_fraction,
                                       config.seed)
        write_processed_csv(_balance(train, config), args.output)
        write_processed_csv(test, args.test_output)
    else:
        write_processed_csv(records, args.output)


def cmd_train(args: argparse.Namespace, config: PipelineConfig):
    overrides = {key: value for key, value in
                 (("epochs", args.epochs), ("batch_size", args.batch_size),
                  ("initial_lr", args.lr))
                 if value is not None}
    train_config = dataclasses.replace(config.train, **overrides)
    records = load_processed_csv(
        _required_path(args.train_csv, config.data.train, "--train"))
    params, history = fit(records, train_config, config.model)
    model_config = effective_model_config(config.model, train_config,
                                          records[0].x.shape[0])
    save_checkpoint(_out_path(config, args.output, "model.ckpt"), params,
                    model_config, train_config.seed, len(history))
    write_history_csv(history, _out_path(config, args.history,
                                         "history.csv"))


def cmd_eval(args: argparse.Namespace, config: PipelineConfig):
    checkpoint = load_checkpoint(args.checkpoint)
    records = load_processed_csv(
        _required_path(args.test_csv, config.data.test, "--test"))
    report = evaluate(checkpoint.params, checkpoint.config, records,
                      workers=args.threads)
    sys.stdout.write(format_table({"CCR-GNN": report}))
    if args.output:
        _write_text(json.dumps(report.to_json(), indent=2) + "\n",
                    args.output)


def _class_names(num_classes: int) -> Sequence[str]:
    if num_classes == len(RATINGS):
        return RATINGS
    return [str(i) for i in range(num_classes)]


def cmd_predict(args: argparse.Namespace, config: PipelineConfig):
    checkpoint = load_checkpoint(args.checkpoint)
    records = load_processed_csv(args.input)
    probabilities = predict_all(checkpoint.params, checkpoint.config,
                                records, workers=args.threads)
    names = _class_names(checkpoint.config.num_classes)
    labels = np.argmax(probabilities, axis=1)
    frame = pd.DataFrame(probabilities,
                         columns=[f"p_{name}" for name in names])
    frame.insert(0, "id", [record.record_id for record in records])
    frame.insert(1, "label_index", labels)
    frame.insert(2, "rating", [names[label] for label in labels])
    _write_text(frame.to_csv(index=False), args.output)


def _find_record(args: argparse.Namespace) -> ProcessedRecord:
    if args.schema:
        schema = load_schema(args.schema)
        for raw in load_csv(args.input):
            if raw.id == args.record_id:
                return preprocess(raw, schema)
    else:
        for record in load_processed_csv(args.input):
            if record.record_id == args.record_id:
                return record
    raise DataError(f"No record with id {args.record_id!r} in "
                    f"{args.input}")


def cmd_graph_dump(args: argparse.Namespace, config: PipelineConfig):
    if args.step is not None:
        step = args.step
    elif args.checkpoint:
        step = load_checkpoint(args.checkpoint).config.c2g_step
    else:
        step = config.model.c2g_step
    record = _find_record(args)
    graph = build_graph(record.x, step)
    if not is_connected(graph.adjacency):
        raise AssertionError("Graph construction returned a disconnected "
                             "graph")
    if args.format == "json":
        text = graph.to_json() + "\n"
    else:
        names = (load_schema(args.schema).feature_names() if args.schema
                 else None)
        text = graph.to_dot(names)
    _write_text(text, args.output)


def cmd_bench(args: argparse.Namespace, config: PipelineConfig):
    if args.train_csv or args.test_csv or config.data.train:
        train = load_processed_csv(
            _required_path(args.train_csv, config.data.train, "--train"))
        test = load_processed_csv(
            _required_path(args.test_csv, config.data.test, "--test"))
    else:
        options = config.synth
        records = generate_synthetic(options.n, options.d, options.m,
                                     options.separation, options.imbalance,
                                     config.seed, options.noise)
        train, test = stratified_split(records, config.schema.test_fraction,
                                       config.seed)
        train = _balance(train, config)
    train_config = config.train
    if args.epochs is not None:
        train_config = dataclasses.replace(train_config, epochs=args.epochs)
    baseline_config = config.baseline
    if args.baseline_epochs is not None:
        baseline_config = dataclasses.replace(baseline_config,
                                              epochs=args.baseline_epochs)
    cache = GraphCache(config.model.c2g_step)
    params, _ = fit(train, train_config, config.model, cache=cache)
    model_config = effective_model_config(config.model, train_config,
                                          train[0].x.shape[0])
    reports = {
        "CCR-GNN": evaluate(params, model_config, test, cache,
                            args.threads),
        "LR": baseline_logreg(train, test, baseline_config),
        "MLP": baseline_mlp(train, test, baseline_config),
    }
    sys.stdout.write(format_table(reports))
    document = {name: report.to_json() for name, report in reports.items()}
    _write_text(json.dumps(document, indent=2) + "\n",
                _out_path(config, args.output, "bench.json"))


def cmd_dump_config(args: argparse.Namespace, config: PipelineConfig):
    _write_text(dump_config(config), args.output)


COMMANDS = {
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "graph-dump": cmd_graph_dump,
    "bench": cmd_bench,
    "dump-config": cmd_dump_config,
}


def main(argv: Optional[Sequence[str]] = None):
    args = _argument_parser().parse_args(argv)
    _configure_logging(args)
    try:
        config = _resolve_config(args)
        COMMANDS[args.command](args, config)
    except INPUT_ERRORS as error:
        print(f"ccrgnn {args.command}: error: {error}", file=sys.stderr)
        sys.exit(EXIT_USAGE_ERROR)
    except Exception as error:
        logger.debug("internal error", exc_info=True)
        print(f"ccrgnn {args.command}: internal error: {error}",
              file=sys.stderr)
        sys.exit(EXIT_INTERNAL_ERROR)


if __name__ == "__main__":  # pragma: no cover
    main()
