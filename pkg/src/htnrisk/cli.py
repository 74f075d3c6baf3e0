"""Command-line pipeline: generate, cohort, featurize, train, evaluate, attribute.

Each stage reads files, writes files, and records a manifest.json with
content hashes of its inputs and outputs, so a rerun with the same seed
and config is checkable byte-for-byte. Exit codes: 0 success, 1 usage
error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from .artifacts import read_json, write_json, write_manifest
from .cohort import (
    DEFAULT_SPLIT_FRACTIONS,
    HORIZON_DAYS,
    cohort_from_dict,
    cohort_to_dict,
    select_cohort,
    write_exclusion_report,
)
from .ehr_core import DataError, merge_patient_timeline, parse_table, write_error_report
from .nnet import NumericalError

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

TABLE_KINDS = ("encounters", "medications", "labs", "diagnoses")


class _Parser(argparse.ArgumentParser):
    """argparse exits with status 2 on usage errors; this pipeline
    reserves 2 for data errors, so usage failures are remapped to 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: usage: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_cohort(path):
    return cohort_from_dict(read_json(path))


# -- generate -------------------------------------------------------------------

def cmd_generate(args) -> int:
    from .synth import GeneratorConfig, generate_cohort, generator_config_from_file, write_cohort

    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.patients is not None:
        overrides["n_patients"] = args.patients
    if args.config:
        config = generator_config_from_file(args.config, overrides)
    else:
        config = GeneratorConfig(**overrides)
    if config.n_patients <= 0:
        raise DataError("empty cohort: n_patients must be positive")
    out = _out_dir(args)
    tables = generate_cohort(config)
    paths = write_cohort(tables, out)
    write_manifest(
        out,
        "generate",
        inputs={"config": args.config} if args.config else {},
        outputs={p.stem: p for p in paths},
        config=asdict(config),
        seed=config.seed,
    )
    print(f"generate: wrote {len(tables.encounters)} encounters for {config.n_patients} patients to {out}")
    return EXIT_OK


# -- cohort ---------------------------------------------------------------------

def cmd_cohort(args) -> int:
    data_dir = Path(args.data)
    events = {}
    row_errors = []
    for kind in TABLE_KINDS:
        parsed, errors = parse_table(data_dir / f"{kind}.csv", kind)
        events[kind] = parsed
        row_errors.extend(errors)
    timelines, merge_stats = merge_patient_timeline(
        events["encounters"], events["medications"], events["labs"], events["diagnoses"]
    )
    fractions = tuple(float(f) for f in args.fractions.split(","))
    if len(fractions) != 3:
        raise ValueError(f"expected 3 comma-separated fractions, got {args.fractions!r}")
    cohort = select_cohort(
        timelines,
        seed=args.seed,
        fractions=fractions,
        horizon_days=args.horizon,
        fiscal_year_start=args.fiscal_year_start,
    )
    out = _out_dir(args)
    samples_path = out / "samples.json"
    write_json(samples_path, cohort_to_dict(cohort))
    exclusions_path = out / "exclusions.csv"
    write_exclusion_report(cohort.exclusion_tally, cohort.total_patients, exclusions_path)
    errors_path = out / "row_errors.csv"
    write_error_report(row_errors, errors_path)
    write_manifest(
        out,
        "cohort",
        inputs={kind: data_dir / f"{kind}.csv" for kind in TABLE_KINDS},
        outputs={
            "samples": samples_path,
            "exclusions": exclusions_path,
            "row_errors": errors_path,
        },
        config={
            "fractions": list(fractions),
            "horizon_days": args.horizon,
            "fiscal_year_start": args.fiscal_year_start,
            "row_errors": len(row_errors),
            "dropped_medications": merge_stats.dropped_medications,
            "dropped_labs": merge_stats.dropped_labs,
            "dropped_diagnoses": merge_stats.dropped_diagnoses,
        },
        seed=args.seed,
    )
    included = len(cohort.timelines)
    print(
        f"cohort: {included} of {cohort.total_patients} patients included, "
        f"{len(cohort.samples)} samples, {len(row_errors)} row errors"
    )
    return EXIT_OK


# -- featurize ------------------------------------------------------------------

def cmd_featurize(args) -> int:
    from .featurize import (
        export_lr_csv,
        export_sequence_csv,
        fit_schema,
        schema_hash,
        schema_to_dict,
    )

    cohort = _load_cohort(args.samples)
    train_samples = cohort.samples_in("train")
    schema = fit_schema(train_samples)
    out = _out_dir(args)
    schema_path = out / "schema.json"
    write_json(schema_path, schema_to_dict(schema))
    outputs = {"schema": schema_path}
    if args.export_csv:
        seq_path = out / "sequence_features.csv"
        lr_path = out / "lr_features.csv"
        export_sequence_csv(cohort.samples, schema, seq_path)
        export_lr_csv(cohort.samples, schema, lr_path)
        outputs["sequence_features"] = seq_path
        outputs["lr_features"] = lr_path
    write_manifest(
        out,
        "featurize",
        inputs={"samples": args.samples},
        outputs=outputs,
        config={
            "n_train_samples": len(train_samples),
            "n_columns": schema.width,
            "n_lr_columns": schema.lr_width,
            "schema_hash": schema_hash(schema),
        },
        seed=0,
    )
    print(
        f"featurize: {schema.width} sequence columns, {schema.lr_width} flat columns "
        f"from {len(train_samples)} training samples"
    )
    return EXIT_OK


# -- train ----------------------------------------------------------------------

def _featurized_splits(cohort, schema, model_kind):
    from .featurize import featurize_lr, featurize_sequences

    build = featurize_lr if model_kind == "lr" else featurize_sequences
    return (
        build(cohort.samples_in("train"), schema),
        build(cohort.samples_in("validation"), schema),
    )


def cmd_train(args) -> int:
    from .featurize import schema_from_dict
    from .train import (
        TrainingDiverged,
        config_from_file,
        config_to_dict,
        default_config,
        grid_results_to_csv,
        grid_search,
        save_model,
        train_model,
    )

    cohort = _load_cohort(args.samples)
    schema = schema_from_dict(read_json(args.schema))
    overrides = {"model_kind": args.model}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.epochs is not None:
        overrides["max_epochs"] = args.epochs
    if args.config:
        config = config_from_file(args.config, overrides)
    else:
        config = default_config(args.model, seed=overrides.get("seed", 0))
        if args.epochs is not None:
            config = replace(config, max_epochs=args.epochs)
    train_data, val_data = _featurized_splits(cohort, schema, config.model_kind)
    out = _out_dir(args)
    outputs = {}
    if args.grid:
        config, results = grid_search(config, train_data, val_data)
        grid_path = out / "grid_results.csv"
        grid_results_to_csv(results, grid_path)
        outputs["grid_results"] = grid_path
    log_path = out / "train_log.csv"
    try:
        params, log = train_model(config, train_data, val_data)
    except TrainingDiverged as err:
        err.log.to_csv(log_path)
        raise
    log.to_csv(log_path)
    model_path = out / "model.json"
    save_model(
        model_path,
        config.model_kind,
        params,
        schema,
        training={
            "config": config_to_dict(config),
            "epochs_run": len(log.epochs),
            "stop_reason": log.stop_reason,
        },
    )
    outputs["model"] = model_path
    write_manifest(
        out,
        "train",
        inputs={"samples": args.samples, "schema": args.schema},
        outputs=outputs,
        config=config_to_dict(config),
        seed=config.seed,
        unhashed_outputs={"train_log": log_path},
    )
    print(
        f"train: {config.model_kind} stopped after {len(log.epochs)} epochs "
        f"({log.stop_reason}), val loss {log.epochs[-1].val_loss:.6f}"
    )
    return EXIT_OK


# -- evaluate -------------------------------------------------------------------

def cmd_evaluate(args) -> int:
    from .evaluate import carry_forward_baseline, evaluate_scores, roc_curve
    from .featurize import featurize_lr, featurize_sequences
    from .train import load_model, predict_proba

    kind, params, schema, _training = load_model(args.model)
    cohort = _load_cohort(args.samples)
    samples = cohort.evaluation_samples(args.split)
    if not samples:
        raise DataError(f"no evaluation samples in split {args.split!r}")
    build = featurize_lr if kind == "lr" else featurize_sequences
    X, y = build(samples, schema)
    scores = predict_proba(kind, params, X)
    baseline_pairs = [carry_forward_baseline(s) for s in samples]
    baseline_scores = np.array([score for _, score in baseline_pairs])
    groups = [s.sex for s in samples]

    report = {
        "model_kind": kind,
        "split": args.split,
        "n": len(samples),
        "model": evaluate_scores(y, scores, threshold=args.threshold, groups=groups),
        "baseline": evaluate_scores(y, baseline_scores, threshold=0.5, groups=groups),
    }
    out = _out_dir(args)
    report_path = out / "report.json"
    write_json(report_path, report)
    outputs = {"report": report_path}
    if len(set(y.tolist())) == 2:
        model_roc = out / "roc_model.csv"
        baseline_roc = out / "roc_baseline.csv"
        roc_curve(y, scores).to_csv(model_roc)
        roc_curve(y, baseline_scores).to_csv(baseline_roc)
        outputs["roc_model"] = model_roc
        outputs["roc_baseline"] = baseline_roc
    write_manifest(
        out,
        "evaluate",
        inputs={"model": args.model, "samples": args.samples},
        outputs=outputs,
        config={"threshold": args.threshold, "split": args.split},
        seed=0,
    )
    model_auroc = report["model"].get("auroc")
    base_auroc = report["baseline"].get("auroc")
    shown = lambda v: "n/a" if v is None else f"{v:.4f}"
    print(
        f"evaluate: {kind} AUROC {shown(model_auroc)}, baseline AUROC {shown(base_auroc)} "
        f"on {len(samples)} {args.split} samples"
    )
    return EXIT_OK


# -- attribute ------------------------------------------------------------------

def cmd_attribute(args) -> int:
    from .attribution import (
        aggregate_sequence_attributions,
        lstm_scorer,
        population_attributions,
        rank_features,
        rank_lr_weights,
        write_ranked_csv,
        write_sequence_attribution_csv,
    )
    from .featurize import featurize_sequences
    from .train import load_model

    if args.top <= 0:
        raise ValueError("--top must be positive")
    kind, params, schema, _training = load_model(args.model)
    out = _out_dir(args)
    outputs = {}
    if kind == "lr":
        ranked = rank_lr_weights(params, schema.lr_columns, args.top)
        weights_path = out / "lr_weights.csv"
        write_ranked_csv(ranked, weights_path, value_column="weight")
        outputs["lr_weights"] = weights_path
        summary = f"{len(ranked)} ranked weights"
    else:
        if not args.samples:
            raise ValueError("--samples is required for lstm models")
        cohort = _load_cohort(args.samples)
        samples = cohort.evaluation_samples(args.split)
        if not samples:
            raise DataError(f"no evaluation samples in split {args.split!r}")
        X, _ = featurize_sequences(samples, schema)
        mean_attr = population_attributions(lstm_scorer(params), X, steps=args.steps)
        per_step_path = out / "attributions.csv"
        write_sequence_attribution_csv(mean_attr, schema.columns, per_step_path)
        totals = aggregate_sequence_attributions(mean_attr)
        ranked = rank_features(schema.columns, totals, args.top)
        agg_path = out / "attributions_agg.csv"
        write_ranked_csv(ranked, agg_path, value_column="total_score")
        outputs["attributions"] = per_step_path
        outputs["attributions_agg"] = agg_path
        summary = f"mean attributions over {len(samples)} samples, top {len(ranked)}"
    inputs = {"model": args.model}
    if kind == "lstm":
        inputs["samples"] = args.samples
    write_manifest(
        out,
        "attribute",
        inputs=inputs,
        outputs=outputs,
        config={"top": args.top, "steps": args.steps, "split": args.split},
        seed=0,
    )
    print(f"attribute: {kind}: {summary}")
    return EXIT_OK


# -- wiring ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="htnrisk",
        description="Hypertension risk stratification over longitudinal EHR data.",
    )
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("generate", help="generate a synthetic EHR cohort")
    p.add_argument("--config", help="generator key=value config file")
    p.add_argument("--seed", type=int, default=None, help="generator seed (overrides config)")
    p.add_argument("--patients", type=int, default=None, help="number of patients (overrides config)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("cohort", help="select the cohort and build samples")
    p.add_argument("--data", required=True, help="directory with the four source CSVs")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0, help="split assignment seed")
    p.add_argument("--horizon", type=int, default=HORIZON_DAYS, help="target window in days")
    p.add_argument(
        "--fractions",
        default=",".join(str(f) for f in DEFAULT_SPLIT_FRACTIONS),
        help="train,validation,test fractions",
    )
    p.add_argument("--fiscal-year-start", type=int, default=1, help="fiscal year start month")
    p.set_defaults(func=cmd_cohort)

    p = sub.add_parser("featurize", help="fit the feature schema on the training split")
    p.add_argument("--samples", required=True, help="samples.json from the cohort stage")
    p.add_argument("--out", required=True)
    p.add_argument("--export-csv", action="store_true", help="also export feature matrices")
    p.set_defaults(func=cmd_featurize)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--samples", required=True)
    p.add_argument("--schema", required=True, help="schema.json from the featurize stage")
    p.add_argument("--model", required=True, choices=("lr", "lstm"))
    p.add_argument("--config", help="training key=value config file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None, help="override max_epochs")
    p.add_argument("--grid", action="store_true", help="grid-search hyperparameters first")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a model against the baseline")
    p.add_argument("--model", required=True, help="model.json from the train stage")
    p.add_argument("--samples", required=True)
    p.add_argument("--split", default="test", choices=("train", "validation", "test"))
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("attribute", help="rank features by importance")
    p.add_argument("--model", required=True)
    p.add_argument("--samples", help="required for lstm models")
    p.add_argument("--split", default="test", choices=("train", "validation", "test"))
    p.add_argument("--top", type=int, default=20, help="rows in the ranked export")
    p.add_argument("--steps", type=int, default=128, help="integration steps")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_attribute)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exit_:
        return int(exit_.code or 0)
    stage = args.command
    try:
        return args.func(args)
    except DataError as err:
        print(f"error: {stage}: {err}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as err:
        print(f"error: {stage}: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as err:
        print(f"error: {stage}: {err}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as err:
        print(f"error: {stage}: {err}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
