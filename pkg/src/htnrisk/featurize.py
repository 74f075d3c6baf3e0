"""Feature engineering: train-set statistics and sample transforms.

A `FeatureSchema` is fitted on the training split only and then applied
as a pure function everywhere: min-max scaling, mean imputation with
missingness indicators, one-hot demographics, and binary indicators for
medication families, retained lab panels, and problem codes. Sequence
inputs are the last six visits, zero-padded on the left; the flat input
for the linear model adds a seven-visit blood-pressure lag block.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .artifacts import canonical_json, format_number, sha256_hex
from .cohort import CohortSample, compute_bp_fraction, label_bp_status
from .ehr_core import DataError, EncounterRecord, MedicationCategory, DEMOGRAPHIC_NAMES

SEQUENCE_LENGTH = 6  # visits fed to the recurrent model
BP_LAG_DEPTH = 7  # blood-pressure history depth of the flat input
MISSING_DROP_RATE = 0.99  # numeric dropped when missing more often than this
LAB_MIN_FREQUENCY = 0.60  # lab panel kept only at or above this train frequency

SCHEMA_FORMAT = "htnrisk-schema/1"

#: Per-record numeric variables, in output order.
NUMERIC_VARIABLES = (
    "systolic",
    "diastolic",
    "bp_fraction",
    "bp_status",
    "delta_time",
    "age",
    "pulse",
    "height",
    "weight",
    "bmi",
    "temperature",
    "respiratory_rate",
    "heart_rate",
    "fatigue",
)

#: Medication family columns, in enum declaration order.
MED_CATEGORY_ORDER = tuple(cat.value for cat in MedicationCategory)


@dataclass
class NumericStats:
    mean: float
    min: float
    max: float
    missing_rate: float
    retained: bool


@dataclass
class LabStats:
    frequency: float
    retained: bool


@dataclass
class FeatureSchema:
    """Fitted feature statistics plus the canonical column layout."""

    numeric: dict[str, NumericStats]
    categorical: dict[str, list[str]]  # demographic variable -> train vocabulary
    lab_panels: dict[str, LabStats]
    problem_codes: list[str]
    columns: list[str] = field(default_factory=list)  # per-record layout
    lr_columns: list[str] = field(default_factory=list)  # flat-model layout
    n_encounters: int = 0
    n_samples: int = 0

    @property
    def width(self) -> int:
        return len(self.columns)

    @property
    def lr_width(self) -> int:
        return len(self.lr_columns)


def _encounter_codes(enc: EncounterRecord) -> set[str]:
    codes = set(enc.problems)
    if enc.diagnosis_code is not None:
        codes.add(enc.diagnosis_code)
    return codes


def _numeric_value(enc: EncounterRecord, name: str, prev_date) -> float | None:
    if name == "systolic":
        return enc.systolic
    if name == "diastolic":
        return enc.diastolic
    if name == "bp_fraction":
        return compute_bp_fraction(enc.systolic, enc.diastolic)
    if name == "bp_status":
        status = label_bp_status(enc.systolic, enc.diastolic)
        return None if status is None else float(status)
    if name == "delta_time":
        return 0.0 if prev_date is None else float((enc.date - prev_date).days)
    if name == "age":
        return float(enc.age)
    return enc.vitals.get(name)


def _record_columns(schema: FeatureSchema) -> list[str]:
    cols: list[str] = []
    for name in NUMERIC_VARIABLES:
        if schema.numeric[name].retained:
            cols.append(name)
            cols.append(name + "__missing")
    cols.append("sex")
    for var in DEMOGRAPHIC_NAMES:
        for category in schema.categorical[var]:
            cols.append(f"{var}={category}")
        cols.append(var + "__missing")
    for category in MED_CATEGORY_ORDER:
        cols.append(f"med={category}")
    for panel in sorted(schema.lab_panels):
        if schema.lab_panels[panel].retained:
            cols.append(f"lab={panel}")
    for code in schema.problem_codes:
        cols.append(f"dx={code}")
    return cols


def _lr_lag_columns(schema: FeatureSchema) -> list[str]:
    cols: list[str] = []
    for k in range(1, BP_LAG_DEPTH + 1):
        for base in ("systolic", "diastolic", "bp_status"):
            if schema.numeric[base].retained:
                cols.append(f"{base}_lag{k}")
                cols.append(f"{base}_lag{k}__missing")
    if schema.numeric["bp_fraction"].retained:
        cols.append("bp_fraction_lag1")
        cols.append("bp_fraction_lag1__missing")
    cols.append("time_between_visits")
    return cols


def fit_schema(train_samples: list[CohortSample]) -> FeatureSchema:
    """Fit all statistics on the training split only.

    Input encounters are each patient's longest history prefix, so every
    visit whose features any training sample consumes is counted exactly
    once; target visits contribute nothing.
    """
    if not train_samples:
        raise DataError("cannot fit schema: empty training split")

    longest: dict[str, CohortSample] = {}
    for sample in train_samples:
        best = longest.get(sample.patient)
        if best is None or sample.target_index > best.target_index:
            longest[sample.patient] = sample

    observed: dict[str, list[float]] = {name: [] for name in NUMERIC_VARIABLES}
    vocab: dict[str, set[str]] = {var: set() for var in DEMOGRAPHIC_NAMES}
    panel_counts: dict[str, int] = {}
    codes: set[str] = set()
    n_encounters = 0
    for patient in sorted(longest):
        history = longest[patient].history
        for i, enc in enumerate(history):
            n_encounters += 1
            prev_date = history[i - 1].date if i > 0 else None
            for name in NUMERIC_VARIABLES:
                value = _numeric_value(enc, name, prev_date)
                if value is not None:
                    observed[name].append(value)
            for var in DEMOGRAPHIC_NAMES:
                raw = enc.demographics.get(var)
                if raw is not None:
                    vocab[var].add(raw)
            for panel in enc.lab_panels:
                panel_counts[panel] = panel_counts.get(panel, 0) + 1
            codes.update(_encounter_codes(enc))

    numeric: dict[str, NumericStats] = {}
    for name in NUMERIC_VARIABLES:
        values = observed[name]
        missing_rate = 1.0 - len(values) / n_encounters
        retained = missing_rate <= MISSING_DROP_RATE
        if retained and not values:
            raise DataError(f"variable {name}: retained but never observed in training data")
        if values:
            numeric[name] = NumericStats(
                mean=float(np.mean(values)),
                min=float(np.min(values)),
                max=float(np.max(values)),
                missing_rate=missing_rate,
                retained=retained,
            )
        else:
            numeric[name] = NumericStats(
                mean=0.0, min=0.0, max=0.0, missing_rate=missing_rate, retained=False
            )

    horizons = [
        float((s.target_date - s.history[-1].date).days) for s in train_samples
    ]
    numeric["time_between_visits"] = NumericStats(
        mean=float(np.mean(horizons)),
        min=float(np.min(horizons)),
        max=float(np.max(horizons)),
        missing_rate=0.0,
        retained=True,
    )

    schema = FeatureSchema(
        numeric=numeric,
        categorical={var: sorted(vocab[var]) for var in DEMOGRAPHIC_NAMES},
        lab_panels={
            panel: LabStats(
                frequency=count / n_encounters,
                retained=count / n_encounters >= LAB_MIN_FREQUENCY,
            )
            for panel, count in sorted(panel_counts.items())
        },
        problem_codes=sorted(codes),
        n_encounters=n_encounters,
        n_samples=len(train_samples),
    )
    schema.columns = _record_columns(schema)
    schema.lr_columns = schema.columns + _lr_lag_columns(schema)
    return schema


def impute(value: float | None, stats: NumericStats) -> tuple[float, float]:
    """Fill an absent value with the train mean; second element flags it."""
    if value is None:
        return stats.mean, 1.0
    return float(value), 0.0


def scale_minmax(value: float, stats: NumericStats) -> float:
    """Map the train range onto [0, 1]; constant columns collapse to 0.

    Test-set values outside the train range are NOT clamped, so they may
    fall outside [0, 1]; ordering information is preserved.
    """
    if stats.max == stats.min:
        return 0.0
    return (value - stats.min) / (stats.max - stats.min)


def encode_onehot(category: str | None, vocabulary: list[str]) -> tuple[np.ndarray, float]:
    """One-hot a category; unseen values encode as all-zero.

    Returns (indicator sub-vector, missing flag). An absent category is
    all-zero with the flag set; an unseen one is all-zero with flag 0.
    """
    vector = np.zeros(len(vocabulary))
    if category is None:
        return vector, 1.0
    try:
        vector[vocabulary.index(category)] = 1.0
    except ValueError:
        pass
    return vector, 0.0


def _scaled(value: float | None, stats: NumericStats) -> tuple[float, float]:
    filled, indicator = impute(value, stats)
    return scale_minmax(filled, stats), indicator


def transform_record(
    enc: EncounterRecord, prev_date, schema: FeatureSchema
) -> np.ndarray:
    """One encounter to its fixed-width feature vector."""
    values: list[float] = []
    for name in NUMERIC_VARIABLES:
        stats = schema.numeric[name]
        if not stats.retained:
            continue
        scaled, indicator = _scaled(_numeric_value(enc, name, prev_date), stats)
        values.append(scaled)
        values.append(indicator)
    values.append(1.0 if enc.sex == "female" else 0.0)
    for var in DEMOGRAPHIC_NAMES:
        onehot, missing = encode_onehot(enc.demographics.get(var), schema.categorical[var])
        values.extend(onehot)
        values.append(missing)
    for category in MED_CATEGORY_ORDER:
        values.append(1.0 if category in enc.med_categories else 0.0)
    for panel in sorted(schema.lab_panels):
        if schema.lab_panels[panel].retained:
            values.append(1.0 if panel in enc.lab_panels else 0.0)
    enc_codes = _encounter_codes(enc)
    for code in schema.problem_codes:
        values.append(1.0 if code in enc_codes else 0.0)
    return np.array(values, dtype=np.float64)


def build_sequence(sample: CohortSample, schema: FeatureSchema) -> np.ndarray:
    """Last six visits as a (6, F) array, left-padded with zero rows."""
    if not sample.history:
        raise ValueError("sample has empty history")
    history = sample.history
    take = min(SEQUENCE_LENGTH, len(history))
    out = np.zeros((SEQUENCE_LENGTH, schema.width))
    for pos in range(take):
        idx = len(history) - take + pos
        prev_date = history[idx - 1].date if idx > 0 else None
        out[SEQUENCE_LENGTH - take + pos] = transform_record(
            history[idx], prev_date, schema
        )
    return out


def build_lr_input(sample: CohortSample, schema: FeatureSchema) -> np.ndarray:
    """Flat input: last-visit features plus the BP lag block.

    Lag k reads the k-th most recent history visit; lags beyond the
    available history (or with an unreadable BP) are imputed with the
    base variable's train mean and flagged. The trailing column is the
    scaled gap between the last visit and the target date.
    """
    if not sample.history:
        raise ValueError("sample has empty history")
    history = sample.history
    last = history[-1]
    prev_date = history[-2].date if len(history) > 1 else None
    values = list(transform_record(last, prev_date, schema))
    for k in range(1, BP_LAG_DEPTH + 1):
        idx = len(history) - k
        enc = history[idx] if idx >= 0 else None
        for base in ("systolic", "diastolic", "bp_status"):
            stats = schema.numeric[base]
            if not stats.retained:
                continue
            raw = None if enc is None else _numeric_value(enc, base, None)
            scaled, indicator = _scaled(raw, stats)
            values.append(scaled)
            values.append(indicator)
    if schema.numeric["bp_fraction"].retained:
        scaled, indicator = _scaled(
            compute_bp_fraction(last.systolic, last.diastolic),
            schema.numeric["bp_fraction"],
        )
        values.append(scaled)
        values.append(indicator)
    horizon = float((sample.target_date - last.date).days)
    values.append(scale_minmax(horizon, schema.numeric["time_between_visits"]))
    return np.array(values, dtype=np.float64)


def featurize_sequences(
    samples: list[CohortSample], schema: FeatureSchema
) -> tuple[np.ndarray, np.ndarray]:
    """Stack sequence inputs: (n, 6, F) plus the label vector."""
    X = np.zeros((len(samples), SEQUENCE_LENGTH, schema.width))
    y = np.zeros(len(samples))
    for i, sample in enumerate(samples):
        X[i] = build_sequence(sample, schema)
        y[i] = float(sample.label)
    return X, y


def featurize_lr(
    samples: list[CohortSample], schema: FeatureSchema
) -> tuple[np.ndarray, np.ndarray]:
    """Stack flat inputs: (n, F_lr) plus the label vector."""
    X = np.zeros((len(samples), schema.lr_width))
    y = np.zeros(len(samples))
    for i, sample in enumerate(samples):
        X[i] = build_lr_input(sample, schema)
        y[i] = float(sample.label)
    return X, y


# -- schema artifact ----------------------------------------------------------

def schema_to_dict(schema: FeatureSchema) -> dict:
    return {
        "format": SCHEMA_FORMAT,
        "numeric": {
            name: {
                "mean": s.mean,
                "min": s.min,
                "max": s.max,
                "missing_rate": s.missing_rate,
                "retained": s.retained,
            }
            for name, s in schema.numeric.items()
        },
        "categorical": dict(schema.categorical),
        "lab_panels": {
            panel: {"frequency": s.frequency, "retained": s.retained}
            for panel, s in schema.lab_panels.items()
        },
        "problem_codes": list(schema.problem_codes),
        "columns": list(schema.columns),
        "lr_columns": list(schema.lr_columns),
        "n_encounters": schema.n_encounters,
        "n_samples": schema.n_samples,
    }


def schema_from_dict(data: dict) -> FeatureSchema:
    if data.get("format") != SCHEMA_FORMAT:
        raise DataError(f"unsupported schema format {data.get('format')!r}")
    return FeatureSchema(
        numeric={
            name: NumericStats(
                mean=s["mean"],
                min=s["min"],
                max=s["max"],
                missing_rate=s["missing_rate"],
                retained=s["retained"],
            )
            for name, s in data["numeric"].items()
        },
        categorical={var: list(vocab) for var, vocab in data["categorical"].items()},
        lab_panels={
            panel: LabStats(frequency=s["frequency"], retained=s["retained"])
            for panel, s in data["lab_panels"].items()
        },
        problem_codes=list(data["problem_codes"]),
        columns=list(data["columns"]),
        lr_columns=list(data["lr_columns"]),
        n_encounters=data["n_encounters"],
        n_samples=data["n_samples"],
    )


def schema_hash(schema: FeatureSchema) -> str:
    return sha256_hex(canonical_json(schema_to_dict(schema)).encode("utf-8"))


# -- feature matrix export ----------------------------------------------------

def export_sequence_csv(samples, schema, path) -> None:
    """One row per (sample, timestep), canonical header."""
    with Path(path).open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["sample", "timestep"] + schema.columns)
        for sample in samples:
            seq = build_sequence(sample, schema)
            name = f"{sample.patient}:{sample.target_index}"
            for t in range(SEQUENCE_LENGTH):
                writer.writerow([name, t] + [format_number(v) for v in seq[t]])


def export_lr_csv(samples, schema, path) -> None:
    """One row per sample, canonical header."""
    with Path(path).open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["sample"] + schema.lr_columns)
        for sample in samples:
            vec = build_lr_input(sample, schema)
            name = f"{sample.patient}:{sample.target_index}"
            writer.writerow([name] + [format_number(v) for v in vec])
