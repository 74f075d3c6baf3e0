"""Cohort selection: exclusion rules, labeling, sample pairing, and splits.

A patient's encounter timeline passes through a fixed exclusion cascade,
then every encounter with a usable blood-pressure reading that follows its
predecessor by at most 90 days becomes a prediction target; the history is
everything strictly before it. Splits are patient-disjoint.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from datetime import date
from enum import IntEnum

import numpy as np

from .artifacts import derive_seed
from .ehr_core import DataError, EncounterRecord, PatientId, encounter_from_dict, encounter_to_dict

SYSTOLIC_THRESHOLD = 140.0  # mmHg, label boundary (inclusive)
DIASTOLIC_THRESHOLD = 90.0  # mmHg, label boundary (inclusive)
SYSTOLIC_FLOOR = 90.0  # below this a reading is treated as a device error
DIASTOLIC_FLOOR = 60.0
HORIZON_DAYS = 90  # prediction window: target visit at most this far out
AGE_MIN = 18.0
AGE_MAX = 90.0
MIN_RECORDS_PER_YEAR = 2

#: Exclusion cascade, applied in order; a patient is tallied under the
#: first rule that matches.
EXCLUSION_RULES = ("deceased", "age", "records_per_year", "no_vitals", "last_gap_90d")

SPLIT_NAMES = ("train", "validation", "test")
DEFAULT_SPLIT_FRACTIONS = (0.72, 0.13, 0.15)


class BpStatus(IntEnum):
    CONTROLLED = 0
    UNCONTROLLED = 1


def label_bp_status(systolic: float | None, diastolic: float | None) -> BpStatus | None:
    """Label a reading pair; None when either reading is absent.

    Uncontrolled means systolic >= 140 or diastolic >= 90, boundary
    inclusive.
    """
    if systolic is None or diastolic is None:
        return None
    if systolic >= SYSTOLIC_THRESHOLD or diastolic >= DIASTOLIC_THRESHOLD:
        return BpStatus.UNCONTROLLED
    return BpStatus.CONTROLLED


def compute_bp_fraction(systolic: float | None, diastolic: float | None) -> float | None:
    """Systolic over diastolic; None when either reading is absent."""
    if systolic is None or diastolic is None:
        return None
    return systolic / diastolic


def exclude_bp_reading_errors(
    encounters: list[EncounterRecord],
) -> list[EncounterRecord]:
    """Drop encounters whose readings fall below the device-error floor.

    The rule fires only when both readings are present; systolic < 90 or
    diastolic < 60 marks the pair as an error. Encounters with absent BP
    pass through untouched.
    """
    kept = []
    for enc in encounters:
        if enc.systolic is not None and enc.diastolic is not None:
            if enc.systolic < SYSTOLIC_FLOOR or enc.diastolic < DIASTOLIC_FLOOR:
                continue
        kept.append(enc)
    return kept


def _fiscal_year(when: date, start_month: int) -> int:
    # A fiscal year is labeled by the calendar year it starts in.
    if when.month >= start_month:
        return when.year
    return when.year - 1


def _exclusion_rule(timeline: list[EncounterRecord], fiscal_year_start: int) -> str | None:
    """Name of the first exclusion rule matching this patient, else None."""
    if not timeline:
        return "last_gap_90d"
    if any(enc.deceased for enc in timeline):
        return "deceased"
    age = timeline[-1].age  # age at the most recent encounter
    if age > AGE_MAX or age < AGE_MIN:
        return "age"
    per_year: dict[int, int] = {}
    for enc in timeline:
        year = _fiscal_year(enc.date, fiscal_year_start)
        per_year[year] = per_year.get(year, 0) + 1
    if all(count < MIN_RECORDS_PER_YEAR for count in per_year.values()):
        return "records_per_year"
    if not any(enc.has_vitals() for enc in timeline):
        return "no_vitals"
    if len(timeline) < 2:
        return "last_gap_90d"
    last_gap = (timeline[-1].date - timeline[-2].date).days
    if last_gap > HORIZON_DAYS:
        return "last_gap_90d"
    return None


def apply_cohort_exclusions(
    timelines: dict[PatientId, list[EncounterRecord]],
    fiscal_year_start: int = 1,
) -> tuple[dict[PatientId, list[EncounterRecord]], dict[str, int]]:
    """Filter patients through the exclusion cascade.

    Returns the included timelines and a tally mapping each rule name to
    the number of patients it removed (each patient counted once, under
    the first matching rule).
    """
    included: dict[PatientId, list[EncounterRecord]] = {}
    tally = {rule: 0 for rule in EXCLUSION_RULES}
    for patient, timeline in timelines.items():
        rule = _exclusion_rule(timeline, fiscal_year_start)
        if rule is None:
            included[patient] = timeline
        else:
            tally[rule] += 1
    return included, tally


def write_exclusion_report(
    tally: dict[str, int], total_patients: int, path
) -> None:
    """CSV mirror of the exclusion cascade: rule,excluded_count,remaining_count."""
    import csv
    from pathlib import Path

    remaining = total_patients
    with Path(path).open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["rule", "excluded_count", "remaining_count"])
        for rule in EXCLUSION_RULES:
            remaining -= tally[rule]
            writer.writerow([rule, tally[rule], remaining])


@dataclass
class CohortSample:
    """One (history, 90-day target) pair.

    `history` holds every encounter strictly before the target, oldest
    first; `final` marks the patient's last qualifying pair, the one used
    for test-time evaluation.
    """

    patient: PatientId
    history: list[EncounterRecord]
    target_date: date
    label: BpStatus
    sex: str
    target_index: int  # position of the target in the patient timeline
    final: bool = False


def build_samples(
    timeline: list[EncounterRecord], horizon_days: int = HORIZON_DAYS
) -> list[CohortSample]:
    """Emit a sample for every labelable encounter within the horizon.

    An encounter qualifies as a target when its BP pair is labelable and
    its gap to the immediately preceding encounter is at most
    `horizon_days`. The last qualifying sample is flagged `final`.
    """
    samples: list[CohortSample] = []
    for idx in range(1, len(timeline)):
        target = timeline[idx]
        label = label_bp_status(target.systolic, target.diastolic)
        if label is None:
            continue
        gap = (target.date - timeline[idx - 1].date).days
        if gap > horizon_days:
            continue
        samples.append(
            CohortSample(
                patient=target.patient,
                history=timeline[:idx],
                target_date=target.date,
                label=label,
                sex=target.sex,
                target_index=idx,
            )
        )
    if samples:
        samples[-1].final = True
    return samples


def split_patients(
    patients: list[PatientId],
    fractions: tuple[float, float, float] = DEFAULT_SPLIT_FRACTIONS,
    seed: int = 0,
) -> dict[PatientId, str]:
    """Assign each patient to train/validation/test, deterministically.

    Sizes are floor(fraction * n) with leftovers handed to the splits in
    declaration order. Assignment shuffles the sorted patient list with a
    seeded generator, so the same call always yields the same mapping.
    """
    if len(fractions) != len(SPLIT_NAMES):
        raise ValueError(f"expected {len(SPLIT_NAMES)} fractions, got {len(fractions)}")
    if any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must be non-negative and sum to 1, got {fractions}")
    if not patients:
        raise DataError("empty cohort: no patients to split")
    ordered = sorted(patients)
    rng = np.random.default_rng(derive_seed(seed, "split"))
    perm = rng.permutation(len(ordered))
    counts = [int(len(ordered) * f) for f in fractions]
    leftover = len(ordered) - sum(counts)
    for i in range(leftover):
        counts[i % len(counts)] += 1
    assignment: dict[PatientId, str] = {}
    cursor = 0
    for name, count in zip(SPLIT_NAMES, counts):
        for k in perm[cursor : cursor + count]:
            assignment[ordered[k]] = name
        cursor += count
    return assignment


@dataclass
class Cohort:
    """Selected cohort: filtered timelines, samples, splits, and the tally."""

    timelines: dict[PatientId, list[EncounterRecord]]
    samples: list[CohortSample]
    splits: dict[PatientId, str]
    exclusion_tally: dict[str, int]
    total_patients: int  # before exclusions
    horizon_days: int = HORIZON_DAYS

    def samples_in(self, split: str) -> list[CohortSample]:
        return [s for s in self.samples if self.splits[s.patient] == split]

    def evaluation_samples(self, split: str) -> list[CohortSample]:
        """The per-patient final qualifying samples of one split."""
        return [s for s in self.samples_in(split) if s.final]


def select_cohort(
    timelines: dict[PatientId, list[EncounterRecord]],
    seed: int = 0,
    fractions: tuple[float, float, float] = DEFAULT_SPLIT_FRACTIONS,
    horizon_days: int = HORIZON_DAYS,
    fiscal_year_start: int = 1,
) -> Cohort:
    """Run the full selection: error floor, exclusions, samples, splits."""
    total = len(timelines)
    filtered = {
        patient: exclude_bp_reading_errors(stream) for patient, stream in timelines.items()
    }
    included, tally = apply_cohort_exclusions(filtered, fiscal_year_start)
    samples: list[CohortSample] = []
    with_samples: dict[PatientId, list[EncounterRecord]] = {}
    for patient in sorted(included):
        patient_samples = build_samples(included[patient], horizon_days)
        if patient_samples:
            with_samples[patient] = included[patient]
            samples.extend(patient_samples)
    if not with_samples:
        raise DataError("empty cohort after exclusions")
    splits = split_patients(list(with_samples), fractions, seed)
    return Cohort(
        timelines=with_samples,
        samples=samples,
        splits=splits,
        exclusion_tally=tally,
        total_patients=total,
        horizon_days=horizon_days,
    )


# -- samples artifact ---------------------------------------------------------
# Timelines are stored once per patient; each sample is a (patient,
# target_index) reference, so the file stays linear in cohort size.

SAMPLES_FORMAT = "htnrisk-samples/1"


def cohort_to_dict(cohort: Cohort) -> dict:
    patients = {}
    for patient in sorted(cohort.timelines):
        patients[patient] = {
            "split": cohort.splits[patient],
            "encounters": [encounter_to_dict(e) for e in cohort.timelines[patient]],
        }
    samples = [
        {
            "patient": s.patient,
            "target_index": s.target_index,
            "label": int(s.label),
            "final": s.final,
        }
        for s in cohort.samples
    ]
    return {
        "format": SAMPLES_FORMAT,
        "horizon_days": cohort.horizon_days,
        "total_patients": cohort.total_patients,
        "exclusion_tally": dict(cohort.exclusion_tally),
        "patients": patients,
        "samples": samples,
    }


def cohort_from_dict(data: dict) -> Cohort:
    if data.get("format") != SAMPLES_FORMAT:
        raise DataError(f"unsupported samples format {data.get('format')!r}")
    timelines = {}
    splits = {}
    for patient, entry in data["patients"].items():
        timelines[patient] = [encounter_from_dict(e) for e in entry["encounters"]]
        splits[patient] = entry["split"]
    samples = []
    for row in data["samples"]:
        timeline = timelines[row["patient"]]
        idx = row["target_index"]
        target = timeline[idx]
        samples.append(
            CohortSample(
                patient=row["patient"],
                history=timeline[:idx],
                target_date=target.date,
                label=BpStatus(row["label"]),
                sex=target.sex,
                target_index=idx,
                final=row["final"],
            )
        )
    return Cohort(
        timelines=timelines,
        samples=samples,
        splits=splits,
        exclusion_tally=dict(data["exclusion_tally"]),
        total_patients=data["total_patients"],
        horizon_days=data["horizon_days"],
    )
