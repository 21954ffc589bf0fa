"""Lesion metadata ingestion and the pre-LP filtering steps.

The steps run in a fixed order: drop records without an age, drop
duplicates, then keep one randomly chosen image per patient.  What remains
is tabulated into eight (label, sex, age band) cells.
"""

from __future__ import annotations

import csv
import enum
import io
import json
from collections import OrderedDict
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Iterator, Mapping, Optional, TextIO

import numpy as np

from .errors import CapacityError, DataError, FormatError, PreconditionError

PRNG_NAME = "numpy.PCG64"
DEFAULT_CUTOFF = 60


class Sex(str, enum.Enum):
    FEMALE = "F"
    MALE = "M"
    UNKNOWN = "U"


class Label(str, enum.Enum):
    MALIGNANT = "malignant"
    BENIGN = "benign"


class AgeBand(str, enum.Enum):
    UNDER = "under60"
    AT_LEAST = "atLeast60"


Cell = tuple[Label, Sex, AgeBand]

# canonical cell order, used everywhere a deterministic iteration is needed
CELLS: tuple[Cell, ...] = tuple(
    (label, sex, band)
    for label in (Label.MALIGNANT, Label.BENIGN)
    for sex in (Sex.FEMALE, Sex.MALE)
    for band in (AgeBand.UNDER, AgeBand.AT_LEAST)
)


def cell_key(cell: Cell) -> str:
    label, sex, band = cell
    return f"{label.value}/{sex.value}/{band.value}"


def parse_cell_key(key: str) -> Cell:
    label, sex, band = key.split("/")
    return Label(label), Sex(sex), AgeBand(band)


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Seeded generator; ``stream`` keeps independent pipeline steps decorrelated."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, *stream])))


_SEX_ALIASES = {"f": Sex.FEMALE, "female": Sex.FEMALE, "m": Sex.MALE, "male": Sex.MALE}


@dataclass(frozen=True)
class LesionRecord:
    image_id: str
    patient_id: str
    age: Optional[int]
    sex: Sex
    label: Label

    def age_band(self, cutoff: int = DEFAULT_CUTOFF) -> AgeBand:
        if self.age is None:
            raise PreconditionError(f"record {self.image_id} has no age")
        return AgeBand.UNDER if self.age < cutoff else AgeBand.AT_LEAST

    def cell(self, cutoff: int = DEFAULT_CUTOFF) -> Cell:
        if self.sex is Sex.UNKNOWN:
            raise PreconditionError(f"record {self.image_id} has unknown sex")
        return self.label, self.sex, self.age_band(cutoff)


@dataclass(frozen=True)
class SkipEntry:
    step: str
    reason: str
    ref: str

    def to_dict(self) -> dict:
        return {"step": self.step, "reason": self.reason, "ref": self.ref}


@dataclass(frozen=True)
class Cohort:
    records: tuple[LesionRecord, ...] = ()
    provenance: tuple[str, ...] = ()
    skipped: tuple[SkipEntry, ...] = ()

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[LesionRecord]:
        return iter(self.records)

    @property
    def image_ids(self) -> tuple[str, ...]:
        return tuple(r.image_id for r in self.records)

    def derive(self, records: Iterable[LesionRecord], note: str, skipped: Iterable[SkipEntry] = ()) -> "Cohort":
        return Cohort(tuple(records), self.provenance + (note,), self.skipped + tuple(skipped))

    def by_cell(self, cutoff: int = DEFAULT_CUTOFF) -> dict[Cell, list[LesionRecord]]:
        groups: dict[Cell, list[LesionRecord]] = {c: [] for c in CELLS}
        for rec in self.records:
            groups[rec.cell(cutoff)].append(rec)
        return groups

    def report(self) -> dict:
        """JSON-ready filter report: applied steps and every skipped row."""
        counts: dict[str, int] = {}
        for s in self.skipped:
            counts[f"{s.step}:{s.reason}"] = counts.get(f"{s.step}:{s.reason}", 0) + 1
        return {
            "size": len(self.records),
            "provenance": list(self.provenance),
            "skip_counts": dict(sorted(counts.items())),
            "skipped": [s.to_dict() for s in self.skipped],
        }


@dataclass(frozen=True)
class ColumnMap:
    image_id: str = "image_id"
    patient_id: str = "patient_id"
    age: str = "age"
    sex: str = "sex"
    label: str = "label"

    @classmethod
    def isic(cls) -> "ColumnMap":
        """Column names used by ISIC archive metadata exports."""
        return cls("isic_id", "patient_id", "age_approx", "sex", "benign_malignant")

    @classmethod
    def from_dict(cls, d: Mapping[str, str]) -> "ColumnMap":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise FormatError(f"unknown column mapping keys: {sorted(unknown)}")
        return cls(**d)

    def as_dict(self) -> dict[str, str]:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def _parse_age(raw: str) -> Optional[int]:
    try:
        age = float(raw)
    except (TypeError, ValueError):
        return None
    if not (0 <= age <= 130):
        return None
    return int(age)


def parse_metadata(
    source: TextIO | str,
    columns: ColumnMap = ColumnMap(),
    delimiter: Optional[str] = None,
) -> Cohort:
    """Read delimited lesion metadata into a :class:`Cohort`.

    ``source`` is an open text stream or the text itself.  With
    ``delimiter=None`` a tab in the header selects TSV, otherwise comma.
    Rows whose label is neither benign nor malignant are kept out of the
    cohort and listed in ``cohort.skipped``.
    """
    text = source if isinstance(source, str) else source.read()
    if delimiter is None:
        header = text.split("\n", 1)[0]
        delimiter = "\t" if "\t" in header else ","
    reader = csv.DictReader(io.StringIO(text), delimiter=delimiter)
    fields = reader.fieldnames or []
    for col in columns.as_dict().values():
        if col not in fields:
            raise FormatError(f"missing mandatory column '{col}'")

    records, skipped, seen = [], [], set()
    for lineno, row in enumerate(reader, start=2):
        image_id = (row[columns.image_id] or "").strip()
        if not image_id:
            raise DataError(f"line {lineno}: empty image_id")
        if image_id in seen:
            raise DataError(f"line {lineno}: duplicate image_id '{image_id}'")
        seen.add(image_id)
        raw_label = (row[columns.label] or "").strip().lower()
        try:
            label = Label(raw_label)
        except ValueError:
            skipped.append(SkipEntry("parse", f"label '{raw_label}'", image_id))
            continue
        records.append(
            LesionRecord(
                image_id=image_id,
                patient_id=(row[columns.patient_id] or "").strip(),
                age=_parse_age(row[columns.age]),
                sex=_SEX_ALIASES.get((row[columns.sex] or "").strip().lower(), Sex.UNKNOWN),
                label=label,
            )
        )
    return Cohort(tuple(records), ("parse_metadata",), tuple(skipped))


def write_cohort(cohort: Cohort, stream: TextIO, columns: ColumnMap = ColumnMap(), delimiter: str = ",") -> None:
    writer = csv.writer(stream, delimiter=delimiter, lineterminator="\n")
    writer.writerow([columns.image_id, columns.patient_id, columns.age, columns.sex, columns.label])
    sex_out = {Sex.FEMALE: "female", Sex.MALE: "male", Sex.UNKNOWN: ""}
    for r in cohort.records:
        writer.writerow([r.image_id, r.patient_id, "" if r.age is None else r.age, sex_out[r.sex], r.label.value])


def filter_defined_age(cohort: Cohort) -> Cohort:
    kept, dropped = [], []
    for r in cohort.records:
        (kept if r.age is not None else dropped).append(r)
    return cohort.derive(
        kept, "filter_defined_age", (SkipEntry("filter_defined_age", "undefined age", r.image_id) for r in dropped)
    )


DuplicateDetector = Callable[[Cohort], Iterable[tuple[str, str]]]


def dedup(
    cohort: Cohort,
    duplicate_pairs: Iterable[tuple[str, str]] = (),
    detector: Optional[DuplicateDetector] = None,
) -> Cohort:
    """Remove duplicate lesions, keeping the first occurrence.

    Repeated ``image_id`` values are always collapsed.  Content-level
    duplicates must be supplied from outside, either as ``(keep, drop)``
    pairs or by a ``detector`` callable returning such pairs (e.g. a
    perceptual-hash matcher).
    """
    pairs = list(duplicate_pairs)
    if detector is not None:
        pairs.extend(detector(cohort))
    known = set(cohort.image_ids)
    for a, b in pairs:
        for ref in (a, b):
            if ref not in known:
                raise DataError(f"duplicate list references unknown image_id '{ref}'")
    drop = {b for a, b in pairs if a != b}

    kept, skipped, seen = [], [], set()
    for r in cohort.records:
        if r.image_id in seen:
            skipped.append(SkipEntry("dedup", "repeated image_id", r.image_id))
        elif r.image_id in drop:
            skipped.append(SkipEntry("dedup", "listed duplicate", r.image_id))
        else:
            kept.append(r)
        seen.add(r.image_id)
    return cohort.derive(kept, "dedup", skipped)


def one_per_patient(cohort: Cohort, seed: int) -> Cohort:
    """Keep one uniformly chosen image per patient.

    Patients are visited in order of first appearance, so the draw sequence
    only depends on the input order and ``seed``.  Patients whose images
    disagree on sex or label are reported in the skip log (the selection
    still happens; nothing is guessed about which metadata is right).
    """
    groups: OrderedDict[str, list[int]] = OrderedDict()
    for i, r in enumerate(cohort.records):
        # records without a patient id stand alone
        groups.setdefault(r.patient_id or f"#{r.image_id}", []).append(i)
    rng = make_rng(seed, 3)
    chosen, notes = set(), []
    for pid, idx in groups.items():
        pick = idx[int(rng.integers(len(idx)))] if len(idx) > 1 else idx[0]
        chosen.add(pick)
        recs = [cohort.records[i] for i in idx]
        if len({r.sex for r in recs}) > 1 or len({r.label for r in recs}) > 1:
            notes.append(SkipEntry("one_per_patient", "conflicting metadata (kept random pick)", pid))
        for i in idx:
            if i != pick:
                notes.append(SkipEntry("one_per_patient", "extra patient image", cohort.records[i].image_id))
    kept = [r for i, r in enumerate(cohort.records) if i in chosen]
    return cohort.derive(kept, f"one_per_patient(seed={seed}, prng={PRNG_NAME})", notes)


def drop_unknown_sex(cohort: Cohort) -> Cohort:
    kept, skipped = [], []
    for r in cohort.records:
        if r.sex is Sex.UNKNOWN:
            skipped.append(SkipEntry("drop_unknown_sex", "unknown sex", r.image_id))
        else:
            kept.append(r)
    return cohort.derive(kept, "drop_unknown_sex", skipped)


@dataclass(frozen=True)
class CohortTable:
    """Record counts per (label, sex, age band) cell."""

    counts: Mapping[Cell, int] = field(default_factory=dict)
    median_age_cutoff: int = DEFAULT_CUTOFF

    def __post_init__(self):
        full = {c: int(self.counts.get(c, 0)) for c in CELLS}
        for c, v in full.items():
            if v < 0:
                raise PreconditionError(f"negative count in cell {cell_key(c)}")
        object.__setattr__(self, "counts", full)

    def __getitem__(self, cell: Cell) -> int:
        return self.counts[cell]

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def minus(self, per_cell: int) -> "CohortTable":
        """Counts left after reserving ``per_cell`` records from every cell."""
        short = [cell_key(c) for c in CELLS if self.counts[c] < per_cell]
        if short:
            raise CapacityError(f"cells smaller than {per_cell}: {', '.join(short)}")
        return replace(self, counts={c: v - per_cell for c, v in self.counts.items()})

    def to_dict(self) -> dict:
        return {
            "median_age_cutoff": self.median_age_cutoff,
            "counts": {cell_key(c): self.counts[c] for c in CELLS},
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "CohortTable":
        counts = {parse_cell_key(k): int(v) for k, v in d["counts"].items()}
        return cls(counts, int(d.get("median_age_cutoff", DEFAULT_CUTOFF)))


def tabulate(cohort: Cohort, cutoff: int = DEFAULT_CUTOFF) -> CohortTable:
    counts = {c: 0 for c in CELLS}
    for r in cohort.records:
        counts[r.cell(cutoff)] += 1
    return CohortTable(counts, cutoff)


# Distribution after the multiplet-removal step of the reference archive
# snapshot; these bound the per-cell decision variables of the LP.
ARCHIVE_SNAPSHOT = CohortTable(
    {
        (Label.MALIGNANT, Sex.FEMALE, AgeBand.UNDER): 1371,
        (Label.MALIGNANT, Sex.FEMALE, AgeBand.AT_LEAST): 1641,
        (Label.MALIGNANT, Sex.MALE, AgeBand.UNDER): 1261,
        (Label.MALIGNANT, Sex.MALE, AgeBand.AT_LEAST): 2801,
        (Label.BENIGN, Sex.FEMALE, AgeBand.UNDER): 10810,
        (Label.BENIGN, Sex.FEMALE, AgeBand.AT_LEAST): 2397,
        (Label.BENIGN, Sex.MALE, AgeBand.UNDER): 12239,
        (Label.BENIGN, Sex.MALE, AgeBand.AT_LEAST): 3364,
    }
)


def synthesize_cohort(table: CohortTable, prefix: str = "SYN") -> Cohort:
    """One record per unit of ``table``, one patient per record.

    Ages are fixed representatives of each band (cutoff - 20 and cutoff + 10),
    which is enough to drive the sampling steps when only cell counts are
    known.
    """
    records = []
    cutoff = table.median_age_cutoff
    for cell in CELLS:
        label, sex, band = cell
        age = cutoff - 20 if band is AgeBand.UNDER else cutoff + 10
        for _ in range(table[cell]):
            n = len(records)
            records.append(LesionRecord(f"{prefix}_{n:07d}", f"{prefix}_P{n:07d}", age, sex, label))
    return Cohort(tuple(records), (f"synthesize_cohort({json.dumps(table.to_dict()['counts'])})",))


def prepare(
    cohort: Cohort,
    seed: int,
    duplicate_pairs: Iterable[tuple[str, str]] = (),
    detector: Optional[DuplicateDetector] = None,
) -> Cohort:
    """Age filter, dedup, one image per patient, then drop unknown sex."""
    cohort = filter_defined_age(cohort)
    cohort = dedup(cohort, duplicate_pairs, detector)
    cohort = one_per_patient(cohort, seed)
    return drop_unknown_sex(cohort)
