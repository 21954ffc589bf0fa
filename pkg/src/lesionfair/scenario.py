"""Sex-ratio scenarios: LP model, rounding, test reservation and manifests.

For each seed a balanced test set (``test_cell_size`` records from each of
the eight cells) is drawn once and shared by every scenario of that seed.
The remaining counts bound a 14-variable LP whose optimum fixes how many
malignant and benign lesions each sex/age cell contributes; the rounded
optimum is sampled and split 80/20 into train and validation manifests.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

from .cohort import (
    CELLS,
    PRNG_NAME,
    AgeBand,
    Cell,
    Cohort,
    CohortTable,
    Label,
    Sex,
    cell_key,
    make_rng,
    tabulate,
)
from .errors import CapacityError, InfeasibleError, PreconditionError, ValidationError
from .lp_core import LpProblem, LpSolution, Status, solve

DEFAULT_SEEDS = (0, 1, 2, 3, 4)
DEFAULT_FRACTIONS = (0.0, 0.25, 0.5, 0.75, 1.0)
DEFAULT_TEST_CELL_SIZE = 158
VAL_FRACTION = 0.2

VAR_NAMES = tuple(f"x{j}" for j in range(1, 15))

# decision variable bounded by each cohort cell
CELL_VARIABLE: dict[Cell, str] = {
    (Label.MALIGNANT, Sex.MALE, AgeBand.UNDER): "x7",
    (Label.MALIGNANT, Sex.MALE, AgeBand.AT_LEAST): "x8",
    (Label.MALIGNANT, Sex.FEMALE, AgeBand.UNDER): "x9",
    (Label.MALIGNANT, Sex.FEMALE, AgeBand.AT_LEAST): "x10",
    (Label.BENIGN, Sex.MALE, AgeBand.UNDER): "x11",
    (Label.BENIGN, Sex.MALE, AgeBand.AT_LEAST): "x12",
    (Label.BENIGN, Sex.FEMALE, AgeBand.UNDER): "x13",
    (Label.BENIGN, Sex.FEMALE, AgeBand.AT_LEAST): "x14",
}

# sex-level variable and its (under60, atLeast60) children
SEX_GROUPS = {
    "x3": ((Label.MALIGNANT, Sex.MALE), "x7", "x8"),
    "x4": ((Label.MALIGNANT, Sex.FEMALE), "x9", "x10"),
    "x5": ((Label.BENIGN, Sex.MALE), "x11", "x12"),
    "x6": ((Label.BENIGN, Sex.FEMALE), "x13", "x14"),
}

# Reference counts: scenario -> (malignant male, malignant female); benign mirrors it
TABLE1 = {
    "M100": (2206, 0),
    "F25M75": (2206, 735),
    "F50M50": (2206, 2206),
    "F75M25": (809, 2426),
    "F100": (0, 2426),
}


def scenario_name(female_fraction: float) -> str:
    pct_f = round(female_fraction * 100)
    if pct_f == 0:
        return "M100"
    if pct_f == 100:
        return "F100"
    return f"F{pct_f}M{100 - pct_f}"


def fraction_from_name(name: str) -> float:
    for f in DEFAULT_FRACTIONS:
        if scenario_name(f) == name:
            return f
    if name.startswith("F") and "M" in name:
        return int(name[1 : name.index("M")]) / 100
    raise ValidationError(f"unknown scenario name '{name}'")


@dataclass(frozen=True)
class ScenarioSpec:
    female_fraction: float
    age_ratio: float = 1.0
    seeds: tuple[int, ...] = DEFAULT_SEEDS
    test_cell_size: int = DEFAULT_TEST_CELL_SIZE

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if not 0.0 <= self.female_fraction <= 1.0:
            raise ValidationError(f"female_fraction must lie in [0, 1], got {self.female_fraction}")
        if not self.age_ratio > 0:
            raise ValidationError(f"age_ratio must be > 0, got {self.age_ratio}")
        if not self.seeds or len(set(self.seeds)) != len(self.seeds):
            raise ValidationError("seeds must be non-empty and distinct")
        if self.test_cell_size < 0:
            raise ValidationError("test_cell_size must be >= 0")

    @property
    def name(self) -> str:
        return scenario_name(self.female_fraction)


@dataclass(frozen=True)
class RatioSet:
    """Ratios in the LP's ratio rows; ``None`` where a degenerate flag applies."""

    r: Optional[float]
    s: float
    t: float
    u: float
    v: float
    w: Optional[float]
    female_only: bool = False
    male_only: bool = False


def derive_ratios(spec: ScenarioSpec) -> RatioSet:
    f = spec.female_fraction
    a = spec.age_ratio
    if f == 0.0:
        return RatioSet(None, a, a, a, a, None, male_only=True)
    if f == 1.0:
        return RatioSet(None, a, a, a, a, None, female_only=True)
    r = (1.0 - f) / f
    return RatioSet(r, a, a, a, a, r)


def build_lp(table: CohortTable, ratios: RatioSet) -> LpProblem:
    """LP that maximises the malignant total under the scenario's ratios.

    Rows, in order: malignant == benign; male/female malignant ratio (or a
    zero row in single-sex scenarios); three age-ratio and three
    sum-consistency rows for malignant; two age-ratio rows for benign; three
    benign sum-consistency rows; male/female benign ratio (or zero row).
    """
    idx = {name: i for i, name in enumerate(VAR_NAMES)}

    def row(**coef: float) -> tuple[tuple[float, ...], float]:
        vec = [0.0] * len(VAR_NAMES)
        for name, a in coef.items():
            vec[idx[name]] = a
        return tuple(vec), 0.0

    if ratios.male_only:
        mal_sex, ben_sex = row(x4=1), row(x6=1)
    elif ratios.female_only:
        mal_sex, ben_sex = row(x3=1), row(x5=1)
    else:
        mal_sex = row(x4=ratios.r, x3=-1)
        ben_sex = row(x6=ratios.w, x5=-1)

    rows = (
        row(x1=1, x2=-1),
        mal_sex,
        row(x8=ratios.s, x7=-1),
        row(x10=ratios.t, x9=-1),
        row(x1=1, x3=-1, x4=-1),
        row(x3=1, x7=-1, x8=-1),
        row(x4=1, x9=-1, x10=-1),
        row(x12=ratios.u, x11=-1),
        row(x14=ratios.v, x13=-1),
        row(x2=1, x5=-1, x6=-1),
        row(x6=1, x13=-1, x14=-1),
        row(x5=1, x11=-1, x12=-1),
        ben_sex,
    )

    ub: dict[str, float] = {CELL_VARIABLE[c]: float(table[c]) for c in CELLS}
    for parent, (_, lo, hi) in SEX_GROUPS.items():
        ub[parent] = ub[lo] + ub[hi]
    ub["x1"] = ub["x3"] + ub["x4"]
    ub["x2"] = ub["x5"] + ub["x6"]
    objective = [1.0] + [0.0] * (len(VAR_NAMES) - 1)
    return LpProblem(len(VAR_NAMES), objective, rows, tuple(ub[n] for n in VAR_NAMES), VAR_NAMES)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5)) if x >= 0 else -int(math.floor(-x + 0.5))


@dataclass(frozen=True)
class RoundedTargets:
    """Integer sample sizes per cell plus the sex-level and class totals."""

    cells: Mapping[Cell, int]
    sex_totals: Mapping[str, int]

    @property
    def malignant(self) -> int:
        return self.sex_totals["x1"]

    @property
    def benign(self) -> int:
        return self.sex_totals["x2"]

    def sex_counts(self) -> tuple[int, int, int, int]:
        """(malignant M, malignant F, benign M, benign F)."""
        t = self.sex_totals
        return t["x3"], t["x4"], t["x5"], t["x6"]

    def to_dict(self) -> dict:
        return {
            "cells": {cell_key(c): self.cells[c] for c in CELLS},
            "totals": dict(self.sex_totals),
        }


def round_solution(solution: LpSolution, ratios: RatioSet = RatioSet(1.0, 1.0, 1.0, 1.0, 1.0, 1.0)) -> RoundedTargets:
    """Round an LP optimum to integer per-cell targets.

    Sex-level totals are rounded half away from zero and then split between
    age bands according to the band ratio; an odd unit goes to the
    under-60 band.
    """
    if solution.status is not Status.OPTIMAL:
        raise PreconditionError(f"cannot round a {solution.status.value} solution")
    values = dict(zip(VAR_NAMES, solution.values))
    band_ratio = {"x3": ratios.s, "x4": ratios.t, "x5": ratios.u, "x6": ratios.v}
    cells: dict[Cell, int] = {}
    totals: dict[str, int] = {}
    for parent, ((label, sex), _, _) in SEX_GROUPS.items():
        total = _round_half_up(values[parent])
        q = band_ratio[parent]
        under = _round_half_up(total * q / (1.0 + q))
        cells[(label, sex, AgeBand.UNDER)] = under
        cells[(label, sex, AgeBand.AT_LEAST)] = total - under
        totals[parent] = total
    totals["x1"] = totals["x3"] + totals["x4"]
    totals["x2"] = totals["x5"] + totals["x6"]
    return RoundedTargets({c: cells[c] for c in CELLS}, {k: totals[k] for k in ("x1", "x2", "x3", "x4", "x5", "x6")})


def _draw(records: Sequence, k: int, rng) -> list:
    """Uniform draw of ``k`` records, returned in input order."""
    picks = sorted(rng.choice(len(records), size=k, replace=False).tolist()) if k else []
    return [records[i] for i in picks]


def reserve_test_cells(cohort: Cohort, per_cell: int, seed: int) -> tuple[tuple[str, ...], Cohort]:
    """Draw ``per_cell`` records from every cell as the balanced test set."""
    groups = cohort.by_cell()
    short = [f"{cell_key(c)} ({len(groups[c])} < {per_cell})" for c in CELLS if len(groups[c]) < per_cell]
    if short:
        raise CapacityError("cannot reserve test set, short cells: " + ", ".join(short))
    rng = make_rng(seed, 1)
    test = set()
    for c in CELLS:
        test.update(r.image_id for r in _draw(groups[c], per_cell, rng))
    test_ids = tuple(r.image_id for r in cohort.records if r.image_id in test)
    remaining = cohort.derive(
        (r for r in cohort.records if r.image_id not in test),
        f"reserve_test_cells(per_cell={per_cell}, seed={seed})",
    )
    return test_ids, remaining


def _stream(spec_fraction: float) -> int:
    return int(round(spec_fraction * 10_000))


def sample_dataset(remaining: Cohort, targets: RoundedTargets, seed: int, stream: int = 0) -> Cohort:
    groups = remaining.by_cell()
    short = [
        f"{cell_key(c)} ({len(groups[c])} < {targets.cells[c]})" for c in CELLS if len(groups[c]) < targets.cells[c]
    ]
    if short:
        raise CapacityError("cannot sample dataset, short cells: " + ", ".join(short))
    rng = make_rng(seed, 2, stream)
    chosen = set()
    for c in CELLS:
        chosen.update(r.image_id for r in _draw(groups[c], targets.cells[c], rng))
    return remaining.derive(
        (r for r in remaining.records if r.image_id in chosen), f"sample_dataset(seed={seed}, stream={stream})"
    )


def split_train_val(
    sample: Cohort, seed: int, stream: int = 0, val_fraction: float = VAL_FRACTION
) -> tuple[tuple[str, ...], tuple[str, ...]]:
    """Stratified train/validation split over the eight cells.

    Each cell sends ``round_half_up(val_fraction * n_cell)`` records to
    validation, so a 4412-lesion single-sex sample (four cells of 1103)
    yields 3528/884.
    """
    rng = make_rng(seed, 4, stream)
    val = set()
    for recs in sample.by_cell().values():
        n_val = _round_half_up(val_fraction * len(recs))
        val.update(r.image_id for r in _draw(recs, n_val, rng))
    train = tuple(r.image_id for r in sample.records if r.image_id not in val)
    return train, tuple(r.image_id for r in sample.records if r.image_id in val)


@dataclass(frozen=True)
class DatasetPlan:
    scenario: str
    seed: int
    female_fraction: float
    test: tuple[str, ...]
    train: tuple[str, ...]
    val: tuple[str, ...]
    targets: RoundedTargets
    solution: LpSolution
    problem: LpProblem = field(repr=False)
    bounds: CohortTable = field(repr=False)

    def manifest_rows(self) -> list[tuple[str, str, int, str]]:
        rows = []
        for role, ids in (("train", self.train), ("val", self.val), ("test", self.test)):
            rows.extend((i, self.scenario, self.seed, role) for i in ids)
        return rows

    def summary(self) -> dict:
        return {
            "scenario": self.scenario,
            "seed": self.seed,
            "female_fraction": self.female_fraction,
            "sizes": {"train": len(self.train), "val": len(self.val), "test": len(self.test)},
            "bounds": self.bounds.to_dict(),
            "lp": {"problem": self.problem.to_dict(), "solution": self.solution.to_dict()},
            "targets": self.targets.to_dict(),
            "prng": {
                "algorithm": PRNG_NAME,
                "seeding": "SeedSequence([seed, stream...])",
                "streams": {
                    "reserve_test_cells": [self.seed, 1],
                    "sample_dataset": [self.seed, 2, _stream(self.female_fraction)],
                    "split_train_val": [self.seed, 4, _stream(self.female_fraction)],
                },
            },
        }


MANIFEST_COLUMNS = ("image_id", "scenario", "seed", "role")


def write_manifest(plans: Iterable[DatasetPlan], stream, delimiter: str = ",") -> None:
    writer = csv.writer(stream, delimiter=delimiter, lineterminator="\n")
    writer.writerow(MANIFEST_COLUMNS)
    for plan in plans:
        writer.writerows(plan.manifest_rows())


def read_manifest(stream) -> list[dict]:
    text = stream.read() if hasattr(stream, "read") else stream
    delimiter = "\t" if "\t" in text.split("\n", 1)[0] else ","
    return [dict(r, seed=int(r["seed"])) for r in csv.DictReader(io.StringIO(text), delimiter=delimiter)]


def plan_for(
    remaining: Cohort,
    test_ids: tuple[str, ...],
    spec: ScenarioSpec,
    seed: int,
) -> DatasetPlan:
    table = tabulate(remaining)
    ratios = derive_ratios(spec)
    problem = build_lp(table, ratios)
    solution = solve(problem)
    if solution.status is not Status.OPTIMAL:
        raise InfeasibleError(f"scenario {spec.name}, seed {seed}: LP is {solution.status.value}")
    targets = round_solution(solution, ratios)
    stream = _stream(spec.female_fraction)
    try:
        sample = sample_dataset(remaining, targets, seed, stream)
    except CapacityError as exc:
        raise CapacityError(f"scenario {spec.name}, seed {seed}: {exc}") from exc
    train, val = split_train_val(sample, seed, stream)
    return DatasetPlan(spec.name, seed, spec.female_fraction, test_ids, train, val, targets, solution, problem, table)


def build_all_scenarios(cohort: Cohort, specs: Sequence[ScenarioSpec]) -> list[DatasetPlan]:
    """Plans for every (scenario, seed); ordered by spec, then seed.

    The balanced test set for a given (seed, test_cell_size) is reserved
    once and reused across scenarios.
    """
    reserved: dict[tuple[int, int], tuple[tuple[str, ...], Cohort]] = {}
    plans = []
    for spec in specs:
        for seed in spec.seeds:
            key = (seed, spec.test_cell_size)
            if key not in reserved:
                try:
                    reserved[key] = reserve_test_cells(cohort, spec.test_cell_size, seed)
                except CapacityError as exc:
                    raise CapacityError(f"scenario {spec.name}, seed {seed}: {exc}") from exc
            test_ids, remaining = reserved[key]
            plans.append(plan_for(remaining, test_ids, spec, seed))
    return plans


def solve_scenario(table: CohortTable, spec: ScenarioSpec, reserve: bool = True) -> tuple[LpProblem, LpSolution, RoundedTargets]:
    """LP and rounded targets straight from a count table (no sampling)."""
    bounds = table.minus(spec.test_cell_size) if reserve else table
    ratios = derive_ratios(spec)
    problem = build_lp(bounds, ratios)
    solution = solve(problem)
    if solution.status is not Status.OPTIMAL:
        raise InfeasibleError(f"scenario {spec.name}: LP is {solution.status.value}")
    return problem, solution, round_solution(solution, ratios)


def reproduce_table1(
    table: CohortTable, test_cell_size: int = DEFAULT_TEST_CELL_SIZE
) -> dict[str, dict]:
    """Sex-level counts for the five scenarios next to the reference values."""
    out = {}
    for f in DEFAULT_FRACTIONS:
        spec = ScenarioSpec(f, test_cell_size=test_cell_size)
        _, solution, targets = solve_scenario(table, spec)
        mal_m, mal_f, ben_m, ben_f = targets.sex_counts()
        expected = TABLE1[spec.name]
        out[spec.name] = {
            "malignant": [mal_m, mal_f],
            "benign": [ben_m, ben_f],
            "objective": solution.objective_value,
            "expected": list(expected),
            "match": (mal_m, mal_f) == expected and (ben_m, ben_f) == expected,
        }
    return out


def load_scenario_config(d: Mapping) -> list[ScenarioSpec]:
    """Scenario specs from a JSON-like mapping; unspecified keys use defaults."""
    fractions = d.get("female_fractions", DEFAULT_FRACTIONS)
    seeds = d.get("seeds", DEFAULT_SEEDS)
    return [
        ScenarioSpec(
            float(f),
            age_ratio=float(d.get("age_ratio", 1.0)),
            seeds=tuple(seeds),
            test_cell_size=int(d.get("test_cell_size", DEFAULT_TEST_CELL_SIZE)),
        )
        for f in fractions
    ]


def dump_summary(plan: DatasetPlan) -> str:
    return json.dumps(plan.summary(), indent=2, sort_keys=True) + "\n"
