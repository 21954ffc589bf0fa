import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as hst

from lesionfair.cohort import (
    ARCHIVE_SNAPSHOT,
    CELLS,
    AgeBand,
    Cohort,
    CohortTable,
    Label,
    LesionRecord,
    Sex,
    synthesize_cohort,
    tabulate,
)
from lesionfair.errors import CapacityError, ValidationError
from lesionfair.lp_core import LpSolution, Status, enumerate_vertices, solve
from lesionfair.scenario import (
    TABLE1,
    VAR_NAMES,
    ScenarioSpec,
    build_all_scenarios,
    build_lp,
    derive_ratios,
    fraction_from_name,
    read_manifest,
    reproduce_table1,
    reserve_test_cells,
    round_solution,
    sample_dataset,
    scenario_name,
    solve_scenario,
    split_train_val,
    write_manifest,
)

SNAPSHOT_COHORT = synthesize_cohort(ARCHIVE_SNAPSHOT)
MAL_M_UNDER = (Label.MALIGNANT, Sex.MALE, AgeBand.UNDER)


def spec(f, **kw):
    return ScenarioSpec(f, **kw)


def test_derive_ratios():
    assert derive_ratios(spec(0.5)).r == 1.0
    assert derive_ratios(spec(0.25)).r == 3.0
    assert derive_ratios(spec(0.25)).w == 3.0
    assert derive_ratios(spec(0.0)).male_only
    assert derive_ratios(spec(1.0)).female_only
    assert derive_ratios(spec(0.5, age_ratio=2.0)).s == 2.0
    with pytest.raises(ValidationError):
        spec(1.5)


def test_scenario_names():
    assert [scenario_name(f) for f in (0, 0.25, 0.5, 0.75, 1)] == list(TABLE1)
    assert fraction_from_name("F75M25") == 0.75


def test_lp_shape_and_balanced_optimum():
    problem = build_lp(ARCHIVE_SNAPSHOT.minus(158), derive_ratios(spec(0.5)))
    assert problem.num_vars == 14 and len(problem.eq_constraints) == 13
    sol = solve(problem)
    assert sol.objective_value == pytest.approx(2206 * 2)
    assert sol.value(problem, "x3") == pytest.approx(2206)
    assert sol.value(problem, "x4") == pytest.approx(2206)
    assert enumerate_vertices(problem).objective_value == pytest.approx(sol.objective_value)


def test_male_only_optimum():
    problem = build_lp(ARCHIVE_SNAPSHOT.minus(158), derive_ratios(spec(0.0)))
    sol = solve(problem)
    assert sol.objective_value == pytest.approx(2206)
    assert sol.value(problem, "x4") == 0.0


def test_zero_malignant_gives_zero_optimum():
    counts = {c: (0 if c[0] is Label.MALIGNANT else 100) for c in CELLS}
    sol = solve(build_lp(CohortTable(counts), derive_ratios(spec(0.5))))
    assert sol.status is Status.OPTIMAL
    assert sol.values == (0.0,) * 14


def test_table1_and_objectives():
    out = reproduce_table1(ARCHIVE_SNAPSHOT)
    assert all(row["match"] for row in out.values())
    assert out["F25M75"]["objective"] == pytest.approx(2206 + 2206 / 3)
    assert out["F75M25"]["objective"] == pytest.approx(2426 + 2426 / 3)


def test_rounding_examples():
    values = dict.fromkeys(VAR_NAMES, 0.0)
    values.update(x3=808.67, x4=2426.0, x5=808.67, x6=2426.0, x7=404.335, x8=404.335, x9=1213, x10=1213)
    sol = LpSolution(Status.OPTIMAL, tuple(values[n] for n in VAR_NAMES), 3234.67)
    t = round_solution(sol)
    assert t.sex_counts() == (809, 2426, 809, 2426)
    assert t.cells[MAL_M_UNDER] == 405
    assert t.cells[(Label.MALIGNANT, Sex.MALE, AgeBand.AT_LEAST)] == 404
    assert round_solution(solve_scenario(ARCHIVE_SNAPSHOT, spec(0.25))[1]).sex_counts()[1] == 735


def test_integral_solution_rounds_to_itself():
    _, sol, t = solve_scenario(ARCHIVE_SNAPSHOT, spec(0.5))
    assert t.malignant == 4412
    assert t.cells[MAL_M_UNDER] == 1103


def test_reserve_test_cells():
    test_ids, remaining = reserve_test_cells(SNAPSHOT_COHORT, 158, seed=0)
    assert len(test_ids) == 1264
    assert tabulate(remaining)[MAL_M_UNDER] == 1103
    assert not set(test_ids) & set(remaining.image_ids)
    assert reserve_test_cells(SNAPSHOT_COHORT, 158, seed=0)[0] == test_ids
    assert reserve_test_cells(SNAPSHOT_COHORT, 0, seed=0)[0] == ()
    with pytest.raises(CapacityError, match="malignant/M/under60"):
        reserve_test_cells(SNAPSHOT_COHORT, 1262, seed=0)


def test_sample_and_split():
    _, remaining = reserve_test_cells(SNAPSHOT_COHORT, 158, seed=0)
    _, _, targets = solve_scenario(ARCHIVE_SNAPSHOT, spec(0.5))
    sample = sample_dataset(remaining, targets, seed=0, stream=5000)
    assert len(sample) == 8824
    assert tabulate(sample).counts == dict(targets.cells)
    assert sample == sample_dataset(remaining, targets, seed=0, stream=5000)

    _, _, male = solve_scenario(ARCHIVE_SNAPSHOT, spec(0.0))
    train, val = split_train_val(sample_dataset(remaining, male, seed=0), seed=0)
    assert (len(train), len(val)) == (3528, 884)

    zero = round_solution(LpSolution(Status.OPTIMAL, (0.0,) * 14, 0.0))
    assert len(sample_dataset(remaining, zero, seed=0)) == 0


def test_split_small_toy():
    records = [LesionRecord(f"I{i}", f"P{i}", 30, Sex.FEMALE, Label.BENIGN if i < 5 else Label.MALIGNANT) for i in range(10)]
    train, val = split_train_val(Cohort(tuple(records)), seed=1)
    assert (len(train), len(val)) == (8, 2)
    assert not set(train) & set(val)


def test_build_all_scenarios_and_manifest(tmp_path):
    specs = [spec(f, seeds=(0, 1)) for f in (0.0, 0.25, 0.5, 0.75, 1.0)]
    plans = build_all_scenarios(SNAPSHOT_COHORT, specs)
    assert len(plans) == 10
    for plan in plans:
        mal_m, mal_f, ben_m, ben_f = plan.targets.sex_counts()
        assert (mal_m, mal_f) == TABLE1[plan.scenario]
        assert plan.targets.malignant == plan.targets.benign
        roles = [set(plan.train), set(plan.val), set(plan.test)]
        assert sum(map(len, roles)) == len(set().union(*roles))
        assert len(plan.test) == 1264
    # same seed shares the test set across scenarios
    assert plans[0].test == plans[2].test
    assert plans[0].test != plans[1].test
    assert build_all_scenarios(SNAPSHOT_COHORT, []) == []

    buf = io.StringIO()
    write_manifest(plans, buf)
    rows = read_manifest(buf.getvalue())
    assert len(rows) == sum(len(p.manifest_rows()) for p in plans)
    assert rows[0]["seed"] == 0


def test_capacity_error_names_scenario_and_seed():
    with pytest.raises(CapacityError, match="seed 3"):
        build_all_scenarios(SNAPSHOT_COHORT, [spec(0.5, seeds=(3,), test_cell_size=2000)])


table_st = hst.fixed_dictionaries({c: hst.integers(0, 400) for c in CELLS})


@settings(max_examples=40, deadline=None)
@given(counts=table_st, f=hst.sampled_from([0.0, 0.25, 0.5, 0.75, 1.0]), cell=hst.sampled_from(CELLS), extra=hst.integers(1, 200))
def test_objective_monotone_in_bounds(counts, f, cell, extra):
    ratios = derive_ratios(spec(f))
    base = solve(build_lp(CohortTable(counts), ratios))
    bigger = dict(counts)
    bigger[cell] += extra
    more = solve(build_lp(CohortTable(bigger), ratios))
    assert more.objective_value >= base.objective_value - 1e-7


@settings(max_examples=40, deadline=None)
@given(counts=table_st, f=hst.sampled_from([0.25, 0.5, 0.75]))
def test_rounded_targets_respect_ratio_and_bounds(counts, f):
    table = CohortTable(counts)
    ratios = derive_ratios(spec(f))
    sol = solve(build_lp(table, ratios))
    t = round_solution(sol, ratios)
    assert t.malignant == t.benign or abs(t.malignant - t.benign) <= 2
    mal_m, mal_f, _, _ = t.sex_counts()
    assert abs(mal_f * ratios.r - mal_m) <= ratios.r + 1
    for c in CELLS:
        assert 0 <= t.cells[c] <= table[c] + 1
    assert np.all(np.array(sol.values) >= 0)
