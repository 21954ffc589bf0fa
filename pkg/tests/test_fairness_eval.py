import io
import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as hst

from lesionfair.errors import PreconditionError, UndefinedAUCError, ValidationError
from lesionfair.fairness_eval import (
    Direction,
    Method,
    PredictionSet,
    auc,
    auc_score,
    compare_subgroups,
    emit_boxplot_data,
    evaluate,
    mann_whitney,
    midranks,
    placements,
    read_boxplot_csv,
    read_predictions,
    star_band,
    write_boxplot_csv,
    write_predictions,
)


def pairwise_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = sum((p > n) + 0.5 * (p == n) for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def pairwise_u(a, b):
    return sum((x > y) + 0.5 * (x == y) for x in a for y in b)


def enumeration_p(a, b):
    """Exact two-sided p by listing every relabelling of the pooled sample."""
    pooled = list(a) + list(b)
    n, n_a = len(pooled), len(a)
    observed = pairwise_u(a, b)
    lower = upper = total = 0
    for subset in itertools.combinations(range(n), n_a):
        rest = [pooled[i] for i in range(n) if i not in subset]
        u = pairwise_u([pooled[i] for i in subset], rest)
        total += 1
        lower += u <= observed + 1e-9
        upper += u >= observed - 1e-9
    return min(1.0, 2 * min(lower, upper) / total)


def graded_set(k, sexes="F", seed=0, scenario="S", strategy="base"):
    """10 positives and 10 negatives whose AUC is exactly k / 100."""
    assert 0 <= k <= 100
    wins = [min(10, max(0, k - 10 * i)) for i in range(10)]
    neg = [(j + 1) / 12 for j in range(10)]
    pos = [(c + 0.5) / 12 for c in wins]
    ids = [f"{sexes}{seed}_{i}" for i in range(20)]
    return pos + neg, [1] * 10 + [0] * 10, ids


def run_with(k_f, k_m, seed, scenario="S", strategy="base"):
    sf, lf, idf = graded_set(k_f, "F", seed)
    sm, lm, idm = graded_set(k_m, "M", seed)
    return PredictionSet(idf + idm, sf + sm, lf + lm, ["F"] * 20 + ["M"] * 20, scenario, seed, strategy)


def test_auc_examples():
    assert auc_score([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert auc_score([0.5] * 4, [0, 1, 0, 1]) == 0.5
    assert auc_score([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75
    with pytest.raises(UndefinedAUCError):
        auc_score([0.1, 0.2], [1, 1])


def test_auc_matches_pairwise_oracle():
    rng = np.random.default_rng(0)
    for _ in range(300):
        n = int(rng.integers(2, 200))
        labels = rng.integers(0, 2, n)
        labels[:2] = [0, 1]
        scores = rng.integers(0, 10, n) / 10
        assert auc_score(scores, labels) == pytest.approx(pairwise_auc(scores, labels), abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(data=hst.lists(hst.tuples(hst.integers(0, 5), hst.integers(0, 1)), min_size=2, max_size=40))
def test_auc_invariants(data):
    scores = np.array([s for s, _ in data], dtype=float)
    labels = np.array([y for _, y in data])
    if labels.min() == labels.max():
        return
    base = auc_score(scores, labels)
    assert auc_score(np.exp(scores) * 3 + 1, labels) == pytest.approx(base, abs=1e-12)
    assert auc_score(scores, 1 - labels) == pytest.approx(1 - base, abs=1e-12)
    assert 0.0 <= base <= 1.0


def test_midranks_ties():
    assert midranks([3, 1, 3, 2]).tolist() == [3.5, 1.0, 3.5, 2.0]


def test_mann_whitney_examples():
    r = mann_whitney([1, 2, 3], [4, 5, 6])
    assert r.p_value == pytest.approx(0.1) and r.band == "*" and r.method is Method.EXACT
    assert r.u == 0.0
    same = mann_whitney([1, 2, 3], [1, 2, 3])
    assert same.p_value == 1.0 and same.band == "ns"
    with pytest.raises(ValidationError):
        mann_whitney([], [1.0])
    with pytest.raises(ValidationError):
        mann_whitney(range(9), range(9), "exact")


def test_exact_matches_enumeration_oracle():
    rng = np.random.default_rng(1)
    for total in range(2, 13):
        for n_a in range(1, total):
            n_b = total - n_a
            a = rng.integers(0, 5, n_a)
            b = rng.integers(0, 5, n_b)
            assert mann_whitney(a, b, "exact").p_value == pytest.approx(enumeration_p(a, b), abs=1e-12)
            assert mann_whitney(a, b).u == pairwise_u(a, b)


def test_exact_symmetric_and_normal_close():
    rng = np.random.default_rng(2)
    for _ in range(30):
        a, b = rng.normal(size=8), rng.normal(0.5, 1, 8)
        exact = mann_whitney(a, b, "exact")
        assert mann_whitney(b, a, "exact").p_value == pytest.approx(exact.p_value, abs=1e-12)
        # largest gap over all untied 8 vs 8 layouts is 0.0109 (at U = 24)
        assert abs(exact.p_value - mann_whitney(a, b, "normal").p_value) < 0.011


@pytest.mark.parametrize(
    "p, band",
    [(0.0, "****"), (0.0001, "****"), (0.00010001, "***"), (0.001, "***"), (0.0010001, "**"),
     (0.01, "**"), (0.010001, "*"), (0.1, "*"), (0.100001, "ns"), (1.0, "ns")],
)
def test_star_band_boundaries(p, band):
    assert star_band(p) == band


def test_compare_subgroups_examples():
    runs = [run_with(70 + i, 80 + i, seed=i) for i in range(5)]
    assert auc(runs[0], "F") == pytest.approx(0.70)
    assert auc(runs[0], "M") == pytest.approx(0.80)
    sig, rep = compare_subgroups(runs)
    assert sig.p_value == pytest.approx(2 / 252)
    assert sig.band == "**"
    assert sig.direction is Direction.FEMALE_LOWER
    assert rep.auc_female == pytest.approx(0.72)
    assert rep.n_female == 100

    sig, _ = compare_subgroups([run_with(75, 75, seed=i) for i in range(5)])
    assert sig.direction is Direction.COMPARABLE and sig.band == "ns"

    with pytest.raises(PreconditionError):
        compare_subgroups(runs[:1])

    lesion, _ = compare_subgroups(runs, mode="lesion")
    assert lesion.method is Method.NORMAL
    assert lesion.direction is Direction.FEMALE_LOWER


def test_placements_average_to_auc():
    run = run_with(63, 88, seed=0)
    p = placements(run, "F")
    assert p[:10].mean() == pytest.approx(auc(run, "F"))
    assert p[10:].mean() == pytest.approx(auc(run, "F"))


def test_boxplot_rows_and_roundtrip(tmp_path):
    runs = [
        run_with(60 + i + j, 70 + i, seed=i, scenario=sc, strategy=st)
        for i in range(5)
        for j, sc in enumerate(["M100", "F25M75", "F50M50", "F75M25", "F100"])
        for st in ("base", "reinforce", "adversarial")
    ]
    reports = [rep for _, rep in evaluate(runs)]
    rows = emit_boxplot_data(reports)
    assert len(rows) == 150
    assert rows == sorted(rows)
    buf = io.StringIO()
    write_boxplot_csv(rows, buf)
    assert read_boxplot_csv(io.StringIO(buf.getvalue())) == rows
    empty = io.StringIO()
    write_boxplot_csv([], empty)
    assert empty.getvalue().strip() == "scenario,strategy,subgroup,seed,auc"


def test_predictions_roundtrip():
    run = run_with(55, 90, seed=3, scenario="F50M50", strategy="reinforce")
    buf = io.StringIO()
    write_predictions(run, buf)
    (back,) = read_predictions(io.StringIO(buf.getvalue()))
    assert back.ids == run.ids and np.array_equal(back.scores, run.scores)
    assert (back.scenario, back.seed, back.strategy) == ("F50M50", 3, "reinforce")
