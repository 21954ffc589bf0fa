"""Subgroup AUC, Mann-Whitney significance and star banding.

AUC is computed from midranks, so ties count one half.  The Mann-Whitney
test compares per-seed subgroup AUCs (default) or per-lesion placement
values; small samples get an exact null distribution built by dynamic
programming over rank sums.
"""

from __future__ import annotations

import csv
import enum
import glob
import io
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .errors import DataError, FormatError, PreconditionError, UndefinedAUCError, ValidationError

EXACT_MAX_TOTAL = 16
PREDICTION_COLUMNS = ("id", "score", "label", "sex", "scenario", "seed", "strategy")
BOXPLOT_COLUMNS = ("scenario", "strategy", "subgroup", "seed", "auc")


class Method(str, enum.Enum):
    EXACT = "Exact"
    NORMAL = "NormalApprox"


class Direction(str, enum.Enum):
    FEMALE_LOWER = "femaleLower"
    FEMALE_HIGHER = "femaleHigher"
    COMPARABLE = "comparable"

    @property
    def marker(self) -> str:
        return {"femaleLower": "<", "femaleHigher": ">", "comparable": "="}[self.value]


def midranks(values) -> np.ndarray:
    """1-based ranks with tied values sharing the average rank."""
    values = np.asarray(values, dtype=float)
    order = np.argsort(values, kind="mergesort")
    sorted_v = values[order]
    ranks = np.empty(len(values))
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_v[j + 1] == sorted_v[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def auc_score(scores, labels) -> float:
    """P(random positive outranks random negative), ties counted 1/2."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    pos = labels == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAUCError(f"AUC needs both classes (positives={n_pos}, negatives={n_neg})")
    r = midranks(scores)
    u = r[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class PredictionSet:
    ids: tuple[str, ...]
    scores: np.ndarray
    labels: np.ndarray
    sexes: tuple[str, ...]
    scenario: str = ""
    seed: int = 0
    strategy: str = ""

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=float)
        self.labels = np.asarray(self.labels, dtype=int)
        self.ids = tuple(self.ids)
        self.sexes = tuple(self.sexes)
        n = len(self.ids)
        if n == 0:
            raise DataError("prediction set is empty")
        if not (len(self.scores) == len(self.labels) == len(self.sexes) == n):
            raise DataError("prediction columns differ in length")
        if len(set(self.ids)) != n:
            raise DataError(f"duplicate ids in predictions for {self.context}")
        if not set(self.sexes) <= {"F", "M"}:
            raise DataError(f"sex must be F or M in {self.context}")
        if not np.all((self.labels == 0) | (self.labels == 1)):
            raise DataError(f"labels must be 0/1 in {self.context}")

    @property
    def context(self) -> str:
        return f"scenario={self.scenario} strategy={self.strategy} seed={self.seed}"

    def mask(self, subgroup: Optional[str]) -> np.ndarray:
        if subgroup is None:
            return np.ones(len(self.ids), dtype=bool)
        return np.array([s == subgroup for s in self.sexes])


def auc(predictions: PredictionSet, subgroup: Optional[str] = None) -> float:
    """AUC overall (``subgroup=None``) or for the ``"F"`` / ``"M"`` subgroup."""
    m = predictions.mask(subgroup)
    try:
        return auc_score(predictions.scores[m], predictions.labels[m])
    except UndefinedAUCError as exc:
        raise UndefinedAUCError(f"subgroup {subgroup or 'overall'} ({predictions.context}): {exc}") from exc


def star_band(p: float) -> str:
    if p <= 0.0001:
        return "****"
    if p <= 0.001:
        return "***"
    if p <= 0.01:
        return "**"
    if p <= 0.1:
        return "*"
    return "ns"


@dataclass(frozen=True)
class SignificanceResult:
    u: float
    p_value: float
    method: Method
    band: str
    direction: Direction = Direction.COMPARABLE

    def to_dict(self) -> dict:
        return {
            "U": self.u,
            "p_value": self.p_value,
            "method": self.method.value,
            "band": self.band,
            "direction": self.direction.value,
            "marker": self.direction.marker,
        }


def _exact_null_counts(doubled_ranks: np.ndarray, n_a: int) -> dict[int, int]:
    """Number of size-``n_a`` subsets per doubled rank sum."""
    # dp[k] maps a doubled rank sum to the count of k-subsets reaching it
    dp: list[dict[int, int]] = [defaultdict(int) for _ in range(n_a + 1)]
    dp[0][0] = 1
    for r in doubled_ranks.astype(int):
        for k in range(n_a - 1, -1, -1):
            for s, c in list(dp[k].items()):
                dp[k + 1][s + r] += c
    return dp[n_a]


def _normal_p(u: float, n_a: int, n_b: int, ranks: np.ndarray) -> float:
    n = n_a + n_b
    _, counts = np.unique(ranks, return_counts=True)
    tie_term = float(np.sum(counts**3 - counts)) / (n * (n - 1)) if n > 1 else 0.0
    var = n_a * n_b / 12.0 * ((n + 1) - tie_term)
    if var <= 0:
        return 1.0
    z = max(abs(u - n_a * n_b / 2.0) - 0.5, 0.0) / math.sqrt(var)
    return min(1.0, math.erfc(z / math.sqrt(2.0)))


def mann_whitney(sample_a, sample_b, mode: str = "auto") -> SignificanceResult:
    """Two-sided Mann-Whitney U test of ``sample_a`` against ``sample_b``.

    ``U`` is reported for ``sample_a``.  ``mode`` is ``"exact"``,
    ``"normal"`` or ``"auto"`` (exact when the combined size is at most
    16).  The exact p doubles the smaller tail of the permutation
    distribution, capped at 1; the normal approximation uses tie-corrected
    variance and a 0.5 continuity correction.
    """
    a = np.asarray(sample_a, dtype=float)
    b = np.asarray(sample_b, dtype=float)
    if len(a) == 0 or len(b) == 0:
        raise ValidationError("both samples must be non-empty")
    n_a, n_b = len(a), len(b)
    ranks = midranks(np.concatenate([a, b]))
    rank_sum_a = ranks[:n_a].sum()
    u = float(rank_sum_a - n_a * (n_a + 1) / 2.0)

    mode = mode.lower()
    if mode not in ("exact", "normal", "auto"):
        raise ValidationError(f"unknown mode '{mode}'")
    if mode == "auto":
        mode = "exact" if n_a + n_b <= EXACT_MAX_TOTAL else "normal"
    if mode == "exact":
        if n_a + n_b > EXACT_MAX_TOTAL:
            raise ValidationError(f"exact test limited to {EXACT_MAX_TOTAL} observations in total")
        counts = _exact_null_counts(2 * ranks, n_a)
        observed = int(round(2 * rank_sum_a))
        total = sum(counts.values())
        lower = sum(c for s, c in counts.items() if s <= observed)
        upper = sum(c for s, c in counts.items() if s >= observed)
        p = min(1.0, 2.0 * min(lower, upper) / total)
        method = Method.EXACT
    else:
        p = _normal_p(u, n_a, n_b, ranks)
        method = Method.NORMAL
    return SignificanceResult(u, p, method, star_band(p))


def direction_of(female, male) -> Direction:
    mf, mm = float(np.median(female)), float(np.median(male))
    if mf < mm:
        return Direction.FEMALE_LOWER
    if mf > mm:
        return Direction.FEMALE_HIGHER
    return Direction.COMPARABLE


@dataclass
class SubgroupReport:
    scenario: str
    strategy: str
    seeds: tuple[int, ...]
    auc_overall: float
    auc_female: float
    auc_male: float
    n_female: int
    n_male: int
    per_seed: dict[str, list[float]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario,
            "strategy": self.strategy,
            "seeds": list(self.seeds),
            "auc_overall": self.auc_overall,
            "auc_female": self.auc_female,
            "auc_male": self.auc_male,
            "n_female": self.n_female,
            "n_male": self.n_male,
            "per_seed": self.per_seed,
        }


def placements(predictions: PredictionSet, subgroup: str) -> np.ndarray:
    """Per-lesion AUC contributions within a subgroup.

    A positive's placement is the fraction of the subgroup's negatives it
    outranks (ties 1/2) and vice versa for negatives; the mean over
    positives equals the subgroup AUC.
    """
    m = predictions.mask(subgroup)
    s, y = predictions.scores[m], predictions.labels[m]
    pos, neg = s[y == 1], s[y == 0]
    if len(pos) == 0 or len(neg) == 0:
        raise UndefinedAUCError(f"subgroup {subgroup} ({predictions.context}) lacks a class")
    pos_place = ((pos[:, None] > neg[None, :]) + 0.5 * (pos[:, None] == neg[None, :])).mean(axis=1)
    neg_place = ((pos[:, None] > neg[None, :]) + 0.5 * (pos[:, None] == neg[None, :])).mean(axis=0)
    return np.concatenate([pos_place, neg_place])


def compare_subgroups(
    runs: Sequence[PredictionSet], mode: str = "auc", test_mode: str = "auto"
) -> tuple[SignificanceResult, SubgroupReport]:
    """Female-vs-male significance for one scenario x strategy group.

    ``mode="auc"`` tests the per-seed female AUCs against the per-seed male
    AUCs; ``mode="lesion"`` tests pooled per-lesion placement values.  The
    direction marker compares medians of the per-seed AUCs.
    """
    if not runs:
        raise PreconditionError("no runs to compare")
    seeds = [r.seed for r in runs]
    if len(set(seeds)) < 2 or len(set(seeds)) != len(seeds):
        raise PreconditionError(f"need >= 2 distinct seeds per group, got {seeds}")
    runs = sorted(runs, key=lambda r: r.seed)
    scenario, strategy = runs[0].scenario, runs[0].strategy
    overall = [auc(r) for r in runs]
    female = [auc(r, "F") for r in runs]
    male = [auc(r, "M") for r in runs]

    if mode == "auc":
        result = mann_whitney(female, male, test_mode)
    elif mode == "lesion":
        fp = np.concatenate([placements(r, "F") for r in runs])
        mp = np.concatenate([placements(r, "M") for r in runs])
        result = mann_whitney(fp, mp, test_mode)
    else:
        raise ValidationError(f"unknown comparison mode '{mode}'")
    result = SignificanceResult(result.u, result.p_value, result.method, result.band, direction_of(female, male))

    report = SubgroupReport(
        scenario=scenario,
        strategy=strategy,
        seeds=tuple(r.seed for r in runs),
        auc_overall=float(np.mean(overall)),
        auc_female=float(np.mean(female)),
        auc_male=float(np.mean(male)),
        n_female=sum(int(r.mask("F").sum()) for r in runs),
        n_male=sum(int(r.mask("M").sum()) for r in runs),
        per_seed={"overall": overall, "female": female, "male": male},
    )
    return result, report


def group_runs(runs: Iterable[PredictionSet]) -> dict[tuple[str, str], list[PredictionSet]]:
    groups: dict[tuple[str, str], list[PredictionSet]] = defaultdict(list)
    for r in runs:
        groups[(r.scenario, r.strategy)].append(r)
    return {k: sorted(groups[k], key=lambda r: r.seed) for k in sorted(groups)}


def evaluate(runs: Iterable[PredictionSet], mode: str = "auc") -> list[tuple[SignificanceResult, SubgroupReport]]:
    return [compare_subgroups(g, mode) for g in group_runs(runs).values()]


def report_json(results: Sequence[tuple[SignificanceResult, SubgroupReport]], mode: str = "auc") -> str:
    entries = []
    for sig, rep in results:
        entry = rep.to_dict()
        entry["significance"] = sig.to_dict()
        entries.append(entry)
    return json.dumps({"comparison": mode, "groups": entries}, indent=2, sort_keys=True) + "\n"


def emit_boxplot_data(reports: Iterable[SubgroupReport]) -> list[tuple[str, str, str, int, float]]:
    """Long-format (scenario, strategy, subgroup, seed, auc) rows in stable order."""
    rows = []
    for rep in sorted(reports, key=lambda r: (r.scenario, r.strategy)):
        for subgroup in ("female", "male"):
            for seed, value in zip(rep.seeds, rep.per_seed.get(subgroup, [])):
                rows.append((rep.scenario, rep.strategy, subgroup, seed, value))
    return rows


def write_boxplot_csv(rows, stream) -> None:
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(BOXPLOT_COLUMNS)
    for scenario, strategy, subgroup, seed, value in rows:
        writer.writerow([scenario, strategy, subgroup, seed, repr(float(value))])


def read_boxplot_csv(stream) -> list[tuple[str, str, str, int, float]]:
    reader = csv.DictReader(stream)
    return [(r["scenario"], r["strategy"], r["subgroup"], int(r["seed"]), float(r["auc"])) for r in reader]


def write_predictions(pred: PredictionSet, stream) -> None:
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(PREDICTION_COLUMNS)
    for i, s, y, sex in zip(pred.ids, pred.scores, pred.labels, pred.sexes):
        writer.writerow([i, repr(float(s)), int(y), sex, pred.scenario, pred.seed, pred.strategy])


def read_predictions(stream) -> list[PredictionSet]:
    """Parse a predictions file; one :class:`PredictionSet` per (scenario, seed, strategy)."""
    text = stream.read() if hasattr(stream, "read") else stream
    delimiter = "\t" if "\t" in text.split("\n", 1)[0] else ","
    reader = csv.DictReader(io.StringIO(text), delimiter=delimiter)
    missing = [c for c in PREDICTION_COLUMNS if c not in (reader.fieldnames or [])]
    if missing:
        raise FormatError(f"predictions missing columns: {', '.join(missing)}")
    buckets: dict[tuple[str, int, str], list[dict]] = defaultdict(list)
    for row in reader:
        try:
            key = (row["scenario"], int(row["seed"]), row["strategy"])
        except ValueError as exc:
            raise FormatError(f"bad seed value '{row['seed']}'") from exc
        buckets[key].append(row)
    out = []
    for (scenario, seed, strategy), rows in sorted(buckets.items()):
        out.append(
            PredictionSet(
                ids=[r["id"] for r in rows],
                scores=[float(r["score"]) for r in rows],
                labels=[int(r["label"]) for r in rows],
                sexes=[r["sex"] for r in rows],
                scenario=scenario,
                seed=seed,
                strategy=strategy,
            )
        )
    return out


def load_prediction_files(pattern: str) -> list[PredictionSet]:
    paths = sorted(glob.glob(pattern))
    if not paths:
        raise FormatError(f"no prediction files match '{pattern}'")
    runs = []
    for path in paths:
        with open(path, encoding="utf-8") as fh:
            runs.extend(read_predictions(fh))
    return runs
