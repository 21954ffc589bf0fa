"""Dense two-phase simplex for small equality-constrained LPs.

Problems have the form::

    maximize    c . x
    subject to  A x = b
                0 <= x_j <= u_j   (u_j optional)

Upper bounds become slack rows before the simplex runs.  Pivoting follows
Bland's rule so degenerate, equality-heavy models terminate.

``enumerate_vertices`` solves the same problem by brute force over basic
solutions and exists as an independent check on ``solve``.
"""

from __future__ import annotations

import enum
import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import SizeError, ValidationError

PIVOT_TOL = 1e-9
FEAS_TOL = 1e-6
MAX_ENUMERATION = 2_000_000


class Status(str, enum.Enum):
    OPTIMAL = "Optimal"
    INFEASIBLE = "Infeasible"
    UNBOUNDED = "Unbounded"


@dataclass(frozen=True)
class LpProblem:
    num_vars: int
    objective: tuple[float, ...]
    eq_constraints: tuple[tuple[tuple[float, ...], float], ...] = ()
    upper_bounds: tuple[Optional[float], ...] = ()
    var_names: tuple[str, ...] = ()

    def __post_init__(self):
        # normalise sequences so instances hash and compare by value
        object.__setattr__(self, "objective", tuple(float(c) for c in self.objective))
        rows = tuple((tuple(float(a) for a in row), float(rhs)) for row, rhs in self.eq_constraints)
        object.__setattr__(self, "eq_constraints", rows)
        ub = tuple(self.upper_bounds) or (None,) * self.num_vars
        object.__setattr__(self, "upper_bounds", tuple(None if u is None else float(u) for u in ub))
        names = tuple(self.var_names) or tuple(f"x{j + 1}" for j in range(self.num_vars))
        object.__setattr__(self, "var_names", names)

    @property
    def A(self) -> np.ndarray:
        return np.array([row for row, _ in self.eq_constraints], dtype=float).reshape(
            len(self.eq_constraints), self.num_vars
        )

    @property
    def b(self) -> np.ndarray:
        return np.array([rhs for _, rhs in self.eq_constraints], dtype=float)

    def to_dict(self) -> dict:
        return {
            "var_names": list(self.var_names),
            "objective": list(self.objective),
            "rows": [list(row) for row, _ in self.eq_constraints],
            "rhs": [rhs for _, rhs in self.eq_constraints],
            "upper_bounds": list(self.upper_bounds),
        }

    def to_json(self, **kwargs) -> str:
        """Debug dump; ``kwargs`` go to :func:`json.dumps`."""
        return json.dumps(self.to_dict(), **kwargs)

    @classmethod
    def from_dict(cls, d: dict) -> "LpProblem":
        names = d.get("var_names") or ()
        objective = d["objective"]
        return cls(
            num_vars=len(objective),
            objective=objective,
            eq_constraints=tuple(zip(d.get("rows", []), d.get("rhs", []))),
            upper_bounds=d.get("upper_bounds") or (),
            var_names=names,
        )


@dataclass(frozen=True)
class LpSolution:
    status: Status
    values: tuple[float, ...] = ()
    objective_value: float = math.nan
    iterations: int = field(default=0, compare=False)

    def value(self, problem: LpProblem, name: str) -> float:
        return self.values[problem.var_names.index(name)]

    def to_dict(self) -> dict:
        return {
            "status": self.status.value,
            "values": list(self.values),
            "objective_value": None if math.isnan(self.objective_value) else self.objective_value,
        }


def validate(problem: LpProblem) -> list[str]:
    """Return every violated structural rule; an empty list means well-formed."""
    issues = []
    n = problem.num_vars
    if n < 1:
        issues.append(f"num_vars must be >= 1, got {n}")
    if len(problem.objective) != n:
        issues.append(f"objective has length {len(problem.objective)}, expected {n}")
    for i, c in enumerate(problem.objective):
        if not math.isfinite(c):
            issues.append(f"objective[{i}] is not finite")
    for i, (row, rhs) in enumerate(problem.eq_constraints):
        if len(row) != n:
            issues.append(f"row {i} has length {len(row)}, expected {n}")
        if not all(math.isfinite(a) for a in row):
            issues.append(f"row {i} has a non-finite coefficient")
        if not math.isfinite(rhs) or rhs < 0:
            issues.append(f"row {i} rhs must be finite and >= 0, got {rhs}")
    if len(problem.upper_bounds) != n:
        issues.append(f"upper_bounds has length {len(problem.upper_bounds)}, expected {n}")
    for name, u in zip(problem.var_names, problem.upper_bounds):
        if u is not None and (not math.isfinite(u) or u < 0):
            issues.append(f"upper bound of {name} must be finite and >= 0, got {u}")
    if len(problem.var_names) != n:
        issues.append(f"var_names has length {len(problem.var_names)}, expected {n}")
    return issues


def _check(problem: LpProblem) -> None:
    issues = validate(problem)
    if issues:
        raise ValidationError("malformed LP: " + "; ".join(issues))


def _finish(problem: LpProblem, x: np.ndarray, iterations: int = 0) -> LpSolution:
    x = np.where(np.abs(x) < PIVOT_TOL, 0.0, x)
    ub = problem.upper_bounds
    for j, u in enumerate(ub):
        if u is not None and u < x[j] <= u + FEAS_TOL:
            x[j] = u
    values = tuple(float(v) for v in x)
    obj = float(sum(c * v for c, v in zip(problem.objective, values)))
    return LpSolution(Status.OPTIMAL, values, obj, iterations)


# -- simplex -----------------------------------------------------------------


class _Tableau:
    """Row-reduced tableau ``[B^-1 A | B^-1 b]`` with an explicit basis list."""

    def __init__(self, A: np.ndarray, b: np.ndarray, basis: list[int]):
        self.T = np.hstack([A, b[:, None]]).astype(float)
        self.basis = list(basis)
        self.iterations = 0

    def pivot(self, r: int, c: int) -> None:
        T = self.T
        T[r] /= T[r, c]
        col = T[:, c].copy()
        col[r] = 0.0
        T -= np.outer(col, T[r])
        T[:, c] = 0.0
        T[r, c] = 1.0
        self.basis[r] = c
        self.iterations += 1

    def run(self, cost: np.ndarray, allowed: int) -> bool:
        """Minimise ``cost . x`` over columns ``< allowed``; False if unbounded."""
        T = self.T
        while True:
            cb = cost[self.basis]
            reduced = cost[:allowed] - cb @ T[:, :allowed]
            entering = next((j for j in range(allowed) if reduced[j] < -PIVOT_TOL), None)
            if entering is None:
                return True
            col = T[:, entering]
            best_row, best_ratio = None, math.inf
            for i in range(T.shape[0]):
                if col[i] > PIVOT_TOL:
                    ratio = T[i, -1] / col[i]
                    if ratio < best_ratio - PIVOT_TOL or (
                        abs(ratio - best_ratio) <= PIVOT_TOL and self.basis[i] < self.basis[best_row]
                    ):
                        best_row, best_ratio = i, ratio
            if best_row is None:
                return False
            self.pivot(best_row, entering)


def solve(problem: LpProblem) -> LpSolution:
    """Maximise ``problem.objective`` with the two-phase simplex method."""
    _check(problem)
    n = problem.num_vars
    A_eq, b_eq = problem.A, problem.b
    m = A_eq.shape[0]
    bounded = [j for j, u in enumerate(problem.upper_bounds) if u is not None]
    k = len(bounded)

    # columns: originals | bound slacks | artificials for equality rows
    ncols = n + k + m
    A = np.zeros((m + k, ncols))
    b = np.zeros(m + k)
    A[:m, :n] = A_eq
    b[:m] = b_eq
    for i, j in enumerate(bounded):
        A[m + i, j] = 1.0
        A[m + i, n + i] = 1.0
        b[m + i] = problem.upper_bounds[j]
    A[:m, n + k :] = np.eye(m)
    basis = [n + k + i for i in range(m)] + [n + i for i in range(k)]
    tab = _Tableau(A, b, basis)

    phase1 = np.zeros(ncols)
    phase1[n + k :] = 1.0
    tab.run(phase1, ncols)
    if phase1[tab.basis] @ tab.T[:, -1] > FEAS_TOL:
        return LpSolution(Status.INFEASIBLE, iterations=tab.iterations)

    # drive artificials out of the basis, dropping redundant rows
    keep = []
    for r in range(tab.T.shape[0]):
        if tab.basis[r] >= n + k:
            c = next((j for j in range(n + k) if abs(tab.T[r, j]) > PIVOT_TOL), None)
            if c is None:
                continue
            tab.pivot(r, c)
        keep.append(r)
    tab.T = np.delete(tab.T[keep], np.s_[n + k : ncols], axis=1)
    tab.basis = [tab.basis[r] for r in keep]

    phase2 = np.zeros(n + k)
    phase2[:n] = -np.asarray(problem.objective)
    if not tab.run(phase2, n + k):
        return LpSolution(Status.UNBOUNDED, iterations=tab.iterations)

    x = np.zeros(n + k)
    x[tab.basis] = tab.T[:, -1]
    return _finish(problem, x[:n], tab.iterations)


# -- brute-force oracle ------------------------------------------------------


def _independent_rows(A: np.ndarray, b: np.ndarray):
    """Drop linearly dependent equality rows; None if the system is inconsistent."""
    if A.shape[0] == 0:
        return A, b
    rank_a = np.linalg.matrix_rank(A)
    if np.linalg.matrix_rank(np.hstack([A, b[:, None]])) > rank_a:
        return None
    rows = []
    for i in range(A.shape[0]):
        trial = rows + [i]
        if np.linalg.matrix_rank(A[trial]) == len(trial):
            rows = trial
    return A[rows], b[rows]


def _vertices(A: np.ndarray, b: np.ndarray, ub: Sequence[Optional[float]]):
    """Yield every basic feasible point of ``A x = b, 0 <= x <= ub``."""
    n = A.shape[1]
    reduced = _independent_rows(A, b)
    if reduced is None:
        return
    A, b = reduced
    r = A.shape[0]
    if r > n:
        return
    total = 0
    for basic in itertools.combinations(range(n), r):
        nonbasic = [j for j in range(n) if j not in basic]
        levels = [(0.0,) if ub[j] is None else (0.0, ub[j]) for j in nonbasic]
        total += math.prod(len(lv) for lv in levels)
        if total > MAX_ENUMERATION:
            raise SizeError(f"vertex enumeration exceeds {MAX_ENUMERATION} candidates")
        B = A[:, list(basic)]
        if r and abs(np.linalg.det(B)) < 1e-12:
            continue
        for fixed in itertools.product(*levels):
            x = np.zeros(n)
            x[nonbasic] = fixed
            if r:
                x[list(basic)] = np.linalg.solve(B, b - A[:, nonbasic] @ np.asarray(fixed))
            if np.any(x < -FEAS_TOL):
                continue
            if any(u is not None and x[j] > u + FEAS_TOL for j, u in enumerate(ub)):
                continue
            yield x


def enumerate_vertices(problem: LpProblem) -> LpSolution:
    """Exact optimum by enumerating all basic feasible solutions.

    Unboundedness is detected by enumerating the extreme directions of the
    recession cone (normalised to sum 1) and looking for one that improves
    the objective.  Raises :class:`SizeError` when the candidate count is
    out of reach.
    """
    _check(problem)
    A, b = problem.A, problem.b
    c = np.asarray(problem.objective)
    ub = problem.upper_bounds
    best = None
    best_obj = -math.inf
    for x in _vertices(A, b, ub):
        obj = float(c @ x)
        if obj > best_obj + 1e-12:
            best, best_obj = x, obj
    if best is None:
        return LpSolution(Status.INFEASIBLE)

    free = [j for j, u in enumerate(ub) if u is None]
    if free:
        n = problem.num_vars
        # recession cone: A d = 0, d >= 0, d_j = 0 on bounded vars, sum(d) = 1
        rows = [A, np.ones((1, n))]
        rhs = [np.zeros(A.shape[0]), np.ones(1)]
        for j in range(n):
            if ub[j] is not None:
                e = np.zeros((1, n))
                e[0, j] = 1.0
                rows.append(e)
                rhs.append(np.zeros(1))
        for d in _vertices(np.vstack(rows), np.concatenate(rhs), [None] * n):
            if c @ d > PIVOT_TOL:
                return LpSolution(Status.UNBOUNDED)
    return _finish(problem, best)


def residuals(problem: LpProblem, solution: LpSolution) -> dict[str, float]:
    """Worst equality, lower-bound and upper-bound violations of a solution."""
    x = np.asarray(solution.values)
    eq = float(np.max(np.abs(problem.A @ x - problem.b))) if problem.eq_constraints else 0.0
    lower = float(max(0.0, -x.min()))
    upper = max(
        [0.0] + [x[j] - u for j, u in enumerate(problem.upper_bounds) if u is not None]
    )
    return {"equality": eq, "lower": lower, "upper": float(upper)}
