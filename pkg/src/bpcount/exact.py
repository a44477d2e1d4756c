"""Exact #SAT: chunked brute-force enumeration and counting DPLL.

The DPLL counter is the dataset-labelling oracle; brute force is the
desk-scale cross-check. Counts are Python ints (arbitrary precision) so
instances with ~10^145 models do not overflow; ln_count goes through
math.log, which is exact on big integers.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from .cnf import CnfFormula

BRUTEFORCE_MAX_VARS = 26
_CHUNK_BITS = 18  # enumerate assignments in blocks of 2^18


class InstanceTooLarge(ValueError):
    """Instance exceeds the enumeration bound."""


class CountTimeout(RuntimeError):
    """Wall-clock budget exhausted; instance should be excluded."""


@dataclass(frozen=True)
class ExactCount:
    count: int

    @property
    def ln_count(self) -> float:
        if self.count <= 0:
            raise ValueError("ln_count is defined only for count > 0")
        return math.log(self.count)


def count_bruteforce(formula: CnfFormula) -> ExactCount:
    """Count satisfying assignments by enumerating all 2^n of them."""
    n = formula.n_vars
    if n > BRUTEFORCE_MAX_VARS:
        raise InstanceTooLarge(f"n_vars={n} exceeds {BRUTEFORCE_MAX_VARS}")
    clauses = formula.signed_clauses()
    if any(len(c) == 0 for c in clauses):
        return ExactCount(0)
    total = 0
    chunk = 1 << min(n, _CHUNK_BITS)
    for base in range(0, 1 << n, chunk):
        idx = np.arange(base, base + chunk, dtype=np.int64)
        sat = np.ones(chunk, dtype=bool)
        for clause in clauses:
            falsified = np.ones(chunk, dtype=bool)
            for lit in clause:
                bit = (idx >> (abs(lit) - 1)) & 1
                # literal is false when the bit disagrees with its sign
                falsified &= bit == (1 if lit < 0 else 0)
            sat &= ~falsified
        total += int(sat.sum())
    return ExactCount(total)


def _propagate(clauses: list[list[int]], assignment: dict[int, bool]):
    """Unit propagation. Returns simplified clauses or None on conflict."""
    while True:
        unit = None
        simplified: list[list[int]] = []
        for clause in clauses:
            cur: list[int] = []
            satisfied = False
            for lit in clause:
                val = assignment.get(abs(lit))
                if val is None:
                    cur.append(lit)
                elif val == (lit > 0):
                    satisfied = True
                    break
            if satisfied:
                continue
            if not cur:
                return None  # empty clause: conflict
            if len(cur) == 1 and unit is None:
                unit = cur[0]
            simplified.append(cur)
        if unit is None:
            return simplified
        val = unit > 0
        prev = assignment.get(abs(unit))
        if prev is not None and prev != val:
            return None
        assignment[abs(unit)] = val
        clauses = simplified


def _branch_var(clauses: list[list[int]]) -> int:
    """Most frequent unassigned variable, ties broken by lowest index."""
    freq: dict[int, int] = {}
    for clause in clauses:
        for lit in clause:
            v = abs(lit)
            freq[v] = freq.get(v, 0) + 1
    return min(freq, key=lambda v: (-freq[v], v))


def _count_rec(clauses, assignment, n_vars, deadline) -> int:
    if deadline is not None and time.monotonic() > deadline:
        raise CountTimeout("DPLL counting exceeded the wall-clock budget")
    assignment = dict(assignment)
    simplified = _propagate(clauses, assignment)
    if simplified is None:
        return 0
    if not simplified:
        return 1 << (n_vars - len(assignment))
    v = _branch_var(simplified)
    total = 0
    for val in (True, False):
        child = dict(assignment)
        child[v] = val
        total += _count_rec(simplified, child, n_vars, deadline)
    return total


def count_dpll(formula: CnfFormula, timeout_s: float | None = None) -> ExactCount:
    """DPLL counting with unit propagation.

    Satisfied sub-branches contribute 2^(unassigned variables). Branching is
    on the most frequent variable (lowest index on ties) for determinism.
    """
    clauses = formula.signed_clauses()
    if any(len(c) == 0 for c in clauses):
        return ExactCount(0)
    deadline = None if timeout_s is None else time.monotonic() + timeout_s
    return ExactCount(_count_rec(clauses, {}, formula.n_vars, deadline))


def _sat_rec(clauses, assignment, deadline) -> bool:
    if deadline is not None and time.monotonic() > deadline:
        raise CountTimeout("DPLL decision exceeded the wall-clock budget")
    assignment = dict(assignment)
    simplified = _propagate(clauses, assignment)
    if simplified is None:
        return False
    if not simplified:
        return True
    v = _branch_var(simplified)
    for val in (True, False):
        child = dict(assignment)
        child[v] = val
        if _sat_rec(simplified, child, deadline):
            return True
    return False


def is_satisfiable(formula: CnfFormula, timeout_s: float | None = None) -> bool:
    """DPLL decision with early exit; agrees with count_dpll(f).count > 0."""
    clauses = formula.signed_clauses()
    if any(len(c) == 0 for c in clauses):
        return False
    deadline = None if timeout_s is None else time.monotonic() + timeout_s
    return _sat_rec(clauses, {}, deadline)
