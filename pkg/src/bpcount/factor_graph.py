"""Clause/variable factor graphs with log-domain factor tables.

Each clause becomes one factor whose 2^k table is 0.0 (= ln 1) on
satisfying local assignments and NEG_SENTINEL on the single falsifying
one. The sentinel is finite so log-sum-exp and gradients stay finite;
a falsified configuration weighs e^-100 ~ 3.7e-44, negligible at desk
scale. Bit s of a table index is the value of the variable in slot s.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cnf import CnfFormula
from .exact import InstanceTooLarge

NEG_SENTINEL = -100.0

PARTITION_MAX_VARS = 20
_CHUNK_BITS = 16


@dataclass(frozen=True)
class Factor:
    var_ids: tuple[int, ...]  # 1-based, distinct, in clause order
    log_table: np.ndarray  # shape (2**k,), read-only

    @property
    def arity(self) -> int:
        return len(self.var_ids)


@dataclass(frozen=True)
class FactorGraph:
    n_vars: int
    factors: tuple[Factor, ...]
    # per variable (0-based), ordered (factor index, slot) pairs
    var_adjacency: tuple[tuple[tuple[int, int], ...], ...]

    @property
    def degrees(self) -> np.ndarray:
        return np.array([len(adj) for adj in self.var_adjacency], dtype=np.int64)

    @property
    def n_edges(self) -> int:
        return sum(f.arity for f in self.factors)


def from_cnf(formula: CnfFormula) -> FactorGraph:
    """Build the factor graph of a normalized formula (no empty clauses)."""
    factors = []
    adjacency: list[list[tuple[int, int]]] = [[] for _ in range(formula.n_vars)]
    for j, clause in enumerate(formula.clauses):
        lits = clause.signed()
        if len(lits) == 0:
            raise ValueError("empty clause has no factor-graph form (count is 0)")
        var_ids = tuple(abs(l) for l in lits)
        if len(set(var_ids)) != len(var_ids):
            raise ValueError("clause repeats a variable; normalize the formula first")
        table = np.zeros(1 << len(lits))
        falsify = 0
        for s, lit in enumerate(lits):
            if lit < 0:
                falsify |= 1 << s  # negative literal is false when the var is 1
        table[falsify] = NEG_SENTINEL
        table.flags.writeable = False
        factors.append(Factor(var_ids, table))
        for s, v in enumerate(var_ids):
            adjacency[v - 1].append((j, s))
    return FactorGraph(
        formula.n_vars,
        tuple(factors),
        tuple(tuple(adj) for adj in adjacency),
    )


def partition_bruteforce(fg: FactorGraph) -> float:
    """ln Z by direct log-space summation over all 2^n assignments."""
    n = fg.n_vars
    if n > PARTITION_MAX_VARS:
        raise InstanceTooLarge(f"n_vars={n} exceeds {PARTITION_MAX_VARS}")
    chunk = 1 << min(n, _CHUNK_BITS)
    ln_z = -np.inf
    for base in range(0, 1 << n, chunk):
        idx = np.arange(base, base + chunk, dtype=np.int64)
        logw = np.zeros(chunk)
        for f in fg.factors:
            local = np.zeros(chunk, dtype=np.int64)
            for s, v in enumerate(f.var_ids):
                local |= ((idx >> (v - 1)) & 1) << s
            logw += f.log_table[local]
        m = float(logw.max())
        ln_z = np.logaddexp(ln_z, m + np.log(np.exp(logw - m).sum()))
    return float(ln_z)


def is_tree(fg: FactorGraph) -> bool:
    """True iff the bipartite graph is a forest (acyclic per component)."""
    n_nodes = fg.n_vars + len(fg.factors)
    parent = list(range(n_nodes))

    def find(x: int) -> int:
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    n_edges = 0
    for j, f in enumerate(fg.factors):
        for v in f.var_ids:
            n_edges += 1
            a, b = find(v - 1), find(fg.n_vars + j)
            if a == b:
                return False  # edge inside a component closes a cycle
            parent[a] = b
    return True
