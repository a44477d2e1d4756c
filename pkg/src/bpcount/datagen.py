"""Random-formula and graph-coloring dataset generation.

Clause lengths follow 2 + Bernoulli(0.7) + Geometric(0.4), where the
geometric counts trials until first success (support 1, 2, ...), giving
the documented mean of 5.2 literals. Lengths above max_clause_len are
resampled: unbounded tails would produce 2^k factor tables too large for
joint enumeration; this cap is recorded in dataset metadata here.

All sampling uses numpy's PCG64 generator and draws only uniform bits
(random()/integers()), so identical (params, seed) give byte-identical
datasets across platforms and numpy versions.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass

import numpy as np

from .cnf import Clause, CnfFormula, parse_dimacs, write_dimacs
from .exact import CountTimeout, count_dpll


class BudgetExhausted(RuntimeError):
    """Labelling kept timing out / rejecting; no dataset produced."""


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


@dataclass(frozen=True)
class GenParams:
    nv_min: int
    nv_max: int
    nc_min: int
    nc_max: int
    bern_p: float = 0.7
    geom_p: float = 0.4
    max_clause_len: int = 16
    seed: int = 0

    def __post_init__(self):
        if not (1 <= self.nv_min <= self.nv_max):
            raise ValueError("need 1 <= nv_min <= nv_max")
        if not (1 <= self.nc_min <= self.nc_max):
            raise ValueError("need 1 <= nc_min <= nc_max")
        for p in (self.bern_p, self.geom_p):
            if not 0.0 < p < 1.0:
                raise ValueError("probabilities must lie in (0, 1)")
        if self.max_clause_len < 3:
            raise ValueError("max_clause_len must be >= 3")


@dataclass(frozen=True)
class DatasetRecord:
    id: str
    formula: CnfFormula
    n_vars: int
    n_clauses: int
    ln_count: float


@dataclass(frozen=True)
class Graph:
    n_nodes: int
    edges: frozenset[tuple[int, int]]  # (u, v) with u < v, 0-based

    def __post_init__(self):
        for u, v in self.edges:
            if not (0 <= u < v < self.n_nodes):
                raise ValueError(f"bad edge ({u}, {v})")


def sample_clause_length(params: GenParams, rng: np.random.Generator) -> int:
    """Draw 2 + Bernoulli + Geometric, resampling draws above the cap."""
    while True:
        bern = 1 if rng.random() < params.bern_p else 0
        # inverse-CDF geometric on {1, 2, ...}
        geom = int(math.log1p(-rng.random()) // math.log1p(-params.geom_p)) + 1
        k = 2 + bern + geom
        if k <= params.max_clause_len:
            return k


def _sample_distinct_vars(n_vars: int, k: int, rng: np.random.Generator) -> list[int]:
    # partial Fisher-Yates over 1..n_vars
    pool = list(range(1, n_vars + 1))
    for i in range(k):
        j = i + int(rng.integers(0, n_vars - i))
        pool[i], pool[j] = pool[j], pool[i]
    return pool[:k]


def sample_random_formula(params: GenParams, rng: np.random.Generator) -> CnfFormula:
    """One formula: uniform variable/clause counts, unique random clauses."""
    nv = int(rng.integers(params.nv_min, params.nv_max + 1))
    nc = int(rng.integers(params.nc_min, params.nc_max + 1))
    clauses: list[Clause] = []
    keys: set[frozenset[int]] = set()
    for _ in range(nc):
        placed = False
        for _ in range(1000):
            k = min(sample_clause_length(params, rng), nv)
            lits = [
                -v if rng.random() < 0.5 else v
                for v in _sample_distinct_vars(nv, k, rng)
            ]
            key = frozenset(lits)
            if key in keys:
                continue
            keys.add(key)
            clauses.append(Clause.from_signed(lits))
            placed = True
            break
        if not placed:
            warnings.warn(
                f"clause pool exhausted after 1000 duplicate rejections; "
                f"formula truncated to {len(clauses)} clauses"
            )
            break
    return CnfFormula(nv, tuple(clauses))


def build_labeled_dataset(
    params: GenParams,
    target_count: int,
    rng: np.random.Generator | None = None,
    label_timeout_s: float = 30.0,
    max_attempts: int | None = None,
    id_prefix: str = "rand",
) -> list[DatasetRecord]:
    """Exactly target_count SAT records labeled with ln(model count).

    UNSAT and timed-out formulae are discarded and generation continues.
    """
    if target_count < 1:
        raise ValueError("target_count must be >= 1")
    rng = rng if rng is not None else make_rng(params.seed)
    if max_attempts is None:
        max_attempts = max(1000, 200 * target_count)
    records: list[DatasetRecord] = []
    attempts = 0
    while len(records) < target_count:
        if attempts >= max_attempts:
            raise BudgetExhausted(
                f"{attempts} attempts produced only {len(records)} records"
            )
        attempts += 1
        formula = sample_random_formula(params, rng)
        try:
            result = count_dpll(formula, timeout_s=label_timeout_s)
        except CountTimeout:
            continue
        if result.count == 0:
            continue
        records.append(
            DatasetRecord(
                id=f"{id_prefix}-{len(records):05d}",
                formula=formula,
                n_vars=formula.n_vars,
                n_clauses=formula.n_clauses,
                ln_count=result.ln_count,
            )
        )
    return records


# ---------------------------------------------------------------------------
# Erdos-Renyi graphs and k-coloring CNF encoding


def sample_erdos_renyi(n: int, p: float, rng: np.random.Generator) -> Graph:
    if n < 1:
        raise ValueError("n must be >= 1")
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must lie in [0, 1]")
    edges = set()
    for u in range(n):
        for v in range(u + 1, n):
            if rng.random() < p:
                edges.add((u, v))
    return Graph(n, frozenset(edges))


def encode_k_coloring(g: Graph, k: int) -> CnfFormula:
    """CNF whose model count equals the number of proper k-colorings.

    Variable (v, c) gets index v*k + c + 1. At-most-one is encoded
    pairwise: auxiliary variables would distort the count.
    """
    if k < 1:
        raise ValueError("k must be >= 1")

    def var(v: int, c: int) -> int:
        return v * k + c + 1

    clauses: list[list[int]] = []
    for v in range(g.n_nodes):
        clauses.append([var(v, c) for c in range(k)])
        for c1 in range(k):
            for c2 in range(c1 + 1, k):
                clauses.append([-var(v, c1), -var(v, c2)])
    for u, v in sorted(g.edges):
        for c in range(k):
            clauses.append([-var(u, c), -var(v, c)])
    return CnfFormula.from_signed(g.n_nodes * k, clauses)


def build_coloring_dataset(
    graph_n: int,
    graph_p: float,
    k: int,
    target_count: int,
    rng: np.random.Generator,
    label_timeout_s: float = 30.0,
    max_attempts: int | None = None,
) -> list[DatasetRecord]:
    """Labeled k-coloring instances over Erdos-Renyi graphs; colorable only."""
    if max_attempts is None:
        max_attempts = max(1000, 200 * target_count)
    records: list[DatasetRecord] = []
    attempts = 0
    while len(records) < target_count:
        if attempts >= max_attempts:
            raise BudgetExhausted(
                f"{attempts} attempts produced only {len(records)} records"
            )
        attempts += 1
        g = sample_erdos_renyi(graph_n, graph_p, rng)
        formula = encode_k_coloring(g, k)
        try:
            result = count_dpll(formula, timeout_s=label_timeout_s)
        except CountTimeout:
            continue
        if result.count == 0:
            continue
        records.append(
            DatasetRecord(
                id=f"color-{len(records):05d}",
                formula=formula,
                n_vars=formula.n_vars,
                n_clauses=formula.n_clauses,
                ln_count=result.ln_count,
            )
        )
    return records


# ---------------------------------------------------------------------------
# dataset files: JSON lines, one record per line


def save_dataset_jsonl(path: str, records: list[DatasetRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(
                json.dumps(
                    {
                        "id": r.id,
                        "dimacs": write_dimacs(r.formula),
                        "n_vars": r.n_vars,
                        "n_clauses": r.n_clauses,
                        "ln_count": r.ln_count,
                    }
                )
                + "\n"
            )


def load_dataset_jsonl(path: str) -> list[DatasetRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            records.append(
                DatasetRecord(
                    id=obj["id"],
                    formula=parse_dimacs(obj["dimacs"]),
                    n_vars=obj["n_vars"],
                    n_clauses=obj["n_clauses"],
                    ln_count=obj["ln_count"],
                )
            )
    return records
