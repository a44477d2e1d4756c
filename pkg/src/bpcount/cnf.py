"""CNF formulae and DIMACS CNF reading/writing."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable


class DimacsError(ValueError):
    """Malformed DIMACS CNF input."""


@dataclass(frozen=True)
class Literal:
    """A possibly negated propositional variable. Variables are 1-based."""

    variable: int
    negated: bool = False

    def __post_init__(self):
        if self.variable < 1:
            raise ValueError(f"variable index must be >= 1, got {self.variable}")

    @property
    def signed(self) -> int:
        return -self.variable if self.negated else self.variable

    @staticmethod
    def from_signed(lit: int) -> "Literal":
        if lit == 0:
            raise ValueError("0 is a clause terminator, not a literal")
        return Literal(abs(lit), lit < 0)


@dataclass(frozen=True)
class Clause:
    literals: tuple[Literal, ...]

    @staticmethod
    def from_signed(lits: Iterable[int]) -> "Clause":
        return Clause(tuple(Literal.from_signed(l) for l in lits))

    def signed(self) -> tuple[int, ...]:
        return tuple(l.signed for l in self.literals)

    def key(self) -> frozenset[int]:
        # order-insensitive identity: a clause is a set of literals
        return frozenset(self.signed())

    def variables(self) -> tuple[int, ...]:
        return tuple(l.variable for l in self.literals)

    def is_tautology(self) -> bool:
        s = set(self.signed())
        return any(-l in s for l in s)

    def __len__(self) -> int:
        return len(self.literals)


@dataclass(frozen=True)
class CnfFormula:
    """A CNF formula over variables 1..n_vars."""

    n_vars: int
    clauses: tuple[Clause, ...]

    def __post_init__(self):
        if self.n_vars < 0:
            raise ValueError("n_vars must be non-negative")
        for c in self.clauses:
            for lit in c.literals:
                if lit.variable > self.n_vars:
                    raise ValueError(
                        f"literal on variable {lit.variable} exceeds n_vars={self.n_vars}"
                    )

    @staticmethod
    def from_signed(n_vars: int, clauses: Iterable[Iterable[int]]) -> "CnfFormula":
        return CnfFormula(n_vars, tuple(Clause.from_signed(c) for c in clauses))

    def signed_clauses(self) -> list[list[int]]:
        return [list(c.signed()) for c in self.clauses]

    @property
    def n_clauses(self) -> int:
        return len(self.clauses)


def parse_dimacs(text: str | Iterable[str]) -> CnfFormula:
    """Parse DIMACS CNF: `c` comments, one `p cnf N M` header, 0-terminated clauses.

    Clauses may span lines; literals are whitespace-separated signed integers.
    Raises DimacsError on a missing/malformed header, out-of-range literals,
    an unterminated final clause, or a clause-count mismatch.
    """
    if isinstance(text, str):
        lines = text.splitlines()
    else:
        lines = list(text)

    n_vars = n_clauses_decl = None
    tokens: list[str] = []
    for line in lines:
        stripped = line.strip()
        if not stripped or stripped.startswith("c"):
            continue
        if stripped.startswith("p"):
            if n_vars is not None:
                raise DimacsError("duplicate `p` header")
            parts = stripped.split()
            if len(parts) != 4 or parts[0] != "p" or parts[1] != "cnf":
                raise DimacsError(f"malformed header: {stripped!r}")
            try:
                n_vars, n_clauses_decl = int(parts[2]), int(parts[3])
            except ValueError as e:
                raise DimacsError(f"malformed header: {stripped!r}") from e
            if n_vars < 0 or n_clauses_decl < 0:
                raise DimacsError(f"negative counts in header: {stripped!r}")
            continue
        if n_vars is None:
            raise DimacsError(f"clause data before `p cnf` header: {stripped!r}")
        tokens.extend(stripped.split())

    if n_vars is None:
        raise DimacsError("missing `p cnf` header")

    clauses: list[list[int]] = []
    current: list[int] = []
    for tok in tokens:
        try:
            lit = int(tok)
        except ValueError as e:
            raise DimacsError(f"non-integer token {tok!r}") from e
        if lit == 0:
            clauses.append(current)
            current = []
            continue
        if abs(lit) > n_vars:
            raise DimacsError(
                f"literal {lit} out of declared range (n_vars={n_vars})"
            )
        current.append(lit)
    if current:
        raise DimacsError("final clause not 0-terminated")
    if len(clauses) != n_clauses_decl:
        raise DimacsError(
            f"header declares {n_clauses_decl} clauses, found {len(clauses)}"
        )
    return CnfFormula.from_signed(n_vars, clauses)


def write_dimacs(formula: CnfFormula) -> str:
    """Inverse of parse_dimacs: parse_dimacs(write_dimacs(f)) == f structurally."""
    out = [f"p cnf {formula.n_vars} {formula.n_clauses}"]
    for clause in formula.clauses:
        out.append(" ".join(str(l) for l in clause.signed()) + " 0")
    return "\n".join(out) + "\n"


def normalize(formula: CnfFormula) -> CnfFormula:
    """Merge duplicate literals, drop tautological and duplicate clauses.

    Model count is preserved. First-occurrence order of clauses and of
    literals within a clause is kept, so the result is deterministic and
    the operation idempotent.
    """
    seen: set[frozenset[int]] = set()
    kept: list[Clause] = []
    for clause in formula.clauses:
        lits: list[int] = []
        present: set[int] = set()
        for l in clause.signed():
            if l not in present:
                present.add(l)
                lits.append(l)
        if any(-l in present for l in present):
            continue  # tautology: always satisfied
        key = frozenset(lits)
        if key in seen:
            continue
        seen.add(key)
        kept.append(Clause.from_signed(lits))
    return CnfFormula(formula.n_vars, tuple(kept))
