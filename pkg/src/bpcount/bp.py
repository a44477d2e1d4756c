"""Damped loopy belief propagation in log space with Bethe readout.

Messages live on directed edges of the factor graph, two reals each
(log messages for the variable's two values). Every message is kept
log-normalized (logsumexp = 0); messages are defined up to scale, so
this only prevents drift. Updates are synchronous: both directions of
iteration k+1 are computed from iteration k, then damped together.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .factor_graph import FactorGraph

LOG_HALF = -np.log(2.0)


@dataclass
class BpOptions:
    max_iters: int = 5
    damping: float = 0.5
    convergence_tol: float = 1e-8

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not 0.0 <= self.damping <= 1.0:
            raise ValueError("damping must be in [0, 1]")


@dataclass
class MessageState:
    v2f: np.ndarray  # (E, 2) log messages variable -> factor
    f2v: np.ndarray  # (E, 2) log messages factor -> variable
    iteration: int = 0

    def copy(self) -> "MessageState":
        return MessageState(self.v2f.copy(), self.f2v.copy(), self.iteration)


@dataclass
class BetheSummary:
    U: float  # Bethe average energy
    H: float  # Bethe entropy
    F: float  # U - H
    # per iteration: (sum b ln f, -sum_factors b ln b, sum_i (deg-1) sum b ln b)
    per_iteration: list[tuple[float, float, float]] = field(default_factory=list)


class EdgeIndex:
    """Factor-major directed-edge enumeration shared by all BP routines."""

    def __init__(self, fg: FactorGraph):
        self.fg = fg
        self.n_edges = fg.n_edges
        self.factor_start = np.zeros(len(fg.factors) + 1, dtype=np.int64)
        edge_var = []
        for j, f in enumerate(fg.factors):
            self.factor_start[j + 1] = self.factor_start[j] + f.arity
            edge_var.extend(v - 1 for v in f.var_ids)
        self.edge_var = np.array(edge_var, dtype=np.int64)
        self.var_edges = [
            np.array(
                [self.factor_start[j] + s for j, s in fg.var_adjacency[i]],
                dtype=np.int64,
            )
            for i in range(fg.n_vars)
        ]


def _normalize(msgs: np.ndarray) -> np.ndarray:
    """Log-normalize each length-2 row: logsumexp(row) = 0."""
    m = msgs.max(axis=1, keepdims=True)
    lse = m + np.log(np.exp(msgs - m).sum(axis=1, keepdims=True))
    return msgs - lse


def init_messages(fg: FactorGraph) -> MessageState:
    """All messages uniform (-ln 2, -ln 2), iteration 0."""
    e = fg.n_edges
    return MessageState(
        np.full((e, 2), LOG_HALF), np.full((e, 2), LOG_HALF), iteration=0
    )


def bp_step(fg: FactorGraph, state: MessageState, index: EdgeIndex | None = None) -> MessageState:
    """One synchronous sweep of both message directions, each re-normalized."""
    idx = index if index is not None else EdgeIndex(fg)
    e = idx.n_edges

    # variable -> factor: sum of incoming f2v excluding the target factor
    totals = np.zeros((fg.n_vars, 2))
    np.add.at(totals, idx.edge_var, state.f2v)
    new_v2f = _normalize(totals[idx.edge_var] - state.f2v)

    # factor -> variable: LSE over the other variables' joint assignments
    new_f2v = np.empty((e, 2))
    for j, f in enumerate(fg.factors):
        k = f.arity
        base = idx.factor_start[j]
        joint = f.log_table.copy()
        assign = np.arange(1 << k)
        bits = [(assign >> s) & 1 for s in range(k)]
        for s in range(k):
            joint = joint + state.v2f[base + s][bits[s]]
        for s in range(k):
            # subtract this slot's own message, then reduce over the rest
            for x in (0, 1):
                sel = joint[bits[s] == x] - state.v2f[base + s, x]
                m = sel.max()
                new_f2v[base + s, x] = m + np.log(np.exp(sel - m).sum())
    new_f2v = _normalize(new_f2v)
    return MessageState(new_v2f, new_f2v, state.iteration + 1)


def damp(prev: MessageState, new: MessageState, alpha: float) -> MessageState:
    """Blend alpha*new + (1-alpha)*prev per log message, then re-normalize."""
    if prev.v2f.shape != new.v2f.shape or prev.f2v.shape != new.f2v.shape:
        raise ValueError("message shapes differ")
    return MessageState(
        _normalize(alpha * new.v2f + (1.0 - alpha) * prev.v2f),
        _normalize(alpha * new.f2v + (1.0 - alpha) * prev.f2v),
        new.iteration,
    )


def variable_beliefs(fg: FactorGraph, state: MessageState, index: EdgeIndex | None = None) -> np.ndarray:
    """Per-variable (n, 2) marginals; degree-0 variables get (0.5, 0.5)."""
    idx = index if index is not None else EdgeIndex(fg)
    logb = np.zeros((fg.n_vars, 2))
    np.add.at(logb, idx.edge_var, state.f2v)
    return np.exp(_normalize(logb))


def factor_beliefs(fg: FactorGraph, state: MessageState, index: EdgeIndex | None = None) -> list[np.ndarray]:
    """Per-factor tables of 2^k probabilities."""
    idx = index if index is not None else EdgeIndex(fg)
    out = []
    for j, f in enumerate(fg.factors):
        k = f.arity
        base = idx.factor_start[j]
        joint = f.log_table.copy()
        assign = np.arange(1 << k)
        for s in range(k):
            joint = joint + state.v2f[base + s][(assign >> s) & 1]
        m = joint.max()
        out.append(np.exp(joint - (m + np.log(np.exp(joint - m).sum()))))
    return out


_BELIEF_FLOOR = 1e-20  # below this, b ln b and b ln f terms are treated as 0


def bethe_features(
    fg: FactorGraph, v_beliefs: np.ndarray, f_beliefs: list[np.ndarray]
) -> tuple[float, float, float]:
    """The three readout sums: (sum b ln f, factor entropy, signed var term).

    -F = u + h_factor + h_var for these conventions.
    """
    u = 0.0
    h_factor = 0.0
    for f, b in zip(fg.factors, f_beliefs):
        live = b >= _BELIEF_FLOOR
        u += float((b * f.log_table)[live].sum())
        h_factor -= float((b * np.log(np.where(live, b, 1.0)))[live].sum())
    live = v_beliefs >= _BELIEF_FLOOR
    blnb = np.where(live, v_beliefs * np.log(np.where(live, v_beliefs, 1.0)), 0.0)
    h_var = float(((fg.degrees - 1.0)[:, None] * blnb).sum())
    return u, h_factor, h_var


def bethe_free_energy(
    fg: FactorGraph, v_beliefs: np.ndarray, f_beliefs: list[np.ndarray]
) -> BetheSummary:
    u, h_factor, h_var = bethe_features(fg, v_beliefs, f_beliefs)
    return BetheSummary(U=-u, H=h_factor + h_var, F=-u - (h_factor + h_var))


def estimate_ln_count(
    fg: FactorGraph, opts: BpOptions | None = None
) -> tuple[float, BetheSummary, bool]:
    """Run damped BP for up to T iterations; return (-F, summary, converged)."""
    opts = opts or BpOptions()
    idx = EdgeIndex(fg)
    state = init_messages(fg)
    converged = False
    per_iteration: list[tuple[float, float, float]] = []
    for _ in range(opts.max_iters):
        raw = bp_step(fg, state, idx)
        new = damp(state, raw, opts.damping)
        delta = 0.0
        if idx.n_edges:
            delta = max(
                float(np.abs(new.v2f - state.v2f).max()),
                float(np.abs(new.f2v - state.f2v).max()),
            )
        state = new
        per_iteration.append(
            bethe_features(
                fg, variable_beliefs(fg, state, idx), factor_beliefs(fg, state, idx)
            )
        )
        if delta < opts.convergence_tol:
            converged = True
            break
    summary = bethe_free_energy(
        fg, variable_beliefs(fg, state, idx), factor_beliefs(fg, state, idx)
    )
    summary.per_iteration = per_iteration
    return -summary.F, summary, converged
