"""Learned BP message passing over factor graphs: BPNN, BPGAT, hybrids.

Both architectures keep BP's two-direction, log-space message schedule
(synchronous, T iterations, uniform init) and differ in how incoming
messages are transformed before aggregation:

  * BPNN passes each incoming length-2 message through a 3-layer MLP
    (one per direction) before the BP-style sum / joint log-sum-exp.
  * BPGAT transforms each incoming message with a 3-layer multi-head
    attention stack. Per layer and head, a message is projected by W,
    scored against the receiving edge's previous message, and scaled by
    softmax coefficients normalized over the exclusive neighborhood.
    Head outputs are concatenated on internal layers, averaged on the
    final one.

Attention coefficients are multiplied by the neighborhood size before
weighting ("mean-one" weights): a plain softmax-convex combination can
never reproduce BP's sum aggregation under log-normalization, and with
this scaling zero score vectors plus identity projections make every
variant collapse exactly to classic BP (the bp_identity initializer).

The readout feeds the per-iteration Bethe feature triples to an MLP
(or, in bethe_bypass mode, returns the final iteration's Bethe estimate
directly, which is what the BP-equivalence tests use).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ParamSet, Tensor
from .bp import LOG_HALF
from .factor_graph import FactorGraph

VARIANTS = (
    "bpgat",
    "bpnn",
    "fvgat_vfnone",
    "fvnone_vfgat",
    "fvgat_vfmlp",
    "fvmlp_vfgat",
)
DAMPING_MODES = ("delta_f2v", "delta_v2f", "delta_all", "fixed_all")
READOUTS = ("mlp3", "bethe_bypass")
INITS = ("seeded_random", "bp_identity")

_BELIEF_FLOOR = 1e-20


def update_kinds(variant: str) -> tuple[str, str]:
    """(v2f_kind, f2v_kind), each of gat / mlp / none (= plain BP)."""
    table = {
        "bpgat": ("gat", "gat"),
        "bpnn": ("mlp", "mlp"),
        "fvgat_vfnone": ("none", "gat"),
        "fvnone_vfgat": ("gat", "none"),
        "fvgat_vfmlp": ("mlp", "gat"),
        "fvmlp_vfgat": ("gat", "mlp"),
    }
    return table[variant]


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "bpgat"
    n_iters: int = 5
    gat_heads: tuple[int, ...] = (4, 4, 6)
    gat_head_dim: int = 2
    damping_mode: str = "delta_f2v"
    alpha: float = 0.5
    readout: str = "mlp3"
    mlp_hidden: int = 8
    init: str = "seeded_random"
    init_seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.damping_mode not in DAMPING_MODES:
            raise ValueError(f"unknown damping_mode {self.damping_mode!r}")
        if self.readout not in READOUTS:
            raise ValueError(f"unknown readout {self.readout!r}")
        if self.init not in INITS:
            raise ValueError(f"unknown init {self.init!r}")
        if self.n_iters < 1:
            raise ValueError("n_iters must be >= 1")
        if not self.gat_heads:
            raise ValueError("gat_heads must be non-empty")
        if self.gat_head_dim != 2:
            # messages must stay length-2 so beliefs remain Boolean marginals
            raise ValueError("gat_head_dim must be 2")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.mlp_hidden < 4:
            raise ValueError("mlp_hidden must be >= 4")
        object.__setattr__(self, "gat_heads", tuple(self.gat_heads))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["gat_heads"] = list(self.gat_heads)
        return d

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        d = dict(d)
        d["gat_heads"] = tuple(d.get("gat_heads", (4, 4, 6)))
        return ModelConfig(**d)


# ---------------------------------------------------------------------------
# static per-formula indexing


@dataclass
class _ArityGroup:
    """Constant index/indicator matrices for all factors of one arity.

    The joint-table step of the f2v update runs one indicator matmul per
    target slot; its columns are pre-permuted so that the slot's value
    bit is the leading axis and a row-major logsumexp fold yields the
    (value 0, value 1) outputs directly.
    """

    k: int
    n_k: int
    edge_ids: np.ndarray  # (n_k * k,) factor-major
    lnf: np.ndarray  # (n_k, 2^k) log tables
    g_belief: np.ndarray  # (2k, 2^k) slot/value -> assignment indicator
    # per target slot s: pair rows, indicator ((k-1)2, 2^k), permuted tables
    pair_rows_slot: list[np.ndarray] = field(default_factory=list)
    g_slots: list[np.ndarray] = field(default_factory=list)
    lnf_slots: list[np.ndarray] = field(default_factory=list)
    out_edge_ids: np.ndarray | None = None  # edge ids in output-row order (slot-major)


class GraphIndex:
    """Edge, neighborhood-pair and arity-group structure of one graph.

    Built once per formula; all message updates are numpy-vectorized
    against these index arrays and constant matrices.
    """

    def __init__(self, fg: FactorGraph):
        self.fg = fg
        self.n_vars = fg.n_vars
        factor_start = np.zeros(len(fg.factors) + 1, dtype=np.int64)
        edge_var: list[int] = []
        for j, f in enumerate(fg.factors):
            factor_start[j + 1] = factor_start[j] + f.arity
            edge_var.extend(v - 1 for v in f.var_ids)
        self.factor_start = factor_start
        self.edge_var = np.array(edge_var, dtype=np.int64)
        self.n_edges = int(factor_start[-1])

        var_edges = [
            np.array(
                [factor_start[j] + s for j, s in fg.var_adjacency[i]], dtype=np.int64
            )
            for i in range(fg.n_vars)
        ]

        # variable -> factor pairs: (target edge, each other edge of the var)
        vp_src, vp_tgt = [], []
        for e in range(self.n_edges):
            for e_src in var_edges[self.edge_var[e]]:
                if e_src != e:
                    vp_src.append(int(e_src))
                    vp_tgt.append(e)
        self.vp_src = np.array(vp_src, dtype=np.int64)
        self.vp_tgt = np.array(vp_tgt, dtype=np.int64)
        degrees = fg.degrees
        self.vp_scale = (
            (degrees[self.edge_var[self.vp_tgt]] - 1.0).reshape(-1, 1)
            if len(vp_tgt)
            else np.zeros((0, 1))
        )

        # factor -> variable pairs: (target edge, other slots of the factor)
        pair_start = np.zeros(len(fg.factors) + 1, dtype=np.int64)
        fp_src, fp_tgt = [], []
        for j, f in enumerate(fg.factors):
            k = f.arity
            base = factor_start[j]
            pair_start[j + 1] = pair_start[j] + k * (k - 1)
            for s in range(k):
                for s2 in range(k):
                    if s2 != s:
                        fp_src.append(int(base + s2))
                        fp_tgt.append(int(base + s))
        self.fp_src = np.array(fp_src, dtype=np.int64)
        self.fp_tgt = np.array(fp_tgt, dtype=np.int64)
        arities = np.array([f.arity for f in fg.factors], dtype=np.int64)
        self.fp_scale = (
            (arities[np.searchsorted(factor_start, self.fp_tgt, side="right") - 1] - 1.0)
            .astype(np.float64)
            .reshape(-1, 1)
            if len(fp_tgt)
            else np.zeros((0, 1))
        )

        # edges grouped by variable (for variable beliefs)
        self.var_edge_rows = np.argsort(self.edge_var, kind="stable")
        self.var_seg = self.edge_var[self.var_edge_rows]
        self.deg_minus_1 = (degrees - 1.0).reshape(-1, 1)

        # arity groups
        self.groups: list[_ArityGroup] = []
        out_edge_ids: list[np.ndarray] = []
        for k in sorted(set(int(a) for a in arities)):
            fac_rows = np.flatnonzero(arities == k)
            grp = self._build_group(fg, k, fac_rows, factor_start, pair_start)
            self.groups.append(grp)
            out_edge_ids.append(grp.out_edge_ids)
        if out_edge_ids:
            concat_ids = np.concatenate(out_edge_ids)
            self.f2v_out_order = np.empty(self.n_edges, dtype=np.int64)
            self.f2v_out_order[concat_ids] = np.arange(self.n_edges)
        else:
            self.f2v_out_order = np.zeros(0, dtype=np.int64)

        from .autodiff import _segment_starts

        self.vp_sc = _segment_starts(self.vp_tgt) if len(self.vp_tgt) else None
        self.fp_sc = _segment_starts(self.fp_tgt) if len(self.fp_tgt) else None

    @staticmethod
    def _build_group(fg, k, fac_rows, factor_start, pair_start) -> _ArityGroup:
        n_k = len(fac_rows)
        size = 1 << k
        assign = np.arange(size, dtype=np.int64)
        bits = [(assign >> s) & 1 for s in range(k)]

        edge_ids = np.concatenate(
            [factor_start[j] + np.arange(k) for j in fac_rows]
        ).astype(np.int64)
        lnf = np.stack([fg.factors[j].log_table for j in fac_rows])

        g_belief = np.zeros((2 * k, size))
        for s in range(k):
            for b in (0, 1):
                g_belief[2 * s + b, bits[s] == b] = 1.0

        def slot_block(s: int) -> np.ndarray:
            # rows (src_pos, b) over slots != s, cols = assignments
            g = np.zeros(((k - 1) * 2, size))
            others = [v for v in range(k) if v != s]
            for pos, v in enumerate(others):
                for b in (0, 1):
                    g[2 * pos + b, bits[v] == b] = 1.0
            return g

        def slot_perm(s: int) -> np.ndarray:
            # dest (x, r) -> assignment with bit s = x, other bits = r
            out = np.empty(2 * (size >> 1), dtype=np.int64)
            low_mask = (1 << s) - 1
            for x in (0, 1):
                r = np.arange(size >> 1, dtype=np.int64)
                a = (r & low_mask) | (x << s) | ((r >> s) << (s + 1))
                out[x * (size >> 1) : (x + 1) * (size >> 1)] = a
            return out

        grp = _ArityGroup(
            k=k,
            n_k=n_k,
            edge_ids=edge_ids,
            lnf=lnf,
            g_belief=g_belief,
        )
        for s in range(k):
            grp.pair_rows_slot.append(
                np.concatenate(
                    [
                        pair_start[j] + s * (k - 1) + np.arange(k - 1)
                        for j in fac_rows
                    ]
                ).astype(np.int64)
            )
            perm_s = slot_perm(s)
            grp.g_slots.append(slot_block(s)[:, perm_s])
            grp.lnf_slots.append(lnf[:, perm_s])
        # output rows come out slot-major: (slot, factor)
        grp.out_edge_ids = np.concatenate(
            [factor_start[fac_rows] + s for s in range(k)]
        ).astype(np.int64)
        return grp


# ---------------------------------------------------------------------------
# parameters


def _param_specs(config: ModelConfig) -> list[tuple[str, tuple[int, ...], int]]:
    """(name, shape, fan_in) for every tensor the config needs."""
    v2f_kind, f2v_kind = update_kinds(config.variant)
    h = config.mlp_hidden
    specs: list[tuple[str, tuple[int, ...], int]] = []

    def mlp(prefix: str, d_in: int, d_out: int):
        specs.extend(
            [
                (f"{prefix}/W0", (d_in, h), d_in),
                (f"{prefix}/b0", (h,), d_in),
                (f"{prefix}/W1", (h, h), h),
                (f"{prefix}/b1", (h,), h),
                (f"{prefix}/W2", (h, d_out), h),
                (f"{prefix}/b2", (d_out,), h),
            ]
        )

    def gat(prefix: str):
        d_in = 2
        for layer, n_heads in enumerate(config.gat_heads, start=1):
            specs.append((f"{prefix}/l{layer}/W", (d_in, n_heads * 2), d_in))
            specs.append((f"{prefix}/l{layer}/a", (n_heads, 4), 4))
            d_in = n_heads * 2

    if v2f_kind == "gat":
        gat("v2f_att")
    elif v2f_kind == "mlp":
        mlp("mlp1", 2, 2)
    if f2v_kind == "gat":
        gat("f2v_att")
    elif f2v_kind == "mlp":
        mlp("mlp2", 2, 2)
    if config.damping_mode != "fixed_all":
        mlp("delta", 2, 2)
    if config.readout == "mlp3":
        mlp("mlp3", 3 * config.n_iters, 1)
    return specs


def _identity_mlp(shape: tuple[int, ...], name: str) -> np.ndarray:
    """relu(x)-relu(-x) construction: exact identity for all inputs."""
    w = np.zeros(shape)
    tail = name.rsplit("/", 1)[1]
    if tail == "W0":  # h1 = relu([x, -x, 0...])
        w[0, 0] = w[1, 1] = 1.0
        w[0, 2] = w[1, 3] = -1.0
    elif tail == "W1":  # [relu(x), relu(-x)] is a fixed point
        w[0, 0] = w[1, 1] = w[2, 2] = w[3, 3] = 1.0
        w[2, 0] = w[3, 1] = w[0, 2] = w[1, 3] = -1.0
    elif tail == "W2":  # y = relu(x) - relu(-x) = x
        w[0, 0] = w[1, 1] = 1.0
        w[2, 0] = w[3, 1] = -1.0
    return w  # biases stay zero


def build_params(config: ModelConfig) -> ParamSet:
    specs = _param_specs(config)
    params = ParamSet()
    if config.init == "seeded_random":
        rng = np.random.Generator(np.random.PCG64(config.init_seed))
        for name, shape, fan_in in sorted(specs):
            s = 1.0 / np.sqrt(fan_in)
            params.add(name, rng.uniform(-s, s, size=shape))
        return params
    # bp_identity: every transform becomes the identity, attention scores 0
    for name, shape, _ in sorted(specs):
        if "_att/" in name:
            if name.endswith("/W"):
                w = np.zeros(shape)
                n_heads = shape[1] // 2
                for head in range(n_heads):
                    w[0, 2 * head] = 1.0
                    w[1, 2 * head + 1] = 1.0
                params.add(name, w)
            else:
                params.add(name, np.zeros(shape))
        elif name.startswith("mlp3/"):
            params.add(name, np.zeros(shape))
        else:
            params.add(name, _identity_mlp(shape, name))
    return params


# ---------------------------------------------------------------------------
# building blocks


def _normalize_rows(x: Tensor) -> Tensor:
    return ad.log_normalize_rows(x)


def _mlp(params: ParamSet, prefix: str, x: Tensor) -> Tensor:
    h = ad.linear_relu(x, params[f"{prefix}/W0"], params[f"{prefix}/b0"])
    h = ad.linear_relu(h, params[f"{prefix}/W1"], params[f"{prefix}/b1"])
    return ad.linear(h, params[f"{prefix}/W2"], params[f"{prefix}/b2"])


_LEAKY_SLOPE = 0.2


def gat_attention_layer(
    params: ParamSet,
    prefix: str,
    layer: int,
    self_feat: Tensor,
    other_feat: Tensor,
    pair_tgt: np.ndarray,
    seg_sc,
    scale_col: np.ndarray,
    n_heads: int,
    final: bool,
) -> tuple[Tensor | None, Tensor, np.ndarray]:
    """One multi-head attention layer over neighborhood pair rows.

    self_feat has one row per receiving edge, other_feat one row per
    (receiving edge, neighbor) pair. Scores are LeakyReLU of per-head
    dots between the projected query and neighbor rows; coefficients are
    softmax-normalized within each receiving edge's segment, then
    multiplied by the segment size (mean-one weights, so sums rather
    than averages stay representable). Returns (projected self rows,
    attended pair rows, coefficient values); head outputs are
    concatenated, or averaged when `final`.

    Fused into a single tape node per layer (plus the query projection):
    the hand-written backward rule below mirrors projection, scoring,
    segment softmax, scaling and head aggregation step by step.
    """
    w = params[f"{prefix}/l{layer}/W"]
    a = params[f"{prefix}/l{layer}/a"]
    w_self = ad.matmul(self_feat, w)  # (E, H*2); next layer's query rows

    n_pairs = other_feat.shape[0]
    starts, counts = seg_sc
    w_vals, a_vals = w.values, a.values
    a_self_flat = a_vals[:, :2].ravel()  # (H*2,)
    a_other_flat = a_vals[:, 2:].ravel()

    wo = other_feat.values @ w_vals  # (P, H*2)
    wsp = w_self.values[pair_tgt]  # (P, H*2)
    s_pre = (wsp * a_self_flat + wo * a_other_flat).reshape(
        n_pairs, n_heads, 2
    ).sum(axis=2)
    lmask = np.where(s_pre > 0, 1.0, _LEAKY_SLOPE)
    score = s_pre * lmask
    seg_max = np.maximum.reduceat(score, starts, axis=0)
    e = np.exp(score - np.repeat(seg_max, counts, axis=0))
    sums = np.add.reduceat(e, starts, axis=0)
    alpha = e / np.repeat(sums, counts, axis=0)  # (P, H)
    alpha_s2 = np.repeat(alpha * scale_col, 2, axis=1)  # (P, H*2)
    att = wo * alpha_s2
    out_vals = (
        att.reshape(n_pairs, n_heads, 2).mean(axis=1)
        if final
        else att
    )

    cache: dict = {}

    def shared(g):
        # one upstream gradient per backward visit; avoid recomputation
        # across this node's four vjps
        if cache.get("id") != id(g):
            if final:
                g_att = np.tile(g / n_heads, (1, n_heads))
            else:
                g_att = g
            g_alpha = (g_att * wo).reshape(n_pairs, n_heads, 2).sum(axis=2) * scale_col
            dot = np.add.reduceat(g_alpha * alpha, starts, axis=0)
            g_score = alpha * (g_alpha - np.repeat(dot, counts, axis=0))
            g_spre2 = np.repeat(g_score * lmask, 2, axis=1)  # (P, H*2)
            g_wo = g_att * alpha_s2 + g_spre2 * a_other_flat
            g_wsp = g_spre2 * a_self_flat
            cache["id"] = id(g)
            cache["v"] = (g_spre2, g_wo, g_wsp)
        return cache["v"]

    def vjp_wself(g):
        _, _, g_wsp = shared(g)
        return ad._scatter_rows(g_wsp, pair_tgt, w_self.shape[0])

    def vjp_other(g):
        _, g_wo, _ = shared(g)
        return g_wo @ w_vals.T

    def vjp_w(g):
        _, g_wo, _ = shared(g)
        return other_feat.values.T @ g_wo

    def vjp_a(g):
        g_spre2, _, _ = shared(g)
        ga = np.empty(a_vals.shape)
        ga[:, :2] = (g_spre2 * wsp).reshape(n_pairs, n_heads, 2).sum(axis=0)
        ga[:, 2:] = (g_spre2 * wo).reshape(n_pairs, n_heads, 2).sum(axis=0)
        return ga

    attended = ad._record(
        out_vals,
        (w_self, other_feat, w, a),
        (vjp_wself, vjp_other, vjp_w, vjp_a),
    )
    return (None if final else w_self), attended, alpha


def _gat_stack(
    params: ParamSet,
    prefix: str,
    heads: tuple[int, ...],
    self_msgs: Tensor,
    other_msgs: Tensor,
    pair_tgt: np.ndarray,
    seg_sc,
    scale_col: np.ndarray,
) -> Tensor:
    self_feat, other_feat = self_msgs, other_msgs
    for layer, n_heads in enumerate(heads, start=1):
        final = layer == len(heads)
        self_feat, other_feat, _ = gat_attention_layer(
            params, prefix, layer, self_feat, other_feat,
            pair_tgt, seg_sc, scale_col, n_heads, final,
        )
    return other_feat  # (P, 2)


def _transform_pairs(
    params: ParamSet,
    config: ModelConfig,
    kind: str,
    att_prefix: str,
    mlp_prefix: str,
    self_msgs: Tensor,
    src_msgs: Tensor,
    pair_src: np.ndarray,
    pair_tgt: np.ndarray,
    seg_sc,
    scale_col: np.ndarray,
) -> Tensor:
    if len(pair_src) == 0:
        return Tensor(np.zeros((0, 2)))
    other = ad.gather_rows(src_msgs, pair_src)
    if kind == "gat":
        return _gat_stack(
            params, att_prefix, config.gat_heads, self_msgs, other,
            pair_tgt, seg_sc, scale_col,
        )
    if kind == "mlp":
        return _mlp(params, mlp_prefix, other)
    return other  # plain BP


def _update_v2f(idx: GraphIndex, params, config, v2f: Tensor, f2v: Tensor, kind: str) -> Tensor:
    t = _transform_pairs(
        params, config, kind, "v2f_att", "mlp1",
        v2f, f2v, idx.vp_src, idx.vp_tgt, idx.vp_sc, idx.vp_scale,
    )
    summed = ad.segment_sum(t, idx.vp_tgt, idx.n_edges, validate=False)
    return _normalize_rows(summed)


def _update_f2v(idx: GraphIndex, params, config, v2f: Tensor, f2v: Tensor, kind: str) -> Tensor:
    t = _transform_pairs(
        params, config, kind, "f2v_att", "mlp2",
        f2v, v2f, idx.fp_src, idx.fp_tgt, idx.fp_sc, idx.fp_scale,
    )
    outs = [_joint_lse(t, grp) for grp in idx.groups]
    if not outs:
        return Tensor(np.zeros((0, 2)))
    out = ad.concat(outs, axis=0)
    return _normalize_rows(ad.gather_rows(out, idx.f2v_out_order))


def _joint_lse(t: Tensor, grp: _ArityGroup) -> Tensor:
    """Joint-table composition for one arity group, as one tape node.

    Per target slot: gather the transformed pair messages, sum them into
    the slot's permuted joint table via the indicator matmul, and reduce
    the two value halves by logsumexp. Rows come out slot-major.
    """
    k, n_k, size = grp.k, grp.n_k, 1 << grp.k
    half = size >> 1
    out = np.empty((k * n_k, 2))
    ws = []
    for s in range(k):
        tg = t.values[grp.pair_rows_slot[s]].reshape(n_k, (k - 1) * 2)
        v = (tg @ grp.g_slots[s] + grp.lnf_slots[s]).reshape(n_k * 2, half)
        m = v.max(axis=1, keepdims=True)
        red = m + np.log(np.exp(v - m).sum(axis=1, keepdims=True))
        ws.append(np.exp(v - red))
        out[s * n_k : (s + 1) * n_k] = red.reshape(n_k, 2)

    def vjp(g):
        g_rows = np.empty((k * n_k * (k - 1), 2))
        for s in range(k):
            g_table = (g[s * n_k : (s + 1) * n_k].reshape(-1, 1) * ws[s]).reshape(
                n_k, size
            )
            g_tg = g_table @ grp.g_slots[s].T
            g_rows[s * n_k * (k - 1) : (s + 1) * n_k * (k - 1)] = g_tg.reshape(-1, 2)
        all_rows = np.concatenate(grp.pair_rows_slot)
        return ad._scatter_rows(g_rows, all_rows, t.shape[0])

    return ad._record(out, (t,), (vjp,))


def apply_learned_damping(
    prev_v2f: Tensor,
    prev_f2v: Tensor,
    new_v2f: Tensor,
    new_f2v: Tensor,
    params: ParamSet,
    mode: str,
    alpha: float,
) -> tuple[Tensor, Tensor]:
    """Blend previous and new messages per direction, then re-normalize.

    Directions selected by `mode` get prev + delta(new - prev) with the
    shared per-message MLP delta; the rest get scalar damping alpha.
    """

    def one(prev: Tensor, new: Tensor, learned: bool) -> Tensor:
        if learned:
            return ad.add_normalize(prev, _mlp(params, "delta", ad.sub(new, prev)))
        return ad.mix_normalize(new, prev, alpha)

    return (
        one(prev_v2f, new_v2f, mode in ("delta_v2f", "delta_all")),
        one(prev_f2v, new_f2v, mode in ("delta_f2v", "delta_all")),
    )


def compute_iteration_features(
    idx: GraphIndex, v2f: Tensor, f2v: Tensor
) -> tuple[Tensor, Tensor, Tensor]:
    """(sum b ln f, factor entropy, signed variable entropy term).

    Terms with belief mass below 1e-20 (the sentinel region) contribute 0,
    matching the classic engine's 0 ln 0 convention. Differentiable
    through the messages.
    """
    if idx.groups:
        both = _factor_features(v2f, idx.groups)  # (2,) = [u, hf]
        u, hf = ad.pick(both, 0), ad.pick(both, 1)
    else:
        u, hf = Tensor(0.0), Tensor(0.0)
    hv = _var_entropy(f2v, idx)
    return u, hf, hv


def _factor_features(v2f: Tensor, groups: list[_ArityGroup]) -> Tensor:
    """[sum_j sum b ln f, -sum_j sum b ln b] over all factors, one node."""
    saved = []
    u = hf = 0.0
    for grp in groups:
        rows = v2f.values[grp.edge_ids].reshape(grp.n_k, grp.k * 2)
        raw = rows @ grp.g_belief + grp.lnf
        m = raw.max(axis=1, keepdims=True)
        logb = raw - (m + np.log(np.exp(raw - m).sum(axis=1, keepdims=True)))
        b = np.exp(logb)
        live = b >= _BELIEF_FLOOR
        u += float((b * grp.lnf * live).sum())
        hf -= float((b * logb * live).sum())
        saved.append((logb, b, live))

    def vjp(g):
        g_u, g_hf = g[0], g[1]
        out = np.zeros(v2f.shape)
        for grp, (logb, b, live) in zip(groups, saved):
            g_b = g_u * (grp.lnf * live) - g_hf * (logb * live)
            g_logb = -g_hf * (b * live) + b * g_b
            g_raw = g_logb - b * g_logb.sum(axis=1, keepdims=True)
            g_rows = (g_raw @ grp.g_belief.T).reshape(-1, 2)
            out += ad._scatter_rows(g_rows, grp.edge_ids, v2f.shape[0])
        return out

    return ad._record(np.array([u, hf]), (v2f,), (vjp,))


def _var_entropy(f2v: Tensor, idx: GraphIndex) -> Tensor:
    """sum_i (deg(x_i) - 1) sum_x b_i ln b_i, one node."""
    raw = ad._scatter_rows(f2v.values[idx.var_edge_rows], idx.var_seg, idx.n_vars)
    m = raw.max(axis=1, keepdims=True)
    logb = raw - (m + np.log(np.exp(raw - m).sum(axis=1, keepdims=True)))
    b = np.exp(logb)
    w = (b >= _BELIEF_FLOOR) * idx.deg_minus_1
    hv = float((b * logb * w).sum())

    def vjp(g):
        g_b = g * logb * w
        g_logb = g * (b * w) + b * g_b
        g_raw = g_logb - b * g_logb.sum(axis=1, keepdims=True)
        return ad._scatter_rows(
            g_raw[idx.var_seg], idx.var_edge_rows, f2v.shape[0]
        )

    return ad._record(np.float64(hv), (f2v,), (vjp,))


def readout(
    trace: list[tuple[Tensor, Tensor, Tensor]], params: ParamSet, config: ModelConfig
) -> Tensor:
    if len(trace) != config.n_iters:
        raise ValueError(f"trace length {len(trace)} != n_iters {config.n_iters}")
    if config.readout == "bethe_bypass":
        u, hf, hv = trace[-1]
        return ad.add(ad.add(u, hf), hv)
    feats = ad.concat(
        [ad.reshape(x, (1,)) for triple in trace for x in triple], axis=0
    )
    out = _mlp(params, "mlp3", ad.reshape(feats, (1, 3 * config.n_iters)))
    return ad.reshape(out, ())


def forward(
    fg: FactorGraph,
    params: ParamSet,
    config: ModelConfig,
    index: GraphIndex | None = None,
) -> tuple[Tensor, list[tuple[Tensor, Tensor, Tensor]]]:
    """T iterations of (v2f update, f2v update, damping), then readout."""
    idx = index if index is not None else GraphIndex(fg)
    v2f_kind, f2v_kind = update_kinds(config.variant)
    e = idx.n_edges
    v2f = Tensor(np.full((e, 2), LOG_HALF))
    f2v = Tensor(np.full((e, 2), LOG_HALF))
    trace = []
    for _ in range(config.n_iters):
        new_v2f = _update_v2f(idx, params, config, v2f, f2v, v2f_kind)
        new_f2v = _update_f2v(idx, params, config, v2f, f2v, f2v_kind)
        v2f, f2v = apply_learned_damping(
            v2f, f2v, new_v2f, new_f2v, params, config.damping_mode, config.alpha
        )
        trace.append(compute_iteration_features(idx, v2f, f2v))
    return readout(trace, params, config), trace


def predict_ln_count(
    fg: FactorGraph,
    params: ParamSet,
    config: ModelConfig,
    index: GraphIndex | None = None,
) -> float:
    out, _ = forward(fg, params, config, index)
    return out.item()


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_VERSION = 1


def save_checkpoint(path: str, params: ParamSet, config: ModelConfig) -> None:
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "config": config.to_dict(),
        "params": {
            name: {"shape": list(t.shape), "values": t.values.ravel().tolist()}
            for name, t in params.items()
        },
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)


def load_checkpoint(path: str) -> tuple[ParamSet, ModelConfig]:
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('format_version')}")
    config = ModelConfig.from_dict(payload["config"])
    expected = {name: shape for name, shape, _ in _param_specs(config)}
    params = ParamSet()
    for name, entry in sorted(payload["params"].items()):
        values = np.array(entry["values"]).reshape(entry["shape"])
        if name not in expected or tuple(expected[name]) != values.shape:
            raise ValueError(f"checkpoint parameter {name!r} does not match config")
        params.add(name, values)
    if len(params) != len(expected):
        missing = sorted(set(expected) - set(params.names()))
        raise ValueError(f"checkpoint missing parameters: {missing}")
    return params, config
