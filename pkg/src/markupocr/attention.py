"""Attention over encoded image grids, in five flavours.

standard      soft attention over every fine cell (cost H*W per step)
coarse-only   soft attention over the coarse grid alone
hierarchical  coarse distribution times per-parent conditionals, exact
              marginal over the fine grid (still touches every cell)
c2f-sparsemax coarse sparsemax, conditionals only inside its support
c2f-hard      one sampled (train) or argmax (test) coarse cell, then a
              16-cell conditional softmax inside it

All five return an AttentionState whose counters record how many cell
scores the step actually evaluated, per batch item; a module tally
(`score_evals`) tracks the same number globally so tests can audit the
counters. The score is beta . tanh(W1 h + W2 v) throughout, with W2 v
precomputed once per sequence (it does not depend on the decoder
state, so hoisting it changes no counts).

`fine_dist`/`coarse_dist` report the step's distributions; gradients
are only guaranteed through `context` (and `log_choice` in hard mode).
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import tensor as T
from .layers import uniform_init
from .tensor import ShapeError, Tensor, _check, _record

__all__ = [
    "ScoreParams", "AttnGrid", "AttentionState", "score", "score_evals",
    "reset_score_evals", "sparsemax", "standard_attention",
    "coarse_only_attention", "hierarchical_attention",
    "c2f_sparsemax_attention", "c2f_hard_attention", "children_map",
    "ATTENTION_MODES",
]

ATTENTION_MODES = ("standard", "coarse-only", "hierarchical",
                   "c2f-sparsemax", "c2f-hard")

_SCORE_EVALS = 0


def score_evals() -> int:
    """Total individual cell-score evaluations since the last reset."""
    return _SCORE_EVALS


def reset_score_evals() -> None:
    global _SCORE_EVALS
    _SCORE_EVALS = 0


def _tally(n: int) -> None:
    global _SCORE_EVALS
    _SCORE_EVALS += int(n)


class ScoreParams:
    """W1 (query proj), W2 (cell proj) and beta for one score network."""

    def __init__(self, query_dim: int, channel_dim: int, att_dim: int,
                 rng: np.random.Generator):
        self.w1 = Tensor(uniform_init(rng, (query_dim, att_dim), query_dim),
                         requires_grad=True)
        self.w2 = Tensor(uniform_init(rng, (channel_dim, att_dim), channel_dim),
                         requires_grad=True)
        self.beta = Tensor(uniform_init(rng, (att_dim,), att_dim),
                           requires_grad=True)

    def params(self) -> dict[str, Tensor]:
        return {"w1": self.w1, "w2": self.w2, "beta": self.beta}

    def query(self, h_t: Tensor) -> Tensor:
        """(B, query_dim) -> (B, att_dim)."""
        return T.matmul(h_t, self.w1)

    def grid(self, v_bhwd: Tensor) -> "AttnGrid":
        """Flatten a (B,H,W,D) grid and precompute its W2 projections."""
        b, h, w, d = v_bhwd.data.shape
        n = h * w
        flat = T.reshape(v_bhwd, (b, n, d))
        keys = T.reshape(T.matmul(T.reshape(flat, (b * n, d)), self.w2),
                         (b, n, -1))
        return AttnGrid(v=flat, keys=keys, h=h, w=w)


@dataclass
class AttnGrid:
    v: Tensor     # (B, N, D)
    keys: Tensor  # (B, N, att_dim)
    h: int
    w: int

    @property
    def n(self) -> int:
        return self.h * self.w


@dataclass
class AttentionState:
    """One attention step: distributions, context and lookup counts."""

    fine_dist: Tensor | None
    coarse_dist: Tensor | None
    context: Tensor                # (B, D)
    coarse_lookups: np.ndarray     # (B,) int64
    fine_lookups: np.ndarray       # (B,) int64
    log_choice: Tensor | None = None  # (B,) log p(chosen coarse cell), hard mode
    choice: np.ndarray | None = None  # (B,) flat coarse index, hard mode


def score(h_t: Tensor, v_cell: Tensor, params: ScoreParams) -> Tensor:
    """beta . tanh(W1 h_t + W2 v_cell) for one query and one cell."""
    if h_t.data.ndim != 1 or v_cell.data.ndim != 1:
        raise ShapeError("score takes single vectors; use the *_attention ops")
    q = T.matmul(T.reshape(h_t, (1, -1)), params.w1)
    k = T.matmul(T.reshape(v_cell, (1, -1)), params.w2)
    _tally(1)
    return T.tsum(T.mul(T.tanh(T.add(q, k)), params.beta))


def _attn_scores(keys: Tensor, q: Tensor, beta: Tensor) -> Tensor:
    """Fused beta . tanh(keys + q) over (B,N,A) keys -> (B,N) scores.

    The tanh activation is recomputed in backward rather than stored;
    attention runs once per decoder step and the activations dominate
    tape memory otherwise.
    """
    kd, qd, bd = keys.data, q.data, beta.data
    u = np.tanh(kd + qd[:, None, :])
    out = Tensor(_check(u @ bd))
    _tally(kd.shape[0] * kd.shape[1])

    def bwd(g):
        u2 = np.tanh(kd + qd[:, None, :])
        gu = g[..., None] * (bd * (1.0 - u2 * u2))
        gbeta = np.einsum("bna,bn->a", u2, g)
        return gu, gu.sum(axis=1), gbeta

    return _record(out, (keys, q, beta), bwd)


def _context_mix(p: Tensor, v: Tensor) -> Tensor:
    """Expected cell vector: (B,N) probs x (B,N,D) cells -> (B,D)."""
    out = Tensor(_check(np.einsum("bn,bnd->bd", p.data, v.data)))

    def bwd(g):
        gp = np.einsum("bd,bnd->bn", g, v.data)
        gv = p.data[:, :, None] * g[:, None, :]
        return gp, gv

    return _record(out, (p, v), bwd)


# ---------------------------------------------------------------------------
# sparsemax


def sparsemax(t: Tensor, axis: int = -1) -> Tensor:
    """Euclidean projection of scores onto the simplex, along `axis`.

    Sort descending, keep the largest k with 1 + k*z_k > sum_{j<=k} z_j,
    threshold at tau = (sum_{j<=k} z_j - 1)/k, clip at zero. Backward is
    the support-restricted Jacobian: upstream minus its mean over the
    support, zero elsewhere.
    """
    z = np.moveaxis(t.data, axis, -1)
    k = z.shape[-1]
    zs = np.sort(z, axis=-1)[..., ::-1]
    cs = np.cumsum(zs, axis=-1)
    ks = np.arange(1, k + 1, dtype=np.float64)
    feasible = 1.0 + ks * zs > cs
    kmax = np.count_nonzero(feasible, axis=-1)
    tau = (np.take_along_axis(cs, kmax[..., None] - 1, axis=-1)[..., 0] - 1.0) \
        / kmax
    p = np.maximum(z - tau[..., None], 0.0)
    out_data = np.ascontiguousarray(np.moveaxis(p, -1, axis))
    out = Tensor(_check(out_data))

    def bwd(g):
        gm = np.moveaxis(g, axis, -1)
        support = p > 0.0
        cnt = support.sum(axis=-1, keepdims=True)
        mean_on = (gm * support).sum(axis=-1, keepdims=True) / cnt
        gz = np.where(support, gm - mean_on, 0.0)
        return (np.ascontiguousarray(np.moveaxis(gz, -1, axis)),)

    return _record(out, (t,), bwd)


# ---------------------------------------------------------------------------
# geometry


@lru_cache(maxsize=None)
def children_map(h: int, w: int) -> np.ndarray:
    """(H'W', 16) flat fine indices under each coarse parent (ratio 4)."""
    if h % 4 or w % 4:
        raise ShapeError(f"fine grid {h}x{w} is not divisible by 4")
    hc, wc = h // 4, w // 4
    out = np.empty((hc * wc, 16), dtype=np.intp)
    for i in range(hc):
        for j in range(wc):
            cells = [(4 * i + di) * w + (4 * j + dj)
                     for di in range(4) for dj in range(4)]
            out[i * wc + j] = cells
    return out


def _check_ratio(fine: AttnGrid, coarse: AttnGrid) -> None:
    if fine.h != 4 * coarse.h or fine.w != 4 * coarse.w:
        raise ShapeError(
            f"coarse grid {coarse.h}x{coarse.w} is not 1/4 of fine "
            f"{fine.h}x{fine.w}")


def _batch(h_t: Tensor) -> int:
    return h_t.data.shape[0]


# ---------------------------------------------------------------------------
# attention modes


def standard_attention(h_t: Tensor, fine: AttnGrid,
                       params: ScoreParams) -> AttentionState:
    b = _batch(h_t)
    s = _attn_scores(fine.keys, params.query(h_t), params.beta)
    p = T.softmax(s, axis=-1)
    ctx = _context_mix(p, fine.v)
    return AttentionState(
        fine_dist=T.reshape(p, (b, fine.h, fine.w)),
        coarse_dist=None,
        context=ctx,
        coarse_lookups=np.zeros(b, dtype=np.int64),
        fine_lookups=np.full(b, fine.n, dtype=np.int64),
    )


def coarse_only_attention(h_t: Tensor, coarse: AttnGrid, params: ScoreParams,
                          proj: Tensor | None = None) -> AttentionState:
    """Standard attention run on the coarse grid alone; the context is
    optionally projected up to the fine channel count."""
    b = _batch(h_t)
    s = _attn_scores(coarse.keys, params.query(h_t), params.beta)
    p = T.softmax(s, axis=-1)
    ctx = _context_mix(p, coarse.v)
    if proj is not None:
        ctx = T.matmul(ctx, proj)
    return AttentionState(
        fine_dist=None,
        coarse_dist=T.reshape(p, (b, coarse.h, coarse.w)),
        context=ctx,
        coarse_lookups=np.full(b, coarse.n, dtype=np.int64),
        fine_lookups=np.zeros(b, dtype=np.int64),
    )


def hierarchical_attention(h_t: Tensor, fine: AttnGrid, coarse: AttnGrid,
                           fine_params: ScoreParams,
                           coarse_params: ScoreParams) -> AttentionState:
    b = _batch(h_t)
    _check_ratio(fine, coarse)
    cmap = children_map(fine.h, fine.w)
    nc = coarse.n

    sc = _attn_scores(coarse.keys, coarse_params.query(h_t), coarse_params.beta)
    p_coarse = T.softmax(sc, axis=-1)                        # (B, N')

    sf = _attn_scores(fine.keys, fine_params.query(h_t), fine_params.beta)
    grouped = T.index(sf, (slice(None), cmap))               # (B, N', 16)
    cond = T.softmax(grouped, axis=-1)                       # p(z | z')
    joint = T.mul(cond, T.reshape(p_coarse, (b, nc, 1)))     # (B, N', 16)

    # scatter the grouped joint back to flat fine order
    inv = np.empty(fine.n, dtype=np.intp)
    inv[cmap.reshape(-1)] = np.arange(fine.n)
    marginal = T.index(T.reshape(joint, (b, fine.n)), (slice(None), inv))

    ctx = _context_mix(marginal, fine.v)
    return AttentionState(
        fine_dist=T.reshape(marginal, (b, fine.h, fine.w)),
        coarse_dist=T.reshape(p_coarse, (b, coarse.h, coarse.w)),
        context=ctx,
        coarse_lookups=np.full(b, nc, dtype=np.int64),
        fine_lookups=np.full(b, fine.n, dtype=np.int64),
    )


def c2f_sparsemax_attention(h_t: Tensor, fine: AttnGrid, coarse: AttnGrid,
                            fine_params: ScoreParams,
                            coarse_params: ScoreParams) -> AttentionState:
    b = _batch(h_t)
    _check_ratio(fine, coarse)
    cmap = children_map(fine.h, fine.w)

    sc = _attn_scores(coarse.keys, coarse_params.query(h_t), coarse_params.beta)
    p_coarse = sparsemax(sc, axis=-1)                        # (B, N') sparse

    q_fine = fine_params.query(h_t)                          # (B, A)
    fine_dist = np.zeros((b, fine.n))
    contexts = []
    fine_counts = np.zeros(b, dtype=np.int64)
    for i in range(b):
        support = np.flatnonzero(p_coarse.data[i] > 0.0)
        kplus = support.size
        fine_counts[i] = 16 * kplus
        cells = cmap[support].reshape(-1)                    # (K+ * 16,)
        keys_i = T.index(fine.keys, (i, cells))              # (K+*16, A)
        s_i = _attn_scores(T.reshape(keys_i, (1, kplus * 16, -1)),
                           T.index(q_fine, (slice(i, i + 1),)),
                           fine_params.beta)
        cond = T.softmax(T.reshape(s_i, (kplus, 16)), axis=-1)
        w_i = T.index(p_coarse, (i, support))                # (K+,)
        joint = T.mul(cond, T.reshape(w_i, (kplus, 1)))
        flat = T.reshape(joint, (1, kplus * 16))
        v_i = T.reshape(T.index(fine.v, (i, cells)), (1, kplus * 16, -1))
        contexts.append(_context_mix(flat, v_i))
        fine_dist[i, cells] = flat.data[0]

    return AttentionState(
        fine_dist=Tensor(fine_dist.reshape(b, fine.h, fine.w)),
        coarse_dist=T.reshape(p_coarse, (b, coarse.h, coarse.w)),
        context=T.concat(contexts, axis=0),
        coarse_lookups=np.full(b, coarse.n, dtype=np.int64),
        fine_lookups=fine_counts,
    )


def c2f_hard_attention(h_t: Tensor, fine: AttnGrid, coarse: AttnGrid,
                       fine_params: ScoreParams, coarse_params: ScoreParams,
                       mode: str = "sample",
                       rng: np.random.Generator | None = None) -> AttentionState:
    if mode not in ("sample", "argmax"):
        raise ValueError(f"hard attention mode must be sample or argmax, got {mode!r}")
    if mode == "sample" and rng is None:
        raise ValueError("sample mode needs an rng")
    b = _batch(h_t)
    _check_ratio(fine, coarse)
    cmap = children_map(fine.h, fine.w)

    sc = _attn_scores(coarse.keys, coarse_params.query(h_t), coarse_params.beta)
    logp = T.log_softmax(sc, axis=-1)
    p_data = np.exp(logp.data)

    if mode == "argmax":
        choice = p_data.argmax(axis=-1)  # ties go to the lowest index
    else:
        choice = np.empty(b, dtype=np.intp)
        for i in range(b):
            choice[i] = rng.choice(coarse.n, p=p_data[i] / p_data[i].sum())
    log_choice = T.pick(logp, choice)

    cells = cmap[choice]                                      # (B, 16)
    rows = np.arange(b)[:, None]
    keys_sub = T.index(fine.keys, (rows, cells))              # (B, 16, A)
    s = _attn_scores(keys_sub, fine_params.query(h_t), fine_params.beta)
    cond = T.softmax(s, axis=-1)                              # (B, 16)
    v_sub = T.index(fine.v, (rows, cells))
    ctx = _context_mix(cond, v_sub)

    fine_dist = np.zeros((b, fine.n))
    fine_dist[rows, cells] = cond.data
    return AttentionState(
        fine_dist=Tensor(fine_dist.reshape(b, fine.h, fine.w)),
        coarse_dist=T.reshape(Tensor(p_data), (b, coarse.h, coarse.w)),
        context=ctx,
        coarse_lookups=np.full(b, coarse.n, dtype=np.int64),
        fine_lookups=np.full(b, 16, dtype=np.int64),
        log_choice=log_choice,
        choice=choice,
    )
