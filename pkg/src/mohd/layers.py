"""Sparsely activated transformer sub-layers and their dense baselines.

The sparse attention and FFN slice every weight matrix along the hidden
axis into the router's sub-dimensions: input-side matrices (Q/K/V, up,
gate) by rows, output-side matrices (O, down) by columns. Per token, only
the selected slices participate; each slice's contribution is multiplied by
its gate weight, the module output is rescaled by the per-token factor
alpha, and a block-structured group-fusion map redistributes the sparse
output across the full hidden width.

Tokens are dispatched in groups sharing an identical selection set so each
group runs packed matrix products against the gathered weight slices.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import (
    Tensor,
    add,
    concat,
    matmul,
    mul,
    reshape,
    rmsnorm,
    scatter_cols,
    scatter_rows,
    silu,
    softmax,
    swapaxes,
    take,
)
from .routing import BatchRouting, GateDecision, RouterParams, SubDimLayout, route_tokens

Array = np.ndarray


# -- group fusion ---------------------------------------------------------------


@dataclass
class FusionParams:
    """Block-structured linear map over the hidden width.

    Positions are regrouped with stride ``d/r`` (group g holds positions
    ``g + m*(d/r)``), so each r-by-r block mixes entries drawn from distinct
    sub-dimensions, then mapped back to natural order. Blocks start as
    identities, making the initial map a no-op.
    """

    blocks: Tensor  # (d/r, r, r)
    r: int

    @property
    def width(self) -> int:
        return self.blocks.shape[0] * self.r

    @classmethod
    def identity(cls, width: int, r: int) -> "FusionParams":
        if width % r != 0:
            raise ValueError(f"receptive field r={r} must divide width {width}")
        blocks = np.broadcast_to(np.eye(r), (width // r, r, r)).copy()
        return cls(blocks=Tensor(blocks, requires_grad=True), r=r)


def fusion_group_index(width: int, r: int) -> Array:
    """Flat gather index putting each stride-group into a contiguous run."""
    if width % r != 0:
        raise ValueError(f"receptive field r={r} must divide width {width}")
    n_groups = width // r
    # run g of length r collects positions g, g + n_groups, g + 2*n_groups, ...
    return (
        np.arange(n_groups)[:, None] + np.arange(r)[None, :] * n_groups
    ).reshape(-1)


def apply_fusion(x: Tensor, fusion: FusionParams) -> Tensor:
    """Apply the grouped map to rows of ``x`` (last axis = hidden width)."""
    d = fusion.width
    if x.shape[-1] != d:
        raise ValueError(f"fusion width {d} does not match input width {x.shape[-1]}")
    idx = fusion_group_index(d, fusion.r)
    n_groups = d // fusion.r
    xg = take(x, idx, axis=-1).reshape(x.shape[0], n_groups, fusion.r)
    yg = matmul(swapaxes(xg, 0, 1), swapaxes(fusion.blocks, -1, -2))
    y = reshape(swapaxes(yg, 0, 1), (x.shape[0], d))
    return take(y, np.argsort(idx), axis=-1)


# -- packed projections (one selection set at a time) ------------------------------


def _as_rows(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 1:
        return x.reshape(1, -1), True
    return x, False


def _packed_gates(decision: GateDecision, subdim_width: int) -> Array:
    return np.repeat(np.asarray(decision.weights, dtype=np.float64), subdim_width)


def mohd_project_in(
    x_s: Tensor, w: Tensor, decision: GateDecision, layout: SubDimLayout
) -> Tensor:
    """Packed input projection: gate-weighted selected rows of ``w``.

    ``x_s`` holds the gathered slices for the decision, so the product
    equals the dense projection with unselected rows contributing nothing.
    """
    rows = layout.columns(decision.selected)
    x2, squeeze = _as_rows(x_s)
    if x2.shape[-1] != rows.size:
        raise ValueError(
            f"packed input width {x2.shape[-1]} does not match "
            f"{rows.size} selected rows"
        )
    out = matmul(mul(x2, _packed_gates(decision, layout.subdim_width)), take(w, rows, axis=0))
    return out.reshape(-1) if squeeze else out


def mohd_project_out(
    h: Tensor, w: Tensor, decision: GateDecision, layout: SubDimLayout
) -> Tensor:
    """Packed output projection: only selected columns, each gate-weighted."""
    cols = layout.columns(decision.selected)
    h2, squeeze = _as_rows(h)
    if h2.shape[-1] != w.shape[0]:
        raise ValueError(f"input width {h2.shape[-1]} does not match rows of w {w.shape[0]}")
    out = mul(matmul(h2, take(w, cols, axis=1)), _packed_gates(decision, layout.subdim_width))
    return out.reshape(-1) if squeeze else out


def scatter_scale_fuse(
    y_s: Tensor, decision: GateDecision, layout: SubDimLayout, fusion: FusionParams
) -> Tensor:
    """Scatter packed output to full width, apply alpha, run group fusion."""
    cols = layout.columns(decision.selected)
    y2, squeeze = _as_rows(y_s)
    full = mul(scatter_cols(y2, cols, layout.width), decision.scale)
    out = apply_fusion(full, fusion)
    return out.reshape(-1) if squeeze else out


# -- rotary position embedding -------------------------------------------------------

_ROPE_CACHE: dict[tuple[int, int], tuple[Array, Array]] = {}
_MASK_CACHE: dict[int, Array] = {}


def rope_tables(seq_len: int, head_dim: int) -> tuple[Array, Array]:
    key = (seq_len, head_dim)
    if key not in _ROPE_CACHE:
        half = head_dim // 2
        inv_freq = 1.0 / (10000.0 ** (np.arange(half) / half))
        angles = np.outer(np.arange(seq_len), inv_freq)
        cos = np.concatenate([np.cos(angles), np.cos(angles)], axis=-1)
        sin = np.concatenate([np.sin(angles), np.sin(angles)], axis=-1)
        _ROPE_CACHE[key] = (cos, sin)
    return _ROPE_CACHE[key]


def apply_rope(q: Tensor, seq_len: int, head_dim: int) -> Tensor:
    """Rotate half-pairs of the head dimension by position-dependent angles."""
    cos, sin = rope_tables(seq_len, head_dim)
    half = head_dim // 2
    rotated = concat([-q[..., half:], q[..., :half]], axis=-1)
    return add(mul(q, cos), mul(rotated, sin))


def causal_mask(seq_len: int) -> Array:
    if seq_len not in _MASK_CACHE:
        m = np.triu(np.full((seq_len, seq_len), -1e30), k=1)
        _MASK_CACHE[seq_len] = m[None, None]
    return _MASK_CACHE[seq_len]


# -- parameter containers -----------------------------------------------------------


@dataclass
class AttentionParams:
    wq: Tensor  # (d, heads*head_dim)
    wk: Tensor
    wv: Tensor
    wo: Tensor  # (heads*head_dim, d)
    heads: int
    head_dim: int


@dataclass
class FFNParams:
    w_up: Tensor  # (d, d_ff)
    w_gate: Tensor  # (d, d_ff)
    w_down: Tensor  # (d_ff, d)


# -- batched sparse sub-layers ----------------------------------------------------------


def _group_inputs(
    x: Tensor, routing: BatchRouting, layout: SubDimLayout
) -> list[tuple[Array, Array, Tensor, Tensor]]:
    """Per selection group: token rows, packed columns, packed input, packed gates."""
    d_e = layout.subdim_width
    out = []
    for selected, rows in routing.groups:
        cols = layout.columns(selected)
        x_packed = take(take(x, rows, axis=0), cols, axis=-1)
        g_sel = take(take(routing.gates, rows, axis=0), np.asarray(selected), axis=-1)
        g_packed = take(g_sel, np.repeat(np.arange(len(selected)), d_e), axis=-1)
        out.append((rows, cols, x_packed, g_packed))
    return out


def _assemble_rows(pieces: list[Tensor], row_sets: list[Array], n: int) -> Tensor:
    if len(pieces) == 1:
        return scatter_rows(pieces[0], row_sets[0], n)
    return scatter_rows(concat(pieces, axis=0), np.concatenate(row_sets), n)


def mohd_attention(
    x: Tensor,
    attn: AttentionParams,
    routing: BatchRouting,
    layout: SubDimLayout,
    fusion: FusionParams,
    batch: int,
    seq_len: int,
    probes=None,
    layer: int = 0,
) -> Tensor:
    """Causal multi-head attention over gate-weighted sub-dimension slices."""
    if seq_len < 1:
        raise ValueError("attention requires at least one token per sequence")
    n = x.shape[0]
    width = attn.heads * attn.head_dim
    groups = _group_inputs(x, routing, layout)

    projected = {"q": [], "k": [], "v": []}
    row_sets = []
    for rows, cols, x_packed, g_packed in groups:
        gx = mul(x_packed, g_packed)
        for name, w in (("q", attn.wq), ("k", attn.wk), ("v", attn.wv)):
            projected[name].append(matmul(gx, take(w, cols, axis=0)))
        row_sets.append(rows)
    q = _assemble_rows(projected["q"], row_sets, n)
    k = _assemble_rows(projected["k"], row_sets, n)
    v = _assemble_rows(projected["v"], row_sets, n)
    if probes is not None:
        probes.record(layer, "attn_qkv_out", np.concatenate([q.data, k.data, v.data]))

    mixed = _attention_core(q, k, v, attn, batch, seq_len)

    o_pieces = []
    for rows, cols, _, g_packed in groups:
        h_g = take(mixed, rows, axis=0)
        o_packed = mul(matmul(h_g, take(attn.wo, cols, axis=1)), g_packed)
        o_pieces.append(scatter_cols(o_packed, cols, layout.width))
    y = _assemble_rows(o_pieces, row_sets, n)
    y = apply_fusion(mul(y, routing.alpha), fusion)
    if probes is not None:
        probes.record(layer, "attn_o_out", y.data)
    return y


def _attention_core(
    q: Tensor, k: Tensor, v: Tensor, attn: AttentionParams, batch: int, seq_len: int
) -> Tensor:
    """Rotary embedding, causal scaled dot-product, head merge."""
    heads, head_dim = attn.heads, attn.head_dim

    def to_heads(t: Tensor) -> Tensor:
        return swapaxes(reshape(t, (batch, seq_len, heads, head_dim)), 1, 2)

    q4 = apply_rope(to_heads(q), seq_len, head_dim)
    k4 = apply_rope(to_heads(k), seq_len, head_dim)
    v4 = to_heads(v)
    scores = mul(matmul(q4, swapaxes(k4, -1, -2)), 1.0 / math.sqrt(head_dim))
    probs = softmax(add(scores, causal_mask(seq_len)), axis=-1)
    mixed = swapaxes(matmul(probs, v4), 1, 2)
    return reshape(mixed, (batch * seq_len, heads * head_dim))


def mohd_ffn(
    x: Tensor,
    ffn: FFNParams,
    routing: BatchRouting,
    layout: SubDimLayout,
    fusion: FusionParams,
    probes=None,
    layer: int = 0,
) -> Tensor:
    """Gated (SwiGLU) feed-forward over gate-weighted sub-dimension slices."""
    n = x.shape[0]
    groups = _group_inputs(x, routing, layout)
    pieces, row_sets, up_pieces = [], [], []
    for rows, cols, x_packed, g_packed in groups:
        gx = mul(x_packed, g_packed)
        up = matmul(gx, take(ffn.w_up, cols, axis=0))
        gate = matmul(gx, take(ffn.w_gate, cols, axis=0))
        hidden = mul(silu(up), gate)
        down = mul(matmul(hidden, take(ffn.w_down, cols, axis=1)), g_packed)
        pieces.append(scatter_cols(down, cols, layout.width))
        row_sets.append(rows)
        if probes is not None:
            up_pieces.append(up.data)
    if probes is not None:
        full_up = np.zeros((n, ffn.w_up.shape[1]))
        for rows, piece in zip(row_sets, up_pieces):
            full_up[rows] = piece
        probes.record(layer, "ffn_up_out", full_up)
    y = _assemble_rows(pieces, row_sets, n)
    y = apply_fusion(mul(y, routing.alpha), fusion)
    if probes is not None:
        probes.record(layer, "ffn_down_out", y.data)
    return y


# -- dense baselines ---------------------------------------------------------------


def vanilla_attention(
    x: Tensor,
    attn: AttentionParams,
    batch: int,
    seq_len: int,
    probes=None,
    layer: int = 0,
) -> Tensor:
    """Standard causal multi-head attention with rotary embeddings."""
    if seq_len < 1:
        raise ValueError("attention requires at least one token per sequence")
    q = matmul(x, attn.wq)
    k = matmul(x, attn.wk)
    v = matmul(x, attn.wv)
    if probes is not None:
        probes.record(layer, "attn_qkv_out", np.concatenate([q.data, k.data, v.data]))
    mixed = _attention_core(q, k, v, attn, batch, seq_len)
    y = matmul(mixed, attn.wo)
    if probes is not None:
        probes.record(layer, "attn_o_out", y.data)
    return y


def vanilla_ffn(x: Tensor, ffn: FFNParams, probes=None, layer: int = 0) -> Tensor:
    """SwiGLU feed-forward."""
    up = matmul(x, ffn.w_up)
    if probes is not None:
        probes.record(layer, "ffn_up_out", up.data)
    y = matmul(mul(silu(up), matmul(x, ffn.w_gate)), ffn.w_down)
    if probes is not None:
        probes.record(layer, "ffn_down_out", y.data)
    return y


# -- transformer blocks ------------------------------------------------------------------


@dataclass
class BlockParams:
    norm1: Tensor
    attn: AttentionParams
    norm2: Tensor
    ffn: FFNParams
    norm_eps: float
    # sparse machinery; None for the vanilla baseline
    router_attn: RouterParams | None = None
    fusion_attn: FusionParams | None = None
    layout_attn: SubDimLayout | None = None
    router_ffn: RouterParams | None = None
    fusion_ffn: FusionParams | None = None
    layout_ffn: SubDimLayout | None = None


def mohd_block(
    x: Tensor,
    blk: BlockParams,
    batch: int,
    seq_len: int,
    probes=None,
    route_stats=None,
    layer: int = 0,
) -> tuple[Tensor, list[Tensor]]:
    """Pre-norm residual block with separate attention and FFN routers."""
    h = rmsnorm(x, blk.norm1, blk.norm_eps)
    if probes is not None:
        probes.record(layer, "attn_input", h.data)
    routing_a = route_tokens(h, blk.router_attn)
    if route_stats is not None:
        route_stats.add(layer, "attn", routing_a.scores.data, routing_a.mask)
    x = add(
        x,
        mohd_attention(
            h, blk.attn, routing_a, blk.layout_attn, blk.fusion_attn,
            batch, seq_len, probes, layer,
        ),
    )
    if probes is not None:
        probes.record(layer, "attn_residual_out", x.data)

    h2 = rmsnorm(x, blk.norm2, blk.norm_eps)
    if probes is not None:
        probes.record(layer, "ffn_input", h2.data)
    routing_f = route_tokens(h2, blk.router_ffn)
    if route_stats is not None:
        route_stats.add(layer, "ffn", routing_f.scores.data, routing_f.mask)
    x = add(
        x,
        mohd_ffn(h2, blk.ffn, routing_f, blk.layout_ffn, blk.fusion_ffn, probes, layer),
    )
    if probes is not None:
        probes.record(layer, "ffn_residual_out", x.data)
    return x, [routing_a.scores, routing_f.scores]


def vanilla_block(
    x: Tensor,
    blk: BlockParams,
    batch: int,
    seq_len: int,
    probes=None,
    layer: int = 0,
) -> Tensor:
    """Pre-norm residual block, fully dense."""
    h = rmsnorm(x, blk.norm1, blk.norm_eps)
    if probes is not None:
        probes.record(layer, "attn_input", h.data)
    x = add(x, vanilla_attention(h, blk.attn, batch, seq_len, probes, layer))
    if probes is not None:
        probes.record(layer, "attn_residual_out", x.data)
    h2 = rmsnorm(x, blk.norm2, blk.norm_eps)
    if probes is not None:
        probes.record(layer, "ffn_input", h2.data)
    x = add(x, vanilla_ffn(h2, blk.ffn, probes, layer))
    if probes is not None:
        probes.record(layer, "ffn_residual_out", x.data)
    return x


# -- parameter accounting -------------------------------------------------------------


@dataclass
class ParamCounts:
    """Learnable scalar counts; ``activated`` is per-token-touched, so the
    embedding tables are excluded from it."""

    rows: list[tuple[str, int, int]]  # (component, total, activated)

    @property
    def total(self) -> int:
        return sum(r[1] for r in self.rows)

    @property
    def activated(self) -> int:
        return sum(r[2] for r in self.rows)


def count_params(cfg) -> ParamCounts:
    """Enumerate (total, activated) learnable scalars for a model config."""
    d = cfg.d
    width = cfg.attn_width
    sparse = cfg.arch == "mohd"
    da = cfg.attn_delta if sparse else 1.0
    df = cfg.ffn_delta if sparse else 1.0
    attn_total = cfg.depth * 4 * d * width
    ffn_total = cfg.depth * 3 * d * cfg.ffn_dim
    rows = [
        ("embeddings", 2 * cfg.vocab_size * d, 0),
        ("attention", attn_total, round(da * attn_total)),
        ("ffn", ffn_total, round(df * ffn_total)),
    ]
    if sparse:
        router_total = cfg.depth * (cfg.attn_subdims + cfg.ffn_subdims) * d
        fusion_total = cfg.depth * 2 * d * cfg.fusion_r
        rows.append(("routers", router_total, router_total))
        rows.append(("fusion", fusion_total, fusion_total))
    norm_total = (2 * cfg.depth + 1) * d
    rows.append(("norms", norm_total, norm_total))
    return ParamCounts(rows=rows)
