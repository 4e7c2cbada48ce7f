"""Token-to-sub-dimension gating.

The hidden dimension is split into N contiguous sub-dimensions of width
``d_e``. Per token, the first ``phi*N`` (shared) sub-dimensions are always
active and ``(delta - phi)*N`` more are chosen among the remaining
(specialized) ones by top-k over softmax affinity scores. Selected
sub-dimensions keep their softmax score as a gate weight; a scale factor
restores the activation mass lost to softmax normalization.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, div, matmul, mul, softmax, swapaxes, take, tsum

Array = np.ndarray


@dataclass(frozen=True)
class SubDimLayout:
    """Partition of a width-``d`` axis into ``n_subdims`` contiguous slices."""

    width: int
    n_subdims: int

    def __post_init__(self):
        if self.width % self.n_subdims != 0:
            raise ValueError(
                f"n_subdims={self.n_subdims} does not divide width={self.width}"
            )

    @property
    def subdim_width(self) -> int:
        return self.width // self.n_subdims

    def columns(self, selected) -> Array:
        """Ascending column indices covered by the selected sub-dimensions."""
        d_e = self.subdim_width
        sel = np.asarray(sorted(selected), dtype=np.intp)
        if sel.size and (sel[0] < 0 or sel[-1] >= self.n_subdims):
            raise IndexError(f"sub-dimension index out of range 0..{self.n_subdims - 1}")
        return (sel[:, None] * d_e + np.arange(d_e)).reshape(-1)


@dataclass
class RouterParams:
    """Learnable gating state for one component of one layer."""

    centroids: Tensor  # (N, d), one row per sub-dimension
    delta: float
    phi_shared: float
    layer: int = 0

    def __post_init__(self):
        n = self.centroids.shape[0]
        for name, value in (("delta", self.delta), ("phi_shared", self.phi_shared)):
            if abs(value * n - round(value * n)) > 1e-9:
                raise ValueError(f"{name}={value} times N={n} is not an integer")
        if not 0.0 < self.delta <= 1.0:
            raise ValueError(f"delta={self.delta} outside (0, 1]")
        if not 0.0 <= self.phi_shared <= self.delta:
            raise ValueError(f"phi_shared={self.phi_shared} outside [0, delta]")

    @property
    def n_subdims(self) -> int:
        return self.centroids.shape[0]

    @property
    def n_shared(self) -> int:
        return round(self.phi_shared * self.n_subdims)

    @property
    def n_active(self) -> int:
        return round(self.delta * self.n_subdims)

    @property
    def n_routed(self) -> int:
        return self.n_active - self.n_shared


@dataclass(frozen=True)
class GateDecision:
    """Routing outcome for a single token."""

    selected: tuple[int, ...]  # ascending; always includes 0..n_shared-1
    weights: tuple[float, ...]  # softmax score of each selected sub-dimension
    scale: float
    scores_full: Array = field(compare=False)  # all N scores, kept for balance loss


def score(x: Tensor, params: RouterParams) -> Tensor:
    """Softmax over centroid affinities; rows are tokens, columns sub-dimensions."""
    squeeze = x.ndim == 1
    if squeeze:
        x = x.reshape(1, -1)
    if x.shape[-1] != params.centroids.shape[1]:
        raise ValueError(
            f"token width {x.shape[-1]} does not match centroid width "
            f"{params.centroids.shape[1]}"
        )
    s = softmax(matmul(x, swapaxes(params.centroids, 0, 1)), axis=-1)
    return s.reshape(-1) if squeeze else s


def topk_mask(scores: Array, n_shared: int, n_routed: int) -> Array:
    """Boolean (n, N) selection mask: shared block plus per-row top-k.

    Ties resolve to the lowest sub-dimension index (stable argsort), so the
    mask is deterministic.
    """
    scores = np.atleast_2d(scores)
    n, n_sub = scores.shape
    if n_routed > n_sub - n_shared:
        raise ValueError(
            f"cannot route {n_routed} of {n_sub - n_shared} specialized sub-dimensions"
        )
    mask = np.zeros((n, n_sub), dtype=bool)
    mask[:, :n_shared] = True
    if n_routed > 0:
        order = np.argsort(-scores[:, n_shared:], axis=1, kind="stable")
        picks = order[:, :n_routed] + n_shared
        np.put_along_axis(mask, picks, True, axis=1)
    return mask


def select_mixed(s, params: RouterParams) -> GateDecision:
    """Gate one token: keep the shared block, top-k the specialized block."""
    scores = np.asarray(s.data if isinstance(s, Tensor) else s, dtype=np.float64)
    if scores.ndim != 1 or scores.shape[0] != params.n_subdims:
        raise ValueError(f"expected {params.n_subdims} scores, got shape {scores.shape}")
    mask = topk_mask(scores[None, :], params.n_shared, params.n_routed)[0]
    selected = tuple(int(i) for i in np.flatnonzero(mask))
    weights = tuple(float(scores[i]) for i in selected)
    return GateDecision(
        selected=selected,
        weights=weights,
        scale=params.n_active / sum(weights),
        scores_full=scores.copy(),
    )


def scale_factor(decision: GateDecision) -> float:
    """K_total / sum(selected gate weights); restores unit-mean gate weight."""
    if not decision.selected:
        raise ValueError("decision selects no sub-dimensions")
    total = sum(decision.weights)
    if total == 0.0:
        raise ValueError("selected gate weights sum to zero")
    return len(decision.selected) / total


def gather_sparse(x: Tensor, decision: GateDecision, layout: SubDimLayout) -> Tensor:
    """Concatenate the selected sub-dimension slices of ``x`` in index order."""
    return take(x, layout.columns(decision.selected), axis=-1)


def balance_loss(decisions, beta: float) -> float:
    """Load-balance penalty beta * sum_i P_i * F_i over one batch of decisions.

    P_i is the mean softmax score of sub-dimension i across tokens and F_i
    the fraction of tokens whose argmax score lands on i.
    """
    decisions = list(decisions)
    if not decisions:
        raise ValueError("balance_loss requires at least one decision")
    scores = np.stack([d.scores_full for d in decisions])
    return beta * float(balance_terms(scores).sum())


def balance_terms(scores: Array) -> Array:
    """Per-sub-dimension P_i * F_i terms for a (tokens, N) score matrix."""
    p = scores.mean(axis=0)
    f = np.bincount(scores.argmax(axis=1), minlength=scores.shape[1]) / scores.shape[0]
    return p * f


def balance_loss_scores(scores: Tensor, beta: float) -> Tensor:
    """Differentiable balance loss; gradients flow through P_i only."""
    if scores.shape[0] == 0:
        raise ValueError("balance_loss requires at least one token")
    freq = (
        np.bincount(scores.data.argmax(axis=1), minlength=scores.shape[1])
        / scores.shape[0]
    )
    return mul(tsum(mul(scores.mean(axis=0), freq)), beta)


@dataclass
class BatchRouting:
    """Vectorized routing of a batch of tokens through one router."""

    scores: Tensor  # (n, N) softmax scores, in the graph
    gates: Tensor  # (n, N) scores with unselected entries zeroed
    mask: Array  # (n, N) bool
    alpha: Tensor  # (n, 1) scale factors, in the graph
    groups: list[tuple[tuple[int, ...], Array]]  # (selected subdims, token rows)


def route_tokens(x: Tensor, params: RouterParams) -> BatchRouting:
    """Score, select, and group a token batch by identical selection sets."""
    scores = score(x, params)
    mask = topk_mask(scores.data, params.n_shared, params.n_routed)
    gates = mul(scores, mask.astype(np.float64))
    alpha = div(float(params.n_active), tsum(gates, axis=1, keepdims=True))
    if mask.shape[1] <= 53:  # bit-packed key stays exact in the float matmul
        keys = mask @ (1 << np.arange(mask.shape[1], dtype=np.uint64))
        patterns, first, inverse = np.unique(keys, return_index=True, return_inverse=True)
    else:
        patterns, first, inverse = np.unique(
            mask, axis=0, return_index=True, return_inverse=True
        )
    order = np.argsort(inverse, kind="stable")
    bounds = np.searchsorted(inverse[order], np.arange(len(patterns)))
    groups = []
    for k in range(len(patterns)):
        hi = bounds[k + 1] if k + 1 < len(patterns) else len(order)
        rows = order[bounds[k]:hi]
        selected = tuple(int(i) for i in np.flatnonzero(mask[first[k]]))
        groups.append((selected, rows))
    return BatchRouting(scores=scores, gates=gates, mask=mask, alpha=alpha, groups=groups)
