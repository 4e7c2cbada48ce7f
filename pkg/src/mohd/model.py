"""Byte-level causal language models built from the sparse and dense blocks."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, matmul, rmsnorm, take
from .config import ModelConfig
from .layers import (
    AttentionParams,
    BlockParams,
    FFNParams,
    FusionParams,
    mohd_block,
    vanilla_block,
)
from .routing import RouterParams, SubDimLayout

Array = np.ndarray

INIT_STD = 0.02


class RouteStatsCollector:
    """Accumulates router score mass and selection counts per (layer, component)."""

    def __init__(self):
        self.score_sums: dict[tuple[int, str], Array] = {}
        self.select_counts: dict[tuple[int, str], Array] = {}
        self.token_counts: dict[tuple[int, str], int] = {}

    def add(self, layer: int, component: str, scores: Array, mask: Array) -> None:
        key = (layer, component)
        if key not in self.score_sums:
            self.score_sums[key] = np.zeros(scores.shape[1])
            self.select_counts[key] = np.zeros(scores.shape[1])
            self.token_counts[key] = 0
        self.score_sums[key] += scores.sum(axis=0)
        self.select_counts[key] += mask.sum(axis=0)
        self.token_counts[key] += scores.shape[0]

    def rows(self) -> list[tuple[int, str, int, float, float]]:
        """(layer, component, subdim, mean_score, selection_frequency) rows."""
        out = []
        for key in sorted(self.score_sums):
            layer, component = key
            count = self.token_counts[key]
            means = self.score_sums[key] / count
            freqs = self.select_counts[key] / count
            for i, (m, f) in enumerate(zip(means, freqs)):
                out.append((layer, component, i, float(m), float(f)))
        return out


def _normal(rng: np.random.Generator, shape) -> Tensor:
    return Tensor(rng.normal(0.0, INIT_STD, size=shape), requires_grad=True)


def _scaled(t: Tensor, gain: float) -> Tensor:
    if gain != 1.0:
        t.data = t.data * gain
    return t


def _ones(shape) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


class _LanguageModel:
    """Shared embedding/head scaffolding; subclasses supply the block stack."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.config = cfg
        d = cfg.d
        self.embed = _normal(rng, (cfg.vocab_size, d))
        self.blocks: list[BlockParams] = [self._build_block(cfg, rng) for _ in range(cfg.depth)]
        self.final_norm = _ones(d)
        self.head = _normal(rng, (d, cfg.vocab_size))

    def _build_block(self, cfg: ModelConfig, rng) -> BlockParams:
        raise NotImplementedError

    def _build_dense_core(
        self, cfg: ModelConfig, rng, attn_in_gain: float = 1.0, ffn_in_gain: float = 1.0
    ) -> tuple:
        """Input-side projections take an init gain compensating the mean
        sub-dimension gate weight (1/N at init), so the routed model starts
        with dense-scale activations. Output-side projections need none: the
        per-token scale factor already restores their gating on average."""
        d, width = cfg.d, cfg.attn_width
        attn = AttentionParams(
            wq=_scaled(_normal(rng, (d, width)), attn_in_gain),
            wk=_scaled(_normal(rng, (d, width)), attn_in_gain),
            wv=_scaled(_normal(rng, (d, width)), attn_in_gain),
            wo=_normal(rng, (width, d)),
            heads=cfg.heads,
            head_dim=cfg.head_dim,
        )
        ffn = FFNParams(
            w_up=_scaled(_normal(rng, (d, cfg.ffn_dim)), ffn_in_gain),
            w_gate=_scaled(_normal(rng, (d, cfg.ffn_dim)), ffn_in_gain),
            w_down=_normal(rng, (cfg.ffn_dim, d)),
        )
        return attn, ffn

    # -- parameter access ---------------------------------------------------

    def params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {"embed": self.embed}
        for i, blk in enumerate(self.blocks):
            p = f"blocks.{i}"
            out[f"{p}.norm1"] = blk.norm1
            out[f"{p}.attn.wq"] = blk.attn.wq
            out[f"{p}.attn.wk"] = blk.attn.wk
            out[f"{p}.attn.wv"] = blk.attn.wv
            out[f"{p}.attn.wo"] = blk.attn.wo
            if blk.router_attn is not None:
                out[f"{p}.router_attn.centroids"] = blk.router_attn.centroids
                out[f"{p}.fusion_attn.blocks"] = blk.fusion_attn.blocks
            out[f"{p}.norm2"] = blk.norm2
            out[f"{p}.ffn.w_up"] = blk.ffn.w_up
            out[f"{p}.ffn.w_gate"] = blk.ffn.w_gate
            out[f"{p}.ffn.w_down"] = blk.ffn.w_down
            if blk.router_ffn is not None:
                out[f"{p}.router_ffn.centroids"] = blk.router_ffn.centroids
                out[f"{p}.fusion_ffn.blocks"] = blk.fusion_ffn.blocks
        out["final_norm"] = self.final_norm
        out["head"] = self.head
        return out

    def state(self) -> dict[str, Array]:
        return {name: p.data.copy() for name, p in self.params().items()}

    def load_state(self, state: dict[str, Array]) -> None:
        params = self.params()
        missing = sorted(set(params) - set(state))
        extra = sorted(set(state) - set(params))
        if missing or extra:
            raise KeyError(f"state mismatch: missing {missing}, unexpected {extra}")
        for name, p in params.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.data.shape:
                raise ValueError(
                    f"state mismatch: {name} has shape {value.shape}, "
                    f"expected {p.data.shape}"
                )
            p.data = value.copy()

    # -- forward -----------------------------------------------------------

    def forward(
        self, tokens: Array, probes=None, route_stats=None
    ) -> tuple[Tensor, list[Tensor]]:
        """Map (batch, seq_len) token ids to (batch*seq_len, vocab) logits.

        Also returns each router's softmax scores for the balance loss
        (empty for the dense baseline).
        """
        tokens = np.asarray(tokens)
        if tokens.ndim != 2 or tokens.size == 0:
            raise ValueError(f"tokens must be a non-empty (batch, seq_len) array, got {tokens.shape}")
        if tokens.min() < 0 or tokens.max() >= self.config.vocab_size:
            raise ValueError("token id outside the vocabulary")
        batch, seq_len = tokens.shape
        x = take(self.embed, tokens.reshape(-1), axis=0)
        x, scores = self._run_blocks(x, batch, seq_len, probes, route_stats)
        x = rmsnorm(x, self.final_norm, self.config.norm_eps)
        return matmul(x, self.head), scores

    def _run_blocks(self, x, batch, seq_len, probes, route_stats):
        raise NotImplementedError


class MoHDModel(_LanguageModel):
    """Transformer with routed sub-dimension activation in every block."""

    def _build_block(self, cfg: ModelConfig, rng) -> BlockParams:
        d = cfg.d
        attn, ffn = self._build_dense_core(
            cfg, rng,
            attn_in_gain=float(cfg.attn_subdims),
            ffn_in_gain=float(cfg.ffn_subdims),
        )
        router_attn = RouterParams(
            centroids=_normal(rng, (cfg.attn_subdims, d)),
            delta=cfg.attn_delta,
            phi_shared=cfg.attn_shared,
        )
        router_ffn = RouterParams(
            centroids=_normal(rng, (cfg.ffn_subdims, d)),
            delta=cfg.ffn_delta,
            phi_shared=cfg.ffn_shared,
        )
        return BlockParams(
            norm1=_ones(d),
            attn=attn,
            norm2=_ones(d),
            ffn=ffn,
            norm_eps=cfg.norm_eps,
            router_attn=router_attn,
            fusion_attn=FusionParams.identity(d, cfg.fusion_r),
            layout_attn=SubDimLayout(d, cfg.attn_subdims),
            router_ffn=router_ffn,
            fusion_ffn=FusionParams.identity(d, cfg.fusion_r),
            layout_ffn=SubDimLayout(d, cfg.ffn_subdims),
        )

    def _run_blocks(self, x, batch, seq_len, probes, route_stats):
        all_scores: list[Tensor] = []
        for layer, blk in enumerate(self.blocks):
            x, scores = mohd_block(
                x, blk, batch, seq_len, probes, route_stats, layer
            )
            all_scores.extend(scores)
        return x, all_scores


class VanillaModel(_LanguageModel):
    """Dense baseline with the same block skeleton and no routing."""

    def _build_block(self, cfg: ModelConfig, rng) -> BlockParams:
        attn, ffn = self._build_dense_core(cfg, rng)
        return BlockParams(
            norm1=_ones(cfg.d), attn=attn, norm2=_ones(cfg.d), ffn=ffn,
            norm_eps=cfg.norm_eps,
        )

    def _run_blocks(self, x, batch, seq_len, probes, route_stats):
        for layer, blk in enumerate(self.blocks):
            x = vanilla_block(x, blk, batch, seq_len, probes, layer)
        return x, []


def build_model(cfg: ModelConfig, seed: int) -> _LanguageModel:
    rng = np.random.default_rng(seed)
    if cfg.arch == "vanilla":
        return VanillaModel(cfg, rng)
    return MoHDModel(cfg, rng)
