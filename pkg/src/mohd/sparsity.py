"""Activation-magnitude analysis: sparsity, cumulative curves, shared
high-activation counting across consecutive tokens, and per-site flow
tracing through transformer blocks.

A dimension's magnitude is the square of its activation value; a vector's
sparsity is the fraction of dimensions whose magnitude falls below a
near-zero threshold.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

Array = np.ndarray

# Probe locations recorded per block, in forward order. The qkv site stacks
# the three projection outputs row-wise; widths are site-dependent (the
# up-projection site has the FFN intermediate width).
SITES = (
    "attn_input",
    "attn_qkv_out",
    "attn_o_out",
    "attn_residual_out",
    "ffn_input",
    "ffn_up_out",
    "ffn_down_out",
    "ffn_residual_out",
)


@dataclass
class ActivationTrace:
    """Activations captured at one probe site of one layer."""

    layer: int
    site: str
    values: Array  # (rows, width), copied at record time


class ProbeRecorder:
    """Collects one trace per (layer, site) during a single forward pass."""

    def __init__(self):
        self.traces: list[ActivationTrace] = []
        self._seen: set[tuple[int, str]] = set()

    def record(self, layer: int, site: str, values: Array) -> None:
        if site not in SITES:
            raise ValueError(f"unknown probe site {site!r}")
        key = (layer, site)
        if key in self._seen:
            raise ValueError(f"site {site} of layer {layer} already recorded this pass")
        self._seen.add(key)
        values = np.array(values, dtype=np.float64)  # snapshot before any reuse
        if values.ndim != 2:
            raise ValueError(f"probe values must be 2-D, got shape {values.shape}")
        self.traces.append(ActivationTrace(layer=layer, site=site, values=values))


def _as_array(x) -> Array:
    return np.asarray(getattr(x, "data", x), dtype=np.float64)


def magnitude(x) -> Array:
    """Per-dimension magnitude: elementwise square of the activation."""
    x = _as_array(x)
    return x * x


def sparsity(x, eps: float) -> float:
    """Fraction of dimensions whose squared activation is below ``eps``."""
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    x = _as_array(x)
    if x.size == 0:
        raise ValueError("sparsity of an empty vector is undefined")
    return float((magnitude(x) < eps).mean())


def cumulative_magnitude_curve(x) -> Array:
    """Descending-sorted magnitudes as cumulative fractions of the total."""
    m = magnitude(x).reshape(-1)
    total = m.sum()
    if total <= 0:
        raise ValueError("cumulative curve undefined for an all-zero vector")
    return np.cumsum(np.sort(m)[::-1]) / total


def shared_activation_count(x, q: float) -> int:
    """Dimensions highly activated by every one of ``w`` consecutive tokens.

    Per token the top ``ceil(q*d)`` dimensions by magnitude count as highly
    activated; the result is the size of the intersection across all rows.
    """
    x = _as_array(x)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("need a (w, d) matrix with w >= 2 tokens")
    if not 0.0 < q < 1.0:
        raise ValueError(f"top-fraction q must lie in (0, 1), got {q}")
    w, d = x.shape
    k = math.ceil(q * d)
    m = magnitude(x)
    top = np.argsort(-m, axis=1, kind="stable")[:, :k]
    hot = np.zeros((w, d), dtype=bool)
    np.put_along_axis(hot, top, True, axis=1)
    return int(hot.all(axis=0).sum())


@dataclass
class SiteReport:
    """Summary statistics for one (layer, site) trace."""

    layer: int
    site: str
    sparsity: float
    mean_magnitude: float
    cumulative_curve: Array = field(repr=False)


def site_report(trace: ActivationTrace, eps: float) -> SiteReport:
    """Per-site stats; the curve is taken over the dimension-wise RMS vector,
    so its magnitudes are the per-dimension mean squared activations."""
    m = magnitude(trace.values)
    per_row = (m < eps).mean(axis=1)
    dim_rms = np.sqrt(m.mean(axis=0))
    return SiteReport(
        layer=trace.layer,
        site=trace.site,
        sparsity=float(per_row.mean()),
        mean_magnitude=float(m.mean()),
        cumulative_curve=cumulative_magnitude_curve(dim_rms),
    )


def activation_flow_trace(model, batch: Array) -> list[tuple[int, str, float]]:
    """Mean magnitude per probe site, scaled so each layer's block input
    (the attention-input site) reads 100."""
    batch = np.asarray(batch)
    if batch.size == 0:
        raise ValueError("activation flow requires a non-empty batch")
    probes = ProbeRecorder()
    from .autodiff import no_grad

    with no_grad():
        model.forward(batch, probes=probes)
    means = {(t.layer, t.site): magnitude(t.values).mean() for t in probes.traces}
    out = []
    for layer in sorted({t.layer for t in probes.traces}):
        base = means[(layer, "attn_input")]
        for site in SITES:
            out.append((layer, site, float(100.0 * means[(layer, site)] / base)))
    return out


# -- trace persistence ------------------------------------------------------------

_TRACE_HEADER = "MOHD-TRACE v1"


def write_trace(path: str, traces: list[ActivationTrace]) -> None:
    """One file per forward pass: header line, then per-trace records."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(_TRACE_HEADER + "\n")
        for t in traces:
            n, d = t.values.shape
            fh.write(f"layer={t.layer} site={t.site} n={n} d={d}\n")
            fh.write(" ".join(repr(float(v)) for v in t.values.reshape(-1)) + "\n")


def read_trace(path: str) -> list[ActivationTrace]:
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        if header != _TRACE_HEADER:
            raise ValueError(f"not a trace file: bad header {header!r}")
        traces = []
        while True:
            meta = fh.readline()
            if not meta:
                break
            fields = dict(item.split("=", 1) for item in meta.split())
            n, d = int(fields["n"]), int(fields["d"])
            values = np.array(fh.readline().split(), dtype=np.float64)
            if values.size != n * d:
                raise ValueError(
                    f"trace record for layer {fields['layer']} site {fields['site']} "
                    f"has {values.size} values, expected {n * d}"
                )
            traces.append(
                ActivationTrace(
                    layer=int(fields["layer"]),
                    site=fields["site"],
                    values=values.reshape(n, d),
                )
            )
    return traces
