"""Analytic prefill-complexity and KV-cache size calculators.

Prefill cost counts (K-m)*n^2*d for the remaining attention layers plus
m*n*d for the linear substitutes, in dimensionless units. KV-cache bytes
follow the grouped-query convention: 2 tensors (keys and values) per
remaining layer, d*(g/h) features per token, times batch, context and
element size. Sizes display in binary GiB (2^30 bytes).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

GIB = float(1 << 30)


@dataclass(frozen=True)
class InferenceProfile:
    layers: int          # K, attention layers in the original model
    linearized: int      # m
    context: int         # n tokens
    dim: int             # d
    batch: int = 1
    heads: int = 1
    groups: int = 1
    bytes_per_elem: int = 2

    def validate(self) -> None:
        if not 0 <= self.linearized <= self.layers:
            raise ValueError(f"need 0 <= m <= K, got m={self.linearized}, K={self.layers}")
        for name in ("layers", "context", "dim", "batch", "heads", "groups", "bytes_per_elem"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.heads % self.groups != 0:
            raise ValueError(f"groups ({self.groups}) must divide heads ({self.heads})")


def prefill_cost(p: InferenceProfile) -> float:
    """(K - m) * n^2 * d + m * n * d."""
    p.validate()
    k, m, n, d = p.layers, p.linearized, p.context, p.dim
    return float((k - m) * n * n * d + m * n * d)


def prefill_speedup(p: InferenceProfile) -> float:
    """cost(m=0) / cost(m); >= 1, approaching K/(K-m) as n grows."""
    p.validate()
    return prefill_cost(replace(p, linearized=0)) / prefill_cost(p)


def kv_cache_bytes(p: InferenceProfile) -> float:
    """2 * bs * n * d * (g/h) * (K - m) * bytes_per_elem."""
    p.validate()
    per_layer = 2 * p.batch * p.context * p.dim * (p.groups / p.heads) * p.bytes_per_elem
    return per_layer * (p.layers - p.linearized)


def kv_cache_gib(p: InferenceProfile) -> float:
    return kv_cache_bytes(p) / GIB


@dataclass(frozen=True)
class CacheTable:
    contexts: tuple[int, ...]
    linearized_counts: tuple[int, ...]
    gib: tuple[tuple[float, ...], ...]  # [row=context][col=m]

    def text(self) -> str:
        headers = ["Context"] + [
            "Original" if m == 0 else f"Linear-{m}" for m in self.linearized_counts
        ]
        rows = [
            [str(n)] + [f"{v:.1f}" for v in row] for n, row in zip(self.contexts, self.gib)
        ]
        widths = [max(len(h), *(len(r[i]) for r in rows)) for i, h in enumerate(headers)]
        lines = ["  ".join(h.rjust(w) for h, w in zip(headers, widths))]
        for r in rows:
            lines.append("  ".join(c.rjust(w) for c, w in zip(r, widths)))
        return "\n".join(lines)

    def to_json(self) -> str:
        payload = {
            "unit": "GiB",
            "contexts": list(self.contexts),
            "linearized_counts": list(self.linearized_counts),
            "gib": [list(row) for row in self.gib],
        }
        return json.dumps(payload, sort_keys=True, indent=2)


def cache_table(profiles: list[InferenceProfile]) -> CacheTable:
    """Tabulate KV-cache GiB; rows = contexts, columns = m values.

    Profiles must form a full grid over their distinct (context, m) pairs;
    order of first appearance fixes row/column order.
    """
    if not profiles:
        raise ValueError("profile list is empty")
    contexts: list[int] = []
    ms: list[int] = []
    values: dict[tuple[int, int], float] = {}
    for p in profiles:
        if p.context not in contexts:
            contexts.append(p.context)
        if p.linearized not in ms:
            ms.append(p.linearized)
        values[(p.context, p.linearized)] = kv_cache_gib(p)
    missing = [(n, m) for n in contexts for m in ms if (n, m) not in values]
    if missing:
        raise ValueError(f"profiles do not form a grid; missing {missing[:4]}")
    gib = tuple(tuple(values[(n, m)] for m in ms) for n in contexts)
    return CacheTable(tuple(contexts), tuple(ms), gib)
