"""Deterministic decoder-only toy transformer with grouped-query attention.

Used as the desk-scale substitution target: its attention sublayers can be
captured (residual-stream input X, sublayer output Y before the residual
add) and swapped for fitted linear maps. Weights are drawn from numpy's
PCG64 generator in a fixed order, so a (config, seed) pair reproduces the
model bit-for-bit on any platform.

The linearized block replaces norm + attention + output projection as one
affine function of the pre-norm residual stream; the residual add stays.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, replace

import numpy as np

from .kernels import causal_attention, causal_attention_probs, gelu, rmsnorm
from .lmmse import LinearMap

MODEL_MAGIC = b"NBLM"
MODEL_VERSION = 1


@dataclass(frozen=True)
class ToyConfig:
    layers: int        # K
    dim: int           # d, model width
    heads: int         # h
    groups: int        # g KV groups
    d_ff: int
    vocab: int
    max_context: int
    seed: int

    def validate(self) -> None:
        for name in ("layers", "dim", "heads", "groups", "d_ff", "vocab", "max_context"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.heads % self.groups != 0:
            raise ValueError(f"groups ({self.groups}) must divide heads ({self.heads})")
        if self.dim % self.heads != 0:
            raise ValueError(f"heads ({self.heads}) must divide dim ({self.dim})")
        if not 0 <= self.seed < 1 << 64:
            raise ValueError("seed must fit in 64 bits")

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def kv_dim(self) -> int:
        return self.dim * self.groups // self.heads


@dataclass(frozen=True)
class AttentionLayer:
    attn_norm: np.ndarray  # (d,)
    wq: np.ndarray         # (d, d)
    wk: np.ndarray         # (d, kv_dim)
    wv: np.ndarray         # (d, kv_dim)
    wo: np.ndarray         # (d, d)
    mlp_norm: np.ndarray   # (d,)
    w1: np.ndarray         # (d, d_ff)
    w2: np.ndarray         # (d_ff, d)

    kind = "attention"


@dataclass(frozen=True)
class LinearizedLayer:
    linear: LinearMap
    mlp_norm: np.ndarray
    w1: np.ndarray
    w2: np.ndarray

    kind = "linearized"


@dataclass(frozen=True)
class ToyTransformer:
    config: ToyConfig
    token_emb: np.ndarray  # (V, d)
    pos_emb: np.ndarray    # (L_max, d)
    blocks: tuple          # AttentionLayer | LinearizedLayer per layer
    final_norm: np.ndarray
    unembed: np.ndarray    # (d, V)

    def attention_layer_indices(self) -> list[int]:
        return [i for i, blk in enumerate(self.blocks) if blk.kind == "attention"]

    def linearized_layer_indices(self) -> list[int]:
        return [i for i, blk in enumerate(self.blocks) if blk.kind == "linearized"]


def init_random(config: ToyConfig) -> ToyTransformer:
    """Draw all weights from PCG64(config.seed) in a fixed documented order.

    Matmul weights are N(0, 1) scaled by 1/sqrt(fan_in); embeddings use
    1/sqrt(dim); norm scales start at one (no draw).
    """
    config.validate()
    rng = np.random.Generator(np.random.PCG64(config.seed))
    d, dff, v = config.dim, config.d_ff, config.vocab

    def draw(rows: int, cols: int, fan_in: int) -> np.ndarray:
        return rng.standard_normal((rows, cols)) / np.sqrt(fan_in)

    token_emb = draw(v, d, d)
    pos_emb = draw(config.max_context, d, d)
    blocks = []
    for _ in range(config.layers):
        blocks.append(
            AttentionLayer(
                attn_norm=np.ones(d),
                wq=draw(d, d, d),
                wk=draw(d, config.kv_dim, d),
                wv=draw(d, config.kv_dim, d),
                wo=draw(d, d, d),
                mlp_norm=np.ones(d),
                w1=draw(d, dff, d),
                w2=draw(dff, d, dff),
            )
        )
    final_norm = np.ones(d)
    unembed = draw(d, v, d)
    return ToyTransformer(config, token_emb, pos_emb, tuple(blocks), final_norm, unembed)


def _attention_sublayer(blk: AttentionLayer, x: np.ndarray, heads: int, groups: int) -> np.ndarray:
    """norm -> grouped-query causal attention -> output projection.

    x: (B, n, d) residual stream entering the sublayer; returns (B, n, d)
    output before the residual add.
    """
    b, n, d = x.shape
    hd = d // heads
    flat = rmsnorm(x, blk.attn_norm).reshape(b * n, d)
    q = (flat @ blk.wq).reshape(b, n, heads, hd)
    k = (flat @ blk.wk).reshape(b, n, groups, hd)
    v = (flat @ blk.wv).reshape(b, n, groups, hd)
    ctx = causal_attention(q, k, v).reshape(b * n, d)
    return (ctx @ blk.wo).reshape(b, n, d)


def _linear_sublayer(blk: LinearizedLayer, x: np.ndarray) -> np.ndarray:
    return x @ blk.linear.weight.T + blk.linear.bias


def sublayer_output(model: ToyTransformer, layer_index: int, x_cols: np.ndarray) -> np.ndarray:
    """Run a single layer's attention-position sublayer on (d, N) columns.

    Exists so tests can replay captured inputs through one sublayer.
    """
    blk = model.blocks[layer_index]
    x = np.asarray(x_cols, dtype=np.float64).T[None, :, :]
    if blk.kind == "attention":
        y = _attention_sublayer(blk, x, model.config.heads, model.config.groups)
    else:
        y = _linear_sublayer(blk, x)
    return y[0].T


def _validate_tokens(config: ToyConfig, tokens: np.ndarray) -> np.ndarray:
    tokens = np.asarray(tokens)
    if tokens.size == 0:
        raise ValueError("token sequence is empty")
    if tokens.shape[-1] > config.max_context:
        raise ValueError(
            f"sequence length {tokens.shape[-1]} exceeds max context {config.max_context}"
        )
    if tokens.min() < 0 or tokens.max() >= config.vocab:
        raise ValueError("token id out of vocabulary range")
    return tokens.astype(np.int64)


def forward_batch(
    model: ToyTransformer,
    tokens: np.ndarray,
    capture: set[int] | frozenset[int] = frozenset(),
) -> tuple[np.ndarray, dict[int, tuple[np.ndarray, np.ndarray]]]:
    """Forward a (B, n) token batch; returns (logits (B, n, V), captures).

    Captured entries are (X, Y) with shape (d, B*n): X is the residual
    stream entering the attention sublayer, Y the sublayer output, so the
    residual add is X + Y. Capture never changes the computation.
    """
    cfg = model.config
    tokens = _validate_tokens(cfg, np.atleast_2d(tokens))
    b, n = tokens.shape
    capture = set(capture)
    unknown = capture - set(range(cfg.layers))
    if unknown:
        raise ValueError(f"capture indices out of range: {sorted(unknown)}")

    x = model.token_emb[tokens] + model.pos_emb[:n]
    captured: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    for idx, blk in enumerate(model.blocks):
        if blk.kind == "attention":
            y = _attention_sublayer(blk, x, cfg.heads, cfg.groups)
        else:
            y = _linear_sublayer(blk, x)
        if idx in capture:
            captured[idx] = (
                x.reshape(b * n, cfg.dim).T.copy(),
                y.reshape(b * n, cfg.dim).T.copy(),
            )
        x = x + y
        xm = rmsnorm(x, blk.mlp_norm).reshape(b * n, cfg.dim)
        x = x + (gelu(xm @ blk.w1) @ blk.w2).reshape(b, n, cfg.dim)
    flat = rmsnorm(x, model.final_norm).reshape(b * n, cfg.dim)
    logits = (flat @ model.unembed).reshape(b, n, cfg.vocab)
    return logits, captured


def forward(
    model: ToyTransformer,
    tokens: np.ndarray,
    capture: set[int] | frozenset[int] = frozenset(),
) -> tuple[np.ndarray, dict[int, tuple[np.ndarray, np.ndarray]]]:
    """Single-sequence forward; logits (n, V) plus captures as in forward_batch."""
    tokens = np.asarray(tokens)
    if tokens.ndim != 1:
        raise ValueError("forward expects a 1-D token sequence")
    logits, captured = forward_batch(model, tokens[None, :], capture)
    return logits[0], captured


def attention_probs(model: ToyTransformer, layer_index: int, tokens: np.ndarray) -> np.ndarray:
    """Attention probability rows (h, n, n) at one layer, for inspection."""
    cfg = model.config
    tokens = _validate_tokens(cfg, np.atleast_2d(tokens))
    blk = model.blocks[layer_index]
    if blk.kind != "attention":
        raise ValueError(f"layer {layer_index} is linearized")
    _, captured = forward_batch(model, tokens, {layer_index})
    x = captured[layer_index][0].T[None, :, :]
    b, n, d = x.shape
    hd = cfg.head_dim
    xn = rmsnorm(x, blk.attn_norm)
    q = (xn @ blk.wq).reshape(b, n, cfg.heads, hd)
    k = (xn @ blk.wk).reshape(b, n, cfg.groups, hd)
    return causal_attention_probs(q, k)[0]


def substitute(model: ToyTransformer, plan, maps: list[LinearMap]) -> ToyTransformer:
    """Swap the plan's layers for their linear maps; returns a new model."""
    layer_order = list(plan.layers) if hasattr(plan, "layers") else list(plan)
    if len(layer_order) != len(maps):
        raise ValueError(f"plan has {len(layer_order)} layers but {len(maps)} maps")
    d = model.config.dim
    blocks = list(model.blocks)
    for idx, m in zip(layer_order, maps):
        if not 0 <= idx < model.config.layers:
            raise ValueError(f"layer index {idx} out of range")
        if m.weight.shape != (d, d):
            raise ValueError(f"map for layer {idx} has shape {m.weight.shape}, want ({d}, {d})")
        if m.source_layer >= 0 and m.source_layer != idx:
            raise ValueError(f"map fitted for layer {m.source_layer} assigned to layer {idx}")
        old = blocks[idx]
        blocks[idx] = LinearizedLayer(linear=m, mlp_norm=old.mlp_norm, w1=old.w1, w2=old.w2)
    return replace(model, blocks=tuple(blocks))


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def logit_drift(
    a: ToyTransformer, b: ToyTransformer, tokens: np.ndarray
) -> tuple[float, float]:
    """(mean per-position KL(a || b), max-abs logit difference)."""
    if a.config.vocab != b.config.vocab:
        raise ValueError("models have different vocabularies")
    la, _ = forward(a, tokens)
    lb, _ = forward(b, tokens)
    lpa = _log_softmax(la)
    lpb = _log_softmax(lb)
    kl = float(np.mean(np.sum(np.exp(lpa) * (lpa - lpb), axis=-1)))
    return max(kl, 0.0), float(np.abs(la - lb).max())


def perplexity(model: ToyTransformer, tokens: np.ndarray) -> float:
    """exp(mean next-token cross-entropy) over positions 1..n-1."""
    tokens = np.asarray(tokens)
    if tokens.ndim != 1 or tokens.shape[0] < 2:
        raise ValueError("perplexity needs a sequence of length >= 2")
    logits, _ = forward(model, tokens)
    logp = _log_softmax(logits[:-1])
    nll = -logp[np.arange(tokens.shape[0] - 1), tokens[1:]]
    return float(np.exp(nll.mean()))


# ---------------------------------------------------------------------------
# model container format (.nblm): magic, version, JSON header, float64 tensors
# ---------------------------------------------------------------------------

def _tensor_sequence(model: ToyTransformer):
    yield "token_emb", model.token_emb
    yield "pos_emb", model.pos_emb
    for i, blk in enumerate(model.blocks):
        if blk.kind == "attention":
            yield f"layer{i}.attn_norm", blk.attn_norm
            yield f"layer{i}.wq", blk.wq
            yield f"layer{i}.wk", blk.wk
            yield f"layer{i}.wv", blk.wv
            yield f"layer{i}.wo", blk.wo
        else:
            yield f"layer{i}.lin_w", blk.linear.weight
            yield f"layer{i}.lin_b", blk.linear.bias
        yield f"layer{i}.mlp_norm", blk.mlp_norm
        yield f"layer{i}.w1", blk.w1
        yield f"layer{i}.w2", blk.w2
    yield "final_norm", model.final_norm
    yield "unembed", model.unembed


def save_model(model: ToyTransformer, path: str) -> None:
    cfg = model.config
    layers_meta = []
    for blk in model.blocks:
        if blk.kind == "attention":
            layers_meta.append({"kind": "attention"})
        else:
            layers_meta.append(
                {
                    "kind": "linearized",
                    "source_layer": blk.linear.source_layer,
                    "fit_nmse": blk.linear.fit_nmse,
                }
            )
    header = {
        "config": {
            "layers": cfg.layers,
            "dim": cfg.dim,
            "heads": cfg.heads,
            "groups": cfg.groups,
            "d_ff": cfg.d_ff,
            "vocab": cfg.vocab,
            "max_context": cfg.max_context,
            "seed": cfg.seed,
        },
        "layer_kinds": layers_meta,
        "tensors": [[name, list(t.shape)] for name, t in _tensor_sequence(model)],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<HI", MODEL_VERSION, len(blob)))
        fh.write(blob)
        for _, tensor in _tensor_sequence(model):
            fh.write(np.ascontiguousarray(tensor, dtype="<f8").tobytes())


def load_model(path: str) -> ToyTransformer:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MODEL_MAGIC:
            raise ValueError(f"not a model file (magic {magic!r})")
        fixed = fh.read(6)
        if len(fixed) != 6:
            raise ValueError("truncated model header")
        version, hlen = struct.unpack("<HI", fixed)
        if version != MODEL_VERSION:
            raise ValueError(f"unsupported model version {version}")
        header = json.loads(fh.read(hlen).decode())
        cfg = ToyConfig(**header["config"])
        cfg.validate()

        def read_tensor(shape) -> np.ndarray:
            count = int(np.prod(shape))
            raw = fh.read(8 * count)
            if len(raw) != 8 * count:
                raise ValueError("truncated tensor payload")
            return np.frombuffer(raw, dtype="<f8").reshape(shape).copy()

        tensors = {name: read_tensor(shape) for name, shape in header["tensors"]}

    blocks = []
    for i, meta in enumerate(header["layer_kinds"]):
        common = dict(
            mlp_norm=tensors[f"layer{i}.mlp_norm"],
            w1=tensors[f"layer{i}.w1"],
            w2=tensors[f"layer{i}.w2"],
        )
        if meta["kind"] == "attention":
            blocks.append(
                AttentionLayer(
                    attn_norm=tensors[f"layer{i}.attn_norm"],
                    wq=tensors[f"layer{i}.wq"],
                    wk=tensors[f"layer{i}.wk"],
                    wv=tensors[f"layer{i}.wv"],
                    wo=tensors[f"layer{i}.wo"],
                    **common,
                )
            )
        else:
            blocks.append(
                LinearizedLayer(
                    linear=LinearMap(
                        weight=tensors[f"layer{i}.lin_w"],
                        bias=tensors[f"layer{i}.lin_b"],
                        source_layer=meta["source_layer"],
                        fit_nmse=meta["fit_nmse"],
                    ),
                    **common,
                )
            )
    return ToyTransformer(
        config=cfg,
        token_emb=tensors["token_emb"],
        pos_emb=tensors["pos_emb"],
        blocks=tuple(blocks),
        final_norm=tensors["final_norm"],
        unembed=tensors["unembed"],
    )


def synthetic_tokens(vocab: int, count: int, seed: int) -> np.ndarray:
    """Seeded uniform token ids for calibration/eval corpora."""
    rng = np.random.Generator(np.random.PCG64(seed))
    return rng.integers(0, vocab, size=count, dtype=np.int64)


def chunk_tokens(ids: np.ndarray, context: int) -> list[np.ndarray]:
    """Split a flat id stream into context-length rows; a >= 2 token tail kept."""
    ids = np.asarray(ids)
    full = ids.shape[0] // context
    chunks = [ids[: full * context].reshape(full, context)] if full else []
    tail = ids[full * context :]
    if tail.shape[0] >= 2:
        chunks.append(tail[None, :])
    return chunks


def capture_activations(
    model: ToyTransformer, ids: np.ndarray, context: int, layers: set[int]
) -> tuple[dict[int, tuple[np.ndarray, np.ndarray]], int]:
    """Capture (X, Y) per layer over a chunked token stream.

    Returns ({layer: (X, Y)} with columns stacked across chunks, token count).
    """
    parts: dict[int, list[tuple[np.ndarray, np.ndarray]]] = {k: [] for k in layers}
    total = 0
    for chunk in chunk_tokens(ids, context):
        _, captured = forward_batch(model, chunk, layers)
        for k, xy in captured.items():
            parts[k].append(xy)
        total += chunk.size
    if total == 0:
        raise ValueError("token stream too short to calibrate")
    stacked = {
        k: (
            np.concatenate([x for x, _ in v], axis=1),
            np.concatenate([y for _, y in v], axis=1),
        )
        for k, v in parts.items()
    }
    return stacked, total
