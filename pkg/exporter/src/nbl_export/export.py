"""Stream per-layer attention activations of a causal LM into .nbla dumps.

For every decoder layer k two files are produced: the residual stream
entering the attention sublayer (layer{k}_input) and the attention output
before the residual add (layer{k}_output). Capture points are validated on
the fly through the residual identity input + output == next-sublayer
input; architectures that do not expose a pre-norm layout with
``input_layernorm`` / ``self_attn`` / ``post_attention_layernorm`` per
layer are rejected.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
import torch

from .nbla import ROLE_INPUT, ROLE_OUTPUT, StreamingDumpWriter, dump_filename

REQUIRED_SUBMODULES = ("input_layernorm", "self_attn", "post_attention_layernorm")


class UnsupportedArchitectureError(RuntimeError):
    pass


@dataclass
class ExportJob:
    model_id: str                  # hub name or local path
    text_path: str                 # calibration text, utf-8
    samples: int = 256             # s sequences
    context: int = 2048            # t tokens per sequence
    out_dir: str = "dumps"
    dtype_policy: str = "float32"  # "float32" casts the model; "native" keeps it
    batch_size: int = 8            # sequences per forward, bounds memory

    def validate(self) -> None:
        if self.samples < 1:
            raise ValueError("samples must be >= 1")
        if self.context < 2:
            raise ValueError("context must be >= 2")
        if not 1 <= self.batch_size <= 8:
            raise ValueError("batch_size must be in 1..8")
        if self.dtype_policy not in ("float32", "native"):
            raise ValueError(f"unknown dtype policy {self.dtype_policy!r}")


@dataclass
class ExportReport:
    out_dir: str
    layers: int
    hidden_size: int
    tokens: int
    files: list[str] = field(default_factory=list)
    residual_max_abs: dict[int, float] = field(default_factory=dict)

    def worst_residual(self) -> float:
        return max(self.residual_max_abs.values()) if self.residual_max_abs else 0.0


def find_decoder_layers(model) -> list:
    inner = getattr(model, "model", None)
    layers = getattr(inner, "layers", None) if inner is not None else None
    if layers is None:
        raise UnsupportedArchitectureError(
            "model does not expose model.layers; cannot place capture points"
        )
    for i, layer in enumerate(layers):
        for attr in REQUIRED_SUBMODULES:
            if not hasattr(layer, attr):
                raise UnsupportedArchitectureError(
                    f"layer {i} lacks {attr}; pre-norm capture points unavailable"
                )
    return list(layers)


def load_token_sequences(tokenizer, text_path: str, samples: int, context: int) -> torch.Tensor:
    with open(text_path, encoding="utf-8") as fh:
        text = fh.read()
    ids = tokenizer(text, add_special_tokens=False, return_tensors=None)["input_ids"]
    needed = samples * context
    if len(ids) < needed:
        raise ValueError(
            f"calibration text yields {len(ids)} tokens, need {needed} "
            f"({samples} x {context})"
        )
    flat = torch.tensor(ids[:needed], dtype=torch.long)
    return flat.reshape(samples, context)


def _first_hidden_state(args, kwargs):
    if "hidden_states" in kwargs:
        return kwargs["hidden_states"]
    return args[0]


def export_activations(job: ExportJob) -> ExportReport:
    job.validate()
    from transformers import AutoModelForCausalLM, AutoTokenizer

    model = AutoModelForCausalLM.from_pretrained(job.model_id)
    tokenizer = AutoTokenizer.from_pretrained(job.model_id)
    if job.dtype_policy == "float32":
        model = model.float()
    model.eval()

    layers = find_decoder_layers(model)
    hidden = model.config.hidden_size
    sequences = load_token_sequences(tokenizer, job.text_path, job.samples, job.context)

    os.makedirs(job.out_dir, exist_ok=True)
    writers = {}
    for k in range(len(layers)):
        for role in (ROLE_INPUT, ROLE_OUTPUT):
            path = os.path.join(job.out_dir, dump_filename(k, role))
            writers[(k, role)] = StreamingDumpWriter(path, k, role, hidden)

    pending: dict[int, dict[str, torch.Tensor]] = {k: {} for k in range(len(layers))}
    residual_max = {k: 0.0 for k in range(len(layers))}

    def to_block(t: torch.Tensor) -> np.ndarray:
        return t.detach().to(torch.float32).reshape(-1, hidden).cpu().numpy()

    def make_hooks(k: int, layer):
        def pre_layer(mod, args, kwargs):
            x = _first_hidden_state(args, kwargs)
            pending[k]["x"] = x.detach()
            writers[(k, ROLE_INPUT)].append(to_block(x))

        def post_attn(mod, args, kwargs, out):
            y = out[0] if isinstance(out, tuple) else out
            pending[k]["y"] = y.detach()
            writers[(k, ROLE_OUTPUT)].append(to_block(y))

        def pre_postnorm(mod, args, kwargs):
            nxt = _first_hidden_state(args, kwargs)
            x, y = pending[k].pop("x"), pending[k].pop("y")
            err = (x + y - nxt).abs().max().item()
            residual_max[k] = max(residual_max[k], err)

        return [
            layer.register_forward_pre_hook(pre_layer, with_kwargs=True),
            layer.self_attn.register_forward_hook(post_attn, with_kwargs=True),
            layer.post_attention_layernorm.register_forward_pre_hook(
                pre_postnorm, with_kwargs=True
            ),
        ]

    handles = []
    for k, layer in enumerate(layers):
        handles.extend(make_hooks(k, layer))
    try:
        with torch.no_grad():
            for start in range(0, job.samples, job.batch_size):
                batch = sequences[start : start + job.batch_size]
                model(input_ids=batch)
    finally:
        for h in handles:
            h.remove()
        for w in writers.values():
            w.close()

    return ExportReport(
        out_dir=job.out_dir,
        layers=len(layers),
        hidden_size=hidden,
        tokens=job.samples * job.context,
        files=sorted(os.path.basename(w.path) for w in writers.values()),
        residual_max_abs=residual_max,
    )
