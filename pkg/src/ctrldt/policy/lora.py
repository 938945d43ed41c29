"""Low-rank adapters on the query and value projections."""

from __future__ import annotations

import torch

from ..errors import ContractError
from .model import ModelConfig

ADAPTED = ("wq", "wv")


def adapter_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    if cfg.lora_rank <= 0:
        return {}
    d, r = cfg.d_model, cfg.lora_rank
    shapes = {}
    for l in range(cfg.n_layers):
        for w in ADAPTED:
            shapes[f"blocks.{l}.attn.{w}.lora_A"] = (r, d)
            shapes[f"blocks.{l}.attn.{w}.lora_B"] = (d, r)
    return shapes


def init_adapters(cfg: ModelConfig, seed: int = 0, dtype=torch.float32) -> dict[str, torch.Tensor]:
    """A ~ N(0, 1/d), B = 0, so a fresh adapter leaves the model unchanged."""
    if cfg.lora_rank <= 0:
        raise ContractError("lora_rank must be positive to attach adapters")
    gen = torch.Generator().manual_seed(seed)
    out = {}
    for name, shape in adapter_shapes(cfg).items():
        if name.endswith("lora_A"):
            t = torch.randn(shape, generator=gen, dtype=torch.float64) / cfg.d_model ** 0.5
            out[name] = t.to(dtype)
        else:
            out[name] = torch.zeros(shape, dtype=dtype)
    return out


def lora_merge(params: dict, adapters: dict, cfg: ModelConfig) -> dict:
    """Fold W + (alpha/r) B A into the base weights; returns a new dict."""
    merged = dict(params)
    for name in adapter_shapes(cfg):
        if not name.endswith("lora_A"):
            continue
        base = name[: -len(".lora_A")]
        A = adapters[name]
        B = adapters[f"{base}.lora_B"]
        merged[f"{base}.weight"] = params[f"{base}.weight"] + cfg.lora_scale * (B @ A)
    return merged
