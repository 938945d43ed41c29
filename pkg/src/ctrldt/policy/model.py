"""Decision transformer over (return-to-go, observation, action) token triples.

Parameters live in a flat ``dict[str, Tensor]`` so that the same forward can run
on base weights, base + low-rank adapters, merged weights, or float64 copies
used for finite-difference checks.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, fields

import numpy as np
import torch
import torch.nn.functional as F

from ..errors import ContractError

INIT_STD = 0.02
LN_EPS = 1e-5


@dataclass
class ModelConfig:
    n_o: int
    n_a: int
    n_layers: int = 4
    n_heads: int = 4
    d_model: int = 128
    d_ff: int | None = None
    K: int = 20
    n_embed_layers: int = 3
    dropout_rate: float = 0.1
    lora_rank: int = 0
    lora_alpha: float | None = None
    seed: int = 0
    rtg_scale: float = 1.0

    def __post_init__(self):
        if self.d_ff is None:
            self.d_ff = 4 * self.d_model
        if self.lora_alpha is None:
            self.lora_alpha = 2.0 * self.lora_rank
        if self.d_model % self.n_heads:
            raise ContractError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.K < 1 or self.lora_rank < 0 or self.n_embed_layers < 1:
            raise ContractError("need K >= 1, lora_rank >= 0, n_embed_layers >= 1")
        if self.rtg_scale <= 0:
            raise ContractError("rtg_scale must be positive")

    @property
    def lora_scale(self) -> float:
        return self.lora_alpha / self.lora_rank if self.lora_rank else 0.0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ContractError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def preset(cls, name: str, n_o: int, n_a: int, **overrides) -> "ModelConfig":
        base = PRESETS[name]
        return cls(n_o=n_o, n_a=n_a, **{**base, **overrides})


PRESETS = {
    "tiny": dict(n_layers=1, n_heads=2, d_model=8, K=3, lora_rank=2),
    "small": dict(n_layers=2, n_heads=2, d_model=32, K=10, lora_rank=4),
    "desk": dict(n_layers=4, n_heads=4, d_model=128, K=20, lora_rank=8),
    "full": dict(n_layers=12, n_heads=12, d_model=768, K=20, lora_rank=32),
}


def _mlp_shapes(prefix, d_in, d_hidden, d_out, depth):
    shapes = {}
    dims = [d_in] + [d_hidden] * (depth - 1) + [d_out]
    for i in range(depth):
        shapes[f"{prefix}.{i}.weight"] = (dims[i + 1], dims[i])
        shapes[f"{prefix}.{i}.bias"] = (dims[i + 1],)
    return shapes


def param_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    d = cfg.d_model
    shapes = {}
    shapes.update(_mlp_shapes("embed_rtg", 1, d, d, cfg.n_embed_layers))
    shapes.update(_mlp_shapes("embed_obs", cfg.n_o, d, d, cfg.n_embed_layers))
    shapes.update(_mlp_shapes("embed_act", cfg.n_a, d, d, cfg.n_embed_layers))
    shapes["embed_time"] = (cfg.K, d)
    shapes["embed_ln.scale"] = (d,)
    shapes["embed_ln.offset"] = (d,)
    for l in range(cfg.n_layers):
        p = f"blocks.{l}"
        shapes[f"{p}.ln1.scale"] = (d,)
        shapes[f"{p}.ln1.offset"] = (d,)
        for w in ("wq", "wk", "wv", "wo"):
            shapes[f"{p}.attn.{w}.weight"] = (d, d)
            shapes[f"{p}.attn.{w}.bias"] = (d,)
        shapes[f"{p}.ln2.scale"] = (d,)
        shapes[f"{p}.ln2.offset"] = (d,)
        shapes[f"{p}.ff.0.weight"] = (cfg.d_ff, d)
        shapes[f"{p}.ff.0.bias"] = (cfg.d_ff,)
        shapes[f"{p}.ff.1.weight"] = (d, cfg.d_ff)
        shapes[f"{p}.ff.1.bias"] = (d,)
    shapes["ln_f.scale"] = (d,)
    shapes["ln_f.offset"] = (d,)
    shapes.update(_mlp_shapes("head", d, d, cfg.n_a, cfg.n_embed_layers))
    return shapes


def init_params(cfg: ModelConfig, seed: int | None = None, dtype=torch.float32) -> dict[str, torch.Tensor]:
    """Weights ~ N(0, 0.02^2); biases and norm offsets 0; norm scales 1."""
    gen = torch.Generator().manual_seed(cfg.seed if seed is None else seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".scale"):
            t = torch.ones(shape, dtype=dtype)
        elif name.endswith(".offset") or name.endswith(".bias"):
            t = torch.zeros(shape, dtype=dtype)
        else:
            t = (torch.randn(shape, generator=gen, dtype=torch.float64) * INIT_STD).to(dtype)
        params[name] = t
    return params


def params_digest(tensors: dict[str, torch.Tensor] | None) -> str:
    h = hashlib.sha256()
    for name in sorted(tensors or {}):
        t = tensors[name].detach().cpu().contiguous()
        h.update(name.encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()


@dataclass
class Batch:
    rtg: torch.Tensor
    obs: torch.Tensor
    act: torch.Tensor
    timesteps: torch.Tensor
    mask: torch.Tensor

    def __post_init__(self):
        B, K = self.rtg.shape
        if (self.obs.shape[:2] != (B, K) or self.act.shape[:2] != (B, K)
                or self.timesteps.shape != (B, K) or self.mask.shape != (B, K)):
            raise ContractError("batch fields disagree on (B, K)")

    @classmethod
    def from_arrays(cls, arrays: dict, index=None, dtype=torch.float32) -> "Batch":
        def pick(key):
            x = arrays[key]
            return x if index is None else x[index]

        return cls(
            rtg=torch.as_tensor(np.asarray(pick("rtg")), dtype=dtype),
            obs=torch.as_tensor(np.asarray(pick("obs")), dtype=dtype),
            act=torch.as_tensor(np.asarray(pick("act")), dtype=dtype),
            timesteps=torch.as_tensor(np.asarray(pick("timesteps")), dtype=torch.long),
            mask=torch.as_tensor(np.asarray(pick("mask")), dtype=torch.bool),
        )

    def to(self, dtype) -> "Batch":
        return Batch(self.rtg.to(dtype), self.obs.to(dtype), self.act.to(dtype), self.timesteps, self.mask)

    def __len__(self):
        return self.rtg.shape[0]


class _Dropout:
    def __init__(self, rate: float, seed: int | None):
        self.rate = rate
        self.gen = torch.Generator().manual_seed(seed) if seed is not None else None

    def __call__(self, x):
        if self.gen is None or self.rate <= 0:
            return x
        keep = torch.rand(x.shape, generator=self.gen) >= self.rate
        return x * keep.to(x.dtype) / (1.0 - self.rate)


def _mlp(p, prefix, x, depth):
    for i in range(depth):
        x = F.linear(x, p[f"{prefix}.{i}.weight"], p[f"{prefix}.{i}.bias"])
        if i < depth - 1:
            x = F.gelu(x)
    return x


def _ln(p, prefix, x):
    return F.layer_norm(x, x.shape[-1:], p[f"{prefix}.scale"], p[f"{prefix}.offset"], LN_EPS)


def _proj(p, adapters, scale, name, x):
    y = F.linear(x, p[f"{name}.weight"], p[f"{name}.bias"])
    if adapters is not None and f"{name}.lora_A" in adapters:
        y = y + scale * F.linear(F.linear(x, adapters[f"{name}.lora_A"]), adapters[f"{name}.lora_B"])
    return y


def attention_mask(mask: torch.Tensor) -> torch.Tensor:
    """(B, 3K, 3K) boolean: causal over tokens, padded keys hidden, self always visible."""
    B, K = mask.shape
    real = mask.repeat_interleave(3, dim=1)
    S = 3 * K
    causal = torch.ones(S, S, dtype=torch.bool).tril()
    eye = torch.eye(S, dtype=torch.bool)
    return (causal[None] & real[:, None, :]) | eye[None]


def forward(params, adapters, batch: Batch, cfg: ModelConfig, train_mode: bool = False,
            dropout_seed: int | None = None) -> torch.Tensor:
    """Predicted actions (B, K, n_a), read from each observation token."""
    B, K = batch.rtg.shape
    if K != cfg.K or batch.obs.shape[-1] != cfg.n_o or batch.act.shape[-1] != cfg.n_a:
        raise ContractError(
            f"batch (K={K}, n_o={batch.obs.shape[-1]}, n_a={batch.act.shape[-1]}) does not match "
            f"config (K={cfg.K}, n_o={cfg.n_o}, n_a={cfg.n_a})"
        )
    p = params
    dtype = p["embed_time"].dtype
    batch = batch.to(dtype)
    drop = _Dropout(cfg.dropout_rate, dropout_seed if train_mode else None)
    if train_mode and dropout_seed is None:
        drop = _Dropout(cfg.dropout_rate, 0)
    depth = cfg.n_embed_layers
    e_r = _mlp(p, "embed_rtg", (batch.rtg / cfg.rtg_scale)[..., None], depth)
    e_o = _mlp(p, "embed_obs", batch.obs, depth)
    e_a = _mlp(p, "embed_act", batch.act, depth)
    time = p["embed_time"][batch.timesteps]
    h = torch.stack([e_r, e_o, e_a], dim=2) + time[:, :, None, :]
    S = 3 * K
    h = h.reshape(B, S, cfg.d_model)
    h = drop(_ln(p, "embed_ln", h))

    allowed = attention_mask(batch.mask)[:, None]
    H = cfg.n_heads
    dh = cfg.d_model // H
    scale = cfg.lora_scale
    for l in range(cfg.n_layers):
        pre = f"blocks.{l}"
        x = _ln(p, f"{pre}.ln1", h)
        q = _proj(p, adapters, scale, f"{pre}.attn.wq", x).view(B, S, H, dh).transpose(1, 2)
        k = _proj(p, adapters, scale, f"{pre}.attn.wk", x).view(B, S, H, dh).transpose(1, 2)
        v = _proj(p, adapters, scale, f"{pre}.attn.wv", x).view(B, S, H, dh).transpose(1, 2)
        scores = (q @ k.transpose(-2, -1)) / math.sqrt(dh)
        scores = scores.masked_fill(~allowed, float("-inf"))
        att = drop(torch.softmax(scores, dim=-1))
        y = (att @ v).transpose(1, 2).reshape(B, S, cfg.d_model)
        h = h + drop(_proj(p, adapters, scale, f"{pre}.attn.wo", y))
        x = _ln(p, f"{pre}.ln2", h)
        x = F.linear(F.gelu(F.linear(x, p[f"{pre}.ff.0.weight"], p[f"{pre}.ff.0.bias"])),
                     p[f"{pre}.ff.1.weight"], p[f"{pre}.ff.1.bias"])
        h = h + drop(x)
    h = _ln(p, "ln_f", h)
    return _mlp(p, "head", h[:, 1::3], depth)


def loss(pred: torch.Tensor, batch: Batch) -> torch.Tensor:
    """Mean squared action error over the unmasked (position, action-dim) entries."""
    if pred.shape != batch.act.shape:
        raise ContractError(f"prediction shape {tuple(pred.shape)} != action shape {tuple(batch.act.shape)}")
    m = batch.mask
    count = int(m.sum())
    if count == 0:
        raise ContractError("batch has no unmasked positions")
    err = (pred - batch.act.to(pred.dtype))[m]
    return (err * err).sum() / (count * pred.shape[-1])


def grad(params, adapters, batch: Batch, cfg: ModelConfig, trainable_set: str = "all",
         train_mode: bool = False, dropout_seed: int | None = None):
    """(loss value, {name: gradient}) for the trainable tensors only.

    ``trainable_set`` is "all" (base weights) or "adapters_only".
    """
    if trainable_set == "all":
        p = {k: v.detach().requires_grad_(True) for k, v in params.items()}
        a = None if adapters is None else {k: v.detach() for k, v in adapters.items()}
        leaves = p
    elif trainable_set == "adapters_only":
        if not adapters:
            raise ContractError("adapters_only training needs adapters")
        p = {k: v.detach() for k, v in params.items()}
        a = {k: v.detach().requires_grad_(True) for k, v in adapters.items()}
        leaves = a
    else:
        raise ContractError(f"unknown trainable_set {trainable_set!r}")
    with torch.enable_grad():
        value = loss(forward(p, a, batch, cfg, train_mode, dropout_seed), batch)
        if not torch.isfinite(value):
            raise FloatingPointError("non-finite loss")
        names = list(leaves)
        gs = torch.autograd.grad(value, [leaves[n] for n in names], allow_unused=True)
    out = {}
    for n, g in zip(names, gs):
        g = torch.zeros_like(leaves[n]) if g is None else g
        if not torch.all(torch.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in {n}")
        out[n] = g
    return float(value.detach()), out
