from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .lora import adapter_shapes, init_adapters, lora_merge
from .model import (PRESETS, Batch, ModelConfig, attention_mask, forward, grad, init_params,
                    loss, param_shapes, params_digest)
from .optim import AdamHyper, AdamState, optimizer_step

__all__ = [
    "AdamHyper", "AdamState", "Batch", "Checkpoint", "ModelConfig", "PRESETS",
    "adapter_shapes", "attention_mask", "forward", "grad", "init_adapters", "init_params",
    "load_checkpoint", "lora_merge", "loss", "optimizer_step", "param_shapes",
    "params_digest", "save_checkpoint",
]
