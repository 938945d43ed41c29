"""Checkpoint directory: ``manifest.json`` plus a raw little-endian float32 payload."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from ..errors import CheckpointError
from .lora import adapter_shapes
from .model import ModelConfig, param_shapes
from .optim import AdamState

FORMAT_VERSION = 1
MANIFEST = "manifest.json"
PAYLOAD = "payload.bin"


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict
    adapters: dict | None = None
    opt_state: AdamState | None = None
    opt_group: str | None = None
    meta: dict = field(default_factory=dict)


def _groups(ck: Checkpoint):
    yield "params", ck.params
    if ck.adapters:
        yield "adapters", ck.adapters
    if ck.opt_state is not None and ck.opt_state.m:
        yield "opt_m", ck.opt_state.m
        yield "opt_v", ck.opt_state.v


def save_checkpoint(path, ck: Checkpoint) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries, offset = [], 0
    tmp = path / (PAYLOAD + ".tmp")
    with open(tmp, "wb") as fh:
        for group, tensors in _groups(ck):
            for name, t in tensors.items():
                raw = t.detach().cpu().numpy().astype("<f4").tobytes()
                fh.write(raw)
                entries.append({"group": group, "name": name, "shape": list(t.shape),
                                "offset": offset, "nbytes": len(raw)})
                offset += len(raw)
    os.replace(tmp, path / PAYLOAD)
    manifest = {
        "format_version": FORMAT_VERSION,
        "dtype": "float32",
        "byte_order": "little",
        "config": ck.config.to_dict(),
        "opt_step": ck.opt_state.step if ck.opt_state is not None else None,
        "opt_group": ck.opt_group,
        "meta": ck.meta,
        "payload_bytes": offset,
        "tensors": entries,
    }
    (path / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST).read_text())
        payload = (path / PAYLOAD).read_bytes()
    except FileNotFoundError as exc:
        raise CheckpointError(f"checkpoint incomplete: {exc.filename} missing") from None
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"manifest is not valid JSON: {exc}") from None
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {manifest.get('format_version')}")
    if len(payload) != manifest["payload_bytes"]:
        raise CheckpointError(
            f"payload truncated: {len(payload)} bytes present, {manifest['payload_bytes']} expected")
    try:
        cfg = ModelConfig.from_dict(manifest["config"])
    except Exception as exc:
        raise CheckpointError(f"bad model config in manifest: {exc}") from None

    expected = {"params": param_shapes(cfg), "adapters": adapter_shapes(cfg)}
    groups: dict[str, dict] = {}
    for e in manifest["tensors"]:
        group, name, shape = e["group"], e["name"], tuple(e["shape"])
        ref = expected.get(group)
        if group in ("opt_m", "opt_v"):
            ref = expected["adapters"] if manifest.get("opt_group") == "adapters" else expected["params"]
        if ref is None:
            raise CheckpointError(f"unknown tensor group {group!r}")
        if name not in ref:
            raise CheckpointError(f"unexpected tensor {group}/{name}")
        if ref[name] != shape:
            raise CheckpointError(f"tensor {group}/{name} has shape {shape}, config implies {ref[name]}")
        count = int(np.prod(shape)) if shape else 1
        if e["nbytes"] != 4 * count or e["offset"] + e["nbytes"] > len(payload):
            raise CheckpointError(f"tensor {group}/{name} byte range is inconsistent")
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=e["offset"]).reshape(shape)
        groups.setdefault(group, {})[name] = torch.from_numpy(arr.astype(np.float32))

    params = groups.get("params", {})
    missing = set(expected["params"]) - set(params)
    if missing:
        raise CheckpointError(f"missing tensor params/{sorted(missing)[0]}")
    params = {k: params[k] for k in expected["params"]}
    adapters = groups.get("adapters")
    opt = None
    if "opt_m" in groups:
        opt = AdamState(manifest.get("opt_step") or 0, groups["opt_m"], groups["opt_v"])
    return Checkpoint(cfg, params, adapters, opt, manifest.get("opt_group"), manifest.get("meta", {}))
