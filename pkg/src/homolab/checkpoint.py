"""Flat named-tensor checkpoint container.

Stored as a safetensors file: tensors keyed by dotted names, plus a single
metadata entry ``homolab`` holding JSON ``{"format_version": 1, "meta": {...}}``
(one entry keeps the header byte-stable).  Key prefixes:

    tahem.<param>                     estimator parameters
    smc.<param>                       constraint-module parameters
    sem.<param>                       frozen semantic detector parameters
    opt_tahem.<index>.<slot>          AdamW moments (slot: step, exp_avg, exp_avg_sq)
    opt_smc.<index>.<slot>            SMC optimizer state (AdamW or SGD)

Optimizer hyperparameters (param_groups), counters and history live in ``meta``.
"""
from __future__ import annotations

import json
from pathlib import Path

import torch
from safetensors import safe_open
from safetensors.torch import save_file

from .errors import ConfigError

FORMAT_VERSION = 1


def save_checkpoint(path, tensors: dict[str, torch.Tensor], meta: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    flat = {k: v.detach().cpu().contiguous().clone() for k, v in tensors.items()}
    tmp = path.with_suffix(path.suffix + ".tmp")
    header = json.dumps({"format_version": FORMAT_VERSION, "meta": meta}, sort_keys=True)
    save_file(flat, str(tmp), metadata={"homolab": header})
    tmp.replace(path)


def load_checkpoint(path) -> tuple[dict[str, torch.Tensor], dict]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(str(path))
    with safe_open(str(path), framework="pt") as fh:
        header = json.loads((fh.metadata() or {}).get("homolab", "{}"))
        version = header.get("format_version")
        if version != FORMAT_VERSION:
            raise ConfigError(f"{path}: checkpoint format {version}, expected {FORMAT_VERSION}")
        tensors = {k: fh.get_tensor(k) for k in fh.keys()}
    return tensors, header.get("meta", {})


def prefixed(prefix: str, state: dict) -> dict:
    return {f"{prefix}.{k}": v for k, v in state.items()}


def unprefixed(prefix: str, tensors: dict) -> dict:
    n = len(prefix) + 1
    return {k[n:]: v for k, v in tensors.items() if k.startswith(prefix + ".")}


def optimizer_tensors(prefix: str, opt: torch.optim.Optimizer) -> tuple[dict, list]:
    sd = opt.state_dict()
    tensors = {}
    for idx, slots in sd["state"].items():
        for slot, val in slots.items():
            tensors[f"{prefix}.{idx}.{slot}"] = val.detach().clone() if torch.is_tensor(val) else torch.tensor(val)
    return tensors, sd["param_groups"]


def restore_optimizer(prefix: str, opt: torch.optim.Optimizer, tensors: dict, param_groups: list) -> None:
    state: dict = {}
    for key, val in unprefixed(prefix, tensors).items():
        idx, slot = key.split(".", 1)
        state.setdefault(int(idx), {})[slot] = val
    opt.load_state_dict({"state": state, "param_groups": param_groups})
