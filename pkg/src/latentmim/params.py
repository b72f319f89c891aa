"""Moving module parameters in and out of plain float32 arrays."""

from __future__ import annotations

import hashlib

import numpy as np
import torch
import torch.nn as nn

from latentmim.errors import SchemaError


def module_arrays(module: nn.Module, prefix: str = "") -> dict[str, np.ndarray]:
    """Persistent state of ``module`` as float32 arrays, keyed by dotted name."""
    return {
        prefix + name: t.detach().cpu().numpy().astype(np.float32, copy=True)
        for name, t in module.state_dict().items()
    }


def load_module_arrays(module: nn.Module, arrays: dict[str, np.ndarray], prefix: str = "") -> None:
    state = module.state_dict()
    wanted = {prefix + k for k in state}
    given = {k for k in arrays if k.startswith(prefix)}
    if wanted != given:
        missing = sorted(wanted - given)[:3]
        extra = sorted(given - wanted)[:3]
        raise SchemaError(f"tensor names do not match the model (missing {missing}, unexpected {extra})")
    new_state = {}
    for name, ref in state.items():
        arr = arrays[prefix + name]
        if tuple(arr.shape) != tuple(ref.shape):
            raise SchemaError(f"tensor {prefix + name!r} has shape {list(arr.shape)}, model expects {list(ref.shape)}")
        new_state[name] = torch.from_numpy(np.array(arr, dtype=np.float32)).to(ref.dtype)
    module.load_state_dict(new_state)


def parameter_hash(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
