"""Named parameter registry: global theta, per-task phi, discriminator psi.

Freeze masks live here; the training loop consults them so frozen tensors
never enter a gradient map or an optimizer step.  Hashes are over raw
little-endian bytes, so "unchanged" means bit-identical.
"""

from __future__ import annotations

import hashlib
from typing import Iterator

import numpy as np

from .errors import ContractViolationError
from .tensor import Tensor


class ParameterStore:
    def __init__(self):
        self.theta: dict[str, Tensor] = {}
        self.phi: dict[int, dict[str, Tensor]] = {}
        self.psi: dict[str, Tensor] = {}
        self.freeze_mask: dict[str, bool] = {}

    # -- registration -------------------------------------------------------

    def add_theta(self, name: str, t: Tensor):
        if name in self.theta:
            raise ContractViolationError(f"theta '{name}' already registered")
        t.requires_grad = True
        self.theta[name] = t
        self.freeze_mask[f"theta/{name}"] = False

    def add_phi(self, task_id: int, params: dict[str, Tensor]):
        if task_id in self.phi:
            raise ContractViolationError(f"phi for task {task_id} already present")
        for t in params.values():
            t.requires_grad = True
        self.phi[task_id] = dict(params)

    def set_psi(self, params: dict[str, Tensor]):
        for t in params.values():
            t.requires_grad = True
        self.psi = dict(params)

    # -- freezing -----------------------------------------------------------

    def freeze_theta(self):
        for name, t in self.theta.items():
            t.requires_grad = False
            self.freeze_mask[f"theta/{name}"] = True

    def theta_frozen(self) -> bool:
        return all(self.freeze_mask.get(f"theta/{n}", False) for n in self.theta)

    # -- iteration / hashing ------------------------------------------------

    def named_tensors(self) -> Iterator[tuple[str, Tensor]]:
        for n, t in sorted(self.theta.items()):
            yield f"theta/{n}", t
        for task in sorted(self.phi):
            for n, t in sorted(self.phi[task].items()):
                yield f"phi/{task}/{n}", t
        for n, t in sorted(self.psi.items()):
            yield f"psi/{n}", t

    def hash_theta(self) -> str:
        return hash_params(self.theta)

    def hash_phi(self, task_id: int) -> str:
        if task_id not in self.phi:
            raise ContractViolationError(f"no phi for task {task_id}")
        return hash_params(self.phi[task_id])


def hash_params(params: dict[str, Tensor]) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        t = params[name]
        h.update(name.encode())
        h.update(str(t.data.dtype).encode())
        h.update(np.ascontiguousarray(t.data).astype(t.data.dtype.newbyteorder("<")).tobytes())
    return h.hexdigest()
