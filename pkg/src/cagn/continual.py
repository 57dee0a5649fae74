"""Task-sequence orchestration over one frozen base model.

Task 0 trains the global weights jointly with its own adapters; the
globals are then frozen forever.  Every later task trains only a fresh
adapter set (plus the throwaway discriminator), so earlier tasks'
generators are untouched by construction, and forgetting is checked by
bit-exact regeneration of fixed-noise snapshots.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import DatasetHandle
from .errors import ContractViolationError, NotFoundError, ValidationError
from .gan import GanModel, TrainConfig, train_step
from .optim import Adam
from .params import ParameterStore
from .tensor import Tensor


@dataclass
class TaskSpec:
    task_id: int
    dataset: DatasetHandle
    iterations: int
    num_classes: int = 1


SNAPSHOT_SAMPLES = 64


class ContinualManager:
    def __init__(self, model: GanModel, train_cfg: TrainConfig):
        self.model = model
        self.train_cfg = train_cfg
        self.store = ParameterStore()
        self.snapshots: dict[int, np.ndarray] = {}
        self.loss_logs: dict[int, dict[str, list[float]]] = {}

    # -- training -----------------------------------------------------------

    def train_base(self, task0: TaskSpec) -> ParameterStore:
        if self.store.theta or self.store.phi:
            raise ContractViolationError("train_base: store must be empty")
        if task0.task_id != 0:
            raise ContractViolationError("train_base: base task must have id 0")
        cfg = self.train_cfg
        for name, t in self.model.init_theta(cfg.seed).items():
            self.store.add_theta(name, t)
        self.store.set_psi(self.model.init_psi(cfg.seed))
        phi0 = self.model.init_phi(self._phi_seed(0))
        self.store.add_phi(0, phi0)
        self.loss_logs[0] = self._run(task0, phi0)
        self.store.freeze_theta()
        self._archive(0)
        return self.store

    def train_task(self, task: TaskSpec) -> ParameterStore:
        if task.task_id < 1:
            raise ContractViolationError("train_task: task id must be >= 1")
        if task.task_id in self.store.phi:
            raise ContractViolationError(f"task {task.task_id} already trained")
        if 0 not in self.store.phi:
            raise ContractViolationError("train_task: base task must be trained first")
        if not self.store.theta_frozen():
            raise ContractViolationError("train_task: global parameters must be frozen")
        if self.train_cfg.reinit_discriminator:
            self.store.set_psi(self.model.init_psi(self.train_cfg.seed + task.task_id))
        phi = self.model.init_phi(self._phi_seed(task.task_id))
        self.loss_logs[task.task_id] = self._run(task, phi)
        self.store.add_phi(task.task_id, phi)
        self._archive(task.task_id)
        return self.store

    def _phi_seed(self, task_id: int) -> int:
        return int(np.random.default_rng([self.train_cfg.seed, task_id, 11]).integers(0, 2**31))

    def _run(self, task: TaskSpec, phi_flat: dict[str, Tensor]) -> dict[str, list[float]]:
        cfg = self.train_cfg
        rng = np.random.default_rng([cfg.seed, task.task_id, 7])
        opt_g = Adam(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
        opt_d = Adam(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
        log: dict[str, list[float]] = {"loss_d": [], "loss_g": [], "r1": []}
        conditional = self.model.gspec.conditional
        for it in range(task.iterations):
            imgs, labs = task.dataset.sample(rng, cfg.batch_size)
            res = train_step(
                self.model,
                self.store.theta,
                phi_flat,
                self.store.psi,
                opt_g,
                opt_d,
                imgs,
                labs if conditional else None,
                rng,
                cfg,
                iteration=it,
            )
            for key in log:
                log[key].append(res[key])
        return log

    # -- generation & forgetting -------------------------------------------

    def _fixed_noise(self, task_id: int, n: int) -> tuple[Tensor, np.ndarray | None]:
        rng = np.random.default_rng([self.train_cfg.seed, task_id, 13])
        z = Tensor(rng.normal(size=(n, self.model.gspec.latent_dim)).astype(np.float32))
        labels = None
        if self.model.gspec.conditional:
            labels = np.arange(n, dtype=np.int64) % self.model.gspec.num_classes
        return z, labels

    def _archive(self, task_id: int):
        z, labels = self._fixed_noise(task_id, SNAPSHOT_SAMPLES)
        with T.no_grad():
            imgs = self.model.generate(z, labels, self.store.theta, self.store.phi[task_id])
        self.snapshots[task_id] = imgs.data.copy()
        for t in self.store.phi[task_id].values():
            t.requires_grad = False  # archived adapters are immutable

    def verify_no_forgetting(self, task_id: int) -> bool:
        """True iff fixed-noise regeneration is bit-identical to the
        snapshot taken when the task finished."""
        if task_id not in self.snapshots:
            raise NotFoundError(f"no snapshot for task {task_id}")
        z, labels = self._fixed_noise(task_id, SNAPSHOT_SAMPLES)
        with T.no_grad():
            imgs = self.model.generate(z, labels, self.store.theta, self.store.phi[task_id])
        return bool(np.array_equal(imgs.data, self.snapshots[task_id]))

    def generate(
        self, task_id: int, n: int, labels: np.ndarray | None = None, seed: int = 0
    ) -> np.ndarray:
        if task_id not in self.store.phi:
            raise NotFoundError(f"unknown task {task_id}")
        return self.generate_with_phi(self.store.phi[task_id], n, labels, seed)

    def generate_with_phi(
        self,
        phi_flat: dict[str, Tensor],
        n: int,
        labels: np.ndarray | None = None,
        seed: int = 0,
    ) -> np.ndarray:
        spec = self.model.gspec
        if n == 0:
            return np.zeros((0, spec.out_channels, spec.out_size, spec.out_size), dtype=np.float32)
        rng = np.random.default_rng([seed, 17])
        z = Tensor(rng.normal(size=(n, spec.latent_dim)).astype(np.float32))
        if spec.conditional and labels is None:
            labels = np.arange(n, dtype=np.int64) % spec.num_classes
        with T.no_grad():
            imgs = self.model.generate(z, labels, self.store.theta, phi_flat)
        return imgs.data


def interpolate_params(
    phi_i: dict[str, Tensor], phi_j: dict[str, Tensor], lam: float
) -> dict[str, Tensor]:
    """Elementwise convex combination lam*phi_i + (1-lam)*phi_j; the
    endpoints return exact copies so lam in {0,1} is bit-faithful."""
    if set(phi_i) != set(phi_j):
        raise ContractViolationError("interpolate_params: parameter name sets differ")
    if not (0.0 <= lam <= 1.0):
        raise ValidationError([f"interpolate_params: lambda {lam} outside [0,1]"])
    out: dict[str, Tensor] = {}
    for name, ti in phi_i.items():
        tj = phi_j[name]
        if ti.data.shape != tj.data.shape:
            raise ContractViolationError(f"interpolate_params: shape mismatch for '{name}'")
        if lam == 1.0:
            out[name] = Tensor(ti.data.copy())
        elif lam == 0.0:
            out[name] = Tensor(tj.data.copy())
        else:
            # phi_j + lam*(phi_i - phi_j): identical inputs reproduce exactly
            out[name] = Tensor(tj.data + np.asarray(lam, tj.data.dtype) * (ti.data - tj.data))
    return out
