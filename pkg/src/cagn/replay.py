"""Generative replay for class-incremental classification.

While learning task t, each optimization batch holds n real current-task
samples plus n freshly generated samples per past task (t*n total), with
conditioning labels mapped into a global label space.  Joint testing
scores the classifier over every class seen so far.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .continual import ContinualManager
from .data import DatasetHandle
from .errors import ConfigurationError, ContractViolationError
from .optim import Adam
from .tensor import Tensor


@dataclass
class ReplayConfig:
    n: int = 16  # real samples per batch; task-t batches are t*n
    lr: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    epochs: int = 20
    classes_per_task: int = 2

    def __post_init__(self):
        if self.n < 1 or self.epochs < 1 or self.classes_per_task < 1:
            raise ConfigurationError("ReplayConfig: n, epochs, classes_per_task must be >= 1")


@dataclass
class AccuracyCurve:
    values: list[float] = field(default_factory=list)
    replay_mode: str = "replay"
    seed: int = 0

    def to_csv_rows(self) -> list[tuple]:
        return [
            (i + 1, v, self.replay_mode, self.seed) for i, v in enumerate(self.values)
        ]


@dataclass
class BatchAudit:
    """Per-step batch composition record for the t*n schedule check."""

    steps: list[tuple[int, int, int]] = field(default_factory=list)  # (task, n_real, n_gen)

    def record(self, task_index: int, n_real: int, n_generated: int):
        self.steps.append((task_index, n_real, n_generated))

    def matches_schedule(self, n: int) -> bool:
        return all(nr == n and ng == (t - 1) * n for t, nr, ng in self.steps)


class Classifier:
    """Small 4-conv-block network trained from scratch at desk scale."""

    CHANNELS = (8, 16, 32, 32)

    def __init__(self, n_classes: int, seed: int, in_channels: int = 3):
        rng = np.random.default_rng([seed, 23])
        self.n_classes = n_classes
        self.params: dict[str, Tensor] = {}
        c_prev = in_channels
        for i, c in enumerate(self.CHANNELS):
            std = np.sqrt(2.0 / (c_prev * 9))
            self.params[f"conv{i}_w"] = Tensor(
                rng.normal(0, std, (c, c_prev, 3, 3)).astype(np.float32), requires_grad=True
            )
            self.params[f"conv{i}_b"] = Tensor(np.zeros(c, np.float32), requires_grad=True)
            c_prev = c
        self.params["fc_w"] = Tensor(
            rng.normal(0, np.sqrt(1.0 / c_prev), (n_classes, c_prev)).astype(np.float32),
            requires_grad=True,
        )
        self.params["fc_b"] = Tensor(np.zeros(n_classes, np.float32), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        h = x
        for i in range(len(self.CHANNELS)):
            h = T.conv2d(h, self.params[f"conv{i}_w"], self.params[f"conv{i}_b"], padding=1)
            h = T.leaky_relu(h)
            if i < 3 and h.data.shape[2] % 2 == 0 and h.data.shape[2] > 2:
                h = T.avg_pool2x(h)
        pooled = T.smul(T.sum_axes(h, (2, 3)), 1.0 / (h.data.shape[2] * h.data.shape[3]))
        return T.dense(pooled, self.params["fc_w"], self.params["fc_b"])

    def predict(self, images: np.ndarray, batch: int = 64) -> np.ndarray:
        preds = []
        with T.no_grad():
            for i in range(0, len(images), batch):
                logits = self.forward(Tensor(images[i : i + batch]))
                preds.append(np.argmax(logits.data, axis=1))
        return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    b, c = logits.data.shape
    m = logits.data.max(axis=1, keepdims=True)
    shifted = T.add(logits, Tensor(np.broadcast_to(-m, logits.data.shape).copy()))
    lse = T.log(T.sum_axes(T.exp(shifted), (1,)))
    onehot = np.zeros((b, c), dtype=logits.dtype)
    onehot[np.arange(b), labels] = 1.0
    picked = T.sum_axes(T.cmul(shifted, onehot), (1,))
    return T.mean_all(T.sub(lse, picked))


def global_label(task_index: int, local: np.ndarray, classes_per_task: int) -> np.ndarray:
    """Bijective task-local -> global id map; task_index is 1-based."""
    return (task_index - 1) * classes_per_task + np.asarray(local, dtype=np.int64)


def evaluate_joint(
    classifier: Classifier,
    test_sets: list[tuple[int, DatasetHandle]],
    classes_per_task: int | None = None,
) -> float:
    """Single accuracy over the union of the given (task_index, test set)
    pairs with globally mapped labels."""
    if not test_sets or sum(len(ds) for _, ds in test_sets) == 0:
        raise ContractViolationError("evaluate_joint: empty test set")
    if classes_per_task is None:
        classes_per_task = max(int(ds.labels.max(initial=0)) + 1 for _, ds in test_sets)
    images = np.concatenate([ds.images for _, ds in test_sets])
    labels = np.concatenate(
        [global_label(t, ds.labels, classes_per_task) for t, ds in test_sets]
    )
    preds = classifier.predict(images)
    return float((preds == labels).mean())


def train_classifier_incremental(
    sequence: list[tuple[DatasetHandle, DatasetHandle]],
    manager: ContinualManager | None,
    cfg: ReplayConfig,
    seed: int = 0,
    replay: bool = True,
) -> tuple[AccuracyCurve, BatchAudit]:
    """`sequence` is [(train_set, test_set), ...] per task (1-based order);
    datasets carry task-local labels in [0, classes_per_task)."""
    n_tasks = len(sequence)
    total_classes = n_tasks * cfg.classes_per_task
    clf = Classifier(total_classes, seed=seed)
    opt = Adam(cfg.lr, cfg.beta1, cfg.beta2)
    rng = np.random.default_rng([seed, 29])
    audit = BatchAudit()
    curve = AccuracyCurve(replay_mode="replay" if replay else "no_replay", seed=seed)

    for t in range(1, n_tasks + 1):
        train_set, _ = sequence[t - 1]
        if replay and t > 1:
            # classifier task s maps to generator task id s (id 0 is the
            # unclassified pretraining base)
            missing = [s for s in range(1, t) if manager is None or s not in manager.store.phi]
            if missing:
                raise ContractViolationError(
                    f"replay needs a trained generator for past task(s) {missing}"
                )
        steps_per_epoch = max(1, len(train_set) // cfg.n)
        for _epoch in range(cfg.epochs):
            for _step in range(steps_per_epoch):
                imgs, labs = train_set.sample(rng, cfg.n)
                batch_imgs = [imgs]
                batch_labels = [global_label(t, labs, cfg.classes_per_task)]
                n_gen = 0
                if replay:
                    for s in range(1, t):
                        local = rng.integers(0, cfg.classes_per_task, size=cfg.n)
                        gen = manager.generate(
                            s, cfg.n, labels=local, seed=int(rng.integers(0, 2**31))
                        )
                        batch_imgs.append(gen.astype(np.float32))
                        batch_labels.append(global_label(s, local, cfg.classes_per_task))
                        n_gen += cfg.n
                audit.record(t, cfg.n, n_gen)
                x = np.concatenate(batch_imgs)
                y = np.concatenate(batch_labels)
                logits = clf.forward(Tensor(x))
                loss = cross_entropy(logits, y)
                grads_map = T.grad([loss], list(clf.params.values()))
                named = {
                    name: grads_map[p.node_id]
                    for name, p in clf.params.items()
                    if p.node_id in grads_map
                }
                opt.step(clf.params, named)
        tests = [(s, sequence[s - 1][1]) for s in range(1, t + 1)]
        curve.values.append(evaluate_joint(clf, tests, cfg.classes_per_task))
    return curve, audit
