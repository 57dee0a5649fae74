"""Class-incremental classifier harness: label mapping, batch schedule
audit, and joint evaluation."""

import numpy as np
import pytest

from cagn.data import synth_labeled_dataset
from cagn.errors import ContractViolationError
from cagn.replay import (
    AccuracyCurve,
    BatchAudit,
    Classifier,
    ReplayConfig,
    cross_entropy,
    evaluate_joint,
    global_label,
    train_classifier_incremental,
)
from cagn.tensor import Tensor


def test_global_label_mapping():
    # task indices are 1-based; classes_per_task=2
    assert global_label(1, np.array([0, 1]), 2).tolist() == [0, 1]
    assert global_label(2, np.array([0, 1]), 2).tolist() == [2, 3]
    assert global_label(3, np.array([1]), 2).tolist() == [5]


def test_batch_audit_schedule():
    audit = BatchAudit()
    audit.record(1, 4, 0)
    audit.record(2, 4, 4)
    audit.record(3, 4, 8)
    assert audit.matches_schedule(4)
    audit.record(3, 4, 4)  # wrong: should be (3-1)*4
    assert not audit.matches_schedule(4)


def test_cross_entropy_matches_reference():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(5, 4))
    y = rng.integers(0, 4, 5)
    loss = float(cross_entropy(Tensor(logits), y).data)
    shifted = logits - logits.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    want = -logp[np.arange(5), y].mean()
    assert abs(loss - want) < 1e-10


def test_cross_entropy_differentiable():
    from cagn import tensor as T

    logits = Tensor(np.zeros((2, 3)), requires_grad=True)
    loss = cross_entropy(logits, np.array([0, 2]))
    g = T.grad([loss], [logits])[logits.node_id].data
    # softmax is uniform, so grad is (1/3 - onehot)/batch
    want = (np.full((2, 3), 1 / 3) - np.eye(3)[[0, 2]]) / 2
    assert np.allclose(g, want)


def test_classifier_shapes_and_determinism():
    clf1 = Classifier(4, seed=1)
    clf2 = Classifier(4, seed=1)
    x = np.random.default_rng(2).normal(size=(3, 3, 16, 16)).astype(np.float32)
    out1 = clf1.forward(Tensor(x)).data
    out2 = clf2.forward(Tensor(x)).data
    assert out1.shape == (3, 4)
    assert np.array_equal(out1, out2)


def test_evaluate_joint_rejects_empty():
    clf = Classifier(2, seed=0)
    with pytest.raises(ContractViolationError):
        evaluate_joint(clf, [])


def test_evaluate_joint_perfect_and_chance():
    """A rigged classifier that reads the label from the data scores 1.0."""

    class Oracle:
        n_classes = 4

        def predict(self, images):
            return images[:, 0, 0, 0].astype(np.int64)

    ds = synth_labeled_dataset("blobs", 0, 4, 16, num_classes=2)
    # encode each global label into the first pixel
    imgs1 = ds.images.copy()
    imgs1[:, 0, 0, 0] = ds.labels
    ds1 = type(ds)(imgs1, ds.labels)
    imgs2 = ds.images.copy()
    imgs2[:, 0, 0, 0] = ds.labels + 2
    ds2 = type(ds)(imgs2, ds.labels)
    acc = evaluate_joint(Oracle(), [(1, ds1), (2, ds2)], classes_per_task=2)
    assert acc == 1.0


def test_accuracy_curve_rows():
    c = AccuracyCurve(values=[0.5, 0.75], replay_mode="replay", seed=3)
    rows = c.to_csv_rows()
    assert rows == [(1, 0.5, "replay", 3), (2, 0.75, "replay", 3)]


def test_no_replay_needs_no_generator():
    """Without replay the harness must run with no generator at all."""
    seqs = []
    for t in range(2):
        tr = synth_labeled_dataset("blobs", t, 4, 16, num_classes=2)
        te = synth_labeled_dataset("blobs", t + 100, 3, 16, num_classes=2)
        seqs.append((tr, te))
    cfg = ReplayConfig(n=2, epochs=1, classes_per_task=2)
    curve, audit = train_classifier_incremental(seqs, None, cfg, seed=0, replay=False)
    assert len(curve.values) == 2
    assert all(ng == 0 for _, _, ng in audit.steps)


def test_replay_without_generator_rejected():
    seqs = [
        (synth_labeled_dataset("blobs", 0, 4, 16, 2), synth_labeled_dataset("blobs", 1, 3, 16, 2))
    ] * 2
    cfg = ReplayConfig(n=2, epochs=1, classes_per_task=2)
    with pytest.raises(ContractViolationError):
        train_classifier_incremental(seqs, None, cfg, seed=0, replay=True)
