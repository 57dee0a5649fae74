"""Experiment orchestration: builds managers from configs, persists
checkpoints between CLI invocations, and emits CSV/image artifacts.

Directory layout per experiment:
  theta.ckpt, psi.ckpt, phi_<t>.ckpt   parameter checkpoints
  snapshots.ckpt                        fixed-noise forgetting snapshots
  loss_log_<t>.csv                      per-iteration losses
  metrics.csv                           proxy-FID rows
  cost_report.{csv,txt}                 cost accounting
  manifest.json                         config hash + output content hashes
"""

from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path

import numpy as np

from . import checkpoint
from .config import ExperimentConfig
from .continual import ContinualManager, TaskSpec, interpolate_params
from .costing import model_cost
from .data import DatasetHandle, load_dir, synth_dataset, synth_labeled_dataset, write_ppm
from .errors import NotFoundError, ValidationError
from .gan import GanModel
from .metrics import FidStats, feature_embed, fid
from .params import hash_params
from .replay import train_classifier_incremental
from .tensor import Tensor


def build_model(cfg: ExperimentConfig) -> GanModel:
    return GanModel(cfg.generator_spec(), cfg.discriminator_spec(), cfg.adapter_config())


def task_dataset(cfg: ExperimentConfig, task_id: int, n: int, eval_offset: bool = False) -> DatasetHandle:
    spec = cfg.raw["tasks"][task_id]
    size = cfg["image_size"]
    if "dir" in spec:
        return load_dir(spec["dir"], size)
    seed = spec.get("palette_seed", task_id)
    if cfg["conditional"]:
        # class palettes must match between splits; held-out data varies
        # only the per-image layout
        cpt = cfg["replay.classes_per_task"]
        return synth_labeled_dataset(spec["family"], seed, max(1, n // cpt), size, cpt,
                                     instance_seed=500000 if eval_offset else 0)
    if eval_offset:
        seed += 500000  # held-out draw from the same distribution
    return synth_dataset(spec["family"], seed, n, size)


def build_manager(cfg: ExperimentConfig, task_id: int = 0) -> ContinualManager:
    return ContinualManager(build_model(cfg), cfg.train_config(task_id))


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def save_state(manager: ContinualManager, out: Path):
    out.mkdir(parents=True, exist_ok=True)
    checkpoint.save(out / "theta.ckpt", manager.store.theta)
    checkpoint.save(out / "psi.ckpt", manager.store.psi)
    for t, phi in manager.store.phi.items():
        checkpoint.save(out / f"phi_{t}.ckpt", phi)
    checkpoint.save(
        out / "snapshots.ckpt", {f"task_{t}": s for t, s in manager.snapshots.items()}
    )


def load_state(cfg: ExperimentConfig, out: Path, task_id: int = 0) -> ContinualManager:
    manager = build_manager(cfg, task_id)
    theta_path = out / "theta.ckpt"
    if not theta_path.exists():
        raise NotFoundError(f"missing base checkpoint {theta_path}; run train-base first")
    for name, arr in checkpoint.load(theta_path).items():
        manager.store.add_theta(name, Tensor(arr))
    manager.store.set_psi(
        {n: Tensor(a) for n, a in checkpoint.load(out / "psi.ckpt").items()}
    )
    t = 0
    while (out / f"phi_{t}.ckpt").exists():
        manager.store.add_phi(
            t, {n: Tensor(a) for n, a in checkpoint.load(out / f"phi_{t}.ckpt").items()}
        )
        t += 1
    if manager.store.phi:  # base training completed
        manager.store.freeze_theta()
        for phi in manager.store.phi.values():
            for tt in phi.values():
                tt.requires_grad = False
    snap_path = out / "snapshots.ckpt"
    if snap_path.exists():
        for name, arr in checkpoint.load(snap_path).items():
            manager.snapshots[int(name.split("_")[1])] = arr
    return manager


def _write_loss_log(out: Path, task_id: int, log: dict[str, list[float]]):
    with open(out / f"loss_log_{task_id}.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["iteration", "loss_d", "loss_g", "r1"])
        for i, (d, g, r) in enumerate(zip(log["loss_d"], log["loss_g"], log["r1"])):
            w.writerow([i, repr(d), repr(g), repr(r)])


def _append_metrics(out: Path, rows: list[tuple]):
    path = out / "metrics.csv"
    new = not path.exists()
    with open(path, "a", newline="") as f:
        w = csv.writer(f)
        if new:
            w.writerow(["task_id", "after_task", "proxy_fid", "n_samples", "seed"])
        for row in rows:
            w.writerow(row)


def update_manifest(cfg: ExperimentConfig, out: Path):
    entries = {}
    for p in sorted(out.rglob("*")):
        if p.is_file() and p.name != "manifest.json":
            entries[str(p.relative_to(out))] = hashlib.sha256(p.read_bytes()).hexdigest()
    hashed = {k: v for k, v in cfg.raw.items() if k != "out_dir"}
    manifest = {
        "config_hash": hashlib.sha256(
            json.dumps(hashed, sort_keys=True, default=str).encode()
        ).hexdigest(),
        "outputs": entries,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def run_train(cfg: ExperimentConfig, task_id: int, out: Path) -> ContinualManager:
    n_train = cfg["data.train_size"]
    dataset = task_dataset(cfg, task_id, n_train)
    iters = cfg.train_config(task_id).iterations
    task = TaskSpec(task_id=task_id, dataset=dataset, iterations=iters,
                    num_classes=cfg.num_classes())
    if task_id == 0:
        manager = build_manager(cfg, 0)
        manager.train_base(task)
    else:
        manager = load_state(cfg, out, task_id)
        manager.train_task(task)
    save_state(manager, out)
    _write_loss_log(out, task_id, manager.loss_logs[task_id])
    _append_metrics(out, eval_rows(cfg, manager, [task_id], after_task=task_id))
    report = model_cost(cfg.generator_spec(), cfg.adapter_config())
    (out / "cost_report.csv").write_text(report.to_csv())
    (out / "cost_report.txt").write_text(report.to_table() + "\n")
    update_manifest(cfg, out)
    return manager


def eval_rows(
    cfg: ExperimentConfig, manager: ContinualManager, task_ids, after_task: int
) -> list[tuple]:
    n = cfg["eval.fid_samples"]
    seed = cfg["seed"]
    rows = []
    for t in task_ids:
        real = task_dataset(cfg, t, n, eval_offset=True)
        fake = manager.generate(t, n, seed=seed + 31 * t)
        ex_seed, d = cfg["eval.extractor_seed"], cfg["eval.feature_dim"]
        score = fid(
            FidStats.from_features(feature_embed(real.images[:n], ex_seed, d)),
            FidStats.from_features(feature_embed(fake, ex_seed, d)),
        )
        rows.append((t, after_task, repr(score), n, seed))
    return rows


def run_eval(cfg: ExperimentConfig, out: Path) -> list[tuple]:
    manager = load_state(cfg, out)
    trained = sorted(manager.store.phi)
    rows = eval_rows(cfg, manager, trained, after_task=max(trained))
    _append_metrics(out, rows)
    update_manifest(cfg, out)
    return rows


def run_generate(cfg: ExperimentConfig, out: Path, task_id: int, n: int, seed: int, dest: Path):
    manager = load_state(cfg, out)
    imgs = manager.generate(task_id, n, seed=seed)
    dest.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(n):
        p = dest / f"{task_id}_{seed}_{i}.ppm"
        write_ppm(p, imgs[i])
        paths.append(p)
    return paths


def run_interpolate(
    cfg: ExperimentConfig, out: Path, task_i: int, task_j: int, grid, seed: int, dest: Path
):
    for lam in grid:
        if not (0.0 <= lam <= 1.0):
            raise ValidationError([f"interpolation weight {lam} outside [0,1]"])
    manager = load_state(cfg, out)
    for t in (task_i, task_j):
        if t not in manager.store.phi:
            raise NotFoundError(f"task {t} has no trained parameters")
    cols = 8
    spec = manager.model.gspec
    rng = np.random.default_rng([seed, 17])
    z = Tensor(rng.normal(size=(cols, spec.latent_dim)).astype(np.float32))
    labels = np.arange(cols, dtype=np.int64) % spec.num_classes if spec.conditional else None
    rows = []
    from . import tensor as T

    for lam in grid:
        phi = interpolate_params(manager.store.phi[task_i], manager.store.phi[task_j], lam)
        with T.no_grad():
            imgs = manager.model.generate(z, labels, manager.store.theta, phi).data
        rows.append(np.concatenate(list(imgs), axis=2))  # side by side
    sheet = np.concatenate(rows, axis=1)  # one row per lambda
    dest.mkdir(parents=True, exist_ok=True)
    path = dest / f"interp_{task_i}_{task_j}_{seed}.ppm"
    write_ppm(path, sheet)
    return path, sheet


def replay_sequences(cfg: ExperimentConfig) -> list[tuple[DatasetHandle, DatasetHandle]]:
    """Per replayed task (generator ids 1..K): (train, test) labeled sets."""
    n_tasks = len(cfg.raw["tasks"])
    seqs = []
    for t in range(1, n_tasks):
        train = task_dataset(cfg, t, cfg["data.train_size"])
        test = task_dataset(cfg, t, cfg["data.eval_size"], eval_offset=True)
        seqs.append((train, test))
    return seqs


def run_replay(cfg: ExperimentConfig, out: Path) -> list[tuple]:
    if not cfg["conditional"]:
        raise ValidationError(["replay requires conditional: true"])
    manager = load_state(cfg, out)
    seqs = replay_sequences(cfg)
    rcfg = cfg.replay_config()
    rows = []
    for mode in (True, False):
        curve, audit = train_classifier_incremental(
            seqs, manager, rcfg, seed=cfg["seed"], replay=mode
        )
        if mode and not audit.matches_schedule(rcfg.n):
            raise ValidationError(["replay batch audit failed the t*n schedule"])
        rows.extend(curve.to_csv_rows())
    with open(out / "replay_accuracy.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["task_index", "combined_accuracy", "replay_mode", "seed"])
        for row in rows:
            w.writerow([row[0], repr(row[1]), row[2], row[3]])
    update_manifest(cfg, out)
    return rows
