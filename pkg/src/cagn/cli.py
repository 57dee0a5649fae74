"""Command-line interface.

Exit codes: 0 success, 2 validation/usage error, 3 missing artifact,
4 numeric failure during optimization.

The CAGN_THREADS environment variable caps BLAS threading; it must be
applied before numpy is first imported, so heavy modules are imported
lazily inside the commands.
"""

from __future__ import annotations

import os
import sys
from pathlib import Path


def _apply_thread_cap():
    threads = os.environ.get("CAGN_THREADS")
    if threads is not None:
        for var in (
            "OMP_NUM_THREADS",
            "OPENBLAS_NUM_THREADS",
            "MKL_NUM_THREADS",
            "NUMEXPR_NUM_THREADS",
        ):
            os.environ.setdefault(var, threads)


_apply_thread_cap()

import click  # noqa: E402


def _load(config, seed, out, deterministic):
    from .config import load_config

    cfg = load_config(config)
    if seed is not None:
        cfg.raw["seed"] = seed
    if out is not None:
        cfg.raw["out_dir"] = str(out)
    if deterministic:
        os.environ["OMP_NUM_THREADS"] = "1"
    return cfg, Path(cfg.raw["out_dir"])


_shared = [
    click.option("--config", required=True, type=click.Path(), help="YAML experiment config."),
    click.option("--seed", type=int, default=None, help="Override the config seed."),
    click.option("--out", type=click.Path(), default=None, help="Override the output directory."),
    click.option("--deterministic", is_flag=True, help="Force single-threaded numerics."),
]


def shared_options(f):
    for opt in reversed(_shared):
        f = opt(f)
    return f


@click.group()
def cli():
    """Continual adversarial generation toolkit."""


@cli.command("train-base")
@shared_options
def train_base(config, seed, out, deterministic):
    """Train the shared backbone and the base task's adapters."""
    from . import runner

    cfg, out_dir = _load(config, seed, out, deterministic)
    runner.run_train(cfg, 0, out_dir)
    click.echo(f"base task trained; state in {out_dir}")


@cli.command("train-task")
@shared_options
@click.option("--task", "task_id", required=True, type=int, help="Task index (>= 1).")
def train_task(config, seed, out, deterministic, task_id):
    """Train adapters for one follow-on task with the backbone frozen."""
    from . import runner
    from .errors import ValidationError

    cfg, out_dir = _load(config, seed, out, deterministic)
    if not 1 <= task_id < len(cfg.raw["tasks"]):
        raise ValidationError([f"task {task_id} not in config (1..{len(cfg.raw['tasks']) - 1})"])
    manager = runner.run_train(cfg, task_id, out_dir)
    kept = all(manager.verify_no_forgetting(t) for t in range(task_id))
    click.echo(f"task {task_id} trained; earlier tasks bit-identical: {kept}")


@cli.command()
@shared_options
@click.option("--task", "task_id", required=True, type=int)
@click.option("--count", default=16, type=int, help="Number of images.")
@click.option("--dest", type=click.Path(), default=None, help="Image directory (default OUT/samples).")
def generate(config, seed, out, deterministic, task_id, count, dest):
    """Sample images from a trained task and write them as PPM files."""
    from . import runner

    cfg, out_dir = _load(config, seed, out, deterministic)
    dest_dir = Path(dest) if dest else out_dir / "samples"
    paths = runner.run_generate(cfg, out_dir, task_id, count, cfg["seed"], dest_dir)
    click.echo(f"wrote {len(paths)} images to {dest_dir}")


@cli.command()
@shared_options
@click.option("--task-i", required=True, type=int)
@click.option("--task-j", required=True, type=int)
@click.option("--steps", default=11, type=int, help="Number of interpolation weights.")
def interpolate(config, seed, out, deterministic, task_i, task_j, steps):
    """Blend two tasks' adapter parameters and render a sample sheet."""
    from . import runner

    cfg, out_dir = _load(config, seed, out, deterministic)
    grid = [i / (steps - 1) for i in range(steps)] if steps > 1 else [0.5]
    path, _ = runner.run_interpolate(cfg, out_dir, task_i, task_j, grid, cfg["seed"], out_dir)
    click.echo(f"wrote interpolation sheet {path}")


@cli.command("eval")
@shared_options
def eval_cmd(config, seed, out, deterministic):
    """Score every trained task with the proxy distribution distance."""
    from . import runner

    cfg, out_dir = _load(config, seed, out, deterministic)
    rows = runner.run_eval(cfg, out_dir)
    for task_id, after, score, n, s in rows:
        click.echo(f"task {task_id}: proxy_fid={float(score):.4f} (n={n}, seed={s})")


@cli.command()
@shared_options
def cost(config, seed, out, deterministic):
    """Print the parameter/MAC cost table for the configured model."""
    from .costing import model_cost

    cfg, out_dir = _load(config, seed, out, deterministic)
    report = model_cost(cfg.generator_spec(), cfg.adapter_config())
    click.echo(report.to_table())


@cli.command()
@shared_options
def replay(config, seed, out, deterministic):
    """Run the class-incremental classifier with and without replay."""
    from . import runner

    cfg, out_dir = _load(config, seed, out, deterministic)
    rows = runner.run_replay(cfg, out_dir)
    for task_index, acc, mode, s in rows:
        click.echo(f"after task {task_index}: accuracy={acc:.4f} ({mode})")


@cli.command("synth-data")
@shared_options
@click.option("--family", required=True, type=str)
@click.option("--count", default=16, type=int)
@click.option("--palette-seed", default=0, type=int)
def synth_data(config, seed, out, deterministic, family, count, palette_seed):
    """Write a procedural dataset to disk as PPM files plus labels.txt."""
    from .data import synth_dataset, write_ppm

    cfg, out_dir = _load(config, seed, out, deterministic)
    ds = synth_dataset(family, palette_seed, count, cfg["image_size"])
    dest = out_dir / "data" / family
    dest.mkdir(parents=True, exist_ok=True)
    lines = []
    for i in range(count):
        name = f"{family}_{palette_seed}_{i}.ppm"
        write_ppm(dest / name, ds.images[i])
        lines.append(f"{name} {ds.labels[i]}")
    (dest / "labels.txt").write_text("\n".join(lines) + "\n")
    click.echo(f"wrote {count} images to {dest}")


def main(argv=None) -> int:
    from .errors import ConfigurationError, NotFoundError, NumericFailureError, ValidationError

    try:
        cli.main(args=argv, standalone_mode=False)
        return 0
    except click.exceptions.Abort:
        return 2
    except click.ClickException as exc:
        exc.show()
        return 2
    except ValidationError as exc:
        click.echo("configuration invalid:", err=True)
        for failure in exc.failures:
            click.echo(f"  - {failure}", err=True)
        return 2
    except ConfigurationError as exc:
        click.echo(f"error: {exc}", err=True)
        return 2
    except NotFoundError as exc:
        click.echo(f"error: {exc}", err=True)
        return 3
    except NumericFailureError as exc:
        click.echo(f"numeric failure: {exc}", err=True)
        return 4


if __name__ == "__main__":
    sys.exit(main())
