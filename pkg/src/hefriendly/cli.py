"""Command line entry point: ``hefriendly <command>``."""

from __future__ import annotations

import logging
import sys
from pathlib import Path

import click
import yaml

from .checkpoint import MAGIC, load_checkpoint, save_checkpoint
from .errors import HEFriendlyError
from .estimator import load_model_config
from .graph import (
    DepthConvention,
    ModelGraph,
    finalize_he_friendly,
    fold_batch_norm,
    he_lint,
    multiplicative_depth,
)
from .harness.config import TrainConfig, output_root
from .harness.data import DatasetSpec, load_dataset
from .harness.metrics import evaluate
from .harness.runner import aggregate_by_arm, read_summary, run_experiment


def _is_checkpoint(path) -> bool:
    try:
        with open(path, "rb") as f:
            return f.read(len(MAGIC)) == MAGIC
    except OSError:
        return False


def _load_graph(source) -> ModelGraph:
    """A checkpoint path, a model YAML path or a shipped model name."""
    if _is_checkpoint(source):
        return load_checkpoint(source)[0]
    return ModelGraph.from_config(load_model_config(source))


def _fail(exc: Exception):
    click.echo(f"error: {exc}", err=True)
    sys.exit(2)


@click.group()
@click.option("-v", "--verbose", count=True, help="Log training progress (-vv for per-epoch lines).")
def main(verbose):
    """Train HE-friendly CNNs and audit model graphs for HE readiness."""
    level = logging.WARNING if verbose == 0 else logging.INFO
    logging.basicConfig(level=level, format="%(message)s")
    if verbose < 2:
        logging.getLogger("hefriendly.estimator").setLevel(logging.WARNING)


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False),
              help="Experiment YAML.")
@click.option("--arm", multiple=True, help="Train only these arms (repeatable).")
@click.option("--seeds", help="Comma separated seeds, overriding the config.")
@click.option("--out", type=click.Path(file_okay=False), help="Output directory (default $HEFRIENDLY_OUT or ./runs).")
def train(config_path, arm, seeds, out):
    """Train every arm for every seed and write metrics and checkpoints."""
    try:
        cfg = TrainConfig.from_yaml(config_path)
        changes = {}
        if arm:
            changes["arms"] = tuple(arm)
        if seeds:
            changes["seeds"] = tuple(int(s) for s in seeds.replace(" ", "").split(",") if s)
        cfg = TrainConfig.from_dict({**cfg.to_dict(), **{k: list(v) for k, v in changes.items()}},
                                    source=cfg.source)
        out_dir = output_root(out)
        records = run_experiment(cfg, out_dir)
    except (HEFriendlyError, OSError) as exc:
        _fail(exc)
    for r in records:
        status = f"FAILED at epoch {r.failed_epoch}" if r.failed else f"acc={r.test_acc:.4f} macro_f1={r.macro_f1:.4f}"
        click.echo(f"{r.arm:<22} seed {r.seed:<6} {status}")
    click.echo(_table(aggregate_by_arm(records)))
    click.echo(f"wrote {out_dir / 'metrics.csv'}")
    sys.exit(1 if any(r.failed for r in records) else 0)


def _dataset_spec(dataset, metadata) -> DatasetSpec:
    if dataset is None:
        if "dataset" not in metadata:
            raise click.UsageError("checkpoint has no dataset metadata; pass --dataset")
        return DatasetSpec.from_dict(metadata["dataset"])
    path = Path(dataset)
    if path.suffix in (".yaml", ".yml"):
        raw = yaml.safe_load(path.read_text())
        return DatasetSpec.from_dict(raw.get("dataset", raw))
    return DatasetSpec(name=dataset)


@main.command("eval")
@click.option("--checkpoint", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--dataset", help="Dataset YAML, .npz file or 'shapes'. Defaults to the checkpoint's own.")
@click.option("--seed", type=int, help="Dataset seed. Defaults to the checkpoint's training seed.")
def eval_cmd(checkpoint, dataset, seed):
    """Score a checkpoint on the test split."""
    try:
        graph, meta = load_checkpoint(checkpoint)
        spec = _dataset_spec(dataset, meta)
        seed = seed if seed is not None else meta.get("seed", 0)
        _, _, test = load_dataset(spec, seed)
        graph.mode = "eval"
        acc, f1, per_class = evaluate(graph, test.X, test.y)
    except HEFriendlyError as exc:
        _fail(exc)
    click.echo(f"accuracy {acc!r}")
    click.echo(f"macro_f1 {f1!r}")
    click.echo("per_class_f1 " + " ".join(repr(v) for v in per_class))


def _table(aggs) -> str:
    lines = [f"{'arm':<22} {'accuracy':>17} {'macro-F1':>17} {'failed':>7}"]
    for a in aggs:
        lines.append(f"{a.arm:<22} {_pm(a.acc_mean, a.acc_std):>17} {_pm(a.f1_mean, a.f1_std):>17} "
                     f"{a.failure_count:>7}")
    return "\n".join(lines)


def _pm(mean, std) -> str:
    if mean != mean:
        return "failed"
    return f"{mean:.3f} ± {std:.3f}"


@main.command()
@click.option("--in", "in_dir", required=True, type=click.Path(exists=True, file_okay=False))
def report(in_dir):
    """Render mean ± std per arm from a finished run directory."""
    path = Path(in_dir) / "summary.csv"
    if not path.exists():
        _fail(FileNotFoundError(f"no summary.csv in {in_dir}"))
    lines = [f"{'arm':<22} {'accuracy':>17} {'macro-F1':>17} {'failed':>7}"]
    for row in read_summary(path):
        acc = _pm(float(row["acc_mean"]), float(row["acc_std"]))
        f1 = _pm(float(row["f1_mean"]), float(row["f1_std"]))
        lines.append(f"{row['arm']:<22} {acc:>17} {f1:>17} {row['failure_count']:>7}")
    click.echo("\n".join(lines))


@main.command()
@click.argument("source")
def lint(source):
    """List HE-unfriendly nodes. Silent with exit 0 when the model is clean."""
    try:
        violations = he_lint(_load_graph(source))
    except HEFriendlyError as exc:
        _fail(exc)
    for v in violations:
        click.echo(f"{v.node}: {v.reason}")
    sys.exit(1 if violations else 0)


@main.command()
@click.argument("source")
@click.option("--convention", type=click.Path(exists=True, dir_okay=False), help="YAML of per-kind depth costs.")
@click.option("--fold/--no-fold", default=False, help="Fold batch norms before counting.")
def depth(source, convention, fold):
    """Print the per-node multiplicative depth table."""
    try:
        graph = _load_graph(source)
        if fold:
            graph = fold_batch_norm(graph.with_mode("eval"))
        conv = DepthConvention.from_file(convention) if convention else None
        click.echo(multiplicative_depth(graph, conv).render())
    except HEFriendlyError as exc:
        _fail(exc)


def _rewrite(src, out, fn, tag):
    try:
        graph, meta = load_checkpoint(src)
        graph = fn(graph)
        save_checkpoint(graph, out, {**meta, tag: True})
    except HEFriendlyError as exc:
        _fail(exc)
    click.echo(f"wrote {out}")


@main.command()
@click.argument("checkpoint", type=click.Path(exists=True, dir_okay=False))
@click.option("-o", "--output", required=True, type=click.Path(dir_okay=False))
def fold(checkpoint, output):
    """Fold eval-mode batch norms into the following linear layers."""
    _rewrite(checkpoint, output, lambda g: fold_batch_norm(g.with_mode("eval")), "folded")


@main.command()
@click.argument("checkpoint", type=click.Path(exists=True, dir_okay=False))
@click.option("-o", "--output", required=True, type=click.Path(dir_okay=False))
def finalize(checkpoint, output):
    """Produce the inference-only HE-friendly graph (no dropout, folded BN, pure quadratics)."""
    _rewrite(checkpoint, output, lambda g: finalize_he_friendly(g.with_mode("eval")), "finalized")


if __name__ == "__main__":
    main()
