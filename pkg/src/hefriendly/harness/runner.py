"""Seed sweeps over training arms, with CSV and checkpoint export."""

from __future__ import annotations

import csv
import json
import logging
from pathlib import Path
from typing import Optional

from ..checkpoint import load_checkpoint, save_checkpoint
from ..errors import CheckpointError, ConfigError
from ..estimator import HEFriendlyClassifier, TrainingDiverged
from .config import TrainConfig
from .data import load_dataset, make_augmenter
from .metrics import MetricsRecord, evaluate, seed_sweep_aggregate

logger = logging.getLogger(__name__)

TEACHER_ARM = "baseline_relu_maxpool"
METRICS_COLUMNS = ("arm", "seed", "epoch", "lambda", "train_loss", "val_acc", "test_acc", "macro_f1")
SUMMARY_COLUMNS = ("arm", "n_completed", "failure_count", "acc_mean", "acc_std", "f1_mean", "f1_std")
AGGREGATE_SEED = "aggregate"


def _needs_teacher(cfg: TrainConfig, arm: str) -> bool:
    if arm == "tp_st_kd":
        return True
    return not arm.startswith("baseline") and cfg.warm_start == "teacher"


def _classifier(cfg: TrainConfig, arm: str, seed: int, teacher=None) -> HEFriendlyClassifier:
    return HEFriendlyClassifier(
        model=cfg.model,
        arm=arm,
        epochs=cfg.epochs,
        batch_size=cfg.batch_size,
        lr=cfg.lr,
        transition_start=cfg.transition.start_epoch,
        transition_duration=cfg.transition.duration,
        kd_tau=cfg.kd.tau,
        kd_alpha=cfg.kd.alpha,
        kd_delay_until_poly=cfg.kd.delay_until_poly,
        coef_init=cfg.coef_init,
        teacher=teacher,
        warm_start=cfg.warm_start,
        augment=make_augmenter(cfg.dataset),
        random_state=seed,
    )


def _teacher_path(cfg: TrainConfig, seed: int) -> Optional[Path]:
    if cfg.kd.teacher_checkpoint is None:
        return None
    path = Path(str(cfg.kd.teacher_checkpoint).format(seed=seed))
    if not path.exists():
        raise ConfigError(f"teacher checkpoint not found: {path}")
    return path


def _train_one(cfg, arm, seed, splits, teacher, out_dir) -> tuple:
    """Train one (arm, seed) run. Returns ``(record, fitted classifier or None)``."""
    train, val, test = splits
    clf = _classifier(cfg, arm, seed, teacher)
    record = MetricsRecord(arm=arm, seed=seed)
    try:
        clf.fit(train.X, train.y, val.X, val.y)
    except TrainingDiverged as exc:
        record.failed, record.failed_epoch, record.epochs = True, exc.epoch, list(exc.history)
        logger.warning("%s seed %d diverged at epoch %d", arm, seed, exc.epoch)
        return record, None
    record.epochs = list(clf.history_)
    record.test_acc, record.macro_f1, record.per_class_f1 = evaluate(clf.graph_, test.X, test.y)
    if out_dir is not None:
        path = Path(out_dir) / arm / f"seed{seed}.ckpt"
        meta = {"arm": arm, "seed": seed, "dataset": cfg.to_dict()["dataset"], "test_acc": record.test_acc}
        export_checkpoint(clf.graph_, path, meta)
        record.checkpoint = str(path)
    logger.info("%s seed %d: acc=%.4f macro_f1=%.4f", arm, seed, record.test_acc, record.macro_f1)
    return record, clf


def run_experiment(cfg: TrainConfig, out_dir=None) -> list:
    """Train every configured arm for every seed.

    Returns the per-run :class:`MetricsRecord` list in (seed, arm) order.
    When a teacher is needed and no teacher checkpoint is configured, the
    ReLU/max-pool baseline is trained first for that seed and reused as the
    ``baseline_relu_maxpool`` run if that arm was requested.
    """
    records = []
    needs_teacher = any(_needs_teacher(cfg, a) for a in cfg.arms)
    for seed in cfg.seeds:
        splits = load_dataset(cfg.dataset, seed)
        if out_dir is not None:
            _write_dataset_info(Path(out_dir), seed, splits, cfg.dataset.num_classes)
        done = {}
        teacher = None
        if needs_teacher:
            path = _teacher_path(cfg, seed)
            if path is not None:
                teacher = load_checkpoint(path)[0]
            else:
                rec, clf = _train_one(cfg, TEACHER_ARM, seed, splits, None,
                                      out_dir if TEACHER_ARM in cfg.arms else None)
                done[TEACHER_ARM] = rec
                teacher = clf
        for arm in cfg.arms:
            if arm in done:
                records.append(done[arm])
                continue
            if _needs_teacher(cfg, arm) and teacher is None:
                # The teacher itself diverged; nothing to start from.
                records.append(MetricsRecord(arm=arm, seed=seed, failed=True, failed_epoch=None))
                continue
            rec, _ = _train_one(cfg, arm, seed, splits, teacher if _needs_teacher(cfg, arm) else None, out_dir)
            records.append(rec)
    if out_dir is not None:
        out_dir = Path(out_dir)
        export_metrics(records, out_dir / "metrics.csv")
        export_epochs(records, out_dir / "epochs.csv")
        export_summary(records, out_dir / "summary.csv")
    return records


def aggregate_by_arm(records: list) -> list:
    arms = list(dict.fromkeys(r.arm for r in records))
    return [seed_sweep_aggregate([r for r in records if r.arm == a]) for a in arms]


def _write_dataset_info(out_dir: Path, seed: int, splits, num_classes: int):
    info = {name: {"size": len(s), "class_counts": s.class_counts(num_classes)}
            for name, s in zip(("train", "val", "test"), splits)}
    _mkdir(out_dir)
    path = out_dir / f"dataset_seed{seed}.json"
    try:
        path.write_text(json.dumps(info, sort_keys=True, indent=1) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


# -- export ----------------------------------------------------------------------


def _num(x) -> str:
    return "" if x is None else repr(float(x))


def _mkdir(path: Path):
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create directory {path}: {exc}") from exc


def _write_csv(path, columns, rows):
    path = Path(path)
    _mkdir(path.parent)
    try:
        with path.open("w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(columns)
            w.writerows(rows)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc
    return path


def _final_row(r: MetricsRecord) -> list:
    last = r.epochs[-1] if r.epochs else None
    if r.failed:
        epoch = "" if r.failed_epoch is None else str(r.failed_epoch)
        return [r.arm, r.seed, epoch, _num(last and last.lam), _num(last and last.train_loss),
                _num(last and last.val_acc), "failed", "failed"]
    return [r.arm, r.seed, last.epoch, _num(last.lam), _num(last.train_loss), _num(last.val_acc),
            _num(r.test_acc), _num(r.macro_f1)]


def export_metrics(records: list, path) -> Path:
    """One final row per run plus one aggregate row per arm.

    Failed runs carry the failing epoch and ``failed`` in the score columns.
    The aggregate row holds means over completed runs; standard deviations
    and failure counts go to ``summary.csv``.
    """
    rows = [_final_row(r) for r in records]
    for agg in (aggregate_by_arm(records) if records else []):
        rows.append([agg.arm, AGGREGATE_SEED, "", "", "", "", _num(agg.acc_mean), _num(agg.f1_mean)])
    return _write_csv(path, METRICS_COLUMNS, rows)


def export_epochs(records: list, path) -> Path:
    rows = [[r.arm, r.seed, e.epoch, _num(e.lam), _num(e.train_loss), _num(e.val_acc), "", ""]
            for r in records for e in r.epochs]
    return _write_csv(path, METRICS_COLUMNS, rows)


def export_summary(records: list, path) -> Path:
    rows = [[a.arm, a.n_completed, a.failure_count, _num(a.acc_mean), _num(a.acc_std),
             _num(a.f1_mean), _num(a.f1_std)] for a in (aggregate_by_arm(records) if records else [])]
    return _write_csv(path, SUMMARY_COLUMNS, rows)


def export_checkpoint(graph, path, metadata: Optional[dict] = None) -> Path:
    try:
        return save_checkpoint(graph, path, metadata)
    except CheckpointError:
        raise
    except OSError as exc:
        raise CheckpointError(f"cannot write checkpoint {path}: {exc}") from exc


def read_summary(path) -> list:
    with Path(path).open(newline="") as f:
        return list(csv.DictReader(f))
