"""Training, evaluation, checkpointing, baselines and the ablation sweep."""

from __future__ import annotations

import contextlib
import csv
import logging
import shutil
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import fdt
from .config import Config
from .data import MANIFEST, PairDataset, generate
from .errors import CheckpointExistsError, ConfigError, DatasetError, NumericError
from .metrics import MetricsReport
from .model import FDCT, BaselineCNN
from .objectives import LOSS_COLUMNS, LossWeights
from .optim import AdamW, clip_grad_norm, cosine_lr

log = logging.getLogger(__name__)

CHECKPOINT = "checkpoint"
CONFIG_LOCK = "config.lock"
ABLATIONS = (
    ("full", {}),
    ("drop_ita", {"ita": 0.0}),
    ("drop_scma", {"scma": 0.0}),
    ("drop_cpa", {"cpa": 0.0}),
    ("drop_decp", {"decp": 0.0}),
)


def serial(enabled: bool = True):
    """Pin BLAS/OpenMP pools to one thread so results do not depend on scheduling."""
    return threadpool_limits(limits=1) if enabled else contextlib.nullcontext()


# datasets

def resolve_dataset(cfg: Config, out_dir=None) -> Path:
    """Manifest for ``cfg``: ``data.path`` if set, else a synthetic dataset
    generated (once) under ``<out>/data``."""
    if cfg["data.path"]:
        manifest = Path(cfg["data.path"])
        manifest = manifest / MANIFEST if manifest.is_dir() else manifest
        if not manifest.exists():
            raise DatasetError(f"manifest not found: {manifest}", path=str(manifest))
        return manifest
    if out_dir is None:
        raise ConfigError("data.path is empty and no output directory was given")
    root = Path(out_dir) / "data"
    if not (root / MANIFEST).exists():
        generate(cfg.synth_spec(), root)
    return root / MANIFEST


def load_splits(manifest) -> dict[str, PairDataset]:
    return {name: PairDataset.from_manifest(manifest, name) for name in ("train", "test", "val")}


def _check_classes(cfg: Config, data: PairDataset) -> None:
    if data.num_classes > cfg["data.classes"]:
        raise ConfigError(f"dataset has {data.num_classes} classes, config expects {cfg['data.classes']}")


# checkpoints

def _prepare_dir(path: Path, overwrite: bool) -> None:
    if path.exists():
        if not overwrite:
            raise CheckpointExistsError(f"{path} already exists; pass --overwrite to replace it")
        shutil.rmtree(path)
    path.mkdir(parents=True)


def save_checkpoint(model, cfg: Config, path, overwrite: bool = False) -> Path:
    path = Path(path)
    _prepare_dir(path, overwrite)
    for name, array in model.state_dict().items():
        fdt.save(path / f"{name}.fdt", array)
    cfg.save(path / CONFIG_LOCK)
    return path


def load_checkpoint(path) -> tuple[FDCT, Config]:
    path = Path(path)
    if not (path / CONFIG_LOCK).exists() and (path / CHECKPOINT / CONFIG_LOCK).exists():
        path = path / CHECKPOINT
    cfg = Config.load(path / CONFIG_LOCK)
    model = FDCT(cfg.model_config())
    state = {}
    for name, _ in model.named_parameters():
        state[name] = fdt.load(path / f"{name}.fdt")
    model.load_state_dict(state)
    return model, cfg


# training

@dataclass
class RunResult:
    model: object
    losses: list[dict]
    report: MetricsReport
    seconds: float


def _epoch_seed(seed: int, epoch: int) -> int:
    return seed * 100_003 + epoch


def write_losses(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=("step",) + LOSS_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def train_fdct(cfg: Config, splits: dict[str, PairDataset], seed: int,
               weights: LossWeights | None = None, log_every: int = 0) -> RunResult:
    """Train from scratch and evaluate on the test split."""
    ts = cfg.train_settings()
    weights = weights or cfg.loss_weights()
    train = splits["train"]
    _check_classes(cfg, train)
    model = FDCT(cfg.model_config(), seed=seed)
    params = model.parameters()
    opt = AdamW(params, lr=ts.lr, weight_decay=ts.weight_decay)
    steps_per_epoch = -(-len(train) // ts.batch_size)
    total = ts.epochs * steps_per_epoch
    rows, step, start = [], 0, time.perf_counter()
    for epoch in range(ts.epochs):
        for batch in train.batches(ts.batch_size, shuffle=True, seed=_epoch_seed(seed, epoch)):
            try:
                br = model.loss(batch.vis, batch.ir, batch.labels, weights)
            except NumericError as exc:
                raise NumericError(f"step {step}: {exc}", where=exc.where) from exc
            opt.zero_grad()
            br.backward()
            clip_grad_norm(params, ts.clip)
            opt.lr = cosine_lr(step, total, ts.lr)
            opt.step()
            model.post_step()
            rows.append({"step": step, **br.row()})
            if log_every and step % log_every == 0:
                log.info("step %d/%d total %.4f ce %.4f", step, total, br.total, br.ce)
            step += 1
    report = evaluate(model, splits["test"], cfg["data.classes"], ts.batch_size)
    return RunResult(model, rows, report, time.perf_counter() - start)


def predict(model: FDCT, data: PairDataset, batch_size: int = 64, drop: str | None = None) -> np.ndarray:
    return np.concatenate([model.predict_logits(b.vis, b.ir, drop=drop)
                           for b in data.batches(batch_size, shuffle=False)])


def evaluate(model: FDCT, data: PairDataset, classes: int, batch_size: int = 64) -> MetricsReport:
    """Fusion metrics plus single-modality diagnostics (other pooled embedding zeroed)."""
    if data.num_classes > classes:
        raise ConfigError(f"split has {data.num_classes} classes, model has {classes}")
    diag = {}
    for name, drop in (("accuracy_visible_only", "infrared"), ("accuracy_infrared_only", "visible")):
        diag[name] = float(np.mean(np.argmax(predict(model, data, batch_size, drop), 1) == data.labels))
    return MetricsReport.from_logits(predict(model, data, batch_size), data.labels, classes, **diag)


def train_baseline(cfg: Config, splits: dict[str, PairDataset], modality: str, seed: int) -> RunResult:
    """Same optimizer, schedule, batches and seed as FDCT; one input stream."""
    if modality not in ("visible", "infrared"):
        raise ValueError(f"unknown modality {modality!r}")
    ts = cfg.train_settings()
    train = splits["train"]
    _check_classes(cfg, train)
    model = BaselineCNN(cfg["data.classes"], seed=seed)
    params = model.parameters()
    opt = AdamW(params, lr=ts.lr, weight_decay=ts.weight_decay)
    total = ts.epochs * -(-len(train) // ts.batch_size)
    pick = (lambda b: b.vis) if modality == "visible" else (lambda b: b.ir)
    rows, step, start = [], 0, time.perf_counter()
    for epoch in range(ts.epochs):
        for batch in train.batches(ts.batch_size, shuffle=True, seed=_epoch_seed(seed, epoch)):
            loss = model.loss(pick(batch), batch.labels)
            value = loss.item()
            if not np.isfinite(value):
                raise NumericError(f"step {step}: loss component 'ce' is not finite", where="ce")
            opt.zero_grad()
            loss.backward()
            clip_grad_norm(params, ts.clip)
            opt.lr = cosine_lr(step, total, ts.lr)
            opt.step()
            rows.append({"step": step, "ita": 0.0, "scma": 0.0, "cpa": 0.0, "decp": 0.0,
                         "ce": value, "total": value})
            step += 1
    test = splits["test"]
    logits = np.concatenate([model.predict_logits(pick(b)) for b in test.batches(64, shuffle=False)])
    report = MetricsReport.from_logits(logits, test.labels, cfg["data.classes"])
    return RunResult(model, rows, report, time.perf_counter() - start)


# commands

def cmd_train(cfg: Config, out_dir, seed: int | None = None, overwrite: bool = False,
              deterministic: bool = False, log_every: int = 0) -> RunResult:
    out = Path(out_dir)
    ckpt = out / CHECKPOINT
    if ckpt.exists() and not overwrite:
        raise CheckpointExistsError(f"{ckpt} already exists; pass --overwrite to replace it")
    seed = cfg.train_settings().seeds[0] if seed is None else seed
    with serial(deterministic):
        splits = load_splits(resolve_dataset(cfg, out))
        result = train_fdct(cfg, splits, seed, log_every=log_every)
    out.mkdir(parents=True, exist_ok=True)
    write_losses(out / "losses.csv", result.losses)
    result.report.write(out)
    save_checkpoint(result.model, cfg, ckpt, overwrite=overwrite)
    return result


def cmd_eval(checkpoint, split: str = "test", out_dir=None, data_path=None,
             deterministic: bool = False) -> MetricsReport:
    model, cfg = load_checkpoint(checkpoint)
    if data_path:
        cfg = cfg.replace(data__path=str(data_path))
    with serial(deterministic):
        manifest = resolve_dataset(cfg, Path(checkpoint).parent if not cfg["data.path"] else None)
        data = PairDataset.from_manifest(manifest, split)
        report = evaluate(model, data, cfg["data.classes"])
    if out_dir is not None:
        report.write(out_dir)
    return report


def cmd_baseline(cfg: Config, modality: str, out_dir, seed: int | None = None,
                 deterministic: bool = False) -> RunResult:
    out = Path(out_dir)
    seed = cfg.train_settings().seeds[0] if seed is None else seed
    with serial(deterministic):
        splits = load_splits(resolve_dataset(cfg, out))
        result = train_baseline(cfg, splits, modality, seed)
    out.mkdir(parents=True, exist_ok=True)
    write_losses(out / "losses.csv", result.losses)
    result.report.write(out)
    return result


def ablation_weights(base: LossWeights, drop: dict) -> LossWeights:
    return LossWeights(**{**base.as_dict(), **drop})


def cmd_ablate(cfg: Config, out_dir, seeds=None, deterministic: bool = False,
               configs=ABLATIONS, on_run=None) -> list[dict]:
    """Median test accuracy of each loss configuration over the seeds; writes ablation.csv."""
    out = Path(out_dir)
    seeds = tuple(seeds) if seeds else cfg.train_settings().seeds
    base = cfg.loss_weights()
    rows = []
    with serial(deterministic):
        splits = load_splits(resolve_dataset(cfg, out))
        for name, drop in configs:
            weights = ablation_weights(base, drop)
            accs = []
            for seed in seeds:
                result = train_fdct(cfg, splits, seed, weights)
                accs.append(result.report.accuracy)
                if on_run is not None:
                    on_run(name, seed, result)
            row = {"config": name, **weights.as_dict(), "median_accuracy": float(np.median(accs))}
            row.update({f"seed_{s}": a for s, a in zip(seeds, accs)})
            rows.append(row)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return rows
