"""Seeded training and evaluation loops over split manifests.

All randomness (init, dropout, epoch shuffles) derives from one run seed;
two runs with identical inputs produce byte-identical metrics logs and
checkpoints.  Input normalization statistics come from the train side of
the split only (late-split guard).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data as D
from . import models as M
from .nn import cross_entropy
from .optim import AdamW, TrainConfig, lr_at
from .tensor import Tensor, no_grad

CHECKPOINT_NAME = "best.ckpt"
METRICS_NAME = "metrics.jsonl"


@dataclass(frozen=True)
class RunConfig:
    model: str = "convnet3d4"
    size: str = "tiny"
    norm: str = "in"
    train: TrainConfig = field(default_factory=lambda: TrainConfig(0.001, 0.001, 25, 0.3))
    seed: int = 0
    pool_stride: int | None = None      # None = auto: 3 when extents allow, else 2
    target_accuracy: float | None = None

    def to_dict(self) -> dict:
        return {"model": self.model, "size": self.size, "norm": self.norm,
                "train": self.train.to_dict(), "seed": self.seed,
                "pool_stride": self.pool_stride,
                "target_accuracy": self.target_accuracy}


def resolve_pool_stride(extents: tuple[int, int, int], requested: int | None) -> int:
    """Pick the ConvNet3D4 pool stride: the full-size default 3 when the four
    pools fit the extents, otherwise 2 (minimum viable extent is 31)."""
    if requested is not None:
        return int(requested)
    for stride in (3, 2):
        try:
            M.shape_infer(M.build_config("convnet3d4", extents=extents, pool_stride=stride))
            return stride
        except M.ShapeUnderflowError:
            continue
    raise M.ShapeUnderflowError("block4.pool",
                                f"extents {extents} underflow even at pool stride 2")


@dataclass
class LoadedDataset:
    extents: tuple[int, int, int]
    train_volumes: np.ndarray       # [n_train, D, H, W]
    train_labels: np.ndarray
    test_volumes: np.ndarray
    test_labels: np.ndarray
    stats: tuple[float, float]      # train-set mean/std used to normalize both sides


def train_statistics(volumes: np.ndarray) -> tuple[float, float]:
    """Scalar normalization stats; must only ever see the train side."""
    return float(volumes.mean()), float(volumes.std() + 1e-8)


def load_dataset(data_dir, split: D.SplitSpec) -> LoadedDataset:
    records = D.read_manifest(Path(data_dir) / D.MANIFEST_NAME)
    train_recs, test_recs = D.split_records(records, split)

    def load(recs):
        vols = np.stack([D.load_record_volume(data_dir, r) for r in recs])
        labels = np.array([D.LABELS.index(r.label) for r in recs], dtype=np.int64)
        return vols, labels

    train_volumes, train_labels = load(train_recs)
    test_volumes, test_labels = (load(test_recs) if test_recs
                                 else (np.zeros((0,) + train_volumes.shape[1:],
                                                np.float32), np.zeros(0, np.int64)))
    mean, std = train_statistics(train_volumes)
    train_volumes = (train_volumes - mean) / std
    if len(test_volumes):
        test_volumes = (test_volumes - mean) / std
    return LoadedDataset(extents=train_volumes.shape[1:],
                         train_volumes=train_volumes.astype(np.float32),
                         train_labels=train_labels,
                         test_volumes=test_volumes.astype(np.float32),
                         test_labels=test_labels, stats=(mean, std))


def evaluate(model, volumes: np.ndarray, labels: np.ndarray,
             batch_size: int = 1) -> tuple[float, dict]:
    """Accuracy and per-class confusion counts (rows true, columns predicted)."""
    model.eval()
    confusion = {a: {b: 0 for b in D.LABELS} for a in D.LABELS}
    if len(volumes) == 0:
        return 0.0, confusion
    preds = []
    with no_grad():
        for i in range(0, len(volumes), batch_size):
            x = Tensor(volumes[i:i + batch_size][:, None])
            preds.append(model(x).data.argmax(axis=-1))
    preds = np.concatenate(preds)
    for t, p in zip(labels, preds):
        confusion[D.LABELS[t]][D.LABELS[p]] += 1
    return float((preds == labels).mean()), confusion


def run_training(run: RunConfig, data_dir, out_dir) -> list[dict]:
    """Train per the run config; writes metrics.jsonl and the best checkpoint.

    Returns the metric rows.  A zero-epoch run emits the initial evaluation
    only and writes no checkpoint.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    split = D.SplitSpec.from_json((Path(data_dir) / D.SPLIT_NAME).read_text())
    ds = load_dataset(data_dir, split)

    pool_stride = (resolve_pool_stride(ds.extents, run.pool_stride)
                   if run.model == "convnet3d4" else run.pool_stride)
    cfg = M.build_config(run.model, run.size, run.norm, ds.extents, pool_stride)
    M.shape_infer(cfg)
    # streams 0 and 1 of this seed belong to the model (init, dropout)
    model = M.build_model(cfg, seed=run.seed)
    shuffle_rng = np.random.default_rng(np.random.SeedSequence(run.seed).spawn(3)[2])

    tc = run.train
    sched = tc.schedule()
    opt = AdamW(dict(model.named_parameters()), lr=tc.lr, weight_decay=tc.weight_decay)

    ckpt_config = {"model_config": M.config_to_dict(cfg), "run": run.to_dict(),
                   "normalization": {"mean": ds.stats[0], "std": ds.stats[1]},
                   "labels": list(D.LABELS)}
    metrics_path = out / METRICS_NAME
    rows: list[dict] = []

    def emit(row: dict) -> None:
        rows.append(row)
        with open(metrics_path, "a") as f:
            f.write(json.dumps(row, sort_keys=True) + "\n")

    metrics_path.write_text("")
    emit({"event": "config", **ckpt_config["run"],
          "model_config": ckpt_config["model_config"],
          "normalization": ckpt_config["normalization"]})

    test_acc, _ = evaluate(model, ds.test_volumes, ds.test_labels, tc.batch_size)
    emit({"event": "init", "test_acc": test_acc})

    best_acc = -1.0
    n_train = len(ds.train_volumes)
    for epoch in range(tc.total_epochs):
        lr = lr_at(epoch, sched)
        opt.lr = lr
        model.train()
        order = shuffle_rng.permutation(n_train)
        losses = []
        correct = 0
        for i in range(0, n_train, tc.batch_size):
            idx = order[i:i + tc.batch_size]
            x = Tensor(ds.train_volumes[idx][:, None])
            y = ds.train_labels[idx]
            logits = model(x)
            loss = cross_entropy(logits, y)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
            correct += int((logits.data.argmax(axis=-1) == y).sum())
        test_acc, confusion = evaluate(model, ds.test_volumes, ds.test_labels, tc.batch_size)
        emit({"event": "epoch", "epoch": epoch, "lr": lr,
              "train_loss": float(np.mean(losses)),
              "train_acc": correct / n_train,
              "test_acc": test_acc})
        if test_acc > best_acc:
            best_acc = test_acc
            M.save_checkpoint(out / CHECKPOINT_NAME, model, ckpt_config)
        if run.target_accuracy is not None and test_acc >= run.target_accuracy:
            break
    emit({"event": "done", "best_test_acc": best_acc if best_acc >= 0 else None,
          "epochs_run": sum(1 for r in rows if r.get("event") == "epoch")})
    return rows


def load_model_from_checkpoint(path):
    """Rebuild the model and its normalization stats from a checkpoint."""
    config, arrays = M.load_checkpoint(path)
    cfg = M.config_from_dict(config["model_config"])
    model = M.build_model(cfg, seed=config["run"]["seed"])
    model.load_state(arrays)
    model.eval()
    return model, config
