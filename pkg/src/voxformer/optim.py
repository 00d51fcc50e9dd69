"""AdamW with decoupled weight decay, the warmup + step-decay schedule, and
the hyper-parameter grid."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


class OptimizerError(RuntimeError):
    pass


@dataclass(frozen=True)
class WarmupConfig:
    multiplier: float = 1.0
    total_epochs: int = 10


@dataclass(frozen=True)
class ScheduleConfig:
    base_lr: float
    step_size: int
    gamma: float
    warmup: WarmupConfig = field(default_factory=WarmupConfig)
    total_epochs: int = 100

    def __post_init__(self):
        if self.warmup.total_epochs > self.total_epochs:
            raise ValueError("warmup longer than the training run")
        if self.warmup.multiplier != 1.0:
            raise ValueError("only warmup multiplier 1 is defined")
        if self.step_size < 1:
            raise ValueError("step_size must be >= 1")


def lr_at(epoch: int, cfg: ScheduleConfig) -> float:
    """Learning rate for one epoch: linear ramp to base over the warmup
    epochs ((epoch+1)/warmup, so epoch 0 is nonzero), then geometric step
    decay whose clock starts when warmup ends."""
    if not 0 <= epoch < cfg.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.total_epochs})")
    w = cfg.warmup.total_epochs
    if epoch < w:
        return cfg.base_lr * (epoch + 1) / w
    return cfg.base_lr * cfg.gamma ** ((epoch - w) // cfg.step_size)


@dataclass(frozen=True)
class TrainConfig:
    """One grid point plus the fixed training-schema constants."""

    lr: float
    weight_decay: float
    step_size: int
    gamma: float
    total_epochs: int = 100
    warmup_epochs: int = 10
    batch_size: int = 1
    embed_dim: int = 512

    def schedule(self) -> ScheduleConfig:
        # runs shorter than the 10-epoch warmup compress the ramp to fit
        warmup = min(self.warmup_epochs, self.total_epochs)
        return ScheduleConfig(base_lr=self.lr, step_size=self.step_size,
                              gamma=self.gamma,
                              warmup=WarmupConfig(1.0, warmup),
                              total_epochs=self.total_epochs)

    def to_dict(self) -> dict:
        return {"lr": self.lr, "weight_decay": self.weight_decay,
                "step_size": self.step_size, "gamma": self.gamma,
                "total_epochs": self.total_epochs,
                "warmup_epochs": self.warmup_epochs,
                "batch_size": self.batch_size, "embed_dim": self.embed_dim}


@dataclass(frozen=True)
class GridSpec:
    """The searched hyper-parameter lists, in printed order."""

    lrs: tuple[float, ...] = (0.01, 0.001, 0.0001)
    weight_decays: tuple[float, ...] = (0.001, 0.0)
    step_sizes: tuple[int, ...] = (25, 40, 80)
    gammas: tuple[float, ...] = (0.3, 0.5, 0.9)


def grid_enumerate(spec: GridSpec = GridSpec(), **schema) -> list[TrainConfig]:
    """All combinations in deterministic lexicographic order over the lists."""
    return [TrainConfig(lr=lr, weight_decay=wd, step_size=ss, gamma=g, **schema)
            for lr, wd, ss, g in itertools.product(spec.lrs, spec.weight_decays,
                                                   spec.step_sizes, spec.gammas)]


class AdamW:
    """Decoupled weight decay Adam: theta -= lr * (mhat/(sqrt(vhat)+eps) + wd * theta)."""

    def __init__(self, params: dict[str, Tensor], lr: float,
                 weight_decay: float = 0.0, betas: tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8):
        self.params = dict(params)
        self.lr = float(lr)
        self.weight_decay = float(weight_decay)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                raise OptimizerError(f"parameter {name!r} has no gradient")
            if g.shape != p.data.shape:
                raise OptimizerError(f"parameter {name!r}: gradient shape {g.shape} "
                                     f"!= parameter shape {p.data.shape}")
            if not np.all(np.isfinite(g)):
                raise OptimizerError(f"non-finite gradient for parameter {name!r}")
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data -= (self.lr * update).astype(p.dtype)
