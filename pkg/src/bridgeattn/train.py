"""Toy-scale training and evaluation.

Everything is a pure function of (config, seed, input files): parameter
init, batch order, and noise all come from one seeded generator, and the
batch order is fixed across epochs so a zero-learning-rate run is exactly
stationary. Metrics are emitted as ``epoch,loss,acc`` lines.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, asdict

import numpy as np

from .attention import AttentionConfig, PoolingStrategy
from .autodiff import NonFiniteError, Tensor, logsumexp
from .datasets import Dataset, load_cifar10, synth_dataset
from .models import build_model
from .nn import Module

__all__ = [
    "TrainConfig",
    "TrainResult",
    "TrainingDiverged",
    "SGD",
    "Adam",
    "cross_entropy",
    "train",
    "evaluate",
    "save_weights",
    "load_weights",
    "build_model_from_config",
    "resolve_dataset",
]

PRECISION_ENV_VAR = "BRIDGEATTN_PRECISION"


class TrainingDiverged(RuntimeError):
    """Loss went non-finite; carries the epoch/batch where it happened."""


@dataclass
class TrainConfig:
    model: str = "toy2"
    attention: str = "bav2"        # "none" | "se" | "bav1" | "bav2"
    r: int = 8
    pooling: str = "avg"
    dct_components: int = 16
    sources: list | None = None    # bridge taps; None = block defaults
    bypass: bool = False
    integration: str | None = "ba_mlp"   # transformer models only
    optimizer: str = "sgd"         # "sgd" (momentum 0.9) | "adam"
    lr: float = 0.01
    epochs: int = 50
    batch_size: int = 32
    seed: int = 0
    precision: int = 32
    dataset: dict = field(default_factory=lambda: {
        "kind": "synthetic", "n": 256, "classes": 4, "size": 8,
    })

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    metrics: list[str]             # "epoch,loss,acc" lines
    final_eval_accuracy: float
    model: Module
    dataset: Dataset


class SGD:
    """Stochastic gradient descent with classical momentum."""

    def __init__(self, params, lr: float, momentum: float = 0.9):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            v *= self.momentum
            v += p.grad
            p.data -= (self.lr * v).astype(p.data.dtype, copy=False)


class Adam:
    """Adam with the standard defaults beta=(0.9, 0.999), eps 1e-8."""

    def __init__(self, params, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            m *= b1
            m += (1 - b1) * p.grad
            v *= b2
            v += (1 - b2) * p.grad ** 2
            mhat = m / (1 - b1 ** self.t)
            vhat = v / (1 - b2 ** self.t)
            step = self.lr * mhat / (np.sqrt(vhat) + self.eps)
            p.data -= step.astype(p.data.dtype, copy=False)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of the correct class."""
    return (logsumexp(logits, axis=1) - logits.gather_rows(labels)).mean()


def resolve_dataset(spec: dict, dtype=np.float64) -> Dataset:
    kind = spec.get("kind", "synthetic")
    if kind == "synthetic":
        return synth_dataset(
            seed=spec.get("seed", 0),
            n=spec.get("n", 256),
            classes=spec.get("classes", 4),
            size=spec.get("size", 8),
            dtype=dtype,
        )
    if kind == "cifar10":
        return load_cifar10(spec["path"], dtype=dtype)
    raise ValueError(f"unknown dataset kind {kind!r}")


def build_model_from_config(cfg: TrainConfig, classes: int,
                            dtype=np.float64) -> Module:
    if cfg.attention == "none":
        attn = None
    else:
        attn = AttentionConfig(
            variant=cfg.attention,
            r=cfg.r,
            pooling=PoolingStrategy(cfg.pooling, cfg.dct_components),
            sources=tuple(cfg.sources) if cfg.sources is not None else None,
        )
    model = build_model(cfg.model, classes=classes, attention=attn,
                        integration=cfg.integration, seed=cfg.seed, dtype=dtype)
    if cfg.bypass:
        model.set_attention_bypass(True)
    return model


def _make_optimizer(cfg: TrainConfig, params):
    if cfg.optimizer == "sgd":
        return SGD(params, cfg.lr, momentum=0.9)
    if cfg.optimizer == "adam":
        return Adam(params, cfg.lr)
    raise ValueError(f"unknown optimizer {cfg.optimizer!r}")


def default_precision(subcommand: str = "train") -> int:
    """Training defaults to 32-bit unless the environment says otherwise;
    every other path runs at 64-bit."""
    if subcommand != "train":
        return 64
    return int(os.environ.get(PRECISION_ENV_VAR, "32"))


def train(cfg: TrainConfig) -> TrainResult:
    dtype = np.float64 if cfg.precision == 64 else np.float32
    dataset = resolve_dataset(cfg.dataset, dtype=dtype)
    model = build_model_from_config(cfg, dataset.classes, dtype=dtype)
    optimizer = _make_optimizer(cfg, model.parameters())

    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(len(dataset))
    batches = [order[i:i + cfg.batch_size]
               for i in range(0, len(dataset), cfg.batch_size)]

    lines = []
    for epoch in range(cfg.epochs):
        model.train()
        loss_sum = 0.0
        correct = 0
        for bi, idx in enumerate(batches):
            x = Tensor(dataset.images[idx])
            y = dataset.labels[idx]
            try:
                logits = model(x)
                loss = cross_entropy(logits, y)
            except NonFiniteError as exc:
                raise TrainingDiverged(
                    f"non-finite value at epoch {epoch}, batch {bi}: {exc}"
                ) from exc
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDiverged(
                    f"loss diverged at epoch {epoch}, batch {bi}"
                )
            model.zero_grad()
            loss.backward()
            optimizer.step()
            loss_sum += value * len(idx)
            correct += int((np.argmax(logits.data, axis=1) == y).sum())
        lines.append(
            f"{epoch},{loss_sum / len(dataset):.6f},{correct / len(dataset):.4f}"
        )
    final = evaluate(model, dataset, batch_size=cfg.batch_size)
    return TrainResult(metrics=lines, final_eval_accuracy=final,
                       model=model, dataset=dataset)


def evaluate(model: Module, dataset: Dataset, batch_size: int = 64) -> float:
    """Top-1 accuracy in eval mode; argmax ties break to the lowest index."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    was_training = model.training
    model.eval()
    correct = 0
    try:
        for i in range(0, len(dataset), batch_size):
            x = Tensor(dataset.images[i:i + batch_size])
            y = dataset.labels[i:i + batch_size]
            pred = np.argmax(model(x).data, axis=1)
            correct += int((pred == y).sum())
    finally:
        model.train(was_training)
    return correct / len(dataset)


def save_weights(model: Module, path) -> None:
    np.savez(path, **model.state_dict())


def load_weights(model: Module, path) -> None:
    with np.load(path) as archive:
        model.load_state_dict({k: archive[k] for k in archive.files})
