"""Supervised training for the shape and phase heads.

Fixed-epoch regimen: per epoch a fresh seeded shuffle, mini-batches of 256
through cross-entropy + Adam, then a validation pass. No early stopping -
the epoch budget is part of the configuration and the recorded history
makes divergence visible instead.
"""

import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autograd as ag
from . import model as md
from .fields import mix64


class NonFiniteLossError(RuntimeError):
    def __init__(self, epoch: int, batch: int, value: float):
        super().__init__(f"non-finite loss {value} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


@dataclass
class TrainConfig:
    head: str = "shape"
    epochs: int = 10
    batch_size: int = 256
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    validation_count: int | None = None  # default: dataset size // 9

    def validate(self) -> None:
        if self.head not in ("shape", "phase"):
            raise ValueError(f"head must be shape or phase, got {self.head!r}")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float
    seconds: float


@dataclass
class TrainHistory:
    entries: list[EpochStats] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"schema_version": 1,
                "entries": [asdict(e) for e in self.entries]}

    @property
    def train_losses(self) -> list[float]:
        return [e.train_loss for e in self.entries]

    @property
    def val_losses(self) -> list[float]:
        return [e.val_loss for e in self.entries]


def split_dataset(dataset, validation_count: int, seed: int):
    """Disjoint seeded split; returns (train_idx, val_idx) covering the
    dataset exactly once."""
    n = len(dataset)
    if validation_count < 1:
        raise ValueError("validation_count must be >= 1")
    if validation_count >= n:
        raise ValueError(f"validation_count {validation_count} >= dataset size {n}")
    perm = np.random.Generator(np.random.PCG64(seed)).permutation(n)
    return perm[validation_count:], perm[:validation_count]


def _normalize_batch(patterns: np.ndarray) -> np.ndarray:
    p = np.asarray(patterns, dtype=np.float32)
    m = p.max(axis=(1, 2), keepdims=True)
    return np.divide(p, m, out=np.zeros_like(p), where=m > 0)


def _targets(dataset, head: str):
    return dataset.shapes if head == "shape" else dataset.phases


def validate(net: md.Network, dataset, indices=None, batch_size: int = 256) -> float:
    """Mean cross-entropy over a validation set; weights untouched."""
    idx = np.arange(len(dataset)) if indices is None else np.asarray(indices)
    if len(idx) == 0:
        raise ValueError("validation set is empty")
    targets = _targets(dataset, net.spec.head)
    total, count = 0.0, 0
    for s in range(0, len(idx), batch_size):
        chunk = idx[s:s + batch_size]
        pred = md.forward_batch(net, dataset.patterns[chunk])
        total += ag.bce_value(pred, targets[chunk]) * len(chunk)
        count += len(chunk)
    return total / count


def _graph_forward(spec: md.NetworkSpec, wts, x: ag.Tensor) -> ag.Tensor:
    param_i = 0
    for l in spec.layers:
        if l.kind == "conv":
            w, b = wts[param_i]
            param_i += 1
            x = ag.conv2d(x, w, b)
            x = ag.relu(x) if l.activation == "relu" else ag.sigmoid(x)
        elif l.kind == "pool":
            x = ag.maxpool2(x)
        else:
            x = ag.upsample2(x)
    return x


def train(config: TrainConfig, dataset, progress=None):
    """Train one head on a dataset; returns (Network, TrainHistory).

    The run is fully determined by (config, dataset): the validation split,
    weight init and every epoch's shuffle derive from ``config.seed``.
    ``progress(epoch, stats)`` is called after each epoch. A NaN/Inf batch
    loss aborts with its (epoch, batch) coordinates.
    """
    config.validate()
    n = len(dataset)
    if n == 0:
        raise ValueError("dataset is empty")
    val_count = config.validation_count
    if val_count is None:
        val_count = max(1, n // 9)
    train_idx, val_idx = split_dataset(dataset, val_count, mix64(config.seed, 1))

    net = md.build_cdinn(config.head, seed=mix64(config.seed, 2),
                         grid_n=dataset.grid_n if hasattr(dataset, "grid_n") else 32)
    wts = [(ag.Tensor(w), ag.Tensor(b)) for w, b in net.params]
    flat_params = [t for pair in wts for t in pair]
    opt = ag.Adam(flat_params, lr=config.lr, beta1=config.beta1,
                  beta2=config.beta2, eps=config.eps)
    targets = _targets(dataset, config.head)

    history = TrainHistory()
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        order = np.random.Generator(
            np.random.PCG64(mix64(config.seed, 1000 + epoch))).permutation(train_idx)
        loss_sum, seen = 0.0, 0
        for bi, s in enumerate(range(0, len(order), config.batch_size)):
            idx = order[s:s + config.batch_size]
            x = ag.Tensor(_normalize_batch(dataset.patterns[idx])[None],
                          requires_grad=False)
            pred = _graph_forward(net.spec, wts, x)
            loss = ag.bce_loss(pred, np.asarray(targets[idx])[None])
            value = float(loss.data)
            if not np.isfinite(value):
                raise NonFiniteLossError(epoch, bi, value)
            opt.zero_grad()
            ag.backward(loss)
            opt.step()
            loss_sum += value * len(idx)
            seen += len(idx)
        train_loss = loss_sum / seen
        val_loss = validate(net, dataset, val_idx, config.batch_size)
        stats = EpochStats(epoch=epoch, train_loss=train_loss,
                           val_loss=val_loss,
                           seconds=time.perf_counter() - t0)
        history.entries.append(stats)
        if progress is not None:
            progress(epoch, stats)

    net.provenance.update({
        "head": config.head,
        "seed": config.seed,
        "epochs": config.epochs,
        "batch_size": config.batch_size,
        "lr": config.lr,
        "train_count": int(len(train_idx)),
        "validation_count": int(len(val_idx)),
        "final_train_loss": history.entries[-1].train_loss,
        "final_val_loss": history.entries[-1].val_loss,
    })
    return net, history
