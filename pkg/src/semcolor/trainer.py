"""Loss, Adam training loop with early stopping, and checkpoint plumbing."""

from __future__ import annotations

import copy
import csv
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from semcolor.colorspace import ChromaMap
from semcolor.dataset import DatasetManifest, Sample, to_samples
from semcolor.eecnn import (
    ColorizationNet,
    EeCnnConfig,
    EmbeddingProvider,
    ModelWeights,
    build_network,
    embed_luminance,
    init_weights,
    load_checkpoint,
    pad_to_multiple,
    save_checkpoint,
    weights_from_network,
)
from semcolor.errors import DivergenceError, ShapeError

__all__ = [
    "EarlyStopping",
    "TrainConfig",
    "TrainReport",
    "load_checkpoint",
    "loss",
    "normalized_loss",
    "optimize_pair",
    "save_checkpoint",
    "train_eecnn",
    "train_on_samples",
]

log = logging.getLogger(__name__)


def loss(pred: ChromaMap, truth: ChromaMap) -> float:
    """Mean over pixels of the squared (A, B) distance, in AB units squared."""
    if pred.shape != truth.shape:
        raise ShapeError(f"prediction {pred.shape} vs truth {truth.shape}")
    diff = pred.stack() - truth.stack()
    h, w = pred.shape
    return float(np.sum(diff * diff) / (h * w))


def normalized_loss(pred: torch.Tensor, truth: torch.Tensor) -> torch.Tensor:
    """Same quantity on (N, 2, H, W) tensors, averaged over the batch."""
    if pred.shape != truth.shape:
        raise ShapeError(f"prediction {tuple(pred.shape)} vs truth {tuple(truth.shape)}")
    return ((pred - truth) ** 2).sum(dim=1).mean()


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 16
    max_epochs: int = 300
    patience: int = 10
    min_delta: float = 1e-4
    seed: int = 0
    checkpoint_every: int = 10
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        if min(self.learning_rate, self.batch_size, self.max_epochs, self.patience,
               self.checkpoint_every) <= 0:
            raise ValueError("learning rate, batch size, epochs, patience and checkpoint interval must be positive")
        if self.min_delta < 0:
            raise ValueError("min_delta must be >= 0")
        if self.patience >= self.max_epochs:
            raise ValueError("patience must be smaller than max_epochs")


@dataclass
class TrainReport:
    train_losses: list[float] = field(default_factory=list)
    val_losses: list[float] = field(default_factory=list)
    stopped_at_epoch: int = 0
    best_epoch: int = 0
    best_checkpoint_path: str | None = None

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["epoch", "train_loss", "val_loss"])
        for i, (tr, va) in enumerate(zip(self.train_losses, self.val_losses), start=1):
            writer.writerow([i, repr(tr), repr(va)])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        Path(path).write_text(self.to_csv(), encoding="utf-8")


class EarlyStopping:
    """Patience counter on a validation curve.

    The patience counter resets only on an improvement larger than
    ``min_delta``; ``best`` tracks the strict minimum so the weights kept are
    never worse than any recorded epoch.
    """

    def __init__(self, patience: int, min_delta: float = 0.0):
        self.patience = patience
        self.min_delta = min_delta
        self.best = float("inf")
        self.best_epoch = 0
        self._reference = float("inf")
        self._stale = 0
        self._epoch = 0

    def update(self, value: float) -> bool:
        """Record one epoch; return True if it is the new best."""
        self._epoch += 1
        if value < self._reference - self.min_delta:
            self._reference = value
            self._stale = 0
        else:
            self._stale += 1
        if value < self.best:
            self.best = value
            self.best_epoch = self._epoch
            return True
        return False

    @property
    def should_stop(self) -> bool:
        return self._stale >= self.patience


@dataclass
class _Prepared:
    l: torch.Tensor  # (N, 1, H8, W8), padded
    ab: torch.Tensor  # (N, 2, H, W), normalized
    emb: torch.Tensor | None
    size: tuple[int, int]


def _prepare(samples: Sequence[Sample], config: EeCnnConfig, provider) -> _Prepared:
    sizes = {s.l.shape for s in samples}
    if len(sizes) != 1:
        raise ShapeError(f"training samples must share one size, got {sorted(sizes)}")
    l = torch.as_tensor(np.stack([s.l for s in samples]) / 100.0, dtype=torch.float32)[:, None]
    l, size = pad_to_multiple(l)
    ab = np.stack([s.ab.stack().transpose(2, 0, 1) for s in samples]) / config.ab_scale
    emb = None
    if config.use_embedding:
        emb = torch.as_tensor(
            np.stack([embed_luminance(provider, s.l) for s in samples]), dtype=torch.float32
        )
    return _Prepared(l, torch.as_tensor(ab, dtype=torch.float32), emb, size)


def _predict(net: ColorizationNet, data: _Prepared, idx) -> torch.Tensor:
    h, w = data.size
    emb = None if data.emb is None else data.emb[idx]
    return net(data.l[idx], emb)[..., :h, :w]


def _evaluate(net: ColorizationNet, data: _Prepared, batch_size: int, scale2: float) -> float:
    n = data.l.shape[0]
    total = 0.0
    with torch.no_grad():
        for start in range(0, n, batch_size):
            idx = torch.arange(start, min(start + batch_size, n))
            total += float(normalized_loss(_predict(net, data, idx), data.ab[idx])) * len(idx)
    return total / n * scale2


def _check_provider(config: EeCnnConfig, provider) -> None:
    if config.use_embedding:
        if provider is None:
            raise ValueError("configuration uses an embedding but no provider was given")
        if provider.dim != config.embedding_dim:
            raise ShapeError(f"provider dim {provider.dim} != configured {config.embedding_dim}")


def train_on_samples(
    train: Sequence[Sample],
    val: Sequence[Sample],
    config: EeCnnConfig,
    tc: TrainConfig,
    provider: EmbeddingProvider | None,
    checkpoint_dir=None,
) -> tuple[ModelWeights, TrainReport]:
    """Adam on the AB loss; validation on ``val`` (or the train loss when empty)."""
    train = list(train)
    val = list(val)
    if not train:
        raise ValueError("training split is empty")
    _check_provider(config, provider)
    meta = {"provider": provider.name} if config.use_embedding else {}
    init = init_weights(config, tc.seed)
    net = build_network(init)
    net.train()
    tr_data = _prepare(train, config, provider)
    va_data = _prepare(val, config, provider) if val else None
    scale2 = config.ab_scale**2

    opt = torch.optim.Adam(net.parameters(), lr=tc.learning_rate, betas=tc.betas, eps=tc.eps)
    rng = np.random.default_rng(tc.seed)
    stopper = EarlyStopping(tc.patience, tc.min_delta)
    report = TrainReport()
    best_state = copy.deepcopy(net.state_dict())
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ckpt_dir is not None:
        ckpt_dir.mkdir(parents=True, exist_ok=True)

    n = len(train)
    step = 0
    for epoch in range(1, tc.max_epochs + 1):
        order = rng.permutation(n)
        running = 0.0
        for start in range(0, n, tc.batch_size):
            idx = torch.as_tensor(order[start : start + tc.batch_size])
            batch_loss = normalized_loss(_predict(net, tr_data, idx), tr_data.ab[idx])
            if not torch.isfinite(batch_loss):
                raise DivergenceError(
                    f"non-finite loss at epoch {epoch}, step {step}", epoch=epoch, step=step
                )
            opt.zero_grad()
            batch_loss.backward()
            opt.step()
            running += float(batch_loss.detach()) * len(idx)
            step += 1
        train_loss = running / n * scale2
        val_loss = _evaluate(net, va_data, tc.batch_size, scale2) if va_data else train_loss
        report.train_losses.append(train_loss)
        report.val_losses.append(val_loss)
        log.info("epoch %d train %.4f val %.4f", epoch, train_loss, val_loss)

        if stopper.update(val_loss):
            best_state = copy.deepcopy(net.state_dict())
            report.best_epoch = epoch
            if ckpt_dir is not None:
                path = ckpt_dir / "best.ckpt"
                save_checkpoint(_weights(net, best_state, meta, epoch), path)
                report.best_checkpoint_path = str(path)
        if ckpt_dir is not None and epoch % tc.checkpoint_every == 0:
            save_checkpoint(_weights(net, net.state_dict(), meta, epoch), ckpt_dir / f"epoch-{epoch:04d}.ckpt")
        report.stopped_at_epoch = epoch
        if stopper.should_stop:
            log.info("early stop at epoch %d (best %d)", epoch, stopper.best_epoch)
            break

    return _weights(net, best_state, meta, report.best_epoch), report


def _weights(net, state, meta, epoch) -> ModelWeights:
    snapshot = ColorizationNet(net.config)
    snapshot.load_state_dict(state)
    return weights_from_network(snapshot, {**meta, "epoch": epoch})


def train_eecnn(
    manifest: DatasetManifest,
    config: EeCnnConfig,
    tc: TrainConfig,
    provider: EmbeddingProvider | None,
    checkpoint_dir=None,
) -> tuple[ModelWeights, TrainReport]:
    train = list(to_samples(manifest, "train"))
    val = list(to_samples(manifest, "test"))
    return train_on_samples(train, val, config, tc, provider, checkpoint_dir)


def optimize_pair(
    net: ColorizationNet,
    l: torch.Tensor,
    ab: torch.Tensor,
    emb: torch.Tensor | None,
    *,
    steps: int,
    lr: float,
    threshold: float,
    ab_scale: float,
) -> tuple[float, int, bool]:
    """Fit ``net`` to one (L, AB) pair with Adam.

    ``l`` is the unpadded (1, 1, H, W) luminance in [0, 1], ``ab`` the
    normalized target. Stops once the loss (AB units squared) drops below
    ``threshold``. Returns (final loss, steps taken, converged).
    """
    if steps < 1:
        raise ValueError("fit budget must be at least one step")
    padded, (h, w) = pad_to_multiple(l)
    scale2 = ab_scale**2
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    net.train()
    taken = 0
    for step in range(steps):
        current = normalized_loss(net(padded, emb)[..., :h, :w], ab)
        if not torch.isfinite(current):
            raise DivergenceError(f"non-finite loss at step {step}", step=step)
        value = float(current.detach()) * scale2
        if value < threshold:
            return value, taken, True
        opt.zero_grad()
        current.backward()
        opt.step()
        taken += 1
    with torch.no_grad():
        final = float(normalized_loss(net(padded, emb)[..., :h, :w], ab)) * scale2
    if not np.isfinite(final):
        raise DivergenceError(f"non-finite loss at step {steps}", step=steps)
    return final, taken, final < threshold
