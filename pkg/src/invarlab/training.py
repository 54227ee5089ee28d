"""Training loops for classifiers and same/different networks.

Both loops use Adam and stop once the exponential moving average of the
batch loss has failed to improve on its best value by ``stop_min_decrease``
for ``stop_patience_iters`` consecutive iterations.
"""

from __future__ import annotations

import csv
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import torch
from torch import nn

from invarlab.datasets import (
    DEFAULT_STATS,
    NormalizationStats,
    SampleManifest,
    StimulusBank,
    make_class_batch,
    make_pair_batch,
    normalize,
)
from invarlab.errors import ConfigError, IoError, TrainingDivergedError
from invarlab.models import ClassifierNet, SameDiffNet, build_model, to_tensor
from invarlab.transforms import TransformKind, TransformRanges, as_kind

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 64
    ema_alpha: float = 0.1
    stop_min_decrease: float = 0.01
    stop_patience_iters: int = 250
    max_iters: int = 20_000
    seed: int = 0
    p_same: float = 0.5

    def __post_init__(self):
        if not 0 < self.ema_alpha <= 1:
            raise ConfigError("ema_alpha must lie in (0, 1]")
        for name in ("learning_rate", "batch_size", "stop_patience_iters", "max_iters"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.stop_min_decrease < 0:
            raise ConfigError("stop_min_decrease must be non-negative")

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TrainConfig":
        return cls(**d)


def ema_update(prev: float | None, x: float, alpha: float) -> float:
    """``alpha * x + (1 - alpha) * prev``; a missing ``prev`` seeds the average with ``x``."""
    if prev is None:
        return float(x)
    return alpha * x + (1.0 - alpha) * prev


class PlateauStopper:
    """Incremental form of :func:`should_stop`."""

    def __init__(self, min_decrease: float = 0.01, patience: int = 250):
        if patience < 1:
            raise ConfigError("patience must be >= 1")
        self.min_decrease = min_decrease
        self.patience = patience
        self.best: float | None = None
        self.stale = 0

    def update(self, ema: float) -> bool:
        if self.best is None or ema < self.best - self.min_decrease:
            self.best = ema
            self.stale = 0
        else:
            self.stale += 1
        return self.stale >= self.patience


def should_stop(ema_history: Sequence[float], min_decrease: float = 0.01, patience: int = 250) -> bool:
    """True iff the last ``patience`` EMA values all failed to beat ``best - min_decrease``.

    ``best`` is the lowest EMA at which an improvement was last registered.
    """
    stopper = PlateauStopper(min_decrease, patience)
    stop = False
    for v in ema_history:
        stop = stopper.update(v)
    return stop


@dataclass
class TrainHistory:
    loss: list[float] = field(default_factory=list)
    ema_loss: list[float] = field(default_factory=list)
    accuracy: list[float] = field(default_factory=list)
    stop_reason: str = "max_iters"

    @property
    def iterations(self) -> int:
        return len(self.loss)

    def to_csv(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iter", "loss", "ema_loss", "accuracy"])
            for i, row in enumerate(zip(self.loss, self.ema_loss, self.accuracy), start=1):
                w.writerow([i, *(repr(float(v)) for v in row)])

    @classmethod
    def from_csv(cls, path: str | os.PathLike, stop_reason: str = "unknown") -> "TrainHistory":
        h = cls(stop_reason=stop_reason)
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                h.loss.append(float(row["loss"]))
                h.ema_loss.append(float(row["ema_loss"]))
                h.accuracy.append(float(row["accuracy"]))
        return h


def pair_loss(y_hat: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Summed squared error between dissimilarity scores and 1{different}."""
    return ((y_hat - targets.to(y_hat.dtype)) ** 2).sum()


class Preprocessor:
    """Turns records into normalized network input."""

    def __init__(self, bank: StimulusBank, stats: NormalizationStats = DEFAULT_STATS):
        self.bank = bank
        self.stats = stats

    def __call__(self, records) -> np.ndarray:
        return normalize(self.bank.images(records), self.stats)


def _check_finite(loss: torch.Tensor, it: int) -> None:
    if not torch.isfinite(loss):
        raise TrainingDivergedError(f"non-finite loss at iteration {it}")


def _fit(net: nn.Module, cfg: TrainConfig, step) -> TrainHistory:
    torch.manual_seed(cfg.seed)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.learning_rate, betas=(0.9, 0.999), eps=1e-8)
    stopper = PlateauStopper(cfg.stop_min_decrease, cfg.stop_patience_iters)
    hist = TrainHistory()
    ema = None
    net.train()
    for it in range(1, cfg.max_iters + 1):
        loss, acc = step()
        _check_finite(loss, it)
        opt.zero_grad()
        loss.backward()
        opt.step()
        value = float(loss.detach())
        ema = ema_update(ema, value, cfg.ema_alpha)
        hist.loss.append(value)
        hist.ema_loss.append(ema)
        hist.accuracy.append(acc)
        if stopper.update(ema):
            hist.stop_reason = "converged"
            break
        if it % 200 == 0:
            log.info("iter %d loss %.4f ema %.4f acc %.3f", it, value, ema, acc)
    net.eval()
    return hist


def train_supervised(
    net: ClassifierNet,
    manifest: SampleManifest,
    kind: str | TransformKind,
    cfg: TrainConfig,
    bank: StimulusBank | None = None,
    stats: NormalizationStats = DEFAULT_STATS,
    ranges: TransformRanges | None = None,
    checkpoint_dir: str | os.PathLike | None = None,
) -> tuple[ClassifierNet, TrainHistory]:
    """Cross-entropy training on batches transformed on the fly."""
    kind = as_kind(kind)
    if len(manifest.classes) != net.num_classes:
        raise ConfigError(f"manifest has {len(manifest.classes)} classes, net expects {net.num_classes}")
    bank = bank or StimulusBank()
    ranges = ranges or TransformRanges()
    prep = Preprocessor(bank, stats)
    rng = np.random.default_rng(cfg.seed)
    ce = nn.CrossEntropyLoss()

    def step():
        records, labels = make_class_batch(manifest, cfg.batch_size, rng, kind, ranges, bank)
        logits = net(to_tensor(prep(records), net))
        y = torch.from_numpy(labels)
        acc = float((logits.argmax(1) == y).double().mean())
        return ce(logits, y), acc

    hist = _fit(net, cfg, step)
    if checkpoint_dir is not None:
        save_checkpoint(net, checkpoint_dir, {"train_transform": kind.value, "seed": cfg.seed,
                                              "iterations": hist.iterations}, hist)
    return net, hist


def train_samediff(
    net: SameDiffNet,
    manifest: SampleManifest,
    kind: str | TransformKind,
    cfg: TrainConfig,
    bank: StimulusBank | None = None,
    stats: NormalizationStats = DEFAULT_STATS,
    ranges: TransformRanges | None = None,
    checkpoint_dir: str | os.PathLike | None = None,
) -> tuple[SameDiffNet, TrainHistory]:
    """Minimize the pair loss on same/different batches drawn on the fly.

    The recorded loss is the per-pair mean so the stopping threshold does not
    depend on the batch size.
    """
    kind = as_kind(kind)
    bank = bank or StimulusBank()
    ranges = ranges or TransformRanges()
    prep = Preprocessor(bank, stats)
    rng = np.random.default_rng(cfg.seed)

    def step():
        batch = make_pair_batch(manifest, cfg.p_same, cfg.batch_size, rng, kind, ranges, bank)
        x = to_tensor(prep(batch.first + batch.second), net)
        z = net.embed(x)
        n = len(batch)
        y_hat = net.score(z[:n], z[n:])
        t = torch.from_numpy(batch.targets)
        acc = float(((y_hat > 0.5).long() == t).double().mean())
        return pair_loss(y_hat, t) / n, acc

    hist = _fit(net, cfg, step)
    if checkpoint_dir is not None:
        save_checkpoint(net, checkpoint_dir, {"train_transform": kind.value, "seed": cfg.seed,
                                              "iterations": hist.iterations}, hist)
    return net, hist


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(
    net: ClassifierNet | SameDiffNet,
    directory: str | os.PathLike,
    meta: dict[str, Any] | None = None,
    history: TrainHistory | None = None,
) -> Path:
    """Write ``model.ckpt`` (state dict) and ``meta.json``; also ``history.csv`` if given."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    torch.save(net.state_dict(), d / "model.ckpt")
    info = {
        "architecture": net.arch,
        "role": net.role,
        "K": getattr(net, "num_classes", None),
        **(meta or {}),
    }
    if history is not None:
        info["stop_reason"] = history.stop_reason
        info.setdefault("iterations", history.iterations)
        history.to_csv(d / "history.csv")
    (d / "meta.json").write_text(json.dumps(info, indent=2, sort_keys=True))
    return d


def load_checkpoint(directory: str | os.PathLike) -> tuple[ClassifierNet | SameDiffNet, dict[str, Any]]:
    d = Path(directory)
    if not (d / "model.ckpt").is_file() or not (d / "meta.json").is_file():
        raise IoError(f"no checkpoint in {d}")
    meta = json.loads((d / "meta.json").read_text())
    net = build_model(meta["architecture"], meta["role"], meta.get("K"), seed=0)
    net.load_state_dict(torch.load(d / "model.ckpt", weights_only=True))
    return net.eval(), meta
