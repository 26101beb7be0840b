"""SGD training with plateau-driven learning-rate drops."""

from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np

from .. import rng as rngmod
from ..autodiff import EVAL, TRAIN, NonFiniteError, backward, save_checkpoint, sgd_step
from ..concepts import ConceptHierarchy
from ..data import OCCLUSION_TYPES, Dataset
from .model import Network, forward, total_loss

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 50
    epochs: int = 20
    seed: int = 0
    quotas: Optional[dict[str, int]] = None
    patience: int = 5
    plateau_rel: float = 1e-3
    max_drops: int = 3
    lr_factor: float = 0.1
    checkpoint_path: Optional[str] = None

    def __post_init__(self):
        if self.quotas is not None:
            unknown = set(self.quotas) - set(OCCLUSION_TYPES)
            if unknown:
                raise ValueError(f"unknown occlusion types in quotas: {sorted(unknown)}")
            if sum(self.quotas.values()) != self.batch_size:
                raise ValueError(f"quotas {self.quotas} do not sum to batch size {self.batch_size}")


class PlateauDetector:
    """Signals a plateau after ``patience`` epochs without a new minimum.

    A value counts as a new minimum only if it improves the best so far by more
    than ``rel`` relative.
    """

    def __init__(self, patience: int = 5, rel: float = 1e-3):
        self.patience = patience
        self.rel = rel
        self.best = math.inf
        self.bad = 0

    def update(self, value: float) -> bool:
        if value < self.best - self.rel * abs(self.best) or self.best == math.inf:
            self.best = value
            self.bad = 0
            return False
        self.bad += 1
        if self.bad >= self.patience:
            self.bad = 0
            return True
        return False


@dataclass
class History:
    rows: list[dict] = field(default_factory=list)
    lr_drops: list[int] = field(default_factory=list)
    steps: int = 0

    def write_csv(self, path: str | os.PathLike) -> None:
        if not self.rows:
            return
        keys = list(self.rows[0])
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(keys)
            for r in self.rows:
                w.writerow([f"{r[k]:.6g}" if isinstance(r[k], float) else r[k] for k in keys])


def label_batch(ds: Dataset, idx: np.ndarray, hierarchy: ConceptHierarchy, concepts) -> dict[str, np.ndarray]:
    return {c: ds.labels[hierarchy.concept(c).key][idx] for c in concepts}


def epoch_batches(ds: Dataset, cfg: TrainConfig, epoch: int) -> list[np.ndarray]:
    n = len(ds)
    n_batches = max(1, n // cfg.batch_size)
    if not cfg.quotas:
        perm = rngmod.stream(cfg.seed, rngmod.SHUFFLE, epoch).permutation(n)
        return [perm[i * cfg.batch_size:(i + 1) * cfg.batch_size] for i in range(n_batches)]
    types = ds.occlusion_type
    pools = {}
    for t, name in enumerate(OCCLUSION_TYPES):
        q = cfg.quotas.get(name, 0)
        if q == 0:
            continue
        members = np.flatnonzero(types == t)
        if len(members) == 0:
            raise TrainingError(f"quota asks for {q} {name!r} samples per batch but the training set has none")
        order = rngmod.stream(cfg.seed, rngmod.SHUFFLE, epoch, t).permutation(len(members))
        pools[name] = members[order]
    quota_total = sum(cfg.quotas.values())
    n_batches = max(1, sum(len(p) for p in pools.values()) // quota_total)
    batches = []
    for b in range(n_batches):
        parts = []
        for name, pool in pools.items():
            q = cfg.quotas[name]
            pos = (b * q + np.arange(q)) % len(pool)
            parts.append(pool[pos])
        batches.append(np.concatenate(parts))
    return batches


def evaluate_loss(net: Network, ds: Dataset, hierarchy: ConceptHierarchy, batch_size: int = 200) -> float:
    total, n = 0.0, len(ds)
    for i in range(0, n, batch_size):
        idx = np.arange(i, min(i + batch_size, n))
        preds = forward(net, ds.images[idx], EVAL)
        loss, _ = total_loss(preds, label_batch(ds, idx, hierarchy, net.scheme.concepts), net.scheme)
        total += loss.item() * len(idx)
    return total / max(n, 1)


def train(net: Network, dataset: Dataset, valset: Optional[Dataset], hierarchy: ConceptHierarchy,
          cfg: TrainConfig) -> tuple[Network, History]:
    """Train in place; deterministic for a given network init and ``cfg.seed``."""
    concepts = net.scheme.concepts
    missing = [c for c in concepts if hierarchy.concept(c).key not in dataset.labels]
    if missing:
        raise TrainingError(f"dataset lacks labels for {missing}")
    params = net.parameters()
    hist = History()
    detector = PlateauDetector(cfg.patience, cfg.plateau_rel)
    lr = cfg.lr
    names = net.scheme.branch_names()
    for epoch in range(1, cfg.epochs + 1):
        sums = {k: 0.0 for k in names}
        tot = 0.0
        batches = epoch_batches(dataset, cfg, epoch)
        for bi, idx in enumerate(batches):
            try:
                preds = forward(net, dataset.images[idx], TRAIN)
                loss, parts = total_loss(preds, label_batch(dataset, idx, hierarchy, concepts), net.scheme)
                backward(loss)
            except NonFiniteError as e:
                raise TrainingError(f"epoch {epoch} batch {bi}: {e}") from e
            sgd_step(params, lr, cfg.momentum, cfg.weight_decay)
            hist.steps += 1
            for k, v in parts.items():
                sums[k] += v
            tot += loss.item()
        row: dict = {"epoch": epoch}
        for k in names:
            row[f"loss_{k}"] = sums[k] / len(batches)
        row["total"] = tot / len(batches)
        row["val_total"] = evaluate_loss(net, valset, hierarchy) if valset is not None and len(valset) else float("nan")
        row["lr"] = lr
        hist.rows.append(row)
        log.info("epoch %d total %.4f val %.4f lr %g", epoch, row["total"], row["val_total"], lr)
        monitor = row["val_total"] if valset is not None and len(valset) else row["total"]
        if detector.update(monitor):
            if len(hist.lr_drops) >= cfg.max_drops:
                break
            lr *= cfg.lr_factor
            hist.lr_drops.append(epoch)
    if cfg.checkpoint_path:
        save_checkpoint(cfg.checkpoint_path, net.named_state())
    return net, hist
