"""Concept hierarchies: ordered concepts, necessary-condition maps and epsilon.

A hierarchy ``(y_1, ..., y_m)`` orders concepts from coarse to fine. For an
adjacent pair ``(y_{i-1}, y_i)`` an optional deterministic map ``T`` recovers the
coarser label from the finer one. ``estimate_epsilon`` measures how far an
observed labelling is from such a deterministic relation.
"""

from __future__ import annotations

import csv
import io
import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Any, Callable, Hashable, Iterable, Mapping, Optional, Sequence

import numpy as np

log = logging.getLogger(__name__)

ONEHOT = "onehot"
BINARY = "binary"
REAL = "real"
_KINDS = (ONEHOT, BINARY, REAL)


@dataclass(frozen=True)
class ConceptSpec:
    """One supervised concept.

    ``kind``/``dim`` describe the value space: a one-hot vector over ``dim``
    bins, a binary vector of length ``dim`` or a real vector of length ``dim``.
    ``label_key`` names the field of a sample holding this concept's label.
    """

    name: str
    kind: str
    dim: int
    loss_weight: float = 1.0
    label_key: Optional[str] = None

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"concept {self.name!r}: unknown value space {self.kind!r}")
        if self.dim <= 0:
            raise ValueError(f"concept {self.name!r}: dimension must be positive")
        if self.loss_weight < 0:
            raise ValueError(f"concept {self.name!r}: loss weight must be >= 0")

    @property
    def key(self) -> str:
        return self.label_key or self.name


class MissingMapError(KeyError):
    """No necessary-condition map registered for a pair."""


@dataclass
class ConceptHierarchy:
    """Ordered concepts with per-pair maps ``T`` and measured epsilons.

    Pair ``i`` (1 <= i < m) is ``(concepts[i-1], concepts[i])``; its map takes a
    label of ``concepts[i]`` and returns the implied label of ``concepts[i-1]``.
    """

    concepts: list[ConceptSpec]
    maps: dict[int, Callable[[Any], Any]] = field(default_factory=dict)
    epsilon: dict[int, "EpsilonEstimate"] = field(default_factory=dict)

    def __post_init__(self):
        names = [c.name for c in self.concepts]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate concept names in hierarchy: {names}")
        if not names:
            raise ValueError("a hierarchy needs at least one concept")

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.concepts]

    def __len__(self) -> int:
        return len(self.concepts)

    def concept(self, name: str) -> ConceptSpec:
        for c in self.concepts:
            if c.name == name:
                return c
        raise KeyError(f"unknown concept {name!r}")

    def index(self, name: str) -> int:
        return self.names.index(name)

    def pairs(self) -> list[tuple[int, str, str]]:
        return [(i, self.concepts[i - 1].name, self.concepts[i].name) for i in range(1, len(self.concepts))]

    def register_map(self, pair: int, fn: Callable[[Any], Any]) -> None:
        if not 1 <= pair < len(self.concepts):
            raise IndexError(f"pair index {pair} out of range for {len(self.concepts)} concepts")
        self.maps[pair] = fn

    def apply_T(self, pair: int, label):
        try:
            fn = self.maps[pair]
        except KeyError:
            a, b = self.concepts[pair - 1].name, self.concepts[pair].name
            raise MissingMapError(f"no map T registered for pair ({a} <- {b})") from None
        return fn(label)

    def validate(self, columns: Mapping[str, np.ndarray], quantizers: Optional[Mapping[str, "Quantizer"]] = None) -> list["EpsilonEstimate"]:
        """Measure epsilon for every adjacent pair and store it on the hierarchy."""
        quantizers = dict(quantizers or {})
        out = []
        for i, coarse, fine in self.pairs():
            cq = quantizers.get(coarse) or _default_quantizer(self.concept(coarse))
            fq = quantizers.get(fine) or _default_quantizer(self.concept(fine))
            est = estimate_epsilon(
                columns[self.concept(coarse).key],
                columns[self.concept(fine).key],
                coarse_quantizer=cq,
                fine_quantizer=fq,
                pair=(coarse, fine),
            )
            self.epsilon[i] = est
            out.append(est)
        return out


def partition_map(parent_of: Mapping[Hashable, Hashable]) -> Callable[[Hashable], Hashable]:
    """T for a class partition: fine class -> coarse class by lookup."""
    table = dict(parent_of)

    def T(label):
        key = label.item() if isinstance(label, np.generic) else label
        try:
            return table[key]
        except KeyError:
            raise KeyError(f"label {label!r} is not in the partition") from None

    return T


def identity_map(label):
    return label


@dataclass(frozen=True)
class Quantizer:
    """Per-dimension uniform bucketing of real-valued labels.

    ``lo``/``hi`` default to the per-dimension range observed in the data
    being quantized.
    """

    buckets: int = 16
    lo: Optional[float] = None
    hi: Optional[float] = None

    def __call__(self, values: np.ndarray) -> np.ndarray:
        v = np.asarray(values, dtype=np.float64)
        v = v.reshape(len(v), -1)
        lo = np.full(v.shape[1], self.lo) if self.lo is not None else v.min(axis=0)
        hi = np.full(v.shape[1], self.hi) if self.hi is not None else v.max(axis=0)
        span = np.where(hi > lo, hi - lo, 1.0)
        idx = np.floor((v - lo) / span * self.buckets).astype(np.int64)
        return np.clip(idx, 0, self.buckets - 1)


def _default_quantizer(spec: ConceptSpec) -> Optional[Quantizer]:
    return Quantizer() if spec.kind == REAL else None


@dataclass(frozen=True)
class EpsilonEstimate:
    pair: tuple[str, str]
    epsilon: float
    buckets: Optional[int]
    n_samples: int
    n_classes: int
    skipped: tuple = ()


def _row_keys(values, quantizer: Optional[Quantizer]) -> list[Hashable]:
    arr = np.asarray(values)
    if quantizer is not None:
        arr = quantizer(arr)
    if arr.ndim == 1:
        return [x.item() if isinstance(x, np.generic) else x for x in arr]
    flat = arr.reshape(len(arr), -1)
    return [tuple(row.tolist()) for row in flat]


def estimate_epsilon(
    coarse,
    fine,
    *,
    coarse_quantizer: Optional[Quantizer] = None,
    fine_quantizer: Optional[Quantizer] = None,
    classes: Optional[Iterable[Hashable]] = None,
    pair: tuple[str, str] = ("coarse", "fine"),
) -> EpsilonEstimate:
    """epsilon = 1 - min over observed fine values c of max_y P(coarse = y | fine = c).

    ``classes`` optionally lists the fine values that are expected; any of them
    with no samples is skipped with a warning.
    """
    if len(coarse) != len(fine):
        raise ValueError("coarse and fine label arrays differ in length")
    if len(fine) == 0:
        raise ValueError("cannot estimate epsilon on an empty dataset")
    ck = _row_keys(coarse, coarse_quantizer)
    fk = _row_keys(fine, fine_quantizer)
    joint: dict[Hashable, Counter] = defaultdict(Counter)
    for c, f in zip(ck, fk):
        joint[f][c] += 1
    skipped = ()
    if classes is not None:
        missing = [c for c in classes if c not in joint]
        if missing:
            log.warning("epsilon %s: %d declared classes have no samples and are skipped", pair, len(missing))
            skipped = tuple(missing)
    worst = min(max(cnt.values()) / sum(cnt.values()) for cnt in joint.values())
    buckets = None
    for q in (coarse_quantizer, fine_quantizer):
        if q is not None:
            buckets = q.buckets
    return EpsilonEstimate(pair, 1.0 - worst, buckets, len(fk), len(joint), skipped)


def epsilon_csv(estimates: Sequence[EpsilonEstimate]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["pair", "epsilon", "buckets", "samples"])
    for e in estimates:
        w.writerow([f"{e.pair[0]}<-{e.pair[1]}", f"{e.epsilon:.6f}", e.buckets if e.buckets is not None else "NA", e.n_samples])
    return buf.getvalue()


def keypoint_hierarchy(pose_bins: int = 8, n_keypoints: int = 12, pose_weight: float = 0.1) -> ConceptHierarchy:
    """pose -> visibility -> 3D keypoints -> 2D keypoints."""
    return ConceptHierarchy([
        ConceptSpec("pose", ONEHOT, pose_bins, pose_weight),
        ConceptSpec("vis", BINARY, n_keypoints, 1.0),
        ConceptSpec("kp3d", REAL, 3 * n_keypoints, 1.0),
        ConceptSpec("kp2d", REAL, 2 * n_keypoints, 1.0),
    ])
