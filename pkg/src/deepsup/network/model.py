"""Deeply supervised CNN: a conv/BN/ReLU trunk with GAP+FC side branches."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping, Optional, Sequence

import numpy as np

from .. import rng as rngmod
from ..autodiff import (
    EVAL,
    TRAIN,
    BatchNormState,
    Parameter,
    Tensor,
    add,
    batch_norm,
    conv2d,
    dropout,
    fully_connected,
    global_average_pool,
    glorot_init,
    l2_loss,
    relu,
    scale,
)
from ..concepts import ConceptHierarchy

SINGLE = "single"
MULTITASK = "multitask"
DSN = "dsn"
LADDER = "ladder"
REVERSED = "reversed"
CUSTOM = "custom"
KINDS = (SINGLE, MULTITASK, DSN, LADDER, REVERSED, CUSTOM)


class SchemeError(ValueError):
    """Invalid supervision scheme for the given architecture or hierarchy."""


@dataclass(frozen=True)
class ArchConfig:
    conv_layers: int = 12
    filters_per_stage: tuple[int, ...] = (32, 64, 128)
    downsample_depths: tuple[int, ...] = (4, 8)
    input_size: int = 32
    in_channels: int = 1
    branch_hidden: int = 128
    kernel: int = 3
    dropout_rate: float = 0.1
    dropout_every: int = 4
    bn_eps: float = 1e-5
    bn_momentum: float = 0.9

    def __post_init__(self):
        d = self.downsample_depths
        if any(b <= a for a, b in zip(d, d[1:])):
            raise ValueError(f"downsample depths must be strictly increasing: {d}")
        if d and (d[0] < 1 or d[-1] > self.conv_layers):
            raise ValueError(f"downsample depths {d} must lie in 1..{self.conv_layers}")
        if len(self.filters_per_stage) < len(d) + 1:
            raise ValueError("need one filter count per stage (len(downsample_depths) + 1)")

    @classmethod
    def paper(cls) -> "ArchConfig":
        """Full-size layout: 25 layers, 64x64 input, stride-2 at 4/8/12, 512-wide branches."""
        return cls(conv_layers=25, filters_per_stage=(64, 128, 256, 512), downsample_depths=(4, 8, 12),
                   input_size=64, branch_hidden=512)

    def stage(self, depth: int) -> int:
        return sum(1 for d in self.downsample_depths if d <= depth)

    def spatial_sizes(self) -> list[int]:
        """Feature-map side length after each block (1-indexed depth -> list index depth-1)."""
        sizes, s = [], self.input_size
        pad = self.kernel // 2
        for depth in range(1, self.conv_layers + 1):
            stride = 2 if depth in self.downsample_depths else 1
            s = (s + 2 * pad - self.kernel) // stride + 1
            sizes.append(s)
        return sizes


@dataclass(frozen=True)
class Assignment:
    concept: str
    depth: int
    weight: float


@dataclass(frozen=True)
class SupervisionScheme:
    """Concept-to-depth assignments with loss weights.

    Assignments are listed in hierarchy order (coarse to fine) for every kind
    except ``dsn``, whose entries all name the same concept.
    """

    kind: str
    assignments: tuple[Assignment, ...]
    name: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SchemeError(f"unknown scheme kind {self.kind!r}")
        if not self.assignments:
            raise SchemeError("a scheme needs at least one assignment")

    @property
    def label(self) -> str:
        return self.name or self.kind

    @property
    def concepts(self) -> list[str]:
        return [a.concept for a in self.assignments]

    def branch_names(self) -> list[str]:
        counts: dict[str, int] = {}
        for a in self.assignments:
            counts[a.concept] = counts.get(a.concept, 0) + 1
        return [a.concept if counts[a.concept] == 1 else f"{a.concept}@{a.depth}" for a in self.assignments]

    def main_branch(self, concept: str) -> str:
        """Branch that predicts ``concept`` at the greatest depth."""
        best = None
        for name, a in zip(self.branch_names(), self.assignments):
            if a.concept == concept and (best is None or a.depth >= best[1]):
                best = (name, a.depth)
        if best is None:
            raise KeyError(f"scheme {self.label!r} does not supervise {concept!r}")
        return best[0]

    def validate(self, conv_layers: int, hierarchy: Optional[ConceptHierarchy] = None) -> None:
        depths = [a.depth for a in self.assignments]
        for a in self.assignments:
            if not 1 <= a.depth <= conv_layers:
                raise SchemeError(f"depth {a.depth} for {a.concept!r} outside 1..{conv_layers}")
            if a.weight < 0:
                raise SchemeError(f"negative loss weight for {a.concept!r}")
            if hierarchy is not None and a.concept not in hierarchy.names:
                raise SchemeError(f"concept {a.concept!r} is not in the hierarchy")
        if self.kind != DSN and len(set(self.concepts)) != len(self.concepts):
            raise SchemeError(f"duplicate concept assignment in {self.kind} scheme")
        if self.kind == DSN:
            if len(set(self.concepts)) != 1:
                raise SchemeError("dsn supervises every branch with the same concept")
            if len(set(depths)) != len(depths):
                raise SchemeError("dsn branches need distinct depths")
        if self.kind == SINGLE and len(self.assignments) != 1:
            raise SchemeError("single-task scheme has exactly one assignment")
        if self.kind == MULTITASK and any(d != conv_layers for d in depths):
            raise SchemeError("multitask places every concept at the last layer")
        if self.kind in (LADDER, REVERSED) and hierarchy is not None:
            order = [hierarchy.index(c) for c in self.concepts]
            by_depth = [o for _, o in sorted(zip(depths, order))]
            if len(set(depths)) != len(depths):
                raise SchemeError(f"{self.kind} scheme needs distinct depths")
            if self.kind == LADDER and (order != sorted(order) or depths != sorted(depths)):
                raise SchemeError("ladder scheme needs strictly increasing depths in hierarchy order")
            if self.kind == REVERSED and by_depth != sorted(by_depth, reverse=True):
                raise SchemeError("reversed scheme needs concept order decreasing with depth")
        elif self.kind == LADDER and any(b <= a for a, b in zip(depths, depths[1:])):
            raise SchemeError("ladder scheme needs strictly increasing depths")


def even_depths(conv_layers: int, m: int) -> list[int]:
    """``m`` depths spread evenly, the last one at the final layer (12, 4 -> 3, 6, 9, 12)."""
    return [round(conv_layers * (i + 1) / m) for i in range(m)]


def _weights(h: ConceptHierarchy, names: Sequence[str], override: Optional[Mapping[str, float]]) -> list[float]:
    override = override or {}
    return [override.get(n, h.concept(n).loss_weight) for n in names]


def single_scheme(h: ConceptHierarchy, conv_layers: int, main: Optional[str] = None, weights=None) -> SupervisionScheme:
    main = main or h.names[-1]
    (w,) = _weights(h, [main], weights)
    return SupervisionScheme(SINGLE, (Assignment(main, conv_layers, w),))


def multitask_scheme(h: ConceptHierarchy, conv_layers: int, concepts=None, weights=None) -> SupervisionScheme:
    names = list(concepts or h.names)
    ws = _weights(h, names, weights)
    return SupervisionScheme(MULTITASK, tuple(Assignment(n, conv_layers, w) for n, w in zip(names, ws)))


def ladder_scheme(h: ConceptHierarchy, conv_layers: int, depths=None, concepts=None, weights=None) -> SupervisionScheme:
    names = list(concepts or h.names)
    depths = list(depths or even_depths(conv_layers, len(names)))
    ws = _weights(h, names, weights)
    return SupervisionScheme(LADDER, tuple(Assignment(n, d, w) for n, d, w in zip(names, depths, ws)))


def reversed_scheme(h: ConceptHierarchy, conv_layers: int, depths=None, concepts=None, weights=None) -> SupervisionScheme:
    names = list(reversed(concepts or h.names))
    depths = list(depths or even_depths(conv_layers, len(names)))
    ws = _weights(h, names, weights)
    return SupervisionScheme(REVERSED, tuple(Assignment(n, d, w) for n, d, w in zip(names, depths, ws)))


def dsn_scheme(h: ConceptHierarchy, conv_layers: int, heads: int, main: Optional[str] = None, weights=None) -> SupervisionScheme:
    main = main or h.names[-1]
    (w,) = _weights(h, [main], weights)
    return SupervisionScheme(DSN, tuple(Assignment(main, d, w) for d in even_depths(conv_layers, heads)))


def make_scheme(kind: str, h: ConceptHierarchy, conv_layers: int, **kw) -> SupervisionScheme:
    builders = {
        SINGLE: single_scheme,
        MULTITASK: multitask_scheme,
        LADDER: ladder_scheme,
        REVERSED: reversed_scheme,
        DSN: dsn_scheme,
    }
    if kind not in builders:
        raise SchemeError(f"no default layout for scheme kind {kind!r}")
    return builders[kind](h, conv_layers, **kw)


@dataclass
class ConvBlock:
    weight: Parameter
    bias: Parameter
    gamma: Parameter
    beta: Parameter
    bn: BatchNormState
    stride: int


@dataclass
class Branch:
    name: str
    concept: str
    depth: int
    weight: float
    fc1_w: Parameter
    fc1_b: Parameter
    fc2_w: Parameter
    fc2_b: Parameter

    def parameters(self) -> list[Parameter]:
        return [self.fc1_w, self.fc1_b, self.fc2_w, self.fc2_b]


@dataclass
class Network:
    arch: ArchConfig
    scheme: SupervisionScheme
    trunk: list[ConvBlock]
    branches: list[Branch]
    dropout_rng: Optional[np.random.Generator] = field(default=None, repr=False)

    def parameters(self) -> list[Parameter]:
        ps: list[Parameter] = []
        for b in self.trunk:
            ps += [b.weight, b.bias, b.gamma, b.beta]
        for br in self.branches:
            ps += br.parameters()
        return ps

    def named_state(self) -> dict[str, tuple[np.ndarray, np.ndarray]]:
        """Parameters plus batch-norm running statistics, as checkpoint records."""
        out = {p.name: (p.data, p.velocity) for p in self.parameters()}
        for i, b in enumerate(self.trunk, start=1):
            if b.bn.initialized:
                z = np.zeros(b.bn.channels, dtype=np.float32)
                out[f"trunk.{i}.bn.running_mean"] = (b.bn.running_mean.astype(np.float32), z)
                out[f"trunk.{i}.bn.running_var"] = (b.bn.running_var.astype(np.float32), z)
        return out

    def load_state(self, state: Mapping[str, tuple[np.ndarray, np.ndarray]]) -> None:
        for p in self.parameters():
            value, velocity = state[p.name]
            p.data = value
            p.velocity = np.array(velocity, dtype=p.data.dtype)
        for i, b in enumerate(self.trunk, start=1):
            key = f"trunk.{i}.bn.running_mean"
            if key in state:
                b.bn.running_mean = state[key][0].astype(np.float64)
                b.bn.running_var = state[f"trunk.{i}.bn.running_var"][0].astype(np.float64)

    def branch(self, name: str) -> Branch:
        for br in self.branches:
            if br.name == name:
                return br
        raise KeyError(name)


def build_network(arch: ArchConfig, scheme: SupervisionScheme, hierarchy: ConceptHierarchy,
                  rng: np.random.Generator, dropout_rng: Optional[np.random.Generator] = None) -> Network:
    """Glorot-initialized trunk and one GAP -> FC -> ReLU -> FC branch per assignment."""
    scheme.validate(arch.conv_layers, hierarchy)
    trunk = []
    c_in = arch.in_channels
    k = arch.kernel
    for depth in range(1, arch.conv_layers + 1):
        c_out = arch.filters_per_stage[arch.stage(depth)]
        p = f"trunk.{depth}"
        trunk.append(ConvBlock(
            weight=Parameter(glorot_init((c_out, c_in, k, k), rng), f"{p}.conv.weight"),
            bias=Parameter(np.zeros(c_out), f"{p}.conv.bias"),
            gamma=Parameter(np.ones(c_out), f"{p}.bn.gamma"),
            beta=Parameter(np.zeros(c_out), f"{p}.bn.beta"),
            bn=BatchNormState(c_out),
            stride=2 if depth in arch.downsample_depths else 1,
        ))
        c_in = c_out
    branches = []
    for name, a in zip(scheme.branch_names(), scheme.assignments):
        c = arch.filters_per_stage[arch.stage(a.depth)]
        dim = hierarchy.concept(a.concept).dim
        hid = arch.branch_hidden
        p = f"branch.{name}"
        branches.append(Branch(
            name, a.concept, a.depth, a.weight,
            Parameter(glorot_init((hid, c), rng), f"{p}.fc1.weight"),
            Parameter(np.zeros(hid), f"{p}.fc1.bias"),
            Parameter(glorot_init((dim, hid), rng), f"{p}.fc2.weight"),
            Parameter(np.zeros(dim), f"{p}.fc2.bias"),
        ))
    return Network(arch, scheme, trunk, branches, dropout_rng)


def forward(net: Network, batch, mode: str = TRAIN) -> dict[str, Tensor]:
    """Run the shared trunk once; return one prediction per branch."""
    x = batch if isinstance(batch, Tensor) else Tensor(batch)
    a = net.arch
    if x.data.ndim != 4 or x.shape[1] != a.in_channels or x.shape[2:] != (a.input_size, a.input_size):
        raise ValueError(f"expected input (N, {a.in_channels}, {a.input_size}, {a.input_size}), got {x.shape}")
    by_depth: dict[int, list[Branch]] = {}
    for br in net.branches:
        by_depth.setdefault(br.depth, []).append(br)
    last = max(by_depth)
    out: dict[str, Tensor] = {}
    pad = a.kernel // 2
    h = x
    for depth, blk in enumerate(net.trunk, start=1):
        h = conv2d(h, blk.weight, blk.bias, blk.stride, pad)
        h = batch_norm(h, blk.gamma, blk.beta, blk.bn, a.bn_eps, a.bn_momentum, mode)
        h = relu(h)
        for br in by_depth.get(depth, ()):
            g = global_average_pool(h)
            g = relu(fully_connected(g, br.fc1_w, br.fc1_b))
            out[br.name] = fully_connected(g, br.fc2_w, br.fc2_b)
        if depth == last:
            break
        if a.dropout_every and depth % a.dropout_every == 0 and a.dropout_rate > 0:
            if mode == TRAIN and net.dropout_rng is None:
                raise RuntimeError("network has no dropout generator for train mode")
            h = dropout(h, a.dropout_rate, mode, net.dropout_rng)
    return {br.name: out[br.name] for br in net.branches}


def total_loss(predictions: Mapping[str, Tensor], labels: Mapping[str, np.ndarray],
               scheme: SupervisionScheme) -> tuple[Tensor, dict[str, float]]:
    """Sum over branches of weight * L2 loss; also returns the unweighted per-branch losses."""
    terms, breakdown = [], {}
    for name, a in zip(scheme.branch_names(), scheme.assignments):
        if a.concept not in labels:
            raise KeyError(f"missing label for concept {a.concept!r}")
        li = l2_loss(predictions[name], labels[a.concept])
        breakdown[name] = li.item()
        terms.append(scale(li, a.weight))
    return add(*terms), breakdown


def predict(net: Network, images: np.ndarray, batch_size: int = 200) -> dict[str, np.ndarray]:
    """Eval-mode predictions for a whole array of images."""
    chunks: dict[str, list[np.ndarray]] = {br.name: [] for br in net.branches}
    for i in range(0, len(images), batch_size):
        preds = forward(net, images[i:i + batch_size], EVAL)
        for k, v in preds.items():
            chunks[k].append(v.data)
    return {k: np.concatenate(v) for k, v in chunks.items()}


def init_network(arch: ArchConfig, scheme: SupervisionScheme, hierarchy: ConceptHierarchy, seed: int) -> Network:
    """Build with the run's init and dropout streams."""
    return build_network(arch, scheme, hierarchy, rngmod.stream(seed, rngmod.INIT),
                         rngmod.stream(seed, rngmod.DROPOUT))
