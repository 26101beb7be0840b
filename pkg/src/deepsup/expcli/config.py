"""Run configuration read from a sectioned ``key = value`` text file.

Example::

    [run]
    seeds = 0, 1, 2
    schemes = single, multitask, ladder, reversed

    [data]
    family = cuboid-vehicle
    n_train = 5000

Unknown sections or keys are rejected so typos fail loudly.
"""

from __future__ import annotations

import configparser
import hashlib
import os
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Optional

from ..concepts import ConceptHierarchy, keypoint_hierarchy
from ..data import OCCLUSION_TYPES
from ..network import ArchConfig, TrainConfig
from ..network.model import KINDS
from ..synthgen.dataset import GenConfig


class ConfigError(ValueError):
    pass


def _floats(s: str) -> tuple[float, ...]:
    return tuple(float(v) for v in _items(s))


def _ints(s: str) -> tuple[int, ...]:
    return tuple(int(v) for v in _items(s))


def _items(s: str) -> list[str]:
    return [v.strip() for v in s.replace("\n", ",").split(",") if v.strip()]


def _pairs(s: str, cast=float) -> tuple[tuple[str, float], ...]:
    out = []
    for item in _items(s):
        if ":" not in item:
            raise ConfigError(f"expected name:value, got {item!r}")
        k, v = item.split(":", 1)
        out.append((k.strip(), cast(v)))
    return tuple(out)


@dataclass(frozen=True)
class MetricSpec:
    pck2d: tuple[float, ...] = (0.05, 0.1, 0.2)
    pck3d: tuple[float, ...] = (0.1, 0.2)
    apk: tuple[float, ...] = (0.1,)
    mean_recall: bool = True
    yaw: bool = True
    curve: tuple[float, ...] = tuple(round(0.01 * i, 2) for i in range(1, 31))


@dataclass(frozen=True)
class Variant:
    """Which occlusion types the training split is restricted to."""

    name: str
    types: tuple[str, ...]


@dataclass(frozen=True)
class RunConfig:
    seeds: tuple[int, ...] = (0,)
    schemes: tuple[str, ...] = ("single", "multitask", "ladder", "reversed")
    variants: tuple[Variant, ...] = (Variant("all", OCCLUSION_TYPES),)
    data: GenConfig = field(default_factory=GenConfig)
    data_seed: int = 0
    data_dir: Optional[str] = None
    pose_bins: int = 8
    weights: tuple[tuple[str, float], ...] = (("pose", 0.1), ("vis", 1.0), ("kp3d", 1.0), ("kp2d", 1.0))
    arch: ArchConfig = field(default_factory=ArchConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    metrics: MetricSpec = field(default_factory=MetricSpec)
    dsn_heads: int = 4

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        for s in self.schemes:
            if s not in KINDS or s == "custom":
                raise ConfigError(f"unknown scheme {s!r}")
        for v in self.variants:
            for t in v.types:
                if t not in OCCLUSION_TYPES:
                    raise ConfigError(f"variant {v.name!r}: unknown occlusion type {t!r}")
        names = {c for c, _ in self.weights}
        if names != {"pose", "vis", "kp3d", "kp2d"}:
            raise ConfigError(f"weights must cover pose, vis, kp3d and kp2d, got {sorted(names)}")

    def hierarchy(self) -> ConceptHierarchy:
        n_kp = {"cuboid-vehicle": 12, "chair-frame": 10, "unit-cube": 8}[self.data.family]
        h = keypoint_hierarchy(self.pose_bins, n_kp)
        w = dict(self.weights)
        return ConceptHierarchy([replace(c, loss_weight=w[c.name]) for c in h.concepts])

    def cell_label(self, scheme: str, variant: Variant) -> str:
        return scheme if len(self.variants) == 1 else f"{scheme}+{variant.name}"

    def cells(self) -> list[tuple[str, Variant, int]]:
        return [(s, v, seed) for v in self.variants for s in self.schemes for seed in self.seeds]

    def fingerprint(self) -> str:
        return hashlib.sha256(repr(self).encode()).hexdigest()[:16]


_SECTIONS = {
    "run": {"seeds", "schemes", "variants", "dsn_heads"},
    "data": {"family", "image_size", "n_train", "n_val", "n_test", "models_train", "models_val", "models_test",
             "mix", "seed", "dir"},
    "hierarchy": {"pose_bins", "weights"},
    "arch": {"conv_layers", "filters", "downsample", "input_size", "branch_hidden", "dropout_rate", "dropout_every",
             "bn_eps", "bn_momentum"},
    "train": {"lr", "momentum", "weight_decay", "batch_size", "epochs", "patience", "plateau_rel", "max_drops",
              "lr_factor", "quotas"},
    "metrics": {"pck2d", "pck3d", "apk", "mean_recall", "yaw", "curve"},
}


def parse_config(text: str) -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError(str(e)) from e
    for sec in cp.sections():
        if sec not in _SECTIONS:
            raise ConfigError(f"unknown section [{sec}]")
        bad = set(cp[sec]) - _SECTIONS[sec]
        if bad:
            raise ConfigError(f"unknown keys in [{sec}]: {sorted(bad)}")
    get = lambda sec: cp[sec] if cp.has_section(sec) else {}
    kw: dict = {}
    run = get("run")
    try:
        if "seeds" in run:
            kw["seeds"] = _ints(run["seeds"])
        if "schemes" in run:
            kw["schemes"] = tuple(_items(run["schemes"]))
        if "variants" in run:
            kw["variants"] = tuple(Variant(n.strip(), tuple(t.strip() for t in spec.split("+")))
                                   for n, spec in (i.split(":", 1) for i in _items(run["variants"])))
        if "dsn_heads" in run:
            kw["dsn_heads"] = int(run["dsn_heads"])

        d = get("data")
        gk: dict = {}
        for k in ("image_size", "n_train", "n_val", "n_test", "models_train", "models_val", "models_test"):
            if k in d:
                gk[k] = int(d[k])
        if "family" in d:
            gk["family"] = d["family"].strip()
        if "mix" in d:
            gk["mix"] = _pairs(d["mix"])
        if "seed" in d:
            kw["data_seed"] = int(d["seed"])
        if "dir" in d:
            kw["data_dir"] = d["dir"].strip()

        h = get("hierarchy")
        if "pose_bins" in h:
            kw["pose_bins"] = gk["pose_bins"] = int(h["pose_bins"])
        if "weights" in h:
            kw["weights"] = _pairs(h["weights"])
        kw["data"] = GenConfig(**gk)

        a = get("arch")
        ak: dict = {}
        for k in ("conv_layers", "input_size", "branch_hidden", "dropout_every"):
            if k in a:
                ak[k] = int(a[k])
        for k in ("dropout_rate", "bn_eps", "bn_momentum"):
            if k in a:
                ak[k] = float(a[k])
        if "filters" in a:
            ak["filters_per_stage"] = _ints(a["filters"])
        if "downsample" in a:
            ak["downsample_depths"] = _ints(a["downsample"])
        if "input_size" not in ak:
            ak["input_size"] = kw["data"].image_size
        kw["arch"] = ArchConfig(**ak)

        t = get("train")
        tk: dict = {}
        for k in ("lr", "momentum", "weight_decay", "plateau_rel", "lr_factor"):
            if k in t:
                tk[k] = float(t[k])
        for k in ("batch_size", "epochs", "patience", "max_drops"):
            if k in t:
                tk[k] = int(t[k])
        if "quotas" in t:
            tk["quotas"] = {k: int(v) for k, v in _pairs(t["quotas"], int)}
        kw["train"] = TrainConfig(**tk)

        m = get("metrics")
        mk: dict = {}
        for k in ("pck2d", "pck3d", "apk", "curve"):
            if k in m:
                mk[k] = _floats(m[k])
        for k in ("mean_recall", "yaw"):
            if k in m:
                mk[k] = m.getboolean(k) if hasattr(m, "getboolean") else m[k].lower() in ("1", "yes", "true", "on")
        kw["metrics"] = MetricSpec(**mk)
        return RunConfig(**kw)
    except ConfigError:
        raise
    except (ValueError, TypeError, KeyError) as e:
        raise ConfigError(str(e)) from e


def load_config(path: str | os.PathLike) -> RunConfig:
    with open(path) as fh:
        return parse_config(fh.read())
