"""Generalization probability on enumerable hypothesis spaces.

A hypothesis is one point of a finite parameter grid. For a main concept,
``H`` holds the points whose empirical risk on the training set is below
``delta`` (and, when constrained, whose empirical risk on each intermediate
concept is below ``delta_prime``). ``F`` keeps the members of ``H`` whose risk
on a held-out evaluation set is also below ``delta``. Under a uniform prior
the generalization probability is ``|F| / |H|`` (0 when ``H`` is empty).
"""

from __future__ import annotations

import csv
import io
import itertools
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

SQUARED = "squared"
INDICATOR = "indicator"

Evaluator = Callable[[Mapping[str, np.ndarray], np.ndarray], Mapping[str, np.ndarray]]


def relu(x):
    return np.maximum(x, 0)


@dataclass
class HypothesisSpace:
    """Finite grid over named parameters plus a vectorized evaluator.

    ``evaluate(params, x)`` receives one ``(G, 1)`` array per parameter and the
    inputs ``x`` shaped ``(1, n)``; it returns ``(G, n)`` outputs per concept.
    """

    name: str
    grid: dict[str, np.ndarray]
    evaluate: Evaluator
    concepts: tuple[str, ...]

    def __post_init__(self):
        self.grid = {k: np.asarray(v, dtype=np.float64) for k, v in self.grid.items()}
        if not self.grid or any(v.size == 0 for v in self.grid.values()):
            raise ValueError(f"space {self.name!r}: empty parameter grid")

    @property
    def size(self) -> int:
        return int(np.prod([v.size for v in self.grid.values()]))

    def points(self) -> dict[str, np.ndarray]:
        mesh = np.meshgrid(*self.grid.values(), indexing="ij")
        return {k: m.ravel() for k, m in zip(self.grid, mesh)}

    def outputs(self, x: np.ndarray) -> dict[str, np.ndarray]:
        pts = {k: v[:, None] for k, v in self.points().items()}
        return dict(self.evaluate(pts, np.asarray(x, dtype=np.float64)[None, :]))

    def index_of(self, **params) -> int:
        """Flat grid index of an exact parameter tuple."""
        idx = []
        for k, v in self.grid.items():
            hit = np.flatnonzero(v == params[k])
            if hit.size == 0:
                raise KeyError(f"{k}={params[k]} not on the grid")
            idx.append(int(hit[0]))
        return int(np.ravel_multi_index(idx, [v.size for v in self.grid.values()]))


@dataclass
class RiskSpec:
    """Training set, evaluation set, per-concept losses and thresholds.

    ``train_y`` holds labels for the main concept and any intermediate ones;
    ``eval_y`` needs only the main concept.
    """

    main: str
    train_x: np.ndarray
    train_y: dict[str, np.ndarray]
    eval_x: np.ndarray
    eval_y: dict[str, np.ndarray]
    delta: float
    delta_prime: float
    losses: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.delta <= 0 or self.delta_prime <= 0:
            raise ValueError("delta and delta_prime must be positive")
        if set(np.asarray(self.train_x).tolist()) & set(np.asarray(self.eval_x).tolist()):
            raise ValueError("evaluation set overlaps the training set")

    def loss(self, concept: str) -> str:
        return self.losses.get(concept, SQUARED)

    def with_thresholds(self, delta: float, delta_prime: float) -> "RiskSpec":
        return RiskSpec(self.main, self.train_x, self.train_y, self.eval_x, self.eval_y, delta, delta_prime, self.losses)


def _risk(pred: np.ndarray, target: np.ndarray, loss: str) -> np.ndarray:
    target = np.asarray(target, dtype=np.float64)[None, :]
    if loss == SQUARED:
        return np.mean((pred - target) ** 2, axis=1)
    if loss == INDICATOR:
        return np.mean(pred != target, axis=1)
    raise ValueError(f"unknown loss {loss!r}")


class Evaluation:
    """Cached empirical and held-out risks of every grid point."""

    def __init__(self, space: HypothesisSpace, spec: RiskSpec):
        self.space, self.spec = space, spec
        tr = space.outputs(spec.train_x)
        ev = space.outputs(spec.eval_x)
        self.empirical = {c: _risk(tr[c], y, spec.loss(c)) for c, y in spec.train_y.items()}
        self.true = _risk(ev[spec.main], spec.eval_y[spec.main], spec.loss(spec.main))

    def H(self, constraints: Sequence[str] = (), delta: Optional[float] = None,
          delta_prime: Optional[float] = None) -> np.ndarray:
        d = self.spec.delta if delta is None else delta
        dp = self.spec.delta_prime if delta_prime is None else delta_prime
        mask = self.empirical[self.spec.main] < d
        for c in constraints:
            mask = mask & (self.empirical[c] < dp)
        return mask

    def F(self, constraints: Sequence[str] = (), delta: Optional[float] = None,
          delta_prime: Optional[float] = None) -> np.ndarray:
        d = self.spec.delta if delta is None else delta
        return self.H(constraints, d, delta_prime) & (self.true < d)


def enumerate_H(space: HypothesisSpace, spec: RiskSpec, constraints: Sequence[str] = ()) -> np.ndarray:
    """Boolean mask over the flattened grid."""
    return Evaluation(space, spec).H(constraints)


def enumerate_F(space: HypothesisSpace, spec: RiskSpec, constraints: Sequence[str] = ()) -> np.ndarray:
    return Evaluation(space, spec).F(constraints)


def generalization_probability(H: np.ndarray, F: np.ndarray) -> float:
    nh = int(np.count_nonzero(H))
    if nh == 0:
        return 0.0
    return int(np.count_nonzero(F & H)) / nh


@dataclass
class ChainRow:
    constraints: tuple[str, ...]
    n_H: int
    n_F: int
    P: float


@dataclass
class ChainReport:
    space: str
    delta: float
    delta_prime: float
    rows: list[ChainRow]
    truncated: bool

    @property
    def monotone(self) -> bool:
        ps = [r.P for r in self.rows]
        return all(b >= a for a, b in zip(ps, ps[1:]))

    @property
    def strictly_increasing(self) -> bool:
        ps = [r.P for r in self.rows]
        return len(ps) > 1 and all(b > a for a, b in zip(ps, ps[1:]))


def check_monotonicity(space: HypothesisSpace, spec: RiskSpec, intermediates: Sequence[str],
                       evaluation: Optional[Evaluation] = None) -> ChainReport:
    """P conditioned on growing prefixes ``(), (y_1,), (y_1, y_2), ...`` of the intermediates.

    The chain stops early (``truncated``) at the first empty ``H``.
    """
    ev = evaluation or Evaluation(space, spec)
    rows: list[ChainRow] = []
    truncated = False
    for k in range(len(intermediates) + 1):
        cons = tuple(intermediates[:k])
        H = ev.H(cons, spec.delta, spec.delta_prime)
        F = ev.F(cons, spec.delta, spec.delta_prime)
        if not H.any():
            truncated = True
            break
        rows.append(ChainRow(cons, int(H.sum()), int(F.sum()), generalization_probability(H, F)))
    return ChainReport(space.name, spec.delta, spec.delta_prime, rows, truncated)


def sweep(space: HypothesisSpace, spec: RiskSpec, intermediates: Sequence[str],
          deltas: Sequence[float], delta_primes: Sequence[float]) -> list[ChainReport]:
    ev = Evaluation(space, spec)
    return [check_monotonicity(space, spec.with_thresholds(d, dp), intermediates, ev)
            for d, dp in itertools.product(deltas, delta_primes)]


def chain_csv(reports: Sequence[ChainReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["space", "delta", "delta_prime", "constraints", "H", "F", "P"])
    for rep in reports:
        for r in rep.rows:
            w.writerow([rep.space, f"{rep.delta:g}", f"{rep.delta_prime:g}", "+".join(r.constraints) or "none",
                        r.n_H, r.n_F, f"{r.P:.6f}"])
    return buf.getvalue()


# ---- constructed spaces -------------------------------------------------------

TOY_TRUE = {"w1": 3.0, "w2": 1.0, "b1": -2.0, "b2": -7.0}
TOY_ALTERNATE = {"w1": 1.0, "w2": 3.0, "b1": -1.0, "b2": -10.0}


def _toy_eval(p, x):
    hidden = relu(p["w1"] * x + p["b1"])
    return {"hidden": hidden, "y": relu(p["w2"] * hidden + p["b2"])}


def toy_space(w_range: int = 5, b_range: int = 10) -> HypothesisSpace:
    """Two-layer scalar ReLU net ``y = relu(w2 * relu(w1 x + b1) + b2)`` on an integer grid."""
    w = np.arange(-w_range, w_range + 1)
    b = np.arange(-b_range, b_range + 1)
    return HypothesisSpace("toy-relu", {"w1": w, "w2": w, "b1": b, "b2": b}, _toy_eval, ("hidden", "y"))


def toy_model(params: Mapping[str, float], x) -> dict[str, np.ndarray]:
    p = {k: np.asarray([[v]], dtype=np.float64) for k, v in params.items()}
    return {k: v[0] for k, v in _toy_eval(p, np.asarray(x, dtype=np.float64)[None, :]).items()}


def toy_riskspec(delta: float = 0.01, delta_prime: Optional[float] = None,
                 train_x=(1, 2, 3), eval_x=(4, 5)) -> RiskSpec:
    """Training labels and hidden cues both come from the true model."""
    tr = toy_model(TOY_TRUE, train_x)
    ev = toy_model(TOY_TRUE, eval_x)
    return RiskSpec("y", np.asarray(train_x, float), {"y": tr["y"], "hidden": tr["hidden"]},
                    np.asarray(eval_x, float), {"y": ev["y"]}, delta, delta if delta_prime is None else delta_prime)


CHAIN_TRUE = {"a1": 2.0, "c1": 1.0, "a2": 1.0, "c2": 2.0, "a3": 2.0, "c3": -6.0}


def _chain_eval(p, x):
    h1 = relu(p["a1"] * x + p["c1"])
    h2 = relu(p["a2"] * h1 + p["c2"])
    return {"h1": h1, "h2": h2, "y": relu(p["a3"] * h2 + p["c3"])}


def chain_space(a_range: int = 3, c_range: int = 6) -> HypothesisSpace:
    """Three-layer scalar ReLU chain; each hidden unit is read out as an intermediate concept."""
    a = np.arange(-a_range, a_range + 1)
    c = np.arange(-c_range, c_range + 1)
    return HypothesisSpace("relu-chain", {"a1": a, "c1": c, "a2": a, "c2": c, "a3": a, "c3": c},
                           _chain_eval, ("h1", "h2", "y"))


def chain_riskspec(delta: float = 0.01, delta_prime: Optional[float] = None,
                   train_x=(0, 1), eval_x=(2, 3, 4)) -> RiskSpec:
    p = {k: np.asarray([[v]]) for k, v in CHAIN_TRUE.items()}
    tr = {k: v[0] for k, v in _chain_eval(p, np.asarray(train_x, float)[None, :]).items()}
    ev = {k: v[0] for k, v in _chain_eval(p, np.asarray(eval_x, float)[None, :]).items()}
    return RiskSpec("y", np.asarray(train_x, float), tr, np.asarray(eval_x, float), {"y": ev["y"]},
                    delta, delta if delta_prime is None else delta_prime)


THRESH_TRUE = {"u": 4.5, "v0": 2.5, "v1": 6.5}


def _thresh_eval(p, x):
    coarse = (x >= p["u"]).astype(np.float64)
    fine = coarse + (x >= p["v0"]) + (x >= p["v1"])
    return {"coarse": coarse, "fine": fine}


def threshold_space(lo: float = 0.5, hi: float = 8.5, step: float = 1.0) -> HypothesisSpace:
    """Counting classifier ``fine = [x>=v0] + [x>=u] + [x>=v1]`` whose hidden unit ``[x>=u]`` is the coarse class."""
    t = np.arange(lo, hi + step / 2, step)
    return HypothesisSpace("threshold", {"u": t, "v0": t, "v1": t}, _thresh_eval, ("coarse", "fine"))


def threshold_riskspec(delta: float = 0.01, delta_prime: Optional[float] = None,
                       train_x=(1, 3, 5, 7), eval_x=(0, 2, 4, 6, 8)) -> RiskSpec:
    p = {k: np.asarray([[v]]) for k, v in THRESH_TRUE.items()}
    tr = {k: v[0] for k, v in _thresh_eval(p, np.asarray(train_x, float)[None, :]).items()}
    ev = {k: v[0] for k, v in _thresh_eval(p, np.asarray(eval_x, float)[None, :]).items()}
    losses = {"fine": INDICATOR, "coarse": INDICATOR}
    return RiskSpec("fine", np.asarray(train_x, float), tr, np.asarray(eval_x, float), {"fine": ev["fine"]},
                    delta, delta if delta_prime is None else delta_prime, losses)


def t_closed(space: HypothesisSpace, main: str, name: str, T: Callable[[np.ndarray], np.ndarray]) -> HypothesisSpace:
    """Add concept ``name = T(main output)``: a constraint read out at the main task's own depth."""
    inner = space.evaluate

    def evaluate(p, x):
        out = dict(inner(p, x))
        out[name] = T(out[main])
        return out

    return HypothesisSpace(f"{space.name}+T", space.grid, evaluate, space.concepts + (name,))


def with_t_labels(spec: RiskSpec, name: str, T: Callable[[np.ndarray], np.ndarray], loss: str = INDICATOR) -> RiskSpec:
    ty = dict(spec.train_y)
    ty[name] = T(np.asarray(spec.train_y[spec.main]))
    losses = dict(spec.losses)
    losses[name] = loss
    return RiskSpec(spec.main, spec.train_x, ty, spec.eval_x, spec.eval_y, spec.delta, spec.delta_prime, losses)
