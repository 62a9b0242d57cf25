"""Loss/error evaluation, interpolation barriers and derived experiments."""

from __future__ import annotations

import csv
import io as _io
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .align import fixed_points, match
from .data import Dataset
from .model import (
    NetworkParams,
    Permutation,
    apply_permutation,
    build_mlp_spec,
    check_same_arch,
    compose,
    forward,
    interpolate,
    invert,
)

EVAL_LIMIT = 10_000
DEFAULT_ALPHAS = 25


class DegeneratePlaneError(ValueError):
    pass


@dataclass(frozen=True)
class EvalResult:
    mean_cross_entropy: float
    error_rate: float
    n_examples: int


def evaluate(params: NetworkParams, data: Dataset, batch_size: int = 2000) -> EvalResult:
    """Mean softmax cross-entropy and 0-1 error over the whole split."""
    n = len(data)
    if n == 0:
        raise ValueError("cannot evaluate on an empty split")
    nll = np.empty(n)
    wrong = np.empty(n, dtype=bool)
    for i in range(0, n, batch_size):
        logits = forward(params, data.features[i:i + batch_size])
        y = data.labels[i:i + batch_size]
        shifted = logits - logits.max(axis=1, keepdims=True)
        logz = np.log(np.exp(shifted).sum(axis=1))
        nll[i:i + batch_size] = logz - shifted[np.arange(len(y)), y]
        wrong[i:i + batch_size] = logits.argmax(axis=1) != y
    return EvalResult(math.fsum(nll.tolist()) / n, float(wrong.sum()) / n, n)


@dataclass(frozen=True)
class SplitCurve:
    loss: tuple[float, ...]
    error: tuple[float, ...]
    barrier_loss: float
    barrier_error: float

    @property
    def loss_a(self) -> float:
        return self.loss[-1]

    @property
    def loss_b(self) -> float:
        return self.loss[0]


@dataclass(frozen=True)
class BarrierCurve:
    alphas: tuple[float, ...]
    splits: Mapping[str, SplitCurve]

    def __getitem__(self, split: str) -> SplitCurve:
        return self.splits[split]

    def summary(self) -> dict[str, float]:
        out = {}
        for name, c in self.splits.items():
            out[f"barrier_loss_{name}"] = c.barrier_loss
            out[f"barrier_error_{name}"] = c.barrier_error
        return out

    def to_csv(self) -> str:
        buf = _io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["alpha", "split", "loss", "error"])
        for name, c in self.splits.items():
            for al, lo, er in zip(self.alphas, c.loss, c.error):
                w.writerow([repr(al), name, repr(lo), repr(er)])
        return buf.getvalue()


def alpha_grid(n_alpha: int) -> np.ndarray:
    if n_alpha < 2:
        raise ValueError("n_alpha must be >= 2")
    return np.arange(n_alpha) / (n_alpha - 1)


def barrier_from_values(alphas: Sequence[float], values: Sequence[float]) -> float:
    """``max_alpha v(alpha) - (alpha * v(1) + (1 - alpha) * v(0))``.

    The endpoints contribute exactly 0, and the chord is written as
    ``v(0) + alpha * (v(1) - v(0))`` so a flat path gives exactly 0.
    """
    alphas = np.asarray(alphas, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    chord = values[0] + alphas[1:-1] * (values[-1] - values[0])
    return float(max(0.0, np.max(values[1:-1] - chord, initial=0.0)))


def _as_splits(data) -> dict[str, Dataset]:
    if isinstance(data, Dataset):
        return {data.split: data}
    if hasattr(data, "splits"):
        data = data.splits()
    return {k: v.head(EVAL_LIMIT) for k, v in data.items()}


def barrier_curve(a: NetworkParams, b: NetworkParams, data, n_alpha: int = DEFAULT_ALPHAS,
                  alphas: Sequence[float] | None = None) -> BarrierCurve:
    """Evaluate ``interpolate(a, b, alpha)`` on every split over the grid.

    ``data`` is a Dataset, a DataBundle or a mapping of split name to
    Dataset. Splits are capped at 10k examples.
    """
    check_same_arch(a, b)
    grid = np.asarray(alphas, dtype=np.float64) if alphas is not None else alpha_grid(n_alpha)
    if grid[0] != 0.0 or grid[-1] != 1.0 or np.any(np.diff(grid) <= 0):
        raise ValueError("alphas must increase strictly from 0 to 1")
    splits = _as_splits(data)
    losses = {k: [] for k in splits}
    errors = {k: [] for k in splits}
    for al in grid:
        net = interpolate(a, b, float(al))
        for name, ds in splits.items():
            r = evaluate(net, ds)
            losses[name].append(r.mean_cross_entropy)
            errors[name].append(r.error_rate)
    curves = {
        name: SplitCurve(
            tuple(losses[name]), tuple(errors[name]),
            barrier_from_values(grid, losses[name]), barrier_from_values(grid, errors[name]),
        )
        for name in splits
    }
    return BarrierCurve(tuple(float(x) for x in grid), curves)


def bootstrap_threshold(params: NetworkParams, data: Dataset, n_boot: int = 200,
                        seed: int = 0, k: float = 2.0) -> float:
    """``k`` standard deviations of the bootstrap error-rate estimator."""
    data = data.head(EVAL_LIMIT)
    wrong = (forward(params, data.features).argmax(axis=1) != data.labels).astype(np.float64)
    rng = np.random.Generator(np.random.PCG64(seed))
    idx = rng.integers(0, len(wrong), size=(n_boot, len(wrong)))
    return float(k * wrong[idx].mean(axis=1).std(ddof=1))


def is_linearly_connected(a: NetworkParams, b: NetworkParams, data, threshold: float | None = None,
                          n_alpha: int = DEFAULT_ALPHAS) -> bool:
    """Test-split error barrier at most ``threshold``.

    Without a threshold, twice the bootstrap std of the error estimate of
    ``a`` on the test split is used.
    """
    splits = _as_splits(data)
    test = splits.get("test") or next(iter(splits.values()))
    if threshold is None:
        threshold = bootstrap_threshold(a, test)
    if threshold < 0:
        raise ValueError("threshold must be >= 0")
    if math.isinf(threshold):
        return True
    curve = barrier_curve(a, b, {"test": test}, n_alpha)
    return curve["test"].barrier_error <= threshold


@dataclass(frozen=True)
class TripletResult:
    direct: BarrierCurve
    indirect: BarrierCurve
    fp_counts: tuple[int, ...]
    fp_fraction: float

    def direct_barrier(self, split: str = "test", kind: str = "loss") -> float:
        return getattr(self.direct[split], f"barrier_{kind}")

    def indirect_barrier(self, split: str = "test", kind: str = "loss") -> float:
        return getattr(self.indirect[split], f"barrier_{kind}")


def triplet_test(a: NetworkParams, b: NetworkParams, c: NetworkParams, matcher: str, data,
                 *, seed: int = 0, n_alpha: int = DEFAULT_ALPHAS) -> TripletResult:
    """Indirect alignment of ``a`` and ``b`` through the reference ``c``."""
    check_same_arch(a, b)
    check_same_arch(a, c)
    spec = build_mlp_spec(a.arch)
    train = data.train if hasattr(data, "train") else None
    kw = {"data": train, "spec": spec, "seed": seed}
    p_ac = match(c, a, matcher, **kw).permutation
    p_bc = match(c, b, matcher, **kw).permutation
    p_ba = match(a, b, matcher, **kw).permutation
    indirect = barrier_curve(apply_permutation(a, spec, p_ac), apply_permutation(b, spec, p_bc),
                             data, n_alpha)
    direct = barrier_curve(a, apply_permutation(b, spec, p_ba), data, n_alpha)
    via_c = compose(invert(p_ac), p_bc)
    counts, frac = fixed_points(via_c, p_ba)
    return TripletResult(direct, indirect, tuple(counts), frac)


@dataclass(frozen=True)
class InstabilityResult:
    spawn_epoch: int
    child_barrier: BarrierCurve
    cross_barrier: BarrierCurve | None = None


def instability(parent, config, data, spawn_epoch: int, child_seeds: Sequence[int],
                *, other_parent=None, p_end: Permutation | None = None,
                n_alpha: int = DEFAULT_ALPHAS) -> InstabilityResult:
    """Barrier between two children spawned from ``parent`` at ``spawn_epoch``.

    With ``other_parent`` (a second run trained with its own config passed as
    ``(checkpoints, config)``) and ``p_end``, also reports the barrier between
    the first child of each parent with ``p_end`` applied to the second.
    """
    from .train import spawn_children

    if len(child_seeds) != 2:
        raise ValueError("need exactly two child seeds")
    c1, c2 = spawn_children(parent, config, data.train, spawn_epoch, child_seeds)
    child = barrier_curve(c1.params, c2.params, data, n_alpha)
    cross = None
    if other_parent is not None and p_end is not None:
        other_ckpts, other_cfg = other_parent
        (d1,) = spawn_children(other_ckpts, other_cfg, data.train, spawn_epoch, child_seeds[:1])
        spec = build_mlp_spec(c1.params.arch)
        cross = barrier_curve(c1.params, apply_permutation(d1.params, spec, p_end), data, n_alpha)
    return InstabilityResult(spawn_epoch, child, cross)


@dataclass(frozen=True)
class LandscapeResult:
    xs: np.ndarray
    ys: np.ndarray
    loss: np.ndarray  # (ny, nx)
    error: np.ndarray
    anchors: np.ndarray  # (3, 2) coordinates of p0, p1, p2
    projected: np.ndarray  # (m, 2)

    def to_csv(self) -> str:
        buf = _io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["x", "y", "loss", "error"])
        for iy, y in enumerate(self.ys):
            for ix, x in enumerate(self.xs):
                w.writerow([repr(float(x)), repr(float(y)), repr(float(self.loss[iy, ix])),
                            repr(float(self.error[iy, ix]))])
        return buf.getvalue()


class Plane:
    """Affine plane through three parameter points with an orthonormal basis."""

    def __init__(self, p0: NetworkParams, p1: NetworkParams, p2: NetworkParams, rtol: float = 1e-9):
        check_same_arch(p0, p1)
        check_same_arch(p0, p2)
        self.arch = p0.arch
        self.origin = p0.flatten()
        e1 = p1.flatten() - self.origin
        e2 = p2.flatten() - self.origin
        n1 = np.linalg.norm(e1)
        if n1 == 0 or np.linalg.norm(e2) == 0:
            raise DegeneratePlaneError("anchor points coincide")
        self.u = e1 / n1
        v = e2 - np.dot(e2, self.u) * self.u
        nv = np.linalg.norm(v)
        if nv <= rtol * np.linalg.norm(e2):
            raise DegeneratePlaneError("anchor points are collinear")
        self.v = v / nv

    def project(self, p: NetworkParams) -> tuple[float, float]:
        d = p.flatten() - self.origin
        return float(np.dot(d, self.u)), float(np.dot(d, self.v))

    def point(self, x: float, y: float) -> NetworkParams:
        return NetworkParams.unflatten(self.arch, self.origin + x * self.u + y * self.v)


def landscape_projection(p0: NetworkParams, p1: NetworkParams, p2: NetworkParams, data: Dataset,
                         grid: tuple[int, int] = (64, 64), margin: float = 0.2,
                         points: Sequence[NetworkParams] = ()) -> LandscapeResult:
    plane = Plane(p0, p1, p2)
    anchors = np.array([plane.project(p) for p in (p0, p1, p2)])
    projected = np.array([plane.project(p) for p in points]).reshape(-1, 2)
    lo = anchors.min(axis=0)
    hi = anchors.max(axis=0)
    pad = margin * (hi - lo)
    nx, ny = grid
    xs = np.linspace(lo[0] - pad[0], hi[0] + pad[0], nx)
    ys = np.linspace(lo[1] - pad[1], hi[1] + pad[1], ny)
    data = data.head(EVAL_LIMIT)
    loss = np.empty((ny, nx))
    err = np.empty((ny, nx))
    for iy, y in enumerate(ys):
        for ix, x in enumerate(xs):
            r = evaluate(plane.point(x, y), data)
            loss[iy, ix] = r.mean_cross_entropy
            err[iy, ix] = r.error_rate
    return LandscapeResult(xs, ys, loss, err, anchors, projected)
