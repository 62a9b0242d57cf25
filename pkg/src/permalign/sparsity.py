"""Magnitude pruning, IMP with weight rewinding, and mask transport.

Only weight matrices are prunable. Ranking is global over all unpruned
weights; equal magnitudes are broken by (layer index, row-major flat index).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import io
from .connectivity import EvalResult, evaluate
from .data import Dataset
from .model import (
    ArchitectureSpec,
    NetworkParams,
    Permutation,
    PermutationSpec,
    ShapeError,
    apply_permutation,
    build_mlp_spec,
    permute_tensors,
)
from .train import Checkpoint, TrainConfig, train

PRUNE_FRACTION = 0.2


class MaskMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class Mask:
    """Boolean keep-mask per weight matrix (True = kept)."""

    arrays: Mapping[str, np.ndarray]

    def __post_init__(self):
        arrays = {}
        for name in sorted(self.arrays, key=_layer_key):
            a = np.asarray(self.arrays[name])
            if a.dtype != bool:
                if not np.all((a == 0) | (a == 1)):
                    raise MaskMismatchError(f"mask {name} has entries outside {{0, 1}}")
                a = a.astype(bool)
            a = a.copy()
            a.flags.writeable = False
            arrays[name] = a
        object.__setattr__(self, "arrays", arrays)

    @classmethod
    def ones(cls, arch: ArchitectureSpec) -> "Mask":
        shapes = arch.tensor_shapes()
        return cls({n: np.ones(shapes[n], dtype=bool) for n in arch.weight_names()})

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    @property
    def total(self) -> int:
        return int(sum(a.size for a in self.arrays.values()))

    @property
    def nonzero(self) -> int:
        return int(sum(np.count_nonzero(a) for a in self.arrays.values()))

    @property
    def density(self) -> float:
        return self.nonzero / self.total

    def check_params(self, params: NetworkParams) -> None:
        expected = set(params.arch.weight_names())
        if set(self.arrays) != expected:
            raise ShapeError(f"mask covers {sorted(self.arrays)}, expected {sorted(expected)}")
        for name, a in self.arrays.items():
            if a.shape != params[name].shape:
                raise ShapeError(f"mask {name} has shape {a.shape}, weights {params[name].shape}")

    def is_nested_in(self, coarser: "Mask") -> bool:
        """True when every weight pruned by ``coarser`` is also pruned here."""
        return set(self.arrays) == set(coarser.arrays) and all(
            not np.any(self.arrays[k] & ~coarser.arrays[k]) for k in self.arrays
        )

    def equals(self, other: "Mask") -> bool:
        return set(self.arrays) == set(other.arrays) and all(
            np.array_equal(self.arrays[k], other.arrays[k]) for k in self.arrays
        )


def _layer_key(name: str) -> tuple[str, int]:
    return name[0], int(name[1:]) if name[1:].isdigit() else -1


def kept_after(total: int, level: int, fraction: float = PRUNE_FRACTION) -> int:
    """Survivor count after ``level`` rounds that each prune floor(fraction * kept)."""
    kept = total
    for _ in range(level):
        kept -= int(np.floor(fraction * kept))
    return kept


def _prune_to(params: NetworkParams, current: Mask, n_prune: int) -> Mask:
    names = list(current.arrays)
    mags = np.concatenate([np.abs(params[n]).ravel() for n in names])
    keep = np.concatenate([current[n].ravel() for n in names])
    alive = np.flatnonzero(keep)
    if n_prune > alive.size:
        raise ValueError(f"cannot prune {n_prune} of {alive.size} remaining weights")
    # stable sort over (layer, flat index) order gives the tie-break
    order = np.argsort(mags[alive], kind="stable")
    keep = keep.copy()
    keep[alive[order[:n_prune]]] = False
    out, pos = {}, 0
    for n in names:
        size = current[n].size
        out[n] = keep[pos:pos + size].reshape(current[n].shape)
        pos += size
    return Mask(out)


def magnitude_prune(params: NetworkParams, current: Mask | None, fraction: float) -> Mask:
    """Prune the smallest floor(fraction * unpruned) weights globally."""
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"fraction must lie in (0, 1), got {fraction}")
    current = current if current is not None else Mask.ones(params.arch)
    current.check_params(params)
    return _prune_to(params, current, int(np.floor(fraction * current.nonzero)))


def one_shot_prune(params: NetworkParams, level: int, fraction: float = PRUNE_FRACTION) -> Mask:
    """One global pruning step to the survivor count IMP reaches at ``level``."""
    if level < 1:
        raise ValueError("level must be >= 1")
    full = Mask.ones(params.arch)
    return _prune_to(params, full, full.total - kept_after(full.total, level, fraction))


def random_prune(arch: ArchitectureSpec, fraction: float, seed: int) -> Mask:
    """Global uniform-random pruning of floor(fraction * total) weights."""
    if not 0.0 <= fraction < 1.0:
        raise ValueError(f"fraction must lie in [0, 1), got {fraction}")
    full = Mask.ones(arch)
    n_prune = int(np.floor(fraction * full.total))
    rng = np.random.Generator(np.random.PCG64(seed))
    scores = NetworkParams(arch, {
        k: (rng.random(s) if k[0] == "W" else np.zeros(s)) for k, s in arch.tensor_shapes().items()
    })
    return _prune_to(scores, full, n_prune)


def apply_mask(params: NetworkParams, mask: Mask) -> NetworkParams:
    mask.check_params(params)
    return params.replace(**{n: params[n] * m for n, m in mask.arrays.items()})


def permute_mask(mask: Mask, spec: PermutationSpec, perm: Permutation) -> Mask:
    """Relabel mask entries exactly as ``apply_permutation`` relabels weights."""
    return Mask(permute_tensors(mask.arrays, spec, perm, strict=False))


# -- files ---------------------------------------------------------------------

def save_mask(path, mask: Mask, *, level: int, parent_run_id: str = "") -> None:
    meta = {"level": int(level), "density": mask.density, "parent_run_id": parent_run_id}
    tensors = {f"m_{n}": a.astype(np.uint8) for n, a in mask.arrays.items()}
    io.write_container(path, io.MASK_MAGIC, meta, tensors)


def load_mask(path) -> tuple[Mask, dict]:
    meta, tensors = io.read_container(path, io.MASK_MAGIC)
    bad = [k for k in tensors if not k.startswith("m_")]
    if bad:
        raise io.FormatError(f"unexpected mask tensors {bad}")
    return Mask({k[2:]: v for k, v in tensors.items()}), meta


# -- IMP -------------------------------------------------------------------------

@dataclass(frozen=True)
class ImpLevel:
    level: int
    mask: Mask
    checkpoints: tuple[Checkpoint, ...]
    eval: EvalResult | None = None

    @property
    def final(self) -> Checkpoint:
        return self.checkpoints[-1]


@dataclass(frozen=True)
class ImpRun:
    levels: tuple[ImpLevel, ...]
    rewind_epoch: int
    config: TrainConfig
    dense_run: tuple[Checkpoint, ...] = field(default=(), compare=False)

    @property
    def rewind(self) -> Checkpoint:
        return _checkpoint_at(self.dense_run, self.rewind_epoch)


def default_rewind_epoch(epochs: int) -> int:
    return max(0, min(epochs - 1, round(0.1 * epochs)))


def _checkpoint_at(run: Sequence[Checkpoint], epoch: int) -> Checkpoint:
    for c in run:
        if c.epoch == epoch:
            return c
    raise KeyError(f"no checkpoint at epoch {epoch}")


def retrain_masked(start: NetworkParams, mask: Mask | None, config: TrainConfig, data: Dataset,
                   start_epoch: int) -> list[Checkpoint]:
    """Train from ``start`` at ``start_epoch`` to the end with fresh momentum.

    Returns the checkpoints ``config`` asks for from ``start_epoch`` on.
    """
    init = apply_mask(start, mask) if mask is not None else start
    return train(config, data, mask, init=init, start_epoch=start_epoch, keep_momentum=False)


def imp(config: TrainConfig, data: Dataset, levels: int, rewind_epoch: int | None = None, *,
        lr_rewind: bool = False, eval_data: Dataset | None = None,
        dense_run: Sequence[Checkpoint] | None = None,
        fraction: float = PRUNE_FRACTION) -> ImpRun:
    """Iterative magnitude pruning with rewinding to ``rewind_epoch``.

    Each level prunes ``fraction`` of the surviving weights of the previous
    level's trained network, rewinds survivors to their values at
    ``rewind_epoch`` (or, with ``lr_rewind``, keeps the trained values) and
    retrains to the final epoch with the mask enforced after every step.
    """
    if levels < 0:
        raise ValueError("levels must be >= 0")
    if rewind_epoch is None:
        rewind_epoch = default_rewind_epoch(config.epochs)
    if not 0 <= rewind_epoch < max(config.epochs, 1):
        raise ValueError(f"rewind_epoch {rewind_epoch} must be < epochs ({config.epochs})")
    if dense_run is None:
        dense_cfg = config
        if config.checkpoint_epochs is not None:
            keep = set(config.checkpoint_epochs) | {rewind_epoch, config.epochs}
            dense_cfg = config.replace(checkpoint_epochs=tuple(keep))
        dense_run = train(dense_cfg, data)
    dense_run = tuple(dense_run)
    rewind = _checkpoint_at(dense_run, rewind_epoch)
    final = _checkpoint_at(dense_run, config.epochs)
    mask = Mask.ones(config.arch)

    def record(level: int, m: Mask, ckpts: Sequence[Checkpoint]) -> ImpLevel:
        ev = evaluate(ckpts[-1].params, eval_data) if eval_data is not None else None
        return ImpLevel(level, m, tuple(ckpts), ev)

    out = [record(0, mask, [c for c in dense_run if c.epoch >= rewind_epoch])]
    for level in range(1, levels + 1):
        mask = magnitude_prune(final.params, mask, fraction)
        start = final.params if lr_rewind else rewind.params
        run = retrain_masked(start, mask, config, data, rewind_epoch)
        final = run[-1]
        out.append(record(level, mask, run))
    return ImpRun(tuple(out), rewind_epoch, config, dense_run)


# -- transport -----------------------------------------------------------------

@dataclass(frozen=True)
class TransportRecord:
    level: int
    density: float
    permuted: EvalResult
    naive: EvalResult
    one_shot: EvalResult

    def accuracies(self) -> dict[str, float]:
        return {k: 1.0 - getattr(self, k).error_rate for k in ("permuted", "naive", "one_shot")}


def transport_mask(mask_a: Mask, level: int, p_dense: Permutation, b_rewind: Checkpoint,
                   b_final: NetworkParams, config: TrainConfig, data: Dataset,
                   eval_data: Dataset, spec: PermutationSpec | None = None,
                   fraction: float = PRUNE_FRACTION) -> TransportRecord:
    """Retrain ``B`` from its rewind point under three masks of equal sparsity.

    permuted: ``B`` permuted by ``p_dense`` (which aligns dense ``B`` to dense
    ``A``) with ``mask_a`` applied; naive: ``mask_a`` on unpermuted ``B``;
    one_shot: ``B``'s own one-shot magnitude mask at ``level``.
    """
    spec = spec or build_mlp_spec(config.arch)
    expected = kept_after(mask_a.total, level, fraction)
    if mask_a.nonzero != expected:
        raise MaskMismatchError(
            f"mask keeps {mask_a.nonzero} weights but level {level} keeps {expected}"
        )
    start = b_rewind.epoch
    if level == 0:
        baseline = Mask.ones(config.arch)
    else:
        baseline = one_shot_prune(b_final, level, fraction)
    b_perm = apply_permutation(b_rewind.params, spec, p_dense)
    config = config.replace(checkpoint_epochs=(config.epochs,))
    arms = {
        "permuted": retrain_masked(b_perm, mask_a, config, data, start),
        "naive": retrain_masked(b_rewind.params, mask_a, config, data, start),
        "one_shot": retrain_masked(b_rewind.params, baseline, config, data, start),
    }
    evals = {k: evaluate(run[-1].params, eval_data) for k, run in arms.items()}
    return TransportRecord(level, mask_a.density, **evals)
