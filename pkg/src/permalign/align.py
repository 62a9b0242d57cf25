"""Permutation finding: weight matching, activation matching and diagnostics.

All matchers return the permutation to apply to ``b`` so that it lines up
with ``a``: ``apply_permutation(b, spec, report.permutation)`` approximates
``a``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .lsa import solve_lsa
from .model import (
    NetworkParams,
    Permutation,
    PermutationSpec,
    SpecError,
    apply_permutation,
    build_mlp_spec,
    check_same_arch,
    hidden_activations,
)

NORM_PREFIXES = ("b", "g", "s")
PARTIAL_MODES = ("bottom_up", "top_down", "put_in", "leave_out")


@dataclass(frozen=True)
class MatchReport:
    permutation: Permutation
    total_similarity: float
    sweeps: int
    similarity_per_sweep: tuple[float, ...]
    group_similarity: tuple[float, ...] = ()
    method: str = "weight"

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "total_similarity": self.total_similarity,
            "sweeps": self.sweeps,
            "similarity_per_sweep": list(self.similarity_per_sweep),
            "group_similarity": list(self.group_similarity),
        }


def _masked(params: NetworkParams, mask) -> NetworkParams:
    if mask is None:
        return params
    arrays = getattr(mask, "arrays", mask)
    updates = {}
    for name, m in arrays.items():
        if name not in params.tensors or params[name].shape != np.shape(m):
            raise SpecError(f"mask entry {name!r} does not match the parameters")
        updates[name] = params[name] * np.asarray(m, dtype=np.float64)
    return params.replace(**updates)


def _feature_targets(spec: PermutationSpec, group: int, include_norm: bool):
    for name, axis in spec.groups[group].targets:
        if not include_norm and name[0] in NORM_PREFIXES:
            continue
        yield name, axis


def group_params(params: NetworkParams, spec: PermutationSpec, group: int, mask=None,
                 *, include_norm: bool = True) -> np.ndarray:
    """Stack every tensor slice the group permutes into a ``(d, q)`` matrix."""
    if not 0 <= group < len(spec):
        raise IndexError(f"group {group} out of range")
    params = _masked(params, mask)
    d = spec.groups[group].size
    cols = [np.moveaxis(params[name], axis, 0).reshape(d, -1)
            for name, axis in _feature_targets(spec, group, include_norm)]
    return np.concatenate(cols, axis=1)


def gram(rows_a: np.ndarray, rows_b: np.ndarray) -> np.ndarray:
    rows_a = np.asarray(rows_a, dtype=np.float64)
    rows_b = np.asarray(rows_b, dtype=np.float64)
    if rows_a.shape != rows_b.shape or rows_a.ndim != 2:
        raise ValueError(f"shape mismatch: {rows_a.shape} vs {rows_b.shape}")
    return rows_a @ rows_b.T


def similarity(a: NetworkParams, b: NetworkParams, spec: PermutationSpec | None = None,
               *, include_norm: bool = True) -> float:
    """Inner product of all tensors the permutation groups touch (the matching objective)."""
    spec = spec or build_mlp_spec(a.arch)
    names = {n for k in range(len(spec)) for n, _ in _feature_targets(spec, k, include_norm)}
    return float(sum(np.vdot(a[n], b[n]) for n in a.tensors if n in names))


def _apply_group(params: NetworkParams, spec: PermutationSpec, group: int,
                 p: np.ndarray) -> NetworkParams:
    updates = {name: np.take(params[name], p, axis=axis) for name, axis in spec.groups[group].targets}
    return params.replace(**updates)


def weight_match(a: NetworkParams, b: NetworkParams, spec: PermutationSpec | None = None,
                 seed: int = 0, max_sweeps: int = 100, mask_a=None, mask_b=None,
                 *, include_norm: bool = True) -> MatchReport:
    """Greedy coordinate ascent over permutation groups, one assignment per group.

    Each sweep visits the groups in a seeded random order and solves one
    assignment per group against the current permuted ``b``. The loop ends
    when the global similarity fails to strictly increase or after
    ``max_sweeps`` sweeps.
    """
    check_same_arch(a, b)
    if max_sweeps < 1:
        raise ValueError("max_sweeps must be >= 1")
    spec = spec or build_mlp_spec(a.arch)
    a = _masked(a, mask_a)
    b = _masked(b, mask_b)
    rng = np.random.Generator(np.random.PCG64(seed))
    rows_a = [group_params(a, spec, k, include_norm=include_norm) for k in range(len(spec))]
    total = spec.identity()
    cur = b
    history: list[float] = []
    last = -np.inf
    sweeps = 0
    while sweeps < max_sweeps:
        sweeps += 1
        for k in rng.permutation(len(spec)):
            g = gram(rows_a[k], group_params(cur, spec, k, include_norm=include_norm))
            p, _ = solve_lsa(g)
            if not np.array_equal(p, np.arange(p.size)):
                cur = _apply_group(cur, spec, k, p)
                perms = list(total.perms)
                perms[k] = perms[k][p]
                total = Permutation(tuple(perms))
        sim = similarity(a, cur, spec, include_norm=include_norm)
        history.append(sim)
        if not sim > last:
            break
        last = sim
    group_sim = tuple(
        float(np.trace(gram(rows_a[k], group_params(cur, spec, k, include_norm=include_norm))))
        for k in range(len(spec))
    )
    return MatchReport(total, history[-1], sweeps, tuple(history), group_sim, "weight")


def _batched(x: np.ndarray, batch_size: int | None) -> Iterable[np.ndarray]:
    if batch_size is None:
        yield x
        return
    for i in range(0, x.shape[0], batch_size):
        yield x[i:i + batch_size]


def activation_grams(a: NetworkParams, b: NetworkParams, inputs: np.ndarray,
                     batch_size: int | None = 1000) -> list[np.ndarray]:
    """Per hidden layer, ``H_a^T H_b`` over all inputs (float64 accumulation)."""
    check_same_arch(a, b)
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.shape[0] == 0:
        raise ValueError("activation matching needs a non-empty dataset")
    grams = [np.zeros((d, d)) for d in a.arch.hidden_dims]
    for xb in _batched(inputs, batch_size):
        ha = hidden_activations(a, xb)[:-1]
        hb = hidden_activations(b, xb)[:-1]
        for g, x, y in zip(grams, ha, hb):
            g += x.T @ y
    return grams


def activation_match(a: NetworkParams, b: NetworkParams, spec: PermutationSpec | None = None,
                     data=None, batch_size: int | None = 1000) -> MatchReport:
    """One assignment per hidden layer on post-activation correlations.

    Each layer's activations depend on a single permutation, so one pass in
    depth order is exact for this objective. ``data`` is a Dataset (its
    features are used) or a raw input matrix; pass the training split.
    """
    spec = spec or build_mlp_spec(a.arch)
    if data is None:
        raise ValueError("activation matching needs data")
    inputs = getattr(data, "features", data)
    if len(spec) != len(a.arch.hidden_dims):
        raise SpecError("activation matching expects one group per hidden layer")
    perms, sims = [], []
    for g in activation_grams(a, b, inputs, batch_size):
        p, obj = solve_lsa(g)
        perms.append(p)
        sims.append(obj)
    total = float(sum(sims))
    return MatchReport(Permutation(tuple(perms)), total, 1, (total,), tuple(sims), "activation")


def match(a: NetworkParams, b: NetworkParams, method: str = "weight", *, data=None,
          spec: PermutationSpec | None = None, seed: int = 0, max_sweeps: int = 100,
          mask_a=None, mask_b=None) -> MatchReport:
    if method == "weight":
        return weight_match(a, b, spec, seed, max_sweeps, mask_a, mask_b)
    if method == "activation":
        if mask_a is not None or mask_b is not None:
            a, b = _masked(a, mask_a), _masked(b, mask_b)
        return activation_match(a, b, spec, data)
    raise ValueError(f"unknown matching method {method!r}")


def align(a: NetworkParams, b: NetworkParams, method: str = "weight", **kwargs) -> tuple[NetworkParams, MatchReport]:
    """Match ``b`` to ``a`` and return the permuted ``b`` with the report."""
    spec = kwargs.pop("spec", None) or build_mlp_spec(a.arch)
    report = match(a, b, method, spec=spec, **kwargs)
    return apply_permutation(b, spec, report.permutation), report


def partial_perm(p_t: Permutation, p_end: Permutation, mode: str, k: int) -> Permutation:
    """Splice two permutations group-wise.

    bottom_up: groups ``< k`` from ``p_t``; top_down: groups ``>= k`` from
    ``p_t``; put_in: only group ``k`` from ``p_t``; leave_out: every group
    but ``k`` from ``p_t``. All other groups come from ``p_end``.
    """
    if p_t.sizes != p_end.sizes:
        raise SpecError("permutations disagree in group sizes")
    n = len(p_t)
    if mode not in PARTIAL_MODES:
        raise ValueError(f"mode must be one of {PARTIAL_MODES}")
    upper = n if mode in ("bottom_up", "top_down") else n - 1
    if not 0 <= k <= upper:
        raise IndexError(f"k={k} out of range for {n} groups in mode {mode}")
    if mode == "bottom_up":
        use_t = [g < k for g in range(n)]
    elif mode == "top_down":
        use_t = [g >= k for g in range(n)]
    elif mode == "put_in":
        use_t = [g == k for g in range(n)]
    else:
        use_t = [g != k for g in range(n)]
    return Permutation(tuple(pt if t else pe for pt, pe, t in zip(p_t.perms, p_end.perms, use_t)))


def fixed_points(p: Permutation, q: Permutation) -> tuple[list[int], float]:
    if p.sizes != q.sizes:
        raise SpecError("permutations disagree in group sizes")
    counts = [int(np.sum(a == b)) for a, b in zip(p.perms, q.perms)]
    return counts, sum(counts) / sum(p.sizes)
