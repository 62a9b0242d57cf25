"""Desk-scale experiment drivers behind the CLI subcommands.

A manifest is a flat ``key=value`` file mixing training keys (see
``TrainConfig.to_flat``) with the experiment keys below. Replicate ``r``
trains network ``j`` (1 = A, 2 = B, 3 = C) with ``init_seed = seed + 1000 r
+ j`` and ``data_order_seed = seed + 1000 r + 100 + j``.

Replicate jobs are pure functions of ``(manifest, r)`` returning rows and
binary artifacts, so results are identical for any ``--jobs`` setting.
"""

from __future__ import annotations

import functools
import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import io
from .align import match, partial_perm
from .connectivity import barrier_curve, instability, landscape_projection, triplet_test
from .data import DataBundle, load_data
from .model import ArchitectureSpec, NetworkParams, Permutation, apply_permutation, build_mlp_spec
from .sparsity import (
    Mask,
    apply_mask,
    imp,
    magnitude_prune,
    random_prune,
    transport_mask,
)
from .train import (
    TRAIN_KEYS,
    Checkpoint,
    ConfigError,
    TrainConfig,
    load_checkpoint,
    train,
)

DEFAULT_DATA = "synth://glyphs?n=6000&n_test=2000&seed=0"

COMMON_KEYS = {
    "data": DEFAULT_DATA,
    "replicates": "3",
    "seed": "0",
    "method": "weight",
    "n_alpha": "25",
    "max_sweeps": "100",
    "eval_limit": "10000",
}

COMMAND_KEYS: dict[str, dict[str, str]] = {
    "train": {},
    "match": {"ckpt_a": "", "ckpt_b": ""},
    "barrier": {"ckpt_a": "", "ckpt_b": "", "perm": ""},
    "trajectory": {"run_a": "", "run_b": "", "perm_source": "end", "fixed_epoch": "0"},
    "imp": {"levels": "5", "rewind_epoch": "", "lr_rewind": "false"},
    "transport": {"levels": "5", "rewind_epoch": ""},
    "triplet": {"widths": "64,128,256,512"},
    "partial": {"modes": "bottom_up", "ks": "", "rewind_epochs": ""},
    "prune-align": {"sparsities": "0,0.2,0.5,0.8", "prune_kinds": "magnitude,random",
                    "match_epochs": "", "barrier_target": "end"},
    "instability": {"spawn_epochs": "", "child_seeds": "7,8"},
    "landscape": {"anchor_epoch": "1", "perm_epoch": "", "grid": "32,32", "margin": "0.2"},
}

# commands that take the single-network keys only
SINGLE_RUN = {"train", "match", "barrier"}
PERM_SOURCES = ("end", "per_epoch", "fixed_t")
PRUNE_KINDS = ("magnitude", "random")
BARRIER_TARGETS = ("end", "pruned")
PARTIAL_ALL = ("bottom_up", "top_down", "put_in", "leave_out")


class ManifestError(ConfigError):
    pass


# -- manifest ------------------------------------------------------------------

def _ints(s: str) -> list[int]:
    return [int(x) for x in s.split(",") if x.strip()]


def _floats(s: str) -> list[float]:
    return [float(x) for x in s.split(",") if x.strip()]


def _words(s: str) -> list[str]:
    return [x.strip() for x in s.split(",") if x.strip()]


def _bool(s: str) -> bool:
    s = s.strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


@dataclass(frozen=True)
class Manifest:
    command: str
    values: Mapping[str, str]
    train_kv: Mapping[str, str] = field(default_factory=dict)
    base_dir: str = "."

    @classmethod
    def build(cls, command: str, kv: Mapping[str, str], base_dir=".") -> "Manifest":
        if command not in COMMAND_KEYS:
            raise ManifestError(f"unknown command {command!r}")
        allowed = {**COMMON_KEYS, **COMMAND_KEYS[command]}
        errors = []
        train_kv, values = {}, dict(allowed)
        for k, v in kv.items():
            if k in TRAIN_KEYS:
                train_kv[k] = v
            elif k in allowed:
                values[k] = v
            else:
                errors.append(f"unknown key {k!r}")
        m = cls(command, values, train_kv, str(base_dir))
        errors += m._validate()
        if errors:
            raise ManifestError("; ".join(errors))
        return m

    def path(self, key: str) -> Path:
        p = Path(self.values[key])
        return p if p.is_absolute() else Path(self.base_dir) / p

    def _validate(self) -> list[str]:
        v, errors = self.values, []

        def check(key, fn):
            try:
                fn(v[key])
            except (ValueError, KeyError) as exc:
                errors.append(f"{key}: {exc}")

        for key in ("replicates", "seed", "n_alpha", "max_sweeps", "eval_limit"):
            check(key, int)
        if not errors and int(v["replicates"]) < 1:
            errors.append("replicates must be >= 1")
        if v["method"] not in ("weight", "activation"):
            errors.append(f"method must be weight or activation, got {v['method']!r}")
        if self.command in ("match", "barrier"):
            for key in ("ckpt_a", "ckpt_b"):
                if not v[key]:
                    errors.append(f"missing input {key}")
                elif not self.path(key).is_file():
                    errors.append(f"input {key}={v[key]} does not exist")
            if self.command == "barrier" and v["perm"] and not self.path("perm").is_file():
                errors.append(f"input perm={v['perm']} does not exist")
        if self.command == "trajectory":
            if v["perm_source"] not in PERM_SOURCES:
                errors.append(f"perm_source must be one of {PERM_SOURCES}")
            check("fixed_epoch", int)
            given = [k for k in ("run_a", "run_b") if v[k]]
            if len(given) == 1:
                errors.append("run_a and run_b must be given together")
            for k in given:
                if not self.path(k).is_dir():
                    errors.append(f"input {k}={v[k]} is not a directory")
        if self.command in ("imp", "transport"):
            check("levels", int)
            if v["rewind_epoch"]:
                check("rewind_epoch", int)
        if self.command == "imp":
            check("lr_rewind", _bool)
        if self.command == "triplet":
            check("widths", _ints)
        if self.command == "partial":
            bad = set(_words(v["modes"])) - set(PARTIAL_ALL)
            if bad:
                errors.append(f"unknown partial modes {sorted(bad)}")
            check("ks", _ints)
            check("rewind_epochs", _ints)
        if self.command == "prune-align":
            check("sparsities", _floats)
            if not errors and any(not 0 <= s < 1 for s in _floats(v["sparsities"])):
                errors.append("sparsities must lie in [0, 1)")
            bad = set(_words(v["prune_kinds"])) - set(PRUNE_KINDS)
            if bad:
                errors.append(f"unknown prune kinds {sorted(bad)}")
            if v["barrier_target"] not in BARRIER_TARGETS:
                errors.append(f"barrier_target must be one of {BARRIER_TARGETS}")
            check("match_epochs", _ints)
        if self.command == "instability":
            check("spawn_epochs", _ints)
            check("child_seeds", _ints)
            if not errors and len(_ints(v["child_seeds"])) != 2:
                errors.append("child_seeds needs exactly two seeds")
        if self.command == "landscape":
            check("anchor_epoch", int)
            if v["perm_epoch"]:
                check("perm_epoch", int)
            check("grid", _ints)
            check("margin", float)
        if self.command not in SINGLE_RUN or self.command == "train":
            try:
                self.train_config()
            except (ConfigError, ValueError) as exc:
                errors.append(f"training config: {exc}")
        return errors

    def train_config(self) -> TrainConfig:
        return TrainConfig.from_flat(self.train_kv)

    def resolved(self) -> dict[str, str]:
        out = dict(sorted(self.values.items()))
        if self.command not in ("match", "barrier"):
            out.update({f"train.{k}": v for k, v in self.train_config().to_flat().items()})
        return out

    @property
    def replicates(self) -> int:
        if self.command in SINGLE_RUN or (self.command == "trajectory" and self.values["run_a"]):
            return 1
        return int(self.values["replicates"])


# -- helpers -------------------------------------------------------------------

@functools.lru_cache(maxsize=4)
def _data(uri: str) -> DataBundle:
    return load_data(uri)


def data_fingerprint(bundle: DataBundle) -> str:
    h = hashlib.sha256()
    for ds in (bundle.train, bundle.test):
        h.update(np.ascontiguousarray(ds.features).tobytes())
        h.update(np.ascontiguousarray(ds.labels).tobytes())
    return h.hexdigest()


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def network_seeds(base: int, replicate: int, j: int) -> tuple[int, int]:
    return base + 1000 * replicate + j, base + 1000 * replicate + 100 + j


@dataclass
class Job:
    """Everything a replicate worker needs, rebuilt inside the worker."""

    m: Manifest
    replicate: int

    def __post_init__(self):
        self.data = _data(self.m.values["data"])
        limit = int(self.m.values["eval_limit"])
        self.eval = {"train": self.data.train.head(limit), "test": self.data.test.head(limit)}
        self.n_alpha = int(self.m.values["n_alpha"])
        self.method = self.m.values["method"]

    def config(self, j: int, **changes) -> TrainConfig:
        init, order = network_seeds(int(self.m.values["seed"]), self.replicate, j)
        cfg = self.m.train_config().replace(init_seed=init, data_order_seed=order)
        return cfg.replace(**changes) if changes else cfg

    def run(self, j: int, **changes) -> dict[int, Checkpoint]:
        cfg = self.config(j, **changes)
        return {c.epoch: c for c in train(cfg, self.data.train)}

    def match(self, a: NetworkParams, b: NetworkParams, method: str | None = None) -> Permutation:
        return match(a, b, method or self.method, data=self.data.train,
                     max_sweeps=int(self.m.values["max_sweeps"])).permutation

    def curve(self, a: NetworkParams, b: NetworkParams):
        return barrier_curve(a, b, self.eval, self.n_alpha)


def _barrier_rows(curve, **ids) -> list[dict]:
    return [
        {**ids, "split": split, "loss_barrier": curve[split].barrier_loss,
         "error_barrier": curve[split].barrier_error}
        for split in curve.splits
    ]


def _load_run_dir(path: Path) -> dict[int, Checkpoint]:
    files = sorted(path.glob("ckpt_epoch*.pmlc"))
    if not files:
        raise ManifestError(f"run directory {path} has no checkpoints")
    return {c.epoch: c for c in map(load_checkpoint, files)}


# -- replicate workers -----------------------------------------------------------
# Each returns (rows, artifacts) with artifacts mapping relative path -> bytes.

Result = tuple[list[dict], dict[str, bytes]]


def job_trajectory(job: Job) -> Result:
    v = job.m.values
    if v["run_a"]:
        A, B = _load_run_dir(job.m.path("run_a")), _load_run_dir(job.m.path("run_b"))
        if sorted(A) != sorted(B):
            raise ManifestError("run_a and run_b have different checkpoint epochs")
    else:
        A, B = job.run(1, checkpoint_epochs=None), job.run(2, checkpoint_epochs=None)
    epochs = sorted(A)
    spec = build_mlp_spec(A[epochs[0]].params.arch)
    source = v["perm_source"]
    if source == "end":
        fixed = job.match(A[epochs[-1]].params, B[epochs[-1]].params)
    elif source == "fixed_t":
        t = int(v["fixed_epoch"])
        if t not in A:
            raise ManifestError(f"no checkpoint at fixed_epoch {t}")
        fixed = job.match(A[t].params, B[t].params)
    rows = []
    for t in epochs:
        a, b = A[t].params, B[t].params
        p = job.match(a, b) if source == "per_epoch" else fixed
        rows += _barrier_rows(job.curve(a, b), epoch=t, perm_source=source, aligned=0)
        rows += _barrier_rows(job.curve(a, apply_permutation(b, spec, p)),
                              epoch=t, perm_source=source, aligned=1)
    return rows, {}


def job_imp(job: Job) -> Result:
    v = job.m.values
    cfg = job.config(1)
    rewind = int(v["rewind_epoch"]) if v["rewind_epoch"] else None
    run = imp(cfg, job.data.train, int(v["levels"]), rewind,
              lr_rewind=_bool(v["lr_rewind"]), eval_data=job.data.test)
    rows, art = [], {}
    parent = f"{cfg.fingerprint()}-r{job.replicate}"
    for lv in run.levels:
        pruned = max(
            (float(np.max(np.abs(lv.final.params[n][~lv.mask[n]]), initial=0.0)) for n in lv.mask.arrays),
            default=0.0,
        )
        rows.append({
            "level": lv.level, "rewind_epoch": run.rewind_epoch, "nonzero": lv.mask.nonzero,
            "total": lv.mask.total, "density": lv.mask.density,
            "test_loss": lv.eval.mean_cross_entropy, "test_error": lv.eval.error_rate,
            "pruned_max_abs": pruned,
        })
        art[f"masks/r{job.replicate}_level{lv.level:02d}.pmsk"] = _mask_bytes(lv.mask, lv.level, parent)
    return rows, art


def _mask_bytes(mask: Mask, level: int, parent: str) -> bytes:
    meta = {"level": int(level), "density": mask.density, "parent_run_id": parent}
    return io.encode_container(io.MASK_MAGIC, meta,
                               {f"m_{n}": a.astype(np.uint8) for n, a in mask.arrays.items()})


def job_transport(job: Job) -> Result:
    v = job.m.values
    cfg_a, cfg_b = job.config(1), job.config(2)
    rewind = int(v["rewind_epoch"]) if v["rewind_epoch"] else None
    run = imp(cfg_a, job.data.train, int(v["levels"]), rewind, eval_data=job.data.test)
    rw = run.rewind_epoch
    b_run = {c.epoch: c for c in train(cfg_b.replace(checkpoint_epochs=(rw, cfg_b.epochs)), job.data.train)}
    p_dense = job.match(run.levels[0].final.params, b_run[cfg_b.epochs].params)
    rows = []
    for lv in run.levels[1:]:
        rec = transport_mask(lv.mask, lv.level, p_dense, b_run[rw], b_run[cfg_b.epochs].params,
                             cfg_b, job.data.train, job.data.test)
        acc = rec.accuracies()
        rows.append({
            "level": lv.level, "density": rec.density, "acc_imp": 1.0 - lv.eval.error_rate,
            "acc_permuted": acc["permuted"], "acc_naive": acc["naive"], "acc_one_shot": acc["one_shot"],
        })
    return rows, {}


def job_triplet(job: Job) -> Result:
    rows = []
    base = job.m.train_config().arch
    for width in _ints(job.m.values["widths"]):
        arch = ArchitectureSpec(base.input_dim, tuple(width for _ in base.hidden_dims),
                                base.output_dim, base.use_layer_norm)
        nets = [train(job.config(j, arch=arch, checkpoint_epochs=()), job.data.train)[-1].params
                for j in (1, 2, 3)]
        view = _TrainView(job.data.train, DataBundle(job.eval["train"], job.eval["test"]))
        res = triplet_test(*nets, job.method, view, n_alpha=job.n_alpha)
        for split in res.direct.splits:
            rows.append({
                "width": width, "split": split,
                "direct_loss": res.direct_barrier(split, "loss"),
                "indirect_loss": res.indirect_barrier(split, "loss"),
                "direct_error": res.direct_barrier(split, "error"),
                "indirect_error": res.indirect_barrier(split, "error"),
                "fp_fraction": res.fp_fraction,
            })
    return rows, {}


def job_partial(job: Job) -> Result:
    v = job.m.values
    A, B = job.run(1, checkpoint_epochs=None), job.run(2, checkpoint_epochs=None)
    end = max(A)
    a_end, b_end = A[end].params, B[end].params
    spec = build_mlp_spec(a_end.arch)
    n_groups = len(spec)
    p_end = job.match(a_end, b_end)
    cache: dict[bytes, object] = {}

    def curve_for(p: Permutation):
        key = b"".join(x.tobytes() for x in p.perms)
        if key not in cache:
            cache[key] = job.curve(a_end, apply_permutation(b_end, spec, p))
        return cache[key]

    rewinds = _ints(v["rewind_epochs"]) or sorted(A)
    rows = []
    for t in rewinds:
        if t not in A:
            raise ManifestError(f"no checkpoint at rewind epoch {t}")
        p_t = job.match(A[t].params, B[t].params)
        rows += _barrier_rows(curve_for(p_t), rewind_epoch=t, mode="p_t", k=-1)
        rows += _barrier_rows(curve_for(p_end), rewind_epoch=t, mode="p_end", k=-1)
        for mode in _words(v["modes"]):
            upper = n_groups if mode in ("bottom_up", "top_down") else n_groups - 1
            for k in _ints(v["ks"]) or range(upper + 1):
                p = partial_perm(p_t, p_end, mode, k)
                rows += _barrier_rows(curve_for(p), rewind_epoch=t, mode=mode, k=k)
    return rows, {}


def _prune(params: NetworkParams, kind: str, fraction: float, seed: int) -> NetworkParams:
    if fraction == 0:
        return params
    if kind == "magnitude":
        mask = magnitude_prune(params, None, fraction)
    else:
        mask = random_prune(params.arch, fraction, seed)
    return apply_mask(params, mask)


def job_prune_align(job: Job) -> Result:
    v = job.m.values
    cfg = job.config(1)
    match_epochs = _ints(v["match_epochs"]) or [cfg.epochs]
    keep = tuple(sorted(set(match_epochs) | {cfg.epochs}))
    A, B = job.run(1, checkpoint_epochs=keep), job.run(2, checkpoint_epochs=keep)
    spec = build_mlp_spec(cfg.arch)
    seed = int(v["seed"])
    rows = []
    for t in match_epochs:
        if t not in A:
            raise ManifestError(f"no checkpoint at match epoch {t}")
        for kind in _words(v["prune_kinds"]):
            for i, frac in enumerate(_floats(v["sparsities"])):
                s = seed + 1000 * job.replicate + 10 * i
                a_t = _prune(A[t].params, kind, frac, s + 1)
                b_t = _prune(B[t].params, kind, frac, s + 2)
                p = job.match(a_t, b_t, "weight")
                if v["barrier_target"] == "end":
                    curve = job.curve(A[cfg.epochs].params, apply_permutation(B[cfg.epochs].params, spec, p))
                else:
                    curve = job.curve(a_t, apply_permutation(b_t, spec, p))
                rows += _barrier_rows(curve, match_epoch=t, prune_kind=kind, sparsity=frac)
    return rows, {}


def job_instability(job: Job) -> Result:
    v = job.m.values
    cfg_a, cfg_b = job.config(1, checkpoint_epochs=None), job.config(2, checkpoint_epochs=None)
    A = train(cfg_a, job.data.train)
    B = train(cfg_b, job.data.train)
    p_end = job.match(A[-1].params, B[-1].params)
    seeds = [s + 1000 * job.replicate for s in _ints(v["child_seeds"])]
    spawn = _ints(v["spawn_epochs"]) or [c.epoch for c in A]
    eval_bundle = DataBundle(job.eval["train"], job.eval["test"])
    rows = []
    for t in spawn:
        res = instability(A, cfg_a, _TrainView(job.data.train, eval_bundle), t, seeds,
                          other_parent=(B, cfg_b), p_end=p_end, n_alpha=job.n_alpha)
        for split in res.child_barrier.splits:
            rows.append({
                "spawn_epoch": t, "split": split,
                "child_loss": res.child_barrier[split].barrier_loss,
                "child_error": res.child_barrier[split].barrier_error,
                "cross_loss": res.cross_barrier[split].barrier_loss,
                "cross_error": res.cross_barrier[split].barrier_error,
            })
    return rows, {}


class _TrainView:
    """Full train split for training, capped splits for evaluation."""

    def __init__(self, train_split, eval_bundle: DataBundle):
        self.train = train_split
        self._eval = eval_bundle

    def splits(self):
        return self._eval.splits()


def job_landscape(job: Job) -> Result:
    v = job.m.values
    A, B = job.run(1, checkpoint_epochs=None), job.run(2, checkpoint_epochs=None)
    end = max(A)
    t = int(v["anchor_epoch"])
    t_star = int(v["perm_epoch"]) if v["perm_epoch"] else end
    for e in (t, t_star):
        if e not in A:
            raise ManifestError(f"no checkpoint at epoch {e}")
    spec = build_mlp_spec(A[end].params.arch)
    p = job.match(A[t_star].params, B[t_star].params)
    b_perm = {e: apply_permutation(c.params, spec, p) for e, c in B.items()}
    epochs = sorted(A)
    points = [A[e].params for e in epochs] + [b_perm[e] for e in epochs]
    nx, ny = (_ints(v["grid"]) + [0, 0])[:2]
    res = landscape_projection(A[end].params, A[t].params, b_perm[t], job.eval["test"],
                               grid=(nx, ny or nx), margin=float(v["margin"]), points=points)
    rows = []
    for i, (x, y) in enumerate(res.projected):
        series = "A" if i < len(epochs) else "P[B]"
        rows.append({"series": series, "epoch": epochs[i % len(epochs)], "x": float(x), "y": float(y)})
    return rows, {f"landscape_r{job.replicate}.csv": res.to_csv().encode("utf-8")}


WORKERS: dict[str, Callable[[Job], Result]] = {
    "trajectory": job_trajectory,
    "imp": job_imp,
    "transport": job_transport,
    "triplet": job_triplet,
    "partial": job_partial,
    "prune-align": job_prune_align,
    "instability": job_instability,
    "landscape": job_landscape,
}

METRICS = {
    "trajectory": ("loss_barrier", "error_barrier"),
    "imp": ("nonzero", "density", "test_loss", "test_error", "pruned_max_abs"),
    "transport": ("density", "acc_imp", "acc_permuted", "acc_naive", "acc_one_shot"),
    "triplet": ("direct_loss", "indirect_loss", "direct_error", "indirect_error", "fp_fraction"),
    "partial": ("loss_barrier", "error_barrier"),
    "prune-align": ("loss_barrier", "error_barrier"),
    "instability": ("child_loss", "child_error", "cross_loss", "cross_error"),
    "landscape": ("x", "y"),
}


def run_replicate(m: Manifest, replicate: int) -> Result:
    rows, art = WORKERS[m.command](Job(m, replicate))
    return [{"replicate": replicate, **r} for r in rows], art


# -- aggregation ----------------------------------------------------------------

def summarize(rows: Sequence[Mapping], metrics: Sequence[str]) -> list[dict]:
    """Mean and sample std of ``metrics`` grouped by every other column."""
    groups: dict[tuple, list[Mapping]] = {}
    for r in rows:
        key = tuple((k, r[k]) for k in r if k != "replicate" and k not in metrics)
        groups.setdefault(key, []).append(r)
    out = []
    for key, members in groups.items():
        row = dict(key)
        row["n"] = len(members)
        for k in metrics:
            vals = np.array([float(r[k]) for r in members])
            row[f"{k}_mean"] = float(vals.mean())
            row[f"{k}_std"] = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
        out.append(row)
    return out


def format_value(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return repr(x) if math.isfinite(x) else str(x)
    return str(x)


def to_csv(rows: Sequence[Mapping]) -> str:
    if not rows:
        return ""
    cols = list(rows[0])
    lines = [",".join(cols)]
    lines += [",".join(format_value(r.get(c, "")) for c in cols) for r in rows]
    return "\n".join(lines) + "\n"
