"""Deterministic MLP training: He init, backprop, SGD with momentum.

Learning rate ramps linearly to ``peak_lr`` over the warmup epochs (stepped
per iteration), then follows cosine annealing to zero (or stays constant).
Weight decay is classic L2 coupled into the gradient.
"""

from __future__ import annotations

import dataclasses
import hashlib
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import io
from .data import Dataset, batches
from .model import LN_EPS, ArchitectureSpec, NetworkParams, ShapeError

log = logging.getLogger(__name__)

SCHEDULES = ("cosine", "constant")

# Regime presets; explicit config keys override them.
REGIMES: dict[str, dict] = {
    "standard": {"warmup_epochs": 1, "peak_lr": 0.1, "weight_decay": 1e-4},
    "no_warmup_low_lr": {"warmup_epochs": 0, "peak_lr": 1e-3, "weight_decay": 1e-4},
    "warmup_no_wd": {"warmup_epochs": 1, "peak_lr": 1e-1, "weight_decay": 0.0},
}

DESK_ARCH = ArchitectureSpec(784, (512, 512), 10, use_layer_norm=True)


class DivergedTrainingError(FloatingPointError):
    def __init__(self, msg: str, last_good: "Checkpoint | None" = None):
        super().__init__(msg)
        self.last_good = last_good


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    arch: ArchitectureSpec = DESK_ARCH
    epochs: int = 20
    batch_size: int = 128
    peak_lr: float = 0.1
    warmup_epochs: int = 1
    schedule: str = "cosine"
    momentum: float = 0.9
    weight_decay: float = 1e-4
    init_seed: int = 0
    data_order_seed: int = 0
    checkpoint_epochs: tuple[int, ...] | None = None  # None: every epoch
    regime: str = "standard"

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if not 0 <= self.warmup_epochs <= self.epochs:
            raise ConfigError("warmup_epochs must lie in [0, epochs]")
        if self.peak_lr <= 0:
            raise ConfigError("peak_lr must be > 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"schedule must be one of {SCHEDULES}")
        if self.regime not in REGIMES:
            raise ConfigError(f"regime must be one of {sorted(REGIMES)}")
        if self.checkpoint_epochs is not None:
            object.__setattr__(
                self, "checkpoint_epochs", tuple(sorted({int(e) for e in self.checkpoint_epochs}))
            )

    @classmethod
    def from_regime(cls, regime: str = "standard", **overrides) -> "TrainConfig":
        if regime not in REGIMES:
            raise ConfigError(f"unknown regime {regime!r}")
        preset = dict(REGIMES[regime])
        if "epochs" in overrides:
            preset["warmup_epochs"] = min(preset["warmup_epochs"], int(overrides["epochs"]))
        return cls(**{**preset, **overrides, "regime": regime})

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def saved_epochs(self) -> list[int]:
        if self.checkpoint_epochs is None:
            return list(range(self.epochs + 1))
        return sorted({e for e in self.checkpoint_epochs if 0 <= e <= self.epochs} | {self.epochs})

    def to_flat(self) -> dict[str, str]:
        a = self.arch
        ck = "all" if self.checkpoint_epochs is None else ",".join(map(str, self.checkpoint_epochs))
        return {
            "input_dim": str(a.input_dim),
            "hidden_dims": ",".join(map(str, a.hidden_dims)),
            "output_dim": str(a.output_dim),
            "use_layer_norm": str(a.use_layer_norm).lower(),
            "epochs": str(self.epochs),
            "batch_size": str(self.batch_size),
            "peak_lr": repr(self.peak_lr),
            "warmup_epochs": str(self.warmup_epochs),
            "schedule": self.schedule,
            "momentum": repr(self.momentum),
            "weight_decay": repr(self.weight_decay),
            "init_seed": str(self.init_seed),
            "data_order_seed": str(self.data_order_seed),
            "checkpoint_epochs": ck,
            "regime": self.regime,
        }

    def fingerprint(self) -> str:
        text = "\n".join(f"{k}={v}" for k, v in sorted(self.to_flat().items()))
        return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]

    @classmethod
    def from_flat(cls, kv: Mapping[str, str]) -> "TrainConfig":
        unknown = set(kv) - set(TRAIN_KEYS)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            regime = kv.get("regime", "standard")
            arch = ArchitectureSpec(
                input_dim=int(kv.get("input_dim", DESK_ARCH.input_dim)),
                hidden_dims=tuple(int(x) for x in kv.get("hidden_dims", "512,512").split(",")),
                output_dim=int(kv.get("output_dim", DESK_ARCH.output_dim)),
                use_layer_norm=_parse_bool(kv.get("use_layer_norm", "true")),
            )
            fields_: dict = {"arch": arch}
            casts = {
                "epochs": int, "batch_size": int, "peak_lr": float, "warmup_epochs": int,
                "schedule": str, "momentum": float, "weight_decay": float,
                "init_seed": int, "data_order_seed": int,
            }
            for key, cast in casts.items():
                if key in kv:
                    fields_[key] = cast(kv[key])
            ck = kv.get("checkpoint_epochs", "all")
            if ck != "all":
                fields_["checkpoint_epochs"] = tuple(int(x) for x in ck.split(",") if x)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return cls.from_regime(regime, **fields_)


TRAIN_KEYS = tuple(TrainConfig().to_flat())


def _parse_bool(s: str) -> bool:
    s = str(s).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {s!r}")


def parse_kv(text: str) -> dict[str, str]:
    """Flat ``key=value`` lines; ``#`` starts a comment line."""
    out: dict[str, str] = {}
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in out:
            raise ConfigError(f"line {n}: duplicate key {key!r}")
        out[key] = value
    return out


def format_kv(kv: Mapping[str, str]) -> str:
    return "".join(f"{k}={v}\n" for k, v in kv.items())


def load_config(path) -> TrainConfig:
    return TrainConfig.from_flat(parse_kv(Path(path).read_text(encoding="utf-8")))


# -- parameters and gradients -------------------------------------------------

def init_params(arch: ArchitectureSpec, seed: int) -> NetworkParams:
    """He-normal weights, zero biases, unit norm scale, zero norm shift."""
    rng = np.random.Generator(np.random.PCG64(seed))
    tensors = {}
    for name, shape in arch.tensor_shapes().items():
        kind = name[0]
        if kind == "W":
            tensors[name] = rng.normal(scale=math.sqrt(2.0 / shape[1]), size=shape)
        elif kind == "g":
            tensors[name] = np.ones(shape)
        else:
            tensors[name] = np.zeros(shape)
    return NetworkParams(arch, tensors)


def loss_and_grad(params: NetworkParams, x: np.ndarray, y: np.ndarray) -> tuple[float, dict]:
    """Mean cross-entropy and its exact gradient for every tensor."""
    arch = params.arch
    if x.ndim != 2 or x.shape[1] != arch.input_dim:
        raise ShapeError(f"expected inputs of shape (n, {arch.input_dim}), got {x.shape}")
    n = x.shape[0]
    K = arch.n_layers
    ln = arch.use_layer_norm
    cache = []
    h = x
    for i in range(1, K):
        z = h @ params[f"W{i}"].T + params[f"b{i}"]
        if ln:
            mu = z.mean(axis=1, keepdims=True)
            zc = z - mu
            rstd = 1.0 / np.sqrt((zc * zc).mean(axis=1, keepdims=True) + LN_EPS)
            zhat = zc * rstd
            pre = params[f"g{i}"] * zhat + params[f"s{i}"]
        else:
            zhat = rstd = None
            pre = z
        cache.append((h, zhat, rstd, pre))
        h = np.maximum(pre, 0.0)
    logits = h @ params[f"W{K}"].T + params[f"b{K}"]

    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    loss = -float(logp[np.arange(n), y].sum()) / n

    grads = {}
    d = np.exp(logp)
    d[np.arange(n), y] -= 1.0
    d /= n
    grads[f"W{K}"] = d.T @ h
    grads[f"b{K}"] = d.sum(axis=0)
    dh = d @ params[f"W{K}"]
    for i in range(K - 1, 0, -1):
        h_in, zhat, rstd, pre = cache[i - 1]
        dpre = dh * (pre > 0)
        if ln:
            grads[f"g{i}"] = (dpre * zhat).sum(axis=0)
            grads[f"s{i}"] = dpre.sum(axis=0)
            dzhat = dpre * params[f"g{i}"]
            dz = rstd * (
                dzhat
                - dzhat.mean(axis=1, keepdims=True)
                - zhat * (dzhat * zhat).mean(axis=1, keepdims=True)
            )
        else:
            dz = dpre
        grads[f"W{i}"] = dz.T @ h_in
        grads[f"b{i}"] = dz.sum(axis=0)
        if i > 1:
            dh = dz @ params[f"W{i}"]
    return loss, grads


def grad(params: NetworkParams, x: np.ndarray, y: np.ndarray) -> NetworkParams:
    _, g = loss_and_grad(params, np.asarray(x, dtype=np.float64), np.asarray(y))
    return NetworkParams(params.arch, g)


# -- checkpoints ---------------------------------------------------------------

@dataclass(frozen=True)
class Checkpoint:
    params: NetworkParams
    epoch: int
    fingerprint: str = ""
    momentum: Mapping[str, np.ndarray] | None = field(default=None, compare=False)
    seed: int = 0
    regime: str = "standard"

    def meta(self) -> dict:
        return {
            "arch": self.params.arch.to_dict(),
            "epoch": self.epoch,
            "seed": self.seed,
            "regime": self.regime,
            "fingerprint": self.fingerprint,
        }


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    tensors = dict(ckpt.params.tensors)
    if ckpt.momentum is not None:
        tensors.update({f"v_{k}": v for k, v in ckpt.momentum.items()})
    io.write_container(path, io.CHECKPOINT_MAGIC, ckpt.meta(), tensors)


def load_checkpoint(path) -> Checkpoint:
    meta, tensors = io.read_container(path, io.CHECKPOINT_MAGIC)
    arch = ArchitectureSpec.from_dict(meta["arch"])
    mom = {k[2:]: v.astype(np.float64) for k, v in tensors.items() if k.startswith("v_")}
    params = {k: v.astype(np.float64) for k, v in tensors.items() if not k.startswith("v_")}
    return Checkpoint(
        NetworkParams(arch, params),
        int(meta["epoch"]),
        meta.get("fingerprint", ""),
        mom or None,
        int(meta.get("seed", 0)),
        meta.get("regime", "standard"),
    )


def checkpoint_name(epoch: int) -> str:
    return f"ckpt_epoch{epoch:04d}.pmlc"


# -- training loop -------------------------------------------------------------

def lr_at(step: int, config: TrainConfig, steps_per_epoch: int) -> float:
    warm = config.warmup_epochs * steps_per_epoch
    total = config.epochs * steps_per_epoch
    if step < warm:
        return config.peak_lr * (step + 1) / warm
    if config.schedule == "constant" or total <= warm:
        return config.peak_lr
    progress = (step - warm) / (total - warm)
    return config.peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def _mask_arrays(mask) -> dict[str, np.ndarray] | None:
    if mask is None:
        return None
    arrays = getattr(mask, "arrays", mask)
    return {k: np.asarray(v, dtype=np.float64) for k, v in arrays.items()}


def train(
    config: TrainConfig,
    data: Dataset,
    mask=None,
    *,
    init: NetworkParams | None = None,
    start_epoch: int = 0,
    momentum: Mapping[str, np.ndarray] | None = None,
    keep_momentum: bool = True,
) -> list[Checkpoint]:
    """Run SGD from ``start_epoch`` to ``config.epochs``.

    Returns checkpoints at ``config.saved_epochs()`` that are >= start_epoch.
    ``init`` defaults to ``init_params(config.arch, config.init_seed)``.
    Momentum buffers are stored in checkpoints (for exact resume) unless
    ``keep_momentum`` is false.
    """
    arch = config.arch
    if data.dim != arch.input_dim or data.n_classes > arch.output_dim:
        raise ShapeError(
            f"data (dim={data.dim}, classes={data.n_classes}) does not fit arch {arch.dims}"
        )
    if not 0 <= start_epoch <= config.epochs:
        raise ConfigError(f"start_epoch {start_epoch} outside [0, {config.epochs}]")
    params = init if init is not None else init_params(arch, config.init_seed)
    w = {k: np.array(v, dtype=np.float64) for k, v in params.tensors.items()}
    m = _mask_arrays(mask)
    if m is not None:
        for k, mk in m.items():
            w[k] *= mk
    vel = {k: np.zeros_like(v) for k, v in w.items()}
    if momentum is not None:
        for k, v in momentum.items():
            vel[k] = np.array(v, dtype=np.float64)
    fp = config.fingerprint()
    saved = set(config.saved_epochs())
    steps_per_epoch = math.ceil(len(data) / config.batch_size)
    wd, mu = config.weight_decay, config.momentum

    def snapshot(epoch: int) -> Checkpoint:
        return Checkpoint(
            NetworkParams(arch, {k: v.copy() for k, v in w.items()}),
            epoch, fp, {k: v.copy() for k, v in vel.items()} if keep_momentum else None,
            config.init_seed, config.regime,
        )

    out = []
    last_good = snapshot(start_epoch)
    if start_epoch in saved:
        out.append(last_good)
    x_all, y_all = data.features, data.labels
    for epoch in range(start_epoch, config.epochs):
        for b, idx in enumerate(batches(len(data), config.batch_size, config.data_order_seed, epoch)):
            step = epoch * steps_per_epoch + b
            lr = lr_at(step, config, steps_per_epoch)
            loss, g = loss_and_grad(NetworkParams(arch, w), x_all[idx], y_all[idx])
            if not math.isfinite(loss):
                raise DivergedTrainingError(
                    f"non-finite loss at epoch {epoch} step {step}", last_good
                )
            for k in w:
                gk = g[k]
                if wd:
                    gk = gk + wd * w[k]
                if m is not None and k in m:
                    gk = gk * m[k]
                vel[k] *= mu
                vel[k] += gk
                w[k] -= lr * vel[k]
                if m is not None and k in m:
                    w[k] *= m[k]
        if epoch + 1 in saved:
            last_good = snapshot(epoch + 1)
            out.append(last_good)
        log.debug("epoch %d done (loss %.4f)", epoch + 1, loss)
    return out


def spawn_children(
    parent: Sequence[Checkpoint] | Mapping[int, Checkpoint],
    config: TrainConfig,
    data: Dataset,
    epoch: int,
    seeds: Sequence[int],
    mask=None,
) -> list[Checkpoint]:
    """Resume from the parent's epoch-``epoch`` state once per data-order seed."""
    by_epoch = parent if isinstance(parent, Mapping) else {c.epoch: c for c in parent}
    if epoch not in by_epoch:
        raise KeyError(f"parent has no checkpoint at epoch {epoch}")
    start = by_epoch[epoch]
    children = []
    for seed in seeds:
        cfg = config.replace(data_order_seed=int(seed), checkpoint_epochs=(config.epochs,))
        run = train(cfg, data, mask, init=start.params, start_epoch=epoch, momentum=start.momentum)
        children.append(run[-1])
    return children
