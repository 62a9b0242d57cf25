"""MLP parameter bundles, permutation specs and the permutation algebra.

Tensor naming follows the checkpoint container: ``W{i}``/``b{i}`` for the
linear map of layer ``i`` (1-based) and ``g{i}``/``s{i}`` for the layer-norm
scale and shift of hidden layer ``i``.

A permutation vector ``pi`` acts on an axis by gathering, i.e. the permuted
tensor satisfies ``T'[j] = T[pi[j]]`` along that axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Mapping

import numpy as np

LN_EPS = 1e-5
ACTIVATIONS = ("relu",)


class ShapeError(ValueError):
    """Raised when tensors or inputs do not match the architecture."""


class SpecError(ValueError):
    """Raised when a permutation does not conform to its spec."""


class InvalidPermutationError(ValueError):
    """Raised when a permutation vector is not a bijection."""


@dataclass(frozen=True)
class ArchitectureSpec:
    input_dim: int
    hidden_dims: tuple[int, ...]
    output_dim: int
    use_layer_norm: bool = True
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(d) for d in self.hidden_dims))
        if not self.hidden_dims:
            raise ValueError("hidden_dims must be non-empty")
        dims = (self.input_dim, *self.hidden_dims, self.output_dim)
        if any(int(d) < 1 for d in dims):
            raise ValueError(f"all dimensions must be >= 1, got {dims}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unsupported activation {self.activation!r}")

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden_dims, self.output_dim)

    @property
    def n_layers(self) -> int:
        return len(self.hidden_dims) + 1

    def tensor_shapes(self) -> dict[str, tuple[int, ...]]:
        """Ordered mapping of tensor name to shape."""
        dims = self.dims
        shapes: dict[str, tuple[int, ...]] = {}
        for i in range(1, self.n_layers + 1):
            shapes[f"W{i}"] = (dims[i], dims[i - 1])
            shapes[f"b{i}"] = (dims[i],)
            if self.use_layer_norm and i < self.n_layers:
                shapes[f"g{i}"] = (dims[i],)
                shapes[f"s{i}"] = (dims[i],)
        return shapes

    def weight_names(self) -> list[str]:
        return [f"W{i}" for i in range(1, self.n_layers + 1)]

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden_dims": list(self.hidden_dims),
            "output_dim": self.output_dim,
            "use_layer_norm": self.use_layer_norm,
            "activation": self.activation,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ArchitectureSpec":
        return cls(
            input_dim=int(d["input_dim"]),
            hidden_dims=tuple(d["hidden_dims"]),
            output_dim=int(d["output_dim"]),
            use_layer_norm=bool(d.get("use_layer_norm", True)),
            activation=d.get("activation", "relu"),
        )


@dataclass(frozen=True)
class NetworkParams:
    """Immutable-by-convention bundle of named MLP tensors."""

    arch: ArchitectureSpec
    tensors: Mapping[str, np.ndarray]

    def __post_init__(self):
        shapes = self.arch.tensor_shapes()
        if set(shapes) != set(self.tensors):
            missing = sorted(set(shapes) - set(self.tensors))
            extra = sorted(set(self.tensors) - set(shapes))
            raise ShapeError(f"tensor names mismatch: missing={missing} extra={extra}")
        ordered = {}
        for name, shape in shapes.items():
            t = np.asarray(self.tensors[name])
            if t.shape != shape:
                raise ShapeError(f"{name}: expected shape {shape}, got {t.shape}")
            ordered[name] = t
        object.__setattr__(self, "tensors", ordered)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def replace(self, **updates: np.ndarray) -> "NetworkParams":
        return NetworkParams(self.arch, {**self.tensors, **updates})

    def map(self, fn) -> "NetworkParams":
        return NetworkParams(self.arch, {k: fn(v) for k, v in self.tensors.items()})

    def astype(self, dtype) -> "NetworkParams":
        return self.map(lambda t: np.asarray(t, dtype=dtype))

    def flatten(self) -> np.ndarray:
        return np.concatenate([np.ravel(t) for t in self.tensors.values()]).astype(np.float64)

    @classmethod
    def unflatten(cls, arch: ArchitectureSpec, vec: np.ndarray) -> "NetworkParams":
        tensors, off = {}, 0
        for name, shape in arch.tensor_shapes().items():
            size = int(np.prod(shape))
            tensors[name] = np.asarray(vec[off:off + size], dtype=np.float64).reshape(shape)
            off += size
        if off != vec.size:
            raise ShapeError(f"vector length {vec.size} != parameter count {off}")
        return cls(arch, tensors)

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(t)) for t in self.tensors.values())

    def equals(self, other: "NetworkParams") -> bool:
        return self.arch == other.arch and all(
            np.array_equal(self[k], other[k]) for k in self.tensors
        )

    def max_abs_diff(self, other: "NetworkParams") -> float:
        check_same_arch(self, other)
        return max(float(np.max(np.abs(self[k] - other[k]))) for k in self.tensors)


def check_same_arch(a: NetworkParams, b: NetworkParams) -> None:
    if a.arch != b.arch:
        raise ShapeError(f"architecture mismatch: {a.arch} vs {b.arch}")


@dataclass(frozen=True)
class PermGroup:
    size: int
    targets: tuple[tuple[str, int], ...]


@dataclass(frozen=True)
class PermutationSpec:
    groups: tuple[PermGroup, ...]

    def __post_init__(self):
        seen = set()
        for g in self.groups:
            if g.size < 1:
                raise SpecError("group size must be positive")
            for target in g.targets:
                if target in seen:
                    raise SpecError(f"{target} appears in more than one group")
                seen.add(target)

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(g.size for g in self.groups)

    def __len__(self) -> int:
        return len(self.groups)

    def canonical(self) -> str:
        lines = []
        for k, g in enumerate(self.groups):
            tgt = ",".join(f"{p}:{ax}" for p, ax in g.targets)
            lines.append(f"group={k} size={g.size} targets={tgt}")
        return "\n".join(lines) + "\n"

    def spec_hash(self) -> str:
        """64-bit FNV-1a of the canonical serialization, as 16 hex digits."""
        h = 0xCBF29CE484222325
        for byte in self.canonical().encode("utf-8"):
            h ^= byte
            h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
        return f"{h:016x}"

    def identity(self) -> "Permutation":
        return Permutation(tuple(np.arange(g.size) for g in self.groups))

    def random(self, rng: np.random.Generator) -> "Permutation":
        return Permutation(tuple(rng.permutation(g.size) for g in self.groups))

    def check_conforms(self, tensors: Mapping[str, np.ndarray], *, strict: bool = True) -> None:
        for k, g in enumerate(self.groups):
            for name, axis in g.targets:
                if name not in tensors:
                    if strict:
                        raise SpecError(f"group {k}: parameter {name!r} not present")
                    continue
                t = tensors[name]
                if axis >= t.ndim or t.shape[axis] != g.size:
                    raise SpecError(
                        f"group {k}: {name} axis {axis} has size "
                        f"{t.shape[axis] if axis < t.ndim else 'n/a'}, expected {g.size}"
                    )


def build_mlp_spec(arch: ArchitectureSpec) -> PermutationSpec:
    """One group per hidden layer; input and output axes are never permuted."""
    groups = []
    for i, d in enumerate(arch.hidden_dims, start=1):
        targets = [(f"W{i}", 0), (f"b{i}", 0)]
        if arch.use_layer_norm:
            targets += [(f"g{i}", 0), (f"s{i}", 0)]
        targets.append((f"W{i + 1}", 1))
        groups.append(PermGroup(d, tuple(targets)))
    return PermutationSpec(tuple(groups))


@dataclass(frozen=True)
class Permutation:
    perms: tuple[np.ndarray, ...] = field(default_factory=tuple)

    def __post_init__(self):
        perms = []
        for k, p in enumerate(self.perms):
            p = np.asarray(p)
            if p.ndim != 1 or not np.issubdtype(p.dtype, np.integer):
                raise InvalidPermutationError(f"group {k}: expected 1-D integer vector")
            if not np.array_equal(np.sort(p), np.arange(p.size)):
                raise InvalidPermutationError(f"group {k}: {p.tolist()[:16]} is not a bijection")
            perms.append(p.astype(np.int64))
        object.__setattr__(self, "perms", tuple(perms))

    def __len__(self) -> int:
        return len(self.perms)

    def __getitem__(self, k: int) -> np.ndarray:
        return self.perms[k]

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(p.size for p in self.perms)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Permutation) or len(self) != len(other):
            return False
        return all(np.array_equal(a, b) for a, b in zip(self.perms, other.perms))

    def __hash__(self):
        return hash(tuple(p.tobytes() for p in self.perms))

    def is_identity(self) -> bool:
        return all(np.array_equal(p, np.arange(p.size)) for p in self.perms)

    def check_spec(self, spec: PermutationSpec) -> None:
        if self.sizes != spec.sizes:
            raise SpecError(f"permutation sizes {self.sizes} do not match spec {spec.sizes}")


def _check_pair(p: Permutation, q: Permutation) -> None:
    if p.sizes != q.sizes:
        raise SpecError(f"permutation sizes differ: {p.sizes} vs {q.sizes}")


def compose(p: Permutation, q: Permutation) -> Permutation:
    """Permutation equivalent to applying ``q`` first, then ``p``."""
    _check_pair(p, q)
    return Permutation(tuple(qk[pk] for pk, qk in zip(p.perms, q.perms)))


def invert(p: Permutation) -> Permutation:
    out = []
    for pk in p.perms:
        inv = np.empty_like(pk)
        inv[pk] = np.arange(pk.size)
        out.append(inv)
    return Permutation(tuple(out))


def permute_tensors(
    tensors: Mapping[str, np.ndarray],
    spec: PermutationSpec,
    perm: Permutation,
    *,
    strict: bool = True,
) -> dict[str, np.ndarray]:
    """Gather every targeted axis by its group's permutation vector.

    With ``strict=False`` targets absent from ``tensors`` are skipped, which
    lets masks (weights only) share this code path.
    """
    perm.check_spec(spec)
    spec.check_conforms(tensors, strict=strict)
    out = dict(tensors)
    for g, p in zip(spec.groups, perm.perms):
        if np.array_equal(p, np.arange(p.size)):
            continue
        for name, axis in g.targets:
            if name in out:
                out[name] = np.take(out[name], p, axis=axis)
    return out


def apply_permutation(params: NetworkParams, spec: PermutationSpec, perm: Permutation) -> NetworkParams:
    if not isinstance(perm, Permutation):
        perm = Permutation(tuple(perm))
    return NetworkParams(params.arch, permute_tensors(params.tensors, spec, perm))


def interpolate(a: NetworkParams, b: NetworkParams, alpha: float) -> NetworkParams:
    """``alpha * a + (1 - alpha) * b``; alpha weights ``a``.

    Entries equal in both endpoints are returned unchanged, so the path
    between identical networks is constant to the last bit.
    """
    check_same_arch(a, b)
    alpha = float(alpha)
    if alpha == 1.0:
        return a
    if alpha == 0.0:
        return b
    return NetworkParams(a.arch, {
        k: np.where(a[k] == b[k], a[k], alpha * a[k] + (1.0 - alpha) * b[k]) for k in a.tensors
    })


def _layer_norm(z: np.ndarray, gamma: np.ndarray, beta: np.ndarray) -> np.ndarray:
    mu = z.mean(axis=1, keepdims=True)
    var = z.var(axis=1, keepdims=True)
    return gamma * ((z - mu) / np.sqrt(var + LN_EPS)) + beta


def hidden_activations(params: NetworkParams, inputs: np.ndarray) -> list[np.ndarray]:
    """Post-activation outputs of every hidden layer, then the logits last."""
    arch = params.arch
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != arch.input_dim:
        raise ShapeError(f"expected inputs of shape (n, {arch.input_dim}), got {x.shape}")
    outs = []
    for i in range(1, arch.n_layers):
        z = x @ params[f"W{i}"].T + params[f"b{i}"]
        if arch.use_layer_norm:
            z = _layer_norm(z, params[f"g{i}"], params[f"s{i}"])
        x = np.maximum(z, 0.0)
        outs.append(x)
    k = arch.n_layers
    outs.append(x @ params[f"W{k}"].T + params[f"b{k}"])
    return outs


def forward(params: NetworkParams, inputs: np.ndarray) -> np.ndarray:
    return hidden_activations(params, inputs)[-1]


def l2_distance(a: NetworkParams, b: NetworkParams) -> float:
    check_same_arch(a, b)
    return float(np.sqrt(sum(np.sum((a[k] - b[k]) ** 2) for k in a.tensors)))
