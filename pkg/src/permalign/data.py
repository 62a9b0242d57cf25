"""Datasets: IDX (MNIST-format) files, synthetic blobs and glyphs, batching.

Minibatch order for ``(seed, epoch)`` is ``Generator(Philox(key=seed +
epoch * 2**64)).permutation(n)``. Philox is counter-based, so any epoch's
order can be produced without replaying earlier epochs.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path
from urllib.parse import parse_qs, urlparse

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


class DataFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    n_classes: int
    split: str = "train"

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if x.ndim != 2 or y.ndim != 1 or x.shape[0] != y.shape[0]:
            raise DataFormatError(f"features {x.shape} and labels {y.shape} disagree")
        if x.shape[0] < 1:
            raise DataFormatError("dataset is empty")
        if y.min() < 0 or y.max() >= self.n_classes:
            raise DataFormatError("labels out of range")
        if not np.all(np.isfinite(x)):
            raise DataFormatError("non-finite features")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.features[idx], self.labels[idx], self.n_classes, self.split)

    def head(self, n: int | None) -> "Dataset":
        if n is None or n >= len(self):
            return self
        return self.subset(slice(0, n))


@dataclass(frozen=True)
class DataBundle:
    train: Dataset
    test: Dataset
    source: str = ""

    def splits(self) -> dict[str, Dataset]:
        return {"train": self.train, "test": self.test}


# -- IDX ---------------------------------------------------------------------

def _read_idx(path, magic: int) -> np.ndarray:
    buf = Path(path).read_bytes()
    if len(buf) < 4:
        raise DataFormatError(f"{path}: truncated header")
    got = struct.unpack(">I", buf[:4])[0]
    if got != magic:
        raise DataFormatError(f"{path}: bad magic 0x{got:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(buf) < header:
        raise DataFormatError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", buf[4:header])
    count = int(np.prod(dims, dtype=np.int64))
    if len(buf) - header < count:
        raise DataFormatError(f"{path}: truncated payload ({len(buf) - header} < {count} bytes)")
    return np.frombuffer(buf, dtype=np.uint8, count=count, offset=header).reshape(dims)


def write_idx_images(path, images: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.uint8)
    if images.ndim != 3:
        raise ValueError("images must be (n, rows, cols)")
    Path(path).write_bytes(struct.pack(">4I", IDX_IMAGES_MAGIC, *images.shape) + images.tobytes())


def write_idx_labels(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    Path(path).write_bytes(struct.pack(">2I", IDX_LABELS_MAGIC, labels.size) + labels.tobytes())


def read_idx_raw(images_path, labels_path) -> tuple[np.ndarray, np.ndarray]:
    images = _read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise DataFormatError(
            f"image count {images.shape[0]} != label count {labels.shape[0]}"
        )
    return images, labels


def load_idx(images_path, labels_path, *, stats: tuple[float, float] | None = None,
             n_classes: int = 10, split: str = "train") -> Dataset:
    """Pixels scaled to [0, 1], then standardised by ``stats`` (mean, std).

    Without ``stats`` the file's own mean and std are used.
    """
    images, labels = read_idx_raw(images_path, labels_path)
    x = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    mean, std = stats if stats is not None else (float(x.mean()), float(x.std()))
    x = (x - mean) / (std if std > 0 else 1.0)
    n_classes = max(n_classes, int(labels.max()) + 1) if labels.size else n_classes
    return Dataset(x, labels.astype(np.int64), n_classes, split)


def idx_stats(images_path) -> tuple[float, float]:
    x = _read_idx(images_path, IDX_IMAGES_MAGIC).astype(np.float64) / 255.0
    return float(x.mean()), float(x.std())


def load_idx_dir(root) -> DataBundle:
    """MNIST layout; normalisation statistics come from the train split."""
    root = Path(root)
    tr_img, tr_lab = (root / f for f in MNIST_FILES["train"])
    te_img, te_lab = (root / f for f in MNIST_FILES["test"])
    stats = idx_stats(tr_img)
    return DataBundle(
        load_idx(tr_img, tr_lab, stats=stats, split="train"),
        load_idx(te_img, te_lab, stats=stats, split="test"),
        source=f"idx://{root}",
    )


# -- synthetic ---------------------------------------------------------------

def blob_centers(d: int, classes: int, separation: float, seed: int,
                 max_tries: int = 100) -> np.ndarray:
    rng = np.random.Generator(np.random.PCG64(seed))
    scale = 1.5 * separation / np.sqrt(2.0 * d)
    for _ in range(max_tries):
        centers = rng.normal(scale=scale, size=(classes, d))
        diff = centers[:, None, :] - centers[None, :, :]
        dist = np.sqrt((diff ** 2).sum(-1))
        if np.all(dist[np.triu_indices(classes, 1)] >= separation):
            return centers
    raise ValueError(
        f"could not place {classes} centers {separation} apart in {d} dims "
        f"after {max_tries} tries"
    )


def synth_blobs(n: int, d: int, classes: int, separation: float, seed: int, *,
                noise: float = 1.0, clusters: int = 1, stream: int = 0,
                split: str = "train") -> Dataset:
    """Isotropic Gaussian clusters, examples assigned round-robin.

    Each class owns ``clusters`` centers (cluster ``c`` belongs to class
    ``c % classes``); more than one makes the classes non-convex. ``stream``
    selects an independent sample draw around the same centers, so train
    and test splits share the geometry.
    """
    if classes < 2:
        raise ValueError("classes must be >= 2")
    if clusters < 1:
        raise ValueError("clusters must be >= 1")
    centers = blob_centers(d, classes * clusters, separation, seed)
    rng = np.random.Generator(np.random.PCG64([seed, stream + 1]))
    cluster = np.arange(n) % (classes * clusters)
    x = centers[cluster] + noise * rng.normal(size=(n, d))
    return Dataset(x, cluster % classes, classes, split)


def synth_bundle(n: int, d: int, classes: int, separation: float, seed: int, *,
                 n_test: int | None = None, noise: float = 1.0, clusters: int = 1) -> DataBundle:
    n_test = n_test if n_test is not None else max(classes, n // 5)
    kw = dict(noise=noise, clusters=clusters)
    train = synth_blobs(n, d, classes, separation, seed, stream=0, split="train", **kw)
    test = synth_blobs(n_test, d, classes, separation, seed, stream=1, split="test", **kw)
    mean = train.features.mean(axis=0)
    std = train.features.std(axis=0)
    std[std == 0] = 1.0
    norm = lambda ds: Dataset((ds.features - mean) / std, ds.labels, ds.n_classes, ds.split)
    uri = (f"synth://blobs?n={n}&d={d}&classes={classes}&sep={separation}&seed={seed}"
           f"&n_test={n_test}&noise={noise}&clusters={clusters}")
    return DataBundle(norm(train), norm(test), source=uri)


# Stroke templates for ten digit-like glyphs on the unit square (x right, y
# down). Rendering applies a random affine map, per-vertex jitter, stroke
# width and pixel noise, so classes are not linearly separable in pixel space.
_GP = {"tl": (0.25, 0.15), "tr": (0.75, 0.15), "ml": (0.25, 0.5), "mr": (0.75, 0.5),
       "bl": (0.25, 0.85), "br": (0.75, 0.85), "tc": (0.5, 0.15), "bc": (0.5, 0.85)}


def _strokes(*names):
    return [(_GP[a], _GP[b]) for a, b in zip(names[:-1], names[1:])]


GLYPHS = (
    _strokes("tl", "tr", "br", "bl", "tl"),
    _strokes("tc", "bc") + [((0.35, 0.3), (0.5, 0.15))],
    _strokes("tl", "tr", "mr", "ml", "bl", "br"),
    _strokes("tl", "tr", "mr", "br", "bl") + _strokes("ml", "mr"),
    _strokes("tl", "ml", "mr") + _strokes("tr", "br"),
    _strokes("tr", "tl", "ml", "mr", "br", "bl"),
    _strokes("tr", "tl", "bl", "br", "mr", "ml"),
    _strokes("tl", "tr") + [((0.75, 0.15), (0.4, 0.85))],
    _strokes("tl", "tr", "br", "bl", "tl") + _strokes("ml", "mr"),
    _strokes("mr", "ml", "tl", "tr", "br", "bl"),
)


def render_glyphs(n: int, seed: int, *, stream: int = 0,
                  size: int = 28) -> tuple[np.ndarray, np.ndarray]:
    """``n`` uint8 images of shape ``(size, size)`` and their labels (round-robin)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.Generator(np.random.PCG64([seed, stream + 1]))
    labels = np.arange(n) % len(GLYPHS)
    yy, xx = np.mgrid[0:size, 0:size]
    grid = np.stack([(xx + 0.5) / size, (yy + 0.5) / size], -1).reshape(-1, 2)
    out = np.empty((n, size * size))
    for c, glyph in enumerate(GLYPHS):
        idx = np.flatnonzero(labels == c)
        k = idx.size
        if k == 0:
            continue
        segs = np.array(glyph)
        ang = rng.uniform(-0.3, 0.3, k)
        scale = rng.uniform(0.8, 1.1, (k, 2))
        shear = rng.uniform(-0.3, 0.3, k)
        shift = rng.uniform(-0.12, 0.12, (k, 2))
        width = rng.uniform(0.05, 0.09, k)
        jitter = rng.normal(0.0, 0.04, (k,) + segs.shape)
        cos, sin = np.cos(ang), np.sin(ang)
        affine = np.stack([
            np.stack([cos * scale[:, 0], -sin * scale[:, 1] + shear * cos], -1),
            np.stack([sin * scale[:, 0], cos * scale[:, 1] + shear * sin], -1),
        ], 1)
        pts = np.einsum("kij,ksej->ksei", affine, segs[None] + jitter - 0.5)
        pts = pts + 0.5 + shift[:, None, None, :]
        p0, d = pts[:, :, 0], pts[:, :, 1] - pts[:, :, 0]
        rel = grid[None, None] - p0[:, :, None]
        u = (rel * d[:, :, None]).sum(-1) / np.maximum((d * d).sum(-1), 1e-12)[:, :, None]
        u = np.clip(u, 0.0, 1.0)
        dist = np.linalg.norm(rel - u[..., None] * d[:, :, None], axis=-1).min(1)
        out[idx] = 1.0 / (1.0 + np.exp((dist - width[:, None]) / 0.015))
    out = np.clip(out + rng.normal(0.0, 0.1, out.shape), 0.0, 1.0)
    return np.round(out * 255).astype(np.uint8).reshape(n, size, size), labels


def write_glyph_idx(root, n: int, n_test: int, seed: int) -> Path:
    """Materialise a glyph dataset as MNIST-format IDX files under ``root``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for split, count, stream in (("train", n, 0), ("test", n_test, 1)):
        images, labels = render_glyphs(count, seed, stream=stream)
        img_name, lab_name = MNIST_FILES[split]
        write_idx_images(root / img_name, images)
        write_idx_labels(root / lab_name, labels)
    return root


def glyph_bundle(n: int, seed: int, *, n_test: int | None = None) -> DataBundle:
    """Same normalisation as ``load_idx_dir``: /255, then train mean and std."""
    n_test = n_test if n_test is not None else max(10, n // 5)
    tr_img, tr_lab = render_glyphs(n, seed, stream=0)
    te_img, te_lab = render_glyphs(n_test, seed, stream=1)
    flat = lambda im: im.reshape(im.shape[0], -1).astype(np.float64) / 255.0
    x_tr, x_te = flat(tr_img), flat(te_img)
    mean, std = float(x_tr.mean()), float(x_tr.std())
    std = std if std > 0 else 1.0
    return DataBundle(
        Dataset((x_tr - mean) / std, tr_lab, 10, "train"),
        Dataset((x_te - mean) / std, te_lab, 10, "test"),
        source=f"synth://glyphs?n={n}&seed={seed}&n_test={n_test}",
    )


def load_data(uri: str) -> DataBundle:
    """Resolve ``synth://blobs?...``, ``synth://glyphs?...``, ``idx://<dir>`` or a directory.

    Relative directories are taken under ``$PERMALIGN_DATA_DIR`` when set.
    """
    parsed = urlparse(uri)
    if parsed.scheme == "synth":
        if parsed.netloc not in ("blobs", "glyphs"):
            raise ValueError(f"unknown synthetic dataset {parsed.netloc!r}")
        q = {k: v[-1] for k, v in parse_qs(parsed.query).items()}
        if parsed.netloc == "glyphs":
            unknown = set(q) - {"n", "seed", "n_test"}
            if unknown:
                raise ValueError(f"unknown synth parameters: {sorted(unknown)}")
            return glyph_bundle(int(q.get("n", 6000)), int(q.get("seed", 0)),
                                n_test=int(q["n_test"]) if "n_test" in q else None)
        allowed = {"n", "d", "classes", "sep", "seed", "n_test", "noise", "clusters"}
        unknown = set(q) - allowed
        if unknown:
            raise ValueError(f"unknown synth parameters: {sorted(unknown)}")
        try:
            return synth_bundle(
                int(q.get("n", 2000)), int(q.get("d", 784)), int(q.get("classes", 10)),
                float(q.get("sep", 6.0)), int(q.get("seed", 0)),
                n_test=int(q["n_test"]) if "n_test" in q else None,
                noise=float(q.get("noise", 1.0)),
                clusters=int(q.get("clusters", 1)),
            )
        except KeyError as exc:
            raise ValueError(f"bad synth uri {uri!r}: {exc}") from exc
    path = parsed.netloc + parsed.path if parsed.scheme == "idx" else uri
    root = Path(path)
    if not root.is_absolute() and os.environ.get("PERMALIGN_DATA_DIR"):
        root = Path(os.environ["PERMALIGN_DATA_DIR"]) / root
    if not root.is_dir():
        raise FileNotFoundError(f"data directory {root} does not exist")
    return load_idx_dir(root)


def batches(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    key = (int(seed) % 2**64) + (int(epoch) % 2**64) * 2**64
    order = np.random.Generator(np.random.Philox(key=key)).permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]
