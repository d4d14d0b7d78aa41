"""Datasets: the synthetic 100-dimensional task, a 1-D teacher task, IDX and CSV ingestion."""
from __future__ import annotations

import csv
import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BadMagic, ConfigError, CountMismatch, TruncatedPayload

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        self.y = np.asarray(self.y, dtype=float).reshape(-1)
        if self.X.shape[0] != self.y.shape[0]:
            raise ValueError("X and y disagree on sample count")
        if self.X.shape[0] < 1:
            raise ValueError("dataset needs at least one sample")
        if np.isnan(self.X).any():
            raise ValueError("dataset contains NaN")
        if not np.all(np.abs(self.y) == 1.0):
            raise ValueError("labels must be +1 or -1")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]


@dataclass(frozen=True)
class SynthConfig:
    d_total: int = 100
    d_informative: int = 4
    d_redundant: int = 10
    d_repeated: int = 10
    d_noise: int = 76
    n_train: int = 500
    n_test: int = 500
    class_sep: float = 1.0
    seed: int = 0

    def __post_init__(self):
        parts = (self.d_informative, self.d_redundant, self.d_repeated, self.d_noise)
        if min(parts) < 0 or self.d_informative < 1:
            raise ConfigError("dimension counts must be nonnegative with at least one informative dim")
        if sum(parts) != self.d_total:
            raise ConfigError(f"dimension counts sum to {sum(parts)}, expected d_total={self.d_total}")
        if self.n_train < 1 or self.n_test < 1:
            raise ConfigError("sample counts must be positive")


def _balanced_labels(rng, n):
    y = np.where(np.arange(n) < n // 2, 1.0, -1.0)
    if n % 2:
        y[-1] = rng.choice([-1.0, 1.0])
    return rng.permutation(y)


def generate_synthetic(cfg: SynthConfig = SynthConfig()):
    """Binary task with informative, redundant, repeated and noise columns.

    Column layout is ``[informative | redundant | repeated | noise]``.
    Informative columns are ``y * class_sep * s + N(0, I)`` for a fixed sign
    vector ``s``; redundant columns are a fixed random linear map of the
    informative ones; repeated columns copy earlier columns bit for bit.
    Returns ``(train, test)``.
    """
    structure, train_ss, test_ss = np.random.SeedSequence(cfg.seed).spawn(3)
    srng = np.random.default_rng(structure)
    signs = srng.choice([-1.0, 1.0], size=cfg.d_informative)
    mix = srng.standard_normal((cfg.d_informative, cfg.d_redundant)) / np.sqrt(cfg.d_informative)
    sources = srng.integers(0, cfg.d_informative + cfg.d_redundant, size=cfg.d_repeated)

    def draw(ss, n, split):
        rng = np.random.default_rng(ss)
        y = _balanced_labels(rng, n)
        inf = y[:, None] * cfg.class_sep * signs + rng.standard_normal((n, cfg.d_informative))
        red = inf @ mix
        base = np.hstack([inf, red])
        rep = base[:, sources]
        noise = rng.standard_normal((n, cfg.d_noise))
        X = np.hstack([base, rep, noise])
        prov = {"kind": "synthetic", "split": split, "config": cfg.__dict__.copy(),
                "repeated_sources": sources.tolist()}
        return Dataset(X, y, prov)

    return draw(train_ss, cfg.n_train, "train"), draw(test_ss, cfg.n_test, "test")


def teacher_1d(n=200, seed=0, flip=0.1):
    """1-D task: ``x ~ N(0, 1)``, ``y = sign(x)`` with a fraction ``flip`` of labels flipped."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(n)
    y = np.where(x >= 0, 1.0, -1.0)
    y[rng.random(n) < flip] *= -1.0
    return Dataset(x[:, None], y, {"kind": "teacher_1d", "n": n, "seed": seed, "flip": flip})


def _read_header(buf, n_dims, path):
    need = 4 + 4 * n_dims
    if len(buf) < need:
        raise TruncatedPayload(f"{path}: header needs {need} bytes, file has {len(buf)}")
    magic = struct.unpack(">I", buf[:4])[0]
    dims = struct.unpack(">" + "I" * n_dims, buf[4:need])
    return magic, dims, need


def _binarize(rule, labels):
    if callable(rule):
        out = np.asarray(rule(labels), dtype=float)
    elif rule == "parity":
        out = np.where(labels % 2 == 0, 1.0, -1.0)
    elif isinstance(rule, str) and rule.startswith("one-vs-rest:"):
        k = int(rule.split(":", 1)[1])
        out = np.where(labels == k, 1.0, -1.0)
    else:
        raise ConfigError(f"unknown binarize rule {rule!r}; use 'parity', 'one-vs-rest:K' or a callable")
    return out


def load_idx(images_path, labels_path, binarize):
    """Read an IDX image/label pair into a :class:`Dataset`.

    Pixels are scaled to [0, 1] and flattened row-major. ``binarize`` maps
    integer labels to +/-1 and has no default.
    """
    images_path, labels_path = Path(images_path), Path(labels_path)
    ib = images_path.read_bytes()
    lb = labels_path.read_bytes()

    magic, (count, rows, cols), off = _read_header(ib, 3, images_path)
    if magic != IDX_IMAGES_MAGIC:
        raise BadMagic(f"{images_path}: magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}")
    size = count * rows * cols
    if len(ib) - off < size:
        raise TruncatedPayload(f"{images_path}: expected {size} pixel bytes, found {len(ib) - off}")
    pixels = np.frombuffer(ib, dtype=np.uint8, count=size, offset=off)

    lmagic, (lcount,), loff = _read_header(lb, 1, labels_path)
    if lmagic != IDX_LABELS_MAGIC:
        raise BadMagic(f"{labels_path}: magic 0x{lmagic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}")
    if len(lb) - loff < lcount:
        raise TruncatedPayload(f"{labels_path}: expected {lcount} labels, found {len(lb) - loff}")
    if lcount != count:
        raise CountMismatch(f"{count} images but {lcount} labels")
    labels = np.frombuffer(lb, dtype=np.uint8, count=lcount, offset=loff).astype(int)

    X = pixels.reshape(count, rows * cols).astype(float) / 255.0
    y = _binarize(binarize, labels)
    prov = {
        "kind": "idx",
        "images": str(images_path),
        "labels": str(labels_path),
        "sha256": hashlib.sha256(ib + lb).hexdigest(),
        "binarize": binarize if isinstance(binarize, str) else getattr(binarize, "__name__", "callable"),
    }
    return Dataset(X, y, prov)


def load_delimited(path, label_column, delimiter=","):
    """Read a CSV with a header row; ``label_column`` holds +/-1 labels."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh, delimiter=delimiter)
        header = next(reader)
        if label_column not in header:
            raise ConfigError(f"{path}: no column named {label_column!r}")
        k = header.index(label_column)
        rows = [[float(v) for v in row] for row in reader if row]
    arr = np.asarray(rows, dtype=float)
    y = arr[:, k]
    X = np.delete(arr, k, axis=1)
    digest = hashlib.sha256(path.read_bytes()).hexdigest()
    return Dataset(X, y, {"kind": "delimited", "path": str(path), "sha256": digest})


def save_delimited(ds: Dataset, path, label_column="y"):
    path = Path(path)
    header = [f"x{j}" for j in range(ds.d)] + [label_column]
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row, label in zip(ds.X, ds.y):
            w.writerow([repr(float(v)) for v in row] + [int(label)])


def standardize(ds: Dataset, stats=None):
    """Center and scale columns; reuse ``stats`` to transform a held-out split.

    Constant columns are left untouched and reported in ``stats['constant']``.
    """
    if stats is None:
        if ds.n < 2:
            raise ValueError("need at least two samples to estimate statistics")
        mean = ds.X.mean(axis=0)
        std = ds.X.std(axis=0)
        constant = std <= 1e-12 * np.maximum(1.0, np.abs(mean))
        stats = {"mean": mean, "std": std, "constant": constant}
    mean, std, constant = stats["mean"], stats["std"], stats["constant"]
    X = ds.X.copy()
    live = ~constant
    X[:, live] = (X[:, live] - mean[live]) / std[live]
    prov = dict(ds.provenance, standardized=True)
    return Dataset(X, ds.y.copy(), prov), stats
