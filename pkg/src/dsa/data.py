"""Dataset readers: MNIST IDX, CIFAR-10 binary batches and a synthetic generator."""
from __future__ import annotations

import gzip
import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 1 + 3 * 32 * 32

MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}
CIFAR_TRAIN = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR_TEST = ["test_batch.bin"]


class DataFormatError(ValueError):
    pass


@dataclass
class DatasetSpec:
    kind: str = "synthetic"
    path: str | None = None
    train_subset: int | None = None
    test_subset: int | None = None
    mean: list[float] | None = None
    std: list[float] | None = None
    split_seed: int = 0
    checksums: dict[str, str] = field(default_factory=dict)
    # synthetic only
    num_classes: int = 10
    shape: list[int] = field(default_factory=lambda: [1, 8, 8])
    n_train: int = 2000
    n_test: int = 500
    noise: float = 1.0


@dataclass
class Dataset:
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray

    @property
    def num_classes(self) -> int:
        return int(max(self.train_y.max(), self.test_y.max())) + 1


def _open(path: Path):
    if not path.exists() and path.with_name(path.name + ".gz").exists():
        path = path.with_name(path.name + ".gz")
    if path.suffix == ".gz":
        return gzip.open(path, "rb")
    return open(path, "rb")


def _resolve(path: Path) -> Path:
    if path.exists():
        return path
    gz = path.with_name(path.name + ".gz")
    return gz if gz.exists() else path


def read_idx(path: str | Path) -> np.ndarray:
    """Parse an IDX file (``.gz`` accepted): unsigned-byte images or labels."""
    path = Path(path)
    with _open(path) as f:
        raw = f.read()
    if len(raw) < 8:
        raise DataFormatError(f"{path}: truncated header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic == IDX_IMAGES_MAGIC:
        if len(raw) < 16:
            raise DataFormatError(f"{path}: truncated header")
        n, rows, cols = struct.unpack(">III", raw[4:16])
        shape, offset = (n, rows, cols), 16
    elif magic == IDX_LABELS_MAGIC:
        (n,) = struct.unpack(">I", raw[4:8])
        shape, offset = (n,), 8
    else:
        raise DataFormatError(f"{path}: bad magic number 0x{magic:08x}")
    size = int(np.prod(shape))
    if len(raw) - offset < size:
        raise DataFormatError(f"{path}: truncated data ({len(raw) - offset} of {size} bytes)")
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=offset).reshape(shape)


def write_idx(path: str | Path, array: np.ndarray) -> None:
    array = np.ascontiguousarray(array, dtype=np.uint8)
    if array.ndim == 3:
        header = struct.pack(">IIII", IDX_IMAGES_MAGIC, *array.shape)
    elif array.ndim == 1:
        header = struct.pack(">II", IDX_LABELS_MAGIC, *array.shape)
    else:
        raise ValueError("IDX writer supports 1-d labels or 3-d image stacks")
    Path(path).write_bytes(header + array.tobytes())


def read_cifar_batch(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Parse one CIFAR-10 binary batch into ``(images N x 3 x 32 x 32, labels)``."""
    path = Path(path)
    with _open(path) as f:
        raw = f.read()
    if len(raw) == 0 or len(raw) % CIFAR_RECORD:
        raise DataFormatError(f"{path}: size {len(raw)} is not a multiple of {CIFAR_RECORD}-byte records")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.max() > 9:
        raise DataFormatError(f"{path}: label {labels.max()} out of range")
    return rec[:, 1:].reshape(-1, 3, 32, 32), labels


def _verify(path: Path, expected: str | None):
    if expected is None:
        return
    digest = hashlib.sha256(path.read_bytes()).hexdigest()
    if digest != expected:
        raise DataFormatError(f"{path}: sha256 {digest} does not match {expected}")


def _normalize(x: np.ndarray, mean, std) -> np.ndarray:
    x = x.astype(np.float32) / 255.0
    mean = np.asarray(mean, dtype=np.float32).reshape(1, -1, 1, 1)
    std = np.asarray(std, dtype=np.float32).reshape(1, -1, 1, 1)
    return (x - mean) / std


def _subset(x, y, n, rng):
    if n is None or n >= len(y):
        return x, y
    idx = np.sort(rng.permutation(len(y))[:n])
    return x[idx], y[idx]


def synthetic(spec: DatasetSpec) -> Dataset:
    """Gaussian clusters around random class prototypes, shaped like images."""
    rng = np.random.default_rng(spec.split_seed)
    shape = tuple(spec.shape)
    protos = rng.normal(0.0, 1.0, (spec.num_classes,) + shape)

    def draw(n):
        y = rng.integers(0, spec.num_classes, n)
        x = protos[y] + spec.noise * rng.normal(0.0, 1.0, (n,) + shape)
        return x.astype(np.float32), y.astype(np.int64)

    tx, ty = draw(spec.n_train)
    vx, vy = draw(spec.n_test)
    return Dataset(tx, ty, vx, vy)


def load_dataset(spec: DatasetSpec) -> Dataset:
    rng = np.random.default_rng(spec.split_seed)
    if spec.kind == "synthetic":
        return synthetic(spec)
    if spec.path is None:
        raise ValueError(f"dataset kind {spec.kind!r} needs a path")
    root = Path(spec.path)
    if spec.kind == "mnist":
        files = {k: _resolve(root / v) for k, v in MNIST_FILES.items()}
        for p in files.values():
            _verify(p, spec.checksums.get(p.name))
        mean, std = spec.mean or [0.1307], spec.std or [0.3081]
        tx = read_idx(files["train_images"])[:, None]
        ty = read_idx(files["train_labels"]).astype(np.int64)
        vx = read_idx(files["test_images"])[:, None]
        vy = read_idx(files["test_labels"]).astype(np.int64)
        if len(tx) != len(ty) or len(vx) != len(vy):
            raise DataFormatError("image and label counts differ")
    elif spec.kind == "cifar10":
        mean = spec.mean or [0.4914, 0.4822, 0.4465]
        std = spec.std or [0.2470, 0.2435, 0.2616]

        def read_all(names: Sequence[str]):
            parts = []
            for name in names:
                p = _resolve(root / name)
                _verify(p, spec.checksums.get(p.name))
                parts.append(read_cifar_batch(p))
            return np.concatenate([a for a, _ in parts]), np.concatenate([b for _, b in parts])

        tx, ty = read_all(CIFAR_TRAIN)
        vx, vy = read_all(CIFAR_TEST)
    else:
        raise ValueError(f"unknown dataset kind {spec.kind!r}")
    tx, ty = _subset(tx, ty, spec.train_subset, rng)
    vx, vy = _subset(vx, vy, spec.test_subset, rng)
    return Dataset(_normalize(tx, mean, std), ty, _normalize(vx, mean, std), vy)
