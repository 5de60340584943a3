"""Dataset readers (MNIST IDX, CIFAR-10 binary, label-last CSV), normalization and augmentation."""
from dataclasses import dataclass
import gzip
import hashlib
import os
import struct

import numpy as np

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801
CIFAR_RECORD = 1 + 3 * 32 * 32


class DatasetError(Exception):
    pass


class MissingDataset(DatasetError, FileNotFoundError):
    pass


class BadMagic(DatasetError):
    pass


class TruncatedFile(DatasetError):
    pass


class ChecksumMismatch(DatasetError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W) float64
    labels: np.ndarray  # (N,) int64
    n_classes: int = 10

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self):
        return len(self.labels)

    def one_hot(self, idx=None):
        lab = self.labels if idx is None else self.labels[idx]
        return np.eye(self.n_classes)[lab]

    def subset(self, idx):
        return Dataset(self.images[idx], self.labels[idx], self.n_classes)


def sha256sum(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def verify_checksum(path, expected):
    if expected is None:
        return
    got = sha256sum(path)
    if got != expected.lower():
        raise ChecksumMismatch(f"{path}: sha256 {got} != expected {expected}")


def _read_bytes(path):
    if not os.path.exists(path):
        raise MissingDataset(f"dataset file not found: {path}")
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "rb") as fh:
        return fh.read()


def read_idx(path, expect_magic=None):
    """Parse an unsigned-byte IDX file into an ndarray of its declared shape."""
    raw = _read_bytes(path)
    if len(raw) < 4:
        raise TruncatedFile(f"{path}: {len(raw)} bytes, header needs 4")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic >> 16 != 0 or (magic >> 8) & 0xFF != 0x08 or expect_magic not in (None, magic):
        want = f"{expect_magic:#010x}" if expect_magic is not None else "0x000008NN"
        raise BadMagic(f"{path}: magic {magic:#010x}, expected {want}")
    ndim = magic & 0xFF
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise TruncatedFile(f"{path}: header truncated")
    dims = struct.unpack(f">{ndim}I", raw[4:head])
    need = int(np.prod(dims))
    if len(raw) - head < need:
        raise TruncatedFile(f"{path}: {len(raw) - head} data bytes, header declares {need}")
    return np.frombuffer(raw, dtype=np.uint8, count=need, offset=head).reshape(dims)


def write_idx(path, array):
    array = np.ascontiguousarray(array, dtype=np.uint8)
    header = struct.pack(">I", 0x0800 | array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "wb") as fh:
        fh.write(header + array.tobytes())


def _find(root, names):
    for name in names:
        for cand in (name, name + ".gz"):
            p = os.path.join(root, cand)
            if os.path.exists(p):
                return p
    raise MissingDataset(f"none of {names} (optionally .gz) found under {root}")


def load_mnist(root, split="train", checksums=None):
    """Read ``{train,t10k}-{images-idx3,labels-idx1}-ubyte[.gz]`` from ``root``."""
    prefix = "train" if split == "train" else "t10k"
    ipath = _find(root, [f"{prefix}-images-idx3-ubyte", f"{prefix}-images.idx3-ubyte"])
    lpath = _find(root, [f"{prefix}-labels-idx1-ubyte", f"{prefix}-labels.idx1-ubyte"])
    for p in (ipath, lpath):
        verify_checksum(p, (checksums or {}).get(os.path.basename(p)))
    images = read_idx(ipath, IDX_IMAGES)
    labels = read_idx(lpath, IDX_LABELS)
    return Dataset(images[:, None].astype(np.float64) / 255.0, labels.astype(np.int64))


def read_cifar_batch(path):
    raw = _read_bytes(path)
    if len(raw) == 0 or len(raw) % CIFAR_RECORD:
        raise TruncatedFile(f"{path}: {len(raw)} bytes is not a whole number of {CIFAR_RECORD}-byte records")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.max() > 9:
        raise BadMagic(f"{path}: label byte {labels.max()} outside 0..9")
    return rec[:, 1:].reshape(-1, 3, 32, 32), labels


def write_cifar_batch(path, images, labels):
    images = np.ascontiguousarray(images, dtype=np.uint8).reshape(len(labels), -1)
    rec = np.concatenate([np.asarray(labels, dtype=np.uint8)[:, None], images], axis=1)
    with open(path, "wb") as fh:
        fh.write(rec.tobytes())


def load_cifar10(root, split="train", checksums=None):
    sub = os.path.join(root, "cifar-10-batches-bin")
    base = sub if os.path.isdir(sub) else root
    names = [f"data_batch_{i}.bin" for i in range(1, 6)] if split == "train" else ["test_batch.bin"]
    imgs, labs = [], []
    for name in names:
        p = os.path.join(base, name)
        if not os.path.exists(p):
            raise MissingDataset(f"CIFAR-10 file not found: {p}")
        verify_checksum(p, (checksums or {}).get(name))
        i, lab = read_cifar_batch(p)
        imgs.append(i)
        labs.append(lab)
    return Dataset(np.concatenate(imgs).astype(np.float64) / 255.0, np.concatenate(labs))


def load_csv(path, shape=(1, 28, 28), label_col=-1, checksum=None):
    """Rows of comma-separated pixel bytes with one integer label column."""
    if not os.path.exists(path):
        raise MissingDataset(f"dataset file not found: {path}")
    verify_checksum(path, checksum)
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "rt") as fh:
        arr = np.loadtxt(fh, delimiter=",", dtype=np.int64, ndmin=2)
    width = int(np.prod(shape)) + 1
    if arr.shape[1] != width:
        raise TruncatedFile(f"{path}: rows have {arr.shape[1]} columns, expected {width}")
    labels = arr[:, label_col]
    pixels = np.delete(arr, label_col % width, axis=1)
    return Dataset(pixels.reshape((-1,) + tuple(shape)).astype(np.float64) / 255.0, labels)


KINDS = ("mnist-idx", "cifar10-binary", "csv")


def load_dataset(path, kind, split="train", checksums=None, shape=(1, 28, 28)):
    """``shape`` only applies to ``csv``; the binary formats carry their own."""
    if kind == "mnist-idx":
        return load_mnist(path, split, checksums)
    if kind == "cifar10-binary":
        return load_cifar10(path, split, checksums)
    if kind == "csv":
        return load_csv(path, shape, checksum=(checksums or {}).get(os.path.basename(str(path))))
    raise ValueError(f"unknown dataset kind {kind!r}; expected one of {KINDS}")


def channel_stats(images):
    mean = images.mean(axis=(0, 2, 3))
    std = images.std(axis=(0, 2, 3))
    return mean, np.where(std > 0, std, 1.0)


def normalize(images, mean, std):
    return (images - mean[None, :, None, None]) / std[None, :, None, None]


def augment(images, rng, pad=4):
    """Random horizontal flip (p = 1/2) and random crop after ``pad``-pixel zero padding."""
    images = np.asarray(images)
    single = images.ndim == 3
    x = images[None] if single else images
    n, _, h, w = x.shape
    flip = rng.random(n) < 0.5
    x = np.where(flip[:, None, None, None], x[..., ::-1], x)
    if pad:
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        dy = rng.integers(0, 2 * pad + 1, n)
        dx = rng.integers(0, 2 * pad + 1, n)
        x = np.stack([xp[i, :, dy[i]:dy[i] + h, dx[i]:dx[i] + w] for i in range(n)])
    return x[0] if single else x


def minibatches(n, batch_size, rng=None):
    """Index arrays covering ``range(n)``; shuffled when ``rng`` is given."""
    order = np.arange(n) if rng is None else rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]
