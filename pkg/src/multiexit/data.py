"""Datasets: synthetic Gaussian mixtures and IDX-format files."""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, IdxFormatError

DATASET_KINDS = ("synthetic_blobs", "synthetic_easy_hard", "idx_files")


@dataclass(frozen=True)
class DatasetSpec:
    """What data to generate or load and how to split it.

    For ``idx_files`` the validation split is held out from the end of the
    training files; ``n_train``/``n_test`` of 0 mean "use everything".
    """

    kind: str = "synthetic_easy_hard"
    n_train: int = 10000
    n_val: int = 2000
    n_test: int = 2000
    input_dim: int = 32
    classes: int = 10
    difficulty_mix: float = 0.3
    seed: int = 0
    separation: float = 5.0
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""

    def __post_init__(self):
        if self.kind not in DATASET_KINDS:
            raise ConfigError(f"dataset kind must be one of {DATASET_KINDS}")
        if min(self.n_train, self.n_val, self.n_test) < 0:
            raise ConfigError("split sizes must be >= 0")
        if not 0.0 <= self.difficulty_mix <= 1.0:
            raise ConfigError("difficulty_mix must lie in [0, 1]")
        if self.kind != "idx_files":
            if self.classes < 2:
                raise ConfigError("need at least 2 classes")
            if self.classes > 2 * self.input_dim:
                raise ConfigError(
                    f"{self.classes} classes cannot be given distinct axis-aligned cluster "
                    f"centres in {self.input_dim} dimensions (max {2 * self.input_dim})")


@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    hard_test: np.ndarray | None = None

    @property
    def input_dim(self) -> int:
        return self.x_train.shape[1]

    @property
    def num_classes(self) -> int:
        return int(max(self.y_train.max(), self.y_val.max(initial=0), self.y_test.max(initial=0))) + 1

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for arr in (self.x_train, self.y_train, self.x_val, self.y_val, self.x_test, self.y_test):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


def _axis_centres(classes: int, dim: int) -> np.ndarray:
    centres = np.zeros((classes, dim))
    for c in range(classes):
        centres[c, c // 2] = 1.0 if c % 2 == 0 else -1.0
    return centres


def generate_synthetic(spec: DatasetSpec) -> Dataset:
    """Gaussian class clusters centred on signed coordinate axes.

    ``synthetic_blobs``: every sample is ``separation * centre_c + N(0, I)``
    scaled so clusters are clearly separated.

    ``synthetic_easy_hard``: a ``difficulty_mix`` fraction of samples is hard.
    Easy samples sit on the well-separated axis clusters. Hard samples live
    near the origin; their label is carried by the last two coordinates, where
    each class owns several small sub-clusters scattered over a square. The
    sub-clusters of different classes interleave and overlap, so hard samples
    need a nonlinear boundary and are never classified with certainty.

    Labels are balanced to within one sample per class in every split.
    """
    if spec.kind == "idx_files":
        raise ConfigError("idx_files datasets are loaded, not generated")
    rng = np.random.default_rng(spec.seed)
    n = spec.n_train + spec.n_val + spec.n_test
    C, d = spec.classes, spec.input_dim
    # balanced within every split
    y = np.concatenate([rng.permutation(np.arange(m) % C)
                        for m in (spec.n_train, spec.n_val, spec.n_test)]).astype(np.int64)
    centres = _axis_centres(C, d)
    x = spec.separation * centres[y] + rng.standard_normal((n, d))
    hard = np.zeros(n, dtype=bool)
    if spec.kind == "synthetic_easy_hard" and spec.difficulty_mix > 0:
        hard = rng.permutation(n) < round(spec.difficulty_mix * n)
        n_sub = 4
        sub = rng.uniform(-3.0, 3.0, size=(C, n_sub, 2))
        which = rng.integers(0, n_sub, size=n)
        hx = 0.3 * rng.standard_normal((n, d))
        hx[:, -2:] = sub[y, which] + 0.3 * rng.standard_normal((n, 2))
        x = np.where(hard[:, None], hx, x)
    a, b = spec.n_train, spec.n_train + spec.n_val
    return Dataset(x[:a], y[:a], x[a:b], y[a:b], x[b:], y[b:], hard[b:])


# ---------------------------------------------------------------------------
# IDX files

_IDX_TYPES = {
    0x08: np.dtype("u1"),
    0x09: np.dtype("i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
_IDX_CODES = {np.dtype(v).newbyteorder("="): k for k, v in _IDX_TYPES.items()}


def parse_idx(blob: bytes) -> np.ndarray:
    """Decode IDX bytes: 2 zero bytes, type code, ndim, big-endian u32 dims, data."""
    if len(blob) < 4:
        raise IdxFormatError(f"file too short for a magic number ({len(blob)} bytes)", 0)
    if blob[0] != 0 or blob[1] != 0:
        raise IdxFormatError(f"bad magic 0x{blob[:4].hex()}", 0)
    code, ndim = blob[2], blob[3]
    if code not in _IDX_TYPES:
        raise IdxFormatError(f"unknown IDX type code 0x{code:02x}", 2)
    header_end = 4 + 4 * ndim
    if len(blob) < header_end:
        raise IdxFormatError(
            f"truncated header: expected {header_end} bytes, got {len(blob)}", len(blob))
    dims = struct.unpack(f">{ndim}I", blob[4:header_end])
    dtype = _IDX_TYPES[code]
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    actual = len(blob) - header_end
    if actual != expected:
        raise IdxFormatError(
            f"payload length mismatch: expected {expected} bytes, got {actual}", header_end + min(actual, expected))
    data = np.frombuffer(blob, dtype=dtype, offset=header_end).reshape(dims)
    return data.astype(dtype.newbyteorder("="))


def read_idx(path) -> np.ndarray:
    with open(path, "rb") as f:
        return parse_idx(f.read())


def idx_bytes(array: np.ndarray) -> bytes:
    array = np.asarray(array)
    native = array.dtype.newbyteorder("=")
    if native not in _IDX_CODES:
        raise ValueError(f"dtype {array.dtype} has no IDX type code")
    code = _IDX_CODES[native]
    header = bytes([0, 0, code, array.ndim]) + struct.pack(f">{array.ndim}I", *array.shape)
    return header + np.ascontiguousarray(array, dtype=_IDX_TYPES[code]).tobytes()


def write_idx(path, array: np.ndarray) -> None:
    with open(path, "wb") as f:
        f.write(idx_bytes(array))


def load_idx(images_path, labels_path) -> tuple[np.ndarray, np.ndarray]:
    """Load an image/label IDX pair as flattened float64 images in [0, 1]."""
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.shape[0] != labels.shape[0]:
        raise ValueError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    x = images.reshape(images.shape[0], -1).astype(np.float64)
    if images.dtype == np.uint8:
        x /= 255.0
    return x, labels.astype(np.int64)


def load_idx_dataset(spec: DatasetSpec) -> Dataset:
    x, y = load_idx(spec.train_images, spec.train_labels)
    n_val = spec.n_val
    n_fit = len(y) - n_val if spec.n_train == 0 else spec.n_train
    if n_fit + n_val > len(y) or n_fit < 1:
        raise ConfigError(f"cannot take {n_fit} train + {n_val} val samples from {len(y)}")
    x_te, y_te = load_idx(spec.test_images, spec.test_labels)
    if spec.n_test:
        x_te, y_te = x_te[:spec.n_test], y_te[:spec.n_test]
    return Dataset(x[:n_fit], y[:n_fit], x[len(y) - n_val:], y[len(y) - n_val:], x_te, y_te)


def make_dataset(spec: DatasetSpec) -> Dataset:
    if spec.kind == "idx_files":
        return load_idx_dataset(spec)
    return generate_synthetic(spec)
