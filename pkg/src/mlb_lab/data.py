"""Synthetic two-modality Gaussian classification data.

Each class has one mean per modality. Means come from unit-norm latent class
codes of dimension ``latent_dim`` (default: the smaller input width), embedded
into the modality's input space by a random orthonormal map and scaled by that
modality's ``snr``. A small ``latent_dim`` crowds the classes together. Samples add
unit Gaussian noise, so ``snr`` is the mean norm in noise standard deviations.
A fraction ``overlap`` of the latent coordinates is shared between the two
modalities' class codes; the rest are drawn independently.
"""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass
from typing import Iterator, NamedTuple

import numpy as np

from mlb_lab.core import RngStream
from mlb_lab.errors import ConfigError, InputError
from mlb_lab.fileio import atomic_write_bytes

SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class SynthSpec:
    n_classes: int = 4
    in_v: int = 16
    in_a: int = 16
    n_train: int = 1000
    n_val: int = 200
    n_test: int = 1000
    snr_v: float = 2.0
    snr_a: float = 2.0
    overlap: float = 0.0
    seed: int = 0
    latent_dim: int | None = None

    def __post_init__(self):
        if self.n_classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.n_classes}")
        if self.in_v < 1 or self.in_a < 1:
            raise ConfigError("feature dimensions must be >= 1")
        if self.snr_v < 0 or self.snr_a < 0:
            raise ConfigError("snr values must be non-negative")
        if not 0.0 <= self.overlap <= 1.0:
            raise ConfigError(f"overlap must lie in [0, 1], got {self.overlap}")
        d = self.resolved_latent_dim
        if d < 1 or d > min(self.in_v, self.in_a):
            raise ConfigError(
                f"latent_dim {d} must lie in [1, min(in_v, in_a)={min(self.in_v, self.in_a)}]"
            )

    @property
    def resolved_latent_dim(self) -> int:
        if self.latent_dim is not None:
            return self.latent_dim
        return min(self.in_v, self.in_a)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Dataset:
    X_v: np.ndarray
    X_a: np.ndarray
    y: np.ndarray
    split: str
    n_classes: int

    def __post_init__(self):
        n = self.y.shape[0]
        if self.X_v.shape[0] != n or self.X_a.shape[0] != n:
            raise InputError(
                f"row counts differ: X_v {self.X_v.shape[0]}, X_a {self.X_a.shape[0]}, y {n}"
            )

    def __len__(self):
        return self.y.shape[0]

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.y, minlength=self.n_classes)


def _unit_rows(A):
    return A / np.linalg.norm(A, axis=1, keepdims=True)


def _orthonormal(rows, cols, rng):
    q, r = np.linalg.qr(rng.standard_normal((rows, cols)))
    return q * np.sign(np.diag(r))


def class_means(spec: SynthSpec, rng: np.random.Generator):
    """Per-modality class-mean matrices ``(C x in_v, C x in_a)``."""
    C, d = spec.n_classes, spec.resolved_latent_dim
    n_shared = int(round(spec.overlap * d))
    shared = rng.standard_normal((C, n_shared))
    codes = []
    for _ in range(2):
        own = rng.standard_normal((C, d - n_shared))
        codes.append(_unit_rows(np.concatenate([shared, own], axis=1)))
    Qv = _orthonormal(spec.in_v, d, rng)
    Qa = _orthonormal(spec.in_a, d, rng)
    return spec.snr_v * codes[0] @ Qv.T, spec.snr_a * codes[1] @ Qa.T


def _balanced_labels(n, C, rng):
    return rng.permutation(np.arange(n) % C)


def generate(spec: SynthSpec) -> tuple[Dataset, Dataset, Dataset]:
    """Train/val/test splits; a pure function of ``spec``."""
    for split in SPLITS:
        n = getattr(spec, f"n_{split}")
        if n < spec.n_classes:
            raise InputError(f"n_{split}={n} is smaller than the class count {spec.n_classes}")
    rng = RngStream(spec.seed).substream("data")
    mu_v, mu_a = class_means(spec, rng)
    out = []
    for split in SPLITS:
        n = getattr(spec, f"n_{split}")
        y = _balanced_labels(n, spec.n_classes, rng)
        xv = mu_v[y] + rng.standard_normal((n, spec.in_v))
        xa = mu_a[y] + rng.standard_normal((n, spec.in_a))
        out.append(Dataset(xv, xa, y.astype(np.int64), split, spec.n_classes))
    return tuple(out)


# canonical competition setting shared by the acceptance suite
PRESET_BASE = dict(
    n_classes=10,
    in_v=48,
    n_train=300,
    n_val=300,
    n_test=2000,
    overlap=0.0,
    latent_dim=3,
)
PRESET_SNR_V = 2.5
PRESET_IN_A_EASY = 8


def competition_preset(difficulty_gap: float, seed: int = 0) -> SynthSpec:
    """Two-modality spec where ``a`` is the fast, easy modality.

    ``a`` gets ``snr_v + difficulty_gap`` and, for any positive gap, a much
    lower input dimension than ``v``; ``difficulty_gap=0`` is fully symmetric.
    """
    if difficulty_gap < 0:
        raise ConfigError(f"difficulty_gap must be >= 0, got {difficulty_gap}")
    in_v = PRESET_BASE["in_v"]
    in_a = in_v if difficulty_gap == 0 else PRESET_IN_A_EASY
    return SynthSpec(
        **PRESET_BASE,
        in_a=in_a,
        snr_v=PRESET_SNR_V,
        snr_a=PRESET_SNR_V + difficulty_gap,
        seed=seed,
    )


class Batch(NamedTuple):
    idx: np.ndarray
    xv: np.ndarray
    xa: np.ndarray
    y: np.ndarray


def minibatches(ds: Dataset, batch: int, rng: np.random.Generator | None = None) -> Iterator[Batch]:
    """One epoch of shuffled batches; the last partial batch is kept.

    ``rng=None`` iterates in stored order (used for evaluation).
    """
    if batch < 1:
        raise ConfigError(f"batch size must be >= 1, got {batch}")
    n = len(ds)
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch):
        idx = order[start:start + batch]
        yield Batch(idx, ds.X_v[idx], ds.X_a[idx], ds.y[idx])


# ---------------------------------------------------------------------------
# export
#
# little-endian layout:
#   magic b"MLBDATA1"
#   u32 n_classes, u32 in_v, u32 in_a, u64 n_rows, i64 seed, 8-byte ASCII split tag
#   f64[n_rows * in_v] X_v row-major, f64[n_rows * in_a] X_a row-major, i64[n_rows] y

DATA_MAGIC = b"MLBDATA1"
_HEADER = struct.Struct("<IIIQq8s")


def dataset_bytes(ds: Dataset, seed: int) -> bytes:
    header = _HEADER.pack(ds.n_classes, ds.X_v.shape[1], ds.X_a.shape[1], len(ds), seed,
                          ds.split.encode("ascii").ljust(8, b"\0"))
    return b"".join([
        DATA_MAGIC,
        header,
        np.ascontiguousarray(ds.X_v, dtype="<f8").tobytes(),
        np.ascontiguousarray(ds.X_a, dtype="<f8").tobytes(),
        np.ascontiguousarray(ds.y, dtype="<i8").tobytes(),
    ])


def save_dataset(path, ds: Dataset, seed: int) -> None:
    atomic_write_bytes(path, dataset_bytes(ds, seed))


def load_dataset(path) -> tuple[Dataset, int]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != DATA_MAGIC:
        raise InputError(f"{path}: not a dataset file")
    C, fv, fa, n, seed, tag = _HEADER.unpack_from(raw, 8)
    off = 8 + _HEADER.size
    xv = np.frombuffer(raw, "<f8", n * fv, off).reshape(n, fv)
    off += xv.nbytes
    xa = np.frombuffer(raw, "<f8", n * fa, off).reshape(n, fa)
    off += xa.nbytes
    y = np.frombuffer(raw, "<i8", n, off)
    split = tag.rstrip(b"\0").decode("ascii")
    return Dataset(xv.astype(np.float64), xa.astype(np.float64), y.astype(np.int64), split, C), seed
