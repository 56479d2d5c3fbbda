"""Seeded randomness, row normalisation and the MAT1 matrix file format.

Matrices and vectors are plain ``float64`` numpy arrays. Gaussian draws come
from numpy's PCG64 bit generator through ``Generator.standard_normal``
(ziggurat transform of uniform variates). Both are fixed by numpy's stream
compatibility policy, so a seed reproduces the same values across runs.
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

MAT1_MAGIC = b"SARAMAT1"


class DimensionMismatch(ValueError):
    """Raised when array dimensions do not agree."""


class ZeroRow(ValueError):
    def __init__(self, index: int):
        super().__init__(f"row {index} has zero norm")
        self.index = index


def _label_words(label: str) -> list[int]:
    digest = hashlib.blake2b(label.encode("utf-8"), digest_size=16).digest()
    return list(struct.unpack("<4I", digest))


class SeededRng:
    """Deterministic random stream that can be split into labelled substreams.

    ``child("lemma1")`` always yields the same generator for the same parent
    seed, regardless of how much the parent or other children have consumed,
    so adding a new consumer never shifts the existing streams.
    """

    def __init__(self, seed: int, _path: tuple[int, ...] = ()):
        if seed < 0 or seed >= 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")
        self.seed = int(seed)
        self._path = _path
        entropy = [self.seed & 0xFFFFFFFF, self.seed >> 32, *_path]
        self.generator = np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))

    def child(self, label: str) -> "SeededRng":
        return SeededRng(self.seed, self._path + tuple(_label_words(label)))

    def standard_normal(self, shape) -> np.ndarray:
        return self.generator.standard_normal(shape)

    def uniform(self, size=None) -> np.ndarray | float:
        return self.generator.random(size)

    def __repr__(self) -> str:
        return f"SeededRng(seed={self.seed}, depth={len(self._path) // 4})"


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Validate and return ``a`` as a finite 2-D float64 array."""
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionMismatch(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def as_vector(a, name: str = "vector") -> np.ndarray:
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 1:
        raise DimensionMismatch(f"{name} must be 1-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def gaussian_matrix(rng: SeededRng, rows: int, cols: int) -> np.ndarray:
    """Matrix with i.i.d. N(0, 1) entries."""
    if rows < 1 or cols < 1:
        raise ValueError(f"dimensions must be positive, got {rows}x{cols}")
    return rng.standard_normal((rows, cols))


def normalize_rows_to_radius(mat, r: float) -> np.ndarray:
    """Rescale every row of ``mat`` to Euclidean norm ``r``."""
    mat = as_matrix(mat)
    if not r > 0:
        raise ValueError("radius must be positive")
    norms = np.linalg.norm(mat, axis=1)
    zero = np.flatnonzero(norms == 0)
    if zero.size:
        raise ZeroRow(int(zero[0]))
    out = mat * (r / norms)[:, None]
    # one correction pass brings the norm to within a couple of ulps
    return out * (r / np.linalg.norm(out, axis=1))[:, None]


def write_mat1(path, mat) -> None:
    mat = as_matrix(mat)
    rows, cols = mat.shape
    with open(path, "wb") as fh:
        fh.write(MAT1_MAGIC)
        fh.write(struct.pack("<QQ", rows, cols))
        fh.write(np.ascontiguousarray(mat, dtype="<f8").tobytes())


def read_mat1(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:8] != MAT1_MAGIC:
        raise ValueError(f"{path}: bad magic {raw[:8]!r}")
    rows, cols = struct.unpack("<QQ", raw[8:24])
    body = raw[24:]
    if len(body) != 8 * rows * cols:
        raise ValueError(f"{path}: expected {rows * cols} values, found {len(body) // 8}")
    return np.frombuffer(body, dtype="<f8").reshape(rows, cols).astype(np.float64)
