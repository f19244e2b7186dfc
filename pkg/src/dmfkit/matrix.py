"""Dense real-matrix primitives shared across the package.

Matrices are plain ``float64`` numpy arrays. The helpers here add the few
things numpy does not give directly: validated construction, seeded Gaussian
sampling, observation masks, and CSV round-tripping.
"""

from __future__ import annotations

import hashlib
import io
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

Mat = np.ndarray


class SvdError(RuntimeError):
    """Raised when the SVD routine fails to converge."""


def as_mat(data, copy: bool = False) -> Mat:
    """Coerce ``data`` to a finite 2-D float64 array."""
    m = np.array(data, dtype=np.float64) if copy else np.asarray(data, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
        raise ValueError(f"expected a non-empty 2-D matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix contains non-finite entries")
    return m


def derive_seed(*parts) -> int:
    """Hash an arbitrary tuple of seed components into a 63-bit integer seed.

    Used to carve independent substreams out of one base seed: the same parts
    always give the same seed, and changing any part gives an unrelated one.
    """
    key = "|".join(repr(p) for p in parts).encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "little") >> 1


def rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed))


def gaussian(rows: int, cols: int, std: float, seed: int) -> Mat:
    """I.i.d. ``N(0, std**2)`` matrix, reproducible for a fixed seed."""
    if rows < 1 or cols < 1:
        raise ValueError("rows and cols must be >= 1")
    if std < 0:
        raise ValueError("std must be non-negative")
    if std == 0:
        return np.zeros((rows, cols))
    return std * rng(seed).standard_normal((rows, cols))


@dataclass(frozen=True)
class Mask:
    """Boolean observation pattern, ``True`` where an entry is observed."""

    observed: np.ndarray

    def __post_init__(self):
        obs = np.asarray(self.observed, dtype=bool)
        if obs.ndim != 2:
            raise ValueError("mask must be 2-D")
        object.__setattr__(self, "observed", obs)

    @classmethod
    def full(cls, rows: int, cols: int) -> Mask:
        return cls(np.ones((rows, cols), dtype=bool))

    @property
    def shape(self) -> tuple[int, int]:
        return self.observed.shape

    @property
    def count(self) -> int:
        return int(self.observed.sum())

    def sampling_rate(self) -> float:
        return self.count / self.observed.size


class SvdResult(NamedTuple):
    u: Mat
    singular_values: np.ndarray
    vt: Mat


def svd(m: Mat) -> SvdResult:
    """Full SVD with singular values sorted in descending order."""
    m = np.asarray(m, dtype=np.float64)
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix contains non-finite entries")
    try:
        u, s, vt = np.linalg.svd(m, full_matrices=True)
    except np.linalg.LinAlgError as exc:
        raise SvdError(str(exc)) from exc
    return SvdResult(u, s, vt)


def singular_values(m: Mat) -> np.ndarray:
    try:
        return np.linalg.svd(np.asarray(m, dtype=np.float64), compute_uv=False)
    except np.linalg.LinAlgError as exc:
        raise SvdError(str(exc)) from exc


def apply_mask(m: Mat, mask: Mask) -> Mat:
    """Zero out every unobserved entry."""
    m = np.asarray(m, dtype=np.float64)
    if m.shape != mask.shape:
        raise ValueError(f"shape mismatch: matrix {m.shape} vs mask {mask.shape}")
    return np.where(mask.observed, m, 0.0)


def frobenius(m: Mat) -> float:
    return float(np.linalg.norm(m, "fro"))


def spectral(m: Mat) -> float:
    return float(singular_values(m)[0])


def save_csv(m: Mat, path) -> None:
    """Write one matrix row per line using ``repr`` floats (lossless)."""
    m = np.asarray(m, dtype=np.float64)
    lines = [",".join(repr(float(x)) for x in row) for row in m]
    Path(path).write_text("\n".join(lines) + "\n")


def load_csv(path) -> Mat:
    text = Path(path).read_text()
    rows = [line for line in text.splitlines() if line.strip()]
    if not rows:
        raise ValueError(f"{path}: empty matrix file")
    return as_mat(np.loadtxt(io.StringIO("\n".join(rows)), delimiter=",", ndmin=2))
