"""Dense 64-bit linear algebra helpers and seeded, platform-stable random streams."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from smckit.errors import DimensionMismatch, InvalidInput

_U64 = (1 << 64) - 1


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Coerce to a finite, non-empty 2-D float64 array."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim == 1:
        m = m[None, :]
    if m.ndim != 2 or m.size == 0:
        raise InvalidInput(f"{name} must be a non-empty 2-D array, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise InvalidInput(f"{name} contains non-finite entries")
    return m


def svd(a) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Thin SVD ``a = u @ diag(s) @ vt`` with ``s`` non-negative and non-increasing."""
    m = as_matrix(a)
    u, s, vt = np.linalg.svd(m, full_matrices=False)
    return u, s, vt


def centered_cross_covariance(x, y) -> np.ndarray:
    """Unbiased cross-covariance of row-variables over sample columns.

    ``x`` is (p, m) and ``y`` is (q, m); the result is (p, q).
    """
    xm = as_matrix(x, "x")
    ym = as_matrix(y, "y")
    if xm.shape[1] != ym.shape[1]:
        raise DimensionMismatch(f"sample counts differ: {xm.shape[1]} vs {ym.shape[1]}")
    m = xm.shape[1]
    if m < 2:
        raise InvalidInput("need at least two samples for a covariance")
    xc = xm - xm.mean(axis=1, keepdims=True)
    yc = ym - ym.mean(axis=1, keepdims=True)
    return (xc @ yc.T) / (m - 1)


@dataclass(frozen=True)
class RngStream:
    """An addressable random stream.

    Draws are a pure function of ``(seed, stream_id)``: the uniform source is
    Philox-4x64 keyed with ``[seed, stream_id]`` starting at counter zero, and
    Gaussian variates come from Box-Muller on consecutive uniform pairs.
    Independent sub-streams are derived with :meth:`child`.
    """

    seed: int
    stream_id: int = 0

    def __post_init__(self):
        if not (0 <= self.seed <= _U64 and 0 <= self.stream_id <= _U64):
            raise InvalidInput("seed and stream_id must be 64-bit unsigned integers")

    def generator(self) -> np.random.Generator:
        bitgen = np.random.Philox(key=np.array([self.seed, self.stream_id], dtype=np.uint64))
        return np.random.Generator(bitgen)

    def child(self, *labels: int | str) -> RngStream:
        """A new stream whose id is a stable hash of this stream and ``labels``."""
        h = hashlib.sha256(f"{self.seed}:{self.stream_id}".encode())
        for label in labels:
            h.update(b"/" + str(label).encode())
        return RngStream(self.seed, int.from_bytes(h.digest()[:8], "little"))

    def uniform(self, n: int) -> np.ndarray:
        """``n`` doubles in [0, 1) with 53-bit resolution."""
        return self.generator().random(int(n))

    def integers(self, high: int, n: int) -> np.ndarray:
        return self.generator().integers(0, high, size=int(n))

    def permutation(self, n: int) -> np.ndarray:
        return self.generator().permutation(int(n))


def gaussian(rng: RngStream, n: int, sigma: float) -> np.ndarray:
    """``n`` i.i.d. N(0, sigma^2) draws via Box-Muller on ``rng``."""
    if sigma < 0 or not np.isfinite(sigma):
        raise InvalidInput(f"sigma must be finite and >= 0, got {sigma}")
    n = int(n)
    if n < 0:
        raise InvalidInput("n must be non-negative")
    pairs = (n + 1) // 2
    u = rng.uniform(2 * pairs)
    u1 = 1.0 - u[0::2]  # (0, 1], keeps log finite
    u2 = u[1::2]
    r = np.sqrt(-2.0 * np.log(u1))
    theta = 2.0 * np.pi * u2
    z = np.empty(2 * pairs)
    z[0::2] = r * np.cos(theta)
    z[1::2] = r * np.sin(theta)
    if sigma == 0:
        return np.zeros(n)
    return sigma * z[:n]
