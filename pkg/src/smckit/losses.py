"""Task losses with first derivatives and their directional (R-op) derivatives.

Each loss returns batch-mean values; ``grad`` is d(loss)/d(logits) and
``rgrad`` is the derivative of ``grad`` along a logit direction ``rz``.
"""

from __future__ import annotations

import numpy as np

from smckit.errors import DimensionMismatch


def softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


class CrossEntropy:
    """Softmax cross-entropy against integer class ids."""

    name = "cross_entropy"

    def _check(self, z, y):
        if z.ndim != 2 or y.shape != (z.shape[0],):
            raise DimensionMismatch(f"logits {z.shape} vs labels {y.shape}")

    def value(self, z, y):
        self._check(z, y)
        zs = z - z.max(axis=1, keepdims=True)
        logp = zs - np.log(np.exp(zs).sum(axis=1, keepdims=True))
        return float(-logp[np.arange(len(y)), y].mean())

    def grad(self, z, y):
        self._check(z, y)
        p = softmax(z)
        p[np.arange(len(y)), y] -= 1.0
        return p / len(y)

    def rgrad(self, z, y, rz):
        if rz is None:
            return None
        p = softmax(z)
        return p * (rz - (p * rz).sum(axis=1, keepdims=True)) / len(y)


class BinaryCrossEntropy:
    """Per-element sigmoid cross-entropy, averaged over every element."""

    name = "binary_cross_entropy"

    def _check(self, z, t):
        if z.shape != t.shape:
            raise DimensionMismatch(f"logits {z.shape} vs targets {t.shape}")

    def value(self, z, t):
        self._check(z, t)
        # log(1 + e^z) - t z, stable for large |z|
        return float((np.logaddexp(0.0, z) - t * z).mean())

    def grad(self, z, t):
        self._check(z, t)
        return (_sigmoid(z) - t) / z.size

    def rgrad(self, z, t, rz):
        if rz is None:
            return None
        s = _sigmoid(z)
        return s * (1.0 - s) * rz / z.size


class MeanSquaredError:
    """Squared error summed over outputs, averaged over samples."""

    name = "mse"

    def _check(self, z, t):
        if z.shape != t.shape:
            raise DimensionMismatch(f"outputs {z.shape} vs targets {t.shape}")

    def value(self, z, t):
        self._check(z, t)
        return float(((z - t) ** 2).sum() / len(z))

    def grad(self, z, t):
        self._check(z, t)
        return 2.0 * (z - t) / len(z)

    def rgrad(self, z, t, rz):
        if rz is None:
            return None
        return 2.0 * rz / len(z)


LOSSES = {cls.name: cls for cls in (CrossEntropy, BinaryCrossEntropy, MeanSquaredError)}


def get_loss(name: str):
    return LOSSES[name]()
