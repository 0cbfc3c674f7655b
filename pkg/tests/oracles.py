"""Independent reference implementations used as test oracles.

Each one is written the slow, obvious way and shares no code with the package.
"""

from __future__ import annotations

import math

import numpy as np


def central_diff(f, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Gradient of scalar ``f`` at ``x`` by central differences, one coordinate at a time."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = f(x)
        flat[i] = old - eps
        fm = f(x)
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * eps)
    return g


def rel_err(a, b) -> float:
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.abs(a - b).max() / max(np.abs(a).max(), np.abs(b).max(), 1e-12))


def conv2d_loops(x, w, b, pad):
    """Stride-1 cross-correlation with zero padding, as nested loops."""
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad : pad + h, pad : pad + wd] = x
    ho, wo = h + 2 * pad - k + 1, wd + 2 * pad - k + 1
    y = np.zeros((n, o, ho, wo))
    for i in range(n):
        for oc in range(o):
            for r in range(ho):
                for s in range(wo):
                    y[i, oc, r, s] = np.sum(xp[i, :, r : r + k, s : s + k] * w[oc]) + b[oc]
    return y


def maxpool_loops(x):
    n, c, h, w = x.shape
    y = np.zeros((n, c, h // 2, w // 2))
    for i in range(n):
        for ch in range(c):
            for r in range(h // 2):
                for s in range(w // 2):
                    y[i, ch, r, s] = x[i, ch, 2 * r : 2 * r + 2, 2 * s : 2 * s + 2].max()
    return y


def cca_2d(x: np.ndarray, y: np.ndarray) -> float:
    """Top canonical correlation of two 2-row representations.

    Solves the 2x2 generalized eigenproblem ``Sxy Syy^-1 Syx a = rho^2 Sxx a``
    in closed form via the characteristic polynomial.
    """
    m = x.shape[1]
    xc = x - x.mean(axis=1, keepdims=True)
    yc = y - y.mean(axis=1, keepdims=True)
    sxx, syy, sxy = xc @ xc.T / (m - 1), yc @ yc.T / (m - 1), xc @ yc.T / (m - 1)

    def inv2(a):
        det = a[0, 0] * a[1, 1] - a[0, 1] * a[1, 0]
        return np.array([[a[1, 1], -a[0, 1]], [-a[1, 0], a[0, 0]]]) / det

    mat = inv2(sxx) @ sxy @ inv2(syy) @ sxy.T
    tr = mat[0, 0] + mat[1, 1]
    det = mat[0, 0] * mat[1, 1] - mat[0, 1] * mat[1, 0]
    lam = tr / 2 + math.sqrt(max(tr * tr / 4 - det, 0.0))
    return math.sqrt(max(lam, 0.0))


def box_iou_scalar(a, b) -> float:
    """IoU of two corner boxes by explicit interval arithmetic."""
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def crc32_bitwise(data: bytes) -> int:
    """Reflected CRC-32, polynomial 0xEDB88320, bit by bit."""
    crc = 0xFFFFFFFF
    for byte in data:
        crc ^= byte
        for _ in range(8):
            crc = (crc >> 1) ^ (0xEDB88320 if crc & 1 else 0)
    return crc ^ 0xFFFFFFFF


def softmax_ce(z, y) -> float:
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-logp[np.arange(len(y)), y].mean())
