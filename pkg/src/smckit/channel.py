"""AWGN on transmitted parameter values, and the flatness penalty that makes a
component tolerate it.

Works on any model exposing ``trainable_params``/``set_trainable_params``,
``task_pass`` and ``vjp`` (both :class:`~smckit.model.ModelGraph` and
:class:`~smckit.expandable.ExpandedModel` do).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from smckit.errors import InvalidInput, NumericalError, ZeroSignalPower
from smckit.linalg import RngStream, gaussian
from smckit.model import LayoutEntry, global_norm

POWER_MODES = ("per_tensor", "global")
PENALTY_MODES = ("analytic", "finite_diff")
PAUTA_P = 3.0


@dataclass(frozen=True)
class ChannelConfig:
    snr_db: float = math.inf
    seed: int = 0
    power_mode: str = "per_tensor"

    def __post_init__(self):
        if self.power_mode not in POWER_MODES:
            raise InvalidInput(f"unknown power mode {self.power_mode!r}")
        if math.isnan(self.snr_db) or self.snr_db == -math.inf:
            raise InvalidInput(f"invalid SNR {self.snr_db}")

    @property
    def noiseless(self) -> bool:
        return self.snr_db == math.inf


@dataclass(frozen=True)
class RobustnessConfig:
    beta: float = 0.0
    p: float = PAUTA_P
    penalty_mode: str = "analytic"

    def __post_init__(self):
        if self.beta < 0 or self.p <= 0:
            raise InvalidInput("need beta >= 0 and p > 0")
        if self.penalty_mode not in PENALTY_MODES:
            raise InvalidInput(f"unknown penalty mode {self.penalty_mode!r}")


def _sigma(power: float, snr_db: float) -> float:
    if snr_db == math.inf:
        return 0.0
    if power <= 0:
        raise ZeroSignalPower("signal has zero power, SNR is undefined")
    return math.sqrt(power / 10.0 ** (snr_db / 10.0))


def snr_to_sigma(params, cfg: ChannelConfig, layout: Sequence[LayoutEntry] | None = None):
    """Noise standard deviation giving ``cfg.snr_db`` against the mean-square parameter value.

    Returns one sigma per layout entry in ``per_tensor`` mode (the whole vector
    counts as one tensor without a layout), else a single float.
    """
    vec = np.asarray(params, dtype=np.float64).ravel()
    if vec.size == 0:
        raise InvalidInput("empty parameter vector")
    if cfg.power_mode == "global" or layout is None:
        s = _sigma(float(np.mean(vec * vec)), cfg.snr_db)
        return s if cfg.power_mode == "global" else np.array([s])
    return np.array([_sigma(float(np.mean(vec[e.offset : e.offset + e.size] ** 2)), cfg.snr_db) for e in layout])


def transmit(params, layout: Sequence[LayoutEntry] | None, cfg: ChannelConfig, stream: int | str = 0) -> np.ndarray:
    """``params`` plus seeded Gaussian noise at the configured SNR; identity at infinite SNR."""
    vec = np.asarray(params, dtype=np.float64).ravel()
    if cfg.noiseless:
        if vec.size == 0:
            raise InvalidInput("empty parameter vector")
        return vec.copy()
    sig = snr_to_sigma(vec, cfg, layout)
    if np.ndim(sig) == 0 or layout is None:
        per_elem = np.full(vec.size, float(np.ravel(sig)[0]))
    else:
        per_elem = np.empty(vec.size)
        for e, s in zip(layout, sig):
            per_elem[e.offset : e.offset + e.size] = s
    noise = gaussian(RngStream(cfg.seed).child("awgn", stream), vec.size, 1.0)
    return vec + per_elem * noise


def transmit_tensors(tensors: dict[str, dict[str, np.ndarray]], cfg: ChannelConfig, stream: int | str = 0):
    """Apply :func:`transmit` to a name -> role -> array mapping, keeping shapes."""
    layout, chunks, offset = [], [], 0
    for name in sorted(tensors):
        for role in sorted(tensors[name]):
            t = np.asarray(tensors[name][role], dtype=np.float64)
            layout.append(LayoutEntry(name, role, t.shape, offset))
            chunks.append(t.ravel())
            offset += t.size
    noisy = transmit(np.concatenate(chunks), layout, cfg, stream)
    out: dict[str, dict[str, np.ndarray]] = {}
    for e in layout:
        out.setdefault(e.name, {})[e.role] = noisy[e.offset : e.offset + e.size].reshape(e.shape)
    return out


def empirical_snr_db(clean, noisy) -> float:
    clean = np.asarray(clean, dtype=np.float64)
    noise = np.asarray(noisy, dtype=np.float64) - clean
    return 10.0 * math.log10(float(np.mean(clean**2)) / float(np.mean(noise**2)))


# gradient-norm penalty ---------------------------------------------------------


def _task_pass(model, x, target, loss):
    if loss is None:
        return model.task_pass(x, target)
    return model.task_pass(x, target, loss)


def _scaled(tree, s):
    return {n: {r: s * t for r, t in g.items()} for n, g in tree.items()}


def _shifted(params, v, s):
    return {n: {r: params[n][r] + s * v[n][r] for r in params[n]} for n in params}


def grad_norm_penalty(model, x, target, mode: str = "analytic", loss=None, eps: float = 1e-5):
    """Norm of the task-loss gradient over trainable tensors, and its own gradient.

    Returns ``(penalty, penalty_grads, task_pass)``. The gradient of ``||g||`` is
    ``H g / ||g||``; ``analytic`` gets the Hessian-vector product from the
    R-operator passes, ``finite_diff`` from central differences of ``g``.
    ``loss`` is needed for plain graphs; expanded models carry their own.
    """
    if mode not in PENALTY_MODES:
        raise InvalidInput(f"unknown penalty mode {mode!r}")
    tp = _task_pass(model, x, target, loss)
    penalty = global_norm(tp.grads)
    if not np.isfinite(penalty):
        raise NumericalError(f"non-finite gradient norm {penalty}")
    if penalty == 0.0:
        return 0.0, _scaled(tp.grads, 0.0), tp
    v = _scaled(tp.grads, 1.0 / penalty)
    if mode == "analytic":
        hv = tp.hvp(v)
    else:
        base = {n: {r: t.copy() for r, t in p.items()} for n, p in model.trainable_params().items()}
        try:
            model.set_trainable_params(_shifted(base, v, eps))
            g_plus = _task_pass(model, x, target, loss).grads
            model.set_trainable_params(_shifted(base, v, -eps))
            g_minus = _task_pass(model, x, target, loss).grads
        finally:
            model.set_trainable_params(base)
        hv = {n: {r: (g_plus[n][r] - g_minus[n][r]) / (2 * eps) for r in g_plus[n]} for n in g_plus}
    if not np.isfinite(global_norm(hv)):
        raise NumericalError("non-finite penalty gradient")
    return penalty, hv, tp


# disturbance and its first-order bound -----------------------------------------


def perturbed_params(model, cfg: ChannelConfig, trial: int = 0):
    """The model's trainable tensors after one pass through the channel."""
    return transmit_tensors(model.trainable_params(), cfg, stream=f"trial{trial}")


def _sigma_tree(model, cfg: ChannelConfig):
    params = model.trainable_params()
    if cfg.power_mode == "global":
        vec = np.concatenate([t.ravel() for p in params.values() for t in p.values()])
        s = _sigma(float(np.mean(vec * vec)), cfg.snr_db)
        return {n: {r: s for r in p} for n, p in params.items()}
    return {n: {r: _sigma(float(np.mean(t * t)), cfg.snr_db) for r, t in p.items()} for n, p in params.items()}


def output_jacobian_norm(model, x, sigmas=None) -> float:
    """Frobenius norm of d(outputs)/d(trainable params) over the batch.

    With ``sigmas`` each tensor's Jacobian block is scaled by its noise level,
    giving the RMS first-order output disturbance.
    """
    total = 0.0
    for i in range(len(x)):
        xi = x[i : i + 1]
        out = model(xi)
        k = out.reshape(1, -1).shape[1]
        for j in range(k):
            dout = np.zeros(k)
            dout[j] = 1.0
            grads = model.vjp(xi, dout.reshape(out.shape))
            for n, g in grads.items():
                for r, t in g.items():
                    s = 1.0 if sigmas is None else sigmas[n][r]
                    total += s * s * float((t * t).sum())
    return math.sqrt(total)


def disturbance(model, x, cfg: ChannelConfig, trials: int, p: float = PAUTA_P):
    """Monte-Carlo output disturbance under channel noise and its bound.

    Returns ``(epsilon, bound, per_trial)`` where ``epsilon`` is the mean over
    trials of ``||h(W, b) - h(W + N_w, b + N_b)||`` on the batch and
    ``bound = p * ||J diag(sigma)||_F`` (``p * sigma * ||J||_F`` for one sigma).
    """
    if trials < 1:
        raise InvalidInput("trials must be >= 1")
    clean = model(x)
    original = {n: {r: t.copy() for r, t in p.items()} for n, p in model.trainable_params().items()}
    per_trial = np.empty(trials)
    try:
        for k in range(trials):
            noisy = original if cfg.noiseless else transmit_tensors(original, cfg, stream=f"trial{k}")
            model.set_trainable_params(noisy)
            per_trial[k] = float(np.linalg.norm(model(x) - clean))
    finally:
        model.set_trainable_params(original)
    if cfg.noiseless:
        return 0.0, 0.0, per_trial
    bound = p * output_jacobian_norm(model, x, _sigma_tree(model, cfg))
    if not np.isfinite(bound):
        raise NumericalError("non-finite disturbance bound")
    return float(per_trial.mean()), bound, per_trial
