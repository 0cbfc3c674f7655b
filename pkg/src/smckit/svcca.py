"""SVCCA layer similarity and split-point selection."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from smckit.errors import DegenerateRepresentation, DimensionMismatch, InvalidInput, NotFound
from smckit.linalg import centered_cross_covariance
from smckit.model import ActivationRecord, ModelGraph

DEFAULT_VARIANCE_KEEP = 0.99
DEFAULT_RHO_T = 0.6
PROBE_SIZE = 512
_RIDGE = 1e-8


@dataclass
class CcaProfile:
    candidates: list[str]
    rho1: list[float]
    retained_dims: list[tuple[int, int]]
    # last layer of each candidate, and the whole feature extractor in depth order
    boundaries: list[str] = field(default_factory=list)
    extractor_layers: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not (len(self.candidates) == len(self.rho1) == len(self.retained_dims)):
            raise InvalidInput("profile columns have different lengths")
        for r in self.rho1:
            if not -1e-9 <= r <= 1 + 1e-9:
                raise InvalidInput(f"rho1 {r} outside [0, 1]")

    def rows(self):
        return list(zip(self.candidates, self.rho1, self.retained_dims))


@dataclass
class SplitPlan:
    split_layer: str | None  # last layer of the generalized extractor; None when it is empty
    phi_g_layers: list[str]
    phi_s_layers: list[str]
    threshold: float | None = None
    candidate: str | None = None

    def __post_init__(self):
        if set(self.phi_g_layers) & set(self.phi_s_layers):
            raise InvalidInput("generalized and special extractors overlap")

    def to_dict(self) -> dict:
        return {
            "split_layer": self.split_layer,
            "phi_g_layers": list(self.phi_g_layers),
            "phi_s_layers": list(self.phi_s_layers),
            "threshold": self.threshold,
            "candidate": self.candidate,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> SplitPlan:
        return cls(d["split_layer"], list(d["phi_g_layers"]), list(d["phi_s_layers"]), d.get("threshold"), d.get("candidate"))


def _truncate(values: np.ndarray, variance_keep: float) -> np.ndarray:
    """Project centered rows onto the top singular directions holding ``variance_keep`` of the variance."""
    centered = values - values.mean(axis=1, keepdims=True)
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    energy = s**2
    total = energy.sum()
    if total <= 1e-24 * max(1, centered.size) or s[0] <= 1e-12 * np.sqrt(centered.shape[1]):
        raise DegenerateRepresentation("representation has no variance")
    k = int(np.searchsorted(np.cumsum(energy) / total, variance_keep - 1e-12) + 1)
    k = min(k, len(s))
    return s[:k, None] * vt[:k]


def _inv_sqrt(cov: np.ndarray) -> np.ndarray:
    dim = cov.shape[0]
    eps = _RIDGE * np.trace(cov) / dim
    w, v = np.linalg.eigh(cov + eps * np.eye(dim))
    return (v / np.sqrt(w)) @ v.T


def cca_correlations(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """All canonical correlations of row-variable matrices ``x`` and ``y``, descending."""
    sxx = centered_cross_covariance(x, x)
    syy = centered_cross_covariance(y, y)
    sxy = centered_cross_covariance(x, y)
    m = _inv_sqrt(sxx) @ sxy @ _inv_sqrt(syy)
    return np.linalg.svd(m, compute_uv=False)


def svcca_similarity(rep_a, rep_b, variance_keep: float = DEFAULT_VARIANCE_KEEP) -> tuple[float, tuple[int, int]]:
    """Top canonical correlation between SVD-truncated representations.

    Accepts :class:`ActivationRecord` objects or raw (neurons, samples) arrays.
    Returns ``(rho1, (k_a, k_b))`` with the retained subspace dimensions.
    """
    a = np.asarray(getattr(rep_a, "values", rep_a), dtype=np.float64)
    b = np.asarray(getattr(rep_b, "values", rep_b), dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise InvalidInput("representations must be (neurons, samples) matrices")
    if a.shape[1] != b.shape[1]:
        raise DimensionMismatch(f"sample counts differ: {a.shape[1]} vs {b.shape[1]}")
    if not 0 < variance_keep <= 1:
        raise InvalidInput(f"variance_keep must be in (0, 1], got {variance_keep}")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise InvalidInput("representations contain non-finite values")
    ta = _truncate(a, variance_keep)
    tb = _truncate(b, variance_keep)
    if a.shape[1] <= max(len(ta), len(tb)):
        raise InvalidInput(f"{a.shape[1]} samples cannot support {max(len(ta), len(tb))} retained dimensions")
    rho = cca_correlations(ta, tb)
    return float(np.clip(rho[0], 0.0, 1.0)), (len(ta), len(tb))


def extractor_layers(model: ModelGraph) -> list[str]:
    """Feature-extractor layers: the union of the blocks, or everything but the last layer."""
    if model.blocks:
        return [n for _, ls in model.blocks for n in ls]
    return model.names[:-1]


def _resolve(model: ModelGraph, candidate: str) -> list[str]:
    for block, ls in model.blocks:
        if block == candidate:
            return list(ls)
    model.index(candidate)
    return [candidate]


def _measured(model: ModelGraph, names: Sequence[str]) -> list[str]:
    # flatten only reshapes the preceding output, so it would double-count that layer
    return [n for n in names if model.layer(n).kind != "flatten"] or list(names)


def layer_profile(
    model_a: ModelGraph,
    model_b: ModelGraph,
    probe,
    candidates: Sequence[str],
    variance_keep: float = DEFAULT_VARIANCE_KEEP,
) -> CcaProfile:
    """Per-candidate SVCCA similarity of two models on the same probe batch.

    A candidate is a layer name or a block name; a block's value is the mean
    over its layers.
    """
    if not candidates:
        raise InvalidInput("no candidates given")
    groups = [_measured(model_a, _resolve(model_a, c)) for c in candidates]
    for c, g in zip(candidates, groups):
        for n in g:
            try:
                model_b.index(n)
            except NotFound:
                raise NotFound(f"candidate {c!r}: layer {n!r} missing from second model") from None
            if model_a.output_shape_of(n)[0] != model_b.output_shape_of(n)[0]:
                raise DimensionMismatch(f"layer {n!r} widths differ between models")
    wanted = sorted({n for g in groups for n in g}, key=model_a.index)
    _, rec_a = model_a.forward(probe, capture=wanted)
    _, rec_b = model_b.forward(probe, capture=wanted)
    rho1, dims = [], []
    for g in groups:
        vals = [svcca_similarity(rec_a[n], rec_b[n], variance_keep) for n in g]
        rho1.append(float(np.mean([v[0] for v in vals])))
        dims.append(vals[-1][1])
    boundaries = [_resolve(model_a, c)[-1] for c in candidates]
    return CcaProfile(list(candidates), rho1, dims, boundaries, extractor_layers(model_a))


def plan_after(model_or_layers, boundary: str | None, threshold: float | None = None, candidate=None) -> SplitPlan:
    """Split plan whose generalized part ends at layer ``boundary`` (``None``: empty)."""
    layers = model_or_layers if isinstance(model_or_layers, list) else extractor_layers(model_or_layers)
    if isinstance(model_or_layers, ModelGraph) and boundary is not None:
        boundary = _resolve(model_or_layers, boundary)[-1]
    if boundary is None:
        cut = 0
    elif boundary in layers:
        cut = layers.index(boundary) + 1
    else:
        raise NotFound(f"split layer {boundary!r} not in feature extractor")
    return SplitPlan(boundary, layers[:cut], layers[cut:], threshold, candidate)


def select_split(profile: CcaProfile, rho_t: float, size_table: Mapping[str, int] | Sequence[int] | None = None) -> SplitPlan:
    """Split after the qualifying candidate (rho1 >= rho_t) with the smallest component.

    Component size shrinks with depth, so without a size table this is the
    deepest qualifying candidate; ties go to the deeper one. With no qualifying
    candidate the whole extractor becomes special.
    """
    if not profile.candidates:
        raise InvalidInput("empty profile")
    if not 0 < rho_t < 1:
        raise InvalidInput(f"rho_t must be in (0, 1), got {rho_t}")
    if size_table is None:
        sizes = [-i for i in range(len(profile.candidates))]
    elif isinstance(size_table, Mapping):
        sizes = [size_table[c] for c in profile.candidates]
    else:
        sizes = list(size_table)
    best = None
    for i, r in enumerate(profile.rho1):
        if r >= rho_t and (best is None or sizes[i] <= sizes[best]):
            best = i
    layers = profile.extractor_layers or list(profile.boundaries)
    if best is None:
        return plan_after(layers, None, rho_t)
    return plan_after(layers, profile.boundaries[best], rho_t, profile.candidates[best])
