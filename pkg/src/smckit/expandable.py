"""Expandable models: a frozen base split into generalized and special extractors,
widened by a trainable copy of the special extractor and a new head.

The trainable pair (the expanded special extractor and the new head) is the
semantic model component that gets shipped to edge nodes.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field
from typing import Any

import numpy as np

from smckit import channel
from smckit.datagen import SIZE, RehearsalMemory, ShapeDataset
from smckit.errors import BaseModelMismatch, DimensionMismatch, InvalidInput, NumericalError
from smckit.layers import ConcatChannels, Dense, Layer, layer_from_spec
from smckit.linalg import RngStream
from smckit.losses import BinaryCrossEntropy, CrossEntropy, MeanSquaredError
from smckit.metrics import center_to_corners, metrics
from smckit.model import ModelGraph, TaskPass, global_norm, minibatches
from smckit.package_io import model_checksum
from smckit.svcca import SplitPlan
from smckit.zoo import head_layers

VARIANTS = ("incremental", "cross_task", "cross_domain")
TASKS = ("classification", "segmentation", "detection")
NEW_PREFIX = "new."
# per-pixel BCE averages over 144 outputs, so segmentation needs a larger step
TASK_LR = {"classification": 0.1, "segmentation": 0.5, "detection": 0.1}


@dataclass
class SmcKind:
    variant: str
    old_classes: list[int] = field(default_factory=list)
    new_classes: list[int] = field(default_factory=list)
    task: str = "classification"
    domain: str | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise InvalidInput(f"unknown component kind {self.variant!r}")
        if self.task not in TASKS:
            raise InvalidInput(f"unknown task {self.task!r}")
        self.old_classes = [int(c) for c in self.old_classes]
        self.new_classes = [int(c) for c in self.new_classes]
        if self.variant == "incremental":
            if not self.old_classes or not self.new_classes:
                raise InvalidInput("incremental kind needs old and new class sets")
            if set(self.old_classes) & set(self.new_classes):
                raise InvalidInput("old and new class sets overlap")
            if self.task != "classification":
                raise InvalidInput("incremental components are classification components")
        if self.variant == "cross_task" and self.task == "classification":
            raise InvalidInput("cross_task kind needs a segmentation or detection task")
        if self.variant == "cross_domain":
            if not self.domain:
                raise InvalidInput("cross_domain kind needs a domain tag")
            if self.task != "classification" or not self.old_classes:
                raise InvalidInput("cross_domain components re-learn the base classification task")

    @property
    def tag(self) -> str:
        """Stable identifier used to match update requests."""
        if self.variant == "incremental":
            return "incremental:" + ",".join(map(str, self.new_classes))
        if self.variant == "cross_task":
            return f"cross_task:{self.task}"
        return f"cross_domain:{self.domain}"

    @property
    def output_classes(self) -> list[int]:
        if self.variant == "incremental":
            return self.old_classes + self.new_classes
        return list(self.old_classes)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> SmcKind:
        return cls(**d)


@dataclass
class TrainConfig:
    lam: float = 0.01
    lr: float = 0.1
    epochs: int = 20
    batch: int = 32
    seed: int = 0
    beta: float = 0.0
    clip: float | None = 5.0
    semdist_cap: float = 10.0
    penalty_mode: str = "analytic"

    def __post_init__(self):
        if self.lam < 0 or self.beta < 0:
            raise InvalidInput("lambda and beta must be non-negative")
        if self.lr <= 0 or self.epochs < 0 or self.batch < 1:
            raise InvalidInput("need lr > 0, epochs >= 0, batch >= 1")
        if self.penalty_mode not in channel.PENALTY_MODES:
            raise InvalidInput(f"unknown penalty mode {self.penalty_mode!r}")


def _loss_for(kind: SmcKind):
    return {"classification": CrossEntropy, "segmentation": BinaryCrossEntropy, "detection": MeanSquaredError}[kind.task]()


def semantic_distance(f_new: np.ndarray, f_old: np.ndarray, eps: float = 1e-8) -> tuple[float, np.ndarray]:
    """L2 distance between batch means of per-sample L2-normalised features.

    Returns the distance and its gradient with respect to ``f_new``.
    """
    a = f_new.reshape(len(f_new), -1)
    b = f_old.reshape(len(f_old), -1)
    sa = np.sqrt((a * a).sum(axis=1, keepdims=True) + eps**2)
    sb = np.sqrt((b * b).sum(axis=1, keepdims=True) + eps**2)
    d = (a / sa).mean(axis=0) - (b / sb).mean(axis=0)
    dist = float(np.sqrt((d * d).sum()))
    if dist < 1e-12:
        return dist, np.zeros_like(f_new)
    dn = np.broadcast_to(d / dist / len(a), a.shape)
    grad = dn / sa - a * (a * dn).sum(axis=1, keepdims=True) / sa**3
    return dist, grad.reshape(f_new.shape)


def _renamed(layer: Layer, prefix: str) -> Layer:
    spec = layer.spec()
    spec["name"] = prefix + spec["name"]
    return layer_from_spec(spec)


class ExpandedModel:
    """Base model with its special extractor widened by a trainable copy.

    Output of the new task: ``head_new(concat(phi_s(phi_g(x)), phi_s_new(phi_g(x))))``.
    The old task stays available through :meth:`forward_base`.
    """

    def __init__(self, base: ModelGraph, split: SplitPlan, kind: SmcKind, phi_s_new: ModelGraph, head_new: ModelGraph):
        g_end = len(split.phi_g_layers)
        s_end = g_end + len(split.phi_s_layers)
        if base.names[:g_end] != list(split.phi_g_layers) or base.names[g_end:s_end] != list(split.phi_s_layers):
            raise InvalidInput("split plan does not partition the base model's feature extractor")
        if not split.phi_s_layers:
            raise InvalidInput("the special extractor is empty; choose a shallower split")
        self.base = base.clone()
        self.base.freeze()
        self.split = split
        self.kind = kind
        self.phi_g = self.base.slice(0, g_end)
        self.phi_s = self.base.slice(g_end, s_end)
        self.base_head = self.base.slice(s_end, len(base.layers))
        self.phi_s_new = phi_s_new
        self.head_new = head_new
        if phi_s_new.input_shape != self.phi_g.output_shape:
            raise DimensionMismatch(f"expanded extractor input {phi_s_new.input_shape} != split output {self.phi_g.output_shape}")
        if phi_s_new.output_shape[1:] != self.phi_s.output_shape[1:]:
            raise DimensionMismatch("expanded extractor output does not align with the special extractor")
        width = self.phi_s.output_shape[0] + phi_s_new.output_shape[0]
        if head_new.input_shape != (width, *self.phi_s.output_shape[1:]):
            raise DimensionMismatch(f"new head expects {head_new.input_shape}, concatenated features are ({width},...)")
        if set(phi_s_new.names) & set(head_new.names) or set(phi_s_new.names + head_new.names) & set(base.names):
            raise InvalidInput("component layer names collide")
        self.concat = ConcatChannels("concat")
        self.loss = _loss_for(kind)
        self.train_info: dict[str, float] = {"lambda": 0.0, "beta": 0.0}

    # parameters --------------------------------------------------------
    @property
    def component_graphs(self) -> tuple[ModelGraph, ModelGraph]:
        return self.phi_s_new, self.head_new

    def trainable_params(self) -> dict[str, dict[str, np.ndarray]]:
        return {**self.phi_s_new.trainable_params(), **self.head_new.trainable_params()}

    def set_trainable_params(self, params) -> None:
        for g in self.component_graphs:
            g.set_trainable_params({n: p for n, p in params.items() if n in g.params})

    def trainable_count(self) -> int:
        return sum(t.size for p in self.trainable_params().values() for t in p.values())

    def frozen_digest(self) -> str:
        return model_checksum(self.base) + model_checksum(self.phi_g) + model_checksum(self.phi_s)

    def clone(self) -> ExpandedModel:
        return copy.deepcopy(self)

    # forward -----------------------------------------------------------
    def _features(self, x):
        g = self.phi_g(x)
        return g, self.phi_s(g)

    def forward(self, x) -> np.ndarray:
        g, s_old = self._features(x)
        f, _ = self.concat.forward((s_old, self.phi_s_new(g)))
        return self.head_new(f)

    __call__ = forward

    def forward_base(self, x) -> np.ndarray:
        return self.base(x)

    def predict(self, x):
        out = self.forward(x)
        if self.kind.task == "classification":
            return np.asarray(self.kind.output_classes)[out.argmax(axis=1)]
        if self.kind.task == "segmentation":
            return (out > 0).reshape(len(out), SIZE, SIZE)
        return center_to_corners(out * SIZE)

    def targets(self, ds: ShapeDataset) -> np.ndarray:
        return task_targets(self.kind, ds)

    def evaluate(self, ds: ShapeDataset, batch: int = 512) -> dict[str, float]:
        preds = np.concatenate([self.predict(ds.images[i : i + batch]) for i in range(0, len(ds), batch)])
        return evaluate_predictions(self.kind.task, preds, ds)

    # gradients ---------------------------------------------------------
    def task_pass(self, x, target) -> TaskPass:
        """Task loss, trainable gradients and Hessian-vector products for one batch."""
        g, s_old = self._features(x)
        s_new, c_sn = self.phi_s_new.run(g)
        f, cut = self.concat.forward((s_old, s_new))
        out, c_h = self.head_new.run(f)
        value = self.loss.value(out, target)
        if not np.isfinite(value):
            raise NumericalError(f"non-finite task loss {value}")
        dfeat, g_h, dys_h = self.head_new.backward(c_h, self.loss.grad(out, target), input_grad=True, keep=True)
        (_, d_new), _ = self.concat.backward(dfeat, None, cut)
        _, g_sn, dys_sn = self.phi_s_new.backward(c_sn, d_new, keep=True)

        def hvp(v):
            v_sn = {n: t for n, t in v.items() if n in self.phi_s_new.params}
            v_h = {n: t for n, t in v.items() if n in self.head_new.params}
            r_new, rxs_sn = self.phi_s_new.rforward(c_sn, None, v_sn)
            r_f = None if r_new is None else np.concatenate([np.zeros_like(s_old), r_new], axis=1)
            r_out, rxs_h = self.head_new.rforward(c_h, r_f, v_h)
            r_dfeat, rg_h = self.head_new.rbackward(c_h, dys_h, rxs_h, self.loss.rgrad(out, target, r_out), v_h, input_grad=True)
            r_dnew = None if r_dfeat is None else r_dfeat[:, cut:]
            _, rg_sn = self.phi_s_new.rbackward(c_sn, dys_sn, rxs_sn, r_dnew, v_sn)
            return {**rg_sn, **rg_h}

        return TaskPass(value, {**g_sn, **g_h}, hvp, features=(s_old, s_new, c_sn))

    def vjp(self, x, dout) -> dict[str, dict[str, np.ndarray]]:
        """Component gradients of ``sum(outputs * dout)``."""
        g, s_old = self._features(x)
        s_new, c_sn = self.phi_s_new.run(g)
        f, cut = self.concat.forward((s_old, s_new))
        _, c_h = self.head_new.run(f)
        dfeat, g_h = self.head_new.backward(c_h, dout, input_grad=True)
        _, g_sn = self.phi_s_new.backward(c_sn, dfeat[:, cut:])
        return {**g_sn, **g_h}


def task_targets(kind: SmcKind, ds: ShapeDataset) -> np.ndarray:
    if kind.task == "classification":
        lookup = {c: i for i, c in enumerate(kind.output_classes)}
        try:
            return np.array([lookup[int(c)] for c in ds.labels], dtype=np.int64)
        except KeyError as e:
            raise InvalidInput(f"label {e.args[0]} is not an output class of this component") from None
    if kind.task == "segmentation":
        return ds.masks.reshape(len(ds), -1).astype(np.float64)
    return ds.boxes / SIZE


def evaluate_predictions(task: str, preds, ds: ShapeDataset) -> dict[str, float]:
    if task == "classification":
        return metrics(preds, ds.labels, "classification")
    if task == "segmentation":
        return metrics(preds, ds.masks, "segmentation")
    return metrics(preds, center_to_corners(ds.boxes), "detection")


def _widened_head(base_head: ModelGraph, width: int, n_out: int, rng: RngStream, name: str = "head_new") -> ModelGraph:
    """New linear head over doubled features whose first rows reproduce the old head.

    Old rows see each feature twice (old copy and expanded copy), so their
    weights are duplicated and halved; the remaining rows are freshly drawn.
    """
    if len(base_head.layers) != 1 or base_head.layers[0].kind != "dense":
        raise DimensionMismatch("widening needs a single dense base head")
    old = base_head.params[base_head.layers[0].name]
    n_old, feat = old["W"].shape
    if 2 * feat != width or n_out < n_old:
        raise DimensionMismatch(f"cannot widen a {feat}->{n_old} head to {width}->{n_out}")
    layer = Dense(name, width, n_out)
    fresh = layer.init_params(rng)
    w, b = fresh["W"].copy(), fresh["b"].copy()
    w[:n_old, :feat] = old["W"] / 2.0
    w[:n_old, feat:] = old["W"] / 2.0
    b[:n_old] = old["b"]
    return ModelGraph([layer], (width,), {name: {"W": w, "b": b}})


def build_expanded(
    base: ModelGraph,
    split: SplitPlan,
    kind: SmcKind,
    seed: int = 0,
    head: list[Layer] | None = None,
) -> ExpandedModel:
    """Widen ``base`` after the split point for a new component of ``kind``.

    The expanded special extractor starts as a copy of the special extractor.
    Incremental and cross-domain heads start from the old head (see
    :func:`_widened_head`); cross-task heads are fresh unless ``head`` is given.
    """
    g_end = len(split.phi_g_layers)
    s_end = g_end + len(split.phi_s_layers)
    if not split.phi_s_layers:
        raise InvalidInput("the special extractor is empty; choose a shallower split")
    phi_s = base.slice(g_end, s_end)
    layers = [_renamed(l, NEW_PREFIX) for l in phi_s.layers]
    params = {NEW_PREFIX + n: {r: t.copy() for r, t in p.items()} for n, p in phi_s.params.items()}
    phi_s_new = ModelGraph(layers, phi_s.input_shape, params)
    width = 2 * phi_s.output_shape[0]
    rng = RngStream(seed).child("head_new")
    if head is not None:
        head_new = ModelGraph.build(head, (width, *phi_s.output_shape[1:]), rng)
    elif kind.variant == "cross_task":
        head_new = ModelGraph.build(head_layers(kind.task, width), (width,), rng)
    else:
        base_head = base.slice(s_end, len(base.layers))
        if base_head.output_shape[0] != len(kind.old_classes):
            raise DimensionMismatch(f"base head has {base_head.output_shape[0]} outputs for {len(kind.old_classes)} old classes")
        head_new = _widened_head(base_head, width, len(kind.output_classes), rng)
    return ExpandedModel(base, split, kind, phi_s_new, head_new)


@dataclass
class TraceRow:
    epoch: int
    loss: float
    ce: float
    semdist: float | None
    acc: float | None
    penalty: float | None = None


def _training_set(em: ExpandedModel, new_data: ShapeDataset, memory: RehearsalMemory | None) -> ShapeDataset:
    if len(new_data) == 0:
        raise InvalidInput("new_data is empty")
    data = new_data
    if memory is not None and len(memory) and em.kind.task == "classification":
        data = data.concat(memory.samples)
    if em.kind.variant == "incremental" and not set(em.kind.old_classes) & set(data.classes):
        raise InvalidInput("incremental training needs old-class samples from a rehearsal memory")
    return data


def train_smc(
    em: ExpandedModel,
    new_data: ShapeDataset,
    memory: RehearsalMemory | None,
    cfg: TrainConfig,
    eval_data: ShapeDataset | None = None,
) -> tuple[ExpandedModel, list[TraceRow]]:
    """Train the component in place.

    Per step the objective is ``task_loss - lam * min(semdist, cap) + beta * penalty``
    where ``semdist`` pushes expanded features away from the frozen ones and
    ``penalty`` is the task-gradient norm (see :mod:`smckit.channel`).
    """
    data = _training_set(em, new_data, memory)
    targets = em.targets(data)
    rng = RngStream(cfg.seed).child("train_smc")
    trace: list[TraceRow] = []
    step = 0
    for epoch in range(cfg.epochs):
        sums = np.zeros(4)
        count = 0
        for idx in minibatches(len(data), cfg.batch, rng, epoch):
            x, t = data.images[idx], targets[idx]
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    if cfg.beta > 0:
                        penalty, pgrads, tp = channel.grad_norm_penalty(em, x, t, mode=cfg.penalty_mode)
                    else:
                        penalty, pgrads, tp = 0.0, None, em.task_pass(x, t)
            except NumericalError as e:
                raise NumericalError(str(e), step=step) from None
            grads = {n: dict(g) for n, g in tp.grads.items()}
            dist = 0.0
            if cfg.lam > 0:
                s_old, s_new, c_sn = tp.features
                dist, d_new = semantic_distance(s_new, s_old)
                if dist < cfg.semdist_cap:
                    _, g_sem = em.phi_s_new.backward(c_sn, d_new)
                    for n, g in g_sem.items():
                        for r in g:
                            grads[n][r] = grads[n][r] - cfg.lam * g[r]
            if pgrads is not None:
                for n, g in pgrads.items():
                    for r in g:
                        grads[n][r] = grads[n][r] + cfg.beta * g[r]
            total = tp.value - cfg.lam * min(dist, cfg.semdist_cap) + cfg.beta * penalty
            norm = global_norm(grads)
            if not (np.isfinite(total) and np.isfinite(norm)):
                raise NumericalError("training diverged", step=step)
            scale = cfg.lr * (min(1.0, cfg.clip / norm) if cfg.clip is not None and norm > 0 else 1.0)
            for graph in em.component_graphs:
                for n in graph.trainable_names():
                    for r in graph.params[n]:
                        graph.params[n][r] = graph.params[n][r] - scale * grads[n][r]
            sums += np.array([total, tp.value, dist, penalty]) * len(idx)
            count += len(idx)
            step += 1
        mean = sums / max(count, 1)
        acc = None
        if eval_data is not None:
            with np.errstate(over="ignore", invalid="ignore"):
                acc = next(iter(em.evaluate(eval_data).values()))
        trace.append(
            TraceRow(
                epoch,
                float(mean[0]),
                float(mean[1]),
                float(mean[2]) if cfg.lam > 0 else None,
                acc,
                float(mean[3]) if cfg.beta > 0 else None,
            )
        )
    em.train_info = {"lambda": float(cfg.lam), "beta": float(cfg.beta)}
    return em, trace


def final_semdist(em: ExpandedModel, data: ShapeDataset) -> float:
    g, s_old = em._features(data.images)
    return semantic_distance(em.phi_s_new(g), s_old)[0]


# the component as a transferable payload ----------------------------------


@dataclass
class SmcPayload:
    """The component's tensors plus everything needed to re-attach them to a base."""

    metadata: dict[str, Any]
    tensors: dict[str, dict[str, np.ndarray]]

    def tensor_names(self) -> set[str]:
        return set(self.tensors)

    def param_count(self) -> int:
        return sum(t.size for p in self.tensors.values() for t in p.values())


def extract_smc(em: ExpandedModel) -> SmcPayload:
    meta = {
        "kind": em.kind.to_dict(),
        "split": em.split.to_dict(),
        "lambda": float(em.train_info.get("lambda", 0.0)),
        "beta": float(em.train_info.get("beta", 0.0)),
        "base_checksum": model_checksum(em.base),
        "phi_s_new": em.phi_s_new.spec(),
        "head_new": em.head_new.spec(),
    }
    tensors = {}
    for g in em.component_graphs:
        for n, p in g.params.items():
            tensors[n] = {r: t.copy() for r, t in p.items()}
    return SmcPayload(meta, tensors)


def apply_smc(base: ModelGraph, payload: SmcPayload, force: bool = False) -> ExpandedModel:
    """Attach a component to ``base``; the base must be the one it was trained on."""
    meta = payload.metadata
    if not force and model_checksum(base) != meta["base_checksum"]:
        raise BaseModelMismatch("component was trained for a different base model")
    missing = {l["name"] for l in meta["phi_s_new"]["layers"] + meta["head_new"]["layers"] if l["kind"] in ("dense", "conv2d")}
    missing -= set(payload.tensors)
    if missing:
        raise DimensionMismatch(f"component lacks tensors for {sorted(missing)}")
    phi_s_new = ModelGraph.from_spec(meta["phi_s_new"], payload.tensors)
    head_new = ModelGraph.from_spec(meta["head_new"], payload.tensors)
    em = ExpandedModel(base, SplitPlan.from_dict(meta["split"]), SmcKind.from_dict(meta["kind"]), phi_s_new, head_new)
    em.train_info = {"lambda": meta.get("lambda", 0.0), "beta": meta.get("beta", 0.0)}
    return em


# plain training of base / reference models --------------------------------


def train_model(
    model: ModelGraph,
    ds: ShapeDataset,
    classes: list[int],
    epochs: int = 20,
    lr: float = 0.05,
    batch: int = 32,
    seed: int = 0,
    clip: float | None = 5.0,
) -> list[float]:
    """Cross-entropy SGD on ``model``'s trainable layers; returns per-epoch mean loss."""
    lookup = {c: i for i, c in enumerate(classes)}
    y = np.array([lookup[int(c)] for c in ds.labels], dtype=np.int64)
    loss = CrossEntropy()
    rng = RngStream(seed).child("train_model")
    history = []
    for epoch in range(epochs):
        total = 0.0
        for idx in minibatches(len(ds), batch, rng, epoch):
            value, grads = model.loss_and_grads(ds.images[idx], y[idx], loss)
            norm = global_norm(grads)
            scale = lr * (min(1.0, clip / norm) if clip is not None and norm > 0 else 1.0)
            for n, g in grads.items():
                for r in g:
                    model.params[n][r] = model.params[n][r] - scale * g[r]
            total += value * len(idx)
        history.append(total / len(ds))
    return history


def classifier_accuracy(model: ModelGraph, ds: ShapeDataset, classes: list[int]) -> float:
    pred = np.asarray(classes)[model(ds.images).argmax(axis=1)]
    return float((pred == ds.labels).mean())
