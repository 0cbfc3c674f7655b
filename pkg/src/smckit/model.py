"""Sequential layer graphs with exact gradients, activation capture and parameter flattening."""

from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Any, Callable, Iterable, Sequence

import numpy as np

from smckit.errors import DimensionMismatch, InvalidInput, NotFound, NumericalError
from smckit.layers import ConcatChannels, Layer, layer_from_spec
from smckit.linalg import RngStream


@dataclass(frozen=True)
class ActivationRecord:
    """Layer outputs as a (neurons, samples) matrix.

    Dense outputs give one column per input sample. Convolutional outputs treat
    every spatial position of every sample as a sample, so the rows are the
    channels.
    """

    layer_name: str
    values: np.ndarray

    @classmethod
    def from_output(cls, name: str, out: np.ndarray) -> ActivationRecord:
        if out.ndim == 4:
            n, c, h, w = out.shape
            vals = out.transpose(1, 0, 2, 3).reshape(c, n * h * w)
        else:
            vals = out.reshape(out.shape[0], -1).T
        return cls(name, np.ascontiguousarray(vals))


@dataclass(frozen=True)
class LayoutEntry:
    name: str
    role: str
    shape: tuple[int, ...]
    offset: int

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))


class ModelGraph:
    """An ordered list of layers plus their parameters and a trainable mask.

    ``blocks`` optionally groups consecutive feature-extractor layers into named
    units that serve as split-point candidates.
    """

    def __init__(
        self,
        layers: Sequence[Layer],
        input_shape: Sequence[int],
        params: dict[str, dict[str, np.ndarray]],
        trainable: dict[str, bool] | None = None,
        blocks: Sequence[tuple[str, Sequence[str]]] | None = None,
    ):
        self.layers = list(layers)
        names = [layer.name for layer in self.layers]
        if len(set(names)) != len(names):
            raise InvalidInput(f"duplicate layer names in {names}")
        if any(isinstance(layer, ConcatChannels) for layer in self.layers):
            raise InvalidInput("concat_channels joins two graphs and cannot sit inside a sequential graph")
        self.input_shape = tuple(int(s) for s in input_shape)
        self._index = {name: i for i, name in enumerate(names)}
        shapes = [self.input_shape]
        for layer in self.layers:
            shapes.append(tuple(layer.out_shape(shapes[-1])))
        self.shapes = shapes
        self.params: dict[str, dict[str, np.ndarray]] = {}
        for layer in self.layers:
            if not layer.has_params:
                continue
            if layer.name not in params:
                raise InvalidInput(f"missing parameters for layer {layer.name}")
            p = {role: np.asarray(params[layer.name][role], dtype=np.float64) for role in layer.param_shapes()}
            for role, shape in layer.param_shapes().items():
                if p[role].shape != shape:
                    raise DimensionMismatch(f"{layer.name}.{role}: expected {shape}, got {p[role].shape}")
            self.params[layer.name] = p
        self.trainable = {name: True for name in self.params}
        if trainable:
            for name, flag in trainable.items():
                if name in self.trainable:
                    self.trainable[name] = bool(flag)
        self.blocks = [(b, list(ls)) for b, ls in (blocks or [])]
        for _, ls in self.blocks:
            for name in ls:
                self.index(name)

    @classmethod
    def build(cls, layers, input_shape, rng: RngStream, blocks=None) -> ModelGraph:
        params = {layer.name: layer.init_params(rng) for layer in layers if layer.has_params}
        return cls(layers, input_shape, params, blocks=blocks)

    # structure ---------------------------------------------------------
    @property
    def names(self) -> list[str]:
        return [layer.name for layer in self.layers]

    @property
    def output_shape(self) -> tuple[int, ...]:
        return self.shapes[-1]

    def index(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise NotFound(f"no layer named {name!r}") from None

    def layer(self, name: str) -> Layer:
        return self.layers[self.index(name)]

    def output_shape_of(self, name: str) -> tuple[int, ...]:
        return self.shapes[self.index(name) + 1]

    def param_count(self, names: Iterable[str] | None = None) -> int:
        names = self.params if names is None else names
        return sum(t.size for n in names if n in self.params for t in self.params[n].values())

    def trainable_names(self) -> list[str]:
        return [n for n in self.names if self.trainable.get(n)]

    def freeze(self, names: Iterable[str] | None = None) -> None:
        for n in self.params if names is None else names:
            if n in self.params:
                self.trainable[n] = False

    def clone(self) -> ModelGraph:
        return copy.deepcopy(self)

    def slice(self, start: int, stop: int) -> ModelGraph:
        """Layers ``[start, stop)`` as a new graph with copied parameters."""
        layers = self.layers[start:stop]
        sub = {l.name: {r: t.copy() for r, t in self.params[l.name].items()} for l in layers if l.has_params}
        keep = {l.name for l in layers}
        blocks = [(b, ls) for b, ls in self.blocks if set(ls) <= keep]
        trainable = {n: self.trainable[n] for n in sub}
        return ModelGraph(layers, self.shapes[start], sub, trainable, blocks)

    def spec(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "layers": [layer.spec() for layer in self.layers],
            "trainable": {n: self.trainable[n] for n in sorted(self.trainable)},
            "blocks": [[b, list(ls)] for b, ls in self.blocks],
        }

    @classmethod
    def from_spec(cls, spec: dict, params: dict[str, dict[str, np.ndarray]]) -> ModelGraph:
        layers = [layer_from_spec(s) for s in spec["layers"]]
        blocks = [(b, ls) for b, ls in spec.get("blocks", [])]
        return cls(layers, spec["input_shape"], params, spec.get("trainable"), blocks)

    # passes ------------------------------------------------------------
    def _check_input(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[1:] != self.input_shape:
            raise DimensionMismatch(f"batch shape {x.shape[1:]} does not match input {self.input_shape}")
        return x

    def forward(self, x, capture: Iterable[str] = ()) -> tuple[np.ndarray, dict[str, ActivationRecord]]:
        capture = list(capture)
        for name in capture:
            self.index(name)
        want = set(capture)
        h = self._check_input(x)
        records = {}
        for layer in self.layers:
            h, _ = layer.forward(h, self.params.get(layer.name))
            if layer.name in want:
                records[layer.name] = ActivationRecord.from_output(layer.name, h)
        return h, {name: records[name] for name in capture}

    def __call__(self, x) -> np.ndarray:
        return self.forward(x)[0]

    def run(self, x) -> tuple[np.ndarray, list]:
        """Forward pass that keeps every layer's cache for the backward passes."""
        h = self._check_input(x)
        caches = []
        for layer in self.layers:
            h, cache = layer.forward(h, self.params.get(layer.name))
            caches.append(cache)
        return h, caches

    def _first_needed(self, input_grad: bool) -> int:
        if input_grad:
            return 0
        for i, layer in enumerate(self.layers):
            if self.trainable.get(layer.name):
                return i
        return len(self.layers)

    def backward(self, caches, dout, input_grad: bool = False, keep: bool = False):
        """Propagate ``dout`` back through the graph.

        Returns ``(dx, grads)`` where ``grads`` covers trainable layers only and
        ``dx`` is ``None`` unless ``input_grad``. With ``keep`` the per-layer
        output gradients are returned as a third element for :meth:`rbackward`.
        """
        stop = self._first_needed(input_grad)
        grads = {}
        dys = [None] * len(self.layers)
        d = dout
        for i in range(len(self.layers) - 1, stop - 1, -1):
            layer = self.layers[i]
            dys[i] = d
            d, g = layer.backward(d, self.params.get(layer.name), caches[i])
            if self.trainable.get(layer.name):
                grads[layer.name] = g
        dx = d if input_grad else None
        return (dx, grads, dys) if keep else (dx, grads)

    def rforward(self, caches, rx, v: dict[str, dict[str, np.ndarray]]):
        """Directional derivative of the output; returns ``(ry, per-layer input R values)``."""
        rxs = []
        r = rx
        for i, layer in enumerate(self.layers):
            rxs.append(r)
            r = layer.rforward(r, self.params.get(layer.name), v.get(layer.name), caches[i])
        return r, rxs

    def rbackward(self, caches, dys, rxs, rdout, v, input_grad: bool = False):
        """Directional derivative of :meth:`backward` for the trainable gradients."""
        stop = self._first_needed(input_grad)
        rgrads = {}
        rd = rdout
        for i in range(len(self.layers) - 1, stop - 1, -1):
            layer = self.layers[i]
            rd, rg = layer.rbackward(dys[i], rd, self.params.get(layer.name), v.get(layer.name), caches[i], rxs[i])
            if self.trainable.get(layer.name):
                rgrads[layer.name] = rg
        return (rd if input_grad else None), rgrads

    def loss_and_grads(self, x, target, loss):
        """Batch loss and its gradients for every trainable layer."""
        out, caches = self.run(x)
        value = loss.value(out, target)
        if not np.isfinite(value):
            raise NumericalError(f"non-finite loss {value}")
        _, grads = self.backward(caches, loss.grad(out, target))
        return value, grads

    def task_pass(self, x, target, loss) -> TaskPass:
        out, caches = self.run(x)
        value = loss.value(out, target)
        if not np.isfinite(value):
            raise NumericalError(f"non-finite loss {value}")
        _, grads, dys = self.backward(caches, loss.grad(out, target), keep=True)

        def hvp(v):
            ry, rxs = self.rforward(caches, None, v)
            _, rgrads = self.rbackward(caches, dys, rxs, loss.rgrad(out, target, ry), v)
            return rgrads

        return TaskPass(value, grads, hvp)

    def vjp(self, x, dout) -> dict[str, dict[str, np.ndarray]]:
        """Trainable-parameter gradients of ``sum(outputs * dout)``."""
        _, caches = self.run(x)
        return self.backward(caches, dout)[1]

    def trainable_params(self) -> dict[str, dict[str, np.ndarray]]:
        return {n: self.params[n] for n in self.trainable_names()}

    def set_trainable_params(self, params: dict[str, dict[str, np.ndarray]]) -> None:
        for n, p in params.items():
            if not self.trainable.get(n):
                raise InvalidInput(f"layer {n!r} is not trainable")
            self.params[n] = p

    # flattening --------------------------------------------------------
    def flatten_params(self, names: Iterable[str] | None = None) -> tuple[np.ndarray, list[LayoutEntry]]:
        names = [n for n in self.names if n in self.params] if names is None else list(names)
        if not names:
            raise InvalidInput("layer subset must be non-empty")
        layout, chunks, offset = [], [], 0
        for name in names:
            self.index(name)
            for role in sorted(self.params.get(name, {})):
                t = self.params[name][role]
                layout.append(LayoutEntry(name, role, t.shape, offset))
                chunks.append(t.ravel())
                offset += t.size
        vec = np.concatenate(chunks) if chunks else np.zeros(0)
        return vec, layout

    def load_flat(self, vec: np.ndarray, layout: Sequence[LayoutEntry]) -> None:
        for name, tensors in unflatten(vec, layout).items():
            for role, t in tensors.items():
                if self.params[name][role].shape != t.shape:
                    raise DimensionMismatch(f"{name}.{role}: shape {t.shape} does not fit")
                self.params[name][role] = t


@dataclass
class TaskPass:
    """Task loss and trainable gradients for one batch; ``hvp(v)`` gives the
    Hessian of the loss applied to a direction over the trainable tensors."""

    value: float
    grads: dict[str, dict[str, np.ndarray]]
    hvp: Callable[[dict], dict]
    features: Any = None


def unflatten(vec: np.ndarray, layout: Sequence[LayoutEntry]) -> dict[str, dict[str, np.ndarray]]:
    vec = np.asarray(vec)
    total = sum(e.size for e in layout)
    if vec.shape != (total,):
        raise DimensionMismatch(f"vector length {vec.shape} does not match layout total {total}")
    out: dict[str, dict[str, np.ndarray]] = {}
    for e in layout:
        out.setdefault(e.name, {})[e.role] = vec[e.offset : e.offset + e.size].reshape(e.shape).copy()
    return out


def global_norm(grads: dict[str, dict[str, np.ndarray]]) -> float:
    return float(np.sqrt(sum(float((g * g).sum()) for d in grads.values() for g in d.values())))


def sgd_step(params: dict[str, dict[str, np.ndarray]], grads, lr: float, clip: float | None = 5.0) -> None:
    """In-place SGD update of ``params`` for the layers present in ``grads``."""
    scale = 1.0
    if clip is not None:
        norm = global_norm(grads)
        if norm > clip:
            scale = clip / norm
    for name, g in grads.items():
        for role, t in g.items():
            params[name][role] = params[name][role] - (lr * scale) * t


def minibatches(n: int, batch: int, rng: RngStream, epoch: int) -> list[np.ndarray]:
    """Shuffled index batches; the order is a pure function of ``(rng, epoch)``."""
    order = rng.child("epoch", epoch).permutation(n)
    return [order[i : i + batch] for i in range(0, n, batch)]
