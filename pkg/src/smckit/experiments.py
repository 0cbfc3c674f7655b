"""Experiment drivers: every experiment is a pure function of its spec and
returns a CSV table with its hyperparameters as ``#`` comment lines."""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Any, Callable, Sequence

import numpy as np

from smckit import __version__, package_io
from smckit.channel import ChannelConfig, disturbance, transmit_tensors
from smckit.datagen import ShapeDataset, generate, split_rehearsal
from smckit.distribution import (
    LINK_BYTES_PER_S,
    Registry,
    UpdateRequest,
    UpdateServer,
    edge_integrate,
    request_over_socket,
)
from smckit.errors import InvalidInput
from smckit.expandable import (
    TASK_LR,
    ExpandedModel,
    SmcKind,
    TrainConfig,
    build_expanded,
    classifier_accuracy,
    extract_smc,
    final_semdist,
    train_model,
    train_smc,
)
from smckit.linalg import RngStream
from smckit.metrics import center_to_corners
from smckit.model import ModelGraph
from smckit.svcca import DEFAULT_RHO_T, PROBE_SIZE, layer_profile, plan_after
from smckit.zoo import ALL_BLOCKS, FEATURE_WIDTH, SPLIT_CANDIDATES, head_layers, toy_classifier

# the knee of the split sweep on the toy suite: under half the full-model bytes
# at about the accuracy of the shallowest split
DEFAULT_SPLIT = "block2"

DEFAULTS: dict[str, Any] = {
    "old_classes": "0,1,2,3,4",
    "new_classes": "5,6,7,8,9",
    "n_train": 100,
    "n_test": 100,
    "base_epochs": 20,
    "base_lr": 0.1,
    "epochs": 20,
    "lr": "auto",
    "batch": 32,
    "lam": 0.01,
    "lam_list": "0,0.01",
    "beta": 0.0,
    "beta_list": "0,0.2",
    "memory": 100,
    "split": DEFAULT_SPLIT,
    "splits": ",".join(SPLIT_CANDIDATES),
    "rho_t": DEFAULT_RHO_T,
    "probe": PROBE_SIZE,
    "ref_classes": "2,3,4,5,6",
    "tasks": "segmentation,detection",
    "domain": "B",
    "snr_list": "-2,-1,0,2,5,10,inf",
    "snr": "inf",
    "train_seed": 0,
    "trials": 5,
    "finetune_epochs": 0,
}
NAMES = ("incremental", "split_sweep", "cross_task", "cross_domain", "snr_sweep", "distribution_demo")
TEST_OFFSET = 10_000  # sample indices of test splits start here
PROBE_SEED = 7919


@dataclass
class ExperimentSpec:
    name: str
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    overrides: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.name not in NAMES:
            raise InvalidInput(f"unknown experiment {self.name!r}; choose from {', '.join(NAMES)}")
        if not self.seeds:
            raise InvalidInput("at least one seed is required")
        self.seeds = [int(s) for s in self.seeds]
        unknown = set(self.overrides) - set(DEFAULTS)
        if unknown:
            raise InvalidInput(f"unknown hyperparameter(s): {', '.join(sorted(unknown))}")

    @property
    def hp(self) -> Hyper:
        return Hyper({**DEFAULTS, **self.overrides})


class Hyper(dict):
    """Hyperparameter map with typed accessors for string-valued overrides."""

    def int(self, key: str) -> int:
        return int(self[key])

    def float(self, key: str) -> float:
        return _num(self[key])

    def ints(self, key: str) -> list[int]:
        return [int(v) for v in _items(self[key])]

    def floats(self, key: str) -> list[float]:
        return [_num(v) for v in _items(self[key])]

    def strs(self, key: str) -> list[str]:
        return [str(v) for v in _items(self[key])]

    def lr(self, task: str) -> float:
        return TASK_LR[task] if str(self["lr"]) == "auto" else _num(self["lr"])


def _items(v) -> list:
    if isinstance(v, (list, tuple)):
        return list(v)
    return [s.strip() for s in str(v).split(",") if s.strip()]


def _num(v) -> float:
    try:
        return float(v)
    except (TypeError, ValueError):
        raise InvalidInput(f"not a number: {v!r}") from None


# CSV ------------------------------------------------------------------------


def fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return f"{v:.6f}"
    return str(v)


def to_csv(header: Sequence[str], rows: Sequence[Sequence], provenance: dict[str, Any] | None = None) -> str:
    out = io.StringIO()
    for k in sorted(provenance or {}):
        out.write(f"# {k}={fmt(provenance[k]) if not isinstance(provenance[k], str) else provenance[k]}\n")
    out.write(",".join(header) + "\n")
    for r in rows:
        out.write(",".join(fmt(v) for v in r) + "\n")
    return out.getvalue()


def provenance(name: str, seeds: Sequence[int], hp: dict[str, Any]) -> dict[str, Any]:
    p = {f"hp.{k}": str(v) for k, v in hp.items()}
    p.update({"experiment": name, "seeds": ",".join(map(str, seeds)), "version": __version__})
    return p


# shared pipeline pieces --------------------------------------------------------


@lru_cache(maxsize=64)
def _base_cached(classes: tuple[int, ...], n: int, epochs: int, lr: float, batch: int, seed: int) -> ModelGraph:
    model = toy_classifier(len(classes), seed)
    train_model(model, generate(list(classes), n, "A", seed=seed), list(classes), epochs=epochs, lr=lr, batch=batch, seed=seed)
    return model


def trained_classifier(classes: Sequence[int], hp: Hyper, seed: int) -> ModelGraph:
    """A toy classifier trained on domain A; memoised, always returned as a fresh copy."""
    key = (tuple(classes), hp.int("n_train"), hp.int("base_epochs"), hp.float("base_lr"), hp.int("batch"), seed)
    return _base_cached(*key).clone()


def base_model(hp: Hyper, seed: int) -> ModelGraph:
    return trained_classifier(hp.ints("old_classes"), hp, seed)


def train_cfg(hp: Hyper, seed: int, task: str = "classification", **kw) -> TrainConfig:
    args = dict(lam=hp.float("lam"), lr=hp.lr(task), epochs=hp.int("epochs"), batch=hp.int("batch"), seed=seed, beta=hp.float("beta"))
    args.update(kw)
    return TrainConfig(**args)


def incremental_setup(hp: Hyper, seed: int):
    old, new = hp.ints("old_classes"), hp.ints("new_classes")
    base = base_model(hp, seed)
    memory = split_rehearsal(generate(old, hp.int("n_train"), "A", seed=seed), hp.int("memory"), seed)
    new_data = generate(new, hp.int("n_train"), "A", seed=seed)
    test = generate(old + new, hp.int("n_test"), "A", seed=seed, start=TEST_OFFSET)
    return base, SmcKind("incremental", old, new), new_data, memory, test


def train_incremental(hp: Hyper, seed: int, split: str | None = None, **cfg) -> tuple[ExpandedModel, ShapeDataset, ShapeDataset, list]:
    base, kind, new_data, memory, test = incremental_setup(hp, seed)
    em = build_expanded(base, plan_after(base, split or hp["split"]), kind, seed=seed)
    _, trace = train_smc(em, new_data, memory, train_cfg(hp, seed, **cfg))
    return em, new_data.concat(memory.samples), test, trace


def component_bytes(base: ModelGraph, kind: SmcKind, split: str, seed: int = 0) -> tuple[int, int]:
    """Encoded sizes of the component and of the full expanded model (training does not change them)."""
    em = build_expanded(base, plan_after(base, split), kind, seed=seed)
    return len(package_io.encode(extract_smc(em))), len(package_io.encode(em))


def probe_images(n: int) -> np.ndarray:
    return generate(list(range(10)), math.ceil(n / 10), "A", seed=PROBE_SEED).images[:n]


def cca_profile(hp: Hyper, seed: int, candidates: Sequence[str]):
    """SVCCA profile between the base model and a reference model trained on overlapping classes."""
    a = base_model(hp, seed)
    b = trained_classifier(hp.ints("ref_classes"), hp, seed + 1000)
    return layer_profile(a, b, probe_images(hp.int("probe")), list(candidates))


def transmitted_accuracy(em: ExpandedModel, test: ShapeDataset, snr_db: float, seed: int, stream: str = "edge") -> float:
    """Accuracy after the component's tensor values cross the channel."""
    original = {n: {r: t.copy() for r, t in p.items()} for n, p in em.trainable_params().items()}
    cfg = ChannelConfig(snr_db, seed=seed)
    try:
        if not cfg.noiseless:
            em.set_trainable_params(transmit_tensors(original, cfg, stream))
        return next(iter(em.evaluate(test).values()))
    finally:
        em.set_trainable_params(original)


def baseline_head_metrics(base: ModelGraph, task: str, test: ShapeDataset, seed: int) -> dict[str, float]:
    """A freshly initialised task head on the frozen base features, without any component."""
    from smckit.expandable import evaluate_predictions

    features = base.slice(0, len(base.layers) - 1)
    head = ModelGraph.build(head_layers(task, FEATURE_WIDTH), (FEATURE_WIDTH,), RngStream(seed).child("baseline_head"))
    out = head(features(test.images))
    pred = (out > 0).reshape(test.masks.shape) if task == "segmentation" else center_to_corners(out * test.images.shape[-1])
    return evaluate_predictions(task, pred, test)


# experiments ----------------------------------------------------------------


def run_incremental(spec: ExperimentSpec) -> str:
    hp = spec.hp
    rows = []
    for seed in spec.seeds:
        for lam in hp.floats("lam_list"):
            em, train_set, test, _ = train_incremental(hp, seed, lam=lam)
            smc, full = component_bytes(em.base, em.kind, hp["split"], seed)
            acc = em.evaluate(test)["accuracy"]
            old = np.isin(test.labels, em.kind.old_classes)
            rows.append(
                (
                    seed,
                    hp["split"],
                    lam,
                    acc,
                    em.evaluate(test.subset(np.flatnonzero(old)))["accuracy"],
                    em.evaluate(test.subset(np.flatnonzero(~old)))["accuracy"],
                    final_semdist(em, train_set),
                    smc,
                    full,
                )
            )
    header = ("seed", "split", "lambda", "accuracy", "old_accuracy", "new_accuracy", "semdist", "smc_bytes", "full_bytes")
    return to_csv(header, rows, provenance(spec.name, spec.seeds, hp))


def run_split_sweep(spec: ExperimentSpec) -> str:
    hp = spec.hp
    splits = hp.strs("splits")
    rows = []
    for seed in spec.seeds:
        base, kind, _, _, test = incremental_setup(hp, seed)
        old_test = test.subset(np.flatnonzero(np.isin(test.labels, kind.old_classes)))
        rows.append(("base", -1, seed, None, len(package_io.encode(base)), classifier_accuracy(base, old_test, kind.old_classes)))
        profile = cca_profile(hp, seed, splits)
        for depth, (split, rho) in enumerate(zip(splits, profile.rho1)):
            em, _, test, _ = train_incremental(hp, seed, split=split)
            smc, _ = component_bytes(base, kind, split, seed)
            rows.append((split, depth, seed, rho, smc, em.evaluate(test)["accuracy"]))
    rows.sort(key=lambda r: (r[1], r[2]))
    out = [(r[0], r[2], r[3], r[4], r[5]) for r in rows]
    return to_csv(("split", "seed", "rho1", "component_bytes", "accuracy"), out, provenance(spec.name, spec.seeds, hp))


def run_cross_task(spec: ExperimentSpec) -> str:
    hp = spec.hp
    old = hp.ints("old_classes")
    rows = []
    for seed in spec.seeds:
        base = base_model(hp, seed)
        train = generate(old, hp.int("n_train"), "A", seed=seed)
        test = generate(old, hp.int("n_test"), "A", seed=seed, start=TEST_OFFSET)
        for task in hp.strs("tasks"):
            m0 = baseline_head_metrics(base, task, test, seed)
            kind = SmcKind("cross_task", old, [], task=task)
            em = build_expanded(base, plan_after(base, hp["split"]), kind, seed=seed)
            train_smc(em, train, None, train_cfg(hp, seed, task))
            m1 = em.evaluate(test)
            for variant, m in (("baseline", m0), ("smc", m1)):
                rows.append((seed, task, variant, m["iou"], m.get("miou"), m.get("ap50"), m.get("ap75")))
    header = ("seed", "task", "variant", "iou", "miou", "ap50", "ap75")
    return to_csv(header, rows, provenance(spec.name, spec.seeds, hp))


def run_cross_domain(spec: ExperimentSpec) -> str:
    hp = spec.hp
    old, domain = hp.ints("old_classes"), str(hp["domain"])
    rows = []
    for seed in spec.seeds:
        base = base_model(hp, seed)
        train = generate(old, hp.int("n_train"), domain, seed=seed)
        test = generate(old, hp.int("n_test"), domain, seed=seed, start=TEST_OFFSET)
        kind = SmcKind("cross_domain", old, [], domain=domain)
        em = build_expanded(base, plan_after(base, hp["split"]), kind, seed=seed)
        train_smc(em, train, None, train_cfg(hp, seed))
        rows.append((seed, domain, "base", classifier_accuracy(base, test, old)))
        rows.append((seed, domain, "smc", em.evaluate(test)["accuracy"]))
    return to_csv(("seed", "domain", "variant", "accuracy"), rows, provenance(spec.name, spec.seeds, hp))


def run_snr_sweep(spec: ExperimentSpec) -> str:
    """Components trained once per beta (at ``train_seed``); ``seeds`` are channel-noise seeds."""
    hp = spec.hp
    rows = []
    for beta in hp.floats("beta_list"):
        em, _, test, _ = train_incremental(hp, hp.int("train_seed"), beta=beta)
        for snr in hp.floats("snr_list"):
            for seed in spec.seeds:
                rows.append((snr, beta, seed, transmitted_accuracy(em, test, snr, seed)))
    rows.sort(key=lambda r: (r[0], r[1], r[2]))
    return to_csv(("snr_db", "beta", "seed", "accuracy"), rows, provenance(spec.name, spec.seeds, hp))


def run_distribution_demo(spec: ExperimentSpec) -> str:
    """Full-model vs component delivery over loopback TCP.

    ``seconds`` is the transfer time on a nominal link so the table is
    reproducible; measured wall time stays in the transfer reports.
    """
    hp = spec.hp
    snr = hp.float("snr")
    rows = []
    for seed in spec.seeds:
        em, _, test, _ = train_incremental(hp, seed)
        registry = Registry()
        registry.add(extract_smc(em))
        registry.add(em)
        _, _, _, memory, _ = incremental_setup(hp, seed)
        edge_base = package_io.decode(package_io.encode(em.base))
        server = UpdateServer(registry)
        server.start_background()
        try:
            for mode in ("full_model", "smc"):
                req = UpdateRequest(package_io.model_checksum(edge_base), em.kind, f"edge-{seed}", mode)
                data, _ = request_over_socket(server.address, req)
                ft = hp.int("finetune_epochs")
                cfg = train_cfg(hp, seed, epochs=ft) if ft > 0 else None
                model, report = edge_integrate(edge_base, data, ChannelConfig(snr, seed=seed), memory, cfg)
                rows.append((mode, report.bytes_sent, report.bytes_sent / LINK_BYTES_PER_S, snr, seed, model.evaluate(test)["accuracy"]))
        finally:
            server.shutdown()
            server.server_close()
    header = ("mode", "bytes", "seconds", "snr_db", "seed", "accuracy")
    return to_csv(header, rows, provenance(spec.name, spec.seeds, {**hp, "link_bytes_per_s": LINK_BYTES_PER_S}))


RUNNERS: dict[str, Callable[[ExperimentSpec], str]] = {
    "incremental": run_incremental,
    "split_sweep": run_split_sweep,
    "cross_task": run_cross_task,
    "cross_domain": run_cross_domain,
    "snr_sweep": run_snr_sweep,
    "distribution_demo": run_distribution_demo,
}


def run(spec: ExperimentSpec) -> str:
    return RUNNERS[spec.name](spec)


# analyses used by the CLI and the acceptance suite ----------------------------


def analyze_cca_rows(hp: Hyper, seed: int, candidates: Sequence[str] = ALL_BLOCKS) -> list[tuple]:
    """``candidate, rho1, k_ori, k_tar, component_bytes``; bytes are blank where no split is possible."""
    profile = cca_profile(hp, seed, candidates)
    base, kind = base_model(hp, seed), SmcKind("incremental", hp.ints("old_classes"), hp.ints("new_classes"))
    rows = []
    for c, rho, (ka, kb) in profile.rows():
        size = component_bytes(base, kind, c, seed)[0] if c in SPLIT_CANDIDATES else None
        rows.append((c, rho, ka, kb, size))
    return rows


def channel_sweep_rows(hp: Hyper, snrs: Sequence[float], betas: Sequence[float], trials: int, seed: int, probe: int = 32):
    """``snr_db, beta, trial, accuracy, epsilon, bound`` on a trained incremental component."""
    rows = []
    for beta in betas:
        em, _, test, _ = train_incremental(hp, seed, beta=beta)
        x = test.images[RngStream(seed).child("probe").permutation(len(test))[:probe]]
        for snr in snrs:
            cfg = ChannelConfig(snr, seed=seed)
            _, bound, eps = disturbance(em, x, cfg, trials)
            for trial in range(trials):
                acc = transmitted_accuracy(em, test, snr, seed, stream=f"trial{trial}")
                rows.append((snr, beta, trial, acc, eps[trial], bound))
    return rows
