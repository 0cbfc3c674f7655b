import numpy as np
import pytest

from oracles import central_diff, rel_err
from smckit import package_io
from smckit.channel import grad_norm_penalty
from smckit.datagen import generate, split_rehearsal
from smckit.errors import BaseModelMismatch, InvalidInput, NumericalError
from smckit.expandable import (
    NEW_PREFIX,
    SmcKind,
    TrainConfig,
    apply_smc,
    build_expanded,
    extract_smc,
    final_semdist,
    semantic_distance,
    train_model,
    train_smc,
)
from smckit.svcca import plan_after
from smckit.zoo import toy_classifier

OLD, NEW = [0, 1, 2], [3, 4]


@pytest.fixture(scope="module")
def base():
    m = toy_classifier(len(OLD), 0)
    train_model(m, generate(OLD, 20, seed=0), OLD, epochs=3, lr=0.1, seed=0)
    return m


@pytest.fixture(scope="module")
def data():
    old = generate(OLD, 20, seed=0)
    return generate(NEW, 20, seed=0), split_rehearsal(old, 15, 0), generate(OLD + NEW, 10, seed=0, start=500)


def _incremental(base, split="block2", seed=0):
    return build_expanded(base, plan_after(base, split), SmcKind("incremental", OLD, NEW), seed=seed)


def test_kind_validation():
    with pytest.raises(InvalidInput):
        SmcKind("incremental", [0, 1], [1, 2])
    with pytest.raises(InvalidInput):
        SmcKind("cross_task", [0], [], task="classification")
    with pytest.raises(InvalidInput):
        SmcKind("cross_domain", [0], [])
    with pytest.raises(InvalidInput):
        SmcKind("teleport")
    k = SmcKind("incremental", OLD, NEW)
    assert SmcKind.from_dict(k.to_dict()) == k and k.tag == "incremental:3,4"
    with pytest.raises(InvalidInput):
        TrainConfig(lam=-1)


@pytest.mark.parametrize("split", ["block1", "block2", "block3", "block4"])
def test_expanded_init_reproduces_old_logits(base, split):
    em = _incremental(base, split)
    x = generate(OLD, 3, seed=1).images
    assert em.head_new.output_shape == (len(OLD) + len(NEW),)
    np.testing.assert_allclose(em(x)[:, : len(OLD)], base(x), atol=1e-10)
    for n, p in em.phi_s_new.params.items():
        assert n.startswith(NEW_PREFIX)
        for r, t in p.items():
            np.testing.assert_array_equal(t, base.params[n[len(NEW_PREFIX):]][r])


def test_whole_extractor_split_rejected(base):
    with pytest.raises(InvalidInput):
        build_expanded(base, plan_after(base, "block5"), SmcKind("incremental", OLD, NEW))


def test_semantic_distance_gradient():
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((6, 5)), rng.standard_normal((6, 5))
    d, g = semantic_distance(a, b)
    assert d > 0
    assert rel_err(g, central_diff(lambda t: semantic_distance(t, b)[0], a)) < 1e-6
    assert semantic_distance(b, b)[0] == 0.0


def test_training_freezes_base_and_pushes_features_apart(base, data):
    new, mem, test = data
    em = _incremental(base)
    digest = em.frozen_digest()
    assert final_semdist(em, new.concat(mem.samples)) == 0.0
    _, trace = train_smc(em, new, mem, TrainConfig(lam=0.01, epochs=2, seed=0), eval_data=test)
    assert em.frozen_digest() == digest
    assert package_io.model_checksum(em.base) == package_io.model_checksum(base)
    assert all(np.isfinite(r.loss) and r.semdist is not None for r in trace)
    assert final_semdist(em, new.concat(mem.samples)) >= 0.0
    assert trace[-1].acc is not None
    em0 = _incremental(base)
    _, trace0 = train_smc(em0, new, mem, TrainConfig(lam=0.0, epochs=1, seed=0))
    assert trace0[0].semdist is None and trace0[0].loss == trace0[0].ce


def test_training_is_deterministic(base, data):
    new, mem, _ = data
    a, b = _incremental(base), _incremental(base)
    train_smc(a, new, mem, TrainConfig(epochs=1, seed=4))
    train_smc(b, new, mem, TrainConfig(epochs=1, seed=4))
    assert package_io.encode(extract_smc(a)) == package_io.encode(extract_smc(b))


def test_beta_keeps_trainable_set(base, data):
    new, mem, _ = data
    em = _incremental(base)
    before = set(em.trainable_params())
    _, trace = train_smc(em, new, mem, TrainConfig(beta=0.2, epochs=1, seed=0))
    assert set(em.trainable_params()) == before and trace[0].penalty > 0


def test_incremental_needs_old_samples(base, data):
    new, _, _ = data
    with pytest.raises(InvalidInput):
        train_smc(_incremental(base), new, None, TrainConfig(epochs=1))


def test_divergence_reports_step(base, data):
    new, mem, _ = data
    with pytest.raises(NumericalError) as err:
        train_smc(_incremental(base), new, mem, TrainConfig(lr=1e308, clip=None, epochs=3))
    assert err.value.step is not None


def test_expanded_penalty_analytic_matches_finite_difference(base, data):
    new, mem, _ = data
    em = _incremental(base, "block3")
    x = new.images[:6]
    t = em.targets(new.subset(np.arange(6)))
    _, g1, _ = grad_norm_penalty(em, x, t, "analytic")
    _, g2, _ = grad_norm_penalty(em, x, t, "finite_diff")
    for n in g1:
        for r in g1[n]:
            assert rel_err(g1[n][r], g2[n][r]) < 1e-4


def test_extract_apply_identity(base, data):
    new, mem, test = data
    em = _incremental(base)
    train_smc(em, new, mem, TrainConfig(epochs=1, lam=0.01, seed=0))
    payload = extract_smc(em)
    assert payload.tensor_names() == set(em.phi_s_new.params) | set(em.head_new.params)
    assert not payload.tensor_names() & set(base.params)
    again = apply_smc(base, payload)
    np.testing.assert_array_equal(again(test.images), em(test.images))
    # through the wire: equals the component rounded to 32-bit floats
    wire_base = package_io.decode(package_io.encode(base))
    decoded = apply_smc(wire_base, package_io.decode(package_io.encode(payload)))
    rounded = apply_smc(wire_base, type(payload)(payload.metadata, package_io.round_tensors(payload.tensors)))
    np.testing.assert_array_equal(decoded(test.images), rounded(test.images))
    assert payload.metadata["lambda"] == 0.01 and "base_checksum" in payload.metadata
    with pytest.raises(BaseModelMismatch):
        apply_smc(toy_classifier(len(OLD), 9), payload)


@pytest.mark.parametrize("task,shape", [("segmentation", (4, 12, 12)), ("detection", (4, 4))])
def test_cross_task_component(base, task, shape):
    em = build_expanded(base, plan_after(base, "block2"), SmcKind("cross_task", OLD, [], task=task))
    ds = generate(OLD, 4, seed=2)
    _, trace = train_smc(em, ds, None, TrainConfig(epochs=1, seed=0))
    assert em.predict(ds.images[:4]).shape == shape
    m = em.evaluate(ds)
    assert "iou" in m and np.isfinite(trace[-1].loss)
    np.testing.assert_array_equal(em.forward_base(ds.images), base(ds.images))


def test_cross_domain_component(base):
    em = build_expanded(base, plan_after(base, "block2"), SmcKind("cross_domain", OLD, [], domain="B"))
    ds = generate(OLD, 4, "B", seed=2)
    np.testing.assert_allclose(em(ds.images), base(ds.images), atol=1e-10)
    train_smc(em, ds, None, TrainConfig(epochs=1))
    assert 0.0 <= em.evaluate(ds)["accuracy"] <= 1.0
