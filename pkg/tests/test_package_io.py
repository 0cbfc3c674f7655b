import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import crc32_bitwise
from smckit import package_io
from smckit.datagen import generate
from smckit.errors import CorruptPackage, InvalidInput, UnknownFormat
from smckit.expandable import SmcKind, build_expanded, extract_smc
from smckit.layers import Conv2d, Dense, Flatten, ReLU
from smckit.linalg import RngStream
from smckit.model import ModelGraph
from smckit.svcca import plan_after
from smckit.zoo import toy_classifier


def _random_graph(seed: int) -> ModelGraph:
    rng = np.random.default_rng(seed)
    c, h = int(rng.integers(1, 4)), int(rng.integers(2, 6))
    layers = []
    if rng.random() < 0.5:
        oc = int(rng.integers(1, 4))
        layers += [Conv2d("conv", c, oc), ReLU("r0"), Flatten("flat")]
        width, shape = oc * h * h, (c, h, h)
    else:
        layers += [Flatten("flat")]
        width, shape = c * h * h, (c, h, h)
    for i in range(int(rng.integers(1, 4))):
        out = int(rng.integers(1, 7))
        layers += [Dense(f"fc{i}", width, out), ReLU(f"r{i + 1}")]
        width = out
    g = ModelGraph.build(layers, shape, RngStream(seed))
    # exercise extreme but finite magnitudes
    for p in g.params.values():
        for r in p:
            p[r] = p[r] * 10.0 ** rng.integers(-20, 20)
    return g


@pytest.mark.parametrize("seed", range(100))
def test_round_trip_bit_exact(seed):
    g = _random_graph(seed)
    data = package_io.encode(g)
    back = package_io.decode(data)
    assert back.spec() == g.spec()
    for n, p in g.params.items():
        for r, t in p.items():
            np.testing.assert_array_equal(back.params[n][r], package_io.to_wire(t))
    assert package_io.encode(back) == data  # stable after the first rounding


def test_layout_and_sizes():
    g = ModelGraph.build([Dense("d", 2, 2)], (2,), RngStream(0))
    data = package_io.encode(g)
    assert data[:7] == b"SMCMDL1" and data[7] == 1
    (meta_len,) = struct.unpack("<I", data[8:12])
    assert len(data) == 12 + meta_len + 24 + 4  # 6 floats in the blob
    assert struct.unpack("<I", data[-4:])[0] == crc32_bitwise(data[:-4])
    assert package_io.encode(g) == data


def test_component_package_round_trip():
    base = toy_classifier(3, 0)
    em = build_expanded(base, plan_after(base, "block2"), SmcKind("incremental", [0, 1, 2], [3]))
    payload = extract_smc(em)
    data = package_io.encode(payload)
    assert data[:7] == b"SMCPKG1"
    back = package_io.decode(data)
    assert back.metadata == payload.metadata
    assert package_io.round_tensors(payload.tensors).keys() == back.tensors.keys()
    full = package_io.decode(package_io.encode(em))
    x = generate([0, 1], 2, seed=0).images
    np.testing.assert_allclose(full(x), em(x), rtol=1e-5, atol=1e-5)
    assert len(data) < len(package_io.encode(em))


def test_dataset_round_trip():
    ds = generate([0, 5], 3, "B", seed=4)
    back = package_io.decode(package_io.encode(ds))
    assert back.domain == "B" and back.seed == 4
    np.testing.assert_array_equal(back.labels, ds.labels)
    np.testing.assert_array_equal(back.masks, ds.masks)
    np.testing.assert_array_equal(back.images, package_io.to_wire(ds.images))


def test_every_single_byte_flip_is_detected():
    data = package_io.encode(ModelGraph.build([Dense("d", 3, 2)], (3,), RngStream(1)))
    for i in range(len(data)):
        for flip in (0x01, 0x80, 0xFF):
            bad = bytearray(data)
            bad[i] ^= flip
            with pytest.raises((CorruptPackage, UnknownFormat)):
                package_io.decode(bytes(bad))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 255))
def test_random_byte_corruption_in_blob(seed, flip):
    data = package_io.encode(_random_graph(seed % 50))
    i = len(data) - 5 - (seed % 24)
    bad = bytearray(data)
    bad[i] ^= flip
    with pytest.raises(CorruptPackage):
        package_io.decode(bytes(bad))


def test_rejections():
    with pytest.raises(UnknownFormat):
        package_io.decode(b"")
    with pytest.raises(UnknownFormat):
        package_io.decode(b"NOTMAGIC" + bytes(20))
    data = package_io.encode(ModelGraph.build([Dense("d", 2, 2)], (2,), RngStream(0)))
    for cut in (5, 10, len(data) - 1):
        with pytest.raises((CorruptPackage, UnknownFormat)):
            package_io.decode(data[:cut])
    g = ModelGraph.build([Dense("d", 2, 2)], (2,), RngStream(0))
    g.params["d"]["W"][0, 0] = np.inf
    with pytest.raises(InvalidInput):
        package_io.encode(g)
    with pytest.raises(InvalidInput):
        package_io.encode(object())


def test_checksum_ignores_trainable_mask():
    g = toy_classifier(2, 0)
    c = g.clone()
    c.freeze()
    assert package_io.model_checksum(g) == package_io.model_checksum(c)
    assert package_io.model_checksum(g) != package_io.model_checksum(toy_classifier(2, 1))


def test_save_load(tmp_path):
    g = toy_classifier(2, 0)
    n = package_io.save(tmp_path / "m.smcmdl", g)
    assert n == (tmp_path / "m.smcmdl").stat().st_size
    assert package_io.load(tmp_path / "m.smcmdl").spec() == g.spec()
