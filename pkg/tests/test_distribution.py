import math
import socket
import struct

import numpy as np
import pytest

from smckit import package_io
from smckit.channel import ChannelConfig
from smckit.datagen import generate, split_rehearsal
from smckit.distribution import (
    FRAME_HEADER,
    MAX_FRAME,
    Registry,
    UpdateRequest,
    UpdateServer,
    default_finetune,
    edge_integrate,
    frame,
    handle_request,
    parse_addr,
    read_frame,
    request_over_socket,
)
from smckit.errors import BaseModelMismatch, InvalidInput, NotAvailable, ProtocolError, TransportError
from smckit.expandable import SmcKind, TrainConfig, build_expanded, extract_smc, train_model, train_smc
from smckit.svcca import plan_after
from smckit.zoo import toy_classifier

OLD, NEW = [0, 1, 2], [3, 4]


@pytest.fixture(scope="module")
def setup():
    base = toy_classifier(3, 0)
    train_model(base, generate(OLD, 15, seed=0), OLD, epochs=2, lr=0.1)
    base = package_io.decode(package_io.encode(base))  # the edge holds the wire copy
    kind = SmcKind("incremental", OLD, NEW)
    em = build_expanded(base, plan_after(base, "block2"), kind)
    mem = split_rehearsal(generate(OLD, 15, seed=0), 12, 0)
    train_smc(em, generate(NEW, 15, seed=0), mem, TrainConfig(epochs=1))
    reg = Registry()
    reg.add(extract_smc(em))
    reg.add(em)
    return base, em, reg, mem


@pytest.fixture()
def server(setup):
    srv = UpdateServer(setup[2])
    srv.start_background()
    yield srv
    srv.shutdown()
    srv.server_close()


def _req(base, kind=SmcKind("incremental", OLD, NEW), mode="smc"):
    return UpdateRequest(package_io.model_checksum(base), kind, "edge-t", mode)


def test_handle_request_modes(setup):
    base, em, reg, _ = setup
    smc = handle_request(reg, _req(base))
    full = handle_request(reg, _req(base, mode="full_model"))
    assert smc[:7] == b"SMCPKG1" and full[:7] == b"SMCMDL1"
    assert len(smc) < len(full)
    with pytest.raises(NotAvailable):
        handle_request(reg, UpdateRequest("0" * 64, em.kind))
    with pytest.raises(NotAvailable):
        handle_request(reg, _req(base, SmcKind("incremental", OLD, [5])))
    only_full = Registry()
    only_full.add(em)
    assert handle_request(only_full, _req(base))[:7] == b"SMCMDL1"


def test_request_validation():
    with pytest.raises(InvalidInput):
        UpdateRequest("", SmcKind("cross_domain", [0], [], domain="B"))
    with pytest.raises(InvalidInput):
        UpdateRequest("abc", SmcKind("cross_domain", [0], [], domain="B"), mode="carrier-pigeon")
    r = UpdateRequest("abc", SmcKind("cross_domain", [0], [], domain="B"))
    assert UpdateRequest.from_bytes(r.to_bytes()) == r
    with pytest.raises(ProtocolError):
        UpdateRequest.from_bytes(b"{not json")


def test_socket_matches_in_process(setup, server):
    base, _, reg, _ = setup
    for mode in ("smc", "full_model"):
        req = _req(base, mode=mode)
        a, report = request_over_socket(server.address, req)
        b, _ = request_over_socket(server.address, req)
        assert a == b == handle_request(reg, req)
        assert report.bytes_sent == len(a) + FRAME_HEADER and report.mode == mode


def test_socket_not_available(setup, server):
    with pytest.raises(NotAvailable):
        request_over_socket(server.address, UpdateRequest("f" * 64, setup[1].kind))


def test_malformed_frames(server):
    with socket.create_connection(server.address) as s:
        s.sendall(struct.pack(">I", 100) + b"short")
        s.shutdown(socket.SHUT_WR)
        reply = read_frame(s)
    assert reply.startswith(b"SMCERR1")
    with socket.create_connection(server.address) as s:
        s.sendall(struct.pack(">I", MAX_FRAME + 1))
        s.shutdown(socket.SHUT_WR)
        assert b"exceeds" in read_frame(s)


def test_read_frame_limits():
    a, b = socket.socketpair()
    with a, b:
        a.sendall(struct.pack(">I", MAX_FRAME + 1))
        with pytest.raises(ProtocolError):
            read_frame(b)
    a, b = socket.socketpair()
    with a, b:
        a.sendall(frame(b"hello"))
        assert read_frame(b) == b"hello"
        a.sendall(struct.pack(">I", 10) + b"abc")
        a.close()
        with pytest.raises(ProtocolError):
            read_frame(b)


def test_transport_error_on_closed_port():
    s = socket.socket()
    s.bind(("127.0.0.1", 0))
    port = s.getsockname()[1]
    s.close()
    with pytest.raises(TransportError):
        request_over_socket(("127.0.0.1", port), UpdateRequest("a", SmcKind("cross_domain", [0], [], domain="B")), timeout=2)


def test_edge_integrate_lossless_equals_local(setup):
    base, em, reg, _ = setup
    x = generate(OLD + NEW, 3, seed=5).images
    local = package_io.decode(package_io.encode(extract_smc(em)))
    from smckit.expandable import apply_smc

    expected = apply_smc(base, local)(x)
    for mode in ("smc", "full_model"):
        data = handle_request(reg, _req(base, mode=mode))
        model, report = edge_integrate(base, data, ChannelConfig())
        np.testing.assert_array_equal(model(x), expected)
        assert report.bytes_sent == len(data) + FRAME_HEADER and math.isinf(report.snr_db)


def test_edge_integrate_noise_and_finetune(setup):
    base, em, reg, mem = setup
    data = handle_request(reg, _req(base))
    x = generate(OLD + NEW, 3, seed=5).images
    clean, _ = edge_integrate(base, data, ChannelConfig())
    noisy, rep = edge_integrate(base, data, ChannelConfig(0.0, seed=1))
    again, _ = edge_integrate(base, data, ChannelConfig(0.0, seed=1))
    assert not np.array_equal(noisy(x), clean(x))
    np.testing.assert_array_equal(noisy(x), again(x))
    assert rep.snr_db == 0.0
    tuned, _ = edge_integrate(base, data, ChannelConfig(), mem, default_finetune(epochs=1))
    assert not np.array_equal(tuned(x), clean(x))
    assert default_finetune().epochs == 3
    with pytest.raises(BaseModelMismatch):
        edge_integrate(toy_classifier(3, 7), data)


def test_registry_from_directory(setup, tmp_path):
    base, em, reg, _ = setup
    package_io.save(tmp_path / "inc.smcpkg", extract_smc(em))
    package_io.save(tmp_path / "inc.smcmdl", em)
    package_io.save(tmp_path / "base.smcmdl", base)  # plain graphs are skipped
    loaded = Registry.from_directory(tmp_path)
    assert loaded.entries == reg.entries
    with pytest.raises(InvalidInput):
        Registry.from_directory(tmp_path / "missing")


def test_parse_addr():
    assert parse_addr("localhost:5055") == ("localhost", 5055)
    assert parse_addr(":80") == ("127.0.0.1", 80)
    with pytest.raises(InvalidInput):
        parse_addr("nohost")
