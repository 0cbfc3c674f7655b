"""Base-station / edge update protocol: request, serve, integrate.

Wire format over TCP: one request frame and one response frame per
connection, each a 4-byte big-endian length followed by the payload. The
request payload is canonical JSON; the response is a component package
(``SMCPKG1``), a full expanded model (``SMCMDL1``) or an error frame
(``SMCERR1`` followed by a UTF-8 message). The magic doubles as the mode flag.
"""

from __future__ import annotations

import json
import socket
import socketserver
import struct
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from smckit import package_io
from smckit.channel import ChannelConfig, transmit_tensors
from smckit.datagen import RehearsalMemory, ShapeDataset
from smckit.errors import InvalidInput, NotAvailable, ProtocolError, TransportError
from smckit.expandable import ExpandedModel, SmcKind, SmcPayload, TrainConfig, apply_smc, train_smc
from smckit.model import ModelGraph

MODES = ("smc", "full_model")
ERR_MAGIC = b"SMCERR1"
MAX_FRAME = 1 << 30
FRAME_HEADER = 4
EDGE_FINETUNE_EPOCHS = 3
# nominal link used for the deterministic "seconds" column of transfer reports
LINK_BYTES_PER_S = 1.0e6


@dataclass(frozen=True)
class UpdateRequest:
    base_checksum: str
    kind: SmcKind
    edge_id: str = "edge-0"
    mode: str = "smc"  # preferred delivery; falls back to the other one

    def __post_init__(self):
        if not self.base_checksum:
            raise InvalidInput("request needs a base-model checksum")
        if self.mode not in MODES:
            raise InvalidInput(f"unknown delivery mode {self.mode!r}")

    @property
    def key(self) -> tuple[str, str]:
        return self.base_checksum, self.kind.tag

    def to_bytes(self) -> bytes:
        return package_io.canonical_json(
            {"base_checksum": self.base_checksum, "kind": self.kind.to_dict(), "edge_id": self.edge_id, "mode": self.mode}
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> UpdateRequest:
        try:
            d = json.loads(data.decode("utf-8"))
            return cls(d["base_checksum"], SmcKind.from_dict(d["kind"]), d.get("edge_id", "edge-0"), d.get("mode", "smc"))
        except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as e:
            raise ProtocolError(f"malformed update request: {e}") from None


@dataclass
class TransferReport:
    bytes_sent: int  # framed size: payload plus the length prefix
    wall_time: float
    mode: str
    snr_db: float

    @property
    def modeled_seconds(self) -> float:
        return self.bytes_sent / LINK_BYTES_PER_S


def payload_mode(data: bytes) -> str:
    magic = bytes(data[: len(package_io.PKG_MAGIC)])
    if magic == package_io.PKG_MAGIC:
        return "smc"
    if magic == package_io.MDL_MAGIC:
        return "full_model"
    raise package_io.UnknownFormat(f"not a deliverable payload: {magic!r}")


# registry ------------------------------------------------------------------


@dataclass
class Registry:
    """Trained deliverables keyed by (base checksum, kind tag); read-only while serving."""

    entries: dict[tuple[str, str], dict[str, bytes]] = field(default_factory=dict)

    def add(self, item) -> tuple[str, str]:
        """Register a payload, an expanded model, or already-encoded bytes of either."""
        data = item if isinstance(item, (bytes, bytearray)) else package_io.encode(item)
        obj = package_io.decode(data)
        if isinstance(obj, SmcPayload):
            key = (obj.metadata["base_checksum"], SmcKind.from_dict(obj.metadata["kind"]).tag)
            mode = "smc"
        elif isinstance(obj, ExpandedModel):
            key = (package_io.model_checksum(obj.base), obj.kind.tag)
            mode = "full_model"
        else:
            raise InvalidInput(f"cannot register a {type(obj).__name__}")
        self.entries.setdefault(key, {})[mode] = bytes(data)
        return key

    @classmethod
    def from_directory(cls, path: str | Path) -> Registry:
        reg = cls()
        root = Path(path)
        if not root.is_dir():
            raise InvalidInput(f"registry directory {root} does not exist")
        for f in sorted(root.glob("*.smcpkg")) + sorted(root.glob("*.smcmdl")):
            data = f.read_bytes()
            if isinstance(package_io.decode(data), (SmcPayload, ExpandedModel)):
                reg.add(data)
        return reg


def handle_request(registry: Registry, req: UpdateRequest) -> bytes:
    """The preferred deliverable for ``req``, else the other mode, else :class:`NotAvailable`."""
    found = registry.entries.get(req.key)
    if not found:
        raise NotAvailable(f"no component for base {req.base_checksum[:12]} and kind {req.kind.tag}")
    other = MODES[1 - MODES.index(req.mode)]
    return found.get(req.mode) or found[other]


# edge side -----------------------------------------------------------------


def edge_integrate(
    base: ModelGraph,
    data: bytes,
    channel: ChannelConfig = ChannelConfig(),
    memory: RehearsalMemory | None = None,
    finetune: TrainConfig | None = None,
    local_data: ShapeDataset | None = None,
    wall_time: float = 0.0,
) -> tuple[ExpandedModel, TransferReport]:
    """Decode a delivery, pass its tensor values through the channel and attach it to ``base``.

    A full-model delivery replaces the local model, so every one of its tensors
    is exposed to channel noise. Fine-tuning trains the component on
    ``local_data`` plus the rehearsal memory (the memory alone without local data).
    """
    mode = payload_mode(data)
    obj = package_io.decode(data)
    stream = "edge"
    if isinstance(obj, SmcPayload):
        noisy = SmcPayload(obj.metadata, obj.tensors if channel.noiseless else transmit_tensors(obj.tensors, channel, stream))
        em = apply_smc(base, noisy)
    else:
        if not channel.noiseless:
            params = {**obj.base.params, **obj.phi_s_new.params, **obj.head_new.params}
            noisy = transmit_tensors({n: p for n, p in params.items() if p}, channel, stream)
            for graph in (obj.base, obj.phi_s_new, obj.head_new):
                for n in graph.params:
                    if n in noisy:
                        graph.params[n] = noisy[n]
            obj = ExpandedModel(obj.base, obj.split, obj.kind, obj.phi_s_new, obj.head_new)
        em = obj
    if finetune is not None:
        if local_data is None and memory is None:
            raise InvalidInput("fine-tuning needs local data or a rehearsal memory")
        if local_data is None:
            train_smc(em, memory.samples, None, finetune)
        else:
            train_smc(em, local_data, memory, finetune)
    return em, TransferReport(len(data) + FRAME_HEADER, wall_time, mode, channel.snr_db)


def default_finetune(seed: int = 0, **overrides: Any) -> TrainConfig:
    return TrainConfig(**{"epochs": EDGE_FINETUNE_EPOCHS, "seed": seed, **overrides})


# transport -----------------------------------------------------------------


def frame(payload: bytes) -> bytes:
    if len(payload) > MAX_FRAME:
        raise ProtocolError(f"frame of {len(payload)} bytes exceeds the {MAX_FRAME}-byte limit")
    return struct.pack(">I", len(payload)) + payload


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(min(n - len(buf), 1 << 20))
        if not chunk:
            raise ProtocolError(f"connection closed after {len(buf)} of {n} bytes")
        buf += chunk
    return bytes(buf)


def read_frame(sock: socket.socket) -> bytes:
    (n,) = struct.unpack(">I", _recv_exact(sock, FRAME_HEADER))
    if n > MAX_FRAME:
        raise ProtocolError(f"announced frame of {n} bytes exceeds the {MAX_FRAME}-byte limit")
    return _recv_exact(sock, n)


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        try:
            req = UpdateRequest.from_bytes(read_frame(self.request))
            reply = handle_request(self.server.registry, req)
        except (NotAvailable, ProtocolError, InvalidInput) as e:
            reply = ERR_MAGIC + f"{type(e).__name__}: {e}".encode("utf-8")
        try:
            self.request.sendall(frame(reply))
        except OSError:
            pass


class UpdateServer(socketserver.TCPServer):
    """Sequential one-request-per-connection server over a read-only registry."""

    allow_reuse_address = True

    def __init__(self, registry: Registry, host: str = "127.0.0.1", port: int = 0):
        self.registry = registry
        super().__init__((host, port), _Handler)

    @property
    def address(self) -> tuple[str, int]:
        return self.server_address[0], self.server_address[1]

    def start_background(self) -> threading.Thread:
        t = threading.Thread(target=self.serve_forever, kwargs={"poll_interval": 0.05}, daemon=True)
        t.start()
        return t


def request_over_socket(addr: tuple[str, int], req: UpdateRequest, timeout: float = 30.0) -> tuple[bytes, TransferReport]:
    """Send one request; return the response payload and its transfer report."""
    start = time.perf_counter()
    try:
        with socket.create_connection(addr, timeout=timeout) as sock:
            sock.sendall(frame(req.to_bytes()))
            data = read_frame(sock)
    except ProtocolError:
        raise
    except OSError as e:
        raise TransportError(f"cannot reach {addr[0]}:{addr[1]}: {e}") from None
    elapsed = time.perf_counter() - start
    if data.startswith(ERR_MAGIC):
        msg = data[len(ERR_MAGIC) :].decode("utf-8", "replace")
        if msg.startswith("NotAvailable"):
            raise NotAvailable(msg.split(": ", 1)[-1])
        raise ProtocolError(msg)
    return data, TransferReport(len(data) + FRAME_HEADER, elapsed, payload_mode(data), float("inf"))


def parse_addr(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit():
        raise InvalidInput(f"address must be host:port, got {text!r}")
    return host or "127.0.0.1", int(port)
