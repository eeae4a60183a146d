"""Bit-exact serialization and message transport.

Model parts travel in a little-endian binary format: magic ``FNRF``,
format version (u16), kind (u8), layer count (u16), then per tensor a
rank tag (u8), dims (u32 each), and float32 data. Tensors appear in the
model's canonical layer order (coarse then fine), so no names are
stored. Values are truncated to single precision on encode; everything
downstream of a transfer therefore sees float32-representable values.

Channel messages wrap a payload in a small envelope carrying kind,
merge round, client id, optional metadata, and the raw (pre-compression)
byte count. The in-process queue transport and the framed TCP transport
move identical bytes, so runs over either are bit-identical.
"""

from __future__ import annotations

import queue
import socket
import struct
import zlib
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path

import numpy as np

from .net import DenseLayer, FactorizedLayer, FactorizedParams, NetArch, NetworkParams

__all__ = [
    "MessageKind",
    "DecodeError",
    "ParamMessage",
    "serialize_part",
    "deserialize_part",
    "encode_dense",
    "decode_dense",
    "encode_frozen",
    "decode_frozen",
    "encode_learnable",
    "decode_learnable",
    "assemble_factorized",
    "save_checkpoint",
    "load_checkpoint",
    "compress_payload",
    "decompress_payload",
    "QueueChannel",
    "SocketChannel",
    "send_message",
    "recv_message",
    "serve_clients",
    "connect_to_server",
]

MAGIC = b"FNRF"
ENVELOPE_MAGIC = b"FMSG"
FORMAT_VERSION = 1
FLAG_DEFLATE = 1


class MessageKind(IntEnum):
    FROZEN = 1      # the frozen right factors
    LEARNABLE = 2   # left factors plus biases
    DENSE = 3       # full weights plus biases
    DATASET = 4     # one encoded image file
    HELLO = 240     # client introduction (control, not ledgered)
    BEGIN = 241     # server picks the run mode (control)
    DONE = 242      # end of session (control)


DATA_KINDS = (MessageKind.FROZEN, MessageKind.LEARNABLE, MessageKind.DENSE,
              MessageKind.DATASET)


class DecodeError(ValueError):
    """Malformed or truncated wire data."""


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise DecodeError(
                f"truncated data: wanted {n} bytes at offset {self.pos}, "
                f"have {len(self.data) - self.pos}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


# ---------------------------------------------------------------------------
# model-part payloads

def serialize_part(kind: MessageKind, tensors: list[np.ndarray], n_layers: int) -> bytes:
    out = [MAGIC, struct.pack("<HBH", FORMAT_VERSION, int(kind), n_layers)]
    for t in tensors:
        t = np.asarray(t)
        out.append(struct.pack("<B", t.ndim))
        out.append(struct.pack(f"<{t.ndim}I", *t.shape))
        out.append(np.ascontiguousarray(t, dtype="<f4").tobytes())
    return b"".join(out)


def deserialize_part(data: bytes) -> tuple[MessageKind, int, list[np.ndarray]]:
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise DecodeError("bad magic: not a model-part payload")
    version, kind_byte, n_layers = r.unpack("<HBH")
    if version != FORMAT_VERSION:
        raise DecodeError(f"unsupported format version {version}")
    try:
        kind = MessageKind(kind_byte)
    except ValueError as exc:
        raise DecodeError(f"unknown payload kind {kind_byte}") from exc
    per_layer = {MessageKind.FROZEN: 1, MessageKind.LEARNABLE: 2,
                 MessageKind.DENSE: 2}.get(kind)
    if per_layer is None:
        raise DecodeError(f"kind {kind.name} carries no tensor stream")
    tensors = []
    for _ in range(n_layers * per_layer):
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        raw = r.take(4 * count)
        tensors.append(np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(shape))
    if r.pos != len(data):
        raise DecodeError(f"{len(data) - r.pos} trailing bytes after tensor stream")
    return kind, n_layers, tensors


def encode_dense(params: NetworkParams) -> bytes:
    layers = params.all_layers()
    tensors: list[np.ndarray] = []
    for layer in layers:
        tensors += [layer.weight, layer.bias]
    return serialize_part(MessageKind.DENSE, tensors, len(layers))


def _layer_tags(arch: NetArch) -> list[str]:
    tags = [tag for tag, _, _ in arch.layer_dims()]
    return tags * 2 if arch.use_fine else tags


def decode_dense(data: bytes, arch: NetArch) -> NetworkParams:
    kind, n_layers, tensors = deserialize_part(data)
    if kind != MessageKind.DENSE:
        raise DecodeError(f"expected dense model, got {kind.name}")
    tags = _layer_tags(arch)
    if n_layers != len(tags):
        raise DecodeError(f"layer count {n_layers} does not match architecture")
    layers = [DenseLayer(tensors[2 * i], tensors[2 * i + 1], tags[i])
              for i in range(n_layers)]
    per_net = len(arch.layer_dims())
    fine = layers[per_net:] if arch.use_fine else None
    return NetworkParams(coarse=layers[:per_net], fine=fine, arch=arch)


def encode_frozen(params: FactorizedParams) -> bytes:
    layers = params.all_layers()
    return serialize_part(MessageKind.FROZEN, [l.right for l in layers], len(layers))


def decode_frozen(data: bytes) -> list[np.ndarray]:
    kind, _, tensors = deserialize_part(data)
    if kind != MessageKind.FROZEN:
        raise DecodeError(f"expected frozen factors, got {kind.name}")
    return tensors


def encode_learnable(params: FactorizedParams) -> bytes:
    layers = params.all_layers()
    tensors: list[np.ndarray] = []
    for layer in layers:
        tensors += [layer.left, layer.bias]
    return serialize_part(MessageKind.LEARNABLE, tensors, len(layers))


def decode_learnable(data: bytes) -> tuple[list[np.ndarray], list[np.ndarray]]:
    kind, n_layers, tensors = deserialize_part(data)
    if kind != MessageKind.LEARNABLE:
        raise DecodeError(f"expected learnable set, got {kind.name}")
    return tensors[0::2], tensors[1::2]


def assemble_factorized(lefts: list[np.ndarray], rights: list[np.ndarray],
                        biases: list[np.ndarray], arch: NetArch) -> FactorizedParams:
    tags = _layer_tags(arch)
    if not (len(lefts) == len(rights) == len(biases) == len(tags)):
        raise DecodeError("factor counts do not match architecture")
    layers = [FactorizedLayer(l, r, b, tag)
              for l, r, b, tag in zip(lefts, rights, biases, tags)]
    per_net = len(arch.layer_dims())
    fine = layers[per_net:] if arch.use_fine else None
    return FactorizedParams(coarse=layers[:per_net], fine=fine, arch=arch)


def save_checkpoint(path: Path, params: NetworkParams) -> int:
    data = encode_dense(params)
    Path(path).write_bytes(data)
    return len(data)


def load_checkpoint(path: Path, arch: NetArch) -> NetworkParams:
    return decode_dense(Path(path).read_bytes(), arch)


def compress_payload(data: bytes) -> bytes:
    return zlib.compress(data, level=6)


def decompress_payload(data: bytes) -> bytes:
    return zlib.decompress(data)


# ---------------------------------------------------------------------------
# channels and message framing

@dataclass
class ParamMessage:
    kind: MessageKind
    round: int = 0
    client: int = 0
    payload: bytes = b""
    meta: bytes = b""

    @property
    def raw_bytes(self) -> int:
        return len(self.payload)


def _encode_message(msg: ParamMessage, compress: bool) -> tuple[bytes, int]:
    payload = msg.payload
    flags = 0
    if compress and payload:
        payload = compress_payload(payload)
        flags |= FLAG_DEFLATE
    head = ENVELOPE_MAGIC + struct.pack(
        "<BHHBHII", int(msg.kind), msg.round, msg.client, flags,
        len(msg.meta), len(msg.payload), len(payload))
    return head + msg.meta + payload, len(payload)


def _decode_message(blob: bytes) -> tuple[ParamMessage, int]:
    r = _Reader(blob)
    if r.take(4) != ENVELOPE_MAGIC:
        raise DecodeError("bad envelope magic")
    kind_byte, round_, client, flags, meta_len, raw_len, pay_len = r.unpack("<BHHBHII")
    try:
        kind = MessageKind(kind_byte)
    except ValueError as exc:
        raise DecodeError(f"unknown message kind {kind_byte}") from exc
    meta = r.take(meta_len)
    payload = r.take(pay_len)
    if flags & FLAG_DEFLATE:
        payload = decompress_payload(payload)
    if len(payload) != raw_len:
        raise DecodeError(f"payload length {len(payload)} != declared {raw_len}")
    msg = ParamMessage(kind=kind, round=round_, client=client, payload=payload,
                       meta=meta)
    return msg, pay_len


class QueueChannel:
    """In-process byte channel; one end of a crossed queue pair."""

    def __init__(self, inbox: queue.Queue, outbox: queue.Queue):
        self._inbox = inbox
        self._outbox = outbox

    @classmethod
    def make_pair(cls) -> tuple["QueueChannel", "QueueChannel"]:
        a, b = queue.Queue(), queue.Queue()
        return cls(a, b), cls(b, a)

    def send_bytes(self, data: bytes) -> None:
        self._outbox.put(data)

    def recv_bytes(self) -> bytes:
        data = self._inbox.get()
        if data is None:
            raise ConnectionError("channel closed")
        return data

    def close(self) -> None:
        self._outbox.put(None)


class SocketChannel:
    """TCP byte channel with a u32 big-endian length prefix per frame."""

    def __init__(self, sock: socket.socket):
        self.sock = sock

    def send_bytes(self, data: bytes) -> None:
        self.sock.sendall(struct.pack(">I", len(data)) + data)

    def _recv_exact(self, n: int) -> bytes:
        chunks = []
        while n > 0:
            part = self.sock.recv(min(n, 1 << 20))
            if not part:
                raise ConnectionError("connection lost mid-frame")
            chunks.append(part)
            n -= len(part)
        return b"".join(chunks)

    def recv_bytes(self) -> bytes:
        (length,) = struct.unpack(">I", self._recv_exact(4))
        return self._recv_exact(length)

    def close(self) -> None:
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


def send_message(channel, msg: ParamMessage, ledger=None, direction: str = "down",
                 compress: bool = False) -> None:
    blob, wire_payload = _encode_message(msg, compress)
    if ledger is not None and msg.kind in DATA_KINDS:
        ledger.add(direction, msg.kind, msg.round, msg.client,
                   raw_bytes=msg.raw_bytes, wire_bytes=wire_payload)
    channel.send_bytes(blob)


def recv_message(channel, ledger=None, direction: str = "up") -> ParamMessage:
    msg, wire_payload = _decode_message(channel.recv_bytes())
    if ledger is not None and msg.kind in DATA_KINDS:
        ledger.add(direction, msg.kind, msg.round, msg.client,
                   raw_bytes=msg.raw_bytes, wire_bytes=wire_payload)
    return msg


def serve_clients(host: str, port: int, n_clients: int,
                  timeout: float | None = 60.0
                  ) -> tuple[dict[int, SocketChannel], dict[int, ParamMessage]]:
    """Accept ``n_clients`` connections, keyed by each one's hello message."""
    listener = socket.create_server((host, port))
    listener.settimeout(timeout)
    accepted: list[SocketChannel] = []
    try:
        while len(accepted) < n_clients:
            sock, _ = listener.accept()
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            accepted.append(SocketChannel(sock))
    finally:
        listener.close()
    channels: dict[int, SocketChannel] = {}
    hellos: dict[int, ParamMessage] = {}
    for chan in accepted:
        hello = recv_message(chan)
        if hello.kind != MessageKind.HELLO:
            raise DecodeError(f"expected hello, got {hello.kind.name}")
        channels[hello.client] = chan
        hellos[hello.client] = hello
    if sorted(channels) != list(range(n_clients)):
        raise DecodeError(f"client ids {sorted(channels)} != 0..{n_clients - 1}")
    return channels, hellos


def connect_to_server(host: str, port: int, timeout: float = 60.0) -> SocketChannel:
    sock = socket.create_connection((host, port), timeout=timeout)
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    sock.settimeout(None)
    return SocketChannel(sock)
