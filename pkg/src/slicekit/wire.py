"""Binary framing for tensors and control messages between device and edge.

Layout (all integers little-endian)::

    magic         4s   b"SLKF"
    version       u16  1
    frame_type    u8   0=InferRequest 1=InferResponse 2=Error 3=Ping 4=Pong
    request_id    u64
    model_id_len  u8
    model_id      model_id_len bytes of UTF-8
    split_index   u16  0xFFFF encodes -1 (full offload)
    dims          3 x u32 (C, H, W)
    payload_len   u64
    payload       payload_len bytes; float32 LE for tensor-bearing frames

The header is fully determined once ``model_id_len`` is known, so a reader
always knows how many bytes the frame will take before consuming the payload.
Frames that carry no tensor (Error, Ping, Pong) have zero dims and an empty
payload. Responses and errors put their metadata in the ``model_id`` text
slot (see :func:`response_meta` and :func:`error_frame`).
"""
from __future__ import annotations

import enum
import socket
import struct
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from slicekit.errors import (BadMagic, BadModelId, BadPayload, ConnectionClosed,
                             OversizedModelId, PayloadLengthMismatch, TruncatedFrame,
                             UnknownFrameType, UnsupportedVersion)
from slicekit.tensor import Tensor

MAGIC = b"SLKF"
VERSION = 1
MAX_PAYLOAD = 1 << 30

_PREFIX = struct.Struct("<4sHBQB")   # magic, version, type, request_id, id_len
_SUFFIX = struct.Struct("<H3IQ")     # split_index, C, H, W, payload_len
FULL_OFFLOAD_WIRE = 0xFFFF


class FrameType(enum.IntEnum):
    INFER_REQUEST = 0
    INFER_RESPONSE = 1
    ERROR = 2
    PING = 3
    PONG = 4


TENSOR_FRAMES = (FrameType.INFER_REQUEST, FrameType.INFER_RESPONSE)


@dataclass(frozen=True)
class Frame:
    frame_type: FrameType
    request_id: int = 0
    model_id: str = ""
    split_index: int = 0
    tensor: Optional[Tensor] = None

    @property
    def dims(self):
        return self.tensor.shape if self.tensor is not None else (0, 0, 0)

    @property
    def payload_len(self) -> int:
        return 4 * self.tensor.size if self.tensor is not None else 0


def header_size(model_id: str = "") -> int:
    return _PREFIX.size + len(model_id.encode("utf-8")) + _SUFFIX.size


def frame_size(shape, model_id: str = "") -> int:
    c, h, w = shape
    return header_size(model_id) + 4 * c * h * w


def encode(frame_type, tensor: Optional[Tensor] = None, *, request_id: int = 0,
           model_id: str = "", split_index: int = 0) -> bytes:
    frame_type = FrameType(frame_type)
    mid = model_id.encode("utf-8")
    if len(mid) > 255:
        raise OversizedModelId(f"model id is {len(mid)} bytes (max 255)")
    if (frame_type in TENSOR_FRAMES) != (tensor is not None):
        raise PayloadLengthMismatch(f"{frame_type.name} {'needs' if tensor is None else 'takes no'} tensor")
    if split_index == -1:
        split_index = FULL_OFFLOAD_WIRE
    if not 0 <= split_index <= 0xFFFF:
        raise ValueError(f"split index {split_index} does not fit the wire field")
    if tensor is not None:
        dims = tensor.shape
        payload = tensor.data.astype("<f4", copy=False).tobytes()
    else:
        dims = (0, 0, 0)
        payload = b""
    return b"".join((
        _PREFIX.pack(MAGIC, VERSION, frame_type, request_id, len(mid)),
        mid,
        _SUFFIX.pack(split_index, *dims, len(payload)),
        payload,
    ))


def encode_frame(frame: Frame) -> bytes:
    return encode(frame.frame_type, frame.tensor, request_id=frame.request_id,
                  model_id=frame.model_id, split_index=frame.split_index)


def _parse(read: Callable[[int], bytes]) -> Frame:
    magic, version, ftype, request_id, id_len = _PREFIX.unpack(read(_PREFIX.size))
    if magic != MAGIC:
        raise BadMagic(f"bad magic {magic!r}")
    if version != VERSION:
        raise UnsupportedVersion(f"wire version {version} (supported: {VERSION})")
    raw_id = read(id_len)
    split_index, c, h, w, payload_len = _SUFFIX.unpack(read(_SUFFIX.size))
    if payload_len > MAX_PAYLOAD:
        raise PayloadLengthMismatch(f"payload of {payload_len} bytes exceeds limit")
    try:
        ftype = FrameType(ftype)
    except ValueError:
        _skip(read, payload_len)
        raise _aligned(UnknownFrameType(f"frame type {ftype}"), request_id) from None
    if ftype in TENSOR_FRAMES:
        ok = min(c, h, w) > 0 and payload_len == 4 * c * h * w
    else:
        ok = payload_len == 0 and c == h == w == 0
    if not ok:
        _skip(read, payload_len)
        raise _aligned(PayloadLengthMismatch(f"{ftype.name}: dims {(c, h, w)} with payload_len {payload_len}"),
                       request_id)
    payload = read(payload_len)
    try:
        model_id = raw_id.decode("utf-8")
    except UnicodeDecodeError:
        raise _aligned(BadModelId("model id is not UTF-8"), request_id) from None
    tensor = None
    if ftype in TENSOR_FRAMES:
        values = np.frombuffer(payload, dtype="<f4").astype(np.float32)
        if not np.isfinite(values).all():
            raise _aligned(BadPayload("payload holds non-finite values"), request_id)
        tensor = Tensor(values.reshape(c, h, w))
    if split_index == FULL_OFFLOAD_WIRE:
        split_index = -1
    return Frame(ftype, request_id, model_id, split_index, tensor)


def _aligned(err, request_id):
    err.recoverable = True
    err.request_id = request_id
    return err


def _skip(read, n):
    # consume a payload we will not use so the stream stays aligned
    while n > 0:
        step = min(n, 1 << 20)
        read(step)
        n -= step


def decode(buf) -> tuple:
    """Decode one frame from the start of ``buf``.

    Returns ``(frame, consumed)``; bytes past ``consumed`` are left alone so
    back-to-back frames can be decoded in a loop.
    """
    view = memoryview(buf)
    pos = 0

    def read(n):
        nonlocal pos
        if pos + n > len(view):
            raise TruncatedFrame(f"need {pos + n} bytes, have {len(view)}")
        chunk = bytes(view[pos:pos + n])
        pos += n
        return chunk

    frame = _parse(read)
    return frame, pos


def recv_exact(sock: socket.socket, n: int, started: bool = True) -> bytes:
    buf = bytearray(n)
    view = memoryview(buf)
    got = 0
    while got < n:
        k = sock.recv_into(view[got:], n - got)
        if k == 0:
            if got == 0 and not started:
                raise ConnectionClosed("peer closed the connection")
            raise TruncatedFrame(f"stream ended after {got} of {n} bytes")
        got += k
    return bytes(buf)


def recv_raw(sock: socket.socket) -> bytes:
    """Read exactly one frame's bytes, checking only what is needed to size it."""
    prefix = recv_exact(sock, _PREFIX.size, started=False)
    magic, version, _, _, id_len = _PREFIX.unpack(prefix)
    if magic != MAGIC:
        raise BadMagic(f"bad magic {magic!r}")
    if version != VERSION:
        raise UnsupportedVersion(f"wire version {version} (supported: {VERSION})")
    rest = recv_exact(sock, id_len + _SUFFIX.size)
    payload_len = _SUFFIX.unpack_from(rest, id_len)[-1]
    if payload_len > MAX_PAYLOAD:
        raise PayloadLengthMismatch(f"payload of {payload_len} bytes exceeds limit")
    return prefix + rest + recv_exact(sock, payload_len)


def recv_frame(sock: socket.socket) -> Frame:
    return decode(recv_raw(sock))[0]


# -- metadata carried in the model-id slot ---------------------------------

def response_meta(**fields) -> str:
    return ";".join(f"{k}={v}" for k, v in fields.items())


def parse_meta(text: str) -> dict:
    out = {}
    for part in filter(None, text.split(";")):
        key, _, value = part.partition("=")
        out[key] = value
    return out


def error_frame(request_id: int, reason: str, detail: str = "") -> bytes:
    text = f"{reason}:{detail}" if detail else reason
    raw = text.encode("utf-8")[:255]
    text = raw.decode("utf-8", errors="ignore")
    return encode(FrameType.ERROR, request_id=request_id, model_id=text)


def parse_error(frame: Frame) -> tuple:
    reason, _, detail = frame.model_id.partition(":")
    return reason, detail


def model_id_for(model_name: str, split_index: int, tl: bool = False) -> str:
    """Registry key the runtime uses for one (model, split, variant) tail."""
    return f"{model_name}@{split_index}{'+tl' if tl else ''}"
