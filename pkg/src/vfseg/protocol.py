"""Wire protocol for the bottom/top exchange.

Framing: a fixed 16-byte little-endian header (magic, version, message
type, flags, payload length), the payload bytes, and a 16-byte
authentication tag when the encrypted flag is set. The payload length
field always counts the plaintext; the tag rides after it.

Encryption is ChaCha20-Poly1305 with the frame header as associated
data. Nonces are 96 bits: a 64-bit little-endian counter in bytes 0..7
and a direction byte at index 11. Each direction of a channel owns its
own strictly increasing counter, and every connection derives a fresh
subkey from the pre-shared key plus both parties' HELLO salts, so a
(key, nonce) pair can never repeat.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from enum import IntEnum

import numpy as np
from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from .errors import (
    AuthenticationError,
    ConfigurationError,
    NumericError,
    ProtocolError,
    StateError,
    ValidationError,
)

MAGIC = b"VFIS"
VERSION = 1

HEADER = struct.Struct("<4sHBBQ")
HEADER_LEN = HEADER.size
TAG_LEN = 16
KEY_LEN = 32
SALT_LEN = 16

FLAG_ENCRYPTED = 0x01
FLAG_ELEMENTS_F32 = 0x02

# Largest payload any message legitimately needs (checkpoint chunks cap
# at 1 MiB); anything bigger is a corrupt length field, not data.
MAX_PAYLOAD_LEN = 1 << 26

DIR_BOTTOM_TO_TOP = 0x01
DIR_TOP_TO_BOTTOM = 0x02

# Fixed-width prefix of activation/gradient payloads: epoch, step,
# batch count, feature count, all u32.
BATCH_HEADER = struct.Struct("<IIII")


class MsgType(IntEnum):
    HELLO = 1
    ALIGN_REQUEST = 2
    ALIGN_RESPONSE = 3
    BATCH_ACTIVATIONS = 4
    BATCH_GRADIENTS = 5
    METRICS_REPORT = 6
    CHECKPOINT_CHUNK = 7
    SHUTDOWN = 8
    ERROR = 9


_VALID_TYPES = frozenset(int(m) for m in MsgType)


@dataclass(frozen=True)
class Frame:
    """One decoded envelope. ``payload`` is still ciphertext+tag when
    the encrypted flag is set; SecureChannel.open_frame recovers the
    plaintext."""

    msg_type: MsgType
    flags: int
    payload: bytes

    @property
    def encrypted(self) -> bool:
        return bool(self.flags & FLAG_ENCRYPTED)

    @property
    def plaintext_len(self) -> int:
        return len(self.payload) - (TAG_LEN if self.encrypted else 0)


def pack_header(msg_type: MsgType, flags: int, payload_len: int) -> bytes:
    return HEADER.pack(MAGIC, VERSION, int(msg_type), flags, payload_len)


def encode_frame(msg_type: MsgType, payload: bytes, flags: int = 0) -> bytes:
    """Encode an unencrypted frame. Encrypted frames come from
    SecureChannel.seal_frame, which owns the nonce counter."""
    if flags & FLAG_ENCRYPTED:
        raise ValidationError("use SecureChannel.seal_frame for encrypted frames")
    if len(payload) > MAX_PAYLOAD_LEN:
        raise ValidationError(f"payload of {len(payload)} bytes exceeds the frame limit")
    return pack_header(msg_type, flags, len(payload)) + payload


def decode_frame(data: bytes | bytearray | memoryview,
                 offset: int = 0) -> tuple[Frame, int] | None:
    """Decode one frame starting at ``offset``.

    Returns (frame, next_offset), or None when the buffer holds only a
    prefix of a frame and more bytes are needed. Structural damage
    (magic, version, type, absurd length) raises ProtocolError carrying
    the offset of the offending field.
    """
    view = memoryview(data)
    if len(view) - offset < HEADER_LEN:
        return None
    magic, version, raw_type, flags, payload_len = HEADER.unpack_from(view, offset)
    if magic != MAGIC:
        raise ProtocolError(f"bad magic {magic!r}", offset=offset)
    if version != VERSION:
        raise ProtocolError(f"unsupported version {version}", offset=offset + 4)
    if raw_type not in _VALID_TYPES:
        raise ProtocolError(f"unknown message type {raw_type}", offset=offset + 6)
    if payload_len > MAX_PAYLOAD_LEN:
        raise ProtocolError(f"payload length {payload_len} exceeds limit",
                            offset=offset + 8)
    body_len = payload_len + (TAG_LEN if flags & FLAG_ENCRYPTED else 0)
    end = offset + HEADER_LEN + body_len
    if len(view) < end:
        return None
    payload = bytes(view[offset + HEADER_LEN:end])
    return Frame(MsgType(raw_type), flags, payload), end


def derive_channel_key(psk: bytes, salt_bottom: bytes, salt_top: bytes) -> bytes:
    """Per-connection subkey, so reconnects never reuse a (key, nonce) pair."""
    if len(psk) != KEY_LEN:
        raise ConfigurationError(f"pre-shared key must be {KEY_LEN} bytes, got {len(psk)}")
    if len(salt_bottom) != SALT_LEN or len(salt_top) != SALT_LEN:
        raise ProtocolError("HELLO salt must be 16 bytes")
    kdf = HKDF(algorithm=hashes.SHA256(), length=KEY_LEN,
               salt=salt_bottom + salt_top, info=b"vfseg-channel-v1")
    return kdf.derive(psk)


def make_nonce(counter: int, direction: int) -> bytes:
    if not 0 <= counter < 1 << 64:
        raise StateError("nonce counter exhausted")
    nonce = bytearray(12)
    nonce[0:8] = struct.pack("<Q", counter)
    nonce[11] = direction
    return bytes(nonce)


class SecureChannel:
    """Sealing/opening context for one connection.

    Owns both direction counters. Counters only move forward; an
    explicit attempt to seal with an already-used counter is a fatal
    local error rather than a silent nonce reuse.
    """

    def __init__(self, key: bytes, send_direction: int, recv_direction: int) -> None:
        if len(key) != KEY_LEN:
            raise ConfigurationError(f"channel key must be {KEY_LEN} bytes, got {len(key)}")
        if send_direction == recv_direction:
            raise ConfigurationError("send and recv directions must differ")
        self._aead = ChaCha20Poly1305(key)
        self._send_direction = send_direction
        self._recv_direction = recv_direction
        self._send_counter = 0
        self._recv_counter = 0

    @property
    def send_counter(self) -> int:
        return self._send_counter

    @property
    def recv_counter(self) -> int:
        return self._recv_counter

    def seal_frame(self, msg_type: MsgType, plaintext: bytes,
                   extra_flags: int = 0, counter: int | None = None) -> bytes:
        if len(plaintext) > MAX_PAYLOAD_LEN:
            raise ValidationError(f"payload of {len(plaintext)} bytes exceeds the frame limit")
        if counter is None:
            counter = self._send_counter
        elif counter < self._send_counter:
            raise StateError(f"nonce counter {counter} already used (next is {self._send_counter})")
        flags = FLAG_ENCRYPTED | (extra_flags & ~FLAG_ENCRYPTED)
        header = pack_header(msg_type, flags, len(plaintext))
        nonce = make_nonce(counter, self._send_direction)
        sealed = self._aead.encrypt(nonce, plaintext, header)
        self._send_counter = counter + 1
        return header + sealed

    def open_frame(self, frame: Frame) -> bytes:
        if not frame.encrypted:
            raise ProtocolError("frame is not encrypted")
        header = pack_header(frame.msg_type, frame.flags, frame.plaintext_len)
        nonce = make_nonce(self._recv_counter, self._recv_direction)
        try:
            plaintext = self._aead.decrypt(nonce, frame.payload, header)
        except InvalidTag as exc:
            raise AuthenticationError(
                f"authentication failed on {frame.msg_type.name} frame "
                f"(recv counter {self._recv_counter})") from exc
        self._recv_counter += 1
        return plaintext


def bottom_channel(key: bytes) -> SecureChannel:
    return SecureChannel(key, DIR_BOTTOM_TO_TOP, DIR_TOP_TO_BOTTOM)


def top_channel(key: bytes) -> SecureChannel:
    return SecureChannel(key, DIR_TOP_TO_BOTTOM, DIR_BOTTOM_TO_TOP)


@dataclass(frozen=True)
class BatchPayload:
    """Body of BATCH_ACTIVATIONS and BATCH_GRADIENTS messages.

    ``elements`` is (B, F) float64: compressed boundary features going
    up, the loss gradient w.r.t. those features coming down.
    """

    epoch: int
    step: int
    ids: tuple[int, ...]
    elements: np.ndarray

    def __post_init__(self) -> None:
        if self.elements.ndim != 2:
            raise ValidationError(f"elements must be 2-d, got shape {self.elements.shape}")
        if len(self.ids) != self.elements.shape[0]:
            raise ValidationError(
                f"{len(self.ids)} ids for {self.elements.shape[0]} element rows")
        if len(self.ids) == 0:
            raise ValidationError("empty batch payload")
        if any(b <= a for a, b in zip(self.ids, self.ids[1:])):
            raise ValidationError("sample ids must be strictly increasing")


def encode_batch_payload(p: BatchPayload, *, f32: bool = False) -> bytes:
    batch, feat = p.elements.shape
    parts = [
        BATCH_HEADER.pack(p.epoch, p.step, batch, feat),
        np.asarray(p.ids, dtype="<u8").tobytes(),
        np.ascontiguousarray(p.elements, dtype="<f4" if f32 else "<f8").tobytes(),
    ]
    return b"".join(parts)


def parse_batch_payload(data: bytes, flags: int = 0) -> BatchPayload:
    if len(data) < BATCH_HEADER.size:
        raise ProtocolError(f"batch payload truncated at {len(data)} bytes", offset=0)
    epoch, step, batch, feat = BATCH_HEADER.unpack_from(data)
    if batch == 0 or feat == 0:
        raise ProtocolError(f"degenerate batch payload ({batch}x{feat})", offset=8)
    elem_width = 4 if flags & FLAG_ELEMENTS_F32 else 8
    expected = BATCH_HEADER.size + 8 * batch + elem_width * batch * feat
    if len(data) != expected:
        raise ProtocolError(
            f"batch payload is {len(data)} bytes, expected {expected} "
            f"for {batch}x{feat}", offset=0)
    ids_off = BATCH_HEADER.size
    elems_off = ids_off + 8 * batch
    ids = np.frombuffer(data, dtype="<u8", count=batch, offset=ids_off)
    dtype = "<f4" if flags & FLAG_ELEMENTS_F32 else "<f8"
    elements = np.frombuffer(data, dtype=dtype, count=batch * feat, offset=elems_off)
    elements = elements.astype(np.float64).reshape(batch, feat)
    if not np.all(np.isfinite(elements)):
        raise NumericError("non-finite element in batch payload")
    try:
        return BatchPayload(epoch, step, tuple(int(i) for i in ids), elements)
    except ValidationError as exc:
        raise ProtocolError(str(exc), offset=ids_off) from exc


def batch_payload_size(batch: int, features: int, *, f32: bool = False) -> int:
    """Exact payload byte count: 16-byte header, 8 bytes per id, then
    the element block."""
    return BATCH_HEADER.size + 8 * batch + (4 if f32 else 8) * batch * features


def encode_hello(role: str, preset: str, batch_size: int, seed: int,
                 wire_float: str, salt: bytes) -> bytes:
    if wire_float not in ("f64", "f32"):
        raise ConfigurationError(f"wire_float must be f64 or f32, got {wire_float!r}")
    if len(salt) != SALT_LEN:
        raise ValidationError("HELLO salt must be 16 bytes")
    body = {
        "role": role,
        "preset": preset,
        "batch_size": batch_size,
        "seed": seed,
        "wire_float": wire_float,
        "salt": salt.hex(),
    }
    return json.dumps(body, sort_keys=True, separators=(",", ":")).encode()


def parse_hello(payload: bytes) -> dict:
    try:
        body = json.loads(payload.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolError(f"malformed HELLO payload: {exc}") from exc
    required = {"role", "preset", "batch_size", "seed", "wire_float", "salt"}
    missing = required - body.keys()
    if missing:
        raise ProtocolError(f"HELLO missing fields: {sorted(missing)}")
    try:
        body["salt"] = bytes.fromhex(body["salt"])
    except ValueError as exc:
        raise ProtocolError("HELLO salt is not valid hex") from exc
    if len(body["salt"]) != SALT_LEN:
        raise ProtocolError("HELLO salt must be 16 bytes")
    return body


def check_hello_agreement(mine: dict, theirs: dict) -> None:
    """Both parties must train the same model the same way; any
    disagreement aborts before a single batch moves."""
    for field in ("preset", "batch_size", "seed", "wire_float"):
        if mine[field] != theirs[field]:
            raise ProtocolError(
                f"HELLO mismatch on {field}: ours={mine[field]!r} theirs={theirs[field]!r}")
    if mine["role"] == theirs["role"]:
        raise ProtocolError(f"both parties claim role {mine['role']!r}")


def encode_id_list(ids) -> bytes:
    arr = np.asarray(sorted(int(i) for i in ids), dtype="<u8")
    return struct.pack("<Q", arr.size) + arr.tobytes()


def parse_id_list(payload: bytes) -> list[int]:
    if len(payload) < 8:
        raise ProtocolError("id list payload truncated", offset=0)
    (count,) = struct.unpack_from("<Q", payload)
    expected = 8 + 8 * count
    if len(payload) != expected:
        raise ProtocolError(
            f"id list payload is {len(payload)} bytes, expected {expected}", offset=0)
    ids = np.frombuffer(payload, dtype="<u8", offset=8).tolist()
    return [int(i) for i in ids]


def encode_error(code: str, message: str) -> bytes:
    return json.dumps({"code": code, "message": message},
                      sort_keys=True, separators=(",", ":")).encode()


def parse_error(payload: bytes) -> tuple[str, str]:
    try:
        body = json.loads(payload.decode("utf-8"))
        return str(body["code"]), str(body["message"])
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ProtocolError(f"malformed ERROR payload: {exc}") from exc


CHUNK_HEADER = struct.Struct("<II")
MAX_CHUNK_BYTES = 1 << 20


def encode_checkpoint_chunk(index: int, total: int, blob: bytes) -> bytes:
    if len(blob) > MAX_CHUNK_BYTES:
        raise ValidationError(f"checkpoint chunk of {len(blob)} bytes exceeds 1 MiB")
    if not 0 <= index < total:
        raise ValidationError(f"chunk index {index} outside 0..{total - 1}")
    return CHUNK_HEADER.pack(index, total) + blob


def parse_checkpoint_chunk(payload: bytes) -> tuple[int, int, bytes]:
    if len(payload) < CHUNK_HEADER.size:
        raise ProtocolError("checkpoint chunk truncated", offset=0)
    index, total = CHUNK_HEADER.unpack_from(payload)
    if total == 0 or index >= total:
        raise ProtocolError(f"chunk index {index} outside 0..{total - 1}", offset=0)
    return index, total, payload[CHUNK_HEADER.size:]


def entity_align(ids_a, ids_b) -> list[int]:
    """Sorted intersection of the two parties' sample id sets.

    Pure and symmetric; duplicates within either party indicate a
    corrupt store and are rejected rather than silently deduplicated.
    """
    list_a = [int(i) for i in ids_a]
    list_b = [int(i) for i in ids_b]
    set_a = set(list_a)
    set_b = set(list_b)
    if len(set_a) != len(list_a):
        raise ValidationError("duplicate sample ids on side a")
    if len(set_b) != len(list_b):
        raise ValidationError("duplicate sample ids on side b")
    return sorted(set_a & set_b)
