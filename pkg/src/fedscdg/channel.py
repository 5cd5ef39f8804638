"""Sealed point-to-point messaging and the framed wire protocol.

Each party owns an asymmetric keypair and distributes the public half.
Payloads are sealed hybrid-style: a fresh AES-256-GCM session key per
message, encapsulated under the recipient's RSA public key.  Frames add a
length prefix, message type, round and sender id so a byte stream of
concatenated frames partitions uniquely.
"""
from __future__ import annotations

import enum
import os
import socket
import struct
from collections import deque
from dataclasses import dataclass

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import padding, rsa
from cryptography.hazmat.primitives.ciphers.aead import AESGCM


class ChannelError(Exception):
    pass


class AuthFailure(ChannelError):
    """Ciphertext failed authentication (tampered or wrong key)."""


class WrongKey(ChannelError):
    pass


class Truncated(ChannelError):
    pass


class UnknownType(ChannelError):
    pass


@dataclass(frozen=True)
class ChannelKeyPair:
    sk: rsa.RSAPrivateKey
    pk: rsa.RSAPublicKey

    def public_bytes(self) -> bytes:
        return self.pk.public_bytes(
            serialization.Encoding.DER,
            serialization.PublicFormat.SubjectPublicKeyInfo,
        )


def keypair_gen() -> ChannelKeyPair:
    sk = rsa.generate_private_key(public_exponent=65537, key_size=2048)
    return ChannelKeyPair(sk=sk, pk=sk.public_key())


def load_public_key(data: bytes) -> rsa.RSAPublicKey:
    return serialization.load_der_public_key(data)


_OAEP = padding.OAEP(
    mgf=padding.MGF1(algorithm=hashes.SHA256()),
    algorithm=hashes.SHA256(),
    label=None,
)


@dataclass(frozen=True)
class SealedMessage:
    enc_key: bytes
    nonce: bytes
    ciphertext: bytes

    def to_bytes(self) -> bytes:
        return struct.pack(">H", len(self.enc_key)) + self.enc_key + self.nonce + self.ciphertext

    @classmethod
    def from_bytes(cls, data: bytes) -> "SealedMessage":
        if len(data) < 2:
            raise Truncated("sealed message shorter than header")
        (klen,) = struct.unpack_from(">H", data, 0)
        if len(data) < 2 + klen + 12 + 16:
            raise Truncated("sealed message shorter than declared")
        enc_key = data[2:2 + klen]
        nonce = data[2 + klen:2 + klen + 12]
        return cls(enc_key, nonce, data[2 + klen + 12:])


def seal(payload: bytes, recipient_pk: rsa.RSAPublicKey) -> SealedMessage:
    """Encrypt payload so only the holder of the matching private key can
    read it; every call uses a fresh session key and nonce."""
    session_key = AESGCM.generate_key(256)
    nonce = os.urandom(12)
    ciphertext = AESGCM(session_key).encrypt(nonce, payload, None)
    enc_key = recipient_pk.encrypt(session_key, _OAEP)
    return SealedMessage(enc_key, nonce, ciphertext)


def open_sealed(msg: SealedMessage, sk: rsa.RSAPrivateKey) -> bytes:
    try:
        session_key = sk.decrypt(msg.enc_key, _OAEP)
    except ValueError as exc:
        raise WrongKey("session key decapsulation failed") from exc
    try:
        return AESGCM(session_key).decrypt(msg.nonce, msg.ciphertext, None)
    except InvalidTag as exc:
        raise AuthFailure("payload failed authentication") from exc


class MessageType(enum.IntEnum):
    HELLO = 0x01
    PUBKEY = 0x02
    ENC_SECRET = 0x03
    LOCAL_UPDATE = 0x04
    GLOBAL_ENC = 0x05
    GLOBAL_UPDATE = 0x06
    ROUND_BEGIN = 0x07
    ROUND_END = 0x08
    ABORT = 0x09


# length(4) covers everything after itself: type(1) + round(4) + sender(2) + payload
_HEADER = struct.Struct(">IBIH")


@dataclass(frozen=True)
class Frame:
    msg_type: MessageType
    round: int
    sender_id: int
    payload: bytes


def frame_encode(msg_type: MessageType, round: int, sender_id: int, payload: bytes) -> bytes:
    if len(payload) >= 2 ** 31:
        raise ValueError("payload too large to frame")
    return _HEADER.pack(len(payload) + 7, int(msg_type), round, sender_id) + payload


def frame_decode(data: bytes) -> tuple[Frame, bytes]:
    """Decode one frame from the head of data; returns (frame, remainder)."""
    if len(data) < _HEADER.size:
        raise Truncated(f"need {_HEADER.size} header bytes, have {len(data)}")
    length, code, round_, sender = _HEADER.unpack_from(data, 0)
    end = 4 + length
    if len(data) < end:
        raise Truncated(f"frame declares {length} bytes, have {len(data) - 4}")
    try:
        msg_type = MessageType(code)
    except ValueError as exc:
        raise UnknownType(f"unknown message type 0x{code:02x}") from exc
    return Frame(msg_type, round_, sender, data[_HEADER.size:end]), data[end:]


def decode_stream(data: bytes) -> list[Frame]:
    frames = []
    while data:
        frame, data = frame_decode(data)
        frames.append(frame)
    return frames


class InProcConn:
    """Pair of in-process endpoints carrying whole frames in FIFO order."""

    def __init__(self):
        self._a_to_b: deque[bytes] = deque()
        self._b_to_a: deque[bytes] = deque()

    def endpoints(self) -> tuple["InProcEndpoint", "InProcEndpoint"]:
        return (
            InProcEndpoint(self._a_to_b, self._b_to_a),
            InProcEndpoint(self._b_to_a, self._a_to_b),
        )


class InProcEndpoint:
    def __init__(self, out_q: deque, in_q: deque):
        self._out = out_q
        self._in = in_q

    def send_frame(self, data: bytes) -> None:
        self._out.append(data)

    def recv_frame(self) -> Frame:
        if not self._in:
            raise Truncated("no frame pending")
        frame, rest = frame_decode(self._in.popleft())
        if rest:
            raise ChannelError("in-process frames must arrive whole")
        return frame


def send_frame(sock: socket.socket, data: bytes) -> None:
    sock.sendall(data)


def recv_frame(sock: socket.socket) -> Frame:
    header = _recv_exact(sock, _HEADER.size)
    length = struct.unpack(">I", header[:4])[0]
    body = _recv_exact(sock, length - 7)
    frame, rest = frame_decode(header + body)
    assert not rest
    return frame


def _recv_exact(sock: socket.socket, count: int) -> bytes:
    buf = b""
    while len(buf) < count:
        chunk = sock.recv(count - len(buf))
        if not chunk:
            raise Truncated(f"connection closed with {count - len(buf)} bytes missing")
        buf += chunk
    return buf
