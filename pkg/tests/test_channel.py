import os
import socket
import threading

import pytest

from fedscdg.channel import (
    AuthFailure,
    ChannelError,
    Frame,
    InProcConn,
    MessageType,
    SealedMessage,
    Truncated,
    UnknownType,
    WrongKey,
    decode_stream,
    frame_decode,
    frame_encode,
    keypair_gen,
    load_public_key,
    open_sealed,
    recv_frame,
    seal,
    send_frame,
)


@pytest.fixture(scope="module")
def keys():
    return keypair_gen()


class TestSeal:
    def test_distinct_public_keys(self):
        assert keypair_gen().public_bytes() != keypair_gen().public_bytes()

    def test_empty_payload(self, keys):
        assert open_sealed(seal(b"", keys.pk), keys.sk) == b""

    def test_single_zero_byte(self, keys):
        assert open_sealed(seal(b"\x00", keys.pk), keys.sk) == b"\x00"

    def test_random_round_trips(self, keys):
        for _ in range(100):
            payload = os.urandom(64)
            assert open_sealed(seal(payload, keys.pk), keys.sk) == payload

    def test_large_payload(self, keys):
        payload = os.urandom(1 << 20)
        assert open_sealed(seal(payload, keys.pk), keys.sk) == payload

    def test_fresh_session_keys(self, keys):
        a = seal(b"same message", keys.pk)
        b = seal(b"same message", keys.pk)
        assert a.ciphertext != b.ciphertext
        assert a.enc_key != b.enc_key

    def test_tamper_detection(self, keys):
        msg = seal(b"payload payload payload", keys.pk)
        for bit in range(0, len(msg.ciphertext) * 8, 37):
            flipped = bytearray(msg.ciphertext)
            flipped[bit // 8] ^= 1 << (bit % 8)
            with pytest.raises(AuthFailure):
                open_sealed(SealedMessage(msg.enc_key, msg.nonce, bytes(flipped)), keys.sk)

    def test_wrong_key(self, keys):
        other = keypair_gen()
        with pytest.raises((WrongKey, AuthFailure)):
            open_sealed(seal(b"secret", keys.pk), other.sk)

    def test_no_plaintext_leak(self, keys):
        for _ in range(200):
            payload = os.urandom(16)
            msg = seal(payload, keys.pk)
            assert payload not in msg.ciphertext
            assert payload not in msg.enc_key

    def test_sealed_wire_round_trip(self, keys):
        msg = seal(b"abc", keys.pk)
        assert SealedMessage.from_bytes(msg.to_bytes()) == msg

    def test_public_key_wire(self, keys):
        pk = load_public_key(keys.public_bytes())
        assert open_sealed(seal(b"hi", pk), keys.sk) == b"hi"


class TestFraming:
    def test_empty_hello_is_11_bytes(self):
        raw = frame_encode(MessageType.HELLO, 0, 0, b"")
        assert len(raw) == 11

    def test_round_trip(self):
        raw = frame_encode(MessageType.LOCAL_UPDATE, 7, 2, b"abc")
        frame, rest = frame_decode(raw)
        assert rest == b""
        assert frame == Frame(MessageType.LOCAL_UPDATE, 7, 2, b"abc")

    def test_random_round_trips(self):
        import random
        rng = random.Random(5)
        for _ in range(50):
            t = MessageType(rng.randint(1, 9))
            r, s = rng.randint(0, 2 ** 31 - 1), rng.randint(0, 65535)
            payload = os.urandom(rng.randint(0, 100))
            frame, rest = frame_decode(frame_encode(t, r, s, payload))
            assert (frame.msg_type, frame.round, frame.sender_id, frame.payload) == (t, r, s, payload)
            assert rest == b""

    def test_two_concatenated_frames(self):
        stream = (frame_encode(MessageType.HELLO, 1, 1, b"x")
                  + frame_encode(MessageType.ABORT, 2, 3, b"yy"))
        frames = decode_stream(stream)
        assert len(frames) == 2
        assert frames[0].payload == b"x"
        assert frames[1].msg_type is MessageType.ABORT

    def test_truncated(self):
        raw = frame_encode(MessageType.HELLO, 0, 0, b"payload")
        with pytest.raises(Truncated):
            frame_decode(raw[:-2])
        with pytest.raises(Truncated):
            frame_decode(raw[:3])

    def test_unknown_type(self):
        raw = bytearray(frame_encode(MessageType.HELLO, 0, 0, b""))
        raw[4] = 0xEE
        with pytest.raises(UnknownType):
            frame_decode(bytes(raw))

    def test_self_delimiting_partition_unique(self):
        frames = [frame_encode(MessageType.PUBKEY, i, i, os.urandom(i)) for i in range(5)]
        stream = b"".join(frames)
        decoded = decode_stream(stream)
        assert [f.round for f in decoded] == list(range(5))


class TestTransports:
    def test_inproc_round_trip(self):
        a, b = InProcConn().endpoints()
        a.send_frame(frame_encode(MessageType.HELLO, 1, 9, b"ping"))
        frame = b.recv_frame()
        assert frame.payload == b"ping" and frame.sender_id == 9
        with pytest.raises(Truncated):
            b.recv_frame()

    def test_socket_round_trip(self):
        server, client = socket.socketpair()
        payload = os.urandom(5000)
        raw = frame_encode(MessageType.GLOBAL_ENC, 3, 1, payload)

        def writer():
            send_frame(client, raw)
            client.close()

        t = threading.Thread(target=writer)
        t.start()
        frame = recv_frame(server)
        t.join()
        server.close()
        assert frame.payload == payload
        assert frame.msg_type is MessageType.GLOBAL_ENC
