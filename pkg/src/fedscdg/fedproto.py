"""Secure federated training protocol with masked encrypted averaging.

Each round a key-client is chosen by a shared PRF vote.  It publishes an
encrypted secret mask z; every client multiplies its fixed-point-encoded
parameters into that ciphertext and sends the result to the aggregator,
which can only add ciphertexts.  The key-client decrypts the aggregate,
divides the mask and the client count back out and distributes the plain
mean.  Full mode shares the whole parameter vector, Partly mode only the
encoder coordinates.
"""
from __future__ import annotations

import enum
import hashlib
import hmac
import random
import struct
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import channel, he
from .neuralnet import ModelParams, encoder_param_count, flatten, unflatten


class ProtocolError(Exception):
    pass


class LengthMismatch(ProtocolError):
    pass


class RoundMismatch(ProtocolError):
    pass


class MissingUpdate(ProtocolError):
    pass


class NonDivisible(ProtocolError):
    """Decrypted aggregate not divisible by the mask: tampering or overflow."""


class AbortRound(ProtocolError):
    pass


class AggregationMode(enum.Enum):
    FULL = "full"
    PARTLY = "partly"


@dataclass(frozen=True)
class LocalUpdate:
    round: int
    sender_id: int
    ciphertext: he.HECiphertext


@dataclass(frozen=True)
class GlobalUpdate:
    round: int
    weights: np.ndarray


@dataclass
class ProtocolConfig:
    n_clients: int
    rounds: int
    mode: AggregationMode = AggregationMode.FULL
    shared_seed: int = 0
    fraction_bits: int = 32
    security_param: int = 1024
    local_epochs: int = 1
    he_enabled: bool = True
    weight_bound: float = 64.0
    z_max: int = 2 ** 32


def vote_key_client(round_idx: int, n_clients: int, shared_seed: int) -> int:
    """PRF(seed, round) mod N; every party computes the same index."""
    if n_clients < 1:
        raise ValueError("need at least one client")
    key = shared_seed.to_bytes(8, "big", signed=False)
    msg = round_idx.to_bytes(8, "big", signed=False)
    digest = hmac.new(key, msg, hashlib.sha256).digest()
    return int.from_bytes(digest[:8], "big") % n_clients


def select_shared_params(p: ModelParams, mode: AggregationMode) -> np.ndarray:
    vec = flatten(p)
    if mode is AggregationMode.PARTLY:
        return vec[:encoder_param_count(p.dims)]
    return vec


def apply_update(p: ModelParams, update: GlobalUpdate, mode: AggregationMode) -> ModelParams:
    """Replace the shared coordinates with the global weights; non-shared
    coordinates are untouched."""
    vec = flatten(p)
    w = update.weights
    if mode is AggregationMode.PARTLY:
        count = encoder_param_count(p.dims)
        if w.shape != (count,):
            raise LengthMismatch(f"expected {count} encoder coordinates, got {w.shape}")
        vec = vec.copy()
        vec[:count] = w
    else:
        if w.shape != vec.shape:
            raise LengthMismatch(f"expected {vec.shape} coordinates, got {w.shape}")
        vec = w.copy()
    return unflatten(vec, p.dims, p.vocab)


def client_encrypt_update(w: np.ndarray, z_bar: he.HECiphertext, pk: he.PublicKey,
                          fraction_bits: int, round_idx: int, sender_id: int,
                          max_magnitude: Optional[int] = None) -> LocalUpdate:
    """Encode each weight to fixed point and multiply it into the encrypted
    mask, giving a ciphertext of z * round(w_j * 2^f) per coordinate."""
    ks = [he.encode_fixed(float(wj), fraction_bits, max_magnitude) for wj in w]
    ct = he.ct_broadcast_mul(z_bar, ks, pk, fraction_bits=fraction_bits)
    return LocalUpdate(round=round_idx, sender_id=sender_id, ciphertext=ct)


def aggregate(updates: list[LocalUpdate], pk: he.PublicKey,
              expected_n: int) -> he.HECiphertext:
    """Coordinatewise ciphertext sum; the aggregator never decrypts."""
    if len(updates) != expected_n:
        raise MissingUpdate(f"expected {expected_n} updates, got {len(updates)}")
    rounds = {u.round for u in updates}
    if len(rounds) != 1:
        raise RoundMismatch(f"updates from mixed rounds {sorted(rounds)}")
    lengths = {len(u.ciphertext) for u in updates}
    if len(lengths) != 1:
        raise LengthMismatch(f"updates of mixed lengths {sorted(lengths)}")
    acc = updates[0].ciphertext
    for u in updates[1:]:
        acc = he.ct_add(acc, u.ciphertext, pk)
    return acc


def keyclient_finalize(w_bar: he.HECiphertext, sk: he.SecretKey, z: int,
                       n_clients: int, fraction_bits: int,
                       round_idx: int) -> GlobalUpdate:
    """Decrypt, divide the mask out exactly, then recover the real mean."""
    if z == 0 or n_clients == 0:
        raise ValueError("mask and client count must be nonzero")
    raw = he.hdecrypt_vector(w_bar, sk)
    weights = np.empty(len(raw))
    scale = float(n_clients) * 2.0 ** fraction_bits
    for j, v in enumerate(raw):
        if v % z != 0:
            raise NonDivisible(f"coordinate {j}: {v} not divisible by mask")
        weights[j] = (v // z) / scale
    return GlobalUpdate(round=round_idx, weights=weights)


# ---------------------------------------------------------------------------
# end-to-end driver (in-process transport)

@dataclass
class ReceivedMessage:
    round: int
    msg_type: channel.MessageType
    sender: str
    payload: bytes


@dataclass
class Transcript:
    logs: dict[str, list[str]] = field(default_factory=dict)
    received: dict[str, list[ReceivedMessage]] = field(default_factory=dict)

    def record(self, round_idx: int, sender: str, receiver: str,
               msg_type: channel.MessageType, payload: bytes) -> None:
        line = f"r={round_idx} {sender}→{receiver} {msg_type.name} bytes={len(payload)}"
        self.logs.setdefault(sender, []).append(line)
        self.logs.setdefault(receiver, []).append(line)
        self.received.setdefault(receiver, []).append(
            ReceivedMessage(round_idx, msg_type, sender, payload))


@dataclass
class RoundRecord:
    round: int
    key_client: int
    global_weights: Optional[np.ndarray]
    aborted: bool = False


@dataclass
class _Party:
    name: str
    keys: channel.ChannelKeyPair


def _deliver(transcript: Transcript, round_idx: int, sender: _Party, receiver: _Party,
             msg_type: channel.MessageType, payload: bytes, sender_id: int) -> bytes:
    """Seal, frame, unframe, open: one message over the in-process wire."""
    sealed = channel.seal(payload, receiver.keys.pk).to_bytes()
    raw = channel.frame_encode(msg_type, round_idx, sender_id, sealed)
    frame, rest = channel.frame_decode(raw)
    assert not rest
    opened = channel.open_sealed(channel.SealedMessage.from_bytes(frame.payload),
                                 receiver.keys.sk)
    transcript.record(round_idx, sender.name, receiver.name, msg_type, opened)
    return opened


def run_protocol(
    cfg: ProtocolConfig,
    models: list[ModelParams],
    local_train: Optional[Callable[[int, ModelParams, int], ModelParams]] = None,
    drop_update: Optional[Callable[[int, int], bool]] = None,
    on_round_end: Optional[Callable[[int, list[ModelParams]], None]] = None,
) -> tuple[list[RoundRecord], Transcript, list[ModelParams]]:
    """Run m rounds among n clients and one aggregator over in-process
    channels.  Returns round records, the full transcript and the final
    client models.  drop_update(round, client) simulates a missing update,
    which aborts that round.  on_round_end(round, models) is called after
    every completed (non-aborted) round."""
    n = cfg.n_clients
    if len(models) != n:
        raise ValueError("one model per client required")
    models = list(models)
    clients = [_Party(f"client-{i + 1}", channel.keypair_gen()) for i in range(n)]
    aggregator = _Party("aggregator", channel.keypair_gen())
    transcript = Transcript()
    records: list[RoundRecord] = []
    fp = he.FixedPointCfg(cfg.fraction_bits)

    for round_idx in range(1, cfg.rounds + 1):
        kc = vote_key_client(round_idx, n, cfg.shared_seed)
        round_seed = hashlib.sha256(
            b"round" + cfg.shared_seed.to_bytes(8, "big") + round_idx.to_bytes(8, "big")
        ).digest()
        rng = random.Random(int.from_bytes(round_seed[:8], "big"))
        try:
            # clients announce their public keys to the key-client
            for i, client in enumerate(clients):
                if i == kc:
                    continue
                _deliver(transcript, round_idx, client, clients[kc],
                         channel.MessageType.PUBKEY, client.keys.public_bytes(), i + 1)

            if cfg.he_enabled:
                keypair = he.he_keygen(cfg.security_param, rng=rng)
                z = rng.randrange(2, cfg.z_max)
                fp.check_capacity(keypair.capacity, cfg.z_max, n, cfg.weight_bound)
                z_bar = he.henc(z, keypair.pk, cfg.fraction_bits, rng=rng)
                secret_blob = he.serialize_ciphertext(z_bar)
            else:
                keypair, z, z_bar = None, 1, None
                secret_blob = b"plain"
            for i, client in enumerate(clients):
                if i == kc:
                    continue
                _deliver(transcript, round_idx, clients[kc], client,
                         channel.MessageType.ENC_SECRET, secret_blob, kc + 1)

            # local training, then masked updates to the aggregator
            updates = []
            plain_updates = []
            max_mag = int(cfg.weight_bound * 2 ** cfg.fraction_bits)
            for i, client in enumerate(clients):
                if local_train is not None:
                    for _ in range(cfg.local_epochs):
                        models[i] = local_train(i, models[i], round_idx)
                if drop_update is not None and drop_update(round_idx, i):
                    continue
                w = select_shared_params(models[i], cfg.mode)
                if cfg.he_enabled:
                    update = client_encrypt_update(
                        w, z_bar, keypair.pk, cfg.fraction_bits, round_idx, i + 1,
                        max_magnitude=max_mag)
                    payload = he.serialize_ciphertext(update.ciphertext)
                    updates.append(update)
                else:
                    payload = struct.pack(f"<{w.size}d", *w)
                    plain_updates.append(w)
                _deliver(transcript, round_idx, client, aggregator,
                         channel.MessageType.LOCAL_UPDATE, payload, i + 1)

            if cfg.he_enabled:
                w_bar = aggregate(updates, keypair.pk, n)
                agg_blob = he.serialize_ciphertext(w_bar)
            else:
                if len(plain_updates) != n:
                    raise MissingUpdate(f"expected {n} updates, got {len(plain_updates)}")
                total = np.sum(plain_updates, axis=0)
                agg_blob = struct.pack(f"<{total.size}d", *total)
            _deliver(transcript, round_idx, aggregator, clients[kc],
                     channel.MessageType.GLOBAL_ENC, agg_blob, 0)

            if cfg.he_enabled:
                update = keyclient_finalize(w_bar, keypair.sk, z, n,
                                            cfg.fraction_bits, round_idx)
            else:
                update = GlobalUpdate(round=round_idx, weights=total / n)
            blob = struct.pack(f"<{update.weights.size}d", *update.weights)
            for i, client in enumerate(clients):
                if i != kc:
                    _deliver(transcript, round_idx, clients[kc], client,
                             channel.MessageType.GLOBAL_UPDATE, blob, kc + 1)
                models[i] = apply_update(models[i], update, cfg.mode)
            records.append(RoundRecord(round_idx, kc, update.weights.copy()))
            if on_round_end is not None:
                on_round_end(round_idx, models)
        except (MissingUpdate, NonDivisible) as exc:
            for i, client in enumerate(clients):
                transcript.record(round_idx, aggregator.name, client.name,
                                  channel.MessageType.ABORT, str(exc).encode())
            records.append(RoundRecord(round_idx, kc, None, aborted=True))
    return records, transcript, models
