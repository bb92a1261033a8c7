"""Signed UDP pings and verifiable RTT transcripts.

Wire format (network byte order, every field fixed width except the
signature)::

    kind(1) | challenge_id(16) | nonce(16) | seq(2) | key_id(8) | sig_len(2) | sig

``kind`` is 1 for a challenge and 2 for a response. ``key_id`` is the first
8 bytes of SHA-256 over the sender's raw Ed25519 public key. The signature
covers the 43 bytes from ``kind`` through ``key_id``. A response echoes the
challenge's ``challenge_id``, ``nonce`` and ``seq`` and is signed by the
responder.
"""

from __future__ import annotations

import hashlib
import logging
import os
import socket
import struct
import threading
import time
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Union

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey, Ed25519PublicKey

log = logging.getLogger(__name__)

CHALLENGE = 1
RESPONSE = 2
HEADER = struct.Struct("!B16s16sH8s")
SIG_LEN = struct.Struct("!H")
DEFAULT_Q = 20
DEFAULT_SPACING = 0.05
NONCE_CACHE_SIZE = 4096

Endpoint = tuple[str, int]


class MalformedPacket(ValueError):
    pass


class NoResponses(Exception):
    """No signature-valid response came back from the target."""


def key_id(public: bytes) -> bytes:
    return hashlib.sha256(public).digest()[:8]


@dataclass(frozen=True)
class KeyPair:
    public: bytes
    secret: bytes = field(repr=False)

    @classmethod
    def generate(cls) -> "KeyPair":
        sk = Ed25519PrivateKey.generate()
        return cls.from_secret(sk.private_bytes_raw())

    @classmethod
    def from_secret(cls, secret: bytes) -> "KeyPair":
        sk = Ed25519PrivateKey.from_private_bytes(secret)
        return cls(sk.public_key().public_bytes_raw(), bytes(secret))

    @property
    def key_id(self) -> bytes:
        return key_id(self.public)

    def sign(self, message: bytes) -> bytes:
        return Ed25519PrivateKey.from_private_bytes(self.secret).sign(message)

    def to_dict(self) -> dict:
        return {"public": self.public.hex(), "secret": self.secret.hex(), "key_id": self.key_id.hex()}

    @classmethod
    def from_dict(cls, d: dict) -> "KeyPair":
        kp = cls.from_secret(bytes.fromhex(d["secret"]))
        if "public" in d and bytes.fromhex(d["public"]) != kp.public:
            raise ValueError("public key does not match secret")
        return kp


def verify_signature(public: bytes, signature: bytes, message: bytes) -> bool:
    try:
        Ed25519PublicKey.from_public_bytes(public).verify(signature, message)
    except (InvalidSignature, ValueError):
        return False
    return True


@dataclass(frozen=True)
class PingPacket:
    kind: int
    challenge_id: bytes
    nonce: bytes
    seq: int
    sender_key_id: bytes
    signature: bytes = b""

    def signed_part(self) -> bytes:
        return HEADER.pack(self.kind, self.challenge_id, self.nonce, self.seq, self.sender_key_id)

    def encode(self) -> bytes:
        return self.signed_part() + SIG_LEN.pack(len(self.signature)) + self.signature

    @classmethod
    def decode(cls, data: bytes) -> "PingPacket":
        if len(data) < HEADER.size + SIG_LEN.size:
            raise MalformedPacket(f"short packet ({len(data)} bytes)")
        kind, cid, nonce, seq, kid = HEADER.unpack_from(data)
        (n,) = SIG_LEN.unpack_from(data, HEADER.size)
        sig = data[HEADER.size + SIG_LEN.size:]
        if kind not in (CHALLENGE, RESPONSE):
            raise MalformedPacket(f"unknown kind {kind}")
        if len(sig) != n:
            raise MalformedPacket(f"signature length {len(sig)} != declared {n}")
        return cls(kind, cid, nonce, seq, kid, sig)

    def signed_by(self, keys: KeyPair) -> "PingPacket":
        unsigned = PingPacket(self.kind, self.challenge_id, self.nonce, self.seq, keys.key_id)
        return PingPacket(unsigned.kind, unsigned.challenge_id, unsigned.nonce, unsigned.seq,
                          unsigned.sender_key_id, keys.sign(unsigned.signed_part()))

    def verify(self, public: bytes) -> bool:
        return self.sender_key_id == key_id(public) and verify_signature(
            public, self.signature, self.signed_part())

    def answers(self, challenge: "PingPacket") -> bool:
        return (self.kind == RESPONSE and challenge.kind == CHALLENGE
                and self.challenge_id == challenge.challenge_id
                and self.nonce == challenge.nonce and self.seq == challenge.seq)


@dataclass(frozen=True)
class PingTranscript:
    challenger_id: str
    waldo_id: str
    challenge_id: bytes
    packets: tuple[tuple[PingPacket, PingPacket, float], ...]
    min_rtt: float
    q: int
    lost: int = 0
    invalid: int = 0

    @property
    def rtts(self) -> list[float]:
        return [rtt for _, _, rtt in self.packets]

    def to_dict(self) -> dict:
        return {
            "challenger_id": self.challenger_id,
            "waldo_id": self.waldo_id,
            "challenge_id": self.challenge_id.hex(),
            "packets": [[s.encode().hex(), r.encode().hex(), rtt] for s, r, rtt in self.packets],
            "min_rtt_ms": self.min_rtt,
            "q": self.q,
            "lost": self.lost,
            "invalid": self.invalid,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PingTranscript":
        packets = tuple((PingPacket.decode(bytes.fromhex(s)), PingPacket.decode(bytes.fromhex(r)),
                         float(rtt)) for s, r, rtt in d["packets"])
        return cls(d["challenger_id"], d["waldo_id"], bytes.fromhex(d["challenge_id"]), packets,
                   float(d["min_rtt_ms"]), int(d["q"]), int(d.get("lost", 0)),
                   int(d.get("invalid", 0)))


def verify_transcript(t: PingTranscript, challenger_pub: bytes, waldo_pub: bytes) -> bool:
    """Signatures, nonce/seq pairing and the reported minimum all check out."""
    if not t.packets or len(t.packets) > t.q:
        return False
    seen = set()
    for sent, recv, rtt in t.packets:
        if sent.kind != CHALLENGE or sent.challenge_id != t.challenge_id:
            return False
        if not recv.answers(sent) or not (0 <= sent.seq < t.q) or sent.seq in seen:
            return False
        if not rtt > 0:
            return False
        if not sent.verify(challenger_pub) or not recv.verify(waldo_pub):
            return False
        seen.add(sent.seq)
    return t.min_rtt == min(t.rtts)


class NonceCache:
    """Bounded set of recently seen nonces; oldest evicted first."""

    def __init__(self, size: int = NONCE_CACHE_SIZE):
        self.size = size
        self._seen: OrderedDict[bytes, None] = OrderedDict()
        self._lock = threading.Lock()

    def add(self, nonce: bytes) -> bool:
        """Record ``nonce``; False if it was already present."""
        with self._lock:
            if nonce in self._seen:
                return False
            self._seen[nonce] = None
            if len(self._seen) > self.size:
                self._seen.popitem(last=False)
            return True


KeyLookup = Union[Mapping[bytes, bytes], Callable[[bytes], Optional[bytes]]]
DelaySpec = Union[float, Callable[[PingPacket, Endpoint], float]]


class Responder:
    """Answers signed challenges over UDP.

    ``known_keys`` maps a sender key id to its public key (or is a callable
    doing the lookup). ``delay`` (seconds, or a callable of packet and peer
    address) holds each response back, modelling a Waldo inflating RTTs.
    ``mutate`` rewrites outgoing bytes; both are test and simulation hooks.
    """

    def __init__(self, keys: KeyPair, known_keys: KeyLookup, host: str = "127.0.0.1",
                 port: int = 0, delay: DelaySpec = 0.0,
                 mutate: Optional[Callable[[bytes, PingPacket], bytes]] = None):
        self.keys = keys
        self._lookup = known_keys if callable(known_keys) else known_keys.get
        self.delay = delay
        self.mutate = mutate
        self.nonces = NonceCache()
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self.sock.bind((host, port))
        self.sock.settimeout(0.2)
        self._stop = threading.Event()
        self._thread: Optional[threading.Thread] = None
        self.answered = 0
        self.ignored = 0

    @property
    def endpoint(self) -> Endpoint:
        return self.sock.getsockname()[:2]

    def handle(self, data: bytes, addr: Endpoint) -> Optional[bytes]:
        """Return the encoded response for a datagram, or None to ignore it."""
        try:
            pkt = PingPacket.decode(data)
        except MalformedPacket:
            return None
        if pkt.kind != CHALLENGE:
            return None
        pub = self._lookup(pkt.sender_key_id)
        if pub is None or not pkt.verify(pub):
            return None
        if not self.nonces.add(pkt.nonce):
            return None
        resp = PingPacket(RESPONSE, pkt.challenge_id, pkt.nonce, pkt.seq, self.keys.key_id)
        out = resp.signed_by(self.keys).encode()
        return self.mutate(out, pkt) if self.mutate else out

    def serve_forever(self) -> None:
        while not self._stop.is_set():
            try:
                data, addr = self.sock.recvfrom(2048)
            except socket.timeout:
                continue
            except OSError:
                break
            out = self.handle(data, addr)
            if out is None:
                self.ignored += 1
                continue
            wait = self.delay(PingPacket.decode(data), addr) if callable(self.delay) else self.delay
            if wait > 0:
                threading.Timer(wait, self._send, (out, addr)).start()
            else:
                self._send(out, addr)

    def _send(self, out: bytes, addr: Endpoint) -> None:
        try:
            self.sock.sendto(out, addr)
            self.answered += 1
        except OSError:
            pass

    def start(self) -> "Responder":
        self._thread = threading.Thread(target=self.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self._stop.set()
        if self._thread:
            self._thread.join(timeout=2)
        self.sock.close()

    def __enter__(self) -> "Responder":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()


def respond(listen: Endpoint, keys: KeyPair, known_keys: KeyLookup, **kwargs) -> None:
    """Blocking serving loop on ``listen``."""
    Responder(keys, known_keys, listen[0], listen[1], **kwargs).serve_forever()


def measure(target: Endpoint, keys: KeyPair, waldo_pub: bytes, q: int = DEFAULT_Q,
            timeout: float = 1.0, challenge_id: Optional[bytes] = None,
            challenger_id: str = "", waldo_id: str = "",
            spacing: float = DEFAULT_SPACING) -> PingTranscript:
    """Send ``q`` signed challenges to ``target`` and keep the matched, verified replies.

    ``timeout`` and ``spacing`` are seconds; RTTs are reported in ms.
    Raises ``NoResponses`` if nothing usable came back.
    """
    if q < 1:
        raise ValueError("q must be >= 1")
    if timeout <= 0:
        raise ValueError("timeout must be positive")
    cid = challenge_id if challenge_id is not None else os.urandom(16)
    if len(cid) != 16:
        raise ValueError("challenge_id must be 16 bytes")
    packets = []
    lost = invalid = 0
    with socket.socket(socket.AF_INET, socket.SOCK_DGRAM) as sock:
        for seq in range(q):
            if seq and spacing > 0:
                time.sleep(spacing)
            sent = PingPacket(CHALLENGE, cid, os.urandom(16), seq, keys.key_id).signed_by(keys)
            wire = sent.encode()
            t0 = time.perf_counter()
            sock.sendto(wire, target)
            deadline = t0 + timeout
            got = None
            while got is None:
                remaining = deadline - time.perf_counter()
                if remaining <= 0:
                    break
                sock.settimeout(remaining)
                try:
                    data, _ = sock.recvfrom(2048)
                except socket.timeout:
                    break
                t1 = time.perf_counter()
                try:
                    recv = PingPacket.decode(data)
                except MalformedPacket:
                    invalid += 1
                    continue
                if not recv.answers(sent):
                    continue  # stale reply to an earlier seq
                if not recv.verify(waldo_pub):
                    invalid += 1
                    continue
                got = (sent, recv, (t1 - t0) * 1000.0)
            if got is None:
                lost += 1
            else:
                packets.append(got)
    if not packets:
        raise NoResponses(f"no valid responses from {target} ({lost} lost, {invalid} invalid)")
    return PingTranscript(challenger_id, waldo_id, cid, tuple(packets),
                          min(rtt for _, _, rtt in packets), q, lost, invalid)
