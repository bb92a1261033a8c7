"""Challenge coordination: registry, challenges, proof bundles.

Every state change is an event appended to ``events.jsonl`` in the state
directory and applied through the same code path on replay, so a restarted
coordinator rebuilds exactly the registry and challenge history it had.
Finished bundles are written under their content digest.

The coordinator orchestrates but is not trusted for results: a bundle
carries every transcript and mapping needed to recompute the uncertainty,
and ``verify_bundle`` does so without any coordinator state.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Union

from . import netprobe
from .geo import GeoPoint, distance
from .netprobe import PingTranscript, verify_signature, verify_transcript
from .poig import Disqualified, MonotoneMapping, evaluate
from .trig import ProvingConfig, UncertaintyProfile, prove

log = logging.getLogger(__name__)

BUNDLE_VERSION = "geoproof-bundle/1"
DEFAULT_TTL = 60.0
DEFAULT_X_LIMIT = 2000.0


class CoordinatorError(Exception):
    pass


class UnknownChallenger(CoordinatorError):
    pass


class BadSignature(CoordinatorError):
    pass


class StaleTimestamp(CoordinatorError):
    pass


class NoChallengersInRange(CoordinatorError):
    pass


class WaldoUnknown(CoordinatorError):
    pass


class ChallengeInProgress(CoordinatorError):
    pass


class UnknownChallenge(CoordinatorError):
    pass


class InvalidTranscript(CoordinatorError):
    pass


class NotSelected(CoordinatorError):
    pass


class DuplicateSubmission(CoordinatorError):
    pass


class ChallengeClosed(CoordinatorError):
    pass


class QuorumNotMet(CoordinatorError):
    pass


class ChallengeNotReady(CoordinatorError):
    """Estimates are still missing and the timer has not expired."""


class AlreadyFinalized(CoordinatorError):
    pass


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True,
                      allow_nan=False)


def digest_of(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()


def quorum(beta: float, n: int) -> int:
    return int(math.ceil((1.0 - beta) * n - 1e-9))


def heartbeat_message(challenger_id: str, timestamp_ms: int) -> bytes:
    return f"heartbeat|{challenger_id}|{int(timestamp_ms)}".encode()


def registration_message(role: str, record: dict) -> bytes:
    return f"register|{role}|".encode() + canonical_json(record).encode()


@dataclass
class ChallengerRecord:
    id: str
    public_key: bytes
    location: GeoPoint
    mapping: MonotoneMapping
    last_heartbeat: float
    last_timestamp_ms: int = -1
    endpoint: Optional[tuple[str, int]] = None

    def status(self, now: float, ttl: float) -> str:
        return "active" if now - self.last_heartbeat <= ttl else "stale"

    def snapshot(self) -> dict:
        return {"public_key": self.public_key.hex(), "location": self.location.to_list(),
                "mapping_digest": self.mapping.digest()}


@dataclass
class WaldoRecord:
    id: str
    public_key: bytes
    endpoint: Optional[tuple[str, int]] = None
    last_heartbeat: float = 0.0
    last_timestamp_ms: int = -1


@dataclass
class Estimate:
    d_hat: float
    status: str  # measured | disqualified | missing
    transcript: Optional[PingTranscript] = None


@dataclass
class Challenge:
    id: str
    waldo_id: str
    claimed: GeoPoint
    selected: list[str]
    beta: float
    tau: float  # ms
    started_at: float
    state: str = "collecting"
    estimates: dict[str, Estimate] = field(default_factory=dict)
    bundle_digest: Optional[str] = None

    @property
    def id_bytes(self) -> bytes:
        return bytes.fromhex(self.id)

    def expired(self, now: float) -> bool:
        return (now - self.started_at) * 1000.0 >= self.tau


class Coordinator:
    def __init__(self, state_dir: Optional[Union[str, Path]] = None,
                 clock: Callable[[], float] = time.time, heartbeat_ttl: float = DEFAULT_TTL,
                 x_limit: float = DEFAULT_X_LIMIT, grid_size: int = 360,
                 notifier: Optional[Callable[[Challenge], None]] = None):
        self.clock = clock
        self.ttl = heartbeat_ttl
        self.x_limit = x_limit
        self.grid_size = grid_size
        self.notifier = notifier
        self.challengers: dict[str, ChallengerRecord] = {}
        self.waldos: dict[str, WaldoRecord] = {}
        self.challenges: dict[str, Challenge] = {}
        self.bundles: dict[str, dict] = {}
        self._lock = threading.RLock()
        self.state_dir = Path(state_dir) if state_dir else None
        self._log = None
        if self.state_dir:
            (self.state_dir / "bundles").mkdir(parents=True, exist_ok=True)
            self._replay()
            self._log = open(self.state_dir / "events.jsonl", "a", encoding="utf-8")

    # persistence

    def _replay(self) -> None:
        path = self.state_dir / "events.jsonl"
        if not path.exists():
            return
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    self._apply(json.loads(line))
        for ch in self.challenges.values():
            if ch.bundle_digest:
                self.bundles[ch.id] = json.loads(
                    (self.state_dir / "bundles" / f"{ch.bundle_digest}.json").read_text())
        log.info("replayed %d challengers, %d challenges", len(self.challengers), len(self.challenges))

    def _record(self, event: dict) -> None:
        self._apply(event)
        if self._log:
            self._log.write(canonical_json(event) + "\n")
            self._log.flush()
            os.fsync(self._log.fileno())

    def close(self) -> None:
        if self._log:
            self._log.close()
            self._log = None

    def _apply(self, ev: dict) -> None:
        kind = ev["type"]
        if kind == "register_challenger":
            self.challengers[ev["id"]] = ChallengerRecord(
                ev["id"], bytes.fromhex(ev["public_key"]), GeoPoint.from_list(ev["location"]),
                MonotoneMapping.from_dict(ev["mapping"]), ev["at"], -1,
                tuple(ev["endpoint"]) if ev.get("endpoint") else None)
        elif kind == "register_waldo":
            self.waldos[ev["id"]] = WaldoRecord(
                ev["id"], bytes.fromhex(ev["public_key"]),
                tuple(ev["endpoint"]) if ev.get("endpoint") else None, ev["at"])
        elif kind == "heartbeat":
            rec = self.challengers.get(ev["id"]) or self.waldos[ev["id"]]
            rec.last_heartbeat = ev["at"]
            rec.last_timestamp_ms = ev["timestamp_ms"]
        elif kind == "initiate":
            self.challenges[ev["id"]] = Challenge(
                ev["id"], ev["waldo_id"], GeoPoint.from_list(ev["claimed"]), list(ev["selected"]),
                ev["beta"], ev["tau_ms"], ev["at"])
        elif kind == "submit":
            ch = self.challenges[ev["challenge_id"]]
            ch.estimates[ev["challenger_id"]] = Estimate(
                ev["d_hat"], ev["status"], PingTranscript.from_dict(ev["transcript"]))
        elif kind == "finalize":
            ch = self.challenges[ev["challenge_id"]]
            for cid in ch.selected:
                ch.estimates.setdefault(cid, Estimate(0.0, "missing"))
            ch.state = "proven"
            ch.bundle_digest = ev["digest"]
        elif kind == "fail":
            self.challenges[ev["challenge_id"]].state = "failed"
        else:
            raise ValueError(f"unknown event type {kind}")

    # registry

    def register_challenger(self, challenger_id: str, public_key: bytes, location: GeoPoint,
                            mapping: MonotoneMapping, endpoint=None,
                            signature: Optional[bytes] = None) -> None:
        record = {"id": challenger_id, "public_key": public_key.hex(),
                  "location": location.to_list(), "mapping": mapping.to_dict()}
        if signature is not None and not verify_signature(
                public_key, signature, registration_message("challenger", record)):
            raise BadSignature(f"registration for {challenger_id}")
        with self._lock:
            self._record({"type": "register_challenger", **record, "at": self.clock(),
                          "endpoint": list(endpoint) if endpoint else None})

    def register_waldo(self, waldo_id: str, public_key: bytes, endpoint=None,
                       signature: Optional[bytes] = None) -> None:
        record = {"id": waldo_id, "public_key": public_key.hex(),
                  "endpoint": list(endpoint) if endpoint else None}
        if signature is not None and not verify_signature(
                public_key, signature, registration_message("waldo", record)):
            raise BadSignature(f"registration for {waldo_id}")
        with self._lock:
            self._record({"type": "register_waldo", **record, "at": self.clock()})

    def heartbeat(self, node_id: str, timestamp_ms: int, signature: bytes) -> dict:
        with self._lock:
            rec = self.challengers.get(node_id) or self.waldos.get(node_id)
            if rec is None:
                raise UnknownChallenger(node_id)
            if not verify_signature(rec.public_key, signature, heartbeat_message(node_id, timestamp_ms)):
                raise BadSignature(f"heartbeat from {node_id}")
            if timestamp_ms <= rec.last_timestamp_ms:
                raise StaleTimestamp(f"{timestamp_ms} <= {rec.last_timestamp_ms}")
            self._record({"type": "heartbeat", "id": node_id, "timestamp_ms": int(timestamp_ms),
                          "at": self.clock()})
            return {"ack": True, "status": "active"}

    def status(self, challenger_id: str) -> str:
        with self._lock:
            return self.challengers[challenger_id].status(self.clock(), self.ttl)

    def active_challengers(self) -> list[ChallengerRecord]:
        now = self.clock()
        with self._lock:
            return [c for c in self.challengers.values() if c.status(now, self.ttl) == "active"]

    def registry_snapshot(self) -> dict:
        with self._lock:
            return {
                "challengers": {cid: c.snapshot() for cid, c in sorted(self.challengers.items())},
                "waldos": {wid: {"public_key": w.public_key.hex()}
                           for wid, w in sorted(self.waldos.items())},
            }

    # challenges

    def initiate_challenge(self, waldo_id: str, claimed: GeoPoint, beta: float,
                           tau: float) -> Challenge:
        """Open a challenge; ``tau`` is the collection timer in milliseconds."""
        ProvingConfig(beta=beta, grid_size=self.grid_size)
        with self._lock:
            if waldo_id not in self.waldos:
                raise WaldoUnknown(waldo_id)
            for ch in self.challenges.values():
                if ch.waldo_id == waldo_id and ch.state == "collecting":
                    raise ChallengeInProgress(ch.id)
            selected = sorted(c.id for c in self.active_challengers()
                              if distance(c.location, claimed) <= self.x_limit)
            if not selected:
                raise NoChallengersInRange(f"no active challenger within {self.x_limit} km")
            cid = os.urandom(16).hex()
            self._record({"type": "initiate", "id": cid, "waldo_id": waldo_id,
                          "claimed": claimed.to_list(), "selected": selected, "beta": beta,
                          "tau_ms": tau, "at": self.clock()})
            ch = self.challenges[cid]
        log.info("challenge %s for %s: %d challengers selected", cid, waldo_id, len(selected))
        if self.notifier:
            self.notifier(ch)
        return ch

    def assignments(self, challenger_id: str) -> list[dict]:
        """Open challenges this challenger still has to measure."""
        with self._lock:
            out = []
            for ch in self.challenges.values():
                if (ch.state == "collecting" and challenger_id in ch.selected
                        and challenger_id not in ch.estimates):
                    w = self.waldos[ch.waldo_id]
                    out.append({"challenge_id": ch.id, "waldo_id": w.id,
                                "waldo_public_key": w.public_key.hex(),
                                "waldo_endpoint": list(w.endpoint) if w.endpoint else None})
            return out

    def _get(self, challenge_id: str) -> Challenge:
        try:
            return self.challenges[challenge_id]
        except KeyError:
            raise UnknownChallenge(challenge_id) from None

    def submit_estimate(self, challenge_id: str, challenger_id: str,
                        transcript: PingTranscript) -> dict:
        with self._lock:
            ch = self._get(challenge_id)
            if ch.state != "collecting":
                raise ChallengeClosed(f"{challenge_id} is {ch.state}")
            if challenger_id not in ch.selected:
                raise NotSelected(challenger_id)
            if challenger_id in ch.estimates:
                raise DuplicateSubmission(challenger_id)
            rec = self.challengers[challenger_id]
            waldo = self.waldos[ch.waldo_id]
            if (transcript.challenge_id != ch.id_bytes or transcript.challenger_id != challenger_id
                    or transcript.waldo_id != ch.waldo_id
                    or not verify_transcript(transcript, rec.public_key, waldo.public_key)):
                raise InvalidTranscript(f"from {challenger_id}")
            d_hat, status = estimate_from(rec.mapping, transcript.min_rtt)
            self._record({"type": "submit", "challenge_id": challenge_id,
                          "challenger_id": challenger_id, "d_hat": d_hat, "status": status,
                          "transcript": transcript.to_dict()})
            return {"ack": True, "d_hat_km": d_hat, "status": status}

    def finalize(self, challenge_id: str) -> dict:
        with self._lock:
            ch = self._get(challenge_id)
            if ch.state == "proven":
                raise AlreadyFinalized(challenge_id)
            if ch.state != "collecting":
                raise ChallengeClosed(f"{challenge_id} is {ch.state}")
            n = len(ch.selected)
            got = len(ch.estimates)
            if got < n:
                if not ch.expired(self.clock()):
                    raise ChallengeNotReady(f"{got}/{n} estimates, timer running")
                need = quorum(ch.beta, n)
                if got < need:
                    self._record({"type": "fail", "challenge_id": challenge_id})
                    raise QuorumNotMet(f"{got}/{n} estimates, need {need}")
            bundle = self._assemble(ch)
            digest = bundle["digest"]
            if self.state_dir:
                path = self.state_dir / "bundles" / f"{digest}.json"
                path.write_text(canonical_json(bundle))
            self._record({"type": "finalize", "challenge_id": challenge_id, "digest": digest})
            self.bundles[challenge_id] = bundle
            log.info("challenge %s proven: R* = %.1f km", challenge_id,
                     bundle["body"]["profile"]["r_star"])
            return bundle

    def get_bundle(self, challenge_id: str) -> dict:
        with self._lock:
            if challenge_id in self.bundles:
                return self.bundles[challenge_id]
            if challenge_id in self.challenges:
                raise ChallengeNotReady(f"{challenge_id} has no bundle yet")
            raise UnknownChallenge(challenge_id)

    def _assemble(self, ch: Challenge) -> dict:
        cfg = ProvingConfig(beta=ch.beta, grid_size=self.grid_size)
        waldo = self.waldos[ch.waldo_id]
        entries = []
        for cid in ch.selected:
            rec = self.challengers[cid]
            est = ch.estimates.get(cid, Estimate(0.0, "missing"))
            entries.append({
                "id": cid,
                "public_key": rec.public_key.hex(),
                "location": rec.location.to_list(),
                "mapping": rec.mapping.to_dict(),
                "mapping_digest": rec.mapping.digest(),
                "status": est.status,
                "d_hat_km": est.d_hat,
                "transcript": est.transcript.to_dict() if est.transcript else None,
            })
        profile = prove(ch.claimed, [(rec_loc(e), e["d_hat_km"]) for e in entries], cfg)
        body = {
            "version": BUNDLE_VERSION,
            "challenge": {"id": ch.id, "waldo_id": ch.waldo_id, "claimed": ch.claimed.to_list(),
                          "beta": ch.beta, "tau_ms": ch.tau, "selected": list(ch.selected)},
            "proving": cfg.to_dict(),
            "waldo": {"id": waldo.id, "public_key": waldo.public_key.hex()},
            "challengers": entries,
            "profile": profile_to_dict(profile),
        }
        return {"body": body, "digest": digest_of(body)}


def rec_loc(entry: dict) -> GeoPoint:
    return GeoPoint.from_list(entry["location"])


def estimate_from(mapping: MonotoneMapping, min_rtt: float) -> tuple[float, str]:
    try:
        return evaluate(mapping, min_rtt), "measured"
    except Disqualified:
        return 0.0, "disqualified"


def profile_to_dict(profile: UncertaintyProfile) -> dict:
    return {
        "grid_size": profile.grid_size,
        "r_star_theta": [float(r) for r in profile.r_star_theta],
        "r_star": float(profile.r_star),
        "excluded_count": int(profile.excluded_count),
    }


def _load(bundle) -> Optional[dict]:
    if isinstance(bundle, dict):
        return bundle
    raw = bundle.decode("ascii") if isinstance(bundle, (bytes, bytearray)) else bundle
    obj = json.loads(raw)
    # reject any non-canonical encoding so that every byte is meaningful
    if canonical_json(obj) != raw:
        return None
    return obj


def _check_bundle(b: dict, registry: Optional[dict]) -> bool:
    body = b["body"]
    if body["version"] != BUNDLE_VERSION or b["digest"] != digest_of(body):
        return False
    chal = body["challenge"]
    cid = bytes.fromhex(chal["id"])
    waldo_pub = bytes.fromhex(body["waldo"]["public_key"])
    if body["waldo"]["id"] != chal["waldo_id"]:
        return False
    if registry is not None:
        known = registry.get("waldos", {}).get(chal["waldo_id"])
        if known is None or known["public_key"] != body["waldo"]["public_key"]:
            return False
    entries = body["challengers"]
    if [e["id"] for e in entries] != chal["selected"]:
        return False
    for e in entries:
        mapping = MonotoneMapping.from_dict(e["mapping"])
        if mapping.digest() != e["mapping_digest"]:
            return False
        if registry is not None:
            snap = registry.get("challengers", {}).get(e["id"])
            if snap != {"public_key": e["public_key"], "location": e["location"],
                        "mapping_digest": e["mapping_digest"]}:
                return False
        if e["transcript"] is None:
            if e["status"] != "missing" or e["d_hat_km"] != 0.0:
                return False
            continue
        t = PingTranscript.from_dict(e["transcript"])
        if (t.challenge_id != cid or t.challenger_id != e["id"] or t.waldo_id != chal["waldo_id"]
                or not verify_transcript(t, bytes.fromhex(e["public_key"]), waldo_pub)):
            return False
        if (e["d_hat_km"], e["status"]) != estimate_from(mapping, t.min_rtt):
            return False
    cfg = ProvingConfig.from_dict(body["proving"])
    if cfg.beta != chal["beta"]:
        return False
    profile = prove(GeoPoint.from_list(chal["claimed"]),
                    [(rec_loc(e), e["d_hat_km"]) for e in entries], cfg)
    return profile_to_dict(profile) == body["profile"]


def verify_bundle(bundle, registry: Optional[dict] = None) -> bool:
    """Recheck a bundle from scratch.

    ``bundle`` is the parsed dict or the raw file contents; raw input must
    be in canonical form. ``registry`` (as from ``registry_snapshot``) pins
    the expected keys, locations and mapping digests; without it the
    bundle's own copies are trusted.
    """
    try:
        b = _load(bundle)
        return b is not None and _check_bundle(b, registry)
    except (ValueError, KeyError, TypeError, AttributeError, netprobe.MalformedPacket):
        return False
