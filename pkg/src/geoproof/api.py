"""JSON-over-HTTP front end for the coordinator, plus node-side agents.

Endpoints (all bodies JSON, errors as ``{"error": <name>, "message": ...}``
with status 4xx)::

    POST /register      {role, id, public_key, location?, mapping?, endpoint?, signature}
    POST /heartbeat     {id, timestamp_ms, signature}
    POST /initiate      {waldo_id, claimed: [lat, lon], beta, tau_ms}
    GET  /assignments?challenger_id=ID
    POST /submit        {challenge_id, challenger_id, transcript}
    POST /finalize      {challenge_id}
    GET  /bundle/<challenge_id>
    POST /verify        {bundle, registry?}
    GET  /registry
"""

from __future__ import annotations

import json
import logging
import threading
import time
import urllib.error
import urllib.request
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Optional
from urllib.parse import parse_qs, urlparse

from . import coordinator as coord
from .geo import GeoPoint
from .netprobe import KeyPair, NoResponses, PingTranscript, Responder, key_id, measure
from .poig import MonotoneMapping

log = logging.getLogger(__name__)


class ApiError(Exception):
    def __init__(self, status: int, name: str, message: str):
        super().__init__(f"{name}: {message}")
        self.status = status
        self.name = name


def _make_handler(c: coord.Coordinator):
    class Handler(BaseHTTPRequestHandler):
        def log_message(self, fmt, *args):
            log.debug("http: " + fmt, *args)

        def _reply(self, status: int, payload) -> None:
            data = json.dumps(payload).encode()
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)

        def _body(self) -> dict:
            n = int(self.headers.get("Content-Length", 0))
            return json.loads(self.rfile.read(n) or b"{}")

        def _dispatch(self, fn) -> None:
            try:
                self._reply(200, fn())
            except coord.CoordinatorError as e:
                self._reply(409, {"error": type(e).__name__, "message": str(e)})
            except (KeyError, ValueError, TypeError) as e:
                self._reply(400, {"error": type(e).__name__, "message": str(e)})

        def do_GET(self):
            url = urlparse(self.path)
            if url.path == "/registry":
                self._dispatch(c.registry_snapshot)
            elif url.path == "/assignments":
                cid = parse_qs(url.query).get("challenger_id", [""])[0]
                self._dispatch(lambda: c.assignments(cid))
            elif url.path.startswith("/bundle/"):
                self._dispatch(lambda: c.get_bundle(url.path.rsplit("/", 1)[1]))
            else:
                self._reply(404, {"error": "NotFound", "message": url.path})

        def do_POST(self):
            route = urlparse(self.path).path
            handler = {
                "/register": self._register,
                "/heartbeat": lambda b: c.heartbeat(b["id"], int(b["timestamp_ms"]),
                                                    bytes.fromhex(b["signature"])),
                "/initiate": self._initiate,
                "/submit": lambda b: c.submit_estimate(
                    b["challenge_id"], b["challenger_id"], PingTranscript.from_dict(b["transcript"])),
                "/finalize": lambda b: c.finalize(b["challenge_id"]),
                "/verify": lambda b: {"valid": coord.verify_bundle(b["bundle"], b.get("registry"))},
            }.get(route)
            if handler is None:
                self._reply(404, {"error": "NotFound", "message": route})
                return
            self._dispatch(lambda: handler(self._body()))

        def _register(self, b: dict) -> dict:
            sig = bytes.fromhex(b["signature"])
            pub = bytes.fromhex(b["public_key"])
            endpoint = tuple(b["endpoint"]) if b.get("endpoint") else None
            if b["role"] == "challenger":
                c.register_challenger(b["id"], pub, GeoPoint.from_list(b["location"]),
                                      MonotoneMapping.from_dict(b["mapping"]), endpoint, sig)
            elif b["role"] == "waldo":
                c.register_waldo(b["id"], pub, endpoint, sig)
            else:
                raise ValueError(f"unknown role {b['role']}")
            return {"ack": True}

        def _initiate(self, b: dict) -> dict:
            ch = c.initiate_challenge(b["waldo_id"], GeoPoint.from_list(b["claimed"]),
                                      float(b["beta"]), float(b["tau_ms"]))
            return {"challenge_id": ch.id, "selected": ch.selected}

    return Handler


def serve(c: coord.Coordinator, host: str = "127.0.0.1", port: int = 0) -> ThreadingHTTPServer:
    """Start serving in a daemon thread; call ``shutdown()`` on the result to stop."""
    server = ThreadingHTTPServer((host, port), _make_handler(c))
    threading.Thread(target=server.serve_forever, daemon=True).start()
    return server


class CoordinatorClient:
    def __init__(self, base_url: str, timeout: float = 10.0):
        self.base = base_url.rstrip("/")
        self.timeout = timeout

    def _call(self, method: str, path: str, payload: Optional[dict] = None):
        data = json.dumps(payload).encode() if payload is not None else None
        req = urllib.request.Request(self.base + path, data=data, method=method,
                                     headers={"Content-Type": "application/json"})
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                return json.loads(resp.read())
        except urllib.error.HTTPError as e:
            body = json.loads(e.read() or b"{}")
            raise ApiError(e.code, body.get("error", "HTTPError"), body.get("message", "")) from None

    def register_challenger(self, cid: str, keys: KeyPair, location: GeoPoint,
                            mapping: MonotoneMapping, endpoint=None) -> dict:
        record = {"id": cid, "public_key": keys.public.hex(), "location": location.to_list(),
                  "mapping": mapping.to_dict()}
        sig = keys.sign(coord.registration_message("challenger", record))
        return self._call("POST", "/register", {"role": "challenger", **record,
                                                "endpoint": endpoint, "signature": sig.hex()})

    def register_waldo(self, wid: str, keys: KeyPair, endpoint=None) -> dict:
        record = {"id": wid, "public_key": keys.public.hex(),
                  "endpoint": list(endpoint) if endpoint else None}
        sig = keys.sign(coord.registration_message("waldo", record))
        return self._call("POST", "/register", {"role": "waldo", **record, "signature": sig.hex()})

    def heartbeat(self, node_id: str, keys: KeyPair, timestamp_ms: Optional[int] = None) -> dict:
        ts = int(time.time() * 1000) if timestamp_ms is None else int(timestamp_ms)
        sig = keys.sign(coord.heartbeat_message(node_id, ts))
        return self._call("POST", "/heartbeat", {"id": node_id, "timestamp_ms": ts,
                                                 "signature": sig.hex()})

    def initiate(self, waldo_id: str, claimed: GeoPoint, beta: float, tau_ms: float) -> dict:
        return self._call("POST", "/initiate", {"waldo_id": waldo_id, "claimed": claimed.to_list(),
                                                "beta": beta, "tau_ms": tau_ms})

    def assignments(self, challenger_id: str) -> list:
        return self._call("GET", f"/assignments?challenger_id={challenger_id}")

    def submit(self, challenge_id: str, challenger_id: str, transcript: PingTranscript) -> dict:
        return self._call("POST", "/submit", {"challenge_id": challenge_id,
                                              "challenger_id": challenger_id,
                                              "transcript": transcript.to_dict()})

    def finalize(self, challenge_id: str) -> dict:
        return self._call("POST", "/finalize", {"challenge_id": challenge_id})

    def bundle(self, challenge_id: str) -> dict:
        return self._call("GET", f"/bundle/{challenge_id}")

    def verify(self, bundle: dict, registry: Optional[dict] = None) -> bool:
        return self._call("POST", "/verify", {"bundle": bundle, "registry": registry})["valid"]

    def registry(self) -> dict:
        return self._call("GET", "/registry")


def run_challenger(client: CoordinatorClient, cid: str, keys: KeyPair, q: int = 20,
                   poll: float = 1.0, heartbeat_every: float = 20.0,
                   stop: Optional[threading.Event] = None, spacing: float = 0.05) -> None:
    """Heartbeat, poll for assignments, ping the Waldo and report. Runs until ``stop``."""
    stop = stop or threading.Event()
    last_beat = 0.0
    while not stop.is_set():
        if time.time() - last_beat >= heartbeat_every:
            client.heartbeat(cid, keys)
            last_beat = time.time()
        for job in client.assignments(cid):
            endpoint = tuple(job["waldo_endpoint"])
            try:
                t = measure(endpoint, keys, bytes.fromhex(job["waldo_public_key"]), q=q,
                            challenge_id=bytes.fromhex(job["challenge_id"]), challenger_id=cid,
                            waldo_id=job["waldo_id"], spacing=spacing)
            except NoResponses:
                log.warning("%s: no responses from %s", cid, job["waldo_id"])
                continue
            try:
                client.submit(job["challenge_id"], cid, t)
            except ApiError as e:
                log.warning("%s: submit rejected: %s", cid, e)
        stop.wait(poll)


def run_waldo(client: Optional[CoordinatorClient], wid: str, keys: KeyPair, responder: Responder,
              heartbeat_every: float = 20.0, stop: Optional[threading.Event] = None) -> None:
    """Serve pings and keep the coordinator informed that this Waldo is alive."""
    stop = stop or threading.Event()
    responder.start()
    try:
        while not stop.is_set():
            if client is not None:
                client.heartbeat(wid, keys)
            stop.wait(heartbeat_every)
    finally:
        responder.stop()


def registry_key_lookup(client: CoordinatorClient, refresh_after: float = 5.0):
    """Key-id to public-key lookup backed by the coordinator registry.

    Unknown ids trigger a refetch, at most once per ``refresh_after`` seconds.
    """
    cache: dict[bytes, bytes] = {}
    last = [0.0]
    lock = threading.Lock()

    def lookup(kid: bytes) -> Optional[bytes]:
        with lock:
            if kid not in cache and time.time() - last[0] >= refresh_after:
                last[0] = time.time()
                try:
                    reg = client.registry()
                except (OSError, ApiError) as e:
                    log.warning("registry fetch failed: %s", e)
                    return None
                for rec in reg["challengers"].values():
                    pub = bytes.fromhex(rec["public_key"])
                    cache[key_id(pub)] = pub
            return cache.get(kid)

    return lookup
