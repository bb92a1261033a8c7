"""Shared builders for coordinator-level tests."""

import os

from geoproof.coordinator import Coordinator
from geoproof.geo import GeoPoint, destination
from geoproof.netprobe import CHALLENGE, RESPONSE, KeyPair, PingPacket, PingTranscript
from geoproof.poig import MonotoneMapping

CLAIMED = GeoPoint(48.85, 2.35)
MAPPING = MonotoneMapping(((1.0, 100.0), (10.0, 1000.0)), t_max=40.0)


class FakeClock:
    def __init__(self, t=1_000.0):
        self.t = t

    def __call__(self):
        return self.t

    def advance(self, seconds):
        self.t += seconds


def signed_transcript(challenger_keys, waldo_keys, challenge_id, rtts, challenger_id="",
                      waldo_id=""):
    """A transcript as ``measure`` would produce, without touching the network."""
    packets = []
    for seq, rtt in enumerate(rtts):
        nonce = os.urandom(16)
        sent = PingPacket(CHALLENGE, challenge_id, nonce, seq, b"").signed_by(challenger_keys)
        recv = PingPacket(RESPONSE, challenge_id, nonce, seq, b"").signed_by(waldo_keys)
        packets.append((sent, recv, float(rtt)))
    return PingTranscript(challenger_id, waldo_id, challenge_id, tuple(packets), min(rtts),
                          len(rtts))


def populate(coord: Coordinator, n=8, radius_km=300.0, mapping=MAPPING):
    """Register ``n`` challengers on a ring around ``CLAIMED`` plus one Waldo."""
    keys = {}
    for i in range(n):
        k = KeyPair.generate()
        cid = f"c{i}"
        loc = destination(CLAIMED, 2 * 3.141592653589793 * i / n, radius_km)
        coord.register_challenger(cid, k.public, loc, mapping)
        keys[cid] = k
    wk = KeyPair.generate()
    coord.register_waldo("w", wk.public, ("127.0.0.1", 9))
    return keys, wk
