import json
import threading

import pytest

from geoproof import coordinator as coord
from geoproof.geo import GeoPoint, destination
from geoproof.netprobe import KeyPair
from geoproof.poig import MonotoneMapping, evaluate
from geoproof.trig import ProvingConfig, prove

from support import CLAIMED, MAPPING, FakeClock, populate, signed_transcript


@pytest.fixture
def clock():
    return FakeClock()


@pytest.fixture
def net(clock, tmp_path):
    c = coord.Coordinator(state_dir=tmp_path / "state", clock=clock)
    keys, wk = populate(c)
    yield c, keys, wk
    c.close()


def submit(c, ch, keys, wk, cid, rtts):
    t = signed_transcript(keys[cid], wk, ch.id_bytes, rtts, cid, ch.waldo_id)
    return c.submit_estimate(ch.id, cid, t)


def test_helpers():
    assert coord.quorum(0.2, 8) == 7
    assert coord.quorum(0.25, 8) == 6
    assert coord.quorum(0.3, 10) == 7
    assert coord.quorum(0.0, 5) == 5
    assert coord.canonical_json({"b": 1, "a": [1.5, "é"]}) == '{"a":[1.5,"\\u00e9"],"b":1}'


def test_heartbeats(net, clock):
    c, keys, _ = net
    k = keys["c0"]
    assert c.heartbeat("c0", 5, k.sign(coord.heartbeat_message("c0", 5)))["status"] == "active"
    with pytest.raises(coord.StaleTimestamp):
        c.heartbeat("c0", 5, k.sign(coord.heartbeat_message("c0", 5)))
    with pytest.raises(coord.BadSignature):
        c.heartbeat("c0", 6, keys["c1"].sign(coord.heartbeat_message("c0", 6)))
    with pytest.raises(coord.UnknownChallenger):
        c.heartbeat("nobody", 1, b"")
    clock.advance(61)
    assert c.status("c0") == "stale"
    c.heartbeat("c0", 7, k.sign(coord.heartbeat_message("c0", 7)))
    assert c.status("c0") == "active"
    assert [r.id for r in c.active_challengers()] == ["c0"]


def test_signed_registration(clock):
    c = coord.Coordinator(clock=clock)
    k = KeyPair.generate()
    rec = {"id": "x", "public_key": k.public.hex(), "location": GeoPoint(1, 2).to_list(),
           "mapping": MAPPING.to_dict()}
    sig = k.sign(coord.registration_message("challenger", rec))
    c.register_challenger("x", k.public, GeoPoint(1, 2), MAPPING, signature=sig)
    with pytest.raises(coord.BadSignature):
        c.register_challenger("x", k.public, GeoPoint(1, 3), MAPPING, signature=sig)


def test_selection_by_range(clock):
    c = coord.Coordinator(clock=clock, x_limit=2000)
    for i, dist in enumerate([100, 500, 1500, 1999, 2500, 3000, 1000, 5000]):
        c.register_challenger(f"c{i}", KeyPair.generate().public,
                              destination(CLAIMED, 0.5 * i, dist), MAPPING)
    c.register_waldo("w", KeyPair.generate().public)
    ch = c.initiate_challenge("w", CLAIMED, 0.2, 1000)
    assert ch.selected == ["c0", "c1", "c2", "c3", "c6"]
    assert ch.state == "collecting"
    with pytest.raises(coord.ChallengeInProgress):
        c.initiate_challenge("w", CLAIMED, 0.2, 1000)
    with pytest.raises(coord.WaldoUnknown):
        c.initiate_challenge("nobody", CLAIMED, 0.2, 1000)
    with pytest.raises(coord.NoChallengersInRange):
        c.register_waldo("w2", KeyPair.generate().public)
        c.initiate_challenge("w2", GeoPoint(-45, 170), 0.2, 1000)


def test_stale_challengers_not_selected(net, clock):
    c, keys, wk = net
    clock.advance(61)
    k = keys["c3"]
    c.heartbeat("c3", 1, k.sign(coord.heartbeat_message("c3", 1)))
    assert c.initiate_challenge("w", CLAIMED, 0.0, 1000).selected == ["c3"]


def test_submission_rules(net):
    c, keys, wk = net
    ch = c.initiate_challenge("w", CLAIMED, 0.25, 5000)
    ack = submit(c, ch, keys, wk, "c0", [5.0, 4.0])
    assert ack["status"] == "measured"
    assert ack["d_hat_km"] == pytest.approx(evaluate(MAPPING, 4.0))
    with pytest.raises(coord.DuplicateSubmission):
        submit(c, ch, keys, wk, "c0", [5.0])
    assert submit(c, ch, keys, wk, "c1", [50.0])["status"] == "disqualified"
    assert ch.estimates["c1"].d_hat == 0.0
    # signed by the wrong challenger key
    bad = signed_transcript(keys["c3"], wk, ch.id_bytes, [3.0], "c2", "w")
    with pytest.raises(coord.InvalidTranscript):
        c.submit_estimate(ch.id, "c2", bad)
    other = signed_transcript(keys["c2"], wk, bytes(16), [3.0], "c2", "w")
    with pytest.raises(coord.InvalidTranscript):
        c.submit_estimate(ch.id, "c2", other)
    with pytest.raises(coord.UnknownChallenge):
        c.submit_estimate("00" * 16, "c2", other)
    c.register_challenger("late", KeyPair.generate().public, CLAIMED, MAPPING)
    with pytest.raises(coord.NotSelected):
        c.submit_estimate(ch.id, "late", other)


def test_assignments(net):
    c, keys, wk = net
    ch = c.initiate_challenge("w", CLAIMED, 0.25, 5000)
    job = c.assignments("c0")
    assert job == [{"challenge_id": ch.id, "waldo_id": "w", "waldo_public_key": wk.public.hex(),
                    "waldo_endpoint": ["127.0.0.1", 9]}]
    submit(c, ch, keys, wk, "c0", [3.0])
    assert c.assignments("c0") == []


def test_finalize_when_everyone_reported(net):
    c, keys, wk = net
    ch = c.initiate_challenge("w", CLAIMED, 0.25, 5000)
    for i, cid in enumerate(sorted(keys)):
        submit(c, ch, keys, wk, cid, [4.0 + i * 0.1, 5.0])
    bundle = c.finalize(ch.id)
    assert ch.state == "proven"
    assert coord.verify_bundle(bundle)
    assert coord.verify_bundle(coord.canonical_json(bundle), c.registry_snapshot())
    body = bundle["body"]
    again = prove(CLAIMED, [(GeoPoint.from_list(e["location"]), e["d_hat_km"])
                            for e in body["challengers"]], ProvingConfig(beta=0.25))
    assert body["profile"]["r_star"] == again.r_star
    with pytest.raises(coord.AlreadyFinalized):
        c.finalize(ch.id)
    with pytest.raises(coord.ChallengeClosed):
        submit(c, ch, keys, wk, "c0", [1.0])


def test_quorum_rule(clock, tmp_path):
    c = coord.Coordinator(clock=clock)
    keys, wk = populate(c)
    ch = c.initiate_challenge("w", CLAIMED, 0.25, 2000)
    need = coord.quorum(0.25, 8)
    for cid in sorted(keys)[:need - 1]:
        submit(c, ch, keys, wk, cid, [3.0])
    with pytest.raises(coord.ChallengeNotReady):
        c.finalize(ch.id)
    submit(c, ch, keys, wk, sorted(keys)[need - 1], [3.0])
    clock.advance(2.0)
    bundle = c.finalize(ch.id)
    missing = [e for e in bundle["body"]["challengers"] if e["status"] == "missing"]
    assert len(missing) == 8 - need and all(e["d_hat_km"] == 0.0 for e in missing)
    assert coord.verify_bundle(bundle)

    c2 = coord.Coordinator(clock=clock)
    keys, wk = populate(c2)
    ch = c2.initiate_challenge("w", CLAIMED, 0.25, 2000)
    for cid in sorted(keys)[:need - 1]:
        submit(c2, ch, keys, wk, cid, [3.0])
    clock.advance(2.0)
    with pytest.raises(coord.QuorumNotMet):
        c2.finalize(ch.id)
    assert ch.state == "failed"


def test_bundle_tampering(net):
    c, keys, wk = net
    ch = c.initiate_challenge("w", CLAIMED, 0.25, 5000)
    for cid in sorted(keys):
        submit(c, ch, keys, wk, cid, [4.0])
    bundle = c.finalize(ch.id)

    def edited(fn):
        b = json.loads(json.dumps(bundle))
        fn(b["body"])
        b["digest"] = coord.digest_of(b["body"])  # re-seal so only the content check can catch it
        return b

    def bump_r_star(body):
        body["profile"]["r_star"] += 1.0

    def swap_mapping(body):
        # a self-consistent but different mapping that would inflate the estimate
        e = body["challengers"][0]
        looser = MonotoneMapping(((1.0, 200.0), (10.0, 2000.0)), t_max=40.0)
        e["mapping"], e["mapping_digest"] = looser.to_dict(), looser.digest()

    def lower_estimate(body):
        body["challengers"][0]["d_hat_km"] = 1.0

    for fn in (bump_r_star, swap_mapping, lower_estimate):
        assert not coord.verify_bundle(edited(fn))
    unsealed = json.loads(json.dumps(bundle))
    unsealed["body"]["challenge"]["tau_ms"] = 1
    assert not coord.verify_bundle(unsealed)
    other_registry = c.registry_snapshot()
    other_registry["waldos"]["w"]["public_key"] = KeyPair.generate().public.hex()
    assert not coord.verify_bundle(bundle, other_registry)
    # the registry pins mapping digests even when the bundle is otherwise consistent
    pinned = c.registry_snapshot()
    pinned["challengers"]["c0"]["mapping_digest"] = "00" * 32
    assert coord.verify_bundle(bundle, c.registry_snapshot())
    assert not coord.verify_bundle(bundle, pinned)
    raw = coord.canonical_json(bundle)
    assert not coord.verify_bundle(raw.replace(":", ": ", 1))
    assert not coord.verify_bundle("not json")


def test_replay_restores_state(clock, tmp_path):
    state = tmp_path / "s"
    c = coord.Coordinator(state_dir=state, clock=clock)
    keys, wk = populate(c)
    k = keys["c0"]
    c.heartbeat("c0", 10, k.sign(coord.heartbeat_message("c0", 10)))
    ch = c.initiate_challenge("w", CLAIMED, 0.25, 5000)
    for cid in sorted(keys):
        submit(c, ch, keys, wk, cid, [4.0])
    bundle = c.finalize(ch.id)
    snap = c.registry_snapshot()
    c.close()

    again = coord.Coordinator(state_dir=state, clock=clock)
    assert again.registry_snapshot() == snap
    assert again.get_bundle(ch.id) == bundle
    assert again.challenges[ch.id].state == "proven"
    assert (state / "bundles" / f"{bundle['digest']}.json").exists()
    with pytest.raises(coord.StaleTimestamp):
        again.heartbeat("c0", 10, k.sign(coord.heartbeat_message("c0", 10)))
    again.close()


def test_concurrent_finalize_first_wins(net):
    c, keys, wk = net
    ch = c.initiate_challenge("w", CLAIMED, 0.25, 5000)
    for cid in sorted(keys):
        submit(c, ch, keys, wk, cid, [4.0])
    results = []

    def go():
        try:
            results.append(c.finalize(ch.id)["digest"])
        except coord.AlreadyFinalized:
            results.append("late")

    threads = [threading.Thread(target=go) for _ in range(6)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert results.count("late") == 5
