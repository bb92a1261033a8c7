"""Command-line entry point.

Outputs go to ``--out`` (default ``.``) under names derived from a hash of
the resolved configuration, so identical runs overwrite identical files.
Wall-clock timestamps only ever land in the ``*.meta.json`` sidecar.

Config files are JSON::

    {"schema_version": 1, "simulate": {"fig": "5", "replicates": 20}, "calibrate": {...}}

Each subcommand reads its own section; command-line flags win over the file.
"""

from __future__ import annotations

import argparse
import csv
import datetime as dt
import hashlib
import json
import logging
import signal
import sys
import threading
import time
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__, api, poig, rmc, sim
from . import coordinator as coord
from .geo import GeoPoint
from .netprobe import KeyPair, Responder
from .trig import ProvingConfig, UncertaintyProfile, region_boundary, theta_grid

log = logging.getLogger("geoproof")

CONFIG_SCHEMA_VERSION = 1

SIM_DEFAULTS = {
    "5": {"n_list": [10, 20, 40, 50], "beta_list": [0.1, 0.2, 0.3, 0.4, 0.49],
          "sigma": 0.1, "replicates": 50, "grid_size": 360},
    "6": {"n": 20, "beta": 0.2, "sigma_list": [0.05, 0.1, 0.2, 0.4],
          "replicates": 50, "grid_size": 360},
    "10": {"k": 400, "beta": 0.2, "eta": 1.2, "points": 200},
    "1a": {"k": 400, "beta_list": [0.0, 0.1, 0.2, 0.3, 0.4, 0.45], "seeds": 20},
    "13": {"m": 100, "beta_list": [0.1, 0.2, 0.3, 0.4], "p_list": [0.3, 0.4, 0.5, 0.6],
           "seeds": 10},
    "soundness": {"trials": 1000, "models": list(sim.SOUNDNESS_MODELS), "grid_size": 360},
    "vpn": {"trials": 100, "n": 20, "beta": 0.2, "sigma": 0.1},
    "cbg": {"trials": 100, "k": 200},
}


class CliError(Exception):
    """Operation failed; reported on stderr with exit code 1."""


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(coord.canonical_json(cfg).encode()).hexdigest()[:12]


def load_config(path: Optional[str], section: str) -> dict:
    if not path:
        return {}
    data = json.loads(Path(path).read_text())
    version = data.get("schema_version", CONFIG_SCHEMA_VERSION)
    if version != CONFIG_SCHEMA_VERSION:
        raise CliError(f"unsupported config schema_version {version}")
    sec = data.get(section, {})
    if not isinstance(sec, dict):
        raise CliError(f"config section {section!r} must be an object")
    return sec


def _write_meta(path: Path, cfg: dict, argv: Sequence[str]) -> None:
    meta = {"created": dt.datetime.now(dt.timezone.utc).isoformat(), "version": __version__,
            "argv": list(argv), "config": cfg}
    path.with_name(path.name + ".meta.json").write_text(json.dumps(meta, indent=2) + "\n")


def _write_csv(path: Path, rows: list[dict]) -> None:
    with path.open("w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


def _emit(args, stem: str, cfg: dict, write) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / stem.format(hash=config_hash(cfg))
    write(path)
    _write_meta(path, cfg, args.argv)
    print(path)
    return path


def _read_keys(path: str) -> KeyPair:
    return KeyPair.from_dict(json.loads(Path(path).read_text()))


def _wait_for_signal() -> threading.Event:
    stop = threading.Event()
    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, lambda *_: stop.set())
    return stop


# subcommands

def cmd_keygen(args) -> int:
    keys = KeyPair.generate()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{args.name}.key.json"
    if path.exists() and not args.force:
        raise CliError(f"{path} exists; pass --force to overwrite")
    path.write_text(json.dumps(keys.to_dict(), indent=2) + "\n")
    path.chmod(0o600)
    print(f"{path} key_id={keys.key_id.hex()}")
    return 0


def cmd_coordinator(args) -> int:
    c = coord.Coordinator(state_dir=args.state_dir, heartbeat_ttl=args.heartbeat_ttl,
                          x_limit=args.x_limit, grid_size=args.grid_size)
    server = api.serve(c, args.host, args.port)
    log.info("coordinator listening on http://%s:%d", *server.server_address[:2])
    stop = _wait_for_signal()
    stop.wait()
    server.shutdown()
    c.close()
    return 0


def cmd_challenger(args) -> int:
    keys = _read_keys(args.key)
    mapping = poig.MonotoneMapping.from_json(Path(args.mapping).read_text())
    client = api.CoordinatorClient(args.coordinator)
    client.register_challenger(args.id, keys, GeoPoint(args.lat, args.lon), mapping)
    log.info("challenger %s registered", args.id)
    api.run_challenger(client, args.id, keys, q=args.q, poll=args.poll, stop=_wait_for_signal())
    return 0


def cmd_waldo(args) -> int:
    keys = _read_keys(args.key)
    client = api.CoordinatorClient(args.coordinator)
    responder = Responder(keys, api.registry_key_lookup(client), args.host, args.port)
    client.register_waldo(args.id, keys, responder.endpoint)
    log.info("waldo %s answering pings on %s:%d", args.id, *responder.endpoint)
    api.run_waldo(client, args.id, keys, responder, stop=_wait_for_signal())
    return 0


def _read_samples(path: str) -> list[poig.DelayDistanceSample]:
    with open(path, newline="") as f:
        return [poig.DelayDistanceSample(r["peer_id"], float(r["rtt_ms"]), float(r["dist_km"]))
                for r in csv.DictReader(f)]


def cmd_calibrate(args) -> int:
    cfg = {"x_limit": 2000.0, "beta": 0.0, "eta": 1.2, "filter_mode": "none", "bin_size": None}
    cfg.update(load_config(args.config, "calibrate"))
    for key in ("x_limit", "beta", "eta", "filter_mode"):
        if getattr(args, key) is not None:
            cfg[key] = getattr(args, key)
    samples_path = Path(args.samples)
    cfg["samples_sha256"] = hashlib.sha256(samples_path.read_bytes()).hexdigest()
    log.info("resolved config: %s", coord.canonical_json(cfg))
    ccfg = poig.CalibrationConfig(x_limit=cfg["x_limit"], beta=cfg["beta"], eta=cfg["eta"],
                                  bin_size=cfg["bin_size"], filter_mode=cfg["filter_mode"])
    mapping = poig.calibrate(_read_samples(args.samples), ccfg)
    _emit(args, "mapping-{hash}.json", cfg, lambda p: p.write_text(mapping.to_json() + "\n"))
    return 0


def cmd_challenge(args) -> int:
    client = api.CoordinatorClient(args.coordinator)
    started = client.initiate(args.waldo, GeoPoint(args.lat, args.lon), args.beta, args.tau_ms)
    cid = started["challenge_id"]
    log.info("challenge %s sent to %d challengers", cid, len(started["selected"]))
    deadline = time.time() + args.tau_ms / 1000.0 + args.grace
    while True:
        try:
            bundle = client.finalize(cid)
            break
        except api.ApiError as e:
            if e.name != "ChallengeNotReady" or time.time() > deadline:
                raise CliError(str(e)) from None
            time.sleep(0.2)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"bundle-{cid}.json"
    path.write_text(coord.canonical_json(bundle))
    print(f"{path} r_star_km={bundle['body']['profile']['r_star']:.3f}")
    return 0


def cmd_verify(args) -> int:
    raw = Path(args.bundle).read_text()
    registry = json.loads(Path(args.registry).read_text()) if args.registry else None
    ok = coord.verify_bundle(raw, registry)
    print("valid" if ok else "INVALID")
    return 0 if ok else 1


def _sim_config(args) -> dict:
    fig = str(args.fig)
    cfg = dict(SIM_DEFAULTS[fig])
    cfg.update(load_config(args.config, "simulate"))
    cfg.pop("fig", None)
    if args.replicates is not None:
        for key in ("replicates", "seeds", "trials"):
            if key in cfg:
                cfg[key] = args.replicates
    cfg["fig"] = fig
    cfg["seed"] = args.seed
    return cfg


def run_simulation(cfg: dict) -> list[dict]:
    fig, seed = cfg["fig"], cfg["seed"]
    if fig == "5":
        return sim.sweep_uncertainty(cfg["n_list"], cfg["beta_list"], cfg["sigma"],
                                     cfg["replicates"], seed, cfg["grid_size"])
    if fig == "6":
        rows = []
        for s in cfg["sigma_list"]:
            rows += sim.sweep_uncertainty([cfg["n"]], [cfg["beta"]], s, cfg["replicates"],
                                          seed, cfg["grid_size"])
        return rows
    if fig == "10":
        rows = []
        for beta in (0.0, cfg["beta"]):
            curves = sim.calibration_comparison(cfg["k"], beta, seed=seed, eta=cfg["eta"],
                                                points=cfg["points"])
            names = [n for n in curves if n != "delay"]
            for j, t in enumerate(curves["delay"]):
                rows.append({"beta": beta, "delay_ms": float(t),
                             **{n: float(curves[n][j]) for n in names}})
        return rows
    if fig == "1a":
        rows = []
        for beta in cfg["beta_list"]:
            runs = [sim.mle_under_attack(beta, seed * 1000 + s, k=cfg["k"])
                    for s in range(cfg["seeds"])]
            rows.append({"beta": beta,
                         "accuracy_unfiltered": float(np.mean([r["acc_raw"] for r in runs])),
                         "accuracy_filtered": float(np.mean([r["acc_filtered"] for r in runs]))})
        return rows
    if fig == "13":
        return sim.rmc_grid(cfg["m"], cfg["beta_list"], cfg["p_list"],
                            [seed * 1000 + s for s in range(cfg["seeds"])])
    if fig == "soundness":
        rows = []
        for model in cfg["models"]:
            res = sim.soundness_trials(model, cfg["trials"], seed, cfg["grid_size"])
            rows.append({"model": model, "trials": len(res),
                         "violations": sum(not r.holds for r in res),
                         "max_slack": max(r.slack for r in res)})
        return rows
    if fig == "vpn":
        pairs = [sim.vpn_inflation_trial(seed * 1000 + s, cfg["n"], cfg["beta"], cfg["sigma"])
                 for s in range(cfg["trials"])]
        return [{"trial": j, "r_star_direct": a, "r_star_vpn": b} for j, (a, b) in enumerate(pairs)]
    if fig == "cbg":
        pairs = [sim.bestline_vs_monotone(seed * 1000 + s, cfg["k"]) for s in range(cfg["trials"])]
        return [{"trial": j, "monotone_mean_km": a, "bestline_mean_km": b}
                for j, (a, b) in enumerate(pairs)]
    raise CliError(f"unknown figure {fig}")


def cmd_simulate(args) -> int:
    cfg = _sim_config(args)
    log.info("resolved config: %s", coord.canonical_json(cfg))
    rows = run_simulation(cfg)
    _emit(args, f"fig{cfg['fig']}-{{hash}}.csv", cfg, lambda p: _write_csv(p, rows))
    return 0


def cmd_complete_matrix(args) -> int:
    cfg = {"p": args.p, "beta": args.beta, "lambda_scale": args.lambda_scale,
           "max_iter": args.max_iter}
    cfg.update(load_config(args.config, "complete-matrix"))
    matrix = rmc.load_matrix(args.matrix, args.mask)
    cfg["matrix_sha256"] = hashlib.sha256(Path(args.matrix).read_bytes()).hexdigest()
    log.info("resolved config: %s", coord.canonical_json(cfg))
    res = rmc.complete(matrix, rmc.RmcConfig(sample_p=cfg["p"], beta=cfg["beta"],
                                             lambda_scale=cfg["lambda_scale"],
                                             max_iter=cfg["max_iter"]))
    summary = {"corrupted": sorted(res.corrupted), "iterations": res.iterations,
               "converged": res.converged, "residual": res.residual}

    def write(path: Path) -> None:
        np.savetxt(path, res.l_matrix, delimiter=",", fmt="%.17g")
        path.with_name(path.stem + ".summary.json").write_text(json.dumps(summary, indent=2) + "\n")

    _emit(args, "completed-{hash}.csv", cfg, write)
    return 0


def profile_from_bundle(bundle: dict) -> UncertaintyProfile:
    body = bundle["body"]
    cfg = ProvingConfig.from_dict(body["proving"])
    r = np.asarray(body["profile"]["r_star_theta"], dtype=float)
    return UncertaintyProfile(GeoPoint.from_list(body["challenge"]["claimed"]),
                              theta_grid(cfg.grid_size), r, body["profile"]["r_star"],
                              body["profile"]["excluded_count"], np.ones(r.size, dtype=bool))


def region_geojson(profile: UncertaintyProfile, properties: Optional[dict] = None) -> dict:
    ring = [[p.lon, p.lat] for p in region_boundary(profile)]
    ring.append(ring[0])
    c = profile.claimed
    return {"type": "FeatureCollection", "features": [
        {"type": "Feature", "geometry": {"type": "Polygon", "coordinates": [ring]},
         "properties": {"r_star_km": profile.r_star, **(properties or {})}},
        {"type": "Feature", "geometry": {"type": "Point", "coordinates": [c.lon, c.lat]},
         "properties": {"role": "claimed"}},
    ]}


def cmd_plot(args) -> int:
    bundle = json.loads(Path(args.bundle).read_text())
    if not coord.verify_bundle(bundle):
        log.warning("bundle does not verify; plotting anyway")
    profile = profile_from_bundle(bundle)
    cfg = {"bundle_digest": bundle["digest"]}
    gj = region_geojson(profile, {"challenge_id": bundle["body"]["challenge"]["id"]})
    _emit(args, "region-{hash}.geojson", cfg,
          lambda p: p.write_text(json.dumps(gj, sort_keys=True) + "\n"))
    rows = [{"theta_rad": float(t), "r_km": float(r)}
            for t, r in zip(profile.theta_grid, profile.r_star_theta)]
    _emit(args, "profile-{hash}.csv", cfg, lambda p: _write_csv(p, rows))
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="world seed (default 0)")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("--config", help="JSON config file")
    common.add_argument("-v", "--verbose", action="count", default=0)

    p = argparse.ArgumentParser(prog="geoproof",
                                description="Byzantine-robust proofs of network location.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, fn, help):
        sp = sub.add_parser(name, parents=[common], help=help, description=help)
        sp.set_defaults(fn=fn)
        return sp

    sp = add("keygen", cmd_keygen, "generate an Ed25519 key pair")
    sp.add_argument("--name", default="node")
    sp.add_argument("--force", action="store_true")

    sp = add("coordinator", cmd_coordinator, "run the coordinator HTTP service")
    sp.add_argument("--host", default="127.0.0.1")
    sp.add_argument("--port", type=int, default=8470)
    sp.add_argument("--state-dir", default="coordinator-state")
    sp.add_argument("--heartbeat-ttl", type=float, default=60.0)
    sp.add_argument("--x-limit", type=float, default=2000.0)
    sp.add_argument("--grid-size", type=int, default=360)

    sp = add("challenger", cmd_challenger, "register and serve challenge assignments")
    sp.add_argument("--coordinator", required=True, help="coordinator base URL")
    sp.add_argument("--id", required=True)
    sp.add_argument("--key", required=True)
    sp.add_argument("--lat", type=float, required=True)
    sp.add_argument("--lon", type=float, required=True)
    sp.add_argument("--mapping", required=True, help="mapping JSON from `calibrate`")
    sp.add_argument("--q", type=int, default=20, help="pings per challenge")
    sp.add_argument("--poll", type=float, default=1.0)

    sp = add("waldo", cmd_waldo, "register and answer challenger pings")
    sp.add_argument("--coordinator", required=True)
    sp.add_argument("--id", required=True)
    sp.add_argument("--key", required=True)
    sp.add_argument("--host", default="127.0.0.1")
    sp.add_argument("--port", type=int, default=0)

    sp = add("calibrate", cmd_calibrate, "build a delay-to-distance mapping from samples")
    sp.add_argument("samples", help="CSV with peer_id,rtt_ms,dist_km")
    sp.add_argument("--x-limit", type=float)
    sp.add_argument("--beta", type=float)
    sp.add_argument("--eta", type=float)
    sp.add_argument("--filter-mode", choices=["none", "ratio", "bin"])

    sp = add("challenge", cmd_challenge, "initiate a challenge and collect its bundle")
    sp.add_argument("--coordinator", required=True)
    sp.add_argument("--waldo", required=True)
    sp.add_argument("--lat", type=float, required=True)
    sp.add_argument("--lon", type=float, required=True)
    sp.add_argument("--beta", type=float, default=0.2)
    sp.add_argument("--tau-ms", type=float, default=10_000.0)
    sp.add_argument("--grace", type=float, default=5.0, help="seconds to wait past tau")

    sp = add("verify", cmd_verify, "re-verify a proof bundle (exit 0 iff valid)")
    sp.add_argument("bundle")
    sp.add_argument("--registry", help="registry snapshot JSON to pin keys against")

    sp = add("simulate", cmd_simulate, "run a simulation sweep and write a CSV table")
    sp.add_argument("--fig", required=True, choices=list(SIM_DEFAULTS))
    sp.add_argument("--replicates", type=int, help="override replicate/seed/trial count")

    sp = add("complete-matrix", cmd_complete_matrix, "robust completion of a delay matrix CSV")
    sp.add_argument("matrix")
    sp.add_argument("--mask", help="mask CSV (default <matrix stem>.mask.csv)")
    sp.add_argument("--p", type=float, default=1.0)
    sp.add_argument("--beta", type=float)
    sp.add_argument("--lambda-scale", type=float, default=rmc.RmcConfig.lambda_scale)
    sp.add_argument("--max-iter", type=int, default=1000)

    sp = add("plot", cmd_plot, "export a bundle's region as GeoJSON plus a profile CSV")
    sp.add_argument("bundle")
    return p


def run(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    args.argv = argv
    level = logging.DEBUG if args.verbose else logging.INFO
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.fn(args)
    except (CliError, coord.CoordinatorError, api.ApiError, OSError, ValueError, KeyError) as e:
        print(f"geoproof {args.command}: {e}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())
