"""Delay-to-distance calibration.

A challenger pings peers at known (claimed) locations and turns the
resulting ``(rtt, distance)`` cloud into a monotone map giving the largest
distance plausibly reachable within a given round-trip time.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, replace
from typing import Iterable, Optional, Sequence

import numpy as np

from .geo import GeoPoint, distance


class NoNearbySamples(ValueError):
    pass


class EmptySampleSet(ValueError):
    pass


class DegenerateInput(ValueError):
    pass


class Disqualified(Exception):
    """The measured delay exceeds every delay seen during calibration."""

    def __init__(self, rtt: float, t_max: float):
        super().__init__(f"rtt {rtt} ms exceeds t_max {t_max} ms")
        self.rtt = rtt
        self.t_max = t_max


@dataclass(frozen=True)
class DelayDistanceSample:
    peer_id: str
    rtt: float
    dist: float
    claimed_peer_location: Optional[GeoPoint] = None

    def __post_init__(self):
        if not self.rtt > 0:
            raise ValueError(f"rtt must be positive: {self.rtt}")
        if not self.dist >= 0:
            raise ValueError(f"dist must be non-negative: {self.dist}")


def samples_from_pings(challenger_loc: GeoPoint,
                       pings: Iterable[tuple[str, GeoPoint, float]]) -> list[DelayDistanceSample]:
    """Build samples from ``(peer_id, peer_location, rtt_ms)`` measurements."""
    return [DelayDistanceSample(pid, float(rtt), distance(challenger_loc, loc), loc)
            for pid, loc, rtt in pings]


@dataclass(frozen=True)
class MonotoneMapping:
    breakpoints: tuple[tuple[float, float], ...]
    t_max: float
    eta: float = 1.0

    def __post_init__(self):
        if not self.breakpoints:
            raise EmptySampleSet("mapping needs at least one breakpoint")
        if self.eta < 1.0:
            raise ValueError(f"eta must be >= 1: {self.eta}")
        bp = self.breakpoints
        for (t0, d0), (t1, d1) in zip(bp, bp[1:]):
            if not (t1 > t0 and d1 >= d0):
                raise ValueError(f"breakpoints not monotone at {(t0, d0)} -> {(t1, d1)}")

    def with_eta(self, eta: float) -> "MonotoneMapping":
        return replace(self, eta=eta)

    def __call__(self, rtt: float) -> float:
        return evaluate(self, rtt)

    def to_dict(self) -> dict:
        return {
            "breakpoints": [[t, d] for t, d in self.breakpoints],
            "t_max_ms": self.t_max,
            "eta": self.eta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MonotoneMapping":
        return cls(
            breakpoints=tuple((float(t), float(dist)) for t, dist in d["breakpoints"]),
            t_max=float(d["t_max_ms"]),
            eta=float(d["eta"]),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "MonotoneMapping":
        return cls.from_dict(json.loads(text))

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()


@dataclass(frozen=True)
class CalibrationConfig:
    x_limit: float = 2000.0
    beta: float = 0.0
    eta: float = 1.2
    bin_size: Optional[int] = None
    filter_mode: str = "none"

    def __post_init__(self):
        if self.x_limit <= 0:
            raise ValueError("x_limit must be positive")
        if self.eta < 1.0:
            raise ValueError("eta must be >= 1")
        if self.filter_mode not in ("none", "ratio", "bin"):
            raise ValueError(f"unknown filter_mode: {self.filter_mode}")


def select_samples(samples: Sequence[DelayDistanceSample],
                   x_limit: float = 2000.0) -> tuple[list[DelayDistanceSample], float]:
    """Keep samples within ``x_limit`` km plus any faster than the slowest of those.

    Returns ``(selected, t_max)`` where ``t_max`` is the largest rtt among
    the nearby samples. Far samples are kept only when strictly faster.
    """
    near = [s for s in samples if s.dist <= x_limit]
    if not near:
        raise NoNearbySamples(f"no sample within {x_limit} km")
    t_max = max(s.rtt for s in near)
    selected = [s for s in samples if s.dist <= x_limit or s.rtt < t_max]
    return selected, t_max


def build_monotone(samples: Sequence[DelayDistanceSample]) -> MonotoneMapping:
    """Staircase of the largest distance seen at or below each delay."""
    if not samples:
        raise EmptySampleSet("no samples")
    best: dict[float, float] = {}
    for s in samples:
        if s.dist > best.get(s.rtt, -1.0):
            best[s.rtt] = s.dist
    knots = []
    running = -1.0
    for t in sorted(best):
        if best[t] > running:
            running = best[t]
            knots.append((t, running))
    return MonotoneMapping(tuple(knots), t_max=max(s.rtt for s in samples), eta=1.0)


def evaluate(mapping: MonotoneMapping, rtt: float) -> float:
    """Largest distance (km) consistent with ``rtt``; raises ``Disqualified`` past ``t_max``."""
    if not rtt > 0:
        raise ValueError(f"rtt must be positive: {rtt}")
    if rtt > mapping.t_max:
        raise Disqualified(rtt, mapping.t_max)
    ts = [t for t, _ in mapping.breakpoints]
    ds = [d for _, d in mapping.breakpoints]
    # np.interp clamps to the end values outside the knot range
    return mapping.eta * float(np.interp(rtt, ts, ds))


def evaluate_many(mapping: MonotoneMapping, rtts: np.ndarray) -> np.ndarray:
    """Vectorised ``evaluate``; disqualified delays come back as NaN."""
    rtts = np.asarray(rtts, dtype=float)
    ts = np.array([t for t, _ in mapping.breakpoints])
    ds = np.array([d for _, d in mapping.breakpoints])
    out = mapping.eta * np.interp(rtts, ts, ds)
    out[rtts > mapping.t_max] = np.nan
    return out


def ratio_filter(samples: Sequence[DelayDistanceSample], beta: float) -> list[DelayDistanceSample]:
    """Drop the ``floor(beta*n)`` samples with the largest distance/delay ratio."""
    if not 0.0 <= beta < 1.0:
        raise ValueError(f"beta must be in [0, 1): {beta}")
    n = len(samples)
    k = int(math.floor(beta * n + 1e-9))
    if k == 0:
        return list(samples)
    order = sorted(range(n), key=lambda i: (-samples[i].dist / samples[i].rtt,
                                            -samples[i].dist, samples[i].peer_id))
    drop = set(order[:k])
    return [s for i, s in enumerate(samples) if i not in drop]


def bin_size_for(beta: float) -> int:
    return int(math.ceil(1.0 / beta - 1e-9))


def bin_filter(samples: Sequence[DelayDistanceSample], beta: float,
               bin_size: Optional[int] = None) -> list[DelayDistanceSample]:
    """Drop the farthest sample from each full bin of ``ceil(1/beta)`` consecutive delays."""
    if not 0.0 < beta < 1.0:
        raise ValueError(f"beta must be in (0, 1): {beta}")
    size = bin_size or bin_size_for(beta)
    order = sorted(range(len(samples)), key=lambda i: (samples[i].rtt, samples[i].peer_id))
    drop = set()
    for start in range(0, len(order) - size + 1, size):
        chunk = order[start:start + size]
        drop.add(min(chunk, key=lambda i: (-samples[i].dist, samples[i].peer_id)))
    return [s for i, s in enumerate(samples) if i not in drop]


def calibrate(samples: Sequence[DelayDistanceSample],
              cfg: CalibrationConfig = CalibrationConfig()) -> MonotoneMapping:
    """Selection, optional Byzantine filtering, envelope and correction in one go."""
    selected, _ = select_samples(samples, cfg.x_limit)
    if cfg.filter_mode == "ratio":
        selected = ratio_filter(selected, cfg.beta)
    elif cfg.filter_mode == "bin":
        selected = bin_filter(selected, cfg.beta, cfg.bin_size)
    mapping = build_monotone(selected)
    return mapping.with_eta(cfg.eta) if cfg.filter_mode != "none" else mapping


def _upper_hull(pts: list[tuple[float, float]]) -> list[tuple[float, float]]:
    hull: list[tuple[float, float]] = []
    for p in sorted(set(pts)):
        while len(hull) >= 2:
            (x1, y1), (x2, y2) = hull[-2], hull[-1]
            # drop the middle point unless it makes a strict right turn
            if (x2 - x1) * (p[1] - y1) - (y2 - y1) * (p[0] - x1) >= 0:
                hull.pop()
            else:
                break
        hull.append(p)
    return hull


def cbg_bestline(samples: Sequence[DelayDistanceSample]) -> tuple[float, float]:
    """Tightest non-decreasing line lying on or above every ``(rtt, dist)`` point.

    Minimises the summed vertical gap ``sum(a*t + b - d)``, i.e. the line's
    height at the mean delay. The LP optimum lies on an upper-hull edge of
    non-negative slope or is the flat line through the farthest point.
    """
    pts = [(float(s.rtt), float(s.dist)) for s in samples]
    if len(pts) < 2 or all(t == pts[0][0] for t, _ in pts):
        raise DegenerateInput("need at least two distinct delays")
    t_mean = sum(t for t, _ in pts) / len(pts)
    best_a, best_b = 0.0, max(d for _, d in pts)
    best_obj = best_b
    top: dict[float, float] = {}
    for t, d in pts:
        top[t] = max(d, top.get(t, d))
    hull = _upper_hull(list(top.items()))
    for (t0, d0), (t1, d1) in zip(hull, hull[1:]):
        a = (d1 - d0) / (t1 - t0)
        if a < 0:
            continue
        b = d0 - a * t0
        obj = a * t_mean + b
        if obj < best_obj:
            best_a, best_b, best_obj = a, b, obj
    return best_a, best_b
