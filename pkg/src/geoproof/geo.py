"""Coordinates, great-circle distance, bearings and destination points.

Two worlds share the same three functions: ``GeoPoint`` (spherical Earth,
km) and ``PlanarPoint`` (flat simulation plane). Bearings are radians
clockwise from north in both, normalized to [0, 2*pi).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

EARTH_RADIUS_KM = 6371.0
TWO_PI = 2.0 * math.pi


class CoincidentPoints(ValueError):
    """Bearing requested between two identical points."""


def normalize_angle(angle: float) -> float:
    a = math.fmod(angle, TWO_PI)
    if a < 0.0:
        a += TWO_PI
    # fmod of a tiny negative number can round up to exactly 2*pi
    return 0.0 if a >= TWO_PI else a


def _normalize_lon(lon: float) -> float:
    x = math.fmod(lon + 180.0, 360.0)
    if x < 0.0:
        x += 360.0
    x -= 180.0
    return -180.0 if x >= 180.0 else x


@dataclass(frozen=True)
class GeoPoint:
    lat: float
    lon: float

    def __post_init__(self):
        if not (math.isfinite(self.lat) and math.isfinite(self.lon)):
            raise ValueError(f"non-finite coordinate: {self.lat}, {self.lon}")
        if not -90.0 <= self.lat <= 90.0:
            raise ValueError(f"latitude out of range: {self.lat}")
        object.__setattr__(self, "lon", _normalize_lon(self.lon))

    def to_list(self) -> list[float]:
        return [self.lat, self.lon]

    @classmethod
    def from_list(cls, values) -> "GeoPoint":
        lat, lon = values
        return cls(float(lat), float(lon))


@dataclass(frozen=True)
class PlanarPoint:
    x: float
    y: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError(f"non-finite coordinate: {self.x}, {self.y}")

    def to_list(self) -> list[float]:
        return [self.x, self.y]

    @classmethod
    def from_list(cls, values) -> "PlanarPoint":
        x, y = values
        return cls(float(x), float(y))


Point = Union[GeoPoint, PlanarPoint]


def _check_same_world(a: Point, b: Point) -> bool:
    planar = isinstance(a, PlanarPoint)
    if planar != isinstance(b, PlanarPoint):
        raise TypeError("cannot mix GeoPoint and PlanarPoint")
    return planar


def distance(a: Point, b: Point) -> float:
    """Haversine distance in km (Euclidean for planar points)."""
    if _check_same_world(a, b):
        return math.hypot(b.x - a.x, b.y - a.y)
    phi1, phi2 = math.radians(a.lat), math.radians(b.lat)
    dphi = phi2 - phi1
    dlam = math.radians(b.lon - a.lon)
    h = math.sin(dphi / 2.0) ** 2 + math.cos(phi1) * math.cos(phi2) * math.sin(dlam / 2.0) ** 2
    h = min(1.0, max(0.0, h))
    return 2.0 * EARTH_RADIUS_KM * math.asin(math.sqrt(h))


def bearing(src: Point, dst: Point) -> float:
    """Initial bearing from ``src`` to ``dst``, clockwise from north."""
    if _check_same_world(src, dst):
        dx, dy = dst.x - src.x, dst.y - src.y
        if dx == 0.0 and dy == 0.0:
            raise CoincidentPoints(f"{src} == {dst}")
        return normalize_angle(math.atan2(dx, dy))
    if src.lat == dst.lat and src.lon == dst.lon:
        raise CoincidentPoints(f"{src} == {dst}")
    phi1, phi2 = math.radians(src.lat), math.radians(dst.lat)
    dlam = math.radians(dst.lon - src.lon)
    y = math.sin(dlam) * math.cos(phi2)
    x = math.cos(phi1) * math.sin(phi2) - math.sin(phi1) * math.cos(phi2) * math.cos(dlam)
    return normalize_angle(math.atan2(y, x))


def destination(src: Point, heading: float, dist: float) -> Point:
    """Point reached after travelling ``dist`` km from ``src`` along ``heading``."""
    if dist < 0.0:
        raise ValueError(f"negative distance: {dist}")
    if isinstance(src, PlanarPoint):
        return PlanarPoint(src.x + dist * math.sin(heading), src.y + dist * math.cos(heading))
    if dist == 0.0:
        return src
    delta = dist / EARTH_RADIUS_KM
    phi1, lam1 = math.radians(src.lat), math.radians(src.lon)
    sin_phi2 = math.sin(phi1) * math.cos(delta) + math.cos(phi1) * math.sin(delta) * math.cos(heading)
    phi2 = math.asin(min(1.0, max(-1.0, sin_phi2)))
    lam2 = lam1 + math.atan2(
        math.sin(heading) * math.sin(delta) * math.cos(phi1),
        math.cos(delta) - math.sin(phi1) * sin_phi2,
    )
    return GeoPoint(math.degrees(phi2), math.degrees(lam2))
