"""Directional uncertainty bounds and Byzantine-filtered proving.

Each challenger ``i`` claims Waldo lies inside a disc of radius ``d_hat``
around it. Walking from the claimed location along a direction ``theta``,
the disc permits at most ``R_i(theta)`` km. Sorting those bounds per
direction and discarding the ``floor(beta * n)`` smallest (the ones a
corrupted challenger could have forced down) leaves a bound that at least
one honest challenger vouches for.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .geo import TWO_PI, PlanarPoint, Point, bearing, destination, distance, normalize_angle

_EPS = 1e-9


class EmptyChallengerSet(ValueError):
    pass


class AllExcluded(ValueError):
    """Every challenger would be discarded by the order statistic."""


def excluded_count(beta: float, n: int) -> int:
    # guard against 0.29 * 100 == 28.999999999999996
    return int(math.floor(beta * n + _EPS))


@dataclass(frozen=True)
class ProvingConfig:
    beta: float = 0.0
    grid_size: int = 360
    percentile_exclusion: float = 0.0
    angular_exclusion: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.beta < 0.5:
            raise ValueError(f"beta must be in [0, 0.5): {self.beta}")
        if self.grid_size < 4:
            raise ValueError(f"grid_size must be >= 4: {self.grid_size}")
        if not 0.0 <= self.percentile_exclusion < 1.0:
            raise ValueError(f"percentile_exclusion must be in [0, 1): {self.percentile_exclusion}")
        if not 0.0 <= self.angular_exclusion < TWO_PI:
            raise ValueError(f"angular_exclusion must be in [0, 2pi): {self.angular_exclusion}")

    def to_dict(self) -> dict:
        return {
            "beta": self.beta,
            "grid_size": self.grid_size,
            "percentile_exclusion": self.percentile_exclusion,
            "angular_exclusion": self.angular_exclusion,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ProvingConfig":
        return cls(**d)


@dataclass(frozen=True)
class DirectionalBound:
    challenger_id: object
    theta: float
    r: float


@dataclass(frozen=True, eq=False)
class UncertaintyProfile:
    """Per-direction bounds plus the scalar uncertainty.

    ``r_star`` equals ``r_star_theta.max()`` unless percentile or angular
    exclusion is configured, in which case it is the max over the kept
    directions (``kept`` mask).
    """

    claimed: Point
    theta_grid: np.ndarray
    r_star_theta: np.ndarray
    r_star: float
    excluded_count: int
    kept: np.ndarray = field(repr=False)

    @property
    def grid_size(self) -> int:
        return len(self.theta_grid)

    @property
    def argmax_theta(self) -> float:
        idx = np.flatnonzero(self.kept)
        return float(self.theta_grid[idx[np.argmax(self.r_star_theta[idx])]])


def theta_grid(size: int) -> np.ndarray:
    return np.arange(size) * (TWO_PI / size)


def directional_uncertainty(d_hat: float, d_tilde: float, gamma: float, theta: float) -> float:
    """Furthest distance from the claimed point along ``theta`` allowed by one disc.

    ``gamma`` is the direction, at the claimed point, pointing away from the
    challenger. Rays that miss the disc, or only meet it behind the claimed
    point, give 0.
    """
    if d_hat < 0 or d_tilde < 0:
        raise ValueError("distances must be non-negative")
    alpha = gamma - theta
    disc = d_hat * d_hat - (d_tilde * math.sin(alpha)) ** 2
    if disc < 0.0:
        return 0.0
    return max(0.0, math.sqrt(disc) - d_tilde * math.cos(alpha))


def _directional_matrix(d_hat: np.ndarray, d_tilde: np.ndarray, gamma: np.ndarray,
                        thetas: np.ndarray) -> np.ndarray:
    alpha = gamma[:, None] - thetas[None, :]
    dt = d_tilde[:, None]
    disc = d_hat[:, None] ** 2 - (dt * np.sin(alpha)) ** 2
    r = np.sqrt(np.maximum(disc, 0.0)) - dt * np.cos(alpha)
    r[disc < 0.0] = 0.0
    return np.maximum(r, 0.0)


def _geometry(claimed: Point, challengers: Sequence[tuple[Point, float]]):
    n = len(challengers)
    d_hat = np.empty(n)
    d_tilde = np.empty(n)
    gamma = np.empty(n)
    for i, (loc, dh) in enumerate(challengers):
        if dh < 0 or not math.isfinite(dh):
            raise ValueError(f"invalid distance estimate: {dh}")
        d_hat[i] = dh
        d_tilde[i] = distance(loc, claimed)
        # direction at the claimed point facing away from the challenger
        gamma[i] = 0.0 if d_tilde[i] == 0.0 else normalize_angle(bearing(claimed, loc) + math.pi)
    return d_hat, d_tilde, gamma


def bound_matrix(claimed: Point, challengers: Sequence[tuple[Point, float]],
                 thetas: np.ndarray) -> np.ndarray:
    """``R_i(theta)`` for every challenger (rows) and direction (columns)."""
    d_hat, d_tilde, gamma = _geometry(claimed, challengers)
    return _directional_matrix(d_hat, d_tilde, gamma, np.asarray(thetas, dtype=float))


def filtered_bounds(claimed: Point, challengers: Sequence[tuple[Point, float]],
                    thetas: np.ndarray, beta: float) -> np.ndarray:
    """The ``(floor(beta*n)+1)``-th smallest bound in each direction."""
    n = len(challengers)
    if n == 0:
        raise EmptyChallengerSet("no challengers")
    k = excluded_count(beta, n)
    if k >= n:
        raise AllExcluded(f"beta={beta} excludes all {n} challengers")
    r = bound_matrix(claimed, challengers, thetas)
    return np.partition(r, k, axis=0)[k]


def cell_upper_bounds(claimed: Point, challengers: Sequence[tuple[Point, float]],
                      grid_size: int, beta: float) -> np.ndarray:
    """Per grid cell, an upper bound on the filtered bound anywhere inside the cell.

    A challenger's bound peaks in the direction facing it and falls off
    monotonically on both sides, so its supremum over a cell sits at the
    cell point angularly closest to that peak. The order statistic is
    monotone in each argument, so filtering the per-challenger suprema
    bounds the filtered value over the whole cell. Unlike the point
    samples this stays sound when the claimed location lies outside some
    discs and the feasible ray window is narrower than one cell.
    """
    n = len(challengers)
    if n == 0:
        raise EmptyChallengerSet("no challengers")
    k = excluded_count(beta, n)
    if k >= n:
        raise AllExcluded(f"beta={beta} excludes all {n} challengers")
    d_hat, d_tilde, gamma = _geometry(claimed, challengers)
    thetas = theta_grid(grid_size)
    peak = gamma + math.pi
    off = np.abs(np.angle(np.exp(1j * (thetas[None, :] - peak[:, None]))))
    # cells are widened by _EPS so a direction on a cell edge belongs to both
    closest = np.maximum(off - math.pi / grid_size - _EPS, 0.0)
    # the bound at angular offset ``closest`` from the peak; written in terms
    # of the offset so that a cell containing the peak gets d_hat + d_tilde exactly
    dt = d_tilde[:, None]
    dh2 = d_hat[:, None] ** 2
    disc = dh2 - (dt * np.sin(closest)) ** 2
    r = np.sqrt(np.maximum(disc, 0.0)) + dt * np.cos(closest)
    # a tangent ray rounds either way; count it as touching (errs upward)
    r[disc < -_EPS * np.maximum(dh2, dt ** 2)] = 0.0
    r = np.maximum(r, 0.0)
    return np.partition(r, k, axis=0)[k]


def grid_slack(profile: UncertaintyProfile, challengers: Sequence[tuple[Point, float]],
               beta: float) -> float:
    """How much the true bound can exceed ``profile.r_star`` between grid directions."""
    cells = cell_upper_bounds(profile.claimed, challengers, profile.grid_size, beta)
    return max(0.0, float(cells[profile.kept].max()) - profile.r_star)


def prove(claimed: Point, challengers: Sequence[tuple[Point, float]],
          cfg: ProvingConfig = ProvingConfig()) -> UncertaintyProfile:
    """Uncertainty profile for ``claimed`` given ``(location, d_hat)`` pairs.

    Unresponsive or disqualified challengers should be passed with
    ``d_hat = 0``.
    """
    thetas = theta_grid(cfg.grid_size)
    r_theta = filtered_bounds(claimed, challengers, thetas, cfg.beta)
    g = cfg.grid_size
    kept = np.ones(g, dtype=bool)

    if cfg.percentile_exclusion > 0.0:
        drop = int(math.ceil(cfg.percentile_exclusion * g - _EPS))
        drop = min(drop, g - 1)
        order = np.argsort(-r_theta, kind="stable")
        kept[order[:drop]] = False

    if cfg.angular_exclusion > 0.0:
        idx = np.flatnonzero(kept)
        center = thetas[idx[np.argmax(r_theta[idx])]]
        gap = np.abs(np.angle(np.exp(1j * (thetas - center))))
        arc = gap <= cfg.angular_exclusion / 2.0 + _EPS
        if np.all(arc | ~kept):
            raise AllExcluded("angular exclusion removes every direction")
        kept &= ~arc

    r_star = float(r_theta[kept].max())
    return UncertaintyProfile(
        claimed=claimed,
        theta_grid=thetas,
        r_star_theta=r_theta,
        r_star=r_star,
        excluded_count=excluded_count(cfg.beta, len(challengers)),
        kept=kept,
    )


def region_boundary(profile: UncertaintyProfile) -> list[Point]:
    """Closed polygon (grid order) bounding every location consistent with the profile."""
    return [destination(profile.claimed, float(t), float(r))
            for t, r in zip(profile.theta_grid, profile.r_star_theta)]


def brute_force_region(circles: Sequence[tuple[PlanarPoint, float]], min_cover: int,
                       grid_step: float) -> np.ndarray:
    """Grid points inside at least ``min_cover`` of the given discs.

    Test oracle. Returns an ``(N, 2)`` array of ``x, y`` coordinates sampled
    on a lattice of spacing ``grid_step`` aligned to the origin, restricted to
    the bounding box of all discs.
    """
    if grid_step <= 0:
        raise ValueError("grid_step must be positive")
    if not circles:
        return np.empty((0, 2))
    cx = np.array([c.x for c, _ in circles])
    cy = np.array([c.y for c, _ in circles])
    rad = np.array([r for _, r in circles], dtype=float)
    lo_x = math.floor((cx - rad).min() / grid_step)
    hi_x = math.ceil((cx + rad).max() / grid_step)
    lo_y = math.floor((cy - rad).min() / grid_step)
    hi_y = math.ceil((cy + rad).max() / grid_step)
    xs = np.arange(lo_x, hi_x + 1) * grid_step
    ys = np.arange(lo_y, hi_y + 1) * grid_step
    out = []
    # row by row keeps memory at O(len(xs) * n)
    for y in ys:
        d2 = (xs[None, :] - cx[:, None]) ** 2 + (y - cy[:, None]) ** 2
        cover = (d2 <= (rad ** 2)[:, None]).sum(axis=0)
        hit = xs[cover >= min_cover]
        if hit.size:
            out.append(np.column_stack([hit, np.full(hit.size, y)]))
    return np.concatenate(out) if out else np.empty((0, 2))
