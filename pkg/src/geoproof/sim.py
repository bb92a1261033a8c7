"""Seeded simulation worlds and the experiment runners built on them.

Randomness is keyed: ``rng_for(seed, entity, stream)`` derives an
independent generator per (world seed, entity, purpose), so adding or
reordering adversaries never perturbs an honest challenger's noise draw.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional, Sequence

import numpy as np

from . import poig, rmc
from .geo import PlanarPoint, distance
from .trig import ProvingConfig, UncertaintyProfile, excluded_count, grid_slack, prove

# stream ids for rng_for
_NOISE, _BYZ, _LAYOUT, _CORRUPT, _WALDO, _DELAY, _ATTACK = range(7)

ADVERSARY_KINDS = ("none", "waldo_inflate", "challenger_deflate",
                   "challenger_distance_double", "vpn_relay", "mixed")


def rng_for(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, key)]))


def uniform_disk(rng: np.random.Generator, n: int, radius: float = 1.0) -> list[PlanarPoint]:
    r = radius * np.sqrt(rng.random(n))
    phi = rng.random(n) * 2 * np.pi
    return [PlanarPoint(float(a), float(b)) for a, b in zip(r * np.cos(phi), r * np.sin(phi))]


@dataclass(frozen=True)
class AdversaryModel:
    """What the corrupted parties do.

    ``delta``: distance a Byzantine Waldo adds to every honest estimate.
    ``deflate_to``: fixed value reported by corrupted challengers; ``None``
    draws arbitrary values in ``[0, max_report]`` (endpoints included).
    ``relay``: VPN exit point the Waldo's traffic detours through.
    """

    kind: str = "none"
    delta: float = 0.0
    deflate_to: Optional[float] = 0.0
    max_report: float = 20.0
    relay: Optional[PlanarPoint] = None

    def __post_init__(self):
        if self.kind not in ADVERSARY_KINDS:
            raise ValueError(f"unknown adversary kind {self.kind}")

    @property
    def corrupts_challengers(self) -> bool:
        return self.kind in ("challenger_deflate", "challenger_distance_double", "mixed")


@dataclass(frozen=True)
class LinearDelayModel:
    """``t = c*d + b + noise`` with ``c`` in ms/km and ``b`` in ms."""

    c: float = 0.01
    b: float = 1.0
    noise: str = "one_sided_gaussian"
    sigma: float = 2.0
    lam: float = 1.0

    def delays(self, d: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        d = np.asarray(d, dtype=float)
        if self.noise == "gaussian":
            eps = rng.normal(0.0, self.sigma, d.shape)
        elif self.noise == "one_sided_gaussian":
            eps = np.abs(rng.normal(0.0, self.sigma, d.shape))
        elif self.noise == "exponential":
            eps = rng.exponential(1.0 / self.lam, d.shape)
        else:
            raise ValueError(f"unknown noise model {self.noise}")
        return self.c * d + self.b + eps


@dataclass(frozen=True)
class SimWorld:
    seed: int
    challengers: tuple[PlanarPoint, ...]
    waldo_true: PlanarPoint
    waldo_claimed: PlanarPoint
    sigma: float
    beta: float
    adversary: AdversaryModel = AdversaryModel()
    corrupted: frozenset = field(default_factory=frozenset)

    @property
    def n(self) -> int:
        return len(self.challengers)


def make_world(n: int, beta: float, sigma: float, seed: int,
               adversary: AdversaryModel = AdversaryModel(), n_corrupted: Optional[int] = None,
               waldo_true: PlanarPoint = PlanarPoint(0.0, 0.0),
               waldo_claimed: Optional[PlanarPoint] = None) -> SimWorld:
    """Challengers uniform in the unit disk; ``floor(beta*n)`` of them corrupted by default."""
    pts = tuple(uniform_disk(rng_for(seed, _LAYOUT), n))
    corrupted: frozenset = frozenset()
    if adversary.corrupts_challengers:
        k = excluded_count(beta, n) if n_corrupted is None else n_corrupted
        idx = rng_for(seed, _CORRUPT).choice(n, size=k, replace=False)
        corrupted = frozenset(int(i) for i in idx)
    claimed = waldo_claimed if waldo_claimed is not None else waldo_true
    return SimWorld(seed, pts, waldo_true, claimed, sigma, beta, adversary, corrupted)


def simulate_measurement(world: SimWorld, i: int) -> float:
    """Distance estimate reported for challenger ``i``."""
    adv = world.adversary
    c = world.challengers[i]
    if i in world.corrupted and adv.kind in ("challenger_deflate", "mixed"):
        if adv.deflate_to is not None:
            return float(adv.deflate_to)
        rng = rng_for(world.seed, i, _BYZ)
        u = rng.random()
        if u < 0.25:
            return 0.0
        if u < 0.5:
            return float(adv.max_report)
        return float(rng.uniform(0.0, adv.max_report))
    if adv.kind == "vpn_relay" and adv.relay is not None:
        d = distance(c, adv.relay) + distance(adv.relay, world.waldo_true)
    else:
        d = distance(c, world.waldo_true)
    d_hat = d + abs(float(rng_for(world.seed, i, _NOISE).normal(0.0, world.sigma))) if world.sigma > 0 else d
    if adv.kind in ("waldo_inflate", "mixed", "vpn_relay"):
        d_hat += adv.delta
    if i in world.corrupted and adv.kind == "challenger_distance_double":
        d_hat *= 2.0
    return d_hat


def measurements(world: SimWorld) -> list[tuple[PlanarPoint, float]]:
    return [(c, simulate_measurement(world, i)) for i, c in enumerate(world.challengers)]


def run_world(world: SimWorld, grid_size: int = 360) -> UncertaintyProfile:
    return prove(world.waldo_claimed, measurements(world),
                 ProvingConfig(beta=world.beta, grid_size=grid_size))


def adjacent_jump(profile: UncertaintyProfile) -> float:
    """Largest jump between neighbouring grid directions (wrapping around)."""
    r = profile.r_star_theta
    return float(np.abs(r - np.roll(r, -1)).max())


# soundness harness

SOUNDNESS_MODELS = ("challenger_deflate", "waldo_inflate", "vpn_relay", "mixed")


def random_adversarial_world(model: str, seed: int) -> SimWorld:
    """One randomized world for the soundness harness; corruption never exceeds floor(beta*n)."""
    rng = rng_for(seed, _ATTACK)
    n = int(rng.integers(3, 51))
    beta = float(rng.uniform(0.0, 0.5))
    sigma = float(rng.choice([0.0, 0.02, 0.1, 0.3]))
    k = excluded_count(beta, n)
    claimed = uniform_disk(rng, 1)[0]
    if model == "challenger_deflate":
        adv = AdversaryModel("challenger_deflate", deflate_to=None, max_report=20.0)
        return make_world(n, beta, sigma, seed, adv, n_corrupted=int(rng.integers(0, k + 1)),
                          waldo_claimed=claimed)
    delta = float(rng.uniform(0.0, 1.0))
    if model == "waldo_inflate":
        return make_world(n, beta, sigma, seed, AdversaryModel("waldo_inflate", delta=delta),
                          waldo_claimed=claimed)
    if model == "vpn_relay":
        phi = rng.uniform(0, 2 * np.pi)
        r = rng.uniform(1.0, 2.0)
        true = PlanarPoint(float(r * np.cos(phi)), float(r * np.sin(phi)))
        adv = AdversaryModel("vpn_relay", delta=0.0, relay=claimed)
        return make_world(n, beta, sigma, seed, adv, waldo_true=true, waldo_claimed=claimed)
    if model == "mixed":
        adv = AdversaryModel("mixed", delta=delta, deflate_to=None, max_report=20.0)
        return make_world(n, beta, sigma, seed, adv, n_corrupted=int(rng.integers(0, k + 1)),
                          waldo_claimed=claimed)
    raise ValueError(f"unknown soundness model {model}")


@dataclass(frozen=True)
class SoundnessOutcome:
    seed: int
    deviation: float
    r_star: float
    slack: float
    adjacent_jump: float

    @property
    def holds(self) -> bool:
        return self.deviation <= self.r_star + self.slack + 1e-9


def soundness_trials(model: str, count: int, seed: int = 0,
                     grid_size: int = 360) -> list[SoundnessOutcome]:
    out = []
    for j in range(count):
        w = random_adversarial_world(model, seed * 1_000_003 + j)
        obs = measurements(w)
        prof = prove(w.waldo_claimed, obs, ProvingConfig(beta=w.beta, grid_size=grid_size))
        out.append(SoundnessOutcome(w.seed, distance(w.waldo_true, w.waldo_claimed), prof.r_star,
                                    grid_slack(prof, obs, w.beta), adjacent_jump(prof)))
    return out


def vpn_inflation_trial(seed: int, n: int = 20, beta: float = 0.2, sigma: float = 0.1,
                        grid_size: int = 360) -> tuple[float, float]:
    """R* for the same honest Waldo measured directly and through a random relay."""
    direct = make_world(n, beta, sigma, seed)
    relay = uniform_disk(rng_for(seed, _WALDO), 1, radius=2.0)[0]
    vpn = replace(direct, adversary=AdversaryModel("vpn_relay", relay=relay))
    return run_world(direct, grid_size).r_star, run_world(vpn, grid_size).r_star


# uncertainty sweeps

def sweep_uncertainty(n_list: Sequence[int], beta_list: Sequence[float], sigma: float,
                      replicates: int, seed: int = 0, grid_size: int = 360,
                      adversary: AdversaryModel = AdversaryModel("challenger_deflate")) -> list[dict]:
    """Mean R* over ``replicates`` honest-Waldo worlds per ``(n, beta)``."""
    if replicates < 1:
        raise ValueError("replicates must be >= 1")
    rows = []
    for n in n_list:
        for beta in beta_list:
            vals = [run_world(make_world(n, beta, sigma, seed * 100_003 + r, adversary), grid_size).r_star
                    for r in range(replicates)]
            rows.append({"n": n, "beta": beta, "sigma": sigma, "mean_r_star": float(np.mean(vals))})
    return rows


# calibration experiments

def calibration_samples(k: int, beta: float, model: LinearDelayModel, seed: int,
                        max_dist: float = 2000.0, attack: str = "double"
                        ) -> tuple[list[poig.DelayDistanceSample], frozenset]:
    """``k`` peers at uniform distances; ``floor(beta*k)`` of them Byzantine.

    With ``attack="double"`` Byzantine peers claim twice their distance at
    the same delay.
    """
    d = rng_for(seed, 0, _LAYOUT).uniform(0.0, max_dist, k)
    t = model.delays(d, rng_for(seed, 0, _DELAY))
    t = np.maximum(t, 1e-6)
    n_bad = excluded_count(beta, k)
    bad = frozenset(int(i) for i in rng_for(seed, 0, _CORRUPT).choice(k, n_bad, replace=False))
    out = []
    for j in range(k):
        dist = float(d[j])
        if j in bad and attack == "double":
            dist *= 2.0
        out.append(poig.DelayDistanceSample(f"p{j:05d}", float(t[j]), dist))
    return out, bad


def calibration_comparison(k: int, beta: float, model: LinearDelayModel = LinearDelayModel(),
                           seed: int = 0, eta: float = 1.2, points: int = 200) -> dict:
    """Envelope variants evaluated on a common delay grid.

    Returns ``delay`` plus curves ``honest`` (Byzantine samples left out),
    ``baseline`` (all samples), ``ratio_filtered``, ``bin_filtered`` and
    ``corrected`` (``eta`` times ratio-filtered).
    """
    if k < 10:
        raise ValueError("k must be >= 10")
    samples, bad = calibration_samples(k, beta, model, seed)
    honest = [s for j, s in enumerate(samples) if j not in bad]
    maps = {
        "honest": poig.build_monotone(honest),
        "baseline": poig.build_monotone(samples),
        "ratio_filtered": poig.build_monotone(poig.ratio_filter(samples, beta)),
    }
    maps["bin_filtered"] = (poig.build_monotone(poig.bin_filter(samples, beta)) if beta > 0
                            else maps["baseline"])
    maps["corrected"] = maps["ratio_filtered"].with_eta(eta)
    lo = min(s.rtt for s in samples)
    hi = min(m.t_max for m in maps.values())
    grid = np.linspace(lo, hi, points)
    curves = {name: poig.evaluate_many(m, grid) for name, m in maps.items()}
    curves["delay"] = grid
    return curves


def envelope_deviation(curve: np.ndarray, reference: np.ndarray) -> float:
    return float(np.mean(np.abs(curve - reference)))


def ols_estimate(d: Sequence[float], t: Sequence[float], sigma: float) -> tuple[float, float]:
    """Least-squares slope of delay on distance and its accuracy ``sum((d-mean)^2)/sigma^2``."""
    d = np.asarray(d, dtype=float)
    t = np.asarray(t, dtype=float)
    dd = d - d.mean()
    sxx = float(dd @ dd)
    if sxx == 0.0:
        raise poig.DegenerateInput("all distances equal")
    return float(dd @ (t - t.mean())) / sxx, sxx / sigma ** 2


def mle_exponential_estimate(d: Sequence[float], t: Sequence[float]) -> float:
    """Conservative slope estimate ``min(t/d)`` under exponential delay noise."""
    d = np.asarray(d, dtype=float)
    t = np.asarray(t, dtype=float)
    if d.size == 0 or np.any(d <= 0):
        raise poig.DegenerateInput("distances must be positive")
    return float(np.min(t / d))


def mle_accuracy(c_hat: float, c: float) -> float:
    return 1.0 - abs(c_hat - c) / c


def mle_under_attack(beta: float, seed: int, k: int = 400,
                     model: LinearDelayModel = LinearDelayModel(b=0.0, noise="exponential", lam=1.0),
                     max_dist: float = 2000.0) -> dict:
    """MLE slope with and without ratio filtering when ``floor(beta*k)`` peers double distance."""
    samples, _ = calibration_samples(k, beta, model, seed, max_dist=max_dist)
    samples = [s for s in samples if s.dist > 0]
    raw = mle_exponential_estimate([s.dist for s in samples], [s.rtt for s in samples])
    kept = poig.ratio_filter(samples, beta)
    filt = mle_exponential_estimate([s.dist for s in kept], [s.rtt for s in kept])
    return {"beta": beta, "seed": seed, "c": model.c, "c_hat_raw": raw, "c_hat_filtered": filt,
            "acc_raw": mle_accuracy(raw, model.c), "acc_filtered": mle_accuracy(filt, model.c)}


def bestline_vs_monotone(seed: int, k: int = 200,
                         model: LinearDelayModel = LinearDelayModel()) -> tuple[float, float]:
    """Mean mapped distance at the observed delays for the envelope and the CBG line."""
    samples, _ = calibration_samples(k, 0.0, model, seed)
    mono = poig.build_monotone(samples)
    a, b = poig.cbg_bestline(samples)
    rtts = np.array([s.rtt for s in samples])
    return float(poig.evaluate_many(mono, rtts).mean()), float((a * rtts + b).mean())


# matrix completion experiments

def planted_points(m: int, seed: int) -> list[PlanarPoint]:
    """Challenger layout used by ``planted_delay_matrix`` for the same seed."""
    return uniform_disk(rng_for(seed, _LAYOUT), m)


def planted_delay_matrix(m: int, beta: float, p: float, seed: int, symmetric: bool = True,
                         noise: float = 0.0) -> tuple[rmc.DelayMatrix, frozenset]:
    """Squared planar distances with ``round(beta*m)`` challengers' rows/columns replaced."""
    truth = rmc.squared_distance_matrix(planted_points(m, seed))
    if noise > 0:
        e = rng_for(seed, _NOISE).normal(0.0, noise, truth.shape)
        truth = np.maximum(truth + (e + e.T) / 2.0, 0.0)
    mask = rmc.sample_mask(m, p, rng_for(seed, _DELAY))
    k = int(round(beta * m))
    rng = rng_for(seed, _CORRUPT)
    bad = rng.choice(m, size=k, replace=False)
    obs = truth.copy()
    obs[:, bad] = rng.random((m, k)) * truth.max()
    if symmetric:
        obs[bad, :] = obs[:, bad].T
        block = np.ix_(bad, bad)
        obs[block] = np.triu(obs[block]) + np.triu(obs[block], 1).T
    return rmc.DelayMatrix(obs, mask), frozenset(int(i) for i in bad)


def detection_accuracy(found: Iterable[int], planted: Iterable[int], m: int) -> float:
    return 1.0 - len(set(found) ^ set(planted)) / m


def rmc_grid(m: int = 100, beta_list: Sequence[float] = (0.1, 0.2, 0.3, 0.4),
             p_list: Sequence[float] = (0.3, 0.4, 0.5, 0.6), seeds: Sequence[int] = range(10),
             cfg: rmc.RmcConfig = rmc.RmcConfig()) -> list[dict]:
    """Mean column-classification accuracy per ``(beta, p)`` cell."""
    rows = []
    for beta in beta_list:
        for p in p_list:
            accs, fprs = [], []
            for s in seeds:
                matrix, bad = planted_delay_matrix(m, beta, p, s)
                run_cfg = replace(cfg, sample_p=p, beta=beta if beta > 0 else None, refine=False)
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", rmc.DidNotConverge)
                    res = rmc.complete(matrix, run_cfg)
                accs.append(detection_accuracy(res.corrupted, bad, m))
                fprs.append(len(res.corrupted - bad) / max(1, m - len(bad)))
            rows.append({"beta": beta, "p": p, "accuracy": float(np.mean(accs)),
                         "false_positive_rate": float(np.mean(fprs))})
    return rows
