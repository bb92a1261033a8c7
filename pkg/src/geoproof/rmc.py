"""Robust completion of a partially observed squared-delay matrix.

Decomposes ``M = L + C`` where ``L`` is low rank (honest squared delays)
and ``C`` is column sparse (challengers whose measurements are corrupted),
observing ``M`` only on a mask. Solved with an inexact augmented Lagrangian
iteration; unobserved entries are carried by an auxiliary matrix ``E`` that
lives off the mask, so the equality constraint reads ``M = L + C + E``.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .geo import PlanarPoint

log = logging.getLogger(__name__)


class BadMask(ValueError):
    pass


class DidNotConverge(RuntimeWarning):
    pass


@dataclass
class DelayMatrix:
    entries: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.entries = np.array(self.entries, dtype=float)
        self.mask = np.array(self.mask, dtype=bool)
        m = self.entries.shape[0]
        if self.entries.shape != (m, m) or self.mask.shape != (m, m):
            raise ValueError("entries and mask must be square and the same shape")
        if m < 2:
            raise ValueError("need at least two challengers")
        np.fill_diagonal(self.mask, True)
        np.fill_diagonal(self.entries, 0.0)
        self.entries[~self.mask] = 0.0
        if np.any(self.entries < 0):
            raise ValueError("squared delays must be non-negative")

    @property
    def m(self) -> int:
        return self.entries.shape[0]

    @classmethod
    def from_rtts(cls, rtt: np.ndarray, mask: np.ndarray) -> "DelayMatrix":
        return cls(np.asarray(rtt, dtype=float) ** 2, mask)


@dataclass
class RmcConfig:
    rank_hint: int = 4
    lambda_scale: float = 5.0
    lam: Optional[float] = None
    sample_p: float = 1.0
    tol: float = 1e-7
    max_iter: int = 1000
    detect_threshold: float = 0.1
    beta: Optional[float] = None
    mu_growth: float = 1.05
    mu_max: float = 1e10
    refine: bool = True
    refine_iter: int = 500
    trace: bool = False

    def __post_init__(self):
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        if self.lam is not None and self.lam <= 0:
            raise ValueError("lambda must be positive")
        if not 0 < self.sample_p <= 1:
            raise ValueError("sample_p must be in (0, 1]")

    def weight(self, m: int) -> float:
        if self.lam is not None:
            return self.lam
        return self.lambda_scale / math.sqrt(self.sample_p * m)


@dataclass
class CompletionResult:
    l_matrix: np.ndarray
    c_matrix: np.ndarray
    corrupted: frozenset
    iterations: int
    converged: bool
    residual: float
    column_scores: np.ndarray = field(repr=False)
    objective_trace: list = field(default_factory=list, repr=False)

    def honest(self) -> np.ndarray:
        keep = np.ones(self.l_matrix.shape[0], dtype=bool)
        keep[list(self.corrupted)] = False
        return np.flatnonzero(keep)

    def recovered_rtts(self) -> np.ndarray:
        """RTT estimates (ms) on the honest principal submatrix."""
        idx = self.honest()
        sub = self.l_matrix[np.ix_(idx, idx)]
        return np.sqrt(np.maximum(sub, 0.0))


def _svt(x: np.ndarray, tau: float) -> tuple[np.ndarray, float]:
    u, s, vt = np.linalg.svd(x, full_matrices=False)
    s = np.maximum(s - tau, 0.0)
    r = int(np.count_nonzero(s))
    return (u[:, :r] * s[:r]) @ vt[:r], float(s.sum())


def _column_shrink(x: np.ndarray, tau: float) -> np.ndarray:
    norms = np.linalg.norm(x, axis=0)
    scale = np.where(norms > tau, 1.0 - tau / np.maximum(norms, 1e-300), 0.0)
    return x * scale


def _lagrangian(l_nuc, c, lam, y, resid, mu):
    return (l_nuc + lam * float(np.linalg.norm(c, axis=0).sum())
            + float(np.vdot(y, resid)) + 0.5 * mu * float(np.vdot(resid, resid)))


def _rank_refit(obs: np.ndarray, mask: np.ndarray, start: np.ndarray, rank: int,
                max_iter: int, tol: float) -> Optional[np.ndarray]:
    """Hard-impute a rank-``rank`` fit keeping observed entries fixed; None if it stalls."""
    x = np.where(mask, obs, start)
    for _ in range(max_iter):
        u, s, vt = np.linalg.svd(x, full_matrices=False)
        low = (u[:, :rank] * s[:rank]) @ vt[:rank]
        nxt = np.where(mask, obs, low)
        change = np.linalg.norm(nxt - x) / max(float(np.linalg.norm(nxt)), 1e-300)
        x = nxt
        if change < tol:
            return low
    return None


def complete(matrix: DelayMatrix, cfg: RmcConfig = RmcConfig()) -> CompletionResult:
    """Split the observed matrix into a low-rank part and corrupted columns."""
    m = matrix.m
    mask = matrix.mask
    if m < 8:
        raise BadMask(f"matrix too small: m={m}")
    if mask.sum() < cfg.sample_p * m * m / 2:
        raise BadMask(f"only {int(mask.sum())} observed entries for p={cfg.sample_p}, m={m}")

    obs = matrix.entries * mask
    lam = cfg.weight(m)
    norm_obs = float(np.linalg.norm(obs))
    if norm_obs == 0.0:
        z = np.zeros_like(obs)
        return CompletionResult(z, z.copy(), frozenset(), 0, True, 0.0, np.zeros(m))

    op_norm = float(np.linalg.norm(obs, 2))
    y = obs / max(op_norm, float(np.linalg.norm(obs, axis=0).max()) / lam)
    mu = 1.25 / op_norm
    l = np.zeros_like(obs)
    c = np.zeros_like(obs)
    e = np.zeros_like(obs)
    off = ~mask
    trace: list[tuple[float, float, float, float]] = []
    converged = False
    resid_norm = float("inf")
    it = 0

    for it in range(1, cfg.max_iter + 1):
        inv = 1.0 / mu
        if cfg.trace:
            l_nuc0 = float(np.linalg.svd(l, compute_uv=False).sum())
            a0 = _lagrangian(l_nuc0, c, lam, y, obs - l - c - e, mu)
        l, l_nuc = _svt(obs - c - e + inv * y, inv)
        if cfg.trace:
            a1 = _lagrangian(l_nuc, c, lam, y, obs - l - c - e, mu)
        c = _column_shrink(obs - l - e + inv * y, lam * inv)
        if cfg.trace:
            a2 = _lagrangian(l_nuc, c, lam, y, obs - l - c - e, mu)
        e = np.where(off, obs - l - c + inv * y, 0.0)
        resid = obs - l - c - e
        if cfg.trace:
            trace.append((a0, a1, a2, _lagrangian(l_nuc, c, lam, y, resid, mu)))
        y = y + mu * resid
        mu = min(mu * cfg.mu_growth, cfg.mu_max)
        resid_norm = float(np.linalg.norm(resid)) / norm_obs
        if resid_norm < cfg.tol:
            converged = True
            break

    if not converged:
        warnings.warn(f"robust completion stopped after {it} iterations "
                      f"(residual {resid_norm:.2e})", DidNotConverge, stacklevel=2)

    scores = np.linalg.norm(c, axis=0)
    observed_cols = np.linalg.norm(obs, axis=0)
    threshold = cfg.detect_threshold * float(observed_cols.mean())
    flagged = np.flatnonzero(scores > threshold)
    if cfg.beta is not None:
        cap = int(math.ceil(cfg.beta * m - 1e-9))
        flagged = flagged[np.argsort(-scores[flagged], kind="stable")][:cap]
    corrupted = frozenset(int(i) for i in flagged)

    idx = sorted(corrupted)
    l_out = l.copy()
    c_out = c.copy()
    if cfg.refine:
        # the nuclear-norm penalty shrinks L; once the corrupted challengers
        # are known, refit the honest block at the hinted rank to debias it
        keep = np.setdiff1d(np.arange(m), idx)
        block = np.ix_(keep, keep)
        fit = _rank_refit(obs[block], mask[block], l[block], cfg.rank_hint,
                          cfg.refine_iter, cfg.tol * 1e-3)
        if fit is not None:
            l_out[block] = fit
            c_out[block] = 0.0
        else:
            log.debug("rmc: rank refit did not settle; keeping the ALM estimate")
    l_out[idx, :] = 0.0
    c_out[idx, :] = 0.0
    log.debug("rmc: %d iterations, residual %.2e, %d corrupted", it, resid_norm, len(corrupted))
    return CompletionResult(l_out, c_out, corrupted, it, converged, resid_norm, scores, trace)


def squared_distance_matrix(points: Sequence[PlanarPoint]) -> np.ndarray:
    xy = np.array([[p.x, p.y] for p in points], dtype=float)
    sq = (xy ** 2).sum(axis=1)
    d = sq[:, None] + sq[None, :] - 2.0 * xy @ xy.T
    return np.maximum(d, 0.0)


def numerical_rank(a: np.ndarray, rel_tol: float = 1e-8) -> int:
    s = np.linalg.svd(a, compute_uv=False)
    if s.size == 0 or s[0] == 0.0:
        return 0
    return int(np.count_nonzero(s > rel_tol * s[0]))


def squared_distance_rank_check(points: Sequence[PlanarPoint]) -> int:
    """Numerical rank of the squared Euclidean distance matrix of ``points``."""
    if len(points) < 1:
        raise ValueError("need at least one point")
    return numerical_rank(squared_distance_matrix(points))


def sample_mask(m: int, p: float, seed) -> np.ndarray:
    """Symmetric Bernoulli(p) observation mask with the diagonal observed."""
    if not 0 < p <= 1:
        raise ValueError(f"p must be in (0, 1]: {p}")
    rng = np.random.default_rng(seed)
    upper = np.triu(rng.random((m, m)) < p, k=1)
    mask = upper | upper.T
    np.fill_diagonal(mask, True)
    return mask


def save_matrix(path, matrix: DelayMatrix, p: float, seed) -> tuple[Path, Path]:
    """Write ``<path>`` (values) and ``<path stem>.mask.csv`` (0/1)."""
    path = Path(path)
    mask_path = path.with_name(path.stem + ".mask.csv")
    header = f"m,p,seed={matrix.m},{p!r},{seed}"
    np.savetxt(path, matrix.entries, delimiter=",", fmt="%.17g", header=header)
    np.savetxt(mask_path, matrix.mask.astype(int), delimiter=",", fmt="%d", header=header)
    return path, mask_path


def load_matrix(path, mask_path=None) -> DelayMatrix:
    path = Path(path)
    mask_path = Path(mask_path) if mask_path else path.with_name(path.stem + ".mask.csv")
    entries = np.loadtxt(path, delimiter=",", ndmin=2)
    mask = np.loadtxt(mask_path, delimiter=",", ndmin=2).astype(bool)
    return DelayMatrix(entries, mask)
