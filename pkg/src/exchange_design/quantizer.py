"""Strike selection as a one-dimensional p-power quantization problem.

The demand for strikes is an empirical discrete law. Listing ``n`` strikes
``K_1 <= ... <= K_n`` costs a market taker ``min_j |K - K_j|**p`` when the
strike they wished for is ``K``; the exchange minimizes the average of that
regret with Lloyd's algorithm. An exhaustive search over a finite candidate
grid is provided as an independent check.
"""

from __future__ import annotations

import itertools
import logging
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.optimize import brentq

from .errors import ValidationError

logger = logging.getLogger(__name__)

DEFAULT_EPSILON = 1e-8
DEFAULT_MAX_ITER = 10_000
DEFAULT_SEEDS = 20


@dataclass(frozen=True)
class DemandDistribution:
    """Discrete law of requested strikes (moneyness, % of spot)."""

    atoms: np.ndarray
    probs: np.ndarray
    upper: float

    def __post_init__(self) -> None:
        atoms = np.asarray(self.atoms, dtype=float)
        probs = np.asarray(self.probs, dtype=float)
        if atoms.ndim != 1 or atoms.shape != probs.shape or atoms.size == 0:
            raise ValidationError("atoms and probs must be non-empty 1-d arrays of equal length")
        if np.any(np.diff(atoms) <= 0):
            raise ValidationError("atoms must be strictly increasing")
        if atoms[0] < 0 or atoms[-1] > self.upper or self.upper <= 0:
            raise ValidationError(f"atoms must lie in [0, {self.upper}]")
        if np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-12:
            raise ValidationError("probs must be non-negative and sum to 1")
        object.__setattr__(self, "atoms", atoms)
        object.__setattr__(self, "probs", probs)

    @property
    def support(self) -> np.ndarray:
        return self.atoms[self.probs > 0]

    def mean(self) -> float:
        return float(self.probs @ self.atoms)

    def quantile(self, q: float) -> float:
        """Inverse CDF: the smallest atom whose cumulative mass reaches ``q``."""
        cdf = np.cumsum(self.probs)
        idx = int(np.searchsorted(cdf, q - 1e-12, side="left"))
        return float(self.atoms[min(idx, self.atoms.size - 1)])

    def mode(self) -> float:
        return float(self.atoms[np.argmax(self.probs)])

    def scaled(self, factor: float) -> DemandDistribution:
        return DemandDistribution(self.atoms * factor, self.probs, self.upper * factor)


@dataclass
class StrikeSet:
    strikes: np.ndarray
    p: float
    regret: float
    cells: list[tuple[float, float]]
    iterations: int = 0
    converged: bool = False
    seed: int | None = None
    history: list[float] = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return {
            "p": self.p,
            "strikes": [float(k) for k in self.strikes],
            "regret": float(self.regret),
            "iterations": int(self.iterations),
            "converged": bool(self.converged),
        }


def build_empirical_distribution(
    rows: Iterable[tuple[float, float]],
    spot: float | None = None,
    upper: float | None = None,
) -> DemandDistribution:
    """Turn ``(strike, count)`` rows into a normalized demand distribution.

    Duplicate strikes are merged by summing counts. Atoms with zero count are
    kept (with zero probability) so the support hull reflects every listed
    strike. When ``spot`` is given, strikes are absolute prices and are
    converted to moneyness ``100 * K / spot``.
    """
    totals: dict[float, float] = {}
    for strike, count in rows:
        if count < 0:
            raise ValidationError(f"invalid count {count} for strike {strike}")
        k = float(strike)
        if spot is not None:
            k = 100.0 * k / spot
        totals[k] = totals.get(k, 0.0) + float(count)
    mass = sum(totals.values())
    if mass <= 0:
        raise ValidationError("empty distribution")
    atoms = np.array(sorted(totals))
    counts = np.array([totals[k] for k in atoms])
    if upper is None:
        upper = float(atoms[-1]) if atoms[-1] > 0 else 1.0
    return DemandDistribution(atoms, counts / mass, float(upper))


def _boundaries(strikes: np.ndarray) -> np.ndarray:
    return 0.5 * (strikes[1:] + strikes[:-1])


def assign_cells(strikes: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Cell index of each point; a point on a boundary goes to the lower cell."""
    return np.searchsorted(_boundaries(np.asarray(strikes, dtype=float)), points, side="left")


def voronoi_cells(strikes: Sequence[float], upper: float) -> list[tuple[float, float]]:
    k = np.asarray(strikes, dtype=float)
    if k.ndim != 1 or k.size == 0:
        raise ValidationError("strikes must be a non-empty 1-d sequence")
    if np.any(np.diff(k) <= 0):
        raise ValidationError("strikes must be strictly increasing")
    if k[0] < 0 or k[-1] > upper:
        raise ValidationError(f"strikes must lie in [0, {upper}]")
    edges = np.concatenate(([0.0], _boundaries(k), [upper]))
    return [(float(lo), float(hi)) for lo, hi in zip(edges[:-1], edges[1:])]


def _cells_loose(strikes: np.ndarray, upper: float) -> list[tuple[float, float]]:
    # duplicates allowed: degenerate cells have zero width
    edges = np.concatenate(([0.0], _boundaries(strikes), [max(upper, strikes[-1])]))
    return [(float(lo), float(hi)) for lo, hi in zip(edges[:-1], edges[1:])]


def average_regret(strikes: Sequence[float], dist: DemandDistribution, p: float) -> float:
    k = np.asarray(strikes, dtype=float)
    if k.size == 0:
        raise ValidationError("strikes must be non-empty")
    dist_to_nearest = np.min(np.abs(dist.atoms[:, None] - k[None, :]), axis=1)
    return float(dist.probs @ dist_to_nearest**p)


def _atom_regrets(strikes: np.ndarray, dist: DemandDistribution, p: float) -> np.ndarray:
    d = np.min(np.abs(dist.atoms[:, None] - strikes[None, :]), axis=1)
    return dist.probs * d**p


def _ratio_update(x: np.ndarray, w: np.ndarray, k: float, p: float) -> float:
    weights = w * np.abs(x - k) ** (p - 2)
    denom = weights.sum()
    if denom <= 0:
        return k
    return float(weights @ x / denom)


def _exact_update(x: np.ndarray, w: np.ndarray, p: float) -> float:
    """Minimizer of sum(w * |x - k|**p) over k, via its monotone first-order condition."""
    support = x[w > 0]
    lo, hi = float(support.min()), float(support.max())
    if lo == hi:
        return lo

    def grad(k: float) -> float:
        d = x - k
        return float(w @ (d * np.abs(d) ** (p - 2)))

    return float(brentq(grad, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500))


def lloyd_step(
    strikes: Sequence[float],
    dist: DemandDistribution,
    p: float,
    method: str = "ratio",
) -> np.ndarray:
    """One Lloyd iteration: assign atoms to cells, then move every strike.

    ``method="ratio"`` is the one-shot weighted mean with weights
    ``|K - K_i|**(p-2)`` restricted to the cell (the conditional mean when
    ``p == 2``). ``method="exact"`` moves each strike to the exact minimizer
    of the cell's p-regret. Both maps share the same fixed points.

    A cell that receives no mass is reseeded at the highest-regret atom that is
    not already a strike.
    """
    if p < 2:
        raise ValidationError("p must be >= 2")
    if method not in ("ratio", "exact"):
        raise ValidationError(f"unknown method {method!r}")
    k = np.sort(np.asarray(strikes, dtype=float))
    cell = assign_cells(k, dist.atoms)
    new = k.copy()
    empty = []
    for i in range(k.size):
        mask = cell == i
        w = dist.probs[mask]
        if w.sum() <= 0:
            empty.append(i)
            continue
        x = dist.atoms[mask]
        if p == 2:
            new[i] = float(w @ x / w.sum())
        elif method == "ratio":
            new[i] = _ratio_update(x, w, k[i], p)
        else:
            new[i] = _exact_update(x, w, p)
    if empty:
        regrets = _atom_regrets(new, dist, p)
        taken = set(new.tolist())
        for i in empty:
            order = np.argsort(-regrets, kind="stable")
            for j in order:
                atom = float(dist.atoms[j])
                if atom not in taken and dist.probs[j] > 0:
                    new[i] = atom
                    taken.add(atom)
                    regrets[j] = 0.0
                    break
    return np.sort(new)


def _initial_strikes(dist: DemandDistribution, n: int, rng: np.random.Generator) -> np.ndarray:
    lo, hi = dist.quantile(0.10), dist.quantile(0.90)
    return np.sort(rng.uniform(lo, hi, size=n))


def default_method(p: float) -> str:
    return "ratio" if p == 2 else "exact"


def lloyd_run(
    dist: DemandDistribution,
    n: int,
    p: float = 2.0,
    eps: float = DEFAULT_EPSILON,
    seed: int = 0,
    max_iter: int = DEFAULT_MAX_ITER,
    method: str | None = None,
    init: Sequence[float] | None = None,
) -> StrikeSet:
    """Run Lloyd's algorithm from a seeded uniform draw between the 10th and 90th percentile.

    The run stops once the strikes move less than ``eps`` in l1 norm. The
    returned strikes are the last iterate ``K`` whose Lloyd image moved less
    than ``eps``, so a converged result is a certified approximate fixed point.
    """
    if n < 1:
        raise ValidationError("n must be >= 1")
    if eps <= 0 or max_iter < 1:
        raise ValidationError("eps must be > 0 and max_iter >= 1")
    if p < 2:
        raise ValidationError("p must be >= 2")
    method = method or default_method(p)
    if n > dist.support.size:
        warnings.warn(
            f"n={n} exceeds the {dist.support.size} atoms carrying mass; duplicate strikes are possible",
            stacklevel=2,
        )
    rng = np.random.default_rng(seed)
    k = np.sort(np.asarray(init, dtype=float)) if init is not None else _initial_strikes(dist, n, rng)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        nxt = lloyd_step(k, dist, p, method)
        if np.abs(nxt - k).sum() < eps:
            converged = True
            break
        k = nxt
    logger.debug("lloyd seed=%s p=%s iterations=%d converged=%s", seed, p, it, converged)
    return StrikeSet(
        strikes=k,
        p=p,
        regret=average_regret(k, dist, p),
        cells=_cells_loose(k, dist.upper),
        iterations=it,
        converged=converged,
        seed=seed,
    )


def lloyd_best_of(
    dist: DemandDistribution,
    n: int,
    p: float = 2.0,
    seeds: int | Sequence[int] = DEFAULT_SEEDS,
    eps: float = DEFAULT_EPSILON,
    max_iter: int = DEFAULT_MAX_ITER,
    method: str | None = None,
) -> StrikeSet:
    """Best-regret result over several seeded runs (lowest seed wins ties)."""
    seed_list = list(range(seeds)) if isinstance(seeds, int) else list(seeds)
    if not seed_list:
        raise ValidationError("at least one seed is required")
    best: StrikeSet | None = None
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        runs = [lloyd_run(dist, n, p, eps, s, max_iter, method) for s in seed_list]
    for run in runs:
        if best is None or run.regret < best.regret:
            best = run
    assert best is not None
    return best


def contiguous_means(dist: DemandDistribution, p: float = 2.0) -> np.ndarray:
    """Atoms plus the cell-optimal point of every contiguous run of atoms.

    For ``p == 2`` every optimal quantizer of a discrete law uses only these
    points, which makes them a complete candidate grid for exhaustive search.
    """
    x, w = dist.atoms, dist.probs
    pts = set(x.tolist())
    for i, j in itertools.combinations(range(x.size), 2):
        ww = w[i : j + 1]
        if ww.sum() <= 0:
            continue
        xx = x[i : j + 1]
        pts.add(float(ww @ xx / ww.sum()) if p == 2 else _exact_update(xx, ww, p))
    return np.array(sorted(pts))


def brute_force_quantizer(
    dist: DemandDistribution,
    n: int,
    p: float = 2.0,
    grid: Sequence[float] | None = None,
) -> StrikeSet:
    """Regret-minimizing n-subset of a finite candidate grid (exhaustive enumeration)."""
    cand = np.unique(np.asarray(dist.atoms if grid is None else grid, dtype=float))
    if cand.size < n:
        raise ValidationError(f"grid has {cand.size} points, fewer than n={n}")
    # |atom - candidate|^p, reused across all combinations
    cost = np.abs(dist.atoms[:, None] - cand[None, :]) ** p
    best_val = np.inf
    best_idx: tuple[int, ...] = ()
    for idx in itertools.combinations(range(cand.size), n):
        val = float(dist.probs @ cost[:, idx].min(axis=1))
        if val < best_val:
            best_val, best_idx = val, idx
    strikes = cand[list(best_idx)]
    return StrikeSet(
        strikes=strikes,
        p=p,
        regret=best_val,
        cells=_cells_loose(strikes, dist.upper),
        iterations=0,
        converged=True,
    )


def merge_close_strikes(result: StrikeSet, dist: DemandDistribution, tol: float) -> StrikeSet:
    """Drop strikes closer than ``tol`` to their left neighbour and recompute the regret."""
    kept = [float(result.strikes[0])]
    for k in result.strikes[1:]:
        if k - kept[-1] >= tol:
            kept.append(float(k))
    strikes = np.array(kept)
    return StrikeSet(
        strikes=strikes,
        p=result.p,
        regret=average_regret(strikes, dist, result.p),
        cells=_cells_loose(strikes, dist.upper),
        iterations=result.iterations,
        converged=result.converged,
        seed=result.seed,
    )
