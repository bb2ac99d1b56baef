"""Optimal make-take-fee contract: value function, incentives and induced spreads.

The exchange's value function enters through ``Ut = (-U)**(-C/(sigma*eta*(1-omega)))``,
which solves the linear backward equation

    0 = dUt/dt - kappa Q^2 Ut + sum_{k,i} Chat_k Ut(t, Q - Delta_k phi(i)) 1{phi(i) Q > -q_bar},
    Ut(T, Q) = 1,

on the aggregated inventory ``Q``. Incentives per trade follow from ratios of
``U`` at ``Q`` and at the post-trade inventory; the market maker's spreads
follow from the incentives. A Feynman-Kac Monte Carlo estimator of ``Ut`` is
provided as an independent check of the finite-difference solution.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import sparse

from .errors import NumericalError, ValidationError
from .market import (
    PHI_ARRAY,
    SIDES,
    ModelParams,
    OptionSpec,
    cap_open,
    deltas_of,
    fees_of,
    mm_optimal_spread,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class DerivedConstants:
    a: float
    b: float
    x1: np.ndarray
    x2: float
    O: np.ndarray
    C_tilde: np.ndarray
    C_hat: np.ndarray
    kappa: float
    exponent: float  # sigma * eta * (1 - omega) / C, so that U = -Ut**(-exponent)
    intercept: float

    @property
    def z_terminal(self) -> np.ndarray:
        """Per-option trade incentive when U(t, Q) equals U at the post-trade inventory."""
        return np.log(self.b * self.x2 / (self.a * self.x1)) / (self.a - self.b)


def derived_constants(params: ModelParams, specs: Sequence[OptionSpec]) -> DerivedConstants:
    if not params.omega < 1:
        raise ValidationError("omega must lie in [0, 1)")
    C, sigma, gamma, eta, omega = params.C, params.sigma, params.gamma, params.eta, params.omega
    ratio = 1.0 + sigma * gamma / C
    intercept = params.spread_intercept
    a = eta * (1.0 - omega) + C / sigma
    b = C / sigma
    c = np.array([s.weight for s in specs], dtype=float)
    thresholds = np.array([s.spread_threshold for s in specs], dtype=float)
    x1 = np.exp(-eta * (c + omega * (thresholds - intercept)))
    x2 = 1.0 + eta * (1.0 - 1.0 / ratio) / gamma
    O = ratio ** (-C / (gamma * sigma)) * np.exp(-b * fees_of(specs))
    # maximized jump term of the exchange's Hamiltonian: A * O * x2 * (x2/x1)^(b/(a-b)) * (b/a)^(b/(a-b)) * (1 - b/a)
    C_tilde = x2 * (x2 / x1) ** (b / (a - b)) * O * ((b / a) ** (b / (a - b)) - (b / a) ** (a / (a - b)))
    C_hat = C_tilde * C / (sigma * eta * (1.0 - omega))
    kappa = C * gamma * eta / (gamma + eta) * sigma / (2.0 * (1.0 - omega))
    # A scales every arrival intensity; A = 0 switches the order flow off entirely.
    C_tilde = C_tilde * params.A
    C_hat = C_hat * params.A
    consts = DerivedConstants(
        a=a,
        b=b,
        x1=x1,
        x2=x2,
        O=O,
        C_tilde=C_tilde,
        C_hat=C_hat,
        kappa=kappa,
        exponent=sigma * eta * (1.0 - omega) / C,
        intercept=intercept,
    )
    if not (a > b > 0 and x2 > 1 and np.all(O > 0) and kappa > 0):
        raise NumericalError("derived constants violate their positivity constraints")
    if params.A > 0 and not (np.all(C_tilde > 0) and np.all(C_hat > 0)):
        raise NumericalError("derived constants violate their positivity constraints")
    return consts


@dataclass(frozen=True)
class GridConfig:
    dt: float | None = None
    h_Q: float = 0.025
    n_store: int = 1001
    # used when dt is None: the step actually taken is min(default_dt, stability bound)
    default_dt: float = 1e-2

    def __post_init__(self) -> None:
        if self.dt is not None and self.dt <= 0:
            raise ValidationError("dt must be > 0")
        if self.h_Q <= 0:
            raise ValidationError("h_Q must be > 0")
        if self.n_store < 2:
            raise ValidationError("n_store must be >= 2")


@dataclass
class ValueGrid:
    """``log Ut`` on stored time slices times a uniform inventory grid."""

    times: np.ndarray
    q: np.ndarray
    log_values: np.ndarray
    h_Q: float
    dt: float
    steps: int
    T: float
    q_bar: float

    @property
    def values(self) -> np.ndarray:
        return np.exp(self.log_values)

    @property
    def q_min(self) -> float:
        return float(self.q[0])

    @property
    def q_max(self) -> float:
        return float(self.q[-1])

    def _log_row(self, m: int, Q) -> np.ndarray:
        Q = np.asarray(Q, dtype=float)
        if np.any(Q < self.q_min - 1e-12) or np.any(Q > self.q_max + 1e-12):
            raise NumericalError("domain underrun: inventory outside the value grid")
        row = self.log_values[m]
        pos = np.clip((Q - self.q_min) / self.h_Q, 0.0, self.q.size - 1)
        lo = np.minimum(np.floor(pos + 1e-9).astype(np.int64), self.q.size - 2)
        w = np.clip(pos - lo, 0.0, 1.0)
        # linear interpolation of Ut, evaluated in logs
        a, b = row[lo], row[lo + 1]
        hi = np.maximum(a, b)
        return hi + np.log((1.0 - w) * np.exp(a - hi) + w * np.exp(b - hi))

    def log_at(self, t, Q) -> np.ndarray:
        """``log Ut(t, Q)``: linear in Ut across inventory, linear in log across time."""
        t = float(t)
        if not -1e-12 <= t <= self.T + 1e-12:
            raise ValidationError(f"time {t} outside [0, {self.T}]")
        pos = np.clip(t / self.T * (self.times.size - 1), 0.0, self.times.size - 1)
        m = min(int(np.floor(pos + 1e-12)), self.times.size - 2)
        w = pos - m
        lo = self._log_row(m, Q)
        if w <= 1e-12:
            return lo
        return (1.0 - w) * lo + w * self._log_row(m + 1, Q)

    def slice_index(self, t: float) -> int:
        m = int(round(t / self.T * (self.times.size - 1)))
        if abs(self.times[m] - t) > 1e-9 * max(1.0, self.T):
            raise ValidationError(f"time {t} is not a stored slice")
        return m


def inventory_grid(params: ModelParams, specs: Sequence[OptionSpec], h_Q: float) -> np.ndarray:
    pad = float(deltas_of(specs).max())
    half = math.ceil((params.q_bar + pad) / h_Q - 1e-9)
    return h_Q * np.arange(-half, half + 1, dtype=float)


def stability_bound(params: ModelParams, consts: DerivedConstants, q_edge: float) -> float:
    return 0.5 / (consts.kappa * q_edge**2 + 2.0 * float(consts.C_hat.sum()))


def _jump_operator(q: np.ndarray, deltas: np.ndarray, C_hat: np.ndarray, q_bar: float, h_Q: float) -> sparse.csr_matrix:
    """Sparse matrix J with (J u)(Q) = sum_{k,i} Chat_k u(Q - Delta_k phi(i)) 1{phi(i) Q > -q_bar}."""
    n = q.size
    rows, cols, vals = [], [], []
    for k, d in enumerate(deltas):
        for phi in PHI_ARRAY:
            on = np.nonzero(cap_open(phi, q, q_bar))[0]
            target = q[on] - d * phi
            pos = (target - q[0]) / h_Q
            lo = np.floor(pos + 1e-9).astype(np.int64)
            w = pos - lo
            w[np.abs(w) < 1e-9] = 0.0
            if np.any(lo < 0) or np.any(lo > n - 1) or np.any((w > 0) & (lo + 1 > n - 1)):
                raise NumericalError("domain underrun: a jump leaves the inventory grid")
            rows.append(on)
            cols.append(lo)
            vals.append(C_hat[k] * (1.0 - w))
            frac = w > 0
            rows.append(on[frac])
            cols.append(lo[frac] + 1)
            vals.append(C_hat[k] * w[frac])
    return sparse.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
    )


def solve_value_grid(
    params: ModelParams,
    specs: Sequence[OptionSpec],
    config: GridConfig | None = None,
    consts: DerivedConstants | None = None,
) -> ValueGrid:
    """Backward explicit sweep from ``Ut(T, .) = 1``.

    The constant part ``Lambda = 2 sum Chat`` of the jump source is factored
    out and the inventory penalty is integrated exactly: with
    ``Ut = exp(Lambda (T - t)) W`` each step reads

        W_m = exp(-dt kappa Q^2) ((1 - dt Lambda) W_{m+1} + dt (J W_{m+1})),

    whose coefficients are non-negative under the stability bound, so ``W``
    stays positive; with no order flow the sweep is exact.
    """
    config = config or GridConfig()
    consts = consts or derived_constants(params, specs)
    q = inventory_grid(params, specs, config.h_Q)
    bound = stability_bound(params, consts, float(q[-1]))
    if config.dt is not None and config.dt > bound:
        raise NumericalError(f"dt={config.dt} exceeds the stability bound {bound:.6g}")
    dt_target = config.dt if config.dt is not None else min(config.default_dt, bound)
    slices = config.n_store - 1
    per_slice = max(1, math.ceil(params.T / dt_target / slices))
    steps = per_slice * slices
    dt = params.T / steps

    J = _jump_operator(q, deltas_of(specs), consts.C_hat, params.q_bar, config.h_Q)
    growth = 2.0 * float(consts.C_hat.sum())
    decay = np.exp(-dt * consts.kappa * q**2)
    Jdt = (J * dt).tocsr()

    times = np.linspace(0.0, params.T, config.n_store)
    log_values = np.empty((config.n_store, q.size))
    W = np.ones_like(q)
    log_offset = 0.0  # W is renormalized to max 1; its scale is tracked here
    log_values[-1] = 0.0
    for s in range(slices - 1, -1, -1):
        for _ in range(per_slice):
            W = decay * ((1.0 - dt * growth) * W + Jdt @ W)
        if not np.all(W > 0):
            raise NumericalError("scheme instability: non-positive value encountered")
        scale = W.max()
        W = W / scale
        log_offset += math.log(scale)
        log_values[s] = np.log(W) + log_offset + growth * (params.T - times[s])
    logger.debug("solved value grid: %d nodes, %d steps, dt=%.3g", q.size, steps, dt)
    return ValueGrid(
        times=times,
        q=q,
        log_values=log_values,
        h_Q=config.h_Q,
        dt=dt,
        steps=steps,
        T=params.T,
        q_bar=params.q_bar,
    )


def value_function(grid: ValueGrid, consts: DerivedConstants, t: float, Q) -> np.ndarray:
    """The exchange's value ``U = -Ut**(-exponent)`` (always negative)."""
    return -np.exp(-consts.exponent * grid.log_at(t, Q))


def _mc_chunk(
    consts: DerivedConstants,
    deltas: np.ndarray,
    q_bar: float,
    T: float,
    t0: float,
    q0: float,
    n: int,
    seed_seq: np.random.SeedSequence,
) -> np.ndarray:
    rng = np.random.default_rng(seed_seq)
    kappa = consts.kappa
    rate_side = float(consts.C_hat.sum())
    if rate_side <= 0:
        return np.full(n, -kappa * q0**2 * (T - t0))
    option_cdf = np.cumsum(consts.C_hat) / rate_side

    t = np.full(n, float(t0))
    Q = np.full(n, float(q0))
    logw = np.zeros(n)
    alive = np.arange(n)
    while alive.size:
        Qa = Q[alive]
        ask_on = cap_open(1.0, Qa, q_bar)
        bid_on = cap_open(-1.0, Qa, q_bar)
        # at least one side is always open since q_bar >= 1
        total = rate_side * (ask_on.astype(float) + bid_on.astype(float))
        tau = rng.exponential(1.0, alive.size) / total
        end = np.minimum(t[alive] + tau, T)
        logw[alive] += (-kappa * Qa**2 + total) * (end - t[alive])
        t[alive] = end
        jumped = end < T
        alive = alive[jumped]
        if not alive.size:
            break
        ask_on, bid_on = ask_on[jumped], bid_on[jumped]
        # side: ask with probability rate_ask / total; option: proportional to Chat
        u_side = rng.random(alive.size)
        is_ask = ask_on & (~bid_on | (u_side < 0.5))
        option = np.minimum(np.searchsorted(option_cdf, rng.random(alive.size), side="right"), deltas.size - 1)
        Q[alive] += np.where(is_ask, -deltas[option], deltas[option])
    return logw


def value_monte_carlo(
    params: ModelParams,
    specs: Sequence[OptionSpec],
    t: float,
    q: float,
    n_paths: int = 100_000,
    seed: int = 0,
    chunk_size: int = 25_000,
    workers: int = 1,
    consts: DerivedConstants | None = None,
) -> tuple[float, float]:
    """Feynman-Kac estimate of ``Ut(t, q)`` and its standard error.

    Between jumps the intensities are constant, so jump times are exact
    exponential draws and the exponent is integrated exactly. Paths are split
    into fixed chunks with their own seed streams and reduced in chunk order,
    so the result does not depend on ``workers``.
    """
    if n_paths < 1:
        raise ValidationError("n_paths must be >= 1")
    if t > params.T:
        raise ValidationError("t must not exceed T")
    consts = consts or derived_constants(params, specs)
    deltas = deltas_of(specs)
    sizes = [min(chunk_size, n_paths - i) for i in range(0, n_paths, chunk_size)]
    seqs = np.random.SeedSequence(seed).spawn(len(sizes))
    args = [(consts, deltas, params.q_bar, params.T, t, q, n, s) for n, s in zip(sizes, seqs)]
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(lambda a: _mc_chunk(*a), args))
    else:
        parts = [_mc_chunk(*a) for a in args]
    logw = np.concatenate(parts)
    shift = float(logw.max())
    samples = np.exp(logw - shift)
    mean = float(samples.mean())
    se = float(samples.std(ddof=1) / math.sqrt(n_paths)) if n_paths > 1 else 0.0
    return mean * math.exp(shift), se * math.exp(shift)


def _side_index(side: str | int) -> int:
    return SIDES.index(side) if isinstance(side, str) else int(side)


def optimal_trade_incentive(
    grid: ValueGrid,
    consts: DerivedConstants,
    specs: Sequence[OptionSpec],
    option: int,
    side: str | int,
    t: float,
    Q,
) -> np.ndarray:
    """Per-trade incentive ``Z* = log(b x2 U(t,Q) / (a x1 U(t, Q - Delta phi))) / (a - b)``.

    With ``U = -Ut**(-exponent)`` and ``exponent / (a - b) = 1 / b`` this is
    ``z_terminal + (log Ut(Q - Delta phi) - log Ut(Q)) / b``.
    """
    i = _side_index(side)
    Q = np.asarray(Q, dtype=float)
    shifted = Q - specs[option].delta * PHI_ARRAY[i]
    if np.any(shifted < grid.q_min - 1e-12) or np.any(shifted > grid.q_max + 1e-12):
        raise NumericalError("domain underrun: post-trade inventory outside the value grid")
    out = consts.z_terminal[option] + (grid.log_at(t, shifted) - grid.log_at(t, Q)) / consts.b
    return float(out) if np.ndim(out) == 0 else out


def inventory_incentive(q_option, params: ModelParams):
    """Volatility-risk incentive on one option: the exchange takes a gamma/(gamma+eta) share."""
    out = -params.gamma / (params.gamma + params.eta) * np.asarray(q_option, dtype=float)
    return float(out) if np.ndim(out) == 0 else out


@dataclass
class SpreadSurface:
    """Incentives and induced half-spreads at one time on the inventory nodes ``|Q| <= q_bar``.

    Arrays have shape ``(n_options, 2, n_nodes)``; a side whose cap indicator
    is off is NaN.
    """

    t: float
    q: np.ndarray
    z: np.ndarray
    spreads: np.ndarray
    option_ids: list[str]

    @property
    def total_spread(self) -> np.ndarray:
        return self.spreads[:, 0, :] + self.spreads[:, 1, :]

    def at(self, Q: float) -> np.ndarray:
        j = int(np.argmin(np.abs(self.q - Q)))
        return self.spreads[:, :, j]


def spread_surface(
    grid: ValueGrid,
    consts: DerivedConstants,
    specs: Sequence[OptionSpec],
    params: ModelParams,
    t: float = 0.0,
) -> SpreadSurface:
    q = grid.q[np.abs(grid.q) <= params.q_bar + 1e-9]
    z = np.full((len(specs), 2, q.size), np.nan)
    for k in range(len(specs)):
        for i, phi in enumerate(PHI_ARRAY):
            on = cap_open(phi, q, params.q_bar)
            z[k, i, on] = optimal_trade_incentive(grid, consts, specs, k, i, t, q[on])
    spreads = np.where(np.isnan(z), np.nan, mm_optimal_spread(np.nan_to_num(z), params))
    return SpreadSurface(t=t, q=q, z=z, spreads=spreads, option_ids=[s.option_id or str(n) for n, s in enumerate(specs)])


def bound_condition_max(grid: ValueGrid, consts: DerivedConstants, specs: Sequence[OptionSpec], params: ModelParams) -> float:
    """max |-Z* + intercept| over every stored slice, node, option and open side."""
    worst = 0.0
    for k, spec in enumerate(specs):
        for i, phi in enumerate(PHI_ARRAY):
            on = cap_open(phi, grid.q, params.q_bar)
            Qs = grid.q[on]
            shifted = Qs - spec.delta * phi
            for m in range(grid.times.size):
                row = grid.log_values[m]
                z = consts.z_terminal[k] + (grid._log_row(m, shifted) - row[on]) / consts.b
                worst = max(worst, float(np.max(np.abs(-z + consts.intercept))))
    return worst


@dataclass
class ContractSolution:
    params: ModelParams
    specs: list[OptionSpec]
    consts: DerivedConstants
    grid: ValueGrid
    bound_max: float

    def incentive(self, option: int, side: str | int, t: float, Q):
        return optimal_trade_incentive(self.grid, self.consts, self.specs, option, side, t, Q)

    def spreads(self, t: float = 0.0) -> SpreadSurface:
        return spread_surface(self.grid, self.consts, self.specs, self.params, t)


def solve_contract(
    params: ModelParams,
    specs: Sequence[OptionSpec],
    config: GridConfig | None = None,
) -> ContractSolution:
    """Solve the value grid and audit the quote bound; raise if the bound is violated."""
    consts = derived_constants(params, specs)
    grid = solve_value_grid(params, specs, config, consts)
    worst = bound_condition_max(grid, consts, specs, params)
    if not worst < params.delta_max:
        raise NumericalError(f"bound condition violated: max |-Z* + intercept| = {worst:.6g} >= delta_max = {params.delta_max}")
    return ContractSolution(params=params, specs=list(specs), consts=consts, grid=grid, bound_max=worst)
