"""Market primitives: options, parameters, order-flow intensities and the market maker's response.

The underlying follows a Bachelier model ``dS = sigma dW``; option deltas are
frozen. Ask (resp. bid) market orders on each option arrive with intensity
``A exp(-(C/sigma) (delta + fee))`` while the delta-weighted aggregated
inventory stays above (resp. below) the critical level ``-q_bar`` (resp.
``q_bar``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from typing import Sequence

import numpy as np
from scipy.special import ndtr

from .errors import ValidationError

SIDES = ("ask", "bid")
PHI = {"ask": 1, "bid": -1}
PHI_ARRAY = np.array([1.0, -1.0])

# Aggregated inventories are sums of float deltas; values within CAP_TOL of
# the cap are treated as sitting exactly on it.
CAP_TOL = 1e-9


@dataclass(frozen=True)
class OptionSpec:
    delta: float
    fee: float
    weight: float = 0.0
    spread_threshold: float = 1.0
    strike: float | None = None
    maturity: float | None = None
    option_id: str = ""

    def __post_init__(self) -> None:
        if not 0.0 < self.delta < 1.0:
            raise ValidationError(f"option {self.option_id!r}: delta must lie in (0, 1), got {self.delta}")
        for name in ("fee", "weight"):
            if getattr(self, name) < 0:
                raise ValidationError(f"option {self.option_id!r}: {name} must be >= 0")
        if self.spread_threshold <= 0:
            raise ValidationError(f"option {self.option_id!r}: spread_threshold must be > 0")


@dataclass(frozen=True)
class ModelParams:
    A: float = 1.5
    C: float = 0.3
    sigma: float = 0.3
    gamma: float = 0.01
    eta: float = 1.0
    omega: float = 0.0
    q_bar: int = 40
    T: float = 100.0
    delta_max: float = 50.0
    R: float = -1.0
    S0: float = 100.0

    def __post_init__(self) -> None:
        if self.A < 0:
            raise ValidationError("A must be >= 0")
        for name in ("C", "sigma", "gamma", "eta", "T", "delta_max"):
            if not getattr(self, name) > 0:
                raise ValidationError(f"{name} must be > 0")
        if not 0.0 <= self.omega < 1.0:
            raise ValidationError(f"omega must lie in [0, 1), got {self.omega}")
        if int(self.q_bar) != self.q_bar or self.q_bar < 1:
            raise ValidationError("q_bar must be an integer >= 1")
        if not self.R < 0:
            raise ValidationError("R must be < 0")

    @property
    def decay(self) -> float:
        """C / sigma, the intensity sensitivity to spread plus fee."""
        return self.C / self.sigma

    @property
    def spread_intercept(self) -> float:
        """Half-spread quoted under a zero trade incentive: log(1 + sigma*gamma/C) / gamma."""
        return math.log1p(self.sigma * self.gamma / self.C) / self.gamma

    @property
    def y0(self) -> float:
        return -math.log(-self.R)

    def replace(self, **changes) -> ModelParams:
        return replace(self, **changes)


def reference_options(weights: Sequence[float] = (0.0, 0.0, 0.0)) -> list[OptionSpec]:
    """Three-option setup: at, in and out of the money."""
    deltas = (0.5, 0.8, 0.2)
    fees = (0.5, 0.8, 0.8)
    thresholds = (2.0, 3.0, 3.0)
    names = ("atm", "itm", "otm")
    return [
        OptionSpec(delta=d, fee=f, weight=c, spread_threshold=s, option_id=n)
        for d, f, c, s, n in zip(deltas, fees, weights, thresholds, names)
    ]


def deltas_of(specs: Sequence[OptionSpec]) -> np.ndarray:
    return np.array([s.delta for s in specs], dtype=float)


def fees_of(specs: Sequence[OptionSpec]) -> np.ndarray:
    return np.array([s.fee for s in specs], dtype=float)


def bachelier_delta(S, k, tau, sigma):
    """Call delta N((S - k) / (sigma sqrt(tau))) under arithmetic Brownian motion."""
    tau = np.asarray(tau, dtype=float)
    if np.any(tau <= 0):
        raise ValidationError("maturity must be > 0")
    if sigma <= 0:
        raise ValidationError("sigma must be > 0")
    d = (np.asarray(S, dtype=float) - np.asarray(k, dtype=float)) / (sigma * np.sqrt(tau))
    out = ndtr(d)
    return float(out) if np.ndim(out) == 0 else out


def cap_open(phi, agg_q, q_bar: float):
    """Indicator phi * Q > -q_bar (strict)."""
    return np.asarray(phi) * np.asarray(agg_q) > -q_bar + CAP_TOL


def arrival_intensity(delta, fee, params: ModelParams, side: str | None = None, agg_q: float | None = None):
    """Order arrival intensity at half-spread ``delta``; zero when the inventory cap is hit."""
    lam = params.A * np.exp(-params.decay * (np.asarray(delta, dtype=float) + fee))
    if side is not None and agg_q is not None:
        lam = np.where(cap_open(PHI[side], agg_q, params.q_bar), lam, 0.0)
    return float(lam) if np.ndim(lam) == 0 else lam


def mm_optimal_spread(z, params: ModelParams):
    """Market maker's optimal half-spread for a per-trade incentive ``z``, clipped to ``[-delta_max, delta_max]``."""
    out = np.clip(-np.asarray(z, dtype=float) + params.spread_intercept, -params.delta_max, params.delta_max)
    return float(out) if np.ndim(out) == 0 else out


def _open_mask(agg_q: float, params: ModelParams) -> np.ndarray:
    return cap_open(PHI_ARRAY, agg_q, params.q_bar)


def h_value(delta, z, agg_q: float, params: ModelParams, fees) -> float:
    """Market maker's instantaneous expected utility gain for quotes ``delta`` and incentives ``z``.

    ``delta`` and ``z`` have shape ``(n_options, 2)``; column 0 is the ask side.
    """
    delta = np.asarray(delta, dtype=float)
    z = np.asarray(z, dtype=float)
    lam = params.A * np.exp(-params.decay * (delta + np.asarray(fees, dtype=float)[:, None]))
    gain = (1.0 - np.exp(-params.gamma * (z + delta))) / params.gamma * lam
    return float((gain * _open_mask(agg_q, params)[None, :]).sum())


def hamiltonian(z, agg_q: float, params: ModelParams, fees) -> tuple[float, np.ndarray]:
    """Supremum of ``h_value`` over admissible quotes and the maximizing quotes."""
    z = np.asarray(z, dtype=float)
    spreads = mm_optimal_spread(z, params)
    spreads = np.asarray(spreads, dtype=float).reshape(z.shape)
    return h_value(spreads, z, agg_q, params, fees), spreads


def hamiltonian_batch(z: np.ndarray, open_mask: np.ndarray, params: ModelParams, fees: np.ndarray) -> np.ndarray:
    """Vectorized H for many states. ``z``: (..., n_options, 2); ``open_mask``: (..., 2)."""
    spreads = np.clip(-z + params.spread_intercept, -params.delta_max, params.delta_max)
    lam = params.A * np.exp(-params.decay * (spreads + fees[:, None]))
    gain = (1.0 - np.exp(-params.gamma * (z + spreads))) / params.gamma * lam
    return (gain * open_mask[..., None, :]).sum(axis=(-2, -1))


@dataclass
class MarketState:
    t: float
    S: float
    inventories: np.ndarray
    agg_q: float
    counts: np.ndarray = field(default=None)  # (n_options, 2): ask, bid

    def __post_init__(self) -> None:
        self.inventories = np.asarray(self.inventories, dtype=np.int64)
        if self.counts is None:
            self.counts = np.zeros((self.inventories.size, 2), dtype=np.int64)

    def recomputed_agg(self, deltas: np.ndarray) -> float:
        return float(deltas @ self.inventories)

    def is_consistent(self, deltas: np.ndarray) -> bool:
        ok_q = abs(self.recomputed_agg(deltas) - self.agg_q) <= 1e-9
        ok_n = bool(np.all(self.counts >= 0))
        ok_inv = np.array_equal(self.inventories, self.counts[:, 1] - self.counts[:, 0])
        return ok_q and ok_n and ok_inv

    def apply_trade(self, option: int, side: str, delta: float) -> None:
        """A market order hits side ``side`` of ``option``: the inventory moves by ``-phi(side)``."""
        self.counts[option, SIDES.index(side)] += 1
        self.inventories[option] -= PHI[side]
        self.agg_q -= PHI[side] * delta


def params_field_names() -> list[str]:
    return [f.name for f in fields(ModelParams)]
