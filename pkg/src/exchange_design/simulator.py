"""Full market simulation under an incentive surface.

Order flow on each (option, side) is a point process whose intensity is a
function of the market maker's quote, refreshed at every event and on a fixed
micro grid. Between refreshes every intensity is constant, so arrivals are
generated exactly by a random time change: each side carries an Exp(1)
budget that is consumed at rate ``lambda`` and fires when exhausted.

The underlying is sampled on the micro grid. Its Gaussian increments are
built from a coarse odd-length path refined by Brownian-bridge midpoints, so a
run at ``micro_dt / 2`` with the same seed reproduces the path of a run at
``micro_dt`` on every other node. Budgets are drawn per path and per side in
fixed-size blocks, so the same coupling holds for the order flow.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .contract import ContractSolution, inventory_incentive
from .errors import NumericalError, ValidationError
from .market import CAP_TOL, PHI_ARRAY, SIDES, ModelParams, deltas_of, fees_of

_BLOCK = 32


@dataclass(frozen=True)
class SimConfig:
    n_paths: int = 1000
    seed: int = 0
    micro_dt: float | None = None  # None: T / 10**4
    chunk_size: int = 5000
    quote_offset: float = 0.0  # added to the optimal half-spread; 0 is the optimal response
    zero_trade_incentives: bool = False
    record: int = 0  # number of leading paths with a full event log and sampled paths

    def __post_init__(self) -> None:
        if self.n_paths < 1:
            raise ValidationError("n_paths must be >= 1")
        if self.micro_dt is not None and not self.micro_dt > 0:
            raise ValidationError("micro_dt must be > 0")
        if self.chunk_size < 1:
            raise ValidationError("chunk_size must be >= 1")
        if self.record < 0:
            raise ValidationError("record must be >= 0")


@dataclass
class Trajectory:
    """One recorded path.

    ``times``, ``S``, ``agg_q``, ``inventories`` and ``Y`` are sampled on the
    micro grid (values at the end of each step). Events are listed in time
    order with the post-trade inventories.
    """

    times: np.ndarray
    S: np.ndarray
    agg_q: np.ndarray
    inventories: np.ndarray
    Y: np.ndarray
    event_times: np.ndarray
    event_option: np.ndarray
    event_side: np.ndarray
    event_inventories: np.ndarray
    event_agg: np.ndarray
    event_open: np.ndarray
    Y_T: float
    Y0: float
    trade_terms: float
    hedge_terms: float
    risk_terms: float
    hamiltonian_terms: float
    cash: float
    pnl: float
    spread_income: float
    inventory_pnl: float
    N_T: float
    L_T: float
    counts: np.ndarray

    @property
    def n_events(self) -> int:
        return int(self.event_times.size)

    def reconstructed_Y(self) -> float:
        return self.Y0 + self.trade_terms + self.hedge_terms + self.risk_terms - self.hamiltonian_terms


@dataclass
class TrajectoryBatch:
    """Terminal quantities per path; arrays are indexed by path."""

    params: ModelParams
    option_ids: list[str]
    micro_dt: float
    Y0: float
    Y_T: np.ndarray
    trade_terms: np.ndarray
    hedge_terms: np.ndarray
    risk_terms: np.ndarray
    risk_terms_closed: np.ndarray
    hamiltonian_terms: np.ndarray
    spread_income: np.ndarray
    inventory_pnl: np.ndarray
    cash: np.ndarray
    N_T: np.ndarray
    L_T: np.ndarray
    counts: np.ndarray  # (n_paths, n_options, 2)
    inventories: np.ndarray
    agg_q: np.ndarray
    max_abs_agg: np.ndarray
    closed_side_events: int
    trajectories: list[Trajectory] = field(default_factory=list)

    @property
    def n_paths(self) -> int:
        return int(self.Y_T.size)

    @property
    def pnl(self) -> np.ndarray:
        return self.spread_income + self.inventory_pnl

    @property
    def total_events(self) -> np.ndarray:
        return self.counts.sum(axis=(1, 2))

    def reconstructed_Y(self) -> np.ndarray:
        return self.Y0 + self.trade_terms + self.hedge_terms + self.risk_terms - self.hamiltonian_terms


class _Quoter:
    """Vectorized log-value lookup at per-path times and inventories."""

    def __init__(self, solution: ContractSolution):
        g = solution.grid
        self.logv = g.log_values
        self.q0 = g.q_min
        self.q_max = g.q_max
        self.h = g.h_Q
        self.nq = g.q.size
        self.nt = g.times.size
        self.T = g.T
        self.zT = solution.consts.z_terminal
        self.b = solution.consts.b

    def log_at(self, t: np.ndarray, Q: np.ndarray) -> np.ndarray:
        """``t``: (n,), ``Q``: (n, r) -> (n, r)."""
        if np.any(Q < self.q0 - 1e-9) or np.any(Q > self.q_max + 1e-9):
            raise NumericalError("domain underrun: simulated inventory outside the incentive surface")
        pos_t = np.clip(t / self.T * (self.nt - 1), 0.0, self.nt - 1)
        m = np.minimum(np.floor(pos_t).astype(np.int64), self.nt - 2)
        wt = (pos_t - m)[:, None]
        pos = np.clip((Q - self.q0) / self.h, 0.0, self.nq - 1)
        j = np.minimum(np.floor(pos + 1e-9).astype(np.int64), self.nq - 2)
        wq = np.clip(pos - j, 0.0, 1.0)
        out = []
        for mm in (m, m + 1):
            a = self.logv[mm[:, None], j]
            c = self.logv[mm[:, None], j + 1]
            hi = np.maximum(a, c)
            out.append(hi + np.log((1.0 - wq) * np.exp(a - hi) + wq * np.exp(c - hi)))
        return (1.0 - wt) * out[0] + wt * out[1]

    def row_at(self, t: float) -> tuple[np.ndarray, float]:
        """``Ut(t, .)`` on the nodes, scaled by ``exp(-shift)``, and ``shift``."""
        pos = min(max(t / self.T * (self.nt - 1), 0.0), self.nt - 1)
        m = min(int(pos), self.nt - 2)
        w = pos - m
        row = (1.0 - w) * self.logv[m] + w * self.logv[m + 1]
        top = float(row.max())
        return np.exp(row - top), top

    def log_on_row(self, scaled: np.ndarray, top: float, Q: np.ndarray) -> np.ndarray:
        if np.any(Q < self.q0 - 1e-9) or np.any(Q > self.q_max + 1e-9):
            raise NumericalError("domain underrun: simulated inventory outside the incentive surface")
        pos = np.clip((Q - self.q0) / self.h, 0.0, self.nq - 1)
        j = np.minimum(np.floor(pos + 1e-9).astype(np.int64), self.nq - 2)
        wq = np.clip(pos - j, 0.0, 1.0)
        return np.log((1.0 - wq) * scaled[j] + wq * scaled[j + 1]) + top


def _micro_layout(T: float, micro_dt: float) -> tuple[int, int, int]:
    n = int(round(T / micro_dt))
    if n < 1 or abs(n * micro_dt - T) > 1e-9 * T:
        raise ValidationError(f"micro_dt={micro_dt} must divide T={T}")
    levels = 0
    base = n
    while base % 2 == 0:
        base //= 2
        levels += 1
    return n, base, levels


def _bridge_block(rng: np.random.Generator, left: np.ndarray, right: np.ndarray, span: float, sigma: float, levels: int) -> np.ndarray:
    """Refine one coarse interval into ``2**levels`` increments by bridge midpoints."""
    pts = np.stack([left, right], axis=1)
    length = span
    for _ in range(levels):
        mid = 0.5 * (pts[:, :-1] + pts[:, 1:]) + sigma * math.sqrt(length / 4.0) * rng.standard_normal((pts.shape[0], pts.shape[1] - 1))
        new = np.empty((pts.shape[0], 2 * pts.shape[1] - 1))
        new[:, 0::2] = pts
        new[:, 1::2] = mid
        pts = new
        length /= 2.0
    return np.diff(pts, axis=1)


def _simulate_chunk(
    solution: ContractSolution,
    cfg: SimConfig,
    n: int,
    micro_dt: float,
    seed_seq: np.random.SeedSequence,
    n_record: int,
) -> dict:
    params, specs = solution.params, solution.specs
    m = len(specs)
    deltas = deltas_of(specs)
    fees = fees_of(specs)
    weights = np.array([s.weight for s in specs], dtype=float)
    thresholds = np.array([s.spread_threshold for s in specs], dtype=float)
    A, decay, gamma, eta, sigma = params.A, params.decay, params.gamma, params.eta, params.sigma
    omega, q_bar, dmax = params.omega, params.q_bar, params.delta_max
    intercept = params.spread_intercept
    quoter = _Quoter(solution)
    # shifts applied to Q for the post-trade inventory: (m, 2)
    shift = deltas[:, None] * PHI_ARRAY[None, :]

    n_steps, n_base, levels = _micro_layout(params.T, micro_dt)
    per_base = 2**levels
    base_span = params.T / n_base
    base_seq, bridge_seq, clock_seq = seed_seq.spawn(3)
    base_rng = np.random.default_rng(base_seq)
    base_W = np.concatenate(
        [np.zeros((n, 1)), np.cumsum(sigma * math.sqrt(base_span) * base_rng.standard_normal((n, n_base)), axis=1)], axis=1
    )
    bridge_seqs = bridge_seq.spawn(n_base)
    clock_rng = np.random.default_rng(clock_seq)
    budgets = clock_rng.exponential(1.0, (n, m, 2, _BLOCK))
    ptr = np.zeros((n, m, 2), dtype=np.int64)
    E = budgets[:, :, :, 0].copy()

    inv = np.zeros((n, m), dtype=np.int64)
    agg = np.zeros(n)
    counts = np.zeros((n, m, 2), dtype=np.int64)
    Y = np.full(n, params.y0)
    trade = np.zeros(n)
    hedge = np.zeros(n)
    risk = np.zeros(n)
    risk_closed = np.zeros(n)
    ham = np.zeros(n)
    spread_inc = np.zeros(n)
    inv_pnl = np.zeros(n)
    cash = np.zeros(n)
    N_T = np.zeros(n)
    L_T = np.zeros(n)
    max_abs = np.zeros(n)
    closed_events = 0
    S_now = np.full(n, params.S0)
    zc_coef = inventory_incentive(1.0, params)
    closed_coef = 0.5 * gamma * sigma**2 * (eta / (gamma + eta)) ** 2

    rec = n_record
    if rec:
        rec_S = np.empty((rec, n_steps + 1))
        rec_S[:, 0] = params.S0
        rec_agg = np.zeros((rec, n_steps + 1))
        rec_inv = np.zeros((rec, n_steps + 1, m), dtype=np.int64)
        rec_Y = np.empty((rec, n_steps + 1))
        rec_Y[:, 0] = params.y0
        rec_events: list[list[tuple]] = [[] for _ in range(rec)]

    dS_block = None
    for step in range(n_steps):
        if step % per_base == 0:
            b = step // per_base
            dS_block = _bridge_block(
                np.random.default_rng(bridge_seqs[b]), base_W[:, b], base_W[:, b + 1], base_span, sigma, levels
            )
        dS = dS_block[:, step % per_base]
        t_start = step * micro_dt
        remaining = np.full(n, micro_dt)
        active = np.arange(n)
        sel = slice(None)  # all paths on the first pass, then the indices of paths that just traded
        row = None
        while active.size:
            t_now = t_start + (micro_dt - remaining[sel])
            Qa = agg[sel]
            open_ = PHI_ARRAY[None, :] * Qa[:, None] > -q_bar + CAP_TOL  # (na, 2)
            if cfg.zero_trade_incentives:
                z = np.zeros((active.size, m, 2))
            else:
                # post-trade inventories of closed sides are clipped; their intensity is zero
                Qs = np.clip(Qa[:, None] - shift.reshape(1, -1), quoter.q0, quoter.q_max)
                pts = np.concatenate([Qa[:, None], Qs], axis=1)
                if row is None:
                    # every path sits at t_start on the first pass
                    row = quoter.row_at(t_start)
                    logs = quoter.log_on_row(row[0], row[1], pts)
                else:
                    logs = quoter.log_at(t_now, pts)
                z = quoter.zT[None, :, None] + (logs[:, 1:].reshape(-1, m, 2) - logs[:, :1, None]) / quoter.b
            d_opt = np.clip(-z + intercept, -dmax, dmax)
            gate = open_[:, None, :]
            lam_opt = np.where(gate, A * np.exp(-decay * (d_opt + fees[None, :, None])), 0.0)
            if cfg.quote_offset:
                d_quote = np.clip(d_opt + cfg.quote_offset, -dmax, dmax)
                lam = np.where(gate, A * np.exp(-decay * (d_quote + fees[None, :, None])), 0.0)
            else:
                d_quote, lam = d_opt, lam_opt
            H = ((1.0 - np.exp(-gamma * (z + d_opt))) / gamma * lam_opt).sum(axis=(1, 2))

            Ea = E[sel]
            with np.errstate(divide="ignore"):
                tau = np.where(lam > 0, Ea / np.where(lam > 0, lam, 1.0), np.inf).reshape(-1, 2 * m)
            first = np.argmin(tau, axis=1)
            tmin = tau[np.arange(active.size), first]
            r = remaining[sel]
            fired = tmin < r
            s = np.where(fired, tmin, r)
            E[sel] = Ea - lam * s[:, None, None]
            Y[sel] -= H * s
            ham[sel] += H * s
            remaining[sel] = r - s

            idx = active[fired]
            if idx.size:
                k = first[fired] // 2
                i = first[fired] % 2
                rows = np.nonzero(fired)[0]
                was_open = open_[rows, i]
                closed_events += int(np.count_nonzero(~was_open))
                zk = z[rows, k, i]
                dk = d_quote[rows, k, i]
                phi = PHI_ARRAY[i]
                counts[idx, k, i] += 1
                inv[idx, k] -= phi.astype(np.int64)
                agg[idx] -= phi * deltas[k]
                Y[idx] += zk
                trade[idx] += zk
                spread_inc[idx] += dk
                # option marked at the start-of-step underlying; price level cancels in the PnL
                cash[idx] += phi * (deltas[k] * (S_now[idx] - params.S0) + dk * phi)
                N_T[idx] += weights[k]
                L_T[idx] += omega * (dk - thresholds[k])
                np.maximum.at(max_abs, idx, np.abs(agg[idx]))
                ptr[idx, k, i] += 1
                need = ptr[idx, k, i] >= budgets.shape[3]
                if np.any(need):
                    budgets = np.concatenate([budgets, clock_rng.exponential(1.0, (n, m, 2, _BLOCK))], axis=3)
                E[idx, k, i] = budgets[idx, k, i, ptr[idx, k, i]]
                for row_pos, p in enumerate(idx):
                    if p < rec:
                        rec_events[p].append(
                            (t_now[rows[row_pos]] + s[rows[row_pos]], int(k[row_pos]), int(i[row_pos]), inv[p].copy(), agg[p], bool(was_open[row_pos]))
                        )
            active = idx
            sel = idx

        # Gaussian terms use the end-of-step inventories, which are independent of dS
        zc = zc_coef * inv
        dC = deltas[None, :] * dS[:, None]
        hedge_step = (zc * dC).sum(axis=1)
        Y += hedge_step
        hedge += hedge_step
        expo = (deltas[None, :] * (zc + inv)).sum(axis=1)
        risk_step = 0.5 * gamma * sigma**2 * expo**2 * micro_dt
        Y += risk_step
        risk += risk_step
        risk_closed += closed_coef * agg**2 * micro_dt
        inv_pnl += agg * dS
        S_now = S_now + dS
        if rec:
            rec_S[:, step + 1] = S_now[:rec]
            rec_agg[:, step + 1] = agg[:rec]
            rec_inv[:, step + 1] = inv[:rec]
            rec_Y[:, step + 1] = Y[:rec]

    cash += (inv * deltas[None, :]).sum(axis=1) * (S_now - params.S0)
    out = dict(
        Y_T=Y, trade=trade, hedge=hedge, risk=risk, risk_closed=risk_closed, ham=ham, spread_inc=spread_inc,
        inv_pnl=inv_pnl, cash=cash, N_T=N_T, L_T=L_T, counts=counts, inv=inv, agg=agg, max_abs=max_abs,
        closed=closed_events, trajectories=[],
    )
    times = micro_dt * np.arange(n_steps + 1)
    for p in range(rec):
        ev = rec_events[p]
        out["trajectories"].append(
            Trajectory(
                times=times,
                S=rec_S[p],
                agg_q=rec_agg[p],
                inventories=rec_inv[p],
                Y=rec_Y[p],
                event_times=np.array([e[0] for e in ev], dtype=float),
                event_option=np.array([e[1] for e in ev], dtype=np.int64),
                event_side=np.array([e[2] for e in ev], dtype=np.int64),
                event_inventories=np.array([e[3] for e in ev], dtype=np.int64).reshape(len(ev), m),
                event_agg=np.array([e[4] for e in ev], dtype=float),
                event_open=np.array([e[5] for e in ev], dtype=bool),
                Y_T=float(Y[p]),
                Y0=params.y0,
                trade_terms=float(trade[p]),
                hedge_terms=float(hedge[p]),
                risk_terms=float(risk[p]),
                hamiltonian_terms=float(ham[p]),
                cash=float(cash[p]),
                pnl=float(spread_inc[p] + inv_pnl[p]),
                spread_income=float(spread_inc[p]),
                inventory_pnl=float(inv_pnl[p]),
                N_T=float(N_T[p]),
                L_T=float(L_T[p]),
                counts=counts[p].copy(),
            )
        )
    return out


def simulate_batch(solution: ContractSolution, config: SimConfig | None = None) -> TrajectoryBatch:
    """Simulate ``config.n_paths`` independent paths under ``solution``.

    Paths are split into chunks of ``chunk_size`` with their own seed
    streams, so results depend only on ``(seed, chunk_size, micro_dt)``.
    """
    cfg = config or SimConfig()
    params = solution.params
    micro_dt = cfg.micro_dt if cfg.micro_dt is not None else params.T / 10**4
    sizes = [min(cfg.chunk_size, cfg.n_paths - s) for s in range(0, cfg.n_paths, cfg.chunk_size)]
    seqs = np.random.SeedSequence(cfg.seed).spawn(len(sizes))
    parts = []
    left = cfg.record
    for size, seq in zip(sizes, seqs):
        rec = min(left, size)
        parts.append(_simulate_chunk(solution, cfg, size, micro_dt, seq, rec))
        left -= rec

    def cat(key):
        return np.concatenate([p[key] for p in parts])

    return TrajectoryBatch(
        params=params,
        option_ids=[s.option_id or str(k) for k, s in enumerate(solution.specs)],
        micro_dt=micro_dt,
        Y0=params.y0,
        Y_T=cat("Y_T"),
        trade_terms=cat("trade"),
        hedge_terms=cat("hedge"),
        risk_terms=cat("risk"),
        risk_terms_closed=cat("risk_closed"),
        hamiltonian_terms=cat("ham"),
        spread_income=cat("spread_inc"),
        inventory_pnl=cat("inv_pnl"),
        cash=cat("cash"),
        N_T=cat("N_T"),
        L_T=cat("L_T"),
        counts=cat("counts"),
        inventories=cat("inv"),
        agg_q=cat("agg"),
        max_abs_agg=cat("max_abs"),
        closed_side_events=sum(p["closed"] for p in parts),
        trajectories=[t for p in parts for t in p["trajectories"]],
    )


def simulate_trajectory(solution: ContractSolution, seed: int = 0, micro_dt: float | None = None, **kwargs) -> Trajectory:
    """A single fully recorded path."""
    batch = simulate_batch(solution, SimConfig(n_paths=1, seed=seed, micro_dt=micro_dt, record=1, **kwargs))
    return batch.trajectories[0]


def _mean_exp(x: np.ndarray, scale: float) -> tuple[float, float]:
    """Mean and standard error of ``-exp(scale * x)``, computed with a shift."""
    if x.size < 2:
        raise ValidationError("at least 2 trajectories are required")
    v = scale * x
    shift = float(v.max())
    w = np.exp(v - shift)
    return -float(w.mean()) * math.exp(shift), float(w.std(ddof=1) / math.sqrt(x.size)) * math.exp(shift)


def mm_utility_samples(batch: TrajectoryBatch) -> np.ndarray:
    return -np.exp(-batch.params.gamma * (batch.Y_T + batch.pnl))


def estimate_mm_utility(batch: TrajectoryBatch) -> tuple[float, float]:
    """Mean of ``-exp(-gamma (Y_T + PL_T))`` and its standard error."""
    return _mean_exp(batch.Y_T + batch.pnl, -batch.params.gamma)


def exchange_outcome(batch: TrajectoryBatch) -> np.ndarray:
    return batch.N_T - batch.L_T - batch.Y_T


def estimate_exchange_utility(batch: TrajectoryBatch) -> tuple[float, float]:
    """Mean of ``-exp(-eta (N_T - L_T - Y_T))`` and its standard error."""
    return _mean_exp(exchange_outcome(batch), -batch.params.eta)


def certainty_equivalent(estimate: float, risk_aversion: float) -> float:
    """Wealth ``w`` with ``-exp(-risk_aversion * w) = estimate``."""
    if not estimate < 0:
        raise NumericalError("utility estimate must be negative")
    return -math.log(-estimate) / risk_aversion


__all__ = [
    "SIDES",
    "SimConfig",
    "Trajectory",
    "TrajectoryBatch",
    "certainty_equivalent",
    "estimate_exchange_utility",
    "estimate_mm_utility",
    "exchange_outcome",
    "mm_utility_samples",
    "simulate_batch",
    "simulate_trajectory",
]
