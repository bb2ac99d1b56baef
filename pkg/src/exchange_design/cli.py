"""Command line: quantize, solve, spreads, simulate.

Exit codes: 0 success, 2 invalid input, 3 numerical failure, 4 I/O failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from . import io
from .contract import GridConfig, solve_contract, value_monte_carlo
from .errors import NumericalError, ValidationError
from .market import PHI_ARRAY, SIDES
from .quantizer import build_empirical_distribution, lloyd_best_of, merge_close_strikes
from .simulator import (
    SimConfig,
    certainty_equivalent,
    estimate_exchange_utility,
    estimate_mm_utility,
    exchange_outcome,
    simulate_batch,
)

logger = logging.getLogger("exchange_design")

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL, EXIT_IO = 0, 2, 3, 4


def _out_dir(cfg: io.RunConfig) -> Path:
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_quantize(cfg: io.RunConfig) -> list[Path]:
    trades = cfg.resolve(cfg.paths.trades)
    if trades is None:
        raise ValidationError("paths.trades: required by quantize")
    q = cfg.quantizer
    rows = io.parse_trade_report(trades, q.buckets)
    out = _out_dir(cfg)
    written = []
    for label in io.bucket_labels(q.buckets):
        sel = [(r.strike, r.count) for r in rows if r.bucket == label]
        if not sel or sum(c for _, c in sel) <= 0:
            logger.info("bucket %s: no trades, skipped", label)
            continue
        dist = build_empirical_distribution(sel, spot=q.spot, upper=q.upper)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            result = lloyd_best_of(dist, q.n, q.p, q.seeds, q.epsilon, q.max_iter)
        if q.merge_tol is not None:
            result = merge_close_strikes(result, dist, q.merge_tol)
        path = out / f"strikes_{io.bucket_slug(label)}.json"
        io.write_json(path, io.strikes_document(label, result, q.epsilon))
        written.append(path)
    if not written:
        raise ValidationError("empty distribution: no bucket carries a positive count")
    return written


def _solve(cfg: io.RunConfig):
    specs = io.load_options(cfg.resolve(cfg.paths.options), cfg.model)
    grid_cfg = GridConfig(dt=cfg.solver.dt, h_Q=cfg.solver.h_Q, n_store=cfg.solver.n_store)
    return solve_contract(cfg.model, specs, grid_cfg)


def _solve_summary(cfg: io.RunConfig, sol) -> dict:
    c, g = sol.consts, sol.grid
    doc = {
        "option_ids": [s.option_id for s in sol.specs],
        "a": c.a,
        "b": c.b,
        "x1": c.x1,
        "x2": c.x2,
        "O": c.O,
        "C_tilde": c.C_tilde,
        "C_hat": c.C_hat,
        "kappa": c.kappa,
        "exponent": c.exponent,
        "spread_intercept": c.intercept,
        "dt": g.dt,
        "steps": g.steps,
        "h_Q": g.h_Q,
        "q_min": g.q_min,
        "q_max": g.q_max,
        "log_U_tilde_0_0": float(g.log_at(0.0, 0.0)),
        "bound_max": sol.bound_max,
        "delta_max": cfg.model.delta_max,
    }
    if cfg.solver.n_paths > 0:
        est, se = value_monte_carlo(cfg.model, sol.specs, 0.0, 0.0, cfg.solver.n_paths, cfg.solver.mc_seed, consts=c)
        doc["monte_carlo_U_tilde_0_0"] = {"estimate": est, "stderr": se, "n_paths": cfg.solver.n_paths}
    return doc


def cmd_solve(cfg: io.RunConfig) -> list[Path]:
    sol = _solve(cfg)
    out = _out_dir(cfg)
    g = sol.grid
    ts = np.arange(0, g.times.size, cfg.export.t_stride)
    if ts[-1] != g.times.size - 1:
        ts = np.append(ts, g.times.size - 1)
    qs = np.arange(0, g.q.size, cfg.export.q_stride)
    io.write_csv(
        out / "value_grid.csv",
        ["t", "Q", "log_U_tilde", "U_tilde"],
        ((g.times[m], g.q[j], g.log_values[m, j], float(np.exp(g.log_values[m, j]))) for m in ts for j in qs),
    )
    inside = qs[np.abs(g.q[qs]) <= cfg.model.q_bar + 1e-9]
    Q = g.q[inside]

    def incentive_rows():
        for m in ts:
            t = float(g.times[m])
            for k, spec in enumerate(sol.specs):
                for i, phi in enumerate(PHI_ARRAY):
                    on = Q[phi * Q > -cfg.model.q_bar + 1e-9]
                    if not on.size:
                        continue
                    z = np.atleast_1d(sol.incentive(k, i, t, on))
                    spread = np.clip(-z + sol.consts.intercept, -cfg.model.delta_max, cfg.model.delta_max)
                    for qq, zz, dd in zip(on, z, spread):
                        yield (t, float(qq), spec.option_id, SIDES[i], float(zz), float(dd))

    io.write_csv(out / "incentives.csv", ["t", "Q", "option_id", "side", "Z_star", "spread"], incentive_rows())
    io.write_json(out / "summary.json", {"command": "solve", "solve": _solve_summary(cfg, sol)})
    return [out / "value_grid.csv", out / "incentives.csv", out / "summary.json"]


def cmd_spreads(cfg: io.RunConfig) -> list[Path]:
    sol = _solve(cfg)
    out = _out_dir(cfg)
    surf = sol.spreads(0.0)
    header = ["Q"] + [f"{oid}_{side}" for oid in surf.option_ids for side in SIDES]
    io.write_csv(
        out / "spreads_t0.csv",
        header,
        ([float(q)] + [float(surf.spreads[k, i, j]) for k in range(len(surf.option_ids)) for i in range(2)] for j, q in enumerate(surf.q)),
    )
    io.write_json(out / "summary.json", {"command": "spreads", "solve": _solve_summary(cfg, sol)})
    return [out / "spreads_t0.csv", out / "summary.json"]


def cmd_simulate(cfg: io.RunConfig) -> list[Path]:
    sol = _solve(cfg)
    out = _out_dir(cfg)
    s = cfg.simulation
    batch = simulate_batch(
        sol, SimConfig(n_paths=s.n_paths, seed=s.seed, micro_dt=s.micro_dt, chunk_size=s.batch_size, record=s.record)
    )
    ids = batch.option_ids
    rows = []
    for p, tr in enumerate(batch.trajectories):
        for e in range(tr.n_events):
            k = int(tr.event_option[e])
            rows.append((p, float(tr.event_times[e]), ids[k], SIDES[tr.event_side[e]], int(tr.event_inventories[e, k]), float(tr.event_agg[e])))
    io.write_csv(out / "events.csv", ["path", "t", "option_id", "side", "Q_after", "aggQ_after"], rows)
    io.write_csv(
        out / "paths.csv",
        ["path", "Y_T", "PnL", "N_T", "L_T", "events", "aggQ_T"],
        ((p, float(batch.Y_T[p]), float(batch.pnl[p]), float(batch.N_T[p]), float(batch.L_T[p]), int(batch.total_events[p]), float(batch.agg_q[p])) for p in range(batch.n_paths)),
    )
    p = cfg.model
    mm, mm_se = estimate_mm_utility(batch)
    ex, ex_se = estimate_exchange_utility(batch)
    target = -float(np.exp(-p.gamma * p.y0))
    log_ut = float(sol.grid.log_at(0.0, 0.0))
    sim = {
        "n_paths": batch.n_paths,
        "seed": s.seed,
        "micro_dt": batch.micro_dt,
        "mean_events": float(batch.total_events.mean()),
        "closed_side_events": batch.closed_side_events,
        "max_abs_aggQ": float(batch.max_abs_agg.max()),
        "mean_Y_T": float(batch.Y_T.mean()),
        "mean_PnL": float(batch.pnl.mean()),
        "mean_N_T": float(batch.N_T.mean()),
        "mean_L_T": float(batch.L_T.mean()),
        "mm_utility": {"estimate": mm, "stderr": mm_se, "reservation": target, "z_score": (mm - target) / mm_se if mm_se > 0 else 0.0},
        "exchange_utility": {"estimate": ex, "stderr": ex_se},
        "exchange_certainty_equivalent": certainty_equivalent(ex, p.eta) if ex < 0 else None,
        "exchange_certainty_equivalent_pde": sol.consts.exponent * log_ut / p.eta,
        "mean_exchange_outcome": float(exchange_outcome(batch).mean()),
    }
    io.write_json(out / "summary.json", {"command": "simulate", "solve": _solve_summary(cfg, sol), "simulation": sim})
    return [out / "events.csv", out / "paths.csv", out / "summary.json"]


COMMANDS = {"quantize": cmd_quantize, "solve": cmd_solve, "spreads": cmd_spreads, "simulate": cmd_simulate}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="exchange-design", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "quantize": "trade report -> strikes_<bucket>.json",
        "solve": "options + parameters -> value_grid.csv, incentives.csv",
        "spreads": "spread-versus-inventory table at t = 0",
        "simulate": "market simulation -> events.csv, paths.csv, utility summary",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        p.add_argument("config", nargs="?", help="JSON run configuration (defaults apply when omitted)")
        p.add_argument("-o", "--output-dir", help="override paths.output_dir")
        p.add_argument("--seed", type=int, help="override the simulation seed")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = io.load_config(args.config) if args.config else io.config_from_dict({})
        if args.output_dir:
            cfg.paths.output_dir = str(Path(args.output_dir).resolve())
        if args.seed is not None:
            cfg.simulation.seed = args.seed
        written = COMMANDS[args.command](cfg)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"i/o failure: {exc}", file=sys.stderr)
        return EXIT_IO
    for path in written:
        print(path)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
