"""Run configuration, trade-report ingestion and output files.

Configuration is a JSON document with the sections ``paths``, ``quantizer``,
``model``, ``solver``, ``simulation`` and ``export``. Every section is
optional; unknown keys are rejected. Model defaults reproduce the reference
three-option market.

Numbers in CSV files are written with 17 significant digits and JSON uses
Python's shortest round-trip representation, so parsing any output recovers
the in-memory doubles exactly.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .errors import ValidationError
from .market import ModelParams, OptionSpec, bachelier_delta, reference_options

TRADE_HEADER = ["strike_pct", "maturity_days", "count"]
DEFAULT_BUCKETS = (30, 90, 180)
_DEFAULT_LABELS = ("≤1M", "≤3M", "≤6M", ">6M")


def fmt(x: float) -> str:
    x = float(x)
    if math.isnan(x):
        return "nan"
    return format(x, ".17g")


# ---------------------------------------------------------------- config


@dataclass
class PathsConfig:
    trades: str | None = None
    options: str | None = None
    output_dir: str = "out"


@dataclass
class QuantizerConfig:
    n: int = 10
    p: float = 2.0
    epsilon: float = 1e-8
    seeds: int = 20
    max_iter: int = 10_000
    buckets: list[int] = field(default_factory=lambda: list(DEFAULT_BUCKETS))
    spot: float | None = None
    upper: float | None = None
    merge_tol: float | None = None

    def validate(self) -> None:
        if not isinstance(self.n, int) or self.n < 1:
            raise ValidationError("quantizer.n: must be an integer >= 1")
        if not self.p >= 2:
            raise ValidationError("quantizer.p: must be >= 2")
        if not self.epsilon > 0:
            raise ValidationError("quantizer.epsilon: must be > 0")
        if not isinstance(self.seeds, int) or self.seeds < 1:
            raise ValidationError("quantizer.seeds: must be an integer >= 1")
        if not isinstance(self.max_iter, int) or self.max_iter < 1:
            raise ValidationError("quantizer.max_iter: must be an integer >= 1")
        b = list(self.buckets)
        if not b or any(x <= 0 for x in b) or any(y <= x for x, y in zip(b, b[1:])):
            raise ValidationError("quantizer.buckets: must be positive and strictly increasing")
        if self.spot is not None and not self.spot > 0:
            raise ValidationError("quantizer.spot: must be > 0")
        if self.upper is not None and not self.upper > 0:
            raise ValidationError("quantizer.upper: must be > 0")
        if self.merge_tol is not None and not self.merge_tol > 0:
            raise ValidationError("quantizer.merge_tol: must be > 0")


@dataclass
class SolverConfig:
    dt: float | None = None
    h_Q: float = 0.025
    n_store: int = 1001
    n_paths: int = 0  # Monte Carlo cross-check paths at t = 0, Q = 0; 0 disables it
    mc_seed: int = 0

    def validate(self) -> None:
        if self.dt is not None and not self.dt > 0:
            raise ValidationError("solver.dt: must be > 0")
        if not self.h_Q > 0:
            raise ValidationError("solver.h_Q: must be > 0")
        if not isinstance(self.n_store, int) or self.n_store < 2:
            raise ValidationError("solver.n_store: must be an integer >= 2")
        if not isinstance(self.n_paths, int) or self.n_paths < 0:
            raise ValidationError("solver.n_paths: must be an integer >= 0")
        if not isinstance(self.mc_seed, int) or self.mc_seed < 0:
            raise ValidationError("solver.mc_seed: must be an integer >= 0")


@dataclass
class SimulationConfig:
    n_paths: int = 1000
    batch_size: int = 5000
    micro_dt: float | None = None
    seed: int = 0
    record: int = 1

    def validate(self) -> None:
        if not isinstance(self.n_paths, int) or self.n_paths < 2:
            raise ValidationError("simulation.n_paths: must be an integer >= 2")
        if not isinstance(self.batch_size, int) or self.batch_size < 1:
            raise ValidationError("simulation.batch_size: must be an integer >= 1")
        if self.micro_dt is not None and not self.micro_dt > 0:
            raise ValidationError("simulation.micro_dt: must be > 0")
        if not isinstance(self.record, int) or self.record < 0:
            raise ValidationError("simulation.record: must be an integer >= 0")
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ValidationError("simulation.seed: must be an integer >= 0")


@dataclass
class ExportConfig:
    t_stride: int = 10  # every t_stride-th stored time slice
    q_stride: int = 4  # every q_stride-th inventory node

    def validate(self) -> None:
        for name in ("t_stride", "q_stride"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise ValidationError(f"export.{name}: must be an integer >= 1")


@dataclass
class RunConfig:
    paths: PathsConfig = field(default_factory=PathsConfig)
    quantizer: QuantizerConfig = field(default_factory=QuantizerConfig)
    model: ModelParams = field(default_factory=ModelParams)
    solver: SolverConfig = field(default_factory=SolverConfig)
    simulation: SimulationConfig = field(default_factory=SimulationConfig)
    export: ExportConfig = field(default_factory=ExportConfig)
    base_dir: Path = field(default=Path("."), repr=False)

    def resolve(self, p: str | None) -> Path | None:
        if p is None:
            return None
        path = Path(p)
        return path if path.is_absolute() else self.base_dir / path

    @property
    def output_dir(self) -> Path:
        out = self.resolve(self.paths.output_dir)
        assert out is not None
        return out

    def to_dict(self) -> dict:
        return {
            "paths": asdict(self.paths),
            "quantizer": asdict(self.quantizer),
            "model": asdict(self.model),
            "solver": asdict(self.solver),
            "simulation": asdict(self.simulation),
            "export": asdict(self.export),
        }


_SECTIONS = {
    "paths": PathsConfig,
    "quantizer": QuantizerConfig,
    "model": ModelParams,
    "solver": SolverConfig,
    "simulation": SimulationConfig,
    "export": ExportConfig,
}

_FLOAT_FIELDS = {"p", "epsilon", "spot", "upper", "merge_tol", "dt", "h_Q", "micro_dt"}


def _build_section(name: str, cls, raw: Any):
    if not isinstance(raw, dict):
        raise ValidationError(f"{name}: must be an object")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(raw) - set(known))
    if unknown:
        raise ValidationError(f"{name}: unknown key(s) {', '.join(unknown)}")
    values = {}
    for key, value in raw.items():
        if isinstance(value, bool):
            raise ValidationError(f"{name}.{key}: booleans are not accepted")
        if cls is ModelParams or key in _FLOAT_FIELDS:
            if value is not None and not isinstance(value, (int, float)):
                raise ValidationError(f"{name}.{key}: must be a number")
            if value is not None and (key in _FLOAT_FIELDS or (cls is ModelParams and key != "q_bar")):
                value = float(value)
        values[key] = value
    try:
        obj = cls(**values)
    except ValidationError as exc:
        raise ValidationError(f"{name}: {exc}") from None
    except TypeError as exc:
        raise ValidationError(f"{name}: {exc}") from None
    if hasattr(obj, "validate"):
        obj.validate()
    return obj


def config_from_dict(raw: dict, base_dir: Path | str = ".") -> RunConfig:
    if not isinstance(raw, dict):
        raise ValidationError("configuration must be a JSON object")
    unknown = sorted(set(raw) - set(_SECTIONS))
    if unknown:
        raise ValidationError(f"unknown section(s) {', '.join(unknown)}")
    built = {name: _build_section(name, cls, raw.get(name, {})) for name, cls in _SECTIONS.items()}
    return RunConfig(**built, base_dir=Path(base_dir))


def load_config(path: str | os.PathLike) -> RunConfig:
    """Read and fully validate a JSON run configuration."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: malformed JSON ({exc})") from None
    return config_from_dict(raw, base_dir=path.parent)


# ---------------------------------------------------------------- trade reports


@dataclass(frozen=True)
class TradeRow:
    strike: float
    maturity_days: float
    bucket: str
    count: float


def bucket_labels(thresholds: Sequence[int] = DEFAULT_BUCKETS) -> list[str]:
    thresholds = tuple(thresholds)
    if thresholds == DEFAULT_BUCKETS:
        return list(_DEFAULT_LABELS)
    return [f"≤{d}d" for d in thresholds] + [f">{thresholds[-1]}d"]


def bucket_of(maturity_days: float, thresholds: Sequence[int] = DEFAULT_BUCKETS) -> str:
    labels = bucket_labels(thresholds)
    for d, label in zip(thresholds, labels):
        if maturity_days <= d:
            return label
    return labels[-1]


def bucket_slug(label: str) -> str:
    return label.replace("≤", "le").replace(">", "gt")


def parse_trade_report(path: str | os.PathLike, buckets: Sequence[int] = DEFAULT_BUCKETS) -> list[TradeRow]:
    """Rows of a ``strike_pct,maturity_days,count`` CSV with their maturity bucket."""
    rows: list[TradeRow] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != TRADE_HEADER:
            raise ValidationError(f"{path}: unknown header {header!r}, expected {','.join(TRADE_HEADER)}")
        for lineno, rec in enumerate(reader, start=2):
            if not rec or all(not c.strip() for c in rec):
                continue
            if len(rec) != 3:
                raise ValidationError(f"{path}:{lineno}: expected 3 fields, got {len(rec)}")
            try:
                strike, mat, count = (float(c) for c in rec)
            except ValueError:
                raise ValidationError(f"{path}:{lineno}: non-numeric field in {rec!r}") from None
            if not all(math.isfinite(v) for v in (strike, mat, count)):
                raise ValidationError(f"{path}:{lineno}: non-finite field in {rec!r}")
            if count < 0:
                raise ValidationError(f"{path}:{lineno}: invalid count {rec[2]}")
            if strike < 0 or mat < 0:
                raise ValidationError(f"{path}:{lineno}: strike and maturity must be >= 0")
            rows.append(TradeRow(strike, mat, bucket_of(mat, buckets), count))
    return rows


def write_trade_report(path: str | os.PathLike, rows: Sequence[TradeRow | tuple]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRADE_HEADER)
        for r in rows:
            strike, mat, count = (r.strike, r.maturity_days, r.count) if isinstance(r, TradeRow) else r
            w.writerow([fmt(strike), fmt(mat), fmt(count)])


# ---------------------------------------------------------------- options


_OPTION_KEYS = {"option_id", "delta", "fee", "weight", "spread_threshold", "strike", "maturity"}


def load_options(path: str | os.PathLike | None, params: ModelParams) -> list[OptionSpec]:
    """Options from a JSON list; the reference three options when ``path`` is None.

    A missing ``delta`` is computed from ``strike`` and ``maturity`` (same
    time unit as ``T``) with the Bachelier call delta at ``S0``.
    """
    if path is None:
        return reference_options()
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: malformed JSON ({exc})") from None
    if not isinstance(raw, list) or not raw:
        raise ValidationError(f"{path}: expected a non-empty list of options")
    specs = []
    for n, item in enumerate(raw):
        if not isinstance(item, dict):
            raise ValidationError(f"{path}: option {n} must be an object")
        unknown = sorted(set(item) - _OPTION_KEYS)
        if unknown:
            raise ValidationError(f"{path}: option {n}: unknown key(s) {', '.join(unknown)}")
        if "fee" not in item:
            raise ValidationError(f"{path}: option {n}: fee is required")
        item = dict(item)
        item.setdefault("option_id", f"opt{n}")
        if "delta" not in item:
            if item.get("strike") is None or item.get("maturity") is None:
                raise ValidationError(f"{path}: option {n}: give delta, or strike and maturity")
            item["delta"] = bachelier_delta(params.S0, item["strike"], item["maturity"], params.sigma)
        specs.append(OptionSpec(**item))
    ids = [s.option_id for s in specs]
    if len(set(ids)) != len(ids):
        raise ValidationError(f"{path}: duplicate option_id")
    return specs


def write_options(path: str | os.PathLike, specs: Sequence[OptionSpec]) -> None:
    write_json(path, [{k: v for k, v in asdict(s).items() if v is not None} for s in specs])


# ---------------------------------------------------------------- writers


def write_json(path: str | os.PathLike, obj: Any) -> None:
    text = json.dumps(_plain(obj), indent=2, sort_keys=True, ensure_ascii=False, allow_nan=True)
    Path(path).write_text(text + "\n", encoding="utf-8")


def read_json(path: str | os.PathLike) -> Any:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def _plain(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_plain(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, Path):
        return str(obj)
    return obj


def write_csv(path: str | os.PathLike, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) if isinstance(v, (float, np.floating)) else v for v in row])


def read_csv(path: str | os.PathLike) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        return header, [r for r in reader]


def strikes_document(bucket: str, result, epsilon: float) -> dict:
    doc = {"maturity_bucket": bucket, "epsilon": epsilon, "seed": result.seed}
    doc.update(result.to_dict())
    return doc
