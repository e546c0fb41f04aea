"""Convergence-bound terms and metric-stream tables."""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from fedprune.fedsim import RoundMetrics
from fedprune.fileio import atomic_write_csv

logger = logging.getLogger(__name__)


class AnalysisError(ValueError):
    """Raised for invalid bound inputs."""
    pass


class MetricsFormatError(AnalysisError):
    """Raised when a metrics stream holds a malformed record."""
    pass


class BoundParams(BaseModel):
    """Constants of the convergence bound, supplied by the user."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    L_u: float = Field(gt=0)
    L_v: float = Field(gt=0)
    sigma_u: float = Field(gt=0)
    sigma_v: float = Field(gt=0)
    phi_u: float = Field(gt=0)
    phi_v: float = Field(gt=0)
    D: float = Field(ge=0)
    kappa_star: float = Field(ge=1)
    eta_u: float = Field(gt=0)
    eta_v: float = Field(gt=0)
    tau_u: int = Field(ge=1)
    tau_v: int = Field(ge=1)
    N: float = Field(gt=0)
    K: int = Field(ge=1)
    G: int = Field(ge=1)
    # Gradient-diversity constants; recorded, not used by the bound terms.
    delta: float | None = Field(None, gt=0)
    varphi: float | None = Field(None, gt=0)

    @model_validator(mode="after")
    def _kappa_within_devices(self):
        if self.kappa_star > self.K:
            raise ValueError(f"kappa_star={self.kappa_star} exceeds K={self.K}")
        return self


def bound_a1(p: BoundParams) -> float:
    """Pruning-independent term of the bound."""
    personalized = (
        p.eta_v**2 * p.tau_v**2 * p.sigma_v**2 * p.L_v / 2
        + 4 * p.eta_v**3 * p.L_v**2 * p.sigma_v**2 * p.tau_v**2 * (p.tau_v - 1)
    )
    global_ = 3 * p.eta_u**2 * p.N**2 * p.tau_u**2 * p.phi_u**2 * p.L_u / 2
    shared = (
        p.N * p.phi_u**2 * p.K * p.eta_u**3 * p.L_u**2 * p.tau_u**3
        + 3 * p.N**2 * p.eta_u**2 * p.tau_u**2 * p.K * p.sigma_u**2 * p.L_u
        + 3 * p.N**2 * p.L_u**3 * p.tau_u**4 * p.eta_u**4 * p.K * p.phi_u**2
    ) / (2 * p.kappa_star)
    return personalized + global_ + shared


def bound_a2(p: BoundParams) -> float:
    """Coefficient of the summed pruning ratios."""
    numerator = p.N * p.eta_u * p.tau_u * p.L_u**2 * p.D**2 + 3 * p.N**2 * p.eta_u**2 * p.L_u**3 * p.D**2 * p.tau_u**2
    return numerator / (p.G * p.kappa_star)


def bound_rhs_from_sum(p: BoundParams, f_gap: float, rho_sum: float) -> float:
    """``f_gap / G + A1 + A2 * rho_sum`` for an already summed ratio schedule."""
    if f_gap < 0:
        raise AnalysisError(f"f_gap must be >= 0, got {f_gap}")
    if rho_sum < 0:
        raise AnalysisError(f"rho_sum must be >= 0, got {rho_sum}")
    return f_gap / p.G + bound_a1(p) + bound_a2(p) * rho_sum


def bound_rhs(p: BoundParams, f_gap: float, rho_schedule: Sequence[Sequence[float]] | np.ndarray) -> float:
    """``f_gap / G + A1 + A2 * sum(rho)`` over every round and device."""
    rho_sum = 0.0
    for row in rho_schedule:
        r = np.asarray(row, dtype=np.float64)
        if np.any(r < 0) or np.any(r > 1):
            raise AnalysisError("pruning ratios must lie in [0, 1]")
        rho_sum += float(r.sum())
    return bound_rhs_from_sum(p, f_gap, rho_sum)


def read_metrics(path: Path) -> list[RoundMetrics]:
    """Parse a JSON-lines metrics stream; blank lines are ignored."""
    path = Path(path)
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                records.append(RoundMetrics.model_validate_json(line))
            except ValidationError as e:
                first = e.errors()[0]
                where = ".".join(str(part) for part in first["loc"]) or "record"
                raise MetricsFormatError(f"{path}:{lineno}: {where}: {first['msg']}") from e
    return records


def kappa_star(records: Iterable[RoundMetrics]) -> int:
    """Smallest per-coordinate retention count over the whole run."""
    values = [r.min_retention for r in records]
    if not values:
        raise MetricsFormatError("no records")
    return min(values)


@dataclass
class Table:
    header: list[str]
    rows: list[list] = field(default_factory=list)


@dataclass
class Summary:
    latency: Table
    loss: Table
    accuracy: Table
    communication: Table

    def tables(self) -> dict[str, Table]:
        return {"latency": self.latency, "loss": self.loss, "accuracy": self.accuracy, "communication": self.communication}


def _series(records: Sequence[RoundMetrics], modes: list[str], attr: str) -> Table:
    by_round: dict[int, dict[str, float]] = {}
    for r in records:
        by_round.setdefault(r.round, {})[r.mode.value] = getattr(r, attr)
    table = Table(["round", *modes])
    for g in sorted(by_round):
        table.rows.append([g, *(by_round[g].get(m, "") for m in modes)])
    return table


def summarize(records: Sequence[RoundMetrics]) -> Summary:
    """Latency statistics, loss and accuracy per round, and communication totals per mode."""
    if not records:
        raise MetricsFormatError("no records")
    modes = list(dict.fromkeys(r.mode.value for r in records))

    latency = Table(["mode", "rounds", "mean_latency_s", "std_latency_s"])
    communication = Table(["mode", "rounds", "total_communicated_weights"])
    for mode in modes:
        rows = [r for r in records if r.mode.value == mode]
        lat = np.array([r.round_latency_s for r in rows])
        std = float(np.std(lat, ddof=1)) if lat.size > 1 else 0.0
        latency.rows.append([mode, lat.size, float(lat.mean()), std])
        communication.rows.append([mode, len(rows), sum(r.communicated_weights for r in rows)])

    return Summary(
        latency=latency,
        loss=_series(records, modes, "global_loss"),
        accuracy=_series(records, modes, "test_accuracy"),
        communication=communication,
    )


def _cell(value) -> str:
    return repr(value) if isinstance(value, float) else str(value)


def write_tables(summary: Summary, out_dir: Path) -> list[Path]:
    """Write one CSV per table into ``out_dir``; returns the paths written."""
    out_dir = Path(out_dir)
    written = []
    for name, table in summary.tables().items():
        path = out_dir / f"{name}.csv"
        atomic_write_csv(path, table.header, ([_cell(v) for v in row] for row in table.rows))
        written.append(path)
        logger.info("wrote %s", path)
    return written
