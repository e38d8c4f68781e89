"""Energy and CO2-equivalent accounting for training runs.

Energy per run is converted from joules to kWh, compared against the
baseline variant, and multiplied by a grid emission factor. Savings are
"annual" under the assumption of one retraining per year.
"""
from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

J_PER_KWH = 3_600_000.0


class GreenError(ValueError):
    pass


@dataclass(frozen=True)
class EmissionFactor:
    value: float = 0.166  # kg CO2e / kWh
    region_year_label: str = "EU grid 2023"

    def __post_init__(self):
        if not self.value > 0:
            raise GreenError(f"emission factor must be positive, got {self.value}")


@dataclass(frozen=True)
class EnergySample:
    run_id: str
    joules: float
    source: str = "measured"
    wall_seconds: float = 0.0
    assumed_power_watts: float | None = None

    def __post_init__(self):
        if self.joules < 0 or self.wall_seconds < 0:
            raise GreenError("energy and wall time must be nonnegative")
        if self.source not in ("measured", "estimated"):
            raise GreenError(f"source must be 'measured' or 'estimated', got {self.source!r}")
        if self.source == "estimated":
            if not self.assumed_power_watts or self.assumed_power_watts <= 0:
                raise GreenError("estimated samples need a positive assumed_power_watts")
            if abs(self.joules - self.wall_seconds * self.assumed_power_watts) > 1e-9 * max(1.0, self.joules):
                raise GreenError("estimated joules must equal wall_seconds * assumed_power_watts")

    @classmethod
    def estimated(cls, run_id: str, wall_seconds: float, power_watts: float) -> "EnergySample":
        return cls(run_id, wall_seconds * power_watts, "estimated", wall_seconds, power_watts)


def joules_to_kwh(j: float) -> float:
    if j < 0:
        raise GreenError(f"energy must be nonnegative, got {j} J")
    return j / J_PER_KWH


def delta_energy(e_baseline_kwh: float, e_other_kwh: float) -> float:
    return abs(e_baseline_kwh - e_other_kwh)


def co2_equivalent(delta_kwh: float, ef: EmissionFactor = EmissionFactor()) -> float:
    """Grams of CO2e avoided for ``delta_kwh`` of saved energy."""
    if delta_kwh < 0:
        raise GreenError("energy delta must be nonnegative")
    return delta_kwh * ef.value * 1000.0


def efficiency_gain(e_baseline_j: float, e_variant_j: float) -> float:
    """Percent energy saved by a variant relative to the baseline."""
    if e_baseline_j == 0:
        raise GreenError("baseline energy must be nonzero")
    return 100.0 * (e_baseline_j - e_variant_j) / e_baseline_j


# -- energy sources used by the training loop --------------------------------


class EstimatedEnergySource:
    """Wall-clock time multiplied by an assumed device power draw."""

    def __init__(self, power_watts: float):
        if power_watts <= 0:
            raise GreenError("power_watts must be positive")
        self.power_watts = power_watts
        self._t0 = None

    def start(self):
        self._t0 = time.perf_counter()

    def stop(self, run_id: str) -> EnergySample:
        wall = time.perf_counter() - self._t0
        return EnergySample.estimated(run_id, wall, self.power_watts)


class MeterEnergySource:
    """Reads a cumulative joule counter (e.g. an external profiler) before and after."""

    def __init__(self, read_joules: Callable[[], float]):
        self.read_joules = read_joules
        self._j0 = self._t0 = None

    def start(self):
        self._j0 = self.read_joules()
        self._t0 = time.perf_counter()

    def stop(self, run_id: str) -> EnergySample:
        return EnergySample(run_id, self.read_joules() - self._j0, "measured", time.perf_counter() - self._t0)


# -- report --------------------------------------------------------------------


@dataclass(frozen=True)
class GreenRow:
    variant: str
    joules: float
    kwh: float
    source: str
    savings_vs_baseline_kwh: float | None
    co2e_g: float | None
    efficiency_gain_pct: float | None


def green_report(samples: dict[str, EnergySample], ef: EmissionFactor = EmissionFactor(),
                 baseline: str = "baseline") -> list[GreenRow]:
    """One row per variant; the baseline row carries no savings columns."""
    if baseline not in samples:
        raise GreenError(f"green report needs a {baseline!r} run")
    base = samples[baseline]
    base_kwh = joules_to_kwh(base.joules)
    rows = []
    for name, s in samples.items():
        kwh = joules_to_kwh(s.joules)
        if name == baseline:
            rows.append(GreenRow(name, s.joules, kwh, s.source, None, None, None))
            continue
        d = delta_energy(base_kwh, kwh)
        gain = efficiency_gain(base.joules, s.joules) if base.joules > 0 else None
        rows.append(GreenRow(name, s.joules, kwh, s.source, d, co2_equivalent(d, ef), gain))
    return rows


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6e}"
    return str(v)


def report_csv(rows: Sequence[GreenRow], ef: EmissionFactor = EmissionFactor()) -> str:
    buf = io.StringIO()
    buf.write(f"# emission_factor_kg_per_kwh={ef.value} ({ef.region_year_label}); one run per year\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["variant", "joules", "kwh", "source", "annual_savings_vs_baseline_kwh",
                "co2e_g", "efficiency_gain_pct"])
    for r in rows:
        w.writerow([r.variant, _fmt(r.joules), _fmt(r.kwh), r.source, _fmt(r.savings_vs_baseline_kwh),
                    _fmt(r.co2e_g), _fmt(r.efficiency_gain_pct)])
    return buf.getvalue()


def report_json(rows: Sequence[GreenRow], ef: EmissionFactor = EmissionFactor()) -> str:
    doc = {
        "emission_factor": asdict(ef),
        "assumption": "one training run per year",
        "rows": [asdict(r) for r in rows],
    }
    return json.dumps(doc, indent=2, sort_keys=True)
