"""Deployment cost estimates in exact decimal arithmetic.

One-time scenarios cost ``units x unit_cost``; hourly scenarios cost
``units x unit_cost x hours_per_year`` per year.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from decimal import Decimal, InvalidOperation
from fractions import Fraction

HOURS_PER_YEAR = Decimal(8760)
MAX_TOTAL = Decimal(10) ** 18
DEVIATION_LIMIT = Decimal("0.02")


@dataclass(frozen=True)
class CostScenario:
    label: str
    element: str
    units: int
    unit_cost: Decimal
    pricing: str = "one-time"
    hours_per_year: Decimal = HOURS_PER_YEAR
    vcpus_per_unit: int | None = None
    printed_m: str | None = None   # published total in millions, as printed

    def __post_init__(self):
        object.__setattr__(self, "unit_cost", Decimal(str(self.unit_cost)))
        object.__setattr__(self, "hours_per_year", Decimal(str(self.hours_per_year)))
        if self.printed_m is not None:
            Decimal(self.printed_m)
        if not isinstance(self.units, int) or self.units < 1:
            raise ValueError(f"{self.label}: units must be a positive integer")
        if self.unit_cost <= 0:
            raise ValueError(f"{self.label}: unit cost must be positive")
        if self.pricing not in ("one-time", "hourly"):
            raise ValueError(f"{self.label}: pricing must be one-time or hourly")
        if self.hours_per_year < 0:
            raise ValueError(f"{self.label}: hours_per_year must be >= 0")

    @property
    def printed_total(self) -> Decimal | None:
        return None if self.printed_m is None else Decimal(self.printed_m) * 1_000_000


def scenario_cost(s: CostScenario) -> Decimal:
    total = s.units * s.unit_cost
    if s.pricing == "hourly":
        total *= s.hours_per_year
    if total > MAX_TOTAL:
        raise OverflowError(f"{s.label}: total {total} exceeds {MAX_TOTAL}")
    return total


def sizing(baseline_servers: int, offload_fraction, cpu_ratio=1) -> int:
    """Servers needed once a fraction of the load is offloaded.

    ``ceil(baseline * (1 - offload) * cpu_ratio)``, computed exactly.
    """
    f = Fraction(str(offload_fraction))
    r = Fraction(str(cpu_ratio))
    if baseline_servers < 0:
        raise ValueError("baseline_servers must be >= 0")
    if not 0 <= f < 1:
        raise ValueError("offload_fraction must lie in [0, 1)")
    if r < 1:
        raise ValueError("cpu_ratio must be >= 1")
    return math.ceil(baseline_servers * (1 - f) * r)


def _k(v) -> Decimal:
    return Decimal(v) * 1000


def _m(v) -> Decimal:
    return Decimal(v) * 1_000_000


_DE = "Domain Explorer"
_ERB = "Domain Explorer + engine"


def _rows(table: int) -> list[CostScenario]:
    rs = " + Route Scoring" if table == 3 else ""
    cpu = 400 if table == 2 else 480
    t = table
    return [
        CostScenario(f"T{t} on-prem CPU", f"Original {_DE}{rs} / CPU", cpu, _k(10), vcpus_per_unit=48,
                     printed_m="4" if t == 2 else "4.8"),
        CostScenario(f"T{t} on-prem U200", f"{_ERB}{rs} / CPU + Alveo U200", 244, _k(20), vcpus_per_unit=48,
                     printed_m="4.88"),
        CostScenario(f"T{t} on-prem U50", f"{_ERB}{rs} / CPU + Alveo U50", 244, _k(13), vcpus_per_unit=48,
                     printed_m="3.17"),
        CostScenario(f"T{t} AWS c5.12xlarge", f"Original {_DE}{rs} / c5.12xlarge", cpu, Decimal("1.452"),
                     "hourly", vcpus_per_unit=48, printed_m="5.0" if t == 2 else "6.1"),
        CostScenario(f"T{t} AWS f1.2xlarge", f"{_ERB}{rs} / f1.2xlarge", 1464, Decimal("1.2266"),
                     "hourly", vcpus_per_unit=8, printed_m="15.7"),
        CostScenario(f"T{t} Azure F48s v2", f"Original {_DE}{rs} / F48s v2", cpu, Decimal("1.2084"),
                     "hourly", vcpus_per_unit=48, printed_m="4.2" if t == 2 else "5.0"),
        CostScenario(f"T{t} Azure NP10s", f"{_ERB}{rs} / NP10s", 1171, Decimal("1.0411"),
                     "hourly", vcpus_per_unit=10, printed_m="10.6"),
    ]


def builtin_scenarios(table: int) -> list[CostScenario]:
    if table not in (2, 3):
        raise ValueError("built-in tables are 2 and 3")
    return _rows(table)


def evaluate(s: CostScenario) -> dict:
    total = scenario_cost(s)
    row = {
        "label": s.label,
        "element": s.element,
        "vcpus": s.vcpus_per_unit,
        "units": s.units,
        "unit_cost": str(s.unit_cost),
        "pricing": s.pricing,
        "total": str(total),
        "total_m": str((total / _m(1)).quantize(Decimal("0.001"))),
    }
    if s.printed_total is not None:
        dev = abs(total - s.printed_total) / s.printed_total
        printed = Decimal(s.printed_m)
        in_millions = (total / _m(1)).quantize(Decimal(1).scaleb(printed.as_tuple().exponent))
        row.update(
            printed_m=s.printed_m,
            deviation=str(dev.quantize(Decimal("0.0001"))),
            matches_printed=in_millions == printed,
            flagged=dev > DEVIATION_LIMIT,
        )
    return row


def report_tables(tables=(2, 3)) -> list[dict]:
    """Every built-in row with its computed total; rows off by > 2% are flagged."""
    out = []
    for t in tables:
        for s in builtin_scenarios(t):
            row = evaluate(s)
            row["table"] = t
            out.append(row)
    return out


def _money(text: str) -> Decimal:
    text = text.strip().replace(",", "").replace("$", "")
    mult = Decimal(1)
    if text[-1:] in ("k", "K"):
        mult, text = Decimal(1000), text[:-1]
    elif text[-1:] == "M":
        mult, text = Decimal(1_000_000), text[:-1]
    try:
        return Decimal(text.strip()) * mult
    except InvalidOperation:
        raise ValueError(f"malformed amount {text!r}") from None


def parse_scenarios(text: str) -> list[CostScenario]:
    """``label | element | units | unit_cost | pricing [| hours_per_year [| vcpus [| printed millions]]]``.

    ``unit_cost`` accepts ``k``/``M`` suffixes and a ``/h`` suffix meaning hourly.
    """
    out = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        f = [p.strip() for p in line.split("|")]
        if not 5 <= len(f) <= 8:
            raise ValueError(f"line {lineno}: expected 5 to 8 '|'-separated fields")
        try:
            cost = f[3]
            pricing = f[4]
            if cost.endswith("/h"):
                cost, pricing = cost[:-2], "hourly"
            kwargs = {}
            if len(f) > 5 and f[5]:
                kwargs["hours_per_year"] = Decimal(f[5])
            if len(f) > 6 and f[6]:
                kwargs["vcpus_per_unit"] = int(f[6])
            if len(f) > 7 and f[7]:
                kwargs["printed_m"] = str(Decimal(f[7].rstrip("M").strip()))
            out.append(CostScenario(f[0], f[1], int(f[2].replace(",", "")), _money(cost), pricing, **kwargs))
        except (ValueError, InvalidOperation) as exc:
            raise ValueError(f"line {lineno}: {exc}") from None
    return out
