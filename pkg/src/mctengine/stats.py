"""Nearest-rank percentiles and small summaries."""
from __future__ import annotations

from fractions import Fraction
from typing import Sequence

import numpy as np


def percentile_index(n: int, q) -> int:
    """Index ``ceil(q/100 * n) - 1`` into a sorted sample of size ``n``."""
    if n < 1:
        raise ValueError("percentile of an empty sample")
    frac = Fraction(str(q)) / 100
    if not 0 < frac <= 1:
        raise ValueError(f"percentile {q} outside (0, 100]")
    return max(0, -(-frac.numerator * n // frac.denominator) - 1)


def percentile(values: Sequence[float], q) -> float:
    arr = np.sort(np.asarray(values, dtype=float))
    return float(arr[percentile_index(len(arr), q)])


def summary(values: Sequence[float]) -> dict:
    arr = np.asarray(values, dtype=float)
    if len(arr) == 0:
        return {"n": 0, "mean": 0.0, "p50": 0.0, "p90": 0.0, "max": 0.0}
    arr = np.sort(arr)
    n = len(arr)
    return {
        "n": n,
        "mean": float(arr.mean()),
        "p50": float(arr[percentile_index(n, 50)]),
        "p90": float(arr[percentile_index(n, 90)]),
        "max": float(arr[-1]),
    }
