"""Near-optimality labels and example weights over the plan cover."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..core import ExecutionDataset


def label_near_optimal(
    latencies: Sequence[float],
    default: float,
    optimal: float,
    tau: float,
    censored: Sequence[bool] | None = None,
) -> np.ndarray:
    """Boolean near-optimality label per plan.

    A plan is positive when its improvement over the default is within a
    ``1 + tau`` factor of the best improvement. If the default beats every
    plan, positives are the plans within ``1 + tau`` of the best latency.
    Censored plans are never positive; if nothing qualifies, the fastest
    uncensored plan (or the fastest
    of all if every plan is censored) is forced positive.
    """
    if not tau > 0:
        raise ValueError("tau must be positive")
    lat = np.asarray(latencies, dtype=float)
    cens = np.zeros(len(lat), dtype=bool) if censored is None else np.asarray(censored, dtype=bool)
    if default - optimal > 0:
        pos = (default - lat) * (1 + tau) >= (default - optimal)
    else:
        pos = lat <= optimal * (1 + tau)
    pos &= ~cens
    if not pos.any():
        pool = np.where(cens, np.inf, lat) if not cens.all() else lat
        pos[int(np.argmin(pool))] = True
    return pos


def example_weight(default: float, latency: float, is_regression: bool, C: float, D: float, near_optimal: bool = True) -> float:
    if C < 1 or D < 0:
        raise ValueError("need C >= 1 and D >= 0")
    if is_regression:
        return float(C)
    if near_optimal:
        return 1.0 + D * math.log(max(default - latency, 1.0))
    return 1.0


@dataclass(frozen=True)
class LabelMatrix:
    instances: tuple[int, ...]
    plans: tuple[str, ...]
    labels: np.ndarray  # (n, k) float 0/1
    weights: np.ndarray  # (n, k) positive


def build_labels(
    dataset: ExecutionDataset,
    plans: Sequence[str],
    instances: Sequence[int],
    tau: float = 0.05,
    C: float = 5.0,
    D: float = 0.5,
) -> LabelMatrix:
    """Labels and weights for each (instance, cover plan) pair.

    Missing or censored latencies count as worse than the default.
    """
    lat, cens = dataset.latency_matrix(plans, instances)
    missing = np.isnan(lat)
    labels = np.zeros(lat.shape)
    weights = np.ones(lat.shape)
    for i, q in enumerate(instances):
        ld = dataset.default_latency(q)
        row = np.where(missing[i], np.inf, lat[i])
        bad = cens[i] | missing[i]
        ok = ~bad
        lo = float(row[ok].min()) if ok.any() else float(row.min())
        pos = label_near_optimal(row, ld, lo, tau, bad)
        labels[i] = pos
        for j in range(len(plans)):
            regress = bool(bad[j] or row[j] > ld)
            if pos[j]:
                # a positive that is slower than the default (default beat the whole cover)
                # gets neutral weight rather than the regression boost
                weights[i, j] = 1.0 if regress else example_weight(ld, row[j], False, C, D, True)
            else:
                weights[i, j] = example_weight(ld, row[j], regress, C, D, False)
    return LabelMatrix(tuple(instances), tuple(plans), labels, weights)
