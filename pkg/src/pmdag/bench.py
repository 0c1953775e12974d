"""Timing harness for the forward and backward phases of each solver method.

Absolute times are hardware-dependent; the harness exists for relative
comparisons between methods on a grid of random-graph sizes.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from pmdag.generate import GenSpec, random_pmdag
from pmdag.solver import (
    backward_acc,
    backward_cov,
    backward_reduced,
    edge_weight_map,
    forward_acc,
    forward_cov,
    forward_reduced,
    init_weights,
)
from pmdag.sync import build_masks, synchronize


@dataclass(frozen=True)
class BenchRow:
    v: int
    l_star: float
    e_star: float
    method: str
    phase: str
    mean_seconds: float


def _time_phases(method, sync, masks, weights):
    n = len(sync.layers[-1])
    seed = np.eye(n)
    if method == "covariance":
        t0 = time.perf_counter()
        _sigma, lams, _ = forward_cov(sync, weights)
        t1 = time.perf_counter()
        backward_cov(sync, masks, weights, lams, seed)
        t2 = time.perf_counter()
    elif method == "accumulation":
        t0 = time.perf_counter()
        _sigma, accs = forward_acc(sync, weights)
        t1 = time.perf_counter()
        backward_acc(sync, masks, weights, accs, seed)
        t2 = time.perf_counter()
    elif method == "reduced":
        edge_w = edge_weight_map(masks, weights)
        t0 = time.perf_counter()
        state = forward_reduced(sync, edge_w)
        t1 = time.perf_counter()
        backward_reduced(sync, edge_w, state, seed)
        t2 = time.perf_counter()
    else:
        raise ValueError(f"unknown method {method!r}")
    return t1 - t0, t2 - t1


def bench(
    v_values: Sequence[int],
    l_stars: Sequence[float],
    e_stars: Sequence[float],
    methods: Iterable[str] = ("covariance", "accumulation"),
    repetitions: int = 5,
    seed: int = 0,
) -> list[BenchRow]:
    """Mean forward/backward seconds per method over freshly drawn random graphs."""
    methods = tuple(methods)
    rows = []
    for v in v_values:
        for l_star in l_stars:
            for e_star in e_stars:
                forward_t = {m: 0.0 for m in methods}
                backward_t = {m: 0.0 for m in methods}
                for rep in range(repetitions):
                    g = random_pmdag(GenSpec(v=v, l_star=l_star, e_star=e_star,
                                             seed=seed + rep))
                    sync = synchronize(g)
                    masks = build_masks(sync)
                    weights = init_weights(sync, masks, seed=seed + rep)
                    for m in methods:
                        fwd, bwd = _time_phases(m, sync, masks, weights)
                        forward_t[m] += fwd
                        backward_t[m] += bwd
                for m in methods:
                    rows.append(BenchRow(v, l_star, e_star, m, "forward",
                                         forward_t[m] / repetitions))
                    rows.append(BenchRow(v, l_star, e_star, m, "backward",
                                         backward_t[m] / repetitions))
    return rows


def write_bench_csv(rows: Iterable[BenchRow], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["v", "l_star", "e_star", "method", "phase", "mean_seconds"])
        for row in rows:
            writer.writerow([row.v, row.l_star, row.e_star, row.method,
                             row.phase, repr(row.mean_seconds)])
