"""Expert popularity and inter-layer affinity statistics.

Counting is exact integer arithmetic; normalization happens once at the
end, so results are independent of trace order and of any sharding.
Rows for experts never observed at a layer stay all-zero as an explicit
"no information" sentinel. `stats_oracle` re-counts with naive loops
sharing no code with the vectorized builders and exists to check them.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .trace import TraceDataset


class StatsError(ValueError):
    """Raised for statistics over unusable datasets."""


@dataclass(frozen=True, eq=False)
class PopularityMatrix:
    """Per-layer selection frequencies: values[l][i] = counts[l][i] / (N * k)."""

    values: np.ndarray   # (L, M) float64, rows sum to 1
    counts: np.ndarray   # (L, M) int64 raw selection counts
    n_episodes: int


@dataclass(frozen=True, eq=False)
class AffinityMatrix:
    """Consecutive-layer co-selection: values[l][i][j] = P(j at l+1 | i at l)."""

    values: np.ndarray   # (L-1, M, M) float64, observed rows sum to 1
    counts: np.ndarray   # (L-1, M, M) int64 raw co-occurrence counts


def _indicator(ds: TraceDataset) -> np.ndarray:
    """(N, L, M) 0/1 int64 tensor of per-trace per-layer selections."""
    X = np.zeros((len(ds.traces), ds.L, ds.M), dtype=np.int64)
    for n, t in enumerate(ds.traces):
        for l, sel in enumerate(t.path):
            X[n, l, list(sel)] = 1
    return X


def build_popularity(ds: TraceDataset) -> PopularityMatrix:
    if len(ds.traces) == 0:
        raise StatsError("cannot build popularity from an empty dataset")
    counts = _indicator(ds).sum(axis=0)
    row_sums = counts.sum(axis=1, keepdims=True)
    values = counts / row_sums
    return PopularityMatrix(values=values, counts=counts, n_episodes=len(ds.traces))


def build_affinity(ds: TraceDataset) -> AffinityMatrix:
    if len(ds.traces) == 0:
        raise StatsError("cannot build affinity from an empty dataset")
    if ds.L < 2:
        raise StatsError(f"affinity needs at least 2 layers, model has {ds.L}")
    X = _indicator(ds)
    counts = np.einsum("nli,nlj->lij", X[:, :-1, :], X[:, 1:, :])
    row_sums = counts.sum(axis=2, keepdims=True)
    values = np.divide(counts, row_sums, out=np.zeros(counts.shape, dtype=np.float64),
                       where=row_sums > 0)
    return AffinityMatrix(values=values, counts=counts)


def stats_oracle(ds: TraceDataset) -> tuple[PopularityMatrix, AffinityMatrix]:
    """Independent brute-force recount used by tests; no shared code paths."""
    if len(ds.traces) == 0:
        raise StatsError("cannot build statistics from an empty dataset")
    if ds.L < 2:
        raise StatsError(f"affinity needs at least 2 layers, model has {ds.L}")
    L, M = ds.L, ds.M
    pop_counts = [[0] * M for _ in range(L)]
    aff_counts = [[[0] * M for _ in range(M)] for _ in range(L - 1)]
    for t in ds.traces:
        for l in range(L):
            for i in range(M):
                if i in t.path[l]:
                    pop_counts[l][i] += 1
        for l in range(L - 1):
            for i in range(M):
                for j in range(M):
                    if i in t.path[l] and j in t.path[l + 1]:
                        aff_counts[l][i][j] += 1
    pop_values = [[0.0] * M for _ in range(L)]
    for l in range(L):
        total = sum(pop_counts[l])
        for i in range(M):
            pop_values[l][i] = pop_counts[l][i] / total
    aff_values = [[[0.0] * M for _ in range(M)] for _ in range(L - 1)]
    for l in range(L - 1):
        for i in range(M):
            total = sum(aff_counts[l][i])
            if total > 0:
                for j in range(M):
                    aff_values[l][i][j] = aff_counts[l][i][j] / total
    pop = PopularityMatrix(values=np.array(pop_values), counts=np.array(pop_counts),
                           n_episodes=len(ds.traces))
    aff = AffinityMatrix(values=np.array(aff_values), counts=np.array(aff_counts))
    return pop, aff


def matrices_to_json(pop: PopularityMatrix, aff: AffinityMatrix) -> str:
    doc = {
        "schema_version": 1,
        "popularity": pop.values.tolist(),
        "affinity": aff.values.tolist(),
        "counts": {
            "popularity": pop.counts.tolist(),
            "affinity": aff.counts.tolist(),
        },
        "n": pop.n_episodes,
    }
    return json.dumps(doc, sort_keys=True) + "\n"


def save_matrices(pop: PopularityMatrix, aff: AffinityMatrix, path) -> None:
    Path(path).write_text(matrices_to_json(pop, aff), encoding="utf-8")


def load_matrices(path) -> tuple[PopularityMatrix, AffinityMatrix]:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise StatsError(f"cannot load matrices from {path}: {e}") from e
    try:
        pop = PopularityMatrix(
            values=np.array(doc["popularity"], dtype=np.float64),
            counts=np.array(doc["counts"]["popularity"], dtype=np.int64),
            n_episodes=int(doc["n"]),
        )
        aff = AffinityMatrix(
            values=np.array(doc["affinity"], dtype=np.float64),
            counts=np.array(doc["counts"]["affinity"], dtype=np.int64),
        )
    except (KeyError, TypeError, ValueError) as e:
        raise StatsError(f"{path}: bad matrices document: {e}") from e
    return pop, aff


def export_csv(pop: PopularityMatrix, aff: AffinityMatrix, out_dir) -> list[Path]:
    """Write popularity and per-layer-pair affinity CSVs for external plotting."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    L, M = pop.values.shape
    path = out_dir / "popularity.csv"
    with path.open("w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["layer"] + [f"expert_{i}" for i in range(M)])
        for l in range(L):
            w.writerow([l] + [repr(float(v)) for v in pop.values[l]])
    written.append(path)
    for l in range(L - 1):
        path = out_dir / f"affinity_l{l}_l{l + 1}.csv"
        with path.open("w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow(["expert"] + [f"next_{j}" for j in range(M)])
            for i in range(M):
                w.writerow([i] + [repr(float(v)) for v in aff.values[l, i]])
        written.append(path)
    return written
