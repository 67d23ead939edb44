"""Corpus coverage bitmaps, lossless column reduction and corpus replay."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Iterable, Protocol, Sequence

import numpy as np

from .errors import InsufficientDataError
from .target import Target, execute

METRIC_ID = "replay_coverage/v1"


class CaseLike(Protocol):
    id: str
    data: bytes


@dataclass(frozen=True)
class Case:
    """Minimal test case: anything with ``id`` and ``data`` works."""

    id: str
    data: bytes


@dataclass(frozen=True)
class CoverageBitmap:
    rows: np.ndarray  # (n_cases, n_columns) uint8
    edge_index: tuple[tuple[int, ...], ...]
    corpus_ids: tuple[str, ...]

    def __post_init__(self):
        if self.rows.ndim != 2 or self.rows.shape != (len(self.corpus_ids), len(self.edge_index)):
            raise ValueError(
                f"bitmap shape {self.rows.shape} does not match "
                f"{len(self.corpus_ids)} cases x {len(self.edge_index)} columns"
            )

    @property
    def num_columns(self) -> int:
        return len(self.edge_index)

    def edges(self) -> set[int]:
        return {e for group in self.edge_index for e in group}

    def expand(self) -> "CoverageBitmap":
        """Undo a reduction: one column per original edge, ascending edge id."""
        order = sorted((e, col) for col, group in enumerate(self.edge_index) for e in group)
        cols = [col for _, col in order]
        rows = self.rows[:, cols] if cols else self.rows[:, :0]
        return CoverageBitmap(rows.copy(), tuple((e,) for e, _ in order), self.corpus_ids)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["case"] + [" ".join(map(str, g)) for g in self.edge_index])
        for cid, row in zip(self.corpus_ids, self.rows):
            w.writerow([cid] + [int(v) for v in row])
        return buf.getvalue()


class CoverageCache:
    """Test-case id -> edge set; confined to one trial."""

    def __init__(self):
        self._edges: dict[str, frozenset[int]] = {}
        self.executions = 0

    def __contains__(self, case_id):
        return case_id in self._edges

    def __len__(self):
        return len(self._edges)

    def put(self, case_id: str, edges: Iterable[int]):
        self._edges[case_id] = frozenset(edges)

    def edges_for(self, case: CaseLike, target: Target) -> frozenset[int]:
        hit = self._edges.get(case.id)
        if hit is None:
            hit = execute(target, case.data).edges_hit
            self.executions += 1
            self._edges[case.id] = hit
        return hit


def bitmap_from_edge_sets(edge_sets: Sequence[Iterable[int]], corpus_ids: Sequence[str]) -> CoverageBitmap:
    sets = [frozenset(s) for s in edge_sets]
    if not sets:
        raise InsufficientDataError("cannot build a coverage bitmap from an empty corpus")
    edges = sorted(set().union(*sets))
    col = {e: i for i, e in enumerate(edges)}
    rows = np.zeros((len(sets), len(edges)), dtype=np.uint8)
    for r, s in enumerate(sets):
        rows[r, [col[e] for e in s]] = 1
    return CoverageBitmap(rows, tuple((e,) for e in edges), tuple(corpus_ids))


def aggregate(corpus: Sequence[CaseLike], target: Target, cache: CoverageCache | None = None) -> CoverageBitmap:
    """Unreduced bitmap over ``corpus``; only edges seen by some case get a column."""
    if not corpus:
        raise InsufficientDataError("cannot build a coverage bitmap from an empty corpus")
    if cache is None:
        cache = CoverageCache()
    sets = [cache.edges_for(c, target) for c in corpus]
    return bitmap_from_edge_sets(sets, [c.id for c in corpus])


def reduce(bitmap: CoverageBitmap) -> CoverageBitmap:
    """Merge columns with identical 0/1 patterns across all rows.

    Output columns are ordered by their smallest original edge id.
    """
    groups: dict[bytes, list[int]] = {}
    first_col: dict[bytes, int] = {}
    for col in range(bitmap.num_columns):
        key = bitmap.rows[:, col].tobytes()
        groups.setdefault(key, []).extend(bitmap.edge_index[col])
        first_col.setdefault(key, col)
    merged = sorted(groups.items(), key=lambda kv: min(kv[1]))
    cols = [first_col[k] for k, _ in merged]
    rows = bitmap.rows[:, cols] if cols else bitmap.rows[:, :0]
    return CoverageBitmap(rows.copy(), tuple(tuple(sorted(g)) for _, g in merged), bitmap.corpus_ids)


def replay_coverage(corpus: Sequence[CaseLike], target: Target) -> tuple[set[int], int]:
    """Union of edges over a fresh execution of every corpus entry.

    This is the one coverage number used to compare fuzzer configurations.
    """
    edges: set[int] = set()
    for case in corpus:
        edges |= execute(target, case.data).edges_hit
    return edges, len(edges)


def imbalance(bitmap: CoverageBitmap) -> float:
    """Fraction of (test case, edge) cells that are covered, on the expanded bitmap."""
    rows = bitmap.expand().rows
    if rows.size == 0:
        raise InsufficientDataError("empty bitmap")
    return float(rows.mean())
