"""Cascade datasets: parsing, validation, chronological splits and hypergraphs.

File formats
------------
Cascade file, one cascade per line::

    <cascade_id>\t<user>,<timestamp> <user>,<timestamp> ...

Graph file, one undirected edge per line::

    <user> <user>

Raw user ids are arbitrary integers; on load they are re-indexed densely in
ascending raw-id order, and ``Dataset.user_ids`` keeps the mapping back.
"""

from __future__ import annotations

import bisect
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

log = logging.getLogger(__name__)

MAX_CASCADE_LENGTH = 200


class DatasetFormatError(ValueError):
    def __init__(self, path, lineno: int, message: str):
        self.path = str(path)
        self.lineno = lineno
        super().__init__(f"{path}:{lineno}: {message}")


@dataclass(frozen=True)
class Cascade:
    id: str
    users: tuple[int, ...]
    timestamps: tuple[float, ...]
    final_size: int

    def __post_init__(self):
        if len(self.users) != len(self.timestamps):
            raise ValueError("users and timestamps differ in length")
        if not self.users:
            raise ValueError(f"cascade {self.id!r} is empty")
        if any(b < a for a, b in zip(self.timestamps, self.timestamps[1:])):
            raise ValueError(f"cascade {self.id!r}: non-monotone timestamps")
        if len(set(self.users)) != len(self.users):
            raise ValueError(f"cascade {self.id!r}: duplicate users")
        if self.final_size < len(self.users):
            raise ValueError(f"cascade {self.id!r}: final_size below observed length")

    @property
    def events(self) -> list[tuple[int, float]]:
        return list(zip(self.users, self.timestamps))

    @property
    def start(self) -> float:
        return self.timestamps[0]

    def __len__(self) -> int:
        return len(self.users)


@dataclass
class SocialGraph:
    num_users: int
    edges: list[tuple[int, int]]
    directed: bool = False
    _norm: sp.csr_matrix | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        for u, v in self.edges:
            if not (0 <= u < self.num_users and 0 <= v < self.num_users):
                raise ValueError(f"edge ({u}, {v}) outside 0..{self.num_users - 1}")

    def adjacency(self) -> sp.csr_matrix:
        n = self.num_users
        if not self.edges:
            return sp.csr_matrix((n, n))
        e = np.asarray(self.edges, dtype=np.int64)
        rows, cols = e[:, 0], e[:, 1]
        if not self.directed:
            rows, cols = np.concatenate([rows, cols]), np.concatenate([cols, rows])
        a = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
        a.data[:] = 1.0  # collapse duplicates
        return a

    def normalized_adjacency(self) -> sp.csr_matrix:
        """D^-1/2 (A + I) D^-1/2; for directed graphs out- and in-degrees are used."""
        if self._norm is None:
            a = self.adjacency() + sp.identity(self.num_users, format="csr")
            out_deg = np.asarray(a.sum(axis=1)).ravel()
            in_deg = np.asarray(a.sum(axis=0)).ravel()
            left = sp.diags(1.0 / np.sqrt(out_deg))
            right = sp.diags(1.0 / np.sqrt(in_deg if self.directed else out_deg))
            self._norm = (left @ a @ right).tocsr()
        return self._norm


@dataclass
class Interval:
    lo: float
    hi: float
    users: list[int]                # sorted active users
    hyperedges: list[list[int]]     # one per cascade active in the interval
    cascade_ids: list[str]


@dataclass
class DiffusionHypergraphs:
    num_users: int
    boundaries: list[float]         # T + 1 edges, boundaries[0] = min ts
    intervals: list[Interval]

    @property
    def T(self) -> int:
        return len(self.intervals)

    def propagation_matrices(self, t: int):
        """(edge-mean, node-mean, active mask) matrices for interval ``t``.

        edge-mean is E x N with rows averaging hyperedge members; node-mean is
        N x E averaging over the hyperedges a user belongs to (zero rows for
        inactive users).
        """
        iv = self.intervals[t]
        n, m = self.num_users, len(iv.hyperedges)
        rows, cols = [], []
        for j, members in enumerate(iv.hyperedges):
            rows.extend([j] * len(members))
            cols.extend(members)
        inc = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(m, n))
        edge_size = np.asarray(inc.sum(axis=1)).ravel()
        node_deg = np.asarray(inc.sum(axis=0)).ravel()
        edge_mean = (sp.diags(1.0 / edge_size) @ inc).tocsr()
        inv_deg = np.divide(1.0, node_deg, out=np.zeros_like(node_deg), where=node_deg > 0)
        node_mean = (sp.diags(inv_deg) @ inc.T).tocsr()
        active = (node_deg > 0).astype(np.float64)
        return edge_mean, node_mean, active


@dataclass
class DatasetSplit:
    train: list[Cascade]
    valid: list[Cascade]
    test: list[Cascade]
    fractions: tuple[float, float, float]


@dataclass
class Dataset:
    graph: SocialGraph
    cascades: list[Cascade]
    user_ids: list[int]              # dense index -> raw id

    @property
    def num_users(self) -> int:
        return self.graph.num_users


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------

def parse_cascade_line(line: str, path="<string>", lineno: int = 1):
    """Return ``(cascade_id, [(raw_user, ts), ...], dropped_duplicates)``."""
    if "\t" not in line:
        raise DatasetFormatError(path, lineno, "expected '<id>\\t<events>'")
    cid, body = line.split("\t", 1)
    cid = cid.strip()
    if not cid:
        raise DatasetFormatError(path, lineno, "empty cascade id")
    events: list[tuple[int, float]] = []
    seen: set[int] = set()
    dropped = 0
    for token in body.split():
        parts = token.split(",")
        if len(parts) != 2:
            raise DatasetFormatError(path, lineno, f"malformed event {token!r}")
        try:
            user = int(parts[0])
            ts = float(parts[1])
        except ValueError:
            raise DatasetFormatError(path, lineno, f"malformed event {token!r}") from None
        if not math.isfinite(ts) or ts < 0:
            raise DatasetFormatError(path, lineno, f"invalid timestamp {parts[1]!r}")
        if events and ts < events[-1][1]:
            raise DatasetFormatError(path, lineno, "non-monotone timestamps")
        if user in seen:
            dropped += 1
            continue
        seen.add(user)
        events.append((user, ts))
    if not events:
        raise DatasetFormatError(path, lineno, "cascade has no events")
    return cid, events, dropped


def parse_edge_line(line: str, path="<string>", lineno: int = 1) -> tuple[int, int]:
    parts = line.split()
    if len(parts) != 2:
        raise DatasetFormatError(path, lineno, f"expected '<user> <user>', got {line.strip()!r}")
    try:
        return int(parts[0]), int(parts[1])
    except ValueError:
        raise DatasetFormatError(path, lineno, f"non-integer user id in {line.strip()!r}") from None


def _content_lines(path: Path) -> Iterable[tuple[int, str]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n").rstrip("\r")
            if line.strip():
                yield lineno, line


def load_dataset(cascade_path, graph_path, directed: bool = False,
                 max_cascade_length: int = MAX_CASCADE_LENGTH) -> Dataset:
    """Read a cascade file and a graph file into a densely indexed :class:`Dataset`.

    Cascades longer than ``max_cascade_length`` are truncated; their
    ``final_size`` still counts every distinct adopter.
    """
    cascade_path, graph_path = Path(cascade_path), Path(graph_path)
    raw_cascades = []
    seen_ids: set[str] = set()
    for lineno, line in _content_lines(cascade_path):
        cid, events, dropped = parse_cascade_line(line, cascade_path, lineno)
        if cid in seen_ids:
            raise DatasetFormatError(cascade_path, lineno, f"duplicate cascade id {cid!r}")
        seen_ids.add(cid)
        if dropped:
            log.warning("%s:%d: dropped %d repeated user(s) in cascade %s",
                        cascade_path, lineno, dropped, cid)
        raw_cascades.append((cid, events))

    raw_edges = []
    for lineno, line in _content_lines(graph_path):
        u, v = parse_edge_line(line, graph_path, lineno)
        raw_edges.append((u, v))

    raw_users = {u for _, ev in raw_cascades for u, _ in ev}
    raw_users.update(u for e in raw_edges for u in e)
    user_ids = sorted(raw_users)
    index = {u: i for i, u in enumerate(user_ids)}

    edge_set: set[tuple[int, int]] = set()
    edges: list[tuple[int, int]] = []
    for u, v in raw_edges:
        a, b = index[u], index[v]
        if a == b:
            continue
        key = (a, b) if directed else (min(a, b), max(a, b))
        if key not in edge_set:
            edge_set.add(key)
            edges.append(key)

    cascades = []
    for cid, events in raw_cascades:
        kept = events[:max_cascade_length]
        cascades.append(Cascade(
            id=cid,
            users=tuple(index[u] for u, _ in kept),
            timestamps=tuple(ts for _, ts in kept),
            final_size=len(events),
        ))
    graph = SocialGraph(num_users=len(user_ids), edges=edges, directed=directed)
    return Dataset(graph=graph, cascades=cascades, user_ids=user_ids)


def _fmt_ts(ts: float) -> str:
    return repr(float(ts))


def write_dataset(dataset: Dataset, cascade_path, graph_path) -> None:
    ids = dataset.user_ids
    with open(cascade_path, "w", encoding="utf-8") as fh:
        for c in dataset.cascades:
            body = " ".join(f"{ids[u]},{_fmt_ts(t)}" for u, t in zip(c.users, c.timestamps))
            fh.write(f"{c.id}\t{body}\n")
    with open(graph_path, "w", encoding="utf-8") as fh:
        for u, v in dataset.graph.edges:
            fh.write(f"{ids[u]} {ids[v]}\n")


# ---------------------------------------------------------------------------
# splits and prefixes
# ---------------------------------------------------------------------------

def chronological_split(cascades: Sequence[Cascade],
                        fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)) -> DatasetSplit:
    """Sort by start time (ties by id) and cut contiguous slices.

    Valid and test get ``floor(f * n)`` cascades; the remainder goes to train.
    """
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"split fractions must be three non-negatives summing to 1, got {fractions}")
    n = len(cascades)
    if n < 3:
        raise ValueError(f"need at least 3 cascades to split, got {n}")
    ordered = sorted(cascades, key=lambda c: (c.start, c.id))
    n_valid = math.floor(fractions[1] * n + 1e-9)
    n_test = math.floor(fractions[2] * n + 1e-9)
    n_train = n - n_valid - n_test
    return DatasetSplit(
        train=ordered[:n_train],
        valid=ordered[n_train:n_train + n_valid],
        test=ordered[n_train + n_valid:],
        fractions=tuple(fractions),
    )


def observed_length(length: int, fraction: float = 0.5) -> int:
    """Number of leading events treated as the observed prefix.

    ``floor(fraction * length)`` clamped to [2, length - 1]; cascades of
    length 1 or 2 observe a single event.
    """
    if length < 1:
        raise ValueError("empty cascade")
    if length <= 2:
        return 1
    return min(length - 1, max(2, math.floor(fraction * length)))


# ---------------------------------------------------------------------------
# hypergraphs
# ---------------------------------------------------------------------------

def interval_boundaries(lo: float, hi: float, T: int) -> list[float]:
    # end points are exact; interior points may round, so bucketing bisects these values
    return [lo] + [lo + (hi - lo) * k / T for k in range(1, T)] + [hi]


def build_hypergraphs(train: Sequence[Cascade], T: int, num_users: int) -> DiffusionHypergraphs:
    """Equal-width partition of the training time range into ``T`` intervals.

    Intervals are half-open except the last, which is closed on the right.
    Each (cascade, interval) pair with at least one event becomes a hyperedge.
    """
    if T < 1:
        raise ValueError(f"interval count must be >= 1, got {T}")
    all_ts = [t for c in train for t in c.timestamps]
    if not all_ts:
        raise ValueError("no training events to build hypergraphs from")
    lo, hi = min(all_ts), max(all_ts)
    bounds = interval_boundaries(lo, hi, T)

    def bucket(ts: float) -> int:
        return min(T - 1, bisect.bisect_right(bounds, ts) - 1)

    per_interval: list[dict[str, list[int]]] = [dict() for _ in range(T)]
    for c in train:
        for u, ts in zip(c.users, c.timestamps):
            per_interval[bucket(ts)].setdefault(c.id, []).append(u)

    intervals = []
    for k in range(T):
        groups = per_interval[k]
        cids = list(groups)
        edges = [sorted(groups[cid]) for cid in cids]
        users = sorted({u for e in edges for u in e})
        intervals.append(Interval(lo=bounds[k], hi=bounds[k + 1], users=users,
                                  hyperedges=edges, cascade_ids=cids))
    return DiffusionHypergraphs(num_users=num_users, boundaries=bounds, intervals=intervals)
