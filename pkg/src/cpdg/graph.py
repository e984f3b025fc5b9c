"""Continuous-time dynamic graph storage.

A graph is an append-only log of timestamped interactions ``(src, dst, t)``
plus a per-node, time-sorted neighbor index.  Interactions are undirected for
neighborhood purposes: an event ``(i, j, t)`` makes ``j`` a neighbor of ``i``
and ``i`` a neighbor of ``j`` from time ``t`` on.
"""

from __future__ import annotations

import bisect
import csv
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

CACHE_MAGIC = b"CTDG"
CACHE_VERSION = 1


class GraphFormatError(ValueError):
    """Raised for malformed event files or caches."""


@dataclass(frozen=True)
class Event:
    src: int
    dst: int
    timestamp: float
    label: int | None = None
    edge_features: tuple[float, ...] | None = None

    def __post_init__(self):
        if not math.isfinite(self.timestamp) or self.timestamp < 0:
            raise ValueError(f"timestamp must be finite and >= 0, got {self.timestamp}")
        if self.src == self.dst:
            raise ValueError(f"self-loop on node {self.src}")


class _CountingView:
    """Sequence wrapper that counts element reads (binary-search probes)."""

    def __init__(self, data, counter):
        self._data = data
        self._counter = counter

    def __len__(self):
        return len(self._data)

    def __getitem__(self, k):
        self._counter["probes"] += 1
        return self._data[k]


class TemporalGraph:
    """Immutable event log with a CSR neighbor index sorted by (time, ordinal).

    ``src``, ``dst`` and ``ts`` are parallel arrays in nondecreasing time
    order; event ordinals are positions in these arrays.
    """

    def __init__(self, src, dst, ts, num_nodes: int | None = None, labels=None,
                 features=None, id_map: Sequence[str] | None = None):
        self.src = np.ascontiguousarray(src, dtype=np.int64)
        self.dst = np.ascontiguousarray(dst, dtype=np.int64)
        self.ts = np.ascontiguousarray(ts, dtype=np.float64)
        n_ev = len(self.ts)
        if not (len(self.src) == len(self.dst) == n_ev):
            raise ValueError("src, dst and ts must have equal length")
        if n_ev:
            if not np.all(np.isfinite(self.ts)) or self.ts.min() < 0:
                raise ValueError("timestamps must be finite and >= 0")
            if np.any(np.diff(self.ts) < 0):
                raise ValueError("events must be sorted by timestamp")
            if np.any(self.src == self.dst):
                raise ValueError("self-loops are not allowed")
        inferred = int(max(self.src.max(), self.dst.max()) + 1) if n_ev else 0
        self.num_nodes = inferred if num_nodes is None else int(num_nodes)
        if self.num_nodes < inferred:
            raise ValueError(f"num_nodes={self.num_nodes} but ids reach {inferred - 1}")
        self.labels = None if labels is None else np.asarray(labels, dtype=np.int8)
        self.features = None if features is None else np.asarray(features, dtype=np.float64)
        self.id_map = list(id_map) if id_map is not None else [str(k) for k in range(self.num_nodes)]
        self.stats = {"self_loops_rejected": 0, "queries": 0, "probes": 0, "returned": 0}
        self.instrument = False
        self._build_index()

    # -- construction helpers -------------------------------------------------

    @classmethod
    def from_events(cls, events: Iterable[Event], num_nodes: int | None = None) -> "TemporalGraph":
        events = sorted(events, key=lambda e: e.timestamp)  # stable
        src = [e.src for e in events]
        dst = [e.dst for e in events]
        ts = [e.timestamp for e in events]
        labels = None
        if events and any(e.label is not None for e in events):
            labels = [-1 if e.label is None else int(e.label) for e in events]
        feats = None
        if events and events[0].edge_features is not None:
            feats = [e.edge_features for e in events]
        return cls(src, dst, ts, num_nodes=num_nodes, labels=labels, features=feats)

    def _build_index(self):
        n_ev = len(self.ts)
        owner = np.concatenate([self.src, self.dst])
        other = np.concatenate([self.dst, self.src])
        ordinal = np.concatenate([np.arange(n_ev), np.arange(n_ev)])
        # events are time-sorted, so ordering by (owner, ordinal) is ordering by (owner, time, ordinal)
        order = np.lexsort((ordinal, owner))
        self._nbr = other[order]
        self._ord = ordinal[order]
        self._nbr_ts = self.ts[self._ord] if n_ev else np.zeros(0)
        counts = np.bincount(owner, minlength=self.num_nodes) if n_ev else np.zeros(self.num_nodes, dtype=np.int64)
        self.indptr = np.zeros(self.num_nodes + 1, dtype=np.int64)
        np.cumsum(counts, out=self.indptr[1:])
        first = np.full(self.num_nodes, np.inf)
        has = counts > 0
        first[has] = self._nbr_ts[self.indptr[:-1][has]]
        self.first_time = first
        self._first_order = np.argsort(first, kind="stable")
        self._first_sorted = first[self._first_order]
        dsts = np.unique(self.dst)
        self.dst_nodes = dsts

    # -- basic accessors ------------------------------------------------------

    @property
    def num_events(self) -> int:
        return len(self.ts)

    def __len__(self):
        return self.num_events

    def event(self, k: int) -> Event:
        label = None
        if self.labels is not None and self.labels[k] >= 0:
            label = int(self.labels[k])
        feats = None if self.features is None else tuple(float(x) for x in self.features[k])
        return Event(int(self.src[k]), int(self.dst[k]), float(self.ts[k]), label, feats)

    def events(self) -> list[Event]:
        return [self.event(k) for k in range(self.num_events)]

    def degree(self, i: int) -> int:
        return int(self.indptr[i + 1] - self.indptr[i])

    # -- neighborhood queries -------------------------------------------------

    def cutoff(self, i: int, t: float) -> int:
        """Number of index entries of node ``i`` with time strictly before ``t``."""
        lo, hi = self.indptr[i], self.indptr[i + 1]
        if self.instrument:
            view = _CountingView(self._nbr_ts[lo:hi], self.stats)
            return bisect.bisect_left(view, t)
        return int(np.searchsorted(self._nbr_ts[lo:hi], t, side="left"))

    def neighbor_arrays(self, i: int, t: float):
        """Views ``(neighbor_ids, times, ordinals)`` of events of ``i`` before ``t``."""
        if i < 0 or i >= self.num_nodes:
            empty = np.zeros(0, dtype=np.int64)
            return empty, np.zeros(0), empty
        lo = self.indptr[i]
        k = self.cutoff(i, t)
        if self.instrument:
            self.stats["queries"] += 1
            self.stats["returned"] += k
        return self._nbr[lo:lo + k], self._nbr_ts[lo:lo + k], self._ord[lo:lo + k]

    def neighbors_before(self, i: int, t: float) -> list[tuple[int, float]]:
        nbr, times, _ = self.neighbor_arrays(i, t)
        return [(int(u), float(s)) for u, s in zip(nbr, times)]

    def nodes_with_history(self, t: float) -> np.ndarray:
        """Nodes having at least one event strictly before ``t``, ordered by first event time."""
        k = int(np.searchsorted(self._first_sorted, t, side="left"))
        return self._first_order[:k]

    # -- derived graphs -------------------------------------------------------

    def slice(self, start: int, stop: int) -> "TemporalGraph":
        """Sub-log of events ``start:stop`` sharing this graph's node space."""
        sl = slice(start, stop)
        return TemporalGraph(
            self.src[sl], self.dst[sl], self.ts[sl], num_nodes=self.num_nodes,
            labels=None if self.labels is None else self.labels[sl],
            features=None if self.features is None else self.features[sl],
            id_map=self.id_map,
        )

    def append(self, events: Iterable[Event]) -> "TemporalGraph":
        """Return a new graph with ``events`` appended; they may not precede the log's end."""
        events = sorted(events, key=lambda e: e.timestamp)
        if events and self.num_events and events[0].timestamp < self.ts[-1]:
            raise ValueError("appended events must not precede existing events")
        n = max([self.num_nodes] + [max(e.src, e.dst) + 1 for e in events])
        labels = None
        if self.labels is not None or any(e.label is not None for e in events):
            old = self.labels if self.labels is not None else np.full(self.num_events, -1)
            labels = np.concatenate([old, [-1 if e.label is None else e.label for e in events]])
        feats = None
        if self.features is not None:
            feats = np.concatenate([self.features, np.array([e.edge_features for e in events]).reshape(len(events), -1)])
        id_map = self.id_map + [str(k) for k in range(self.num_nodes, n)]
        return TemporalGraph(
            np.concatenate([self.src, [e.src for e in events]]),
            np.concatenate([self.dst, [e.dst for e in events]]),
            np.concatenate([self.ts, [e.timestamp for e in events]]),
            num_nodes=n, labels=labels, features=feats, id_map=id_map,
        )

    def __eq__(self, other):
        if not isinstance(other, TemporalGraph):
            return NotImplemented
        same_labels = (self.labels is None and other.labels is None) or (
            self.labels is not None and other.labels is not None and np.array_equal(self.labels, other.labels))
        same_feats = (self.features is None and other.features is None) or (
            self.features is not None and other.features is not None and np.array_equal(self.features, other.features))
        return (self.num_nodes == other.num_nodes and np.array_equal(self.src, other.src)
                and np.array_equal(self.dst, other.dst) and np.array_equal(self.ts, other.ts)
                and same_labels and same_feats)

    __hash__ = None


# -- chronological splits -------------------------------------------------------

@dataclass(frozen=True)
class ChronoSplit:
    """Event-count quantile split; segment ``k`` is ``events[indices[k]:indices[k+1]]``."""

    indices: tuple[int, ...]
    boundaries: tuple[float, ...]

    @property
    def num_segments(self) -> int:
        return len(self.indices) - 1

    def sizes(self) -> list[int]:
        return [b - a for a, b in zip(self.indices[:-1], self.indices[1:])]

    def segment(self, g: TemporalGraph, k: int) -> TemporalGraph:
        return g.slice(self.indices[k], self.indices[k + 1])

    def segment_range(self, k: int) -> range:
        return range(self.indices[k], self.indices[k + 1])


def chrono_split(g: TemporalGraph, ratios: Sequence[float]) -> ChronoSplit:
    ratios = [float(r) for r in ratios]
    if not ratios or any(r <= 0 for r in ratios):
        raise ValueError("ratios must be positive")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got {sum(ratios)}")
    n = g.num_events
    if n < len(ratios):
        raise ValueError(f"cannot split {n} events into {len(ratios)} segments")
    cum = np.cumsum(ratios)
    cuts = [0] + [int(round(c * n)) for c in cum[:-1]] + [n]
    # every segment keeps at least one event
    for k in range(1, len(cuts) - 1):
        cuts[k] = min(max(cuts[k], cuts[k - 1] + 1), n - (len(cuts) - 1 - k))
    bounds = tuple(float(g.ts[c]) if c < n else math.inf for c in cuts[1:-1])
    return ChronoSplit(tuple(cuts), bounds)


# -- CSV ingest / export --------------------------------------------------------

DEFAULT_SCHEMA = {"src": "src", "dst": "dst", "timestamp": "timestamp", "label": "label", "feature_prefix": "f"}


def ingest_csv(path, schema: dict | None = None) -> TemporalGraph:
    """Read an event CSV into a graph with densified node ids.

    Rows are stably sorted by timestamp.  Node ids are assigned in order of
    first appearance in the sorted log (source before destination).
    Self-loops are dropped and counted in ``stats["self_loops_rejected"]``.
    """
    schema = {**DEFAULT_SCHEMA, **(schema or {})}
    path = Path(path)
    rows = []
    rejected = 0
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return TemporalGraph([], [], [], num_nodes=0, id_map=[])
        header = [h.strip() for h in header]
        try:
            c_src = header.index(schema["src"])
            c_dst = header.index(schema["dst"])
            c_ts = header.index(schema["timestamp"])
        except ValueError as exc:
            raise GraphFormatError(f"{path}: header missing required column ({exc})") from None
        c_label = header.index(schema["label"]) if schema["label"] in header else None
        prefix = schema["feature_prefix"]
        c_feats = [k for k, h in enumerate(header) if h.startswith(prefix) and h[len(prefix):].isdigit()]
        c_feats.sort(key=lambda k: int(header[k][len(prefix):]))
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise GraphFormatError(f"{path} line {lineno}: expected {len(header)} fields, got {len(row)}")
            s, d = row[c_src].strip(), row[c_dst].strip()
            try:
                t = float(row[c_ts])
                label = None
                if c_label is not None and row[c_label].strip() != "":
                    label = int(float(row[c_label]))
                feats = tuple(float(row[k]) for k in c_feats) if c_feats else None
            except ValueError as exc:
                raise GraphFormatError(f"{path} line {lineno}: {exc}") from None
            if not math.isfinite(t):
                raise GraphFormatError(f"{path} line {lineno}: non-finite timestamp")
            if t < 0:
                raise GraphFormatError(f"{path} line {lineno}: negative timestamp {t}")
            if s == d:
                rejected += 1
                continue
            rows.append((t, s, d, label, feats))
    if rejected:
        logger.warning("%s: rejected %d self-loop rows", path, rejected)
    rows.sort(key=lambda r: r[0])
    ids: dict[str, int] = {}
    src, dst = [], []
    for _, s, d, _, _ in rows:
        src.append(ids.setdefault(s, len(ids)))
        dst.append(ids.setdefault(d, len(ids)))
    labels = [(-1 if r[3] is None else r[3]) for r in rows] if c_label is not None else None
    feats = [r[4] for r in rows] if c_feats else None
    g = TemporalGraph(src, dst, [r[0] for r in rows], num_nodes=len(ids), labels=labels,
                      features=feats, id_map=list(ids))
    g.stats["self_loops_rejected"] = rejected
    return g


def write_csv(g: TemporalGraph, path) -> None:
    """Write the event log with original node ids; ``ingest_csv`` reproduces it."""
    header = ["src", "dst", "timestamp"]
    if g.labels is not None:
        header.append("label")
    n_feat = 0 if g.features is None else g.features.shape[1]
    header += [f"f{k}" for k in range(n_feat)]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for k in range(g.num_events):
            row = [g.id_map[g.src[k]], g.id_map[g.dst[k]], repr(float(g.ts[k]))]
            if g.labels is not None:
                row.append("" if g.labels[k] < 0 else str(int(g.labels[k])))
            if n_feat:
                row += [repr(float(x)) for x in g.features[k]]
            w.writerow(row)


# -- binary cache ---------------------------------------------------------------

def _record_dtype(n_feat: int) -> np.dtype:
    fields = [("src", "<u8"), ("dst", "<u8"), ("ts", "<f8"), ("label", "i1")]
    if n_feat:
        fields.append(("feat", "<f8", (n_feat,)))
    return np.dtype(fields)


def save_cache(g: TemporalGraph, path) -> None:
    """Binary cache: header, packed little-endian records, id map as ``<path>.ids.json``."""
    path = Path(path)
    n_feat = 0 if g.features is None else g.features.shape[1]
    rec = np.zeros(g.num_events, dtype=_record_dtype(n_feat))
    rec["src"] = g.src
    rec["dst"] = g.dst
    rec["ts"] = g.ts
    rec["label"] = -2 if g.labels is None else g.labels
    if n_feat:
        rec["feat"] = g.features
    with path.open("wb") as fh:
        fh.write(CACHE_MAGIC)
        fh.write(struct.pack("<IQQI", CACHE_VERSION, g.num_nodes, g.num_events, n_feat))
        fh.write(rec.tobytes())
    Path(str(path) + ".ids.json").write_text(json.dumps(g.id_map))


def load_cache(path) -> TemporalGraph:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != CACHE_MAGIC:
        raise GraphFormatError(f"{path}: bad magic {raw[:4]!r}")
    version, n_nodes, n_ev, n_feat = struct.unpack_from("<IQQI", raw, 4)
    if version != CACHE_VERSION:
        raise GraphFormatError(f"{path}: unsupported version {version}")
    rec = np.frombuffer(raw, dtype=_record_dtype(n_feat), count=n_ev, offset=4 + struct.calcsize("<IQQI"))
    labels = rec["label"]
    labels = None if n_ev and np.all(labels == -2) else labels
    ids_path = Path(str(path) + ".ids.json")
    id_map = json.loads(ids_path.read_text()) if ids_path.exists() else None
    return TemporalGraph(rec["src"].astype(np.int64), rec["dst"].astype(np.int64), rec["ts"].copy(),
                         num_nodes=n_nodes, labels=labels, features=rec["feat"].copy() if n_feat else None,
                         id_map=id_map)


# -- synthetic generator --------------------------------------------------------

@dataclass
class GeneratorConfig:
    """Bipartite user-item stream with planted community preference and drift.

    Users and items are split round-robin into ``num_communities``.  Before
    ``flip_time`` (a fraction of the horizon) a user picks an item of its own
    community with probability ``preference``; afterwards with probability
    ``flip_preference`` (defaults to ``1 - preference``).  With probability
    ``repeat_prob`` the user instead revisits one of its last ``repeat_window``
    items.
    """

    num_users: int = 100
    num_items: int = 100
    num_events: int = 1000
    num_communities: int = 2
    preference: float = 0.9
    flip_time: float | None = None
    flip_preference: float | None = None
    repeat_prob: float = 0.0
    repeat_window: int = 5
    horizon: float | None = None
    labels: bool = False

    def validate(self):
        if self.num_users <= 0 or self.num_items <= 0:
            raise ValueError("generator needs at least one user and one item")
        if self.num_events <= 0:
            raise ValueError("generator needs at least one event")
        if self.num_communities < 1 or self.num_communities > min(self.num_users, self.num_items):
            raise ValueError("num_communities must be between 1 and min(num_users, num_items)")
        for name in ("preference", "repeat_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")


def user_community(cfg: GeneratorConfig, u: int) -> int:
    return u % cfg.num_communities


def item_community(cfg: GeneratorConfig, item: int) -> int:
    return (item - cfg.num_users) % cfg.num_communities


def generate_synthetic(cfg: GeneratorConfig, seed: int) -> TemporalGraph:
    cfg.validate()
    rng = np.random.default_rng(seed)
    n_ev = cfg.num_events
    horizon = float(n_ev) if cfg.horizon is None else float(cfg.horizon)
    ts = np.sort(rng.uniform(0.0, horizon, size=n_ev))
    flip_at = math.inf if cfg.flip_time is None else cfg.flip_time * horizon
    post = 1.0 - cfg.preference if cfg.flip_preference is None else cfg.flip_preference
    C = cfg.num_communities
    items_by_comm = [np.arange(cfg.num_items)[np.arange(cfg.num_items) % C == c] + cfg.num_users for c in range(C)]
    users = rng.integers(0, cfg.num_users, size=n_ev)
    u_pref = rng.random(n_ev)
    u_repeat = rng.random(n_ev)
    u_other = rng.integers(0, max(C - 1, 1), size=n_ev)
    u_item = rng.random(n_ev)
    u_hist = rng.random(n_ev)
    history: list[list[int]] = [[] for _ in range(cfg.num_users)]
    dst = np.empty(n_ev, dtype=np.int64)
    labels = np.zeros(n_ev, dtype=np.int8)
    for k in range(n_ev):
        u = int(users[k])
        home = u % C
        hist = history[u]
        if hist and u_repeat[k] < cfg.repeat_prob:
            recent = hist[-cfg.repeat_window:]
            item = recent[int(u_hist[k] * len(recent))]
        else:
            p = cfg.preference if ts[k] < flip_at else post
            comm = home if (C == 1 or u_pref[k] < p) else (home + 1 + int(u_other[k])) % C
            pool = items_by_comm[comm]
            item = int(pool[int(u_item[k] * len(pool))])
        dst[k] = item
        hist.append(item)
        labels[k] = int((item - cfg.num_users) % C != home)
    id_map = [f"u{k}" for k in range(cfg.num_users)] + [f"i{k}" for k in range(cfg.num_items)]
    return TemporalGraph(users, dst, ts, num_nodes=cfg.num_users + cfg.num_items,
                         labels=labels if cfg.labels else None, id_map=id_map)
