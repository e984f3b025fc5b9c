"""Structural-temporal subgraph samplers.

Two expansion strategies rooted at ``(node, t)``:

* eta-BFS: per frontier node, draw up to ``eta`` neighbor events without
  replacement with softmaxed (reverse-)chronological probabilities.
* eps-DFS: per frontier node, take the ``epsilon`` most recent neighbor events.

Both recurse ``depth`` hops using the anchor time as cutoff for every hop.
Randomness comes from a counter-based hash keyed by
``(seed, event ordinal, kind, side, hop, parent, entry)`` so a draw never
depends on batching, chunking or thread scheduling.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .graph import TemporalGraph

CHRONOLOGICAL = "chronological"
REVERSE = "reverse"

TEMPORAL_POSITIVE = "temporal-positive"
TEMPORAL_NEGATIVE = "temporal-negative"
STRUCTURAL_POSITIVE = "structural-positive"
STRUCTURAL_NEGATIVE = "structural-negative"
KINDS = (TEMPORAL_POSITIVE, TEMPORAL_NEGATIVE, STRUCTURAL_POSITIVE, STRUCTURAL_NEGATIVE)
_KIND_CODE = {k: c for c, k in enumerate(KINDS)}

PLAN_MAGIC = b"CPLN"
PLAN_VERSION = 1


@dataclass(frozen=True)
class SamplerConfig:
    eta: int = 20
    epsilon: int = 20
    depth: int = 2
    tau: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.eta < 1 or self.epsilon < 1 or self.depth < 1:
            raise ValueError("eta, epsilon and depth must be >= 1")
        if not self.tau > 0:
            raise ValueError("tau must be > 0")

    def max_members(self, width: int) -> int:
        return sum(width ** h for h in range(self.depth + 1))


# -- probability functions ------------------------------------------------------

def _normalized_times(times, t):
    times = np.asarray(times, dtype=np.float64)
    if times.size == 0:
        raise ValueError("no neighbors")
    if np.any(times >= t):
        raise ValueError("all neighbor times must be strictly before the anchor time")
    t_min = times.min()
    if times.size == 1:
        return np.zeros(1)
    return (times - t_min) / (t - t_min)


def _softmax(x):
    e = np.exp(x - x.max())
    return e / e.sum()


def chrono_probs(times, t: float, tau: float) -> np.ndarray:
    """Recency-favoring probabilities: softmax of min-max normalized event times over ``tau``."""
    return _softmax(_normalized_times(times, t) / tau)


def reverse_chrono_probs(times, t: float, tau: float) -> np.ndarray:
    """Mirror of :func:`chrono_probs`; older events get more mass."""
    return _softmax((1.0 - _normalized_times(times, t)) / tau)


# -- counter-based uniforms -----------------------------------------------------

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _mix(x):
    x = (x ^ (x >> np.uint64(30))) * _M1
    x = (x ^ (x >> np.uint64(27))) * _M2
    return x ^ (x >> np.uint64(31))


def hash_uniform(*keys) -> np.ndarray:
    """Uniform(0, 1) values from a splitmix64 chain over broadcast integer keys."""
    arrays = np.broadcast_arrays(*[np.asarray(k).astype(np.int64) for k in keys])
    with np.errstate(over="ignore"):
        h = np.full(arrays[0].shape, 0x243F6A8885A308D3, dtype=np.uint64)
        for a in arrays:
            h = _mix(h + _GOLDEN + a.astype(np.uint64))
    return ((h >> np.uint64(11)).astype(np.float64) + 0.5) * (1.0 / 9007199254740992.0)


# -- subgraph containers --------------------------------------------------------

@dataclass
class SampledSubgraph:
    root: int
    anchor_time: float
    nodes: np.ndarray
    hops: np.ndarray
    parents: np.ndarray
    events: np.ndarray
    kind: str
    empty_neighborhood: bool

    @property
    def members(self) -> list[tuple[int, int, int]]:
        return [(int(n), int(h), int(p)) for n, h, p in zip(self.nodes, self.hops, self.parents)]

    def __len__(self):
        return len(self.nodes)


@dataclass
class SubgraphBatch:
    """Many subgraphs in CSR layout; subgraph ``q`` owns ``offsets[q]:offsets[q+1]``.

    ``parents`` are local member indices (``-1`` for the root).  A subgraph
    with zero members is a missing sample (no eligible root).
    """

    kind: str
    roots: np.ndarray
    times: np.ndarray
    offsets: np.ndarray
    nodes: np.ndarray
    hops: np.ndarray
    parents: np.ndarray
    events: np.ndarray

    def __len__(self):
        return len(self.roots)

    def sizes(self) -> np.ndarray:
        return np.diff(self.offsets)

    def empty_mask(self) -> np.ndarray:
        """True where the subgraph has no member beyond its root (or no root at all)."""
        return self.sizes() <= 1

    def get(self, q: int) -> SampledSubgraph:
        a, b = self.offsets[q], self.offsets[q + 1]
        return SampledSubgraph(int(self.roots[q]), float(self.times[q]), self.nodes[a:b], self.hops[a:b],
                               self.parents[a:b], self.events[a:b], self.kind, bool(b - a <= 1))

    def select(self, idx) -> "SubgraphBatch":
        idx = np.asarray(idx, dtype=np.int64)
        sizes = self.sizes()[idx]
        offsets = np.zeros(len(idx) + 1, dtype=np.int64)
        np.cumsum(sizes, out=offsets[1:])
        take = _ranges(self.offsets[idx], sizes)
        return SubgraphBatch(self.kind, self.roots[idx], self.times[idx], offsets, self.nodes[take],
                             self.hops[take], self.parents[take], self.events[take])

    @staticmethod
    def concat(batches: list["SubgraphBatch"]) -> "SubgraphBatch":
        sizes = np.concatenate([b.sizes() for b in batches])
        offsets = np.zeros(len(sizes) + 1, dtype=np.int64)
        np.cumsum(sizes, out=offsets[1:])
        cat = lambda name: np.concatenate([getattr(b, name) for b in batches])
        return SubgraphBatch(batches[0].kind, cat("roots"), cat("times"), offsets, cat("nodes"),
                             cat("hops"), cat("parents"), cat("events"))

    def equals(self, other: "SubgraphBatch") -> bool:
        return all(np.array_equal(getattr(self, f), getattr(other, f))
                   for f in ("roots", "times", "offsets", "nodes", "hops", "parents", "events"))


def _ranges(starts, counts) -> np.ndarray:
    """Concatenation of ``arange(s, s + c)`` for each pair."""
    counts = np.asarray(counts, dtype=np.int64)
    total = int(counts.sum())
    if total == 0:
        return np.zeros(0, dtype=np.int64)
    block = np.repeat(np.cumsum(counts) - counts, counts)
    return np.repeat(np.asarray(starts, dtype=np.int64), counts) + (np.arange(total) - block)


# -- vectorized expansion -------------------------------------------------------

class _TimeKeyIndex:
    """Composite (owner, time-rank) keys enabling one vectorized strict-before search."""

    def __init__(self, g: TemporalGraph):
        self.uniq = np.unique(g._nbr_ts)
        rank = np.searchsorted(self.uniq, g._nbr_ts)
        owner = np.repeat(np.arange(g.num_nodes), np.diff(g.indptr))
        self.width = np.int64(len(self.uniq) + 1)
        self.keys = owner * self.width + rank

    def counts_before(self, g, nodes, times):
        r = np.searchsorted(self.uniq, times, side="left")
        pos = np.searchsorted(self.keys, nodes * self.width + r, side="left")
        return pos - g.indptr[nodes]


def _time_index(g: TemporalGraph) -> _TimeKeyIndex:
    idx = getattr(g, "_sampler_time_index", None)
    if idx is None:
        idx = _TimeKeyIndex(g)
        g._sampler_time_index = idx
    return idx


def _expand(g, roots, times, ordinals, cfg: SamplerConfig, kind: str, side: int, mode: str | None):
    """Shared BFS/DFS driver.  ``mode`` None selects the deterministic most-recent rule."""
    roots = np.asarray(roots, dtype=np.int64)
    times = np.asarray(times, dtype=np.float64)
    ordinals = np.asarray(ordinals, dtype=np.int64)
    Q = len(roots)
    sides = np.broadcast_to(np.asarray(side, dtype=np.int64), (Q,))
    width = cfg.epsilon if mode is None else cfg.eta
    tix = _time_index(g)

    # member blocks per hop: (query, node, local_parent, event)
    blk_q = [np.arange(Q, dtype=np.int64)]
    blk_node = [roots]
    blk_parent = [np.full(Q, -1, dtype=np.int64)]
    blk_event = [np.full(Q, -1, dtype=np.int64)]
    blk_hop = [np.zeros(Q, dtype=np.int64)]
    count = np.ones(Q, dtype=np.int64)           # members so far per query
    f_q, f_node, f_local = np.arange(Q), roots, np.zeros(Q, dtype=np.int64)
    valid = (roots >= 0) & (roots < g.num_nodes)
    f_q, f_node, f_local = f_q[valid], f_node[valid], f_local[valid]

    for hop in range(1, cfg.depth + 1):
        if len(f_q) == 0:
            break
        t_f = times[f_q]
        n = tix.counts_before(g, f_node, t_f)
        lo = g.indptr[f_node]
        take_n = np.minimum(n, width)
        if mode is None:
            # most recent entries: the last take_n of each prefix, kept chronological
            sel = _ranges(lo + n - take_n, take_n)
            seg = np.repeat(np.arange(len(f_q)), take_n)
        else:
            ent = _ranges(lo, n)
            seg = np.repeat(np.arange(len(f_q)), n)
            pos = ent - lo[seg]
            e_ts = g._nbr_ts[ent]
            t_min = g._nbr_ts[lo][seg]
            denom = t_f[seg] - t_min
            single = n[seg] == 1
            that = np.where(single, 0.0, (e_ts - t_min) / np.where(single, 1.0, denom))
            logits = (that if mode == "chronological" else 1.0 - that) / cfg.tau
            u = hash_uniform(cfg.seed, ordinals[f_q][seg], _KIND_CODE[kind], sides[f_q][seg], hop, f_local[seg], pos)
            key = logits - np.log(-np.log(u))  # Gumbel-top-k
            order = np.lexsort((-key, seg))
            seg_sorted = seg[order]
            start = np.cumsum(n) - n
            rank = np.arange(len(order)) - start[seg_sorted]
            keep = rank < take_n[seg_sorted]
            sel = ent[order[keep]]
            seg = seg_sorted[keep]
        new_q = f_q[seg]
        # local indices: queries are contiguous and ascending inside a hop block
        block_start = np.searchsorted(new_q, new_q, side="left")
        new_local = count[new_q] + (np.arange(len(new_q)) - block_start)
        count += np.bincount(new_q, minlength=Q)
        blk_q.append(new_q)
        blk_node.append(g._nbr[sel])
        blk_parent.append(f_local[seg])
        blk_event.append(g._ord[sel])
        blk_hop.append(np.full(len(sel), hop, dtype=np.int64))
        f_q, f_node, f_local = new_q, g._nbr[sel], new_local

    q_all = np.concatenate(blk_q)
    order = np.argsort(q_all, kind="stable")
    offsets = np.zeros(Q + 1, dtype=np.int64)
    np.cumsum(np.bincount(q_all, minlength=Q), out=offsets[1:])
    return SubgraphBatch(kind, roots, times, offsets,
                         np.concatenate(blk_node)[order], np.concatenate(blk_hop)[order],
                         np.concatenate(blk_parent)[order], np.concatenate(blk_event)[order])


def eta_bfs_batch(g: TemporalGraph, roots, times, cfg: SamplerConfig, mode: str = CHRONOLOGICAL,
                  ordinals=None, side: int = 0) -> SubgraphBatch:
    if mode not in (CHRONOLOGICAL, REVERSE):
        raise ValueError(f"unknown mode {mode!r}")
    kind = TEMPORAL_POSITIVE if mode == CHRONOLOGICAL else TEMPORAL_NEGATIVE
    ordinals = np.arange(len(roots)) if ordinals is None else ordinals
    return _expand(g, roots, times, ordinals, cfg, kind, side, mode)


def eps_dfs_batch(g: TemporalGraph, roots, times, cfg: SamplerConfig,
                  kind: str = STRUCTURAL_POSITIVE) -> SubgraphBatch:
    zeros = np.zeros(len(roots), dtype=np.int64)
    return _expand(g, roots, times, zeros, cfg, kind, 0, None)


def sample_eta_bfs(g: TemporalGraph, root: int, t: float, cfg: SamplerConfig,
                   mode: str = CHRONOLOGICAL, ordinal: int = 0) -> SampledSubgraph:
    _check_root(g, root)
    return eta_bfs_batch(g, [root], [t], cfg, mode, [ordinal]).get(0)


def sample_eps_dfs(g: TemporalGraph, root: int, t: float, cfg: SamplerConfig) -> SampledSubgraph:
    _check_root(g, root)
    return eps_dfs_batch(g, [root], [t], cfg).get(0)


def _check_root(g, root):
    if not 0 <= root < g.num_nodes:
        raise IndexError(f"root {root} outside 0..{g.num_nodes - 1}")


# -- structural negatives -------------------------------------------------------

def _eligible(g: TemporalGraph, anchors, times):
    anchors = np.asarray(anchors, dtype=np.int64)
    cnt = np.searchsorted(g._first_sorted, np.asarray(times, dtype=np.float64), side="left")
    anchor_in = g.first_time[anchors] < times
    m = cnt - anchor_in.astype(np.int64)
    return anchors, cnt, anchor_in, m


def _pick_eligible(g, anchors, anchor_in, r):
    inv = getattr(g, "_first_rank", None)
    if inv is None:
        inv = np.empty(g.num_nodes, dtype=np.int64)
        inv[g._first_order] = np.arange(g.num_nodes)
        g._first_rank = inv
    r = r + (anchor_in & (inv[anchors] <= r))
    return g._first_order[r]


def sample_structural_negative_root(g: TemporalGraph, anchor: int, rng: np.random.Generator,
                                    t: float = np.inf) -> int:
    """Uniform draw over nodes with an event before ``t``, excluding ``anchor``."""
    anchors, _, anchor_in, m = _eligible(g, [anchor], np.array([t], dtype=np.float64))
    if m[0] <= 0:
        raise ValueError(f"no node other than {anchor} has history before t={t}")
    r = rng.integers(0, m[0], size=1)
    return int(_pick_eligible(g, anchors, anchor_in, r)[0])


def structural_negative_roots(g: TemporalGraph, anchors, times, seed: int, ordinals, side: int = 0) -> np.ndarray:
    """Vectorized negative roots; ``-1`` where no eligible node exists."""
    times = np.asarray(times, dtype=np.float64)
    anchors, _, anchor_in, m = _eligible(g, anchors, times)
    u = hash_uniform(seed, ordinals, _KIND_CODE[STRUCTURAL_NEGATIVE], side, 0, -1, -1)
    ok = m > 0
    r = np.where(ok, np.minimum((u * np.maximum(m, 1)).astype(np.int64), np.maximum(m - 1, 0)), 0)
    out = _pick_eligible(g, anchors, anchor_in & ok, r)
    return np.where(ok, out, -1)


# -- four-way sampling and plans ------------------------------------------------

@dataclass
class SamplePlan:
    """The four contrastive subgraphs for each anchor, indexed by position."""

    cfg: SamplerConfig
    ordinals: np.ndarray
    sides: np.ndarray
    tp: SubgraphBatch
    tn: SubgraphBatch
    sp: SubgraphBatch
    sn: SubgraphBatch

    def __len__(self):
        return len(self.ordinals)

    @property
    def num_entries(self) -> int:
        return 4 * len(self.ordinals)

    def select(self, idx) -> "SamplePlan":
        idx = np.asarray(idx, dtype=np.int64)
        return SamplePlan(self.cfg, self.ordinals[idx], self.sides[idx], self.tp.select(idx),
                          self.tn.select(idx), self.sp.select(idx), self.sn.select(idx))

    def equals(self, other: "SamplePlan") -> bool:
        return (self.cfg == other.cfg and np.array_equal(self.ordinals, other.ordinals)
                and np.array_equal(self.sides, other.sides)
                and all(getattr(self, k).equals(getattr(other, k)) for k in ("tp", "tn", "sp", "sn")))


def sample_quadruples(g: TemporalGraph, ordinals, cfg: SamplerConfig, sides=None) -> SamplePlan:
    """Sample TP/TN/SP/SN for events ``ordinals`` anchored at their source (side 0) or destination (side 1)."""
    ordinals = np.asarray(ordinals, dtype=np.int64)
    sides = np.zeros(len(ordinals), dtype=np.int64) if sides is None else np.asarray(sides, dtype=np.int64)
    roots = np.where(sides == 0, g.src[ordinals], g.dst[ordinals])
    times = g.ts[ordinals]
    tp = _expand(g, roots, times, ordinals, cfg, TEMPORAL_POSITIVE, sides, CHRONOLOGICAL)
    tn = _expand(g, roots, times, ordinals, cfg, TEMPORAL_NEGATIVE, sides, REVERSE)
    sp = eps_dfs_batch(g, roots, times, cfg, STRUCTURAL_POSITIVE)
    neg_roots = structural_negative_roots(g, roots, times, cfg.seed, ordinals, sides)
    sn = eps_dfs_batch(g, neg_roots, times, cfg, STRUCTURAL_NEGATIVE)
    # a missing negative root yields no members at all
    missing = neg_roots < 0
    if missing.any():
        keep = ~np.repeat(missing, sn.sizes())
        sizes = np.where(missing, 0, sn.sizes())
        offsets = np.zeros(len(sizes) + 1, dtype=np.int64)
        np.cumsum(sizes, out=offsets[1:])
        sn = SubgraphBatch(sn.kind, sn.roots, sn.times, offsets, sn.nodes[keep], sn.hops[keep],
                           sn.parents[keep], sn.events[keep])
    return SamplePlan(cfg, ordinals, sides, tp, tn, sp, sn)


def precompute_sample_plan(g: TemporalGraph, cfg: SamplerConfig, ordinals=None, anchor_both: bool = False,
                           chunk: int = 1024) -> SamplePlan:
    """Sample every event's quadruple ahead of training, in bounded-memory chunks."""
    ordinals = np.arange(g.num_events) if ordinals is None else np.asarray(ordinals, dtype=np.int64)
    if len(ordinals) == 0:
        raise ValueError("segment is empty")
    if anchor_both:
        sides = np.tile([0, 1], len(ordinals))
        ordinals = np.repeat(ordinals, 2)
    else:
        sides = np.zeros(len(ordinals), dtype=np.int64)
    parts = [sample_quadruples(g, ordinals[a:a + chunk], cfg, sides[a:a + chunk])
             for a in range(0, len(ordinals), chunk)]
    if len(parts) == 1:
        return parts[0]
    return SamplePlan(cfg, ordinals, sides,
                      *[SubgraphBatch.concat([getattr(p, k) for p in parts]) for k in ("tp", "tn", "sp", "sn")])


_MEMBER = np.dtype([("node", "<i8"), ("hop", "<i2"), ("parent", "<i4"), ("event", "<i8")])


def save_plan(plan: SamplePlan, path) -> None:
    """Plan file: magic, version, config echo, then one record per anchor."""
    cfg_blob = json.dumps(asdict(plan.cfg), sort_keys=True).encode()
    with Path(path).open("wb") as fh:
        fh.write(PLAN_MAGIC)
        fh.write(struct.pack("<II", PLAN_VERSION, len(cfg_blob)))
        fh.write(cfg_blob)
        fh.write(struct.pack("<Q", len(plan)))
        batches = [plan.tp, plan.tn, plan.sp, plan.sn]
        for q in range(len(plan)):
            fh.write(struct.pack("<qb", int(plan.ordinals[q]), int(plan.sides[q])))
            for b in batches:
                a, e = b.offsets[q], b.offsets[q + 1]
                rec = np.empty(e - a, dtype=_MEMBER)
                rec["node"], rec["hop"], rec["parent"], rec["event"] = b.nodes[a:e], b.hops[a:e], b.parents[a:e], b.events[a:e]
                fh.write(struct.pack("<qdI", int(b.roots[q]), float(b.times[q]), e - a))
                fh.write(rec.tobytes())


def load_plan(path) -> SamplePlan:
    raw = Path(path).read_bytes()
    if raw[:4] != PLAN_MAGIC:
        raise ValueError(f"{path}: bad plan magic {raw[:4]!r}")
    version, n_cfg = struct.unpack_from("<II", raw, 4)
    if version != PLAN_VERSION:
        raise ValueError(f"{path}: unsupported plan version {version}")
    off = 12
    cfg = SamplerConfig(**json.loads(raw[off:off + n_cfg]))
    off += n_cfg
    (n,) = struct.unpack_from("<Q", raw, off)
    off += 8
    ords, sides = np.empty(n, dtype=np.int64), np.empty(n, dtype=np.int64)
    parts = {k: {"roots": [], "times": [], "sizes": [], "recs": []} for k in range(4)}
    for q in range(n):
        ords[q], sides[q] = struct.unpack_from("<qb", raw, off)
        off += 9
        for k in range(4):
            root, t, cnt = struct.unpack_from("<qdI", raw, off)
            off += 20
            rec = np.frombuffer(raw, dtype=_MEMBER, count=cnt, offset=off)
            off += cnt * _MEMBER.itemsize
            p = parts[k]
            p["roots"].append(root)
            p["times"].append(t)
            p["sizes"].append(cnt)
            p["recs"].append(rec)
    batches = []
    for k, kind in enumerate(KINDS):
        p = parts[k]
        recs = np.concatenate(p["recs"]) if p["recs"] else np.zeros(0, dtype=_MEMBER)
        offsets = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(p["sizes"], out=offsets[1:])
        batches.append(SubgraphBatch(kind, np.array(p["roots"], dtype=np.int64), np.array(p["times"]),
                                     offsets, recs["node"].astype(np.int64), recs["hop"].astype(np.int64),
                                     recs["parent"].astype(np.int64), recs["event"].astype(np.int64)))
    return SamplePlan(cfg, ords, sides, *batches)
