"""Memory-based dynamic graph encoder (message -> aggregate -> memory update -> embed).

Training-time memory protocol: the events of batch ``b`` are stored as
pending and turned into memory updates at the start of batch ``b + 1``,
inside the active tape, so message and updater parameters receive gradient
while no event ever informs its own prediction.
"""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .graph import TemporalGraph
from .nn import GRUCell, Linear, MLP, ParamStore, RNNCell
from .sampler import _time_index
from .tensor import Tensor

MEMORY_MAGIC = b"CMEM"
MEMORY_VERSION = 1

EMBED_FNS = ("identity", "time-projection", "attention")
MSG_FNS = ("identity", "attention", "mlp")
AGG_FNS = ("none", "mean", "last-time")
MEM_FNS = ("rnn", "gru")


class OutOfOrderError(ValueError):
    """An update arrived with a timestamp earlier than the node's last update."""


@dataclass(frozen=True)
class BackboneConfig:
    embed_fn: str = "attention"
    msg_fn: str = "identity"
    agg_fn: str = "last-time"
    mem_fn: str = "gru"
    memory_dim: int = 32
    embed_dim: int = 32
    time_dim: int = 16
    msg_dim: int | None = None      # mlp message width; identity/attention use 2*memory_dim + time_dim
    embed_degree: int = 10
    node_embedding: bool = True
    time_scale: float | None = None  # None: derived from the training graph

    def __post_init__(self):
        for name, allowed in (("embed_fn", EMBED_FNS), ("msg_fn", MSG_FNS), ("agg_fn", AGG_FNS), ("mem_fn", MEM_FNS)):
            if getattr(self, name) not in allowed:
                raise ValueError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")
        if min(self.memory_dim, self.embed_dim, self.time_dim, self.embed_degree) < 1:
            raise ValueError("dimensions and embed_degree must be positive")

    @property
    def message_dim(self) -> int:
        raw = 2 * self.memory_dim + self.time_dim
        return (self.msg_dim or self.memory_dim) if self.msg_fn == "mlp" else raw

    def to_dict(self) -> dict:
        return asdict(self)


PRESETS = {
    "jodie": dict(embed_fn="time-projection", msg_fn="identity", agg_fn="none", mem_fn="rnn"),
    "dyrep": dict(embed_fn="identity", msg_fn="attention", agg_fn="none", mem_fn="rnn"),
    "tgn": dict(embed_fn="attention", msg_fn="identity", agg_fn="last-time", mem_fn="gru"),
}


def preset(name: str, **overrides) -> BackboneConfig:
    if name not in PRESETS:
        raise ValueError(f"unknown backbone preset {name!r}; choose from {sorted(PRESETS)}")
    return BackboneConfig(**{**PRESETS[name], **overrides})


def default_time_scale(g: TemporalGraph) -> float:
    """Typical gap between two events of the same node."""
    if g.num_events < 2:
        return 1.0
    active = max(int(np.count_nonzero(np.diff(g.indptr))), 1)
    span = float(g.ts[-1] - g.ts[0])
    return max(span * active / (2.0 * g.num_events), 1e-9)


# -- memory ---------------------------------------------------------------------

class MemoryStore:
    """Per-node state rows plus last-update times; all rows start at zero."""

    def __init__(self, num_nodes: int, dim: int, dtype=None):
        self.dtype = dtype or T.default_dtype()
        self.states = np.zeros((num_nodes, dim), dtype=self.dtype)
        self.last_update = np.zeros(num_nodes, dtype=np.float64)

    @property
    def num_nodes(self) -> int:
        return self.states.shape[0]

    @property
    def dim(self) -> int:
        return self.states.shape[1]

    def reset(self):
        self.states[:] = 0
        self.last_update[:] = 0

    def clone(self) -> "MemoryStore":
        m = MemoryStore.__new__(MemoryStore)
        m.dtype = self.dtype
        m.states = self.states.copy()
        m.last_update = self.last_update.copy()
        return m

    def equals(self, other: "MemoryStore") -> bool:
        return np.array_equal(self.states, other.states) and np.array_equal(self.last_update, other.last_update)


def save_memory(mem: MemoryStore, path, timestamp: float = 0.0) -> None:
    """``CMEM`` file: magic, version, N, d, checkpoint time, float64 rows, last-update array."""
    with Path(path).open("wb") as fh:
        fh.write(MEMORY_MAGIC)
        fh.write(struct.pack("<IQQd", MEMORY_VERSION, mem.num_nodes, mem.dim, float(timestamp)))
        fh.write(np.ascontiguousarray(mem.states, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(mem.last_update, dtype="<f8").tobytes())


def load_memory(path) -> tuple[MemoryStore, float]:
    raw = Path(path).read_bytes()
    if raw[:4] != MEMORY_MAGIC:
        raise ValueError(f"{path}: bad memory magic {raw[:4]!r}")
    version, n, d, ts = struct.unpack_from("<IQQd", raw, 4)
    if version != MEMORY_VERSION:
        raise ValueError(f"{path}: unsupported memory version {version}")
    off = 4 + struct.calcsize("<IQQd")
    states = np.frombuffer(raw, dtype="<f8", count=n * d, offset=off).reshape(n, d)
    last = np.frombuffer(raw, dtype="<f8", count=n, offset=off + 8 * n * d)
    mem = MemoryStore(n, d, dtype=np.float64)
    mem.states[:] = states
    mem.last_update[:] = last
    return mem, ts


def aggregate_messages(msgs, agg_fn: str):
    """Reduce ``[(message, time), ...]`` for one node.

    ``mean`` averages, ``last-time`` keeps the latest (ties: latest position).
    ``none`` keeps the whole ordered list for sequential application.
    """
    if not msgs:
        raise ValueError("no messages to aggregate")
    times = [t for _, t in msgs]
    if any(b < a for a, b in zip(times, times[1:])):
        raise ValueError("message times must be nondecreasing")
    if agg_fn == "mean":
        return np.mean([np.asarray(m) for m, _ in msgs], axis=0)
    if agg_fn == "last-time":
        best = max(range(len(msgs)), key=lambda k: (times[k], k))
        return np.asarray(msgs[best][0])
    if agg_fn == "none":
        return [np.asarray(m) for m, _ in msgs]
    raise ValueError(f"unknown aggregator {agg_fn!r}")


@dataclass
class MemoryView:
    """Memory as seen inside one batch: possibly differentiable states and update times."""

    states: Tensor
    last_update: np.ndarray
    updated: np.ndarray


# -- encoder --------------------------------------------------------------------

class DGNN:
    def __init__(self, cfg: BackboneConfig, num_nodes: int, seed: int = 0, store: ParamStore | None = None):
        if cfg.time_scale is None:
            cfg = replace(cfg, time_scale=1.0)
        self.cfg = cfg
        self.num_nodes = num_nodes
        self.store = store if store is not None else ParamStore(np.random.default_rng(seed))
        s = self.store
        d, dt_dim = cfg.memory_dim, cfg.time_dim
        freq = 10.0 ** np.linspace(1.0, -2.0, dt_dim) / cfg.time_scale
        self.time_freq = s.new("time.freq", freq)
        self.time_phase = s.zeros("time.phase", dt_dim)
        raw_dim = 2 * d + dt_dim
        if cfg.msg_fn == "mlp":
            self.msg_mlp = MLP(s, "msg", raw_dim, raw_dim, cfg.message_dim)
        elif cfg.msg_fn == "attention":
            self.msg_q = Linear(s, "msg_attn.q", d, d)
            self.msg_k = Linear(s, "msg_attn.k", d + dt_dim, d)
            self.msg_v = Linear(s, "msg_attn.v", d + dt_dim, d)
        cell = GRUCell if cfg.mem_fn == "gru" else RNNCell
        self.cell = cell(s, "mem", cfg.message_dim, d)
        if cfg.node_embedding:
            self.node_emb = s.new("node_emb", self.store.rng.normal(0.0, 1.0 / np.sqrt(d), size=(num_nodes, d)))
        if cfg.embed_fn == "time-projection":
            self.proj_w = s.new("embed.time_w", self.store.rng.normal(0.0, 1.0 / np.sqrt(d), size=d))
        if cfg.embed_fn == "attention":
            self.att_q = Linear(s, "embed_attn.q", d + dt_dim, d)
            self.att_k = Linear(s, "embed_attn.k", d + dt_dim, d)
            self.att_v = Linear(s, "embed_attn.v", d + dt_dim, d)
            self.merge = MLP(s, "embed_merge", 2 * d, d, cfg.embed_dim)
        else:
            self.out = Linear(s, "embed_out", d, cfg.embed_dim)
        self.memory = MemoryStore(num_nodes, d, dtype=s.dtype)
        self.pending = None

    # -- time encoding --------------------------------------------------------

    def encode_time(self, dt) -> Tensor:
        """``cos(freq * dt + phase)`` for a vector of nonnegative gaps, shape ``(n, time_dim)``."""
        dt = np.atleast_1d(np.asarray(dt, dtype=np.float64))
        if not np.all(np.isfinite(dt)):
            raise ValueError("time gap must be finite")
        if np.any(dt < 0):
            raise ValueError(f"negative time gap {dt.min()}")
        col = Tensor(dt.reshape(-1, 1), dtype=self.store.dtype)
        return T.cos(T.add(T.matmul(col, T.reshape(self.time_freq, (1, -1))), self.time_phase))

    # -- neighbor attention shared by embeddings and DyRep messages -----------

    def _neighbor_slots(self, g: TemporalGraph, nodes, times):
        """Padded ``(B, K)`` most-recent neighbor entries before each time."""
        K = self.cfg.embed_degree
        nodes = np.asarray(nodes, dtype=np.int64)
        times = np.asarray(times, dtype=np.float64)
        B = len(nodes)
        if g.num_events == 0:
            return np.zeros((B, K), dtype=np.int64), np.zeros((B, K)), np.zeros((B, K), dtype=bool)
        n = _time_index(g).counts_before(g, nodes, times)
        take = np.minimum(n, K)
        lo = g.indptr[nodes] + n - take
        slot = np.arange(K)
        mask = slot[None, :] < take[:, None]
        ent = np.where(mask, lo[:, None] + slot[None, :], 0)
        return np.where(mask, g._nbr[ent], 0), np.where(mask, g._nbr_ts[ent], times[:, None]), mask

    def _attend(self, feats: Tensor, g, nodes, times, query: Tensor, k_lin, v_lin):
        nbr, nbr_t, mask = self._neighbor_slots(g, nodes, times)
        B, K = nbr.shape
        d = self.cfg.memory_dim
        rows = T.take_rows(feats, nbr.reshape(-1))
        phi = self.encode_time((np.asarray(times)[:, None] - nbr_t).reshape(-1))
        kv_in = T.concat([rows, phi], axis=1)
        keys = T.reshape(k_lin(kv_in), (B, K, d))
        vals = T.reshape(v_lin(kv_in), (B, K, d))
        return T.scaled_dot_attention(query, keys, vals, mask)

    # -- messages and memory updates -----------------------------------------

    def _messages(self, g, S: Tensor, last_update, recv, other, t, dt) -> Tensor:
        s_recv = T.take_rows(S, recv)
        phi = self.encode_time(dt)
        if self.cfg.msg_fn == "attention":
            query = self.msg_q(T.take_rows(S, other))
            s_other, _ = self._attend(S, g, other, t, query, self.msg_k, self.msg_v)
        else:
            s_other = T.take_rows(S, other)
        raw = T.concat([s_recv, s_other, phi], axis=1)
        return self.msg_mlp(raw) if self.cfg.msg_fn == "mlp" else raw

    def apply_events(self, g, states: np.ndarray, last_update: np.ndarray, src, dst, ts) -> MemoryView:
        """Fold events into memory rows (differentiably when a tape is active).

        Both endpoints of every event receive a message built from the given
        states.  With ``agg_fn == "none"`` each node's messages are applied
        in event order; otherwise they are first aggregated.
        """
        S = Tensor(states, dtype=self.store.dtype)
        last_update = last_update.copy()
        src, dst, ts = (np.asarray(a) for a in (src, dst, ts))
        if len(ts) == 0:
            return MemoryView(S, last_update, np.zeros(0, dtype=np.int64))
        E = len(ts)
        recv = np.concatenate([src, dst])
        other = np.concatenate([dst, src])
        tt = np.concatenate([ts, ts]).astype(np.float64)
        seq = np.concatenate([2 * np.arange(E), 2 * np.arange(E) + 1])
        order = np.lexsort((seq, recv))  # per receiver, in event order
        recv, other, tt = recv[order], other[order], tt[order]
        uniq, first, counts = np.unique(recv, return_index=True, return_counts=True)
        rank = np.arange(len(recv)) - np.repeat(first, counts)
        if np.any(tt[first] < last_update[uniq]):
            bad = uniq[np.argmax(tt[first] < last_update[uniq])]
            raise OutOfOrderError(f"node {bad}: update at t < last update {last_update[bad]}")
        agg = self.cfg.agg_fn
        if agg == "none":
            prev = np.where(rank == 0, last_update[recv], np.roll(tt, 1))
        else:
            prev = last_update[recv]
        # messages see node identity through the learnable embedding, so memory can record who was met
        F = T.add(S, self.node_emb) if self.cfg.node_embedding else S
        msgs = self._messages(g, F, last_update, recv, other, tt, tt - prev)
        h = T.take_rows(S, uniq)
        if agg == "none":
            for r in range(int(counts.max())):
                pos = np.nonzero(counts > r)[0]
                m_r = T.take_rows(msgs, first[pos] + r)
                new = self.cell(m_r, T.take_rows(h, pos))
                h = T.scatter_rows(h, pos, new) if len(pos) < len(uniq) else new
        else:
            if agg == "last-time":
                m = T.take_rows(msgs, first + counts - 1)
            else:
                m = T.segment_mean(msgs, np.repeat(np.arange(len(uniq)), counts), len(uniq))
            h = self.cell(m, h)
        last_update[uniq] = tt[first + counts - 1]
        return MemoryView(T.scatter_rows(S, uniq, h), last_update, uniq)

    def begin_batch(self, g: TemporalGraph) -> MemoryView:
        """Memory reflecting every event before the current batch."""
        if self.pending is None:
            return MemoryView(Tensor(self.memory.states, dtype=self.store.dtype), self.memory.last_update.copy(),
                              np.zeros(0, dtype=np.int64))
        return self.apply_events(g, self.memory.states, self.memory.last_update, *self.pending)

    def commit(self, view: MemoryView, src, dst, ts) -> None:
        """Persist the batch-start memory and queue this batch's events."""
        self.memory.states = np.array(view.states.data, dtype=self.memory.dtype)
        self.memory.last_update = view.last_update.copy()
        self.pending = (np.asarray(src), np.asarray(dst), np.asarray(ts))

    def flush(self, g: TemporalGraph) -> None:
        view = self.begin_batch(g)
        self.memory.states = np.array(view.states.data, dtype=self.memory.dtype)
        self.memory.last_update = view.last_update.copy()
        self.pending = None

    def reset_memory(self) -> None:
        self.memory.reset()
        self.pending = None

    # -- embeddings -----------------------------------------------------------

    def node_states(self, view: MemoryView) -> Tensor:
        return T.add(view.states, self.node_emb) if self.cfg.node_embedding else view.states

    def embed(self, view: MemoryView, g: TemporalGraph, nodes, times, return_weights: bool = False):
        """Temporal embeddings ``(B, embed_dim)`` of ``nodes`` at ``times``."""
        nodes = np.asarray(nodes, dtype=np.int64)
        times = np.asarray(times, dtype=np.float64)
        feats = self.node_states(view)
        own = T.take_rows(feats, nodes)
        weights = None
        fn = self.cfg.embed_fn
        if fn == "identity":
            z = self.out(own)
        elif fn == "time-projection":
            dt = (times - view.last_update[nodes]) / self.cfg.time_scale
            if np.any(dt < 0):
                raise OutOfOrderError("embedding requested before the node's last update")
            scale = T.add(T.mul(Tensor(dt.reshape(-1, 1), dtype=self.store.dtype), self.proj_w), 1.0)
            z = self.out(T.mul(scale, own))
        else:
            query = self.att_q(T.concat([own, self.encode_time(np.zeros(len(nodes)))], axis=1))
            h, weights = self._attend(feats, g, nodes, times, query, self.att_k, self.att_v)
            z = self.merge(T.concat([h, own], axis=1))
        return (z, weights) if return_weights else z

    # -- single-node operations -------------------------------------------------

    def compute_message(self, i: int, j: int, t: float, mem: MemoryStore, g: TemporalGraph | None = None) -> Tensor:
        if t < mem.last_update[i]:
            raise OutOfOrderError(f"node {i}: message at {t} before last update {mem.last_update[i]}")
        g = g if g is not None else TemporalGraph([], [], [], num_nodes=mem.num_nodes)
        S = Tensor(mem.states, dtype=self.store.dtype)
        if self.cfg.node_embedding:
            S = T.add(S, self.node_emb)
        return self._messages(g, S, mem.last_update, np.array([i]), np.array([j]), np.array([float(t)]),
                              np.array([t - mem.last_update[i]]))

    def update_memory(self, i: int, agg_msg, t: float, mem: MemoryStore) -> np.ndarray:
        """Run the memory cell on node ``i`` only and stamp its update time."""
        if t < mem.last_update[i]:
            raise OutOfOrderError(f"node {i}: update at {t} before last update {mem.last_update[i]}")
        msg = T.as_tensor(np.asarray(agg_msg.data if isinstance(agg_msg, Tensor) else agg_msg,
                                     dtype=self.store.dtype).reshape(1, -1))
        h = self.cell(msg, Tensor(mem.states[i:i + 1], dtype=self.store.dtype))
        mem.states[i] = h.data[0]
        mem.last_update[i] = t
        return mem.states[i]

    def embed_node(self, i: int, t: float, g: TemporalGraph, mem: MemoryStore) -> np.ndarray:
        view = MemoryView(Tensor(mem.states, dtype=self.store.dtype), mem.last_update, np.zeros(0, dtype=np.int64))
        return self.embed(view, g, [i], [t]).data[0]
