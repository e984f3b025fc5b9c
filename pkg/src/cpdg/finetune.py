"""Downstream fine-tuning with optional evolution-information enhancement (EIE).

EIE fuses the memory checkpoints captured during pre-training into one
vector per node, passes it through a two-layer MLP and concatenates the
result onto the downstream embedding before the task head.  Head weights on
the appended columns start at zero, so every mode begins from the same
function as plain fine-tuning.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .dgnn import BackboneConfig
from .graph import TemporalGraph, chrono_split
from .metrics import evaluate, roc_auc
from .nn import MLP, GRUCell, ParamStore, make_optimizer
from .pretrain import CPDGModel, CheckpointSequence, batch_bounds, corrupt_destinations, tlp_loss
from .tensor import Tape, Tensor

logger = logging.getLogger(__name__)

MODES = ("full", "eie-mean", "eie-attn", "eie-gru")
TASKS = ("link-prediction", "node-classification")


@dataclass(frozen=True)
class EIEConfig:
    mode: str = "full"
    mlp_hidden: int | None = None  # defaults to the memory width

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")


@dataclass(frozen=True)
class FinetuneConfig:
    task: str = "link-prediction"
    epochs: int = 10
    batch_size: int = 256
    lr: float = 1e-3
    optimizer: str = "adam"
    seed: int = 0
    eval_seed: int = 2024
    eval_negatives: int = 1  # corrupted destinations scored per held-out event
    patience: int = 3
    ratios: tuple = (0.8, 0.1, 0.1)

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}, got {self.task!r}")


# -- checkpoint fusion ----------------------------------------------------------

class EvolutionFuser:
    """Learnable parts of checkpoint fusion for one mode."""

    def __init__(self, store: ParamStore, mode: str, mem_dim: int, embed_dim: int, hidden: int | None = None):
        self.mode = mode
        hidden = hidden or mem_dim
        if mode == "eie-attn":
            self.score = MLP(store, "eie.attn", mem_dim + embed_dim, hidden, 1)
        elif mode == "eie-gru":
            self.gru = GRUCell(store, "eie.gru", mem_dim, mem_dim)

    def __call__(self, stack: np.ndarray, nodes, z_down: Tensor | None = None):
        """EI rows for ``nodes`` from an ``(l, N, d)`` snapshot stack; returns ``(EI, weights)``.

        Nodes beyond the pre-training node range get zero rows.
        """
        nodes = np.asarray(nodes, dtype=np.int64)
        l, n_pre, d = stack.shape
        if l < 1:
            raise ValueError("need at least one checkpoint")
        seen = nodes < n_pre
        seq = np.zeros((len(nodes), l, d), dtype=stack.dtype)
        seq[seen] = stack[:, nodes[seen]].transpose(1, 0, 2)
        weights = None
        if self.mode == "eie-mean":
            ei = Tensor(seq.mean(axis=1), dtype=stack.dtype)
        elif self.mode == "eie-attn":
            if z_down is None:
                raise ValueError("attention fusion needs downstream embeddings")
            B = len(nodes)
            S = Tensor(seq.reshape(B * l, d), dtype=stack.dtype)
            zz = T.take_rows(z_down, np.repeat(np.arange(B), l))
            scores = T.reshape(self.score(T.concat([S, zz], axis=1)), (B, l))
            w = T.softmax(scores, axis=1)
            ei = T.mix(w, Tensor(seq, dtype=stack.dtype))
            weights = w.data
        elif self.mode == "eie-gru":
            h = Tensor(np.zeros((len(nodes), d)), dtype=stack.dtype)
            for k in range(l):
                h = self.gru(Tensor(seq[:, k], dtype=stack.dtype), h)
            ei = h
        else:
            raise ValueError(f"mode {self.mode!r} does not fuse checkpoints")
        if not seen.all():
            ei = T.mul(ei, seen[:, None].astype(ei.data.dtype))
        return ei, weights


def fuse_checkpoints(seq: CheckpointSequence | np.ndarray, mode: str, z_down=None, fuser: EvolutionFuser | None = None,
                     nodes=None, seed: int = 0):
    """Evolution information for ``nodes`` (default: every pre-training node) as a numpy array."""
    stack = seq.stacked() if isinstance(seq, CheckpointSequence) else np.asarray(seq)
    if nodes is None:
        nodes = np.arange(stack.shape[1])
    if fuser is None:
        d = stack.shape[2]
        dz = d if z_down is None else np.shape(z_down.data if isinstance(z_down, Tensor) else z_down)[1]
        fuser = EvolutionFuser(ParamStore(np.random.default_rng(seed), dtype=stack.dtype), mode, d, dz)
    if z_down is not None and not isinstance(z_down, Tensor):
        z_down = Tensor(z_down, dtype=stack.dtype)
    ei, w = fuser(stack, nodes, z_down)
    return ei.data, w


# -- model assembly -------------------------------------------------------------

class FinetuneModel:
    def __init__(self, backbone: BackboneConfig, num_nodes: int, task: str, eie: EIEConfig,
                 pretrained: dict | None = None, checkpoints: CheckpointSequence | None = None,
                 seed: int = 0, dtype=None):
        self.task = task
        self.eie = eie
        self.base = CPDGModel(backbone, num_nodes, seed=seed, dtype=dtype)
        store = self.store = self.base.store
        self.encoder = self.base.encoder
        self.loaded = []
        if pretrained is not None:
            self.loaded = store.load(pretrained, strict=False)
            emb = pretrained.get("node_emb")
            if emb is not None and "node_emb" in store and "node_emb" not in self.loaded:
                # node spaces differ in size: carry over the shared prefix of rows
                n = min(len(emb), num_nodes)
                store["node_emb"].data[:n] = emb[:n]
                self.loaded.append("node_emb")
        dz, d = backbone.embed_dim, backbone.memory_dim
        if task == "node-classification":
            self.head = MLP(store, "cls", dz, dz, 1)
        else:
            self.head = self.base.head
        self.stack = None
        if eie.mode != "full":
            if checkpoints is None or len(checkpoints) == 0:
                raise ValueError(f"mode {eie.mode} requires pre-training checkpoints")
            self.stack = checkpoints.stacked().astype(store.dtype)
            self.fuser = EvolutionFuser(store, eie.mode, d, dz, eie.mlp_hidden)
            self.ei_mlp = MLP(store, "eie.mlp", d, eie.mlp_hidden or d, dz)
            self._widen_head(dz)

    def _widen_head(self, dz):
        """Insert zero input rows for the EI columns of every node slot in the head input."""
        w = self.head.fc1.w
        slots = w.shape[0] // dz
        blocks = []
        for k in range(slots):
            blocks.append(w.data[k * dz:(k + 1) * dz])
            blocks.append(np.zeros((dz, w.shape[1]), dtype=w.data.dtype))
        w.data = np.concatenate(blocks, axis=0)

    def enhanced(self, view, g, nodes, times):
        z = self.encoder.embed(view, g, nodes, times)
        if self.stack is None:
            return z
        ei, _ = self.fuser(self.stack, nodes, z)
        return T.concat([z, self.ei_mlp(ei)], axis=1)

    def scores(self, view, g, ordinals, negatives=None):
        """Logits for the events ``ordinals`` (and their negatives, for links)."""
        src, dst, ts = g.src[ordinals], g.dst[ordinals], g.ts[ordinals]
        B = len(ordinals)
        if self.task == "node-classification":
            z = self.enhanced(view, g, src, ts)
            return T.reshape(self.head(z), (-1,)), None
        n_neg = negatives.shape[1]
        nodes = np.concatenate([src, dst, negatives.reshape(-1)])
        times = np.concatenate([ts, ts, np.repeat(ts, n_neg)])
        z = self.enhanced(view, g, nodes, times)
        z_src = T.slice_(z, slice(0, B))
        pos = T.reshape(self.head(T.concat([z_src, T.slice_(z, slice(B, 2 * B))], axis=1)), (-1,))
        src_rep = T.take_rows(z_src, np.repeat(np.arange(B), n_neg))
        neg = T.reshape(self.head(T.concat([src_rep, T.slice_(z, slice(2 * B, None))], axis=1)), (-1,))
        return pos, neg


# -- training / evaluation ------------------------------------------------------

@dataclass
class FinetuneResult:
    metrics: dict
    params: dict
    history: list = field(default_factory=list)
    initial_loss: float = float("nan")
    model: FinetuneModel = field(default=None, repr=False)


def _labels(g, ordinals):
    y = g.labels[ordinals]
    if np.any(y < 0):
        raise ValueError("events without labels in a node-classification segment")
    return y.astype(np.float64)


def _batch_loss(model: FinetuneModel, g, ords, negs):
    view = model.encoder.begin_batch(g)
    pos, neg = model.scores(view, g, ords, negs)
    if model.task == "node-classification":
        loss = T.mean(T.bce_with_logits(pos, _labels(g, ords)))
    else:
        loss = tlp_loss(pos, neg)
    return loss, view


def _replay(model: FinetuneModel, g, ordinals, batch_size, eval_seed, collect: bool, n_neg: int = 1):
    """Advance memory over ``ordinals`` without gradients; optionally collect probabilities."""
    scores, labels = [], []
    for a, b in batch_bounds(len(ordinals), batch_size):
        ords = ordinals[a:b]
        view = model.encoder.begin_batch(g)
        if collect:
            negs = corrupt_destinations(g, ords, n_neg, eval_seed) if model.task == "link-prediction" else None
            pos, neg = model.scores(view, g, ords, negs)
            if model.task == "link-prediction":
                scores += [pos.data, neg.data]
                labels += [np.ones(len(pos.data)), np.zeros(len(neg.data))]
            else:
                scores.append(pos.data)
                labels.append(_labels(g, ords))
        model.encoder.commit(view, g.src[ords], g.dst[ords], g.ts[ords])
    if not collect:
        return None, None
    logits = np.concatenate(scores).astype(np.float64)
    return 1.0 / (1.0 + np.exp(-logits)), np.concatenate(labels)


def _safe_auc(p, y):
    try:
        return roc_auc(p, y)
    except ValueError:
        return float("nan")


def finetune(g: TemporalGraph, backbone: BackboneConfig, pretrained: dict | None, checkpoints: CheckpointSequence | None,
             cfg: FinetuneConfig, eie: EIEConfig = EIEConfig(), dtype=None) -> FinetuneResult:
    """Fine-tune on the downstream log ``g`` and report test metrics.

    The log is split chronologically into train/validation/test by
    ``cfg.ratios``.  Each epoch replays training events from zeroed memory,
    then scores validation events; the parameters with the best validation
    AUC are kept (early stopping with ``cfg.patience``).
    """
    if cfg.task == "node-classification" and (g.labels is None or np.all(g.labels < 0)):
        raise ValueError("node classification requires labelled events")
    if backbone.time_scale is None:
        raise ValueError("backbone.time_scale must be resolved (take it from the pre-training result)")
    model = FinetuneModel(backbone, g.num_nodes, cfg.task, eie, pretrained, checkpoints, cfg.seed, dtype)
    split = chrono_split(g, cfg.ratios)
    train, val, test = (np.arange(split.indices[k], split.indices[k + 1]) for k in range(3))
    opt = make_optimizer(cfg.optimizer, model.store, cfg.lr)
    best_auc, best_state, best_epoch, stale = -np.inf, model.store.state(), -1, 0
    history, initial_loss = [], float("nan")
    epochs_run = 0
    for epoch in range(cfg.epochs):
        epochs_run += 1
        model.encoder.reset_memory()
        losses = []
        for a, b in batch_bounds(len(train), cfg.batch_size):
            ords = train[a:b]
            negs = None
            if cfg.task == "link-prediction":
                negs = corrupt_destinations(g, ords, 1, cfg.seed * 1_000_003 + epoch)
            model.store.zero_grad()
            with Tape() as tape:
                loss, view = _batch_loss(model, g, ords, negs)
            if np.isnan(initial_loss):
                initial_loss = loss.item()
            tape.backward(loss)
            opt.step()
            model.encoder.commit(view, g.src[ords], g.dst[ords], g.ts[ords])
            losses.append(loss.item())
        p, y = _replay(model, g, val, cfg.batch_size, cfg.eval_seed, collect=True, n_neg=cfg.eval_negatives)
        val_auc = _safe_auc(p, y)
        history.append({"epoch": epoch, "train_loss": float(np.mean(losses)), "val_auc": val_auc})
        if val_auc > best_auc or best_epoch < 0:
            best_auc, best_state, best_epoch, stale = val_auc, model.store.state(), epoch, 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    model.store.load(best_state)
    metrics = score_test_segment(model, g, cfg)
    metrics.update({"mode": eie.mode, "seed": cfg.seed, "epochs_run": epochs_run, "best_epoch": best_epoch,
                    "val_auc": best_auc})
    return FinetuneResult(metrics, model.store.state(), history, initial_loss, model)


def score_test_segment(model: FinetuneModel, g: TemporalGraph, cfg: FinetuneConfig) -> dict:
    """Replay train and validation events from zero memory, then score the test segment."""
    split = chrono_split(g, cfg.ratios)
    train, val, test = (np.arange(split.indices[k], split.indices[k + 1]) for k in range(3))
    model.encoder.reset_memory()
    _replay(model, g, train, cfg.batch_size, cfg.eval_seed, collect=False)
    _replay(model, g, val, cfg.batch_size, cfg.eval_seed, collect=False)
    p, y = _replay(model, g, test, cfg.batch_size, cfg.eval_seed, collect=True, n_neg=cfg.eval_negatives)
    return evaluate(cfg.task, p, y)


def evaluate_saved(g: TemporalGraph, backbone: BackboneConfig, params: dict, checkpoints: CheckpointSequence | None,
                   cfg: FinetuneConfig, eie: EIEConfig = EIEConfig(), dtype=None) -> dict:
    """Test metrics of fine-tuned ``params`` (as returned in :class:`FinetuneResult`)."""
    model = FinetuneModel(backbone, g.num_nodes, cfg.task, eie, None, checkpoints, cfg.seed, dtype)
    model.store.load(params, strict=True)
    metrics = score_test_segment(model, g, cfg)
    metrics.update({"mode": eie.mode, "seed": cfg.seed})
    return metrics
