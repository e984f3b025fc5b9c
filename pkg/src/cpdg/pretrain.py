"""Structural-temporal contrastive pre-training.

Per batch of chronologically ordered events the objective is

    L_pre = (1 - beta) * L_temporal + beta * L_structural + L_link

where both contrast terms are triplet margin losses between the anchor's
encoder embedding and mean-pooled memory rows of sampled subgraphs, and the
link term is binary cross-entropy of an affinity MLP on positive versus
destination-corrupted pairs.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .dgnn import DGNN, BackboneConfig, MemoryStore, default_time_scale, load_memory, save_memory
from .graph import TemporalGraph
from .nn import MLP, Linear, ParamStore, make_optimizer
from .sampler import SamplePlan, SamplerConfig, SubgraphBatch, hash_uniform, precompute_sample_plan
from .tensor import Tape, Tensor

logger = logging.getLogger(__name__)

_NEG_KEY = 11


class TrainingError(RuntimeError):
    """Raised when a batch produces a non-finite loss."""


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 1.0
    beta: float = 0.5
    negatives_per_edge: int = 1
    ablation: bool = False  # permits beta in {0, 1}

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        _check_beta(self.beta, self.ablation)
        if self.negatives_per_edge < 1:
            raise ValueError("negatives_per_edge must be >= 1")


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 3
    batch_size: int = 256
    lr: float = 1e-3
    optimizer: str = "adam"
    checkpoints: int = 10
    seed: int = 0
    anchor_both: bool = False
    memory_persist_across_epochs: bool = False


def _check_beta(beta, ablation):
    if ablation:
        if not 0.0 <= beta <= 1.0:
            raise ValueError(f"beta must lie in [0, 1], got {beta}")
    elif not 0.0 < beta < 1.0:
        raise ValueError(f"beta must lie in (0, 1) unless ablation is enabled, got {beta}")


# -- loss terms -----------------------------------------------------------------

def readout(members, states) -> np.ndarray | Tensor:
    """Mean of the member rows of ``states`` (multiset: repeated members count repeatedly)."""
    members = np.asarray(members, dtype=np.int64)
    if members.size == 0:
        raise ValueError("readout of an empty member set")
    if isinstance(states, Tensor):
        return T.mean_rows(T.take_rows(states, members))
    return np.asarray(states)[members].mean(axis=0)


def batch_readout(batch: SubgraphBatch, states: Tensor) -> Tensor:
    """One mean-pooled row per subgraph of ``batch``; memberless subgraphs give zeros."""
    seg = np.repeat(np.arange(len(batch)), batch.sizes())
    return T.segment_mean(T.take_rows(states, batch.nodes), seg, len(batch))


def contrast_terms(z, h_pos, h_neg, alpha: float) -> Tensor:
    """Per-anchor triplet terms ``max(d(z, h_pos) - d(z, h_neg) + alpha, 0)``."""
    z, h_pos, h_neg = (T.as_tensor(np.atleast_2d(x)) if not isinstance(x, Tensor) else x for x in (z, h_pos, h_neg))
    return T.triplet_margin(z, h_pos, h_neg, alpha)


def temporal_contrast_loss(z, h_tp, h_tn, alpha: float, mask=None) -> Tensor:
    """Mean triplet loss over anchors; masked-out anchors contribute 0 but still count."""
    terms = contrast_terms(z, h_tp, h_tn, alpha)
    if mask is not None:
        terms = T.mul(terms, np.asarray(mask, dtype=terms.data.dtype))
    return T.mean(terms)


structural_contrast_loss = temporal_contrast_loss


def tlp_loss(pos_logits, neg_logits) -> Tensor:
    """``mean(-log sigmoid(pos)) + mean(-log(1 - sigmoid(neg)))``; one term per pair when counts match."""
    pos = pos_logits if isinstance(pos_logits, Tensor) else T.as_tensor(pos_logits)
    neg = neg_logits if isinstance(neg_logits, Tensor) else T.as_tensor(neg_logits)
    if pos.data.size == 0 or neg.data.size == 0:
        raise ValueError("tlp_loss needs at least one positive and one negative")
    return T.add(T.mean(T.bce_with_logits(pos, np.ones(pos.shape))),
                 T.mean(T.bce_with_logits(neg, np.zeros(neg.shape))))


def combined_loss(l_eta, l_eps, l_tlp, beta: float, ablation: bool = False):
    _check_beta(beta, ablation)
    if any(isinstance(x, Tensor) for x in (l_eta, l_eps, l_tlp)):
        return T.add(T.add(T.mul(l_eta, 1.0 - beta), T.mul(l_eps, beta)), l_tlp)
    return (1.0 - beta) * l_eta + beta * l_eps + l_tlp


def corrupt_destinations(g: TemporalGraph, ordinals, count: int, seed: int) -> np.ndarray:
    """``(B, count)`` negatives drawn uniformly from nodes that occur as destinations."""
    pool = g.dst_nodes
    if len(pool) == 0:
        raise ValueError("no eligible negative destinations")
    ordinals = np.asarray(ordinals, dtype=np.int64)
    u = hash_uniform(seed, _NEG_KEY, ordinals[:, None], np.arange(count)[None, :])
    return pool[np.minimum((u * len(pool)).astype(np.int64), len(pool) - 1)]


# -- model ----------------------------------------------------------------------

class CPDGModel:
    """Encoder plus link-affinity head (and a contrast projection when widths differ)."""

    def __init__(self, backbone: BackboneConfig, num_nodes: int, seed: int = 0, dtype=None):
        self.store = ParamStore(np.random.default_rng(seed), dtype=dtype)
        self.encoder = DGNN(backbone, num_nodes, store=self.store)
        self.backbone = self.encoder.cfg
        dz = backbone.embed_dim
        self.head = MLP(self.store, "tlp", 2 * dz, dz, 1)
        self.proj = Linear(self.store, "contrast_proj", dz, backbone.memory_dim) if dz != backbone.memory_dim else None

    def affinity(self, z_a: Tensor, z_b: Tensor) -> Tensor:
        return T.reshape(self.head(T.concat([z_a, z_b], axis=1)), (-1,))


@dataclass
class BatchResult:
    loss: Tensor
    l_eta: float
    l_eps: float
    l_tlp: float
    skipped_temporal: int
    skipped_structural: int


def batch_objective(model: CPDGModel, g: TemporalGraph, ordinals, plan: SamplePlan, loss_cfg: LossConfig,
                    seed: int, view=None):
    """Pre-training loss of one batch; returns ``(BatchResult, view)``.

    ``plan`` holds the quadruples anchored in this batch (source side 0,
    destination side 1); anchor rows index into the batch's embeddings.
    """
    enc = model.encoder
    ordinals = np.asarray(ordinals, dtype=np.int64)
    B = len(ordinals)
    view = enc.begin_batch(g) if view is None else view
    src, dst, ts = g.src[ordinals], g.dst[ordinals], g.ts[ordinals]
    negs = corrupt_destinations(g, ordinals, loss_cfg.negatives_per_edge, seed)
    n_neg = negs.shape[1]
    nodes = np.concatenate([src, dst, negs.reshape(-1)])
    times = np.concatenate([ts, ts, np.repeat(ts, n_neg)])
    z = enc.embed(view, g, nodes, times)
    z_src, z_dst, z_neg = T.slice_(z, slice(0, B)), T.slice_(z, slice(B, 2 * B)), T.slice_(z, slice(2 * B, None))
    pos_logits = model.affinity(z_src, z_dst)
    neg_logits = model.affinity(T.take_rows(z_src, np.repeat(np.arange(B), n_neg)), z_neg)
    l_tlp = tlp_loss(pos_logits, neg_logits)

    pos_in_batch = np.searchsorted(ordinals, plan.ordinals)
    anchor_rows = plan.sides * B + pos_in_batch
    z_anchor = T.take_rows(z, anchor_rows)
    if model.proj is not None:
        z_anchor = model.proj(z_anchor)
    states = view.states
    h_tp, h_tn = batch_readout(plan.tp, states), batch_readout(plan.tn, states)
    h_sp, h_sn = batch_readout(plan.sp, states), batch_readout(plan.sn, states)
    ok_t = ~(plan.tp.empty_mask() | plan.tn.empty_mask())
    ok_s = ~plan.sp.empty_mask() & (plan.sn.sizes() > 0)
    l_eta = temporal_contrast_loss(z_anchor, h_tp, h_tn, loss_cfg.alpha, ok_t)
    l_eps = structural_contrast_loss(z_anchor, h_sp, h_sn, loss_cfg.alpha, ok_s)
    loss = combined_loss(l_eta, l_eps, l_tlp, loss_cfg.beta, loss_cfg.ablation)
    res = BatchResult(loss, l_eta.item(), l_eps.item(), l_tlp.item(),
                      int((~ok_t).sum()), int((~ok_s).sum()))
    return res, view


# -- checkpoint sequence --------------------------------------------------------

@dataclass
class CheckpointSequence:
    checkpoints: list[MemoryStore]
    schedule: list[int]        # global batch index at capture
    times: list[float]         # timestamp of the last event folded in

    def __len__(self):
        return len(self.checkpoints)

    def stacked(self) -> np.ndarray:
        """``(l, N, d)`` array of snapshot states."""
        return np.stack([m.states for m in self.checkpoints])

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        files = []
        for k, (mem, t) in enumerate(zip(self.checkpoints, self.times)):
            name = f"memory_{k:03d}.cmem"
            save_memory(mem, directory / name, t)
            files.append(name)
        manifest = {"count": len(files), "files": files, "schedule": self.schedule, "times": self.times}
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=2))

    @classmethod
    def load(cls, directory) -> "CheckpointSequence":
        directory = Path(directory)
        manifest = json.loads((directory / "manifest.json").read_text())
        mems = [load_memory(directory / f)[0] for f in manifest["files"]]
        return cls(mems, list(manifest["schedule"]), list(manifest["times"]))


def checkpoint_schedule(total_batches: int, count: int) -> list[int]:
    """``count`` capture indices spread uniformly over ``total_batches``, ending at the last batch."""
    if count < 1:
        return []
    if count > total_batches:
        raise ValueError(f"cannot capture {count} checkpoints from {total_batches} batches")
    return [int(round((k + 1) * total_batches / count)) - 1 for k in range(count)]


# -- training loop --------------------------------------------------------------

@dataclass
class PretrainResult:
    params: dict[str, np.ndarray]
    backbone: BackboneConfig
    checkpoints: CheckpointSequence
    log: list[dict]
    memory: MemoryStore
    model: CPDGModel = field(repr=False, default=None)


def batch_bounds(n: int, batch_size: int) -> list[tuple[int, int]]:
    return [(a, min(a + batch_size, n)) for a in range(0, n, batch_size)]


def pretrain(g: TemporalGraph, backbone: BackboneConfig, sampler_cfg: SamplerConfig, loss_cfg: LossConfig,
             cfg: PretrainConfig, plan: SamplePlan | None = None, log_path=None, dtype=None) -> PretrainResult:
    """Run the pre-training procedure over the event log ``g`` (one segment).

    Events are consumed in timestamp order in mini-batches; every epoch
    replays the log from zeroed memory unless ``memory_persist_across_epochs``.
    ``cfg.checkpoints`` memory snapshots are captured uniformly over all batches.
    """
    if g.num_events == 0:
        raise ValueError("pre-training segment is empty")
    if backbone.time_scale is None:
        backbone = replace(backbone, time_scale=default_time_scale(g))
    model = CPDGModel(backbone, g.num_nodes, seed=cfg.seed, dtype=dtype)
    opt = make_optimizer(cfg.optimizer, model.store, cfg.lr)
    if plan is None:
        plan = precompute_sample_plan(g, sampler_cfg, anchor_both=cfg.anchor_both)
    bounds = batch_bounds(g.num_events, cfg.batch_size)
    plan_rows = [np.nonzero((plan.ordinals >= a) & (plan.ordinals < b))[0] for a, b in bounds]
    batch_plans = [plan.select(r) for r in plan_rows]
    total = cfg.epochs * len(bounds)
    schedule = checkpoint_schedule(total, cfg.checkpoints)
    capture = set(schedule)
    snaps, snap_times, log = [], [], []
    log_fh = Path(log_path).open("w") if log_path else None
    step = 0
    try:
        for epoch in range(cfg.epochs):
            if epoch == 0 or not cfg.memory_persist_across_epochs:
                model.encoder.reset_memory()
            for b, (lo, hi) in enumerate(bounds):
                t0 = time.perf_counter()
                ords = np.arange(lo, hi)
                model.store.zero_grad()
                try:
                    with Tape() as tape:
                        res, view = batch_objective(model, g, ords, batch_plans[b], loss_cfg, cfg.seed)
                    if not np.isfinite(res.loss.data).all():
                        raise FloatingPointError("non-finite loss")
                    tape.backward(res.loss)
                except FloatingPointError as exc:
                    raise TrainingError(f"epoch {epoch} batch {b} (events {lo}:{hi}): {exc}") from exc
                opt.step()
                model.encoder.commit(view, g.src[ords], g.dst[ords], g.ts[ords])
                entry = {"epoch": epoch, "batch": b, "l_eta": res.l_eta, "l_eps": res.l_eps, "l_tlp": res.l_tlp,
                         "l_pre": res.loss.item(), "skipped_anchors": res.skipped_temporal + res.skipped_structural,
                         "skipped_temporal": res.skipped_temporal, "skipped_structural": res.skipped_structural,
                         "wall_time": time.perf_counter() - t0}
                log.append(entry)
                if log_fh:
                    log_fh.write(json.dumps(entry) + "\n")
                if step in capture:
                    view_now = model.encoder.begin_batch(g)
                    snap = MemoryStore(g.num_nodes, backbone.memory_dim, dtype=model.store.dtype)
                    snap.states[:] = view_now.states.data
                    snap.last_update[:] = view_now.last_update
                    snaps.append(snap)
                    snap_times.append(float(g.ts[hi - 1]))
                step += 1
            logger.info("epoch %d mean L_pre %.4f", epoch,
                        np.mean([e["l_pre"] for e in log if e["epoch"] == epoch]))
        model.encoder.flush(g)
    finally:
        if log_fh:
            log_fh.close()
    return PretrainResult(model.store.state(), model.backbone, CheckpointSequence(snaps, schedule, snap_times),
                          log, model.encoder.memory.clone(), model)


def epoch_means(log: list[dict], key: str = "l_pre") -> list[float]:
    epochs = sorted({e["epoch"] for e in log})
    return [float(np.mean([e[key] for e in log if e["epoch"] == ep])) for ep in epochs]
