import json
import math

import numpy as np
import pytest

from cpdg.dgnn import preset
from cpdg.graph import GeneratorConfig, generate_synthetic
from cpdg.pretrain import (
    CPDGModel, CheckpointSequence, LossConfig, PretrainConfig, TrainingError, batch_objective, checkpoint_schedule,
    combined_loss, corrupt_destinations, epoch_means, pretrain, readout, temporal_contrast_loss, tlp_loss,
)
from cpdg.sampler import SamplerConfig, precompute_sample_plan
from cpdg.tensor import Tape, grad_check


def small_graph(n=200, seed=0):
    return generate_synthetic(GeneratorConfig(num_users=12, num_items=12, num_events=n, repeat_prob=0.3), seed)


def tiny_backbone(name="tgn", **kw):
    return preset(name, memory_dim=4, embed_dim=4, time_dim=3, embed_degree=3, **kw)


def test_readout_mean_and_multiset():
    states = np.array([[1.0, 0.0], [3.0, 2.0], [0.0, 4.0]])
    assert np.allclose(readout([0, 1], states), [2.0, 1.0])
    assert np.allclose(readout([1, 1, 2], states), [2.0, 8.0 / 3.0])
    with pytest.raises(ValueError):
        readout([], states)


def test_triplet_values():
    z = np.array([[0.0, 0.0]])
    h_pos = np.array([[1.0, 0.0]])
    h_neg = np.array([[0.5, 0.0]])
    assert math.isclose(temporal_contrast_loss(z, h_pos, h_neg, 1.0).item(), 1.5)
    assert temporal_contrast_loss(z, h_neg, np.array([[3.0, 0.0]]), 1.0).item() == 0.0
    far = np.array([[2.0, 0.0]])
    assert math.isclose(temporal_contrast_loss(z, far, h_pos, 0.5).item(), 1.5)
    # identical positive and negative leave exactly the margin
    assert math.isclose(temporal_contrast_loss(z, h_pos, h_pos, 0.7).item(), 0.7)


def test_triplet_mask_keeps_denominator():
    z = np.zeros((2, 2))
    h = np.ones((2, 2))
    full = temporal_contrast_loss(z, h, h, 1.0).item()
    half = temporal_contrast_loss(z, h, h, 1.0, mask=[1, 0]).item()
    assert math.isclose(full, 1.0) and math.isclose(half, 0.5)


def test_tlp_values():
    assert math.isclose(tlp_loss(np.zeros(3), np.zeros(3)).item(), 2 * math.log(2), rel_tol=1e-12)
    assert tlp_loss(np.full(2, 40.0), np.full(2, -40.0)).item() < 1e-15
    rng = np.random.default_rng(0)
    pos, neg = rng.normal(size=7), rng.normal(size=7)
    sig = lambda x: 1 / (1 + np.exp(-x))
    want = -np.mean(np.log(sig(pos))) - np.mean(np.log(1 - sig(neg)))
    assert math.isclose(tlp_loss(pos, neg).item(), want, rel_tol=1e-12)


def test_combined_loss_arithmetic():
    assert math.isclose(combined_loss(2.0, 4.0, 1.0, 0.5), 4.0)
    assert combined_loss(2.0, 4.0, 1.0, 0.0, ablation=True) == 3.0
    assert combined_loss(2.0, 4.0, 1.0, 1.0, ablation=True) == 5.0
    for bad in (0.0, 1.0, -0.1, 1.5):
        with pytest.raises(ValueError):
            combined_loss(1.0, 1.0, 1.0, bad)
    with pytest.raises(ValueError):
        LossConfig(beta=1.0)
    LossConfig(beta=1.0, ablation=True)


def test_negatives_come_from_destinations():
    g = small_graph()
    negs = corrupt_destinations(g, np.arange(50), 3, seed=1)
    assert negs.shape == (50, 3)
    assert set(negs.ravel()) <= set(g.dst.tolist())
    assert np.array_equal(negs, corrupt_destinations(g, np.arange(50), 3, seed=1))


@pytest.mark.parametrize("total,count", [(100, 10), (30, 10), (10, 10), (7, 3), (5, 1)])
def test_checkpoint_schedule(total, count):
    s = checkpoint_schedule(total, count)
    assert len(s) == count and s[-1] == total - 1
    assert all(b > a for a, b in zip(s, s[1:]))
    for k, idx in enumerate(s):
        assert abs(idx - ((k + 1) * total / count - 1)) <= 1
    with pytest.raises(ValueError):
        checkpoint_schedule(3, 4)


def full_loss_check(name, beta=0.5, seed=0):
    g = small_graph(80, seed)
    bb = tiny_backbone(name, time_scale=10.0)
    model = CPDGModel(bb, g.num_nodes, seed=seed, dtype=np.float64)
    plan = precompute_sample_plan(g, SamplerConfig(eta=3, epsilon=2, depth=2, seed=seed))
    lc = LossConfig(beta=beta, ablation=True)
    # fold a first batch so the checked batch differentiates through a memory update
    first = np.arange(0, 30)
    view = model.encoder.begin_batch(g)
    model.encoder.commit(view, g.src[first], g.dst[first], g.ts[first])
    ords = np.arange(30, 60)
    bplan = plan.select(np.nonzero((plan.ordinals >= 30) & (plan.ordinals < 60))[0])

    def f():
        res, _ = batch_objective(model, g, ords, bplan, lc, seed)
        return res.loss

    return grad_check(f, dict(model.store), tol=1e-4, max_entries=12, rng=np.random.default_rng(seed))


@pytest.mark.parametrize("name", ["jodie", "dyrep", "tgn"])
def test_full_loss_gradient(name):
    rep = full_loss_check(name)
    assert rep.passed, rep


def run(g, epochs=2, seed=0, beta=0.5, ablation=False, checkpoints=4, log_path=None, name="tgn"):
    return pretrain(g, tiny_backbone(name), SamplerConfig(eta=3, epsilon=2, depth=2, seed=seed),
                    LossConfig(beta=beta, ablation=ablation),
                    PretrainConfig(epochs=epochs, batch_size=40, lr=1e-2, checkpoints=checkpoints, seed=seed),
                    log_path=log_path, dtype=np.float64)


def test_pretrain_is_deterministic():
    g = small_graph()
    a, b = run(g), run(g)
    assert a.params.keys() == b.params.keys()
    for k in a.params:
        assert a.params[k].tobytes() == b.params[k].tobytes()
    assert [e["l_pre"] for e in a.log] == [e["l_pre"] for e in b.log]
    assert a.memory.equals(b.memory)


def test_pretrain_reduces_loss():
    g = small_graph(400)
    res = pretrain(g, tiny_backbone(), SamplerConfig(eta=3, epsilon=2, depth=2),
                   LossConfig(), PretrainConfig(epochs=6, batch_size=50, lr=1e-2, checkpoints=2),
                   dtype=np.float64)
    means = epoch_means(res.log)
    assert means[-1] < means[0]


def test_checkpoints_saved_and_reloaded(tmp_path):
    g = small_graph()
    res = run(g, epochs=2, checkpoints=10)
    seq = res.checkpoints
    assert len(seq) == 10 and seq.schedule == checkpoint_schedule(10, 10)
    seq.save(tmp_path)
    assert len(list(tmp_path.glob("*.cmem"))) == 10
    back = CheckpointSequence.load(tmp_path)
    assert back.schedule == seq.schedule and back.times == seq.times
    assert all(x.equals(y) for x, y in zip(back.checkpoints, seq.checkpoints))
    assert back.stacked().shape == (10, g.num_nodes, 4)


def test_too_many_checkpoints_rejected():
    with pytest.raises(ValueError):
        run(small_graph(), epochs=1, checkpoints=20)


@pytest.mark.parametrize("beta,key,other", [(0.0, "l_eta", "l_eps"), (1.0, "l_eps", "l_eta")])
def test_ablation_endpoints_log_both_terms(beta, key, other):
    res = run(small_graph(), epochs=1, beta=beta, ablation=True, checkpoints=1)
    for e in res.log:
        assert math.isclose(e["l_pre"], e[key] + e["l_tlp"], rel_tol=1e-12, abs_tol=1e-12)
        assert other in e and np.isfinite(e[other])


def test_log_file_matches_log(tmp_path):
    res = run(small_graph(), epochs=1, checkpoints=1, log_path=tmp_path / "log.jsonl")
    lines = [json.loads(x) for x in (tmp_path / "log.jsonl").read_text().splitlines()]
    assert len(lines) == len(res.log)
    assert {"l_eta", "l_eps", "l_tlp", "l_pre", "skipped_anchors", "wall_time"} <= set(lines[0])


def test_non_finite_loss_reports_batch(monkeypatch):
    import sys

    P = sys.modules["cpdg.pretrain"]

    def boom(*a, **k):
        raise FloatingPointError("tanh produced non-finite values")

    monkeypatch.setattr(P, "batch_objective", boom)
    with pytest.raises(TrainingError, match="epoch 0 batch 0"):
        run(small_graph(), epochs=1, checkpoints=1)


def test_skipped_anchors_counted():
    res = run(small_graph(), epochs=1, checkpoints=1)
    # the earliest events have no history, so some anchors must be skipped
    assert res.log[0]["skipped_anchors"] > 0
    assert all(np.isfinite(e["l_pre"]) for e in res.log)


def test_backward_reaches_every_parameter():
    g = small_graph(80)
    model = CPDGModel(tiny_backbone(time_scale=10.0), g.num_nodes, seed=0, dtype=np.float64)
    plan = precompute_sample_plan(g, SamplerConfig(eta=3, epsilon=2, depth=2))
    ords = np.arange(40, 80)
    view = model.encoder.begin_batch(g)
    model.encoder.commit(view, g.src[:40], g.dst[:40], g.ts[:40])
    bplan = plan.select(np.nonzero(plan.ordinals >= 40)[0])
    model.store.zero_grad()
    with Tape() as tape:
        res, _ = batch_objective(model, g, ords, bplan, LossConfig(), 0)
    tape.backward(res.loss)
    for name, p in model.store.items():
        assert p.grad is not None and np.isfinite(p.grad).all(), name
    assert any(np.abs(p.grad).sum() > 0 for p in model.store.values())
