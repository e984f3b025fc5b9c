import numpy as np
import pytest

from cpdg import tensor as T
from cpdg.dgnn import (
    DGNN, BackboneConfig, MemoryStore, OutOfOrderError, aggregate_messages, load_memory, preset, save_memory,
)
from cpdg.graph import Event, GeneratorConfig, TemporalGraph, generate_synthetic
from cpdg.tensor import Tensor, grad_check


def small_graph(n_events=30, seed=0):
    return generate_synthetic(GeneratorConfig(num_users=6, num_items=6, num_events=n_events, repeat_prob=0.3), seed)


def test_presets_match_backbone_table():
    assert (preset("jodie").embed_fn, preset("jodie").msg_fn, preset("jodie").agg_fn, preset("jodie").mem_fn) == \
        ("time-projection", "identity", "none", "rnn")
    d = preset("dyrep")
    assert (d.embed_fn, d.msg_fn, d.agg_fn, d.mem_fn) == ("identity", "attention", "none", "rnn")
    t = preset("tgn")
    assert (t.embed_fn, t.msg_fn, t.agg_fn, t.mem_fn) == ("attention", "identity", "last-time", "gru")
    with pytest.raises(ValueError):
        preset("gat")
    with pytest.raises(ValueError):
        BackboneConfig(agg_fn="max")


def test_time_encoding():
    enc = DGNN(BackboneConfig(time_dim=6, time_scale=1.0), 3)
    assert np.allclose(enc.encode_time([0.0]).data, 1.0)
    phi = enc.encode_time(np.linspace(0, 1e4, 200)).data
    assert phi.shape == (200, 6) and np.all(np.abs(phi) <= 1.0)
    with pytest.raises(ValueError):
        enc.encode_time([-1.0])


def test_time_encoding_gradient():
    enc = DGNN(BackboneConfig(time_dim=5, time_scale=3.0), 3)
    dt = np.array([0.0, 0.7, 2.5, 9.0])
    w = np.random.default_rng(0).normal(size=(4, 5))
    rep = grad_check(lambda: T.sum_(T.mul(enc.encode_time(dt), w)),
                     {"freq": enc.time_freq, "phase": enc.time_phase}, tol=1e-6)
    assert rep.passed, rep


def test_identity_message_of_zero_memory():
    d, dt = 4, 3
    enc = DGNN(BackboneConfig(memory_dim=d, time_dim=dt, msg_fn="identity", node_embedding=False, time_scale=1.0), 3)
    mem = MemoryStore(3, d)
    m = enc.compute_message(0, 1, 0.0, mem).data[0]
    assert m.shape == (2 * d + dt,)
    assert np.array_equal(m, np.concatenate([np.zeros(2 * d), np.ones(dt)]))


def test_mlp_message_matches_manual_arithmetic():
    d, dt = 3, 2
    cfg = BackboneConfig(memory_dim=d, time_dim=dt, msg_fn="mlp", msg_dim=5, node_embedding=False, time_scale=1.0)
    enc = DGNN(cfg, 4, seed=3)
    mem = MemoryStore(4, d)
    rng = np.random.default_rng(1)
    mem.states[:] = rng.normal(size=(4, d))
    mem.last_update[:] = [0.0, 1.0, 0.5, 0.0]
    got = enc.compute_message(1, 2, 3.0, mem).data[0]
    p = {k: v.data for k, v in enc.store.items()}
    phi = np.cos(p["time.freq"] * 2.0 + p["time.phase"])
    raw = np.concatenate([mem.states[1], mem.states[2], phi])
    hidden = np.maximum(raw @ p["msg.fc1.w"] + p["msg.fc1.b"], 0)
    want = hidden @ p["msg.fc2.w"] + p["msg.fc2.b"]
    assert np.allclose(got, want, atol=1e-12)


def test_message_out_of_order():
    enc = DGNN(BackboneConfig(time_scale=1.0), 3)
    mem = MemoryStore(3, enc.cfg.memory_dim)
    mem.last_update[0] = 5.0
    with pytest.raises(OutOfOrderError):
        enc.compute_message(0, 1, 4.0, mem)
    with pytest.raises(OutOfOrderError):
        enc.update_memory(0, np.zeros(enc.cfg.message_dim), 4.0, mem)


def test_aggregators():
    m1, m2 = np.array([1.0, 2.0]), np.array([3.0, -1.0])
    assert np.array_equal(aggregate_messages([(m1, 1), (m2, 5)], "last-time"), m2)
    assert np.array_equal(aggregate_messages([(m1, 5), (m2, 5)], "last-time"), m2)
    assert np.array_equal(aggregate_messages([(m1, 1), (m1, 2)], "mean"), m1)
    assert np.array_equal(aggregate_messages([(m1, 1), (-m1, 2)], "mean"), np.zeros(2))
    with pytest.raises(ValueError):
        aggregate_messages([], "mean")


def test_gru_update_of_zeros_stays_zero():
    cfg = BackboneConfig(memory_dim=4, time_dim=2, mem_fn="gru", time_scale=1.0)
    enc = DGNN(cfg, 3)
    mem = MemoryStore(3, 4)
    mem.states[2] = 7.0
    before = mem.states.copy()
    row = enc.update_memory(0, np.zeros(cfg.message_dim), 1.0, mem)
    assert np.array_equal(row, np.zeros(4))
    assert mem.last_update[0] == 1.0
    assert np.array_equal(mem.states[1:], before[1:])


def test_sequential_updates_match_manual_replay():
    cfg = BackboneConfig(memory_dim=3, time_dim=2, mem_fn="rnn", time_scale=1.0)
    enc = DGNN(cfg, 2, seed=5)
    mem = MemoryStore(2, 3)
    rng = np.random.default_rng(0)
    msgs = rng.normal(size=(2, cfg.message_dim))
    enc.update_memory(1, msgs[0], 1.0, mem)
    enc.update_memory(1, msgs[1], 2.0, mem)
    p = {k: v.data for k, v in enc.store.items()}
    h = np.zeros(3)
    for m in msgs:
        h = np.tanh(m @ p["mem.w_x"] + h @ p["mem.w_h"] + p["mem.b"])
    assert np.allclose(mem.states[1], h, atol=1e-12)


@pytest.mark.parametrize("name", ["jodie", "dyrep", "tgn"])
def test_batch_touches_only_event_nodes(name):
    g = small_graph(40)
    enc = DGNN(preset(name, memory_dim=4, embed_dim=4, time_dim=3, time_scale=5.0), g.num_nodes, seed=1)
    states = np.random.default_rng(0).normal(size=(g.num_nodes, 4))
    last = np.zeros(g.num_nodes)
    sl = slice(10, 16)
    view = enc.apply_events(g, states, last, g.src[sl], g.dst[sl], g.ts[sl])
    touched = set(g.src[sl]) | set(g.dst[sl])
    for i in range(g.num_nodes):
        if i not in touched:
            assert np.array_equal(view.states.data[i], states[i])
    assert sorted(view.updated.tolist()) == sorted(touched)


@pytest.mark.parametrize("name", ["jodie", "dyrep", "tgn"])
def test_disjoint_batch_equals_one_at_a_time(name):
    g = TemporalGraph.from_events([Event(0, 1, 1.0), Event(2, 3, 1.5), Event(4, 5, 2.0)], num_nodes=6)
    enc = DGNN(preset(name, memory_dim=4, embed_dim=4, time_dim=3, time_scale=1.0), 6, seed=2)
    s0, l0 = np.zeros((6, 4)), np.zeros(6)
    batch = enc.apply_events(g, s0, l0, g.src, g.dst, g.ts)
    s, l = s0, l0
    for k in range(3):
        v = enc.apply_events(g, s, l, g.src[k:k + 1], g.dst[k:k + 1], g.ts[k:k + 1])
        s, l = v.states.data, v.last_update
    assert np.allclose(batch.states.data, s, atol=1e-12)
    assert np.array_equal(batch.last_update, l)


def test_apply_events_out_of_order():
    g = small_graph(10)
    enc = DGNN(preset("tgn", time_scale=1.0), g.num_nodes)
    last = np.full(g.num_nodes, 1e9)
    with pytest.raises(OutOfOrderError):
        enc.apply_events(g, np.zeros((g.num_nodes, enc.cfg.memory_dim)), last, g.src[:2], g.dst[:2], g.ts[:2])


def test_identity_embedding_with_identity_projection():
    cfg = BackboneConfig(embed_fn="identity", memory_dim=3, embed_dim=3, node_embedding=False, time_scale=1.0)
    enc = DGNN(cfg, 2)
    enc.store["embed_out.w"].data = np.eye(3)
    mem = MemoryStore(2, 3)
    mem.states[1] = [1.0, -2.0, 0.5]
    g = TemporalGraph([], [], [], num_nodes=2)
    assert np.allclose(enc.embed_node(1, 3.0, g, mem), mem.states[1])


def test_time_projection_at_zero_gap():
    cfg = BackboneConfig(embed_fn="time-projection", memory_dim=3, embed_dim=2, node_embedding=False, time_scale=1.0)
    enc = DGNN(cfg, 2, seed=4)
    mem = MemoryStore(2, 3)
    mem.states[0] = [0.3, 0.1, -0.4]
    mem.last_update[0] = 2.0
    g = TemporalGraph([], [], [], num_nodes=2)
    p = {k: v.data for k, v in enc.store.items()}
    want = mem.states[0] @ p["embed_out.w"] + p["embed_out.b"]
    assert np.allclose(enc.embed_node(0, 2.0, g, mem), want, atol=1e-12)


def test_attention_single_neighbor_weight():
    g = TemporalGraph.from_events([Event(0, 1, 1.0)], num_nodes=3)
    enc = DGNN(preset("tgn", memory_dim=4, embed_dim=4, time_dim=2, time_scale=1.0), 3)
    view = enc.begin_batch(g)
    _, w = enc.embed(view, g, [0], [2.0], return_weights=True)
    assert w.shape[0] == 1 and w[0, 0] == 1.0 and np.all(w[0, 1:] == 0)


def test_zero_history_embedding_ignores_future():
    g1 = TemporalGraph.from_events([Event(0, 1, 5.0)], num_nodes=3)
    g2 = TemporalGraph.from_events([Event(0, 1, 5.0), Event(0, 2, 6.0)], num_nodes=3)
    enc = DGNN(preset("tgn", memory_dim=4, embed_dim=4, time_dim=2, time_scale=1.0), 3, seed=0)
    mem = MemoryStore(3, 4)
    assert np.array_equal(enc.embed_node(0, 3.0, g1, mem), enc.embed_node(0, 3.0, g2, mem))


def test_memory_file_round_trip(tmp_path):
    mem = MemoryStore(5, 3, dtype=np.float64)
    mem.states[:] = np.random.default_rng(0).normal(size=(5, 3))
    mem.last_update[:] = np.arange(5.0)
    save_memory(mem, tmp_path / "m.cmem", timestamp=42.0)
    assert (tmp_path / "m.cmem").read_bytes()[:4] == b"CMEM"
    back, ts = load_memory(tmp_path / "m.cmem")
    assert ts == 42.0 and back.equals(mem)


@pytest.mark.parametrize("cfg", [
    preset("jodie", memory_dim=3, embed_dim=3, time_dim=2, time_scale=4.0),
    preset("dyrep", memory_dim=3, embed_dim=3, time_dim=2, time_scale=4.0, embed_degree=3),
    preset("tgn", memory_dim=3, embed_dim=3, time_dim=2, time_scale=4.0, embed_degree=3),
    BackboneConfig(embed_fn="identity", msg_fn="mlp", agg_fn="mean", mem_fn="gru", memory_dim=3, embed_dim=2,
                   time_dim=2, msg_dim=4, time_scale=4.0),
], ids=["jodie", "dyrep", "tgn", "mlp-mean"])
def test_encoder_paths_pass_grad_check(cfg):
    g = small_graph(30, seed=1)
    enc = DGNN(cfg, g.num_nodes, seed=0)
    rng = np.random.default_rng(1)
    states = rng.normal(scale=0.5, size=(g.num_nodes, cfg.memory_dim))
    last = np.zeros(g.num_nodes)
    sl, probe = slice(0, 12), np.arange(12, 20)
    w = rng.normal(size=(2 * len(probe), cfg.embed_dim))

    def f():
        view = enc.apply_events(g, states, last, g.src[sl], g.dst[sl], g.ts[sl])
        nodes = np.concatenate([g.src[probe], g.dst[probe]])
        z = enc.embed(view, g, nodes, np.tile(g.ts[probe], 2))
        return T.sum_(T.mul(z, w))

    rep = grad_check(f, dict(enc.store), tol=1e-4, max_entries=25)
    assert rep.passed, rep
