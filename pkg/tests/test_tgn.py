import numpy as np
import pytest
from conftest import cyclic_sequence, make_builder, random_unit_rows

from log_ctdg.ctdg import EDGE, GraphEvent, build_events
from log_ctdg.detector import _TemplateRef
from log_ctdg.errors import ContractViolation
from log_ctdg.nn_core import ParamStore
from log_ctdg.tgn import (
    TGN,
    MemoryState,
    Message,
    add_node,
    aggregate_messages,
    init_memory,
)

DIM = 4
FEAT = 5


def _templates(n):
    return [_TemplateRef(i) for i in range(n)]


def _tgn(n_nodes=4, seed=0, embedding="tga", aggregator="most_recent", capacity=3):
    rng = np.random.default_rng(seed)
    tgn = TGN(
        ParamStore(),
        memory_dim=DIM,
        feature_dim=FEAT,
        rng=rng,
        time_dim=3,
        heads=2,
        neighbors=capacity,
        embedding=embedding,
        aggregator=aggregator,
    )
    tgn.memory = init_memory(
        _templates(n_nodes), random_unit_rows(n_nodes, DIM, seed), FEAT, capacity=capacity
    )
    return tgn, rng


def _edge(src, dst, t, seq, rng, hop=1):
    return GraphEvent(EDGE, src, dst, t, hop, seq, interval=1.0, features=rng.standard_normal(FEAT))


def test_init_memory_uses_semantic_vectors():
    vectors = random_unit_rows(3, DIM)
    mem = init_memory(_templates(3), vectors, FEAT)
    assert len(mem) == 3
    np.testing.assert_array_equal(mem.states, vectors)
    assert not mem.last_update.any()

    zero = init_memory(_templates(3), vectors, FEAT, semantic_init=False)
    assert not zero.states.any()
    add_node(vectors[0], zero)
    assert not zero.states.any()


def test_init_memory_from_mapping_and_errors():
    vectors = {0: np.ones(DIM), 1: np.zeros(DIM)}
    mem = init_memory(_templates(2), vectors, FEAT)
    np.testing.assert_array_equal(mem.states[0], np.ones(DIM))
    with pytest.raises(ContractViolation):
        init_memory([_TemplateRef(1)], vectors, FEAT)
    with pytest.raises(ContractViolation):
        init_memory(_templates(3), vectors, FEAT)
    empty = init_memory([], np.zeros((0, DIM)), FEAT)
    assert empty.size == 0
    assert empty.dim == DIM
    with pytest.raises(ContractViolation):
        init_memory([], {}, FEAT)


def test_add_node_grows_memory():
    mem = init_memory(_templates(2), random_unit_rows(2, DIM), FEAT)
    mem.current_time = 42.0
    vec = random_unit_rows(1, DIM, seed=5)[0]
    assert add_node(vec, mem) == 2
    assert mem.size == 3
    np.testing.assert_array_equal(mem.states[2], vec)
    assert mem.last_update[2] == 42.0
    assert mem.nb_len[2] == 0
    with pytest.raises(ContractViolation):
        mem.add_node(np.ones(DIM + 1))


def test_check_nodes():
    mem = init_memory(_templates(2), random_unit_rows(2, DIM), FEAT)
    np.testing.assert_array_equal(mem.check_nodes([1, 0]), [1, 0])
    with pytest.raises(ContractViolation, match="node 2"):
        mem.check_nodes([0, 2])


def test_neighbor_ring_buffer_keeps_most_recent():
    mem = MemoryState(DIM, 1, capacity=3)
    mem.add_node(np.zeros(DIM))
    for i in range(5):
        mem.append_neighbor(0, i, np.array([float(i)]), float(i))
    nbs = mem.neighbors(0)
    assert [n[0] for n in nbs] == [2, 3, 4]
    assert [n[2] for n in nbs] == [2.0, 3.0, 4.0]
    assert [float(n[1][0]) for n in nbs] == [2.0, 3.0, 4.0]


def test_memory_save_load(tmp_path):
    tgn, rng = _tgn()
    tgn.process_events([_edge(0, 1, 1.0, 1, rng), _edge(1, 2, 2.0, 2, rng)])
    path = str(tmp_path / "memory.npz")
    tgn.memory.save(path)
    loaded = MemoryState.load(path)
    for name in ("states", "last_update", "nb_ids", "nb_times", "nb_feats", "nb_len"):
        np.testing.assert_array_equal(getattr(loaded, name), getattr(tgn.memory, name))
    assert loaded.current_time == 2.0
    assert loaded.capacity == 3
    assert loaded.semantic_init


def test_memory_copy_is_independent():
    tgn, rng = _tgn()
    snapshot = tgn.memory.copy()
    tgn.process_events([_edge(0, 1, 1.0, 1, rng)])
    assert not np.array_equal(snapshot.states, tgn.memory.states)
    assert snapshot.nb_len.sum() == 0


def _msg(node, t, seq, value):
    return Message(node, np.full(2, float(value)), t, seq)


def test_aggregate_most_recent():
    pending = [_msg(0, 1.0, 5, 1), _msg(0, 2.0, 3, 2), _msg(0, 2.0, 4, 3), _msg(0, 0.5, 9, 4)]
    assert aggregate_messages(pending).payload[0] == 3.0
    # ties on (timestamp, seq_index) keep the later message
    tie = [_msg(0, 1.0, 1, 1), _msg(0, 1.0, 1, 2)]
    assert aggregate_messages(tie).payload[0] == 2.0


def test_aggregate_mean():
    pending = [_msg(0, 1.0, 1, 1), _msg(0, 3.0, 2, 5)]
    out = aggregate_messages(pending, "mean")
    np.testing.assert_array_equal(out.payload, [3.0, 3.0])
    assert out.timestamp == 3.0


def test_aggregate_errors():
    with pytest.raises(ContractViolation):
        aggregate_messages([])
    with pytest.raises(ContractViolation):
        aggregate_messages([_msg(0, 1.0, 1, 1), _msg(1, 1.0, 1, 1)])
    with pytest.raises(ValueError):
        aggregate_messages([_msg(0, 1.0, 1, 1)], "max")


def test_tgn_rejects_unknown_modes():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        TGN(ParamStore(), DIM, FEAT, rng, embedding="gat")
    with pytest.raises(ValueError):
        TGN(ParamStore(), DIM, FEAT, rng, aggregator="sum")


def test_compute_message_layout():
    tgn, rng = _tgn()
    tgn.memory.last_update[:] = [0.5, 1.0, 0.0, 0.0]
    event = _edge(0, 1, 3.0, 7, rng)
    to_dst, to_src = tgn.compute_message(event)
    assert (to_dst.node, to_src.node) == (1, 0)
    assert to_dst.incoming and not to_src.incoming
    phi, _ = tgn.time.forward(np.array([2.0]))
    mem = tgn.memory.states
    np.testing.assert_allclose(
        to_dst.payload, np.concatenate([mem[1], mem[0], phi[0], event.features])
    )
    assert to_dst.payload.shape == (tgn.message_dim,)
    assert to_dst.seq_index == 7


def test_process_events_matches_per_message_updates():
    tgn, rng = _tgn()
    twin, _ = _tgn()
    batch = [_edge(0, 1, 1.0, 1, rng), _edge(2, 3, 1.5, 2, rng)]

    tgn.process_events(batch)

    messages = [m for event in batch for m in twin.compute_message(event)]
    for message in messages:
        twin.update_memory(message.node, message)
    np.testing.assert_allclose(tgn.memory.states, twin.memory.states, atol=1e-12)
    np.testing.assert_array_equal(tgn.memory.last_update, [1.0, 1.0, 1.5, 1.5])
    np.testing.assert_array_equal(tgn.memory.nb_len, twin.memory.nb_len)
    assert tgn.memory.nb_len.tolist() == [0, 1, 0, 1]


def test_process_events_uses_pre_batch_memory():
    tgn, rng = _tgn()
    before = tgn.memory.copy()
    batch = [_edge(0, 1, 1.0, 1, rng), _edge(1, 2, 2.0, 2, rng)]
    tgn.process_events(batch)

    # node 1 keeps only its most recent message, built from the old rows
    ref, _ = _tgn()
    ref.memory = before
    _, to_src = ref.compute_message(batch[1])
    h, _ = ref.gru.forward(to_src.payload[None, :], before.states[1][None, :])
    np.testing.assert_allclose(tgn.memory.states[1], h[0], atol=1e-12)
    # every incoming edge lands in the ring buffer
    assert tgn.memory.nb_len.tolist() == [0, 1, 1, 0]


def test_process_events_mean_aggregator():
    tgn, rng = _tgn(aggregator="mean")
    batch = [_edge(0, 1, 1.0, 1, rng), _edge(2, 1, 2.0, 2, rng)]
    ref, _ = _tgn()
    msgs = [m for e in batch for m in ref.compute_message(e) if m.node == 1]
    x = np.mean([m.payload for m in msgs], axis=0)
    h, _ = ref.gru.forward(x[None, :], ref.memory.states[1][None, :])
    tgn.process_events(batch)
    np.testing.assert_allclose(tgn.memory.states[1], h[0], atol=1e-12)
    assert tgn.memory.last_update[1] == 2.0


def test_process_events_unknown_node():
    tgn, rng = _tgn()
    with pytest.raises(ContractViolation):
        tgn.process_events([_edge(0, 9, 1.0, 1, rng)])
    assert tgn.process_events([]) is None


def test_self_loops_refresh_one_node():
    builder = make_builder([0, 1, 2], hop_set=(0,), n_templates=3, dim=DIM)
    events = build_events(cyclic_sequence(3, n_templates=3), builder)
    tgn = TGN(ParamStore(), DIM, builder.width, np.random.default_rng(0), time_dim=3)
    tgn.memory = init_memory(_templates(3), builder.embeddings, builder.width)
    before = tgn.memory.states.copy()
    tgn.process_events(events[:2])
    assert not np.allclose(tgn.memory.states[0], before[0])
    np.testing.assert_array_equal(tgn.memory.states[1:], before[1:])
    assert tgn.memory.neighbors(0)[0][0] == 0


def test_embed_modes():
    tgn, rng = _tgn(embedding="identity")
    z, _ = tgn.embed([2, 0], [5.0, 5.0])
    np.testing.assert_array_equal(z, tgn.memory.states[[2, 0]])

    z, _ = tgn.embed([1], [3.0], mode="time_projection")
    # projection weights start at zero
    np.testing.assert_array_equal(z[0], tgn.memory.states[1])

    z, _ = tgn.embed([0, 1, 2], [1.0, 1.0, 1.0], mode="tga")
    assert z.shape == (3, DIM)
    np.testing.assert_allclose(tgn.embed_node(1, 1.0, mode="tga"), z[1])

    with pytest.raises(ValueError):
        tgn.embed([0], [0.0], mode="lstm")
    with pytest.raises(ContractViolation):
        tgn.embed([7], [0.0])


def test_identity_embedding_gradient_sums_duplicates():
    tgn, _ = _tgn(embedding="identity")
    dz = np.ones((3, DIM))
    _, cache = tgn.embed([1, 1, 3], [0.0, 0.0, 0.0])
    dmem = tgn.embed_backward(dz, cache, {})
    np.testing.assert_array_equal(dmem[1], np.full(DIM, 2.0))
    np.testing.assert_array_equal(dmem[3], np.ones(DIM))
    assert not dmem[[0, 2]].any()


@pytest.mark.parametrize("mode", ["tga", "time_projection"])
@pytest.mark.parametrize("seed", range(5))
def test_embedding_gradient_wrt_memory(mode, seed):
    tgn, rng = _tgn(seed=seed, embedding=mode)
    tgn.store[tgn.proj][...] = rng.standard_normal(DIM) * 0.1
    tgn.process_events([_edge(0, 1, 1.0, 1, rng), _edge(2, 3, 1.5, 2, rng)])
    tgn.process_events([_edge(1, 3, 2.0, 3, rng), _edge(3, 1, 2.5, 4, rng)])
    nodes, times = [1, 3, 0], [3.0, 3.5, 4.0]
    R = rng.standard_normal((3, DIM))
    states = tgn.memory.states

    def loss():
        return float((tgn.embed(nodes, times)[0] * R).sum())

    _, cache = tgn.embed(nodes, times)
    dmem = tgn.embed_backward(R, cache, {})
    numeric = np.zeros_like(states)
    for idx in np.ndindex(*states.shape):
        orig = states[idx]
        states[idx] = orig + 1e-5
        up = loss()
        states[idx] = orig - 1e-5
        down = loss()
        states[idx] = orig
        numeric[idx] = (up - down) / 2e-5
    err = np.linalg.norm(dmem - numeric) / max(np.linalg.norm(dmem) + np.linalg.norm(numeric), 1e-12)
    assert err < 1e-4


def test_memory_update_backward_reaches_gru():
    tgn, rng = _tgn()
    update = tgn.process_events([_edge(0, 1, 1.0, 1, rng)], keep_cache=True)
    nodes, _ = update
    assert nodes.tolist() == [0, 1]
    grads = {}
    tgn.memory_update_backward(np.ones_like(tgn.memory.states), update, grads)
    assert set(grads) == {"tgn.gru.W_x", "tgn.gru.W_h", "tgn.gru.b_x", "tgn.gru.b_h"}
