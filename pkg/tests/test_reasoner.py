import numpy as np
import pytest

from algomimic import tensor as T
from algomimic import teachers
from algomimic.graphs import Graph, GraphFamily, generate, permute
from algomimic.reasoner import (
    CheckpointError,
    GraphStructure,
    ReasonerConfig,
    ReasonerParams,
    SoftHintStep,
    decode,
    encode,
    init_reasoner_params,
    load_checkpoint,
    load_tensor_file,
    params_digest,
    parameter_shapes,
    process,
    rollout,
    save_checkpoint,
    save_tensor_file,
    step_model,
)
from algomimic.rng import substream
from algomimic.teachers import AbstractInput, HintStep, Trace, init_step
from algomimic.tensor import NumericsError, Tensor

from oracles import assert_grads_close, finite_difference


def small_graph() -> Graph:
    edges = np.array([[0, 1], [0, 2], [1, 2], [2, 3], [3, 4], [1, 4]])
    weights = np.array([0.5, 0.9, 0.3, 0.4, 1.0, 0.8])
    return Graph(5, edges, weights)


def small_input() -> AbstractInput:
    return AbstractInput(graph=small_graph(), source=0)


def make_params(hidden=6, msg_hidden=7, seed=11) -> ReasonerParams:
    cfg = ReasonerConfig(hidden=hidden, msg_hidden=msg_hidden)
    return init_reasoner_params(cfg, substream(seed, "params"))


# -- structure cache ------------------------------------------------------------


def test_structure_cache_layout():
    x = small_input()
    s = GraphStructure.build(x)
    assert s.n == 5 and s.source == 0
    assert s.ncols == 3  # node 2 and node 4 both have two incoming edges
    assert s.cand_mask[:, 0].all()
    assert (s.cand_src[:, 0] == np.arange(5)).all()
    # edge (1, 2) lands after (0, 2) because edges are sorted by source
    assert s.slot_of_edge[(0, 2)] == 1 and s.slot_of_edge[(1, 2)] == 2
    assert s.cand_src[2, 1] == 0 and s.cand_src[2, 2] == 1
    assert not s.cand_mask[0, 1]  # node 0 has no incoming edges
    assert s.scale == pytest.approx(1.0 * 5)
    assert (s.edge_slot >= 1).all()


def test_target_columns_roundtrip():
    x = small_input()
    s = GraphStructure.build(x)
    pred = np.array([0, 0, 1, 2, 1], dtype=np.int64)
    cols = s.target_columns(pred)
    assert cols[0] == 0  # self
    got = s.cand_src[np.arange(5), cols]
    assert (got == pred).all()


def test_target_columns_rejects_non_edge_parent():
    s = GraphStructure.build(small_input())
    bad = np.array([0, 3, 1, 2, 1], dtype=np.int64)  # (3, 1) is not an edge
    with pytest.raises(NumericsError, match="predecessor 3 of node 1"):
        s.target_columns(bad)


# -- parameters -----------------------------------------------------------------


def test_init_shapes_and_determinism():
    cfg = ReasonerConfig(hidden=6, msg_hidden=7)
    a = init_reasoner_params(cfg, substream(3, "params"))
    b = init_reasoner_params(cfg, substream(3, "params"))
    shapes = parameter_shapes(cfg)
    assert set(a.tensors) == set(shapes)
    for name, t in a.tensors.items():
        assert t.data.shape == shapes[name]
        assert np.array_equal(t.data, b.tensors[name].data)
    assert np.all(a["encoder.node_b"].data == 0.0)
    assert np.all(a["processor.default_msg"].data == 0.0)
    assert a.subset("decoder.").keys() == {
        k for k in shapes if k.startswith("decoder.")
    }


# -- encode / process / decode --------------------------------------------------


def test_encode_is_local_per_node():
    params = make_params()
    x = small_input()
    s = GraphStructure.build(x)
    h0 = init_step(x)
    h1 = h0.copy()
    h1.dist[3] = 2.5
    h1.reached[3] = True
    za = encode(params, s, h0).z.data
    zb = encode(params, s, h1).z.data
    assert np.array_equal(za[np.arange(5) != 3], zb[np.arange(5) != 3])
    assert not np.array_equal(za[3], zb[3])


def test_step_ignores_far_edges():
    # chain 0->1->2->3->4: node 4's decoded fields do not depend on edge (0, 1)
    params = make_params()
    edges = np.array([[0, 1], [1, 2], [2, 3], [3, 4]])
    wa = np.array([0.5, 0.6, 0.7, 1.0])
    wb = np.array([0.4, 0.6, 0.7, 1.0])  # max weight unchanged, so same scale
    xa = AbstractInput(Graph(5, edges, wa), 0)
    xb = AbstractInput(Graph(5, edges, wb), 0)
    hint = init_step(xa)
    sa = step_model(params, GraphStructure.build(xa), hint)
    sb = step_model(params, GraphStructure.build(xb), hint)
    assert np.array_equal(sa.dist.data[3:], sb.dist.data[3:])
    assert np.array_equal(sa.reached_logits.data[4], sb.reached_logits.data[4])
    assert np.array_equal(sa.pred_scores.data[4], sb.pred_scores.data[4])
    assert not np.array_equal(sa.dist.data[1], sb.dist.data[1])


def test_zero_edge_graph_uses_default_message():
    params = make_params()
    x = AbstractInput(Graph(3, np.zeros((0, 2), dtype=np.int64), np.zeros(0)), 1)
    s = GraphStructure.build(x)
    state = encode(params, s, init_step(x))
    out = process(params, s, state)

    p = params.tensors
    u_in = np.concatenate(
        [state.z.data, np.tile(p["processor.default_msg"].data, (3, 1))], axis=1
    )
    hidden = np.maximum(u_in @ p["processor.upd_w1"].data + p["processor.upd_b1"].data, 0.0)
    want = hidden @ p["processor.upd_w2"].data + p["processor.upd_b2"].data
    assert np.array_equal(out.z.data, want)


def test_zero_edge_decode_puts_all_mass_on_self():
    params = make_params()
    x = AbstractInput(Graph(3, np.zeros((0, 2), dtype=np.int64), np.zeros(0)), 0)
    s = GraphStructure.build(x)
    soft = step_model(params, s, init_step(x))
    dist = soft.pred_distribution()
    assert dist.shape == (3, 1)
    assert np.array_equal(dist, np.ones((3, 1)))
    hard = soft.harden()
    assert (hard.pred == np.arange(3)).all()


def test_harden_thresholds_and_sentinels():
    x = small_input()
    s = GraphStructure.build(x)
    n = s.n
    dist = Tensor(np.full((n, 1), 0.4))
    reached = Tensor(np.array([[3.0], [0.0], [-2.0], [1e-9], [5.0]]))
    reach = Tensor(np.zeros((n, 1)))
    scores = Tensor(np.zeros((n, s.ncols)))
    soft = SoftHintStep(dist, reached, reach, scores, s)
    hard = soft.harden()
    # strictly-above-0.5 probability, so a 0.0 logit stays unreached
    assert hard.reached.tolist() == [True, False, False, True, True]
    assert not hard.reach.any()
    # unreached nodes keep the 0.0 sentinel; reached nodes destandardize
    assert hard.dist[1] == 0.0 and hard.dist[2] == 0.0
    assert hard.dist[0] == pytest.approx(0.4 * s.scale)
    # tied scores fall back to the lowest candidate column (self first)
    assert (hard.pred == np.arange(n)).all()


def test_step_is_deterministic():
    params = make_params()
    x = small_input()
    s = GraphStructure.build(x)
    hint = teachers.bellman_ford_trace(x).steps[1]
    a = step_model(params, s, hint)
    b = step_model(params, s, hint)
    assert np.array_equal(a.dist.data, b.dist.data)
    assert np.array_equal(a.pred_scores.data, b.pred_scores.data)
    assert a.harden() == b.harden()


# -- gradients ------------------------------------------------------------------


def full_step_loss(params: ReasonerParams, s: GraphStructure, hint, target) -> Tensor:
    soft = step_model(params, s, hint)
    w = Tensor(target.reached.astype(np.float64).reshape(-1, 1))
    tgt = Tensor(target.dist.reshape(-1, 1) / s.scale)
    diff = T.add(soft.dist, T.neg(tgt))
    mse = T.reduce_sum(T.mul(T.mul(diff, diff), w))
    ce = T.reduce_sum(
        T.softmax_cross_entropy_rows(
            soft.pred_scores, s.target_columns(target.pred), s.cand_mask
        )
    )
    bce_reached = T.reduce_sum(
        T.bce_with_logits(soft.reached_logits, target.reached.astype(np.float64).reshape(-1, 1))
    )
    bce_reach = T.reduce_sum(
        T.bce_with_logits(soft.reach_logits, target.reach.astype(np.float64).reshape(-1, 1))
    )
    return T.add(T.add(mse, ce), T.add(bce_reached, bce_reach))


def test_full_step_gradients_match_finite_differences():
    params = make_params(hidden=5, msg_hidden=6, seed=7)
    x = small_input()
    s = GraphStructure.build(x)
    trace = teachers.bellman_ford_trace(x)
    hint, target = trace.steps[1], trace.steps[2]

    names = sorted(params.tensors)
    tensors = [params.tensors[k] for k in names]

    def build():
        return full_step_loss(params, s, hint, target)

    for t in tensors:
        t.grad = None
    build().backward()
    analytic = [t.grad.copy() for t in tensors]
    numeric = finite_difference(build, tensors)
    for name, a, n in zip(names, analytic, numeric):
        assert_grads_close(a, n, rtol=2e-4, atol=1e-6)


# -- permutation equivariance ---------------------------------------------------


def relabelled_case(seed):
    rng = substream(seed, "equivariance")
    fam = GraphFamily("erdos_renyi", p=0.5)
    g = generate(fam, 9, rng)
    perm = rng.permutation(9)
    x = AbstractInput(g, 2)
    xp = AbstractInput(permute(g, perm), int(perm[2]))
    return x, xp, perm


def distribution_maps(soft: SoftHintStep) -> list[dict]:
    probs = soft.pred_distribution()
    s = soft.structure
    return [
        {int(s.cand_src[j, c]): probs[j, c] for c in range(s.ncols) if s.cand_mask[j, c]}
        for j in range(s.n)
    ]


def test_step_commutes_with_relabelling():
    params = make_params(hidden=8, msg_hidden=8, seed=5)
    for seed in range(20):
        x, xp, perm = relabelled_case(seed)
        hint = teachers.bellman_ford_trace(x).steps[1]
        hint_p = teachers.permute_hint(hint, perm)
        a = step_model(params, GraphStructure.build(x), hint)
        b = step_model(params, GraphStructure.build(xp), hint_p)
        # node-aligned outputs are bit-identical under relabelling
        assert np.array_equal(a.dist.data, b.dist.data[perm])
        assert np.array_equal(a.reached_logits.data, b.reached_logits.data[perm])
        assert np.array_equal(a.reach_logits.data, b.reach_logits.data[perm])
        maps_a = distribution_maps(a)
        maps_b = distribution_maps(b)
        for j in range(x.graph.n):
            relabelled = {int(perm[i]): v for i, v in maps_a[j].items()}
            assert relabelled == maps_b[int(perm[j])]
        ha, hb = a.harden(), b.harden()
        assert np.array_equal(ha.dist, hb.dist[perm])
        assert np.array_equal(ha.reached, hb.reached[perm])
        assert (perm[ha.pred] == hb.pred[perm]).all()


# -- rollout --------------------------------------------------------------------


def test_rollout_with_teacher_step_reproduces_teacher_trace():
    for seed in range(30):
        rng = substream(seed, "rollout")
        g = generate(GraphFamily("erdos_renyi", p=0.4), 8, rng)
        x = AbstractInput(g, 0)
        incoming = teachers._in_edges(g)
        want = teachers.bellman_ford_trace(x)
        got = rollout(None, x, step_fn=lambda h: teachers._relax_sweep(x, h, incoming))
        assert len(got.steps) == len(want.steps)
        assert all(a == b for a, b in zip(got.steps, want.steps))


def test_rollout_stops_early_at_fixed_point():
    params = make_params()
    # star graph: everything is one hop from the source, fixed point after 1 sweep
    edges = np.array([[0, 1], [0, 2], [0, 3], [0, 4], [0, 5]])
    g = Graph(6, edges, np.full(5, 0.5))
    x = AbstractInput(g, 0)
    incoming = teachers._in_edges(g)
    got = rollout(params, x, step_fn=lambda h: teachers._relax_sweep(x, h, incoming))
    assert len(got.steps) == 3  # init, solve, confirming duplicate
    assert got.steps[-1] == got.steps[-2]


def test_rollout_budget_counts_init():
    params = make_params(hidden=4, msg_hidden=4)
    x = small_input()
    tr = rollout(params, x, step_budget=2)
    assert len(tr.steps) == 2
    with pytest.raises(ValueError):
        rollout(params, x, step_budget=0)


def test_rollout_reports_failing_step():
    x = small_input()
    calls = {"n": 0}

    def bad_step(h):
        calls["n"] += 1
        if calls["n"] == 2:
            raise NumericsError("non-finite values in step output")
        nxt = h.copy()
        nxt.dist[calls["n"] % x.graph.n] += 1.0
        return nxt

    with pytest.raises(NumericsError, match="rollout step 2"):
        rollout(None, x, step_fn=bad_step)


def test_rollout_runs_the_model_end_to_end():
    params = make_params(hidden=4, msg_hidden=4)
    x = small_input()
    tr = rollout(params, x)
    assert 1 <= len(tr.steps) <= x.graph.n
    for s in tr.steps:
        assert s.dist.shape == (5,) and s.pred.dtype == np.int64


# -- checkpoints ----------------------------------------------------------------


def test_checkpoint_roundtrip_is_byte_exact(tmp_path):
    params = make_params(hidden=16, msg_hidden=12, seed=21)
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, params)
    loaded = load_checkpoint(path)
    assert loaded.config == params.config
    for name, t in params.tensors.items():
        assert np.array_equal(loaded.tensors[name].data, t.data)
        assert loaded.tensors[name].data.dtype == np.float64
    again = tmp_path / "model2.ckpt"
    save_checkpoint(again, loaded)
    assert path.read_bytes() == again.read_bytes()
    assert params_digest(params.tensors) == params_digest(loaded.tensors)


def test_params_digest_scopes_by_prefix():
    a = make_params(seed=1)
    b = make_params(seed=1)
    b.tensors["decoder.dist_w"].data[0, 0] += 1.0
    assert params_digest(a.tensors, "processor.") == params_digest(b.tensors, "processor.")
    assert params_digest(a.tensors, "decoder.") != params_digest(b.tensors, "decoder.")


def test_checkpoint_rejects_bad_files(tmp_path):
    missing = tmp_path / "nope.ckpt"
    with pytest.raises(CheckpointError, match="not found"):
        load_checkpoint(missing)

    junk = tmp_path / "junk.ckpt"
    junk.write_bytes(b"PNG!" + b"\x00" * 64)
    with pytest.raises(CheckpointError, match="bad magic"):
        load_checkpoint(junk)

    params = make_params(hidden=4, msg_hidden=4)
    good = tmp_path / "good.ckpt"
    save_checkpoint(good, params)
    clipped = tmp_path / "clipped.ckpt"
    clipped.write_bytes(good.read_bytes()[:-9])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(clipped)

    wrong_version = bytearray(good.read_bytes())
    wrong_version[4] = 99
    versioned = tmp_path / "versioned.ckpt"
    versioned.write_bytes(bytes(wrong_version))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(versioned)


def test_checkpoint_names_mismatched_tensors(tmp_path):
    params = make_params(hidden=4, msg_hidden=4)
    header = {"kind": "reasoner", "config": params.config.to_dict()}

    dropped = dict(params.tensors)
    del dropped["decoder.dist_w"]
    p1 = tmp_path / "missing.ckpt"
    save_tensor_file(p1, header, dropped)
    with pytest.raises(CheckpointError, match="decoder.dist_w"):
        load_checkpoint(p1)

    reshaped = dict(params.tensors)
    reshaped["decoder.dist_w"] = Tensor(np.zeros((4, 2)))
    p2 = tmp_path / "reshaped.ckpt"
    save_tensor_file(p2, header, reshaped)
    with pytest.raises(CheckpointError, match="decoder.dist_w"):
        load_checkpoint(p2)


def test_tensor_file_carries_arbitrary_payloads(tmp_path):
    path = tmp_path / "bundle.ckpt"
    tensors = {
        "a.w": Tensor(np.arange(6.0).reshape(2, 3)),
        "b": Tensor(np.array(3.5)),
    }
    save_tensor_file(path, {"kind": "bundle", "note": 1}, tensors)
    config, arrays = load_tensor_file(path)
    assert config == {"kind": "bundle", "note": 1}
    assert np.array_equal(arrays["a.w"], tensors["a.w"].data)
    assert arrays["b"].shape == () and arrays["b"] == 3.5
