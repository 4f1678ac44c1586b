import numpy as np
import pytest

from hypersub import kernel as K
from hypersub import model as M
from hypersub.errors import InvalidLabel, ShapeError
from hypersub.hypergraph import SparseMatrix, build_hypergraph, dual, theta

from conftest import random_hypergraph


def toy_model(h, d=4, num_classes=3, num_layers=2, seed=0, **kw):
    rng = np.random.default_rng(seed)
    return M.init_model(h.num_nodes, d, num_layers, num_classes, rng,
                        dtype=np.float64, **kw)


def toy_batch(members, num_classes, rng=None, labels=None):
    n = len(members)
    if labels is None:
        labels = np.zeros((n, num_classes))
        labels[np.arange(n), np.arange(n) % num_classes] = 1.0
    weights = [np.linspace(0.5, 1.5, len(m)) for m in members]
    return M.SubgraphBatch(members=[np.asarray(m) for m in members],
                           weights=weights, labels=labels)


# ------------------------------------------------- reference implementations

def backbone_oracle(h, params):
    """Plain-loop re-derivation of the message passing forward pass."""
    slope = params.leaky_slope
    hn = params.node_embeddings.data.copy()
    d = hn.shape[1]
    he = np.zeros((h.num_edges, d))
    for j, mem in enumerate(h.edge_members):
        he[j] = hn[list(mem)].mean(axis=0)
    per_layer = []
    for lp in params.layers:
        wn, bn = lp.node_weight.data, lp.node_bias.data
        we, be = lp.edge_weight.data, lp.edge_bias.data
        c = lp.context.data[:, 0]
        score = {}
        for j, mem in enumerate(h.edge_members):
            for i in mem:
                joint = (he[j] @ we + be) * (hn[i] @ wn + bn)
                joint = np.where(joint > 0, joint, slope * joint)
                score[(j, i)] = float(joint @ c)
        he_new = np.zeros_like(he)
        a_edge = {}
        for j, mem in enumerate(h.edge_members):
            s = np.array([score[(j, i)] for i in mem])
            a = np.exp(s - s.max())
            a /= a.sum()
            he_new[j] = np.maximum(sum(a[k] * hn[i] for k, i in enumerate(mem)), 0.0)
            a_edge.update({(j, i): a[k] for k, i in enumerate(mem)})
        hn_new = np.zeros_like(hn)
        a_node = {}
        for i, mems in enumerate(h.node_memberships):
            if not mems:
                continue
            s = np.array([score[(j, i)] for j in mems])
            a = np.exp(s - s.max())
            a /= a.sum()
            hn_new[i] = np.maximum(sum(a[k] * he[j] for k, j in enumerate(mems)), 0.0)
            a_node.update({(j, i): a[k] for k, j in enumerate(mems)})
        per_layer.append((score, a_edge, a_node))
        hn, he = hn_new, he_new
    return hn, he, per_layer


def regularizer_oracle(x, t):
    total = 0.0
    for i in range(x.shape[0]):
        for j in range(x.shape[0]):
            total += t[i, j] * float(np.sum((x[i] - x[j]) ** 2))
    return total


# -------------------------------------------------------------- layer pieces

def test_init_edge_states_means():
    h = build_hypergraph([[0], [0, 1, 2]])
    params = toy_model(h, d=3)
    pairs = M.incidence_pairs(h)
    he = M.init_edge_states(pairs, params.node_embeddings).data
    emb = params.node_embeddings.data
    assert np.allclose(he[0], emb[0], atol=1e-12)
    assert np.allclose(he[1], emb[:3].mean(axis=0), atol=1e-12)


def test_dual_attention_scores_hand_value():
    # 1-d states: score = LeakyReLU((w_e*he + b_e) * (w_n*hn + b_n)) * c
    h = build_hypergraph([[0]])
    params = toy_model(h, d=1, num_layers=1)
    lp = params.layers[0]
    lp.node_weight.data[:] = 1.0
    lp.node_bias.data[:] = 0.0
    lp.edge_weight.data[:] = 1.0
    lp.edge_bias.data[:] = 0.0
    lp.context.data[:] = 1.0
    pairs = M.incidence_pairs(h)
    s = M.dual_attention_scores(pairs, K.constant([[2.0]]), K.constant([[3.0]]), lp)
    assert s.data.tolist() == [6.0]
    # negative joint activations pass through the leaky slope
    s = M.dual_attention_scores(pairs, K.constant([[-2.0]]), K.constant([[3.0]]),
                                lp, slope=0.01)
    assert abs(s.data[0] - (-0.06)) <= 1e-12


def test_zero_context_gives_uniform_attention():
    h = build_hypergraph([[0, 1, 2], [1, 2]])
    params = toy_model(h, d=4, num_layers=1)
    params.layers[0].context.data[:] = 0.0
    pairs = M.incidence_pairs(h)
    he0 = M.init_edge_states(pairs, params.node_embeddings)
    scores = M.dual_attention_scores(pairs, params.node_embeddings, he0,
                                     params.layers[0])
    new_he, a_edge = M.edge_update(pairs, scores, params.node_embeddings)
    emb = params.node_embeddings.data
    assert np.allclose(a_edge.data[:3], [1 / 3] * 3, atol=1e-12)
    assert np.allclose(new_he.data[0], np.maximum(emb[:3].mean(axis=0), 0),
                       atol=1e-12)


def test_updates_match_loop_oracle(rng):
    for _ in range(10):
        h = random_hypergraph(rng, max_nodes=8, max_edges=4)
        params = toy_model(h, d=4, num_layers=2, seed=int(rng.integers(1000)))
        pairs = M.incidence_pairs(h)
        x = M.forward_backbone(pairs, params)
        want_hn, want_he, _ = backbone_oracle(h, params)
        assert np.max(np.abs(x.data - want_hn)) <= 1e-9
        trace = M.ForwardTrace()
        M.forward_backbone(pairs, params, trace=trace)
        assert np.max(np.abs(trace.final_edge_states.data - want_he)) <= 1e-9


def test_attention_matches_oracle_per_pair(rng):
    h = random_hypergraph(rng, max_nodes=7, max_edges=3)
    params = toy_model(h, d=3, num_layers=2, seed=5)
    pairs = M.incidence_pairs(h)
    trace = M.ForwardTrace()
    M.forward_backbone(pairs, params, trace=trace)
    _, _, per_layer = backbone_oracle(h, params)
    for tr, (score, a_edge, a_node) in zip(trace.layers, per_layer):
        for p in range(pairs.edge_of_pair.size):
            key = (int(pairs.edge_of_pair[p]), int(pairs.node_of_pair[p]))
            assert abs(tr.scores.data[p] - score[key]) <= 1e-9
            assert abs(tr.edge_attention.data[p] - a_edge[key]) <= 1e-9
            assert abs(tr.node_attention.data[p] - a_node[key]) <= 1e-9


def test_edge_states_not_refreshed_mid_layer():
    # the node update of layer k must pool layer k-1 edge states, so with a
    # single node the new node state equals the OLD edge state, rectified
    h = build_hypergraph([[0]])
    params = toy_model(h, d=3, num_layers=1)
    pairs = M.incidence_pairs(h)
    he0 = M.init_edge_states(pairs, params.node_embeddings)
    scores = M.dual_attention_scores(pairs, params.node_embeddings, he0,
                                     params.layers[0])
    hn1, _ = M.node_update(pairs, scores, he0)
    assert np.allclose(hn1.data[0], np.maximum(he0.data[0], 0.0), atol=1e-12)


def test_zero_membership_node_state_is_zero():
    h = build_hypergraph([[0, 1]], num_nodes=4)
    params = toy_model(h, d=4)
    pairs = M.incidence_pairs(h)
    x = M.forward_backbone(pairs, params)
    assert np.all(x.data[2] == 0.0) and np.all(x.data[3] == 0.0)
    # and they appear in no attention group
    assert all(len(g) > 0 for g in pairs.by_node_nonempty)
    assert pairs.by_node[2] == () and pairs.by_node[3] == ()


def test_one_score_tensor_per_layer_feeds_both_directions():
    h = build_hypergraph([[0, 1, 2], [2, 3]])
    params = toy_model(h, num_layers=2)
    pairs = M.incidence_pairs(h)
    trace = M.ForwardTrace()
    M.forward_backbone(pairs, params, trace=trace)
    assert pairs.score_evals == 2  # exactly one score build per layer
    for tr in trace.layers:
        assert tr.edge_attention._parents[0] is tr.scores
        assert tr.node_attention._parents[0] is tr.scores


# ---------------------------------------------------------------- duality

def test_self_duality_scores_bit_identical(rng):
    for _ in range(5):
        h = random_hypergraph(rng, max_nodes=8, max_edges=4,
                              allow_isolated=False)
        params = toy_model(h, d=4, num_layers=2, seed=int(rng.integers(1000)))
        t1, t2 = M.ForwardTrace(), M.ForwardTrace()
        M.forward_backbone(M.incidence_pairs(h), params, trace=t1)
        M.forward_backbone(M.incidence_pairs(dual(dual(h))), params, trace=t2)
        for a, b in zip(t1.layers, t2.layers):
            assert np.array_equal(a.scores.data, b.scores.data)
            assert np.array_equal(a.edge_attention.data, b.edge_attention.data)
            assert np.array_equal(a.node_attention.data, b.node_attention.data)


def swap_roles(lp):
    return M.LayerParams(node_weight=lp.edge_weight, node_bias=lp.edge_bias,
                         edge_weight=lp.node_weight, edge_bias=lp.node_bias,
                         context=lp.context)


def test_dual_run_with_swapped_roles_transposes_scores(rng):
    for _ in range(5):
        h = random_hypergraph(rng, max_nodes=8, max_edges=4,
                              allow_isolated=False)
        hd = dual(h)
        params = toy_model(h, d=4, num_layers=2, seed=int(rng.integers(1000)))
        pairs, dual_pairs = M.incidence_pairs(h), M.incidence_pairs(hd)
        hn = params.node_embeddings
        he = M.init_edge_states(pairs, hn)
        for lp in params.layers:
            s = M.dual_attention_scores(pairs, hn, he, lp, params.leaky_slope)
            # on the dual, node states are the edge states and vice versa
            sd = M.dual_attention_scores(dual_pairs, he, hn, swap_roles(lp),
                                         params.leaky_slope)
            primal = {(int(e), int(n)): s.data[p] for p, (e, n) in
                      enumerate(zip(pairs.edge_of_pair, pairs.node_of_pair))}
            for p in range(dual_pairs.edge_of_pair.size):
                i = int(dual_pairs.edge_of_pair[p])   # dual edge = primal node
                j = int(dual_pairs.node_of_pair[p])   # dual node = primal edge
                assert sd.data[p] == primal[(j, i)]   # bit-identical transpose
            he_next, _ = M.edge_update(pairs, s, hn)
            hn_next, _ = M.node_update(pairs, s, he)
            hn, he = hn_next, he_next


# ------------------------------------------------------------- regularizer

def test_regularizer_hand_values():
    t = SparseMatrix(2, 2, np.array([0, 0, 1, 1]), np.array([0, 1, 0, 1]),
                     np.full(4, 1.0 / 3.0))
    x = K.constant(np.array([[1.0], [0.0]]))
    assert abs(M.regularizer(x, t).item() - 2.0 / 3.0) <= 1e-12
    same = K.constant(np.array([[2.0, 1.0], [2.0, 1.0]]))
    t2 = SparseMatrix(2, 2, np.array([0, 1]), np.array([1, 0]),
                      np.array([0.7, 0.7]))
    assert abs(M.regularizer(same, t2).item()) <= 1e-12


def test_regularizer_matches_pairwise_oracle(rng):
    for _ in range(20):
        h = random_hypergraph(rng, max_nodes=10)
        t = theta(h)
        x = rng.normal(size=(h.num_nodes, 4))
        got = M.regularizer(K.constant(x), t).item()
        assert abs(got - regularizer_oracle(x, t.to_dense())) <= 1e-10


def test_regularizer_diagonal_is_inert(rng):
    h = build_hypergraph([[0, 1, 2]])
    t = theta(h)
    x = rng.normal(size=(3, 2))
    base = M.regularizer(K.constant(x), t).item()
    boosted = SparseMatrix(t.rows, t.cols, t.row_idx, t.col_idx,
                           t.values + 5.0 * (t.row_idx == t.col_idx))
    assert abs(M.regularizer(K.constant(x), boosted).item() - base) <= 1e-10


# ------------------------------------------------------- subgraph attention

def test_subgraph_attention_worked_example():
    # two members with weights .2/.8 and equal unit projections
    x = K.constant(np.array([[1.0], [1.0]]))
    batch = M.SubgraphBatch(members=[np.array([0, 1])],
                            weights=[np.array([0.2, 0.8])],
                            labels=np.zeros((1, 1)))
    ctx = K.constant(np.array([[1.0]]))
    attn = M.subgraph_attention(x, batch, ctx).data
    want = np.exp([0.2, 0.8]) / np.exp([0.2, 0.8]).sum()
    assert np.max(np.abs(attn - want)) <= 1e-10
    assert np.allclose(attn, [0.3543, 0.6457], atol=5e-5)


def test_subgraph_attention_uniform_cases():
    x = K.constant(np.array([[1.0, 2.0], [3.0, 4.0], [0.5, 0.5]]))
    batch = M.SubgraphBatch(members=[np.array([0, 1, 2])],
                            weights=[np.ones(3)],
                            labels=np.zeros((1, 1)))
    zero_ctx = K.constant(np.zeros((2, 1)))
    attn = M.subgraph_attention(x, batch, zero_ctx).data
    assert np.allclose(attn, [1 / 3] * 3, atol=1e-12)
    single = M.SubgraphBatch(members=[np.array([1])], weights=[np.array([0.4])],
                             labels=np.zeros((1, 1)))
    ctx = K.constant(np.array([[1.0], [2.0]]))
    assert M.subgraph_attention(x, single, ctx).data.tolist() == [1.0]


def test_subgraph_repr_member_order_invariance():
    h = build_hypergraph([[0, 1, 2, 3, 4]])
    params = toy_model(h, d=4)
    x = M.forward_backbone(M.incidence_pairs(h), params)
    fwd = M.SubgraphBatch(members=[np.array([0, 2, 4])],
                          weights=[np.array([0.3, 0.9, 1.5])],
                          labels=np.zeros((1, 3)))
    rev = M.SubgraphBatch(members=[np.array([4, 2, 0])],
                          weights=[np.array([1.5, 0.9, 0.3])],
                          labels=np.zeros((1, 3)))
    a = M.subgraph_repr(x, fwd, params).data
    b = M.subgraph_repr(x, rev, params).data
    assert np.max(np.abs(a - b)) <= 1e-9


def test_subgraph_repr_sum_ablation():
    h = build_hypergraph([[0, 1, 2]])
    params = toy_model(h, d=4, use_subgraph_attention=False)
    x = M.forward_backbone(M.incidence_pairs(h), params)
    batch = M.SubgraphBatch(members=[np.array([0, 2])],
                            weights=[np.array([0.1, 9.0])],
                            labels=np.zeros((1, 3)))
    got = M.subgraph_repr(x, batch, params).data
    want = np.maximum(x.data[0] + x.data[2], 0.0)  # weights ignored by the sum
    assert np.max(np.abs(got - want)) <= 1e-12


def test_batch_validation():
    with pytest.raises(ShapeError):
        M.SubgraphBatch(members=[np.array([], dtype=np.intp)],
                        weights=[np.array([])], labels=np.zeros((1, 2)))
    with pytest.raises(ShapeError):
        M.SubgraphBatch(members=[np.array([0, 0])],
                        weights=[np.ones(2)], labels=np.zeros((1, 2)))
    with pytest.raises(ShapeError):
        M.SubgraphBatch(members=[np.array([0])], weights=[np.array([-1.0])],
                        labels=np.zeros((1, 2)))
    with pytest.raises(ShapeError):
        M.SubgraphBatch(members=[np.array([0])], weights=[np.array([0.0])],
                        labels=np.zeros((1, 2)))


# ------------------------------------------------------------------- head

def test_classify_zero_head_is_uniform():
    h = build_hypergraph([[0, 1]])
    params = toy_model(h, d=4, num_classes=5)
    for t in (params.head.fc1_weight, params.head.fc1_bias,
              params.head.fc2_weight, params.head.fc2_bias,
              params.head.out_weight, params.head.out_bias):
        t.data[:] = 0.0
    z = M.classify(K.constant(np.random.default_rng(0).normal(size=(3, 4))),
                   params).data
    assert np.allclose(z, 0.2, atol=1e-12)


def test_classify_hand_forward():
    h = build_hypergraph([[0, 1]])
    params = toy_model(h, d=2, num_classes=2, seed=11)
    s = np.array([[0.5, -1.0], [2.0, 0.3]])
    head = params.head
    h1 = np.maximum(s @ head.fc1_weight.data + head.fc1_bias.data, 0.0)
    h2 = np.maximum(h1 @ head.fc2_weight.data + head.fc2_bias.data, 0.0)
    logits = h2 @ head.out_weight.data + head.out_bias.data
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    want = e / e.sum(axis=1, keepdims=True)
    got = M.classify(K.constant(s), params).data
    assert np.max(np.abs(got - want)) <= 1e-10
    assert np.max(np.abs(got.sum(axis=1) - 1.0)) <= 1e-6


def test_classify_multilabel_sigmoid():
    h = build_hypergraph([[0, 1]])
    params = toy_model(h, d=2, num_classes=3, mode="multilabel", seed=2)
    z = M.classify(K.constant(np.array([[1.0, -2.0]])), params).data
    assert np.all((z > 0) & (z < 1))


# ------------------------------------------------------------------- loss

def test_loss_values_multiclass():
    y = np.array([[1.0, 0.0], [0.0, 1.0]])
    perfect = K.constant(np.array([[1.0, 0.0], [0.0, 1.0]]))
    total, ce = M.loss(perfect, y, "multiclass")
    assert abs(total.item()) <= 1e-12
    uniform = K.constant(np.full((2, 2), 0.5))
    total, _ = M.loss(uniform, y, "multiclass")
    assert abs(total.item() - 2.0 * np.log(2.0)) <= 1e-12
    with pytest.raises(InvalidLabel):
        M.loss(uniform, np.array([[1.0, 0.0], [0.0, 0.0]]), "multiclass")


def test_loss_values_multilabel():
    y = np.array([[1.0, 0.0]])
    z = K.constant(np.array([[0.8, 0.3]]))
    total, _ = M.loss(z, y, "multilabel")
    want = -(np.log(0.8) + np.log(0.7))
    assert abs(total.item() - want) <= 1e-12


def test_loss_includes_weighted_regularizer():
    y = np.array([[1.0, 0.0]])
    z = K.constant(np.array([[0.5, 0.5]]))
    reg = K.constant(3.0)
    total, ce = M.loss(z, y, "multiclass", reg_value=reg, reg_weight=2.0)
    assert abs(total.item() - (ce.item() + 6.0)) <= 1e-12
    total0, ce0 = M.loss(z, y, "multiclass", reg_value=reg, reg_weight=0.0)
    assert total0.item() == ce0.item()


# ------------------------------------------------------------- equivariance

def apply_permutation(h, params, batch, perm):
    """Relabel nodes by perm (old index -> new index)."""
    lists = [[perm[i] for i in mem] for mem in h.edge_members]
    h2 = build_hypergraph(lists, edge_weights=h.edge_weights,
                          num_nodes=h.num_nodes)
    emb = np.empty_like(params.node_embeddings.data)
    emb[list(perm)] = params.node_embeddings.data
    params2 = M.ModelParams(
        node_embeddings=K.parameter(emb), layers=params.layers,
        subgraph_context=params.subgraph_context, head=params.head,
        mode=params.mode, dropout_rate=params.dropout_rate,
        leaky_slope=params.leaky_slope,
        use_subgraph_attention=params.use_subgraph_attention)
    batch2 = M.SubgraphBatch(
        members=[np.array([perm[i] for i in mem]) for mem in batch.members],
        weights=[w.copy() for w in batch.weights], labels=batch.labels.copy())
    return h2, params2, batch2


def test_node_relabeling_leaves_outputs_unchanged(rng):
    h = build_hypergraph([[0, 1, 2], [2, 3, 4], [1, 4]])
    params = toy_model(h, d=4, num_classes=2, seed=3)
    batch = toy_batch([[0, 2, 3], [1, 4]], 2)
    perm = rng.permutation(h.num_nodes).tolist()
    h2, params2, batch2 = apply_permutation(h, params, batch, perm)

    x1 = M.forward_backbone(M.incidence_pairs(h), params)
    s1 = M.subgraph_repr(x1, batch, params)
    z1 = M.classify(s1, params)
    x2 = M.forward_backbone(M.incidence_pairs(h2), params2)
    s2 = M.subgraph_repr(x2, batch2, params2)
    z2 = M.classify(s2, params2)
    assert np.max(np.abs(s1.data - s2.data)) <= 1e-9
    assert np.max(np.abs(z1.data - z2.data)) <= 1e-9


# ---------------------------------------------------------------- gradients

def test_full_loss_grad_check_small():
    h = build_hypergraph([[0, 1, 2], [2, 3]])
    params = toy_model(h, d=3, num_classes=2, num_layers=2, seed=4)
    pairs = M.incidence_pairs(h)
    t = theta(h)
    batch = toy_batch([[0, 1], [2, 3]], 2)

    def f():
        return M.forward(pairs, params, batch, theta_sp=t,
                         reg_weight=0.7).total_loss

    report = K.grad_check(f, params.parameters(), epsilon=1e-6)
    assert report.passed, f"max rel error {report.max_rel_error}"


def test_forward_training_equals_eval_without_dropout():
    h = build_hypergraph([[0, 1, 2], [1, 2]])
    params = toy_model(h, d=4, num_classes=2, seed=6, dropout_rate=0.0)
    pairs = M.incidence_pairs(h)
    batch = toy_batch([[0, 1, 2]], 2, labels=np.array([[1.0, 0.0]]))
    rng = np.random.default_rng(0)
    a = M.forward(pairs, params, batch, training=True, rng=rng)
    b = M.forward(pairs, params, batch, training=False)
    assert np.array_equal(a.predictions.data, b.predictions.data)


def test_subgraph_scores_eval_only():
    h = build_hypergraph([[0, 1, 2], [1, 2]])
    params = toy_model(h, d=4, num_classes=2, seed=6, dropout_rate=0.5)
    pairs = M.incidence_pairs(h)
    batch = toy_batch([[0, 1, 2]], 2, labels=np.array([[1.0, 0.0]]))
    a = M.subgraph_scores(pairs, params, batch)
    b = M.subgraph_scores(pairs, params, batch)
    assert np.array_equal(a, b)  # dropout never fires outside training
