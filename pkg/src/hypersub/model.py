"""Model: dual attention message passing over a hypergraph, followed by
attention pooling of node states into subgraph representations and a small
classifier head.

Each message passing layer computes ONE attention score per incident
(hyperedge, node) pair from the previous layer's states. Normalizing those
same scores per hyperedge gives the weights that pool member nodes into new
hyperedge states; normalizing them per node gives the weights that pool
incident hyperedges into new node states. Both directions read previous-layer
states only, so within a layer nothing is refreshed mid-flight.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernel as K
from .errors import InvalidLabel, ShapeError
from .hypergraph import Hypergraph, SparseMatrix
from .kernel import Tensor


@dataclass
class IncidencePairs:
    """Flattened incidence relation in canonical (edge, node) order.

    Pair p couples hyperedge edge_of_pair[p] with node node_of_pair[p]. Pairs
    are sorted by edge then node, so the layout is reproducible from the
    hypergraph alone. ``score_evals`` counts score-tensor constructions, which
    lets tests assert that each layer computes its scores exactly once.
    """

    edge_of_pair: np.ndarray
    node_of_pair: np.ndarray
    by_edge: tuple[tuple[int, ...], ...]
    by_node: tuple[tuple[int, ...], ...]
    by_node_nonempty: tuple[tuple[int, ...], ...]
    num_nodes: int
    num_edges: int
    score_evals: int = 0


def incidence_pairs(h: Hypergraph) -> IncidencePairs:
    edge_of, node_of, by_edge = [], [], []
    p = 0
    for j, mem in enumerate(h.edge_members):
        by_edge.append(tuple(range(p, p + len(mem))))
        edge_of.extend([j] * len(mem))
        node_of.extend(mem)
        p += len(mem)
    by_node = [[] for _ in range(h.num_nodes)]
    for q, i in enumerate(node_of):
        by_node[i].append(q)
    return IncidencePairs(
        edge_of_pair=np.asarray(edge_of, dtype=np.intp),
        node_of_pair=np.asarray(node_of, dtype=np.intp),
        by_edge=tuple(by_edge),
        by_node=tuple(tuple(g) for g in by_node),
        by_node_nonempty=tuple(tuple(g) for g in by_node if g),
        num_nodes=h.num_nodes,
        num_edges=h.num_edges,
    )


# ------------------------------------------------------------------- params

@dataclass
class LayerParams:
    """One message passing layer: separate node/edge projections and the
    attention context that turns a projected pair product into a score."""

    node_weight: Tensor   # (d, d)
    node_bias: Tensor     # (d,)
    edge_weight: Tensor   # (d, d)
    edge_bias: Tensor     # (d,)
    context: Tensor       # (d, 1)


@dataclass
class HeadParams:
    fc1_weight: Tensor    # (d, d)
    fc1_bias: Tensor      # (d,)
    fc2_weight: Tensor    # (d, d)
    fc2_bias: Tensor      # (d,)
    out_weight: Tensor    # (d, F)
    out_bias: Tensor      # (F,)


@dataclass
class ModelParams:
    """Everything trainable plus the switches that shape the forward pass."""

    node_embeddings: Tensor
    layers: list[LayerParams]
    subgraph_context: Tensor   # (d, 1)
    head: HeadParams
    mode: str = "multiclass"
    dropout_rate: float = 0.0
    leaky_slope: float = 0.01
    use_subgraph_attention: bool = True

    @property
    def hidden_dim(self) -> int:
        return self.node_embeddings.data.shape[1]

    @property
    def num_nodes(self) -> int:
        return self.node_embeddings.data.shape[0]

    @property
    def num_classes(self) -> int:
        return self.head.out_weight.data.shape[1]

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        named = [("node_embeddings", self.node_embeddings)]
        for k, lp in enumerate(self.layers):
            named += [
                (f"layer{k}.node_weight", lp.node_weight),
                (f"layer{k}.node_bias", lp.node_bias),
                (f"layer{k}.edge_weight", lp.edge_weight),
                (f"layer{k}.edge_bias", lp.edge_bias),
                (f"layer{k}.context", lp.context),
            ]
        named += [
            ("subgraph_context", self.subgraph_context),
            ("head.fc1_weight", self.head.fc1_weight),
            ("head.fc1_bias", self.head.fc1_bias),
            ("head.fc2_weight", self.head.fc2_weight),
            ("head.fc2_bias", self.head.fc2_bias),
            ("head.out_weight", self.head.out_weight),
            ("head.out_bias", self.head.out_bias),
        ]
        return named

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int, dtype):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype)


def init_model(num_nodes: int, hidden_dim: int, num_layers: int, num_classes: int,
               rng: np.random.Generator, mode: str = "multiclass",
               dropout_rate: float = 0.0, leaky_slope: float = 0.01,
               use_subgraph_attention: bool = True, dtype=np.float32) -> ModelParams:
    """Fresh parameters. Node embeddings and attention contexts start uniform
    in [-1/sqrt(d), 1/sqrt(d)]; projections are Glorot-uniform; biases zero."""
    if num_layers < 1:
        raise ValueError("num_layers must be at least 1")
    if hidden_dim < 1 or num_classes < 1 or num_nodes < 1:
        raise ValueError("num_nodes, hidden_dim, and num_classes must be positive")
    if mode not in ("multiclass", "multilabel"):
        raise ValueError(f"unknown mode {mode!r}")
    d = hidden_dim
    bound = 1.0 / np.sqrt(d)

    def vec(shape):
        return K.parameter(rng.uniform(-bound, bound, size=shape).astype(dtype))

    emb = vec((num_nodes, d))
    layers = []
    for _ in range(num_layers):
        layers.append(LayerParams(
            node_weight=K.parameter(_glorot(rng, d, d, dtype)),
            node_bias=K.parameter(np.zeros(d, dtype=dtype)),
            edge_weight=K.parameter(_glorot(rng, d, d, dtype)),
            edge_bias=K.parameter(np.zeros(d, dtype=dtype)),
            context=vec((d, 1)),
        ))
    head = HeadParams(
        fc1_weight=K.parameter(_glorot(rng, d, d, dtype)),
        fc1_bias=K.parameter(np.zeros(d, dtype=dtype)),
        fc2_weight=K.parameter(_glorot(rng, d, d, dtype)),
        fc2_bias=K.parameter(np.zeros(d, dtype=dtype)),
        out_weight=K.parameter(_glorot(rng, d, num_classes, dtype)),
        out_bias=K.parameter(np.zeros(num_classes, dtype=dtype)),
    )
    return ModelParams(
        node_embeddings=emb, layers=layers, subgraph_context=vec((d, 1)),
        head=head, mode=mode, dropout_rate=dropout_rate,
        leaky_slope=leaky_slope, use_subgraph_attention=use_subgraph_attention,
    )


# -------------------------------------------------------------------- batch

@dataclass
class SubgraphBatch:
    """A batch of subject subgraphs: member node indices, per-member weights,
    and a dense label matrix (one row per subject, one column per class)."""

    members: list[np.ndarray]
    weights: list[np.ndarray]
    labels: np.ndarray
    subject_ids: list[str] | None = None
    member_rows: np.ndarray = field(init=False)
    member_weights: np.ndarray = field(init=False)
    groups: tuple[tuple[int, ...], ...] = field(init=False)

    def __post_init__(self):
        if len(self.members) != len(self.weights):
            raise ShapeError("members and weights must align")
        if self.labels.ndim != 2 or self.labels.shape[0] != len(self.members):
            raise ShapeError("labels must be (num_subgraphs, num_classes)")
        rows, wvals, groups = [], [], []
        p = 0
        for si, (mem, w) in enumerate(zip(self.members, self.weights)):
            mem = np.asarray(mem, dtype=np.intp)
            w = np.asarray(w, dtype=np.float64)
            if mem.size == 0:
                raise ShapeError(f"subgraph {si} has no members")
            if mem.size != len(set(mem.tolist())):
                raise ShapeError(f"subgraph {si} has duplicate members")
            if w.shape != mem.shape:
                raise ShapeError(f"subgraph {si} weights do not align with members")
            if np.any(w < 0) or not np.all(np.isfinite(w)):
                raise ShapeError(f"subgraph {si} has invalid member weights")
            if not np.any(w > 0):
                raise ShapeError(f"subgraph {si} has no positive member weight")
            groups.append(tuple(range(p, p + mem.size)))
            rows.append(mem)
            wvals.append(w)
            p += mem.size
        self.member_rows = np.concatenate(rows)
        self.member_weights = np.concatenate(wvals)
        self.groups = tuple(groups)

    def __len__(self) -> int:
        return len(self.members)

    def subset(self, indices) -> "SubgraphBatch":
        idx = np.asarray(indices, dtype=np.intp)
        return SubgraphBatch(
            members=[self.members[i] for i in idx],
            weights=[self.weights[i] for i in idx],
            labels=self.labels[idx],
            subject_ids=None if self.subject_ids is None
            else [self.subject_ids[i] for i in idx],
        )


# ------------------------------------------------------------ forward trace

@dataclass
class LayerTrace:
    scores: Tensor
    edge_attention: Tensor
    node_attention: Tensor


@dataclass
class ForwardTrace:
    layers: list[LayerTrace] = field(default_factory=list)
    final_node_states: Tensor | None = None
    final_edge_states: Tensor | None = None
    subgraph_attention: Tensor | None = None


# ------------------------------------------------------------- forward pass

def init_edge_states(pairs: IncidencePairs, node_embeddings: Tensor) -> Tensor:
    """Layer-0 hyperedge states: plain mean of member node embeddings."""
    counts = np.array([len(g) for g in pairs.by_edge], dtype=np.float64)
    w = (1.0 / counts[pairs.edge_of_pair]).astype(node_embeddings.data.dtype)
    return K.weighted_row_sum(node_embeddings, K.constant(w),
                              pairs.node_of_pair, pairs.by_edge)


def dual_attention_scores(pairs: IncidencePairs, node_states: Tensor,
                          edge_states: Tensor, layer: LayerParams,
                          slope: float = 0.01) -> Tensor:
    """One raw score per incident pair.

    Both projected states are gathered onto the pairs, multiplied entrywise,
    passed through a leaky rectifier, and contracted with the layer context.
    """
    tn = K.add_bias(K.matmul(node_states, layer.node_weight), layer.node_bias)
    te = K.add_bias(K.matmul(edge_states, layer.edge_weight), layer.edge_bias)
    joint = K.elementwise_mul(K.gather_rows(te, pairs.edge_of_pair),
                              K.gather_rows(tn, pairs.node_of_pair))
    scores = K.matmul(K.leaky_relu(joint, slope), layer.context)
    pairs.score_evals += 1
    return K.reshape(scores, (-1,))


def edge_update(pairs: IncidencePairs, scores: Tensor,
                node_states: Tensor) -> tuple[Tensor, Tensor]:
    """New hyperedge states: scores normalized per edge over its members,
    then a rectified attention-weighted sum of member node states."""
    attn = K.masked_softmax(scores, pairs.by_edge)
    out = K.relu(K.weighted_row_sum(node_states, attn, pairs.node_of_pair,
                                    pairs.by_edge))
    return out, attn


def node_update(pairs: IncidencePairs, scores: Tensor,
                edge_states: Tensor) -> tuple[Tensor, Tensor]:
    """New node states from the same scores, normalized per node over its
    incident edges. Nodes with no membership yield all-zero rows."""
    attn = K.masked_softmax(scores, pairs.by_node_nonempty)
    out = K.relu(K.weighted_row_sum(edge_states, attn, pairs.edge_of_pair,
                                    pairs.by_node))
    return out, attn


def forward_backbone(pairs: IncidencePairs, params: ModelParams, *,
                     training: bool = False,
                     rng: np.random.Generator | None = None,
                     trace: ForwardTrace | None = None) -> Tensor:
    """Run all message passing layers; returns final node states (N, d)."""
    if pairs.num_nodes != params.num_nodes:
        raise ShapeError("hypergraph and embeddings disagree on node count")
    drop = training and params.dropout_rate > 0.0
    if drop and rng is None:
        raise ValueError("training with dropout needs an rng")
    hn = params.node_embeddings
    he = init_edge_states(pairs, hn)
    for layer in params.layers:
        scores = dual_attention_scores(pairs, hn, he, layer, params.leaky_slope)
        he_next, a_edge = edge_update(pairs, scores, hn)
        hn_next, a_node = node_update(pairs, scores, he)
        if trace is not None:
            trace.layers.append(LayerTrace(scores, a_edge, a_node))
        if drop:
            he_next = K.dropout(he_next, params.dropout_rate, rng)
            hn_next = K.dropout(hn_next, params.dropout_rate, rng)
        hn, he = hn_next, he_next
    if trace is not None:
        trace.final_node_states = hn
        trace.final_edge_states = he
    return hn


def regularizer(node_states: Tensor, theta_sp: SparseMatrix) -> Tensor:
    """Quadratic smoothness penalty over the normalized adjacency.

    Equals the dense double sum of theta[i, j] * ||X_i - X_j||^2, computed
    sparsely as 2 * (sum_i rowsum_i * ||X_i||^2 - sum_ij X_ij (theta X)_ij).
    Diagonal entries cancel; zero-degree nodes have empty rows and drop out.
    """
    dtype = node_states.data.dtype
    r = K.constant(theta_sp.row_sums().reshape(1, -1), dtype=dtype)
    t1 = K.reduce_sum(K.matmul(r, K.elementwise_mul(node_states, node_states)))
    t2 = K.reduce_sum(K.elementwise_mul(node_states, K.spmm(theta_sp, node_states)))
    return K.scale(K.sub(t1, t2), 2.0)


def subgraph_attention(node_states: Tensor, batch: SubgraphBatch,
                       context: Tensor) -> Tensor:
    """Weighted member attention within each subgraph.

    A member's logit is its weight times the projection of its node state on
    the context vector; softmax runs within each subgraph's member group.
    """
    proj = K.reshape(K.gather_rows(K.matmul(node_states, context),
                                   batch.member_rows), (-1,))
    w = K.constant(batch.member_weights, dtype=node_states.data.dtype)
    return K.masked_softmax(K.elementwise_mul(w, proj), batch.groups)


def subgraph_repr(node_states: Tensor, batch: SubgraphBatch,
                  params: ModelParams,
                  trace: ForwardTrace | None = None) -> Tensor:
    """Pool member node states into one representation per subgraph.

    With subgraph attention enabled the pool is the attention-weighted sum;
    the ablation replaces it with a plain unweighted sum. Both are rectified.
    """
    if params.use_subgraph_attention:
        attn = subgraph_attention(node_states, batch, params.subgraph_context)
    else:
        attn = K.constant(np.ones_like(batch.member_weights),
                          dtype=node_states.data.dtype)
    if trace is not None:
        trace.subgraph_attention = attn
    return K.relu(K.weighted_row_sum(node_states, attn, batch.member_rows,
                                     batch.groups))


def classify(subgraph_states: Tensor, params: ModelParams, *,
             training: bool = False,
             rng: np.random.Generator | None = None) -> Tensor:
    """Two rectified fully connected layers, a linear output layer, and the
    mode's output normalization (row softmax or elementwise sigmoid)."""
    head = params.head
    drop = training and params.dropout_rate > 0.0
    if drop and rng is None:
        raise ValueError("training with dropout needs an rng")
    hidden = K.relu(K.add_bias(K.matmul(subgraph_states, head.fc1_weight),
                               head.fc1_bias))
    if drop:
        hidden = K.dropout(hidden, params.dropout_rate, rng)
    hidden = K.relu(K.add_bias(K.matmul(hidden, head.fc2_weight), head.fc2_bias))
    if drop:
        hidden = K.dropout(hidden, params.dropout_rate, rng)
    logits = K.add_bias(K.matmul(hidden, head.out_weight), head.out_bias)
    if params.mode == "multiclass":
        return K.softmax_rows(logits)
    return K.sigmoid(logits)


def loss(predictions: Tensor, labels: np.ndarray, mode: str,
         reg_value: Tensor | None = None,
         reg_weight: float = 0.0) -> tuple[Tensor, Tensor]:
    """(total, classification) loss tensors.

    Multiclass: summed cross-entropy -sum(Y * ln Z); every row of Y must
    select at least one class. Multilabel: summed binary cross-entropy over
    all (subject, class) cells. Logs clamp their argument at 1e-12. The
    regularizer joins as total = classification + reg_weight * reg_value.
    """
    y = np.asarray(labels, dtype=predictions.data.dtype)
    if y.shape != predictions.data.shape:
        raise ShapeError(f"labels shape {y.shape} != predictions {predictions.data.shape}")
    if mode == "multiclass":
        if np.any(y.sum(axis=1) == 0):
            raise InvalidLabel("multiclass labels must mark a class in every row")
        ce = K.scale(K.reduce_sum(K.elementwise_mul(K.constant(y),
                                                    K.log(predictions))), -1.0)
    elif mode == "multilabel":
        ones = np.ones_like(y)
        pos = K.elementwise_mul(K.constant(y), K.log(predictions))
        neg = K.elementwise_mul(K.constant(ones - y),
                                K.log(K.sub(K.constant(ones), predictions)))
        ce = K.scale(K.reduce_sum(K.add(pos, neg)), -1.0)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    if reg_value is not None and reg_weight != 0.0:
        total = K.add(ce, K.scale(reg_value, reg_weight))
    else:
        total = ce
    return total, ce


@dataclass
class ForwardResult:
    predictions: Tensor
    total_loss: Tensor
    classification_loss: float
    regularization: float


def forward(pairs: IncidencePairs, params: ModelParams, batch: SubgraphBatch, *,
            theta_sp: SparseMatrix | None = None, reg_weight: float = 0.0,
            training: bool = False, rng: np.random.Generator | None = None,
            trace: ForwardTrace | None = None,
            include_reg_in_total: bool = True) -> ForwardResult:
    """Full pass: backbone, pooling, head, and loss assembly."""
    x = forward_backbone(pairs, params, training=training, rng=rng, trace=trace)
    s = subgraph_repr(x, batch, params, trace=trace)
    z = classify(s, params, training=training, rng=rng)
    reg_value = None
    reg_float = 0.0
    if theta_sp is not None and reg_weight != 0.0:
        reg_value = regularizer(x, theta_sp)
        reg_float = float(reg_value.data)
    total, ce = loss(z, batch.labels, params.mode,
                     reg_value=reg_value if include_reg_in_total else None,
                     reg_weight=reg_weight)
    return ForwardResult(
        predictions=z,
        total_loss=total,
        classification_loss=float(ce.data),
        regularization=reg_float,
    )


def subgraph_scores(pairs: IncidencePairs, params: ModelParams,
                    batch: SubgraphBatch) -> np.ndarray:
    """Evaluation-mode class scores for a batch, as a plain array."""
    with K.no_grad():
        x = forward_backbone(pairs, params, training=False)
        s = subgraph_repr(x, batch, params)
        z = classify(s, params, training=False)
    return z.data.copy()
