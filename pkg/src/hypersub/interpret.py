"""Post-hoc interpretation of a trained model.

Class-level hyperedge rankings redistribute each subject's pooled member
attention over the hyperedges incident to each member, using the final
message passing layer's per-node attention as the mixing proportions. The
correlation view compares final hyperedge states pairwise by cosine.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernel as K
from . import model as M
from .errors import EmptyClass
from .hypergraph import Hypergraph

AGGREGATION_RULE = ("subject attention distributed over incident hyperedges "
                    "by final-layer node attention, summed per class and "
                    "normalized by class size")


@dataclass
class EnrichmentReport:
    classes: list[str]
    rankings: dict[str, list[tuple[str, float]]]
    aggregation: str
    num_layers: int


def _member_attention(node_states, batch, params):
    """Evaluation-mode per-member pooling weights of each subgraph.

    The sum ablation has no trained pooling attention; members then count
    uniformly, which keeps every subject's total mass at one.
    """
    if params.use_subgraph_attention:
        return M.subgraph_attention(node_states, batch,
                                    params.subgraph_context).data
    out = np.zeros(batch.member_rows.size, dtype=node_states.data.dtype)
    for g in batch.groups:
        out[list(g)] = 1.0 / len(g)
    return out


def class_edge_scores(params: M.ModelParams, h: Hypergraph,
                      batch: M.SubgraphBatch, class_index: int,
                      pairs: M.IncidencePairs | None = None) -> np.ndarray:
    """Average hyperedge attribution over one class's subjects.

    Each subject contributes total mass 1 (member attention sums to one and
    the per-node edge mixture sums to one), so the returned vector sums to 1
    whenever every member node touches at least one hyperedge.
    """
    if pairs is None:
        pairs = M.incidence_pairs(h)
    rows = np.where(batch.labels[:, class_index] > 0.5)[0]
    if rows.size == 0:
        raise EmptyClass(f"no subjects carry class index {class_index}")

    trace = M.ForwardTrace()
    with K.no_grad():
        x = M.forward_backbone(pairs, params, training=False, trace=trace)
        member_attn = _member_attention(x, batch, params)
    node_attn = trace.layers[-1].node_attention.data

    scores = np.zeros(h.num_edges, dtype=np.float64)
    for r in rows:
        for pos, node in zip(batch.groups[r], batch.members[r]):
            a = float(member_attn[pos])
            for p in pairs.by_node[node]:
                scores[pairs.edge_of_pair[p]] += a * float(node_attn[p])
    return scores / rows.size


def rank_hyperedges(params: M.ModelParams, h: Hypergraph,
                    batch: M.SubgraphBatch, class_index: int, top_k: int,
                    edge_names: list[str] | None = None,
                    pairs: M.IncidencePairs | None = None) -> list[tuple[str, float]]:
    """Top hyperedges for one class, highest attribution first; score ties
    break toward the lower hyperedge index."""
    scores = class_edge_scores(params, h, batch, class_index, pairs=pairs)
    names = edge_names or [str(j) for j in range(h.num_edges)]
    order = sorted(range(h.num_edges), key=lambda j: (-scores[j], j))
    return [(names[j], float(scores[j])) for j in order[:max(top_k, 0)]]


def class_enrichment(params: M.ModelParams, h: Hypergraph,
                     batch: M.SubgraphBatch, class_vocab: list[str],
                     top_k: int, edge_names: list[str] | None = None) -> EnrichmentReport:
    pairs = M.incidence_pairs(h)
    rankings = {}
    for ci, cname in enumerate(class_vocab):
        rankings[cname] = rank_hyperedges(params, h, batch, ci, top_k,
                                          edge_names=edge_names, pairs=pairs)
    return EnrichmentReport(classes=list(class_vocab), rankings=rankings,
                            aggregation=AGGREGATION_RULE,
                            num_layers=params.num_layers)


def hyperedge_correlation(params: M.ModelParams, h: Hypergraph,
                          pairs: M.IncidencePairs | None = None) -> np.ndarray:
    """Pairwise cosine similarity of final-layer hyperedge states."""
    if pairs is None:
        pairs = M.incidence_pairs(h)
    trace = M.ForwardTrace()
    with K.no_grad():
        M.forward_backbone(pairs, params, training=False, trace=trace)
    return cosine_matrix(trace.final_edge_states.data.astype(np.float64))


def cosine_matrix(x: np.ndarray) -> np.ndarray:
    """Row-wise cosine similarities; rows of all zeros yield zero rows and
    columns (their direction is undefined), including on the diagonal."""
    norms = np.linalg.norm(x, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    unit = x / safe[:, None]
    out = unit @ unit.T
    out[norms == 0, :] = 0.0
    out[:, norms == 0] = 0.0
    return out


def enrichment_tsv(report: EnrichmentReport) -> str:
    lines = [f"# aggregation: {report.aggregation}",
             f"# layers: {report.num_layers}",
             "class\trank\thyperedge\tscore"]
    for cname in report.classes:
        for rank, (ename, score) in enumerate(report.rankings[cname], start=1):
            lines.append(f"{cname}\t{rank}\t{ename}\t{score!r}")
    return "\n".join(lines) + "\n"


def correlation_tsv(matrix: np.ndarray, edge_names: list[str]) -> str:
    lines = ["\t".join(["hyperedge", *edge_names])]
    for name, row in zip(edge_names, matrix):
        lines.append(name + "\t" + "\t".join(repr(float(v)) for v in row))
    return "\n".join(lines) + "\n"
