"""Session graphs: directed item-transition graphs with normalized weights.

Each session [v1, ..., vt] yields a graph over its unique items. Every
consecutive pair (v_i, v_{i+1}) is one directed transition; an edge's
outgoing weight is its transition count divided by the total number of
transitions leaving the source node (out-degree counted with
multiplicity), and the incoming matrix normalizes the reversed
transitions the same way. Repeated consecutive items produce self-loops.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError


@dataclass
class SessionGraph:
    """One session's graph plus the position → node alias map."""

    nodes: np.ndarray      # (n,) unique item indices, first-occurrence order
    alias: np.ndarray      # (t,) index into nodes for each session position
    a_out: np.ndarray      # (n, n) row-normalized outgoing weights
    a_in: np.ndarray       # (n, n) row-normalized incoming weights
    last_node: int         # index into nodes of the session's final item

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)


def build_graph(items) -> SessionGraph:
    """Build the weighted transition graph for one item sequence."""
    items = list(items)
    if not items:
        raise ContractError("build_graph: session must contain at least one item")
    node_of = {}
    nodes = []
    alias = []
    for item in items:
        if item not in node_of:
            node_of[item] = len(nodes)
            nodes.append(item)
        alias.append(node_of[item])
    n = len(nodes)
    counts = np.zeros((n, n), dtype=np.float64)
    for src, dst in zip(alias[:-1], alias[1:]):
        counts[src, dst] += 1.0

    def row_normalize(mat):
        sums = mat.sum(axis=1, keepdims=True)
        return np.divide(mat, sums, out=np.zeros_like(mat), where=sums > 0)

    return SessionGraph(
        nodes=np.asarray(nodes, dtype=np.int64),
        alias=np.asarray(alias, dtype=np.int64),
        a_out=row_normalize(counts),
        a_in=row_normalize(counts.T.copy()),
        last_node=alias[-1],
    )


@dataclass
class GraphBatch:
    """Graphs padded to a common node count and session length.

    Padding uses item index 0; padded rows of the adjacency matrices are
    all-zero and padded positions are excluded by the masks. ``connection``
    stacks outgoing and incoming weights side by side, which is the form
    the gated propagation step consumes row by row.
    """

    nodes: np.ndarray        # (B, N) item indices, 0-padded
    alias: np.ndarray        # (B, T) position -> node index, 0-padded
    a_out: np.ndarray        # (B, N, N)
    a_in: np.ndarray         # (B, N, N)
    connection: np.ndarray   # (B, N, 2N) = [a_out | a_in]
    node_mask: np.ndarray    # (B, N) bool, real nodes
    seq_mask: np.ndarray     # (B, T) bool, real positions
    last_pos: np.ndarray     # (B,) index of final real position
    lengths: np.ndarray      # (B,) session lengths
    last_items: np.ndarray   # (B,) final item index of each session
    labels: np.ndarray | None = None       # (B,) target items, if known
    session_ids: np.ndarray | None = None  # (B,) ids into the training set

    @property
    def batch_size(self) -> int:
        return self.nodes.shape[0]


def batch_graphs(sessions, labels=None, session_ids=None) -> GraphBatch:
    """Build and pad graphs for a batch of item sequences.

    ``sessions`` is a sequence of item-index lists (or Session objects,
    whose .items is used).
    """
    item_lists = [list(getattr(s, "items", s)) for s in sessions]
    if not item_lists:
        raise ContractError("batch_graphs: batch must be nonempty")
    graphs = [build_graph(items) for items in item_lists]
    b = len(graphs)
    n_max = max(g.num_nodes for g in graphs)
    t_max = max(len(g.alias) for g in graphs)

    nodes = np.zeros((b, n_max), dtype=np.int64)
    alias = np.zeros((b, t_max), dtype=np.int64)
    a_out = np.zeros((b, n_max, n_max), dtype=np.float64)
    a_in = np.zeros((b, n_max, n_max), dtype=np.float64)
    node_mask = np.zeros((b, n_max), dtype=bool)
    seq_mask = np.zeros((b, t_max), dtype=bool)
    last_pos = np.zeros(b, dtype=np.int64)
    lengths = np.zeros(b, dtype=np.int64)
    last_items = np.zeros(b, dtype=np.int64)

    for i, g in enumerate(graphs):
        n = g.num_nodes
        t = len(g.alias)
        nodes[i, :n] = g.nodes
        alias[i, :t] = g.alias
        a_out[i, :n, :n] = g.a_out
        a_in[i, :n, :n] = g.a_in
        node_mask[i, :n] = True
        seq_mask[i, :t] = True
        last_pos[i] = t - 1
        lengths[i] = t
        last_items[i] = g.nodes[g.last_node]

    return GraphBatch(
        nodes=nodes,
        alias=alias,
        a_out=a_out,
        a_in=a_in,
        connection=np.concatenate([a_out, a_in], axis=2),
        node_mask=node_mask,
        seq_mask=seq_mask,
        last_pos=last_pos,
        lengths=lengths,
        last_items=last_items,
        labels=None if labels is None else np.asarray(labels, dtype=np.int64),
        session_ids=None if session_ids is None else np.asarray(session_ids, dtype=np.int64),
    )
