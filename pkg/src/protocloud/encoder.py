"""Directed-edge message passing encoder (D-MPNN).

Hidden states live on directed edges. The message into edge v->w sums the
states of every edge k->v except the reverse edge w->v; node embeddings
sum the final states of a node's outgoing edges. Graphs in a batch are
stacked into one disconnected graph.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import gradcore as gc
from .errors import ShapeError
from .graph import MolecularGraph


def _local_tables(g):
    """Per-graph gather tables, cached on the graph (sorted neighbour order)."""
    cached = g.cache.get("tables")
    if cached is not None:
        return cached
    src, dst = g.edge_index[:, 0], g.edge_index[:, 1]
    incoming = [[] for _ in range(g.n_nodes)]
    outgoing = [[] for _ in range(g.n_nodes)]
    for e in sorted(range(g.n_edges), key=lambda e: (src[e], dst[e])):
        incoming[dst[e]].append(e)
        outgoing[src[e]].append(e)
    messages = [[k for k in incoming[src[e]] if k != (e ^ 1)] for e in range(g.n_edges)]
    cached = (messages, outgoing)
    g.cache["tables"] = cached
    return cached


def _pad(rows, offset):
    width = max([len(r) for r in rows] + [1])
    out = np.full((len(rows), width), -1, dtype=np.int64)
    for i, r in enumerate(rows):
        out[i, :len(r)] = [x + offset for x in r]
    return out


class GraphBatch:
    """Several graphs stacked block-diagonally with precomputed gather tables."""

    def __init__(self, graphs):
        graphs = [graphs] if isinstance(graphs, MolecularGraph) else list(graphs)
        if not graphs:
            raise ShapeError("empty batch")
        for g in graphs:
            if g.n_nodes == 0:
                raise ShapeError(f"graph {g.id!r} has no atoms")
        self.graphs = graphs
        sizes = [g.n_nodes for g in graphs]
        self.node_offsets = np.concatenate([[0], np.cumsum(sizes)])
        self.n_nodes = int(self.node_offsets[-1])
        self.sizes = np.array(sizes)
        node_width = graphs[0].node_features.shape[1]
        edge_widths = {g.edge_features.shape[1] for g in graphs if g.n_edges}
        self.edge_width = edge_widths.pop() if edge_widths else 0
        self.X = np.vstack([g.node_features for g in graphs]).reshape(self.n_nodes, node_width)

        src, feats, msg_rows, out_rows = [], [], [], []
        edge_offset = 0
        for g, off in zip(graphs, self.node_offsets):
            messages, outgoing = _local_tables(g)
            src.append(g.edge_index[:, 0] + off)
            feats.append(g.edge_features.reshape(g.n_edges, -1) if g.n_edges else np.zeros((0, self.edge_width)))
            msg_rows.extend([[k + edge_offset for k in r] for r in messages])
            out_rows.extend([[k + edge_offset for k in r] for r in outgoing])
            edge_offset += g.n_edges
        self.n_edges = edge_offset
        self.src = np.concatenate(src).astype(np.int64) if src else np.zeros(0, np.int64)
        self.edge_features = np.vstack(feats) if self.n_edges else np.zeros((0, self.edge_width))
        self.message_table = gc.SumTable(_pad(msg_rows, 0), self.n_edges)
        self.node_table = gc.SumTable(_pad(out_rows, 0), self.n_edges)
        graph_rows = [list(range(a, b)) for a, b in zip(self.node_offsets[:-1], self.node_offsets[1:])]
        self.graph_table = gc.SumTable(_pad(graph_rows, 0), self.n_nodes)

    def __len__(self):
        return len(self.graphs)

    def slices(self):
        return list(zip(self.node_offsets[:-1].tolist(), self.node_offsets[1:].tolist()))

    def membership(self):
        """Constant (n_nodes x n_graphs) indicator matrix."""
        S = np.zeros((self.n_nodes, len(self.graphs)))
        for g, (a, b) in enumerate(self.slices()):
            S[a:b, g] = 1.0
        return S


def as_batch(graphs):
    if isinstance(graphs, GraphBatch):
        return graphs
    if isinstance(graphs, MolecularGraph):
        return GraphBatch([graphs])
    return GraphBatch(graphs)


def glorot(rng, rows, cols):
    limit = np.sqrt(6.0 / (rows + cols))
    return rng.uniform(-limit, limit, size=(rows, cols))


@dataclass
class EncoderParams:
    W_i: gc.Tensor
    W_m: gc.Tensor
    W_o: gc.Tensor
    steps: int = 5
    dropout: float = 0.0

    @property
    def hidden(self):
        return self.W_m.shape[0]

    def parameters(self):
        return [self.W_i, self.W_m, self.W_o]

    @classmethod
    def init(cls, node_width, edge_width, hidden, steps, rng, dropout=0.0):
        if steps < 1:
            raise ValueError("message passing needs at least one step")
        return cls(
            gc.parameter(glorot(rng, hidden, node_width + edge_width), "encoder.W_i"),
            gc.parameter(glorot(rng, hidden, hidden), "encoder.W_m"),
            gc.parameter(glorot(rng, hidden, node_width + hidden), "encoder.W_o"),
            steps=steps,
            dropout=dropout,
        )


def init_edge_states(batch, params):
    """h0_vw = ReLU(W_i cat(x_v, e_vw)) for every directed edge."""
    batch = as_batch(batch)
    inputs = np.concatenate([batch.X[batch.src], batch.edge_features], axis=1)
    if inputs.shape[1] != params.W_i.shape[1]:
        raise ShapeError(
            f"edge inputs have width {inputs.shape[1]} but W_i expects {params.W_i.shape[1]}")
    return gc.relu(gc.matmul(gc.constant(inputs), gc.transpose(params.W_i)))


def message_pass(batch, states, h0, params, W_m_t=None, train=False, rng=None):
    """One update: h_vw <- ReLU(h0_vw + W_m * sum_{k in N(v), k != w} h_kv)."""
    batch = as_batch(batch)
    if W_m_t is None:
        W_m_t = gc.transpose(params.W_m)
    messages = gc.gather_sum(states, batch.message_table)
    out = gc.relu(gc.add(h0, gc.matmul(messages, W_m_t)))
    return gc.dropout(out, params.dropout, train, rng)


def node_embeddings(batch, params, train=False, rng=None):
    """Node embedding cloud H (n_nodes x hidden) for every graph in the batch."""
    batch = as_batch(batch)
    X = gc.constant(batch.X)
    if batch.n_edges == 0:
        messages = gc.constant(np.zeros((batch.n_nodes, params.hidden)))
    else:
        h0 = init_edge_states(batch, params)
        h = h0
        W_m_t = gc.transpose(params.W_m)
        for _ in range(params.steps):
            h = message_pass(batch, h, h0, params, W_m_t, train, rng)
        messages = gc.gather_sum(h, batch.node_table)
    return gc.relu(gc.matmul(gc.concat(X, messages), gc.transpose(params.W_o)))


def aggregate(H, batch=None):
    """Sum node embeddings per graph: a 1 x hidden row, or (n_graphs x hidden)."""
    if H.shape[0] == 0:
        raise ShapeError("cannot aggregate an empty node cloud")
    if batch is None:
        return gc.tsum(H, axis=0)
    return gc.gather_sum(H, as_batch(batch).graph_table)
