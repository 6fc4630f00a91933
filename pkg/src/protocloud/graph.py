"""In-memory molecular graph shared by the parser, dataset and encoder."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class MolecularGraph:
    """Node features plus directed edges.

    Undirected bond ``k`` is stored as directed edges ``2k`` (u -> v) and
    ``2k + 1`` (v -> u), so the reverse of edge ``e`` is ``e ^ 1``.
    """

    node_features: np.ndarray
    edge_index: np.ndarray
    edge_features: np.ndarray
    label: float | None = None
    id: str = ""
    atoms: list = field(default_factory=list)
    bonds: list = field(default_factory=list)
    cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def n_nodes(self):
        return self.node_features.shape[0]

    @property
    def n_edges(self):
        return self.edge_index.shape[0]

    def undirected_edges(self):
        """Yield ``(src, dst, features)`` once per bond."""
        for k in range(0, self.n_edges, 2):
            src, dst = self.edge_index[k]
            yield int(src), int(dst), self.edge_features[k]

    @classmethod
    def from_undirected(cls, node_features, edges, edge_width, label=None, id=""):
        node_features = np.asarray(node_features, dtype=np.float64).reshape(len(node_features), -1)
        index = np.zeros((2 * len(edges), 2), dtype=np.int64)
        feats = np.zeros((2 * len(edges), edge_width))
        for k, (src, dst, f) in enumerate(edges):
            index[2 * k] = (src, dst)
            index[2 * k + 1] = (dst, src)
            feats[2 * k] = f
            feats[2 * k + 1] = f
        return cls(node_features, index, feats, label=label, id=id)

    def permuted(self, perm):
        """Relabel nodes so that new node ``i`` is old node ``perm[i]``."""
        perm = np.asarray(perm)
        inverse = np.empty_like(perm)
        inverse[perm] = np.arange(len(perm))
        return MolecularGraph(
            self.node_features[perm],
            inverse[self.edge_index],
            self.edge_features.copy(),
            label=self.label,
            id=self.id,
        )
