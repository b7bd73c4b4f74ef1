"""Concatenation of several graphs into one block-diagonal batch."""

from __future__ import annotations

from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .graph import Graph


def row_classes(values: np.ndarray) -> np.ndarray:
    """Class per row such that equal classes mean identical rows."""
    if len(values) == 0:
        return np.zeros(0, dtype=np.int64)
    _, inverse = np.unique(values, axis=0, return_inverse=True)
    return inverse.reshape(-1).astype(np.int64)


def feature_classes(g: Graph) -> np.ndarray:
    return row_classes(g.features)


class GraphBatch:
    """Graphs stacked node-wise; node ``i`` of graph ``j`` sits at ``offsets[j] + i``."""

    def __init__(self, graphs: Sequence[Graph]):
        if not graphs:
            raise ValueError("empty batch")
        self.graphs = list(graphs)
        sizes = np.array([g.n for g in self.graphs], dtype=np.int64)
        self.sizes = sizes
        self.offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.int64)
        self.num_nodes = int(sizes.sum())
        self.num_graphs = len(self.graphs)
        self.graph_of_node = np.repeat(np.arange(self.num_graphs), sizes)
        widths = {g.features.shape[1] for g in self.graphs}
        if len(widths) != 1:
            raise ValueError(f"graphs disagree on feature width: {sorted(widths)}")
        self.features = np.vstack([g.features for g in self.graphs])
        self._mean_adj = None
        self._readout = {}

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def graph_labels(self) -> np.ndarray:
        return np.array([g.graph_label for g in self.graphs], dtype=np.int64)

    def node_labels(self) -> np.ndarray:
        return np.concatenate([g.node_labels for g in self.graphs])

    def mean_adjacency(self) -> sp.csr_matrix:
        """Row ``v`` averages over the neighbors of ``v``; empty rows for isolated nodes."""
        if self._mean_adj is None:
            rows, cols, vals = [], [], []
            for g, off in zip(self.graphs, self.offsets):
                deg = g.degrees()
                src = np.repeat(np.arange(g.n), deg)
                rows.append(src + off)
                cols.append(g.indices + off)
                vals.append(1.0 / deg[src])
            self._mean_adj = sp.csr_matrix(
                (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                shape=(self.num_nodes, self.num_nodes))
        return self._mean_adj

    def readout_matrix(self, mode: str = "sum") -> sp.csr_matrix:
        if mode not in ("sum", "mean"):
            raise ValueError(f"unknown readout mode {mode!r}")
        if mode not in self._readout:
            weights = np.ones(self.num_nodes)
            if mode == "mean":
                weights = 1.0 / self.sizes[self.graph_of_node]
            self._readout[mode] = sp.csr_matrix(
                (weights, (self.graph_of_node, np.arange(self.num_nodes))),
                shape=(self.num_graphs, self.num_nodes))
        return self._readout[mode]
