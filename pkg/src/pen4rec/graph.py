"""Directed session graphs with occurrence-normalised adjacency."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class SessionGraph:
    nodes: tuple[int, ...]
    alias: np.ndarray
    A_out: np.ndarray
    A_in: np.ndarray
    hop_powers_out: list[np.ndarray] = field(repr=False)
    hop_powers_in: list[np.ndarray] = field(repr=False)

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def max_hop(self) -> int:
        return len(self.hop_powers_out)


def _row_normalise(counts: np.ndarray) -> np.ndarray:
    totals = counts.sum(axis=1, keepdims=True)
    return np.divide(counts, totals, out=np.zeros_like(counts), where=totals > 0)


def hop_adjacency(base: np.ndarray, c: int) -> np.ndarray:
    """``base`` raised to the ``c``-th matrix power, without renormalising."""
    if c < 1:
        raise ValueError(f"hop count must be >= 1, got {c}")
    return np.linalg.matrix_power(np.asarray(base, dtype=np.float64), c)


def build_graph(items: Sequence[int], max_hop: int = 1) -> SessionGraph:
    """Build the session graph of ``items``.

    Nodes are the distinct items in first-occurrence order and ``alias[t]`` is
    the node of position ``t``. Each consecutive click ``u -> w`` is one edge
    occurrence. ``A_out[u, w]`` is the number of ``u -> w`` occurrences over
    all outgoing occurrences of ``u``; ``A_in`` applies the same rule to the
    reversed edges, so row ``w`` of ``A_in`` spreads over the predecessors of
    ``w``. Rows without edges stay zero.
    """
    items = [int(v) for v in items]
    if not items:
        raise ValueError("cannot build a graph from an empty session")
    if max_hop < 1:
        raise ValueError(f"max_hop must be >= 1, got {max_hop}")
    index: dict[int, int] = {}
    for v in items:
        index.setdefault(v, len(index))
    alias = np.array([index[v] for v in items], dtype=np.int64)
    n = len(index)
    counts = np.zeros((n, n))
    np.add.at(counts, (alias[:-1], alias[1:]), 1.0)
    A_out = _row_normalise(counts)
    A_in = _row_normalise(counts.T)
    return SessionGraph(
        nodes=tuple(index),
        alias=alias,
        A_out=A_out,
        A_in=A_in,
        hop_powers_out=[hop_adjacency(A_out, c) for c in range(1, max_hop + 1)],
        hop_powers_in=[hop_adjacency(A_in, c) for c in range(1, max_hop + 1)],
    )
