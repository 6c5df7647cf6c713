"""Time-flattened syndrome graphs and the action index <-> (node, time) map.

Node ``i`` carries the ``t`` detection events of spatial detector ``i`` as its
feature vector.  Every graph is complete with self-loops, so the edge list
holds all ``n_s**2`` ordered pairs.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DimensionError


@dataclass(frozen=True)
class SyndromeGraph:
    features: np.ndarray  # (n_s, t) float64 in {0.0, 1.0}

    def __post_init__(self):
        feats = np.array(self.features, dtype=np.float64)
        if feats.ndim != 2:
            raise DimensionError(f"node features must be 2-D, got shape {feats.shape}")
        if not np.all((feats == 0.0) | (feats == 1.0)):
            raise ContractError("node features must be 0.0 or 1.0")
        feats.setflags(write=False)
        object.__setattr__(self, "features", feats)

    @property
    def n_s(self) -> int:
        return self.features.shape[0]

    @property
    def t(self) -> int:
        return self.features.shape[1]

    @property
    def edges(self) -> np.ndarray:
        """(n_s**2, 2) array of (source, target) pairs, self-loops included."""
        src, dst = complete_edges(self.n_s)
        return np.stack([src, dst], axis=1)

    def bits(self) -> np.ndarray:
        return self.features.astype(np.uint8).ravel()

    def key(self) -> bytes:
        return self.bits().tobytes()

    def __eq__(self, other) -> bool:
        if not isinstance(other, SyndromeGraph):
            return NotImplemented
        return np.array_equal(self.features, other.features)

    def __hash__(self) -> int:
        return hash((self.features.shape, self.key()))


@functools.lru_cache(maxsize=64)
def complete_edges(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Source and target arrays for the complete digraph on ``n`` nodes."""
    dst, src = np.divmod(np.arange(n * n), n)
    src.setflags(write=False)
    dst.setflags(write=False)
    return src, dst


@functools.lru_cache(maxsize=256)
def batch_structure(n_graphs: int, n_nodes: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Edge sources, edge targets and node->graph ids for a disjoint union of complete graphs."""
    src, dst = complete_edges(n_nodes)
    offsets = np.repeat(np.arange(n_graphs) * n_nodes, n_nodes * n_nodes)
    all_src = np.tile(src, n_graphs) + offsets
    all_dst = np.tile(dst, n_graphs) + offsets
    graph_of = np.repeat(np.arange(n_graphs), n_nodes)
    for arr in (all_src, all_dst, graph_of):
        arr.setflags(write=False)
    return all_src, all_dst, graph_of


def to_graph(bits, n_s: int, t: int) -> SyndromeGraph:
    bits = np.asarray(getattr(bits, "bits", bits), dtype=np.float64).ravel()
    if bits.shape[0] != n_s * t:
        raise DimensionError(f"record has {bits.shape[0]} bits, expected n_s*t = {n_s * t}")
    return SyndromeGraph(bits.reshape(n_s, t))


def flatten(g: SyndromeGraph) -> np.ndarray:
    return g.bits()


def encode_action(node: int, time: int, t: int) -> int:
    return node * t + time


def decode_action(a: int, t: int) -> tuple[int, int]:
    node, time = divmod(int(a), t)
    return node, time


def apply_flip(g: SyndromeGraph, a: int) -> SyndromeGraph:
    """Return a copy of ``g`` with bit ``a`` toggled."""
    if not 0 <= a < g.n_s * g.t:
        raise ContractError(f"action {a} outside [0, {g.n_s * g.t})")
    node, time = decode_action(a, g.t)
    feats = g.features.copy()
    feats[node, time] = 1.0 - feats[node, time]
    return SyndromeGraph(feats)


def flip_bits(bits: np.ndarray, actions) -> np.ndarray:
    """Toggle every bit index in ``actions`` (repeats cancel) on a copy of a bit row."""
    out = np.array(bits, dtype=np.uint8).copy()
    for a in actions:
        out[a] ^= 1
    return out
