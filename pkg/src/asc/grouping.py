"""Adaptive superpixel layer: affinity graph, threshold gate, connected components, merging.

Tokens whose gated affinity exceeds ``edge_cut`` are joined by an undirected
edge; each connected component of that graph becomes one output token. The
hard partition carries no gradient, so the layer also returns a small
differentiable term tying the soft adjacency to the partition it produced,
which is what lets the threshold train.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import numeric as nm
from .errors import ConfigError, ContractError
from .numeric import Tensor

GROUPINGS = ("dfs", "tome")
MERGES = ("mean", "max")
AFFINITY_SOURCES = ("tokens", "keys")


@dataclass
class AscConfig:
    edge_cut: float = 0.5
    grouping: str = "dfs"
    merge: str = "mean"
    tome_r: int = 16
    affinity_source: str = "tokens"
    surrogate_weight: float = 0.1
    learnable_theta: bool = True
    theta_init: float = 0.2

    def __post_init__(self):
        if self.grouping not in GROUPINGS:
            raise ConfigError(f"grouping must be one of {GROUPINGS}, got {self.grouping!r}")
        if self.merge not in MERGES:
            raise ConfigError(f"merge must be one of {MERGES}, got {self.merge!r}")
        if self.affinity_source not in AFFINITY_SOURCES:
            raise ConfigError(f"affinity_source must be one of {AFFINITY_SOURCES}")
        if not 0.0 < self.edge_cut < 1.0:
            raise ConfigError("edge_cut must lie in (0, 1)")
        if self.tome_r < 0:
            raise ConfigError("tome_r must be non-negative")


@dataclass
class Partition:
    labels: np.ndarray
    count: int
    members: list[list[int]]

    @classmethod
    def from_labels(cls, labels) -> "Partition":
        labels = np.asarray(labels, dtype=np.int64)
        count = int(labels.max()) + 1 if labels.size else 0
        members = [[] for _ in range(count)]
        for i, c in enumerate(labels):
            members[c].append(i)
        if any(not m for m in members):
            raise ContractError("labels must cover 0..count-1 without gaps")
        return cls(labels, count, members)

    @classmethod
    def singletons(cls, n: int) -> "Partition":
        return cls.from_labels(np.arange(n))

    def assignment(self) -> np.ndarray:
        """(count, N) row-stochastic matrix whose rows average each component."""
        m = np.zeros((self.count, self.labels.size))
        for k, mem in enumerate(self.members):
            m[k, mem] = 1.0 / len(mem)
        return m


@dataclass
class OpCount:
    """Scalar-operation tally for the graph-building half of the layer."""
    similarity: int = 0
    binarize: int = 0
    traversal: int = 0

    @property
    def total(self) -> int:
        return self.similarity + self.binarize + self.traversal


# -- graph construction -----------------------------------------------------

def similarity(z, counter: OpCount | None = None) -> Tensor:
    """S = Z Z^T over the last two axes."""
    z = z if isinstance(z, Tensor) else Tensor(z)
    if counter is not None:
        *lead, n, d = z.shape
        counter.similarity += int(np.prod(lead, dtype=np.int64)) * n * n * d
    return nm.matmul(z, nm.transpose(z))


def gate(s, theta) -> Tensor:
    """A = sigmoid(S - theta)."""
    return nm.sigmoid(nm.sub(s, theta))


def binarize(a, edge_cut: float = 0.5, valid: np.ndarray | None = None,
             counter: OpCount | None = None) -> np.ndarray:
    """Boolean adjacency A > edge_cut with the diagonal (and invalid tokens) removed."""
    a = a.data if isinstance(a, Tensor) else np.asarray(a)
    e = a > edge_cut
    n = a.shape[-1]
    e &= ~np.eye(n, dtype=bool)
    if valid is not None:
        valid = np.asarray(valid, dtype=bool)
        e &= valid[..., :, None] & valid[..., None, :]
    if counter is not None:
        counter.binarize += a.size
    return e


def components(e: np.ndarray, counter: OpCount | None = None) -> Partition:
    """Connected components by depth-first search.

    Iterative version of the recursive DFS: nodes are marked on pop and
    neighbours pushed in descending order, so members are discovered in the
    same preorder the recursion would produce (``members`` keeps that order).
    Component ids follow the lowest-index member.
    """
    e = np.asarray(e, dtype=bool)
    if e.ndim != 2 or e.shape[0] != e.shape[1]:
        raise ContractError(f"adjacency must be square, got {e.shape}")
    if not np.array_equal(e, e.T):
        raise ContractError("adjacency must be symmetric")
    n = e.shape[0]
    labels = np.full(n, -1, dtype=np.int64)
    members: list[list[int]] = []
    for start in range(n):
        if labels[start] >= 0:
            continue
        cid = len(members)
        curr: list[int] = []
        stack = [start]
        while stack:
            node = stack.pop()
            if labels[node] >= 0:
                continue
            labels[node] = cid
            curr.append(node)
            nbrs = np.flatnonzero(e[node] & (labels < 0))
            if counter is not None:
                counter.traversal += n + nbrs.size
            stack.extend(nbrs[::-1].tolist())
        members.append(curr)
    return Partition(labels, len(members), members)


# -- merging ----------------------------------------------------------------

def merge_mean(z, part: Partition) -> Tensor:
    """Row k of the output is the mean of the member rows of component k."""
    z = z if isinstance(z, Tensor) else Tensor(z)
    if z.shape[-2] != part.labels.size:
        raise ContractError(f"partition covers {part.labels.size} tokens, input has {z.shape[-2]}")
    if any(not m for m in part.members):
        raise ContractError("empty component")
    return nm.matmul(part.assignment(), z)


def segment_max(z: Tensor, groups: list[list[list[int]]], width: int) -> Tensor:
    """Batched per-group elementwise max; out[b, k] = max over rows groups[b][k].

    Rows past len(groups[b]) are zero. The gradient goes to the arg-max member
    of each coordinate.
    """
    bsz, _, d = z.shape
    out = np.zeros((bsz, width, d))
    arg = np.zeros((bsz, width, d), dtype=np.int64)
    for b, comps in enumerate(groups):
        for k, mem in enumerate(comps):
            rows = z.data[b, mem]
            j = rows.argmax(axis=0)
            arg[b, k] = np.asarray(mem)[j]
            out[b, k] = rows[j, np.arange(d)]

    def back(g):
        gz = np.zeros(z.shape)
        cols = np.arange(d)
        for b, comps in enumerate(groups):
            for k in range(len(comps)):
                np.add.at(gz[b], (arg[b, k], cols), g[b, k])
        return (gz,)

    return nm._make("segment_max", out, (z,), back)


def merge_max(z, part: Partition) -> Tensor:
    z = z if isinstance(z, Tensor) else Tensor(z)
    if z.shape[-2] != part.labels.size:
        raise ContractError(f"partition covers {part.labels.size} tokens, input has {z.shape[-2]}")
    out = segment_max(nm.reshape(z, (1,) + z.shape), [part.members], part.count)
    return nm.reshape(out, (part.count, z.shape[-1]))


def tome_partition(s: np.ndarray, r: int) -> Partition:
    """Greedy bipartite matching in the style of ToMe.

    Even-indexed tokens form set A, odd-indexed set B. Every A token proposes
    its most similar B token; the ``r`` strongest proposals are accepted and
    each accepted A token joins its B partner. Ties go to the lower index.
    """
    s = np.asarray(s, dtype=np.float64)
    n = s.shape[0]
    if not 0 <= r <= n // 2:
        raise ValueError(f"merge count r={r} outside [0, {n // 2}]")
    a_idx = np.arange(0, n, 2)
    b_idx = np.arange(1, n, 2)
    group = np.arange(n)
    if r > 0 and b_idx.size:
        sub = s[np.ix_(a_idx, b_idx)]
        best = sub.argmax(axis=1)  # first max = lowest B index
        score = sub[np.arange(a_idx.size), best]
        order = np.lexsort((a_idx, -score))[:r]  # by score desc, then A index asc
        for k in order:
            group[a_idx[k]] = b_idx[best[k]]
    # ascending scan meets each group first at its lowest member
    ids: dict[int, int] = {}
    labels = np.array([ids.setdefault(int(g), len(ids)) for g in group], dtype=np.int64)
    return Partition.from_labels(labels)


def merge_tome(z, r: int) -> Tensor:
    """Merge ``r`` token pairs by greedy bipartite matching, N -> N - r."""
    z = z if isinstance(z, Tensor) else Tensor(z)
    s = z.data @ z.data.T
    return merge_mean(z, tome_partition(s, r))


# -- the layer --------------------------------------------------------------

@dataclass
class AscOutput:
    tokens: Tensor
    mask: np.ndarray
    partitions: list[Partition]
    aux: Tensor | None
    stats: dict = field(default_factory=dict)

    def diagnostics(self, layer: int) -> str:
        """One JSON line for the bench dump."""
        return json.dumps({"layer": layer, **self.stats}, sort_keys=True)


def _as3(z: Tensor) -> tuple[Tensor, bool]:
    if z.ndim == 2:
        return nm.reshape(z, (1,) + z.shape), True
    return z, False


def asc_layer(z, theta, cfg: AscConfig | None = None, mask: np.ndarray | None = None,
              keys: Tensor | None = None, counter: OpCount | None = None) -> AscOutput:
    """Group valid tokens into connected components and merge each to one token.

    ``z`` is (N, d) or (B, N, d); ``mask`` (B, N) marks valid rows. The output is
    padded to the largest component count in the batch, with a fresh mask.
    """
    cfg = cfg or AscConfig()
    z = z if isinstance(z, Tensor) else Tensor(z)
    theta = theta if isinstance(theta, Tensor) else Tensor(theta)
    z3, squeeze = _as3(z)
    bsz, n, d = z3.shape
    mask = np.ones((bsz, n), dtype=bool) if mask is None else np.asarray(mask, dtype=bool).reshape(bsz, n)

    src = z3
    if cfg.affinity_source == "keys":
        if keys is None:
            raise ConfigError("affinity_source='keys' needs key representations")
        src, _ = _as3(keys)
    s = similarity(src, counter)
    a = gate(s, theta)
    edges = binarize(a, cfg.edge_cut, mask, counter)

    parts: list[Partition] = []
    for b in range(bsz):
        idx = np.flatnonzero(mask[b])
        if cfg.grouping == "dfs":
            sub = components(edges[b][np.ix_(idx, idx)], counter)
        else:
            r = min(cfg.tome_r, idx.size // 2)
            sub = tome_partition(s.data[b][np.ix_(idx, idx)], r)
        parts.append(sub)
    width = max(p.count for p in parts)

    # lift each per-sample partition back to padded token indices
    groups = [[idx_list(mask[b], m) for m in p.members] for b, p in enumerate(parts)]
    if cfg.merge == "mean":
        assign = np.zeros((bsz, width, n))
        for b, comps in enumerate(groups):
            for k, mem in enumerate(comps):
                assign[b, k, mem] = 1.0 / len(mem)
        out = nm.matmul(assign, z3)
    else:
        out = segment_max(z3, groups, width)
    new_mask = np.zeros((bsz, width), dtype=bool)
    for b, p in enumerate(parts):
        new_mask[b, :p.count] = True

    aux = None
    if cfg.surrogate_weight > 0:
        aux = _surrogate(a, groups, mask, cfg.surrogate_weight)

    n_in = mask.sum(axis=1)
    n_out = new_mask.sum(axis=1)
    stats = {
        "N_in": float(n_in.mean()),
        "N_out": float(n_out.mean()),
        "theta": float(theta.data),
        "edge_count": int(edges.sum() // 2),
        "tokens_ratio": float((n_out / n_in).mean()),
    }
    if squeeze:
        out = nm.reshape(out, out.shape[1:])
        new_mask = new_mask[0]
    return AscOutput(out, new_mask, parts, aux, stats)


def idx_list(valid_row: np.ndarray, local: list[int]) -> list[int]:
    return np.flatnonzero(valid_row)[local].tolist()


def _surrogate(a: Tensor, groups, mask: np.ndarray, weight: float) -> Tensor | None:
    """weight * (mean A over cross-component pairs - mean A over within-component pairs).

    Minimizing it sharpens the soft adjacency toward the hard partition; it is
    the only path by which the threshold receives gradient.
    """
    bsz, n, _ = a.shape
    same = np.zeros((bsz, n, n), dtype=bool)
    for b, comps in enumerate(groups):
        for mem in comps:
            same[b][np.ix_(mem, mem)] = True
    pair = mask[:, :, None] & mask[:, None, :] & ~np.eye(n, dtype=bool)
    within = same & pair
    cross = ~same & pair
    w = np.zeros((bsz, n, n))
    if within.any():
        w[within] -= 1.0 / within.sum()
    if cross.any():
        w[cross] += 1.0 / cross.sum()
    if not w.any():
        return None
    return nm.scale(nm.sum(nm.mul(a, w)), weight)
