"""Influence graphs, the diffusion operator and random graph generators."""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from dvf import kernels


class GraphError(ValueError):
    pass


def _csr(n, rows, cols, data=None):
    """Row-compressed arrays for pairs already sorted by (row, col)."""
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.add.at(indptr, rows + 1, 1)
    np.cumsum(indptr, out=indptr)
    if data is None:
        data = np.ones(len(rows))
    return indptr, np.ascontiguousarray(cols, dtype=np.int64), np.ascontiguousarray(data, dtype=float)


class InfluenceGraph:
    """Directed agent graph; edge ``(i, j)`` means agent ``i`` influences agent ``j``.

    Edges are stored sorted by ``(i, j)`` and deduplicated. ``positions`` and
    ``channel`` are only set by the geometric generator (``channel`` holds
    ``H_ij`` aligned with :attr:`edges`, zero on self-loops). ``instance``
    labels the connected block each node came from when several graphs are
    merged with :func:`disjoint_union`.
    """

    def __init__(self, n, edges, *, self_loops=True, positions=None, channel=None, instance=None):
        n = int(n)
        if n < 1:
            raise GraphError("graph needs at least one node")
        e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        if e.size and (e.min() < 0 or e.max() >= n):
            raise GraphError(f"edge endpoint outside [0, {n})")
        if self_loops:
            loops = np.repeat(np.arange(n, dtype=np.int64)[:, None], 2, axis=1)
            e = np.concatenate([e, loops])
            if channel is not None:
                channel = np.concatenate([np.asarray(channel, float), np.zeros(n)])
        keys = e[:, 0] * n + e[:, 1]
        keys, first = np.unique(keys, return_index=True)
        self.n = n
        self.edges = np.stack([keys // n, keys % n], axis=1)
        self.channel = None if channel is None else np.asarray(channel, float)[first]
        self.positions = None if positions is None else np.asarray(positions, float)
        self.instance = np.zeros(n, dtype=np.int64) if instance is None else np.asarray(instance, np.int64)
        src, dst = self.edges[:, 0], self.edges[:, 1]
        self.in_degree = np.bincount(dst, minlength=n).astype(float)
        self.out_degree = np.bincount(src, minlength=n).astype(float)
        self.out_indptr, self.out_indices, _ = _csr(n, src, dst)
        order = np.lexsort((src, dst))
        self.in_indptr, self.in_indices, _ = _csr(n, dst[order], src[order])
        self._undirected = None

    def __repr__(self):
        return f"InfluenceGraph(n={self.n}, edges={len(self.edges)})"

    def __eq__(self, other):
        return (
            isinstance(other, InfluenceGraph)
            and self.n == other.n
            and np.array_equal(self.edges, other.edges)
        )

    @property
    def num_instances(self):
        return int(self.instance.max()) + 1

    def has_self_loops(self):
        loops = np.zeros(self.n, dtype=bool)
        loops[self.edges[self.edges[:, 0] == self.edges[:, 1], 0]] = True
        return bool(loops.all())

    def out_neighbors(self, i):
        return self.out_indices[self.out_indptr[i]:self.out_indptr[i + 1]]

    def in_neighbors(self, i):
        return self.in_indices[self.in_indptr[i]:self.in_indptr[i + 1]]

    def non_self_edges(self):
        mask = self.edges[:, 0] != self.edges[:, 1]
        return self.edges[mask]

    def adjacency(self):
        a = np.zeros((self.n, self.n))
        a[self.edges[:, 0], self.edges[:, 1]] = 1.0
        return a

    def undirected(self):
        """Symmetrised neighbourhoods without self-loops, as CSR ``(indptr, indices)``."""
        if self._undirected is None:
            e = self.non_self_edges()
            both = np.concatenate([e, e[:, ::-1]])
            keys = np.unique(both[:, 0] * self.n + both[:, 1])
            rows, cols = keys // self.n, keys % self.n
            indptr, indices, _ = _csr(self.n, rows, cols)
            self._undirected = (indptr, indices)
        return self._undirected

    def neighbors(self, i):
        """Undirected neighbourhood of ``i``, excluding ``i`` itself."""
        indptr, indices = self.undirected()
        return indices[indptr[i]:indptr[i + 1]]

    def column_normalized(self):
        """CSC arrays of ``A D^-1`` (each column sums to one)."""
        src, dst = self.edges[:, 0], self.edges[:, 1]
        order = np.lexsort((src, dst))
        rows, cols = src[order], dst[order]
        indptr = np.zeros(self.n + 1, dtype=np.int64)
        np.add.at(indptr, cols + 1, 1)
        np.cumsum(indptr, out=indptr)
        data = 1.0 / self.in_degree[cols]
        return indptr, np.ascontiguousarray(rows), data


def disjoint_union(graphs):
    """Merge graphs into one block-diagonal graph; ``instance`` records the block."""
    offset = 0
    edges, channel, positions, instance = [], [], [], []
    has_channel = all(g.channel is not None for g in graphs)
    has_pos = all(g.positions is not None for g in graphs)
    for b, g in enumerate(graphs):
        edges.append(g.edges + offset)
        if has_channel:
            channel.append(g.channel)
        if has_pos:
            positions.append(g.positions)
        instance.append(np.full(g.n, b, dtype=np.int64))
        offset += g.n
    return InfluenceGraph(
        offset,
        np.concatenate(edges),
        self_loops=False,
        channel=np.concatenate(channel) if has_channel else None,
        positions=np.concatenate(positions) if has_pos else None,
        instance=np.concatenate(instance),
    )


# ---------------------------------------------------------------------------
# diffusion operator


class DiffusionOperator:
    """Sparse ``gamma * A D^-1`` in column-compressed storage."""

    def __init__(self, n, gamma, indptr, indices, data):
        self.n = n
        self.gamma = float(gamma)
        self.indptr = indptr
        self.indices = indices
        self.data = data

    def apply(self, v):
        v = np.asarray(v, dtype=float)
        if v.shape[0] != self.n:
            raise ValueError(f"expected leading dimension {self.n}, got {v.shape[0]}")
        return kernels.csc_matmat(self.indptr, self.indices, self.data, v, self.n)

    __matmul__ = apply

    def power(self, v, k):
        """``Gamma^k v``."""
        out = np.asarray(v, dtype=float)
        for _ in range(int(k)):
            out = self.apply(out)
        return out

    def neumann(self, rewards):
        """``sum_t Gamma^{t+1} R^t`` for a reward sequence of shape ``(T, n, ...)``."""
        acc = np.zeros_like(np.asarray(rewards[0], dtype=float))
        for r in reversed(list(rewards)):
            acc = self.apply(r + acc)
        return acc

    def apply_rows(self, values):
        """Apply to each row of ``values`` (shape ``(S, n)``): returns ``values @ Gamma.T``."""
        return self.apply(np.asarray(values, float).T).T

    def dense(self):
        out = np.zeros((self.n, self.n))
        cols = np.repeat(np.arange(self.n), np.diff(self.indptr))
        out[self.indices, cols] = self.data
        return out

    def column_sums(self):
        return np.bincount(np.repeat(np.arange(self.n), np.diff(self.indptr)), weights=self.data, minlength=self.n)

    def norm1(self):
        return float(np.abs(self.column_sums()).max())


def build_diffusion(graph, gamma):
    if not 0.0 < gamma < 1.0:
        raise ValueError(f"gamma must lie in (0, 1), got {gamma}")
    if not graph.has_self_loops():
        raise GraphError("diffusion operator needs a self-connected graph")
    indptr, indices, data = graph.column_normalized()
    return DiffusionOperator(graph.n, gamma, indptr, indices, gamma * data)


# ---------------------------------------------------------------------------
# queries


def reachable_out(graph, i, m):
    """Nodes reachable from ``i`` along directed paths of length at most ``m``."""
    if not 0 <= i < graph.n:
        raise IndexError(f"node {i} out of range")
    if m < 0:
        raise ValueError("horizon must be non-negative")
    seen = {int(i)}
    frontier = deque([(int(i), 0)])
    while frontier:
        u, depth = frontier.popleft()
        if depth == m:
            continue
        for v in graph.out_neighbors(u):
            v = int(v)
            if v not in seen:
                seen.add(v)
                frontier.append((v, depth + 1))
    return seen


# ---------------------------------------------------------------------------
# generators


def _undirected_edges(pairs):
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    return np.concatenate([pairs, pairs[:, ::-1]])


def erdos_renyi(n, mean_degree, rng):
    if n < 1:
        raise GraphError("n must be positive")
    p = 0.0 if n == 1 else min(1.0, mean_degree / (n - 1))
    iu, ju = np.triu_indices(n, k=1)
    keep = rng.random(iu.size) < p
    return InfluenceGraph(n, _undirected_edges(np.stack([iu[keep], ju[keep]], axis=1)))


def barabasi_albert(n, m, rng):
    if m < 1 or n < m:
        raise GraphError(f"need 1 <= m <= n, got m={m}, n={n}")
    iu, ju = np.triu_indices(m, k=1)
    pairs = [np.stack([iu, ju], axis=1)]
    degree = np.zeros(n)
    degree[:m] = m - 1
    for new in range(m, n):
        weights = degree[:new]
        total = weights.sum()
        p = weights / total if total > 0 else None
        targets = np.sort(rng.choice(new, size=m, replace=False, p=p))
        pairs.append(np.stack([targets, np.full(m, new)], axis=1))
        degree[targets] += 1
        degree[new] = m
    return InfluenceGraph(n, _undirected_edges(np.concatenate(pairs)))


def channel_gain(distance):
    """Interference channel ``(d + 0.1)^-5``."""
    return (np.asarray(distance, float) + 0.1) ** -5.0


def geometric(n_min, n_max, threshold, rng):
    if not 1 <= n_min <= n_max:
        raise GraphError(f"invalid node range [{n_min}, {n_max}]")
    if threshold <= 0:
        raise GraphError("threshold must be positive")
    n = int(rng.integers(n_min, n_max + 1))
    pos = rng.random((n, 2))
    iu, ju = np.triu_indices(n, k=1)
    dist = np.linalg.norm(pos[iu] - pos[ju], axis=1)
    keep = dist < threshold
    pairs = np.stack([iu[keep], ju[keep]], axis=1)
    h = channel_gain(dist[keep])
    return InfluenceGraph(n, _undirected_edges(pairs), positions=pos, channel=np.concatenate([h, h]))


@dataclass
class BipartiteLayout:
    """Firefighter/home assignment: ``links[k] = (firefighter, home)``."""

    n_firefighters: int
    n_homes: int
    links: np.ndarray
    graph: InfluenceGraph = field(init=False)

    def __post_init__(self):
        self.links = np.asarray(self.links, dtype=np.int64).reshape(-1, 2)
        self.graph = self.influence_graph()

    def homes_of(self, i):
        return self.links[self.links[:, 0] == i, 1]

    def influence_graph(self):
        """Firefighters ``i, j`` influence each other iff they share a home."""
        inc = np.zeros((self.n_firefighters, self.n_homes))
        inc[self.links[:, 0], self.links[:, 1]] = 1.0
        share = inc @ inc.T > 0
        rows, cols = np.nonzero(share)
        return InfluenceGraph(self.n_firefighters, np.stack([rows, cols], axis=1))


def bipartite_firefight(n_firefighters, n_homes, edge_prob, rng, max_attempts=1000):
    if n_homes > 0 and 2 * n_firefighters > n_firefighters * n_homes:
        raise GraphError("each firefighter needs two homes but there are fewer than two")
    if not 0.0 < edge_prob <= 1.0:
        raise GraphError("edge probability must lie in (0, 1]")
    for _ in range(max_attempts):
        inc = rng.random((n_firefighters, n_homes)) < edge_prob
        if inc.sum(axis=1).min() >= 2 and inc.sum(axis=0).min() >= 1:
            rows, cols = np.nonzero(inc)
            return BipartiteLayout(n_firefighters, n_homes, np.stack([rows, cols], axis=1))
    raise GraphError(f"degree constraints not met after {max_attempts} attempts")


def generate(kind, seed, **params):
    """Seeded front door for all generators."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if kind == "erdos_renyi":
        return erdos_renyi(params["n"], params.get("mean_degree", 3.0), rng)
    if kind == "barabasi_albert":
        return barabasi_albert(params["n"], params.get("m", 3), rng)
    if kind == "geometric":
        return geometric(params.get("n_min", 20), params.get("n_max", 50), params.get("threshold", 0.25), rng)
    if kind == "bipartite_firefight":
        return bipartite_firefight(
            params.get("n_firefighters", 20), params.get("n_homes", 40), params.get("edge_prob", 0.15), rng
        )
    raise ValueError(f"unknown graph kind {kind!r}")


# ---------------------------------------------------------------------------
# edge GMDP transform


@dataclass
class EdgeGraph:
    """Communication edges as agents.

    ``agent_edges[e] = (tail, head)``; ``links`` holds index pairs ``(e, f)``
    with ``e == f`` or ``head(e) == tail(f)``. Padding agents ``(i, i)`` stand
    in for nodes without outgoing edges when ``pad_sinks`` was requested.
    """

    n_nodes: int
    agent_edges: np.ndarray
    links: np.ndarray
    padded: np.ndarray

    @property
    def n_agents(self):
        return len(self.agent_edges)

    def origin(self, e):
        return tuple(int(x) for x in self.agent_edges[e])

    def influence_graph(self):
        return InfluenceGraph(self.n_agents, self.links, self_loops=False)


def edge_transform(graph, pad_sinks=False):
    comm = graph.non_self_edges()
    if len(comm) == 0 and not pad_sinks:
        raise GraphError("communication graph has no edges")
    padded = np.zeros(len(comm), dtype=bool)
    if pad_sinks:
        has_out = np.zeros(graph.n, dtype=bool)
        has_out[comm[:, 0]] = True
        sinks = np.flatnonzero(~has_out)
        comm = np.concatenate([comm, np.stack([sinks, sinks], axis=1)])
        padded = np.concatenate([padded, np.ones(len(sinks), dtype=bool)])
        order = np.lexsort((comm[:, 1], comm[:, 0]))
        comm, padded = comm[order], padded[order]
    m = len(comm)
    # edges grouped by tail
    by_tail = np.argsort(comm[:, 0], kind="stable")
    starts = np.searchsorted(comm[by_tail, 0], np.arange(graph.n))
    ends = np.searchsorted(comm[by_tail, 0], np.arange(graph.n), side="right")
    heads = comm[:, 1]
    counts = ends[heads] - starts[heads]
    e_idx = np.repeat(np.arange(m), counts)
    f_idx = np.concatenate([by_tail[starts[h]:ends[h]] for h in heads]) if m else np.zeros(0, np.int64)
    keep = e_idx != f_idx
    pairs = np.concatenate([np.stack([e_idx[keep], f_idx[keep]], axis=1), np.repeat(np.arange(m)[:, None], 2, 1)])
    keys = np.unique(pairs[:, 0] * m + pairs[:, 1])
    links = np.stack([keys // m, keys % m], axis=1)
    return EdgeGraph(graph.n, comm, links, padded)


# ---------------------------------------------------------------------------
# serialisation


def dumps(graph):
    lines = [f"{graph.n} {len(graph.edges)}"]
    lines += [f"{i} {j}" for i, j in graph.edges]
    if graph.positions is not None:
        lines.append("positions")
        lines += [f"{i} {x!r} {y!r}" for i, (x, y) in enumerate(graph.positions.tolist())]
    return "\n".join(lines) + "\n"


def loads(text):
    rows = [ln.split() for ln in text.splitlines() if ln.strip()]
    n, m = int(rows[0][0]), int(rows[0][1])
    edges = np.array([[int(a), int(b)] for a, b in rows[1:1 + m]], dtype=np.int64).reshape(-1, 2)
    positions = None
    rest = rows[1 + m:]
    if rest and rest[0] == ["positions"]:
        positions = np.zeros((n, 2))
        for i, x, y in rest[1:]:
            positions[int(i)] = float(x), float(y)
    channel = None
    if positions is not None:
        d = np.linalg.norm(positions[edges[:, 0]] - positions[edges[:, 1]], axis=1)
        channel = np.where(edges[:, 0] == edges[:, 1], 0.0, channel_gain(d))
    return InfluenceGraph(n, edges, self_loops=False, positions=positions, channel=channel)
