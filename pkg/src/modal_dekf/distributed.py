"""Diffusion Kalman filtering over an undirected PMU communication graph.

The network is simulated as synchronous, lossless, zero-latency rounds.  Each
round has two phases separated by a barrier:

1. Incremental update: every node folds the measurements of its neighbors
   (ascending id, self included) into a pre-estimate via sequential scalar
   updates.
2. Diffusion update: every node replaces its estimate with a convex
   combination of the neighbors' pre-estimates.  The error covariance is NOT
   touched by diffusion, so it is no longer a true covariance afterwards.

Two variants are provided: ``dekf_run`` keeps the full system state at every
node; ``dekfr_run`` keeps only the amplitudes of a node's own neighbors plus
the shared mode block, with amplitude diffusion running across the nodes
that estimate the same block.

All reads go through a :class:`RoundMailbox`, which rejects access to
non-neighbor data; the compiled fast path is structurally local because it
only ever indexes flattened neighbor arrays.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cekf import EstimateTrace, FilterConfig, extract_modes, _lag1_autocorr
from .errors import FilterDivergenceError, ModalDekfError, ValidationError
from .signal_model import (
    MeasurementWindow,
    ReducedState,
    SystemState,
    jacobian_matrix,
    propagate_vector,
    state_dim,
)

DEKF_DEFAULT_R = 1e-4
DEKF_DEFAULT_Q_MODE = 1e-8


# ---------------------------------------------------------------------------
# Topology
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Topology:
    """Undirected connected communication graph with self-inclusive
    neighbor sets."""

    node_count: int
    edges: frozenset
    neighbors: tuple[tuple[int, ...], ...]

    def degree(self, m: int) -> int:
        return len(self.neighbors[m])

    def are_neighbors(self, a: int, b: int) -> bool:
        return b in self.neighbors[a]

    def common_neighbors(self, a: int, b: int) -> tuple[int, ...]:
        return tuple(sorted(set(self.neighbors[a]) & set(self.neighbors[b])))


def topology_from_edge_list(edges, node_count: int) -> Topology:
    """Build and validate a topology from unordered node-id pairs.

    Self-loops are implicit (every node neighbors itself); the graph must be
    connected.
    """
    if node_count < 1:
        raise ValidationError("node_count must be >= 1")
    canon = set()
    for u, v in edges:
        u, v = int(u), int(v)
        if u == v:
            continue
        if not (0 <= u < node_count and 0 <= v < node_count):
            raise ValidationError(f"edge ({u}, {v}) out of range for {node_count} nodes")
        canon.add((min(u, v), max(u, v)))
    adj = [set([m]) for m in range(node_count)]
    for u, v in canon:
        adj[u].add(v)
        adj[v].add(u)
    # connectivity by traversal
    seen = {0}
    stack = [0]
    while stack:
        u = stack.pop()
        for v in adj[u]:
            if v not in seen:
                seen.add(v)
                stack.append(v)
    if len(seen) != node_count:
        raise ValidationError("graph must be connected")
    return Topology(node_count, frozenset(canon),
                    tuple(tuple(sorted(a)) for a in adj))


def ring_topology(m: int) -> Topology:
    """Cycle of m nodes (a single edge for m = 2)."""
    if m < 2:
        raise ValidationError("ring requires at least 2 nodes")
    edges = [(i, (i + 1) % m) for i in range(m)] if m > 2 else [(0, 1)]
    return topology_from_edge_list(edges, m)


def complete_topology(m: int) -> Topology:
    if m < 1:
        raise ValidationError("complete graph requires at least 1 node")
    edges = [(i, j) for i in range(m) for j in range(i + 1, m)]
    return topology_from_edge_list(edges, m)


def parse_topology(spec: str, node_count: int | None = None) -> Topology:
    """Parse ``ring:M``, ``complete:M`` or an edge-list file path.

    Edge-list files contain one ``u v`` pair per line, 0-indexed; blank
    lines and ``#`` comments are ignored.  ``node_count`` overrides the
    inferred node count for files.
    """
    if spec.startswith("ring:"):
        return ring_topology(int(spec.split(":", 1)[1]))
    if spec.startswith("complete:"):
        return complete_topology(int(spec.split(":", 1)[1]))
    edges = []
    with open(spec, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 2:
                raise ValidationError(f"malformed edge line: {line!r}")
            edges.append((int(parts[0]), int(parts[1])))
    if node_count is None:
        if not edges:
            raise ValidationError("edge list file is empty")
        node_count = max(max(u, v) for u, v in edges) + 1
    return topology_from_edge_list(edges, node_count)


# ---------------------------------------------------------------------------
# Diffusion weights
# ---------------------------------------------------------------------------

_WEIGHT_TOL = 1e-12


@dataclass(frozen=True)
class DiffusionWeights:
    """Convex combination weights c[m][i] aligned with the sorted neighbor
    list of node m; every row sums to one."""

    topology: Topology
    rows: tuple[np.ndarray, ...]

    def __post_init__(self):
        if len(self.rows) != self.topology.node_count:
            raise ValidationError("one weight row per node required")
        rows = []
        for m, row in enumerate(self.rows):
            row = np.asarray(row, dtype=float)
            if row.shape != (self.topology.degree(m),):
                raise ValidationError(f"weight row {m} has wrong length")
            if (row < 0).any() or abs(row.sum() - 1.0) > _WEIGHT_TOL:
                raise ValidationError(f"weights of node {m} must be nonnegative and sum to 1")
            rows.append(row)
        object.__setattr__(self, "rows", tuple(rows))

    def weight(self, m: int, j: int) -> float:
        return float(self.rows[m][self.topology.neighbors[m].index(j)])


@dataclass(frozen=True)
class ReducedDiffusionWeights:
    """Per-block weights d[(m, j)][k] over the sorted common neighborhood
    of m and j; every entry sums to one."""

    topology: Topology
    entries: dict

    def __post_init__(self):
        fixed = {}
        for m in range(self.topology.node_count):
            for j in self.topology.neighbors[m]:
                common = self.topology.common_neighbors(m, j)
                row = np.asarray(self.entries[(m, j)], dtype=float)
                if row.shape != (len(common),):
                    raise ValidationError(f"d-weights for ({m}, {j}) have wrong length")
                if (row < 0).any() or abs(row.sum() - 1.0) > _WEIGHT_TOL:
                    raise ValidationError(
                        f"d-weights for ({m}, {j}) must be nonnegative and sum to 1")
                fixed[(m, j)] = row
        object.__setattr__(self, "entries", fixed)

    def row(self, m: int, j: int) -> np.ndarray:
        return self.entries[(m, j)]


def uniform_weights(topology: Topology) -> DiffusionWeights:
    """c[m][j] = 1/|N_m| over each neighbor."""
    rows = tuple(np.full(topology.degree(m), 1.0 / topology.degree(m))
                 for m in range(topology.node_count))
    return DiffusionWeights(topology, rows)


def uniform_reduced_weights(topology: Topology) -> ReducedDiffusionWeights:
    """d[m, j, i] = 1/|N_m intersect N_j| over each common neighbor."""
    entries = {}
    for m in range(topology.node_count):
        for j in topology.neighbors[m]:
            common = topology.common_neighbors(m, j)
            entries[(m, j)] = np.full(len(common), 1.0 / len(common))
    return ReducedDiffusionWeights(topology, entries)


# ---------------------------------------------------------------------------
# Round-based exchange
# ---------------------------------------------------------------------------

class RoundMailbox:
    """Synchronous per-round message store enforcing neighbor-only reads."""

    def __init__(self, topology: Topology):
        self.topology = topology
        self._round = -1
        self._measurements = None
        self._pre_estimates = {}

    def begin_round(self, k: int, measurements: np.ndarray):
        self._round = k
        self._measurements = measurements
        self._pre_estimates = {}

    def _check(self, reader: int, source: int, what: str):
        if not self.topology.are_neighbors(reader, source):
            raise ValidationError(
                f"locality violation: node {reader} read {what} of non-neighbor {source}")

    def measurement(self, reader: int, source: int) -> float:
        self._check(reader, source, "measurement")
        return float(self._measurements[source])

    def post_pre_estimate(self, node: int, value: np.ndarray):
        self._pre_estimates[node] = value

    def pre_estimate(self, reader: int, source: int) -> np.ndarray:
        self._check(reader, source, "pre-estimate")
        return self._pre_estimates[source]


@dataclass
class NodeState:
    """Per-node filter bookkeeping during a run."""

    estimate: np.ndarray
    covariance: np.ndarray
    config: FilterConfig


def default_node_configs(
    topology: Topology,
    l_modes: int,
    reduced: bool,
    r: float = DEKF_DEFAULT_R,
    q_mode: float = DEKF_DEFAULT_Q_MODE,
    p0_amp: float = 1e-2,
    p0_omega: float = 1e-2,
    p0_sigma: float = 1e-2,
) -> list[FilterConfig]:
    """One FilterConfig per node; reduced layouts size p0 to 2|N_m|L + 2L.

    ``r_diag`` is indexed by global channel id at every node.
    """
    configs = []
    for m in range(topology.node_count):
        blocks = topology.degree(m) if reduced else topology.node_count
        n = state_dim(blocks, l_modes)
        p0 = np.full(n, p0_amp)
        p0[n - 2 * l_modes::2] = p0_omega
        p0[n - 2 * l_modes + 1::2] = p0_sigma
        configs.append(FilterConfig(np.full(topology.node_count, r),
                                    np.full(2 * l_modes, q_mode), p0))
    return configs


def _scalar_block_update(x, p, y_obs, lo, hi, r, step, node):
    """Assimilate one block-sum observation; mutates x and p in place."""
    ph = p[:, lo:hi].sum(axis=1)
    s = r + ph[lo:hi].sum()
    if not np.isfinite(s) or s <= 0.0:
        raise FilterDivergenceError("scalar innovation covariance not positive", step, node)
    gain = ph / s
    innov = y_obs - x[lo:hi].sum()
    x += gain * innov
    p -= np.outer(gain, ph)
    return innov


def _predict_node(x_post, p_post, q_diag, l_modes, fs):
    predicted = propagate_vector(x_post, l_modes, fs)
    f = jacobian_matrix(x_post, l_modes, fs)
    p_pred = f @ p_post @ f.T
    p_pred[np.diag_indices_from(p_pred)] += q_diag
    return predicted, 0.5 * (p_pred + p_pred.T)


def _node_trace(states_m, final_state, p_final, innov_norms) -> EstimateTrace:
    return EstimateTrace(
        states=states_m,
        final_state=final_state,
        final_covariance=p_final,
        innovation_norms=innov_norms,
        modes=extract_modes(final_state),
        innovation_lag1_autocorr=float("nan"),
    )


def _flatten_topology(topology: Topology):
    indptr = np.zeros(topology.node_count + 1, dtype=np.int32)
    indices = []
    for m in range(topology.node_count):
        indices.extend(topology.neighbors[m])
        indptr[m + 1] = len(indices)
    return indptr, np.asarray(indices, dtype=np.int32)


# ---------------------------------------------------------------------------
# Full-state diffusion filter
# ---------------------------------------------------------------------------

def dekf_run(
    window: MeasurementWindow,
    topology: Topology,
    weights: DiffusionWeights,
    init_states,
    configs,
    backend: str | None = None,
    node_order=None,
    mailbox: RoundMailbox | None = None,
) -> list[EstimateTrace]:
    """Run the full-state diffusion filter; returns one trace per node.

    ``node_order`` permutes the per-round processing order (results are
    order-independent thanks to the two-phase barrier); ``mailbox`` lets
    tests substitute an instrumented exchange.  Both force the NumPy path.
    """
    from . import backend as backend_mod

    m_nodes = topology.node_count
    if window.n_channels != m_nodes:
        raise ValidationError("window channel count must equal the node count")
    if len(init_states) != m_nodes or len(configs) != m_nodes:
        raise ValidationError("one init state and one config per node required")
    if weights.topology is not topology and weights.topology != topology:
        raise ValidationError("weights were built for a different topology")
    l_modes = init_states[0].l_modes
    n = state_dim(m_nodes, l_modes)
    for st, cf in zip(init_states, configs):
        if st.dim != n or st.l_modes != l_modes:
            raise ValidationError("all node states must share the full-state layout")
        if cf.dim != n or cf.r_diag.size != m_nodes:
            raise ValidationError("node config dimensions inconsistent with the graph")

    x0s = np.stack([st.to_vector() for st in init_states])
    use_python = node_order is not None or mailbox is not None
    which = "python" if use_python else backend_mod.resolve_backend(backend)

    if which == "compiled":
        kernels = backend_mod.compiled_kernels()
        indptr, indices = _flatten_topology(topology)
        c_flat = np.concatenate([w for w in weights.rows])
        r_nodes = np.stack([cf.r_diag for cf in configs])
        q_nodes = np.stack([cf.q_diag_full() for cf in configs])
        p0s = np.stack([np.diag(cf.p0_diag) for cf in configs])
        states, p_finals, innov_norms, fail_step, fail_node = kernels.dekf_loop(
            np.ascontiguousarray(window.samples.T), indptr, indices, c_flat,
            r_nodes, q_nodes, x0s, p0s, window.fs, l_modes)
        if fail_step >= 0:
            raise FilterDivergenceError("filter diverged", int(fail_step), int(fail_node))
        return [
            _node_trace(states[:, m, :],
                        SystemState.from_vector(states[-1, m], m_nodes, l_modes),
                        p_finals[m], innov_norms[:, m])
            for m in range(m_nodes)
        ]

    order = list(range(m_nodes)) if node_order is None else list(node_order)
    if sorted(order) != list(range(m_nodes)):
        raise ValidationError("node_order must be a permutation of all nodes")
    box = mailbox if mailbox is not None else RoundMailbox(topology)

    nodes = [NodeState(x0s[m].copy(), np.diag(configs[m].p0_diag), configs[m])
             for m in range(m_nodes)]
    n_steps = window.n_samples
    traces = np.empty((n_steps, m_nodes, n))
    innov_norms = np.empty((n_steps, m_nodes))
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(n_steps):
            box.begin_round(k, window.samples[:, k])
            pre_p = [None] * m_nodes
            for m in order:  # incremental updates
                node = nodes[m]
                phi = node.estimate.copy()
                p = node.covariance.copy()
                sq = 0.0
                for j in topology.neighbors[m]:
                    y_j = box.measurement(m, j)
                    innov = _scalar_block_update(
                        phi, p, y_j, j * 2 * l_modes, (j + 1) * 2 * l_modes,
                        node.config.r_diag[j], k, m)
                    sq += innov * innov
                box.post_pre_estimate(m, phi)
                pre_p[m] = 0.5 * (p + p.T)
                innov_norms[k, m] = np.sqrt(sq)
            for m in order:  # diffusion + prediction (barrier passed)
                x_new = np.zeros(n)
                for idx, j in enumerate(topology.neighbors[m]):
                    x_new += weights.rows[m][idx] * box.pre_estimate(m, j)
                if not np.isfinite(x_new).all():
                    raise FilterDivergenceError("non-finite state", k, m)
                traces[k, m] = x_new
                nodes[m].estimate, nodes[m].covariance = _predict_node(
                    x_new, pre_p[m], nodes[m].config.q_diag_full(), l_modes, window.fs)
            last_p = pre_p
    return [
        _node_trace(traces[:, m, :],
                    SystemState.from_vector(traces[-1, m], m_nodes, l_modes),
                    last_p[m], innov_norms[:, m])
        for m in range(m_nodes)
    ]


# ---------------------------------------------------------------------------
# Reduced-state diffusion filter
# ---------------------------------------------------------------------------

class _ReducedPlan:
    """Precomputed index maps for the reduced filter.

    For every node m and neighbor j, amplitude diffusion gathers block j
    from each contributor i in N_m intersect N_j; ``diffusion[m][j_idx]``
    lists ``(i, block index of j within i, weight)``.
    """

    def __init__(self, topology: Topology, d_weights: ReducedDiffusionWeights):
        self.topology = topology
        self.block_of = []
        for m in range(topology.node_count):
            self.block_of.append({j: idx for idx, j in enumerate(topology.neighbors[m])})
        self.diffusion = []
        for m in range(topology.node_count):
            per_neighbor = []
            for j in topology.neighbors[m]:
                contributors = topology.common_neighbors(m, j)
                row = d_weights.row(m, j)
                entry = []
                for pos, i in enumerate(contributors):
                    if j not in self.block_of[i]:
                        raise ModalDekfError(
                            f"internal invariant violation: node {i} lacks a block for {j}")
                    entry.append((i, self.block_of[i][j], float(row[pos])))
                per_neighbor.append(entry)
            self.diffusion.append(per_neighbor)


def dekfr_run(
    window: MeasurementWindow,
    topology: Topology,
    c_weights: DiffusionWeights,
    d_weights: ReducedDiffusionWeights,
    init_states,
    configs,
    backend: str | None = None,
    node_order=None,
    mailbox: RoundMailbox | None = None,
) -> list[EstimateTrace]:
    """Run the reduced-state diffusion filter; returns one trace per node."""
    from . import backend as backend_mod

    m_nodes = topology.node_count
    if window.n_channels != m_nodes:
        raise ValidationError("window channel count must equal the node count")
    if len(init_states) != m_nodes or len(configs) != m_nodes:
        raise ValidationError("one init state and one config per node required")
    l_modes = init_states[0].l_modes
    dims = []
    for m, (st, cf) in enumerate(zip(init_states, configs)):
        if not isinstance(st, ReducedState):
            raise ValidationError("dekfr_run expects ReducedState initializations")
        if st.owner != m or st.neighbor_ids != topology.neighbors[m]:
            raise ValidationError(f"init state of node {m} does not match its neighborhood")
        if st.l_modes != l_modes:
            raise ValidationError("all nodes must share the mode count")
        if cf.dim != st.dim or cf.r_diag.size != m_nodes:
            raise ValidationError("node config dimensions inconsistent with the graph")
        dims.append(st.dim)

    plan = _ReducedPlan(topology, d_weights)
    use_python = node_order is not None or mailbox is not None
    which = "python" if use_python else backend_mod.resolve_backend(backend)

    if which == "compiled":
        kernels = backend_mod.compiled_kernels()
        indptr, indices = _flatten_topology(topology)
        c_flat = np.concatenate([w for w in c_weights.rows])
        nmax = max(dims)
        x0s = np.zeros((m_nodes, nmax))
        p0s = np.zeros((m_nodes, nmax, nmax))
        q_nodes = np.zeros((m_nodes, nmax))
        for m in range(m_nodes):
            x0s[m, :dims[m]] = init_states[m].to_vector()
            p0s[m, :dims[m], :dims[m]] = np.diag(configs[m].p0_diag)
            q_nodes[m, :dims[m]] = configs[m].q_diag_full()
        r_nodes = np.stack([cf.r_diag for cf in configs])
        # flatten the amplitude-diffusion tables in edge order
        dtab_indptr = [0]
        contrib_node, contrib_block, contrib_weight = [], [], []
        for m in range(m_nodes):
            for entry in plan.diffusion[m]:
                for i, blk, w in entry:
                    contrib_node.append(i)
                    contrib_block.append(blk)
                    contrib_weight.append(w)
                dtab_indptr.append(len(contrib_node))
        states, p_finals, innov_norms, fail_step, fail_node = kernels.dekfr_loop(
            np.ascontiguousarray(window.samples.T), indptr, indices, c_flat,
            np.asarray(dims, dtype=np.int32),
            np.asarray(dtab_indptr, dtype=np.int32),
            np.asarray(contrib_node, dtype=np.int32),
            np.asarray(contrib_block, dtype=np.int32),
            np.asarray(contrib_weight, dtype=float),
            r_nodes, q_nodes, x0s, p0s, window.fs, l_modes)
        if fail_step >= 0:
            raise FilterDivergenceError("filter diverged", int(fail_step), int(fail_node))
        return [
            _node_trace(states[:, m, :dims[m]],
                        ReducedState.from_vector(states[-1, m, :dims[m]], m,
                                                 topology.neighbors[m], l_modes),
                        p_finals[m, :dims[m], :dims[m]], innov_norms[:, m])
            for m in range(m_nodes)
        ]

    order = list(range(m_nodes)) if node_order is None else list(node_order)
    if sorted(order) != list(range(m_nodes)):
        raise ValidationError("node_order must be a permutation of all nodes")
    box = mailbox if mailbox is not None else RoundMailbox(topology)

    nodes = [NodeState(init_states[m].to_vector(), np.diag(configs[m].p0_diag), configs[m])
             for m in range(m_nodes)]
    n_steps = window.n_samples
    traces = [np.empty((n_steps, dims[m])) for m in range(m_nodes)]
    innov_norms = np.empty((n_steps, m_nodes))
    two_l = 2 * l_modes
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(n_steps):
            box.begin_round(k, window.samples[:, k])
            pre_p = [None] * m_nodes
            for m in order:  # incremental updates over the reduced layout
                node = nodes[m]
                phi = node.estimate.copy()
                p = node.covariance.copy()
                sq = 0.0
                for j_idx, j in enumerate(topology.neighbors[m]):
                    y_j = box.measurement(m, j)
                    innov = _scalar_block_update(
                        phi, p, y_j, j_idx * two_l, (j_idx + 1) * two_l,
                        node.config.r_diag[j], k, m)
                    sq += innov * innov
                box.post_pre_estimate(m, phi)
                pre_p[m] = 0.5 * (p + p.T)
                innov_norms[k, m] = np.sqrt(sq)
            for m in order:  # diffusion + prediction
                x_new = np.zeros(dims[m])
                for j_idx, j in enumerate(topology.neighbors[m]):
                    blk = slice(j_idx * two_l, (j_idx + 1) * two_l)
                    for i, i_blk, w in plan.diffusion[m][j_idx]:
                        phi_i = box.pre_estimate(m, i)
                        x_new[blk] += w * phi_i[i_blk * two_l:(i_blk + 1) * two_l]
                mode_slice = slice(dims[m] - two_l, dims[m])
                for idx, j in enumerate(topology.neighbors[m]):
                    phi_j = box.pre_estimate(m, j)
                    x_new[mode_slice] += c_weights.rows[m][idx] * phi_j[dims[j] - two_l:dims[j]]
                if not np.isfinite(x_new).all():
                    raise FilterDivergenceError("non-finite state", k, m)
                traces[m][k] = x_new
                nodes[m].estimate, nodes[m].covariance = _predict_node(
                    x_new, pre_p[m], nodes[m].config.q_diag_full(), l_modes, window.fs)
            last_p = pre_p
    return [
        _node_trace(traces[m],
                    ReducedState.from_vector(traces[m][-1], m, topology.neighbors[m], l_modes),
                    last_p[m], innov_norms[:, m])
        for m in range(m_nodes)
    ]


def consensus_spread(traces) -> tuple[float, float]:
    """Cross-node disagreement of the final mode estimates.

    Returns the max over modes of (max - min)/|mean| for frequencies and
    dampings separately.
    """
    if len(traces) < 2:
        raise ValidationError("consensus spread requires at least 2 nodes")
    n_modes = len(traces[0].modes)
    freq_spread = 0.0
    sigma_spread = 0.0
    for li in range(n_modes):
        freqs = np.array([t.modes[li].freq_hz for t in traces])
        sigmas = np.array([t.modes[li].sigma for t in traces])
        for values, acc in ((freqs, "f"), (sigmas, "s")):
            mean = np.abs(values.mean())
            span = values.max() - values.min()
            rel = span / mean if mean > 0 else (0.0 if span == 0 else float("inf"))
            if acc == "f":
                freq_spread = max(freq_spread, rel)
            else:
                sigma_spread = max(sigma_spread, rel)
    return freq_spread, sigma_spread
