"""Coupled linear system model and its decomposition into subsystems.

A global discrete-time plant ``x+ = A x + B u`` with polytopic state and
input constraints is split along a user-supplied partition into subsystems.
Each subsystem sees its neighborhood (itself plus every subsystem coupled to
it through dynamics, constraints, or cost) and owns a slice of the dynamics,
of the constraint rows, and of the stage cost.

Projections are kept as index arrays; dense 0/1 selection matrices are never
formed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ConstraintRowUnassignableError,
    DimensionMismatchError,
    InvalidSystemError,
)

_EQUILIBRIUM_TOL = 1e-9


def _as_matrix(a, name):
    a = np.asarray(a, dtype=float)
    if a.ndim != 2:
        raise DimensionMismatchError(f"{name} must be a 2-d array, got shape {a.shape}")
    return a


def _as_vector(a, name):
    a = np.asarray(a, dtype=float)
    if a.ndim != 1:
        raise DimensionMismatchError(f"{name} must be a 1-d array, got shape {a.shape}")
    return a


@dataclass(frozen=True)
class GlobalSystem:
    """Global LTI plant with polytopic constraints and task endpoints.

    Attributes
    ----------
    A, B : ndarray
        State transition (n, n) and input (n, m) matrices.
    G, g : ndarray
        State constraints ``G x <= g``.
    L, l : ndarray
        Input constraints ``L u <= l``.
    x_target : ndarray
        Equilibrium the task steers to; must satisfy ``A x_target = x_target``.
    x_start : ndarray
        Initial state of the iterative task.
    """

    A: np.ndarray
    B: np.ndarray
    G: np.ndarray
    g: np.ndarray
    L: np.ndarray
    l: np.ndarray
    x_target: np.ndarray
    x_start: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "A", _as_matrix(self.A, "A"))
        object.__setattr__(self, "B", _as_matrix(self.B, "B"))
        object.__setattr__(self, "G", _as_matrix(self.G, "G"))
        object.__setattr__(self, "g", _as_vector(self.g, "g"))
        object.__setattr__(self, "L", _as_matrix(self.L, "L"))
        object.__setattr__(self, "l", _as_vector(self.l, "l"))
        object.__setattr__(self, "x_target", _as_vector(self.x_target, "x_target"))
        object.__setattr__(self, "x_start", _as_vector(self.x_start, "x_start"))
        n, m = self.A.shape[0], self.B.shape[1]
        if self.A.shape != (n, n):
            raise DimensionMismatchError(f"A must be square, got {self.A.shape}")
        if self.B.shape != (n, m):
            raise DimensionMismatchError(f"B must be (n, m), got {self.B.shape}")
        if self.G.shape[1] != n or self.g.shape[0] != self.G.shape[0]:
            raise DimensionMismatchError("G/g inconsistent with state dimension")
        if self.L.shape[1] != m or self.l.shape[0] != self.L.shape[0]:
            raise DimensionMismatchError("L/l inconsistent with input dimension")
        if self.x_target.shape[0] != n or self.x_start.shape[0] != n:
            raise DimensionMismatchError("x_target/x_start inconsistent with n")

    @property
    def n(self):
        return self.A.shape[0]

    @property
    def m(self):
        return self.B.shape[1]


@dataclass(frozen=True)
class Partition:
    """Contiguous block partition of states and inputs plus neighbor sets.

    ``state_blocks[i]`` and ``input_blocks[i]`` are ``(start, stop)`` index
    ranges of subsystem ``i``.  Neighbor sets always contain the subsystem
    itself and are symmetric; :meth:`from_sizes` normalizes both.
    """

    state_blocks: tuple
    input_blocks: tuple
    neighbor_sets: tuple

    @classmethod
    def from_sizes(cls, state_sizes, input_sizes, neighbors):
        """Build a partition from block sizes and raw neighbor lists.

        ``neighbors[i]`` lists subsystems coupled to ``i`` (0-based); it is
        closed under symmetry and self-membership here.
        """
        if len(state_sizes) != len(input_sizes) or len(state_sizes) != len(neighbors):
            raise DimensionMismatchError("per-subsystem lists must have equal length")
        sb, ib = [], []
        s = 0
        for sz in state_sizes:
            sb.append((s, s + int(sz)))
            s += int(sz)
        s = 0
        for sz in input_sizes:
            ib.append((s, s + int(sz)))
            s += int(sz)
        m_sub = len(state_sizes)
        closed = [set(ns) | {i} for i, ns in enumerate(neighbors)]
        for i in range(m_sub):
            for j in closed[i]:
                if not 0 <= j < m_sub:
                    raise DimensionMismatchError(f"neighbor index {j} out of range")
                closed[j].add(i)
        return cls(
            state_blocks=tuple(sb),
            input_blocks=tuple(ib),
            neighbor_sets=tuple(tuple(sorted(ns)) for ns in closed),
        )

    @property
    def n_subsystems(self):
        return len(self.state_blocks)

    def state_size(self, i):
        a, b = self.state_blocks[i]
        return b - a

    def input_size(self, i):
        a, b = self.input_blocks[i]
        return b - a

    def state_indices(self, i):
        a, b = self.state_blocks[i]
        return np.arange(a, b)

    def input_indices(self, i):
        a, b = self.input_blocks[i]
        return np.arange(a, b)

    def neighborhood_indices(self, i):
        """Global state indices of neighborhood i, blocks in ascending order."""
        return np.concatenate([self.state_indices(j) for j in self.neighbor_sets[i]])

    def neighborhood_size(self, i):
        return sum(self.state_size(j) for j in self.neighbor_sets[i])

    def neighborhood_offsets(self, i):
        """Map block j -> offset of x_j inside the stacked neighborhood vector."""
        offsets = {}
        pos = 0
        for j in self.neighbor_sets[i]:
            offsets[j] = pos
            pos += self.state_size(j)
        return offsets

    def block_of_state(self, k):
        for i, (a, b) in enumerate(self.state_blocks):
            if a <= k < b:
                return i
        raise IndexError(k)

    def block_of_input(self, k):
        for i, (a, b) in enumerate(self.input_blocks):
            if a <= k < b:
                return i
        raise IndexError(k)

    def edges(self):
        """Undirected neighbor edges (i, j) with i < j."""
        out = []
        for i, ns in enumerate(self.neighbor_sets):
            for j in ns:
                if j > i:
                    out.append((i, j))
        return out

    def is_connected(self):
        m_sub = self.n_subsystems
        seen = {0}
        stack = [0]
        while stack:
            i = stack.pop()
            for j in self.neighbor_sets[i]:
                if j not in seen:
                    seen.add(j)
                    stack.append(j)
        return len(seen) == m_sub


class StageCost:
    """Per-subsystem quadratic stage cost, separable or neighborhood-coupled.

    The running cost of subsystem ``i`` is
    ``(x_nbhd - x_nbhd_target)' Q_nbhd[i] (x_nbhd - x_nbhd_target) + u_i' R[i] u_i``;
    in the separable case ``Q_nbhd[i]`` is nonzero only on the own block.
    The global weights are the projected sums of the local ones.
    """

    def __init__(self, partition, q_nbhd, r_blocks, separable=False):
        self.partition = partition
        self.q_nbhd = [np.asarray(q, dtype=float) for q in q_nbhd]
        self.r_blocks = [np.asarray(r, dtype=float) for r in r_blocks]
        self.separable = separable
        m_sub = partition.n_subsystems
        if len(self.q_nbhd) != m_sub or len(self.r_blocks) != m_sub:
            raise DimensionMismatchError("need one Q/R block per subsystem")
        for i in range(m_sub):
            n_nb = partition.neighborhood_size(i)
            if self.q_nbhd[i].shape != (n_nb, n_nb):
                raise DimensionMismatchError(
                    f"Q block {i} must be ({n_nb}, {n_nb}), got {self.q_nbhd[i].shape}"
                )
            m_i = partition.input_size(i)
            if self.r_blocks[i].shape != (m_i, m_i):
                raise DimensionMismatchError(
                    f"R block {i} must be ({m_i}, {m_i}), got {self.r_blocks[i].shape}"
                )
            if np.min(np.linalg.eigvalsh(0.5 * (self.q_nbhd[i] + self.q_nbhd[i].T))) < -1e-9:
                raise InvalidSystemError(_report([f"Q block {i} is not PSD"]))
            if np.min(np.linalg.eigvalsh(0.5 * (self.r_blocks[i] + self.r_blocks[i].T))) <= 0:
                raise InvalidSystemError(_report([f"R block {i} is not PD"]))

    @classmethod
    def separable_blocks(cls, partition, q_blocks, r_blocks):
        """Fully separable cost: per-subsystem Q_i on the own state block only."""
        q_nbhd = []
        for i in range(partition.n_subsystems):
            n_nb = partition.neighborhood_size(i)
            q = np.zeros((n_nb, n_nb))
            off = partition.neighborhood_offsets(i)[i]
            n_i = partition.state_size(i)
            qi = np.asarray(q_blocks[i], dtype=float)
            if qi.shape != (n_i, n_i):
                raise DimensionMismatchError(f"Q block {i} must be ({n_i}, {n_i})")
            q[off:off + n_i, off:off + n_i] = qi
            q_nbhd.append(q)
        return cls(partition, q_nbhd, r_blocks, separable=True)

    def global_state_weight(self):
        """Q reconstructed as the projected sum of the neighborhood blocks."""
        n = self.partition.state_blocks[-1][1]
        q = np.zeros((n, n))
        for i in range(self.partition.n_subsystems):
            idx = self.partition.neighborhood_indices(i)
            q[np.ix_(idx, idx)] += self.q_nbhd[i]
        return q

    def global_input_weight(self):
        m = self.partition.input_blocks[-1][1]
        r = np.zeros((m, m))
        for i in range(self.partition.n_subsystems):
            idx = self.partition.input_indices(i)
            r[np.ix_(idx, idx)] += self.r_blocks[i]
        return r

    def local_value(self, i, x_nbhd, u_i, x_nbhd_target):
        dx = np.asarray(x_nbhd, dtype=float) - x_nbhd_target
        u = np.asarray(u_i, dtype=float)
        return float(dx @ self.q_nbhd[i] @ dx + u @ self.r_blocks[i] @ u)

    def evaluate(self, x, u, x_target):
        """Global stage cost and its per-subsystem breakdown.

        The total is the left-to-right sum of the local values in ascending
        subsystem order, so total == sum(breakdown) holds exactly.
        """
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        x_target = np.asarray(x_target, dtype=float)
        parts = []
        for i in range(self.partition.n_subsystems):
            nb = self.partition.neighborhood_indices(i)
            ui = u[self.partition.input_indices(i)]
            parts.append(self.local_value(i, x[nb], ui, x_target[nb]))
        total = 0.0
        for p in parts:
            total += p
        return total, parts


@dataclass(frozen=True)
class Violation:
    kind: str
    message: str

    def __str__(self):
        return f"[{self.kind}] {self.message}"


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple

    @property
    def ok(self):
        return len(self.violations) == 0

    def __str__(self):
        if self.ok:
            return "valid"
        return "\n".join(str(v) for v in self.violations)


def _report(messages, kind="structure"):
    return ValidationReport(tuple(Violation(kind, m) for m in messages))


def _touched_blocks(row, partition, kind="state"):
    blocks = set()
    nz = np.nonzero(row)[0]
    for k in nz:
        if kind == "state":
            blocks.add(partition.block_of_state(int(k)))
        else:
            blocks.add(partition.block_of_input(int(k)))
    return blocks


def validate(system: GlobalSystem, partition: Partition, cost: StageCost = None) -> ValidationReport:
    """Check that the partition is consistent with the system couplings.

    Always returns a report; it is the caller's decision to abort.  Reported
    violations: input blocks driving foreign state blocks, dynamics or
    constraint couplings missing from the neighbor sets, input-constraint
    rows mixing input blocks, a disconnected neighbor graph, and endpoint
    inconsistencies (non-equilibrium target, infeasible endpoints).
    """
    v = []
    n, m = system.n, system.m
    if partition.state_blocks[-1][1] != n or partition.state_blocks[0][0] != 0:
        v.append(Violation("dimensions", "state blocks do not cover the state vector"))
    if partition.input_blocks[-1][1] != m or partition.input_blocks[0][0] != 0:
        v.append(Violation("dimensions", "input blocks do not cover the input vector"))
    if v:
        return ValidationReport(tuple(v))

    for i in range(partition.n_subsystems):
        rows = partition.state_indices(i)
        for j in range(partition.n_subsystems):
            cols = partition.input_indices(j)
            if i != j and np.any(system.B[np.ix_(rows, cols)] != 0):
                v.append(Violation(
                    "input-coupling",
                    f"B couples input block {j} to state block {i}; inputs must act "
                    "on their own subsystem only",
                ))

    for i in range(partition.n_subsystems):
        rows = partition.state_indices(i)
        for j in range(partition.n_subsystems):
            cols = partition.state_indices(j)
            if np.any(system.A[np.ix_(rows, cols)] != 0) and j not in partition.neighbor_sets[i]:
                v.append(Violation(
                    "dynamics-coupling",
                    f"A block ({i}, {j}) is nonzero but {j} is not a neighbor of {i}",
                ))

    for r in range(system.G.shape[0]):
        touched = _touched_blocks(system.G[r], partition, "state")
        for i in touched:
            for j in touched:
                if j not in partition.neighbor_sets[i]:
                    v.append(Violation(
                        "constraint-coupling",
                        f"state constraint row {r} couples blocks {i} and {j} "
                        "which are not neighbors",
                    ))

    for r in range(system.L.shape[0]):
        touched = _touched_blocks(system.L[r], partition, "input")
        if len(touched) > 1:
            v.append(Violation(
                "input-constraint",
                f"input constraint row {r} mixes input blocks {sorted(touched)}",
            ))

    if cost is not None:
        q_glob = cost.global_state_weight()
        for i in range(partition.n_subsystems):
            rows = partition.state_indices(i)
            for j in range(partition.n_subsystems):
                cols = partition.state_indices(j)
                if np.any(q_glob[np.ix_(rows, cols)] != 0) and j not in partition.neighbor_sets[i]:
                    v.append(Violation(
                        "cost-coupling",
                        f"stage cost couples blocks {i} and {j} which are not neighbors",
                    ))

    if not partition.is_connected():
        v.append(Violation("graph", "neighbor graph is not connected"))

    resid = system.A @ system.x_target - system.x_target
    if np.max(np.abs(resid)) > _EQUILIBRIUM_TOL:
        v.append(Violation(
            "equilibrium",
            f"x_target is not an equilibrium under zero input (|A x - x| = {np.max(np.abs(resid)):.2e})",
        ))
    slack = system.g - system.G @ system.x_target
    if np.any(slack <= 0):
        v.append(Violation("equilibrium", "x_target does not strictly satisfy the state constraints"))
    if np.any(system.G @ system.x_start - system.g > 1e-12):
        v.append(Violation("start", "x_start violates the state constraints"))

    return ValidationReport(tuple(v))


@dataclass(frozen=True)
class LocalSystem:
    """One subsystem's view after decomposition.

    Dynamics map the stacked neighborhood state to the own next state:
    ``x_i+ = A_nbhd x_nbhd + B u_i``.  Constraint rows are the globally owned
    ones, restricted to neighborhood columns; ``owned_state_rows`` keeps their
    global row indices so the decomposition stays auditable.
    """

    index: int
    neighbor_set: tuple
    state_indices: np.ndarray
    input_indices: np.ndarray
    nbhd_indices: np.ndarray
    nbhd_blocks: tuple  # ((block, offset inside x_nbhd, size), ...)
    own_offset: int
    A_nbhd: np.ndarray
    B: np.ndarray
    G_nbhd: np.ndarray
    g_nbhd: np.ndarray
    owned_state_rows: np.ndarray
    L: np.ndarray
    l: np.ndarray
    Q_nbhd: np.ndarray
    R: np.ndarray
    x_target_nbhd: np.ndarray
    x_target_own: np.ndarray
    x_start_own: np.ndarray

    @property
    def n_own(self):
        return self.state_indices.shape[0]

    @property
    def n_nbhd(self):
        return self.nbhd_indices.shape[0]

    @property
    def m_own(self):
        return self.input_indices.shape[0]

    def step(self, x_nbhd, u_i):
        """Own next state given the stacked neighborhood state."""
        return self.A_nbhd @ np.asarray(x_nbhd, dtype=float) + self.B @ np.asarray(u_i, dtype=float)

    def stage_cost(self, x_nbhd, u_i):
        dx = np.asarray(x_nbhd, dtype=float) - self.x_target_nbhd
        u = np.asarray(u_i, dtype=float)
        return float(dx @ self.Q_nbhd @ dx + u @ self.R @ u)


def decompose(system: GlobalSystem, partition: Partition, cost: StageCost) -> list:
    """Split the validated global system into per-subsystem local systems.

    State-constraint rows are assigned to the lowest-index subsystem whose
    neighborhood covers every variable the row touches; each global row ends
    up in exactly one local system.

    Raises
    ------
    ConstraintRowUnassignableError
        If some row of G fits in no neighborhood.
    InvalidSystemError
        If validation reports violations.
    """
    report = validate(system, partition, cost)
    if not report.ok:
        raise InvalidSystemError(report)

    m_sub = partition.n_subsystems
    owners = [[] for _ in range(m_sub)]
    for r in range(system.G.shape[0]):
        touched = _touched_blocks(system.G[r], partition, "state")
        owner = None
        for i in range(m_sub):
            if touched <= set(partition.neighbor_sets[i]):
                owner = i
                break
        if owner is None:
            raise ConstraintRowUnassignableError(r, sorted(touched))
        owners[owner].append(r)

    input_rows = [[] for _ in range(m_sub)]
    for r in range(system.L.shape[0]):
        touched = _touched_blocks(system.L[r], partition, "input")
        # validation guarantees at most one block per row; rows touching no
        # input at all are kept with subsystem 0
        owner = min(touched) if touched else 0
        input_rows[owner].append(r)

    out = []
    for i in range(m_sub):
        nbhd = partition.neighborhood_indices(i)
        own = partition.state_indices(i)
        uin = partition.input_indices(i)
        grows = np.asarray(owners[i], dtype=int)
        lrows = np.asarray(input_rows[i], dtype=int)
        offsets = partition.neighborhood_offsets(i)
        out.append(LocalSystem(
            index=i,
            neighbor_set=partition.neighbor_sets[i],
            state_indices=own,
            input_indices=uin,
            nbhd_indices=nbhd,
            nbhd_blocks=tuple(
                (j, offsets[j], partition.state_size(j))
                for j in partition.neighbor_sets[i]
            ),
            own_offset=offsets[i],
            A_nbhd=system.A[np.ix_(own, nbhd)],
            B=system.B[np.ix_(own, uin)],
            G_nbhd=system.G[np.ix_(grows, nbhd)] if grows.size else np.zeros((0, nbhd.size)),
            g_nbhd=system.g[grows] if grows.size else np.zeros(0),
            owned_state_rows=grows,
            L=system.L[np.ix_(lrows, uin)] if lrows.size else np.zeros((0, uin.size)),
            l=system.l[lrows] if lrows.size else np.zeros(0),
            Q_nbhd=cost.q_nbhd[i],
            R=cost.r_blocks[i],
            x_target_nbhd=system.x_target[nbhd],
            x_target_own=system.x_target[own],
            x_start_own=system.x_start[own],
        ))
    return out


def step(system: GlobalSystem, x, u):
    """One plant step ``A x + B u``."""
    return system.A @ np.asarray(x, dtype=float) + system.B @ np.asarray(u, dtype=float)


def stage_cost(cost: StageCost, x, u, x_target):
    """Global stage cost with per-subsystem breakdown; see StageCost.evaluate."""
    return cost.evaluate(x, u, x_target)


@dataclass(frozen=True)
class PartitionedSystem:
    """Validated bundle of the global plant and its decomposition."""

    plant: GlobalSystem
    partition: Partition
    cost: StageCost
    subsystems: tuple = field(default=())

    @classmethod
    def build(cls, plant, partition, cost):
        return cls(plant, partition, cost, tuple(decompose(plant, partition, cost)))

    @property
    def n_subsystems(self):
        return self.partition.n_subsystems

    def measured_neighborhood(self, i, x):
        """Neighborhood slice of a measured global state (one-hop broadcast)."""
        return np.asarray(x, dtype=float)[self.subsystems[i].nbhd_indices]
