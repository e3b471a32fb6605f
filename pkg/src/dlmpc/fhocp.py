"""Assembly of local finite-horizon optimal control problems.

Each subsystem optimizes a stacked decision vector

    z_i = [ x_nbhd(0), ..., x_nbhd(N-1), x_own(N), alpha, u(0), ..., u(N-1) ]

holding the predicted neighborhood state trajectory, its own terminal state,
the shared simplex weights over the safe-set columns, and its own input
trajectory.  Only the subsystem's own dynamics rows appear in its problem;
the neighbor-state copies inside x_nbhd are tied to their owners through the
edge consensus constraints.  The terminal state is pinned to a convex
combination of the stored safe-set columns, and that combination's
cost-to-go enters the objective as a linear term.

The same assembler builds the per-subsystem problems, the centralized
(single-block) problem used as an oracle, the exploration variant with a
free initial state, and the terminal-free controller used for
bootstrapping.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import (
    DimensionMismatchError,
    DisconnectedGraphError,
    EmptySafeSetError,
)
from .model import GlobalSystem, LocalSystem, Partition, StageCost
from .qp import QuadraticProgram


@dataclass(frozen=True)
class DecisionLayout:
    """Index map of one subsystem's stacked decision vector."""

    horizon: int
    n_nbhd: int
    n_own: int
    m_own: int
    n_alpha: int
    own_block: int
    nbhd_blocks: tuple  # ((block, offset, size), ...) ascending block order

    @property
    def dim(self):
        return self.n_nbhd * self.horizon + self.n_own + self.n_alpha \
            + self.m_own * self.horizon

    def x_slice(self, k):
        if not 0 <= k < self.horizon:
            raise IndexError(k)
        return slice(k * self.n_nbhd, (k + 1) * self.n_nbhd)

    @property
    def terminal_slice(self):
        base = self.horizon * self.n_nbhd
        return slice(base, base + self.n_own)

    @property
    def alpha_slice(self):
        base = self.horizon * self.n_nbhd + self.n_own
        return slice(base, base + self.n_alpha)

    def u_slice(self, k):
        if not 0 <= k < self.horizon:
            raise IndexError(k)
        base = self.horizon * self.n_nbhd + self.n_own + self.n_alpha
        return slice(base + k * self.m_own, base + (k + 1) * self.m_own)

    def block_offset(self, block):
        for b, off, size in self.nbhd_blocks:
            if b == block:
                return off, size
        raise KeyError(block)

    def carries_block(self, block):
        return any(b == block for b, _, _ in self.nbhd_blocks)

    def block_indices(self, block, k):
        """z-indices of the copy of ``block``'s state at predicted time k."""
        off, size = self.block_offset(block)
        start = self.x_slice(k).start + off
        return np.arange(start, start + size)

    def own_indices(self, k):
        return self.block_indices(self.own_block, k)


@dataclass(frozen=True)
class LocalFhocp:
    """One agent's QP plus the metadata needed to run and read it."""

    subsystem: int
    qp: QuadraticProgram
    layout: DecisionLayout
    objective_constant: float
    init_row_start: int  # -1 when the initial state is a free variable
    safe_set_costs: np.ndarray

    @property
    def dim(self):
        return self.layout.dim

    def true_objective(self, z):
        """Objective in original stage-cost units, constants included."""
        return self.qp.objective(z) + self.objective_constant

    def b_eq_with_initial(self, x_nbhd_now):
        """Equality right-hand side for a fresh measured neighborhood state."""
        if self.init_row_start < 0:
            raise DimensionMismatchError("this problem has a free initial state")
        x_nbhd_now = np.asarray(x_nbhd_now, dtype=float)
        if x_nbhd_now.shape[0] != self.layout.n_nbhd:
            raise DimensionMismatchError("initial state has wrong dimension")
        b = self.qp.b_eq.copy()
        b[self.init_row_start:self.init_row_start + self.layout.n_nbhd] = x_nbhd_now
        return b

    def with_initial_state(self, x_nbhd_now):
        return replace(self, qp=replace(self.qp, b_eq=self.b_eq_with_initial(x_nbhd_now)))

    def first_input(self, z):
        return np.asarray(z, dtype=float)[self.layout.u_slice(0)].copy()

    def own_trajectory(self, z):
        """Predicted own-block states, times 0..N (terminal included)."""
        z = np.asarray(z, dtype=float)
        rows = [z[self.layout.own_indices(k)] for k in range(self.layout.horizon)]
        rows.append(z[self.layout.terminal_slice])
        return np.array(rows)

    def input_trajectory(self, z):
        z = np.asarray(z, dtype=float)
        return np.array([z[self.layout.u_slice(k)] for k in range(self.layout.horizon)])

    def alpha(self, z):
        return np.asarray(z, dtype=float)[self.layout.alpha_slice].copy()


@dataclass(frozen=True)
class EdgeOverlap:
    """Consensus index selection for one neighbor edge.

    ``z_i[sel_i]`` and ``z_j[sel_j]`` must agree; matching positions denote
    the same physical quantity at the same predicted time, followed by the
    full simplex weight segments.
    """

    i: int
    j: int
    sel_i: np.ndarray
    sel_j: np.ndarray

    def __post_init__(self):
        if self.sel_i.shape != self.sel_j.shape:
            raise DimensionMismatchError("edge selections must pair up")

    @property
    def size(self):
        return self.sel_i.shape[0]

    def reversed(self):
        return EdgeOverlap(self.j, self.i, self.sel_j, self.sel_i)

    def residual(self, z_i, z_j):
        """Infinity-norm consensus gap between the two endpoints."""
        diff = np.asarray(z_i)[self.sel_i] - np.asarray(z_j)[self.sel_j]
        return float(np.max(np.abs(diff), initial=0.0))


@dataclass(frozen=True)
class _ProblemData:
    """Raw matrices the assembler consumes; source-agnostic."""

    subsystem: int
    own_block: int
    nbhd_blocks: tuple
    own_offset: int
    A_nbhd: np.ndarray
    B: np.ndarray
    G: np.ndarray
    g: np.ndarray
    L: np.ndarray
    l: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    x_target_nbhd: np.ndarray


def _data_from_local(local: LocalSystem):
    return _ProblemData(
        subsystem=local.index,
        own_block=local.index,
        nbhd_blocks=local.nbhd_blocks,
        own_offset=local.own_offset,
        A_nbhd=local.A_nbhd,
        B=local.B,
        G=local.G_nbhd,
        g=local.g_nbhd,
        L=local.L,
        l=local.l,
        Q=local.Q_nbhd,
        R=local.R,
        x_target_nbhd=local.x_target_nbhd,
    )


def _data_from_global(system: GlobalSystem, cost: StageCost):
    n = system.n
    return _ProblemData(
        subsystem=0,
        own_block=0,
        nbhd_blocks=((0, 0, n),),
        own_offset=0,
        A_nbhd=system.A,
        B=system.B,
        G=system.G,
        g=system.g,
        L=system.L,
        l=system.l,
        Q=cost.global_state_weight(),
        R=cost.global_input_weight(),
        x_target_nbhd=system.x_target,
    )


def _check_terminal_data(data, terminal_columns, terminal_costs):
    d_cols = np.asarray(terminal_columns, dtype=float)
    c = np.asarray(terminal_costs, dtype=float)
    n_own = data.B.shape[0]
    if d_cols.ndim != 2 or d_cols.shape[0] != n_own:
        raise DimensionMismatchError(
            f"terminal columns must be ({n_own}, K), got {d_cols.shape}"
        )
    if d_cols.shape[1] == 0:
        raise EmptySafeSetError("terminal set has no columns")
    if c.shape != (d_cols.shape[1],):
        raise DimensionMismatchError("terminal costs inconsistent with columns")
    return d_cols, c


def _assemble(data: _ProblemData, horizon, terminal_columns, terminal_costs,
              x_nbhd_now=None, stage_weight=1.0, initial_objective=None):
    """Shared constructor of every FHOCP variant.

    ``x_nbhd_now=None`` leaves the initial state free (the exploration form);
    ``terminal_columns=None`` drops the terminal machinery (the bootstrap
    form).  ``initial_objective`` is either ``("quadratic", x_des)`` or
    ``("linear", w)``, applied to the own block at time 0.
    """
    n_nbhd = data.A_nbhd.shape[1]
    n_own, m_own = data.B.shape
    if horizon < 1:
        raise DimensionMismatchError("horizon must be at least 1")
    if terminal_columns is not None:
        d_cols, c = _check_terminal_data(data, terminal_columns, terminal_costs)
        n_alpha = d_cols.shape[1]
    else:
        d_cols, c = None, np.zeros(0)
        n_alpha = 0

    layout = DecisionLayout(
        horizon=horizon,
        n_nbhd=n_nbhd,
        n_own=n_own,
        m_own=m_own,
        n_alpha=n_alpha,
        own_block=data.own_block,
        nbhd_blocks=data.nbhd_blocks,
    )
    dim = layout.dim
    pinned = x_nbhd_now is not None

    # objective
    p_mat = np.zeros((dim, dim))
    q_vec = np.zeros(dim)
    const = 0.0
    if stage_weight:
        qx = 2.0 * stage_weight * data.Q
        qlin = qx @ data.x_target_nbhd
        for k in range(horizon):
            sl = layout.x_slice(k)
            p_mat[sl, sl] = qx
            q_vec[sl] = -qlin
            const += stage_weight * float(
                data.x_target_nbhd @ data.Q @ data.x_target_nbhd
            )
            su = layout.u_slice(k)
            p_mat[su, su] = 2.0 * stage_weight * data.R
    if n_alpha:
        q_vec[layout.alpha_slice] += c
    if initial_objective is not None:
        kind, vec = initial_objective
        own0 = layout.own_indices(0)
        vec = np.asarray(vec, dtype=float)
        if vec.shape[0] != n_own:
            raise DimensionMismatchError("initial objective has wrong dimension")
        if kind == "quadratic":
            p_mat[np.ix_(own0, own0)] += 2.0 * np.eye(n_own)
            q_vec[own0] += -2.0 * vec
            const += float(vec @ vec)
        elif kind == "linear":
            q_vec[own0] += vec
        else:
            raise DimensionMismatchError(f"unknown initial objective {kind!r}")

    # equalities: dynamics, [initial], [terminal link, simplex]
    n_eq = n_own * horizon + (n_nbhd if pinned else 0) \
        + (n_own + 1 if n_alpha else 0)
    a_eq = np.zeros((n_eq, dim))
    b_eq = np.zeros(n_eq)
    row = 0
    for k in range(horizon):
        rows = slice(row, row + n_own)
        if k + 1 < horizon:
            lhs = layout.own_indices(k + 1)
        else:
            lhs = np.arange(layout.terminal_slice.start, layout.terminal_slice.stop)
        a_eq[rows, lhs] = np.eye(n_own)
        a_eq[rows, layout.x_slice(k)] -= data.A_nbhd
        a_eq[rows, layout.u_slice(k)] -= data.B
        row += n_own
    init_row_start = -1
    if pinned:
        x_nbhd_now = np.asarray(x_nbhd_now, dtype=float)
        if x_nbhd_now.shape[0] != n_nbhd:
            raise DimensionMismatchError("measured state has wrong dimension")
        init_row_start = row
        a_eq[row:row + n_nbhd, layout.x_slice(0)] = np.eye(n_nbhd)
        b_eq[row:row + n_nbhd] = x_nbhd_now
        row += n_nbhd
    if n_alpha:
        rows = slice(row, row + n_own)
        a_eq[rows, layout.terminal_slice] = np.eye(n_own)
        a_eq[rows, layout.alpha_slice] = -d_cols
        row += n_own
        a_eq[row, layout.alpha_slice] = 1.0
        b_eq[row] = 1.0
        row += 1

    # inequalities: state rows (skipped at a pinned time 0), inputs, alpha >= 0
    n_g = data.G.shape[0]
    state_ks = [k for k in range(horizon) if (k > 0 or not pinned)]
    n_in = n_g * len(state_ks) + data.L.shape[0] * horizon + n_alpha
    a_in = np.zeros((n_in, dim))
    b_in = np.zeros(n_in)
    row = 0
    if n_g:
        for k in state_ks:
            a_in[row:row + n_g, layout.x_slice(k)] = data.G
            b_in[row:row + n_g] = data.g
            row += n_g
    n_l = data.L.shape[0]
    if n_l:
        for k in range(horizon):
            a_in[row:row + n_l, layout.u_slice(k)] = data.L
            b_in[row:row + n_l] = data.l
            row += n_l
    if n_alpha:
        a_in[row:row + n_alpha, layout.alpha_slice] = -np.eye(n_alpha)
        row += n_alpha

    qp = QuadraticProgram(p_mat, q_vec, a_eq, b_eq, a_in, b_in)
    return LocalFhocp(
        subsystem=data.subsystem,
        qp=qp,
        layout=layout,
        objective_constant=const,
        init_row_start=init_row_start,
        safe_set_costs=c,
    )


def build_local(local: LocalSystem, terminal_columns, terminal_costs,
                x_nbhd_now, horizon) -> LocalFhocp:
    """Regular per-subsystem problem at a measured neighborhood state.

    Constraints: own dynamics over the horizon, the measured initial state
    as fixed equalities, owned state rows at predicted times >= 1, input
    rows, and the terminal state as a convex combination of the safe-set
    columns.  Objective: stage costs plus the combination's cost-to-go.
    """
    return _assemble(_data_from_local(local), horizon,
                     terminal_columns, terminal_costs, x_nbhd_now=x_nbhd_now)


def build_plain(local: LocalSystem, x_nbhd_now, horizon,
                state_weight_scale=1.0) -> LocalFhocp:
    """Terminal-free variant used to bootstrap a first feasible trajectory."""
    data = _data_from_local(local)
    if state_weight_scale != 1.0:
        data = replace(data, Q=state_weight_scale * data.Q)
    return _assemble(data, horizon, None, None, x_nbhd_now=x_nbhd_now)


def build_centralized(system: GlobalSystem, cost: StageCost, terminal_columns,
                      terminal_costs, x_now, horizon) -> LocalFhocp:
    """Whole-plant problem; the oracle the distributed solve is checked against."""
    return _assemble(_data_from_global(system, cost), horizon,
                     terminal_columns, terminal_costs, x_nbhd_now=x_now)


def build_exploration(local: LocalSystem, terminal_columns, terminal_costs,
                      objective, horizon) -> LocalFhocp:
    """Initial-state selection problem: stage costs off, initial state free.

    ``objective`` is ``("quadratic", x_desired)`` for the distance-to-target
    form or ``("linear", w)`` for pushing the initial state along a
    direction.  State rows now also apply at time 0.
    """
    return _assemble(_data_from_local(local), horizon,
                     terminal_columns, terminal_costs,
                     x_nbhd_now=None, stage_weight=0.0,
                     initial_objective=objective)


def edge_overlaps(partition: Partition, layouts, edges=None) -> list:
    """Consensus selections for every neighbor edge.

    For edge (i, j): i's copies of j's predicted states pair with j's own
    entries and vice versa at every predicted time, and the two alpha
    segments pair in full.  On a connected graph these edgewise equalities
    make every state copy equal its owner's value and all alpha vectors
    equal, which is exactly the coupling of the undecomposed problem.

    ``edges`` overrides the partition's neighbor edges; pairs whose blocks
    are not carried by both endpoints contribute alpha consensus only.
    """
    if edges is None:
        edges = partition.edges()
    n_subs = partition.n_subsystems
    seen = {0}
    stack = [0]
    adjacency = [set() for _ in range(n_subs)]
    for (i, j) in edges:
        adjacency[i].add(j)
        adjacency[j].add(i)
    while stack:
        i = stack.pop()
        for j in adjacency[i]:
            if j not in seen:
                seen.add(j)
                stack.append(j)
    if len(seen) != n_subs:
        raise DisconnectedGraphError("consensus edge set must be connected")
    horizon = layouts[0].horizon
    n_alpha = layouts[0].n_alpha
    for lay in layouts:
        if lay.horizon != horizon or lay.n_alpha != n_alpha:
            raise DimensionMismatchError("layouts disagree on horizon or alpha size")
    out = []
    for (i, j) in edges:
        li, lj = layouts[i], layouts[j]
        sel_i, sel_j = [], []
        for block in (i, j):
            if not (li.carries_block(block) and lj.carries_block(block)):
                continue
            for k in range(horizon):
                sel_i.append(li.block_indices(block, k))
                sel_j.append(lj.block_indices(block, k))
        sel_i.append(np.arange(li.alpha_slice.start, li.alpha_slice.stop))
        sel_j.append(np.arange(lj.alpha_slice.start, lj.alpha_slice.stop))
        out.append(EdgeOverlap(
            i, j,
            np.concatenate(sel_i) if sel_i else np.zeros(0, dtype=int),
            np.concatenate(sel_j) if sel_j else np.zeros(0, dtype=int),
        ))
    return out


def stack_consensus_qp(problems, overlaps):
    """Monolithic QP equivalent to the set of local problems plus consensus.

    Stacks every agent's variables, block-diagonalizes their constraints,
    and adds one equality row per consensus pair.  Solving this with the
    plain QP solver gives the reference the distributed iteration must
    match.  Returns (qp, offsets, constant) where ``offsets[i]`` is the
    start of agent i's variables and ``constant`` restores true objective
    units.
    """
    dims = [p.dim for p in problems]
    offsets = np.concatenate([[0], np.cumsum(dims)])[:-1]
    total = int(sum(dims))
    p_mat = np.zeros((total, total))
    q_vec = np.zeros(total)
    const = 0.0
    eq_blocks, eq_rhs = [], []
    in_blocks, in_rhs = [], []
    for off, prob in zip(offsets, problems):
        sl = slice(off, off + prob.dim)
        p_mat[sl, sl] = prob.qp.P
        q_vec[sl] = prob.qp.q
        const += prob.objective_constant
        eq_blocks.append((off, prob.qp.A_eq))
        eq_rhs.append(prob.qp.b_eq)
        in_blocks.append((off, prob.qp.A_in))
        in_rhs.append(prob.qp.b_in)
    n_eq_local = sum(b.shape[0] for _, b in eq_blocks)
    n_consensus = sum(o.size for o in overlaps)
    a_eq = np.zeros((n_eq_local + n_consensus, total))
    b_eq = np.concatenate(eq_rhs + [np.zeros(n_consensus)])
    row = 0
    for off, block in eq_blocks:
        a_eq[row:row + block.shape[0], off:off + block.shape[1]] = block
        row += block.shape[0]
    for ov in overlaps:
        for a, b in zip(ov.sel_i, ov.sel_j):
            a_eq[row, offsets[ov.i] + a] = 1.0
            a_eq[row, offsets[ov.j] + b] = -1.0
            row += 1
    n_in_total = sum(b.shape[0] for _, b in in_blocks)
    a_in = np.zeros((n_in_total, total))
    b_in = np.concatenate(in_rhs) if in_rhs else np.zeros(0)
    row = 0
    for off, block in in_blocks:
        a_in[row:row + block.shape[0], off:off + block.shape[1]] = block
        row += block.shape[0]
    qp = QuadraticProgram(p_mat, q_vec, a_eq, b_eq, a_in, b_in)
    return qp, offsets, const
