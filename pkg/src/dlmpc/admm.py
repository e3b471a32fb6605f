"""Consensus ADMM over simulated nearest-neighbor message passing.

Agents repeatedly exchange the overlapping slices of their decision vectors
with their neighbors, penalize deviation from the pairwise midpoints, and
re-solve their local problems.  Rounds are synchronous: every agent advances
in lockstep, which makes runs bitwise reproducible regardless of the
scheduler executing the per-agent solves.

The per-agent augmented problem keeps the constraint matrices of the
underlying local QP, so its KKT factorization is prepared once and reused
for every round and every time step of a closed-loop iteration.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import LocalInfeasibleError
from .qp import PreparedQp, QpSettings, QpStatus


class ConsensusStatus(Enum):
    CONVERGED = "converged"
    MAX_ITER = "max_iter"


@dataclass(frozen=True)
class ConsensusOptions:
    """Knobs of the outer consensus loop and its inner QP solves."""

    rho: float = 1.0
    eps_consensus: float = 1e-5
    max_iter: int = 5000
    qp_settings: QpSettings = field(default_factory=lambda: QpSettings(
        rho=1.0, polish=False, eps_abs=1e-8, eps_rel=1e-8,
        max_iter=8000, check_interval=5,
    ))


@dataclass(frozen=True)
class Message:
    """One edge payload sent in one round: the sender's overlap slice."""

    sender: int
    receiver: int
    round_index: int
    payload: np.ndarray


class SynchronousTransport:
    """Default in-process transport: every message arrives, same round."""

    def exchange(self, round_index, outbox):
        return outbox


class LossyTransport:
    """Randomly fails whole links for a round; delivery never crosses rounds.

    A failed link drops both directions of the edge, so the two endpoints
    stay symmetric: each falls back to its own value and freezes its dual
    for that round, preserving the consensus fixed point.
    """

    def __init__(self, drop_probability=0.1, seed=0):
        self.drop_probability = float(drop_probability)
        self._rng = np.random.default_rng(seed)

    def exchange(self, round_index, outbox):
        edges = sorted({(min(m.sender, m.receiver), max(m.sender, m.receiver))
                        for m in outbox})
        down = {e for e in edges if self._rng.random() < self.drop_probability}
        return [m for m in outbox
                if (min(m.sender, m.receiver), max(m.sender, m.receiver)) not in down]


class SequentialScheduler:
    """Runs agent updates one after another in agent order."""

    def map(self, fn, items):
        return [fn(x) for x in items]

    def close(self):
        pass


class ThreadedScheduler:
    """Runs agent updates on a thread pool; results keep agent order."""

    def __init__(self, max_workers=None):
        self._max_workers = max_workers
        self._pool = None

    def map(self, fn, items):
        if self._pool is None:
            self._pool = ThreadPoolExecutor(max_workers=self._max_workers)
        return list(self._pool.map(fn, items))

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None


@dataclass
class ConsensusReport:
    """Diagnostics of one consensus solve."""

    status: ConsensusStatus
    iterations: int
    final_max_residual: float
    edge_residuals: dict          # (i, j) -> list of per-round inf-norm gaps
    objective_history: list       # per-round sum of true local objectives
    final_max_drift: float = 0.0  # per-round iterate change at termination
    inner_failures: int = 0

    @property
    def converged(self):
        return self.status is ConsensusStatus.CONVERGED

    def summary(self):
        return {
            "status": self.status.value,
            "iterations": self.iterations,
            "final_max_residual": self.final_max_residual,
            "objective": self.objective_history[-1] if self.objective_history else None,
        }


@dataclass
class ConsensusResult:
    iterates: list
    report: ConsensusReport


class _EdgeSlot:
    """One agent's side of an edge: selection into its own vector and the
    last payload received from the other side."""

    __slots__ = ("key", "peer", "sel", "lam", "received")

    def __init__(self, key, peer, sel):
        self.key = key
        self.peer = peer
        self.sel = sel
        self.lam = np.zeros(sel.shape[0])
        self.received = None


class _Agent:
    def __init__(self, index, problem, options):
        self.index = index
        self.problem = problem
        self.options = options
        self.slots = []
        self.z = np.zeros(problem.dim)
        self.b_eq = problem.qp.b_eq.copy()
        self.b_in = problem.qp.b_in.copy()
        self._prepared = None

    def attach_edge(self, key, peer, sel):
        self.slots.append(_EdgeSlot(key, peer, np.asarray(sel, dtype=int)))

    def prepare(self):
        rho = self.options.rho
        counts = np.zeros(self.problem.dim)
        for slot in self.slots:
            np.add.at(counts, slot.sel, 1.0)
        p_aug = self.problem.qp.P.copy()
        p_aug[np.diag_indices_from(p_aug)] += 2.0 * rho * counts
        self._prepared = PreparedQp(
            p_aug, self.problem.qp.A_eq, self.problem.qp.A_in,
            self.options.qp_settings, q_hint=self.problem.qp.q,
        )

    def reset(self, z0=None, keep_duals=False):
        self.z = np.zeros(self.problem.dim) if z0 is None else np.asarray(z0, dtype=float).copy()
        for slot in self.slots:
            if not keep_duals:
                slot.lam[:] = 0.0
            slot.received = None
        self._prepared.warm_start(z=self.z)

    def set_rhs(self, b_eq=None, b_in=None):
        if b_eq is not None:
            self.b_eq = np.asarray(b_eq, dtype=float).copy()
        if b_in is not None:
            self.b_in = np.asarray(b_in, dtype=float).copy()

    def begin_round(self):
        # undelivered edges fall back to the agent's own values this round
        for slot in self.slots:
            slot.received = None

    def outbox(self, round_index):
        return [Message(self.index, slot.peer, round_index, self.z[slot.sel].copy())
                for slot in self.slots]

    def deliver(self, message):
        for slot in self.slots:
            if slot.peer == message.sender:
                slot.received = message.payload
                return
        raise LocalInfeasibleError(self.index, f"unexpected message from {message.sender}")

    def update(self):
        """Dual ascent on the consensus gaps, then the augmented local solve."""
        rho = self.options.rho
        q_aug = self.problem.qp.q.copy()
        for slot in self.slots:
            own = self.z[slot.sel]
            other = slot.received if slot.received is not None else own
            slot.lam += rho * (own - other)
            mid = 0.5 * (own + other)
            np.add.at(q_aug, slot.sel, slot.lam - 2.0 * rho * mid)
        sol = self._prepared.solve(q_aug, self.b_eq, self.b_in)
        if sol.status is QpStatus.INFEASIBLE:
            raise LocalInfeasibleError(self.index, "augmented subproblem infeasible")
        self.z = sol.z
        return sol.status is QpStatus.MAX_ITER


class ConsensusSolver:
    """Reusable consensus machine bound to one set of local problems.

    The expensive part (KKT factorizations of the augmented local QPs) is
    paid in the constructor; :meth:`solve` can then be called once per time
    step with fresh right-hand sides and warm starts.
    """

    def __init__(self, problems, overlaps, options=ConsensusOptions(),
                 transport=None, scheduler=None):
        self.problems = list(problems)
        self.overlaps = list(overlaps)
        self.options = options
        self.transport = transport if transport is not None else SynchronousTransport()
        self.scheduler = scheduler if scheduler is not None else SequentialScheduler()
        self.agents = [_Agent(i, p, options) for i, p in enumerate(self.problems)]
        for ov in self.overlaps:
            key = (ov.i, ov.j)
            self.agents[ov.i].attach_edge(key, ov.j, ov.sel_i)
            self.agents[ov.j].attach_edge(key, ov.i, ov.sel_j)
        for agent in self.agents:
            agent.prepare()

    def solve(self, b_eq_list=None, b_in_list=None, z0_list=None,
              keep_duals=False, eps_override=None) -> ConsensusResult:
        """Run synchronized rounds until every edge gap closes.

        Parameters
        ----------
        b_eq_list, b_in_list : list of ndarray, optional
            Fresh right-hand sides per agent (constraint matrices fixed).
        z0_list : list of ndarray, optional
            Warm-start iterates per agent.
        keep_duals : bool
            Carry consensus duals over from the previous call.
        eps_override : float, optional
            Tighter residual threshold for this call only.
        """
        opts = self.options
        eps = opts.eps_consensus if eps_override is None else float(eps_override)
        for idx, agent in enumerate(self.agents):
            agent.set_rhs(
                None if b_eq_list is None else b_eq_list[idx],
                None if b_in_list is None else b_in_list[idx],
            )
            agent.reset(None if z0_list is None else z0_list[idx], keep_duals=keep_duals)

        edge_hist = {(ov.i, ov.j): [] for ov in self.overlaps}
        obj_hist = []
        inner_failures = 0
        status = ConsensusStatus.MAX_ITER
        rounds = opts.max_iter
        max_gap = np.inf
        max_drift = np.inf
        prev_z = [agent.z.copy() for agent in self.agents]

        for k in range(1, opts.max_iter + 1):
            outbox = []
            for agent in self.agents:
                agent.begin_round()
                outbox.extend(agent.outbox(k))
            for message in self.transport.exchange(k, outbox):
                self.agents[message.receiver].deliver(message)
            hit_limits = self.scheduler.map(lambda a: a.update(), self.agents)
            inner_failures += sum(bool(h) for h in hit_limits)

            max_gap = 0.0
            for ov in self.overlaps:
                gap = ov.residual(self.agents[ov.i].z, self.agents[ov.j].z)
                edge_hist[(ov.i, ov.j)].append(gap)
                if gap > max_gap:
                    max_gap = gap
            max_drift = 0.0
            for agent, before in zip(self.agents, prev_z):
                change = float(np.max(np.abs(agent.z - before), initial=0.0))
                if change > max_drift:
                    max_drift = change
                before[:] = agent.z
            obj = 0.0
            for agent, problem in zip(self.agents, self.problems):
                obj += problem.true_objective(agent.z)
            obj_hist.append(obj)

            # a small edge gap alone can just mean slow joint progress; the
            # fixed point is only reached once the iterates also stop moving
            settled = max_drift <= eps or not self.overlaps
            if max_gap <= eps and settled:
                status = ConsensusStatus.CONVERGED
                rounds = k
                break

        report = ConsensusReport(
            status=status,
            iterations=rounds,
            final_max_residual=max_gap,
            edge_residuals=edge_hist,
            objective_history=obj_hist,
            final_max_drift=max_drift,
            inner_failures=inner_failures,
        )
        return ConsensusResult(
            iterates=[agent.z.copy() for agent in self.agents],
            report=report,
        )


def run_consensus(problems, overlaps, options=ConsensusOptions(),
                  transport=None, scheduler=None, z0_list=None) -> ConsensusResult:
    """One-shot consensus solve of a set of local problems.

    Builds a :class:`ConsensusSolver`, runs it once, and returns the final
    iterates with the diagnostics report.  Infeasibility of any local
    subproblem raises :class:`LocalInfeasibleError`; hitting the round limit
    is reported through ``report.status``, with the best iterates attached.
    """
    solver = ConsensusSolver(problems, overlaps, options, transport, scheduler)
    return solver.solve(z0_list=z0_list)


def extract_input(z, layout):
    """First input block of a converged local iterate."""
    return np.asarray(z, dtype=float)[layout.u_slice(0)].copy()
