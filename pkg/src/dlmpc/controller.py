"""Closed-loop distributed controller for iterative tasks.

Per time step every agent assembles its local problem at the measured
neighborhood state, the network solves the coupled set by consensus, each
agent applies its first input, and the plant advances.  When the global
state reaches the target the realized trajectories are added to the safe
sets with their costs-to-go, and the next iteration starts with a richer
terminal set.  The per-agent KKT factorizations are built once per
iteration and reused across its time steps; warm starts shift the previous
solution forward by one step.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .admm import ConsensusOptions, ConsensusSolver, ConsensusStatus
from .errors import (
    BootstrapFailedError,
    DimensionMismatchError,
    IterationDidNotConvergeError,
    LocalInfeasibleError,
    NotConvergedError,
    RecursiveFeasibilityError,
)
from .fhocp import build_centralized, build_local, build_plain, edge_overlaps
from .model import PartitionedSystem
from .qp import QpSettings, solve as qp_solve
from .safeset import RetentionPolicy, SafeSetStore


@dataclass(frozen=True)
class RunConfig:
    """Everything a closed-loop run needs beyond the system itself."""

    horizon: int = 4
    iterations: int = 10
    rho: float = 1.0
    eps_consensus: float = 1e-5
    max_admm_iterations: int = 5000
    convergence_epsilon: float = 1e-3
    max_time_steps: int = 200
    retention: RetentionPolicy = field(default_factory=RetentionPolicy)
    seed: int = 0
    bootstrap_horizon: int = 15
    bootstrap_state_weight: float = 0.1

    def __post_init__(self):
        if self.horizon < 1 or self.max_time_steps < 1 or self.iterations < 0:
            raise DimensionMismatchError("horizon/time-step/iteration budgets must be positive")

    def consensus_options(self):
        return ConsensusOptions(
            rho=self.rho,
            eps_consensus=self.eps_consensus,
            max_iter=self.max_admm_iterations,
        )


@dataclass
class IterationRecord:
    """Everything recorded about one closed-loop iteration."""

    iteration_id: int
    states: list            # per-subsystem (T+1, n_i)
    inputs: list            # per-subsystem (T+1, m_i), final row zero
    stage_costs: list       # per-subsystem (T+1,)
    subsystem_costs: list
    total_cost: float
    step_summaries: list    # per-time-step consensus summaries
    step_objectives: list   # optimal coupled objective per time step
    converged: bool
    flagged: bool
    wall_time: float

    @property
    def steps(self):
        return len(self.step_objectives)


class AdmmDiagnostics:
    """Collects per-round consensus rows for the optional diagnostics dump."""

    def __init__(self):
        self.rows = []

    def collect(self, time_step, report):
        keys = sorted(report.edge_residuals)
        n_rounds = report.iterations
        for k in range(n_rounds):
            for key in keys:
                self.rows.append((
                    time_step, k + 1, f"{key[0]}-{key[1]}",
                    report.edge_residuals[key][k],
                    report.objective_history[k],
                ))


def make_store(system: PartitionedSystem, config: RunConfig) -> SafeSetStore:
    """Empty safe-set store wired to the system's per-subsystem targets."""
    return SafeSetStore(
        [sub.x_target_own for sub in system.subsystems],
        convergence_epsilon=config.convergence_epsilon,
        retention=config.retention,
    )


def _split_states(system, states_global):
    return [np.asarray(states_global, dtype=float)[:, sub.state_indices]
            for sub in system.subsystems]


def _split_inputs(system, inputs_global):
    return [np.asarray(inputs_global, dtype=float)[:, sub.input_indices]
            for sub in system.subsystems]


def validate_trajectory(system: PartitionedSystem, states, inputs,
                        constraint_tol=1e-7, dynamics_tol=1e-8,
                        convergence_epsilon=1e-3):
    """Check a realized trajectory against the plant before storing it.

    States must satisfy the global constraints, inputs theirs, consecutive
    states must follow the dynamics, and the final state must be inside the
    convergence ball of the target.  The final transition is only required
    to land within that ball (the stored endpoint is snapped to the target).
    """
    plant = system.plant
    states = np.atleast_2d(np.asarray(states, dtype=float))
    inputs = np.atleast_2d(np.asarray(inputs, dtype=float))
    horizon = states.shape[0]
    if inputs.shape[0] == horizon - 1:
        inputs = np.vstack([inputs, np.zeros((1, plant.m))])
    if inputs.shape[0] != horizon:
        raise DimensionMismatchError("inputs inconsistent with states")
    for t in range(horizon):
        viol = float(np.max(plant.G @ states[t] - plant.g, initial=0.0))
        if viol > constraint_tol:
            raise NotConvergedError(f"state constraint violated by {viol:.2e} at t={t}")
        viol = float(np.max(plant.L @ inputs[t] - plant.l, initial=0.0))
        if viol > constraint_tol:
            raise NotConvergedError(f"input constraint violated by {viol:.2e} at t={t}")
    for t in range(horizon - 1):
        pred = plant.A @ states[t] + plant.B @ inputs[t]
        gap = float(np.max(np.abs(pred - states[t + 1])))
        tol = dynamics_tol if t + 2 < horizon else convergence_epsilon + dynamics_tol
        if gap > tol:
            raise NotConvergedError(f"dynamics gap {gap:.2e} at t={t}")
    final_gap = float(np.linalg.norm(states[-1] - plant.x_target))
    if final_gap > convergence_epsilon:
        raise NotConvergedError(f"trajectory ends {final_gap:.2e} from the target")
    return states, inputs


def ingest_trajectory(system: PartitionedSystem, store: SafeSetStore,
                      iteration_id, states, inputs, validate=True):
    """Validate a successful global trajectory and add it to every subsystem.

    The final point is snapped to the target with zero input and zero stage
    cost; per-subsystem stage costs are evaluated on neighborhood slices.
    Returns (total cost, per-subsystem costs).
    """
    if validate:
        states, inputs = validate_trajectory(
            system, states, inputs,
            convergence_epsilon=store.convergence_epsilon)
    else:
        states = np.atleast_2d(np.asarray(states, dtype=float))
        inputs = np.atleast_2d(np.asarray(inputs, dtype=float))
        if inputs.shape[0] == states.shape[0] - 1:
            inputs = np.vstack([inputs, np.zeros((1, system.plant.m))])
    states = states.copy()
    inputs = inputs.copy()
    states[-1] = system.plant.x_target
    inputs[-1] = 0.0
    horizon = states.shape[0]
    for sub in system.subsystems:
        stage = np.empty(horizon)
        for t in range(horizon):
            stage[t] = sub.stage_cost(states[t][sub.nbhd_indices],
                                      inputs[t][sub.input_indices])
        stage[-1] = 0.0
        store.add_trajectory(sub.index, iteration_id,
                             states[:, sub.state_indices],
                             inputs[:, sub.input_indices], stage)
    return store.iteration_cost(iteration_id)


def seed_record(system, store, iteration_id, wall_time=0.0) -> IterationRecord:
    """Record describing an already stored iteration (a seed trajectory)."""
    total, parts = store.iteration_cost(iteration_id)
    slot = [store.trajectory(iteration_id, i) for i in range(store.n_subsystems)]
    return IterationRecord(
        iteration_id=iteration_id,
        states=[t.states.copy() for t in slot],
        inputs=[t.inputs.copy() for t in slot],
        stage_costs=[np.concatenate([-np.diff(t.cost_to_go), t.cost_to_go[-1:]])
                     for t in slot],
        subsystem_costs=parts,
        total_cost=total,
        step_summaries=[],
        step_objectives=[],
        converged=True,
        flagged=False,
        wall_time=wall_time,
    )


def _shift_iterate(layout, z):
    """Advance a converged iterate one step as the next warm start."""
    z_new = np.asarray(z, dtype=float).copy()
    n = layout.horizon
    for k in range(n - 1):
        z_new[layout.x_slice(k)] = z[layout.x_slice(k + 1)]
        z_new[layout.u_slice(k)] = z[layout.u_slice(k + 1)]
    z_new[layout.own_indices(n - 1)] = z[layout.terminal_slice]
    return z_new


class _IterationEngine:
    """Consensus machinery shared by all time steps of one iteration."""

    def __init__(self, system, store, config, transport, scheduler, terminal=True):
        self.system = system
        self.config = config
        self.terminal = terminal
        x0 = system.plant.x_start
        problems = []
        for sub in system.subsystems:
            x_nbhd = x0[sub.nbhd_indices]
            if terminal:
                d_i, c_i = store.safe_set_matrix(sub.index)
                problems.append(build_local(sub, d_i, c_i, x_nbhd, config.horizon))
            else:
                problems.append(build_plain(
                    sub, x_nbhd, config.bootstrap_horizon,
                    state_weight_scale=config.bootstrap_state_weight))
        self.problems = problems
        overlaps = edge_overlaps(system.partition, [p.layout for p in problems])
        self.solver = ConsensusSolver(problems, overlaps,
                                      config.consensus_options(),
                                      transport, scheduler)
        self._warm = None

    def step(self, x):
        """Consensus solve at the measured state; returns inputs and report.

        The edge-residual threshold shrinks with the distance to the target:
        the terminal approach needs relative input accuracy or the loop
        would level off just outside the convergence ball.
        """
        b_eq_list = [
            p.b_eq_with_initial(x[sub.nbhd_indices])
            for p, sub in zip(self.problems, self.system.subsystems)
        ]
        dist = float(np.linalg.norm(x - self.system.plant.x_target))
        eps = min(self.config.eps_consensus, max(1e-3 * dist, 1e-9))
        try:
            result = self.solver.solve(
                b_eq_list=b_eq_list,
                z0_list=self._warm,
                keep_duals=self._warm is not None,
                eps_override=eps,
            )
        except LocalInfeasibleError as err:
            raise RecursiveFeasibilityError(err.subsystem, -1) from err
        self._warm = [
            _shift_iterate(p.layout, z)
            for p, z in zip(self.problems, result.iterates)
        ]
        u = np.zeros(self.system.plant.m)
        for prob, z, sub in zip(self.problems, result.iterates, self.system.subsystems):
            u[sub.input_indices] = prob.first_input(z)
        return u, result


def run_time_step(system: PartitionedSystem, store: SafeSetStore, x, config: RunConfig,
                  transport=None, scheduler=None):
    """One receding-horizon step: solve, apply first inputs, advance plant.

    Standalone form of the loop body; builds the consensus machinery fresh.
    Returns (u, x_next, ConsensusReport).
    """
    engine = _IterationEngine(system, store, config, transport, scheduler)
    u, result = engine.step(np.asarray(x, dtype=float))
    x_next = system.plant.A @ np.asarray(x, dtype=float) + system.plant.B @ u
    return u, x_next, result.report


def run_iteration(system: PartitionedSystem, store: SafeSetStore, x_start,
                  iteration_id, config: RunConfig, transport=None, scheduler=None,
                  diagnostics=None, update_store=True) -> IterationRecord:
    """Run one closed-loop iteration from ``x_start`` until the target.

    On convergence the realized trajectories are appended to the safe sets
    (unless ``update_store`` is off).  Raises IterationDidNotConvergeError
    when the step budget runs out and RecursiveFeasibilityError if any
    local problem turns infeasible.
    """
    t_begin = time.perf_counter()
    x = np.asarray(x_start, dtype=float).copy()
    engine = _IterationEngine(system, store, config, transport, scheduler)
    states = [x.copy()]
    inputs = []
    summaries = []
    objectives = []
    flagged = False
    plant = system.plant
    t = 0
    while True:
        if float(np.linalg.norm(x - plant.x_target)) <= config.convergence_epsilon:
            break
        if t >= config.max_time_steps:
            raise IterationDidNotConvergeError(
                f"iteration {iteration_id}: {config.max_time_steps} steps exhausted "
                f"({float(np.linalg.norm(x - plant.x_target)):.3e} from target)"
            )
        try:
            u, result = engine.step(x)
        except RecursiveFeasibilityError as err:
            raise RecursiveFeasibilityError(err.subsystem, t) from err
        if result.report.status is ConsensusStatus.MAX_ITER:
            flagged = True
        if diagnostics is not None:
            diagnostics.collect(t, result.report)
        summaries.append(result.report.summary())
        objectives.append(result.report.objective_history[-1])
        x = plant.A @ x + plant.B @ u
        inputs.append(u.copy())
        states.append(x.copy())
        t += 1

    states = np.array(states)
    inputs = np.array(inputs) if inputs else np.zeros((0, plant.m))
    if update_store:
        total, parts = ingest_trajectory(system, store, iteration_id, states, inputs,
                                         validate=False)
        slot = [store.trajectory(iteration_id, i) for i in range(store.n_subsystems)]
        rec_states = [tr.states.copy() for tr in slot]
        rec_inputs = [tr.inputs.copy() for tr in slot]
        rec_stage = [np.concatenate([-np.diff(tr.cost_to_go), tr.cost_to_go[-1:]])
                     for tr in slot]
    else:
        snap_states = states.copy()
        snap_states[-1] = plant.x_target
        full_inputs = np.vstack([inputs, np.zeros((1, plant.m))])
        rec_states = _split_states(system, snap_states)
        rec_inputs = _split_inputs(system, full_inputs)
        rec_stage = []
        parts = []
        for sub in system.subsystems:
            stage = np.array([
                sub.stage_cost(snap_states[t][sub.nbhd_indices],
                               full_inputs[t][sub.input_indices])
                for t in range(snap_states.shape[0])
            ])
            stage[-1] = 0.0
            rec_stage.append(stage)
            parts.append(float(stage.sum()))
        total = 0.0
        for p in parts:
            total += p

    return IterationRecord(
        iteration_id=iteration_id,
        states=rec_states,
        inputs=rec_inputs,
        stage_costs=rec_stage,
        subsystem_costs=list(parts),
        total_cost=total,
        step_summaries=summaries,
        step_objectives=objectives,
        converged=True,
        flagged=flagged,
        wall_time=time.perf_counter() - t_begin,
    )


def run_task(system: PartitionedSystem, store: SafeSetStore, config: RunConfig,
             transport=None, scheduler=None, diagnostics=None) -> list:
    """Run ``config.iterations`` closed-loop iterations from the task start.

    The store must already hold at least one successful trajectory; new
    iterations are appended under ids continuing the stored ones.
    """
    records = []
    next_id = (max(store.iteration_ids) + 1) if store.iteration_ids else 0
    for q in range(config.iterations):
        rec = run_iteration(system, store, system.plant.x_start, next_id + q,
                            config, transport, scheduler, diagnostics)
        records.append(rec)
    return records


def bootstrap_feasible(system: PartitionedSystem, config: RunConfig,
                       transport=None, scheduler=None):
    """Generate a first feasible trajectory with a terminal-free controller.

    A plain receding-horizon controller (longer horizon, down-weighted state
    cost) runs the same consensus machinery without any terminal set.
    Returns (states, inputs) global arrays; raises BootstrapFailedError when
    it cannot reach the target within the step budget.
    """
    engine = _IterationEngine(system, None, config, transport, scheduler,
                              terminal=False)
    plant = system.plant
    x = plant.x_start.copy()
    states = [x.copy()]
    inputs = []
    t = 0
    while True:
        if float(np.linalg.norm(x - plant.x_target)) <= config.convergence_epsilon:
            return np.array(states), np.array(inputs)
        if t >= config.max_time_steps:
            raise BootstrapFailedError(
                f"bootstrap did not reach the target in {config.max_time_steps} steps"
            )
        try:
            u, result = engine.step(x)
        except RecursiveFeasibilityError as err:
            raise BootstrapFailedError(
                f"bootstrap subproblem of subsystem {err.subsystem} infeasible"
            ) from err
        x = plant.A @ x + plant.B @ u
        inputs.append(u.copy())
        states.append(x.copy())
        t += 1


def centralized_infinite_horizon(system: PartitionedSystem, horizon=200,
                                 settings=None):
    """Long-horizon centralized solve approximating the task's best cost.

    Terminal set is the target point itself; with a horizon well past the
    settling time this equals the infinite-horizon optimum for practical
    purposes.  Returns (cost, problem, solution).
    """
    plant = system.plant
    d = plant.x_target.reshape(-1, 1)
    c = np.zeros(1)
    prob = build_centralized(plant, system.cost, d, c, plant.x_start, horizon)
    if settings is None:
        settings = QpSettings(rho=1.0, polish=False, eps_abs=1e-9, eps_rel=1e-9,
                              max_iter=200000, check_interval=50)
    sol = qp_solve(prob.qp, settings=settings)
    if not sol.optimal:
        raise IterationDidNotConvergeError(
            f"centralized reference solve ended with status {sol.status.value}")
    return prob.true_objective(sol.z), prob, sol


def write_run_outputs(records, outdir, diagnostics=None):
    """Emit the standard CSV artifacts of a run into ``outdir``.

    Files: trajectories.csv (iteration, t, subsystem, states, inputs),
    costs.csv (iteration, scope, cost), and admm.csv when diagnostics were
    collected.  Numbers use the shortest round-trip decimal form.
    """
    import os

    os.makedirs(outdir, exist_ok=True)
    n_max = max(max(s.shape[1] for s in rec.states) for rec in records)
    m_max = max(max(u.shape[1] for u in rec.inputs) for rec in records)
    lines = ["iteration,t,subsystem,"
             + ",".join(f"x{k}" for k in range(n_max)) + ","
             + ",".join(f"u{k}" for k in range(m_max))]
    for rec in records:
        for i, (st, inp) in enumerate(zip(rec.states, rec.inputs)):
            for t in range(st.shape[0]):
                xs = [repr(v) for v in st[t]] + [""] * (n_max - st.shape[1])
                us = [repr(v) for v in inp[t]] + [""] * (m_max - inp.shape[1])
                lines.append(f"{rec.iteration_id},{t},{i}," + ",".join(xs + us))
    path = os.path.join(outdir, "trajectories.csv")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")

    lines = ["iteration,scope,cost"]
    for rec in records:
        lines.append(f"{rec.iteration_id},global,{rec.total_cost!r}")
        for i, cost in enumerate(rec.subsystem_costs):
            lines.append(f"{rec.iteration_id},{i},{cost!r}")
    with open(os.path.join(outdir, "costs.csv"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")

    if diagnostics is not None and diagnostics.rows:
        lines = ["time_step,admm_iter,edge,residual,global_objective"]
        for row in diagnostics.rows:
            lines.append(f"{row[0]},{row[1]},{row[2]},{row[3]!r},{row[4]!r}")
        with open(os.path.join(outdir, "admm.csv"), "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")
