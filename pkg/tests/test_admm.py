import numpy as np
import pytest

from dlmpc import qp as qpmod
from dlmpc.admm import (
    ConsensusOptions,
    ConsensusSolver,
    ConsensusStatus,
    LossyTransport,
    SequentialScheduler,
    SynchronousTransport,
    ThreadedScheduler,
    extract_input,
    run_consensus,
)
from dlmpc.fhocp import EdgeOverlap, stack_consensus_qp
from test_fhocp import build_ring3_problems


class _ScalarProblem:
    """Minimal agent problem: minimize (z - target)^2 over one scalar."""

    def __init__(self, target):
        self.qp = qpmod.QuadraticProgram(
            np.array([[2.0]]), np.array([-2.0 * target]),
        )
        self.target = target
        self.objective_constant = target ** 2

    @property
    def dim(self):
        return 1

    def true_objective(self, z):
        return self.qp.objective(z) + self.objective_constant


def scalar_pair(a=1.0, b=3.0):
    problems = [_ScalarProblem(a), _ScalarProblem(b)]
    overlaps = [EdgeOverlap(0, 1, np.array([0]), np.array([0]))]
    return problems, overlaps


class TestToyConsensus:
    def test_two_agents_average(self):
        problems, overlaps = scalar_pair(1.0, 3.0)
        result = run_consensus(problems, overlaps,
                               ConsensusOptions(rho=1.0, eps_consensus=1e-8))
        assert result.report.converged
        assert result.iterates[0][0] == pytest.approx(2.0, abs=1e-6)
        assert result.iterates[1][0] == pytest.approx(2.0, abs=1e-6)
        assert result.report.edge_residuals[(0, 1)][-1] <= 1e-8

    def test_single_agent_one_round(self):
        problems = [_ScalarProblem(5.0)]
        result = run_consensus(problems, [], ConsensusOptions())
        assert result.report.converged
        assert result.report.iterations == 1
        assert result.report.final_max_residual == 0.0
        assert result.iterates[0][0] == pytest.approx(5.0, abs=1e-8)

    def test_lossy_transport_still_converges(self):
        problems, overlaps = scalar_pair(0.0, 4.0)
        result = run_consensus(
            problems, overlaps,
            ConsensusOptions(rho=1.0, eps_consensus=1e-7, max_iter=3000),
            transport=LossyTransport(drop_probability=0.3, seed=7),
        )
        assert result.report.converged
        assert result.iterates[0][0] == pytest.approx(2.0, abs=1e-5)


class TestRing3Consensus:
    def test_matches_stacked_oracle(self, ring3):
        rng = np.random.default_rng(21)
        x_now = rng.uniform(-0.25, 0.25, size=6)
        problems, overlaps, central = build_ring3_problems(ring3, x_now, horizon=3)
        result = run_consensus(problems, overlaps,
                               ConsensusOptions(rho=1.0, eps_consensus=1e-6))
        assert result.report.converged
        stacked, offsets, const = stack_consensus_qp(problems, overlaps)
        ref = qpmod.solve(stacked)
        assert ref.optimal
        obj_admm = result.report.objective_history[-1]
        obj_ref = ref.objective + const
        assert abs(obj_admm - obj_ref) / (1.0 + abs(obj_ref)) < 1e-4

    def test_first_inputs_match_centralized(self, ring3):
        rng = np.random.default_rng(3)
        x_now = rng.uniform(-0.2, 0.2, size=6)
        problems, overlaps, central = build_ring3_problems(ring3, x_now, horizon=3)
        result = run_consensus(problems, overlaps,
                               ConsensusOptions(rho=1.0, eps_consensus=1e-6))
        sol = qpmod.solve(central.qp)
        u_central = central.input_trajectory(sol.z)[0]
        for i, prob in enumerate(problems):
            u_i = extract_input(result.iterates[i], prob.layout)
            assert u_i[0] == pytest.approx(u_central[i], abs=1e-3)

    def test_consensus_consistency_at_termination(self, ring3):
        x_now = np.full(6, 0.15)
        problems, overlaps, _ = build_ring3_problems(ring3, x_now, horizon=3)
        result = run_consensus(problems, overlaps,
                               ConsensusOptions(eps_consensus=1e-5))
        assert result.report.converged
        for ov in overlaps:
            gap = ov.residual(result.iterates[ov.i], result.iterates[ov.j])
            assert gap <= 1e-5

    def test_residuals_decay(self, ring3):
        x_now = np.full(6, 0.2)
        problems, overlaps, _ = build_ring3_problems(ring3, x_now, horizon=3)
        result = run_consensus(
            problems, overlaps,
            ConsensusOptions(rho=1.0, eps_consensus=1e-9, max_iter=2000),
        )
        hist = [max(res[k] for res in result.report.edge_residuals.values())
                for k in range(result.report.iterations)]
        assert len(hist) > 10
        assert hist[-1] < hist[9]


class TestDeterminism:
    def test_bitwise_identical_reruns(self, ring3):
        x_now = np.full(6, 0.1)
        problems, overlaps, _ = build_ring3_problems(ring3, x_now, horizon=3)
        opts = ConsensusOptions(eps_consensus=1e-6)
        r1 = run_consensus(problems, overlaps, opts)
        r2 = run_consensus(problems, overlaps, opts)
        assert r1.report.iterations == r2.report.iterations
        for key in r1.report.edge_residuals:
            assert r1.report.edge_residuals[key] == r2.report.edge_residuals[key]
        for a, b in zip(r1.iterates, r2.iterates):
            np.testing.assert_array_equal(a, b)
        assert r1.report.objective_history == r2.report.objective_history

    def test_sequential_equals_threaded(self, ring3):
        x_now = np.full(6, -0.1)
        problems, overlaps, _ = build_ring3_problems(ring3, x_now, horizon=3)
        opts = ConsensusOptions(eps_consensus=1e-6)
        r_seq = run_consensus(problems, overlaps, opts, scheduler=SequentialScheduler())
        threaded = ThreadedScheduler(max_workers=3)
        r_par = run_consensus(problems, overlaps, opts, scheduler=threaded)
        threaded.close()
        assert r_seq.report.iterations == r_par.report.iterations
        for a, b in zip(r_seq.iterates, r_par.iterates):
            np.testing.assert_array_equal(a, b)
        assert r_seq.report.objective_history == r_par.report.objective_history


class TestSolverReuse:
    def test_warm_restart_with_new_rhs(self, ring3):
        problems, overlaps, _ = build_ring3_problems(ring3, np.zeros(6), horizon=3)
        solver = ConsensusSolver(problems, overlaps, ConsensusOptions(eps_consensus=1e-6))
        first = solver.solve()
        assert first.report.converged
        x_new = np.full(6, 0.05)
        b_eq_list = [p.b_eq_with_initial(x_new[ring3.subsystems[i].nbhd_indices])
                     for i, p in enumerate(problems)]
        second = solver.solve(b_eq_list=b_eq_list, z0_list=first.iterates,
                              keep_duals=True)
        assert second.report.converged
        # reference: fresh problems built at the new state
        fresh_problems, fresh_overlaps, _ = build_ring3_problems(ring3, x_new, horizon=3)
        ref = run_consensus(fresh_problems, fresh_overlaps,
                            ConsensusOptions(eps_consensus=1e-6))
        assert second.report.objective_history[-1] == pytest.approx(
            ref.report.objective_history[-1], abs=1e-4, rel=1e-4)
