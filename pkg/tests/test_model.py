import numpy as np
import pytest

from dlmpc.errors import ConstraintRowUnassignableError, InvalidSystemError
from dlmpc.model import (
    GlobalSystem,
    Partition,
    PartitionedSystem,
    StageCost,
    decompose,
    stage_cost,
    step,
    validate,
)


def single_block_system(n=3, m=2, seed=0):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(n, n)) * 0.3
    b = rng.normal(size=(n, m))
    g = np.vstack([np.eye(n), -np.eye(n)])
    gv = np.full(2 * n, 10.0)
    lm = np.vstack([np.eye(m), -np.eye(m)])
    lv = np.full(2 * m, 2.0)
    sys = GlobalSystem(a, b, g, gv, lm, lv, np.zeros(n), np.ones(n))
    part = Partition.from_sizes([n], [m], [[0]])
    cost = StageCost.separable_blocks(part, [np.eye(n)], [np.eye(m)])
    return sys, part, cost


class TestValidate:
    def test_ring3_valid(self, ring3_system, ring3_partition, ring3_cost):
        report = validate(ring3_system, ring3_partition, ring3_cost)
        assert report.ok, str(report)

    def test_single_block_always_valid(self):
        sys, part, cost = single_block_system()
        assert validate(sys, part, cost).ok

    def test_input_coupling_detected(self):
        # block-diagonal A, but B routes input block 1 into state block 0
        a = np.diag([0.5, 0.5])
        b = np.array([[0.0, 1.0], [1.0, 0.0]])
        g = np.vstack([np.eye(2), -np.eye(2)])
        sys = GlobalSystem(a, b, g, np.full(4, 1.0), np.zeros((0, 2)), np.zeros(0),
                           np.zeros(2), np.zeros(2))
        part = Partition.from_sizes([1, 1], [1, 1], [[], []])
        report = validate(sys, part)
        kinds = {v.kind for v in report.violations}
        assert "input-coupling" in kinds

    def test_missing_neighbor_detected(self, ring3_system):
        part = Partition.from_sizes([2, 2, 2], [1, 1, 1], [[], [], []])
        report = validate(ring3_system, part)
        kinds = {v.kind for v in report.violations}
        assert "dynamics-coupling" in kinds
        assert "constraint-coupling" in kinds

    def test_disconnected_graph_detected(self):
        a = np.diag([0.5, 0.5])
        b = np.eye(2)
        sys = GlobalSystem(a, b, np.zeros((0, 2)), np.zeros(0), np.zeros((0, 2)),
                           np.zeros(0), np.zeros(2), np.zeros(2))
        part = Partition.from_sizes([1, 1], [1, 1], [[], []])
        report = validate(sys, part)
        assert any(v.kind == "graph" for v in report.violations)

    def test_non_equilibrium_target_detected(self):
        a = np.array([[0.5]])
        sys = GlobalSystem(a, np.eye(1), np.array([[1.0], [-1.0]]), np.full(2, 5.0),
                           np.zeros((0, 1)), np.zeros(0), np.array([1.0]), np.zeros(1))
        part = Partition.from_sizes([1], [1], [[0]])
        report = validate(sys, part)
        assert any(v.kind == "equilibrium" for v in report.violations)


class TestDecompose:
    def test_ring3_local_dynamics(self, ring3):
        sub1 = ring3.subsystems[0]
        assert sub1.n_nbhd == 6
        # coupling block of subsystem 1 to 2 is -[0.1 0.2; 0 0.3]
        a12 = sub1.A_nbhd[:, 2:4]
        np.testing.assert_allclose(a12, -np.array([[0.1, 0.2], [0.0, 0.3]]))
        np.testing.assert_allclose(sub1.B, np.array([[0.0], [1.0]]))

    def test_single_block_identity(self):
        sys, part, cost = single_block_system()
        (loc,) = decompose(sys, part, cost)
        np.testing.assert_array_equal(loc.A_nbhd, sys.A)
        np.testing.assert_array_equal(loc.B, sys.B)
        np.testing.assert_array_equal(loc.G_nbhd, sys.G)
        np.testing.assert_array_equal(loc.g_nbhd, sys.g)

    def test_row_ownership_unique_and_lossless(self, ring3_system, ring3_partition, ring3_cost):
        subs = decompose(ring3_system, ring3_partition, ring3_cost)
        seen = np.concatenate([s.owned_state_rows for s in subs])
        assert sorted(seen.tolist()) == list(range(ring3_system.G.shape[0]))
        # each owned row, re-embedded into global coordinates, equals the source row
        n = ring3_system.n
        for s in subs:
            for k, r in enumerate(s.owned_state_rows):
                full = np.zeros(n)
                full[s.nbhd_indices] = s.G_nbhd[k]
                np.testing.assert_array_equal(full, ring3_system.G[r])
                assert s.g_nbhd[k] == ring3_system.g[r]

    def test_coupled_row_owned_by_lower_index(self):
        # 2-subsystem chain with one coupling row x_0 - x_2 <= 0.9
        a = np.diag([0.5, 0.5, 0.5, 0.5])
        a[0, 2] = 0.1
        b = np.vstack([np.eye(2), np.eye(2)])[:, :2]
        b = np.zeros((4, 2)); b[1, 0] = 1.0; b[3, 1] = 1.0
        row = np.zeros(4); row[0], row[2] = 1.0, -1.0
        g = np.vstack([np.eye(4), -np.eye(4), row])
        gv = np.concatenate([np.full(8, 5.0), [0.9]])
        sys = GlobalSystem(a, b, g, gv, np.zeros((0, 2)), np.zeros(0), np.zeros(4), np.zeros(4))
        part = Partition.from_sizes([2, 2], [1, 1], [[1], [0]])
        cost = StageCost.separable_blocks(part, [np.eye(2), np.eye(2)], [np.eye(1), np.eye(1)])
        subs = decompose(sys, part, cost)
        assert 8 in subs[0].owned_state_rows.tolist()
        # the restricted row reproduces the global one on sampled box corners
        k = subs[0].owned_state_rows.tolist().index(8)
        rng = np.random.default_rng(1)
        for _ in range(20):
            x = rng.uniform(-5, 5, size=4)
            assert subs[0].G_nbhd[k] @ x[subs[0].nbhd_indices] == pytest.approx(row @ x)

    def test_unassignable_row_raises(self):
        # three decoupled blocks in a line graph; a row touching blocks 0 and 2
        a = np.diag([0.5] * 3)
        b = np.eye(3)
        row = np.array([1.0, 0.0, -1.0])
        g = np.vstack([np.eye(3), -np.eye(3), row])
        gv = np.concatenate([np.full(6, 5.0), [1.0]])
        sys = GlobalSystem(a, b, g, gv, np.zeros((0, 3)), np.zeros(0), np.zeros(3), np.zeros(3))
        part = Partition.from_sizes([1, 1, 1], [1, 1, 1], [[1], [0, 2], [1]])
        cost = StageCost.separable_blocks(part, [np.eye(1)] * 3, [np.eye(1)] * 3)
        with pytest.raises((ConstraintRowUnassignableError, InvalidSystemError)):
            decompose(sys, part, cost)


class TestStep:
    def test_equilibrium_fixed_point(self, ring3_system):
        x = step(ring3_system, ring3_system.x_target, np.zeros(3))
        np.testing.assert_allclose(x, ring3_system.x_target)

    def test_unit_vector_gives_column(self, ring3_system):
        e1 = np.zeros(6)
        e1[0] = 1.0
        np.testing.assert_array_equal(step(ring3_system, e1, np.zeros(3)),
                                      ring3_system.A[:, 0])

    def test_global_matches_stacked_local(self, ring3):
        rng = np.random.default_rng(7)
        for _ in range(25):
            x = rng.normal(size=6)
            u = rng.normal(size=3)
            full = step(ring3.plant, x, u)
            for sub in ring3.subsystems:
                local = sub.step(x[sub.nbhd_indices], u[sub.input_indices])
                np.testing.assert_array_equal(local, full[sub.state_indices])


class TestStageCost:
    def test_equilibrium_cost_zero(self, ring3):
        total, parts = stage_cost(ring3.cost, ring3.plant.x_target, np.zeros(3),
                                  ring3.plant.x_target)
        assert total == 0.0
        assert parts == [0.0, 0.0, 0.0]

    def test_identity_weights_unit_state(self, ring3):
        total, _ = stage_cost(ring3.cost, np.ones(6), np.zeros(3), np.zeros(6))
        assert total == pytest.approx(6.0)

    def test_breakdown_sums_exactly(self, ring3):
        rng = np.random.default_rng(3)
        for _ in range(25):
            x = rng.normal(size=6)
            u = rng.normal(size=3)
            total, parts = stage_cost(ring3.cost, x, u, np.zeros(6))
            acc = 0.0
            for p in parts:
                acc += p
            assert total == acc

    def test_shifted_equilibrium(self):
        # A x_target = x_target with x_target != 0; cost must vanish there
        a = np.array([[1.0, 0.0], [0.0, 0.5]])
        b = np.array([[0.0], [1.0]])
        g = np.vstack([np.eye(2), -np.eye(2)])
        x_t = np.array([2.0, 0.0])
        sys = GlobalSystem(a, b, g, np.full(4, 5.0), np.array([[1.0], [-1.0]]),
                           np.full(2, 3.0), x_t, np.zeros(2))
        part = Partition.from_sizes([2], [1], [[0]])
        cost = StageCost.separable_blocks(part, [np.eye(2)], [np.eye(1)])
        assert validate(sys, part, cost).ok
        total, _ = stage_cost(cost, x_t, np.zeros(1), x_t)
        assert total == 0.0
        total, _ = stage_cost(cost, np.array([3.0, 0.0]), np.zeros(1), x_t)
        assert total == pytest.approx(1.0)

    def test_global_weight_reconstruction(self, ring3_cost):
        np.testing.assert_allclose(ring3_cost.global_state_weight(), np.eye(6))
        np.testing.assert_allclose(ring3_cost.global_input_weight(), np.eye(3))

    def test_coupled_cost_supported(self, ring3_partition):
        rng = np.random.default_rng(5)
        q_nbhd = []
        for i in range(3):
            mroot = rng.normal(size=(6, 6)) * 0.2
            q_nbhd.append(mroot @ mroot.T)
        cost = StageCost(ring3_partition, q_nbhd, [np.eye(1)] * 3)
        x = rng.normal(size=6)
        u = rng.normal(size=3)
        total, parts = cost.evaluate(x, u, np.zeros(6))
        q_glob = cost.global_state_weight()
        expected = x @ q_glob @ x + u @ u
        assert total == pytest.approx(expected, rel=1e-12)


class TestPartition:
    def test_neighbors_symmetric_and_reflexive(self):
        part = Partition.from_sizes([1, 1, 1], [1, 1, 1], [[1], [], [1]])
        assert part.neighbor_sets[0] == (0, 1)
        assert part.neighbor_sets[1] == (0, 1, 2)
        assert part.neighbor_sets[2] == (1, 2)

    def test_edges(self, ring3_partition):
        assert ring3_partition.edges() == [(0, 1), (0, 2), (1, 2)]

    def test_build_bundle(self, ring3):
        assert ring3.n_subsystems == 3
        x = np.arange(6.0)
        np.testing.assert_array_equal(ring3.measured_neighborhood(0, x), x)
