import numpy as np
import pytest

from dlmpc.model import GlobalSystem, Partition, StageCost, PartitionedSystem


def ring3_matrices():
    """Three coupled two-state subsystems on a directed coupling cycle."""
    a11 = np.array([[1.0, 0.5], [0.0, 1.1]])
    a22 = np.array([[1.05, 0.6], [0.0, 1.0]])
    a33 = np.array([[1.0, 0.55], [0.0, 1.05]])
    ac = -np.array([[0.1, 0.2], [0.0, 0.3]])
    z = np.zeros((2, 2))
    a = np.block([[a11, ac, z], [z, a22, ac], [ac, z, a33]])
    b1 = np.array([[0.0], [1.0]])
    b = np.block([
        [b1, np.zeros((2, 2))],
        [np.zeros((2, 1)), b1, np.zeros((2, 1))],
        [np.zeros((2, 2)), b1],
    ])
    return a, b


def ring3_constraints():
    n, m = 6, 3
    g_rows = []
    g_rhs = []
    for k in range(n):
        row = np.zeros(n)
        row[k] = 1.0
        g_rows.append(row.copy())
        g_rhs.append(5.0)
        row[k] = -1.0
        g_rows.append(row.copy())
        g_rhs.append(5.0)
    for (i, j) in [(0, 2), (2, 4)]:
        row = np.zeros(n)
        row[i], row[j] = 1.0, -1.0
        g_rows.append(row.copy())
        g_rhs.append(0.9)
        g_rows.append(-row.copy())
        g_rhs.append(0.9)
    l_rows = np.vstack([np.eye(m), -np.eye(m)])
    l_rhs = np.full(2 * m, 3.0)
    return np.array(g_rows), np.array(g_rhs), l_rows, l_rhs


@pytest.fixture(scope="session")
def ring3_system():
    a, b = ring3_matrices()
    g_mat, g_vec, l_mat, l_vec = ring3_constraints()
    return GlobalSystem(
        A=a, B=b, G=g_mat, g=g_vec, L=l_mat, l=l_vec,
        x_target=np.zeros(6),
        x_start=np.array([-5.0, 0.0, -4.5, 0.0, -4.0, 0.0]),
    )


@pytest.fixture(scope="session")
def ring3_partition():
    return Partition.from_sizes([2, 2, 2], [1, 1, 1], [[1, 2], [0, 2], [0, 1]])


@pytest.fixture(scope="session")
def ring3_cost(ring3_partition):
    return StageCost.separable_blocks(
        ring3_partition, [np.eye(2)] * 3, [np.eye(1)] * 3
    )


@pytest.fixture(scope="session")
def ring3(ring3_system, ring3_partition, ring3_cost):
    return PartitionedSystem.build(ring3_system, ring3_partition, ring3_cost)
