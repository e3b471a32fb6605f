import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dlmpc.errors import (
    EmptySafeSetError,
    NotConvergedError,
    RegistryMismatchError,
)
from dlmpc.safeset import RetentionPolicy, SafeSetStore, seed_store
from oracles import min_cost_combination


def two_sub_store(**kwargs):
    return SafeSetStore([np.zeros(2), np.zeros(1)], **kwargs)


def add_iteration(store, it, length, seed=0, scale=1.0, exact_final=False):
    """Add a synthetic converging iteration to every subsystem.

    The final point sits a distinct hair away from the target unless
    ``exact_final`` asks for a bitwise-identical endpoint.
    """
    rng = np.random.default_rng(seed + it)
    for i, n_i in enumerate([2, 1]):
        pts = rng.normal(size=(length - 1, n_i)) * scale
        final = np.zeros((1, n_i)) if exact_final else np.full((1, n_i), (it + 1) * 1e-6)
        states = np.vstack([pts, final])
        inputs = np.vstack([rng.normal(size=(length - 1, 1)), np.zeros((1, 1))])
        stage = np.concatenate([rng.uniform(0.5, 2.0, size=length - 1), [0.0]])
        store.add_trajectory(i, it, states, inputs, stage)
    return store


class TestAddTrajectory:
    def test_cost_to_go_telescopes(self):
        store = two_sub_store()
        states = np.array([[1.0, 0], [0.5, 0], [0.2, 0], [0, 0]])
        inputs = np.zeros((4, 1))
        store.add_trajectory(0, 0, states, inputs, [3.0, 2.0, 1.0, 0.0])
        store.add_trajectory(1, 0, np.zeros((4, 1)), inputs, [0.0] * 4)
        traj = store.trajectory(0, 0)
        np.testing.assert_array_equal(traj.cost_to_go, [6.0, 3.0, 1.0, 0.0])

    def test_equilibrium_seed(self):
        store = seed_store([np.zeros(2), np.zeros(1)], input_sizes=[1, 1])
        d0, c0 = store.safe_set_matrix(0)
        np.testing.assert_array_equal(d0, np.zeros((2, 1)))
        np.testing.assert_array_equal(c0, [0.0])
        assert store.registry == [(0, 0)]

    def test_not_converged_rejected(self):
        store = two_sub_store()
        with pytest.raises(NotConvergedError):
            store.add_trajectory(0, 0, [[1.0, 1.0]], np.zeros((1, 1)), [0.5])

    def test_dirty_tail_rejected(self):
        store = two_sub_store()
        with pytest.raises(NotConvergedError):
            store.add_trajectory(0, 0, [[0.0, 0.0]], np.zeros((1, 1)), [1e-3])

    def test_length_mismatch_between_subsystems(self):
        store = two_sub_store()
        store.add_trajectory(0, 0, np.zeros((3, 2)), np.zeros((3, 1)), [0.0] * 3)
        with pytest.raises(RegistryMismatchError):
            store.add_trajectory(1, 0, np.zeros((2, 1)), np.zeros((2, 1)), [0.0] * 2)

    def test_iteration_id_reuse_rejected(self):
        store = two_sub_store()
        add_iteration(store, 0, 3)
        with pytest.raises(RegistryMismatchError):
            store.add_trajectory(0, 0, np.zeros((1, 2)), np.zeros((1, 1)), [0.0])

    @given(st.lists(st.floats(min_value=0.0, max_value=10.0), min_size=1, max_size=12))
    @settings(max_examples=50, deadline=None)
    def test_cost_to_go_nonincreasing(self, stage):
        stage = stage + [0.0]
        length = len(stage)
        store = two_sub_store()
        states = np.vstack([np.ones((length - 1, 2)) * 1e-9, np.zeros((1, 2))])
        store.add_trajectory(0, 0, states, np.zeros((length, 1)), stage)
        store.add_trajectory(1, 0, np.zeros((length, 1)), np.zeros((length, 1)),
                             [0.0] * length)
        ctg = store.trajectory(0, 0).cost_to_go
        assert np.all(np.diff(ctg) <= 1e-12)


class TestRegistry:
    def test_columns_concatenate_in_order(self):
        store = two_sub_store()
        add_iteration(store, 0, 3)
        add_iteration(store, 1, 4)
        assert store.n_columns == 7
        assert store.registry[:3] == [(0, 0), (0, 1), (0, 2)]
        assert store.registry[3:] == [(1, 0), (1, 1), (1, 2), (1, 3)]
        d0, c0 = store.safe_set_matrix(0)
        d1, c1 = store.safe_set_matrix(1)
        assert d0.shape == (2, 7) and d1.shape == (1, 7)
        assert c0.shape == (7,) and c1.shape == (7,)

    def test_exact_duplicate_column_dropped(self):
        store = two_sub_store()
        add_iteration(store, 0, 3, exact_final=True)
        add_iteration(store, 1, 4, exact_final=True)
        # final point of both iterations is the exact target with zero cost,
        # so iteration 1 contributes one column less
        assert ((1, 3) in store.registry) is False
        assert store.n_columns == 6

    def test_growth_under_keep_all(self):
        store = two_sub_store()
        prev = []
        for it in range(4):
            add_iteration(store, it, 4)
            cur = store.registry
            assert cur[: len(prev)] == prev
            prev = cur

    def test_global_safe_set_stacks_and_sums(self):
        store = two_sub_store()
        add_iteration(store, 0, 3)
        d, c = store.global_safe_set()
        d0, c0 = store.safe_set_matrix(0)
        d1, c1 = store.safe_set_matrix(1)
        np.testing.assert_array_equal(d, np.vstack([d0, d1]))
        np.testing.assert_allclose(c, c0 + c1)

    def test_empty_store_raises(self):
        store = two_sub_store()
        with pytest.raises(EmptySafeSetError):
            store.safe_set_matrix(0)

    def test_min_combination_never_exceeds_stored_cost(self):
        store = two_sub_store()
        add_iteration(store, 0, 5, scale=2.0)
        add_iteration(store, 1, 4, scale=1.0)
        d0, c0 = store.safe_set_matrix(0)
        for k in range(d0.shape[1]):
            val = min_cost_combination(d0, c0, d0[:, k])
            assert val is not None
            assert val <= c0[k] + 1e-7


class TestRetention:
    def test_keep_all_is_identity(self):
        store = two_sub_store()
        add_iteration(store, 0, 3)
        before = store.registry
        store.prune(RetentionPolicy(None))
        assert store.registry == before

    def test_keep_last_one(self):
        store = two_sub_store()
        for it in range(3):
            add_iteration(store, it, 3)
        store.prune(RetentionPolicy(1))
        assert store.iteration_ids == [2]
        assert all(rt[0] == 2 for rt in store.registry)

    def test_retention_applies_on_add(self):
        store = two_sub_store(retention=RetentionPolicy(2))
        for it in range(4):
            add_iteration(store, it, 3)
        assert store.iteration_ids == [2, 3]

    def test_parse_roundtrip(self):
        assert str(RetentionPolicy.parse("keep-all")) == "keep-all"
        assert str(RetentionPolicy.parse("keep-last-3")) == "keep-last-3"
        with pytest.raises(ValueError):
            RetentionPolicy.parse("sometimes")


class TestSnapshot:
    def test_roundtrip(self, tmp_path):
        store = two_sub_store()
        add_iteration(store, 0, 4)
        add_iteration(store, 1, 3)
        path = tmp_path / "snapshot.json"
        store.save(path)
        loaded = SafeSetStore.load(path)
        assert loaded.registry == store.registry
        for i in range(2):
            d_a, c_a = store.safe_set_matrix(i)
            d_b, c_b = loaded.safe_set_matrix(i)
            np.testing.assert_array_equal(d_a, d_b)
            np.testing.assert_array_equal(c_a, c_b)

    def test_tampered_registry_rejected(self, tmp_path):
        import json
        store = two_sub_store()
        add_iteration(store, 0, 3)
        path = tmp_path / "snapshot.json"
        store.save(path)
        payload = json.loads(path.read_text())
        payload["registry"] = payload["registry"][::-1]
        path.write_text(json.dumps(payload))
        with pytest.raises(RegistryMismatchError):
            SafeSetStore.load(path)
