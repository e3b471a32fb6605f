"""Per-subsystem stores of recorded trajectories and their costs-to-go.

Every successful closed-loop iteration contributes one trajectory per
subsystem.  The stored states are the columns of the data matrices behind
the local convex terminal sets, and the stored costs-to-go are the weights
of the barycentric terminal cost.  All subsystems share one column registry
mapping ``(iteration_id, time)`` to a column index, so a single simplex
weight vector is meaningful across the whole network.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import (
    DimensionMismatchError,
    EmptySafeSetError,
    NotConvergedError,
    RegistryMismatchError,
)


@dataclass(frozen=True)
class RetentionPolicy:
    """How many past iterations to retain; ``keep_last=None`` keeps all."""

    keep_last: int = None

    def __post_init__(self):
        if self.keep_last is not None and self.keep_last < 1:
            raise ValueError("keep_last must be at least 1")

    @classmethod
    def parse(cls, text):
        text = str(text).strip()
        if text == "keep-all":
            return cls(None)
        if text.startswith("keep-last-"):
            return cls(int(text[len("keep-last-"):]))
        raise ValueError(f"unknown retention policy {text!r}")

    def __str__(self):
        return "keep-all" if self.keep_last is None else f"keep-last-{self.keep_last}"


@dataclass(frozen=True)
class StoredTrajectory:
    """One subsystem's slice of a successful iteration."""

    iteration_id: int
    states: np.ndarray      # (T+1, n_i)
    inputs: np.ndarray      # (T+1, m_i); final row is the equilibrium input 0
    cost_to_go: np.ndarray  # (T+1,)

    def __len__(self):
        return self.states.shape[0]


class SafeSetStore:
    """Shared-registry container of per-subsystem safe-set data.

    Parameters
    ----------
    targets : sequence of ndarray
        Per-subsystem equilibrium states the trajectories must reach.
    convergence_epsilon : float
        Euclidean acceptance distance of the final state from the target.
    tail_epsilon : float
        Maximum stage cost allowed at the final stored point.
    retention : RetentionPolicy
    """

    def __init__(self, targets, convergence_epsilon=1e-3, tail_epsilon=1e-6,
                 retention=RetentionPolicy()):
        self.targets = [np.asarray(t, dtype=float) for t in targets]
        self.convergence_epsilon = float(convergence_epsilon)
        self.tail_epsilon = float(tail_epsilon)
        self.retention = retention
        self._pending = {}
        self._order = []
        self._iterations = {}
        self._registry = []
        self._columns = [np.zeros((t.shape[0], 0)) for t in self.targets]
        self._costs = np.zeros(0)

    @property
    def n_subsystems(self):
        return len(self.targets)

    @property
    def registry(self):
        """Committed columns as a list of (iteration_id, time) pairs."""
        return list(self._registry)

    @property
    def n_columns(self):
        return len(self._registry)

    @property
    def iteration_ids(self):
        return list(self._order)

    def trajectory(self, iteration_id, subsystem):
        return self._iterations[iteration_id][subsystem]

    # -- ingestion ---------------------------------------------------------

    def add_trajectory(self, subsystem, iteration_id, states, inputs, stage_costs):
        """Add one subsystem's trajectory of a (hopefully) finished iteration.

        The cost-to-go is accumulated backwards from the supplied stage
        costs.  The iteration is committed to the shared registry once every
        subsystem has delivered its slice; all slices must agree on length.

        Raises
        ------
        NotConvergedError
            Final state too far from the target, or final stage cost above
            the tail threshold.
        RegistryMismatchError
            Slices of one iteration disagree, or an id is reused.
        """
        states = np.atleast_2d(np.asarray(states, dtype=float))
        inputs = np.atleast_2d(np.asarray(inputs, dtype=float))
        stage = np.atleast_1d(np.asarray(stage_costs, dtype=float))
        if inputs.shape[0] == states.shape[0] - 1:
            inputs = np.vstack([inputs, np.zeros((1, inputs.shape[1]))])
        if states.shape[0] != inputs.shape[0] or states.shape[0] != stage.shape[0]:
            raise DimensionMismatchError("states, inputs, stage costs lengths differ")
        if states.shape[1] != self.targets[subsystem].shape[0]:
            raise DimensionMismatchError("state dimension differs from target")
        if np.any(stage < -1e-12):
            raise NotConvergedError("negative stage cost")

        gap = float(np.linalg.norm(states[-1] - self.targets[subsystem]))
        if gap > self.convergence_epsilon:
            raise NotConvergedError(
                f"final state misses the target by {gap:.3e} "
                f"(allowed {self.convergence_epsilon:.3e})"
            )
        if stage[-1] > self.tail_epsilon:
            raise NotConvergedError(
                f"final stage cost {stage[-1]:.3e} above tail threshold"
            )

        ctg = np.empty_like(stage)
        acc = 0.0
        for t in range(stage.shape[0] - 1, -1, -1):
            acc = stage[t] + acc
            ctg[t] = acc

        traj = StoredTrajectory(iteration_id, states, inputs, ctg)
        if iteration_id in self._iterations:
            raise RegistryMismatchError(f"iteration {iteration_id} already committed")
        slot = self._pending.setdefault(iteration_id, [None] * self.n_subsystems)
        if slot[subsystem] is not None:
            raise RegistryMismatchError(
                f"subsystem {subsystem} already added iteration {iteration_id}"
            )
        lengths = {len(t) for t in slot if t is not None}
        if lengths and len(traj) not in lengths:
            raise RegistryMismatchError(
                f"iteration {iteration_id}: subsystem {subsystem} trajectory length "
                f"{len(traj)} disagrees with {lengths.pop()}"
            )
        slot[subsystem] = traj
        if all(t is not None for t in slot):
            del self._pending[iteration_id]
            self._commit(iteration_id, slot)
        return self

    def _commit(self, iteration_id, slot):
        self._iterations[iteration_id] = slot
        self._order.append(iteration_id)
        if self.retention.keep_last is not None:
            while len(self._order) > self.retention.keep_last:
                victim = self._order.pop(0)
                del self._iterations[victim]
        self._rebuild()

    def _rebuild(self):
        """Recompute the registry and column caches; drops exact duplicates.

        A candidate column is a duplicate only if every subsystem's state and
        cost-to-go are bitwise equal to those of an already kept column.
        """
        registry = []
        seen = {}
        cols = [[] for _ in range(self.n_subsystems)]
        costs = []
        for it in self._order:
            slot = self._iterations[it]
            horizon = len(slot[0])
            for t in range(horizon):
                key = b"".join(
                    slot[i].states[t].tobytes() + slot[i].cost_to_go[t:t + 1].tobytes()
                    for i in range(self.n_subsystems)
                )
                if key in seen:
                    continue
                seen[key] = (it, t)
                registry.append((it, t))
                for i in range(self.n_subsystems):
                    cols[i].append(slot[i].states[t])
                costs.append([slot[i].cost_to_go[t] for i in range(self.n_subsystems)])
        self._registry = registry
        self._columns = [
            np.array(c, dtype=float).T if c else np.zeros((self.targets[i].shape[0], 0))
            for i, c in enumerate(cols)
        ]
        self._costs = np.array(costs, dtype=float) if costs else np.zeros((0, self.n_subsystems))

    # -- access ------------------------------------------------------------

    def safe_set_matrix(self, subsystem):
        """Columns D_i of stored states and their costs-to-go c_i.

        Column k of every subsystem refers to the same (iteration, time)
        registry entry.
        """
        if self.n_columns == 0:
            raise EmptySafeSetError(f"no stored columns for subsystem {subsystem}")
        return self._columns[subsystem].copy(), self._costs[:, subsystem].copy()

    def global_safe_set(self):
        """Stacked columns across subsystems and the summed costs-to-go."""
        if self.n_columns == 0:
            raise EmptySafeSetError("store is empty")
        d = np.vstack(self._columns)
        c = self._costs.sum(axis=1)
        return d, c

    def iteration_cost(self, iteration_id):
        """Global cost of one stored iteration and per-subsystem breakdown."""
        slot = self._iterations[iteration_id]
        parts = [float(s.cost_to_go[0]) for s in slot]
        total = 0.0
        for p in parts:
            total += p
        return total, parts

    # -- maintenance -------------------------------------------------------

    def prune(self, policy: RetentionPolicy):
        """Apply a retention policy now and for future additions."""
        self.retention = policy
        if policy.keep_last is not None and len(self._order) > policy.keep_last:
            for victim in self._order[:-policy.keep_last]:
                del self._iterations[victim]
            self._order = self._order[-policy.keep_last:]
        self._rebuild()
        return self

    # -- persistence -------------------------------------------------------

    def save(self, path):
        """Write a snapshot of all retained trajectories plus the registry."""
        payload = {
            "version": 1,
            "targets": [t.tolist() for t in self.targets],
            "convergence_epsilon": self.convergence_epsilon,
            "tail_epsilon": self.tail_epsilon,
            "retention": str(self.retention),
            "iterations": [
                {
                    "iteration_id": it,
                    "subsystems": [
                        {
                            "states": s.states.tolist(),
                            "inputs": s.inputs.tolist(),
                            "cost_to_go": s.cost_to_go.tolist(),
                        }
                        for s in self._iterations[it]
                    ],
                }
                for it in self._order
            ],
            "registry": [[it, t] for (it, t) in self._registry],
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=1)
        return path

    @classmethod
    def load(cls, path):
        """Rebuild a store from a snapshot; the registry is cross-checked."""
        with open(path, encoding="utf-8") as fh:
            payload = json.load(fh)
        if payload.get("version") != 1:
            raise RegistryMismatchError("unsupported snapshot version")
        store = cls(
            [np.asarray(t, dtype=float) for t in payload["targets"]],
            convergence_epsilon=payload["convergence_epsilon"],
            tail_epsilon=payload["tail_epsilon"],
            retention=RetentionPolicy.parse(payload["retention"]),
        )
        for entry in payload["iterations"]:
            it = int(entry["iteration_id"])
            slot = []
            for sub in entry["subsystems"]:
                ctg = np.asarray(sub["cost_to_go"], dtype=float)
                slot.append(StoredTrajectory(
                    it,
                    np.asarray(sub["states"], dtype=float),
                    np.asarray(sub["inputs"], dtype=float),
                    ctg,
                ))
            lengths = {len(t) for t in slot}
            if len(lengths) != 1 or len(slot) != store.n_subsystems:
                raise RegistryMismatchError(f"snapshot iteration {it} inconsistent")
            store._commit(it, slot)
        expected = [tuple(e) for e in payload["registry"]]
        if expected != store._registry:
            raise RegistryMismatchError("snapshot registry disagrees with contents")
        return store


def seed_store(targets, input_sizes=None, **kwargs) -> SafeSetStore:
    """Store holding only the equilibrium points with zero cost-to-go.

    This is the minimal valid safe set: a single column per subsystem at the
    target state, the starting point of safe exploration.
    """
    store = SafeSetStore(targets, **kwargs)
    for i, t in enumerate(targets):
        m_i = 0 if input_sizes is None else int(input_sizes[i])
        store.add_trajectory(i, 0, [np.asarray(t, dtype=float)],
                             np.zeros((1, m_i)), [0.0])
    return store
