"""Exception types shared across the package."""


class DlmpcError(Exception):
    """Base class for all package-specific errors."""


class DimensionMismatchError(DlmpcError):
    """Array shapes are inconsistent with the declared system dimensions."""


class InvalidSystemError(DlmpcError):
    """System/partition validation reported violations.

    Carries the full validation report in ``report``.
    """

    def __init__(self, report):
        self.report = report
        lines = "; ".join(str(v) for v in report.violations)
        super().__init__(f"system validation failed: {lines}")


class ConstraintRowUnassignableError(DlmpcError):
    """A state-constraint row touches variables outside every neighborhood."""

    def __init__(self, row, touched_blocks):
        self.row = row
        self.touched_blocks = tuple(touched_blocks)
        super().__init__(
            f"constraint row {row} touches blocks {self.touched_blocks} which fit "
            "in no single neighborhood"
        )


class NotConvergedError(DlmpcError):
    """A trajectory offered for storage does not end at the target state."""


class RegistryMismatchError(DlmpcError):
    """Subsystems disagree on the safe-set column registry."""


class EmptySafeSetError(DlmpcError):
    """A safe set was required but holds no columns."""


class DisconnectedGraphError(DlmpcError):
    """The neighbor graph is not connected."""


class LocalInfeasibleError(DlmpcError):
    """A local QP reported infeasibility during a consensus solve."""

    def __init__(self, subsystem, detail=""):
        self.subsystem = subsystem
        msg = f"local problem of subsystem {subsystem} infeasible"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


class RecursiveFeasibilityError(DlmpcError):
    """A closed-loop time step lost feasibility; violates the core guarantee."""

    def __init__(self, subsystem, time_step):
        self.subsystem = subsystem
        self.time_step = time_step
        super().__init__(
            f"subsystem {subsystem} infeasible at time step {time_step}"
        )


class IterationDidNotConvergeError(DlmpcError):
    """The closed loop exhausted its step budget before reaching the target."""


class BootstrapFailedError(DlmpcError):
    """The terminal-free bootstrap controller failed to produce a seed."""


class RoundBudgetExhaustedError(DlmpcError):
    """Exploration hit its round budget before reaching all desired states.

    ``store`` and ``round_log`` hold the partial results.
    """

    def __init__(self, store, round_log):
        self.store = store
        self.round_log = round_log
        super().__init__("exploration round budget exhausted before all targets reached")


class ConfigError(DlmpcError):
    """Experiment configuration file is missing, malformed, or inconsistent."""
