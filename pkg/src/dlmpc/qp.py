"""Dense convex QP solver based on operator splitting.

Solves ``min 1/2 z'Pz + q'z  s.t.  A_eq z = b_eq, A_in z <= b_in`` with an
over-relaxed ADMM iteration on the stacked constraint system.  The KKT
matrix depends only on (P, A, rho), so a factorization is prepared once and
reused across solves in which only ``q`` and the right-hand sides change —
the dominant pattern in the outer consensus loop.  Converged solutions are
optionally polished by solving the active-set KKT system directly, which
brings them to near machine precision.

Infeasibility is reported as a status value, never raised.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
import scipy.linalg
import scipy.sparse
import scipy.sparse.linalg

from .errors import DimensionMismatchError

# size of the KKT system above which a sparse factorization is used
_SPARSE_KKT_THRESHOLD = 700


class QpStatus(Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    MAX_ITER = "max_iter"


@dataclass(frozen=True)
class QpSettings:
    rho: float = 0.1
    rho_eq_scale: float = 1e3
    sigma: float = 1e-6
    over_relaxation: float = 1.6
    eps_abs: float = 1e-8
    eps_rel: float = 1e-8
    eps_infeasible: float = 1e-7
    max_iter: int = 20000
    check_interval: int = 25
    polish: bool = True
    regularization: float = 1e-9


@dataclass(frozen=True)
class QuadraticProgram:
    """Data of one dense convex QP; P must be symmetric PSD."""

    P: np.ndarray
    q: np.ndarray
    A_eq: np.ndarray = None
    b_eq: np.ndarray = None
    A_in: np.ndarray = None
    b_in: np.ndarray = None

    def __post_init__(self):
        P = np.asarray(self.P, dtype=float)
        q = np.asarray(self.q, dtype=float)
        d = q.shape[0]
        if P.shape != (d, d):
            raise DimensionMismatchError(f"P must be ({d}, {d}), got {P.shape}")
        scale = max(1.0, float(np.max(np.abs(P))))
        if np.max(np.abs(P - P.T)) > 1e-12 * scale:
            raise DimensionMismatchError("P is not symmetric within 1e-12 relative")
        a_eq = np.zeros((0, d)) if self.A_eq is None else np.asarray(self.A_eq, dtype=float)
        b_eq = np.zeros(0) if self.b_eq is None else np.asarray(self.b_eq, dtype=float)
        a_in = np.zeros((0, d)) if self.A_in is None else np.asarray(self.A_in, dtype=float)
        b_in = np.zeros(0) if self.b_in is None else np.asarray(self.b_in, dtype=float)
        if a_eq.shape != (b_eq.shape[0], d) or a_in.shape != (b_in.shape[0], d):
            raise DimensionMismatchError("constraint blocks inconsistent with dimension")
        object.__setattr__(self, "P", 0.5 * (P + P.T))
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "A_eq", a_eq)
        object.__setattr__(self, "b_eq", b_eq)
        object.__setattr__(self, "A_in", a_in)
        object.__setattr__(self, "b_in", b_in)

    @property
    def dim(self):
        return self.q.shape[0]

    def objective(self, z):
        z = np.asarray(z, dtype=float)
        return float(0.5 * z @ self.P @ z + self.q @ z)


@dataclass
class QpSolution:
    z: np.ndarray
    objective: float
    status: QpStatus
    iterations: int
    primal_residual: float
    dual_residual: float
    duals_eq: np.ndarray
    duals_in: np.ndarray

    @property
    def optimal(self):
        return self.status is QpStatus.OPTIMAL


class _KktFactor:
    """LU factorization of [[P + sigma I, A'], [A, -diag(1/rho)]]."""

    def __init__(self, P, A, rho_vec, sigma):
        d = P.shape[0]
        m = A.shape[0]
        self.d, self.m = d, m
        if d + m > _SPARSE_KKT_THRESHOLD:
            kkt = scipy.sparse.bmat(
                [
                    [scipy.sparse.csc_matrix(P + sigma * np.eye(d)),
                     scipy.sparse.csc_matrix(A.T)],
                    [scipy.sparse.csc_matrix(A),
                     scipy.sparse.diags(-1.0 / rho_vec) if m else None],
                ],
                format="csc",
            )
            lu = scipy.sparse.linalg.splu(kkt)
            self._solve = lu.solve
        else:
            kkt = np.zeros((d + m, d + m))
            kkt[:d, :d] = P + sigma * np.eye(d)
            kkt[:d, d:] = A.T
            kkt[d:, :d] = A
            if m:
                kkt[d:, d:] = np.diag(-1.0 / rho_vec)
            lu, piv = scipy.linalg.lu_factor(kkt, check_finite=False)
            self._solve = lambda rhs: scipy.linalg.lu_solve((lu, piv), rhs, check_finite=False)

    def solve(self, rhs):
        return self._solve(rhs)


def _ruiz_equilibrate(P, A, q_hint=None, iterations=10):
    """Symmetric inf-norm equilibration of the stacked (P, A) data.

    Returns diagonal scalings (s for variables, e for constraint rows) and a
    cost factor gamma such that the scaled problem data
    ``gamma * s P s, e A s`` has roughly unit-size entries.  ``q_hint``
    contributes the linear term's magnitude to the cost normalization,
    which matters when P is (nearly) zero.
    """
    d = P.shape[0]
    m = A.shape[0]
    s = np.ones(d)
    e = np.ones(m)
    p_s = P.copy()
    a_s = A.copy()
    for _ in range(iterations):
        col_p = np.abs(p_s).max(axis=0) if d else np.zeros(0)
        col_a = np.abs(a_s).max(axis=0) if m else np.zeros(d)
        col = np.maximum(col_p, col_a)
        col = np.where(col > 1e-12, col, 1.0)
        delta_s = 1.0 / np.sqrt(col)
        row = np.abs(a_s).max(axis=1) if m else np.zeros(0)
        row = np.where(row > 1e-12, row, 1.0)
        delta_e = 1.0 / np.sqrt(row)
        p_s = p_s * delta_s[:, None] * delta_s[None, :]
        if m:
            a_s = a_s * delta_e[:, None] * delta_s[None, :]
        s *= delta_s
        e *= delta_e
    cost_scale = float(np.abs(p_s).max(axis=0).mean()) if d else 0.0
    if q_hint is not None:
        q_s = s * np.asarray(q_hint, dtype=float)
        cost_scale = max(cost_scale, float(np.max(np.abs(q_s), initial=0.0)))
    gamma = 1.0 / cost_scale if cost_scale > 1e-8 else 1.0
    gamma = float(np.clip(gamma, 1e-6, 1e6))
    return s, e, gamma


class PreparedQp:
    """Factorized solver for a family of QPs sharing (P, A_eq, A_in).

    ``solve`` accepts fresh linear terms and right-hand sides; the internal
    splitting state persists between calls, so successive solves of slowly
    changing problems warm-start automatically.  The data are equilibrated
    once at preparation time; all reported iterates, duals, residuals, and
    objectives are in original units.
    """

    def __init__(self, P, A_eq, A_in, settings: QpSettings = QpSettings(), q_hint=None):
        P = np.asarray(P, dtype=float)
        self.settings = settings
        self.d = P.shape[0]
        self.n_eq = A_eq.shape[0]
        self.n_in = A_in.shape[0]
        self.P = 0.5 * (P + P.T) + settings.regularization * np.eye(self.d)
        self.A = np.vstack([A_eq, A_in]) if (self.n_eq + self.n_in) else np.zeros((0, self.d))
        self.scale_z, self.scale_c, self.gamma = _ruiz_equilibrate(self.P, self.A, q_hint)
        self.P_s = self.gamma * self.P * self.scale_z[:, None] * self.scale_z[None, :]
        self.A_s = self.A * self.scale_c[:, None] * self.scale_z[None, :] \
            if self.A.shape[0] else self.A
        self.rho_vec = np.concatenate([
            np.full(self.n_eq, settings.rho * settings.rho_eq_scale),
            np.full(self.n_in, settings.rho),
        ])
        self.kkt = _KktFactor(self.P_s, self.A_s, self.rho_vec, settings.sigma)
        # internal iterates live in scaled coordinates
        self.x = np.zeros(self.d)
        self.w = np.zeros(self.n_eq + self.n_in)
        self.y = np.zeros(self.n_eq + self.n_in)

    def reset(self):
        self.x[:] = 0.0
        self.w[:] = 0.0
        self.y[:] = 0.0

    def warm_start(self, z=None, duals=None):
        if z is not None:
            self.x = np.asarray(z, dtype=float) / self.scale_z
            self.w = self.A_s @ self.x
        if duals is not None:
            self.y = self.gamma * np.asarray(duals, dtype=float) / self.scale_c

    def solve(self, q, b_eq, b_in, max_iter=None):
        """Run the splitting iteration for the given linear data.

        Returns a QpSolution; status MAX_ITER keeps the best available
        iterate, status INFEASIBLE reports the certificate iterate.
        """
        s = self.settings
        d, m = self.d, self.n_eq + self.n_in
        q = np.asarray(q, dtype=float)
        max_iter = s.max_iter if max_iter is None else max_iter

        if m == 0:
            # unconstrained: regularized Newton solve, refined against P itself
            mat = self.P + s.sigma * np.eye(d)
            z = np.linalg.solve(mat, -q)
            for _ in range(3):
                z += np.linalg.solve(mat, -q - self.P @ z)
            obj = float(0.5 * z @ self.P @ z + q @ z)
            return QpSolution(z, obj, QpStatus.OPTIMAL, 1,
                              0.0, float(np.max(np.abs(self.P @ z + q), initial=0.0)),
                              np.zeros(0), np.zeros(0))

        lo_true = np.concatenate([b_eq, np.full(self.n_in, -np.inf)])
        hi_true = np.concatenate([b_eq, b_in])
        q_s = self.gamma * self.scale_z * q
        lo = self.scale_c * lo_true
        # 0 * inf is nan; rebuild the infinite part explicitly
        lo[self.n_eq:] = -np.inf
        hi = self.scale_c * hi_true

        x, w, y = self.x, self.w, self.y
        rho = self.rho_vec
        alpha = s.over_relaxation
        rhs = np.empty(d + m)
        status = QpStatus.MAX_ITER
        iterations = max_iter
        r_prim = np.inf
        r_dual = np.inf
        y_prev = y.copy()

        for k in range(1, max_iter + 1):
            y_prev[:] = y
            rhs[:d] = s.sigma * x - q_s
            rhs[d:] = w - y / rho
            sol = self.kkt.solve(rhs)
            x_tilde = sol[:d]
            w_tilde = w + (sol[d:] - y) / rho
            x = alpha * x_tilde + (1.0 - alpha) * x
            w_rel = alpha * w_tilde + (1.0 - alpha) * w
            w = np.clip(w_rel + y / rho, lo, hi)
            y = y + rho * (w_rel - w)

            if k % s.check_interval == 0 or k == max_iter:
                ax_true = (self.A_s @ x) / self.scale_c
                w_true = w / self.scale_c
                r_prim = float(np.max(np.abs(ax_true - w_true), initial=0.0))
                dual_s = self.P_s @ x + q_s + self.A_s.T @ y
                dual_true = dual_s / (self.gamma * self.scale_z)
                r_dual = float(np.max(np.abs(dual_true), initial=0.0))
                eps_p = s.eps_abs + s.eps_rel * max(
                    float(np.max(np.abs(ax_true), initial=0.0)),
                    float(np.max(np.abs(w_true), initial=0.0)),
                )
                y_true = self.scale_c * y / self.gamma
                eps_d = s.eps_abs + s.eps_rel * max(
                    float(np.max(np.abs((self.P_s @ x) / (self.gamma * self.scale_z)),
                                 initial=0.0)),
                    float(np.max(np.abs(self.A.T @ y_true), initial=0.0)),
                    float(np.max(np.abs(q), initial=0.0)),
                )
                if r_prim <= eps_p and r_dual <= eps_d:
                    status = QpStatus.OPTIMAL
                    iterations = k
                    break
                if self._primal_infeasible(self.scale_c * (y - y_prev), lo_true, hi_true):
                    status = QpStatus.INFEASIBLE
                    iterations = k
                    break

        self.x, self.w, self.y = x, w, y
        z_true = self.scale_z * x
        y_true = self.scale_c * y / self.gamma
        qp_obj = float(0.5 * z_true @ self.P @ z_true + q @ z_true)
        solution = QpSolution(
            z=z_true,
            objective=qp_obj,
            status=status,
            iterations=iterations,
            primal_residual=r_prim,
            dual_residual=r_dual,
            duals_eq=y_true[:self.n_eq].copy(),
            duals_in=y_true[self.n_eq:].copy(),
        )
        if status is QpStatus.OPTIMAL and s.polish:
            polished = self._polish(q, b_eq, b_in, solution)
            if polished is not None:
                solution = polished
        return solution

    def _primal_infeasible(self, dy, lo, hi):
        e = float(np.max(np.abs(dy), initial=0.0))
        if e <= 0.0:
            return False
        tol = self.settings.eps_infeasible * e
        if float(np.max(np.abs(self.A.T @ dy), initial=0.0)) > tol:
            return False
        pos = np.maximum(dy, 0.0)
        neg = np.minimum(dy, 0.0)
        # rows with infinite lower bound must have nonnegative dy for a
        # valid certificate
        inf_lo = ~np.isfinite(lo)
        if np.any(neg[inf_lo] < -tol):
            return False
        support = float(hi @ pos + lo[~inf_lo] @ neg[~inf_lo])
        return support <= -tol

    def _polish(self, q, b_eq, b_in, solution):
        """Solve the KKT system of the detected active set directly."""
        act = np.nonzero(
            (solution.duals_in > 1e-10)
            | (self.A[self.n_eq:] @ solution.z >= b_in - 1e-7)
        )[0]
        a_act = np.vstack([self.A[:self.n_eq], self.A[self.n_eq:][act]])
        b_act = np.concatenate([b_eq, b_in[act]])
        d = self.d
        na = a_act.shape[0]
        delta = 1e-10
        kkt = np.zeros((d + na, d + na))
        kkt[:d, :d] = self.P + delta * np.eye(d)
        kkt[:d, d:] = a_act.T
        kkt[d:, :d] = a_act
        kkt[d:, d:] = -delta * np.eye(na)
        rhs = np.concatenate([-q, b_act])
        try:
            lu, piv = scipy.linalg.lu_factor(kkt, check_finite=False)
        except (scipy.linalg.LinAlgError, ValueError):
            return None
        sol = scipy.linalg.lu_solve((lu, piv), rhs, check_finite=False)
        # one round of iterative refinement against the unregularized system
        kkt_true = kkt.copy()
        kkt_true[:d, :d] -= delta * np.eye(d)
        kkt_true[d:, d:] += delta * np.eye(na)
        for _ in range(2):
            resid = rhs - kkt_true @ sol
            sol = sol + scipy.linalg.lu_solve((lu, piv), resid, check_finite=False)
        z = sol[:d]
        lam = sol[d:]
        duals_in = np.zeros(self.n_in)
        duals_in[act] = lam[self.n_eq:]
        viol_in = self.A[self.n_eq:] @ z - b_in
        r_prim = max(
            float(np.max(np.abs(self.A[:self.n_eq] @ z - b_eq), initial=0.0)),
            float(np.max(viol_in, initial=0.0)),
        )
        dual_vec = self.P @ z + q + a_act.T @ lam
        r_dual = float(np.max(np.abs(dual_vec), initial=0.0))
        if r_prim > 1e-8 or r_dual > 1e-8 or np.any(duals_in < -1e-8):
            return None
        self.x = z / self.scale_z
        self.w = self.A_s @ self.x
        self.y = self.gamma * np.concatenate([lam[:self.n_eq], duals_in]) / self.scale_c
        return QpSolution(
            z=z,
            objective=float(0.5 * z @ self.P @ z + q @ z),
            status=QpStatus.OPTIMAL,
            iterations=solution.iterations,
            primal_residual=r_prim,
            dual_residual=r_dual,
            duals_eq=lam[:self.n_eq].copy(),
            duals_in=duals_in,
        )


def prepare(qp: QuadraticProgram, settings: QpSettings = QpSettings()) -> PreparedQp:
    """Factor the KKT system of a QP for repeated solves with new (q, b)."""
    psd_check(qp.P)
    return PreparedQp(qp.P, qp.A_eq, qp.A_in, settings, q_hint=qp.q)


def psd_check(P):
    """Reject P with eigenvalues below -1e-8 * ||P||; cheap sizes only."""
    P = np.asarray(P, dtype=float)
    if P.shape[0] <= 600:
        w_min = float(np.min(np.linalg.eigvalsh(0.5 * (P + P.T)))) if P.size else 0.0
        scale = max(1.0, float(np.max(np.abs(P))) if P.size else 0.0)
        if w_min < -1e-8 * scale:
            raise DimensionMismatchError(f"P is not PSD (min eigenvalue {w_min:.2e})")


def solve(qp: QuadraticProgram, warm_start=None, settings: QpSettings = QpSettings()) -> QpSolution:
    """Solve one QP from scratch (or from a warm-start point).

    Parameters
    ----------
    qp : QuadraticProgram
    warm_start : ndarray, optional
        Initial primal iterate.
    settings : QpSettings

    Returns
    -------
    QpSolution
        ``status`` is OPTIMAL, INFEASIBLE, or MAX_ITER; the objective is
        reported for the returned iterate either way.
    """
    prep = prepare(qp, settings)
    if warm_start is not None:
        prep.warm_start(z=warm_start)
    sol = prep.solve(qp.q, qp.b_eq, qp.b_in)
    # report the true (unregularized) objective
    sol.objective = qp.objective(sol.z)
    return sol
