# Copyright 2023 Viktor Karlquist <vkarlqui@gmail.com>
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#      http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.

"""Euclidean projection onto a polyhedron with dual recovery.

Solves ``min 1/2 |x - anchor|^2  s.t.  A x <= c`` with an operator splitting (ADMM) iteration
in the form used by OSQP, then polishes the iterate by solving the equality constrained
projection on the detected active set. Everything is dense; problems have at most a few
hundred variables.
"""

import logging
from typing import Optional

import numpy as np
import scipy.linalg
import scipy.optimize
from bimonn import constants
from bimonn.constants import QpStatus
from pydantic import BaseModel, root_validator


class QpError(Exception):
    """Exception raised for malformed projection problems."""

    def __init__(self, message: str):
        """Initialize QpError class.

        Parameters
        ----------
        message : str
            Error message
        """
        self.message = message
        super().__init__(self.message)


class QpProblem(BaseModel):
    """Projection of an anchor point onto ``{x | rows @ x <= bounds}``."""

    anchor: np.ndarray
    """Point to project, shape (n,)"""
    rows: np.ndarray
    """Constraint functionals, shape (m, n)"""
    bounds: np.ndarray
    """Right hand sides, shape (m,)"""

    class Config:
        arbitrary_types_allowed = True

    @root_validator(pre=True)
    def arrays_are_consistent(cls, values):
        """Validate shapes and finiteness."""
        anchor = np.asarray(values.get("anchor"), dtype=np.float64).reshape(-1)
        rows = np.asarray(values.get("rows"), dtype=np.float64)
        if rows.size == 0:
            rows = rows.reshape(0, anchor.size)
        bounds = np.asarray(values.get("bounds"), dtype=np.float64).reshape(-1)
        if rows.ndim != 2 or rows.shape[1] != anchor.size or rows.shape[0] != bounds.size:
            raise ValueError(
                f"Rows {rows.shape} do not match anchor {anchor.shape} and bounds {bounds.shape}"
            )
        for name, array in (("anchor", anchor), ("rows", rows), ("bounds", bounds)):
            if not np.all(np.isfinite(array)):
                raise ValueError(f"Non-finite coefficients in {name}")
        values.update(anchor=anchor, rows=rows, bounds=bounds)
        return values

    @property
    def n_vars(self) -> int:
        """Number of variables."""
        return self.anchor.size

    @property
    def n_rows(self) -> int:
        """Number of constraints."""
        return self.bounds.size


class QpSolution(BaseModel):
    """Projected point, multipliers and the residuals they achieve."""

    primal: np.ndarray
    """Projected point"""
    duals: np.ndarray
    """Multiplier per constraint"""
    status: QpStatus
    """Solver outcome"""
    iterations: int = 0
    """ADMM iterations performed"""
    primal_residual: float = 0.0
    """Largest constraint violation"""
    dual_residual: float = 0.0
    """Largest stationarity residual"""
    complementarity: float = 0.0
    """Largest |multiplier * slack|"""

    class Config:
        arbitrary_types_allowed = True

    @property
    def converged(self) -> bool:
        """Whether the tolerances were met."""
        return self.status != QpStatus.MAX_ITER_REACHED

    def distance(self, anchor: np.ndarray) -> float:
        """Euclidean distance from the anchor to the projection."""
        return float(np.linalg.norm(self.primal - anchor))


class KktReport(BaseModel):
    """Optimality conditions of a projection, recomputed from scratch."""

    stationarity: float
    """max |x - anchor + rows^T duals|"""
    primal: float
    """Largest constraint violation"""
    complementarity: float
    """max |duals * (rows x - bounds)|"""
    dual_sign: float
    """Magnitude of the most negative multiplier"""
    tolerance: float
    """Tolerance the residuals are checked against"""

    @property
    def passed(self) -> bool:
        """Whether every residual is within tolerance."""
        return max(self.stationarity, self.primal, self.complementarity, self.dual_sign) <= (
            self.tolerance
        )


def kkt_check(problem: QpProblem, solution: QpSolution, tol: float = constants.QP_TOL) -> KktReport:
    """Recompute the KKT residuals of a candidate solution.

    Parameters
    ----------
    problem : QpProblem
        The projection problem
    solution : QpSolution
        Candidate primal point and multipliers
    tol : float, optional
        Tolerance, by default 1e-8

    Returns
    -------
    KktReport
        Per condition residuals
    """
    x, lam = solution.primal, solution.duals
    slack = problem.rows @ x - problem.bounds
    gradient = x - problem.anchor + problem.rows.T @ lam
    return KktReport(
        stationarity=float(np.max(np.abs(gradient), initial=0.0)),
        primal=float(np.max(slack, initial=0.0)),
        complementarity=float(np.max(np.abs(lam * slack), initial=0.0)),
        dual_sign=float(max(0.0, -np.min(lam, initial=0.0))),
        tolerance=tol,
    )


def _equality_projection(
    problem: QpProblem, active: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Project the anchor onto the affine set where the active rows hold with equality."""
    lam = np.zeros(problem.n_rows)
    if not active.any():
        return problem.anchor.copy(), lam
    rows = problem.rows[active]
    gram = rows @ rows.T
    rhs = rows @ problem.anchor - problem.bounds[active]
    lam[active] = scipy.linalg.lstsq(gram, rhs)[0]
    return problem.anchor - rows.T @ lam[active], lam


def _refine_active_set(
    problem: QpProblem, active: np.ndarray, tol: float
) -> Optional[tuple[np.ndarray, np.ndarray]]:
    """Primal-dual active set iterations starting from a guessed working set.

    Working sets with more rows than variables have many multiplier vectors. When the least
    squares multipliers have a negative entry, a nonnegative vector for the same point is looked
    for before a row is dropped.
    """
    active = active.copy()
    for _ in range(4 * problem.n_rows + 20):
        x, lam = _equality_projection(problem, active)
        if np.any(lam[active] < -tol):
            nonnegative, residual = scipy.optimize.nnls(
                problem.rows[active].T, problem.anchor - x
            )
            if residual <= tol:
                lam[active] = nonnegative
            else:
                drop = np.flatnonzero(active)[np.argmin(lam[active])]
                active[drop] = False
                continue
        violation = problem.rows @ x - problem.bounds
        worst = int(np.argmax(violation))
        if violation[worst] > tol and not active[worst]:
            active[worst] = True
            continue
        if violation[worst] > tol:
            return None
        return x, np.maximum(lam, 0.0)
    return None


def _polish(
    problem: QpProblem, guesses: list[np.ndarray], tol: float
) -> Optional[tuple[np.ndarray, np.ndarray]]:
    """First working set guess whose refinement passes the KKT check."""
    tried: list[np.ndarray] = []
    for active in guesses:
        if any(np.array_equal(active, seen) for seen in tried):
            continue
        tried.append(active)
        result = _refine_active_set(problem, active, tol)
        if result is None:
            continue
        candidate = QpSolution(primal=result[0], duals=result[1], status=QpStatus.SOLVED_POLISHED)
        if kkt_check(problem, candidate, tol).passed:
            return result
    return None


def qp_project(
    problem: QpProblem, tol: float = constants.QP_TOL, max_iter: int = constants.QP_MAX_ITER
) -> QpSolution:
    """Project the anchor onto the polyhedron.

    ADMM iterates until either a polished active set or the iterate itself passes
    :func:`kkt_check`. Only an exhausted iteration budget yields ``max_iter_reached``.

    Parameters
    ----------
    problem : QpProblem
        Anchor and constraints
    tol : float, optional
        Absolute tolerance on every KKT residual, by default 1e-8
    max_iter : int, optional
        ADMM iteration limit, by default 20000

    Returns
    -------
    QpSolution
        Solution, flagged ``max_iter_reached`` with the last iterate when the budget ran out

    Raises
    ------
    QpError
        If the tolerance or the iteration limit is not positive
    """
    if tol <= 0:
        raise QpError(f"Tolerance must be positive, got {tol}")
    if max_iter <= 0:
        raise QpError(f"Iteration limit must be positive, got {max_iter}")

    A, c, anchor = problem.rows, problem.bounds, problem.anchor
    if problem.n_rows == 0 or np.all(A @ anchor <= c):
        return QpSolution(
            primal=anchor.copy(), duals=np.zeros(problem.n_rows), status=QpStatus.SOLVED
        )

    n = problem.n_vars
    sigma, alpha = constants.QP_SIGMA, constants.QP_ALPHA
    rho = constants.QP_RHO
    x = anchor.copy()
    z = np.minimum(A @ x, c)
    y = np.zeros(problem.n_rows)
    factor = scipy.linalg.cho_factor((1.0 + sigma) * np.eye(n) + rho * A.T @ A)

    iteration = 0
    reached_tol = False
    r_prim = r_dual = np.inf
    for iteration in range(1, max_iter + 1):
        rhs = sigma * x + anchor + A.T @ (rho * z - y)
        x_tilde = scipy.linalg.cho_solve(factor, rhs)
        z_tilde = A @ x_tilde
        x = alpha * x_tilde + (1.0 - alpha) * x
        z_relaxed = alpha * z_tilde + (1.0 - alpha) * z
        z = np.minimum(z_relaxed + y / rho, c)
        y = y + rho * (z_relaxed - z)

        r_prim = float(np.max(np.abs(A @ x - z)))
        r_dual = float(np.max(np.abs(x - anchor + A.T @ y)))
        small = max(r_prim, r_dual) <= tol
        first_small = small and not reached_tol
        reached_tol = reached_tol or small
        if iteration % constants.QP_RHO_UPDATE_EVERY != 0 and not first_small:
            continue

        near = max(r_prim, r_dual, tol) * constants.QP_ACTIVE_MARGIN
        polished = _polish(problem, [y > 0.0, A @ x >= c - near], tol)
        if polished is not None:
            return _solution(problem, polished[0], polished[1], QpStatus.SOLVED_POLISHED, iteration)
        iterate = _solution(problem, x, np.maximum(y, 0.0), QpStatus.SOLVED, iteration)
        if small and kkt_check(problem, iterate, tol).passed:
            return iterate

        if r_prim > constants.QP_RHO_RATIO * r_dual:
            new_rho = min(rho * constants.QP_RHO_RATIO, constants.QP_RHO_MAX)
        elif r_dual > constants.QP_RHO_RATIO * r_prim:
            new_rho = max(rho / constants.QP_RHO_RATIO, constants.QP_RHO_MIN)
        else:
            new_rho = rho
        if new_rho != rho:
            rho = new_rho
            # refactor only when rho changed
            factor = scipy.linalg.cho_factor((1.0 + sigma) * np.eye(n) + rho * A.T @ A)

    solution = _solution(problem, x, np.maximum(y, 0.0), QpStatus.SOLVED, iteration)
    if kkt_check(problem, solution, tol).passed:
        return solution
    logging.warning(
        f"Projection did not converge after {iteration} iterations "
        f"(primal {r_prim:.2e}, dual {r_dual:.2e})"
    )
    return solution.copy(update={"status": QpStatus.MAX_ITER_REACHED})


def _solution(
    problem: QpProblem, x: np.ndarray, lam: np.ndarray, status: QpStatus, iterations: int
) -> QpSolution:
    report = kkt_check(problem, QpSolution(primal=x, duals=lam, status=status))
    return QpSolution(
        primal=x,
        duals=lam,
        status=status,
        iterations=iterations,
        primal_residual=report.primal,
        dual_residual=report.stationarity,
        complementarity=report.complementarity,
    )
