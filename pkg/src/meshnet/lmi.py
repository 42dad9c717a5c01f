"""LMI solve wrapper and a compositional positive-definiteness factorization.

Two independent pieces live here:

- :class:`LmiProblem`, a thin layer over cvxpy that pins solver options known
  to reach LMI-grade accuracy, re-verifies the returned point numerically, and
  falls back across installed conic backends on solver failures.

- A block LDL^T chain (:func:`sylvester_step`) that decides positive
  definiteness of a symmetric block matrix one block row at a time.  Adding a
  row only touches the new Schur complement, so membership changes in a
  growing matrix never re-factorize existing blocks.  All inverse applications
  go through cached Cholesky factors and triangular solves.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.linalg import cho_solve

import cvxpy as cp

__all__ = [
    "ToleranceConfig",
    "Infeasible",
    "NumericalFailure",
    "PriorNotPD",
    "default_backend",
    "solver_options",
    "SolveReport",
    "LmiProblem",
    "spectral_bound_constraint",
    "BlockSymMatrix",
    "SylvesterFactors",
    "sylvester_step",
    "sylvester_factorize",
    "is_pd_compositional",
]

ENV_SOLVER = "MESHNET_SOLVER"
_FALLBACK_ORDER = ("CLARABEL", "SCS", "CVXOPT")


@dataclass(frozen=True)
class ToleranceConfig:
    """Numeric thresholds shared across synthesis and verification.

    pd_tol   eigenvalue floor above which a matrix counts as positive definite
    feas_tol max acceptable constraint violation at a returned solver point
    opt_tol  relative objective slack when comparing solve outcomes
    margin   default strictness margin added to PSD constraints
    """

    pd_tol: float = 1e-10
    feas_tol: float = 1e-7
    opt_tol: float = 1e-6
    margin: float = 1e-6


class Infeasible(RuntimeError):
    """The solver certified the constraint set empty."""


class NumericalFailure(RuntimeError):
    """No backend produced a point passing numeric re-verification."""


class PriorNotPD(RuntimeError):
    """A factorization chain was extended past a non-PD pivot."""


def default_backend() -> str:
    """Backend from the environment, else CLARABEL.

    Set ``MESHNET_SOLVER`` to CLARABEL, SCS, or CVXOPT to override.
    """
    env = os.environ.get(ENV_SOLVER, "").strip().upper()
    if not env:
        return "CLARABEL"
    if env not in cp.installed_solvers():
        raise ValueError(
            f"{ENV_SOLVER}={env!r} is not an installed cvxpy solver "
            f"(installed: {', '.join(cp.installed_solvers())})"
        )
    return env


def solver_options(backend: str) -> dict:
    """Per-backend options tight enough for certificate-grade LMI solutions."""
    if backend == "SCS":
        # SCS defaults (1e-4) leave PSD residuals near 1e-5; tighten hard.
        return {"eps_abs": 1e-9, "eps_rel": 1e-9, "max_iters": 200_000}
    return {}


@dataclass
class SolveReport:
    """Verified outcome of one LMI solve."""

    status: str
    objective: float
    backend: str
    max_violation: float
    values: dict


class LmiProblem:
    """Collect variables and constraints, then solve with re-verification."""

    def __init__(
        self,
        *,
        backend: str | None = None,
        tolerances: ToleranceConfig | None = None,
    ) -> None:
        self.backend = backend or default_backend()
        self.tolerances = tolerances or ToleranceConfig()
        self._vars: dict[str, cp.Variable] = {}
        self._constraints: list[cp.Constraint] = []
        self._objective: cp.Minimize | None = None

    # ---- variable factories -------------------------------------------------

    def _register(self, var: cp.Variable) -> cp.Variable:
        if var.name() in self._vars:
            raise ValueError(f"duplicate variable name {var.name()!r}")
        self._vars[var.name()] = var
        return var

    def scalar(self, name: str, *, nonneg: bool = False) -> cp.Variable:
        return self._register(cp.Variable(name=name, nonneg=nonneg))

    def matrix(self, name: str, rows: int, cols: int) -> cp.Variable:
        return self._register(cp.Variable((rows, cols), name=name))

    def symmetric(self, name: str, n: int) -> cp.Variable:
        return self._register(cp.Variable((n, n), name=name, symmetric=True))

    # ---- constraints and objective -------------------------------------------

    def add(self, *constraints: cp.Constraint) -> None:
        self._constraints.extend(constraints)

    def add_psd(self, expr: cp.Expression, *, margin: float = 0.0) -> None:
        """Constrain the symmetric part of ``expr`` to be >= margin * I."""
        n = expr.shape[0]
        if expr.shape != (n, n):
            raise ValueError("PSD constraint needs a square expression")
        sym = 0.5 * (expr + expr.T)
        self._constraints.append(sym >> margin * np.eye(n))

    def minimize(self, expr: cp.Expression) -> None:
        self._objective = cp.Minimize(expr)

    # ---- solving -------------------------------------------------------------

    def _verified_violation(self) -> float:
        worst = 0.0
        for con in self._constraints:
            try:
                v = con.violation()
            except (np.linalg.LinAlgError, ValueError, ArithmeticError):
                # Non-finite or degenerate point; score it unusable so the
                # fallback chain moves on instead of crashing.
                return math.inf
            v = float(np.max(v)) if np.ndim(v) else float(v)
            if not math.isfinite(v):
                return math.inf
            worst = max(worst, v)
        return worst

    def solve(self) -> SolveReport:
        """Try the configured backend, then the remaining installed ones.

        Returns the first point whose re-checked violation is within
        ``feas_tol``.  A solver-certified infeasibility raises
        :class:`Infeasible` immediately; anything else exhausting all
        backends raises :class:`NumericalFailure`.
        """
        objective = self._objective or cp.Minimize(0)
        problem = cp.Problem(objective, self._constraints)
        installed = cp.installed_solvers()
        order = [self.backend] + [
            b for b in _FALLBACK_ORDER if b != self.backend and b in installed
        ]
        failures: list[str] = []
        for backend in order:
            try:
                problem.solve(solver=backend, **solver_options(backend))
            except (cp.error.SolverError, ValueError) as exc:
                failures.append(f"{backend}: {exc}")
                continue
            if problem.status in (cp.INFEASIBLE, cp.INFEASIBLE_INACCURATE):
                raise Infeasible(f"{backend} reports {problem.status}")
            if problem.status in (cp.UNBOUNDED, cp.UNBOUNDED_INACCURATE):
                raise NumericalFailure(f"{backend} reports {problem.status}")
            if problem.status not in (cp.OPTIMAL, cp.OPTIMAL_INACCURATE):
                failures.append(f"{backend}: status {problem.status}")
                continue
            violation = self._verified_violation()
            if violation > self.tolerances.feas_tol:
                failures.append(f"{backend}: residual {violation:.3e}")
                continue
            return SolveReport(
                status=problem.status,
                objective=float(problem.value),
                backend=backend,
                max_violation=violation,
                values={name: var.value for name, var in self._vars.items()},
            )
        raise NumericalFailure(
            "no backend reached a verified solution: " + "; ".join(failures)
        )


def spectral_bound_constraint(expr: cp.Expression, bound: cp.Expression) -> cp.Constraint:
    """||expr||_2 <= bound as one PSD block constraint (expr may be rectangular)."""
    rows, cols = expr.shape
    block = cp.bmat(
        [
            [bound * np.eye(rows), expr],
            [expr.T, bound * np.eye(cols)],
        ]
    )
    return block >> 0


class BlockSymMatrix:
    """Symmetric matrix assembled from blocks on a fixed partition.

    Setting block (i, j) also sets (j, i) to its transpose; unset blocks are
    zero.  Diagonal blocks must be symmetric to 1e-12.
    """

    def __init__(self, sizes: Sequence[int]) -> None:
        self.sizes = [int(s) for s in sizes]
        if any(s <= 0 for s in self.sizes):
            raise ValueError("block sizes must be positive")
        self.offsets = np.concatenate([[0], np.cumsum(self.sizes)])
        self._blocks: dict[tuple[int, int], np.ndarray] = {}

    @property
    def n_blocks(self) -> int:
        return len(self.sizes)

    def set(self, i: int, j: int, value: np.ndarray) -> None:
        value = np.asarray(value, dtype=float)
        if value.shape != (self.sizes[i], self.sizes[j]):
            raise ValueError(
                f"block ({i}, {j}) must be {self.sizes[i]}x{self.sizes[j]}, "
                f"got {value.shape}"
            )
        if i == j and np.max(np.abs(value - value.T)) > 1e-12:
            raise ValueError(f"diagonal block {i} is not symmetric")
        self._blocks[(i, j)] = value
        if i != j:
            self._blocks[(j, i)] = value.T

    def block(self, i: int, j: int) -> np.ndarray:
        got = self._blocks.get((i, j))
        if got is None:
            return np.zeros((self.sizes[i], self.sizes[j]))
        return got

    def row(self, i: int) -> list[np.ndarray]:
        """Blocks (i, 0) .. (i, i) used to extend a factorization chain."""
        return [self.block(i, j) for j in range(i + 1)]

    def dense(self) -> np.ndarray:
        n = int(self.offsets[-1])
        out = np.zeros((n, n))
        for (i, j), val in self._blocks.items():
            out[self.offsets[i] : self.offsets[i + 1], self.offsets[j] : self.offsets[j + 1]] = val
        return out


@dataclass(frozen=True)
class SylvesterFactors:
    """State of the block LDL^T chain after processing k block rows.

    diag[k] holds the k-th Schur pivot, chol[k] its lower Cholesky factor
    (None when the pivot failed the PD floor), and off[k][l] the transformed
    off-diagonal block against earlier row l.  ``is_pd`` is True while every
    pivot so far clears ``pd_tol``.
    """

    sizes: tuple[int, ...] = ()
    diag: tuple[np.ndarray, ...] = ()
    chol: tuple[np.ndarray | None, ...] = ()
    off: tuple[tuple[np.ndarray, ...], ...] = ()
    pd_tol: float = 1e-10
    is_pd: bool = True

    @property
    def n_blocks(self) -> int:
        return len(self.sizes)

    def dense_prior(self) -> np.ndarray:
        """Reconstruct the original matrix processed so far (L D L^T)."""
        offsets = np.concatenate([[0], np.cumsum(self.sizes)]).astype(int)
        n = int(offsets[-1])
        lower = np.eye(n)
        dmat = np.zeros((n, n))
        for k in range(self.n_blocks):
            sl_k = slice(offsets[k], offsets[k + 1])
            dmat[sl_k, sl_k] = self.diag[k]
            for l in range(k):
                if self.chol[l] is None:
                    raise PriorNotPD("cannot reconstruct past a non-PD pivot")
                sl_l = slice(offsets[l], offsets[l + 1])
                lower[sl_k, sl_l] = cho_solve((self.chol[l], True), self.off[k][l].T).T
        return lower @ dmat @ lower.T


def sylvester_step(
    factors: SylvesterFactors | None,
    row_blocks: Sequence[np.ndarray],
    *,
    pd_tol: float | None = None,
) -> SylvesterFactors:
    """Extend the chain by one block row [W_k0, ..., W_k,k-1, W_kk].

    Only Schur updates against stored factors are computed; earlier pivots are
    reused untouched.  Raises :class:`PriorNotPD` if an earlier pivot already
    failed (its inverse is required here).
    """
    if factors is None:
        factors = SylvesterFactors(pd_tol=1e-10 if pd_tol is None else pd_tol)
    elif pd_tol is not None and pd_tol != factors.pd_tol:
        raise ValueError("pd_tol cannot change midway through a chain")
    k = factors.n_blocks
    if len(row_blocks) != k + 1:
        raise ValueError(f"expected {k + 1} blocks for row {k}, got {len(row_blocks)}")
    row = [np.asarray(b, dtype=float) for b in row_blocks]
    size = row[-1].shape[0]
    if row[-1].shape != (size, size):
        raise ValueError("diagonal block must be square")
    if np.max(np.abs(row[-1] - row[-1].T), initial=0.0) > 1e-12:
        raise ValueError("diagonal block must be symmetric")

    transformed: list[np.ndarray] = []
    pivot = row[-1].copy()
    for l in range(k):
        x = row[l]
        if x.shape != (size, factors.sizes[l]):
            raise ValueError(f"block {l} of row {k} has shape {x.shape}")
        for m in range(l):
            if factors.chol[m] is None:
                raise PriorNotPD(f"pivot {m} is not PD; chain cannot be extended")
            x = x - transformed[m] @ cho_solve((factors.chol[m], True), factors.off[l][m].T)
        transformed.append(x)
        if factors.chol[l] is None:
            raise PriorNotPD(f"pivot {l} is not PD; chain cannot be extended")
        pivot = pivot - x @ cho_solve((factors.chol[l], True), x.T)
    pivot = 0.5 * (pivot + pivot.T)

    tol = factors.pd_tol
    try:
        np.linalg.cholesky(pivot - tol * np.eye(size))
        chol = np.linalg.cholesky(pivot)
        ok = True
    except np.linalg.LinAlgError:
        chol = None
        ok = False
    return SylvesterFactors(
        sizes=factors.sizes + (size,),
        diag=factors.diag + (pivot,),
        chol=factors.chol + (chol,),
        off=factors.off + (tuple(transformed),),
        pd_tol=tol,
        is_pd=factors.is_pd and ok,
    )


def sylvester_factorize(
    matrix: BlockSymMatrix, *, pd_tol: float = 1e-10
) -> SylvesterFactors:
    """Run the chain over all block rows of ``matrix``.

    Stops extending after the first failed pivot (the verdict is already
    negative and further Schur complements would need its inverse).
    """
    factors = SylvesterFactors(pd_tol=pd_tol)
    for i in range(matrix.n_blocks):
        factors = sylvester_step(factors, matrix.row(i))
        if not factors.is_pd:
            break
    return factors


def is_pd_compositional(matrix: BlockSymMatrix, *, pd_tol: float = 1e-10) -> bool:
    """Positive definiteness (eigenvalues above ``pd_tol``) via the chain."""
    return sylvester_factorize(matrix, pd_tol=pd_tol).is_pd
