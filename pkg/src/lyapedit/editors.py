"""Closed-form per-step perturbation solvers.

Each solver reduces to a symmetric positive-definite right-solve: the
perturbation satisfies ``delta @ C = R`` where R is built from the current
residuals, so an exact fixed point (all residuals zero) yields an exactly zero
perturbation.  C is factored with Cholesky; on factorization failure or a
condition estimate above 1e12 the diagonal is ridged with escalating
lambda in {1e-10, 1e-8, 1e-6} * tr(C)/dim, and the applied lambda is recorded
in the report.  No explicit inverse is ever formed.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve, get_lapack_funcs

from .errors import DimensionMismatchError, InputError, SingularSystemError
from .memory import AssociativeMemory, BacklogAccumulator, EditBatch

RIDGE_LADDER = (1e-10, 1e-8, 1e-6)
CONDITION_LIMIT = 1e12
RESIDUAL_TARGET = 1e-8
# Residual targets this far below the system scale are round-off, not signal;
# the solver returns an exactly zero perturbation instead of amplifying them.
SNAP_THRESHOLD = 1e-10
_TINY = float(np.finfo(np.float64).tiny)


@dataclass(frozen=True)
class SolveReport:
    """Perturbation plus solve diagnostics.

    ``residual`` is the relative normal-equation (or fit) residual of the
    returned perturbation; it is at most 1e-8 whenever ``ridge_applied`` is 0.
    ``condition_estimate`` is NaN when the system was already satisfied and no
    factorization was needed.
    """

    delta: np.ndarray
    residual: float
    ridge_applied: float
    condition_estimate: float


def _ridge_attempts(matrix: np.ndarray, max_ridge: float):
    """Yield (lam, cho_factorization, condition_estimate) over the ladder.

    Attempts that fail to factor or whose condition estimate exceeds the
    limit yield a ``None`` factorization so the caller can keep escalating
    (and report the final condition estimate on exhaustion).
    """
    dim = matrix.shape[0]
    scale = float(np.trace(matrix)) / dim
    (pocon,) = get_lapack_funcs(("pocon",), (matrix,))
    eye = np.eye(dim)
    for factor_scale in (0.0,) + tuple(f for f in RIDGE_LADDER if f <= max_ridge):
        lam = factor_scale * scale
        ridged = matrix if lam == 0.0 else matrix + lam * eye
        try:
            factorization = cho_factor(ridged, lower=True, check_finite=False)
        except np.linalg.LinAlgError:
            yield lam, None, float("inf")
            continue
        anorm = float(np.linalg.norm(ridged, 1))
        rcond, info = pocon(factorization[0], anorm, uplo="L")
        if info != 0 or not (rcond > 0.0):
            cond = float("inf")
        else:
            cond = 1.0 / float(rcond)
        yield lam, (factorization if cond <= CONDITION_LIMIT else None), cond


def _normal_solve(w: np.ndarray, c: np.ndarray, target: np.ndarray,
                  rhs_full: np.ndarray, max_ridge: float) -> SolveReport:
    """Solve ``delta @ C = target`` and report the full-form residual.

    ``target`` is RHS - W @ C assembled from residual products by the caller;
    ``rhs_full`` is only used to measure the reported relative residual
    ||(W + delta) @ C - RHS|| / ||RHS||.
    """
    with np.errstate(over="ignore"):
        c = (c + c.T) * 0.5
    if not (np.isfinite(c).all() and np.isfinite(target).all()
            and np.isfinite(rhs_full).all()):
        raise SingularSystemError(
            "normal-equation assembly overflowed; the weighted system is not "
            "representable in double precision"
        )
    ref = max(float(np.linalg.norm(rhs_full)), _TINY)
    if float(np.linalg.norm(target)) <= SNAP_THRESHOLD * ref:
        delta = np.zeros_like(w)
        residual = float(np.linalg.norm(w @ c - rhs_full)) / ref
        return SolveReport(delta=delta, residual=residual, ridge_applied=0.0,
                           condition_estimate=float("nan"))
    last_cond = float("inf")
    for lam, factorization, cond in _ridge_attempts(c, max_ridge):
        last_cond = cond
        if factorization is None:
            continue
        delta = cho_solve(factorization, target.T, check_finite=False).T
        residual = float(np.linalg.norm((w + delta) @ c - rhs_full)) / ref
        if lam == 0.0 and residual > RESIDUAL_TARGET:
            continue
        return SolveReport(delta=delta, residual=residual, ridge_applied=lam,
                           condition_estimate=cond)
    raise SingularSystemError(
        f"normal-equation matrix is numerically singular "
        f"(condition estimate {last_cond:.3e}) after maximum ridge escalation",
        condition_estimate=last_cond,
    )


def _check_batch(mem: AssociativeMemory, batch: EditBatch) -> None:
    if batch.k1.shape[0] != mem.dims.d0:
        raise DimensionMismatchError(
            f"batch keys have {batch.k1.shape[0]} rows but the memory input "
            f"dimension is {mem.dims.d0}"
        )
    if batch.v1.shape[0] != mem.dims.d1:
        raise DimensionMismatchError(
            f"batch values have {batch.v1.shape[0]} rows but the memory output "
            f"dimension is {mem.dims.d1}"
        )


def solve_lyaplock(mem: AssociativeMemory, bk: BacklogAccumulator,
                   batch: EditBatch, v_weight: float, az: float,
                   *, max_ridge: float = 1e-6) -> SolveReport:
    """Queue-weighted update: minimize v_weight*(EL + BL) + az*PL.

    Parameters
    ----------
    - mem: current memory; ``mem.w`` is the pre-edit weight matrix
    - bk: backlog Grams of previously applied edits (may be empty)
    - batch: this step's keys and target values
    - v_weight: weight on editing plus backlog loss, must be positive
    - az: preservation weight, the queue value scaled by the queue gain a

    The perturbation is the unique minimizer whenever
    C = v_weight*(K1 K1^T + Kp Kp^T) + az*K0 K0^T is positive definite.
    """
    if not (v_weight > 0.0) or not np.isfinite(v_weight):
        raise InputError(f"v_weight must be positive and finite, got {v_weight!r}")
    if az < 0.0 or not np.isfinite(az):
        raise InputError(f"az must be nonnegative and finite, got {az!r}")
    _check_batch(mem, batch)
    if bk.kp_gram.shape[0] != mem.dims.d0:
        raise DimensionMismatchError(
            f"backlog Gram is {bk.kp_gram.shape[0]} x {bk.kp_gram.shape[1]} but "
            f"the memory input dimension is {mem.dims.d0}"
        )
    w, k1, v1 = mem.w, batch.k1, batch.v1
    with np.errstate(over="ignore"):
        c = v_weight * (k1 @ k1.T + bk.kp_gram) + az * mem.k0_gram
        # Residual assembly: exact zeros survive, unlike rhs_full - w @ c.
        target = (
            v_weight * ((v1 - w @ k1) @ k1.T)
            + v_weight * (bk.vpkpt - w @ bk.kp_gram)
            + az * (mem.v0k0t - w @ mem.k0_gram)
        )
        rhs_full = v_weight * (v1 @ k1.T + bk.vpkpt) + az * mem.v0k0t
    return _normal_solve(w, c, target, rhs_full, max_ridge)


def solve_baseline(mem: AssociativeMemory, batch: EditBatch,
                   *, max_ridge: float = 1e-6) -> SolveReport:
    """Bi-objective update: delta = (V1 - W K1) K1^T (K0 K0^T + K1 K1^T)^-1.

    This is the conventional one-shot trade-off between editing and
    preservation; it carries no backlog and no queue weighting, so its
    preservation loss accumulates over sequential use.
    """
    _check_batch(mem, batch)
    w, k1, v1 = mem.w, batch.k1, batch.v1
    c = mem.k0_gram + k1 @ k1.T
    target = (v1 - w @ k1) @ k1.T
    rhs_full = w @ c + target
    return _normal_solve(w, c, target, rhs_full, max_ridge)


def solve_edit_only(mem: AssociativeMemory, batch: EditBatch,
                    *, max_ridge: float = 1e-6) -> SolveReport:
    """Ablation: minimum-Frobenius-norm perturbation fitting the batch exactly.

    Ignores preservation entirely.  With full-column-rank keys the post-edit
    editing loss is zero up to round-off; rank-deficient keys are ridged, and
    keys that stay numerically singular beyond the ladder raise.
    """
    _check_batch(mem, batch)
    w, k1, v1 = mem.w, batch.k1, batch.v1
    resid = v1 - w @ k1
    small_gram = k1.T @ k1
    ref = max(float(np.linalg.norm(v1)), _TINY)
    last_cond = float("inf")
    for lam, factorization, cond in _ridge_attempts(small_gram, max_ridge):
        last_cond = cond
        if factorization is None:
            continue
        # delta = resid @ (K1^T K1)^-1 K1^T is the least-norm interpolant.
        delta = resid @ cho_solve(factorization, k1.T, check_finite=False)
        residual = float(np.linalg.norm((w + delta) @ k1 - v1)) / ref
        if lam == 0.0 and residual > RESIDUAL_TARGET:
            continue
        return SolveReport(delta=delta, residual=residual, ridge_applied=lam,
                           condition_estimate=cond)
    raise SingularSystemError(
        f"batch keys are rank deficient beyond ridge tolerance "
        f"(condition estimate {last_cond:.3e})",
        condition_estimate=last_cond,
    )
