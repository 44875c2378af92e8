"""Associative-memory state kept in Gram form, plus the three quadratic losses.

The preserved key/value set is never stored raw.  Everything downstream needs
only K0*K0^T, V0*K0^T and tr(V0*V0^T), which keeps memory O(d0^2) no matter how
many preserved keys were collected.  The same bookkeeping is used for the
running backlog of already-applied edits.

Losses evaluated through Gram identities can dip slightly below zero through
floating cancellation; they are clamped at zero inside a guard band and raise
once the deficit is large enough to indicate corrupted state.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import (
    DimensionMismatchError,
    InputError,
    NonFiniteError,
    NumericalInstabilityError,
)

# Relative budget for harmless cancellation in Gram-form losses.
CANCELLATION_GUARD = 1e-6


def _as_matrix(name: str, value) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionMismatchError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{name} contains non-finite entries")
    return arr


def _symmetrized(gram: np.ndarray) -> np.ndarray:
    return (gram + gram.T) * 0.5


def _gram_quadratic(w: np.ndarray, gram: np.ndarray, cross: np.ndarray,
                    trace_term: float) -> float:
    """Evaluate ||W*K - V||_F^2 from K*K^T, V*K^T and tr(V*V^T).

    Clamps tiny negative round-off to zero; a deficit beyond the guard band
    means the accumulated state is inconsistent and raises instead.
    """
    raw = (
        float(np.einsum("ij,ij->", w @ gram, w))
        - 2.0 * float(np.einsum("ij,ij->", w, cross))
        + trace_term
    )
    if raw < -CANCELLATION_GUARD * (1.0 + trace_term):
        raise NumericalInstabilityError(
            f"Gram-form loss evaluated to {raw!r}, beyond the cancellation "
            "guard; recompute with explicit matrices to diagnose"
        )
    return max(raw, 0.0)


@dataclass(frozen=True)
class Dims:
    """Shape of the edited linear map: d1 rows (outputs) by d0 columns (inputs)."""

    d0: int
    d1: int

    def __post_init__(self):
        if self.d0 < 1 or self.d1 < 1:
            raise InputError(f"dimensions must be >= 1, got d0={self.d0}, d1={self.d1}")


@dataclass(frozen=True)
class EditBatch:
    """One timestamp's edit targets: keys k1 (d0 x n) and values v1 (d1 x n)."""

    k1: np.ndarray
    v1: np.ndarray

    def __post_init__(self):
        k1 = _as_matrix("k1", self.k1)
        v1 = _as_matrix("v1", self.v1)
        if k1.shape[1] != v1.shape[1]:
            raise DimensionMismatchError(
                f"k1 has {k1.shape[1]} columns but v1 has {v1.shape[1]}"
            )
        if k1.shape[1] < 1:
            raise InputError("batch must contain at least one column")
        object.__setattr__(self, "k1", k1)
        object.__setattr__(self, "v1", v1)

    @property
    def n(self) -> int:
        return self.k1.shape[1]


@dataclass(frozen=True)
class AssociativeMemory:
    """Editable weights plus Gram-form statistics of the preserved knowledge.

    ``w`` is the current weight matrix; ``w0`` stays frozen at the original
    weights.  ``k0_gram``, ``v0k0t`` and ``tr_v0v0`` are K0*K0^T, V0*K0^T and
    tr(V0*V0^T); raw K0/V0 are not retained.
    """

    w: np.ndarray
    w0: np.ndarray
    k0_gram: np.ndarray
    v0k0t: np.ndarray
    tr_v0v0: float
    dims: Dims

    def with_weights(self, w: np.ndarray) -> "AssociativeMemory":
        """Return a copy of this memory whose current weights are ``w``."""
        w = _as_matrix("w", w)
        if w.shape != (self.dims.d1, self.dims.d0):
            raise DimensionMismatchError(
                f"w has shape {w.shape}, expected ({self.dims.d1}, {self.dims.d0})"
            )
        return replace(self, w=w)


@dataclass
class BacklogAccumulator:
    """Running Grams of every batch edited so far.

    Mutated in place by :func:`absorb`; an accumulator belongs to exactly one
    run and must not be shared.
    """

    kp_gram: np.ndarray
    vpkpt: np.ndarray
    tr_vpvp: float
    absorbed: int

    @classmethod
    def empty(cls, dims: Dims) -> "BacklogAccumulator":
        return cls(
            kp_gram=np.zeros((dims.d0, dims.d0)),
            vpkpt=np.zeros((dims.d1, dims.d0)),
            tr_vpvp=0.0,
            absorbed=0,
        )


def new_memory(w0, k0) -> AssociativeMemory:
    """Build a memory whose preserved values follow the V0 = W(0)*K0 convention.

    Only Gram products of ``k0`` are retained, so ``k0`` may have far more
    columns than d0.  Under this convention the preservation loss of ``w0``
    itself is exactly zero.
    """
    w0 = _as_matrix("w0", w0)
    k0 = _as_matrix("k0", k0)
    if k0.shape[0] != w0.shape[1]:
        raise DimensionMismatchError(
            f"k0 has {k0.shape[0]} rows but w0 has {w0.shape[1]} columns"
        )
    if k0.shape[1] < 1:
        raise InputError("k0 must contain at least one column")
    dims = Dims(d0=w0.shape[1], d1=w0.shape[0])
    k0_gram = _symmetrized(k0 @ k0.T)
    v0k0t = w0 @ k0_gram
    tr_v0v0 = float(np.einsum("ij,ij->", v0k0t, w0))
    return AssociativeMemory(w=w0, w0=w0, k0_gram=k0_gram, v0k0t=v0k0t,
                             tr_v0v0=tr_v0v0, dims=dims)


def new_memory_explicit_v0(w0, k0, v0) -> AssociativeMemory:
    """Build a memory from explicitly supplied preserved values.

    For ingested key/value files V0 generally differs from W(0)*K0, so the
    preservation loss of ``w0`` may be nonzero.
    """
    w0 = _as_matrix("w0", w0)
    k0 = _as_matrix("k0", k0)
    v0 = _as_matrix("v0", v0)
    if k0.shape[0] != w0.shape[1]:
        raise DimensionMismatchError(
            f"k0 has {k0.shape[0]} rows but w0 has {w0.shape[1]} columns"
        )
    if v0.shape[0] != w0.shape[0]:
        raise DimensionMismatchError(
            f"v0 has {v0.shape[0]} rows but w0 has {w0.shape[0]}"
        )
    if v0.shape[1] != k0.shape[1]:
        raise DimensionMismatchError(
            f"k0 has {k0.shape[1]} columns but v0 has {v0.shape[1]}"
        )
    dims = Dims(d0=w0.shape[1], d1=w0.shape[0])
    k0_gram = _symmetrized(k0 @ k0.T)
    v0k0t = v0 @ k0.T
    tr_v0v0 = float(np.einsum("ij,ij->", v0, v0))
    return AssociativeMemory(w=w0, w0=w0, k0_gram=k0_gram, v0k0t=v0k0t,
                             tr_v0v0=tr_v0v0, dims=dims)


def preservation_loss(mem: AssociativeMemory, w) -> float:
    """Squared Frobenius residual of ``w`` on the preserved key/value set."""
    w = _as_matrix("w", w)
    if w.shape != (mem.dims.d1, mem.dims.d0):
        raise DimensionMismatchError(
            f"w has shape {w.shape}, expected ({mem.dims.d1}, {mem.dims.d0})"
        )
    return _gram_quadratic(w, mem.k0_gram, mem.v0k0t, mem.tr_v0v0)


def editing_loss(w, batch: EditBatch) -> float:
    """Squared Frobenius residual of ``w`` on the batch's target pairs.

    Computed from the explicit matrices; batches are small so no Gram shortcut
    is taken.
    """
    w = _as_matrix("w", w)
    if w.shape[1] != batch.k1.shape[0]:
        raise DimensionMismatchError(
            f"w has {w.shape[1]} columns but k1 has {batch.k1.shape[0]} rows"
        )
    if w.shape[0] != batch.v1.shape[0]:
        raise DimensionMismatchError(
            f"w has {w.shape[0]} rows but v1 has {batch.v1.shape[0]}"
        )
    resid = w @ batch.k1 - batch.v1
    return float(np.einsum("ij,ij->", resid, resid))


def backlog_loss(w, bk: BacklogAccumulator) -> float:
    """Squared Frobenius residual of ``w`` on every previously absorbed batch."""
    if bk.absorbed == 0:
        return 0.0
    w = _as_matrix("w", w)
    if w.shape[1] != bk.kp_gram.shape[0]:
        raise DimensionMismatchError(
            f"w has {w.shape[1]} columns but the backlog Gram is "
            f"{bk.kp_gram.shape[0]} x {bk.kp_gram.shape[1]}"
        )
    return _gram_quadratic(w, bk.kp_gram, bk.vpkpt, bk.tr_vpvp)


def absorb(bk: BacklogAccumulator, batch: EditBatch) -> BacklogAccumulator:
    """Fold one batch into the backlog Grams, re-enforcing symmetry."""
    if batch.k1.shape[0] != bk.kp_gram.shape[0]:
        raise DimensionMismatchError(
            f"k1 has {batch.k1.shape[0]} rows but the backlog Gram is "
            f"{bk.kp_gram.shape[0]} x {bk.kp_gram.shape[1]}"
        )
    if batch.v1.shape[0] != bk.vpkpt.shape[0]:
        raise DimensionMismatchError(
            f"v1 has {batch.v1.shape[0]} rows but the backlog cross term has "
            f"{bk.vpkpt.shape[0]}"
        )
    bk.kp_gram += batch.k1 @ batch.k1.T
    bk.kp_gram = _symmetrized(bk.kp_gram)
    bk.vpkpt += batch.v1 @ batch.k1.T
    bk.tr_vpvp += float(np.einsum("ij,ij->", batch.v1, batch.v1))
    bk.absorbed += 1
    return bk
