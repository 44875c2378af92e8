"""Virtual-queue dynamics, the hyperparameter schedule, and drift diagnostics.

The queue accumulates scaled constraint violation a*(PL - D) + b and is floored
at z_max, so it can never drop below that value.  Its growth rate Z(T)/T is the
stability signal: when it vanishes, the long-run average preservation loss is
provably within the threshold D.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InputError


@dataclass(frozen=True)
class QueueParams:
    """Queue coefficients plus the schedule inputs they were derived from."""

    d_threshold: float
    a: float
    b: float
    z_init: float
    z_max: float
    v_weight: float
    alpha: float
    d_base: float


@dataclass(frozen=True)
class QueueState:
    """Queue value Z(t) at timestamp t, plus running drift diagnostics."""

    z: float
    t: int
    pl_max_seen: float
    drift_last: float

    @classmethod
    def initial(cls, params: QueueParams) -> "QueueState":
        return cls(z=params.z_init, t=1, pl_max_seen=0.0, drift_last=0.0)


def derive_params(alpha: float, d_base: float) -> QueueParams:
    """Derive queue coefficients from the threshold multiplier and base loss.

    D = alpha * d_base, a = 1/sqrt(D), b = 0, z_init = z_max = sqrt(D) and the
    editing weight is 1.  With these choices the initial preservation weight
    a * z_init is exactly 1, and when a step's preservation loss reaches 2*D
    the weight doubles.
    """
    if not (alpha > 0.0) or not math.isfinite(alpha):
        raise InputError(f"alpha must be positive and finite, got {alpha!r}")
    if not (d_base > 0.0) or not math.isfinite(d_base):
        raise InputError(f"d_base must be positive and finite, got {d_base!r}")
    d = alpha * d_base
    root = math.sqrt(d)
    return QueueParams(
        d_threshold=d,
        a=1.0 / root,
        b=0.0,
        z_init=root,
        z_max=root,
        v_weight=1.0,
        alpha=alpha,
        d_base=d_base,
    )


def update_queue(state: QueueState, params: QueueParams, pl: float) -> QueueState:
    """Advance the queue one timestamp with the realized preservation loss."""
    if not math.isfinite(pl):
        raise InputError(f"preservation loss must be finite, got {pl!r}")
    if pl < 0.0:
        raise InputError(f"preservation loss must be nonnegative, got {pl!r}")
    z_new = max(state.z + params.a * (pl - params.d_threshold) + params.b,
                params.z_max)
    drift = 0.5 * z_new * z_new - 0.5 * state.z * state.z
    return QueueState(
        z=z_new,
        t=state.t + 1,
        pl_max_seen=max(state.pl_max_seen, pl),
        drift_last=drift,
    )


def drift_upper_bound(state: QueueState, params: QueueParams, pl: float) -> float:
    """Bound on the one-step drift of 0.5*Z^2 that the update with ``pl`` incurs.

    Uses the largest preservation loss observed so far (including ``pl``) as
    the peak-loss constant; the realized drift sample never exceeds the value
    returned here.
    """
    d_max = max(state.pl_max_seen, pl)
    peak = 0.5 * (
        (params.a * d_max + params.b) ** 2
        + (params.a * params.d_threshold) ** 2
        + params.z_max ** 2
    )
    return peak + state.z * (params.a * pl + params.b
                             - params.a * params.d_threshold)


def stability_ratio(z_history) -> float:
    """Z(T)/T for a queue trajectory over timestamps 1..T.

    A vanishing ratio certifies the long-term constraint; a ratio bounded away
    from zero flags an infeasible run.
    """
    arr = np.asarray(z_history, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise InputError("queue history must be a non-empty 1-D sequence")
    return float(arr[-1]) / arr.size
