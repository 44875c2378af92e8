"""End-to-end sequential editing runs.

One run executes, per timestamp t: read the queue value Z(t) and the current
weights, solve the configured editor's perturbation, apply it, measure the
three losses at the post-edit weights, update the queue with the preservation
loss, and absorb the batch into the backlog.  Before the loop, the threshold
base is probed by applying one bi-objective edit to the first batch against
the original weights and measuring its preservation loss; the probe edit is
then discarded and appears in neither the records nor the backlog.

All losses are measured at the post-edit weights, one convention applied
everywhere.  The queue value entering a step's solve is Z(t), before that
step's update.
"""
from __future__ import annotations

import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .controller import (
    QueueParams,
    QueueState,
    derive_params,
    stability_ratio,
    update_queue,
)
from .editors import solve_baseline, solve_edit_only, solve_lyaplock
from .errors import (
    InputError,
    NonFiniteError,
    NumericalInstabilityError,
    RunAborted,
    SingularSystemError,
)
from .memory import (
    AssociativeMemory,
    BacklogAccumulator,
    absorb,
    backlog_loss,
    editing_loss,
    new_memory,
    preservation_loss,
)
from .stream import EditStream, StreamSpec

EDITOR_NAMES = ("lyaplock", "baseline", "edit-only")

# Floor for the probed base loss: an exactly representable stream probes to a
# preservation loss of 0, which the schedule cannot accept.
_D_BASE_FLOOR = float(np.finfo(np.float64).tiny)

THREADS_ENV_VAR = "LYAPEDIT_THREADS"


@dataclass(frozen=True)
class RunConfig:
    """Everything one run depends on; equal configs produce identical runs."""

    stream: StreamSpec
    editor: str
    alpha: float
    v_weight: float = 1.0
    ridge_max_lambda: float = 1e-6
    record_every: int = 1

    def __post_init__(self):
        if self.editor not in EDITOR_NAMES:
            raise InputError(
                f"editor must be one of {EDITOR_NAMES}, got {self.editor!r}"
            )
        if not (self.alpha > 0.0) or not math.isfinite(self.alpha):
            raise InputError(f"alpha must be positive and finite, got {self.alpha!r}")
        if not (self.v_weight > 0.0) or not math.isfinite(self.v_weight):
            raise InputError(
                f"v_weight must be positive and finite, got {self.v_weight!r}"
            )
        if self.ridge_max_lambda < 0.0:
            raise InputError(
                f"ridge_max_lambda must be >= 0, got {self.ridge_max_lambda!r}"
            )
        if self.record_every < 1:
            raise InputError(f"record_every must be >= 1, got {self.record_every}")


@dataclass(frozen=True)
class StepRecord:
    t: int
    el: float
    pl: float
    bl: float
    z: float          # queue value Z(t) read before this step's solve
    avg_pl: float
    avg_el: float
    delta_fro: float
    ridge: float
    # Wall timing is a diagnostic, not part of the record's identity.
    wall_ms: float = field(compare=False, default=0.0)


@dataclass(frozen=True)
class RunSummary:
    editor: str
    alpha: float
    steps: int
    d_base: float
    d_threshold: float
    final_avg_pl: float
    final_avg_el: float
    constraint_satisfied: bool
    final_z: float
    stability: float  # Z(T)/T
    mean_wall_ms: float = field(compare=False, default=0.0)


@dataclass
class RunResult:
    config: RunConfig
    params: QueueParams
    d_base: float
    records: list[StepRecord]
    summary: RunSummary
    pl_history: np.ndarray
    el_history: np.ndarray
    bl_history: np.ndarray
    z_history: np.ndarray  # Z(1) .. Z(T+1)
    w_initial: np.ndarray
    w_final: np.ndarray
    delta_total: np.ndarray = field(default=None)


def estimate_d_base(stream: EditStream, mem: AssociativeMemory,
                    max_ridge: float = 1e-6) -> float:
    """Preservation loss after one probe bi-objective edit of the first batch.

    The probe is applied to the original weights and then thrown away; only
    the measured loss survives.  Floored at the smallest positive normal so an
    exactly representable stream still yields a usable threshold.
    """
    probe = solve_baseline(mem, stream.batch(1), max_ridge=max_ridge)
    pl = preservation_loss(mem, mem.w + probe.delta)
    return max(pl, _D_BASE_FLOOR)


def _solve_step(config: RunConfig, mem: AssociativeMemory,
                backlog: BacklogAccumulator, batch, params: QueueParams,
                z: float):
    if config.editor == "lyaplock":
        return solve_lyaplock(mem, backlog, batch, v_weight=params.v_weight,
                              az=params.a * z, max_ridge=config.ridge_max_lambda)
    if config.editor == "baseline":
        return solve_baseline(mem, batch, max_ridge=config.ridge_max_lambda)
    return solve_edit_only(mem, batch, max_ridge=config.ridge_max_lambda)


def run(config: RunConfig) -> RunResult:
    """Execute one full sequential-editing run.

    Raises :class:`RunAborted` (carrying the partial records) if a solve comes
    out singular or a loss goes non-finite mid-run.
    """
    stream = EditStream(config.stream)
    w0, k0 = stream.generate_preserved()
    mem = new_memory(w0, k0)
    d_base = estimate_d_base(stream, mem, max_ridge=config.ridge_max_lambda)
    params = derive_params(config.alpha, d_base)
    if config.v_weight != 1.0:
        params = replace(params, v_weight=config.v_weight)

    state = QueueState.initial(params)
    backlog = BacklogAccumulator.empty(mem.dims)
    total = config.stream.total_batches

    records: list[StepRecord] = []
    pl_hist = np.empty(total)
    el_hist = np.empty(total)
    bl_hist = np.empty(total)
    z_hist = np.empty(total + 1)
    z_hist[0] = state.z
    sum_pl = 0.0
    sum_el = 0.0
    sum_wall = 0.0
    delta_total = np.zeros_like(mem.w)

    for t in range(1, total + 1):
        started = time.perf_counter()
        z = state.z
        batch = stream.batch(t)
        try:
            report = _solve_step(config, mem, backlog, batch, params, z)
        except SingularSystemError as exc:
            raise RunAborted(
                f"solver aborted at step {t}: {exc}", step=t, records=records
            ) from exc
        w_new = mem.w + report.delta
        try:
            mem = mem.with_weights(w_new)
            el = editing_loss(w_new, batch)
            pl = preservation_loss(mem, w_new)
            bl = backlog_loss(w_new, backlog)
        except (NonFiniteError, NumericalInstabilityError) as exc:
            raise RunAborted(
                f"loss measurement failed at step {t}: {exc}; z={z!r} "
                f"|delta|={float(np.linalg.norm(report.delta))!r}",
                step=t, records=records,
            ) from exc
        if not (math.isfinite(el) and math.isfinite(pl) and math.isfinite(bl)):
            raise RunAborted(
                f"non-finite loss at step {t}: el={el!r} pl={pl!r} bl={bl!r} "
                f"z={z!r} |delta|={float(np.linalg.norm(report.delta))!r}",
                step=t, records=records,
            )
        state = update_queue(state, params, pl)
        absorb(backlog, batch)

        sum_pl += pl
        sum_el += el
        pl_hist[t - 1] = pl
        el_hist[t - 1] = el
        bl_hist[t - 1] = bl
        z_hist[t] = state.z
        delta_total += report.delta
        wall_ms = (time.perf_counter() - started) * 1e3
        sum_wall += wall_ms
        if t % config.record_every == 0 or t == total:
            records.append(StepRecord(
                t=t, el=el, pl=pl, bl=bl, z=z,
                avg_pl=sum_pl / t, avg_el=sum_el / t,
                delta_fro=float(np.linalg.norm(report.delta)),
                ridge=report.ridge_applied, wall_ms=wall_ms,
            ))

    summary = RunSummary(
        editor=config.editor,
        alpha=config.alpha,
        steps=total,
        d_base=d_base,
        d_threshold=params.d_threshold,
        final_avg_pl=sum_pl / total,
        final_avg_el=sum_el / total,
        constraint_satisfied=(sum_pl / total) <= params.d_threshold,
        final_z=float(z_hist[-1]),
        stability=stability_ratio(z_hist[:total]),
        mean_wall_ms=sum_wall / total,
    )
    return RunResult(
        config=config, params=params, d_base=d_base, records=records,
        summary=summary, pl_history=pl_hist, el_history=el_hist,
        bl_history=bl_hist, z_history=z_hist, w_initial=w0, w_final=mem.w,
        delta_total=delta_total,
    )


def _worker_cap(n_jobs: int) -> int:
    raw = os.environ.get(THREADS_ENV_VAR)
    if raw is None:
        return 1
    try:
        cap = int(raw)
    except ValueError as exc:
        raise InputError(f"{THREADS_ENV_VAR} must be an integer, got {raw!r}") from exc
    if cap < 1:
        raise InputError(f"{THREADS_ENV_VAR} must be >= 1, got {cap}")
    return min(cap, n_jobs)


def _run_many(configs: list[RunConfig]) -> list[RunResult]:
    workers = _worker_cap(len(configs))
    if workers <= 1:
        return [run(c) for c in configs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run, configs))


def compare(configs: list[RunConfig]) -> list[RunSummary]:
    """Run several editors over the identical stream and tabulate summaries."""
    if not configs:
        raise InputError("compare needs at least one run configuration")
    first = configs[0].stream
    for cfg in configs[1:]:
        if cfg.stream != first:
            raise InputError(
                "compare requires every configuration to share one stream "
                f"specification; {cfg.editor!r} differs"
            )
    return [result.summary for result in _run_many(configs)]


def sweep_alpha(config: RunConfig, alphas) -> list[RunSummary]:
    """Rerun one configuration across threshold multipliers, ordered by alpha."""
    values = list(alphas)
    if not values:
        raise InputError("sweep needs at least one alpha")
    for value in values:
        if not (value > 0.0) or not math.isfinite(value):
            raise InputError(f"alphas must be positive and finite, got {value!r}")
    ordered = sorted(values)
    configs = [replace(config, alpha=a) for a in ordered]
    return [result.summary for result in _run_many(configs)]
