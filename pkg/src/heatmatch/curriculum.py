"""Diffusion-time scheduling: which supervisor kernel each iteration sees.

A schedule is an ordered list of (start_iteration, diffusion_time) stages.
Decayed-heat training starts with a large time (global, easy) and drops to
smaller times (local, hard); stage kernels are rebuilt from the cached
eigenbasis with a single dense multiply, never by re-decomposing.
Validation always uses the stage-0 (initial) time so its numbers stay
comparable across the whole run.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .corrnet import NetworkParams, ShapeBundle, SupervisorKernel, pair_loss
from .errors import ConfigError, EvaluationError
from .spectral import heat_kernel

__all__ = ["Schedule", "SupervisorKernel", "stage_index", "kernel_at", "validation_loss"]

SCHEDULE_KINDS = ("fixed_heat", "decayed_heat", "geodesic")


@dataclass(frozen=True)
class Schedule:
    kind: str
    total_iterations: int
    stages: tuple = field(default_factory=tuple)  # ((start_iteration, time), ...)

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ConfigError(f"schedule kind must be one of {SCHEDULE_KINDS}, got {self.kind!r}")
        if self.total_iterations < 1:
            raise ConfigError(f"total_iterations must be >= 1, got {self.total_iterations}")
        stages = tuple((int(s), float(t)) for s, t in self.stages)
        object.__setattr__(self, "stages", stages)
        if self.kind == "geodesic":
            if stages:
                raise ConfigError("geodesic schedules take no stages")
            return
        if not stages:
            raise ConfigError(f"{self.kind} schedule needs at least one stage")
        if stages[0][0] != 0:
            raise ConfigError(f"first stage must start at iteration 0, got {stages[0][0]}")
        starts = [s for s, _ in stages]
        if any(b <= a for a, b in zip(starts, starts[1:])):
            raise ConfigError(f"stage starts must be strictly increasing, got {starts}")
        times = [t for _, t in stages]
        if any(t <= 0.0 for t in times):
            raise ConfigError(f"diffusion times must be positive, got {times}")
        if self.kind == "fixed_heat" and len(stages) != 1:
            raise ConfigError(f"fixed_heat takes exactly one stage, got {len(stages)}")
        if self.kind == "decayed_heat" and any(b >= a for a, b in zip(times, times[1:])):
            raise ConfigError(f"decayed_heat times must be strictly decreasing, got {times}")

    @property
    def initial_time(self) -> float | None:
        return self.stages[0][1] if self.stages else None


def stage_index(schedule: Schedule, iteration: int) -> int:
    if not 0 <= iteration < schedule.total_iterations:
        raise ValueError(
            f"iteration {iteration} outside [0, {schedule.total_iterations})")
    if schedule.kind == "geodesic":
        return 0
    idx = 0
    for i, (start, _) in enumerate(schedule.stages):
        if iteration >= start:
            idx = i
    return idx


def kernel_at(schedule: Schedule, iteration: int, bundle: ShapeBundle,
              cache: dict | None = None) -> SupervisorKernel:
    """Supervisor kernel for the stage containing `iteration`.

    Heat kernels are recomputed from the bundle's cached eigenbasis and
    memoized per stage in `cache` (a per-shape dict). Geodesic schedules
    return the bundle's precomputed geodesic supervisor unchanged.
    """
    idx = stage_index(schedule, iteration)
    if schedule.kind == "geodesic":
        if bundle.supervisor is None or bundle.supervisor.kind != "geodesic":
            raise ValueError("geodesic schedule requires a geodesic supervisor on the bundle")
        return bundle.supervisor
    if cache is not None and idx in cache:
        return cache[idx]
    t = schedule.stages[idx][1]
    kernel = SupervisorKernel(matrix=heat_kernel(bundle.basis, t).values, kind="heat", time=t)
    if cache is not None:
        cache[idx] = kernel
    return kernel


def validation_loss(params: NetworkParams, pairs, schedule: Schedule,
                    ridge: float = 1e-6) -> float:
    """Mean distortion loss over validation pairs at the initial stage time.

    `pairs` is a sequence of (source, target) ShapeBundles. Heat schedules
    always evaluate at the stage-0 diffusion time regardless of how far
    training has progressed; geodesic schedules use the bundles' geodesic
    supervisors.
    """
    pairs = list(pairs)
    if not pairs:
        raise EvaluationError("validation set is empty")
    kernels: dict[int, SupervisorKernel] = {}
    total = 0.0
    for source, target in pairs:
        if schedule.kind == "geodesic":
            src = source
            tgt = target
        else:
            t0 = schedule.initial_time
            src = _with_kernel(source, t0, kernels)
            tgt = _with_kernel(target, t0, kernels)
        loss, _ = pair_loss(params, src, tgt, ridge)
        total += loss
    return total / len(pairs)


def _with_kernel(bundle: ShapeBundle, t: float, memo: dict) -> ShapeBundle:
    key = id(bundle.basis)
    if key not in memo:
        memo[key] = SupervisorKernel(matrix=heat_kernel(bundle.basis, t).values,
                                     kind="heat", time=t)
    return ShapeBundle(basis=bundle.basis, descriptors=bundle.descriptors,
                       supervisor=memo[key], kind=bundle.kind, mesh=bundle.mesh)
