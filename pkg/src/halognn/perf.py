"""Phase-level tracing of training steps and runtime analytics.

Workers buffer timing events privately during a run; analysis merges them
afterwards. Phase taxonomy: ``compute`` covers model math, the communication
class covers mask building, buffer pack/unpack and the two collectives, and
``idle`` is the span between a worker arriving at a collective and the
collective completing group-wide.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ValidationError

COMPUTE_PHASES = frozenset({"compute"})
PREPARATION_PHASES = frozenset({"mask_build", "pack", "unpack"})
TRANSFER_PHASES = frozenset({"exchange", "allreduce"})
COMM_PHASES = PREPARATION_PHASES | TRANSFER_PHASES
ALL_PHASES = COMPUTE_PHASES | COMM_PHASES | {"idle"}


@dataclass(frozen=True)
class TraceEvent:
    worker: int
    phase: str
    start_ns: int
    end_ns: int
    step: int
    block: int | None = None

    def __post_init__(self):
        if self.phase not in ALL_PHASES:
            raise ValidationError(f"unknown phase {self.phase!r}")
        if self.end_ns < self.start_ns:
            raise ValidationError("event ends before it starts")

    @property
    def duration_ns(self) -> int:
        return self.end_ns - self.start_ns


class Tracer:
    """Buffered event collector shared by all workers of one run."""

    def __init__(self):
        self.events: list[TraceEvent] = []
        self.step = 0

    def set_step(self, step: int) -> None:
        self.step = step

    def emit(self, worker: int, phase: str, start_ns: int, end_ns: int,
             block: int | None = None) -> None:
        self.events.append(TraceEvent(worker=worker, phase=phase, start_ns=start_ns,
                                      end_ns=end_ns, step=self.step, block=block))

    @staticmethod
    def clock() -> int:
        return time.perf_counter_ns()

    def save(self, path) -> None:
        save_trace(self.events, path)


def save_trace(events: list[TraceEvent], path) -> None:
    doc = {"version": 1,
           "events": [{"worker": e.worker, "phase": e.phase, "start_ns": e.start_ns,
                       "end_ns": e.end_ns, "step": e.step, "block": e.block}
                      for e in events]}
    Path(path).write_text(json.dumps(doc) + "\n")


def load_trace(path) -> list[TraceEvent]:
    doc = json.loads(Path(path).read_text())
    return [TraceEvent(**e) for e in doc["events"]]


def idle_fraction(t_active) -> float:
    """Load-imbalance measure: 1 - sum(t_i) / (N * max(t_i))."""
    t = np.asarray(t_active, dtype=np.float64)
    if t.ndim != 1 or t.size < 1:
        raise ValidationError("t_active must be a non-empty 1-d vector")
    if (t < 0).any():
        raise ValidationError("durations must be non-negative")
    peak = t.max()
    if peak == 0:
        raise ValidationError("all durations are zero")
    return float(1.0 - t.sum() / (t.size * peak))


@dataclass
class PerfReport:
    n_workers: int
    t_active: dict[int, float]              # per worker, seconds of non-idle time
    fr_idle: float
    class_fractions: dict[str, float]       # computational / communication / idle
    comm_split: dict[str, float]            # preparation / transfer (fractions of comm)
    phase_totals: dict[str, float]          # seconds per raw phase
    mean_step_wall: float
    n_steps: int


def runtime_distribution(events: list[TraceEvent]) -> PerfReport:
    """Aggregate a trace into the compute/communication/idle decomposition."""
    if not events:
        raise ValidationError("empty trace")
    workers = sorted({e.worker for e in events})
    phase_totals = {p: 0.0 for p in ALL_PHASES}
    active = {w: 0.0 for w in workers}
    for e in events:
        dur = e.duration_ns * 1e-9
        phase_totals[e.phase] += dur
        if e.phase != "idle":
            active[e.worker] += dur
    total = sum(phase_totals.values())
    comp = sum(phase_totals[p] for p in COMPUTE_PHASES)
    prep = sum(phase_totals[p] for p in PREPARATION_PHASES)
    tran = sum(phase_totals[p] for p in TRANSFER_PHASES)
    comm = prep + tran
    idle = phase_totals["idle"]
    class_fractions = {"computational": comp / total,
                       "communication": comm / total,
                       "idle": idle / total}
    comm_split = {"preparation": prep / comm if comm > 0 else 0.0,
                  "transfer": tran / comm if comm > 0 else 0.0}
    steps = sorted({e.step for e in events})
    walls = []
    for s in steps:
        evs = [e for e in events if e.step == s]
        walls.append((max(e.end_ns for e in evs) - min(e.start_ns for e in evs)) * 1e-9)
    t_active_vec = [active[w] for w in workers]
    return PerfReport(n_workers=len(workers),
                      t_active={w: active[w] for w in workers},
                      fr_idle=idle_fraction(t_active_vec) if max(t_active_vec) > 0 else 0.0,
                      class_fractions=class_fractions,
                      comm_split=comm_split,
                      phase_totals=phase_totals,
                      mean_step_wall=float(np.mean(walls)),
                      n_steps=len(steps))


@dataclass(frozen=True)
class ScalingRow:
    workers: int
    mean_step_time: float
    speedup: float
    ideal: float


def scaling_run(workload_factory, worker_counts, warm_steps: int = 10,
                measured_steps: int = 50) -> list[ScalingRow]:
    """Strong-scaling table over a fixed problem.

    ``workload_factory(p)`` must return an object with a ``step()`` method (and
    optionally ``close()``). Mean step time is taken over ``measured_steps``
    after discarding ``warm_steps``. Speedup is normalized to the smallest
    configuration; step times are not assumed monotone in the worker count.
    """
    counts = sorted(worker_counts)
    if not counts:
        raise ValidationError("no worker counts given")
    times = {}
    for p in counts:
        workload = workload_factory(p)
        try:
            for _ in range(warm_steps):
                workload.step()
            t0 = time.perf_counter()
            for _ in range(measured_steps):
                workload.step()
            times[p] = (time.perf_counter() - t0) / measured_steps
        finally:
            close = getattr(workload, "close", None)
            if close is not None:
                close()
    base = times[counts[0]]
    return [ScalingRow(workers=p, mean_step_time=times[p],
                       speedup=base / times[p], ideal=p / counts[0])
            for p in counts]


def report_summary(report: PerfReport) -> str:
    lines = [f"workers: {report.n_workers}, steps traced: {report.n_steps}",
             f"mean step wall time: {report.mean_step_wall * 1e3:.3f} ms",
             f"idle fraction (load imbalance): {report.fr_idle:.4f}"]
    cf = report.class_fractions
    lines.append(f"runtime split: {cf['computational'] * 100:.1f}% compute, "
                 f"{cf['communication'] * 100:.1f}% communication, "
                 f"{cf['idle'] * 100:.1f}% idle")
    cs = report.comm_split
    lines.append(f"communication split: {cs['preparation'] * 100:.1f}% preparation, "
                 f"{cs['transfer'] * 100:.1f}% transfer")
    for w in sorted(report.t_active):
        lines.append(f"worker {w}: active {report.t_active[w]:.4f} s")
    return "\n".join(lines)


def report_rows(report: PerfReport) -> list[tuple[str, str, float]]:
    """Flat (scope, name, value) rows for CSV export."""
    rows = [("all", "fr_idle", report.fr_idle),
            ("all", "mean_step_wall_s", report.mean_step_wall)]
    for name, val in sorted(report.class_fractions.items()):
        rows.append(("all", f"fraction_{name}", val))
    for name, val in sorted(report.comm_split.items()):
        rows.append(("all", f"comm_{name}", val))
    for phase, val in sorted(report.phase_totals.items()):
        rows.append(("all", f"total_{phase}_s", val))
    for w in sorted(report.t_active):
        rows.append((f"worker:{w}", "t_active_s", report.t_active[w]))
    return rows
