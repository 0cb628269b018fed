"""Multi-worker execution: schedulers, collectives, halo exchange, inference.

Workers are per-partition execution contexts inside one process. A step is a
bulk-synchronous sequence of per-worker phases separated by collectives; the
collectives (allreduce, all-to-all halo exchange, barrier) are the only
cross-worker interactions, so the schedule is deadlock-free for any worker
count. Reductions run in a fixed pairwise tree order over worker index, which
keeps results bit-identical on every worker regardless of thread timing.

The sequential scheduler runs phase tasks one worker at a time and is meant
for tests; the threaded scheduler overlaps workers for timing runs.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import DivergenceError, ValidationError
from .mesh import Mesh, Trajectory, build_edge_features, node_feature_rows
from .model import ModelParams
from .partition import PartitionPlan
from .perf import Tracer
from .training import ModelTape, Normalizer

SCHEDULERS = ("sequential", "threads")


# ---------------------------------------------------------------------------
# Worker group and collectives
# ---------------------------------------------------------------------------

class WorkerGroup:
    """Runs per-worker phase functions and driver-side collectives.

    Phase functions receive the worker index. Trace events are emitted per
    worker per phase, and per collective call: one idle span (arrival to
    group completion) plus one exchange/allreduce span.
    """

    def __init__(self, n_workers: int, scheduler: str = "sequential",
                 tracer: Tracer | None = None):
        if scheduler not in SCHEDULERS:
            raise ValidationError(f"unknown scheduler {scheduler!r}")
        self.n_workers = n_workers
        self.scheduler = scheduler
        self.tracer = tracer
        self._pool = (ThreadPoolExecutor(max_workers=n_workers)
                      if scheduler == "threads" and n_workers > 1 else None)
        now = Tracer.clock()
        self._last_end = [now] * n_workers

    def close(self) -> None:
        if self._pool is not None:
            self._pool.shutdown(wait=True)

    def run_phase(self, phase: str, fn, block: int | None = None) -> list:
        """Execute ``fn(worker)`` for every worker; returns per-worker results."""
        results = [None] * self.n_workers

        def task(w):
            t0 = Tracer.clock()
            out = fn(w)
            t1 = Tracer.clock()
            return w, out, t0, t1

        if self._pool is None:
            done = [task(w) for w in range(self.n_workers)]
        else:
            done = [f.result() for f in
                    [self._pool.submit(task, w) for w in range(self.n_workers)]]
        for w, out, t0, t1 in done:
            results[w] = out
            self._last_end[w] = t1
            if self.tracer is not None:
                self.tracer.emit(w, phase, t0, t1, block=block)
        return results

    def _collective_window(self, phase: str, compute, block: int | None = None):
        arrived = Tracer.clock()
        result = compute()
        done = Tracer.clock()
        if self.tracer is not None:
            for w in range(self.n_workers):
                self.tracer.emit(w, "idle", self._last_end[w], arrived, block=block)
                self.tracer.emit(w, phase, arrived, done, block=block)
        self._last_end = [done] * self.n_workers
        return result

    def barrier(self, block: int | None = None) -> None:
        self._collective_window("exchange", lambda: None, block=block)

    def allreduce(self, arrays: list[np.ndarray], block: int | None = None
                  ) -> list[np.ndarray]:
        """Elementwise sum of per-worker arrays; every worker gets identical bits."""
        if len(arrays) != self.n_workers:
            raise ValidationError(f"expected {self.n_workers} arrays, got {len(arrays)}")
        return self._collective_window("allreduce", lambda: allreduce_sum(arrays),
                                       block=block)


def tree_sum(arrays: list[np.ndarray]) -> np.ndarray:
    """Pairwise reduction over worker index: ((a0+a1)+(a2+a3))+..."""
    items = list(arrays)
    while len(items) > 1:
        nxt = [items[i] + items[i + 1] for i in range(0, len(items) - 1, 2)]
        if len(items) % 2:
            nxt.append(items[-1])
        items = nxt
    return items[0]


def allreduce_sum(arrays: list[np.ndarray]) -> list[np.ndarray]:
    shapes = {a.shape for a in arrays}
    if len(shapes) != 1:
        raise ValidationError(f"allreduce shape mismatch across workers: {shapes}")
    if len(arrays) == 1:
        return [arrays[0].copy()]
    total = tree_sum([np.asarray(a, dtype=np.float64) for a in arrays])
    return [total.copy() for _ in arrays]


# ---------------------------------------------------------------------------
# Halo exchange plumbing
# ---------------------------------------------------------------------------

@dataclass
class WorkerMasks:
    """Pack/unpack index lists for one worker, in ascending peer order."""
    send: list[tuple[int, np.ndarray]]  # (dst part, local owned rows to pack)
    recv: list[tuple[int, np.ndarray]]  # (src part, local halo rows to fill)

    @property
    def rows_sent(self) -> int:
        return sum(len(idx) for _, idx in self.send)

    @property
    def rows_received(self) -> int:
        return sum(len(idx) for _, idx in self.recv)


def build_worker_masks(plan: PartitionPlan, part: int) -> WorkerMasks:
    send, recv = [], []
    for (s, d), mask in plan.send_masks.items():
        if s == part:
            send.append((d, plan.local_index[s][mask]))
        if d == part:
            recv.append((s, plan.local_index[d][mask]))
    return WorkerMasks(send=sorted(send), recv=sorted(recv))


def _pack_rows(arrays: list[np.ndarray], masks: list[WorkerMasks], w: int) -> dict:
    return {d: arrays[w][idx] for d, idx in masks[w].send}


def _unpack_rows(arrays: list[np.ndarray], masks: list[WorkerMasks], w: int,
                 inbox: dict) -> None:
    for s, idx in masks[w].recv:
        arrays[w][idx] = inbox[s]


def exchange_halo_rows(group: WorkerGroup, arrays: list[np.ndarray],
                       masks: list[WorkerMasks], block: int | None = None) -> None:
    """All-to-all refresh: halo rows are overwritten with the owners' rows."""
    outboxes = group.run_phase("pack", lambda w: _pack_rows(arrays, masks, w), block=block)

    def move():
        inboxes = [dict() for _ in range(group.n_workers)]
        for s, out in enumerate(outboxes):
            for d, buf in out.items():
                inboxes[d][s] = buf
        return inboxes

    inboxes = group._collective_window("exchange", move, block=block)
    group.run_phase("unpack", lambda w: _unpack_rows(arrays, masks, w, inboxes[w]),
                    block=block)


def exchange_halo_grads(group: WorkerGroup, grads: list[np.ndarray],
                        masks: list[WorkerMasks], block: int | None = None) -> None:
    """Adjoint of the halo refresh: halo-slot gradients are returned to their
    owners and added onto the owners' rows; local halo slots are zeroed."""
    def pack(w):
        out = {}
        for s, idx in masks[w].recv:
            out[s] = grads[w][idx].copy()
            grads[w][idx] = 0.0
        return out

    outboxes = group.run_phase("pack", pack, block=block)

    def move():
        inboxes = [dict() for _ in range(group.n_workers)]
        for d, out in enumerate(outboxes):
            for s, buf in out.items():
                inboxes[s][d] = buf
        return inboxes

    inboxes = group._collective_window("exchange", move, block=block)

    def unpack(w):
        sends = dict(masks[w].send)
        for d in sorted(inboxes[w]):
            grads[w][sends[d]] += inboxes[w][d]

    group.run_phase("unpack", unpack, block=block)


def all_to_all_halo(arrays: list[np.ndarray], plan: PartitionPlan) -> None:
    """Untraced halo refresh over per-worker row arrays (in place)."""
    masks = [build_worker_masks(plan, p) for p in range(plan.n_parts)]
    outboxes = [_pack_rows(arrays, masks, w) for w in range(plan.n_parts)]
    for w in range(plan.n_parts):
        inbox = {s: outboxes[s][w] for s, _ in masks[w].recv}
        _unpack_rows(arrays, masks, w, inbox)


def halo_grad_exchange(grads: list[np.ndarray], plan: PartitionPlan) -> None:
    """Untraced reverse exchange over per-worker gradient arrays (in place)."""
    masks = [build_worker_masks(plan, p) for p in range(plan.n_parts)]
    outboxes = []
    for w in range(plan.n_parts):
        out = {}
        for s, idx in masks[w].recv:
            out[s] = grads[w][idx].copy()
            grads[w][idx] = 0.0
        outboxes.append(out)
    for s in range(plan.n_parts):
        sends = dict(masks[s].send)
        for d in range(plan.n_parts):
            if s in outboxes[d]:
                grads[s][sends[d]] += outboxes[d][s]


# ---------------------------------------------------------------------------
# Per-partition static views
# ---------------------------------------------------------------------------

@dataclass
class PartSlice:
    """Static per-part view of one mesh: local node ids, edges, edge features."""
    part: int
    node_ids: np.ndarray        # global ids, owned rows first
    n_owned: int
    src: np.ndarray             # local edge endpoints, canonical order
    dst: np.ndarray
    edge_features: np.ndarray   # raw geometric features of local edges
    halo_src_edges: np.ndarray  # boolean, edges whose source row is a halo slot

    @property
    def n_local(self) -> int:
        return len(self.node_ids)


def build_part_slices(mesh: Mesh, plan: PartitionPlan) -> list[PartSlice]:
    full_edge_features = build_edge_features(mesh)
    dst_owner = plan.owner[mesh.edges[:, 1]]
    slices = []
    for p in range(plan.n_parts):
        sel = dst_owner == p
        local = plan.local_edges[p]
        slices.append(PartSlice(part=p,
                                node_ids=plan.local_nodes(p),
                                n_owned=plan.n_owned(p),
                                src=local[:, 0].copy(),
                                dst=local[:, 1].copy(),
                                edge_features=full_edge_features[sel],
                                halo_src_edges=local[:, 0] >= plan.n_owned(p)))
    return slices


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------

def full_inference(params: ModelParams, normalizer: Normalizer, trajectory: Trajectory,
                   t: int, state: np.ndarray | None = None) -> np.ndarray:
    """Single-worker whole-graph prediction in physical target units.

    ``state`` overrides the trajectory's stored state at ``t`` (used by
    rollouts feeding predictions back in).
    """
    mesh, schema = trajectory.mesh, trajectory.schema
    q = trajectory.states[t] if state is None else state
    node_raw = node_feature_rows(q, mesh.node_types, schema, mesh.n_types)
    edge_raw = build_edge_features(mesh)
    tape = ModelTape(params, mesh.edges[:, 0], mesh.edges[:, 1], n_update=mesh.n_nodes)
    tape.encode(normalizer.normalize("node", node_raw),
                normalizer.normalize("edge", edge_raw))
    for k in range(params.config.message_passing_steps):
        tape.run_block(k)
    return normalizer.denormalize("target", tape.decode())


def stitched_inference(params: ModelParams, plan: PartitionPlan, normalizer: Normalizer,
                       trajectory: Trajectory, t: int, exchange: bool = True,
                       state: np.ndarray | None = None) -> np.ndarray:
    """Per-partition predictions assembled into one field, each node taken from
    its owner. With ``exchange`` halo latents are refreshed before every block;
    without it each partition predicts from its static boundary context."""
    mesh, schema = trajectory.mesh, trajectory.schema
    q = trajectory.states[t] if state is None else state
    slices = build_part_slices(mesh, plan)
    masks = [build_worker_masks(plan, p) for p in range(plan.n_parts)]
    tapes = []
    for sl in slices:
        node_raw = node_feature_rows(q[sl.node_ids], mesh.node_types[sl.node_ids],
                                     schema, mesh.n_types)
        tape = ModelTape(params, sl.src, sl.dst, n_update=sl.n_owned)
        tape.encode(normalizer.normalize("node", node_raw),
                    normalizer.normalize("edge", sl.edge_features))
        tapes.append(tape)
    for k in range(params.config.message_passing_steps):
        if exchange and plan.n_parts > 1:
            latents = [tp.node_latent for tp in tapes]
            outboxes = [_pack_rows(latents, masks, w) for w in range(plan.n_parts)]
            for w in range(plan.n_parts):
                inbox = {s: outboxes[s][w] for s, _ in masks[w].recv}
                _unpack_rows(latents, masks, w, inbox)
        for tp in tapes:
            tp.run_block(k)
    out = np.zeros((mesh.n_nodes, len(schema.output_channels)))
    for sl, tp in zip(slices, tapes):
        out[sl.node_ids[:sl.n_owned]] = normalizer.denormalize("target", tp.decode())
    return out


# ---------------------------------------------------------------------------
# Replica coherence
# ---------------------------------------------------------------------------

def check_replicas(tensor_iters: list) -> None:
    """Compare per-worker state tensors against worker 0, bitwise."""
    reference = list(tensor_iters[0])
    for w, it in enumerate(tensor_iters[1:], start=1):
        for (name0, a0), (name, a) in zip(reference, list(it)):
            if name != name0:
                raise DivergenceError(f"worker {w} tensor order diverged at {name}")
            if not np.array_equal(a0, a):
                raise DivergenceError(f"replica divergence on worker {w}: tensor {name}")
