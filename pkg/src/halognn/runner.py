"""Training driver: sample stream, distributed step sequence, logging.

One optimizer step runs, per microbatch: build exchange masks, assemble local
features (with training noise), fold normalizer statistics through a global
sum reduction, encode, then alternate halo refresh and message-passing block;
after the loss statistics are reduced, the reverse sweep interleaves block
backward passes with halo gradient returns; finally parameter gradients are
reduced in a fixed tree order, scaled by the global element count, optionally
accumulated, and applied with an identical Adam update on every worker.

Replica state (parameters, optimizer moments, normalizer) must stay
bit-identical across workers; this is checked against worker 0 and any
mismatch is a hard error.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dist import (WorkerGroup, build_part_slices, build_worker_masks,
                   check_replicas, exchange_halo_grads, exchange_halo_rows)
from .errors import ConfigError, ValidationError
from .mesh import ChannelSchema, Trajectory, node_feature_rows
from .model import ModelConfig, ModelParams, init_params
from .partition import PartitionPlan, partition
from .perf import Tracer
from .training import (AdamState, LrSchedule, ModelTape, Normalizer, accumulate_gradients,
                       adam_step, inject_noise, loss_mse, save_checkpoint, state_tensors,
                       training_target)

MODES = ("single", "halo", "nocomm")


@dataclass(frozen=True)
class TrainSettings:
    mode: str = "single"
    n_parts: int = 1
    steps: int = 1000
    seed: int = 0
    accumulation: int = 1
    noise_std: float | tuple = 0.0      # normalized units, scalar or per input channel
    lr_initial: float = 1e-4
    lr_floor: float = 1e-6
    lr_decay_steps: float | None = None  # default: reach the floor at `steps`
    normalizer_horizon: int = 1000
    scheduler: str = "sequential"
    replica_check_every: int = 1
    legacy_node_only_exchange: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mode == "single" and self.n_parts != 1:
            raise ConfigError("single mode requires n_parts == 1")
        if self.n_parts < 1:
            raise ConfigError("n_parts must be >= 1")
        if self.accumulation < 1:
            raise ConfigError("accumulation must be >= 1")

    def schedule(self) -> LrSchedule:
        if self.lr_decay_steps is not None:
            return LrSchedule(self.lr_initial, self.lr_floor, self.lr_decay_steps)
        return LrSchedule.for_budget(self.steps, self.lr_initial, self.lr_floor)


@dataclass
class StepStats:
    step: int
    loss: float
    lr: float
    wallclock: float = 0.0


@dataclass
class _Worker:
    params: ModelParams
    adam: AdamState
    normalizer: Normalizer
    rng: np.random.Generator
    tape: ModelTape | None = None
    target_n: np.ndarray | None = None
    d_pred: np.ndarray | None = None
    node_raw: np.ndarray | None = None
    target_phys: np.ndarray | None = None
    micro_grads: list = field(default_factory=list)


class Trainer:
    """Synchronous multi-worker trainer over a fixed set of trajectories."""

    def __init__(self, trajectories: list[Trajectory], schema: ChannelSchema,
                 model_config: ModelConfig, settings: TrainSettings,
                 tracer: Tracer | None = None):
        if not trajectories:
            raise ValidationError("no training trajectories")
        self.trajectories = trajectories
        self.schema = schema
        self.settings = settings
        self.model_config = model_config
        self.lr_schedule = settings.schedule()
        self.tracer = tracer
        self.input_idx = schema.input_indices()
        self.step_index = 0
        self.last_grads: dict[str, np.ndarray] | None = None

        p = settings.n_parts
        self.plans: list[PartitionPlan] = []
        self.slices = []
        for traj in trajectories:
            plan = partition(traj.mesh, p, seed=settings.seed)
            self.plans.append(plan)
            self.slices.append(build_part_slices(traj.mesh, plan))

        base = init_params(model_config, seed=settings.seed)
        node_w = model_config.node_in
        edge_w = model_config.edge_in
        target_w = model_config.node_out
        self.workers = []
        for _ in range(p):
            self.workers.append(_Worker(
                params=base.copy(),
                adam=AdamState(base),
                normalizer=Normalizer(node_w, edge_w, target_w,
                                      horizon=settings.normalizer_horizon),
                rng=np.random.default_rng([settings.seed, 202])))
        self.group = WorkerGroup(p, scheduler=settings.scheduler, tracer=tracer)
        self.sample_rng = np.random.default_rng([settings.seed, 101])
        self._grad_layout = [(name, a.shape, a.size) for name, a in base.tensors()]

    # -- gradient packing ---------------------------------------------------

    def _flatten(self, grads: dict[str, np.ndarray]) -> np.ndarray:
        return np.concatenate([grads[name].ravel() for name, _, _ in self._grad_layout])

    def _unflatten(self, flat: np.ndarray, scale: float) -> dict[str, np.ndarray]:
        out, pos = {}, 0
        for name, shape, size in self._grad_layout:
            out[name] = (flat[pos:pos + size] * scale).reshape(shape)
            pos += size
        return out

    # -- noise ---------------------------------------------------------------

    def _physical_noise_std(self, normalizer: Normalizer) -> np.ndarray:
        cfg = np.broadcast_to(np.asarray(self.settings.noise_std, dtype=np.float64),
                              (len(self.input_idx),))
        # input channels occupy the leading node-feature columns
        return cfg * normalizer.stats["node"].std()[:len(self.input_idx)]

    # -- one microbatch -------------------------------------------------------

    def _microbatch(self, traj_idx: int, t: int) -> float:
        settings = self.settings
        traj = self.trajectories[traj_idx]
        plan = self.plans[traj_idx]
        slices = self.slices[traj_idx]
        group = self.group
        workers = self.workers
        multi = plan.n_parts > 1
        exchanging = settings.mode == "halo" and multi
        blocks = self.model_config.message_passing_steps

        masks = group.run_phase("mask_build", lambda w: build_worker_masks(plan, w))

        def prepare(w):
            wk, sl = workers[w], slices[w]
            q_now, q_next = traj.states[t], traj.states[t + 1]
            corrupted = inject_noise(q_now, self._physical_noise_std(wk.normalizer),
                                     self.input_idx, wk.rng)
            local = sl.node_ids
            wk.node_raw = node_feature_rows(corrupted[local], traj.mesh.node_types[local],
                                            self.schema, traj.mesh.n_types)
            wk.target_phys = training_target(corrupted, q_next,
                                             self.schema)[local[:sl.n_owned]]
            return wk.normalizer.stat_vector(wk.node_raw[:sl.n_owned],
                                             sl.edge_features, wk.target_phys)

        stat_vecs = group.run_phase("compute", prepare)
        if multi:
            stat_vecs = group.allreduce(stat_vecs)

        def encode(w):
            wk, sl = workers[w], slices[w]
            wk.normalizer.fold_vector(stat_vecs[w])
            pinned = None
            if exchanging and settings.legacy_node_only_exchange and sl.halo_src_edges.any():
                pinned = sl.halo_src_edges
            wk.tape = ModelTape(wk.params, sl.src, sl.dst, n_update=sl.n_owned,
                                pinned_edges=pinned)
            wk.tape.encode(wk.normalizer.normalize("node", wk.node_raw),
                           wk.normalizer.normalize("edge", sl.edge_features))
            wk.target_n = wk.normalizer.normalize("target", wk.target_phys)

        group.run_phase("compute", encode)

        for k in range(blocks):
            if exchanging:
                exchange_halo_rows(group, [wk.tape.node_latent for wk in workers],
                                   masks, block=k)
            group.run_phase("compute", lambda w, k=k: workers[w].tape.run_block(k), block=k)

        def decode_loss(w):
            wk = workers[w]
            pred = wk.tape.decode()
            sse, count = loss_mse(pred, wk.target_n)
            wk.d_pred = 2.0 * (pred - wk.target_n)
            return np.array([sse, float(count)])

        loss_vecs = group.run_phase("compute", decode_loss)
        if multi:
            loss_vecs = group.allreduce(loss_vecs)
        global_sse, global_count = float(loss_vecs[0][0]), float(loss_vecs[0][1])
        if global_count == 0:
            raise ValidationError("no owned nodes contributed to the loss")

        group.run_phase("compute", lambda w: workers[w].tape.start_backward(workers[w].d_pred))
        for k in range(blocks - 1, -1, -1):
            group.run_phase("compute",
                            lambda w, k=k: workers[w].tape.backward_block(k), block=k)
            if exchanging:
                exchange_halo_grads(group, [wk.tape.d_node for wk in workers],
                                    masks, block=k)

        flats = group.run_phase(
            "compute", lambda w: self._flatten(workers[w].tape.finish_backward().grads))
        if multi:
            flats = group.allreduce(flats)

        def finalize(w):
            workers[w].micro_grads.append(self._unflatten(flats[w], 1.0 / global_count))
            workers[w].tape = None

        group.run_phase("compute", finalize)
        return global_sse / global_count

    # -- one optimizer step ----------------------------------------------------

    def train_step(self) -> StepStats:
        settings = self.settings
        if self.tracer is not None:
            self.tracer.set_step(self.step_index)
        micro_losses = []
        for _ in range(settings.accumulation):
            traj_idx = int(self.sample_rng.integers(len(self.trajectories)))
            t = int(self.sample_rng.integers(self.trajectories[traj_idx].n_steps - 1))
            micro_losses.append(self._microbatch(traj_idx, t))
        lr = self.lr_schedule.rate(self.step_index)

        def apply(w):
            wk = self.workers[w]
            grads = accumulate_gradients(wk.micro_grads, settings.accumulation)
            wk.micro_grads = []
            adam_step(wk.adam, wk.params, grads, lr)
            return grads

        grads = self.group.run_phase("compute", apply)
        self.last_grads = grads[0]
        self.step_index += 1
        every = settings.replica_check_every
        if len(self.workers) > 1 and every > 0 and self.step_index % every == 0:
            check_replicas([state_tensors(wk.params, wk.adam, wk.normalizer)
                            for wk in self.workers])
        return StepStats(step=self.step_index - 1, loss=float(np.mean(micro_losses)), lr=lr)

    def run(self, n_steps: int | None = None, log_path=None) -> list[StepStats]:
        n_steps = self.settings.steps if n_steps is None else n_steps
        t0 = time.perf_counter()
        history = []
        for _ in range(n_steps):
            st = self.train_step()
            st.wallclock = time.perf_counter() - t0
            history.append(st)
        if log_path is not None:
            with open(log_path, "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["step", "loss", "lr", "wallclock"])
                for st in history:
                    writer.writerow([st.step, f"{st.loss:.12e}", f"{st.lr:.6e}",
                                     f"{st.wallclock:.3f}"])
        return history

    # -- state access ------------------------------------------------------------

    @property
    def params(self) -> ModelParams:
        return self.workers[0].params

    @property
    def normalizer(self) -> Normalizer:
        return self.workers[0].normalizer

    def save_checkpoint(self, path) -> None:
        save_checkpoint(Path(path), self.params, self.workers[0].adam, self.normalizer,
                        self.schema, self.lr_schedule, self.step_index)

    def close(self) -> None:
        self.group.close()
