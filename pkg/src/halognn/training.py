"""Reverse-mode gradients, loss, normalization, training noise, Adam.

The forward/backward passes are staged through ``ModelTape`` so a distributed
driver can exchange node-latent rows (forward) and latent gradients (backward)
at every message-passing interface. Single-graph training is the degenerate
case with no halo rows and no exchanges.

Loss convention: workers produce the raw squared-error sum over their owned
rows; the 1/count scaling of the global mean is applied only after the
cross-worker reduction, so the loss value and its gradients are independent of
how the mesh is split.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, NumericError, ValidationError
from .mesh import ChannelSchema
from .model import (ModelConfig, ModelParams, block_backward, block_forward,
                    init_params, mlp_backward, mlp_forward)

CHECKPOINT_MAGIC = b"MGNC"
CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------

def loss_mse(pred: np.ndarray, target: np.ndarray, owned_mask: np.ndarray | None = None
             ) -> tuple[float, int]:
    """Local sufficient statistics (sse, count) of the global mean squared error.

    ``owned_mask`` selects the rows this worker owns; halo rows never
    contribute. A zero count is legal for an empty owned set and is resolved
    by the global reduction.
    """
    if pred.shape != target.shape:
        raise ValidationError(f"pred shape {pred.shape} != target shape {target.shape}")
    if owned_mask is not None:
        pred = pred[owned_mask]
        target = target[owned_mask]
    diff = pred - target
    return float((diff * diff).sum()), diff.size


# ---------------------------------------------------------------------------
# Staged forward/backward tape
# ---------------------------------------------------------------------------

@dataclass
class BackwardResult:
    sse: float
    count: int
    grads: dict[str, np.ndarray]
    d_node_features: np.ndarray
    d_edge_features: np.ndarray


class ModelTape:
    """Records one forward pass and replays it in reverse.

    The driver may overwrite halo rows of ``node_latent`` between
    ``run_block`` calls and redistribute halo rows of ``d_node`` between
    ``backward_block`` calls; everything else is internal.
    """

    def __init__(self, params: ModelParams, src: np.ndarray, dst: np.ndarray,
                 n_update: int, pinned_edges: np.ndarray | None = None):
        self.params = params
        self.src = src
        self.dst = dst
        self.n_update = n_update
        # edges whose latent is pinned to its encoded value (legacy exchange mode)
        self.pinned = pinned_edges
        self.node_latent: np.ndarray | None = None
        self.edge_latent: np.ndarray | None = None
        self._node_enc_cache = None
        self._edge_enc_cache = None
        self._edge_initial: np.ndarray | None = None
        self._block_caches: list = [None] * params.config.message_passing_steps
        self._decoder_cache = None
        self.pred: np.ndarray | None = None
        self.d_node: np.ndarray | None = None
        self.d_edge: np.ndarray | None = None
        self._d_edge_initial_extra: np.ndarray | None = None
        self.grads: dict[str, np.ndarray] = {}

    # -- forward -----------------------------------------------------------

    def encode(self, node_features: np.ndarray, edge_features: np.ndarray) -> None:
        p = self.params
        if node_features.shape[1] != p.config.node_in:
            raise ValidationError(
                f"node feature width {node_features.shape[1]} != config {p.config.node_in}")
        if edge_features.shape[1] != p.config.edge_in:
            raise ValidationError(
                f"edge feature width {edge_features.shape[1]} != config {p.config.edge_in}")
        self.node_latent, self._node_enc_cache = mlp_forward(p.node_encoder, node_features,
                                                             want_cache=True)
        self.edge_latent, self._edge_enc_cache = mlp_forward(p.edge_encoder, edge_features,
                                                             want_cache=True)
        self._node_features = node_features
        self._edge_features = edge_features
        if self.pinned is not None:
            self._edge_initial = self.edge_latent.copy()

    def run_block(self, k: int) -> None:
        blk = self.params.blocks[k]
        h, e, cache = block_forward(blk, self.node_latent, self.edge_latent,
                                    self.src, self.dst, self.n_update, want_cache=True)
        if not np.isfinite(h).all() or not np.isfinite(e).all():
            raise NumericError(f"non-finite latent after block {k}")
        if self.pinned is not None:
            e[self.pinned] = self._edge_initial[self.pinned]
        self.node_latent, self.edge_latent = h, e
        self._block_caches[k] = cache

    def decode(self) -> np.ndarray:
        self.pred, self._decoder_cache = mlp_forward(
            self.params.decoder, self.node_latent[:self.n_update], want_cache=True)
        if not np.isfinite(self.pred).all():
            raise NumericError("non-finite values in decoder output")
        return self.pred

    # -- backward ----------------------------------------------------------

    def seed_loss(self, target: np.ndarray) -> tuple[float, int]:
        """Start the reverse sweep from the unscaled squared-error sum."""
        sse, count = loss_mse(self.pred, target)
        d_pred = 2.0 * (self.pred - target)
        self.start_backward(d_pred)
        return sse, count

    def start_backward(self, d_pred: np.ndarray) -> None:
        dh, dec_grads = mlp_backward(self.params.decoder, self._decoder_cache, d_pred)
        self._merge_grads("decoder", dec_grads)
        self.d_node = np.zeros_like(self.node_latent)
        self.d_node[:self.n_update] = dh
        self.d_edge = np.zeros_like(self.edge_latent)
        if self.pinned is not None:
            self._d_edge_initial_extra = np.zeros_like(self.edge_latent)

    def backward_block(self, k: int) -> None:
        if self.pinned is not None:
            # the post-block reset discarded the updated rows, so their gradient
            # belongs to the encoded edge latents
            self._d_edge_initial_extra[self.pinned] += self.d_edge[self.pinned]
            self.d_edge[self.pinned] = 0.0
        blk = self.params.blocks[k]
        d_node, d_edge, grads = block_backward(blk, self._block_caches[k],
                                               self.d_node, self.d_edge, self.src, self.dst)
        self._merge_grads(f"block{k}", grads)
        self.d_node, self.d_edge = d_node, d_edge

    def finish_backward(self) -> BackwardResult:
        d_edge0 = self.d_edge
        if self.pinned is not None:
            d_edge0 = d_edge0 + self._d_edge_initial_extra
        d_node_f, ne_grads = mlp_backward(self.params.node_encoder,
                                          self._node_enc_cache, self.d_node)
        d_edge_f, ee_grads = mlp_backward(self.params.edge_encoder,
                                          self._edge_enc_cache, d_edge0)
        self._merge_grads("node_encoder", ne_grads)
        self._merge_grads("edge_encoder", ee_grads)
        for name, g in self.grads.items():
            if not np.isfinite(g).all():
                raise NumericError(f"non-finite gradient for tensor {name}")
        return BackwardResult(sse=0.0, count=0, grads=self.grads,
                              d_node_features=d_node_f, d_edge_features=d_edge_f)

    def _merge_grads(self, prefix: str, grads: dict[str, np.ndarray]) -> None:
        for k, v in grads.items():
            self.grads[f"{prefix}.{k}"] = v


def backward(params: ModelParams, node_features: np.ndarray, edge_features: np.ndarray,
             edges: np.ndarray, target: np.ndarray, n_owned: int | None = None
             ) -> BackwardResult:
    """One-shot forward + reverse sweep over a single graph (no exchanges).

    ``n_owned`` restricts the loss (and node updates) to the first rows; halo
    rows beyond it act as static context. Returns unscaled squared-error stats,
    per-tensor gradients, and gradients w.r.t. the raw input features.
    """
    n_owned = node_features.shape[0] if n_owned is None else n_owned
    tape = ModelTape(params, edges[:, 0], edges[:, 1], n_update=n_owned)
    tape.encode(node_features, edge_features)
    for k in range(params.config.message_passing_steps):
        tape.run_block(k)
    tape.decode()
    sse, count = tape.seed_loss(target[:n_owned])
    for k in range(params.config.message_passing_steps - 1, -1, -1):
        tape.backward_block(k)
    result = tape.finish_backward()
    result.sse, result.count = sse, count
    return result


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------

class RunningStats:
    """Streaming per-feature mean/std from (count, sum, sum of squares)."""

    def __init__(self, width: int, eps: float = 1e-8):
        self.width = width
        self.eps = eps
        self.count = 0.0
        self.total = np.zeros(width)
        self.total_sq = np.zeros(width)

    def fold(self, count: float, total: np.ndarray, total_sq: np.ndarray) -> None:
        self.count += count
        self.total += total
        self.total_sq += total_sq

    def fold_rows(self, rows: np.ndarray) -> None:
        self.fold(rows.shape[0], rows.sum(axis=0), (rows * rows).sum(axis=0))

    def mean(self) -> np.ndarray:
        return self.total / self.count if self.count > 0 else np.zeros(self.width)

    def std(self) -> np.ndarray:
        if self.count <= 0:
            return np.ones(self.width)
        var = np.maximum(self.total_sq / self.count - self.mean() ** 2, 0.0)
        return np.maximum(np.sqrt(var), self.eps)


class Normalizer:
    """Input/target normalization with stats shared across workers.

    Statistics accumulate until ``horizon`` update rounds have been folded,
    then freeze. Distributed runs fold the same globally reduced sums on every
    worker, keeping all replicas bit-identical.
    """

    FIELDS = ("node", "edge", "target")

    def __init__(self, node_width: int, edge_width: int, target_width: int,
                 horizon: int = 1000, eps: float = 1e-8):
        self.stats = {"node": RunningStats(node_width, eps),
                      "edge": RunningStats(edge_width, eps),
                      "target": RunningStats(target_width, eps)}
        self.horizon = horizon
        self.rounds = 0

    @property
    def frozen(self) -> bool:
        return self.rounds >= self.horizon

    def stat_vector(self, node_rows, edge_rows, target_rows) -> np.ndarray:
        """Local sums packed for a cross-worker sum reduction."""
        parts = []
        for rows, key in ((node_rows, "node"), (edge_rows, "edge"), (target_rows, "target")):
            if rows.shape[1] != self.stats[key].width:
                raise ValidationError(f"{key} rows width {rows.shape[1]} != "
                                      f"{self.stats[key].width}")
            parts.append([float(rows.shape[0])])
            parts.append(rows.sum(axis=0))
            parts.append((rows * rows).sum(axis=0))
        return np.concatenate([np.asarray(p, dtype=np.float64) for p in parts])

    def fold_vector(self, vec: np.ndarray) -> None:
        if self.frozen:
            return
        pos = 0
        for key in self.FIELDS:
            w = self.stats[key].width
            count = vec[pos]
            total = vec[pos + 1:pos + 1 + w]
            total_sq = vec[pos + 1 + w:pos + 1 + 2 * w]
            self.stats[key].fold(count, total, total_sq)
            pos += 1 + 2 * w
        self.rounds += 1

    def fold_sample(self, node_rows, edge_rows, target_rows) -> None:
        self.fold_vector(self.stat_vector(node_rows, edge_rows, target_rows))

    def normalize(self, key: str, x: np.ndarray) -> np.ndarray:
        s = self.stats[key]
        return (x - s.mean()) / s.std()

    def denormalize(self, key: str, y: np.ndarray) -> np.ndarray:
        s = self.stats[key]
        return y * s.std() + s.mean()

    def tensors(self):
        yield "normalizer.rounds", np.array([float(self.rounds)])
        for key in self.FIELDS:
            s = self.stats[key]
            yield f"normalizer.{key}.count", np.array([s.count])
            yield f"normalizer.{key}.total", s.total
            yield f"normalizer.{key}.total_sq", s.total_sq


# ---------------------------------------------------------------------------
# Training noise
# ---------------------------------------------------------------------------

def inject_noise(state: np.ndarray, noise_std: np.ndarray, input_indices: np.ndarray,
                 rng: np.random.Generator) -> np.ndarray:
    """Independent Gaussian corruption of the dynamical input channels.

    ``noise_std`` holds one physical-unit standard deviation per input channel.
    Returns a corrupted copy; the caller recomputes targets against it so the
    model learns to map the corrupted state to the true next state.
    """
    noise_std = np.asarray(noise_std, dtype=np.float64)
    if (noise_std < 0).any():
        raise ValidationError("noise_std must be non-negative")
    out = state.copy()
    if noise_std.max(initial=0.0) == 0.0:
        return out
    draw = rng.standard_normal((state.shape[0], len(input_indices)))
    out[:, input_indices] += draw * noise_std
    return out


def training_target(state_now: np.ndarray, state_next: np.ndarray,
                    schema: ChannelSchema) -> np.ndarray:
    """Physical-space targets: increments for delta channels, absolutes for direct."""
    out_idx = schema.output_indices()
    direct = schema.direct_mask()
    target = state_next[:, out_idx].copy()
    target[:, ~direct] -= state_now[:, out_idx[~direct]]
    return target


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LrSchedule:
    initial: float = 1e-4
    floor: float = 1e-6
    decay_steps: float = 1000.0

    def rate(self, step: int) -> float:
        return max(self.floor, self.initial * float(np.exp(-step / self.decay_steps)))

    @classmethod
    def for_budget(cls, steps: int, initial: float = 1e-4, floor: float = 1e-6) -> "LrSchedule":
        """Decay constant chosen so the rate reaches the floor at the step budget."""
        decay = steps / np.log(initial / floor) if initial > floor else float(steps)
        return cls(initial=initial, floor=floor, decay_steps=float(decay))

    def to_dict(self) -> dict:
        return {"initial": self.initial, "floor": self.floor, "decay_steps": self.decay_steps}


class AdamState:
    """Adam moments with bias correction; updates parameters in place."""

    def __init__(self, params: ModelParams, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step = 0
        self.m = {name: np.zeros_like(a) for name, a in params.tensors()}
        self.v = {name: np.zeros_like(a) for name, a in params.tensors()}

    def tensors(self):
        yield "adam.step", np.array([float(self.step)])
        for name in self.m:
            yield f"adam.m.{name}", self.m[name]
        for name in self.v:
            yield f"adam.v.{name}", self.v[name]


def adam_step(state: AdamState, params: ModelParams, grads: dict[str, np.ndarray],
              lr: float) -> None:
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, arr in params.tensors():
        g = grads[name]
        if g.shape != arr.shape:
            raise ValidationError(f"gradient shape mismatch for {name}: "
                                  f"{g.shape} != {arr.shape}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        arr -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def accumulate_gradients(grads_list: list[dict[str, np.ndarray]], factor: int
                         ) -> dict[str, np.ndarray]:
    """Arithmetic mean of ``factor`` microbatch gradients."""
    if len(grads_list) != factor:
        raise ValidationError(f"expected {factor} gradient sets, got {len(grads_list)}")
    out = {}
    for name in grads_list[0]:
        out[name] = sum(g[name] for g in grads_list) / factor
    return out


# ---------------------------------------------------------------------------
# Replica fingerprinting and checkpoints
# ---------------------------------------------------------------------------

def state_tensors(params: ModelParams, adam: AdamState | None = None,
                  normalizer: Normalizer | None = None):
    yield from params.tensors()
    if adam is not None:
        yield from adam.tensors()
    if normalizer is not None:
        yield from normalizer.tensors()


def content_hash(params: ModelParams, adam: AdamState | None = None,
                 normalizer: Normalizer | None = None) -> str:
    h = hashlib.sha256()
    for name, arr in state_tensors(params, adam, normalizer):
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return h.hexdigest()


def save_checkpoint(path, params: ModelParams, adam: AdamState, normalizer: Normalizer,
                    schema: ChannelSchema, schedule: LrSchedule, step: int) -> None:
    header = {
        "model": params.config.to_dict(),
        "schema": {"names": list(schema.names),
                   "input_channels": list(schema.input_channels),
                   "output_channels": list(schema.output_channels),
                   "direct_channels": sorted(schema.direct_channels)},
        "adam": {"beta1": adam.beta1, "beta2": adam.beta2, "eps": adam.eps,
                 "step": adam.step},
        "schedule": schedule.to_dict(),
        "normalizer": {"horizon": normalizer.horizon,
                       "eps": normalizer.stats["node"].eps,
                       "rounds": normalizer.rounds,
                       "counts": {k: normalizer.stats[k].count for k in Normalizer.FIELDS},
                       "widths": {k: normalizer.stats[k].width for k in Normalizer.FIELDS}},
        "step": step,
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(raw)), raw]
    for _, arr in state_tensors(params, adam, normalizer):
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> tuple[ModelParams, AdamState, Normalizer, ChannelSchema,
                                   LrSchedule, int]:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic {data[:4]!r}", offset=0)
    version, header_len = struct.unpack("<II", data[4:12])
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}", offset=4)
    header = json.loads(data[12:12 + header_len].decode("utf-8"))
    params = init_params(ModelConfig.from_dict(header["model"]), seed=0)
    adam = AdamState(params, beta1=header["adam"]["beta1"], beta2=header["adam"]["beta2"],
                     eps=header["adam"]["eps"])
    adam.step = header["adam"]["step"]
    widths = header["normalizer"]["widths"]
    normalizer = Normalizer(widths["node"], widths["edge"], widths["target"],
                            horizon=header["normalizer"]["horizon"],
                            eps=header["normalizer"]["eps"])
    offset = 12 + header_len
    for name, arr in state_tensors(params, adam, normalizer):
        nbytes = arr.size * 8
        if offset + nbytes > len(data):
            raise FormatError(f"{path}: truncated while reading {name}", offset=offset)
        flat = np.frombuffer(data, dtype="<f8", count=arr.size, offset=offset)
        arr[...] = flat.reshape(arr.shape)
        offset += nbytes
    if offset != len(data):
        raise FormatError(f"{path}: {len(data) - offset} trailing bytes", offset=offset)
    # counters are surfaced as derived tensors above; restore the real ones
    adam.step = header["adam"]["step"]
    normalizer.rounds = header["normalizer"]["rounds"]
    for k in Normalizer.FIELDS:
        normalizer.stats[k].count = header["normalizer"]["counts"][k]
    sch = header["schema"]
    schema = ChannelSchema(names=tuple(sch["names"]),
                           input_channels=tuple(sch["input_channels"]),
                           output_channels=tuple(sch["output_channels"]),
                           direct_channels=frozenset(sch["direct_channels"]))
    schedule = LrSchedule(**header["schedule"])
    return params, adam, normalizer, schema, schedule, header["step"]
