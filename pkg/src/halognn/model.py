"""Graph network model: encoder, message-passing blocks, decoder.

All tensors are float64 numpy arrays. Every layer comes as a forward/backward
pair so the training module can assemble exact reverse-mode gradients, pausing
at block boundaries when latents have to move between mesh partitions.

Block update, applied once per message-passing step:

    e' = e + EdgeMLP([e, v_src, v_dst])          per edge
    v' = v + NodeMLP([v, sum of incoming e'])    per updated node

The incoming-edge sum runs in canonical edge order (edges sorted by
destination, then source), which makes the aggregation order reproducible.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import FormatError, NumericError, ValidationError
from .mesh import GraphEncoding

PARAMS_MAGIC = b"MGNP"
PARAMS_VERSION = 1
LAYER_NORM_EPS = 1e-8


@dataclass(frozen=True)
class ModelConfig:
    message_passing_steps: int
    latent_size: int
    node_in: int
    edge_in: int
    node_out: int
    hidden_layers: int = 2
    use_layer_norm: bool = True

    def __post_init__(self):
        if self.message_passing_steps < 1:
            raise ValidationError("message_passing_steps must be >= 1")
        if self.latent_size < 1:
            raise ValidationError("latent_size must be >= 1")
        for name in ("node_in", "edge_in", "node_out"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1")
        if self.hidden_layers < 0:
            raise ValidationError("hidden_layers must be >= 0")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in
                ("message_passing_steps", "latent_size", "node_in", "edge_in",
                 "node_out", "hidden_layers", "use_layer_norm")}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class MlpParams:
    """Dense stack: ReLU hidden layers, linear output, optional layer norm on top."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    ln_scale: np.ndarray | None = None
    ln_offset: np.ndarray | None = None

    def tensors(self, prefix: str):
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            yield f"{prefix}.w{i}", w
            yield f"{prefix}.b{i}", b
        if self.ln_scale is not None:
            yield f"{prefix}.ln_scale", self.ln_scale
            yield f"{prefix}.ln_offset", self.ln_offset

    @property
    def out_width(self) -> int:
        return self.weights[-1].shape[1]


@dataclass
class BlockParams:
    edge_update: MlpParams
    node_update: MlpParams


@dataclass
class ModelParams:
    config: ModelConfig
    node_encoder: MlpParams
    edge_encoder: MlpParams
    blocks: list[BlockParams]
    decoder: MlpParams

    def tensors(self):
        """(name, array) pairs in deterministic declaration order."""
        yield from self.node_encoder.tensors("node_encoder")
        yield from self.edge_encoder.tensors("edge_encoder")
        for k, blk in enumerate(self.blocks):
            yield from blk.edge_update.tensors(f"block{k}.edge_update")
            yield from blk.node_update.tensors(f"block{k}.node_update")
        yield from self.decoder.tensors("decoder")

    def n_parameters(self) -> int:
        return sum(a.size for _, a in self.tensors())

    def copy(self) -> "ModelParams":
        def cp(m: MlpParams) -> MlpParams:
            return MlpParams(weights=[w.copy() for w in m.weights],
                             biases=[b.copy() for b in m.biases],
                             ln_scale=None if m.ln_scale is None else m.ln_scale.copy(),
                             ln_offset=None if m.ln_offset is None else m.ln_offset.copy())
        return ModelParams(config=self.config,
                           node_encoder=cp(self.node_encoder),
                           edge_encoder=cp(self.edge_encoder),
                           blocks=[BlockParams(cp(b.edge_update), cp(b.node_update))
                                   for b in self.blocks],
                           decoder=cp(self.decoder))


def _init_mlp(rng: np.random.Generator, widths: list[int], layer_norm: bool) -> MlpParams:
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        s = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-s, s, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    ln_scale = np.ones(widths[-1]) if layer_norm else None
    ln_offset = np.zeros(widths[-1]) if layer_norm else None
    return MlpParams(weights=weights, biases=biases, ln_scale=ln_scale, ln_offset=ln_offset)


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    """Glorot-uniform weights, zero biases; deterministic per seed."""
    rng = np.random.default_rng(seed)
    l, h = config.latent_size, config.hidden_layers
    hidden = [l] * h
    ln = config.use_layer_norm
    node_encoder = _init_mlp(rng, [config.node_in] + hidden + [l], ln)
    edge_encoder = _init_mlp(rng, [config.edge_in] + hidden + [l], ln)
    blocks = []
    for _ in range(config.message_passing_steps):
        edge_update = _init_mlp(rng, [3 * l] + hidden + [l], ln)
        node_update = _init_mlp(rng, [2 * l] + hidden + [l], ln)
        blocks.append(BlockParams(edge_update=edge_update, node_update=node_update))
    decoder = _init_mlp(rng, [l] + hidden + [config.node_out], layer_norm=False)
    return ModelParams(config=config, node_encoder=node_encoder, edge_encoder=edge_encoder,
                       blocks=blocks, decoder=decoder)


# ---------------------------------------------------------------------------
# MLP forward / backward
# ---------------------------------------------------------------------------

@dataclass
class MlpCache:
    layer_inputs: list[np.ndarray]   # input to each linear layer
    relu_masks: list[np.ndarray]     # mask per hidden layer
    ln_xhat: np.ndarray | None = None
    ln_inv_sigma: np.ndarray | None = None


def mlp_forward(p: MlpParams, x: np.ndarray, want_cache: bool = False
                ) -> tuple[np.ndarray, MlpCache | None]:
    inputs, masks = ([], []) if not want_cache else ([], [])
    n_layers = len(p.weights)
    for i, (w, b) in enumerate(zip(p.weights, p.biases)):
        if want_cache:
            inputs.append(x)
        x = x @ w + b
        if i < n_layers - 1:
            mask = x > 0.0
            x = x * mask
            if want_cache:
                masks.append(mask)
    cache = MlpCache(layer_inputs=inputs, relu_masks=masks) if want_cache else None
    if p.ln_scale is not None:
        mu = x.mean(axis=1, keepdims=True)
        var = x.var(axis=1, keepdims=True)
        inv_sigma = 1.0 / np.sqrt(var + LAYER_NORM_EPS)
        xhat = (x - mu) * inv_sigma
        x = xhat * p.ln_scale + p.ln_offset
        if want_cache:
            cache.ln_xhat = xhat
            cache.ln_inv_sigma = inv_sigma
    return x, cache


def mlp_backward(p: MlpParams, cache: MlpCache, dy: np.ndarray
                 ) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Gradients of a scalar loss w.r.t. the MLP input and every tensor.

    Tensor keys match the suffixes produced by ``MlpParams.tensors``.
    """
    grads: dict[str, np.ndarray] = {}
    if p.ln_scale is not None:
        xhat, inv_sigma = cache.ln_xhat, cache.ln_inv_sigma
        grads["ln_offset"] = dy.sum(axis=0)
        grads["ln_scale"] = (dy * xhat).sum(axis=0)
        g = dy * p.ln_scale
        width = xhat.shape[1]
        dy = inv_sigma * (g - g.mean(axis=1, keepdims=True)
                          - xhat * (g * xhat).sum(axis=1, keepdims=True) / width)
    n_layers = len(p.weights)
    for i in range(n_layers - 1, -1, -1):
        if i < n_layers - 1:
            dy = dy * cache.relu_masks[i]
        x = cache.layer_inputs[i]
        grads[f"w{i}"] = x.T @ dy
        grads[f"b{i}"] = dy.sum(axis=0)
        dy = dy @ p.weights[i].T
    return dy, grads


# ---------------------------------------------------------------------------
# Message-passing block
# ---------------------------------------------------------------------------

def aggregate_incoming(edge_values: np.ndarray, dst: np.ndarray, n_rows: int) -> np.ndarray:
    """Sum edge rows into their destination slots; dst must be sorted ascending."""
    out = np.zeros((n_rows, edge_values.shape[1]))
    if len(dst) == 0:
        return out
    starts = np.concatenate(([0], np.flatnonzero(np.diff(dst)) + 1))
    out[dst[starts]] = np.add.reduceat(edge_values, starts, axis=0)
    return out


@dataclass
class BlockCache:
    edge_mlp: MlpCache
    node_mlp: MlpCache
    n_update: int


def block_forward(bp: BlockParams, node_latent: np.ndarray, edge_latent: np.ndarray,
                  src: np.ndarray, dst: np.ndarray, n_update: int,
                  want_cache: bool = False
                  ) -> tuple[np.ndarray, np.ndarray, BlockCache | None]:
    """One message-passing step. Only the first ``n_update`` node rows are
    updated; the rest (halo rows) pass through unchanged."""
    z = np.concatenate([edge_latent, node_latent[src], node_latent[dst]], axis=1)
    msg, ecache = mlp_forward(bp.edge_update, z, want_cache)
    new_edge = edge_latent + msg
    agg = aggregate_incoming(new_edge, dst, node_latent.shape[0])
    u = np.concatenate([node_latent[:n_update], agg[:n_update]], axis=1)
    upd, ncache = mlp_forward(bp.node_update, u, want_cache)
    new_node = node_latent.copy()
    new_node[:n_update] += upd
    cache = BlockCache(edge_mlp=ecache, node_mlp=ncache, n_update=n_update) if want_cache else None
    return new_node, new_edge, cache


def block_backward(bp: BlockParams, cache: BlockCache,
                   d_node_out: np.ndarray, d_edge_out: np.ndarray,
                   src: np.ndarray, dst: np.ndarray
                   ) -> tuple[np.ndarray, np.ndarray, dict[str, np.ndarray]]:
    """Adjoint of ``block_forward``: gradients w.r.t. the block inputs and params."""
    n_update = cache.n_update
    l = d_node_out.shape[1]
    d_node = d_node_out.copy()                       # residual + halo pass-through
    du, node_grads = mlp_backward(bp.node_update, cache.node_mlp, d_node_out[:n_update])
    d_node[:n_update] += du[:, :l]
    d_agg = du[:, l:]
    d_new_edge = d_edge_out + d_agg[dst]
    d_edge = d_new_edge.copy()                       # residual
    dz, edge_grads = mlp_backward(bp.edge_update, cache.edge_mlp, d_new_edge)
    d_edge += dz[:, :l]
    np.add.at(d_node, src, dz[:, l:2 * l])
    np.add.at(d_node, dst, dz[:, 2 * l:])
    grads = {f"edge_update.{k}": v for k, v in edge_grads.items()}
    grads.update({f"node_update.{k}": v for k, v in node_grads.items()})
    return d_node, d_edge, grads


def _check_finite(arr: np.ndarray, stage: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite values produced by {stage}")


def forward(params: ModelParams, encoding: GraphEncoding, edges: np.ndarray | None = None
            ) -> np.ndarray:
    """Full-graph forward pass: per-node prediction rows of width node_out.

    ``edges`` defaults to assuming the encoding's edge rows follow the canonical
    mesh order; pass the mesh's (source, destination) array explicitly.
    """
    if edges is None:
        raise ValidationError("forward needs the mesh edge array")
    node_f, edge_f = encoding.node_features, encoding.edge_features
    cfg = params.config
    if node_f.shape[1] != cfg.node_in:
        raise ValidationError(f"node feature width {node_f.shape[1]} != config {cfg.node_in}")
    if edge_f.shape[1] != cfg.edge_in:
        raise ValidationError(f"edge feature width {edge_f.shape[1]} != config {cfg.edge_in}")
    src, dst = edges[:, 0], edges[:, 1]
    h, _ = mlp_forward(params.node_encoder, node_f)
    e, _ = mlp_forward(params.edge_encoder, edge_f)
    _check_finite(h, "node encoder")
    _check_finite(e, "edge encoder")
    for k, blk in enumerate(params.blocks):
        h, e, _ = block_forward(blk, h, e, src, dst, n_update=h.shape[0])
        _check_finite(h, f"block {k} node update")
        _check_finite(e, f"block {k} edge update")
    pred, _ = mlp_forward(params.decoder, h)
    _check_finite(pred, "decoder")
    return pred


def apply_delta(state: np.ndarray, prediction: np.ndarray, schema) -> np.ndarray:
    """Advance one step in physical units: add increments, overwrite direct channels."""
    out_idx = schema.output_indices()
    if prediction.shape != (state.shape[0], len(out_idx)):
        raise ValidationError(
            f"prediction shape {prediction.shape} incompatible with state {state.shape}")
    nxt = state.copy()
    direct = schema.direct_mask()
    nxt[:, out_idx[~direct]] += prediction[:, ~direct]
    nxt[:, out_idx[direct]] = prediction[:, direct]
    return nxt


# ---------------------------------------------------------------------------
# Parameter checkpoint: magic, config JSON block, raw tensors in tensor order
# ---------------------------------------------------------------------------

def save_params(params: ModelParams, path) -> None:
    header = json.dumps(params.config.to_dict(), sort_keys=True).encode("utf-8")
    parts = [PARAMS_MAGIC, struct.pack("<II", PARAMS_VERSION, len(header)), header]
    for _, arr in params.tensors():
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_params(path) -> ModelParams:
    data = Path(path).read_bytes()
    if data[:4] != PARAMS_MAGIC:
        raise FormatError(f"{path}: bad magic {data[:4]!r}", offset=0)
    version, header_len = struct.unpack("<II", data[4:12])
    if version != PARAMS_VERSION:
        raise FormatError(f"{path}: unsupported version {version}", offset=4)
    config = ModelConfig.from_dict(json.loads(data[12:12 + header_len].decode("utf-8")))
    params = init_params(config, seed=0)
    offset = 12 + header_len
    for name, arr in params.tensors():
        nbytes = arr.size * 8
        if offset + nbytes > len(data):
            raise FormatError(f"{path}: truncated while reading {name}", offset=offset)
        arr[...] = np.frombuffer(data, dtype="<f8", count=arr.size, offset=offset).reshape(arr.shape)
        offset += nbytes
    if offset != len(data):
        raise FormatError(f"{path}: {len(data) - offset} trailing bytes", offset=offset)
    return params
