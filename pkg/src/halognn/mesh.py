"""Mesh/trajectory data model, graph feature construction, and binary trajectory IO.

A mesh is a fixed point cloud with a symmetric directed edge set. A trajectory
adds a time series of per-node channel values on top of an unchanging mesh.
Edges are stored explicitly in both directions and kept in canonical
(destination, source) lexicographic order so that per-node aggregation has a
reproducible summation order.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, ValidationError

TRAJECTORY_MAGIC = b"MGNT"
TRAJECTORY_VERSION = 1


@dataclass(frozen=True)
class ChannelSchema:
    """Names and roles of the per-node channels of a trajectory.

    ``input_channels`` are the dynamical quantities fed to the model,
    ``output_channels`` the prediction targets. Channels listed in
    ``direct_channels`` are predicted as absolute next-step values; all other
    output channels are predicted as increments on the current state.
    """

    names: tuple[str, ...]
    input_channels: tuple[str, ...]
    output_channels: tuple[str, ...]
    direct_channels: frozenset[str] = field(default_factory=frozenset)

    def __post_init__(self):
        if not self.names:
            raise ValidationError("channel schema has no channels")
        if len(set(self.names)) != len(self.names):
            raise ValidationError(f"duplicate channel names: {self.names}")
        for group, label in ((self.input_channels, "input"),
                             (self.output_channels, "output"),
                             (self.direct_channels, "direct")):
            unknown = [c for c in group if c not in self.names]
            if unknown:
                raise ValidationError(f"{label} channels not in schema: {unknown}")
        if len(self.output_channels) < 1:
            raise ValidationError("schema needs at least one output channel")
        extra = [c for c in self.direct_channels if c not in self.output_channels]
        if extra:
            raise ValidationError(f"direct channels must be output channels: {extra}")

    @classmethod
    def all_dynamic(cls, names) -> "ChannelSchema":
        """Schema where every channel is both an input and an incremental output."""
        names = tuple(names)
        return cls(names=names, input_channels=names, output_channels=names)

    @property
    def n_outputs(self) -> int:
        return len(self.output_channels)

    def input_indices(self) -> np.ndarray:
        return np.array([self.names.index(c) for c in self.input_channels], dtype=np.int64)

    def output_indices(self) -> np.ndarray:
        return np.array([self.names.index(c) for c in self.output_channels], dtype=np.int64)

    def direct_mask(self) -> np.ndarray:
        """Boolean per output channel: True where the target is an absolute value."""
        return np.array([c in self.direct_channels for c in self.output_channels], dtype=bool)


def symmetric_edges(pairs) -> np.ndarray:
    """Return the symmetric closure of an edge list, deduplicated, self-loops dropped."""
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    both = np.concatenate([pairs, pairs[:, ::-1]], axis=0)
    both = both[both[:, 0] != both[:, 1]]
    return np.unique(both, axis=0)


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Mesh:
    """Immutable point mesh: coordinates, node types, symmetric directed edges."""

    coords: np.ndarray      # (n_nodes, dim) float64
    node_types: np.ndarray  # (n_nodes,) int64, values in [0, n_types)
    edges: np.ndarray       # (n_edges, 2) int64, (source, destination) pairs
    n_types: int

    def __post_init__(self):
        coords = np.ascontiguousarray(np.asarray(self.coords, dtype=np.float64))
        types = np.ascontiguousarray(np.asarray(self.node_types, dtype=np.int64))
        edges = np.ascontiguousarray(np.asarray(self.edges, dtype=np.int64).reshape(-1, 2))
        n = coords.shape[0]
        if coords.ndim != 2 or coords.shape[1] not in (2, 3):
            raise ValidationError(f"coords must be (n, 2) or (n, 3), got {coords.shape}")
        if n < 2:
            raise ValidationError(f"mesh needs at least 2 nodes, got {n}")
        if types.shape != (n,):
            raise ValidationError(f"node_types shape {types.shape} != ({n},)")
        if self.n_types < 1:
            raise ValidationError(f"n_types must be >= 1, got {self.n_types}")
        if types.size and (types.min() < 0 or types.max() >= self.n_types):
            raise ValidationError(
                f"node types must lie in [0, {self.n_types}), got range "
                f"[{types.min()}, {types.max()}]")
        if not np.isfinite(coords).all():
            raise ValidationError("coords contain non-finite values")
        if edges.size:
            if edges.min() < 0 or edges.max() >= n:
                raise ValidationError(
                    f"edge endpoint out of range [0, {n}): {edges.min()}..{edges.max()}")
            if (edges[:, 0] == edges[:, 1]).any():
                bad = edges[edges[:, 0] == edges[:, 1]][0]
                raise ValidationError(f"self-loop edge {tuple(bad)}")
        # canonical order: lexicographic by (destination, source)
        order = np.lexsort((edges[:, 0], edges[:, 1]))
        edges = edges[order]
        if edges.size:
            dup = np.all(edges[1:] == edges[:-1], axis=1) if len(edges) > 1 else np.zeros(0, bool)
            if dup.any():
                bad = edges[1:][dup][0]
                raise ValidationError(f"duplicate edge {tuple(bad)}")
            rev = edges[:, ::-1]
            rev_order = np.lexsort((rev[:, 0], rev[:, 1]))
            if not np.array_equal(rev[rev_order], edges):
                raise ValidationError("edge set is not symmetric; use symmetric_edges() first")
        object.__setattr__(self, "coords", _freeze(coords))
        object.__setattr__(self, "node_types", _freeze(types))
        object.__setattr__(self, "edges", _freeze(edges))

    @property
    def n_nodes(self) -> int:
        return self.coords.shape[0]

    @property
    def n_edges(self) -> int:
        return self.edges.shape[0]

    @property
    def dim(self) -> int:
        return self.coords.shape[1]


@dataclass(frozen=True)
class Trajectory:
    """Time series of node channel values over a fixed mesh."""

    mesh: Mesh
    schema: ChannelSchema
    states: np.ndarray  # (n_steps, n_nodes, n_channels) float64

    def __post_init__(self):
        states = np.ascontiguousarray(np.asarray(self.states, dtype=np.float64))
        if states.ndim != 3:
            raise ValidationError(f"states must be 3-d, got shape {states.shape}")
        t, n, c = states.shape
        if t < 2:
            raise ValidationError(f"trajectory needs at least 2 time steps, got {t}")
        if n != self.mesh.n_nodes:
            raise ValidationError(f"states node count {n} != mesh node count {self.mesh.n_nodes}")
        if c != len(self.schema.names):
            raise ValidationError(f"states channel count {c} != schema ({len(self.schema.names)})")
        if not np.isfinite(states).all():
            raise ValidationError("states contain non-finite values")
        object.__setattr__(self, "states", _freeze(states))

    @property
    def n_steps(self) -> int:
        return self.states.shape[0]


@dataclass(frozen=True)
class GraphEncoding:
    """Raw model inputs for one time step: per-node and per-edge feature rows."""

    node_features: np.ndarray  # (n_nodes, n_inputs + n_types)
    edge_features: np.ndarray  # (n_edges, dim + 1)

    def __post_init__(self):
        object.__setattr__(self, "node_features", _freeze(np.asarray(self.node_features, dtype=np.float64)))
        object.__setattr__(self, "edge_features", _freeze(np.asarray(self.edge_features, dtype=np.float64)))


def one_hot(node_type: int, n_types: int) -> np.ndarray:
    if not 0 <= node_type < n_types:
        raise ValidationError(f"node type {node_type} not in [0, {n_types})")
    vec = np.zeros(n_types, dtype=np.float64)
    vec[node_type] = 1.0
    return vec


def one_hot_matrix(node_types: np.ndarray, n_types: int) -> np.ndarray:
    types = np.asarray(node_types, dtype=np.int64)
    if types.size and (types.min() < 0 or types.max() >= n_types):
        raise ValidationError(f"node types out of range [0, {n_types})")
    return np.eye(n_types, dtype=np.float64)[types]


def build_edge_features(mesh: Mesh) -> np.ndarray:
    """Per-edge (displacement, norm) rows: x_src - x_dst followed by its length."""
    disp = mesh.coords[mesh.edges[:, 0]] - mesh.coords[mesh.edges[:, 1]]
    norm = np.linalg.norm(disp, axis=1, keepdims=True)
    return np.concatenate([disp, norm], axis=1)


def node_feature_rows(states_t: np.ndarray, node_types: np.ndarray,
                      schema: ChannelSchema, n_types: int) -> np.ndarray:
    """Concatenate input-channel values with the one-hot node-type block."""
    return np.concatenate(
        [states_t[:, schema.input_indices()], one_hot_matrix(node_types, n_types)], axis=1)


def encode_graph(trajectory: Trajectory, t: int) -> GraphEncoding:
    """Raw graph features at time index ``t``. Edge features do not depend on t."""
    if not 0 <= t < trajectory.n_steps:
        raise ValidationError(f"time index {t} out of range [0, {trajectory.n_steps})")
    nodes = node_feature_rows(trajectory.states[t], trajectory.mesh.node_types,
                              trajectory.schema, trajectory.mesh.n_types)
    return GraphEncoding(node_features=nodes, edge_features=build_edge_features(trajectory.mesh))


# ---------------------------------------------------------------------------
# Binary trajectory format
#
# Little-endian layout:
#   magic "MGNT" | version u32 | dim u32 | n_nodes u32 | n_edges u32
#   | n_steps u32 | n_channels u32 | n_types u32
#   | per channel: name length u16 + utf-8 bytes
#   | coords   n_nodes*dim        f64
#   | types    n_nodes            u32
#   | edges    n_edges*2          u32
#   | states   n_steps*n_nodes*n_channels f64
# ---------------------------------------------------------------------------

class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.offset = 0
        self.path = path

    def take(self, n: int, what: str) -> bytes:
        if self.offset + n > len(self.data):
            raise FormatError(f"{self.path}: truncated while reading {what}", offset=self.offset)
        chunk = self.data[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def u16(self, what: str) -> int:
        return struct.unpack("<H", self.take(2, what))[0]

    def array(self, dtype, count: int, what: str) -> np.ndarray:
        raw = self.take(np.dtype(dtype).itemsize * count, what)
        return np.frombuffer(raw, dtype=dtype, count=count)


def write_trajectory(trajectory: Trajectory, path) -> None:
    mesh, schema = trajectory.mesh, trajectory.schema
    parts = [TRAJECTORY_MAGIC,
             struct.pack("<7I", TRAJECTORY_VERSION, mesh.dim, mesh.n_nodes, mesh.n_edges,
                         trajectory.n_steps, len(schema.names), mesh.n_types)]
    for name in schema.names:
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
    parts.append(np.ascontiguousarray(mesh.coords, dtype="<f8").tobytes())
    parts.append(np.ascontiguousarray(mesh.node_types, dtype="<u4").tobytes())
    parts.append(np.ascontiguousarray(mesh.edges, dtype="<u4").tobytes())
    parts.append(np.ascontiguousarray(trajectory.states, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_trajectory(path) -> Trajectory:
    data = Path(path).read_bytes()
    r = _Reader(data, path)
    magic = r.take(4, "magic")
    if magic != TRAJECTORY_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {TRAJECTORY_MAGIC!r}", offset=0)
    version = r.u32("version")
    if version != TRAJECTORY_VERSION:
        raise FormatError(f"{path}: unsupported format version {version}", offset=4)
    dim = r.u32("dim")
    n_nodes = r.u32("node count")
    n_edges = r.u32("edge count")
    n_steps = r.u32("step count")
    n_channels = r.u32("channel count")
    n_types = r.u32("type count")
    names = []
    for i in range(n_channels):
        ln = r.u16(f"channel {i} name length")
        names.append(r.take(ln, f"channel {i} name").decode("utf-8"))
    coords = r.array("<f8", n_nodes * dim, "coords").reshape(n_nodes, dim)
    types = r.array("<u4", n_nodes, "node types").astype(np.int64)
    edges = r.array("<u4", n_edges * 2, "edges").astype(np.int64).reshape(n_edges, 2)
    states = r.array("<f8", n_steps * n_nodes * n_channels, "states")
    states = states.reshape(n_steps, n_nodes, n_channels)
    if r.offset != len(data):
        raise FormatError(f"{path}: {len(data) - r.offset} trailing bytes", offset=r.offset)
    mesh = Mesh(coords=coords, node_types=types, edges=edges, n_types=n_types)
    return Trajectory(mesh=mesh, schema=ChannelSchema.all_dynamic(names), states=states)


# ---------------------------------------------------------------------------
# Dataset manifest: JSON list of trajectory files with a split flag
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ManifestEntry:
    path: Path
    split: str  # "train" | "valid"


def write_manifest(path, entries: list[tuple[str, str]]) -> None:
    """Entries are (relative file path, split) pairs."""
    doc = {"version": 1,
           "trajectories": [{"path": str(p), "split": s} for p, s in entries]}
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def read_manifest(path) -> list[ManifestEntry]:
    path = Path(path)
    doc = json.loads(path.read_text())
    entries = []
    for item in doc["trajectories"]:
        split = item["split"]
        if split not in ("train", "valid"):
            raise ValidationError(f"{path}: unknown split {split!r}")
        entries.append(ManifestEntry(path=(path.parent / item["path"]).resolve(), split=split))
    return entries
