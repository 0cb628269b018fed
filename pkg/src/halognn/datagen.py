"""Synthetic trajectory generator: channel flow past a round obstacle.

Meshes are triangulated rectangles with a circular hole; node types mark
inflow (left), outflow (right), walls (top/bottom and the obstacle rim) and
interior fluid. The dynamics are a deliberately graph-local update (explicit
Laplacian diffusion, upwind advection along +x, a travelling-wave source in
the obstacle wake, and a neighborhood-averaged kinetic-energy scalar), so the
exact next-step rule is representable by a few rounds of message passing and
temporal variability stays concentrated downstream of the obstacle.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .mesh import ChannelSchema, Mesh, Trajectory, symmetric_edges, write_manifest, \
    write_trajectory

FLUID, WALL, INFLOW, OUTFLOW = 0, 1, 2, 3
N_TYPES = 4
CHANNELS = ("u", "v", "p")


@dataclass(frozen=True)
class GeometrySpec:
    width: float = 4.0
    height: float = 2.0
    nx: int = 24
    ny: int = 12
    obstacle_x: float = 1.2
    obstacle_y: float = 1.0
    radius: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if self.nx < 8 or self.ny < 8:
            raise ValidationError(f"grid resolution must be at least 8x8, got "
                                  f"{self.nx}x{self.ny}")
        dx = self.width / (self.nx - 1)
        dy = self.height / (self.ny - 1)
        margin = self.radius + 1.5 * max(dx, dy)
        if not (margin < self.obstacle_x < self.width - margin
                and margin < self.obstacle_y < self.height - margin):
            raise ValidationError("obstacle must sit strictly inside the domain")


@dataclass(frozen=True)
class DynamicsSpec:
    diffusion: float = 0.08
    advection: float = 0.6
    source_amplitude: float = 0.5
    source_frequency: float = 0.35
    n_steps: int = 40
    dt: float = 0.05

    def __post_init__(self):
        if self.n_steps < 2:
            raise ValidationError("n_steps must be >= 2")
        if self.dt <= 0:
            raise ValidationError("dt must be positive")
        if self.diffusion < 0:
            raise ValidationError("diffusion must be non-negative")


def make_mesh(geometry: GeometrySpec) -> Mesh:
    """Triangulated rectangle with the obstacle hole removed; deterministic per seed."""
    g = geometry
    dx = g.width / (g.nx - 1)
    dy = g.height / (g.ny - 1)
    xs, ys = np.meshgrid(np.arange(g.nx) * dx, np.arange(g.ny) * dy, indexing="ij")
    coords = np.stack([xs.ravel(), ys.ravel()], axis=1)
    dist = np.hypot(coords[:, 0] - g.obstacle_x, coords[:, 1] - g.obstacle_y)
    keep = dist >= g.radius
    new_id = np.full(g.nx * g.ny, -1, dtype=np.int64)
    new_id[keep] = np.arange(keep.sum())

    def gid(i, j):
        return i * g.ny + j

    pairs = []
    for i in range(g.nx):
        for j in range(g.ny):
            a = gid(i, j)
            if not keep[a]:
                continue
            for b in ((gid(i + 1, j) if i + 1 < g.nx else -1),
                      (gid(i, j + 1) if j + 1 < g.ny else -1),
                      (gid(i + 1, j + 1) if i + 1 < g.nx and j + 1 < g.ny else -1)):
                if b >= 0 and keep[b]:
                    pairs.append((new_id[a], new_id[b]))
    coords = coords[keep]
    dist = dist[keep]
    ij = np.stack(np.meshgrid(np.arange(g.nx), np.arange(g.ny), indexing="ij"),
                  axis=-1).reshape(-1, 2)[keep]

    types = np.full(len(coords), FLUID, dtype=np.int64)
    near_obstacle = dist < g.radius + 1.2 * max(dx, dy)
    types[near_obstacle] = WALL
    types[(ij[:, 1] == 0) | (ij[:, 1] == g.ny - 1)] = WALL
    types[ij[:, 0] == 0] = INFLOW
    types[ij[:, 0] == g.nx - 1] = OUTFLOW

    rng = np.random.default_rng(g.seed)
    jitter = rng.uniform(-0.15, 0.15, size=coords.shape) * np.array([dx, dy])
    interior = types == FLUID
    coords = coords.copy()
    coords[interior] += jitter[interior]

    return Mesh(coords=coords, node_types=types, edges=symmetric_edges(pairs),
                n_types=N_TYPES)


def _incoming_sum(values: np.ndarray, src: np.ndarray, dst: np.ndarray,
                  n: int) -> np.ndarray:
    out = np.zeros((n,) + values.shape[1:])
    np.add.at(out, dst, values[src])
    return out


def simulate(mesh: Mesh, dynamics: DynamicsSpec, geometry: GeometrySpec) -> Trajectory:
    """Advance the graph-local update rule for ``n_steps`` states."""
    src, dst = mesh.edges[:, 0], mesh.edges[:, 1]
    n = mesh.n_nodes
    degree = np.bincount(dst, minlength=n).astype(np.float64)
    if dynamics.diffusion * dynamics.dt * degree.max() >= 0.5:
        raise ValidationError(
            f"unstable dynamics: diffusion*dt*max_degree = "
            f"{dynamics.diffusion * dynamics.dt * degree.max():.3f} >= 0.5")

    coords = mesh.coords
    disp = coords[dst] - coords[src]          # along the edge, source -> destination
    length = np.linalg.norm(disp, axis=1)
    upwind = np.maximum(dynamics.advection * disp[:, 0], 0.0) / np.maximum(length ** 2, 1e-12)

    wall = mesh.node_types == WALL
    inflow = mesh.node_types == INFLOW
    wake = ((coords[:, 0] > geometry.obstacle_x)
            & (np.abs(coords[:, 1] - geometry.obstacle_y) < 1.6 * geometry.radius)
            & (coords[:, 0] - geometry.obstacle_x < 5.0 * geometry.radius))
    wake_phase = (coords[:, 0] - geometry.obstacle_x) * (3.0 / geometry.radius)

    def clamp(u, v):
        u[wall] = 0.0
        v[wall] = 0.0
        u[inflow] = dynamics.advection
        v[inflow] = 0.0
        return u, v

    def pressure(u, v):
        energy = u * u + v * v
        return (_incoming_sum(energy, src, dst, n) + energy) / (degree + 1.0)

    u = np.full(n, dynamics.advection)
    v = np.zeros(n)
    u, v = clamp(u, v)
    bound = 1e3 * max(1.0, abs(dynamics.advection) + dynamics.source_amplitude)
    states = [np.stack([u, v, pressure(u, v)], axis=1)]
    for step in range(1, dynamics.n_steps):
        lap_u = _incoming_sum(u, src, dst, n) - degree * u
        lap_v = _incoming_sum(v, src, dst, n) - degree * v
        # upwind transport: weighted pull from upstream neighbors
        adv_u = np.zeros(n)
        np.add.at(adv_u, dst, upwind * (u[src] - u[dst]))
        adv_v = np.zeros(n)
        np.add.at(adv_v, dst, upwind * (v[src] - v[dst]))
        u = u + dynamics.dt * (dynamics.diffusion * lap_u + adv_u)
        v = v + dynamics.dt * (dynamics.diffusion * lap_v + adv_v)
        if dynamics.source_amplitude != 0.0:
            pulse = np.sin(2 * np.pi * dynamics.source_frequency * step * dynamics.dt
                           - wake_phase)
            u = u + dynamics.dt * dynamics.source_amplitude * pulse * wake
            v = v + 0.5 * dynamics.dt * dynamics.source_amplitude * np.cos(
                2 * np.pi * dynamics.source_frequency * step * dynamics.dt - wake_phase) * wake
        u, v = clamp(u, v)
        if np.abs(u).max() > bound or np.abs(v).max() > bound:
            raise ValidationError(f"dynamics diverged at step {step}")
        states.append(np.stack([u, v, pressure(u, v)], axis=1))
    return Trajectory(mesh=mesh, schema=ChannelSchema.all_dynamic(CHANNELS),
                      states=np.stack(states))


@dataclass(frozen=True)
class DatasetSpec:
    n_train: int = 4
    n_valid: int = 1
    geometry: GeometrySpec = GeometrySpec()
    dynamics: DynamicsSpec = DynamicsSpec()
    radius_range: tuple[float, float] = (0.18, 0.3)
    center_x_range: tuple[float, float] = (0.9, 1.6)
    center_y_range: tuple[float, float] = (0.8, 1.2)
    seed: int = 0

    def __post_init__(self):
        if self.n_train < 1 or self.n_valid < 1:
            raise ValidationError("dataset needs at least one trajectory per split")


def make_dataset(spec: DatasetSpec, out_dir) -> Path:
    """Write trajectory files plus a manifest; returns the manifest path.

    Geometry parameters are drawn deterministically from the dataset seed, so
    identical specs give byte-identical datasets.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    entries = []
    counts = (("train", spec.n_train), ("valid", spec.n_valid))
    for split, count in counts:
        for i in range(count):
            geometry = GeometrySpec(
                width=spec.geometry.width, height=spec.geometry.height,
                nx=spec.geometry.nx, ny=spec.geometry.ny,
                obstacle_x=float(rng.uniform(*spec.center_x_range)),
                obstacle_y=float(rng.uniform(*spec.center_y_range)),
                radius=float(rng.uniform(*spec.radius_range)),
                seed=int(rng.integers(2 ** 31)))
            mesh = make_mesh(geometry)
            trajectory = simulate(mesh, spec.dynamics, geometry)
            name = f"{split}_{i:03d}.mgnt"
            write_trajectory(trajectory, out_dir / name)
            entries.append((name, split))
    manifest_path = out_dir / "manifest.json"
    write_manifest(manifest_path, entries)
    return manifest_path


def dataset_spec_from_dict(doc: dict) -> DatasetSpec:
    """Parse the gen-data CLI document; unknown keys are rejected."""
    from .config import take_keys
    top = take_keys(doc, {"n_train", "n_valid", "geometry", "dynamics", "radius_range",
                          "center_x_range", "center_y_range", "seed"}, "dataset spec")
    geo = take_keys(top.pop("geometry", {}) or {},
                    {"width", "height", "nx", "ny", "obstacle_x", "obstacle_y",
                     "radius", "seed"}, "geometry")
    dyn = take_keys(top.pop("dynamics", {}) or {},
                    {"diffusion", "advection", "source_amplitude", "source_frequency",
                     "n_steps", "dt"}, "dynamics")
    for key in ("radius_range", "center_x_range", "center_y_range"):
        if key in top:
            top[key] = tuple(top[key])
    return DatasetSpec(geometry=GeometrySpec(**geo), dynamics=DynamicsSpec(**dyn), **top)
