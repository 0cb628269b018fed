import numpy as np
import pytest

from halognn.mesh import ChannelSchema, Mesh, Trajectory, symmetric_edges


def random_mesh(n_nodes: int, seed: int, k: int = 4, n_types: int = 3) -> Mesh:
    """Connected random point mesh: k-nearest-neighbor edges plus an index chain."""
    rng = np.random.default_rng(seed)
    coords = rng.uniform(0.0, 1.0, size=(n_nodes, 2))
    pairs = []
    for i in range(n_nodes):
        dist = np.linalg.norm(coords - coords[i], axis=1)
        for j in np.argsort(dist)[1:k + 1]:
            pairs.append((i, int(j)))
    pairs.extend((i, i + 1) for i in range(n_nodes - 1))
    return Mesh(coords=coords, node_types=rng.integers(0, n_types, size=n_nodes),
                edges=symmetric_edges(pairs), n_types=n_types)


def random_trajectory(mesh: Mesh, n_steps: int, seed: int,
                      channels=("u", "v", "p")) -> Trajectory:
    rng = np.random.default_rng(seed)
    states = rng.normal(size=(n_steps, mesh.n_nodes, len(channels)))
    return Trajectory(mesh=mesh, schema=ChannelSchema.all_dynamic(channels), states=states)


def path_mesh(n: int = 4) -> Mesh:
    """Nodes on a line, consecutive neighbors only."""
    coords = np.stack([np.arange(n, dtype=float), np.zeros(n)], axis=1)
    pairs = [(i, i + 1) for i in range(n - 1)]
    return Mesh(coords=coords, node_types=np.zeros(n, dtype=int),
                edges=symmetric_edges(pairs), n_types=1)


def randomize_biases(params, seed: int, scale: float = 0.2) -> None:
    """Move parameters off the ReLU kink manifold (zero-bias init sits on it)."""
    rng = np.random.default_rng(seed)
    for name, arr in params.tensors():
        if ".b" in name or name.endswith("ln_offset"):
            arr += rng.normal(scale=scale, size=arr.shape)


@pytest.fixture
def tiny_mesh():
    return path_mesh(4)
