"""Mesh partitioning: coordinate bisection, 1-hop halo identification, exchange plan.

The partitioner is deterministic: recursive coordinate bisection along the axis
of largest extent, splitting at the count-weighted median (ties broken by node
index), followed by a bounded greedy boundary pass that moves nodes to reduce
edge cut while keeping the part-size balance within 1.5x of the mean.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .mesh import Mesh

BALANCE_LIMIT = 1.5
REFINE_PASSES = 2


@dataclass(frozen=True)
class PartitionQuality:
    edge_cut: int    # undirected mesh edges crossing parts
    balance: float   # max owned size / mean owned size


@dataclass(frozen=True)
class PartitionPlan:
    """Node ownership, halo rows, and the per-pair send masks for one mesh.

    Local node numbering per part: owned nodes first (ascending global id),
    then halo nodes (ascending global id). ``local_edges[p]`` holds every mesh
    edge whose destination is owned by p, rewritten to local indices and kept
    in the mesh's canonical (destination, source) global order.
    """

    n_parts: int
    owner: np.ndarray                       # (n_nodes,) part index per node
    owned: tuple[np.ndarray, ...]           # per part, sorted global ids
    halo: tuple[np.ndarray, ...]            # per part, sorted global ids
    local_index: tuple[np.ndarray, ...]     # per part, global id -> local slot (-1 elsewhere)
    send_masks: dict[tuple[int, int], np.ndarray]  # (src part, dst part) -> sorted global ids
    local_edges: tuple[np.ndarray, ...]     # per part, (m_p, 2) local (source, destination)

    @property
    def n_nodes(self) -> int:
        return self.owner.shape[0]

    def local_nodes(self, p: int) -> np.ndarray:
        """Global ids in local-slot order: owned rows then halo rows."""
        return np.concatenate([self.owned[p], self.halo[p]])

    def n_owned(self, p: int) -> int:
        return len(self.owned[p])

    def n_local(self, p: int) -> int:
        return len(self.owned[p]) + len(self.halo[p])


def _adjacency(mesh: Mesh) -> list[np.ndarray]:
    """Per-node sorted array of undirected neighbors."""
    nbrs: list[set[int]] = [set() for _ in range(mesh.n_nodes)]
    for s, d in mesh.edges:
        nbrs[d].add(int(s))
    return [np.array(sorted(s), dtype=np.int64) for s in nbrs]


def _bisect(nodes: np.ndarray, coords: np.ndarray, n_parts: int,
            owner: np.ndarray, next_part: int) -> int:
    """Assign part ids to ``nodes`` recursively; returns the next free part id."""
    if n_parts == 1:
        owner[nodes] = next_part
        return next_part + 1
    p_left = (n_parts + 1) // 2
    p_right = n_parts - p_left
    pts = coords[nodes]
    extent = pts.max(axis=0) - pts.min(axis=0)
    axis = int(np.argmax(extent))
    order = np.lexsort((nodes, pts[:, axis]))
    n = len(nodes)
    n_left = (n * p_left + n_parts // 2) // n_parts
    # neither side may end up with fewer nodes than parts
    n_left = max(p_left, min(n - p_right, n_left))
    left = nodes[order[:n_left]]
    right = nodes[order[n_left:]]
    next_part = _bisect(left, coords, p_left, owner, next_part)
    return _bisect(right, coords, p_right, owner, next_part)


def _refine(owner: np.ndarray, adjacency: list[np.ndarray], n_parts: int) -> None:
    """Greedy boundary smoothing: move nodes to the part holding most neighbors."""
    n = len(owner)
    sizes = np.bincount(owner, minlength=n_parts)
    mean = n / n_parts
    for _ in range(REFINE_PASSES):
        moved = False
        for v in range(n):
            nbrs = adjacency[v]
            if len(nbrs) == 0:
                continue
            counts = np.bincount(owner[nbrs], minlength=n_parts)
            cur = owner[v]
            best = int(np.argmax(counts))
            gain = counts[best] - counts[cur]
            if best == cur or gain <= 0:
                continue
            if sizes[cur] <= 1:
                continue
            new_max = max(sizes.max(), sizes[best] + 1)
            cur_balance = sizes.max() / mean
            if new_max / mean > max(BALANCE_LIMIT, cur_balance):
                continue
            sizes[cur] -= 1
            sizes[best] += 1
            owner[v] = best
            moved = True
        if not moved:
            break


def identify_halos(mesh: Mesh, owner: np.ndarray
                   ) -> tuple[list[np.ndarray], dict[tuple[int, int], np.ndarray]]:
    """1-hop halo sets and send masks for a given ownership assignment.

    A node n belongs to halo[p] iff p does not own n and some mesh edge joins n
    to a node owned by p. send_masks[(s, d)] lists the nodes s owns that sit in
    d's halo, sorted by global id.
    """
    owner = np.asarray(owner, dtype=np.int64)
    if owner.shape != (mesh.n_nodes,):
        raise ValidationError(f"owner must cover all {mesh.n_nodes} nodes")
    n_parts = int(owner.max()) + 1 if owner.size else 0
    halo_sets: list[set[int]] = [set() for _ in range(n_parts)]
    src_owner = owner[mesh.edges[:, 0]]
    dst_owner = owner[mesh.edges[:, 1]]
    cross = src_owner != dst_owner
    for s_node, p in zip(mesh.edges[cross, 0], dst_owner[cross]):
        halo_sets[p].add(int(s_node))
    halos = [np.array(sorted(h), dtype=np.int64) for h in halo_sets]
    send_masks: dict[tuple[int, int], np.ndarray] = {}
    for d in range(n_parts):
        for node in halos[d]:
            s = int(owner[node])
            send_masks.setdefault((s, d), []).append(int(node))
    return halos, {k: np.array(v, dtype=np.int64) for k, v in sorted(send_masks.items())}


def _assemble(mesh: Mesh, owner: np.ndarray, n_parts: int) -> PartitionPlan:
    halos, send_masks = identify_halos(mesh, owner)
    if len(halos) < n_parts:
        halos += [np.zeros(0, dtype=np.int64)] * (n_parts - len(halos))
    owned = [np.flatnonzero(owner == p).astype(np.int64) for p in range(n_parts)]
    local_index = []
    for p in range(n_parts):
        idx = np.full(mesh.n_nodes, -1, dtype=np.int64)
        local = np.concatenate([owned[p], halos[p]])
        idx[local] = np.arange(len(local))
        local_index.append(idx)
    local_edges = []
    dst_owner = owner[mesh.edges[:, 1]]
    for p in range(n_parts):
        sel = mesh.edges[dst_owner == p]  # canonical order preserved
        local_edges.append(np.stack([local_index[p][sel[:, 0]],
                                     local_index[p][sel[:, 1]]], axis=1)
                           if len(sel) else np.zeros((0, 2), dtype=np.int64))
    return PartitionPlan(n_parts=n_parts, owner=owner.copy(),
                         owned=tuple(owned), halo=tuple(halos),
                         local_index=tuple(local_index), send_masks=send_masks,
                         local_edges=tuple(local_edges))


def partition(mesh: Mesh, n_parts: int, seed: int = 0) -> PartitionPlan:
    """Split a mesh into ``n_parts`` parts with 1-hop halos and an exchange plan.

    Deterministic for a fixed (mesh, n_parts, seed); the current algorithm uses
    no randomness, so the seed is recorded for interface stability only.
    """
    del seed
    if not 1 <= n_parts <= mesh.n_nodes:
        raise ValidationError(f"part count {n_parts} not in [1, {mesh.n_nodes}]")
    owner = np.full(mesh.n_nodes, -1, dtype=np.int64)
    _bisect(np.arange(mesh.n_nodes, dtype=np.int64), mesh.coords, n_parts, owner, 0)
    if n_parts > 1:
        _refine(owner, _adjacency(mesh), n_parts)
    return _assemble(mesh, owner, n_parts)


def quality(mesh: Mesh, plan: PartitionPlan) -> PartitionQuality:
    src_owner = plan.owner[mesh.edges[:, 0]]
    dst_owner = plan.owner[mesh.edges[:, 1]]
    cut = int((src_owner != dst_owner).sum()) // 2
    sizes = np.array([len(o) for o in plan.owned], dtype=np.float64)
    return PartitionQuality(edge_cut=cut, balance=float(sizes.max() / sizes.mean()))


def plan_to_dict(plan: PartitionPlan) -> dict:
    return {
        "n_parts": plan.n_parts,
        "owner": plan.owner.tolist(),
        "owned": [o.tolist() for o in plan.owned],
        "halo": [h.tolist() for h in plan.halo],
        "send_masks": {f"{s}->{d}": m.tolist() for (s, d), m in plan.send_masks.items()},
    }


def write_plan(plan: PartitionPlan, path) -> None:
    Path(path).write_text(json.dumps(plan_to_dict(plan), indent=2, sort_keys=True) + "\n")
