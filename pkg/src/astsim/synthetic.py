"""Desk-scale deformable contact data from an explicit mass-spring simulator.

Bodies are jittered lattice point clouds tetrahedralized with Delaunay. Every
tet edge is a spring with an axial dashpot, so internal forces come in
equal and opposite pairs and conserve momentum. Bodies interact through a
node-node penalty force. Scripted nodes follow their boundary script exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import Delaunay, cKDTree

from .meshstate import BOUNDARY, INTERIOR, OBSTACLE, BoundaryScript, Schema, Sequence, SequenceDataset, bounding_box

KINDS = ("two-blob-contact", "plate-press")
TET_EDGES = np.array([(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)])


class SimulationError(RuntimeError):
    pass


def schema_for(kind: str) -> Schema:
    if kind == "two-blob-contact":
        return Schema()
    if kind == "plate-press":
        return Schema(element_inputs=("displacement", "stress"), element_targets=("stress",))
    raise ValueError(f"unknown kind {kind!r}; expected one of {', '.join(KINDS)}")


def lattice_points(n: int, semi_axes, rng: np.random.Generator, jitter: float = 0.15) -> np.ndarray:
    """Exactly ``n`` jittered lattice points inside an origin-centred ellipsoid."""
    a = np.asarray(semi_axes, np.float64)
    volume = 4.0 / 3.0 * np.pi * np.prod(a)
    h = (volume / (1.3 * n)) ** (1.0 / 3.0)
    while True:
        axes = [np.arange(-ai, ai + h, h) for ai in a]
        g = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
        g = g - g.mean(axis=0)
        r = np.sqrt(((g / a) ** 2).sum(axis=1))
        if (r <= 1.0).sum() >= n:
            break
        h *= 0.95
    keep = np.argsort(r, kind="stable")[:n]
    pts = g[keep] + rng.uniform(-jitter * h, jitter * h, (n, 3))
    return pts


def box_points(n: int, extent, rng: np.random.Generator, jitter: float = 0.15) -> np.ndarray:
    """Exactly ``n`` jittered lattice points filling an origin-centred box."""
    e = np.asarray(extent, np.float64)
    h = (np.prod(e) / n) ** (1.0 / 3.0)
    while True:
        counts = np.maximum(np.floor(e / h).astype(int) + 1, 2)
        if np.prod(counts) >= n:
            break
        h *= 0.95
    axes = [np.linspace(-ei / 2, ei / 2, c) for ei, c in zip(e, counts)]
    g = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    # drop from the top face first so the block stays a box
    order = np.lexsort((g[:, 0], g[:, 1], g[:, 2]))[:n]
    return g[order] + rng.uniform(-jitter * h, jitter * h, (n, 3))


def tetrahedralize(points: np.ndarray) -> np.ndarray:
    tets = Delaunay(points).simplices.astype(np.int64)
    p = points[tets]
    vol = np.abs(np.einsum("ij,ij->i", p[:, 1] - p[:, 0], np.cross(p[:, 2] - p[:, 0], p[:, 3] - p[:, 0]))) / 6.0
    return tets[vol > 1e-12 * np.median(vol)]


def tet_springs(tets: np.ndarray) -> np.ndarray:
    """Unique undirected edges (i < j) of a tet mesh."""
    e = tets[:, TET_EDGES].reshape(-1, 2)
    e = np.sort(e, axis=1)
    return np.unique(e, axis=0)


def directed(springs: np.ndarray) -> np.ndarray:
    return np.concatenate([springs, springs[:, ::-1]])


@dataclass
class MassSpring:
    """Explicit symplectic-Euler mass-spring system.

    ``scripted`` nodes are kinematic: their positions are set externally and
    they feel no force. Contact acts between nodes of different ``body`` ids.
    """

    x: np.ndarray
    v: np.ndarray
    springs: np.ndarray
    rest: np.ndarray
    k: np.ndarray
    c: np.ndarray
    body: np.ndarray
    scripted: np.ndarray
    contact_radius: float = 0.0
    contact_k: float = 0.0
    mass: float = 1.0

    @classmethod
    def build(cls, x0, springs, body, scripted, dt, contact_radius=0.0, omega_dt=0.5, damping=1.0):
        x0 = np.asarray(x0, np.float64)
        rest = np.linalg.norm(x0[springs[:, 1]] - x0[springs[:, 0]], axis=1)
        k = 1.0 / rest
        # Gershgorin bound on the stiffness spectrum keeps omega_max * dt <= omega_dt
        row = np.bincount(springs.ravel(), weights=np.repeat(k, 2), minlength=len(x0))
        k *= omega_dt**2 / (4.0 * row.max() * dt**2)
        c = damping * 2.0 * np.sqrt(k)
        kc = float(np.median(k) * 4.0)
        return cls(x0.copy(), np.zeros_like(x0), springs, rest, k, c, np.asarray(body), np.asarray(scripted, bool),
                   contact_radius, kc)

    def forces(self) -> np.ndarray:
        i, j = self.springs[:, 0], self.springs[:, 1]
        d = self.x[j] - self.x[i]
        length = np.linalg.norm(d, axis=1)
        u = d / np.maximum(length, 1e-12)[:, None]
        rel_v = ((self.v[j] - self.v[i]) * u).sum(axis=1)
        mag = self.k * (length - self.rest) + self.c * rel_v
        f = np.zeros_like(self.x)
        np.add.at(f, i, mag[:, None] * u)
        np.add.at(f, j, -mag[:, None] * u)
        if self.contact_radius > 0.0:
            pairs = self.contact_pairs()
            if len(pairs):
                a, b = pairs[:, 0], pairs[:, 1]
                d = self.x[b] - self.x[a]
                dist = np.linalg.norm(d, axis=1)
                u = d / np.maximum(dist, 1e-12)[:, None]
                push = self.contact_k * (self.contact_radius - dist)
                np.add.at(f, a, -push[:, None] * u)
                np.add.at(f, b, push[:, None] * u)
        return f

    def contact_pairs(self) -> np.ndarray:
        pairs = cKDTree(self.x).query_pairs(self.contact_radius, output_type="ndarray")
        if len(pairs) == 0:
            return pairs.reshape(0, 2)
        return pairs[self.body[pairs[:, 0]] != self.body[pairs[:, 1]]]

    def step(self, dt: float, scripted_x: np.ndarray | None = None, scripted_v: np.ndarray | None = None) -> None:
        free = ~self.scripted
        f = self.forces()
        self.v[free] += dt * f[free] / self.mass
        self.x[free] += dt * self.v[free]
        if scripted_x is not None:
            self.x[self.scripted] = scripted_x
            self.v[self.scripted] = scripted_v

    def momentum(self) -> np.ndarray:
        return self.mass * self.v.sum(axis=0)

    def spring_energy(self) -> np.ndarray:
        d = self.x[self.springs[:, 1]] - self.x[self.springs[:, 0]]
        return 0.5 * self.k * (np.linalg.norm(d, axis=1) - self.rest) ** 2


def element_energy(sim: MassSpring, spring_index: np.ndarray) -> np.ndarray:
    """Sum of spring energies over each tet's six edges."""
    return sim.spring_energy()[spring_index].sum(axis=1)


def _spring_lookup(tets: np.ndarray, springs: np.ndarray) -> np.ndarray:
    """(E, 6) index into ``springs`` for each tet edge."""
    e = np.sort(tets[:, TET_EDGES], axis=2).reshape(-1, 2)
    key_s = springs[:, 0] * (springs.max() + 1) + springs[:, 1]
    key_e = e[:, 0] * (springs.max() + 1) + e[:, 1]
    order = np.argsort(key_s)
    return order[np.searchsorted(key_s[order], key_e)].reshape(len(tets), 6)


def blob_pair(size: int, rng: np.random.Generator, gap: float = 0.05):
    """Two ellipsoid blobs side by side along x; returns points, tets, body ids."""
    if size < 8:
        raise ValueError("size must be >= 8 nodes")
    n_a = size // 2
    parts, tets, body = [], [], []
    offset = 0
    axes = [rng.uniform([0.25, 0.2, 0.2], [0.35, 0.3, 0.3]) for _ in range(2)]
    for b, n in enumerate((n_a, size - n_a)):
        p = lattice_points(n, axes[b], rng)
        sign = -1.0 if b == 0 else 1.0
        p[:, 0] += sign * (axes[b][0] + gap / 2)
        t = tetrahedralize(p)
        parts.append(p)
        tets.append(t + offset)
        body.append(np.full(n, b))
        offset += n
    return np.concatenate(parts), np.concatenate(tets), np.concatenate(body)


def _back_nodes(p: np.ndarray, idx: np.ndarray, direction: float, frac: float = 0.1) -> np.ndarray:
    n = max(1, int(round(frac * len(idx))))
    key = direction * p[idx, 0]
    return idx[np.argsort(key, kind="stable")[:n]]


def simulate(x0, tets, body, node_type, velocity, frames, substeps, contact_radius, v0=None):
    """Run the simulator with scripted nodes moving at constant per-frame ``velocity``.

    ``v0`` is the initial velocity of every node (default at rest).
    """
    springs = tet_springs(tets)
    scripted = np.isin(node_type, (BOUNDARY, OBSTACLE))
    sim = MassSpring.build(x0, springs, body, scripted, dt=1.0 / substeps, contact_radius=contact_radius)
    if v0 is not None:
        sim.v[:] = v0
    lookup = _spring_lookup(tets, springs)
    xs, stress = [sim.x.copy()], [element_energy(sim, lookup)]
    base = sim.x[scripted].copy()
    dt = 1.0 / substeps
    scale = np.abs(x0).max() + 1.0
    for f in range(1, frames):
        for s in range(1, substeps + 1):
            t = f - 1 + s / substeps
            sim.step(dt, base + velocity * t, np.broadcast_to(velocity, base.shape))
        if not np.isfinite(sim.x).all() or np.abs(sim.x).max() > 10 * scale:
            raise SimulationError(f"unstable parameters: state diverged at frame {f}")
        xs.append(sim.x.copy())
        stress.append(element_energy(sim, lookup))
    return np.stack(xs), np.stack(stress), springs


def two_blob_sequence(size: int, rng: np.random.Generator, frames: int = 30, substeps: int = 20,
                      speed: float | None = None) -> Sequence:
    x0, tets, body = blob_pair(size, rng)
    idx = np.arange(len(x0))
    node_type = np.full(len(x0), INTERIOR)
    back_a = _back_nodes(x0, idx[body == 0], 1.0)
    back_b = _back_nodes(x0, idx[body == 1], -1.0)
    node_type[back_a] = BOUNDARY
    node_type[back_b] = BOUNDARY
    scripted = np.flatnonzero(node_type == BOUNDARY)
    if speed is None:
        speeds = rng.uniform(0.003, 0.008, 2)
    else:
        speeds = np.array([speed, speed])
    vel = np.zeros((len(scripted), 3))
    vel[:, 0] = np.where(body[scripted] == 0, speeds[0], -speeds[1])
    h = _spacing(x0, tets)
    # bodies start moving with their boundary so there is no start-up transient
    v0 = np.zeros_like(x0)
    v0[:, 0] = np.where(body == 0, speeds[0], -speeds[1])
    xs, stress, springs = simulate(x0, tets, body, node_type, vel, frames, substeps, 0.5 * h, v0)
    return Sequence(
        positions=xs.astype(np.float32),
        node_type=node_type,
        elements=tets,
        mesh_edges=directed(springs),
        boundary=BoundaryScript(scripted, xs[:, scripted].astype(np.float32)),
        node_fields={"body": body[:, None].astype(np.float32)},
        element_fields={"stress": stress[..., None].astype(np.float32)},
    )


def plate_press_sequence(size: int, rng: np.random.Generator, frames: int = 30, substeps: int = 20,
                         speed: float | None = None) -> Sequence:
    if size < 8:
        raise ValueError("size must be >= 8 nodes")
    extent = rng.uniform([0.5, 0.5, 0.3], [0.7, 0.7, 0.4])
    n_plate = max(4, size // 5)
    n_block = size - n_plate
    block = box_points(n_block, extent, rng)
    side = int(np.ceil(np.sqrt(n_plate)))
    u = np.linspace(-0.5, 0.5, side)
    grid = np.stack(np.meshgrid(u * extent[0] * 1.2, u * extent[1] * 1.2, indexing="ij"), -1).reshape(-1, 2)[:n_plate]
    h = (np.prod(extent) / n_block) ** (1 / 3)
    plate = np.column_stack([grid, np.full(len(grid), extent[2] / 2 + 0.75 * h)])
    x0 = np.concatenate([block, plate])
    tets = tetrahedralize(block)
    body = np.concatenate([np.zeros(n_block, int), np.ones(n_plate, int)])
    node_type = np.full(len(x0), INTERIOR)
    node_type[n_block:] = OBSTACLE
    bottom = np.flatnonzero(block[:, 2] <= block[:, 2].min() + 0.25 * h)
    node_type[bottom] = BOUNDARY
    scripted = np.flatnonzero(node_type != INTERIOR)
    v = rng.uniform(0.002, 0.004) if speed is None else speed
    vel = np.zeros((len(scripted), 3))
    vel[node_type[scripted] == OBSTACLE, 2] = -v
    xs, stress, springs = simulate(x0, tets, body, node_type, vel, frames, substeps, contact_radius=0.5 * h)
    return Sequence(
        positions=xs.astype(np.float32),
        node_type=node_type,
        elements=tets,
        mesh_edges=directed(springs),
        boundary=BoundaryScript(scripted, xs[:, scripted].astype(np.float32)),
        node_fields={"body": body[:, None].astype(np.float32)},
        element_fields={"stress": stress[..., None].astype(np.float32)},
    )


def _spacing(x: np.ndarray, tets: np.ndarray) -> float:
    s = tet_springs(tets)
    return float(np.median(np.linalg.norm(x[s[:, 1]] - x[s[:, 0]], axis=1)))


def gen_synthetic(kind: str, size: int, n_sequences: int, seed: int, frames: int = 30, substeps: int = 20,
                  speed: float | None = None) -> SequenceDataset:
    """Deterministic synthetic dataset in world units (normalize before training)."""
    schema = schema_for(kind)
    if n_sequences < 1:
        raise ValueError("n_sequences must be >= 1")
    if frames < 2:
        raise ValueError("need at least 2 frames")
    make = two_blob_sequence if kind == "two-blob-contact" else plate_press_sequence
    rngs = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n_sequences)]
    seqs = [make(size, r, frames, substeps, speed) for r in rngs]
    ds = SequenceDataset(seqs, schema, bounding_box(seqs))
    ds.validate()
    return ds


def contact_frames(seq: Sequence, radius: float) -> np.ndarray:
    """Frames with at least one cross-body node pair closer than ``radius``."""
    body = seq.node_fields["body"][:, 0]
    out = []
    for t in range(len(seq)):
        pairs = cKDTree(seq.positions[t]).query_pairs(radius, output_type="ndarray")
        if len(pairs) and np.any(body[pairs[:, 0]] != body[pairs[:, 1]]):
            out.append(t)
    return np.array(out, dtype=np.int64)
