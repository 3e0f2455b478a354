"""Physical states as heterogeneous graphs and per-frame feature assembly.

A :class:`Sequence` stores raw simulation arrays (positions per frame, node
types, element connectivity, optional per-node / per-element fields). The
model never sees those directly: :func:`build_frame_pair` turns frame ``t`` of
a sequence into an input :class:`HeteroGraph` and the matching
:class:`TargetFields` according to a :class:`Schema`.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

INTERIOR, BOUNDARY, OBSTACLE = 0, 1, 2
NUM_NODE_TYPES = 3

# Node types whose next-frame state is prescribed by the boundary script.
SCRIPTED_TYPES = (BOUNDARY, OBSTACLE)

MESH_INPUT_FIELDS = ("node_type", "displacement", "velocity", "boundary_delta")
ELEMENT_INPUT_FIELDS = ("displacement", "velocity")
MESH_TARGET_FIELDS = ("velocity", "acceleration")
EDGE_FEATURE_WIDTH = 8


class SchemaError(ValueError):
    pass


class TopologyError(ValueError):
    pass


@dataclass(frozen=True)
class Schema:
    """Which raw fields feed the model inputs and which are its targets.

    Built-in mesh inputs are ``node_type`` (one-hot), ``displacement``
    (x_t - x_0), ``velocity`` (x_t - x_{t-1}, needs history >= 1) and
    ``boundary_delta`` (scripted x_{t+1} - x_t on boundary nodes, zero
    elsewhere). Any other name refers to a stored node field. Element inputs
    work the same way, with kinematic fields averaged over element nodes.

    Mesh targets are ``velocity`` (x_{t+1} - x_t) or ``acceleration``
    (x_{t+1} - 2 x_t + x_{t-1}); element targets name stored element fields
    taken at frame t+1.
    """

    mesh_inputs: tuple[str, ...] = ("node_type", "displacement", "boundary_delta")
    element_inputs: tuple[str, ...] = ("displacement",)
    mesh_targets: tuple[str, ...] = ("velocity",)
    element_targets: tuple[str, ...] = ()
    history: int = 0

    def __post_init__(self):
        if self.history < 0:
            raise SchemaError("history must be >= 0")
        for name in self.mesh_targets:
            if name not in MESH_TARGET_FIELDS:
                raise SchemaError(f"unknown mesh target {name!r}")
        if "acceleration" in self.mesh_targets and self.history < 1:
            raise SchemaError("acceleration target needs history >= 1")
        if "velocity" in self.mesh_inputs and self.history < 1:
            raise SchemaError("velocity input needs history >= 1")
        if len(self.mesh_targets) != 1:
            raise SchemaError("exactly one kinematic mesh target is supported")

    @property
    def dynamic(self) -> bool:
        return self.mesh_targets[0] == "acceleration"


@dataclass(frozen=True)
class BoundaryScript:
    """Prescribed per-frame positions for scripted nodes."""

    nodes: np.ndarray  # (B,) int
    positions: np.ndarray  # (T, B, 3)

    def __len__(self) -> int:
        return self.positions.shape[0]


@dataclass(frozen=True)
class Sequence:
    positions: np.ndarray  # (T, N, 3)
    node_type: np.ndarray  # (N,)
    elements: np.ndarray  # (E, k) mesh-node indices per element
    mesh_edges: np.ndarray  # (M, 2) directed sender, receiver
    boundary: BoundaryScript
    node_fields: dict[str, np.ndarray] = field(default_factory=dict)
    element_fields: dict[str, np.ndarray] = field(default_factory=dict)

    def __len__(self) -> int:
        return self.positions.shape[0]

    @property
    def n_nodes(self) -> int:
        return self.positions.shape[1]

    @property
    def n_elements(self) -> int:
        return self.elements.shape[0]

    def free_mask(self) -> np.ndarray:
        return ~np.isin(self.node_type, SCRIPTED_TYPES)

    def validate(self) -> None:
        T, N = self.positions.shape[:2]
        if self.positions.ndim != 3 or self.positions.shape[2] != 3:
            raise TopologyError("positions must have shape (T, N, 3)")
        if self.node_type.shape != (N,):
            raise TopologyError("topology mismatch: node_type length differs from node count")
        for name, edges, count in (
            ("mesh_edges", self.mesh_edges, N),
            ("elements", self.elements, N),
        ):
            if edges.size and (edges.min() < 0 or edges.max() >= count):
                raise TopologyError(f"{name} index out of range")
        if self.elements.ndim != 2 or (self.n_elements and self.elements.shape[1] < 1):
            raise TopologyError("elements must have shape (E, k) with k >= 1")
        scripted = np.flatnonzero(np.isin(self.node_type, SCRIPTED_TYPES))
        if not np.array_equal(np.sort(self.boundary.nodes), scripted):
            raise TopologyError("boundary script must cover exactly the boundary/obstacle nodes")
        if self.boundary.positions.shape != (T, len(self.boundary.nodes), 3):
            raise TopologyError("boundary script must cover every frame")
        for name, arr in self.node_fields.items():
            if arr.shape[-2] != N or arr.ndim not in (2, 3) or (arr.ndim == 3 and arr.shape[0] != T):
                raise TopologyError(f"node field {name!r} has shape {arr.shape}")
        for name, arr in self.element_fields.items():
            E = self.n_elements
            if arr.shape[-2] != E or arr.ndim not in (2, 3) or (arr.ndim == 3 and arr.shape[0] != T):
                raise TopologyError(f"element field {name!r} has shape {arr.shape}")

    def node_field(self, name: str, t: int) -> np.ndarray:
        arr = self.node_fields[name]
        return arr[t] if arr.ndim == 3 else arr

    def element_field(self, name: str, t: int) -> np.ndarray:
        arr = self.element_fields[name]
        return arr[t] if arr.ndim == 3 else arr


@dataclass(frozen=True)
class SequenceDataset:
    sequences: list[Sequence]
    schema: Schema
    domain_box: np.ndarray  # (2, 3) lower corner, upper corner

    @property
    def history(self) -> int:
        return self.schema.history

    def validate(self) -> None:
        if not self.sequences:
            raise ValueError("dataset has no sequences")
        box = np.asarray(self.domain_box, dtype=np.float64)
        if box.shape != (2, 3) or np.any(box[1] < box[0]):
            raise ValueError("domain_box must be (2, 3) with lower <= upper")
        for i, seq in enumerate(self.sequences):
            try:
                seq.validate()
            except TopologyError as exc:
                raise TopologyError(f"sequence {i}: {exc}") from None
            if len(seq) <= self.history + 1:
                raise ValueError(f"sequence {i}: needs more than history+1 frames")
            for name in self.schema.mesh_inputs:
                if name not in MESH_INPUT_FIELDS and name not in seq.node_fields:
                    raise SchemaError(f"sequence {i}: schema field {name!r} absent")
            for name in self.schema.element_inputs:
                if name not in ELEMENT_INPUT_FIELDS and name not in seq.element_fields:
                    raise SchemaError(f"sequence {i}: schema field {name!r} absent")
            for name in self.schema.element_targets:
                if name not in seq.element_fields:
                    raise SchemaError(f"sequence {i}: schema field {name!r} absent")

    def pairs(self) -> list[tuple[int, int]]:
        """All valid (sequence, frame) indices for one-step training pairs."""
        h = self.history
        return [(i, t) for i, seq in enumerate(self.sequences) for t in range(h, len(seq) - 1)]


@dataclass(frozen=True)
class HeteroGraph:
    mesh_features: np.ndarray  # (N, d_m)
    element_features: np.ndarray  # (E, d_e)
    mesh_positions: np.ndarray  # (N, 3)
    element_positions: np.ndarray  # (E, 3)
    m2m_edges: np.ndarray  # (M, 2)
    m2m_features: np.ndarray  # (M, 8)
    e2m_edges: np.ndarray  # (K, 2) element sender, mesh receiver
    e2m_features: np.ndarray  # (K, 8)
    m2e_edges: np.ndarray  # (K, 2) mesh sender, element receiver
    m2e_features: np.ndarray  # (K, 8)
    node_type: np.ndarray  # (N,)

    @property
    def n_nodes(self) -> int:
        return self.mesh_positions.shape[0]

    @property
    def n_elements(self) -> int:
        return self.element_positions.shape[0]

    def validate(self) -> None:
        N, E = self.n_nodes, self.n_elements
        for name, edges, ns, nr in (
            ("m2m", self.m2m_edges, N, N),
            ("e2m", self.e2m_edges, E, N),
            ("m2e", self.m2e_edges, N, E),
        ):
            if edges.size and (
                edges[:, 0].min() < 0 or edges[:, 0].max() >= ns
                or edges[:, 1].min() < 0 or edges[:, 1].max() >= nr
            ):
                raise TopologyError(f"{name} edge index out of range")
        if not np.array_equal(self.e2m_edges, self.m2e_edges[:, ::-1]):
            raise TopologyError("m2e and e2m edges must be transposes")
        if E and np.unique(self.e2m_edges[:, 0]).size != E:
            raise TopologyError("every element needs an incident e2m edge")

    def permuted(self, node_perm: np.ndarray, elem_perm: np.ndarray | None = None) -> "HeteroGraph":
        """Relabel nodes so that new node ``i`` is old node ``node_perm[i]``."""
        inv = np.empty_like(node_perm)
        inv[node_perm] = np.arange(len(node_perm))
        if elem_perm is None:
            elem_perm = np.arange(self.n_elements)
        einv = np.empty_like(elem_perm)
        einv[elem_perm] = np.arange(len(elem_perm))
        m2m = inv[self.m2m_edges]
        e2m = np.stack([einv[self.e2m_edges[:, 0]], inv[self.e2m_edges[:, 1]]], axis=1)
        return dataclasses.replace(
            self,
            mesh_features=self.mesh_features[node_perm],
            element_features=self.element_features[elem_perm],
            mesh_positions=self.mesh_positions[node_perm],
            element_positions=self.element_positions[elem_perm],
            m2m_edges=m2m,
            e2m_edges=e2m,
            m2e_edges=e2m[:, ::-1].copy(),
            node_type=self.node_type[node_perm],
        )


@dataclass(frozen=True)
class TargetFields:
    mesh: np.ndarray  # (N, d)
    element: np.ndarray | None  # (E, d) or None
    mask: np.ndarray  # (N,) bool, True where the mesh target is learned


@dataclass(frozen=True)
class FramePair:
    input: HeteroGraph
    target: TargetFields
    seq_index: int
    t: int


def edge_features(pos0: np.ndarray, pos_t: np.ndarray, senders: np.ndarray, receivers: np.ndarray,
                  recv0: np.ndarray | None = None, recv_t: np.ndarray | None = None) -> np.ndarray:
    """Relative-position edge features ``p0 | |p0| | pt | |pt|``.

    The relative vector points from sender to receiver. ``recv0``/``recv_t``
    give receiver positions when receivers live in a different node set.
    """
    if recv0 is None:
        recv0, recv_t = pos0, pos_t
    d0 = recv0[receivers] - pos0[senders]
    dt = recv_t[receivers] - pos_t[senders]
    return np.concatenate(
        [d0, np.linalg.norm(d0, axis=1, keepdims=True), dt, np.linalg.norm(dt, axis=1, keepdims=True)],
        axis=1,
    )


def element_incidence(elements: np.ndarray) -> np.ndarray:
    """(K, 2) e2m edges (element, mesh node), one per element corner."""
    E, k = elements.shape
    return np.stack([np.repeat(np.arange(E), k), elements.ravel()], axis=1)


def _element_mean(elements: np.ndarray, values: np.ndarray) -> np.ndarray:
    return values[elements].mean(axis=1)


def build_frame_pair(
    seq: Sequence,
    t: int,
    schema: Schema,
    positions: np.ndarray | None = None,
    prev_positions: np.ndarray | None = None,
    seq_index: int = -1,
) -> FramePair:
    """Assemble model inputs at frame ``t`` and targets for frame ``t + 1``.

    ``positions`` / ``prev_positions`` override the stored frame ``t`` and
    ``t - 1`` positions (used by rollouts and training noise). Targets are
    always computed against the stored frame ``t + 1`` and the positions
    actually fed in, so a perturbed input yields a corrected target.
    """
    h = schema.history
    T = len(seq)
    if not (h <= t < T - 1):
        raise IndexError(f"frame {t} out of range for history {h} and {T} frames")
    x0 = seq.positions[0].astype(np.float64)
    xt = seq.positions[t].astype(np.float64) if positions is None else np.asarray(positions, np.float64)
    if h >= 1:
        xp = seq.positions[t - 1].astype(np.float64) if prev_positions is None else np.asarray(prev_positions, np.float64)
    else:
        xp = None
    x_next = seq.positions[t + 1].astype(np.float64)
    N = seq.n_nodes
    free = seq.free_mask()

    bdelta = np.zeros((N, 3))
    bnodes = seq.boundary.nodes
    bdelta[bnodes] = seq.boundary.positions[t + 1].astype(np.float64) - xt[bnodes]

    kin = {"displacement": xt - x0}
    if xp is not None:
        kin["velocity"] = xt - xp

    mesh_cols = []
    for name in schema.mesh_inputs:
        if name == "node_type":
            mesh_cols.append(np.eye(NUM_NODE_TYPES)[seq.node_type])
        elif name == "boundary_delta":
            mesh_cols.append(bdelta)
        elif name in kin:
            mesh_cols.append(kin[name])
        elif name in seq.node_fields:
            mesh_cols.append(np.asarray(seq.node_field(name, t), np.float64).reshape(N, -1))
        else:
            raise SchemaError(f"schema field {name!r} absent from frames")
    mesh_feat = np.concatenate(mesh_cols, axis=1) if mesh_cols else np.zeros((N, 0))

    elems = seq.elements
    E = seq.n_elements
    elem_cols = []
    for name in schema.element_inputs:
        if name in kin:
            elem_cols.append(_element_mean(elems, kin[name]))
        elif name in seq.element_fields:
            elem_cols.append(np.asarray(seq.element_field(name, t), np.float64).reshape(E, -1))
        else:
            raise SchemaError(f"schema field {name!r} absent from frames")
    elem_feat = np.concatenate(elem_cols, axis=1) if elem_cols else np.zeros((E, 0))

    m2m = seq.mesh_edges.astype(np.int64)
    m2m_feat = edge_features(x0, xt, m2m[:, 0], m2m[:, 1]) if len(m2m) else np.zeros((0, EDGE_FEATURE_WIDTH))
    e2m = element_incidence(elems.astype(np.int64))
    ep0 = _element_mean(elems, x0) if E else np.zeros((0, 3))
    ept = _element_mean(elems, xt) if E else np.zeros((0, 3))
    if len(e2m):
        e2m_feat = edge_features(ep0, ept, e2m[:, 0], e2m[:, 1], recv0=x0, recv_t=xt)
        m2e_feat = edge_features(x0, xt, e2m[:, 1], e2m[:, 0], recv0=ep0, recv_t=ept)
    else:
        e2m_feat = m2e_feat = np.zeros((0, EDGE_FEATURE_WIDTH))

    graph = HeteroGraph(
        mesh_features=mesh_feat,
        element_features=elem_feat,
        mesh_positions=xt,
        element_positions=ept,
        m2m_edges=m2m,
        m2m_features=m2m_feat,
        e2m_edges=e2m,
        e2m_features=e2m_feat,
        m2e_edges=e2m[:, ::-1].copy(),
        m2e_features=m2e_feat,
        node_type=seq.node_type.astype(np.int64),
    )

    if schema.dynamic:
        mesh_target = x_next - 2.0 * xt + xp
    else:
        mesh_target = x_next - xt
    elem_target = None
    if schema.element_targets:
        elem_target = np.concatenate(
            [np.asarray(seq.element_field(n, t + 1), np.float64).reshape(E, -1) for n in schema.element_targets],
            axis=1,
        )
    return FramePair(graph, TargetFields(mesh_target, elem_target, free), seq_index, t)


def mesh_input_width(schema: Schema, seq: Sequence) -> int:
    width = 0
    for name in schema.mesh_inputs:
        if name == "node_type":
            width += NUM_NODE_TYPES
        elif name in ("boundary_delta", "displacement", "velocity"):
            width += 3
        else:
            width += int(np.prod(seq.node_fields[name].shape[-1:]))
    return width


def element_input_width(schema: Schema, seq: Sequence) -> int:
    width = 0
    for name in schema.element_inputs:
        if name in ELEMENT_INPUT_FIELDS:
            width += 3
        else:
            width += int(seq.element_fields[name].shape[-1])
    return width


def element_target_width(schema: Schema, seq: Sequence) -> int:
    return sum(int(seq.element_fields[n].shape[-1]) for n in schema.element_targets)


@dataclass(frozen=True)
class Affine:
    """Isotropic map ``x -> scale * x + shift`` into the unit cell."""

    scale: float
    shift: np.ndarray  # (3,)

    def apply(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, np.float64) * self.scale + self.shift

    def invert(self, y: np.ndarray) -> np.ndarray:
        return (np.asarray(y, np.float64) - self.shift) / self.scale

    def invert_delta(self, d: np.ndarray) -> np.ndarray:
        return np.asarray(d, np.float64) / self.scale


def unit_cell_affine(domain_box: np.ndarray, margin: float = 0.05) -> Affine:
    box = np.asarray(domain_box, np.float64)
    extent = float(np.max(box[1] - box[0]))
    if not extent > 0:
        raise ValueError("degenerate domain_box")
    scale = 2.0 / (extent * (1.0 + margin))
    center = 0.5 * (box[0] + box[1])
    return Affine(scale, -scale * center)


def bounding_box(sequences: list[Sequence]) -> np.ndarray:
    lo = np.min([s.positions.reshape(-1, 3).min(axis=0) for s in sequences], axis=0)
    hi = np.max([s.positions.reshape(-1, 3).max(axis=0) for s in sequences], axis=0)
    return np.stack([lo, hi]).astype(np.float64)


def normalize_to_unit_cell(ds: SequenceDataset, margin: float = 0.05,
                           affine: Affine | None = None) -> tuple[SequenceDataset, Affine]:
    """Map every position of every frame into [-1, 1]^3 with one isotropic affine.

    Output arrays are float64. Stored scalar fields are left untouched.
    Passing ``affine`` reuses an existing map (e.g. the training one for a
    validation set) instead of deriving it from ``ds.domain_box``.
    """
    box = np.asarray(ds.domain_box, np.float64)
    if affine is None:
        affine = unit_cell_affine(box, margin)
    tol = 1e-6 * float(np.max(box[1] - box[0]))
    seqs = []
    for i, s in enumerate(ds.sequences):
        p = s.positions.reshape(-1, 3)
        if np.any(p < box[0] - tol) or np.any(p > box[1] + tol):
            raise ValueError(f"sequence {i}: positions outside domain_box")
        seqs.append(
            dataclasses.replace(
                s,
                positions=affine.apply(s.positions),
                boundary=BoundaryScript(s.boundary.nodes, affine.apply(s.boundary.positions)),
            )
        )
    new_box = np.stack([affine.apply(box[0]), affine.apply(box[1])])
    return SequenceDataset(seqs, ds.schema, new_box), affine
