"""MSEQ dataset directories: a text manifest plus one blob per sequence.

Layout of ``<dir>/manifest.txt``::

    format: MSEQ
    version: 1
    history: 0
    schema.mesh_inputs: node_type,displacement,boundary_delta
    ...
    domain_box: x0,y0,z0,x1,y1,z1
    sequences: 2
    seq.0.frames: 30
    seq.0.frame_node_counts: 200,200,...
    seq.0.frame_element_counts: 540,540,...
    array.0.positions: file=seq_0000.bin dtype=f32 shape=30,200,3 offset=0 nbytes=... crc32=...

Features and positions are float32, indices int32.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .blobio import BlobWriter, ManifestError, parse_manifest, read_arrays, write_manifest
from .meshstate import BoundaryScript, Schema, Sequence, SequenceDataset, TopologyError

MANIFEST = "manifest.txt"


def _join(values) -> str:
    return ",".join(str(v) for v in values)


def _split(value: str) -> list[str]:
    return [v for v in value.split(",") if v]


def save_dataset(ds: SequenceDataset, path: str | Path) -> None:
    if not ds.sequences:
        raise ValueError("cannot save a dataset with no sequences")
    ds.validate()
    root = Path(path)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"unwritable path {root}: {exc}") from exc
    s = ds.schema
    box = np.asarray(ds.domain_box, np.float64).ravel()
    lines = [
        "format: MSEQ",
        "version: 1",
        f"history: {s.history}",
        f"schema.mesh_inputs: {_join(s.mesh_inputs)}",
        f"schema.element_inputs: {_join(s.element_inputs)}",
        f"schema.mesh_targets: {_join(s.mesh_targets)}",
        f"schema.element_targets: {_join(s.element_targets)}",
        f"domain_box: {_join(repr(float(v)) for v in box)}",
        f"sequences: {len(ds.sequences)}",
    ]
    for i, seq in enumerate(ds.sequences):
        T = len(seq)
        lines += [
            f"seq.{i}.frames: {T}",
            f"seq.{i}.frame_node_counts: {_join([seq.n_nodes] * T)}",
            f"seq.{i}.frame_element_counts: {_join([seq.n_elements] * T)}",
            f"seq.{i}.node_fields: {_join(sorted(seq.node_fields))}",
            f"seq.{i}.element_fields: {_join(sorted(seq.element_fields))}",
        ]
        w = BlobWriter(root / f"seq_{i:04d}.bin")
        w.add(f"{i}.positions", seq.positions.astype(np.float32))
        w.add(f"{i}.node_type", seq.node_type.astype(np.int32))
        w.add(f"{i}.elements", seq.elements.astype(np.int32))
        w.add(f"{i}.mesh_edges", seq.mesh_edges.astype(np.int32))
        w.add(f"{i}.boundary_nodes", seq.boundary.nodes.astype(np.int32))
        w.add(f"{i}.boundary_positions", seq.boundary.positions.astype(np.float32))
        for name in sorted(seq.node_fields):
            w.add(f"{i}.node_field.{name}", seq.node_fields[name].astype(np.float32))
        for name in sorted(seq.element_fields):
            w.add(f"{i}.element_field.{name}", seq.element_fields[name].astype(np.float32))
        w.close()
        lines += w.lines
    write_manifest(root / MANIFEST, lines)


def _require(entries: dict[str, str], key: str) -> str:
    if key not in entries:
        raise ManifestError(f"manifest missing key {key!r}")
    return entries[key]


def load_dataset(path: str | Path) -> SequenceDataset:
    root = Path(path)
    manifest = root / MANIFEST if root.is_dir() else root
    entries = parse_manifest(manifest)
    root = manifest.parent
    if entries.get("format") != "MSEQ":
        raise ManifestError("not an MSEQ manifest")
    schema = Schema(
        mesh_inputs=tuple(_split(_require(entries, "schema.mesh_inputs"))),
        element_inputs=tuple(_split(_require(entries, "schema.element_inputs"))),
        mesh_targets=tuple(_split(_require(entries, "schema.mesh_targets"))),
        element_targets=tuple(_split(_require(entries, "schema.element_targets"))),
        history=int(_require(entries, "history")),
    )
    box = np.array([float(v) for v in _split(_require(entries, "domain_box"))]).reshape(2, 3)
    arrays = read_arrays(root, entries)
    sequences = []
    for i in range(int(_require(entries, "sequences"))):
        T = int(_require(entries, f"seq.{i}.frames"))
        node_counts = [int(v) for v in _split(_require(entries, f"seq.{i}.frame_node_counts"))]
        elem_counts = [int(v) for v in _split(_require(entries, f"seq.{i}.frame_element_counts"))]
        if len(node_counts) != T or len(elem_counts) != T:
            raise ManifestError(f"sequence {i}: per-frame counts do not match frame count")
        if len(set(node_counts)) != 1 or len(set(elem_counts)) != 1:
            raise TopologyError(f"sequence {i}: topology mismatch across frames")

        def arr(name: str) -> np.ndarray:
            key = f"{i}.{name}"
            if key not in arrays:
                raise ManifestError(f"manifest missing array {key!r}")
            return arrays[key]

        positions = arr("positions")
        if positions.shape != (T, node_counts[0], 3):
            raise TopologyError(f"sequence {i}: topology mismatch, positions shape {positions.shape}")
        node_fields = {n: arr(f"node_field.{n}") for n in _split(entries.get(f"seq.{i}.node_fields", ""))}
        elem_fields = {n: arr(f"element_field.{n}") for n in _split(entries.get(f"seq.{i}.element_fields", ""))}
        sequences.append(
            Sequence(
                positions=positions,
                node_type=arr("node_type"),
                elements=arr("elements"),
                mesh_edges=arr("mesh_edges"),
                boundary=BoundaryScript(arr("boundary_nodes"), arr("boundary_positions")),
                node_fields=node_fields,
                element_fields=elem_fields,
            )
        )
        if sequences[-1].n_elements != elem_counts[0]:
            raise TopologyError(f"sequence {i}: topology mismatch in element count")
    ds = SequenceDataset(sequences, schema, box)
    ds.validate()
    return ds
