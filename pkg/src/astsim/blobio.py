"""Manifest + binary blob storage shared by datasets and checkpoints.

A manifest is a UTF-8 text file of ``key: value`` lines. Arrays live in
companion blob files and are declared by lines of the form::

    array.<name>: file=<blob> dtype=f32 shape=2,4,3 offset=0 nbytes=96 crc32=1a2b3c4d

Blobs are little-endian and row-major.
"""

from __future__ import annotations

import zlib
from pathlib import Path

import numpy as np

DTYPES = {
    "f32": np.dtype("<f4"),
    "f64": np.dtype("<f8"),
    "i32": np.dtype("<i4"),
    "i64": np.dtype("<i8"),
    "u8": np.dtype("u1"),
}
_CODES = {v: k for k, v in DTYPES.items()}


class ManifestError(ValueError):
    pass


class ChecksumError(ManifestError):
    pass


def dtype_code(arr: np.ndarray) -> str:
    dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
    try:
        return _CODES[np.dtype(dt)]
    except KeyError:
        raise ManifestError(f"unsupported dtype {arr.dtype}") from None


class BlobWriter:
    """Accumulates arrays into one blob file and emits their manifest lines."""

    def __init__(self, path: Path):
        self.path = Path(path)
        self._chunks: list[bytes] = []
        self._offset = 0
        self.lines: list[str] = []

    def add(self, key: str, arr: np.ndarray) -> None:
        arr = np.asarray(arr)
        code = dtype_code(arr)
        raw = np.ascontiguousarray(arr, dtype=DTYPES[code]).tobytes(order="C")
        shape = ",".join(str(s) for s in arr.shape)
        crc = zlib.crc32(raw) & 0xFFFFFFFF
        self.lines.append(
            f"array.{key}: file={self.path.name} dtype={code} shape={shape} "
            f"offset={self._offset} nbytes={len(raw)} crc32={crc:08x}"
        )
        self._chunks.append(raw)
        self._offset += len(raw)

    def close(self) -> None:
        with open(self.path, "wb") as fh:
            for chunk in self._chunks:
                fh.write(chunk)

    @property
    def nbytes(self) -> int:
        return self._offset


def parse_manifest(path: Path) -> dict[str, str]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    entries: dict[str, str] = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        key, sep, value = line.partition(":")
        if not sep:
            raise ManifestError(f"{path}:{lineno}: expected 'key: value'")
        key = key.strip()
        if key in entries:
            raise ManifestError(f"{path}:{lineno}: duplicate key {key!r}")
        entries[key] = value.strip()
    return entries


def _parse_array_spec(spec: str) -> dict[str, str]:
    out = {}
    for token in spec.split():
        k, _, v = token.partition("=")
        out[k] = v
    return out


def read_array(root: Path, spec: str, cache: dict | None = None) -> np.ndarray:
    fields = _parse_array_spec(spec)
    try:
        dtype = DTYPES[fields["dtype"]]
        shape = tuple(int(s) for s in fields["shape"].split(",")) if fields["shape"] else ()
        offset, nbytes = int(fields["offset"]), int(fields["nbytes"])
        crc = int(fields["crc32"], 16)
        fname = fields["file"]
    except KeyError as exc:
        raise ManifestError(f"array spec missing field {exc}: {spec!r}") from None
    blob_path = Path(root) / fname
    if cache is not None and fname in cache:
        data = cache[fname]
    else:
        if not blob_path.exists():
            raise FileNotFoundError(f"blob not found: {blob_path}")
        data = blob_path.read_bytes()
        if cache is not None:
            cache[fname] = data
    raw = data[offset : offset + nbytes]
    if len(raw) != nbytes:
        raise ManifestError(f"blob {fname} truncated at offset {offset}")
    if zlib.crc32(raw) & 0xFFFFFFFF != crc:
        raise ChecksumError(f"checksum mismatch in {fname} at offset {offset}")
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if expected != nbytes:
        raise ManifestError(f"shape {shape} does not match nbytes {nbytes}")
    return np.frombuffer(raw, dtype=dtype).reshape(shape).copy()


def read_arrays(root: Path, entries: dict[str, str]) -> dict[str, np.ndarray]:
    """Read every ``array.*`` entry, keyed by the name after ``array.``."""
    cache: dict[str, bytes] = {}
    return {
        key[len("array.") :]: read_array(root, spec, cache)
        for key, spec in entries.items()
        if key.startswith("array.")
    }


def write_manifest(path: Path, lines: list[str]) -> None:
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
