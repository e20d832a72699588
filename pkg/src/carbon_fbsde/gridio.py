"""Binary persistence for solved grids, plus canonical hashing helpers.

The container is deliberately dumb: an 8-byte magic, a little-endian
uint64 header length, a canonical-JSON header describing the axes and
metadata, then the raw float64 payload in C order.  Writing the same
grid twice produces byte-identical files, which the artifact checks
rely on.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .errors import ArtifactError
from .pde_kernel import ValueGrid

__all__ = [
    "write_grid",
    "read_grid",
    "file_sha256",
    "canonical_json",
    "sha256_hex",
    "jsonable",
    "start_slice_csv",
]

_MAGIC = b"CFBGRID1"


def jsonable(obj):
    """Recursively convert numpy scalars/arrays so json.dumps accepts them."""
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def canonical_json(obj) -> str:
    """Deterministic JSON: sorted keys, no whitespace variance."""
    return json.dumps(jsonable(obj), sort_keys=True, separators=(",", ":"),
                      ensure_ascii=True)


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def file_sha256(path: Union[str, Path]) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_grid(grid: ValueGrid, path: Union[str, Path]) -> str:
    """Serialise a grid; returns the sha256 of the written file."""
    header = {
        "times": grid.times.tolist(),
        "e_nodes": grid.e_nodes.tolist(),
        "p_nodes": None if grid.p_nodes is None else grid.p_nodes.tolist(),
        "eparam_nodes": (None if grid.eparam_nodes is None
                         else grid.eparam_nodes.tolist()),
        "rate": float(grid.rate),
        "shape": list(grid.values.shape),
        "meta": jsonable(grid.meta),
    }
    head = canonical_json(header).encode("utf-8")
    payload = np.ascontiguousarray(grid.values, dtype="<f8").tobytes()
    blob = _MAGIC + struct.pack("<Q", len(head)) + head + payload
    Path(path).write_bytes(blob)
    return sha256_hex(blob)


def read_grid(path: Union[str, Path]) -> ValueGrid:
    blob = Path(path).read_bytes()
    if blob[:8] != _MAGIC:
        raise ArtifactError(f"{path}: not a grid file (bad magic)")
    (head_len,) = struct.unpack("<Q", blob[8:16])
    try:
        header = json.loads(blob[16:16 + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ArtifactError(f"{path}: corrupt grid header") from exc
    shape = tuple(header["shape"])
    payload = blob[16 + head_len:]
    expect = int(np.prod(shape)) * 8
    if len(payload) != expect:
        raise ArtifactError(
            f"{path}: payload is {len(payload)} bytes, expected {expect}"
        )
    values = np.frombuffer(payload, dtype="<f8").reshape(shape).copy()
    opt = lambda key: (None if header[key] is None
                       else np.asarray(header[key], dtype=float))
    return ValueGrid(
        times=np.asarray(header["times"], dtype=float),
        e_nodes=np.asarray(header["e_nodes"], dtype=float),
        values=values,
        rate=float(header["rate"]),
        p_nodes=opt("p_nodes"),
        eparam_nodes=opt("eparam_nodes"),
        meta=header.get("meta", {}),
    )


def start_slice_csv(grid: ValueGrid, path: Union[str, Path],
                    eparam: Optional[float] = None) -> None:
    """Write the start-of-period slice as CSV, one row per grid node.

    A grid with a recorded-emissions axis is either dumped in full or,
    when ``eparam`` is given, restricted to the nearest stored slice.
    """
    S = grid.values[0]
    cols = []
    names = []
    if grid.has_p:
        names.append("p")
    names.append("e")
    take_ep = grid.has_eparam and eparam is None
    if take_ep:
        names.append("eparam")
    if grid.has_eparam and eparam is not None:
        k = int(np.argmin(np.abs(grid.eparam_nodes - eparam)))
        S = S[..., k]

    axes = []
    if grid.has_p:
        axes.append(grid.p_nodes)
    axes.append(grid.e_nodes)
    if take_ep:
        axes.append(grid.eparam_nodes)
    mesh = np.meshgrid(*axes, indexing="ij")
    cols = [m.ravel() for m in mesh] + [S.ravel()]
    names.append("value")
    data = np.column_stack(cols)
    np.savetxt(path, data, fmt="%.17g", delimiter=",",
               header=",".join(names), comments="")
