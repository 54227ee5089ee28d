"""Triangle meshes and wavefront ``.obj`` loading."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from invarlab.errors import FormatError, IoError


@dataclass
class Mesh:
    """Triangle mesh in model space.

    ``source`` is a JSON-serializable recipe that regenerates the mesh
    (a primitive spec or an ``.obj`` path); manifests store it so images can
    be re-rendered from scratch.
    """

    vertices: np.ndarray
    faces: np.ndarray
    object_id: str = ""
    class_id: str = ""
    source: dict[str, Any] | None = None
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def radius(self) -> float:
        if len(self.vertices) == 0:
            return 0.0
        return float(np.linalg.norm(self.vertices, axis=1).max())

    def validate(self) -> None:
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise FormatError("face index out of range")
        f = self.faces
        if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
            raise FormatError("face with repeated vertex index")


def drop_degenerate(vertices: np.ndarray, faces: np.ndarray, eps: float = 1e-12):
    """Remove faces with repeated indices or zero area.

    Returns the kept faces and the number dropped.
    """
    if len(faces) == 0:
        return faces, 0
    repeated = (faces[:, 0] == faces[:, 1]) | (faces[:, 1] == faces[:, 2]) | (faces[:, 0] == faces[:, 2])
    v0, v1, v2 = (vertices[faces[:, k]] for k in range(3))
    area2 = np.linalg.norm(np.cross(v1 - v0, v2 - v0), axis=1)
    scale = max(float(np.abs(vertices).max()), 1e-300) ** 2
    keep = ~repeated & (area2 > eps * scale)
    return faces[keep], int((~keep).sum())


def normalize_mesh(mesh: Mesh) -> Mesh:
    """Center on the bounding-box midpoint and scale the farthest vertex to radius 1."""
    v = mesh.vertices
    if len(v) == 0:
        return mesh
    center = 0.5 * (v.min(axis=0) + v.max(axis=0))
    v = v - center
    r = np.linalg.norm(v, axis=1).max()
    if r > 0:
        v = v / r
        # guard against the last ulp pushing a vertex outside the sphere
        r2 = np.linalg.norm(v, axis=1).max()
        if r2 > 1.0:
            v = v / r2
    faces, dropped = drop_degenerate(v, mesh.faces)
    meta = dict(mesh.meta)
    meta["degenerate_faces_dropped"] = meta.get("degenerate_faces_dropped", 0) + dropped
    return Mesh(v, faces, mesh.object_id, mesh.class_id, mesh.source, meta)


_UP_AXIS_ROTATIONS = {
    "z": np.eye(3),
    # y-up (ShapeNet convention) -> z-up
    "y": np.array([[1.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]]),
}


def load_obj(
    path: str | os.PathLike,
    object_id: str | None = None,
    class_id: str = "",
    up_axis: str = "z",
) -> Mesh:
    """Read ``v``/``f`` records from a wavefront file.

    Polygons are fan-triangulated, indices are 1-based (negative indices count
    back from the most recent vertex) and the result is normalized to the unit
    bounding sphere.
    """
    path = Path(path)
    if not path.is_file():
        raise IoError(f"no such obj file: {path}")
    if up_axis not in _UP_AXIS_ROTATIONS:
        raise FormatError(f"unsupported up axis {up_axis!r}")

    vertices: list[list[float]] = []
    faces: list[tuple[int, int, int]] = []
    with open(path, encoding="utf-8", errors="replace") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            tag = parts[0]
            if tag == "v":
                try:
                    vertices.append([float(x) for x in parts[1:4]])
                except ValueError as exc:
                    raise FormatError(f"bad vertex: {exc}", lineno) from None
                if len(vertices[-1]) != 3:
                    raise FormatError("vertex needs 3 coordinates", lineno)
            elif tag == "f":
                idx = []
                for tok in parts[1:]:
                    head = tok.split("/")[0]
                    try:
                        i = int(head)
                    except ValueError:
                        raise FormatError(f"bad face index {tok!r}", lineno) from None
                    if i > 0:
                        i -= 1
                    elif i < 0:
                        i = len(vertices) + i
                    else:
                        raise FormatError("face index 0 under 1-based indexing", lineno)
                    if not 0 <= i < len(vertices):
                        raise FormatError(f"face references nonexistent vertex {tok}", lineno)
                    idx.append(i)
                if len(idx) < 3:
                    raise FormatError("face needs at least 3 vertices", lineno)
                for k in range(1, len(idx) - 1):
                    faces.append((idx[0], idx[k], idx[k + 1]))

    v = np.array(vertices, dtype=np.float64).reshape(-1, 3) @ _UP_AXIS_ROTATIONS[up_axis].T
    f = np.array(faces, dtype=np.int64).reshape(-1, 3)
    mesh = Mesh(
        v,
        f,
        object_id=object_id or path.stem,
        class_id=class_id,
        source={"obj": str(path), "up_axis": up_axis},
    )
    return normalize_mesh(mesh)


def merge_meshes(meshes: list[Mesh]) -> tuple[np.ndarray, np.ndarray]:
    verts, faces, offset = [], [], 0
    for m in meshes:
        verts.append(m.vertices)
        faces.append(m.faces + offset)
        offset += len(m.vertices)
    return np.concatenate(verts), np.concatenate(faces)
