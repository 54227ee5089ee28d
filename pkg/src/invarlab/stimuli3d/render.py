"""Cameras on a viewing sphere and a z-buffered flat-shading rasterizer."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from invarlab.errors import ConfigError, EmptyGeometryError
from invarlab.stimuli3d.mesh import Mesh

IMAGE_SIZE = 128
DEFAULT_DISTANCE = 5.0
DEFAULT_FOV = 45.0


@dataclass(frozen=True)
class Camera:
    """Camera on a sphere around the origin, always looking at the origin.

    Inclination is the polar angle from +z in degrees; azimuth is measured
    from +x towards +y and is stored modulo 360.
    """

    inclination: float
    azimuth: float
    distance: float = DEFAULT_DISTANCE
    vertical_fov: float = DEFAULT_FOV

    def __post_init__(self):
        object.__setattr__(self, "inclination", float(self.inclination))
        object.__setattr__(self, "azimuth", float(self.azimuth) % 360.0)
        if self.distance <= 1.0:
            raise ConfigError(f"camera distance must exceed 1, got {self.distance}")

    @property
    def position(self) -> np.ndarray:
        i, a = math.radians(self.inclination), math.radians(self.azimuth)
        return self.distance * np.array([math.sin(i) * math.cos(a), math.sin(i) * math.sin(a), math.cos(i)])

    def basis(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(right, up, forward) unit vectors of the camera frame in world space."""
        eye = self.position
        forward = -eye / np.linalg.norm(eye)
        world_up = np.array([0.0, 0.0, 1.0])
        right = np.cross(forward, world_up)
        if np.linalg.norm(right) < 1e-9:
            right = np.array([0.0, 1.0, 0.0])
        right /= np.linalg.norm(right)
        up = np.cross(right, forward)
        return right, up, forward

    def to_dict(self) -> dict:
        return {"inclination": self.inclination, "azimuth": self.azimuth}

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(d["inclination"], d["azimuth"], d.get("distance", DEFAULT_DISTANCE),
                   d.get("vertical_fov", DEFAULT_FOV))


@dataclass(frozen=True)
class Light:
    """Directional light fixed in the camera frame.

    ``direction`` points from the scene towards the light in (right, up,
    towards-camera) coordinates; ``ambient`` is the shading floor.
    """

    direction: tuple[float, float, float] = (-0.5, 0.7, 0.6)
    ambient: float = 0.15


DEFAULT_LIGHT = Light()


def _frange(lo: float, hi: float, step: float, inclusive: bool) -> list[float]:
    span = hi - lo
    n = span / step
    if abs(n - round(n)) > 1e-9:
        raise ConfigError(f"step {step} does not divide range [{lo}, {hi}]")
    n = int(round(n))
    count = n + 1 if inclusive else n
    return [lo + k * step for k in range(count)]


def camera_grid(
    incl_min: float = 30,
    incl_max: float = 110,
    incl_step: float = 10,
    azim_step: float = 36,
    distance: float = DEFAULT_DISTANCE,
    vertical_fov: float = DEFAULT_FOV,
) -> list[Camera]:
    """Cameras in inclination-outer, azimuth-inner order.

    Inclination endpoints are inclusive; azimuth covers [0, 360).
    """
    if incl_step <= 0 or azim_step <= 0:
        raise ConfigError("grid steps must be positive")
    if incl_max < incl_min:
        raise ConfigError("incl_max < incl_min")
    incls = _frange(incl_min, incl_max, incl_step, inclusive=True)
    azims = _frange(0.0, 360.0, azim_step, inclusive=False)
    return [Camera(i, a, distance, vertical_fov) for i in incls for a in azims]


def project(vertices: np.ndarray, camera: Camera, size: int = IMAGE_SIZE):
    """Project world points to continuous pixel coordinates.

    Returns (x, y, depth); pixel (col, row) has its center at (col + 0.5, row + 0.5)
    and the origin projects to (size/2, size/2).
    """
    right, up, forward = camera.basis()
    rel = vertices - camera.position
    xc, yc, zc = rel @ right, rel @ up, rel @ forward
    f = (size / 2) / math.tan(math.radians(camera.vertical_fov) / 2)
    return size / 2 + f * xc / zc, size / 2 - f * yc / zc, zc


def _face_intensity(mesh: Mesh, camera: Camera, light: Light) -> np.ndarray:
    right, up, forward = camera.basis()
    v = mesh.vertices
    f = mesh.faces
    n = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
    n /= np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-300)
    d = np.asarray(light.direction, dtype=np.float64)
    d = d / np.linalg.norm(d)
    world_dir = d[0] * right + d[1] * up - d[2] * forward
    # two-sided: winding of imported meshes is not trusted
    lambert = np.abs(n @ world_dir)
    return light.ambient + (1.0 - light.ambient) * lambert


def rasterize(
    x: np.ndarray,
    y: np.ndarray,
    depth: np.ndarray,
    faces: np.ndarray,
    size: int = IMAGE_SIZE,
    chunk: int = 2_000_000,
) -> np.ndarray:
    """Return per-pixel index of the nearest covering face, -1 where uncovered.

    Coverage is tested at pixel centers; depth is interpolated linearly in
    screen space. Depth ties go to the lower face index.
    """
    xs, ys, zs = x[faces], y[faces], depth[faces]
    area = (xs[:, 1] - xs[:, 0]) * (ys[:, 2] - ys[:, 0]) - (xs[:, 2] - xs[:, 0]) * (ys[:, 1] - ys[:, 0])
    c0 = np.clip(np.ceil(xs.min(1) - 0.5), 0, size).astype(np.int64)
    c1 = np.clip(np.floor(xs.max(1) - 0.5), -1, size - 1).astype(np.int64)
    r0 = np.clip(np.ceil(ys.min(1) - 0.5), 0, size).astype(np.int64)
    r1 = np.clip(np.floor(ys.max(1) - 0.5), -1, size - 1).astype(np.int64)
    w = np.maximum(c1 - c0 + 1, 0)
    h = np.maximum(r1 - r0 + 1, 0)
    n = w * h
    valid = (n > 0) & (np.abs(area) > 1e-12) & (zs.min(1) > 0)
    tri_ids = np.flatnonzero(valid)

    zbuf = np.full(size * size, np.inf)
    fbuf = np.full(size * size, -1, dtype=np.int64)
    start = 0
    while start < len(tri_ids):
        # group triangles so each chunk stays under `chunk` candidate pixels
        counts = np.cumsum(n[tri_ids[start:]])
        stop = start + max(1, int(np.searchsorted(counts, chunk, side="right")))
        ids = tri_ids[start:stop]
        start = stop

        cnt = n[ids]
        t = np.repeat(ids, cnt)
        offs = np.arange(cnt.sum()) - np.repeat(np.cumsum(cnt) - cnt, cnt)
        wt = w[t]
        col = c0[t] + offs % wt
        row = r0[t] + offs // wt
        px, py = col + 0.5, row + 0.5

        tx, ty = xs[t], ys[t]
        # barycentric weights from signed sub-triangle areas
        l0 = (tx[:, 1] - px) * (ty[:, 2] - py) - (tx[:, 2] - px) * (ty[:, 1] - py)
        l1 = (tx[:, 2] - px) * (ty[:, 0] - py) - (tx[:, 0] - px) * (ty[:, 2] - py)
        l2 = (tx[:, 0] - px) * (ty[:, 1] - py) - (tx[:, 1] - px) * (ty[:, 0] - py)
        a = area[t]
        l0, l1, l2 = l0 / a, l1 / a, l2 / a
        inside = (l0 >= 0) & (l1 >= 0) & (l2 >= 0)
        if not inside.any():
            continue
        tz = zs[t[inside]]
        z = l0[inside] * tz[:, 0] + l1[inside] * tz[:, 1] + l2[inside] * tz[:, 2]
        pix = row[inside] * size + col[inside]
        tt = t[inside]

        # merge with the running buffer: nearest depth wins, then lowest face id
        pix = np.concatenate([pix, np.flatnonzero(fbuf >= 0)])
        z = np.concatenate([z, zbuf[fbuf >= 0]])
        tt = np.concatenate([tt, fbuf[fbuf >= 0]])
        order = np.lexsort((tt, z, pix))
        pix, z, tt = pix[order], z[order], tt[order]
        first = np.ones(len(pix), dtype=bool)
        first[1:] = pix[1:] != pix[:-1]
        zbuf[pix[first]] = z[first]
        fbuf[pix[first]] = tt[first]
    return fbuf.reshape(size, size)


def render(mesh: Mesh, camera: Camera, light: Light = DEFAULT_LIGHT, size: int = IMAGE_SIZE) -> np.ndarray:
    """Render a textureless, flat-shaded gray image on a black background.

    Returns a ``(size, size, 3)`` uint8 array.
    """
    if len(mesh.vertices) == 0 or len(mesh.faces) == 0:
        raise EmptyGeometryError(f"mesh {mesh.object_id!r} has no faces")
    half_fov = math.radians(camera.vertical_fov) / 2
    if math.asin(min(1.0, 1.0 / camera.distance)) >= half_fov:
        raise ConfigError("camera too close: unit sphere does not fit in the view frustum")
    x, y, z = project(mesh.vertices, camera, size)
    face_of_pixel = rasterize(x, y, z, mesh.faces, size)
    shade = np.rint(255.0 * _face_intensity(mesh, camera, light)).astype(np.uint8)
    out = np.zeros((size, size), dtype=np.uint8)
    hit = face_of_pixel >= 0
    out[hit] = shade[face_of_pixel[hit]]
    return np.repeat(out[:, :, None], 3, axis=2)


def view_filename(camera: Camera) -> str:
    return f"incl{int(round(camera.inclination)):03d}_azim{int(round(camera.azimuth)):03d}.png"


def save_views(mesh: Mesh, cameras: list[Camera], out_dir: str | os.PathLike,
               light: Light = DEFAULT_LIGHT) -> list[Path]:
    """Render every camera to ``<out_dir>/<object_id>/incl<ddd>_azim<ddd>.png``."""
    from PIL import Image as PILImage

    folder = Path(out_dir) / mesh.object_id
    folder.mkdir(parents=True, exist_ok=True)
    paths = []
    for cam in cameras:
        p = folder / view_filename(cam)
        PILImage.fromarray(render(mesh, cam, light)).save(p)
        paths.append(p)
    return paths
