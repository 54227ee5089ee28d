"""Procedural toy shapes used as a desk-scale stand-in for ShapeNet.

A *class* is a primitive kind plus a range for each of its shape parameters;
an *object* is one parameter set drawn from those ranges.

Per-kind parameters (lengths are pre-normalization model units, all meshes
end up normalized to the unit bounding sphere):

========  =====================================================================
kind      parameters
========  =====================================================================
box       sx, sy, sz in [0.05, 10]
cylinder  radius, height in [0.05, 10]; segments in [3, 64]
cone      radius, height in [0.05, 10]; segments in [3, 64]
torus     major in [0.05, 10]; minor in [0.01, major]; segments_major in
          [3, 64]; segments_minor in [3, 32]
lshape    arm_a, arm_b in [0.2, 10]; thickness in [0.05, min(arm_a, arm_b)];
          depth in [0.05, 10]
compound  n_parts in [2, 4]; parts: subset of the five kinds above;
          spread in [0, 2]
========  =====================================================================

Every kind also accepts ``jitter`` in [0, 0.3] (per-vertex noise as a fraction
of the shape size, driven by the seed) and ``yaw``/``pitch`` in degrees.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from invarlab.errors import ConfigError
from invarlab.stimuli3d.mesh import Mesh, merge_meshes, normalize_mesh

KINDS = ("box", "cylinder", "cone", "torus", "lshape", "compound")
_SIMPLE = ("box", "cylinder", "cone", "torus", "lshape")

_RANGES: dict[str, dict[str, tuple[float, float]]] = {
    "box": {"sx": (0.05, 10), "sy": (0.05, 10), "sz": (0.05, 10)},
    "cylinder": {"radius": (0.05, 10), "height": (0.05, 10), "segments": (3, 64)},
    "cone": {"radius": (0.05, 10), "height": (0.05, 10), "segments": (3, 64)},
    "torus": {
        "major": (0.05, 10),
        "minor": (0.01, 10),
        "segments_major": (3, 64),
        "segments_minor": (3, 32),
    },
    "lshape": {"arm_a": (0.2, 10), "arm_b": (0.2, 10), "thickness": (0.05, 10), "depth": (0.05, 10)},
    "compound": {"n_parts": (2, 4), "spread": (0.0, 2.0)},
}
_DEFAULTS: dict[str, dict[str, Any]] = {
    "box": {"sx": 1.0, "sy": 1.0, "sz": 1.0},
    "cylinder": {"radius": 0.5, "height": 1.0, "segments": 24},
    "cone": {"radius": 0.5, "height": 1.0, "segments": 24},
    "torus": {"major": 1.0, "minor": 0.3, "segments_major": 24, "segments_minor": 12},
    "lshape": {"arm_a": 1.0, "arm_b": 1.0, "thickness": 0.3, "depth": 0.3},
    "compound": {"n_parts": None, "parts": list(_SIMPLE), "spread": 0.8},
}
_COMMON = {"jitter": (0.0, 0.3), "yaw": (-360.0, 360.0), "pitch": (-360.0, 360.0)}
_INTEGER = {"segments", "segments_major", "segments_minor", "n_parts"}


def _check_params(kind: str, params: dict[str, Any]) -> dict[str, Any]:
    if kind not in KINDS:
        raise ConfigError(f"unknown primitive kind {kind!r}; expected one of {KINDS}")
    full = {**_DEFAULTS[kind], "jitter": 0.0, "yaw": 0.0, "pitch": 0.0, **params}
    ranges = {**_RANGES[kind], **_COMMON}
    for name, value in full.items():
        if name == "parts":
            if not value or any(p not in _SIMPLE for p in value):
                raise ConfigError(f"compound parts must be drawn from {_SIMPLE}, got {value}")
            continue
        if name not in ranges:
            raise ConfigError(f"unknown parameter {name!r} for {kind}")
        if value is None:
            continue
        lo, hi = ranges[name]
        if not lo <= value <= hi:
            raise ConfigError(f"{kind}.{name}={value} outside [{lo}, {hi}]")
        if name in _INTEGER and int(value) != value:
            raise ConfigError(f"{kind}.{name} must be an integer")
    if kind == "torus" and full["minor"] > full["major"]:
        raise ConfigError("torus minor radius exceeds major radius")
    if kind == "lshape" and full["thickness"] > min(full["arm_a"], full["arm_b"]):
        raise ConfigError("lshape thickness exceeds arm length")
    return full


def _box(sx, sy, sz):
    x, y, z = sx / 2, sy / 2, sz / 2
    v = np.array(
        [[-x, -y, -z], [x, -y, -z], [x, y, -z], [-x, y, -z], [-x, -y, z], [x, -y, z], [x, y, z], [-x, y, z]]
    )
    f = np.array(
        [
            [0, 2, 1], [0, 3, 2],  # bottom
            [4, 5, 6], [4, 6, 7],  # top
            [0, 1, 5], [0, 5, 4],
            [1, 2, 6], [1, 6, 5],
            [2, 3, 7], [2, 7, 6],
            [3, 0, 4], [3, 4, 7],
        ]
    )
    return v, f


def _lathe(profile: np.ndarray, segments: int):
    """Revolve an (r, z) polyline around the z axis; zero-radius points become poles."""
    theta = np.linspace(0.0, 2 * np.pi, segments, endpoint=False)
    verts, rings = [], []
    for r, z in profile:
        if r == 0:
            rings.append([len(verts)])
            verts.append([0.0, 0.0, z])
        else:
            start = len(verts)
            verts.extend(np.stack([r * np.cos(theta), r * np.sin(theta), np.full(segments, z)], 1))
            rings.append(list(range(start, start + segments)))
    faces = []
    for a, b in zip(rings[:-1], rings[1:]):
        for k in range(segments):
            k2 = (k + 1) % segments
            if len(a) == 1 and len(b) == 1:
                continue
            if len(a) == 1:
                faces.append([a[0], b[k], b[k2]])
            elif len(b) == 1:
                faces.append([a[k], b[0], a[k2]])
            else:
                faces.append([a[k], b[k], b[k2]])
                faces.append([a[k], b[k2], a[k2]])
    return np.array(verts), np.array(faces)


def _cylinder(radius, height, segments):
    h = height / 2
    return _lathe(np.array([[0, -h], [radius, -h], [radius, h], [0, h]]), int(segments))


def _cone(radius, height, segments):
    h = height / 2
    return _lathe(np.array([[0, -h], [radius, -h], [0, h]]), int(segments))


def _torus(major, minor, segments_major, segments_minor):
    u = np.linspace(0, 2 * np.pi, int(segments_major), endpoint=False)
    w = np.linspace(0, 2 * np.pi, int(segments_minor), endpoint=False)
    uu, ww = np.meshgrid(u, w, indexing="ij")
    r = major + minor * np.cos(ww)
    v = np.stack([r * np.cos(uu), r * np.sin(uu), minor * np.sin(ww)], -1).reshape(-1, 3)
    nm, nn = int(segments_major), int(segments_minor)
    faces = []
    for i in range(nm):
        for j in range(nn):
            a = i * nn + j
            b = ((i + 1) % nm) * nn + j
            c = ((i + 1) % nm) * nn + (j + 1) % nn
            d = i * nn + (j + 1) % nn
            faces.append([a, b, c])
            faces.append([a, c, d])
    return v, np.array(faces)


def _lshape(arm_a, arm_b, thickness, depth):
    v1, f1 = _box(arm_a, depth, thickness)
    v1 = v1 + [arm_a / 2, 0, thickness / 2]
    v2, f2 = _box(thickness, depth, arm_b)
    v2 = v2 + [thickness / 2, 0, arm_b / 2]
    return np.concatenate([v1, v2]), np.concatenate([f1, f2 + len(v1)])


def _rotation(yaw_deg: float, pitch_deg: float) -> np.ndarray:
    a, b = np.deg2rad(yaw_deg), np.deg2rad(pitch_deg)
    rz = np.array([[np.cos(a), -np.sin(a), 0], [np.sin(a), np.cos(a), 0], [0, 0, 1]])
    rx = np.array([[1, 0, 0], [0, np.cos(b), -np.sin(b)], [0, np.sin(b), np.cos(b)]])
    return rz @ rx


def _random_simple_params(kind: str, rng: np.random.Generator) -> dict[str, Any]:
    u = rng.uniform
    if kind == "box":
        return {"sx": u(0.3, 1.5), "sy": u(0.3, 1.5), "sz": u(0.3, 1.5)}
    if kind == "cylinder":
        return {"radius": u(0.2, 0.7), "height": u(0.4, 1.6), "segments": int(rng.integers(6, 25))}
    if kind == "cone":
        return {"radius": u(0.2, 0.8), "height": u(0.4, 1.6), "segments": int(rng.integers(4, 25))}
    if kind == "torus":
        major = u(0.4, 1.0)
        return {"major": major, "minor": u(0.1, 0.5) * major, "segments_major": 16, "segments_minor": 8}
    arm_a, arm_b = u(0.5, 1.5), u(0.5, 1.5)
    return {"arm_a": arm_a, "arm_b": arm_b, "thickness": u(0.15, 0.45) * min(arm_a, arm_b), "depth": u(0.2, 0.8)}


def _geometry(kind: str, p: dict[str, Any], rng: np.random.Generator):
    if kind == "box":
        return _box(p["sx"], p["sy"], p["sz"])
    if kind == "cylinder":
        return _cylinder(p["radius"], p["height"], p["segments"])
    if kind == "cone":
        return _cone(p["radius"], p["height"], p["segments"])
    if kind == "torus":
        return _torus(p["major"], p["minor"], p["segments_major"], p["segments_minor"])
    if kind == "lshape":
        return _lshape(p["arm_a"], p["arm_b"], p["thickness"], p["depth"])
    n_parts = p["n_parts"] if p["n_parts"] is not None else int(rng.integers(2, 5))
    parts = []
    for _ in range(int(n_parts)):
        sub = str(rng.choice(p["parts"]))
        v, f = _geometry(sub, _random_simple_params(sub, rng), rng)
        v = v @ _rotation(rng.uniform(0, 360), rng.uniform(0, 360)).T
        v = v + rng.uniform(-1, 1, size=3) * p["spread"]
        parts.append(Mesh(v, f))
    return merge_meshes(parts)


def make_primitive(
    kind: str,
    shape_params: dict[str, Any] | None = None,
    seed: int = 0,
    object_id: str | None = None,
    class_id: str = "",
) -> Mesh:
    """Build a normalized primitive mesh; identical arguments give identical vertices."""
    params = _check_params(kind, dict(shape_params or {}))
    rng = np.random.default_rng(seed)
    v, f = _geometry(kind, params, rng)
    v = np.asarray(v, dtype=np.float64)
    if params["jitter"] > 0:
        size = np.ptp(v, axis=0).max()
        v = v + rng.normal(scale=params["jitter"] * size / 3, size=v.shape)
    if params["yaw"] or params["pitch"]:
        v = v @ _rotation(params["yaw"], params["pitch"]).T
    source = {"primitive": kind, "params": dict(shape_params or {}), "seed": int(seed)}
    mesh = Mesh(v, f, object_id=object_id or _recipe_id(source), class_id=class_id, source=source)
    return normalize_mesh(mesh)


def _recipe_id(source: dict[str, Any]) -> str:
    blob = json.dumps(source, sort_keys=True).encode()
    return f"{source['primitive']}-{hashlib.sha1(blob).hexdigest()[:10]}"


@dataclass(frozen=True)
class ShapeClass:
    """A primitive kind plus per-parameter ranges; one draw is one object.

    Range values are either a fixed value or a ``[lo, hi]`` pair sampled
    uniformly (integers for integer parameters).
    """

    name: str
    kind: str
    param_ranges: dict[str, Any] = field(default_factory=dict)
    jitter: float = 0.03
    random_yaw: bool = True

    def sample_params(self, rng: np.random.Generator) -> dict[str, Any]:
        params: dict[str, Any] = {}
        for name, spec in self.param_ranges.items():
            if isinstance(spec, (list, tuple)) and len(spec) == 2 and name != "parts":
                lo, hi = spec
                if name in _INTEGER:
                    params[name] = int(rng.integers(int(lo), int(hi) + 1))
                else:
                    params[name] = float(rng.uniform(lo, hi))
            else:
                params[name] = spec
        if self.kind == "torus":
            params["minor"] = min(params.get("minor", 0.3), params.get("major", 1.0))
        if self.kind == "lshape":
            params["thickness"] = min(
                params.get("thickness", 0.3), params.get("arm_a", 1.0), params.get("arm_b", 1.0)
            )
        params["jitter"] = self.jitter
        if self.random_yaw:
            params["yaw"] = float(rng.uniform(0, 360))
        return params

    def make_objects(self, n: int, seed: int = 0) -> list[Mesh]:
        """Draw ``n`` objects; object ``i`` depends only on (class name, seed, i)."""
        out = []
        for i in range(n):
            key = int.from_bytes(hashlib.sha1(f"{self.name}:{seed}:{i}".encode()).digest()[:4], "little")
            rng = np.random.default_rng(key)
            params = self.sample_params(rng)
            out.append(
                make_primitive(
                    self.kind,
                    params,
                    seed=key,
                    object_id=f"{self.name}-s{seed}-{i:03d}",
                    class_id=self.name,
                )
            )
        return out


# 20 procedural classes: the first ten are the default training classes,
# the remaining ten are held out as novel classes.
PROCEDURAL_CLASSES: dict[str, ShapeClass] = {
    c.name: c
    for c in [
        ShapeClass("cube", "box", {"sx": [0.8, 1.2], "sy": [0.8, 1.2], "sz": [0.8, 1.2]}),
        ShapeClass("slab", "box", {"sx": [1.5, 2.5], "sy": [1.0, 2.0], "sz": [0.15, 0.4]}),
        ShapeClass("pillar", "cylinder", {"radius": [0.2, 0.35], "height": [1.6, 2.4], "segments": [12, 24]}),
        ShapeClass("disc", "cylinder", {"radius": [0.8, 1.2], "height": [0.1, 0.3], "segments": [16, 32]}),
        ShapeClass("spike", "cone", {"radius": [0.2, 0.4], "height": [1.5, 2.5], "segments": [12, 24]}),
        ShapeClass("ring", "torus", {"major": [0.9, 1.1], "minor": [0.08, 0.18],
                                     "segments_major": 24, "segments_minor": 8}),
        ShapeClass("elbow", "lshape", {"arm_a": [1.0, 1.6], "arm_b": [1.0, 1.6], "thickness": [0.3, 0.5],
                                       "depth": [0.3, 0.6]}),
        ShapeClass("blocks", "compound", {"parts": ["box"], "n_parts": [2, 4], "spread": [0.4, 0.8]}),
        ShapeClass("pyramid", "cone", {"radius": [0.7, 1.0], "height": [0.8, 1.3], "segments": 4}),
        ShapeClass("tube_cluster", "compound", {"parts": ["cylinder"], "n_parts": [2, 3], "spread": [0.3, 0.7]}),
        ShapeClass("beam", "box", {"sx": [2.0, 3.0], "sy": [0.3, 0.5], "sz": [0.3, 0.5]}),
        ShapeClass("drum", "cylinder", {"radius": [0.6, 0.8], "height": [0.9, 1.3], "segments": [6, 10]}),
        ShapeClass("tent", "cone", {"radius": [1.0, 1.4], "height": [0.4, 0.7], "segments": [3, 6]}),
        ShapeClass("donut", "torus", {"major": [0.7, 0.9], "minor": [0.3, 0.45],
                                      "segments_major": 20, "segments_minor": 10}),
        ShapeClass("bracket", "lshape", {"arm_a": [1.8, 2.4], "arm_b": [0.6, 1.0], "thickness": [0.1, 0.2],
                                         "depth": [0.8, 1.2]}),
        ShapeClass("rubble", "compound", {"parts": ["box", "cone"], "n_parts": [3, 4], "spread": [0.6, 1.0]}),
        ShapeClass("rods", "compound", {"parts": ["cylinder", "box"], "n_parts": 2, "spread": [0.2, 0.5]}),
        ShapeClass("lamp", "compound", {"parts": ["cone", "cylinder"], "n_parts": 2, "spread": [0.1, 0.3]}),
        ShapeClass("chain", "compound", {"parts": ["torus"], "n_parts": [2, 3], "spread": [0.5, 0.8]}),
        ShapeClass("crate", "box", {"sx": [1.0, 1.4], "sy": [0.6, 0.9], "sz": [0.5, 0.8]}),
    ]
}
DEFAULT_TRAIN_CLASSES = list(PROCEDURAL_CLASSES)[:10]
DEFAULT_NOVEL_CLASSES = list(PROCEDURAL_CLASSES)[10:]


def make_class_objects(class_names: list[str], n_per_class: int, seed: int = 0) -> list[Mesh]:
    missing = [c for c in class_names if c not in PROCEDURAL_CLASSES]
    if missing:
        raise ConfigError(f"unknown procedural classes: {missing}")
    return [m for c in class_names for m in PROCEDURAL_CLASSES[c].make_objects(n_per_class, seed)]
