"""Sample manifests, image materialization, batch drawing and normalization."""

from __future__ import annotations

import json
import os
import re
from collections import defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from invarlab.errors import ConfigError, InsufficientSamplesError, IoError
from invarlab.stimuli3d.mesh import Mesh, load_obj
from invarlab.stimuli3d.primitives import make_primitive
from invarlab.stimuli3d.render import IMAGE_SIZE, Camera, Light, DEFAULT_LIGHT, render, view_filename
from invarlab.transforms import (
    NO_TRANSFORM,
    Footprint,
    TransformInstance,
    TransformKind,
    TransformRanges,
    apply_2d,
    as_kind,
    center_foreground,
    fixed_pose_camera,
    sample_transform,
)

SPLITS = ("train", "novel_classes", "external")
LUMA = np.array([0.299, 0.587, 0.114])
CACHE_ENV = "INVAR_CACHE"


# ---------------------------------------------------------------------------
# manifests


@dataclass(frozen=True)
class SampleRecord:
    image: Any  # mesh recipe dict or {"path": ..., "mask": ...} for photographs
    object_id: str
    class_id: str
    transform: TransformInstance = NO_TRANSFORM
    split: str = "train"

    def to_json(self) -> dict[str, Any]:
        return {
            "image": self.image,
            "object_id": self.object_id,
            "class_id": self.class_id,
            "transform": self.transform.to_json(),
            "split": self.split,
        }

    @classmethod
    def from_json(cls, d: dict[str, Any]) -> "SampleRecord":
        return cls(d["image"], d["object_id"], d["class_id"], TransformInstance.from_json(d["transform"]), d["split"])


@dataclass
class SampleManifest:
    records: list[SampleRecord]
    dataset_name: str = "dataset"

    def __post_init__(self):
        seen: dict[str, str] = {}
        for r in self.records:
            if r.split not in SPLITS:
                raise ConfigError(f"unknown split {r.split!r}")
            if seen.setdefault(r.object_id, r.class_id) != r.class_id:
                raise ConfigError(f"object {r.object_id!r} appears under two classes")
        train = {r.class_id for r in self.records if r.split == "train"}
        novel = {r.class_id for r in self.records if r.split == "novel_classes"}
        if train & novel:
            raise ConfigError(f"classes in both train and novel splits: {sorted(train & novel)}")

    def __len__(self) -> int:
        return len(self.records)

    @property
    def classes(self) -> list[str]:
        return sorted({r.class_id for r in self.records})

    def object_ids(self) -> list[str]:
        """Object ids in first-appearance order."""
        return list(dict.fromkeys(r.object_id for r in self.records))

    def by_object(self) -> dict[str, list[SampleRecord]]:
        out: dict[str, list[SampleRecord]] = defaultdict(list)
        for r in self.records:
            out[r.object_id].append(r)
        return dict(out)

    def first_record(self) -> dict[str, SampleRecord]:
        out: dict[str, SampleRecord] = {}
        for r in self.records:
            out.setdefault(r.object_id, r)
        return out

    def class_index(self) -> dict[str, int]:
        return {c: i for i, c in enumerate(self.classes)}

    def save(self, path: str | os.PathLike) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            for r in self.records:
                fh.write(json.dumps(r.to_json(), sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | os.PathLike, dataset_name: str | None = None) -> "SampleManifest":
        path = Path(path)
        if not path.is_file():
            raise IoError(f"no manifest at {path}")
        with open(path) as fh:
            records = [SampleRecord.from_json(json.loads(line)) for line in fh if line.strip()]
        return cls(records, dataset_name or path.stem)

    def __eq__(self, other) -> bool:
        return isinstance(other, SampleManifest) and self.records == other.records


def merge_manifests(manifests: Iterable[SampleManifest], dataset_name: str = "merged") -> SampleManifest:
    return SampleManifest([r for m in manifests for r in m.records], dataset_name)


# ---------------------------------------------------------------------------
# materializing images


def mesh_from_recipe(recipe: dict[str, Any], object_id: str = "", class_id: str = "") -> Mesh:
    if "primitive" in recipe:
        return make_primitive(recipe["primitive"], recipe.get("params"), recipe.get("seed", 0), object_id, class_id)
    if "obj" in recipe:
        return load_obj(recipe["obj"], object_id, class_id, recipe.get("up_axis", "z"))
    raise ConfigError(f"record image is not a mesh recipe: {recipe}")


def load_photo(path: str | os.PathLike, mask: str | os.PathLike | None = None, size: int = IMAGE_SIZE) -> np.ndarray:
    """Grayscale a photograph with luma weights, zero its background, replicate to 3 channels."""
    from PIL import Image as PILImage

    path = Path(path)
    if not path.is_file():
        raise IoError(f"no image at {path}")
    with PILImage.open(path) as im:
        rgb = np.asarray(im.convert("RGB").resize((size, size), PILImage.BILINEAR), dtype=np.float64)
    gray = np.clip(np.rint(rgb @ LUMA), 0, 255).astype(np.uint8)
    if mask is not None:
        mask = Path(mask)
        if not mask.is_file():
            raise IoError(f"no mask at {mask}")
        with PILImage.open(mask) as m:
            keep = np.asarray(m.convert("L").resize((size, size), PILImage.NEAREST)) > 127
        gray = np.where(keep, gray, 0).astype(np.uint8)
    return np.repeat(gray[:, :, None], 3, axis=2)


class StimulusBank:
    """Resolves manifest records to pixels.

    Base views (mesh rendered at a camera, then centered on the canvas) are
    memoized in memory and, when ``cache_dir`` (or ``$INVAR_CACHE``) is set,
    as PNG files ``<cache_dir>/<object_id>/incl<ddd>_azim<ddd>.png``.
    """

    def __init__(self, cache_dir: str | os.PathLike | None = None, light: Light = DEFAULT_LIGHT):
        if cache_dir is None:
            cache_dir = os.environ.get(CACHE_ENV) or None
        self.cache_dir = Path(cache_dir) if cache_dir else None
        self.light = light
        self._meshes: dict[str, Mesh] = {}
        self._views: dict[tuple[str, Camera | None], np.ndarray] = {}
        self._footprints: dict[str, Footprint | None] = {}

    def add_meshes(self, meshes: Iterable[Mesh]) -> None:
        for m in meshes:
            self._meshes[m.object_id] = m

    def mesh(self, record: SampleRecord) -> Mesh:
        m = self._meshes.get(record.object_id)
        if m is None:
            m = mesh_from_recipe(record.image, record.object_id, record.class_id)
            self._meshes[record.object_id] = m
        return m

    def _is_photo(self, record: SampleRecord) -> bool:
        return isinstance(record.image, dict) and "path" in record.image

    def base_view(self, record: SampleRecord, camera: Camera | None = None) -> np.ndarray:
        """Untransformed image of the record's object (fixed pose unless ``camera`` is given)."""
        if self._is_photo(record):
            key = (record.object_id + "::" + record.image["path"], None)
            if key not in self._views:
                self._views[key] = load_photo(record.image["path"], record.image.get("mask"))
            return self._views[key]
        camera = camera or fixed_pose_camera()
        key = (record.object_id, camera)
        img = self._views.get(key)
        if img is not None:
            return img
        path = None
        if self.cache_dir is not None:
            path = self.cache_dir / record.object_id / view_filename(camera)
            if path.is_file():
                from PIL import Image as PILImage

                with PILImage.open(path) as im:
                    img = np.asarray(im.convert("RGB")).copy()
        if img is None:
            img = center_foreground(render(self.mesh(record), camera, self.light))
            if path is not None:
                from PIL import Image as PILImage

                path.parent.mkdir(parents=True, exist_ok=True)
                tmp = path.with_suffix(".tmp.png")
                PILImage.fromarray(img).save(tmp)
                os.replace(tmp, path)
        self._views[key] = img
        return img

    def footprint(self, record: SampleRecord) -> Footprint | None:
        key = record.object_id if not self._is_photo(record) else record.object_id + "::" + record.image["path"]
        if key not in self._footprints:
            self._footprints[key] = Footprint.of(self.base_view(record))
        return self._footprints[key]

    def image(self, record: SampleRecord, instance: TransformInstance | None = None) -> np.ndarray:
        """Pixels of ``record`` under ``instance`` (defaults to the record's own transform)."""
        instance = record.transform if instance is None else instance
        if instance.kind is TransformKind.VIEWPOINT:
            return self.base_view(record, instance.theta)
        return apply_2d(self.base_view(record), instance)

    def images(self, records: Sequence[SampleRecord], instances: Sequence[TransformInstance] | None = None):
        if instances is None:
            return np.stack([self.image(r) for r in records])
        return np.stack([self.image(r, t) for r, t in zip(records, instances)])

    def sample(self, record: SampleRecord, kind, ranges: TransformRanges, rng: np.random.Generator):
        """Draw a fresh transform of ``kind`` that is valid for this record."""
        kind = as_kind(kind)
        fp = self.footprint(record) if kind is TransformKind.TRANSLATION else None
        return sample_transform(kind, ranges, rng, fp)


# ---------------------------------------------------------------------------
# building manifests


def build_manifest(
    objects: Sequence[Mesh],
    kind: str | TransformKind,
    samples_per_object: int,
    seed: int,
    split: str = "train",
    ranges: TransformRanges | None = None,
    bank: StimulusBank | None = None,
    dataset_name: str = "procedural",
    viewpoint_without_replacement: bool = False,
) -> SampleManifest:
    """``samples_per_object`` records per object, each with its own transform draw."""
    if not objects:
        raise ConfigError("cannot build a manifest from an empty object list")
    if samples_per_object < 1:
        raise ConfigError("samples_per_object must be >= 1")
    kind = as_kind(kind)
    ranges = ranges or TransformRanges()
    bank = bank or StimulusBank()
    bank.add_meshes(objects)
    rng = np.random.default_rng(seed)
    records = []
    for mesh in objects:
        base = SampleRecord(mesh.source, mesh.object_id, mesh.class_id, NO_TRANSFORM, split)
        if kind is TransformKind.VIEWPOINT and viewpoint_without_replacement:
            grid = ranges.viewpoint
            if samples_per_object > len(grid):
                raise ConfigError("more viewpoint samples requested than grid cameras")
            picks = rng.permutation(len(grid))[:samples_per_object]
            draws = [TransformInstance(kind, grid[i]) for i in picks]
        else:
            draws = [bank.sample(base, kind, ranges, rng) for _ in range(samples_per_object)]
        records.extend(replace(base, transform=t) for t in draws)
    return SampleManifest(records, dataset_name)


def ingest_external(
    directory: str | os.PathLike,
    class_exclusions: Sequence[str] = (),
    remove_background: bool = True,
    dataset_name: str | None = None,
) -> SampleManifest:
    """Index a ``<class>/<object>/<view>.png`` tree of photographs.

    Masks are read from ``<class>/<object>/masks/<view>.png``. Images are
    grayscaled and masked when materialized by :class:`StimulusBank`.
    """
    root = Path(directory)
    if not root.is_dir():
        raise IoError(f"no dataset directory at {root}")
    excluded = set(class_exclusions)
    records = []
    for class_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        if class_dir.name in excluded:
            continue
        for obj_dir in sorted(p for p in class_dir.iterdir() if p.is_dir()):
            for view in sorted(obj_dir.glob("*.png")):
                mask = obj_dir / "masks" / view.name
                if remove_background and not mask.is_file():
                    raise IoError(f"missing foreground mask {mask}")
                image = {"path": str(view), "mask": str(mask) if remove_background else None}
                cam = _camera_from_name(view.stem)
                t = TransformInstance(TransformKind.VIEWPOINT, cam) if cam else NO_TRANSFORM
                records.append(SampleRecord(image, f"{class_dir.name}/{obj_dir.name}", class_dir.name, t, "external"))
    return SampleManifest(records, dataset_name or root.name)


_VIEW_RE = re.compile(r"(\d{1,3})-(\d{1,3})$")


def _camera_from_name(stem: str) -> Camera | None:
    """ETH-80 style ``<name>-<inclination>-<azimuth>`` file stems."""
    m = _VIEW_RE.search(stem)
    if not m:
        return None
    return Camera(float(m.group(1)), float(m.group(2)))


# ---------------------------------------------------------------------------
# batches


@dataclass
class PairBatch:
    """Pairs of records with target 0 (same object) or 1 (different objects)."""

    first: list[SampleRecord]
    second: list[SampleRecord]
    targets: np.ndarray
    same_probability: float = 0.5

    def __len__(self) -> int:
        return len(self.targets)

    @property
    def pairs(self) -> list[tuple[SampleRecord, SampleRecord, int]]:
        return list(zip(self.first, self.second, self.targets.tolist()))


def make_pair_batch(
    manifest: SampleManifest,
    p_same: float = 0.5,
    batch_size: int = 64,
    rng: np.random.Generator | None = None,
    kind: str | TransformKind | None = None,
    ranges: TransformRanges | None = None,
    bank: StimulusBank | None = None,
    max_retries: int = 100,
) -> PairBatch:
    """Draw same/different pairs.

    With ``kind=None`` the pair members are stored manifest records (a same
    pair uses two distinct records of one object). With a ``kind`` every
    member gets a fresh transform draw, so one record per object suffices.
    """
    if not 0.0 <= p_same <= 1.0:
        raise ConfigError("p_same must lie in [0, 1]")
    rng = rng if rng is not None else np.random.default_rng()
    groups = manifest.by_object()
    ids = list(groups)
    if len(ids) < 2:
        raise InsufficientSamplesError("need at least two objects to form pairs")
    online = kind is not None
    if online:
        ranges = ranges or TransformRanges()
        bank = bank or StimulusBank()

    def fresh(rec: SampleRecord) -> SampleRecord:
        return replace(rec, transform=bank.sample(rec, kind, ranges, rng))

    first, second, targets = [], [], []
    for _ in range(batch_size):
        if rng.random() < p_same:
            for _attempt in range(max_retries):
                recs = groups[ids[int(rng.integers(len(ids)))]]
                if online:
                    a = b = recs[int(rng.integers(len(recs)))]
                    a, b = fresh(a), fresh(b)
                    break
                if len(recs) >= 2:
                    i, j = rng.choice(len(recs), size=2, replace=False)
                    a, b = recs[int(i)], recs[int(j)]
                    break
            else:
                raise InsufficientSamplesError("could not find an object with two records for a same pair")
            target = 0
        else:
            i, j = rng.choice(len(ids), size=2, replace=False)
            ra, rb = groups[ids[int(i)]], groups[ids[int(j)]]
            a, b = ra[int(rng.integers(len(ra)))], rb[int(rng.integers(len(rb)))]
            if online:
                a, b = fresh(a), fresh(b)
            target = 1
        first.append(a)
        second.append(b)
        targets.append(target)
    return PairBatch(first, second, np.array(targets, dtype=np.int64), p_same)


def make_class_batch(
    manifest: SampleManifest,
    batch_size: int,
    rng: np.random.Generator,
    kind: str | TransformKind | None = None,
    ranges: TransformRanges | None = None,
    bank: StimulusBank | None = None,
) -> tuple[list[SampleRecord], np.ndarray]:
    """Records (objects drawn uniformly) and their class indices.

    With a ``kind``, each record carries a fresh transform draw.
    """
    index = manifest.class_index()
    groups = manifest.by_object()
    ids = list(groups)
    records = []
    for _ in range(batch_size):
        recs = groups[ids[int(rng.integers(len(ids)))]]
        rec = recs[int(rng.integers(len(recs)))]
        if kind is not None:
            rec = replace(rec, transform=(bank or StimulusBank()).sample(rec, kind, ranges or TransformRanges(), rng))
        records.append(rec)
    labels = np.array([index[r.class_id] for r in records], dtype=np.int64)
    return records, labels


# ---------------------------------------------------------------------------
# normalization


@dataclass(frozen=True)
class NormalizationStats:
    """Per-channel statistics on the [0, 1] intensity scale.

    ``lo``/``hi`` are the standardized values of the darkest and brightest
    observed pixels; they fix the affine rescale onto [-1, 1].
    """

    mean: tuple[float, float, float]
    std: tuple[float, float, float]
    lo: tuple[float, float, float]
    hi: tuple[float, float, float]

    def to_dict(self) -> dict[str, list[float]]:
        return {k: list(getattr(self, k)) for k in ("mean", "std", "lo", "hi")}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "NormalizationStats":
        return cls(*(tuple(float(x) for x in d[k]) for k in ("mean", "std", "lo", "hi")))

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path: str | os.PathLike) -> "NormalizationStats":
        return cls.from_dict(json.loads(Path(path).read_text()))


STD_FLOOR = 1e-6
DEFAULT_STATS = NormalizationStats((0.5,) * 3, (0.5,) * 3, (-1.0,) * 3, (1.0,) * 3)


def stats_from_images(images: np.ndarray) -> NormalizationStats:
    x = np.asarray(images, dtype=np.float64).reshape(-1, 3) / 255.0
    mean = x.mean(axis=0)
    std = np.maximum(x.std(axis=0), STD_FLOOR)
    lo = (x.min(axis=0) - mean) / std
    hi = (x.max(axis=0) - mean) / std
    return NormalizationStats(*(tuple(float(v) for v in a) for a in (mean, std, lo, hi)))


def compute_norm_stats(
    manifest: SampleManifest,
    subset_size: int,
    rng: np.random.Generator,
    bank: StimulusBank | None = None,
) -> NormalizationStats:
    """Statistics over ``subset_size`` records drawn without replacement where possible."""
    if subset_size < 1:
        raise ConfigError("subset_size must be >= 1")
    bank = bank or StimulusBank()
    n = len(manifest.records)
    idx = rng.choice(n, size=subset_size, replace=subset_size > n)
    return stats_from_images(bank.images([manifest.records[int(i)] for i in sorted(idx)]))


def standardize(images: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    return (np.asarray(images, dtype=np.float64) / 255.0 - np.asarray(stats.mean)) / np.asarray(stats.std)


def _rescale(z: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    lo, hi = np.asarray(stats.lo), np.asarray(stats.hi)
    span = hi - lo
    safe = np.where(span > STD_FLOOR, span, 1.0)
    return np.where(span > STD_FLOOR, 2.0 * (z - lo) / safe - 1.0, z)


def normalize(images: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    """Standardize, then map the dataset range [lo, hi] affinely onto [-1, 1] (float32)."""
    images = np.asarray(images)
    if images.dtype == np.uint8:
        # the whole map is affine per channel: evaluate it at 0 and 1 once
        ends = _rescale(standardize(np.array([[0.0] * 3, [1.0] * 3]), stats), stats)
        gain = (ends[1] - ends[0]).astype(np.float32)
        return images.astype(np.float32) * gain + ends[0].astype(np.float32)
    return _rescale(standardize(images, stats), stats).astype(np.float32)


def denormalize(values: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    """Inverse of :func:`normalize`, returned as float intensities on [0, 255]."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = np.asarray(stats.lo), np.asarray(stats.hi)
    span = hi - lo
    z = np.where(span > STD_FLOOR, (v + 1.0) / 2.0 * span + lo, v)
    return (z * np.asarray(stats.std) + np.asarray(stats.mean)) * 255.0
