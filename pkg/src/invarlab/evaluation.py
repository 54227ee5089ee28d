"""Invariance measurements: same/different accuracy, 5AFC, and the I / U / adjusted-I metrics.

Every measurement runs against a *probe*: a callable mapping a batch of uint8
images ``(B, 128, 128, 3)`` to activation vectors ``(B, D)``. Networks become
probes through :func:`as_probe`; :class:`PixelProbe` and
:class:`RandomProbe` serve as references.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from invarlab.datasets import (
    DEFAULT_STATS,
    NormalizationStats,
    SampleManifest,
    SampleRecord,
    StimulusBank,
    make_pair_batch,
    normalize,
)
from invarlab.errors import (
    ConfigError,
    DegenerateUniformityError,
    DegenerateVectorError,
)
from invarlab.models import ClassifierNet, SameDiffNet, dissimilarity, last_layer_activations
from invarlab.transforms import (
    TransformInstance,
    TransformKind,
    TransformRanges,
    as_kind,
    baseline_instance,
)

UNIFORMITY_FLOOR = 1e-6


class SimilarityKind(str, Enum):
    COSINE = "cosine"
    EUCLID_MAPPED = "euclid_mapped"


def as_similarity(kind: str | SimilarityKind) -> SimilarityKind:
    try:
        return SimilarityKind(kind)
    except ValueError:
        raise ConfigError(f"unknown similarity {kind!r}") from None


def cosine_similarity(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64).ravel(), np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ConfigError(f"vector lengths differ: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise DegenerateVectorError("cosine similarity of an all-zero vector")
    if np.array_equal(a, b):
        return 1.0  # exact, where the float quotient can land a few ulps short
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def euclid_mapped_similarity(a, b) -> float:
    """``1 / (1 + ||a - b||)``: 1 for identical vectors, decreasing with distance."""
    a, b = np.asarray(a, dtype=np.float64).ravel(), np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ConfigError(f"vector lengths differ: {a.shape} vs {b.shape}")
    return float(1.0 / (1.0 + np.linalg.norm(a - b)))


def rowwise_similarity(a: np.ndarray, b: np.ndarray, kind: str | SimilarityKind = "cosine") -> np.ndarray:
    """Similarity of matching rows of two (n, D) matrices."""
    kind = as_similarity(kind)
    a, b = np.atleast_2d(np.asarray(a, dtype=np.float64)), np.atleast_2d(np.asarray(b, dtype=np.float64))
    if kind is SimilarityKind.EUCLID_MAPPED:
        return 1.0 / (1.0 + np.linalg.norm(a - b, axis=1))
    na, nb = np.linalg.norm(a, axis=1), np.linalg.norm(b, axis=1)
    if np.any(na == 0) or np.any(nb == 0):
        raise DegenerateVectorError("cosine similarity of an all-zero vector")
    out = np.clip(np.einsum("ij,ij->i", a, b) / (na * nb), -1.0, 1.0)
    out[np.all(a == b, axis=1)] = 1.0
    return out


def similarity_fn(kind: str | SimilarityKind) -> Callable[[Any, Any], float]:
    return cosine_similarity if as_similarity(kind) is SimilarityKind.COSINE else euclid_mapped_similarity


# ---------------------------------------------------------------------------
# probes


class PixelProbe:
    """Raw pixel intensities as the representation."""

    def __call__(self, images: np.ndarray) -> np.ndarray:
        return np.asarray(images, dtype=np.float64).reshape(len(images), -1)


class RandomProbe:
    """Image-independent random vectors; calibrates chance level."""

    def __init__(self, seed: int = 0, dim: int = 16):
        self.rng = np.random.default_rng(seed)
        self.dim = dim

    def __call__(self, images: np.ndarray) -> np.ndarray:
        return self.rng.standard_normal((len(images), self.dim))


class ConstantProbe:
    """Maps every image to the same vector (a fully collapsed representation)."""

    def __init__(self, dim: int = 8):
        self.vector = np.ones(dim)

    def __call__(self, images: np.ndarray) -> np.ndarray:
        return np.tile(self.vector, (len(images), 1))


class NetworkProbe:
    def __init__(
        self,
        net: ClassifierNet | SameDiffNet,
        stats: NormalizationStats = DEFAULT_STATS,
        probe_layer: str = "head_input",
        batch_size: int = 256,
    ):
        self.net = net
        self.stats = stats
        self.probe_layer = probe_layer
        self.batch_size = batch_size

    def __call__(self, images: np.ndarray) -> np.ndarray:
        out = []
        for i in range(0, len(images), self.batch_size):
            x = normalize(images[i : i + self.batch_size], self.stats)
            out.append(last_layer_activations(self.net, x, self.probe_layer))
        return np.concatenate(out) if out else np.zeros((0, 0))


def as_probe(net, stats: NormalizationStats = DEFAULT_STATS, probe_layer: str = "head_input"):
    if isinstance(net, (ClassifierNet, SameDiffNet)):
        return NetworkProbe(net, stats, probe_layer)
    if callable(net):
        return net
    raise ConfigError(f"cannot use {type(net).__name__} as a probe")


# ---------------------------------------------------------------------------
# image drawing shared by all measurements


class ViewSampler:
    """Produces transformed images of a manifest's objects.

    For photographed objects (several stored views, no mesh) a viewpoint
    draw picks one of the object's stored views at random.
    """

    def __init__(
        self,
        manifest: SampleManifest,
        bank: StimulusBank | None = None,
        ranges: TransformRanges | None = None,
    ):
        self.manifest = manifest
        self.bank = bank or StimulusBank()
        self.ranges = ranges or TransformRanges()
        self.groups = manifest.by_object()
        self.ids = list(self.groups)
        self.base = manifest.first_record()

    def _photo(self, oid: str) -> bool:
        img = self.base[oid].image
        return isinstance(img, dict) and "path" in img

    def draw(self, oid: str, kind: TransformKind, rng: np.random.Generator) -> tuple[SampleRecord, TransformInstance]:
        rec = self.base[oid]
        if kind is TransformKind.VIEWPOINT and self._photo(oid):
            views = self.groups[oid]
            return views[int(rng.integers(len(views)))], TransformInstance(TransformKind.NONE)
        return rec, self.bank.sample(rec, kind, self.ranges, rng)

    def image(self, oid: str, instance: TransformInstance) -> np.ndarray:
        return self.bank.image(self.base[oid], instance)

    def random_images(self, oids: Sequence[str], kind: TransformKind, rng: np.random.Generator) -> np.ndarray:
        draws = [self.draw(o, kind, rng) for o in oids]
        return np.stack([self.bank.image(r, t) for r, t in draws])


# ---------------------------------------------------------------------------
# result rows


@dataclass
class ResultRow:
    experiment_id: str
    model: str
    seed: int
    train_transform: str
    test_transform: str
    metric_name: str
    value: float
    n_trials: int
    extra: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d.update(d.pop("extra"))
        return d


RESULT_COLUMNS = ["experiment_id", "model", "seed", "train_transform", "test_transform", "metric_name", "value",
                  "n_trials"]


def write_results_csv(rows: Sequence[ResultRow], path: str | os.PathLike, extra_columns: Sequence[str] = ()) -> None:
    cols = RESULT_COLUMNS + list(extra_columns)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for r in rows:
            d = r.to_dict()
            d["value"] = repr(float(d["value"]))
            w.writerow(d)


def _derive_seed(*parts: Any) -> int:
    return int.from_bytes(hashlib.sha256(repr(parts).encode()).digest()[:8], "little")


# ---------------------------------------------------------------------------
# same/different accuracy


def samediff_accuracy(
    net,
    manifest: SampleManifest,
    kind: str | TransformKind,
    n_pairs: int = 1000,
    threshold: float = 0.5,
    rng: np.random.Generator | None = None,
    bank: StimulusBank | None = None,
    stats: NormalizationStats = DEFAULT_STATS,
    ranges: TransformRanges | None = None,
    batch_size: int = 250,
) -> ResultRow:
    """Fraction of pairs (half same, half different in expectation) judged correctly.

    ``net`` is a :class:`SameDiffNet` or any callable ``(images_a, images_b)
    -> scores`` on uint8 images; a score above ``threshold`` means "different".
    """
    kind = as_kind(kind)
    rng = rng if rng is not None else np.random.default_rng(0)
    bank = bank or StimulusBank()
    if isinstance(net, SameDiffNet):
        model = net

        def score(a, b):
            return dissimilarity(model, normalize(a, stats), normalize(b, stats))

        name = f"{net.arch}-samediff"
    else:
        score, name = net, getattr(net, "name", type(net).__name__)
    correct = 0
    done = 0
    while done < n_pairs:
        n = min(batch_size, n_pairs - done)
        batch = make_pair_batch(manifest, 0.5, n, rng, kind, ranges, bank)
        y = np.asarray(score(bank.images(batch.first), bank.images(batch.second)), dtype=np.float64)
        correct += int(((y > threshold).astype(np.int64) == batch.targets).sum())
        done += n
    return ResultRow("", name, -1, "", kind.value, "samediff_accuracy", correct / n_pairs, n_pairs)


# ---------------------------------------------------------------------------
# 5-alternative forced choice


def run_5afc(
    net,
    manifest: SampleManifest,
    kind: str | TransformKind,
    n_trials: int = 100,
    similarity: str | SimilarityKind = "cosine",
    rng: np.random.Generator | None = None,
    bank: StimulusBank | None = None,
    stats: NormalizationStats = DEFAULT_STATS,
    ranges: TransformRanges | None = None,
    n_alternatives: int = 5,
    chunk_trials: int = 50,
) -> ResultRow:
    """Target vs. five candidates, one of which is another draw of the target.

    A trial is correct iff the matching candidate is strictly the most
    similar to the target; ties count as errors. Distractors are distinct
    objects drawn uniformly from the manifest (classes may repeat).
    """
    kind = as_kind(kind)
    sim = as_similarity(similarity)
    rng = rng if rng is not None else np.random.default_rng(0)
    sampler = ViewSampler(manifest, bank, ranges)
    if len(sampler.ids) < n_alternatives:
        raise ConfigError(f"5AFC needs at least {n_alternatives} objects, manifest has {len(sampler.ids)}")
    probe = as_probe(net, stats)
    correct = 0
    done = 0
    while done < n_trials:
        n = min(chunk_trials, n_trials - done)
        oids = []
        for _ in range(n):
            picks = rng.choice(len(sampler.ids), size=n_alternatives, replace=False)
            target = sampler.ids[int(picks[0])]
            # slot 0: target; slot 1: the matching candidate; then distractors
            oids.extend([target, target] + [sampler.ids[int(p)] for p in picks[1:]])
        acts = np.asarray(probe(sampler.random_images(oids, kind, rng)), dtype=np.float64)
        acts = acts.reshape(n, n_alternatives + 1, -1)
        for trial in acts:
            s = rowwise_similarity(np.repeat(trial[:1], n_alternatives, 0), trial[1:], sim)
            if s[0] > s[1:].max():
                correct += 1
        done += n
    name = getattr(getattr(probe, "net", None), "arch", None) or type(probe).__name__
    return ResultRow("", name, -1, "", kind.value, f"5afc_{sim.value}", correct / n_trials, n_trials)


# ---------------------------------------------------------------------------
# invariance / uniformity / adjusted invariance


def adjusted_invariance(I: float, U: float) -> float:
    """``(I - U) / (1 - U)``: 1 for perfect non-trivial invariance, 0 when a transformed
    object is no closer to itself than to a different object."""
    if 1.0 - U < UNIFORMITY_FLOOR:
        raise DegenerateUniformityError(f"uniformity {U} leaves no room for adjustment")
    return (I - U) / (1.0 - U)


class ActivationCache:
    """Memoized activations keyed by (object id, transform instance)."""

    def __init__(self, probe, sampler: ViewSampler):
        self.probe = probe
        self.sampler = sampler
        self._store: dict[tuple[str, TransformInstance], np.ndarray] = {}

    def get_many(self, keys: Sequence[tuple[str, TransformInstance]]) -> np.ndarray:
        missing = list(dict.fromkeys(k for k in keys if k not in self._store))
        if missing:
            imgs = np.stack([self.sampler.image(o, t) for o, t in missing])
            acts = np.asarray(self.probe(imgs), dtype=np.float64)
            for k, a in zip(missing, acts):
                self._store[k] = a
        return np.stack([self._store[k] for k in keys])


def _activation_source(net, manifest, bank, stats, ranges):
    if hasattr(net, "get_many"):
        return net
    return ActivationCache(as_probe(net, stats), ViewSampler(manifest, bank, ranges))


def _instance(kind: TransformKind, theta) -> TransformInstance:
    return theta if isinstance(theta, TransformInstance) else TransformInstance(kind, theta)


def invariance_I(
    net,
    objects: Sequence[str],
    kind: str | TransformKind,
    theta,
    manifest: SampleManifest | None = None,
    bank: StimulusBank | None = None,
    similarity: str | SimilarityKind = "cosine",
    stats: NormalizationStats = DEFAULT_STATS,
) -> float:
    """Mean similarity between each object's baseline view and its theta-transformed view."""
    kind = as_kind(kind)
    if not objects:
        raise ConfigError("need at least one object")
    src = _activation_source(net, manifest, bank, stats, None)
    alpha, t = baseline_instance(kind), _instance(kind, theta)
    a = src.get_many([(o, alpha) for o in objects])
    b = src.get_many([(o, t) for o in objects])
    return float(rowwise_similarity(a, b, similarity).mean())


def uniformity_U(
    net,
    object_pairs: Sequence[tuple[str, str]],
    kind: str | TransformKind,
    theta,
    manifest: SampleManifest | None = None,
    bank: StimulusBank | None = None,
    similarity: str | SimilarityKind = "cosine",
    stats: NormalizationStats = DEFAULT_STATS,
) -> float:
    """Mean similarity between one object's baseline view and another object's theta view."""
    kind = as_kind(kind)
    if not object_pairs:
        raise ConfigError("need at least one object pair")
    if any(u == v for u, v in object_pairs):
        raise ConfigError("uniformity pairs must contain two different objects")
    src = _activation_source(net, manifest, bank, stats, None)
    alpha, t = baseline_instance(kind), _instance(kind, theta)
    a = src.get_many([(u, alpha) for u, _ in object_pairs])
    b = src.get_many([(v, t) for _, v in object_pairs])
    return float(rowwise_similarity(a, b, similarity).mean())


@dataclass
class InvarianceCurve:
    kind: str
    theta_grid: list[Any]
    I: list[float]
    U: list[float]
    I_adj: list[float | None]
    R: int
    N: int
    seed: int
    similarity: str = "cosine"

    def to_json(self) -> dict[str, Any]:
        return {
            "kind": self.kind,
            "theta_grid": [_theta_json(t) for t in self.theta_grid],
            "I": self.I,
            "U": self.U,
            "I_adj": self.I_adj,
            "R": self.R,
            "N": self.N,
            "seed": self.seed,
            "similarity": self.similarity,
        }

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1))

    def mean_adjusted(self) -> float:
        vals = [v for v in self.I_adj if v is not None]
        return float(np.mean(vals)) if vals else float("nan")


def _theta_json(theta) -> Any:
    if isinstance(theta, TransformInstance):
        theta = theta.theta
    if hasattr(theta, "to_dict"):
        return theta.to_dict()
    if isinstance(theta, tuple):
        return list(theta)
    return theta


def sample_curve_objects(
    object_ids: Sequence[str], R: int, N: int, rng: np.random.Generator
) -> tuple[list[str], list[tuple[str, str]]]:
    """R objects (without replacement while possible) and N ordered pairs of distinct objects."""
    ids = list(object_ids)
    if len(ids) < 2:
        raise ConfigError("need at least two objects for uniformity pairs")
    if R <= len(ids):
        objs = [ids[int(i)] for i in rng.choice(len(ids), size=R, replace=False)]
    else:
        objs = [ids[int(i)] for i in rng.integers(len(ids), size=R)]
    pairs = []
    for _ in range(N):
        i, j = rng.choice(len(ids), size=2, replace=False)
        pairs.append((ids[int(i)], ids[int(j)]))
    return objs, pairs


def curve_from_activations(
    base: Mapping[str, np.ndarray],
    transformed: Sequence[Mapping[str, np.ndarray]],
    objects: Sequence[str],
    pairs: Sequence[tuple[str, str]],
    similarity: str | SimilarityKind = "cosine",
) -> tuple[list[float], list[float], list[float | None]]:
    """I, U and adjusted I per grid point from cached activation vectors.

    ``transformed[g][oid]`` is the activation of ``oid`` at grid point ``g``.
    Collapsed grid points (U too close to 1) yield ``None``.
    """
    a_obj = np.stack([base[o] for o in objects])
    a_u = np.stack([base[u] for u, _ in pairs])
    I, U, adj = [], [], []
    for table in transformed:
        i_val = float(rowwise_similarity(a_obj, np.stack([table[o] for o in objects]), similarity).mean())
        u_val = float(rowwise_similarity(a_u, np.stack([table[v] for _, v in pairs]), similarity).mean())
        I.append(i_val)
        U.append(u_val)
        try:
            adj.append(adjusted_invariance(i_val, u_val))
        except DegenerateUniformityError:
            adj.append(None)
    return I, U, adj


def invariance_curve(
    net,
    manifest: SampleManifest,
    kind: str | TransformKind,
    theta_grid: Sequence[Any],
    R: int = 200,
    N: int = 200,
    similarity: str | SimilarityKind = "cosine",
    seed: int = 0,
    bank: StimulusBank | None = None,
    stats: NormalizationStats = DEFAULT_STATS,
    ranges: TransformRanges | None = None,
) -> InvarianceCurve:
    """I, U and adjusted I over a grid of theta values for novel-class objects.

    Activations are computed once per (object, theta) and shared by I and U.
    """
    kind = as_kind(kind)
    if not theta_grid:
        raise ConfigError("theta grid is empty")
    if any(r.split == "train" for r in manifest.records):
        raise ConfigError("invariance curves must use objects from novel classes only")
    rng = np.random.default_rng(seed)
    objects, pairs = sample_curve_objects(manifest.object_ids(), R, N, rng)
    needed = list(dict.fromkeys(objects + [o for p in pairs for o in p]))
    src = _activation_source(net, manifest, bank, stats, ranges)
    alpha = baseline_instance(kind)
    base = dict(zip(needed, src.get_many([(o, alpha) for o in needed])))
    transformed = []
    for theta in theta_grid:
        t = _instance(kind, theta)
        transformed.append(dict(zip(needed, src.get_many([(o, t) for o in needed]))))
    I, U, adj = curve_from_activations(base, transformed, objects, pairs, similarity)
    return InvarianceCurve(kind.value, list(theta_grid), I, U, adj, R, N, seed, as_similarity(similarity).value)


# ---------------------------------------------------------------------------
# cross-transformation matrix


def cross_transform_matrix(
    checkpoints: Mapping[str, Any],
    test_kinds: Sequence[str | TransformKind],
    manifest: SampleManifest,
    n_trials: int = 100,
    rng: np.random.Generator | None = None,
    bank: StimulusBank | None = None,
    stats: NormalizationStats = DEFAULT_STATS,
    ranges: TransformRanges | None = None,
    similarity: str | SimilarityKind = "cosine",
) -> list[list[ResultRow]]:
    """5AFC accuracy of every trained net on every test kind.

    Rows follow the order of ``checkpoints`` with the ``none``-trained row
    last. All nets face identical trials for a given test kind (the trial rng
    is seeded per test kind), so a diagonal cell equals ``run_5afc`` called
    with that seed.
    """
    if "none" not in checkpoints:
        raise ConfigError("cross-transformation matrix needs a 'none'-trained baseline")
    rng = rng if rng is not None else np.random.default_rng(0)
    base_seed = int(rng.integers(2**63))
    bank = bank or StimulusBank()
    order = [k for k in checkpoints if k != "none"] + ["none"]
    matrix = []
    for train_kind in order:
        net = checkpoints[train_kind]
        if net is None:
            raise ConfigError(f"missing checkpoint for {train_kind!r}")
        row = []
        for test in test_kinds:
            test = as_kind(test)
            cell = run_5afc(net, manifest, test, n_trials, similarity,
                            np.random.default_rng(cross_cell_seed(base_seed, test)), bank, stats, ranges)
            cell.train_transform = str(as_kind(train_kind).value)
            row.append(cell)
        matrix.append(row)
    return matrix


def cross_cell_seed(base_seed: int, test_kind: str | TransformKind) -> int:
    return _derive_seed(base_seed, as_kind(test_kind).value)
