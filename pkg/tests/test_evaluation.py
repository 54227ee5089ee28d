import json
import math

import numpy as np
import pytest
from _oracles import direct_curve
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from invarlab.datasets import StimulusBank, build_manifest
from invarlab.errors import ConfigError, DegenerateUniformityError, DegenerateVectorError
from invarlab.evaluation import (
    ActivationCache,
    ConstantProbe,
    PixelProbe,
    RandomProbe,
    ResultRow,
    ViewSampler,
    adjusted_invariance,
    cosine_similarity,
    cross_transform_matrix,
    cross_cell_seed,
    curve_from_activations,
    euclid_mapped_similarity,
    invariance_curve,
    invariance_I,
    run_5afc,
    samediff_accuracy,
    uniformity_U,
    write_results_csv,
)
from invarlab.stimuli3d import DEFAULT_NOVEL_CLASSES, make_class_objects
from invarlab.transforms import (
    Footprint,
    TransformInstance,
    TransformKind,
    TransformRanges,
    baseline_instance,
    default_theta_grid,
)

finite = st.floats(-100, 100, allow_nan=False, allow_infinity=False)


@pytest.fixture(scope="module")
def bank():
    return StimulusBank()


@pytest.fixture(scope="module")
def novel(bank):
    objs = make_class_objects(DEFAULT_NOVEL_CLASSES[:4], 2, seed=5)
    return build_manifest(objs, "none", 1, 0, split="novel_classes", bank=bank)


class OneHotProbe:
    """Orthogonal one-hot vector per object, identified through its pixel sum."""

    def __init__(self):
        self.codes = {}

    def __call__(self, images):
        out = np.zeros((len(images), 64))
        for i, img in enumerate(images):
            key = int(img.astype(np.int64).sum())
            out[i, self.codes.setdefault(key, len(self.codes))] = 1.0
        return out


# ---------------------------------------------------------------------------
# similarities


def test_cosine_examples():
    v = np.array([1.0, -2.0, 3.0])
    assert cosine_similarity(v, v) == pytest.approx(1.0)
    assert cosine_similarity([1, 0], [0, 1]) == 0.0
    assert cosine_similarity(v, -v) == pytest.approx(-1.0)


def test_cosine_errors():
    with pytest.raises(DegenerateVectorError):
        cosine_similarity([0, 0], [1, 0])
    with pytest.raises(ConfigError):
        cosine_similarity([1, 0], [1, 0, 0])


@settings(max_examples=60)
@given(a=arrays(np.float64, 6, elements=finite), b=arrays(np.float64, 6, elements=finite), c=st.floats(0.01, 100))
def test_cosine_properties(a, b, c):
    if np.linalg.norm(a) < 1e-6 or np.linalg.norm(b) < 1e-6:
        return
    s = cosine_similarity(a, b)
    assert s == cosine_similarity(b, a)
    assert abs(s) <= 1 + 1e-12
    assert cosine_similarity(c * a, b) == pytest.approx(s, abs=1e-12)


def test_euclid_examples():
    v = np.array([0.3, 0.4])
    assert euclid_mapped_similarity(v, v) == 1.0
    assert euclid_mapped_similarity([0, 0], [0.6, 0.8]) == pytest.approx(0.5)


@given(d1=st.floats(0, 50), d2=st.floats(0, 50))
def test_euclid_monotone(d1, d2):
    s1 = euclid_mapped_similarity([0.0], [d1])
    s2 = euclid_mapped_similarity([0.0], [d2])
    # strict only where the gap survives float rounding
    if d2 - d1 > 1e-9:
        assert s1 > s2
    elif d1 <= d2:
        assert s1 >= s2
    assert 0 < s1 <= 1


# ---------------------------------------------------------------------------
# adjusted invariance


def test_adjusted_examples():
    assert adjusted_invariance(0.3, 0.3) == 0.0
    assert adjusted_invariance(1.0, 0.42) == 1.0
    assert adjusted_invariance(0.9, 0.5) == pytest.approx(0.8)
    with pytest.raises(DegenerateUniformityError):
        adjusted_invariance(1.0, 1.0)


@given(u=st.floats(-1, 0.99), i1=st.floats(-1, 1), i2=st.floats(-1, 1))
def test_adjusted_monotone_in_I(u, i1, i2):
    if i1 < i2:
        assert adjusted_invariance(i1, u) <= adjusted_invariance(i2, u)


# ---------------------------------------------------------------------------
# same/different accuracy


def test_samediff_oracle_perfect(novel, bank):
    def oracle(a, b):
        return np.array([float(not np.array_equal(x, y)) for x, y in zip(a, b)])

    # with kind=none, same pairs are pixel-identical and different pairs are not
    row = samediff_accuracy(oracle, novel, "none", 200, rng=np.random.default_rng(0), bank=bank)
    assert row.value == 1.0 and row.metric_name == "samediff_accuracy"


def test_samediff_constant_says_same(novel, bank):
    n = 2000
    row = samediff_accuracy(lambda a, b: np.full(len(a), 0.5 - 1e-3), novel, "none", n,
                            rng=np.random.default_rng(1), bank=bank)
    # 99.9% binomial interval around 0.5
    half = 3.29 * math.sqrt(0.25 / n)
    assert abs(row.value - 0.5) <= half


# ---------------------------------------------------------------------------
# 5AFC


def test_5afc_pixel_probe_identity(novel, bank):
    row = run_5afc(PixelProbe(), novel, "none", 40, rng=np.random.default_rng(0), bank=bank)
    assert row.value == 1.0


def test_5afc_ties_are_errors(novel, bank):
    assert run_5afc(ConstantProbe(), novel, "none", 30, bank=bank).value == 0.0


def test_5afc_random_probe_near_chance(novel, bank):
    row = run_5afc(RandomProbe(1), novel, "none", 2000, rng=np.random.default_rng(2), bank=bank)
    assert 0.18 <= row.value <= 0.22


def test_5afc_reproducible(novel, bank):
    a = run_5afc(PixelProbe(), novel, "rotation", 30, rng=np.random.default_rng(5), bank=bank)
    b = run_5afc(PixelProbe(), novel, "rotation", 30, rng=np.random.default_rng(5), bank=bank)
    assert a == b


def test_5afc_needs_five_objects(bank):
    objs = make_class_objects(DEFAULT_NOVEL_CLASSES[:2], 2, seed=5)
    m = build_manifest(objs, "none", 1, 0, split="novel_classes", bank=bank)
    with pytest.raises(ConfigError):
        run_5afc(PixelProbe(), m, "none", 5, bank=bank)


# ---------------------------------------------------------------------------
# I, U and curves


def test_I_at_baseline_is_one(novel, bank):
    ids = novel.object_ids()
    for kind in ("rotation", "scale", "brightness", "contrast"):
        assert invariance_I(PixelProbe(), ids, kind, baseline_instance(kind).theta, novel, bank) == pytest.approx(1.0)


def test_I_single_object(novel, bank):
    oid = novel.object_ids()[0]
    sampler = ViewSampler(novel, bank)
    a = sampler.image(oid, TransformInstance(TransformKind.ROTATION, 0.0))
    b = sampler.image(oid, TransformInstance(TransformKind.ROTATION, 40.0))
    direct = cosine_similarity(a.astype(float), b.astype(float))
    assert invariance_I(PixelProbe(), [oid], "rotation", 40.0, novel, bank) == pytest.approx(direct, abs=1e-12)


def test_U_examples(novel, bank):
    ids = novel.object_ids()
    pairs = [(ids[0], ids[1]), (ids[2], ids[3])]
    assert uniformity_U(ConstantProbe(), pairs, "scale", 1.2, novel, bank) == pytest.approx(1.0)
    assert uniformity_U(OneHotProbe(), pairs, "brightness", 1.0, novel, bank) == 0.0
    with pytest.raises(ConfigError):
        uniformity_U(PixelProbe(), [(ids[0], ids[0])], "scale", 1.0, novel, bank)


def test_U_single_pair(novel, bank):
    ids = novel.object_ids()
    sampler = ViewSampler(novel, bank)
    a = sampler.image(ids[0], TransformInstance(TransformKind.SCALE, 1.0)).astype(float)
    b = sampler.image(ids[1], TransformInstance(TransformKind.SCALE, 0.7)).astype(float)
    got = uniformity_U(PixelProbe(), [(ids[0], ids[1])], "scale", 0.7, novel, bank)
    assert got == pytest.approx(cosine_similarity(a, b), abs=1e-12)


def test_pixel_I_decreases_with_translation_offset(novel, bank):
    ids = novel.object_ids()
    fp = Footprint.of(ViewSampler(novel, bank).image(ids[0], TransformInstance(TransformKind.NONE)))
    max_dx = fp.shift_limits()[1]
    offsets = np.linspace(0, min(max_dx, 30), 7)
    vals = [invariance_I(PixelProbe(), ids[:1], "translation", (64.0 + dx, 64.0), novel, bank) for dx in offsets]
    assert vals[0] == pytest.approx(1.0)
    assert all(b <= a + 1e-12 for a, b in zip(vals, vals[1:]))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), sim=st.sampled_from(["cosine", "euclid_mapped"]))
def test_curve_matches_direct_formulas(seed, sim):
    rng = np.random.default_rng(seed)
    ids = [f"o{i}" for i in range(6)]
    base = {o: rng.standard_normal(5) for o in ids}
    transformed = [{o: rng.standard_normal(5) for o in ids} for _ in range(3)]
    objects = list(rng.choice(ids, 4, replace=False))
    pairs = [(ids[i], ids[(i + 1 + int(rng.integers(5))) % 6]) for i in range(5)]
    got = curve_from_activations(base, transformed, objects, pairs, sim)
    want = direct_curve(base, transformed, objects, pairs, sim)
    for g, w in zip(got, want):
        assert np.allclose(g, w, atol=1e-9, rtol=0)


def test_curve_pipeline(novel, bank):
    grid = default_theta_grid("rotation", TransformRanges(), 5)
    c = invariance_curve(PixelProbe(), novel, "rotation", grid, R=6, N=10, seed=1, bank=bank)
    assert c.I[grid.index(0.0)] == 1.0
    assert c.I_adj[grid.index(0.0)] == 1.0
    for i, u, a in zip(c.I, c.U, c.I_adj):
        assert a == pytest.approx((i - u) / (1 - u), abs=1e-12)
    d = json.loads(json.dumps(c.to_json()))
    assert set(d) == {"kind", "theta_grid", "I", "U", "I_adj", "R", "N", "seed", "similarity"}
    again = invariance_curve(PixelProbe(), novel, "rotation", grid, R=6, N=10, seed=1, bank=bank)
    assert again == c


def test_curve_constant_probe_gives_null_cells(novel, bank):
    c = invariance_curve(ConstantProbe(), novel, "scale", [0.8, 1.0, 1.2], R=4, N=4, bank=bank)
    assert c.I_adj == [None, None, None]
    assert math.isnan(c.mean_adjusted())


def test_curve_rejects_training_objects(bank):
    m = build_manifest(make_class_objects(["cube", "ring"], 2), "none", 1, 0, bank=bank)
    with pytest.raises(ConfigError):
        invariance_curve(PixelProbe(), m, "scale", [1.0], R=2, N=2, bank=bank)
    with pytest.raises(ConfigError):
        invariance_curve(PixelProbe(), m, "scale", [], R=2, N=2, bank=bank)


def test_cache_reuses_activations(novel, bank):
    calls = []

    def probe(imgs):
        calls.append(len(imgs))
        return PixelProbe()(imgs)

    cache = ActivationCache(probe, ViewSampler(novel, bank))
    keys = [(o, TransformInstance(TransformKind.NONE)) for o in novel.object_ids()[:3]]
    a = cache.get_many(keys + keys)
    b = cache.get_many(keys)
    assert calls == [3]
    assert np.array_equal(a[:3], b)


# ---------------------------------------------------------------------------
# cross-transformation matrix


def test_cross_matrix_shape_and_diagonal(novel, bank):
    nets = {"rotation": PixelProbe(), "scale": RandomProbe(3), "none": PixelProbe()}
    tests = ["rotation", "scale"]
    m = cross_transform_matrix(nets, tests, novel, 20, rng=np.random.default_rng(9), bank=bank)
    assert len(m) == 3 and all(len(r) == 2 for r in m)
    assert [r[0].train_transform for r in m] == ["rotation", "scale", "none"]
    base_seed = int(np.random.default_rng(9).integers(2**63))
    diag = run_5afc(PixelProbe(), novel, "rotation", 20,
                    rng=np.random.default_rng(cross_cell_seed(base_seed, "rotation")), bank=bank)
    assert m[0][0].value == diag.value
    # identical trials for every row: two pixel probes agree everywhere
    assert [c.value for c in m[0]] == [c.value for c in m[2]]


def test_cross_matrix_needs_baseline(novel):
    with pytest.raises(ConfigError):
        cross_transform_matrix({"rotation": PixelProbe()}, ["rotation"], novel)


def test_results_csv(tmp_path):
    rows = [ResultRow("e", "m", 0, "none", "scale", "5afc_cosine", 0.1 + 0.2, 100, {"test_set": "novel"})]
    write_results_csv(rows, tmp_path / "r.csv", ["test_set"])
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "experiment_id,model,seed,train_transform,test_transform,metric_name,value,n_trials,test_set"
    assert lines[1] == "e,m,0,none,scale,5afc_cosine,0.30000000000000004,100,novel"
