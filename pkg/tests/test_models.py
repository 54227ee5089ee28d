import numpy as np
import pytest
import torch
from _oracles import finite_difference_check

from invarlab.datasets import DEFAULT_STATS, StimulusBank, build_manifest, normalize
from invarlab.errors import ConfigError, ShapeError
from invarlab.models import (
    EMBEDDING_DIM,
    build_model,
    classify,
    count_parameters,
    dissimilarity,
    embed,
    last_layer_activations,
)
from invarlab.stimuli3d import DEFAULT_NOVEL_CLASSES, make_class_objects
from invarlab.training import pair_loss


def images(n, seed=0):
    return np.random.default_rng(seed).standard_normal((n, 128, 128, 3)).astype(np.float32)


@pytest.fixture(scope="module")
def sd():
    return build_model("small2", "samediff", seed=0)


@pytest.fixture(scope="module")
def clf():
    return build_model("small2", "classifier", num_classes=10, seed=0)


def test_same_seed_same_weights():
    a = build_model("small2", "classifier", num_classes=10, seed=0)
    b = build_model("small2", "classifier", num_classes=10, seed=0)
    c = build_model("small2", "classifier", num_classes=10, seed=1)
    for (ka, va), (_, vb), (_, vc) in zip(a.state_dict().items(), b.state_dict().items(), c.state_dict().items()):
        assert torch.equal(va, vb), ka
    assert any(not torch.equal(va, vc) for va, vc in zip(a.state_dict().values(), c.state_dict().values()))


def test_build_does_not_touch_global_rng():
    torch.manual_seed(5)
    expected = torch.rand(1)
    torch.manual_seed(5)
    build_model("small2", "samediff", seed=3)
    assert torch.equal(torch.rand(1), expected)


def test_vgg11_embedding_is_512():
    net = build_model("vgg11", "samediff", seed=0)
    assert EMBEDDING_DIM == 512
    assert embed(net, images(1)).shape == (1, 512)


@pytest.mark.parametrize("arch,role", [("bogus", "samediff"), ("small2", "regressor")])
def test_unknown_names(arch, role):
    with pytest.raises(ConfigError):
        build_model(arch, role, num_classes=10)


def test_classifier_needs_classes():
    with pytest.raises(ConfigError):
        build_model("small2", "classifier")


def test_small_backbones_are_desk_sized():
    for arch in ("small2", "small3"):
        n = count_parameters(build_model(arch, "classifier", num_classes=10))
        assert 20_000 < n < 1_000_000


def test_embedding_range_and_shape(sd):
    z = embed(sd, images(3) * 50)
    assert z.shape == (3, 512)
    assert np.all((z > 0) & (z < 1))
    assert np.array_equal(embed(sd, images(3) * 50), z)


def test_dissimilarity_symmetric_and_bounded(sd):
    a, b = images(4, 1), images(4, 2)
    d1, d2 = dissimilarity(sd, a, b), dissimilarity(sd, b, a)
    assert np.array_equal(d1, d2)
    assert np.all((d1 > 0) & (d1 < 1))


def test_self_dissimilarity_is_head_of_zero(sd):
    a = images(3, 4)
    with torch.no_grad():
        h0 = float(sd.head(torch.zeros(1, 512)))
    assert np.allclose(dissimilarity(sd, a, a), h0, atol=1e-7, rtol=0)


def test_shape_errors(sd):
    with pytest.raises(ShapeError):
        dissimilarity(sd, images(2), images(3))
    with pytest.raises(ShapeError):
        embed(sd, np.zeros((2, 3, 128, 128), dtype=np.float32))


def test_classifier_logits(clf):
    out = classify(clf, images(5))
    assert out.shape == (5, 10)
    assert np.array_equal(classify(clf, images(5)), out)


def test_last_layer(clf, sd):
    x = images(1)[0]
    assert last_layer_activations(sd, x).shape == (512,)
    a = last_layer_activations(clf, x)
    assert a.shape == (clf.feature_dim,)
    assert np.array_equal(last_layer_activations(clf, x), a)
    assert last_layer_activations(clf, x, "logits").shape == (10,)
    with pytest.raises(ConfigError):
        last_layer_activations(clf, x, "conv1")


def test_eval_helpers_keep_training_flag(sd):
    sd.train()
    embed(sd, images(1))
    assert sd.training
    sd.eval()


# ---------------------------------------------------------------------------
# gradients against central finite differences (float64)


def test_pair_loss_gradient():
    net = build_model("small2", "samediff", seed=0).double()
    x1 = torch.from_numpy(images(4, 10)).permute(0, 3, 1, 2).double()
    x2 = torch.from_numpy(images(4, 11)).permute(0, 3, 1, 2).double()
    t = torch.tensor([0, 1, 1, 0])
    err = finite_difference_check(net, lambda: pair_loss(net(x1, x2), t))
    assert err <= 1e-3


def test_pair_loss_gradient_wrt_embeddings():
    net = build_model("small2", "samediff", seed=0).double()
    with torch.no_grad():
        z1 = net.embed(torch.from_numpy(images(4, 12)).permute(0, 3, 1, 2).double())
        z2 = net.embed(torch.from_numpy(images(4, 13)).permute(0, 3, 1, 2).double())
    z1.requires_grad_(True)
    t = torch.tensor([1, 0, 1, 0])
    loss = pair_loss(net.score(z1, z2), t)
    (g,) = torch.autograd.grad(loss, z1)
    fd = torch.zeros_like(z1)
    eps = 1e-6
    with torch.no_grad():
        for idx in np.ndindex(*z1.shape):
            orig = float(z1[idx])
            z1[idx] = orig + eps
            up = float(pair_loss(net.score(z1, z2), t))
            z1[idx] = orig - eps
            down = float(pair_loss(net.score(z1, z2), t))
            z1[idx] = orig
            fd[idx] = (up - down) / (2 * eps)
    rel = float((fd - g).norm() / (fd.norm() + g.norm()))
    assert rel <= 1e-3


def test_cross_entropy_gradient():
    net = build_model("small2", "classifier", num_classes=10, seed=0).double()
    x = torch.from_numpy(images(4, 20)).permute(0, 3, 1, 2).double()
    y = torch.tensor([0, 3, 7, 9])
    ce = torch.nn.CrossEntropyLoss()
    assert finite_difference_check(net, lambda: ce(net(x), y)) <= 1e-3


# ---------------------------------------------------------------------------
# vanilla networks collapse their representations


def test_vanilla_vgg11_uniformity():
    bank = StimulusBank()
    objs = make_class_objects(DEFAULT_NOVEL_CLASSES[:6], 1, seed=3)
    m = build_manifest(objs, "none", 1, 0, bank=bank)
    x = normalize(bank.images(m.records), DEFAULT_STATS)
    a = last_layer_activations(build_model("vgg11", "classifier", num_classes=10, seed=0), x)
    n = a / np.linalg.norm(a, axis=1, keepdims=True)
    s = n @ n.T
    assert s[np.triu_indices(len(a), 1)].mean() > 0.9
