import copy
import dataclasses

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from invarlab.datasets import DEFAULT_STATS, StimulusBank, build_manifest, make_pair_batch, normalize
from invarlab.errors import ConfigError, IoError, TrainingDivergedError
from invarlab.models import build_model, to_tensor
from invarlab.stimuli3d import make_class_objects
from invarlab.training import (
    TrainConfig,
    TrainHistory,
    ema_update,
    load_checkpoint,
    pair_loss,
    save_checkpoint,
    should_stop,
    train_samediff,
    train_supervised,
)
from invarlab.transforms import TransformRanges


@pytest.fixture(scope="module")
def bank():
    return StimulusBank()


@pytest.fixture(scope="module")
def tiny(bank):
    objs = make_class_objects(["cube", "ring"], 1, seed=0)
    return build_manifest(objs, "none", 1, 0, bank=bank)


@pytest.fixture(scope="module")
def small(bank):
    objs = make_class_objects(["cube", "ring", "spike", "disc"], 2, seed=0)
    return build_manifest(objs, "none", 1, 0, bank=bank)


# ---------------------------------------------------------------------------
# EMA and stopping rule


def test_ema_example():
    assert ema_update(1.0, 0.0, 0.1) == pytest.approx(0.9)
    assert ema_update(None, 0.7, 0.1) == 0.7


@given(c=st.floats(-1e3, 1e3), a=st.floats(0.001, 1.0))
def test_ema_fixed_point(c, a):
    assert ema_update(c, c, a) == pytest.approx(c, abs=1e-9)


def test_ema_converges_monotonically():
    ema, dist = 5.0, []
    for _ in range(200):
        ema = ema_update(ema, 1.0, 0.1)
        dist.append(abs(ema - 1.0))
    assert all(b <= a for a, b in zip(dist, dist[1:]))
    assert dist[-1] < 1e-8


def test_stop_on_constant():
    assert not should_stop([1.0] * 250)
    assert should_stop([1.0] * 251)


def test_no_stop_while_improving():
    seq = [1.0 - 0.02 * (i // 100) for i in range(2000)]
    assert not any(should_stop(seq[:n]) for n in range(1, len(seq) + 1, 37))
    assert not should_stop(seq)


def test_stop_on_increase():
    assert should_stop([1.0 + 0.001 * i for i in range(250)], patience=249)
    assert should_stop(list(np.linspace(1, 2, 251)))


def test_small_improvements_do_not_reset():
    # 0.005 below best is not enough when 0.01 is required
    assert should_stop([1.0] + [0.995] * 250)
    assert not should_stop([1.0] + [0.985] * 250)


def test_stop_replayable_from_history(tmp_path, small, bank):
    net = build_model("small2", "samediff", seed=0)
    cfg = TrainConfig(max_iters=40, batch_size=8, stop_patience_iters=5, stop_min_decrease=0.5)
    _, hist = train_samediff(net, small, "none", cfg, bank=bank)
    assert hist.stop_reason == "converged"
    assert hist.iterations == 6
    assert should_stop(hist.ema_loss, 0.5, 5)
    assert not should_stop(hist.ema_loss[:-1], 0.5, 5)


# ---------------------------------------------------------------------------
# config


def test_defaults():
    cfg = TrainConfig()
    assert cfg.learning_rate == 1e-3 and cfg.batch_size == 64
    assert cfg.ema_alpha == 0.1 and cfg.stop_min_decrease == 0.01 and cfg.stop_patience_iters == 250
    assert cfg.max_iters == 20_000


@pytest.mark.parametrize("field,value", [("ema_alpha", 0.0), ("ema_alpha", 1.5), ("batch_size", 0),
                                         ("learning_rate", -1.0), ("stop_min_decrease", -0.1)])
def test_bad_config(field, value):
    with pytest.raises(ConfigError):
        TrainConfig(**{field: value})


# ---------------------------------------------------------------------------
# pair loss


def test_pair_loss_examples():
    assert float(pair_loss(torch.tensor([0.5]), torch.tensor([0]))) == 0.25
    y = torch.tensor([0.0, 1.0, 1.0], requires_grad=True)
    loss = pair_loss(y, torch.tensor([0, 1, 1]))
    loss.backward()
    assert float(loss.detach()) == 0.0 and torch.all(y.grad == 0)


@given(st.lists(st.tuples(st.floats(0, 1), st.integers(0, 1)), min_size=1, max_size=20))
def test_pair_loss_scalar_oracle(pairs):
    y = torch.tensor([p[0] for p in pairs], dtype=torch.float64)
    t = torch.tensor([p[1] for p in pairs])
    assert float(pair_loss(y, t)) == pytest.approx(sum((a - b) ** 2 for a, b in pairs), abs=1e-9)


def test_loop_loss_matches_independent_evaluation(small, bank):
    cfg = TrainConfig(max_iters=1, batch_size=8, seed=3)
    net = build_model("small2", "samediff", seed=0)
    fresh = copy.deepcopy(net)
    _, hist = train_samediff(net, small, "rotation", cfg, bank=bank)
    batch = make_pair_batch(small, 0.5, 8, np.random.default_rng(3), "rotation", TransformRanges(), bank)
    with torch.no_grad():
        a = fresh(to_tensor(normalize(bank.images(batch.first), DEFAULT_STATS)),
                  to_tensor(normalize(bank.images(batch.second), DEFAULT_STATS)))
    expected = sum((float(y) - int(t)) ** 2 for y, t in zip(a, batch.targets)) / len(batch)
    assert hist.loss[0] == pytest.approx(expected, abs=1e-6)


# ---------------------------------------------------------------------------
# loops


def test_supervised_tiny_reaches_perfect_accuracy(tiny, bank):
    net = build_model("small2", "classifier", num_classes=2, seed=0)
    cfg = TrainConfig(max_iters=200, batch_size=16)
    _, hist = train_supervised(net, tiny, "none", cfg, bank=bank)
    assert 1.0 in hist.accuracy
    assert hist.accuracy.index(1.0) < cfg.max_iters - 1


def test_supervised_class_count_mismatch(tiny, bank):
    net = build_model("small2", "classifier", num_classes=3, seed=0)
    with pytest.raises(ConfigError):
        train_supervised(net, tiny, "none", TrainConfig(max_iters=1), bank=bank)


def test_training_deterministic(small, bank):
    cfg = TrainConfig(max_iters=4, batch_size=8, seed=1)
    a, ha = train_samediff(build_model("small2", "samediff", seed=0), small, "scale", cfg, bank=bank)
    b, hb = train_samediff(build_model("small2", "samediff", seed=0), small, "scale", cfg, bank=bank)
    assert ha.loss == hb.loss
    for va, vb in zip(a.state_dict().values(), b.state_dict().values()):
        assert torch.equal(va, vb)


def test_divergence_detected(small, bank):
    net = build_model("small2", "samediff", seed=0)
    with torch.no_grad():
        net.head[0].weight.fill_(float("nan"))
    with pytest.raises(TrainingDivergedError):
        train_samediff(net, small, "none", TrainConfig(max_iters=3, batch_size=4), bank=bank)


def test_ema_series_consistent(small, bank):
    cfg = TrainConfig(max_iters=10, batch_size=8)
    _, h = train_samediff(build_model("small2", "samediff", seed=0), small, "none", cfg, bank=bank)
    ema = None
    for loss, e in zip(h.loss, h.ema_loss):
        ema = ema_update(ema, loss, 0.1)
        assert e == pytest.approx(ema, abs=1e-12)


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_round_trip(tmp_path, small, bank):
    cfg = TrainConfig(max_iters=3, batch_size=4)
    net, hist = train_samediff(build_model("small2", "samediff", seed=0), small, "none", cfg,
                               bank=bank, checkpoint_dir=tmp_path / "ck")
    loaded, meta = load_checkpoint(tmp_path / "ck")
    assert meta["architecture"] == "small2" and meta["role"] == "samediff"
    assert meta["train_transform"] == "none" and meta["iterations"] == 3
    for va, vb in zip(net.state_dict().values(), loaded.state_dict().values()):
        assert torch.equal(va, vb)
    back = TrainHistory.from_csv(tmp_path / "ck" / "history.csv")
    assert back.loss == hist.loss and back.ema_loss == hist.ema_loss


def test_classifier_checkpoint_keeps_classes(tmp_path):
    net = build_model("small2", "classifier", num_classes=7, seed=2)
    save_checkpoint(net, tmp_path, {"seed": 2})
    loaded, meta = load_checkpoint(tmp_path)
    assert meta["K"] == 7 and loaded.num_classes == 7


def test_missing_checkpoint(tmp_path):
    with pytest.raises(IoError):
        load_checkpoint(tmp_path)


def test_config_from_dict():
    cfg = TrainConfig.from_dict({"max_iters": 5, "seed": 2})
    assert dataclasses.replace(TrainConfig(), max_iters=5, seed=2) == cfg
