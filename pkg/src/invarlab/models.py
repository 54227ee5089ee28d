"""Backbones, the supervised classifier and the same/different network."""

from __future__ import annotations

from typing import Callable

import numpy as np
import torch
from torch import nn

from invarlab.errors import ConfigError, ShapeError
from invarlab.stimuli3d.render import IMAGE_SIZE

EMBEDDING_DIM = 512
ROLES = ("classifier", "samediff")
PROBE_LAYERS = ("head_input", "logits")


class SmallConvNet(nn.Module):
    """Desk-scale backbone: ``n_blocks`` conv/ReLU/max-pool blocks and one hidden FC layer.

    The first convolution has stride 4 so a 128x128 input is cheap on a CPU.
    """

    def __init__(self, n_blocks: int = 2, width: int = 16, feature_dim: int = 128):
        super().__init__()
        layers: list[nn.Module] = [nn.Conv2d(3, width, 5, stride=4, padding=2), nn.ReLU(), nn.MaxPool2d(2)]
        side, ch = IMAGE_SIZE // 8, width
        for _ in range(n_blocks - 1):
            layers += [nn.Conv2d(ch, ch * 2, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2)]
            ch *= 2
            side //= 2
        self.features = nn.Sequential(*layers)
        self.fc = nn.Sequential(nn.Flatten(), nn.Linear(ch * side * side, feature_dim), nn.ReLU())
        self.feature_dim = feature_dim

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc(self.features(x))


def _torchvision_backbone(name: str) -> tuple[nn.Module, int]:
    import torchvision.models as tvm

    if name in ("alexnet", "vgg11", "vgg19"):
        net = getattr(tvm, name)(weights=None)
        dim = net.classifier[-1].in_features
        net.classifier = nn.Sequential(*list(net.classifier.children())[:-1])
        return net, dim
    if name in ("resnet18", "resnet50"):
        net = getattr(tvm, name)(weights=None)
        dim = net.fc.in_features
        net.fc = nn.Identity()
        return net, dim
    if name == "googlenet":
        net = tvm.googlenet(weights=None, aux_logits=False, init_weights=True)
        dim = net.fc.in_features
        net.fc = nn.Identity()
        return net, dim
    net = tvm.densenet201(weights=None)
    dim = net.classifier.in_features
    net.classifier = nn.Identity()
    return net, dim


BACKBONES: dict[str, Callable[[], tuple[nn.Module, int]]] = {
    "small2": lambda: (lambda m: (m, m.feature_dim))(SmallConvNet(2)),
    "small3": lambda: (lambda m: (m, m.feature_dim))(SmallConvNet(3)),
    **{
        name: (lambda n=name: _torchvision_backbone(n))
        for name in ("alexnet", "vgg11", "vgg19", "resnet18", "resnet50", "googlenet", "densenet201")
    },
}


class ClassifierNet(nn.Module):
    def __init__(self, backbone: nn.Module, feature_dim: int, num_classes: int, arch: str = ""):
        super().__init__()
        self.backbone = backbone
        self.head = nn.Linear(feature_dim, num_classes)
        self.feature_dim = feature_dim
        self.num_classes = num_classes
        self.arch = arch
        self.role = "classifier"

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self.backbone(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.backbone(x))


class SameDiffNet(nn.Module):
    """Embedding g (backbone, FC to 512, sigmoid) and dissimilarity head h (FC to 1, sigmoid).

    Pairs are aggregated by the absolute embedding difference.
    """

    def __init__(self, backbone: nn.Module, feature_dim: int, arch: str = ""):
        super().__init__()
        self.embedder = nn.Sequential(backbone, nn.Linear(feature_dim, EMBEDDING_DIM), nn.Sigmoid())
        self.head = nn.Sequential(nn.Linear(EMBEDDING_DIM, 1), nn.Sigmoid())
        self.feature_dim = feature_dim
        self.arch = arch
        self.role = "samediff"

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        return self.embedder(x)

    def score(self, z1: torch.Tensor, z2: torch.Tensor) -> torch.Tensor:
        return self.head(torch.abs(z1 - z2)).squeeze(-1)

    def forward(self, x1: torch.Tensor, x2: torch.Tensor) -> torch.Tensor:
        return self.score(self.embed(x1), self.embed(x2))


def build_model(
    arch: str,
    role: str = "samediff",
    num_classes: int | None = None,
    seed: int = 0,
) -> ClassifierNet | SameDiffNet:
    """Construct a freshly initialized network; weights depend only on the arguments."""
    if arch not in BACKBONES:
        raise ConfigError(f"unknown architecture {arch!r}; known: {sorted(BACKBONES)}")
    if role not in ROLES:
        raise ConfigError(f"unknown role {role!r}; expected one of {ROLES}")
    if role == "classifier" and (num_classes is None or num_classes < 2):
        raise ConfigError("a classifier needs num_classes >= 2")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        backbone, dim = BACKBONES[arch]()
        net = ClassifierNet(backbone, dim, num_classes, arch) if role == "classifier" else SameDiffNet(backbone, dim, arch)
    return net.eval()


# ---------------------------------------------------------------------------
# inference helpers: inputs are normalized channels-last arrays (B, H, W, 3)


def to_tensor(images, net: nn.Module | None = None) -> torch.Tensor:
    x = images if isinstance(images, torch.Tensor) else torch.from_numpy(np.ascontiguousarray(images))
    if x.ndim == 3:
        x = x.unsqueeze(0)
    if x.ndim != 4 or x.shape[-1] != 3 or x.shape[1] != x.shape[2]:
        raise ShapeError(f"expected (B, H, W, 3) normalized images, got {tuple(x.shape)}")
    dtype = next(net.parameters()).dtype if net is not None else torch.float32
    return x.permute(0, 3, 1, 2).to(dtype)


def _eval_forward(net: nn.Module, fn, *xs):
    was_training = net.training
    net.eval()
    try:
        with torch.no_grad():
            return fn(*xs)
    finally:
        net.train(was_training)


def embed(net: SameDiffNet, images) -> np.ndarray:
    x = to_tensor(images, net)
    return _eval_forward(net, net.embed, x).double().numpy()


def dissimilarity(net: SameDiffNet, x1, x2) -> np.ndarray:
    a, b = to_tensor(x1, net), to_tensor(x2, net)
    if a.shape != b.shape:
        raise ShapeError(f"pair shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    return _eval_forward(net, net.forward, a, b).double().numpy()


def classify(net: ClassifierNet, images) -> np.ndarray:
    return _eval_forward(net, net.forward, to_tensor(images, net)).double().numpy()


def last_layer_activations(net: ClassifierNet | SameDiffNet, images, probe_layer: str = "head_input") -> np.ndarray:
    """Final hidden representation: the class-head input, or the 512-unit embedding.

    A single HxWx3 image returns a vector; a batch returns a matrix.
    """
    if probe_layer not in PROBE_LAYERS:
        raise ConfigError(f"unknown probe layer {probe_layer!r}")
    single = np.ndim(images) == 3
    x = to_tensor(images, net)
    if isinstance(net, SameDiffNet):
        out = _eval_forward(net, net.embed, x)
    elif probe_layer == "logits":
        out = _eval_forward(net, net.forward, x)
    else:
        out = _eval_forward(net, net.features, x)
    out = out.double().numpy()
    return out[0] if single else out


def count_parameters(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())
