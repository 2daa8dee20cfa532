"""Network architectures for the dehazing and super-resolution stages.

* :class:`GeneratorNet` -- ResNet-style translator (the two mappings LQ->HQ
  and HQ->LQ), tanh output in ``[-1, 1]``.
* :class:`PatchDiscriminator` -- least-squares PatchGAN critic.
* :class:`SRGeneratorNet` -- RRDB x4 super-resolution generator.
* :class:`SRDiscriminator` -- VGG-style critic returning one logit per image.
* :class:`FeatureExtractor` -- frozen VGG16 up to the second pooling layer, or a
  seeded random stand-in with identical output geometry.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F
from safetensors import SafetensorError
from safetensors.torch import load_file, safe_open, save_file

from .imaging import reflect_pad

WEIGHTS_FORMAT_VERSION = 1
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
VGG16_URL_NAME = "vgg16-397923af.pth"


class ShapeError(ValueError):
    pass


# --------------------------------------------------------------------------
# Configs
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class GeneratorConfig:
    base_width: int = 64
    n_residual_blocks: int = 9


@dataclass(frozen=True)
class PatchDiscriminatorConfig:
    base_width: int = 64
    n_strided_layers: int = 3


@dataclass(frozen=True)
class SRGeneratorConfig:
    num_feat: int = 64
    n_rrdb_blocks: int = 23
    growth: int = 32


@dataclass(frozen=True)
class SRDiscriminatorConfig:
    input_size: int = 224
    base_width: int = 64


@dataclass(frozen=True)
class FeatureExtractorConfig:
    mode: str = "random"  # "vgg16" | "random"
    seed: int = 0
    weights_path: str | None = None


# --------------------------------------------------------------------------
# Dehazing generator / discriminator
# --------------------------------------------------------------------------


class ResidualBlock(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.body = nn.Sequential(
            nn.ReflectionPad2d(1), nn.Conv2d(ch, ch, 3), nn.InstanceNorm2d(ch), nn.ReLU(True),
            nn.ReflectionPad2d(1), nn.Conv2d(ch, ch, 3), nn.InstanceNorm2d(ch),
        )

    def forward(self, x):
        return x + self.body(x)


class GeneratorNet(nn.Module):
    """c7s1-w, d2w, d4w, R4w x n, u2w, uw, c7s1-3, tanh."""

    def __init__(self, config: GeneratorConfig = GeneratorConfig()):
        super().__init__()
        self.config = config
        w = config.base_width
        layers = [nn.ReflectionPad2d(3), nn.Conv2d(3, w, 7), nn.InstanceNorm2d(w), nn.ReLU(True)]
        for mult in (1, 2):
            layers += [nn.Conv2d(w * mult, w * mult * 2, 3, stride=2, padding=1),
                       nn.InstanceNorm2d(w * mult * 2), nn.ReLU(True)]
        layers += [ResidualBlock(w * 4) for _ in range(config.n_residual_blocks)]
        for mult in (4, 2):
            layers += [nn.ConvTranspose2d(w * mult, w * mult // 2, 3, stride=2, padding=1, output_padding=1),
                       nn.InstanceNorm2d(w * mult // 2), nn.ReLU(True)]
        layers += [nn.ReflectionPad2d(3), nn.Conv2d(w, 3, 7), nn.Tanh()]
        self.model = nn.Sequential(*layers)

    def forward(self, x):
        h, w = x.shape[-2:]
        if h % 4 or w % 4 or h < 8 or w < 8:
            raise ShapeError(f"generator input must be >= 8 and divisible by 4, got {h}x{w}; "
                             "use generator_forward() to pad automatically")
        return self.model(x)


def generator_forward(net: GeneratorNet, x: torch.Tensor) -> torch.Tensor:
    """Run ``net`` on inputs of any size by reflect-padding up to a multiple of 4
    (minimum 8) and center-cropping the output back."""
    squeeze = x.ndim == 3
    if squeeze:
        x = x.unsqueeze(0)
    h, w = x.shape[-2:]
    ph = max(8, -(-h // 4) * 4) - h
    pw = max(8, -(-w // 4) * 4) - w
    if ph or pw:
        x = reflect_pad(x, ph // 2, ph - ph // 2, pw // 2, pw - pw // 2)
    y = net(x)
    if ph or pw:
        y = y[..., ph // 2: ph // 2 + h, pw // 2: pw // 2 + w]
    return y[0] if squeeze else y


class PatchDiscriminator(nn.Module):
    def __init__(self, config: PatchDiscriminatorConfig = PatchDiscriminatorConfig()):
        super().__init__()
        self.config = config
        w = config.base_width
        layers = [nn.Conv2d(3, w, 4, 2, 1), nn.LeakyReLU(0.2, True)]
        mult = 1
        for i in range(1, config.n_strided_layers):
            prev, mult = mult, min(2**i, 8)
            layers += [nn.Conv2d(w * prev, w * mult, 4, 2, 1), nn.InstanceNorm2d(w * mult), nn.LeakyReLU(0.2, True)]
        prev, mult = mult, min(2**config.n_strided_layers, 8)
        layers += [nn.Conv2d(w * prev, w * mult, 4, 1, 1), nn.InstanceNorm2d(w * mult), nn.LeakyReLU(0.2, True)]
        layers += [nn.Conv2d(w * mult, 1, 4, 1, 1)]
        self.model = nn.Sequential(*layers)

    def output_size(self, size: int) -> int:
        for _ in range(self.config.n_strided_layers):
            size //= 2
        return size - 2

    def forward(self, x):
        h, w = x.shape[-2:]
        if min(h, w) < 16 or min(self.output_size(h), self.output_size(w)) < 1:
            raise ShapeError(f"discriminator input {h}x{w} is too small for "
                             f"{self.config.n_strided_layers} strided layers")
        return self.model(x)


def discriminator_forward(net: PatchDiscriminator, img: torch.Tensor) -> torch.Tensor:
    if img.ndim == 3:
        return net(img.unsqueeze(0))[0]
    return net(img)


# --------------------------------------------------------------------------
# Super-resolution
# --------------------------------------------------------------------------


class ResidualDenseBlock(nn.Module):
    def __init__(self, nf, gc):
        super().__init__()
        self.convs = nn.ModuleList(nn.Conv2d(nf + i * gc, gc, 3, 1, 1) for i in range(4))
        self.conv_out = nn.Conv2d(nf + 4 * gc, nf, 3, 1, 1)
        self.lrelu = nn.LeakyReLU(0.2, True)

    def forward(self, x):
        feats = [x]
        for conv in self.convs:
            feats.append(self.lrelu(conv(torch.cat(feats, 1))))
        return x + 0.2 * self.conv_out(torch.cat(feats, 1))


class RRDB(nn.Module):
    def __init__(self, nf, gc):
        super().__init__()
        self.blocks = nn.Sequential(*(ResidualDenseBlock(nf, gc) for _ in range(3)))

    def forward(self, x):
        return x + 0.2 * self.blocks(x)


class SRGeneratorNet(nn.Module):
    scale = 4

    def __init__(self, config: SRGeneratorConfig = SRGeneratorConfig()):
        super().__init__()
        self.config = config
        nf, gc = config.num_feat, config.growth
        self.conv_first = nn.Conv2d(3, nf, 3, 1, 1)
        self.trunk = nn.Sequential(*(RRDB(nf, gc) for _ in range(config.n_rrdb_blocks)))
        self.trunk_conv = nn.Conv2d(nf, nf, 3, 1, 1)
        self.up1 = nn.Conv2d(nf, nf, 3, 1, 1)
        self.up2 = nn.Conv2d(nf, nf, 3, 1, 1)
        self.hr_conv = nn.Conv2d(nf, nf, 3, 1, 1)
        self.conv_last = nn.Conv2d(nf, 3, 3, 1, 1)
        self.lrelu = nn.LeakyReLU(0.2, True)

    def forward(self, x):
        if x.shape[-3] != 3:
            raise ShapeError(f"expected 3 input channels, got {x.shape[-3]}")
        fea = self.conv_first(x)
        fea = fea + self.trunk_conv(self.trunk(fea))
        fea = self.lrelu(self.up1(F.interpolate(fea, scale_factor=2, mode="nearest")))
        fea = self.lrelu(self.up2(F.interpolate(fea, scale_factor=2, mode="nearest")))
        return self.conv_last(self.lrelu(self.hr_conv(fea)))


def sr_forward(net: SRGeneratorNet, lr: torch.Tensor) -> torch.Tensor:
    """Super-resolve a ``[0, 1]`` image (or batch) by exactly 4x."""
    if lr.ndim == 3:
        return net(lr.unsqueeze(0))[0]
    return net(lr)


class SRDiscriminator(nn.Module):
    """Five stride-2 stages then two linear layers; input must be square of
    ``config.input_size`` (a multiple of 32)."""

    def __init__(self, config: SRDiscriminatorConfig = SRDiscriminatorConfig()):
        super().__init__()
        if config.input_size % 32:
            raise ValueError(f"input_size must be a multiple of 32, got {config.input_size}")
        self.config = config
        nf = config.base_width
        widths = [nf, nf * 2, nf * 4, nf * 8, nf * 8]
        layers, prev = [], 3
        for i, ch in enumerate(widths):
            layers += [nn.Conv2d(prev, ch, 3, 1, 1)]
            if i:
                layers += [nn.BatchNorm2d(ch)]
            layers += [nn.LeakyReLU(0.2, True), nn.Conv2d(ch, ch, 4, 2, 1), nn.BatchNorm2d(ch),
                       nn.LeakyReLU(0.2, True)]
            prev = ch
        self.features = nn.Sequential(*layers)
        side = config.input_size // 32
        self.classifier = nn.Sequential(nn.Linear(prev * side * side, 100), nn.LeakyReLU(0.2, True),
                                        nn.Linear(100, 1))

    def forward(self, x):
        size = self.config.input_size
        if tuple(x.shape[-2:]) != (size, size):
            raise ShapeError(f"SR discriminator expects {size}x{size} input, got {tuple(x.shape[-2:])}")
        return self.classifier(self.features(x).flatten(1))[:, 0]


# --------------------------------------------------------------------------
# Frozen feature extractor
# --------------------------------------------------------------------------

_VGG_CONV_INDICES = (0, 2, 5, 7)


def default_vgg16_path() -> Path:
    env = os.environ.get("MIINET_VGG16_WEIGHTS")
    if env:
        return Path(env)
    hub = Path(os.environ.get("TORCH_HOME", Path.home() / ".cache" / "torch"))
    return hub / "hub" / "checkpoints" / VGG16_URL_NAME


def _conv_stack(widths):
    # conv-relu, conv-relu, pool, conv-relu, conv-relu, pool: VGG16 features[:10]
    c1, c2, c3, c4 = widths
    return nn.Sequential(
        nn.Conv2d(3, c1, 3, padding=1), nn.ReLU(), nn.Conv2d(c1, c2, 3, padding=1), nn.ReLU(),
        nn.MaxPool2d(2, 2),
        nn.Conv2d(c2, c3, 3, padding=1), nn.ReLU(), nn.Conv2d(c3, c4, 3, padding=1), nn.ReLU(),
        nn.MaxPool2d(2, 2),
    )


class FeatureExtractor(nn.Module):
    """Frozen features up to the second max-pool: ``(N, 128, H/4, W/4)``.

    Inputs are network-domain tensors in ``[-1, 1]`` (pass
    ``value_range="unit"`` for ``[0, 1]``). ``mode="vgg16"`` loads ImageNet
    VGG16 weights from ``weights_path`` (or ``$MIINET_VGG16_WEIGHTS``, or the
    torch hub cache) and standardizes inputs with ImageNet statistics;
    ``mode="random"`` builds a narrower seeded random stack and leaves inputs
    in ``[0, 1]``.
    """

    out_channels = 128

    def __init__(self, config: FeatureExtractorConfig = FeatureExtractorConfig()):
        super().__init__()
        self.config = config
        if config.mode == "vgg16":
            self.body = _conv_stack((64, 64, 128, 128))
            self._load_vgg16(Path(config.weights_path) if config.weights_path else default_vgg16_path())
            self.register_buffer("mean", torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1))
            self.register_buffer("std", torch.tensor(IMAGENET_STD).view(1, 3, 1, 1))
        elif config.mode == "random":
            self.body = _conv_stack((16, 16, 32, 128))
            gen = torch.Generator().manual_seed(config.seed)
            with torch.no_grad():
                for m in self.body:
                    if isinstance(m, nn.Conv2d):
                        fan_in = m.in_channels * 9
                        m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * (2.0 / fan_in) ** 0.5)
                        m.bias.zero_()
            self.mean = self.std = None
        else:
            raise ValueError(f"unknown feature extractor mode {config.mode!r}")
        self.requires_grad_(False)
        self.eval()

    def _load_vgg16(self, path: Path):
        if not path.is_file():
            raise FileNotFoundError(
                f"VGG16 weights not found at {path}; set MIINET_VGG16_WEIGHTS to a torchvision "
                f"{VGG16_URL_NAME} file or use FeatureExtractorConfig(mode='random')")
        state = torch.load(path, map_location="cpu", weights_only=True)
        body = {}
        for idx in _VGG_CONV_INDICES:
            for kind in ("weight", "bias"):
                key = next((k for k in (f"features.{idx}.{kind}", f"{idx}.{kind}") if k in state), None)
                if key is None:
                    raise KeyError(f"{path} is missing VGG16 layer features.{idx}.{kind}")
                body[f"{idx}.{kind}"] = state[key]
        self.body.load_state_dict(body)

    def train(self, mode: bool = True):
        # Always frozen: ignore requests to switch to training mode.
        return super().train(False)

    def forward(self, x, value_range: str = "symmetric"):
        h, w = x.shape[-2:]
        if min(h, w) < 4:
            raise ShapeError(f"feature extractor needs inputs of at least 4x4, got {h}x{w}")
        if value_range == "symmetric":
            x = (x + 1.0) / 2.0
        if self.mean is not None:
            x = (x - self.mean.to(x.dtype)) / self.std.to(x.dtype)
        return self.body(x)


def extract_features(fe: FeatureExtractor, img: torch.Tensor, value_range: str = "symmetric") -> torch.Tensor:
    if img.ndim == 3:
        return fe(img.unsqueeze(0), value_range)[0]
    return fe(img, value_range)


# --------------------------------------------------------------------------
# Initialization and weight archives
# --------------------------------------------------------------------------

NETWORK_CLASSES = {
    "GeneratorNet": (GeneratorNet, GeneratorConfig),
    "PatchDiscriminator": (PatchDiscriminator, PatchDiscriminatorConfig),
    "SRGeneratorNet": (SRGeneratorNet, SRGeneratorConfig),
    "SRDiscriminator": (SRDiscriminator, SRDiscriminatorConfig),
}


def build(kind: str, config=None, seed: int | None = None) -> nn.Module:
    cls, cfg_cls = NETWORK_CLASSES[kind]
    if isinstance(config, dict):
        config = cfg_cls(**config)
    net = cls(config or cfg_cls())
    if seed is not None:
        init_params(net, seed)
    return net


def init_params(net: nn.Module, seed: int) -> nn.Module:
    """Seeded initialisation.

    Translation networks: Gaussian(0, 0.02) conv weights, zero biases, norm
    scales ~N(1, 0.02). Super-resolution networks: fan-in Kaiming normal,
    scaled by 0.1 inside dense blocks, zero biases, unit norm scales.
    """
    gen = torch.Generator().manual_seed(seed)
    kaiming = isinstance(net, (SRGeneratorNet, SRDiscriminator))
    dense = {id(m) for block in net.modules() if isinstance(block, ResidualDenseBlock)
             for m in block.modules()}
    with torch.no_grad():
        for m in net.modules():
            if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
                w = torch.randn(m.weight.shape, generator=gen)
                if kaiming:
                    fan_in = m.weight[0].numel()
                    w *= math.sqrt(2.0 / fan_in) * (0.1 if id(m) in dense else 1.0)
                else:
                    w *= 0.02
                m.weight.copy_(w)
                if m.bias is not None:
                    m.bias.zero_()
            elif isinstance(m, nn.BatchNorm2d):
                noise = torch.randn(m.weight.shape, generator=gen)
                m.weight.copy_(torch.ones_like(noise) if kaiming else 1.0 + noise * 0.02)
                m.bias.zero_()
    return net


def save_weights(net: nn.Module, path, **meta) -> Path:
    """Write named float32 arrays plus a JSON metadata block (safetensors).

    Metadata keys: ``format_version``, ``class``, ``config`` and any extra
    keyword arguments such as ``seed`` or ``epoch``.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors = {k: v.detach().to(torch.float32).contiguous() for k, v in net.state_dict().items()}
    info = {"format_version": WEIGHTS_FORMAT_VERSION, "class": type(net).__name__,
            "config": asdict(net.config), **meta}
    save_file(tensors, str(path), metadata={"miinet": json.dumps(info, sort_keys=True)})
    return path


def read_weights_metadata(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"weights file not found: {path}")
    try:
        with safe_open(str(path), framework="pt") as f:
            meta = f.metadata() or {}
    except (SafetensorError, OSError, ValueError) as exc:
        raise ValueError(f"corrupt weights archive {path}: {exc}") from exc
    if "miinet" not in meta:
        raise ValueError(f"{path} has no miinet metadata block")
    return json.loads(meta["miinet"])


def load_weights(path, net: nn.Module | None = None) -> nn.Module:
    """Load an archive into ``net`` (or a network rebuilt from its metadata).

    Every parameter is checked against the network's own shapes; mismatches
    raise :class:`ShapeError` naming the parameter.
    """
    meta = read_weights_metadata(path)
    if net is None:
        net = build(meta["class"], meta["config"])
    elif meta["class"] != type(net).__name__:
        raise ValueError(f"{path} holds a {meta['class']}, not a {type(net).__name__}")
    try:
        tensors = load_file(str(path))
    except (SafetensorError, OSError) as exc:
        raise ValueError(f"corrupt weights archive {path}: {exc}") from exc
    own = net.state_dict()
    missing = sorted(set(own) - set(tensors))
    extra = sorted(set(tensors) - set(own))
    if missing or extra:
        raise ShapeError(f"{path}: parameter names differ (missing {missing}, unexpected {extra})")
    for name, value in own.items():
        if tuple(tensors[name].shape) != tuple(value.shape):
            raise ShapeError(f"{path}: parameter {name} has shape {tuple(tensors[name].shape)}, "
                             f"network expects {tuple(value.shape)}")
    net.load_state_dict({k: tensors[k].to(v.dtype) for k, v in own.items()})
    return net
