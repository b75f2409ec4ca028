"""The five networks: shape encoder, color encoder, feature discriminator,
generator and image discriminator.

Images enter every public function channels-last, ``(B, H, W, 3)`` in [0, 1].
Two profiles exist: ``desk`` (small residual conv nets, trains on a laptop
CPU) and ``paper`` (ResNet-50 encoders, ResNet-18 image discriminator,
2048-d shape feature at 256x128 input).
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ShapeMismatchError

PROB_EPS = 1e-7
NETWORKS = ("shape_encoder", "color_encoder", "feature_discriminator", "generator", "image_discriminator")


@dataclass
class ModelConfig:
    profile: str = "desk"
    height: int = 64
    width: int = 32
    num_classes: int = 50
    feature_dim: int = 128
    color_dim: int = 64
    encoder_channels: tuple = (16, 32, 64, 128)
    encoder_strides: tuple = (2, 2, 2, 1)
    color_channels: tuple = (16, 32, 64)
    generator_channels: int = 128
    generator_blocks: int = 6
    disc_channels: tuple = (16, 32, 64)
    feature_disc_hidden: int = 128

    @classmethod
    def paper(cls, num_classes: int = 50) -> "ModelConfig":
        return cls(profile="paper", height=256, width=128, num_classes=num_classes,
                   feature_dim=2048, color_dim=256, generator_channels=256)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        from .config import strict_fields
        kw = strict_fields(cls, d, "model")
        for k in ("encoder_channels", "encoder_strides", "color_channels", "disc_channels"):
            if k in kw:
                kw[k] = tuple(kw[k])
        return cls(**kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    def validate(self) -> None:
        if self.profile not in ("desk", "paper"):
            raise ConfigError(f"unknown model profile {self.profile!r} (expected 'desk' or 'paper')")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2 (got {self.num_classes})")
        if self.profile == "desk":
            if len(self.encoder_channels) != len(self.encoder_strides):
                raise ConfigError("encoder_channels and encoder_strides differ in length")
            down = math.prod(self.encoder_strides)
            if self.height % down or self.width % down:
                raise ConfigError(f"image size {self.height}x{self.width} not divisible by encoder stride {down}")
            if down & (down - 1):
                raise ConfigError("encoder downsampling must be a power of two")


class ShapeFeature(NamedTuple):
    vector: torch.Tensor   # (B, d)
    map: torch.Tensor      # (B, C, h, w), pre-pooling


def _norm(c: int) -> nn.Module:
    return nn.GroupNorm(min(8, c), c)


class ConvResBlock(nn.Module):
    def __init__(self, cin, cout, stride=1, norm=_norm):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1)
        self.n1 = norm(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1)
        self.n2 = norm(cout)
        self.skip = None
        if stride != 1 or cin != cout:
            self.skip = nn.Conv2d(cin, cout, 1, stride, 0)

    def forward(self, x):
        h = F.relu(self.n1(self.conv1(x)))
        h = self.n2(self.conv2(h))
        s = x if self.skip is None else self.skip(x)
        return F.relu(h + s)


def _instance_norm(c: int) -> nn.Module:
    return nn.InstanceNorm2d(c, affine=True)


def fan_in_init(module: nn.Module) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)


class ShapeEncoder(nn.Module):
    """Residual conv trunk -> spatial map; pooled map -> linear projection -> f^s.

    Owns the identity classifier used by the identity loss.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        if cfg.profile == "paper":
            self.trunk = _resnet_trunk("resnet50")
            map_channels = 2048
            self.proj = nn.Identity() if cfg.feature_dim == 2048 else nn.Linear(2048, cfg.feature_dim)
        else:
            layers = [nn.Conv2d(3, cfg.encoder_channels[0], 3, 1, 1), _norm(cfg.encoder_channels[0]), nn.ReLU()]
            cin = cfg.encoder_channels[0]
            for c, s in zip(cfg.encoder_channels, cfg.encoder_strides):
                layers.append(ConvResBlock(cin, c, s))
                cin = c
            self.trunk = nn.Sequential(*layers)
            map_channels = cin
            self.proj = nn.Linear(map_channels, cfg.feature_dim)
        self.map_channels = map_channels
        self.classifier = nn.Linear(cfg.feature_dim, cfg.num_classes)

    def forward(self, x) -> ShapeFeature:
        fmap = self.trunk(x)
        vec = self.proj(fmap.mean(dim=(2, 3)))
        return ShapeFeature(vec, fmap)


class ColorEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        if cfg.profile == "paper":
            self.trunk = _resnet_trunk("resnet50")
            cin = 2048
        else:
            layers = [nn.Conv2d(3, cfg.color_channels[0], 3, 1, 1), nn.ReLU()]
            cin = cfg.color_channels[0]
            for c in cfg.color_channels:
                layers.append(ConvResBlock(cin, c, 2))
                cin = c
            self.trunk = nn.Sequential(*layers)
        self.head = nn.Linear(cin, cfg.color_dim)

    def forward(self, x):
        return self.head(self.trunk(x).mean(dim=(2, 3)))


class FeatureDiscriminator(nn.Module):
    """Desk: 3-layer MLP on f^s. Paper: 5 conv blocks on the pre-pooling map."""

    def __init__(self, cfg: ModelConfig, map_channels: int):
        super().__init__()
        self.on_map = cfg.profile == "paper"
        if self.on_map:
            chans = [map_channels, 512, 256, 128, 64, 32]
            blocks = []
            for a, b in zip(chans[:-1], chans[1:]):
                blocks += [nn.Conv2d(a, b, 3, 1, 1), nn.LeakyReLU(0.2)]
            self.net = nn.Sequential(*blocks)
            self.head = nn.Linear(chans[-1], 1)
        else:
            h = cfg.feature_disc_hidden
            self.net = nn.Sequential(
                nn.Linear(cfg.feature_dim, h), nn.LeakyReLU(0.2),
                nn.Linear(h, h // 2), nn.LeakyReLU(0.2),
            )
            self.head = nn.Linear(h // 2, 1)

    def forward(self, f):
        h = self.net(f)
        if self.on_map:
            h = h.mean(dim=(2, 3))
        return self.head(h).squeeze(-1)


class Generator(nn.Module):
    """Shape map with the color vector broadcast on its channels -> RGB image."""

    def __init__(self, cfg: ModelConfig, map_channels: int, map_size: tuple):
        super().__init__()
        n_up = int(round(math.log2(cfg.height / map_size[0])))
        if 2 ** n_up * map_size[0] != cfg.height or 2 ** n_up * map_size[1] != cfg.width:
            raise ConfigError(f"generator cannot upsample {map_size} to {cfg.height}x{cfg.width}")
        c = cfg.generator_channels
        self.fuse = nn.Conv2d(map_channels + cfg.color_dim, c, 1)
        base = max(cfg.generator_blocks - n_up, 0)
        layers = [ConvResBlock(c, c, norm=_instance_norm) for _ in range(base)]
        for _ in range(n_up):
            nc = max(c // 2, 16)
            layers += [nn.Upsample(scale_factor=2, mode="nearest"), ConvResBlock(c, nc, norm=_instance_norm)]
            c = nc
        self.body = nn.Sequential(*layers)
        self.out = nn.Conv2d(c, 3, 3, 1, 1)

    def forward(self, fmap, fc):
        b, _, h, w = fmap.shape
        z = torch.cat([fmap, fc[:, :, None, None].expand(b, fc.shape[1], h, w)], dim=1)
        return torch.sigmoid(self.out(self.body(self.fuse(z))))


class ImageDiscriminator(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        if cfg.profile == "paper":
            import torchvision
            net = torchvision.models.resnet18(weights=None)
            net.fc = nn.Linear(512, 1)
            self.net = net
        else:
            layers = []
            cin = 3
            for c in cfg.disc_channels:
                layers += [nn.Conv2d(cin, c, 4, 2, 1), nn.LeakyReLU(0.2)]
                cin = c
            self.features = nn.Sequential(*layers)
            self.head = nn.Linear(cin, 1)
            self.net = None

    def forward(self, x):
        if self.net is not None:
            return self.net(x).squeeze(-1)
        return self.head(self.features(x).mean(dim=(2, 3))).squeeze(-1)


def _resnet_trunk(name: str) -> nn.Module:
    import torchvision
    net = getattr(torchvision.models, name)(weights=None)
    return nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool, net.layer1, net.layer2, net.layer3, net.layer4)


class ModelBundle(nn.Module):
    """Container for the five networks; each is its own parameter group."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.config = cfg
        self.shape_encoder = ShapeEncoder(cfg)
        self.shape_encoder.eval()   # keep batch-norm statistics untouched by the probe
        with torch.no_grad():
            probe = self.shape_encoder.trunk(torch.zeros(1, 3, cfg.height, cfg.width))
        self.shape_encoder.train()
        self.map_shape = tuple(probe.shape[1:])
        self.color_encoder = ColorEncoder(cfg)
        self.feature_discriminator = FeatureDiscriminator(cfg, self.map_shape[0])
        self.generator = Generator(cfg, self.map_shape[0], self.map_shape[1:])
        self.image_discriminator = ImageDiscriminator(cfg)
        if cfg.profile == "desk":
            fan_in_init(self)

    def group(self, name: str) -> nn.Module:
        if name not in NETWORKS:
            raise KeyError(name)
        return getattr(self, name)

    def groups(self) -> dict:
        return {n: getattr(self, n) for n in NETWORKS}


def _to_nchw(bundle: ModelBundle, images: torch.Tensor) -> torch.Tensor:
    cfg = bundle.config
    expected = (cfg.height, cfg.width, 3)
    if images.dim() != 4 or tuple(images.shape[1:]) != expected:
        raise ShapeMismatchError(f"expected images of shape (B, {cfg.height}, {cfg.width}, 3), "
                                 f"got {tuple(images.shape)}")
    dtype = next(bundle.parameters()).dtype
    return images.to(dtype).permute(0, 3, 1, 2).contiguous()


def _prob(logits: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(logits).clamp(PROB_EPS, 1.0 - PROB_EPS)


def shape_encode(bundle: ModelBundle, images: torch.Tensor) -> ShapeFeature:
    return bundle.shape_encoder(_to_nchw(bundle, images))


def classify(bundle: ModelBundle, f_s: torch.Tensor) -> torch.Tensor:
    """Identity logits for a batch of shape feature vectors."""
    return bundle.shape_encoder.classifier(f_s)


def color_encode(bundle: ModelBundle, images: torch.Tensor) -> torch.Tensor:
    return bundle.color_encoder(_to_nchw(bundle, images))


def discriminate_features(bundle: ModelBundle, f: torch.Tensor) -> torch.Tensor:
    """Probability that features came from RGB (rather than gray) input.

    Takes the pooled vector in the desk profile and the spatial map in the
    paper profile; a :class:`ShapeFeature` is accepted in either case.
    """
    disc = bundle.feature_discriminator
    if isinstance(f, ShapeFeature):
        f = f.map if disc.on_map else f.vector
    if disc.on_map:
        if f.dim() != 4 or tuple(f.shape[1:]) != bundle.map_shape:
            raise ShapeMismatchError(f"expected feature maps (B, {bundle.map_shape}), got {tuple(f.shape)}")
    elif f.dim() != 2 or f.shape[1] != bundle.config.feature_dim:
        raise ShapeMismatchError(f"expected features (B, {bundle.config.feature_dim}), got {tuple(f.shape)}")
    return _prob(disc(f))


def generate_image(bundle: ModelBundle, f_s_map: torch.Tensor, f_c: torch.Tensor) -> torch.Tensor:
    """Synthesize ``(B, H, W, 3)`` images from a shape map and a color vector."""
    if isinstance(f_s_map, ShapeFeature):
        f_s_map = f_s_map.map
    if f_s_map.dim() != 4 or tuple(f_s_map.shape[1:]) != bundle.map_shape:
        raise ShapeMismatchError(f"expected shape map (B, {bundle.map_shape}), got {tuple(f_s_map.shape)}")
    if f_c.dim() != 2 or f_c.shape[1] != bundle.config.color_dim or f_c.shape[0] != f_s_map.shape[0]:
        raise ShapeMismatchError(f"expected color features ({f_s_map.shape[0]}, {bundle.config.color_dim}), "
                                 f"got {tuple(f_c.shape)}")
    return bundle.generator(f_s_map, f_c).permute(0, 2, 3, 1)


def discriminate_image(bundle: ModelBundle, images: torch.Tensor) -> torch.Tensor:
    """Probability that images are real."""
    return _prob(bundle.image_discriminator(_to_nchw(bundle, images)))


def build_bundle(cfg: ModelConfig, seed: int | None = None) -> ModelBundle:
    if seed is not None:
        torch.manual_seed(seed)
    return ModelBundle(cfg)
