"""Convolutional encoders and the MLP heads stacked on them."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


class ShapeError(ValueError):
    """Input tensor does not fit the module it was fed to."""


@dataclass(frozen=True)
class ResidualBlockSpec:
    in_channels: int
    bottleneck_channels: int
    out_channels: int
    stride: int = 1

    def __post_init__(self):
        if min(self.in_channels, self.bottleneck_channels, self.out_channels) <= 0:
            raise ValueError("channel counts must be positive")
        if self.stride not in (1, 2):
            raise ValueError("stride must be 1 or 2")

    @property
    def identity_shortcut(self) -> bool:
        return self.in_channels == self.out_channels and self.stride == 1


def _bottleneck_stage(in_ch: int, width: int, blocks: int, stride: int, expansion: int = 4):
    specs = []
    for i in range(blocks):
        specs.append(ResidualBlockSpec(in_ch, width, width * expansion, stride if i == 0 else 1))
        in_ch = width * expansion
    return tuple(specs)


@dataclass(frozen=True)
class EncoderSpec:
    kind: str
    input_resolution: int
    stem_channels: int
    stages: tuple[tuple[ResidualBlockSpec, ...], ...]
    in_channels: int = 3

    @classmethod
    def resnet50(cls) -> "EncoderSpec":
        stages, ch = [], 64
        for width, blocks, stride in ((64, 3, 1), (128, 4, 2), (256, 6, 2), (512, 3, 2)):
            stage = _bottleneck_stage(ch, width, blocks, stride)
            stages.append(stage)
            ch = stage[-1].out_channels
        return cls("resnet50", 224, 64, tuple(stages))

    @classmethod
    def tiny(cls) -> "EncoderSpec":
        stages = (
            (ResidualBlockSpec(16, 8, 32, 2),),
            (ResidualBlockSpec(32, 16, 64, 2),),
            (ResidualBlockSpec(64, 32, 128, 1),),
        )
        return cls("tiny", 32, 16, stages)

    @classmethod
    def from_kind(cls, kind: str) -> "EncoderSpec":
        if kind == "resnet50":
            return cls.resnet50()
        if kind == "tiny":
            return cls.tiny()
        raise ValueError(f"unknown encoder kind {kind!r}")

    @property
    def feature_dim(self) -> int:
        return self.stages[-1][-1].out_channels

    @property
    def total_stride(self) -> int:
        s = 4 if self.kind == "resnet50" else 1
        for stage in self.stages:
            for b in stage:
                s *= b.stride
        return s

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderSpec":
        stages = tuple(tuple(ResidualBlockSpec(**b) for b in st) for st in d["stages"])
        return cls(d["kind"], d["input_resolution"], d["stem_channels"], stages, d.get("in_channels", 3))


@dataclass(frozen=True)
class ProjectionHeadSpec:
    widths: tuple[int, ...] = (2048, 512, 128)
    # batch norm after each hidden linear layer (BYOL / MoCo v3 style heads)
    hidden_batchnorm: bool = False

    @property
    def in_dim(self) -> int:
        return self.widths[0]

    @property
    def out_dim(self) -> int:
        return self.widths[-1]

    @classmethod
    def for_encoder(cls, spec: EncoderSpec, hidden: int = 512, out: int = 128,
                    hidden_batchnorm: bool = False) -> "ProjectionHeadSpec":
        return cls((spec.feature_dim, hidden, out), hidden_batchnorm)


@dataclass(frozen=True)
class PredictionHeadSpec(ProjectionHeadSpec):
    """Same layout as the projection head, fed with projections."""

    widths: tuple[int, ...] = (128, 512, 128)

    @classmethod
    def for_projection(cls, proj: ProjectionHeadSpec) -> "PredictionHeadSpec":
        return cls((proj.out_dim, proj.widths[1], proj.out_dim), proj.hidden_batchnorm)


@dataclass(frozen=True)
class ClassifierHeadSpec:
    feature_dim: int
    num_classes: int = 17


def init_weights(module: nn.Module) -> None:
    """He (fan-in) init for convolutions and linears, zero biases, unit BN scale."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, (nn.BatchNorm1d, nn.BatchNorm2d)):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


class Bottleneck(nn.Module):
    """1x1 reduce -> 3x3 -> 1x1 expand, each followed by BN; ReLU after the sum."""

    def __init__(self, spec: ResidualBlockSpec):
        super().__init__()
        self.spec = spec
        mid = spec.bottleneck_channels
        self.conv1 = nn.Conv2d(spec.in_channels, mid, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(mid)
        self.conv2 = nn.Conv2d(mid, mid, 3, stride=spec.stride, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(mid)
        self.conv3 = nn.Conv2d(mid, spec.out_channels, 1, bias=False)
        self.bn3 = nn.BatchNorm2d(spec.out_channels)
        if spec.identity_shortcut:
            self.shortcut = nn.Identity()
        else:
            self.shortcut = nn.Sequential(
                nn.Conv2d(spec.in_channels, spec.out_channels, 1, stride=spec.stride, bias=False),
                nn.BatchNorm2d(spec.out_channels),
            )

    def residual(self, x: torch.Tensor) -> torch.Tensor:
        out = F.relu(self.bn1(self.conv1(x)))
        out = F.relu(self.bn2(self.conv2(out)))
        return self.bn3(self.conv3(out))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.spec.in_channels:
            raise ShapeError(f"block expects {self.spec.in_channels} channels, got {x.shape[1]}")
        return F.relu(self.residual(x) + self.shortcut(x))


def residual_block_forward(x: torch.Tensor, block: Bottleneck) -> torch.Tensor:
    return block(x)


class Encoder(nn.Module):
    """Stem + residual stages + global average pooling (no classification layer)."""

    def __init__(self, spec: EncoderSpec):
        super().__init__()
        self.spec = spec
        c = spec.stem_channels
        if spec.kind == "resnet50":
            self.stem = nn.Sequential(
                nn.Conv2d(spec.in_channels, c, 7, stride=2, padding=3, bias=False),
                nn.BatchNorm2d(c),
                nn.ReLU(inplace=True),
                nn.MaxPool2d(3, stride=2, padding=1),
            )
        else:
            self.stem = nn.Sequential(
                nn.Conv2d(spec.in_channels, c, 3, padding=1, bias=False),
                nn.BatchNorm2d(c),
                nn.ReLU(inplace=True),
            )
        self.stages = nn.ModuleList(nn.Sequential(*(Bottleneck(b) for b in st)) for st in spec.stages)
        init_weights(self)

    @property
    def feature_dim(self) -> int:
        return self.spec.feature_dim

    @property
    def target_layer(self) -> nn.Module:
        """Last convolutional stage; the default layer for class-activation maps."""
        return self.stages[-1]

    def feature_map(self, images: torch.Tensor) -> torch.Tensor:
        r = self.spec.input_resolution
        if images.ndim != 4 or images.shape[1] != self.spec.in_channels or images.shape[-2:] != (r, r):
            raise ShapeError(
                f"{self.spec.kind} encoder expects (B, {self.spec.in_channels}, {r}, {r}), got {tuple(images.shape)}"
            )
        x = self.stem(images)
        for stage in self.stages:
            x = stage(x)
        return x

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.feature_map(images).mean(dim=(2, 3))


def encode(images: torch.Tensor, encoder: Encoder) -> torch.Tensor:
    return encoder(images)


class MLPHead(nn.Module):
    """Linear -> [BN] -> ReLU -> ... -> Linear, no trailing nonlinearity."""

    def __init__(self, spec: ProjectionHeadSpec):
        super().__init__()
        self.spec = spec
        layers: list[nn.Module] = []
        w = spec.widths
        for i in range(len(w) - 1):
            layers.append(nn.Linear(w[i], w[i + 1]))
            if i < len(w) - 2:
                if spec.hidden_batchnorm:
                    layers.append(nn.BatchNorm1d(w[i + 1]))
                layers.append(nn.ReLU(inplace=True))
        self.net = nn.Sequential(*layers)
        init_weights(self)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        if h.shape[-1] != self.spec.in_dim:
            raise ShapeError(f"head expects input dim {self.spec.in_dim}, got {h.shape[-1]}")
        return self.net(h)


ProjectionHead = MLPHead
PredictionHead = MLPHead


def project(h: torch.Tensor, head: MLPHead) -> torch.Tensor:
    return head(h)


class ClassifierHead(nn.Module):
    """Affine map to class logits; ``probabilities`` applies the softmax."""

    def __init__(self, spec: ClassifierHeadSpec):
        super().__init__()
        self.spec = spec
        self.fc = nn.Linear(spec.feature_dim, spec.num_classes)
        # PyTorch's default uniform init keeps initial logits small
        bound = 1 / math.sqrt(spec.feature_dim)
        nn.init.uniform_(self.fc.weight, -bound, bound)
        nn.init.zeros_(self.fc.bias)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        if h.shape[-1] != self.spec.feature_dim:
            raise ShapeError(f"classifier expects feature dim {self.spec.feature_dim}, got {h.shape[-1]}")
        return self.fc(h)

    def probabilities(self, h: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self(h), dim=-1)


def classify(h: torch.Tensor, head: ClassifierHead) -> torch.Tensor:
    return head.probabilities(h)


class DINOHead(nn.Module):
    """Projection MLP, L2 normalization, then a weight-normalized prototype layer."""

    def __init__(self, proj: ProjectionHeadSpec, out_dim: int):
        super().__init__()
        self.mlp = MLPHead(proj)
        self.last = nn.utils.parametrizations.weight_norm(nn.Linear(proj.out_dim, out_dim, bias=False))
        self.last.parametrizations.weight.original0.data.fill_(1.0)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        z = F.normalize(self.mlp(h), dim=-1)
        return self.last(z)


class Classifier(nn.Module):
    """Encoder followed by a classifier head; the model fine-tuning and CAMs use."""

    def __init__(self, encoder: Encoder, head: ClassifierHead):
        super().__init__()
        self.encoder = encoder
        self.head = head

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.head(self.encoder(images))


def parameter_checksum(module: nn.Module) -> str:
    """SHA-256 over every parameter and buffer, in state-dict order."""
    import hashlib

    h = hashlib.sha256()
    for name, t in module.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
