"""RegFreeNet: NDP front-end, 4-stage 3D U-Net encoder, position decoder and slope head."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import ConfigError, SlopePair, VoxelVolume
from .ndp import NDP, NDPConfig


def _triple(v) -> tuple[int, int, int]:
    if isinstance(v, (int, np.integer)):
        return (int(v),) * 3
    v = tuple(int(s) for s in v)
    if len(v) != 3:
        raise ConfigError(f"expected an int or 3 ints, got {v}")
    return v


@dataclass(frozen=True)
class NetworkConfig:
    channels: tuple[int, int, int, int] = (8, 16, 32, 64)
    input_size: tuple[int, int, int] = (32, 32, 32)
    in_channels: int = 1
    use_ndp: bool = True
    use_spb: bool = True
    spb_hidden: int = 256
    spb_dropout: float = 0.5
    ndp: NDPConfig = field(default_factory=NDPConfig)

    def __post_init__(self):
        channels = tuple(int(c) for c in self.channels)
        if len(channels) != 4:
            raise ConfigError(f"need exactly 4 encoder stages, got {channels}")
        if any(a >= b for a, b in zip(channels, channels[1:])) or channels[0] < 1:
            raise ConfigError(f"channels must be positive and strictly increasing, got {channels}")
        size = _triple(self.input_size)
        if any(s % 16 or s < 16 for s in size):
            raise ConfigError(f"input size must be a positive multiple of 16, got {size}")
        if not 0.0 <= self.spb_dropout < 1.0:
            raise ConfigError(f"spb_dropout must be in [0, 1), got {self.spb_dropout}")
        ndp = self.ndp if isinstance(self.ndp, NDPConfig) else NDPConfig(**self.ndp)
        object.__setattr__(self, "channels", channels)
        object.__setattr__(self, "input_size", size)
        object.__setattr__(self, "use_ndp", bool(self.use_ndp))
        object.__setattr__(self, "use_spb", bool(self.use_spb))
        object.__setattr__(self, "ndp", ndp)

    @classmethod
    def full_scale(cls, **overrides) -> "NetworkConfig":
        """Full-size settings: 64-512 channels on 128^3 crops."""
        return cls(**{"channels": (64, 128, 256, 512), "input_size": (128, 128, 128), **overrides})

    @property
    def bottleneck_size(self) -> tuple[int, int, int]:
        return tuple(s // 16 for s in self.input_size)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        d = dict(d)
        if isinstance(d.get("ndp"), dict):
            d["ndp"] = NDPConfig(**d["ndp"])
        return cls(**d)

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=list)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def conv_block(in_ch: int, out_ch: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv3d(in_ch, out_ch, 3, padding=1, bias=False),  # bias is cancelled by the norm
        nn.InstanceNorm3d(out_ch, affine=True),
        nn.ReLU(inplace=True),
    )


def double_conv(in_ch: int, out_ch: int) -> nn.Sequential:
    return nn.Sequential(conv_block(in_ch, out_ch), conv_block(out_ch, out_ch))


class FeaturePyramid(NamedTuple):
    m1: torch.Tensor
    m2: torch.Tensor
    m3: torch.Tensor
    m4: torch.Tensor


class Encoder(nn.Module):
    """Four blocks of two convolutions + 2x max pooling.

    Stage i returns features at 1/2**i of the input resolution.
    """

    def __init__(self, in_channels: int, channels):
        super().__init__()
        ins = (in_channels, *channels[:-1])
        self.blocks = nn.ModuleList(double_conv(i, o) for i, o in zip(ins, channels))

    def forward(self, x) -> FeaturePyramid:
        if any(s % 16 for s in x.shape[-3:]):
            raise ValueError(f"spatial size {tuple(x.shape[-3:])} is not divisible by 16")
        maps = []
        for block in self.blocks:
            x = F.max_pool3d(block(x), 2)
            maps.append(x)
        return FeaturePyramid(*maps)


class UpStage(nn.Module):
    def __init__(self, in_ch: int, skip_ch: int, out_ch: int):
        super().__init__()
        self.convs = double_conv(in_ch + skip_ch, out_ch)

    def forward(self, x, skip):
        x = F.interpolate(x, size=skip.shape[-3:], mode="trilinear", align_corners=False)
        return self.convs(torch.cat([x, skip], dim=1))


class PositionDecoder(nn.Module):
    """Implant position branch: four upsampling stages and a 1-channel sigmoid head.

    Stages fuse with M3, M2, M1 and finally with the encoder input, so the
    output is at full input resolution.
    """

    def __init__(self, stem_channels: int, channels):
        super().__init__()
        c1, c2, c3, c4 = channels
        self.up3 = UpStage(c4, c3, c3)
        self.up2 = UpStage(c3, c2, c2)
        self.up1 = UpStage(c2, c1, c1)
        self.up0 = UpStage(c1, stem_channels, c1)
        self.head = nn.Conv3d(c1, 1, 1)

    def forward(self, pyramid: FeaturePyramid, stem):
        x = self.up3(pyramid.m4, pyramid.m3)
        x = self.up2(x, pyramid.m2)
        x = self.up1(x, pyramid.m1)
        x = self.up0(x, stem)
        return torch.sigmoid(self.head(x))


class SlopeHead(nn.Module):
    """flatten(M4) -> FC(hidden) -> ReLU -> dropout -> FC(2)."""

    def __init__(self, in_features: int, hidden: int = 256, dropout: float = 0.5):
        super().__init__()
        self.in_features = in_features
        self.fc1 = nn.Linear(in_features, hidden)
        self.drop = nn.Dropout(dropout)
        self.fc2 = nn.Linear(hidden, 2)

    def forward(self, m4):
        flat = m4.flatten(1)
        if flat.shape[1] != self.in_features:
            raise ValueError(
                f"slope head expects {self.in_features} features, got {flat.shape[1]} "
                f"(M4 shape {tuple(m4.shape[1:])})"
            )
        return self.fc2(self.drop(F.relu(self.fc1(flat))))


class RegFreeNet(nn.Module):
    def __init__(self, config: NetworkConfig | None = None):
        super().__init__()
        self.config = cfg = config or NetworkConfig()
        c1 = cfg.channels[0]
        if cfg.use_ndp:
            self.ndp = NDP(cfg.in_channels, c1, cfg.ndp)
            stem_ch = c1
        else:
            self.ndp = None
            stem_ch = cfg.in_channels
        self.encoder = Encoder(stem_ch, cfg.channels)
        self.decoder = PositionDecoder(stem_ch, cfg.channels)
        if cfg.use_spb:
            flat = cfg.channels[-1] * int(np.prod(cfg.bottleneck_size))
            self.slope_head = SlopeHead(flat, cfg.spb_hidden, cfg.spb_dropout)
        else:
            self.slope_head = None

    def forward(self, x):
        """Return ``(probability, slopes)``.

        ``slopes`` is ``(B, 2)`` when the slope head is enabled and ``x`` has the
        configured crop size, else ``None``.
        """
        stem = self.ndp(x) if self.ndp is not None else x
        pyramid = self.encoder(stem)
        prob = self.decoder(pyramid, stem)
        slopes = None
        if self.slope_head is not None and tuple(x.shape[-3:]) == self.config.input_size:
            slopes = self.slope_head(pyramid.m4)
        return prob, slopes


def build_model(config: NetworkConfig, seed: int | None = None, dtype=torch.float32) -> RegFreeNet:
    if seed is not None:
        torch.manual_seed(seed)
    return RegFreeNet(config).to(dtype)


def regfreenet_forward(volume: VoxelVolume, model: RegFreeNet):
    """Run the network on a single volume in evaluation mode.

    Returns the probability volume as a numpy array and the predicted slopes
    (``None`` when unavailable).
    """
    param = next(model.parameters())
    x = torch.as_tensor(np.array(volume.data), dtype=param.dtype)[None, None]
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            prob, slopes = model(x)
    finally:
        model.train(was_training)
    k = None if slopes is None else SlopePair(*slopes[0].tolist())
    return prob[0, 0].numpy(), k
