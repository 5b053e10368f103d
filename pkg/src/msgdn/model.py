"""Multi-scale grouped dense network (MSGDN) generator.

Three feature scales (full, 1/2, 1/4 resolution) are built with stride-2
convolutions, each refined by grouped residual dense blocks, then merged
coarse-to-fine: upsample, concatenate, 1x1 conv, non-local attention.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from typing import List, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .archive import load_archive, load_state_strict, save_archive, split_prefix
from .errors import ConfigError, ShapeError

# bump when the layer layout changes; part of the checkpoint fingerprint
ARCH_VERSION = 1


@dataclass
class ModelConfig:
    num_scales: int = 3
    # lowest resolution first, full resolution last
    channels_per_scale: List[int] = field(default_factory=lambda: [128, 128, 64])
    rdbs_per_grdb: int = 4
    convs_per_rdb: int = 8
    grdbs_per_scale: int = 1
    growth_rate: int = 32
    kernel_size: int = 3
    input_channels: int = 3
    use_global_residual: bool = True
    upsample: str = "bilinear"  # or "transposed"
    nonlocal_max_positions: int = 96 * 96
    nonlocal_tile: int = 96

    def __post_init__(self):
        self.channels_per_scale = [int(c) for c in self.channels_per_scale]
        self.validate()

    def validate(self) -> None:
        if self.num_scales != len(self.channels_per_scale):
            raise ConfigError(
                f"num_scales={self.num_scales} but {len(self.channels_per_scale)} channel widths given"
            )
        counts = {
            "num_scales": self.num_scales,
            "rdbs_per_grdb": self.rdbs_per_grdb,
            "convs_per_rdb": self.convs_per_rdb,
            "grdbs_per_scale": self.grdbs_per_scale,
            "growth_rate": self.growth_rate,
            "kernel_size": self.kernel_size,
            "input_channels": self.input_channels,
            "nonlocal_max_positions": self.nonlocal_max_positions,
            "nonlocal_tile": self.nonlocal_tile,
        }
        for name, value in counts.items():
            if int(value) < 1:
                raise ConfigError(f"{name} must be positive, got {value}")
        if any(c < 1 for c in self.channels_per_scale):
            raise ConfigError(f"channel widths must be positive: {self.channels_per_scale}")
        if self.kernel_size % 2 == 0:
            raise ConfigError("kernel_size must be odd to preserve spatial size")
        if self.upsample not in ("bilinear", "transposed"):
            raise ConfigError(f"unknown upsample mode {self.upsample!r}")
        if self.nonlocal_tile ** 2 > self.nonlocal_max_positions:
            raise ConfigError("nonlocal_tile**2 exceeds nonlocal_max_positions")

    def width(self, scale: int) -> int:
        """Channel width of `scale` (0 = full resolution)."""
        return self.channels_per_scale[self.num_scales - 1 - scale]

    @property
    def pad_multiple(self) -> int:
        return 2 ** (self.num_scales - 1)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown ModelConfig fields: {sorted(unknown)}")
        return cls(**d)

    def fingerprint(self) -> str:
        payload = json.dumps({"arch": ARCH_VERSION, "config": self.to_dict()}, sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


def _conv(cin: int, cout: int, k: int, stride: int = 1) -> nn.Conv2d:
    return nn.Conv2d(cin, cout, k, stride=stride, padding=k // 2)


class RDB(nn.Module):
    """Residual dense block: dense conv+ReLU layers, 1x1 local fusion, local residual."""

    def __init__(self, channels: int, growth_rate: int = 32, num_convs: int = 8, kernel_size: int = 3):
        super().__init__()
        self.channels = channels
        self.convs = nn.ModuleList(
            _conv(channels + i * growth_rate, growth_rate, kernel_size) for i in range(num_convs)
        )
        self.fusion = nn.Conv2d(channels + num_convs * growth_rate, channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.channels:
            raise ConfigError(f"RDB expects {self.channels} channels, got {x.shape[1]}")
        feats = [x]
        for conv in self.convs:
            feats.append(F.relu(conv(torch.cat(feats, dim=1))))
        return x + self.fusion(torch.cat(feats, dim=1))


class GRDB(nn.Module):
    """Grouped residual dense block: RDB chain, concat of all RDB outputs, 1x1 fusion, residual."""

    def __init__(self, channels: int, num_rdbs: int = 4, growth_rate: int = 32, num_convs: int = 8,
                 kernel_size: int = 3):
        super().__init__()
        self.channels = channels
        self.rdbs = nn.ModuleList(
            RDB(channels, growth_rate, num_convs, kernel_size) for _ in range(num_rdbs)
        )
        self.fusion = nn.Conv2d(num_rdbs * channels, channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.channels:
            raise ConfigError(f"GRDB expects {self.channels} channels, got {x.shape[1]}")
        outs = []
        h = x
        for rdb in self.rdbs:
            h = rdb(h)
            outs.append(h)
        return x + self.fusion(torch.cat(outs, dim=1))


class Downsample(nn.Module):
    def __init__(self, cin: int, cout: int, kernel_size: int = 3):
        super().__init__()
        self.conv = _conv(cin, cout, kernel_size, stride=2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h, w = x.shape[-2:]
        if h % 2 or w % 2:
            raise ShapeError(f"downsample needs even spatial dims, got {h}x{w}; pad the input first")
        return self.conv(x)


class NonLocalBlock(nn.Module):
    """Embedded-Gaussian non-local block with a residual connection.

    ``forward`` refuses inputs with more than ``max_positions`` pixels; use
    ``forward_tiled`` to apply attention independently on tiles instead.
    """

    def __init__(self, channels: int, inter_channels: int | None = None, max_positions: int = 96 * 96):
        super().__init__()
        inter = inter_channels or max(channels // 2, 1)
        self.inter_channels = inter
        self.max_positions = max_positions
        self.theta = nn.Conv2d(channels, inter, 1)
        self.phi = nn.Conv2d(channels, inter, 1)
        self.g = nn.Conv2d(channels, inter, 1)
        self.w_z = nn.Conv2d(inter, channels, 1)
        nn.init.zeros_(self.w_z.weight)
        nn.init.zeros_(self.w_z.bias)

    def _check(self, x: torch.Tensor) -> None:
        n = x.shape[-2] * x.shape[-1]
        if n > self.max_positions:
            raise ShapeError(
                f"non-local input has {n} positions (cap {self.max_positions}); "
                "use forward_tiled or a smaller crop"
            )

    def attention(self, x: torch.Tensor) -> torch.Tensor:
        """Row-stochastic (B, HW, HW) attention matrix."""
        self._check(x)
        b = x.shape[0]
        theta = self.theta(x).reshape(b, self.inter_channels, -1).transpose(1, 2)
        phi = self.phi(x).reshape(b, self.inter_channels, -1)
        return torch.softmax(theta @ phi, dim=-1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, _, h, w = x.shape
        attn = self.attention(x)
        g = self.g(x).reshape(b, self.inter_channels, -1).transpose(1, 2)
        y = (attn @ g).transpose(1, 2).reshape(b, self.inter_channels, h, w)
        return x + self.w_z(y)

    def forward_tiled(self, x: torch.Tensor, tile: int = 96) -> torch.Tensor:
        h, w = x.shape[-2:]
        if h * w <= self.max_positions:
            return self(x)
        rows = _split(h, math.ceil(h / tile))
        cols = _split(w, math.ceil(w / tile))
        out_rows = []
        for r0, r1 in rows:
            out_rows.append(torch.cat([self(x[..., r0:r1, c0:c1]) for c0, c1 in cols], dim=-1))
        return torch.cat(out_rows, dim=-2)


def _split(n: int, parts: int) -> List[Tuple[int, int]]:
    edges = [round(i * n / parts) for i in range(parts + 1)]
    return list(zip(edges[:-1], edges[1:]))


def pad_to_multiple(image: torch.Tensor, m: int) -> Tuple[torch.Tensor, Tuple[int, int]]:
    """Reflect-pad right/bottom so H and W are multiples of `m`.

    Returns the padded tensor and the original (H, W) for `crop_to`.
    """
    if m < 1:
        raise ConfigError(f"pad multiple must be >= 1, got {m}")
    h, w = image.shape[-2:]
    ph, pw = (-h) % m, (-w) % m
    if ph or pw:
        mode = "reflect" if ph < h and pw < w else "replicate"
        image = F.pad(image, (0, pw, 0, ph), mode=mode)
    return image, (h, w)


def crop_to(image: torch.Tensor, record: Tuple[int, int]) -> torch.Tensor:
    h, w = record
    return image[..., :h, :w]


class MSGDN(nn.Module):
    def __init__(self, config: ModelConfig | None = None):
        super().__init__()
        self.config = config = config or ModelConfig()
        k = config.kernel_size
        s = config.num_scales
        self.head = _conv(config.input_channels, config.width(0), k)
        self.down = nn.ModuleList(
            Downsample(config.width(i - 1), config.width(i), k) for i in range(1, s)
        )
        self.grdbs = nn.ModuleList(
            nn.Sequential(*[
                GRDB(config.width(i), config.rdbs_per_grdb, config.growth_rate, config.convs_per_rdb, k)
                for _ in range(config.grdbs_per_scale)
            ])
            for i in range(s)
        )
        # fuse[i] merges scale i+1 into scale i
        self.up = nn.ModuleList()
        self.fuse = nn.ModuleList()
        self.nonlocal_blocks = nn.ModuleList()
        for i in range(s - 1):
            lo = config.width(i + 1)
            if config.upsample == "transposed":
                self.up.append(nn.ConvTranspose2d(lo, lo, 4, stride=2, padding=1))
            else:
                self.up.append(nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False))
            self.fuse.append(nn.Conv2d(lo + config.width(i), config.width(i), 1))
            self.nonlocal_blocks.append(
                NonLocalBlock(config.width(i), max_positions=config.nonlocal_max_positions)
            )
        self.tail = _conv(config.width(0), config.input_channels, k)

    def zero_residual_(self) -> "MSGDN":
        """Zero the reconstruction conv so the network starts as the identity map."""
        nn.init.zeros_(self.tail.weight)
        nn.init.zeros_(self.tail.bias)
        return self

    def _check_inputs(self, image: torch.Tensor) -> None:
        if image.ndim != 4:
            raise ShapeError(f"expected (B, C, H, W), got shape {tuple(image.shape)}")
        if image.shape[1] != self.config.input_channels:
            raise ShapeError(f"expected {self.config.input_channels} channels, got {image.shape[1]}")
        for name, p in self.named_parameters():
            if not torch.isfinite(p).all():
                raise ConfigError(f"non-finite values in parameter {name}")

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        self._check_inputs(image)
        x, record = pad_to_multiple(image, self.config.pad_multiple)
        feats = [self.head(x)]
        for down in self.down:
            feats.append(down(feats[-1]))
        feats = [grdb(f) for grdb, f in zip(self.grdbs, feats)]
        merged = feats[-1]
        tile = self.config.nonlocal_tile
        for i in reversed(range(self.config.num_scales - 1)):
            up = self.up[i](merged)
            fused = self.fuse[i](torch.cat([up, feats[i]], dim=1))
            merged = self.nonlocal_blocks[i].forward_tiled(fused, tile)
        out = self.tail(merged)
        if self.config.use_global_residual:
            out = out + x
        return crop_to(out, record)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def save_generator(path, model: MSGDN) -> None:
    meta = {
        "kind": "generator",
        "config": model.config.to_dict(),
        "fingerprint": model.config.fingerprint(),
    }
    save_archive(path, model.state_dict(), meta)


def load_generator(path) -> MSGDN:
    """Rebuild an MSGDN from an archive, validating every array against its config."""
    tensors, meta = load_archive(path)
    if meta.get("kind") == "training":
        meta = meta["generator"]
        tensors = split_prefix(tensors, "generator")
    if meta.get("kind") != "generator":
        raise ConfigError(f"{path} does not hold a generator (kind={meta.get('kind')!r})")
    config = ModelConfig.from_dict(meta["config"])
    if meta.get("fingerprint") != config.fingerprint():
        raise ConfigError(
            f"{path}: config fingerprint {meta.get('fingerprint')} does not match this code "
            f"({config.fingerprint()}); refusing to load"
        )
    model = MSGDN(config)
    load_state_strict(model, tensors, f"generator in {path}")
    return model
