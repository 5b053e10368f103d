"""Relativistic average discriminator and its GAN losses.

``D(a, b) = sigmoid(C(a) - mean(C(b)))``. Both losses are written with
``log sigmoid(z) = -softplus(-z)`` and ``log(1 - sigmoid(z)) = -softplus(z)``
so they stay finite for very large logit gaps.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .archive import load_archive, load_state_strict, save_archive
from .errors import ConfigError, ShapeError


@dataclass
class DiscriminatorConfig:
    base_channels: int = 64
    num_downsampling_stages: int = 4
    patch_size: int = 64
    input_channels: int = 3
    hidden_features: int = 100
    norm: str = "batch"  # or "none"

    def __post_init__(self):
        if min(self.base_channels, self.num_downsampling_stages, self.patch_size, self.hidden_features) < 1:
            raise ConfigError("discriminator counts must be positive")
        if self.patch_size % (2 ** self.num_downsampling_stages):
            raise ConfigError(
                f"patch_size {self.patch_size} not divisible by 2^{self.num_downsampling_stages}"
            )
        if self.norm not in ("batch", "none"):
            raise ConfigError(f"unknown norm {self.norm!r}")

    def to_dict(self) -> dict:
        return asdict(self)


class Discriminator(nn.Module):
    """VGG-style classifier: conv-norm-LeakyReLU stages with stride-2 reductions, then two dense layers."""

    def __init__(self, config: DiscriminatorConfig | None = None):
        super().__init__()
        self.config = cfg = config or DiscriminatorConfig()

        def norm(c):
            return nn.BatchNorm2d(c) if cfg.norm == "batch" else nn.Identity()

        layers = [nn.Conv2d(cfg.input_channels, cfg.base_channels, 3, padding=1), nn.LeakyReLU(0.2)]
        cin = cfg.base_channels
        for stage in range(cfg.num_downsampling_stages):
            cout = cfg.base_channels * 2 ** stage
            if stage > 0:
                layers += [nn.Conv2d(cin, cout, 3, padding=1, bias=False), norm(cout), nn.LeakyReLU(0.2)]
            layers += [nn.Conv2d(cout, cout, 4, stride=2, padding=1, bias=False), norm(cout), nn.LeakyReLU(0.2)]
            cin = cout
        self.features = nn.Sequential(*layers)
        side = cfg.patch_size // 2 ** cfg.num_downsampling_stages
        self.classifier = nn.Sequential(
            nn.Linear(cin * side * side, cfg.hidden_features),
            nn.LeakyReLU(0.2),
            nn.Linear(cfg.hidden_features, 1),
        )

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """One unbounded logit per image, shape (B,)."""
        p = self.config.patch_size
        if images.ndim != 4 or images.shape[1] != self.config.input_channels or images.shape[-2:] != (p, p):
            raise ShapeError(
                f"discriminator expects (B, {self.config.input_channels}, {p}, {p}), got {tuple(images.shape)}"
            )
        return self.classifier(self.features(images).flatten(1)).squeeze(1)


def _check_batch(c: torch.Tensor, name: str) -> torch.Tensor:
    c = torch.as_tensor(c)
    if c.numel() == 0:
        raise ValueError(f"{name} logit batch is empty")
    return c.reshape(-1)


def relativistic_logits(c_primary, c_other) -> torch.Tensor:
    """C(x_i) - mean(C(other)), the argument of the sigmoid in D."""
    c_primary = _check_batch(c_primary, "primary")
    c_other = _check_batch(c_other, "other")
    return c_primary - c_other.mean()


def relativistic_d(c_primary, c_other) -> torch.Tensor:
    return torch.sigmoid(relativistic_logits(c_primary, c_other))


def discriminator_loss(c_real, c_fake) -> torch.Tensor:
    """-E_r[log D(x_r, x_f)] - E_f[log(1 - D(x_f, x_r))]."""
    real_rel = relativistic_logits(c_real, c_fake)
    fake_rel = relativistic_logits(c_fake, c_real)
    return F.softplus(-real_rel).mean() + F.softplus(fake_rel).mean()


def generator_adv_loss(c_real, c_fake) -> torch.Tensor:
    """-E_r[log(1 - D(x_r, x_f))] - E_f[log D(x_f, x_r)]; role-swapped discriminator_loss."""
    real_rel = relativistic_logits(c_real, c_fake)
    fake_rel = relativistic_logits(c_fake, c_real)
    return F.softplus(real_rel).mean() + F.softplus(-fake_rel).mean()


def save_discriminator(path, model: Discriminator) -> None:
    save_archive(path, model.state_dict(), {"kind": "discriminator", "config": model.config.to_dict()})


def load_discriminator(path) -> Discriminator:
    tensors, meta = load_archive(path)
    if meta.get("kind") != "discriminator":
        raise ConfigError(f"{path} does not hold a discriminator (kind={meta.get('kind')!r})")
    model = Discriminator(DiscriminatorConfig(**meta["config"]))
    load_state_strict(model, tensors, f"discriminator in {path}")
    return model
