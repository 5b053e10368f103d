"""Reconstruction, perceptual and hybrid training objectives; PSNR."""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .adversarial import generator_adv_loss
from .errors import ConfigError, ShapeError


def _same_shape(pred: torch.Tensor, target: torch.Tensor) -> None:
    if pred.shape != target.shape:
        raise ShapeError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")


def l1_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    # torch's abs has subgradient 0 at exact ties
    _same_shape(pred, target)
    return (pred - target).abs().mean()


def mse_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    _same_shape(pred, target)
    return ((pred - target) ** 2).mean()


def psnr(mse: float, peak: float = 255.0) -> float:
    """10*log10(peak^2 / mse); +inf when mse == 0."""
    mse = float(mse)
    if mse < 0:
        raise ValueError(f"mse must be non-negative, got {mse}")
    if peak <= 0:
        raise ValueError(f"peak must be positive, got {peak}")
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


@dataclass
class HybridLossWeights:
    w_l1: float = 1.0
    w_adv: float = 0.01
    w_perc: float = 0.0001

    def __post_init__(self):
        if min(self.w_l1, self.w_adv, self.w_perc) < 0:
            raise ConfigError(f"loss weights must be non-negative: {self}")


# torchvision vgg19().features indices of each conv layer
VGG19_CONV_LAYERS = {
    "conv1_1": 0, "conv1_2": 2,
    "conv2_1": 5, "conv2_2": 7,
    "conv3_1": 10, "conv3_2": 12, "conv3_3": 14, "conv3_4": 16,
    "conv4_1": 19, "conv4_2": 21, "conv4_3": 23, "conv4_4": 25,
    "conv5_1": 28, "conv5_2": 30, "conv5_3": 32, "conv5_4": 34,
}
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass
class FeatureExtractorSpec:
    weights_source: str
    backbone: str = "vgg19"
    tap_layer: str = "conv5_4"

    def __post_init__(self):
        if self.backbone != "vgg19":
            raise ConfigError(f"unsupported backbone {self.backbone!r}")
        if self.tap_layer not in VGG19_CONV_LAYERS:
            raise ConfigError(f"unknown VGG-19 layer {self.tap_layer!r}; choose from {list(VGG19_CONV_LAYERS)}")


class FeatureExtractor(nn.Module):
    """Frozen VGG-19 trunk truncated at a conv layer's pre-activation output.

    Weights come from a local file holding a torchvision ``vgg19`` state dict
    (full model or ``features`` only); nothing is downloaded.
    """

    def __init__(self, spec: FeatureExtractorSpec):
        super().__init__()
        from torchvision.models import vgg19

        self.spec = spec
        path = Path(spec.weights_source)
        if not path.is_file():
            raise FileNotFoundError(f"perceptual extractor weights not found: {path}")
        features = vgg19(weights=None).features
        state = _load_state(path)
        if any(k.startswith("features.") for k in state):
            state = {k[len("features."):]: v for k, v in state.items() if k.startswith("features.")}
        stop = VGG19_CONV_LAYERS[spec.tap_layer] + 1
        self.trunk = features[:stop]
        wanted = self.trunk.state_dict()
        missing = [k for k in wanted if k not in state]
        if missing:
            raise ConfigError(f"{path} lacks VGG-19 weights for {missing[:4]}")
        self.trunk.load_state_dict({k: state[k] for k in wanted})
        self.trunk.requires_grad_(False)
        self.trunk.eval()
        self.register_buffer("mean", torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(IMAGENET_STD).view(1, 3, 1, 1))

    def train(self, mode: bool = True):
        # stays in eval mode: it is a fixed measurement, not a trained part
        return super().train(False)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        if images.ndim != 4 or images.shape[1] != 3:
            raise ShapeError(f"extractor expects (B, 3, H, W), got {tuple(images.shape)}")
        return self.trunk((images - self.mean.to(images.dtype)) / self.std.to(images.dtype))


def _load_state(path: Path) -> Dict[str, torch.Tensor]:
    if path.suffix == ".safetensors":
        from safetensors.torch import load_file

        return load_file(str(path))
    state = torch.load(str(path), map_location="cpu", weights_only=True)
    if isinstance(state, dict) and "state_dict" in state:
        state = state["state_dict"]
    return state


def perceptual_loss(pred: torch.Tensor, target: torch.Tensor, extractor: FeatureExtractor) -> torch.Tensor:
    _same_shape(pred, target)
    return ((extractor(pred) - extractor(target)) ** 2).mean()


def hybrid_loss(pred, target, c_real, c_fake, weights: HybridLossWeights,
                extractor: FeatureExtractor | None) -> Tuple[torch.Tensor, Dict[str, torch.Tensor]]:
    """w_l1*L1 + w_adv*L_adv + w_perc*L_p.

    A term whose weight is zero is not evaluated (its addend is an exact 0),
    so the extractor and logits may be None in that case.
    """
    zero = pred.new_zeros(())
    l1 = l1_loss(pred, target)
    adv = generator_adv_loss(c_real, c_fake) if weights.w_adv else zero
    if weights.w_perc:
        if extractor is None:
            raise ConfigError("perceptual weight is non-zero but no feature extractor was given")
        perc = perceptual_loss(pred, target, extractor)
    else:
        perc = zero
    return combine_losses(l1, adv, perc, weights)


def combine_losses(l1, adv, perc, weights: HybridLossWeights):
    """Weighted sum of the three components; returns (total, breakdown).

    The breakdown holds the weighted addends (which sum to the total exactly)
    and the raw component values.
    """
    breakdown = {
        "l1": weights.w_l1 * l1,
        "adv": weights.w_adv * adv,
        "perc": weights.w_perc * perc,
    }
    total = breakdown["l1"] + breakdown["adv"] + breakdown["perc"]
    return total, {**breakdown, "raw_l1": l1, "raw_adv": adv, "raw_perc": perc}
