import numpy as np
import pytest
import torch

from msgdn.model import ModelConfig


def synth_image(seed: int, h: int = 64, w: int = 64, noise: float = 0.02) -> np.ndarray:
    """Deterministic test picture: gradients, a sinusoid and flat discs."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    img = np.zeros((h, w, 3))
    for c in range(3):
        a, b, ph = rng.uniform(-1, 1, 3)
        img[..., c] = 0.5 + 0.25 * (a * xx + b * yy) + 0.1 * np.sin(2 * np.pi * (rng.uniform(2, 6) * xx + ph))
    for _ in range(6):
        cy, cx, r = rng.uniform(0, 1), rng.uniform(0, 1), rng.uniform(0.05, 0.25)
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 < r * r
        img[mask] = rng.uniform(0, 1, 3)
    img += rng.normal(0, noise, img.shape)
    return np.clip(np.rint(img * 255), 0, 255).astype(np.uint8)


TINY = dict(channels_per_scale=[8, 8, 4], growth_rate=4, rdbs_per_grdb=2, convs_per_rdb=2)
SMALL = dict(channels_per_scale=[32, 32, 16], growth_rate=16, rdbs_per_grdb=2, convs_per_rdb=4)


@pytest.fixture
def tiny_config():
    return ModelConfig(**TINY)


@pytest.fixture
def small_config():
    return ModelConfig(**SMALL)


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    yield


@pytest.fixture(scope="session")
def vgg_weights(tmp_path_factory):
    """Randomly initialized VGG-19 weights on disk; stands in for a pretrained file."""
    from torchvision.models import vgg19

    path = tmp_path_factory.mktemp("vgg") / "vgg19.pth"
    torch.manual_seed(1234)
    torch.save(vgg19(weights=None).features.state_dict(), path)
    return path


def make_corpus(root, n_images=4, qps=(37, 38, 39), size=(64, 64), mode="dct", noise=0.02):
    """Synthetic PNGs run through the stub codec; returns the built manifest."""
    from msgdn.data import build_manifest, save_rgb, stub_codec

    img_dir = root / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    for i in range(n_images):
        save_rgb(img_dir / f"img{i}.png", synth_image(100 + i, *size, noise=noise))
    return build_manifest(img_dir, qps, stub_codec(mode), root / "data" / "manifest.jsonl")


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    return make_corpus(tmp_path_factory.mktemp("corpus"), n_images=2, qps=(38,), size=(40, 48))
