"""Inference and rate-distortion evaluation."""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .allocation import write_candidates
from .data import RGB_TO_YUV, DatasetManifest, ImagePair, load_rgb, save_rgb
from .errors import ConfigError
from .losses import psnr
from .model import MSGDN, load_generator

log = logging.getLogger(__name__)

EVAL_VERSION = 1
RD_VERSION = 1
EVAL_COLUMNS = ["image", "qp", "bits", "width", "height", "bpp",
                "mse_codec", "psnr_codec", "mse_post", "psnr_post"]
RD_COLUMNS = ["label", "bpp", "psnr_db", "n_images"]
CODEC_LABEL = "codec"
POST_LABEL = "codec+msgdn"


@dataclass(frozen=True)
class RDPoint:
    label: str
    bpp: float
    psnr_db: float
    n_images: int

    def __post_init__(self):
        if not self.bpp > 0:
            raise ConfigError(f"RD point {self.label}: bpp must be positive")
        if self.n_images < 1:
            raise ConfigError(f"RD point {self.label}: n_images must be >= 1")


def image_mse(a: np.ndarray, b: np.ndarray, y_only: bool = False) -> float:
    """MSE on the 0..255 scale, over RGB samples or over BT.601 luma."""
    if a.shape != b.shape:
        raise ConfigError(f"image shapes differ: {a.shape} vs {b.shape}")
    a = a.astype(np.float64)
    b = b.astype(np.float64)
    if y_only:
        a = a @ RGB_TO_YUV[0]
        b = b @ RGB_TO_YUV[0]
    return float(np.mean((a - b) ** 2))


def image_psnr(a: np.ndarray, b: np.ndarray, y_only: bool = False) -> float:
    return psnr(image_mse(a, b, y_only), 255.0)


def mean_psnr(values: Sequence[float]) -> float:
    values = list(values)
    if any(math.isinf(v) for v in values):
        return math.inf
    return sum(values) / len(values)


@torch.no_grad()
def enhance(model: MSGDN, rgb: np.ndarray, tile: int | None = None, margin: int = 16) -> np.ndarray:
    """Run the generator on an RGB uint8 image and quantize back to uint8.

    With `tile`, the image is processed in tiles that each carry `margin`
    pixels of context, and only the tile interiors are kept.
    """
    model.eval()
    x = torch.from_numpy(rgb).permute(2, 0, 1).unsqueeze(0).float() / 255.0
    if tile is None:
        y = model(x)
    else:
        _, _, h, w = x.shape
        y = torch.empty_like(x)
        for top in range(0, h, tile):
            for left in range(0, w, tile):
                t0, l0 = max(top - margin, 0), max(left - margin, 0)
                t1, l1 = min(top + tile + margin, h), min(left + tile + margin, w)
                out = model(x[..., t0:t1, l0:l1])
                bh, bw = min(tile, h - top), min(tile, w - left)
                y[..., top:top + bh, left:left + bw] = out[..., top - t0:top - t0 + bh, left - l0:left - l0 + bw]
    y = y.clamp(0.0, 1.0).squeeze(0).permute(1, 2, 0).numpy()
    return np.rint(y * 255.0).astype(np.uint8)


def infer(checkpoint, image_in, image_out, tile: int | None = None) -> None:
    model = load_generator(checkpoint)
    save_rgb(image_out, enhance(model, load_rgb(image_in), tile=tile))


def _fmt(v: float) -> str:
    return "inf" if math.isinf(v) else repr(float(v))


def evaluate(manifest: DatasetManifest, plan: Dict[str, int], checkpoint=None, out_csv=None,
             post_dir=None, y_only: bool = False, tile: int | None = None) -> Tuple[List[RDPoint], List[dict]]:
    """PSNR/bpp of the plan-selected pairs, codec-only and (with a checkpoint) post-processed.

    Images are handled in path order. Returns the RD points and per-image rows.
    """
    if not plan:
        raise ConfigError("empty allocation plan")
    missing = []
    pairs: List[ImagePair] = []
    for image in sorted(plan):
        try:
            pair = manifest.find(image, plan[image])
        except KeyError:
            missing.append(f"{image} (QP {plan[image]}): not in manifest")
            continue
        for p in (pair.original_path, pair.compressed_path):
            if not manifest.resolve(p).is_file():
                missing.append(f"{image} (QP {pair.qp}): missing file {p}")
        pairs.append(pair)
    if missing:
        raise FileNotFoundError("cannot evaluate plan:\n  " + "\n  ".join(missing))

    model = load_generator(checkpoint) if checkpoint is not None else None
    if post_dir is not None:
        Path(post_dir).mkdir(parents=True, exist_ok=True)
    rows = []
    for pair in pairs:
        original = load_rgb(manifest.resolve(pair.original_path))
        decoded = load_rgb(manifest.resolve(pair.compressed_path))
        row = {
            "image": pair.original_path, "qp": pair.qp, "bits": pair.bits,
            "width": pair.width, "height": pair.height, "bpp": pair.bpp,
            "mse_codec": image_mse(original, decoded, y_only),
        }
        row["psnr_codec"] = psnr(row["mse_codec"])
        if model is not None:
            post = enhance(model, decoded, tile=tile)
            row["mse_post"] = image_mse(original, post, y_only)
            row["psnr_post"] = psnr(row["mse_post"])
            if post_dir is not None:
                save_rgb(Path(post_dir) / f"{Path(pair.compressed_path).stem}_post.png", post)
        rows.append(row)

    n = len(rows)
    bpp = sum(r["bpp"] for r in rows) / n
    points = [RDPoint(CODEC_LABEL, bpp, mean_psnr(r["psnr_codec"] for r in rows), n)]
    if model is not None:
        points.append(RDPoint(POST_LABEL, bpp, mean_psnr(r["psnr_post"] for r in rows), n))
    if out_csv is not None:
        write_eval_csv(out_csv, rows)
    return points, rows


def write_eval_csv(path, rows: Sequence[dict]) -> None:
    buf = io.StringIO()
    buf.write(f"# msgdn-eval v{EVAL_VERSION}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(EVAL_COLUMNS)
    for r in rows:
        w.writerow([
            r["image"], r["qp"], r["bits"], r["width"], r["height"], repr(r["bpp"]),
            repr(r["mse_codec"]), _fmt(r["psnr_codec"]),
            repr(r["mse_post"]) if "mse_post" in r else "",
            _fmt(r["psnr_post"]) if "psnr_post" in r else "",
        ])
    Path(path).write_text(buf.getvalue())


def candidates_from_manifest(manifest: DatasetManifest, out_csv, checkpoint=None,
                             y_only: bool = False) -> List[dict]:
    """Candidate table for allocation: codec PSNR per pair, plus post-processed PSNR with a checkpoint."""
    model = load_generator(checkpoint) if checkpoint is not None else None
    rows = []
    for pair in sorted(manifest.pairs, key=lambda p: (p.original_path, p.qp)):
        original = load_rgb(manifest.resolve(pair.original_path))
        decoded = load_rgb(manifest.resolve(pair.compressed_path))
        row = {"image": pair.original_path, "qp": pair.qp, "bits": pair.bits,
               "width": pair.width, "height": pair.height,
               "quality_db": image_psnr(original, decoded, y_only)}
        if model is not None:
            row["quality_post_db"] = image_psnr(original, enhance(model, decoded), y_only)
        rows.append(row)
    write_candidates(out_csv, rows, ["quality_post_db"] if model is not None else [])
    return rows


# --- RD tables and plots ---------------------------------------------------

def emit_rd(points: Sequence[RDPoint], out_csv, out_plot=None) -> None:
    if not points:
        raise ConfigError("no RD points to emit")
    ordered = sorted(points, key=lambda p: (p.label, p.bpp))
    buf = io.StringIO()
    buf.write(f"# msgdn-rd v{RD_VERSION}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RD_COLUMNS)
    for p in ordered:
        w.writerow([p.label, repr(p.bpp), _fmt(p.psnr_db), p.n_images])
    Path(out_csv).write_text(buf.getvalue())
    if out_plot is not None:
        _plot(ordered, out_plot)


def read_rd(path) -> List[RDPoint]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != f"# msgdn-rd v{RD_VERSION}":
        raise ConfigError(f"{path}: not an msgdn RD table (v{RD_VERSION})")
    rows = csv.DictReader(lines[1:])
    return [RDPoint(r["label"], float(r["bpp"]), float(r["psnr_db"]), int(r["n_images"])) for r in rows]


def _plot(points: Sequence[RDPoint], out_plot) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4), dpi=100)
    labels = sorted({p.label for p in points})
    for label in labels:
        pts = [p for p in points if p.label == label and math.isfinite(p.psnr_db)]
        ax.plot([p.bpp for p in pts], [p.psnr_db for p in pts], marker="o", label=label)
    ax.set_xlabel("bpp")
    ax.set_ylabel("PSNR (dB)")
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_plot, metadata={"Software": None})
    plt.close(fig)
