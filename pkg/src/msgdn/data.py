"""Compressed-pair data pipeline.

Images are RGB ``uint8`` arrays of shape (H, W, 3) on disk and in the
manifest; the colorspace helpers work on float arrays in [0, 1].
"""
from __future__ import annotations

import json
import logging
import os
import shlex
import subprocess
import sys
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from .errors import CodecError, ConfigError, ShapeError

log = logging.getLogger(__name__)

COLORSPACE = "bt601-full"
_KR, _KB = 0.299, 0.114
_KG = 1.0 - _KR - _KB
RGB_TO_YUV = np.array([
    [_KR, _KG, _KB],
    [-_KR / (2 * (1 - _KB)), -_KG / (2 * (1 - _KB)), 0.5],
    [0.5, -_KG / (2 * (1 - _KR)), -_KB / (2 * (1 - _KR))],
])
YUV_TO_RGB = np.linalg.inv(RGB_TO_YUV)
_CHROMA_OFFSET = np.array([0.0, 0.5, 0.5])

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".ppm", ".tif", ".tiff", ".webp"}


def _check3(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim < 1 or image.shape[-1] != 3:
        raise ShapeError(f"expected 3 channels in the last axis, got shape {image.shape}")
    return image


def rgb_to_yuv444(image: np.ndarray, clip: bool = True) -> np.ndarray:
    """BT.601 full-range RGB -> YUV, chroma offset to 0.5."""
    yuv = _check3(image) @ RGB_TO_YUV.T + _CHROMA_OFFSET
    return np.clip(yuv, 0.0, 1.0) if clip else yuv


def yuv444_to_rgb(image: np.ndarray, clip: bool = True) -> np.ndarray:
    rgb = (_check3(image) - _CHROMA_OFFSET) @ YUV_TO_RGB.T
    return np.clip(rgb, 0.0, 1.0) if clip else rgb


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)


def rgb8_to_yuv8(rgb: np.ndarray) -> np.ndarray:
    return to_uint8(rgb_to_yuv444(rgb.astype(np.float64) / 255.0))


def yuv8_to_rgb8(yuv: np.ndarray) -> np.ndarray:
    return to_uint8(yuv444_to_rgb(yuv.astype(np.float64) / 255.0))


def write_yuv444(path, yuv: np.ndarray) -> None:
    """Planar 8-bit layout: full Y plane, then U, then V, each row-major."""
    if yuv.dtype != np.uint8 or yuv.ndim != 3 or yuv.shape[2] != 3:
        raise ShapeError(f"expected (H, W, 3) uint8, got {yuv.shape} {yuv.dtype}")
    Path(path).write_bytes(np.ascontiguousarray(yuv.transpose(2, 0, 1)).tobytes())


def read_yuv444(path, width: int, height: int) -> np.ndarray:
    raw = np.fromfile(str(path), dtype=np.uint8)
    expected = 3 * width * height
    if raw.size != expected:
        raise CodecError(f"{path}: {raw.size} bytes, expected {expected} for {width}x{height} YUV444")
    return raw.reshape(3, height, width).transpose(1, 2, 0).copy()


def load_rgb(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def save_rgb(path, image: np.ndarray) -> None:
    Image.fromarray(np.asarray(image, dtype=np.uint8), mode="RGB").save(path, format="PNG")


# --- codec -----------------------------------------------------------------

ENCODE_PLACEHOLDERS = ("{input}", "{output}", "{qp}", "{width}", "{height}")
DECODE_PLACEHOLDERS = ("{input}", "{output}")


@dataclass
class CodecSpec:
    """External still-image codec driven through 8-bit planar YUV444 files.

    Templates are split shell-style and formatted token by token, so no shell
    is involved. ``{python}`` expands to the running interpreter.
    """

    name: str
    encode: str
    decode: str
    deterministic: bool = True

    def __post_init__(self):
        for tpl, required, which in ((self.encode, ENCODE_PLACEHOLDERS, "encode"),
                                     (self.decode, DECODE_PLACEHOLDERS, "decode")):
            missing = [p for p in required if p not in tpl]
            if missing:
                raise ConfigError(f"codec {which} template lacks placeholders {missing}")

    @classmethod
    def from_file(cls, path) -> "CodecSpec":
        path = Path(path)
        text = path.read_text()
        if path.suffix == ".json":
            data = json.loads(text)
        else:
            import tomli

            data = tomli.loads(text)
        data = data.get("codec", data)
        return cls(**data)

    def command(self, which: str, **values) -> List[str]:
        tpl = self.encode if which == "encode" else self.decode
        values.setdefault("python", sys.executable)
        return [tok.format(**values) for tok in shlex.split(tpl)]


def stub_codec(mode: str = "dct") -> CodecSpec:
    """The bundled test codec; ``identity`` is lossless, ``dct`` is a lossy block-DCT quantizer."""
    return CodecSpec(
        name=f"msgdn-stub-{mode}",
        encode=("{python} -m msgdn.stubcodec encode --mode " + mode +
                " --input {input} --output {output} --qp {qp} --width {width} --height {height}"),
        decode="{python} -m msgdn.stubcodec decode --input {input} --output {output}",
    )


def _run(cmd: Sequence[str], what: str) -> None:
    try:
        proc = subprocess.run(cmd, capture_output=True, text=True)
    except FileNotFoundError as e:
        raise CodecError(f"{what}: cannot execute {cmd[0]!r}: {e}") from e
    if proc.returncode != 0:
        raise CodecError(
            f"{what} failed with exit status {proc.returncode}\n"
            f"command: {shlex.join(cmd)}\nstdout:\n{proc.stdout}\nstderr:\n{proc.stderr}"
        )


def encode_decode(image: np.ndarray, qp: int, codec: CodecSpec, workdir) -> Tuple[np.ndarray, int]:
    """Round-trip an RGB uint8 image through the codec; returns (decoded RGB, bitstream bits)."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ShapeError(f"expected (H, W, 3) image, got {image.shape}")
    h, w = image.shape[:2]
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    src = workdir / "input.yuv"
    bitstream = workdir / "stream.bin"
    recon = workdir / "recon.yuv"
    for stale in (bitstream, recon):
        stale.unlink(missing_ok=True)
    write_yuv444(src, rgb8_to_yuv8(image))
    fields = dict(width=w, height=h, qp=qp)
    _run(codec.command("encode", input=src, output=bitstream, **fields), f"{codec.name} encode")
    if not bitstream.is_file():
        raise CodecError(f"{codec.name} encode produced no bitstream at {bitstream}")
    bits = 8 * bitstream.stat().st_size
    _run(codec.command("decode", input=bitstream, output=recon, **fields), f"{codec.name} decode")
    if not recon.is_file():
        raise CodecError(f"{codec.name} decode produced no output at {recon}")
    decoded = yuv8_to_rgb8(read_yuv444(recon, w, h))
    return decoded, bits


# --- manifest --------------------------------------------------------------

MANIFEST_FORMAT = "msgdn-manifest"
MANIFEST_VERSION = 1


@dataclass(frozen=True)
class ImagePair:
    original_path: str
    compressed_path: str
    qp: int
    bits: int
    width: int
    height: int

    def __post_init__(self):
        if self.bits <= 0:
            raise ConfigError(f"pair {self.original_path}@{self.qp}: bits must be positive")

    @property
    def bpp(self) -> float:
        return self.bits / (self.width * self.height)


@dataclass
class DatasetManifest:
    pairs: List[ImagePair]
    colorspace: str = COLORSPACE
    codec: str = ""
    qps: List[int] = field(default_factory=list)
    failures: List[dict] = field(default_factory=list)
    root: Optional[Path] = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        seen = set()
        for p in self.pairs:
            key = (p.original_path, p.qp)
            if key in seen:
                raise ConfigError(f"duplicate manifest entry for {p.original_path} at QP {p.qp}")
            seen.add(key)

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() or self.root is None else self.root / p

    def find(self, original_path: str, qp: int) -> ImagePair:
        for p in self.pairs:
            if p.original_path == original_path and p.qp == qp:
                return p
        raise KeyError(f"no pair for {original_path} at QP {qp}")

    def dumps(self) -> str:
        header = {
            "format": MANIFEST_FORMAT,
            "version": MANIFEST_VERSION,
            "colorspace": self.colorspace,
            "codec": self.codec,
            "qps": self.qps,
            "failures": self.failures,
        }
        lines = [json.dumps(header, sort_keys=True)]
        lines += [json.dumps(asdict(p), sort_keys=True) for p in self.pairs]
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str, root=None) -> "DatasetManifest":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines:
            raise ConfigError("empty manifest")
        header = json.loads(lines[0])
        if header.get("format") != MANIFEST_FORMAT:
            raise ConfigError(f"not an msgdn manifest (format={header.get('format')!r})")
        if header.get("version") != MANIFEST_VERSION:
            raise ConfigError(f"unsupported manifest version {header.get('version')}")
        pairs = [ImagePair(**json.loads(ln)) for ln in lines[1:]]
        return cls(pairs=pairs, colorspace=header["colorspace"], codec=header["codec"],
                   qps=list(header.get("qps", [])), failures=list(header.get("failures", [])),
                   root=Path(root) if root is not None else None)

    def save(self, path) -> None:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(self.dumps())
        os.replace(tmp, path)

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        return cls.loads(path.read_text(), root=path.parent.resolve())


def list_images(image_dir) -> List[Path]:
    image_dir = Path(image_dir)
    return sorted(p for p in image_dir.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)


def _relpath(path: Path, root: Path) -> str:
    try:
        return os.path.relpath(path.resolve(), root)
    except ValueError:
        return str(path.resolve())


def build_manifest(image_dir, qps: Iterable[int], codec: CodecSpec, out_path,
                   workers: int = 1) -> DatasetManifest:
    """Encode every image at every QP and persist the pair manifest at `out_path`.

    Decoded images go to ``<out_dir>/decoded``. Pairs already present in an
    existing manifest at `out_path` (with their decoded file on disk) are reused.
    """
    out_path = Path(out_path)
    root = out_path.parent.resolve()
    root.mkdir(parents=True, exist_ok=True)
    decoded_dir = root / "decoded"
    decoded_dir.mkdir(exist_ok=True)
    qps = sorted({int(q) for q in qps})
    images = list_images(image_dir)
    if not images:
        raise ConfigError(f"no images found in {image_dir}")

    cached = {}
    if out_path.is_file():
        old = DatasetManifest.load(out_path)
        if old.codec == codec.name and old.colorspace == COLORSPACE:
            cached = {(p.original_path, p.qp): p for p in old.pairs
                      if old.resolve(p.compressed_path).is_file()}

    jobs = []
    for img in images:
        rel = _relpath(img, root)
        for qp in qps:
            jobs.append((img, rel, qp))

    def run_job(job):
        img, rel, qp = job
        if (rel, qp) in cached:
            return cached[(rel, qp)], None
        try:
            rgb = load_rgb(img)
            with tempfile.TemporaryDirectory(prefix="msgdn-codec-") as tmp:
                decoded, bits = encode_decode(rgb, qp, codec, tmp)
            dst = decoded_dir / f"{img.stem}_qp{qp}.png"
            save_rgb(dst, decoded)
            h, w = rgb.shape[:2]
            return ImagePair(rel, _relpath(dst, root), qp, bits, w, h), None
        except Exception as e:  # logged and counted, never fatal per image
            log.warning("skipping %s at QP %d: %s", img, qp, e)
            return None, {"original_path": rel, "qp": qp, "error": str(e).splitlines()[0]}

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(run_job, jobs))
    else:
        results = [run_job(j) for j in jobs]

    pairs = [p for p, _ in results if p is not None]
    failures = [f for _, f in results if f is not None]
    if failures:
        log.warning("%d of %d encodes failed", len(failures), len(jobs))
    if not pairs:
        raise CodecError(f"no pairs could be built from {image_dir} ({len(failures)} failures)")
    manifest = DatasetManifest(pairs=pairs, codec=codec.name, qps=qps, failures=failures, root=root)
    manifest.save(out_path)
    return manifest


# --- patches ---------------------------------------------------------------

def random_window(height: int, width: int, patch: int, rng: np.random.Generator) -> Tuple[int, int]:
    if patch > height or patch > width:
        raise ShapeError(f"patch {patch} larger than image {height}x{width}")
    top = int(rng.integers(0, height - patch + 1))
    left = int(rng.integers(0, width - patch + 1))
    return top, left


def crop(image: np.ndarray, window: Tuple[int, int], patch: int) -> np.ndarray:
    top, left = window
    return image[top:top + patch, left:left + patch]


def sample_patch(pair: ImagePair, patch: int, rng_seed, manifest: DatasetManifest | None = None):
    """Same random window cut from both images of a pair.

    `rng_seed` is an int seed or a ``numpy.random.Generator``. Returns
    (original crop, compressed crop, (top, left)).
    """
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    resolve = manifest.resolve if manifest is not None else Path
    original = load_rgb(resolve(pair.original_path))
    compressed = load_rgb(resolve(pair.compressed_path))
    if original.shape != compressed.shape:
        raise ShapeError(f"pair images differ in size: {original.shape} vs {compressed.shape}")
    window = random_window(original.shape[0], original.shape[1], patch, rng)
    return crop(original, window, patch), crop(compressed, window, patch), window
