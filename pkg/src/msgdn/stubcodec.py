"""Self-contained stand-in codec for tests and desk-scale runs.

Reads/writes 8-bit planar YUV444 like a real codec binary would::

    python -m msgdn.stubcodec encode --mode dct --input in.yuv --output s.bin \\
        --qp 37 --width W --height H
    python -m msgdn.stubcodec decode --input s.bin --output out.yuv

``identity`` stores the planes losslessly (zlib). ``dct`` quantizes 8x8
block DCT coefficients with the H.26x step size 2^((qp-4)/6), which gives
blocking/blurring artifacts and a bit cost that falls as QP rises.
"""
from __future__ import annotations

import argparse
import struct
import sys
import zlib

import numpy as np

MAGIC = b"MSGS"
_HEADER = struct.Struct("<4sBBHHB")  # magic, version, mode, width, height, qp
MODES = {"identity": 0, "dct": 1}
BLOCK = 8


def qstep(qp: int) -> float:
    return 2.0 ** ((qp - 4) / 6.0)


def _blocks(plane: np.ndarray) -> np.ndarray:
    h, w = plane.shape
    return plane.reshape(h // BLOCK, BLOCK, w // BLOCK, BLOCK).transpose(0, 2, 1, 3)


def _unblocks(blocks: np.ndarray) -> np.ndarray:
    nh, nw = blocks.shape[:2]
    return blocks.transpose(0, 2, 1, 3).reshape(nh * BLOCK, nw * BLOCK)


def encode(planes: np.ndarray, qp: int, mode: str) -> bytes:
    _, h, w = planes.shape
    header = _HEADER.pack(MAGIC, 1, MODES[mode], w, h, qp)
    if mode == "identity":
        return header + zlib.compress(planes.tobytes(), 9)
    from scipy.fft import dctn

    ph, pw = (-h) % BLOCK, (-w) % BLOCK
    padded = np.pad(planes.astype(np.float64) - 128.0, ((0, 0), (0, ph), (0, pw)), mode="edge")
    step = qstep(qp)
    coefs = [np.rint(dctn(_blocks(p), axes=(-2, -1), norm="ortho") / step) for p in padded]
    q = np.stack(coefs).astype(np.int16)
    return header + zlib.compress(q.tobytes(), 9)


def decode(stream: bytes) -> np.ndarray:
    magic, version, mode, w, h, qp = _HEADER.unpack_from(stream)
    if magic != MAGIC or version != 1:
        raise ValueError("not a stub-codec bitstream")
    payload = zlib.decompress(stream[_HEADER.size:])
    if mode == MODES["identity"]:
        return np.frombuffer(payload, dtype=np.uint8).reshape(3, h, w)
    from scipy.fft import idctn

    hp, wp = h + (-h) % BLOCK, w + (-w) % BLOCK
    q = np.frombuffer(payload, dtype=np.int16).reshape(3, hp // BLOCK, wp // BLOCK, BLOCK, BLOCK)
    step = qstep(qp)
    planes = [_unblocks(idctn(c.astype(np.float64) * step, axes=(-2, -1), norm="ortho")) for c in q]
    out = np.clip(np.rint(np.stack(planes) + 128.0), 0, 255).astype(np.uint8)
    return out[:, :h, :w]


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="msgdn.stubcodec")
    sub = ap.add_subparsers(dest="cmd", required=True)
    enc = sub.add_parser("encode")
    enc.add_argument("--mode", choices=sorted(MODES), default="dct")
    enc.add_argument("--input", required=True)
    enc.add_argument("--output", required=True)
    enc.add_argument("--qp", type=int, required=True)
    enc.add_argument("--width", type=int, required=True)
    enc.add_argument("--height", type=int, required=True)
    dec = sub.add_parser("decode")
    dec.add_argument("--input", required=True)
    dec.add_argument("--output", required=True)
    dec.add_argument("--width", type=int)
    dec.add_argument("--height", type=int)
    args = ap.parse_args(argv)

    if args.cmd == "encode":
        raw = np.fromfile(args.input, dtype=np.uint8)
        if raw.size != 3 * args.width * args.height:
            print(f"input size {raw.size} does not match {args.width}x{args.height} YUV444", file=sys.stderr)
            return 2
        planes = raw.reshape(3, args.height, args.width)
        with open(args.output, "wb") as f:
            f.write(encode(planes, args.qp, args.mode))
    else:
        with open(args.input, "rb") as f:
            planes = decode(f.read())
        planes.tofile(args.output)
    return 0


if __name__ == "__main__":
    sys.exit(main())
