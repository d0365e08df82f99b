"""File formats: TEA1 tensors, checkpoints, PGM/PPM images.

TEA1 record (all little-endian)::

    b"TEA1" | u8 dtype (0=f32, 1=f64) | u8 rank | u32 dim * rank | payload

A checkpoint is a text header followed by TEA1 records in manifest order::

    # teaformer checkpoint v1
    config.embed_dim=8
    ...
    param shallow.weight f64 3x3x3x8
    ...
    <blank line>
    <TEA1 record> <TEA1 record> ...
"""

from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import BinaryIO, Union

import numpy as np

from .model import ModelConfig, Params, param_shapes
from .tensor import Tensor

MAGIC = b"TEA1"
DTYPE_TAGS = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
TAG_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
DTYPE_NAMES = {0: "f32", 1: "f64"}
CHECKPOINT_HEADER = "# teaformer checkpoint v1"

PathLike = Union[str, Path]


class FormatError(ValueError):
    """A file does not follow the format it claims."""


# -- TEA1 -------------------------------------------------------------------


def write_tensor(stream: BinaryIO, array: np.ndarray) -> None:
    array = np.asarray(getattr(array, "data", array))
    dtype = array.dtype.newbyteorder("<")
    if dtype not in DTYPE_TAGS:
        raise FormatError(f"unsupported dtype {array.dtype}")
    stream.write(MAGIC)
    stream.write(struct.pack("<BB", DTYPE_TAGS[dtype], array.ndim))
    stream.write(struct.pack(f"<{array.ndim}I", *array.shape))
    stream.write(np.ascontiguousarray(array, dtype=dtype).tobytes())


def read_tensor(stream: BinaryIO) -> np.ndarray:
    magic = stream.read(4)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    head = stream.read(2)
    if len(head) != 2:
        raise FormatError("truncated TEA1 header")
    tag, rank = struct.unpack("<BB", head)
    if tag not in TAG_DTYPES:
        raise FormatError(f"unknown dtype tag {tag}")
    dims_raw = stream.read(4 * rank)
    if len(dims_raw) != 4 * rank:
        raise FormatError("truncated TEA1 dims")
    shape = struct.unpack(f"<{rank}I", dims_raw)
    dtype = TAG_DTYPES[tag]
    count = int(np.prod(shape, dtype=np.int64))
    payload = stream.read(count * dtype.itemsize)
    if len(payload) != count * dtype.itemsize:
        raise FormatError("truncated TEA1 payload")
    return np.frombuffer(payload, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))


def save_tensor(path: PathLike, array) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, array)


def load_tensor(path: PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_tensor(fh)


# -- checkpoints ------------------------------------------------------------


def _dtype_name(arr: np.ndarray) -> str:
    return DTYPE_NAMES[DTYPE_TAGS[arr.dtype.newbyteorder("<")]]


def _shape_text(shape) -> str:
    return "x".join(str(d) for d in shape) if shape else "scalar"


def save_checkpoint(path: PathLike, cfg: ModelConfig, params: Params) -> None:
    lines = [CHECKPOINT_HEADER]
    lines += [f"config.{line}" for line in cfg.to_text().splitlines()]
    for name, t in params.items():
        lines.append(f"param {name} {_dtype_name(t.data)} {_shape_text(t.shape)}")
    buf = io.BytesIO()
    buf.write(("\n".join(lines) + "\n\n").encode("ascii"))
    for t in params.values():
        write_tensor(buf, t.data)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: PathLike) -> tuple[ModelConfig, Params]:
    raw = Path(path).read_bytes()
    end = raw.find(b"\n\n")
    if not raw.startswith(CHECKPOINT_HEADER.encode()) or end < 0:
        raise FormatError(f"{path} is not a teaformer checkpoint")
    header = raw[:end].decode("ascii").splitlines()[1:]
    config_lines = [line[len("config."):] for line in header if line.startswith("config.")]
    cfg = ModelConfig.from_text("\n".join(config_lines))
    manifest = [line.split() for line in header if line.startswith("param ")]
    stream = io.BytesIO(raw[end + 2 :])
    expected = param_shapes(cfg)
    params: Params = {}
    for _, name, dtype_name, shape_text in manifest:
        arr = read_tensor(stream)
        shape = () if shape_text == "scalar" else tuple(int(d) for d in shape_text.split("x"))
        if arr.shape != shape or _dtype_name(arr) != dtype_name:
            raise FormatError(f"record for {name} does not match its manifest entry")
        if expected.get(name) != shape:
            raise FormatError(f"parameter {name} has no slot of shape {shape} in this config")
        params[name] = Tensor(arr, requires_grad=True, name=name)
    missing = set(expected) - set(params)
    if missing:
        raise FormatError(f"checkpoint lacks parameters: {sorted(missing)}")
    return cfg, params


# -- PGM / PPM --------------------------------------------------------------


def _tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    """Read ``count`` whitespace-separated header tokens, skipping ``#`` comments."""
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < count:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos >= len(data):
            raise FormatError("truncated PNM header")
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    return tokens, pos + 1  # exactly one whitespace byte before the raster


def read_pnm(path: PathLike) -> np.ndarray:
    """Binary PGM (P5) or PPM (P6) -> ``H x W x C`` float64 in ``[0, 1]``."""
    data = Path(path).read_bytes()
    try:
        (magic, width, height, maxval), start = _tokens(data, 4)
        channels = {b"P5": 1, b"P6": 3}[magic]
        width, height, maxval = int(width), int(height), int(maxval)
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{path}: malformed PGM/PPM header") from exc
    if width <= 0 or height <= 0 or not 0 < maxval < 65536:
        raise FormatError(f"{path}: bad dimensions or maxval")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    count = width * height * channels
    raster = data[start : start + count * dtype.itemsize]
    if len(raster) != count * dtype.itemsize:
        raise FormatError(f"{path}: truncated raster")
    pixels = np.frombuffer(raster, dtype=dtype).reshape(height, width, channels)
    return pixels.astype(np.float64) / maxval


def write_pnm(path: PathLike, image: np.ndarray, maxval: int = 255) -> None:
    """Write ``H x W`` / ``H x W x 1`` as P5 and ``H x W x 3`` as P6; values clipped to ``[0, 1]``."""
    image = np.asarray(getattr(image, "data", image), dtype=np.float64)
    if image.ndim == 2:
        image = image[..., None]
    h, w, c = image.shape
    magic = {1: "P5", 3: "P6"}.get(c)
    if magic is None:
        raise FormatError(f"cannot store {c} channels as PGM/PPM")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    pixels = np.round(np.clip(image, 0.0, 1.0) * maxval).astype(dtype)
    with open(path, "wb") as fh:
        fh.write(f"{magic}\n{w} {h}\n{maxval}\n".encode("ascii"))
        fh.write(pixels.tobytes())
