"""
PPM (binary P6, maxval 255) and PFM (single channel "Pf") readers/writers.

RGB travels as 3xHxW float64 in [0, 1]; depth as 1xHxW float64 meters.
Header problems raise ImageFormatError with the byte offset where parsing
stopped.
"""
import io
import logging
import os
from typing import List, Tuple, Union

import numpy as np
from PIL import Image

from errors import ImageFormatError, ShapeError

logger = logging.getLogger(__name__)

PathLike = Union[str, os.PathLike]


def _read_bytes(path: PathLike) -> bytes:
    with open(path, "rb") as f:
        return f.read()


def _ppm_header(data: bytes) -> Tuple[int, int, int, int]:
    """Return (width, height, maxval, payload offset) of a P6 file"""
    if data[:2] != b"P6":
        raise ImageFormatError(f"expected P6 magic, found {data[:2]!r}", 0)
    pos = 2
    tokens: List[int] = []
    while len(tokens) < 3:
        if pos >= len(data):
            raise ImageFormatError("header ended before width, height and maxval", pos)
        byte = data[pos:pos + 1]
        if byte in (b" ", b"\t", b"\r", b"\n"):
            pos += 1
        elif byte == b"#":
            end = data.find(b"\n", pos)
            if end < 0:
                raise ImageFormatError("unterminated header comment", pos)
            pos = end + 1
        else:
            start = pos
            while pos < len(data) and data[pos:pos + 1] not in (b" ", b"\t", b"\r", b"\n", b"#"):
                pos += 1
            token = data[start:pos]
            if not token.isdigit():
                raise ImageFormatError(f"non-numeric header field {token!r}", start)
            tokens.append(int(token))
    if pos >= len(data) or data[pos:pos + 1] not in (b" ", b"\t", b"\r", b"\n"):
        raise ImageFormatError("missing whitespace after maxval", pos)
    width, height, maxval = tokens
    if width < 1 or height < 1:
        raise ImageFormatError(f"invalid dimensions {width}x{height}", pos)
    if maxval != 255:
        raise ImageFormatError(f"only maxval 255 is supported, got {maxval}", pos)
    return width, height, maxval, pos + 1


def read_ppm_size(path: PathLike) -> Tuple[int, int]:
    """(height, width) from the header alone"""
    with open(path, "rb") as f:
        head = f.read(256)
    width, height, _, _ = _ppm_header(head)
    return height, width


def read_ppm(path: PathLike) -> np.ndarray:
    data = _read_bytes(path)
    width, height, _, offset = _ppm_header(data)
    expected = 3 * width * height
    available = len(data) - offset
    if available < expected:
        raise ImageFormatError(
            f"truncated payload: expected {expected} bytes, found {available}", len(data))
    with Image.open(io.BytesIO(data)) as image:
        pixels = np.asarray(image.convert("RGB"), dtype=np.float64)
    return pixels.transpose(2, 0, 1) / 255.0


def write_ppm(path: PathLike, rgb: np.ndarray):
    """Quantize a 3xHxW image in [0, 1] to 8 bits and write binary P6"""
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.ndim != 3 or rgb.shape[0] != 3:
        raise ShapeError(f"write_ppm expects 3xHxW, got {rgb.shape}", dimension=0)
    quantized = np.clip(np.rint(rgb * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(np.ascontiguousarray(quantized), mode="RGB").save(path, format="PPM")


def _pfm_line(data: bytes, pos: int, what: str) -> Tuple[str, int]:
    end = data.find(b"\n", pos)
    if end < 0:
        raise ImageFormatError(f"unterminated PFM {what} line", pos)
    try:
        return data[pos:end].decode("ascii").strip(), end + 1
    except UnicodeDecodeError:
        raise ImageFormatError(f"non-ASCII PFM {what} line", pos)


def _pfm_header(data: bytes) -> Tuple[int, int, str, int]:
    """Return (width, height, numpy dtype, payload offset)"""
    identifier, pos = _pfm_line(data, 0, "identifier")
    if identifier == "PF":
        raise ImageFormatError("three-channel PF files are not supported for depth", 0)
    if identifier != "Pf":
        raise ImageFormatError(f"expected 'Pf' identifier, found {identifier!r}", 0)
    dims_start = pos
    dims, pos = _pfm_line(data, pos, "dimensions")
    parts = dims.split()
    if len(parts) != 2 or not all(p.isdigit() for p in parts):
        raise ImageFormatError(f"malformed dimensions line {dims!r}", dims_start)
    width, height = int(parts[0]), int(parts[1])
    if width < 1 or height < 1:
        raise ImageFormatError(f"invalid dimensions {width}x{height}", dims_start)
    scale_start = pos
    scale_text, pos = _pfm_line(data, pos, "scale")
    try:
        scale = float(scale_text)
    except ValueError:
        raise ImageFormatError(f"malformed scale {scale_text!r}", scale_start)
    if scale == 0:
        raise ImageFormatError("scale must be nonzero", scale_start)
    dtype = "<f4" if scale < 0 else ">f4"
    return width, height, dtype, pos


def read_pfm_size(path: PathLike) -> Tuple[int, int]:
    with open(path, "rb") as f:
        head = f.read(256)
    width, height, _, _ = _pfm_header(head)
    return height, width


def read_pfm(path: PathLike) -> np.ndarray:
    """Depth as 1xHxW float64, top row first; big-endian files are byte-swapped"""
    data = _read_bytes(path)
    width, height, dtype, offset = _pfm_header(data)
    expected = 4 * width * height
    available = len(data) - offset
    if available < expected:
        raise ImageFormatError(
            f"truncated payload: expected {expected} bytes, found {available}", len(data))
    if dtype == ">f4":
        logger.debug(f"{path}: big-endian PFM, byte-swapping")
    rows = np.frombuffer(data, dtype=dtype, count=width * height, offset=offset).reshape(height, width)
    # PFM stores the bottom row first
    return np.flipud(rows).astype(np.float64)[None]


def write_pfm(path: PathLike, depth: np.ndarray):
    depth = np.asarray(depth)
    if depth.ndim == 3:
        if depth.shape[0] != 1:
            raise ShapeError(f"write_pfm expects a single channel, got {depth.shape}", dimension=0)
        depth = depth[0]
    if depth.ndim != 2:
        raise ShapeError(f"write_pfm expects HxW or 1xHxW, got {depth.shape}")
    height, width = depth.shape
    header = f"Pf\n{width} {height}\n-1.0\n".encode("ascii")
    payload = np.ascontiguousarray(np.flipud(depth).astype("<f4")).tobytes()
    with open(path, "wb") as f:
        f.write(header)
        f.write(payload)
