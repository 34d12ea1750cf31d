"""Raster file I/O: PFM float buffers and PNG integer buffers.

PFM (portable float map) files are written little-endian (negative scale)
with rows stored bottom-up, per the usual convention.  As an extension,
``write_pfm`` can emit ``# key=value`` comment lines directly after the
type magic; ``read_pfm`` skips any such lines, so files remain readable by
this module regardless of annotations.  Readers that reject comment lines
can consume the un-annotated files produced by the render pipeline.
"""

from __future__ import annotations

import numpy as np
from PIL import Image


def write_pfm(path, data: np.ndarray, comments: list[str] | None = None) -> None:
    """Write a 2D (grayscale, ``Pf``) or HxWx3 (color, ``PF``) float32 PFM.

    ``comments`` entries are written as ``# <text>`` lines after the magic.
    """
    data = np.asarray(data, dtype=np.float32)
    if data.ndim == 2:
        magic = b"Pf"
    elif data.ndim == 3 and data.shape[2] == 3:
        magic = b"PF"
    else:
        raise ValueError(f"PFM data must be HxW or HxWx3, got shape {data.shape}")
    height, width = data.shape[:2]
    with open(path, "wb") as f:
        f.write(magic + b"\n")
        for line in comments or []:
            f.write(b"# " + line.encode("ascii") + b"\n")
        f.write(f"{width} {height}\n".encode("ascii"))
        f.write(b"-1.0\n")
        f.write(np.flipud(data).astype("<f4").tobytes())


def read_pfm(path) -> tuple[np.ndarray, list[str]]:
    """Read a PFM file; returns ``(array, comments)``.

    Grayscale files come back HxW, color files HxWx3, dtype float32.
    """
    with open(path, "rb") as f:
        magic = f.readline().strip()
        if magic == b"Pf":
            channels = 1
        elif magic == b"PF":
            channels = 3
        else:
            raise ValueError(f"{path}: not a PFM file (magic {magic!r})")
        comments = []
        line = f.readline()
        while line.startswith(b"#"):
            comments.append(line[1:].strip().decode("ascii"))
            line = f.readline()
        width, height = (int(tok) for tok in line.split())
        scale = float(f.readline())
        count = width * height * channels
        raw = f.read(count * 4)
        if len(raw) != count * 4:
            raise ValueError(f"{path}: truncated PFM payload")
    endian = "<f4" if scale < 0 else ">f4"
    data = np.frombuffer(raw, dtype=endian).astype(np.float32)
    data = data.reshape(height, width) if channels == 1 else data.reshape(height, width, 3)
    return np.flipud(data).copy(), comments


def write_png_u8(path, data: np.ndarray) -> None:
    """Write an 8-bit PNG; 2D arrays become grayscale, HxWx3 become RGB."""
    data = np.asarray(data)
    if data.dtype != np.uint8:
        raise ValueError(f"expected uint8, got {data.dtype}")
    Image.fromarray(data).save(path, format="PNG")


def write_png_u16(path, data: np.ndarray) -> None:
    """Write a 2D 16-bit grayscale PNG."""
    data = np.asarray(data)
    if data.ndim != 2 or data.dtype != np.uint16:
        raise ValueError(f"expected 2D uint16, got shape {data.shape} dtype {data.dtype}")
    Image.fromarray(data).save(path, format="PNG")


def read_png(path) -> np.ndarray:
    """Read a PNG into a numpy array (uint8 or uint16 as stored)."""
    with Image.open(path) as img:
        arr = np.asarray(img)
    if arr.dtype == np.int32:  # Pillow promotes 16-bit grayscale to mode I on some paths
        arr = arr.astype(np.uint16)
    return arr.copy()


def mask_to_png_u8(mask: np.ndarray) -> np.ndarray:
    """Binary {0,1} mask to {0,255} uint8 image."""
    return (np.asarray(mask) != 0).astype(np.uint8) * 255


def png_u8_to_mask(img: np.ndarray) -> np.ndarray:
    """{0,255} uint8 image back to a {0,1} uint8 mask."""
    return (np.asarray(img) != 0).astype(np.uint8)


def encode_normal_u8(normal: np.ndarray) -> np.ndarray:
    """Map unit normals from [-1, 1] to [0, 255] for visualization."""
    return np.clip((np.asarray(normal) + 1.0) / 2.0 * 255.0, 0, 255).round().astype(np.uint8)
