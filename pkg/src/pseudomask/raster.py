"""Raster types: float RGB image grids, binary masks, RLE, PPM I/O."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class RleError(ValueError):
    """Malformed run-length encoding."""


@dataclass(frozen=True)
class ImageGrid:
    """RGB image with row-major intensities in [0, 1].

    ``data`` has shape (height, width, 3). ``mean_pixel`` is the per-channel
    arithmetic mean, cached because masking iterations reuse it heavily.
    """

    data: np.ndarray
    mean_pixel: np.ndarray = field(init=False)

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float64)
        if d.ndim != 3 or d.shape[2] != 3 or d.shape[0] < 1 or d.shape[1] < 1:
            raise ValueError(f"image data must be (h, w, 3), got {d.shape}")
        if not np.isfinite(d).all() or d.min() < 0.0 or d.max() > 1.0:
            raise ValueError("image intensities must be finite and in [0, 1]")
        object.__setattr__(self, "data", d)
        object.__setattr__(self, "mean_pixel", d.mean(axis=(0, 1)))
        self.data.setflags(write=False)
        self.mean_pixel.setflags(write=False)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return 3

    def with_pixels_replaced(self, pixel_bits: np.ndarray, value: np.ndarray) -> "ImageGrid":
        """New image with pixels under set bits overwritten by ``value`` (3,)."""
        if pixel_bits.shape != (self.height, self.width):
            raise ValueError("mask shape does not match image")
        out = self.data.copy()
        out[pixel_bits] = np.asarray(value, dtype=np.float64)
        return ImageGrid(out)


@dataclass(frozen=True)
class BinaryMask:
    """Row-major boolean grid tied to an image or patch extent."""

    bits: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.bits)
        if b.dtype != np.bool_:
            b = b.astype(np.bool_)
        if b.ndim != 2 or b.shape[0] < 1 or b.shape[1] < 1:
            raise ValueError(f"mask bits must be 2-d and non-empty, got {b.shape}")
        object.__setattr__(self, "bits", b)
        self.bits.setflags(write=False)

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    def count(self) -> int:
        return int(self.bits.sum())


def rle_encode(mask: BinaryMask) -> dict:
    """COCO uncompressed RLE: column-major scan, counts starting with zeros."""
    flat = mask.bits.flatten(order="F")
    counts: list[int] = []
    run_val = False
    run_len = 0
    for v in flat:
        if v == run_val:
            run_len += 1
        else:
            counts.append(run_len)
            run_val = bool(v)
            run_len = 1
    counts.append(run_len)
    return {"counts": counts, "size": [mask.height, mask.width]}


def rle_decode(rle: dict) -> BinaryMask:
    """Inverse of :func:`rle_encode`; rejects counts not summing to h*w."""
    h, w = int(rle["size"][0]), int(rle["size"][1])
    counts = rle["counts"]
    if any(c < 0 for c in counts):
        raise RleError("negative run length")
    total = sum(counts)
    if total != h * w:
        raise RleError(f"counts sum to {total}, expected {h * w}")
    flat = np.zeros(h * w, dtype=np.bool_)
    pos = 0
    val = False
    for c in counts:
        if val:
            flat[pos : pos + c] = True
        pos += c
        val = not val
    return BinaryMask(flat.reshape((h, w), order="F"))


def mask_iou(a: BinaryMask, b: BinaryMask) -> float:
    """Bit-count IoU of two same-shape masks (0.0 when both are empty)."""
    if a.bits.shape != b.bits.shape:
        raise ValueError("mask shapes differ")
    inter = int(np.logical_and(a.bits, b.bits).sum())
    union = int(np.logical_or(a.bits, b.bits).sum())
    return inter / union if union else 0.0


def write_ppm(img: ImageGrid, path) -> None:
    """Write a binary P6 PPM. Intensities are scaled by 255 and rounded."""
    arr = np.floor(img.data * 255.0 + 0.5).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{img.width} {img.height}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())


def read_ppm(path) -> ImageGrid:
    """Read a binary P6 PPM written by :func:`write_ppm`."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if not raw.startswith(b"P6"):
        raise ValueError(f"{path}: not a binary PPM file")
    # header = magic, width, height, maxval; comments allowed between tokens
    tokens: list[bytes] = []
    pos = 2
    while len(tokens) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    pos += 1
    w, h, maxval = (int(t) for t in tokens)
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 supported")
    data = np.frombuffer(raw[pos : pos + w * h * 3], dtype=np.uint8)
    if data.size != w * h * 3:
        raise ValueError(f"{path}: truncated pixel payload")
    return ImageGrid(data.reshape(h, w, 3).astype(np.float64) / 255.0)
