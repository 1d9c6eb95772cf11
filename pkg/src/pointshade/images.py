"""Float image container and PFM/PNG input-output.

PFM files store linear float32 values bottom-up.  Coverage is encoded with a
-1 sentinel in the first channel (shading values are never negative), so a
single file round-trips both the image and its mask.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

UNCOVERED_SENTINEL = -1.0


@dataclass
class Image:
    """Linear radiometric image: (h, w, c) float32 with a coverage mask."""

    values: np.ndarray            # (h, w, c) float32
    mask: np.ndarray = field(default=None)  # (h, w) bool

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32)
        if v.ndim == 2:
            v = v[:, :, None]
        if v.ndim != 3 or v.shape[2] not in (1, 3):
            raise ValueError(f"image values must be (h, w, 1|3), got {v.shape}")
        self.values = v
        if self.mask is None:
            self.mask = np.ones(v.shape[:2], dtype=bool)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.shape != v.shape[:2]:
            raise ValueError(f"mask shape {self.mask.shape} does not match image {v.shape[:2]}")
        if not np.all(np.isfinite(v[self.mask])):
            raise ValueError("image contains non-finite covered values")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]

    def luminance(self) -> np.ndarray:
        if self.channels == 1:
            return self.values[:, :, 0]
        v = self.values
        return 0.2126 * v[:, :, 0] + 0.7152 * v[:, :, 1] + 0.0722 * v[:, :, 2]


def save_pfm(path, image: Image) -> None:
    """Write PFM ('Pf' grayscale / 'PF' color), little-endian, bottom-up.

    Uncovered pixels are written as the -1 sentinel in every channel.
    """
    v = image.values.copy()
    v[~image.mask] = UNCOVERED_SENTINEL
    header = b"PF\n" if image.channels == 3 else b"Pf\n"
    with open(path, "wb") as f:
        f.write(header)
        f.write(f"{image.width} {image.height}\n".encode("ascii"))
        f.write(b"-1.0\n")  # negative scale => little-endian
        f.write(np.ascontiguousarray(v[::-1], dtype="<f4").tobytes())


def load_pfm(path) -> Image:
    with open(path, "rb") as f:
        magic = f.readline().strip()
        if magic not in (b"PF", b"Pf"):
            raise ValueError(f"not a PFM file: magic {magic!r}")
        dims = f.readline().split()
        width, height = int(dims[0]), int(dims[1])
        scale = float(f.readline().strip())
        channels = 3 if magic == b"PF" else 1
        count = width * height * channels
        data = np.frombuffer(f.read(4 * count), dtype="<f4" if scale < 0 else ">f4", count=count)
    v = data.reshape(height, width, channels)[::-1].astype(np.float32)
    mask = v[:, :, 0] >= 0
    v = v.copy()
    v[~mask] = 0.0
    return Image(values=v, mask=mask)


def save_png(path, image: Image, background: float = 0.0) -> None:
    """8-bit preview of an already display-ready ([0, 1]) image."""
    from PIL import Image as PILImage

    v = np.clip(image.values, 0.0, 1.0).copy()
    v[~image.mask] = background
    if v.shape[2] == 1:
        v = np.repeat(v, 3, axis=2)
    PILImage.fromarray((v * 255.0 + 0.5).astype(np.uint8)).save(path)
