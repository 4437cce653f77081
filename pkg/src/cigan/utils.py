"""Seeding, deterministic-mode plumbing, CSV logging, image grid export."""

import csv
import hashlib
import os

import numpy as np
import torch
from PIL import Image


def derive_seed(master_seed: int, tag: str) -> int:
    """Stable 63-bit stream seed for a named consumer of the master seed."""
    digest = hashlib.sha256(f"{master_seed}:{tag}".encode()).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFFFFFFFFFFFFFF


def torch_generator(master_seed: int, tag: str) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(derive_seed(master_seed, tag))
    return gen


def apply_determinism(deterministic: bool) -> None:
    """Single-threaded, algorithm-pinned execution when bitwise reproducibility is required."""
    if deterministic:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)


class CsvLogger:
    """Appends rows with a fixed column set; float formatting is reproducible."""

    def __init__(self, path, columns):
        self.path = str(path)
        self.columns = list(columns)
        if not os.path.exists(self.path):
            with open(self.path, "w", newline="") as f:
                csv.writer(f).writerow(self.columns)

    def append(self, row):
        values = [format_value(row[c]) for c in self.columns]
        with open(self.path, "a", newline="") as f:
            csv.writer(f).writerow(values)


def format_value(v):
    if isinstance(v, float):
        return f"{v:.10g}"
    return v


def to_uint8_image(img: np.ndarray) -> np.ndarray:
    """(3,H,W) in [-1,1] -> (H,W,3) uint8."""
    arr = np.clip((img.transpose(1, 2, 0) + 1.0) * 127.5, 0, 255)
    return np.round(arr).astype(np.uint8)


def save_image_grid(images: np.ndarray, path, rows: int = 8, cols: int = 8) -> None:
    """Tile the first rows*cols images (N,3,H,W in [-1,1]) into one PNG."""
    n, _, h, w = images.shape
    canvas = np.zeros((rows * h, cols * w, 3), dtype=np.uint8)
    for idx in range(min(n, rows * cols)):
        r, c = divmod(idx, cols)
        canvas[r * h:(r + 1) * h, c * w:(c + 1) * w] = to_uint8_image(images[idx])
    Image.fromarray(canvas).save(str(path))


def save_image(img: np.ndarray, path) -> None:
    Image.fromarray(to_uint8_image(img)).save(str(path))


def load_image(path, resolution: int) -> np.ndarray:
    """PNG -> (3,R,R) float32 in [-1,1]; rejects mismatched sizes."""
    im = Image.open(str(path)).convert("RGB")
    if im.size != (resolution, resolution):
        raise ValueError(f"expected a {resolution}x{resolution} image, got {im.size}")
    arr = np.asarray(im, dtype=np.float32) / 127.5 - 1.0
    return arr.transpose(2, 0, 1)


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(str(path), "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
