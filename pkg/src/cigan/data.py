"""Synthetic captioned-shapes dataset.

Each sample is a single anti-aliased geometric object with known attributes
(shape, color, size, background, plus a nuisance position that captions never
mention), rendered to a [-1,1] RGB tensor and paired with a templated caption.
The on-disk record format doubles as the ingestion format for externally
converted image-caption datasets.
"""

import math
import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

SHAPES = ("circle", "square", "triangle")
COLORS = ("red", "green", "blue", "yellow")
SIZES = ("small", "large")
BACKGROUNDS = ("black", "white")
SPLITS = ("train", "val", "test")

COLOR_RGB = {
    "red": (1.0, -1.0, -1.0),
    "green": (-1.0, 1.0, -1.0),
    "blue": (-1.0, -1.0, 1.0),
    "yellow": (1.0, 1.0, -1.0),
}
BACKGROUND_RGB = {"black": (-1.0, -1.0, -1.0), "white": (1.0, 1.0, 1.0)}

# Object area as a fraction of the canvas.
AREA_RATIO = {"small": 0.06, "large": 0.20}

POSITION_RANGE = (0.2, 0.8)
VALID_RESOLUTIONS = (32, 64)
SUPERSAMPLE = 4
N_COMBOS = len(SHAPES) * len(COLORS) * len(SIZES) * len(BACKGROUNDS)

PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"

CAPTION_TEMPLATES = (
    "a {size} {color} {shape} on a {background} background",
    "the {shape} is {size} and {color} on a {background} background",
    "a {color} {shape} of {size} size over a {background} backdrop",
    "there is a {size} {shape} in {color} on a {background} field",
)

DATASET_MAGIC = b"CIG1"
DATASET_VERSION = 1


@dataclass(frozen=True)
class AttributeSpec:
    shape: str
    color: str
    size: str
    background: str
    cx: float = 0.5
    cy: float = 0.5

    def validate(self) -> None:
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}")
        if self.color not in COLORS:
            raise ValueError(f"unknown color {self.color!r}")
        if self.size not in SIZES:
            raise ValueError(f"unknown size {self.size!r}")
        if self.background not in BACKGROUNDS:
            raise ValueError(f"unknown background {self.background!r}")
        lo, hi = POSITION_RANGE
        if not (lo <= self.cx <= hi and lo <= self.cy <= hi):
            raise ValueError(f"position ({self.cx}, {self.cy}) outside [{lo}, {hi}]^2")

    def combo_index(self) -> int:
        idx = SHAPES.index(self.shape)
        idx = idx * len(COLORS) + COLORS.index(self.color)
        idx = idx * len(SIZES) + SIZES.index(self.size)
        idx = idx * len(BACKGROUNDS) + BACKGROUNDS.index(self.background)
        return idx

    def labels(self) -> tuple:
        return (SHAPES.index(self.shape), COLORS.index(self.color),
                SIZES.index(self.size), BACKGROUNDS.index(self.background))


def spec_from_combo(index: int, cx: float = 0.5, cy: float = 0.5) -> AttributeSpec:
    if not 0 <= index < N_COMBOS:
        raise ValueError(f"combo index {index} out of range")
    index, b = divmod(index, len(BACKGROUNDS))
    index, s = divmod(index, len(SIZES))
    sh, c = divmod(index, len(COLORS))
    return AttributeSpec(SHAPES[sh], COLORS[c], SIZES[s], BACKGROUNDS[b], cx, cy)


def shape_circumradius(shape: str, size: str) -> float:
    """Farthest extent of the object from its center, in canvas units."""
    area = AREA_RATIO[size]
    if shape == "circle":
        return math.sqrt(area / math.pi)
    if shape == "square":
        return math.sqrt(area) / math.sqrt(2.0)
    # equilateral triangle: area = sqrt(3)/4 * side^2, circumradius = side/sqrt(3)
    side = math.sqrt(4.0 * area / math.sqrt(3.0))
    return side / math.sqrt(3.0)


def draw_center(spec: AttributeSpec, resolution: int) -> tuple:
    """Where the object is actually drawn: the requested center clamped so the
    object plus an anti-aliasing margin stays fully on canvas."""
    margin = shape_circumradius(spec.shape, spec.size) + 1.5 / resolution
    lo = min(margin, 0.5)
    return (float(np.clip(spec.cx, lo, 1.0 - lo)), float(np.clip(spec.cy, lo, 1.0 - lo)))


def safe_position_range(shape: str, size: str, resolution: int) -> tuple:
    """Sub-interval of POSITION_RANGE where drawing never clamps."""
    margin = shape_circumradius(shape, size) + 1.5 / resolution
    lo = max(POSITION_RANGE[0], margin)
    hi = min(POSITION_RANGE[1], 1.0 - margin)
    if lo > hi:
        lo = hi = 0.5
    return lo, hi


def _coverage_mask(spec: AttributeSpec, resolution: int) -> np.ndarray:
    s = resolution * SUPERSAMPLE
    coords = (np.arange(s) + 0.5) / s
    xs, ys = np.meshgrid(coords, coords)  # ys varies along rows (downward)
    cx, cy = draw_center(spec, resolution)
    r = shape_circumradius(spec.shape, spec.size)
    if spec.shape == "circle":
        inside = (xs - cx) ** 2 + (ys - cy) ** 2 <= r * r
    elif spec.shape == "square":
        half = math.sqrt(AREA_RATIO[spec.size]) / 2.0
        inside = (np.abs(xs - cx) <= half) & (np.abs(ys - cy) <= half)
    else:
        # equilateral triangle, apex up (smaller y)
        angles = (-math.pi / 2.0, math.pi / 6.0, 5.0 * math.pi / 6.0)
        verts = [(cx + r * math.cos(a), cy + r * math.sin(a)) for a in angles]
        inside = np.ones_like(xs, dtype=bool)
        for i in range(3):
            x0, y0 = verts[i]
            x1, y1 = verts[(i + 1) % 3]
            cross = (x1 - x0) * (ys - y0) - (y1 - y0) * (xs - x0)
            inside &= cross >= 0
    shaped = inside.astype(np.float64).reshape(resolution, SUPERSAMPLE, resolution, SUPERSAMPLE)
    return shaped.mean(axis=(1, 3))


def render_sample(spec: AttributeSpec, resolution: int, seed: int = 0) -> np.ndarray:
    """Render one sample to a (3, R, R) float32 array in [-1, 1].

    Purely analytic, so the result depends only on (spec, resolution); the
    seed is accepted for interface stability with stochastic renderers.
    """
    if resolution not in VALID_RESOLUTIONS:
        raise ConfigError(f"resolution must be one of {VALID_RESOLUTIONS}, got {resolution}")
    spec.validate()
    cover = _coverage_mask(spec, resolution)
    color = np.array(COLOR_RGB[spec.color], dtype=np.float64)[:, None, None]
    bg = np.array(BACKGROUND_RGB[spec.background], dtype=np.float64)[:, None, None]
    img = bg * (1.0 - cover) + color * cover
    return img.astype(np.float32)


def caption_of(spec: AttributeSpec, template_id=None, rng=None) -> list:
    """Caption words for a spec; template drawn from rng when not fixed."""
    if template_id is None:
        if rng is None:
            raise ValueError("either template_id or rng is required")
        template_id = int(rng.integers(len(CAPTION_TEMPLATES)))
    template = CAPTION_TEMPLATES[template_id]
    text = template.format(size=spec.size, color=spec.color,
                           shape=spec.shape, background=spec.background)
    return text.split()


def parse_caption(words) -> AttributeSpec:
    """Recover the attribute words from a caption; position is not encoded."""
    found = {}
    for group, values in (("shape", SHAPES), ("color", COLORS),
                          ("size", SIZES), ("background", BACKGROUNDS)):
        hits = [w for w in words if w in values]
        if len(hits) != 1:
            raise ValueError(f"caption does not contain exactly one {group} word: {words}")
        found[group] = hits[0]
    return AttributeSpec(found["shape"], found["color"], found["size"], found["background"])


class Vocab:
    """Token <-> id maps with reserved PAD (0) and UNK (1) entries."""

    def __init__(self, tokens):
        self.tokens = list(tokens)
        if self.tokens[:2] != [PAD_TOKEN, UNK_TOKEN]:
            raise ValueError("vocab must start with the PAD and UNK tokens")
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("vocab contains duplicate tokens")

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def unk_id(self) -> int:
        return 1

    def __len__(self):
        return len(self.tokens)

    @classmethod
    def build(cls) -> "Vocab":
        words = set()
        for spec in (spec_from_combo(i) for i in range(N_COMBOS)):
            for tid in range(len(CAPTION_TEMPLATES)):
                words.update(caption_of(spec, tid))
        return cls([PAD_TOKEN, UNK_TOKEN] + sorted(words))

    def save(self, path) -> None:
        with open(str(path), "w", encoding="utf-8") as f:
            for tok in self.tokens:
                f.write(tok + "\n")

    @classmethod
    def load(cls, path) -> "Vocab":
        with open(str(path), encoding="utf-8") as f:
            return cls([line.rstrip("\n") for line in f if line.strip()])


def tokenize(text: str, vocab: Vocab) -> list:
    return [vocab.index.get(w, vocab.unk_id) for w in text.lower().split()]


def detokenize(ids, vocab: Vocab) -> str:
    return " ".join(vocab.tokens[i] for i in ids)


@dataclass
class CaptionedImage:
    sample_id: int
    spec: AttributeSpec
    caption: np.ndarray  # uint16 token ids
    image: np.ndarray  # (3, R, R) float32 in [-1, 1]
    split: int  # index into SPLITS


@dataclass
class DatasetConfig:
    n_samples: int = 4800
    resolution: int = 32
    split_fractions: tuple = (0.8, 0.1, 0.1)
    seed: int = 1


def split_sizes(n_samples: int, fractions) -> tuple:
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must be three non-negatives summing to 1, got {fractions}")
    n_val = int(round(n_samples * fractions[1]))
    n_test = int(round(n_samples * fractions[2]))
    n_train = n_samples - n_val - n_test
    if n_train <= 0:
        raise ConfigError("split fractions leave no training samples")
    return n_train, n_val, n_test


def _sample_record(sample_id: int, master_seed: int, resolution: int,
                   split: int, vocab: Vocab) -> CaptionedImage:
    rng = np.random.default_rng(np.random.SeedSequence([master_seed, sample_id]))
    spec0 = spec_from_combo(sample_id % N_COMBOS)
    lo, hi = safe_position_range(spec0.shape, spec0.size, resolution)
    cx = float(rng.uniform(lo, hi))
    cy = float(rng.uniform(lo, hi))
    spec = AttributeSpec(spec0.shape, spec0.color, spec0.size, spec0.background, cx, cy)
    words = caption_of(spec, rng=rng)
    caption = np.array(tokenize(" ".join(words), vocab), dtype=np.uint16)
    image = render_sample(spec, resolution, seed=sample_id)
    return CaptionedImage(sample_id, spec, caption, image, split)


def generate_dataset(config: DatasetConfig, out_dir) -> tuple:
    """Write dataset + vocab files; returns (dataset_path, vocab_path).

    Combos cycle through all 48 (shape,color,size,background) cells so every
    contiguous split of >= 480 samples covers them all; position and caption
    template are drawn per-sample from seeds derived from (seed, sample_id).
    """
    os.makedirs(str(out_dir), exist_ok=True)
    dataset_path = os.path.join(str(out_dir), "dataset.cig")
    vocab_path = os.path.join(str(out_dir), "vocab.txt")
    vocab = Vocab.build()
    vocab.save(vocab_path)
    n_train, n_val, n_test = split_sizes(config.n_samples, config.split_fractions)

    def records():
        for sid in range(config.n_samples):
            split = 0 if sid < n_train else (1 if sid < n_train + n_val else 2)
            yield _sample_record(sid, config.seed, config.resolution, split, vocab)

    write_records(dataset_path, config.resolution, records())
    return dataset_path, vocab_path


def write_records(path, resolution: int, records) -> None:
    tmp = str(path) + ".tmp"
    count = 0
    with open(tmp, "wb") as f:
        f.write(DATASET_MAGIC)
        f.write(struct.pack("<IIQ", DATASET_VERSION, resolution, 0))
        for rec in records:
            sh, c, s, b = rec.spec.labels()
            f.write(struct.pack("<Q", rec.sample_id))
            f.write(struct.pack("<5B", sh, c, s, b, rec.split))
            f.write(struct.pack("<2f", rec.spec.cx, rec.spec.cy))
            cap = np.asarray(rec.caption, dtype="<u2")
            f.write(struct.pack("<H", cap.size))
            f.write(cap.tobytes())
            f.write(np.ascontiguousarray(rec.image, dtype="<f4").tobytes())
            count += 1
        f.seek(12)
        f.write(struct.pack("<Q", count))
    os.replace(tmp, str(path))


def read_records(path):
    """Yields (resolution, records) with records as a list of CaptionedImage."""
    with open(str(path), "rb") as f:
        if f.read(4) != DATASET_MAGIC:
            raise ValueError(f"not a dataset file: {path}")
        version, resolution, count = struct.unpack("<IIQ", f.read(16))
        if version != DATASET_VERSION:
            raise ValueError(f"unsupported dataset version {version}")
        img_bytes = resolution * resolution * 3 * 4
        records = []
        for _ in range(count):
            (sample_id,) = struct.unpack("<Q", f.read(8))
            sh, c, s, b, split = struct.unpack("<5B", f.read(5))
            cx, cy = struct.unpack("<2f", f.read(8))
            (cap_len,) = struct.unpack("<H", f.read(2))
            caption = np.frombuffer(f.read(cap_len * 2), dtype="<u2").copy()
            image = np.frombuffer(f.read(img_bytes), dtype="<f4").reshape(3, resolution, resolution).copy()
            spec = AttributeSpec(SHAPES[sh], COLORS[c], SIZES[s], BACKGROUNDS[b], cx, cy)
            records.append(CaptionedImage(sample_id, spec, caption, image, split))
    return resolution, records


class ShapesDataset:
    """In-memory view over a dataset file, filterable by split."""

    def __init__(self, resolution, records, vocab):
        self.resolution = resolution
        self.records = records
        self.vocab = vocab
        self.images = np.stack([r.image for r in records]) if records else \
            np.zeros((0, 3, resolution, resolution), np.float32)
        self.labels = np.array([r.spec.labels() for r in records], dtype=np.int64).reshape(len(records), 4)
        self.splits = np.array([r.split for r in records], dtype=np.int64)

    def __len__(self):
        return len(self.records)

    @classmethod
    def load(cls, dataset_path, vocab_path) -> "ShapesDataset":
        resolution, records = read_records(dataset_path)
        return cls(resolution, records, Vocab.load(vocab_path))

    def subset(self, split: str) -> "ShapesDataset":
        idx = SPLITS.index(split)
        kept = [r for r in self.records if r.split == idx]
        return ShapesDataset(self.resolution, kept, self.vocab)
