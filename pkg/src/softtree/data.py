"""Dataset ingestion, augmentation, and the synthetic fine-grained set.

Supported image codecs are binary PPM (P6), binary PGM (P5), and the raw
little-endian tensor format (magic ``ATSR``); everything is read and
written bit-exactly, with no external codec dependencies.  The synthetic
generator quantizes pixels to the 1/255 grid so a dataset written to PPM
files and re-loaded is byte-identical to the in-memory one.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .errors import ConfigError, DataError

DTYPE_CODES = {0: np.float64, 1: np.float32}
DTYPE_TO_CODE = {np.dtype(np.float64): 0, np.dtype(np.float32): 1}
TENSOR_MAGIC = b"ATSR"
TENSOR_VERSION = 1


@dataclass
class Sample:
    image: np.ndarray        # [3, S, S] float64 in [0, 1]
    label: int
    id: str
    meta: dict = field(default_factory=dict)


@dataclass
class Dataset:
    samples: list
    num_classes: int
    split: str
    class_names: list
    stats: "NormStats | None" = None

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)


@dataclass(frozen=True)
class NormStats:
    mean: tuple[float, float, float]
    std: tuple[float, float, float]

    def __post_init__(self):
        if min(self.std) <= 0.0:
            raise ConfigError(f"normalization std must be positive, got {self.std}")


@dataclass(frozen=True)
class AugmentPolicy:
    resize_shorter: int
    crop: int
    hflip_prob: float

    def __post_init__(self):
        if self.crop > self.resize_shorter or self.crop < 1:
            raise ConfigError(
                f"crop ({self.crop}) must be in [1, resize_shorter={self.resize_shorter}]"
            )
        if not 0.0 <= self.hflip_prob <= 1.0:
            raise ConfigError(f"hflip_prob must be in [0,1], got {self.hflip_prob}")


PAPER_AUGMENT = AugmentPolicy(resize_shorter=512, crop=448, hflip_prob=0.5)
DESK_AUGMENT = AugmentPolicy(resize_shorter=36, crop=32, hflip_prob=0.5)


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

def write_tensor_file(path, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    code = DTYPE_TO_CODE.get(arr.dtype)
    if code is None:
        raise DataError(f"unsupported tensor dtype {arr.dtype}")
    with open(path, "wb") as f:
        f.write(TENSOR_MAGIC)
        f.write(struct.pack("<III", TENSOR_VERSION, code, arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        f.write(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())


def read_tensor_file(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != TENSOR_MAGIC:
        raise DataError(f"{path}: not a raw tensor file")
    version, code, ndim = struct.unpack_from("<III", raw, 4)
    if version != TENSOR_VERSION:
        raise DataError(f"{path}: unsupported tensor file version {version}")
    if code not in DTYPE_CODES:
        raise DataError(f"{path}: unknown dtype code {code}")
    dims = struct.unpack_from(f"<{ndim}Q", raw, 16)
    dtype = np.dtype(DTYPE_CODES[code]).newbyteorder("<")
    payload = raw[16 + 8 * ndim:]
    expected = int(np.prod(dims)) * dtype.itemsize
    if len(payload) != expected:
        raise DataError(f"{path}: payload is {len(payload)} bytes, expected {expected}")
    return np.frombuffer(payload, dtype=dtype).reshape(dims).astype(DTYPE_CODES[code])


def _read_pnm(path) -> np.ndarray:
    """Binary PPM/PGM decode to [3,H,W] float64 in [0,1] (PGM replicated)."""
    raw = Path(path).read_bytes()
    magic = raw[:2]
    if magic not in (b"P5", b"P6"):
        raise DataError(f"{path}: unsupported image format")
    # header tokens: magic, width, height, maxval; '#' comments allowed
    tokens, pos = [], 2
    while len(tokens) < 3:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError(f"{path}: truncated header")
        tokens.append(raw[start:pos])
    pos += 1  # single whitespace byte after maxval
    try:
        width, height, maxval = (int(t) for t in tokens)
    except ValueError:
        raise DataError(f"{path}: malformed header") from None
    if not 0 < maxval < 256:
        raise DataError(f"{path}: unsupported maxval {maxval}")
    channels = 3 if magic == b"P6" else 1
    expected = width * height * channels
    payload = raw[pos:pos + expected]
    if len(payload) != expected:
        raise DataError(f"{path}: expected {expected} pixel bytes, got {len(payload)}")
    img = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, channels)
    img = img.transpose(2, 0, 1).astype(np.float64) / maxval
    if channels == 1:
        img = np.repeat(img, 3, axis=0)
    return img


def write_ppm(path, image: np.ndarray) -> None:
    """Write [3,H,W] values in [0,1] as binary PPM with maxval 255."""
    img = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    c, h, w = img.shape
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(img.transpose(1, 2, 0).tobytes())


def write_pgm(path, values: np.ndarray) -> None:
    """Write a [H,W] array of values in [0,1] as binary PGM, maxval 255."""
    img = np.clip(np.round(np.asarray(values) * 255.0), 0, 255).astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (w, h))
        f.write(img.tobytes())


def read_image(path) -> np.ndarray:
    """Decode any supported image file to [3,H,W] float64 in [0,1]."""
    head = Path(path).open("rb").read(4)
    if head[:2] in (b"P5", b"P6"):
        return _read_pnm(path)
    if head == TENSOR_MAGIC:
        arr = read_tensor_file(path)
        if arr.ndim == 2:
            arr = np.repeat(arr[None], 3, axis=0)
        if arr.ndim != 3 or arr.shape[0] != 3:
            raise DataError(f"{path}: tensor image must be [3,H,W] or [H,W], "
                            f"got {arr.shape}")
        return arr.astype(np.float64)
    raise DataError(f"{path}: unsupported image format")


def load_dataset(root, split: str = "train") -> Dataset:
    """Load ``<root>/<class_name>/<image files>`` with lexicographic class
    indices and path-sorted samples."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} is not a directory")
    class_dirs = sorted(d for d in root.iterdir() if d.is_dir())
    if not class_dirs:
        raise DataError(f"dataset root {root} has no class directories")
    samples, names = [], []
    for label, cdir in enumerate(class_dirs):
        names.append(cdir.name)
        files = sorted(p for p in cdir.iterdir() if p.is_file())
        if not files:
            raise DataError(f"class directory {cdir} is empty")
        for p in files:
            samples.append(Sample(image=read_image(p), label=label,
                                  id=str(p.relative_to(root))))
    return Dataset(samples=samples, num_classes=len(class_dirs), split=split,
                   class_names=names)


# ---------------------------------------------------------------------------
# synthetic fine-grained dataset
# ---------------------------------------------------------------------------

_GLYPHS = [
    ["..###..", ".#####.", "#######", "#######", "#######", ".#####.", "..###.."],  # disc
    ["#.....#", ".#...#.", "..#.#..", "...#...", "..#.#..", ".#...#.", "#.....#"],  # X
    ["...#...", "...#...", "...#...", "#######", "...#...", "...#...", "...#..."],  # plus
    ["#######", ".......", "#######", ".......", "#######", ".......", "#######"],  # h-bars
    ["#.#.#.#", "#.#.#.#", "#.#.#.#", "#.#.#.#", "#.#.#.#", "#.#.#.#", "#.#.#.#"],  # v-bars
    ["#######", "#.....#", "#.....#", "#.....#", "#.....#", "#.....#", "#######"],  # box
    ["...#...", "..#.#..", ".#...#.", "#.....#", ".#...#.", "..#.#..", "...#..."],  # diamond
    ["#######", "...#...", "...#...", "...#...", "...#...", "...#...", "...#..."],  # T
    ["#......", "#......", "#......", "#......", "#......", "#......", "#######"],  # L
    ["#######", ".....#.", "....#..", "...#...", "..#....", ".#.....", "#######"],  # Z
    ["##..##.", "##..##.", "..##..#", "..##..#", "##..##.", "##..##.", "..##..#"],  # checker
    ["..###..", ".#...#.", "#.....#", "#.....#", "#.....#", ".#...#.", "..###.."],  # ring
    ["...#...", "...#...", "..###..", "..###..", ".#####.", ".#####.", "#######"],  # triangle
    ["#.....#", "#.....#", "#.....#", "#######", "#.....#", "#.....#", "#.....#"],  # H
    ["#.....#", "#.....#", "#.....#", "#.....#", "#.....#", ".#...#.", "..###.."],  # U
    ["#..#..#", ".......", "#..#..#", ".......", "#..#..#", ".......", "#..#..#"],  # dots
]
GLYPH_SIZE = 7
MAX_SYNTH_CLASSES = len(_GLYPHS)


def _glyph_mask(class_index: int) -> np.ndarray:
    rows = _GLYPHS[class_index]
    return np.array([[ch == "#" for ch in row] for row in rows], dtype=bool)


def _synthetic_canvas(side: int) -> np.ndarray:
    """Background plus coarse ring shared by every class."""
    y, x = np.mgrid[0:side, 0:side].astype(np.float64)
    img = np.empty((3, side, side))
    for c in range(3):
        img[c] = 0.30 + 0.20 * (x + y) / (2 * (side - 1)) \
            + 0.05 * np.sin(2.0 * np.pi * (x - y) / side + 2.0 * c)
    center = (side - 1) / 2.0
    dist = np.sqrt((y - center) ** 2 + (x - center) ** 2)
    ring = np.abs(dist - 0.32 * side) <= 0.05 * side
    img[:, ring] = 0.70
    return img


def generate_synthetic(num_classes: int, per_class: int, side: int, seed,
                       noise: float = 0.02) -> tuple[Dataset, Dataset]:
    """Deterministic (train, test) pair: shared background and coarse shape,
    class identity carried only by a small glyph at a jittered position.

    The test split has per_class // 2 samples per class.  Each sample's
    ``meta["glyph_box"]`` holds (row0, col0, row1, col1), exclusive ends.
    """
    if not 2 <= num_classes <= MAX_SYNTH_CLASSES:
        raise ConfigError(f"num_classes must be in [2, {MAX_SYNTH_CLASSES}]")
    if side < 16:
        raise ConfigError(f"side must be >= 16, got {side}")
    canvas = _synthetic_canvas(side)
    jitter = max(2, side // 8)
    base = (side - GLYPH_SIZE) // 2
    rngs = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2)]
    class_names = [f"class_{k:02d}" for k in range(num_classes)]

    def build(split: str, count: int, rng) -> Dataset:
        samples = []
        for label in range(num_classes):
            mask = _glyph_mask(label)
            for j in range(count):
                r0 = base + int(rng.integers(-jitter, jitter + 1))
                c0 = base + int(rng.integers(-jitter, jitter + 1))
                img = canvas.copy()
                img[:, r0:r0 + GLYPH_SIZE, c0:c0 + GLYPH_SIZE][:, mask] = 0.95
                img += rng.normal(0.0, noise, size=img.shape)
                img = np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0
                samples.append(Sample(
                    image=img, label=label, id=f"{split}_{label:02d}_{j:03d}",
                    meta={"glyph_box": (r0, c0, r0 + GLYPH_SIZE, c0 + GLYPH_SIZE)}))
        return Dataset(samples=samples, num_classes=num_classes, split=split,
                       class_names=list(class_names))

    train = build("train", per_class, rngs[0])
    test = build("test", max(1, per_class // 2), rngs[1])
    return train, test


# ---------------------------------------------------------------------------
# transforms
# ---------------------------------------------------------------------------

def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resample with half-pixel centers and edge clamping."""
    c, h, w = image.shape
    ys = np.clip((np.arange(out_h) + 0.5) * h / out_h - 0.5, 0, h - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * w / out_w - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[None, :, None]
    wx = (xs - x0)[None, None, :]
    top = image[:, y0][:, :, x0] * (1 - wx) + image[:, y0][:, :, x1] * wx
    bot = image[:, y1][:, :, x0] * (1 - wx) + image[:, y1][:, :, x1] * wx
    return top * (1 - wy) + bot * wy


def augment(sample: Sample, policy: AugmentPolicy, rng=None) -> Sample:
    """Resize so the shorter side matches the policy, crop, maybe flip.

    With an rng the crop window is uniform over valid positions and the
    flip is Bernoulli(hflip_prob); without one (the eval path) the crop is
    centered and no flip happens.
    """
    img = sample.image
    _, h, w = img.shape
    short = min(h, w)
    rs = policy.resize_shorter
    new_h = rs if h == short else int(round(h * rs / short))
    new_w = rs if w == short else int(round(w * rs / short))
    if new_h < policy.crop or new_w < policy.crop:
        raise ConfigError(f"resized image {new_h}x{new_w} smaller than crop {policy.crop}")
    if (new_h, new_w) != (h, w):
        img = resize_bilinear(img, new_h, new_w)
    if rng is None:
        top = (new_h - policy.crop) // 2
        left = (new_w - policy.crop) // 2
        flip = False
    else:
        top = int(rng.integers(0, new_h - policy.crop + 1))
        left = int(rng.integers(0, new_w - policy.crop + 1))
        flip = bool(rng.random() < policy.hflip_prob)
    img = img[:, top:top + policy.crop, left:left + policy.crop]
    if flip:
        img = img[:, :, ::-1]
    return replace(sample, image=np.ascontiguousarray(img))


def compute_stats(dataset: Dataset) -> NormStats:
    acc = np.zeros(3)
    acc2 = np.zeros(3)
    count = 0
    for s in dataset.samples:
        flat = s.image.reshape(3, -1)
        acc += flat.sum(axis=1)
        acc2 += (flat * flat).sum(axis=1)
        count += flat.shape[1]
    mean = acc / count
    std = np.sqrt(np.maximum(acc2 / count - mean * mean, 0.0))
    return NormStats(mean=tuple(float(v) for v in mean),
                     std=tuple(float(v) for v in std))


def normalize(sample: Sample, stats: NormStats) -> Sample:
    mean = np.asarray(stats.mean)[:, None, None]
    std = np.asarray(stats.std)[:, None, None]
    return replace(sample, image=(sample.image - mean) / std)


def batches(dataset: Dataset, batch_size: int, seed, shuffle: bool,
            transform=None, dtype=np.float64):
    """Yield (images Tensor[N,3,S,S], labels int64[N], ids) in an order that
    is a pure function of (dataset, seed); the final partial batch is kept."""
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    key = [int(v) for v in seed] if isinstance(seed, (list, tuple)) else [int(seed)]
    order = np.arange(len(dataset))
    if shuffle:
        order = np.random.default_rng(key).permutation(order)
    trng = np.random.default_rng(key + [0x7A6])
    for start in range(0, len(order), batch_size):
        chunk = order[start:start + batch_size]
        picked = [dataset.samples[i] for i in chunk]
        if transform is not None:
            picked = [transform(s, trng) for s in picked]
        images = np.stack([s.image for s in picked]).astype(dtype)
        labels = np.array([s.label for s in picked], dtype=np.int64)
        yield Tensor(images), labels, [s.id for s in picked]
