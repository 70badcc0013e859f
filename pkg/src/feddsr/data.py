"""Synthetic segmentation scenes and non-IID fleet partitioning."""
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, FormatError, UnsupportedVersionError


@dataclass
class SceneConfig:
    height: int = 16
    width: int = 16
    classes: int = 4
    in_channels: int = 3
    shapes_min: int = 1
    shapes_max: int = 3
    noise: float = 0.3
    colors: list = None  # [K][Cin]; None -> default palette

    def __post_init__(self):
        if self.height % 4 or self.width % 4 or self.height < 4 or self.width < 4:
            raise ConfigError(f"data.height/width must be positive multiples of 4, got {self.height}x{self.width}")
        if self.classes < 2:
            raise ConfigError(f"data.classes must be >= 2, got {self.classes}")
        if self.noise < 0:
            raise ConfigError(f"data.noise must be >= 0, got {self.noise}")
        if not 0 <= self.shapes_min <= self.shapes_max:
            raise ConfigError(f"data.shapes_min/shapes_max must satisfy 0 <= min <= max, "
                              f"got {self.shapes_min}, {self.shapes_max}")
        if self.colors is not None:
            arr = np.asarray(self.colors, dtype=float)
            if arr.shape != (self.classes, self.in_channels):
                raise ConfigError(f"data.colors must be [{self.classes}][{self.in_channels}], got {list(arr.shape)}")

    def palette(self):
        if self.colors is not None:
            return np.asarray(self.colors, dtype=np.float64)
        k = np.arange(self.classes)[:, None] / self.classes
        ch = np.arange(self.in_channels)[None, :] / self.in_channels
        return 0.5 + 0.25 * np.cos(2 * np.pi * (k + ch))


@dataclass
class Shape:
    kind: str  # "rect" or "disc"
    cls: int
    cy: float
    cx: float
    ry: float
    rx: float


@dataclass
class SegSample:
    image: np.ndarray  # [Cin, H, W] float32 in [0, 1]
    label: np.ndarray  # [H, W] uint8 in [0, K)


@dataclass
class Dataset:
    images: np.ndarray  # [n, Cin, H, W] float32
    labels: np.ndarray  # [n, H, W] uint8
    classes: int
    indices: np.ndarray = field(default=None, repr=False)  # rows of the source dataset, when a partition

    def __len__(self):
        return len(self.images)

    def __getitem__(self, i):
        return SegSample(self.images[i], self.labels[i])

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        src = idx if self.indices is None else self.indices[idx]
        return Dataset(self.images[idx], self.labels[idx], self.classes, src)


def paint_scene(config, shapes, rng=None):
    """Render explicit shapes onto the background; noise needs ``rng``."""
    h, w = config.height, config.width
    label = np.zeros((h, w), dtype=np.uint8)
    yy, xx = np.mgrid[0:h, 0:w]
    yy = yy + 0.5
    xx = xx + 0.5
    for s in shapes:
        if s.kind == "rect":
            mask = (np.abs(yy - s.cy) <= s.ry) & (np.abs(xx - s.cx) <= s.rx)
        else:
            mask = ((yy - s.cy) / s.ry) ** 2 + ((xx - s.cx) / s.rx) ** 2 <= 1.0
        label[mask] = s.cls
    image = config.palette()[label].transpose(2, 0, 1)
    if config.noise > 0:
        image = image + rng.normal(0.0, config.noise, size=image.shape)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return SegSample(image, label)


def sample_shapes(config, rng):
    h, w = config.height, config.width
    n = int(rng.integers(config.shapes_min, config.shapes_max + 1))
    shapes = []
    for _ in range(n):
        kind = "rect" if rng.uniform() < 0.5 else "disc"
        cls = int(rng.integers(1, config.classes))
        ry = rng.uniform(h / 8, h / 3)
        rx = rng.uniform(w / 8, w / 3)
        if kind == "disc":
            rx = ry = (ry + rx) / 2
        shapes.append(Shape(kind, cls, rng.uniform(0, h), rng.uniform(0, w), ry, rx))
    return shapes


def generate_scene(config, rng):
    """Background class 0 plus random rectangles/discs of classes 1..K-1."""
    return paint_scene(config, sample_shapes(config, rng), rng)


def generate_dataset(config, count, rng):
    images = np.empty((count, config.in_channels, config.height, config.width), dtype=np.float32)
    labels = np.empty((count, config.height, config.width), dtype=np.uint8)
    for i in range(count):
        s = generate_scene(config, rng)
        images[i] = s.image
        labels[i] = s.label
    return Dataset(images, labels, config.classes)


# --------------------------------------------------------------------------
# partitioning
# --------------------------------------------------------------------------

@dataclass
class PartitionSpec:
    vehicles: int = 8
    gamma: float = 0.3
    min_samples: int = 8
    max_attempts: int = 1000

    def __post_init__(self):
        if self.vehicles < 1:
            raise ConfigError(f"data.vehicles must be >= 1, got {self.vehicles}")
        if not self.gamma > 0:
            raise ConfigError(f"data.gamma must be > 0, got {self.gamma}")
        if self.min_samples < 1:
            raise ConfigError(f"data.min_samples must be >= 1, got {self.min_samples}")


def dominant_classes(dataset):
    """Most frequent foreground class per sample (0 when no foreground)."""
    k = dataset.classes
    flat = dataset.labels.reshape(len(dataset), -1).astype(np.int64)
    counts = np.stack([(flat == c).sum(axis=1) for c in range(k)], axis=1)
    fg = counts[:, 1:]
    dom = fg.argmax(axis=1) + 1
    dom[fg.max(axis=1) == 0] = 0
    return dom


def dirichlet_partition(dataset, spec, rng):
    """Split ``dataset`` across ``spec.vehicles`` with Dirichlet(gamma) skew
    over each sample's dominant foreground class.

    Redraws until every vehicle holds at least ``spec.min_samples``.
    """
    n_total = len(dataset)
    nv = spec.vehicles
    if n_total < nv * spec.min_samples:
        raise ConfigError(f"partition infeasible: {n_total} samples < vehicles ({nv}) x min_samples ({spec.min_samples})")
    dom = dominant_classes(dataset)
    groups = [np.flatnonzero(dom == c) for c in range(dataset.classes)]
    for _ in range(spec.max_attempts):
        parts = [[] for _ in range(nv)]
        for idx in groups:
            if len(idx) == 0:
                continue
            idx = idx[rng.permutation(len(idx))]
            props = rng.dirichlet(np.full(nv, spec.gamma))
            cuts = (np.cumsum(props) * len(idx)).astype(np.int64)[:-1]
            for v, chunk in enumerate(np.split(idx, cuts)):
                parts[v].append(chunk)
        parts = [np.sort(np.concatenate(p)) for p in parts]
        if min(len(p) for p in parts) >= spec.min_samples:
            return [dataset.subset(p) for p in parts]
    raise ConfigError(f"partition infeasible: no draw in {spec.max_attempts} attempts gave every vehicle "
                      f">= {spec.min_samples} samples (gamma={spec.gamma}, vehicles={nv})")


def class_histogram(dataset, classes=None):
    k = classes or dataset.classes
    return np.bincount(dominant_classes(dataset), minlength=k).astype(np.float64)


def label_skew(parts, classes):
    """Mean total-variation distance of per-vehicle dominant-class histograms
    from the pooled histogram."""
    hists = [class_histogram(p, classes) for p in parts]
    pooled = np.sum(hists, axis=0)
    pooled = pooled / pooled.sum()
    return float(np.mean([0.5 * np.abs(h / h.sum() - pooled).sum() for h in hists]))


# --------------------------------------------------------------------------
# file format
# --------------------------------------------------------------------------

MAGIC = b"FDSRDATA"
VERSION = 1
_HEADER = struct.Struct("<8sIIIIII")  # magic, version, K, count, Cin, H, W


def dataset_bytes(dataset):
    n, cin, h, w = dataset.images.shape
    head = _HEADER.pack(MAGIC, VERSION, dataset.classes, n, cin, h, w)
    img = dataset.images.astype("<f4", copy=False).reshape(n, -1)
    lab = dataset.labels.astype(np.uint8, copy=False).reshape(n, -1)
    body = np.concatenate([img.view(np.uint8), lab], axis=1)
    return head + body.tobytes()


def save_dataset(path, dataset):
    with open(path, "wb") as fh:
        fh.write(dataset_bytes(dataset))


def parse_dataset(data):
    if len(data) < _HEADER.size:
        raise FormatError("truncated dataset header", offset=len(data))
    magic, version, k, n, cin, h, w = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError("bad dataset magic", offset=0)
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported dataset version {version} (expected {VERSION})", offset=8)
    img_bytes = cin * h * w * 4
    rec = img_bytes + h * w
    expected = _HEADER.size + n * rec
    if len(data) < expected:
        last_full = (len(data) - _HEADER.size) // rec
        raise FormatError(f"truncated dataset: sample {last_full} of {n} incomplete", offset=len(data))
    if len(data) > expected:
        raise FormatError("trailing bytes after dataset", offset=expected)
    body = np.frombuffer(data, dtype=np.uint8, offset=_HEADER.size, count=n * rec).reshape(n, rec)
    images = body[:, :img_bytes].copy().view("<f4").astype(np.float32).reshape(n, cin, h, w)
    labels = body[:, img_bytes:].copy().reshape(n, h, w)
    bad = (labels >= k) & (labels != 255)
    if bad.any():
        i = int(np.argwhere(bad)[0][0])
        raise FormatError(f"label out of range in sample {i}", offset=_HEADER.size + i * rec + img_bytes)
    return Dataset(images, labels, k)


def load_dataset(path):
    with open(path, "rb") as fh:
        return parse_dataset(fh.read())
