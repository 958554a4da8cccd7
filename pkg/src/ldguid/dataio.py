"""Bitemporal dataset I/O, synthetic data generation and spectral preprocessing.

Images are held as ``H x W x C`` numpy arrays; :func:`stack_samples` converts
a list of samples into the ``N x C x H x W`` tensors the networks consume.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image
from scipy.ndimage import gaussian_filter

from .errors import (
    DegenerateConfig,
    InvalidChannelIndex,
    MissingDirectory,
    NameMismatch,
    ShapeMismatch,
    UnsupportedFormat,
    ZeroStd,
)

SUPPORTED_EXTENSIONS = (".png", ".rten")
SPLITS = ("train", "val", "test")

# Sentinel-2 band order B01..B12 (B8A after B08); NBR uses NIR=B08, SWIR=B12.
SENTINEL2_BANDS = (
    "B01", "B02", "B03", "B04", "B05", "B06", "B07", "B08", "B8A", "B09", "B11", "B12",
)
S2_NIR = SENTINEL2_BANDS.index("B08")
S2_SWIR = SENTINEL2_BANDS.index("B12")


@dataclass
class ImagePlane:
    data: np.ndarray
    channel_names: tuple[str, ...] | None = None

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim == 2:
            data = data[:, :, None]
        if data.ndim != 3 or min(data.shape) < 1:
            raise ShapeMismatch(f"image must be H x W x C with positive sizes, got {data.shape}")
        if not np.issubdtype(data.dtype, np.floating):
            data = data.astype(np.float32)
        if not np.all(np.isfinite(data)):
            raise ValueError("image contains non-finite values")
        self.data = data
        if self.channel_names is not None:
            self.channel_names = tuple(self.channel_names)
            if len(self.channel_names) != data.shape[2]:
                raise ShapeMismatch(
                    f"{len(self.channel_names)} channel names for {data.shape[2]} channels"
                )

    @property
    def shape(self):
        return self.data.shape

    @property
    def channels(self):
        return self.data.shape[2]


@dataclass
class ChangeMask:
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim == 3 and data.shape[2] == 1:
            data = data[:, :, 0]
        if data.ndim != 2:
            raise ShapeMismatch(f"mask must be H x W, got {data.shape}")
        if not np.all((data == 0) | (data == 1)):
            raise ValueError("mask values must be 0 or 1")
        self.data = data.astype(np.uint8)

    @property
    def shape(self):
        return self.data.shape


@dataclass
class BitemporalSample:
    pre: ImagePlane
    post: ImagePlane
    mask: ChangeMask
    id: str = ""

    def __post_init__(self):
        if self.pre.shape != self.post.shape:
            raise ShapeMismatch(
                f"sample {self.id!r}: pre {self.pre.shape} and post {self.post.shape} differ"
            )
        if self.mask.shape != self.pre.shape[:2]:
            raise ShapeMismatch(
                f"sample {self.id!r}: mask {self.mask.shape} does not match image {self.pre.shape[:2]}"
            )


# ---------------------------------------------------------------------------
# raw tensor container


def write_rten(path, data: np.ndarray, channel_names: Sequence[str] | None = None):
    data = np.asarray(data)
    if data.ndim == 2:
        data = data[:, :, None]
    h, w, c = data.shape
    header = {
        "dims": [h, w, c],
        "dtype": "f32",
        "channels": list(channel_names) if channel_names is not None else [],
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, separators=(",", ":")).encode("utf-8"))
        fh.write(b"\n")
        fh.write(np.ascontiguousarray(data, dtype="<f4").tobytes())


def read_rten(path) -> ImagePlane:
    with open(path, "rb") as fh:
        raw = fh.read()
    newline = raw.find(b"\n")
    if newline < 0:
        raise UnsupportedFormat(f"{path}: missing rten header")
    try:
        header = json.loads(raw[:newline].decode("utf-8"))
        dims = [int(d) for d in header["dims"]]
    except (ValueError, KeyError, TypeError) as exc:
        raise UnsupportedFormat(f"{path}: malformed rten header ({exc})") from exc
    if header.get("dtype") != "f32" or len(dims) != 3:
        raise UnsupportedFormat(f"{path}: only 3-d f32 rten payloads are supported")
    payload = raw[newline + 1:]
    if len(payload) != 4 * int(np.prod(dims)):
        raise UnsupportedFormat(f"{path}: payload size does not match dims {dims}")
    data = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
    names = header.get("channels") or None
    return ImagePlane(data, names)


def read_image(path) -> ImagePlane:
    path = Path(path)
    ext = path.suffix.lower()
    if ext == ".rten":
        return read_rten(path)
    if ext == ".png":
        with Image.open(path) as im:
            if im.mode not in ("L", "RGB"):
                im = im.convert("RGB")
            arr = np.asarray(im, dtype=np.float32) / 255.0
        return ImagePlane(arr)
    raise UnsupportedFormat(f"{path}: unsupported image format {ext!r}")


def read_mask(path) -> ChangeMask:
    path = Path(path)
    ext = path.suffix.lower()
    if ext == ".png":
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L"))
        return ChangeMask((arr > 0).astype(np.uint8))
    if ext == ".rten":
        arr = read_rten(path).data
        if arr.shape[2] != 1:
            raise ShapeMismatch(f"{path}: mask must have one channel")
        return ChangeMask((arr[:, :, 0] > 0.5).astype(np.uint8))
    raise UnsupportedFormat(f"{path}: unsupported mask format {ext!r}")


def write_mask_png(path, mask: ChangeMask):
    Image.fromarray(mask.data * np.uint8(255), mode="L").save(path, format="PNG")


# ---------------------------------------------------------------------------
# dataset layout


def _index_dir(directory: Path) -> dict[str, Path]:
    files = {}
    for entry in sorted(directory.iterdir()):
        if not entry.is_file() or entry.name.startswith("."):
            continue
        if entry.suffix.lower() not in SUPPORTED_EXTENSIONS:
            raise UnsupportedFormat(f"{entry}: unsupported format {entry.suffix!r}")
        if entry.stem in files:
            raise NameMismatch(f"{entry}: duplicate id {entry.stem!r} in {directory}")
        files[entry.stem] = entry
    return files


def load_dataset(root, split: str | None = None) -> list[BitemporalSample]:
    """Load ``<root>/{A,B,label}/<id>.<ext>`` triples, sorted by id.

    When ``<root>/splits.json`` exists only the ids listed under ``split`` are
    loaded; otherwise the whole root is treated as a single split.
    """
    root = Path(root)
    dirs = {}
    for name in ("A", "B", "label"):
        d = root / name
        if not d.is_dir():
            raise MissingDirectory(f"{d}: required dataset directory is missing")
        dirs[name] = _index_dir(d)

    ids_a, ids_b, ids_l = (set(dirs[k]) for k in ("A", "B", "label"))
    for other_name, other in (("B", ids_b), ("label", ids_l)):
        missing = sorted(ids_a - other)
        if missing:
            raise NameMismatch(f"{missing[0]}: present in A/ but missing from {other_name}/")
    extra = sorted((ids_b | ids_l) - ids_a)
    if extra:
        raise NameMismatch(f"{extra[0]}: present in B/ or label/ but missing from A/")

    ids = sorted(ids_a)
    splits_file = root / "splits.json"
    if split is not None and splits_file.is_file():
        with open(splits_file) as fh:
            splits = json.load(fh)
        if split not in splits:
            raise KeyError(f"split {split!r} not listed in {splits_file}")
        wanted = set(splits[split])
        unknown = sorted(wanted - ids_a)
        if unknown:
            raise NameMismatch(f"{unknown[0]}: listed in splits.json but not present in A/")
        ids = [i for i in ids if i in wanted]

    samples = []
    for sid in ids:
        pre = read_image(dirs["A"][sid])
        post = read_image(dirs["B"][sid])
        mask = read_mask(dirs["label"][sid])
        if pre.shape != post.shape:
            raise ShapeMismatch(f"{sid}: A/ {pre.shape} and B/ {post.shape} differ")
        if mask.shape != pre.shape[:2]:
            raise ShapeMismatch(f"{sid}: label/ {mask.shape} does not match image {pre.shape[:2]}")
        samples.append(BitemporalSample(pre, post, mask, sid))
    return samples


def write_dataset(root, samples: Sequence[BitemporalSample], splits=None, nuisance=None):
    """Write samples in the A/B/label layout (images as .rten, masks as .png)."""
    root = Path(root)
    for name in ("A", "B", "label"):
        (root / name).mkdir(parents=True, exist_ok=True)
    for s in samples:
        write_rten(root / "A" / f"{s.id}.rten", s.pre.data, s.pre.channel_names)
        write_rten(root / "B" / f"{s.id}.rten", s.post.data, s.post.channel_names)
        write_mask_png(root / "label" / f"{s.id}.png", s.mask)
    if splits is not None:
        with open(root / "splits.json", "w") as fh:
            json.dump(splits, fh, indent=1, sort_keys=True)
    if nuisance is not None:
        with open(root / "nuisance.json", "w") as fh:
            json.dump({s.id: float(b) for s, b in zip(samples, nuisance)}, fh, indent=1, sort_keys=True)


def load_nuisance(root) -> dict[str, float]:
    with open(Path(root) / "nuisance.json") as fh:
        return {k: float(v) for k, v in json.load(fh).items()}


def dataset_hash(samples: Sequence[BitemporalSample]) -> str:
    import hashlib

    h = hashlib.sha256()
    for s in samples:
        h.update(s.id.encode())
        h.update(np.ascontiguousarray(s.pre.data, dtype="<f4").tobytes())
        h.update(np.ascontiguousarray(s.post.data, dtype="<f4").tobytes())
        h.update(s.mask.data.tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# spectral preprocessing


def compute_nbr(image: ImagePlane, nir_channel: int = S2_NIR, swir_channel: int = S2_SWIR) -> ImagePlane:
    """Normalized burn ratio ``(NIR - SWIR) / (NIR + SWIR)``; zero-sum pixels map to 0."""
    c = image.channels
    for idx in (nir_channel, swir_channel):
        if not isinstance(idx, (int, np.integer)) or not 0 <= idx < c:
            raise InvalidChannelIndex(f"channel index {idx} out of range for {c} channels")
    nir = image.data[:, :, nir_channel].astype(np.float64)
    swir = image.data[:, :, swir_channel].astype(np.float64)
    denom = nir + swir
    out = np.zeros_like(denom)
    np.divide(nir - swir, denom, out=out, where=denom > 0)
    np.clip(out, -1.0, 1.0, out=out)
    return ImagePlane(out[:, :, None].astype(image.data.dtype), ("NBR",))


def nbr_sample(sample: BitemporalSample, nir_channel=S2_NIR, swir_channel=S2_SWIR) -> BitemporalSample:
    return BitemporalSample(
        compute_nbr(sample.pre, nir_channel, swir_channel),
        compute_nbr(sample.post, nir_channel, swir_channel),
        sample.mask,
        sample.id,
    )


@dataclass(frozen=True)
class ChannelStats:
    mean: tuple[float, ...]
    std: tuple[float, ...]


def channel_stats(samples: Sequence[BitemporalSample]) -> ChannelStats:
    """Per-channel mean/std pooled over the pre and post images of ``samples``."""
    stack = np.concatenate(
        [s.pre.data.reshape(-1, s.pre.channels) for s in samples]
        + [s.post.data.reshape(-1, s.post.channels) for s in samples]
    ).astype(np.float64)
    return ChannelStats(tuple(stack.mean(0).tolist()), tuple(stack.std(0).tolist()))


def normalize(image: ImagePlane, stats: ChannelStats) -> ImagePlane:
    mean = np.asarray(stats.mean, dtype=np.float64)
    std = np.asarray(stats.std, dtype=np.float64)
    if mean.shape != (image.channels,) or std.shape != (image.channels,):
        raise ShapeMismatch(f"stats for {mean.shape} channels, image has {image.channels}")
    if np.any(std <= 0):
        raise ZeroStd(f"non-positive std in channels {np.flatnonzero(std <= 0).tolist()}")
    out = (image.data.astype(np.float64) - mean) / std
    return ImagePlane(out.astype(image.data.dtype), image.channel_names)


def normalize_sample(sample: BitemporalSample, stats: ChannelStats) -> BitemporalSample:
    return BitemporalSample(
        normalize(sample.pre, stats), normalize(sample.post, stats), sample.mask, sample.id
    )


def stack_samples(samples: Sequence[BitemporalSample], dtype=torch.float32):
    """Return ``(pre, post, mask)`` tensors shaped ``N,C,H,W`` / ``N,H,W``."""
    pre = np.stack([s.pre.data for s in samples]).transpose(0, 3, 1, 2)
    post = np.stack([s.post.data for s in samples]).transpose(0, 3, 1, 2)
    mask = np.stack([s.mask.data for s in samples])
    return (
        torch.from_numpy(np.ascontiguousarray(pre)).to(dtype),
        torch.from_numpy(np.ascontiguousarray(post)).to(dtype),
        torch.from_numpy(mask.astype(np.int64)),
    )


# ---------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class SynthConfig:
    image_size: int = 32
    n_samples: int = 64
    change_shape_count_range: tuple[int, int] = (1, 3)
    nuisance_brightness_range: tuple[float, float] = (-1.0, 1.0)
    nuisance_texture_level: float = 0.05
    seed: int = 0
    channels: int = 3
    shape_size_range: tuple[int, int] = (4, 10)
    shape_kinds: tuple[str, ...] = ("square", "disc")
    change_amplitude_range: tuple[float, float] = (1.0, 2.0)
    background_smoothness: float = 3.0
    background_level_range: tuple[float, float] = (0.0, 0.0)

    def validate(self):
        def interval(name, lo, hi):
            if not (np.isfinite(lo) and np.isfinite(hi)) or lo > hi:
                raise DegenerateConfig(f"{name}: [{lo}, {hi}] is not a valid interval")

        if self.n_samples < 1:
            raise DegenerateConfig("n_samples must be >= 1")
        if self.image_size < 1 or self.channels < 1:
            raise DegenerateConfig("image_size and channels must be >= 1")
        interval("change_shape_count_range", *self.change_shape_count_range)
        interval("nuisance_brightness_range", *self.nuisance_brightness_range)
        interval("shape_size_range", *self.shape_size_range)
        interval("change_amplitude_range", *self.change_amplitude_range)
        interval("background_level_range", *self.background_level_range)
        if self.change_shape_count_range[0] < 0:
            raise DegenerateConfig("shape counts must be nonnegative")
        if self.shape_size_range[0] < 1 or self.shape_size_range[1] > self.image_size:
            raise DegenerateConfig(
                f"shape sizes {self.shape_size_range} do not fit a {self.image_size}px image"
            )
        if self.nuisance_texture_level < 0:
            raise DegenerateConfig("nuisance_texture_level must be >= 0")
        unknown = set(self.shape_kinds) - {"square", "disc"}
        if not self.shape_kinds or unknown:
            raise DegenerateConfig(f"unknown shape kinds {sorted(unknown)}")


@dataclass(frozen=True)
class Shape:
    """A planted change region. ``top, left`` is the bounding-box corner, ``size`` its side."""

    kind: str
    top: int
    left: int
    size: int

    def contains(self, i: int, j: int) -> bool:
        if self.kind == "square":
            return self.top <= i < self.top + self.size and self.left <= j < self.left + self.size
        # disc inscribed in the bounding box, tested at pixel centres
        r = self.size / 2.0
        cy, cx = self.top + r, self.left + r
        return (i + 0.5 - cy) ** 2 + (j + 0.5 - cx) ** 2 <= r * r

    def raster(self, size: int) -> np.ndarray:
        ii, jj = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
        if self.kind == "square":
            return (
                (ii >= self.top) & (ii < self.top + self.size)
                & (jj >= self.left) & (jj < self.left + self.size)
            )
        r = self.size / 2.0
        cy, cx = self.top + r, self.left + r
        return (ii + 0.5 - cy) ** 2 + (jj + 0.5 - cx) ** 2 <= r * r


@dataclass
class SyntheticDataset:
    samples: list[BitemporalSample]
    nuisance: list[float]
    shapes: list[list[Shape]] = field(default_factory=list)

    def __len__(self):
        return len(self.samples)


def _change_signature(rng: np.random.Generator, channels: int, amplitude: float) -> np.ndarray:
    # chromatic direction, orthogonal to the uniform brightness axis when possible
    d = rng.standard_normal(channels)
    if channels > 1:
        d -= d.mean()
    norm = np.linalg.norm(d)
    if norm < 1e-8:
        d = np.ones(channels)
        norm = np.linalg.norm(d)
    return d / norm * amplitude * np.sqrt(channels)


def generate_synthetic(config: SynthConfig) -> SyntheticDataset:
    """Pairs with planted changes and a global brightness nuisance on the post image.

    ``post = pre + sum(shape signatures) + b + texture * noise`` where ``b`` is
    drawn from ``nuisance_brightness_range`` and returned as the nuisance label.
    """
    config.validate()
    rng = np.random.Generator(np.random.PCG64(config.seed))
    s, c = config.image_size, config.channels
    width = len(str(config.n_samples - 1))
    samples, nuisance, all_shapes = [], [], []
    for n in range(config.n_samples):
        noise = rng.standard_normal((s, s, c))
        bg = np.stack(
            [gaussian_filter(noise[:, :, k], config.background_smoothness, mode="wrap") for k in range(c)],
            axis=2,
        )
        bg = (bg - bg.mean(axis=(0, 1))) / (bg.std(axis=(0, 1)) + 1e-12)
        bg += rng.uniform(*config.background_level_range)

        count = int(rng.integers(config.change_shape_count_range[0], config.change_shape_count_range[1] + 1))
        change = np.zeros((s, s, c))
        mask = np.zeros((s, s), dtype=bool)
        shapes = []
        for _ in range(count):
            kind = config.shape_kinds[int(rng.integers(len(config.shape_kinds)))]
            size = int(rng.integers(config.shape_size_range[0], config.shape_size_range[1] + 1))
            top = int(rng.integers(0, s - size + 1))
            left = int(rng.integers(0, s - size + 1))
            amp = float(rng.uniform(*config.change_amplitude_range))
            shape = Shape(kind, top, left, size)
            region = shape.raster(s)
            change[region] += _change_signature(rng, c, amp)
            mask |= region
            shapes.append(shape)

        b = float(rng.uniform(*config.nuisance_brightness_range))
        texture = config.nuisance_texture_level * rng.standard_normal((s, s, c))
        post = bg + change + b + texture
        sid = f"{n:0{width}d}"
        samples.append(
            BitemporalSample(
                ImagePlane(bg.astype(np.float32)),
                ImagePlane(post.astype(np.float32)),
                ChangeMask(mask.astype(np.uint8)),
                sid,
            )
        )
        nuisance.append(b)
        all_shapes.append(shapes)
    return SyntheticDataset(samples, nuisance, all_shapes)


def split_ids(ids: Sequence[str], fractions=(0.6, 0.2, 0.2), seed: int = 0) -> dict[str, list[str]]:
    """Deterministic train/val/test partition of ``ids``."""
    order = np.random.Generator(np.random.PCG64(seed)).permutation(len(ids))
    n_train = int(round(fractions[0] * len(ids)))
    n_val = int(round(fractions[1] * len(ids)))
    parts = {
        "train": order[:n_train],
        "val": order[n_train:n_train + n_val],
        "test": order[n_train + n_val:],
    }
    return {k: sorted(ids[i] for i in v) for k, v in parts.items()}
