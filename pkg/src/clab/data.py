"""Datasets of multi-temporal image patches, augmentations and positive-pair sampling."""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from clab.errors import ConfigError, ContractError, DataError

CSV_HEADER = ["path", "label", "location_id", "timestamp"]


@dataclass(frozen=True)
class Sample:
    image: np.ndarray
    label: int
    location_id: object
    timestamp: int


class Dataset:
    """Immutable collection of same-sized images with label, location and time.

    Images are stored as one (N, H, W, C) float64 array in [0, 1].
    """

    def __init__(self, images: np.ndarray, labels: Sequence[int], locations: Sequence,
                 timestamps: Sequence[int]):
        images = np.asarray(images, dtype=np.float64)
        if images.ndim != 4:
            raise DataError(f"images must be (N, H, W, C), got {images.shape}")
        n = images.shape[0]
        labels = np.asarray(labels, dtype=np.int64)
        locations = np.asarray(locations)
        timestamps = np.asarray(timestamps, dtype=np.int64)
        if not (len(labels) == len(locations) == len(timestamps) == n):
            raise DataError("images, labels, locations and timestamps differ in length")
        if n and (images.min() < 0 or images.max() > 1):
            raise DataError("pixel values must lie in [0, 1]")
        for arr in (images, labels, locations, timestamps):
            arr.setflags(write=False)
        self.images = images
        self.labels = labels
        self.locations = locations
        self.timestamps = timestamps
        codes = np.unique(locations, return_inverse=True)[1].reshape(-1) if n else np.zeros(0)
        self.location_codes = codes.astype(np.int64)
        self.location_codes.setflags(write=False)
        self._loc_index: dict | None = None
        self._check_location_labels()

    def _check_location_labels(self) -> None:
        seen: dict = {}
        for loc, lab in zip(self.locations.tolist(), self.labels.tolist()):
            if seen.setdefault(loc, lab) != lab:
                raise DataError(f"location {loc!r} carries more than one label")

    def __len__(self) -> int:
        return self.images.shape[0]

    def __getitem__(self, i: int) -> Sample:
        return Sample(self.images[i], int(self.labels[i]), self.locations[i].item(),
                      int(self.timestamps[i]))

    def __iter__(self) -> Iterator[Sample]:
        return (self[i] for i in range(len(self)))

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self) else 0

    def location_index(self) -> dict:
        """Map location id -> array of sample indices (dataset order)."""
        if self._loc_index is None:
            idx: dict = {}
            for i, loc in enumerate(self.locations.tolist()):
                idx.setdefault(loc, []).append(i)
            self._loc_index = {k: np.asarray(v) for k, v in idx.items()}
        return self._loc_index

    def subset(self, indices: Sequence[int]) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[indices], self.labels[indices], self.locations[indices],
                       self.timestamps[indices])

    def unlabeled(self) -> "UnlabeledView":
        return UnlabeledView(self)


class UnlabeledView:
    """Label-free view handed to self-supervised pretraining.

    Exposes images, locations and timestamps only; there is deliberately no
    way to reach the labels through it.
    """

    __slots__ = ("images", "locations", "location_codes", "timestamps", "_index")

    def __init__(self, ds: Dataset):
        self.images = ds.images
        self.locations = ds.locations
        self.location_codes = ds.location_codes
        self.timestamps = ds.timestamps
        self._index = ds.location_index()

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def location_index(self) -> dict:
        return self._index


# ---------------------------------------------------------------- synthetic scenes

@dataclass
class SyntheticSpec:
    """Parameters of the synthetic multi-temporal scene generator.

    Each class owns a two-colour palette and a texture frequency band.  A
    location draws its own random layout from its class band; every temporal
    view of the location re-renders that layout under a fresh global colour
    cast, illumination change, cloud blob and pixel noise (``drift``).
    """
    num_classes: int = 10
    locations_per_class: int = 100
    views: int = 4
    image_size: int = 16
    channels: int = 3
    palette_spread: float = 0.35
    location_jitter: float = 0.03
    drift: float = 0.06
    illumination: float = 0.1
    cloud_prob: float = 0.3
    cloud_strength: float = 0.5
    noise: float = 0.04
    seed: int = 0
    split: int = 0

    def __post_init__(self):
        for name in ("num_classes", "locations_per_class", "views", "image_size", "channels"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1", name)
        for name in ("palette_spread", "location_jitter", "drift", "illumination", "noise"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative", name)
        if not 0 <= self.cloud_prob <= 1:
            raise ConfigError("cloud_prob must lie in [0, 1]", "cloud_prob")

    def to_dict(self) -> dict:
        return asdict(self)


def _class_prototypes(spec: SyntheticSpec) -> dict:
    rng = np.random.default_rng([spec.seed, 0xC1A55])
    K, C = spec.num_classes, spec.channels
    # distinct (foreground, background) colour pairs drawn from a shared base set
    n_base = max(3, int(np.ceil((1 + np.sqrt(1 + 8 * K)) / 2)) + 1)
    base = rng.uniform(0.5 - spec.palette_spread, 0.5 + spec.palette_spread, size=(n_base, C))
    pairs = [(a, b) for a in range(n_base) for b in range(a + 1, n_base)]
    pick = rng.permutation(len(pairs))
    chosen = [pairs[i] for i in pick[:K]] if K <= len(pairs) else \
        [pairs[i % len(pairs)] for i in pick.tolist() * (K // len(pairs) + 1)][:K]
    palette = np.stack([base[list(p)] for p in chosen])
    freqs = rng.uniform(1.0, 4.0, size=K)
    fill = rng.uniform(0.35, 0.65, size=K)
    return {"palette": palette, "freq": freqs, "fill": fill}


def _layout(rng: np.random.Generator, size: int, freq: float, fill: float) -> np.ndarray:
    """Soft binary mask from a sum of random plane waves around ``freq`` cycles/image."""
    yy, xx = np.mgrid[0:size, 0:size] / size
    field = np.zeros((size, size))
    for _ in range(4):
        theta = rng.uniform(0, np.pi)
        f = freq * rng.uniform(0.8, 1.2)
        phase = rng.uniform(0, 2 * np.pi)
        field += np.cos(2 * np.pi * f * (np.cos(theta) * xx + np.sin(theta) * yy) + phase)
    thresh = np.quantile(field, 1.0 - fill)
    return 1.0 / (1.0 + np.exp(-4.0 * (field - thresh)))


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    """Render ``num_classes * locations_per_class * views`` samples.

    Class prototypes depend only on ``seed``; ``split`` selects an
    independent draw of locations from the same classes (e.g. a test split).
    """
    protos = _class_prototypes(spec)
    rng = np.random.default_rng([spec.seed, spec.split, 0x5CE7E])
    S, C = spec.image_size, spec.channels
    n = spec.num_classes * spec.locations_per_class * spec.views
    images = np.empty((n, S, S, C))
    labels = np.empty(n, dtype=np.int64)
    locs = np.empty(n, dtype=np.int64)
    times = np.empty(n, dtype=np.int64)
    yy, xx = np.mgrid[0:S, 0:S] / S
    i = 0
    loc_id = spec.split * spec.num_classes * spec.locations_per_class
    for c in range(spec.num_classes):
        for _ in range(spec.locations_per_class):
            mask = _layout(rng, S, protos["freq"][c], protos["fill"][c])[..., None]
            pal = protos["palette"][c] + spec.location_jitter * rng.normal(size=(2, C))
            base = mask * pal[0] + (1 - mask) * pal[1]
            for t in range(spec.views):
                img = base * rng.uniform(1 - spec.illumination, 1 + spec.illumination)
                img = img + spec.drift * rng.normal(size=C)
                if rng.random() < spec.cloud_prob:
                    cy, cx = rng.uniform(0, 1, size=2)
                    r = rng.uniform(0.15, 0.35)
                    cloud = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r * r))[..., None]
                    img = img * (1 - spec.cloud_strength * cloud) + spec.cloud_strength * cloud * 0.9
                img = img + spec.noise * rng.normal(size=img.shape)
                images[i] = np.clip(img, 0.0, 1.0)
                labels[i] = c
                locs[i] = loc_id
                times[i] = t
                i += 1
            loc_id += 1
    return Dataset(images, labels, locs, times)


# ---------------------------------------------------------------- folder IO

def load_folder(path: str | Path, metadata: str | Path | None = None) -> Dataset:
    """Read 8-bit RGB PNGs listed in a ``path,label,location_id,timestamp`` CSV."""
    from PIL import Image

    root = Path(path)
    meta = Path(metadata) if metadata is not None else root / "metadata.csv"
    if not meta.is_absolute() and metadata is not None and not meta.exists():
        meta = root / meta
    try:
        fh = open(meta, newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot open metadata file {meta}: {exc}") from exc
    images, labels, locs, times = [], [], [], []
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != CSV_HEADER:
            raise DataError(f"{meta}: line 1: header must be exactly {','.join(CSV_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise DataError(f"{meta}: line {lineno}: expected 4 fields, got {len(row)}")
            rel, label, loc, ts = row
            try:
                label_i, ts_i = int(label), int(ts)
            except ValueError:
                raise DataError(f"{meta}: line {lineno}: label and timestamp must be integers") from None
            if label_i < 0:
                raise DataError(f"{meta}: line {lineno}: negative label {label_i}")
            file = root / rel
            if not file.is_file():
                raise DataError(f"{meta}: line {lineno}: missing image file {file}")
            with Image.open(file) as im:
                arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
            if images and arr.shape != images[0].shape:
                raise DataError(f"{meta}: line {lineno}: image {file} has size {arr.shape}, "
                                f"expected {images[0].shape}")
            images.append(arr)
            labels.append(label_i)
            locs.append(loc)
            times.append(ts_i)
    if not images:
        raise DataError(f"{meta}: no samples listed")
    return Dataset(np.stack(images), labels, locs, times)


def export_folder(ds: Dataset, path: str | Path) -> Path:
    """Write ``ds`` as PNG files plus ``metadata.csv``; pixels are quantised to 8 bits."""
    from PIL import Image

    if ds.image_shape[2] != 3:
        raise ContractError("only 3-channel datasets can be exported as RGB PNG")
    root = Path(path)
    (root / "images").mkdir(parents=True, exist_ok=True)
    meta = root / "metadata.csv"
    with open(meta, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for i in range(len(ds)):
            rel = f"images/{i:06d}.png"
            px = np.round(ds.images[i] * 255.0).astype(np.uint8)
            Image.fromarray(px, mode="RGB").save(root / rel)
            w.writerow([rel, int(ds.labels[i]), ds.locations[i].item(), int(ds.timestamps[i])])
    return meta


# ---------------------------------------------------------------- augmentation

@dataclass
class AugmentationPolicy:
    crop_scale: tuple[float, float] = (0.5, 1.0)
    crop_ratio: tuple[float, float] = (3 / 4, 4 / 3)
    flip_prob: float = 0.5
    rotate90: bool = True
    brightness: float = 0.1
    contrast: float = 0.1
    saturation: float = 0.1
    blur_prob: float = 0.5
    blur_sigma: tuple[float, float] = (0.1, 1.0)
    output_size: int = 16

    def __post_init__(self):
        self.crop_scale = tuple(float(v) for v in self.crop_scale)
        self.crop_ratio = tuple(float(v) for v in self.crop_ratio)
        self.blur_sigma = tuple(float(v) for v in self.blur_sigma)
        lo, hi = self.crop_scale
        if not 0 < lo <= hi <= 1:
            raise ConfigError("crop_scale must satisfy 0 < lo <= hi <= 1", "crop_scale")
        if not 0 < self.crop_ratio[0] <= self.crop_ratio[1]:
            raise ConfigError("crop_ratio must be positive and ordered", "crop_ratio")
        for name in ("flip_prob", "blur_prob"):
            if not 0 <= getattr(self, name) <= 1:
                raise ConfigError(f"{name} must lie in [0, 1]", name)
        for name in ("brightness", "contrast", "saturation"):
            if not 0 <= getattr(self, name) < 1:
                raise ConfigError(f"{name} must lie in [0, 1)", name)
        if self.output_size < 1:
            raise ConfigError("output_size must be >= 1", "output_size")

    @classmethod
    def identity(cls, output_size: int = 16) -> "AugmentationPolicy":
        return cls(crop_scale=(1.0, 1.0), crop_ratio=(1.0, 1.0), flip_prob=0.0, rotate90=False,
                   brightness=0.0, contrast=0.0, saturation=0.0, blur_prob=0.0,
                   output_size=output_size)

    @classmethod
    def crop_only(cls, output_size: int = 16) -> "AugmentationPolicy":
        default = cls()
        return cls(crop_scale=default.crop_scale, crop_ratio=default.crop_ratio, flip_prob=0.0,
                   rotate90=False, brightness=0.0, contrast=0.0, saturation=0.0, blur_prob=0.0,
                   output_size=output_size)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("crop_scale", "crop_ratio", "blur_sigma"):
            d[k] = list(d[k])
        return d


_GRAY = np.array([0.299, 0.587, 0.114])


def _gray(x: np.ndarray) -> np.ndarray:
    if x.shape[-1] == 3:
        return (x @ _GRAY)[..., None]
    return x.mean(axis=-1, keepdims=True)


def _crop_boxes(rng, n: int, H: int, W: int, policy: AugmentationPolicy) -> np.ndarray:
    area = H * W * rng.uniform(*policy.crop_scale, size=n)
    log_r = rng.uniform(np.log(policy.crop_ratio[0]), np.log(policy.crop_ratio[1]), size=n)
    ratio = np.exp(log_r)
    w = np.clip(np.sqrt(area * ratio), 1.0, W)
    h = np.clip(np.sqrt(area / ratio), 1.0, H)
    y0 = rng.uniform(0, 1, size=n) * (H - h)
    x0 = rng.uniform(0, 1, size=n) * (W - w)
    return np.stack([y0, x0, h, w], axis=1)


def _resized_crop(x: np.ndarray, boxes: np.ndarray, out: int) -> np.ndarray:
    """Bilinear resample each crop box of (N, H, W, C) to (N, out, out, C)."""
    N, H, W, _ = x.shape
    grid = (np.arange(out) + 0.5) / out
    sy = np.clip(boxes[:, 0:1] + grid[None] * boxes[:, 2:3] - 0.5, 0, H - 1)  # (N, out)
    sx = np.clip(boxes[:, 1:2] + grid[None] * boxes[:, 3:4] - 0.5, 0, W - 1)
    y0 = np.floor(sy).astype(np.int64)
    x0 = np.floor(sx).astype(np.int64)
    y1 = np.minimum(y0 + 1, H - 1)
    x1 = np.minimum(x0 + 1, W - 1)
    wy = (sy - y0)[:, :, None, None]
    wx = (sx - x0)[:, None, :, None]
    n = np.arange(N)[:, None, None]

    def gather(yi, xi):
        return x[n, yi[:, :, None], xi[:, None, :]]
    top = gather(y0, x0) * (1 - wx) + gather(y0, x1) * wx
    bot = gather(y1, x0) * (1 - wx) + gather(y1, x1) * wx
    return top * (1 - wy) + bot * wy


def _blur3(x: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    """Separable 3x3 Gaussian blur with per-image sigma, edge-replicated borders."""
    k = np.exp(-1.0 / (2.0 * sigma ** 2))
    w_side = (k / (1.0 + 2.0 * k))[:, None, None, None]
    w_mid = 1.0 - 2.0 * w_side
    p = np.pad(x, ((0, 0), (1, 1), (0, 0), (0, 0)), mode="edge")
    x = w_side * p[:, :-2] + w_mid * p[:, 1:-1] + w_side * p[:, 2:]
    p = np.pad(x, ((0, 0), (0, 0), (1, 1), (0, 0)), mode="edge")
    return w_side * p[:, :, :-2] + w_mid * p[:, :, 1:-1] + w_side * p[:, :, 2:]


def rotate90(image: np.ndarray, k: int) -> np.ndarray:
    """Counter-clockwise rotation by ``k`` quarter turns of an (H, W, C) image."""
    return np.rot90(image, k, axes=(0, 1))


def augment_batch(images: np.ndarray, policy: AugmentationPolicy,
                  rng: np.random.Generator) -> np.ndarray:
    """Apply crop -> flip -> rot90 -> colour jitter -> blur to each image.

    Random draws happen in a fixed order per call, so output is a pure
    function of ``(images, policy, rng state)``.
    """
    x = np.asarray(images, dtype=np.float64)
    if x.ndim != 4:
        raise ContractError(f"expected (N, H, W, C) images, got {x.shape}")
    N, H, W, C = x.shape
    out = policy.output_size
    boxes = _crop_boxes(rng, N, H, W, policy)
    flips = rng.random(N) < policy.flip_prob
    ks = rng.integers(0, 4, size=N) if policy.rotate90 else np.zeros(N, dtype=np.int64)
    bright = rng.uniform(1 - policy.brightness, 1 + policy.brightness, size=N)
    contr = rng.uniform(1 - policy.contrast, 1 + policy.contrast, size=N)
    satur = rng.uniform(1 - policy.saturation, 1 + policy.saturation, size=N)
    blur_on = rng.random(N) < policy.blur_prob
    sigmas = rng.uniform(*policy.blur_sigma, size=N)

    full = policy.crop_scale == (1.0, 1.0) and policy.crop_ratio == (1.0, 1.0) and out == H == W
    y = x.copy() if full else _resized_crop(x, boxes, out)
    if flips.any():
        y[flips] = y[flips][:, :, ::-1]
    if H == W or not full:
        for k in (1, 2, 3):
            sel = ks == k
            if sel.any():
                y[sel] = np.rot90(y[sel], k, axes=(1, 2))
    col = lambda v: v[:, None, None, None]
    if policy.brightness:
        y = np.clip(y * col(bright), 0, 1)
    if policy.contrast:
        m = _gray(y).mean(axis=(1, 2, 3))
        y = np.clip((y - col(m)) * col(contr) + col(m), 0, 1)
    if policy.saturation:
        g = _gray(y)
        y = np.clip(g + (y - g) * col(satur), 0, 1)
    if blur_on.any():
        y[blur_on] = _blur3(y[blur_on], sigmas[blur_on])
    return np.clip(y, 0.0, 1.0)


def augment(image: np.ndarray, policy: AugmentationPolicy, rng: np.random.Generator) -> np.ndarray:
    """Augment a single (H, W, C) image; see :func:`augment_batch`."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3:
        raise ContractError(f"expected an (H, W, C) image, got {image.shape}")
    return augment_batch(image[None], policy, rng)[0]


# ---------------------------------------------------------------- positive pairs

MODES = ("moco", "mocotp")


def key_sources(ds, indices: np.ndarray, mode: str, rng: np.random.Generator) -> np.ndarray:
    """Index of the image each key view is rendered from."""
    if mode not in MODES:
        raise ConfigError(f"unknown pair mode {mode!r}", "mode")
    indices = np.asarray(indices, dtype=np.int64)
    if mode == "moco":
        return indices.copy()
    loc_index = ds.location_index()
    out = np.empty_like(indices)
    for j, i in enumerate(indices):
        members = loc_index[ds.locations[i].item()]
        others = members[members != i]
        out[j] = others[rng.integers(len(others))] if len(others) else i
    return out


def sample_pairs(ds, indices: Sequence[int], mode: str, policy: AugmentationPolicy,
                 rng: np.random.Generator):
    """Batch form of :func:`sample_pair`.

    Returns (views_q, views_k, ids).  The ids tag keys in the queue: dense
    location codes for ``mocotp`` and sample indices (instance ids) for
    ``moco``, where every image is its own class.
    """
    indices = np.asarray(indices, dtype=np.int64)
    src = key_sources(ds, indices, mode, rng)
    vq = augment_batch(ds.images[indices], policy, rng)
    vk = augment_batch(ds.images[src], policy, rng)
    ids = ds.location_codes[indices] if mode == "mocotp" else indices.copy()
    return vq, vk, ids


def sample_pair(ds, anchor: int, mode: str, policy: AugmentationPolicy,
                rng: np.random.Generator):
    """Two views of a positive pair anchored at sample index ``anchor``.

    ``moco`` augments the anchor twice; ``mocotp`` renders the key from another
    timestamp at the same location (the anchor itself if there is none).
    """
    vq, vk, _ = sample_pairs(ds, [anchor], mode, policy, rng)
    return vq[0], vk[0], ds.locations[anchor].item()
