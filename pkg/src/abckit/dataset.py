"""Training data: synthetic blob images, IDX files, and their preprocessing."""

import json
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from ._util import make_rng
from .errors import BadMagic, ConfigError, DataError, DimensionMismatch, TruncatedFile

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CACHE_MAGIC = b"ABCD"
CACHE_VERSION = 1
_META_TAG = b"META"


@dataclass(frozen=True)
class NormalizationSpec:
    """Affine map x -> (x - shift) * scale.

    ``mode="standardize"`` fills shift/scale from the dataset (mean and
    1/std over the whole tensor) when applied.
    """

    mode: str = "affine"
    shift: float = 0.5
    scale: float = 2.0

    def __post_init__(self):
        if self.mode not in ("affine", "standardize"):
            raise ConfigError(f"unknown normalization mode {self.mode!r}")
        if self.mode == "affine" and self.scale == 0:
            raise ConfigError("normalization scale must be non-zero")


MNIST_STYLE = NormalizationSpec("affine", 0.5, 2.0)


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray  # (count, channels, height, width) float32
    sources: np.ndarray  # (count,) int64, dense 0..N-1
    value_range: tuple = (0.0, 1.0)
    provenance: str = "synthetic"
    normalization: NormalizationSpec | None = field(default=None, compare=False)

    def __post_init__(self):
        images = np.ascontiguousarray(self.images, dtype=np.float32)
        sources = np.ascontiguousarray(self.sources, dtype=np.int64)
        if images.ndim != 4:
            raise DimensionMismatch(f"images must be 4-d (count, C, H, W), got shape {images.shape}")
        if sources.shape != (images.shape[0],):
            raise DimensionMismatch(f"{images.shape[0]} images but {sources.shape[0]} source ids")
        check_sources(sources)
        images.setflags(write=False)
        sources.setflags(write=False)
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "sources", sources)
        object.__setattr__(self, "value_range", (float(self.value_range[0]), float(self.value_range[1])))

    def __len__(self):
        return self.images.shape[0]

    @property
    def n_sources(self):
        return int(self.sources.max()) + 1 if len(self) else 0

    @property
    def image_shape(self):
        return self.images.shape[1:]

    def subset(self, indices):
        """View of selected images; source ids are kept as-is (not re-densified)."""
        idx = np.asarray(indices, dtype=np.int64)
        return _RawSubset(self.images[idx], self.sources[idx], self.value_range)

    def images_of(self, s):
        return self.images[self.sources == s]


@dataclass(frozen=True)
class _RawSubset:
    # training splits keep global source ids, so density is not enforced here
    images: np.ndarray
    sources: np.ndarray
    value_range: tuple

    def __len__(self):
        return self.images.shape[0]


def check_sources(sources):
    if sources.size == 0:
        return
    if sources.min() < 0:
        raise DataError("source ids must be non-negative")
    present = np.unique(sources)
    if present.size != int(present[-1]) + 1:
        missing = sorted(set(range(int(present[-1]) + 1)) - set(present.tolist()))
        raise DataError(f"source ids must be dense 0..N-1; missing {missing[:5]}")


def _densify(labels):
    _, dense = np.unique(labels, return_inverse=True)
    return dense.astype(np.int64)


# -- synthetic data -----------------------------------------------------------


def _blob_template(rng, side, blobs=(2, 4)):
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    img = np.zeros((side, side))
    for _ in range(int(rng.integers(blobs[0], blobs[1] + 1))):
        cy, cx = rng.uniform(0.15 * side, 0.85 * side, size=2)
        sy, sx = rng.uniform(side / 16, side / 5, size=2)
        amp = rng.uniform(0.5, 1.0)
        img += amp * np.exp(-0.5 * (((yy - cy) / sy) ** 2 + ((xx - cx) / sx) ** 2))
    return np.clip(img, 0.0, 1.0)


def generate_synthetic(count, side=16, n_sources=None, seed=0, jitter=0.05, blobs=(2, 4)):
    """Deterministic blob images grouped into sources.

    Each source owns one template (``blobs`` gives the inclusive range of
    axis-aligned Gaussian blobs per template, 2-4 by default); every
    image is its source's template plus uniform pixel jitter in
    [-jitter, jitter], clipped to [0, 1].  Images are split into sources in
    contiguous, near-equal blocks.
    """
    n_sources = count if n_sources is None else n_sources
    if not 1 <= n_sources <= count:
        raise ConfigError(f"need count >= n_sources >= 1, got count={count}, n_sources={n_sources}")
    if not 8 <= side <= 64:
        raise ConfigError(f"side must lie in [8, 64], got {side}")
    rng = make_rng(seed, "synthetic")
    lo, hi = blobs
    if not 1 <= lo <= hi:
        raise ConfigError(f"blob range must satisfy 1 <= lo <= hi, got {blobs}")
    templates = np.stack([_blob_template(rng, side, (lo, hi)) for _ in range(n_sources)])
    sources = (np.arange(count, dtype=np.int64) * n_sources) // count
    noise = rng.uniform(-jitter, jitter, size=(count, side, side))
    images = np.clip(templates[sources] + noise, 0.0, 1.0)
    return Dataset(images[:, None].astype(np.float32), sources, (0.0, 1.0), "synthetic")


def regroup_sources(d, n_groups, seed=0):
    """Randomly assort images into ``n_groups`` near-equal sources.

    Group sizes differ by at most one; the assignment is a seeded shuffle.
    """
    if not 1 <= n_groups <= len(d):
        raise ConfigError(f"n_groups must lie in [1, {len(d)}]")
    order = make_rng(seed, "regroup").permutation(len(d))
    sources = np.empty(len(d), dtype=np.int64)
    sources[order] = (np.arange(len(d)) * n_groups) // len(d)
    return replace(d, sources=sources)


# -- IDX files -----------------------------------------------------------------


def _read_idx(path, expected_magic):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise TruncatedFile(f"{path}: shorter than an IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise BadMagic(f"{path}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise TruncatedFile(f"{path}: header truncated")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    size = int(np.prod(dims)) if dims else 0
    if len(raw) - header < size:
        raise TruncatedFile(f"{path}: payload has {len(raw) - header} bytes, dims {dims} need {size}")
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=header).reshape(dims)


def load_idx(images_path, labels_path=None, dedupe=False, source_mode=None):
    """Load MNIST-format files; pixels become float32 in [0, 1].

    With labels (and ``source_mode`` left at the default or ``"label"``)
    each class is a source; otherwise every image is its own source.
    ``dedupe`` drops exact byte-level duplicate images, keeping the first.
    """
    pixels = _read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = None
    if labels_path is not None:
        labels = _read_idx(labels_path, IDX_LABELS_MAGIC)
        if labels.shape[0] != pixels.shape[0]:
            raise DimensionMismatch(f"{pixels.shape[0]} images but {labels.shape[0]} labels")
    if dedupe:
        _, first = np.unique(pixels.reshape(len(pixels), -1), axis=0, return_index=True)
        keep = np.sort(first)
        pixels = pixels[keep]
        if labels is not None:
            labels = labels[keep]
    mode = source_mode or ("label" if labels is not None else "datum")
    if mode == "label":
        if labels is None:
            raise ConfigError("source mode 'label' needs a labels file")
        sources = _densify(labels)
    elif mode == "datum":
        sources = np.arange(len(pixels), dtype=np.int64)
    else:
        raise ConfigError(f"unknown source mode {mode!r}")
    images = (pixels.astype(np.float32) / np.float32(255.0))[:, None]
    return Dataset(images, sources, (0.0, 1.0), "idx")


def save_idx(d, images_path, labels_path=None):
    """Write a [0, 1] single-channel dataset back to IDX (pixels rounded to u8)."""
    if d.images.shape[1] != 1:
        raise DimensionMismatch("IDX image files hold single-channel images")
    lo, hi = d.value_range
    unit = (d.images[:, 0].astype(np.float64) - lo) / (hi - lo)
    pixels = np.clip(np.rint(unit * 255.0), 0, 255).astype(np.uint8)
    count, h, w = pixels.shape
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, count, h, w))
        fh.write(pixels.tobytes())
    if labels_path is not None:
        if d.n_sources > 256:
            raise DataError("IDX labels are u8; more than 256 sources cannot be stored")
        with open(labels_path, "wb") as fh:
            fh.write(struct.pack(">II", IDX_LABELS_MAGIC, count))
            fh.write(d.sources.astype(np.uint8).tobytes())


# -- preprocessing --------------------------------------------------------------


def pad_images(d, target_side):
    """Center-pad with zeros (black before normalization)."""
    _, _, h, w = d.images.shape
    if target_side < max(h, w):
        raise ConfigError(f"cannot pad {h}x{w} images down to {target_side}")
    top, left = (target_side - h) // 2, (target_side - w) // 2
    padded = np.pad(d.images, ((0, 0), (0, 0), (top, target_side - h - top), (left, target_side - w - left)))
    return replace(d, images=padded)


def normalize(d, spec=MNIST_STYLE):
    if spec.mode == "standardize":
        values = d.images.astype(np.float64)
        std = values.std()
        if std == 0:
            raise ConfigError("cannot standardize a constant dataset")
        spec = NormalizationSpec("affine", float(values.mean()), float(1.0 / std))
    lo, hi = ((v - spec.shift) * spec.scale for v in d.value_range)
    images = ((d.images.astype(np.float64) - spec.shift) * spec.scale).astype(np.float32)
    return replace(d, images=images, value_range=(min(lo, hi), max(lo, hi)),
                   normalization=NormalizationSpec("affine", spec.shift, spec.scale))


def denormalize(x, spec):
    return np.asarray(x, dtype=np.float64) / spec.scale + spec.shift


def binarize(x, threshold=None, value_range=(-1.0, 1.0)):
    """Map to {0, 1}: 1 where ``x > threshold``.

    The default threshold is the midpoint of ``value_range``.
    """
    if threshold is None:
        threshold = 0.5 * (value_range[0] + value_range[1])
    return (np.asarray(x) > threshold).astype(np.uint8)


# -- dataset cache ---------------------------------------------------------------


def write_tensor(path, images, ids, meta=None):
    """Raw ABCD writer: header, f32 pixels, u32 ids, optional JSON trailer."""
    images = np.asarray(images, dtype="<f4")
    count, c, h, w = images.shape
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC)
        fh.write(struct.pack("<5I", CACHE_VERSION, count, c, h, w))
        fh.write(images.tobytes())
        fh.write(np.asarray(ids).astype("<u4").tobytes())
        if meta is not None:
            meta_bytes = json.dumps(meta, sort_keys=True).encode()
            fh.write(_META_TAG + struct.pack("<I", len(meta_bytes)) + meta_bytes)


def save_dataset(d, path):
    """Write the ABCD cache: header, f32 pixels, u32 source ids, then a
    JSON metadata trailer (value range, provenance, normalization)."""
    meta = {"value_range": list(d.value_range), "provenance": d.provenance}
    if d.normalization is not None:
        meta["normalization"] = {"mode": d.normalization.mode, "shift": d.normalization.shift,
                                 "scale": d.normalization.scale}
    write_tensor(path, d.images, d.sources, meta)


def load_dataset(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != CACHE_MAGIC:
        raise BadMagic(f"{path}: not an ABCD dataset file")
    if len(raw) < 24:
        raise TruncatedFile(f"{path}: header truncated")
    version, count, c, h, w = struct.unpack("<5I", raw[4:24])
    if version != CACHE_VERSION:
        raise DataError(f"{path}: unsupported dataset version {version}")
    n_pix = count * c * h * w
    end = 24 + 4 * n_pix + 4 * count
    if len(raw) < end:
        raise TruncatedFile(f"{path}: payload truncated")
    images = np.frombuffer(raw, "<f4", n_pix, 24).reshape(count, c, h, w)
    sources = np.frombuffer(raw, "<u4", count, 24 + 4 * n_pix).astype(np.int64)
    meta = {}
    if raw[end:end + 4] == _META_TAG:
        (length,) = struct.unpack("<I", raw[end + 4:end + 8])
        meta = json.loads(raw[end + 8:end + 8 + length])
    norm = meta.get("normalization")
    lo_hi = meta.get("value_range")
    if lo_hi is None:
        lo_hi = (float(images.min()), float(images.max())) if count else (0.0, 1.0)
    return Dataset(images, sources, tuple(lo_hi), meta.get("provenance", "cache"),
                   NormalizationSpec(**norm) if norm else None)
