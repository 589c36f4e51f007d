"""Datasets, the procedural shape benchmark, patchification and augmentations.

Images are float32 arrays of shape ``(3, H, W)`` with values in ``[0, 1]``.
A flattened patch lists its pixels channel-major, then row, then column, so
element ``c * p * p + i * p + j`` is channel ``c`` at row ``i``, column ``j``
of the patch.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage
from scipy import ndimage

from .numerics import DimensionError

__all__ = [
    "IngestionError",
    "LabeledDataset",
    "PatchSequence",
    "load_image_folder",
    "export_image_folder",
    "synth_generate",
    "patchify",
    "patchify_batch",
    "unpatchify",
    "augment",
    "AugmentPolicy",
    "hflip",
    "solarize",
    "greyscale",
    "gaussian_blur",
    "color_jitter",
    "random_resized_crop",
    "resize_center",
]


class IngestionError(RuntimeError):
    """A manifest line could not be turned into a dataset item."""


# ----------------------------------------------------------------- datasets


@dataclass
class LabeledDataset:
    """Ordered (image reference, label) pairs.

    References are file paths for folder datasets (decoded on access) or
    integer rows of ``pixels`` for in-memory datasets.
    """

    items: list[tuple[object, int]]
    num_classes: int
    split: str = "train"
    pixels: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        for ref, label in self.items:
            if not 0 <= label < self.num_classes:
                raise IngestionError(f"label {label} of {ref} outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.items)

    @property
    def labels(self) -> np.ndarray:
        return np.array([lab for _, lab in self.items], dtype=np.int64)

    def image(self, i: int) -> np.ndarray:
        ref = self.items[i][0]
        if self.pixels is not None:
            return self.pixels[ref]
        return decode_image(ref)

    def images(self, indices=None, size: int | None = None) -> np.ndarray:
        """Stack images (optionally resized/center-cropped to ``size``) into ``(k, 3, H, W)``."""
        if indices is None:
            indices = range(len(self))
        if self.pixels is not None and size is None:
            refs = [self.items[i][0] for i in indices]
            return self.pixels[np.asarray(refs, dtype=np.int64)]
        out = []
        for i in indices:
            img = self.image(i)
            if size is not None and img.shape[1:] != (size, size):
                img = resize_center(img, size)
            out.append(img)
        if not out:
            return np.zeros((0, 3, size or 0, size or 0), dtype=np.float32)
        return np.stack(out)

    def subset(self, indices, split: str | None = None) -> "LabeledDataset":
        return LabeledDataset(
            [self.items[i] for i in indices], self.num_classes, split or self.split, self.pixels
        )

    def fraction(self, frac: float, seed: int = 0) -> "LabeledDataset":
        """Class-balanced subset holding ``round(frac * len)`` items."""
        if frac >= 1.0:
            return self
        rng = np.random.default_rng(seed)
        labels = self.labels
        total = max(1, int(round(frac * len(self))))
        per_class = [np.flatnonzero(labels == c) for c in range(self.num_classes)]
        picked = []
        for c, idx in enumerate(per_class):
            take = total // self.num_classes + (1 if c < total % self.num_classes else 0)
            picked.extend(rng.permutation(idx)[:take].tolist())
        return self.subset(sorted(picked))

    def epoch_order(self, seed: int, epoch: int) -> np.ndarray:
        rng = np.random.default_rng(np.random.SeedSequence([seed, epoch]))
        return rng.permutation(len(self))


def decode_image(path) -> np.ndarray:
    with PILImage.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def load_image_folder(path, manifest="manifest.tsv", num_classes: int | None = None, split: str = "train") -> LabeledDataset:
    """Read a ``relative_path<TAB>label`` manifest under ``path``.

    Every file is checked for existence and decodability up front; pixels
    are decoded lazily afterwards.
    """
    root = Path(path)
    manifest = Path(manifest)
    if not manifest.is_absolute():
        manifest = root / manifest
    if not manifest.exists():
        raise IngestionError(f"{manifest}: manifest not found")
    items = []
    for lineno, raw in enumerate(manifest.read_text(encoding="utf-8").splitlines(), 1):
        if not raw.strip():
            continue
        where = f"{manifest}:{lineno}"
        parts = raw.split("\t")
        if len(parts) != 2:
            raise IngestionError(f"{where}: expected 'path<TAB>label', got {raw!r}")
        rel, lab = parts
        try:
            label = int(lab)
        except ValueError:
            raise IngestionError(f"{where}: label {lab!r} is not an integer") from None
        file = root / rel
        if not file.exists():
            raise IngestionError(f"{where}: missing file {file}")
        try:
            with PILImage.open(file) as im:
                im.verify()
        except Exception as e:
            raise IngestionError(f"{where}: cannot decode {file} ({e})") from None
        if label < 0 or (num_classes is not None and label >= num_classes):
            raise IngestionError(f"{where}: label {label} out of range")
        items.append((file, label))
    if num_classes is None:
        num_classes = max((lab for _, lab in items), default=-1) + 1
    return LabeledDataset(items, max(num_classes, 1) if items else max(num_classes, 0), split)


def export_image_folder(dataset: LabeledDataset, path, manifest="manifest.tsv") -> Path:
    """Write PNGs plus a manifest that :func:`load_image_folder` reads back."""
    root = Path(path)
    (root / "images").mkdir(parents=True, exist_ok=True)
    lines = []
    for i, (_, label) in enumerate(dataset.items):
        rel = f"images/{dataset.split}_{i:06d}.png"
        img = np.round(dataset.image(i).transpose(1, 2, 0) * 255.0).astype(np.uint8)
        PILImage.fromarray(img, "RGB").save(root / rel)
        lines.append(f"{rel}\t{label}")
    out = root / manifest
    out.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    return out


# ------------------------------------------------------- synthetic shapes

SHAPES = ("disc", "square", "triangle", "cross")


def _shape_mask(kind: str, u: np.ndarray, v: np.ndarray, r: float) -> np.ndarray:
    if kind == "disc":
        return u * u + v * v <= r * r
    if kind == "square":
        return np.maximum(np.abs(u), np.abs(v)) <= 0.8 * r
    if kind == "triangle":
        return (v >= -0.5 * r) & (v <= r - np.sqrt(3.0) * np.abs(u))
    if kind == "cross":
        w = 0.33 * r
        return ((np.abs(u) <= w) & (np.abs(v) <= r)) | ((np.abs(v) <= w) & (np.abs(u) <= r))
    raise ValueError(kind)


def _hsv_to_rgb(h, s, v):
    rgb = np.clip(np.abs(np.mod(h * 6.0 + np.array([0.0, 4.0, 2.0]), 6.0) - 3.0) - 1.0, 0.0, 1.0)
    return v * (1.0 - s + s * rgb)


@dataclass(frozen=True)
class SynthParams:
    """Rendering knobs of the procedural benchmark (frozen after calibration)."""

    radius: tuple[float, float] = (0.26, 0.36)  # fraction of image size
    jitter: float = 0.12  # max centre offset, fraction of image size
    rotation: float = 0.5  # max |angle| in radians
    hue_spread: float = 0.17  # half-width of a class's hue band, fraction of the hue circle
    background_contrast: float = 0.25
    noise: float = 0.04
    supersample: int = 2


def _render(shape_id: int, hue_center: float, size: int, rng, params: SynthParams) -> np.ndarray:
    ss = params.supersample
    m = size * ss
    coords = (np.arange(m) + 0.5) / m - 0.5
    yy, xx = np.meshgrid(coords, coords, indexing="ij")

    # textured low-saturation background
    base = rng.uniform(0.25, 0.75)
    field_ = ndimage.gaussian_filter(rng.standard_normal((m, m)), sigma=m / 8, mode="wrap")
    field_ /= field_.std() + 1e-8
    tint = rng.uniform(0, 1)
    bg_col = _hsv_to_rgb(tint, 0.15, 1.0)
    bg = np.clip(base + params.background_contrast * 0.5 * field_, 0, 1)[None] * bg_col[:, None, None]

    # foreground shape
    hue = hue_center + rng.uniform(-params.hue_spread, params.hue_spread)
    fg_col = _hsv_to_rgb(hue, rng.uniform(0.65, 1.0), rng.uniform(0.7, 1.0))
    cx, cy = rng.uniform(-params.jitter, params.jitter, size=2)
    ang = rng.uniform(-params.rotation, params.rotation)
    r = rng.uniform(*params.radius)
    c, s = np.cos(ang), np.sin(ang)
    dx, dy = xx - cx, -(yy - cy)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    mask = _shape_mask(SHAPES[shape_id], u, v, r).astype(np.float64)

    img = bg * (1 - mask) + fg_col[:, None, None] * mask
    img = img.reshape(3, size, ss, size, ss).mean(axis=(2, 4))
    img = img + params.noise * rng.standard_normal(img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def synth_generate(
    seed: int,
    n_train: int,
    n_test: int,
    num_classes: int = 4,
    size: int = 32,
    params: SynthParams = SynthParams(),
) -> tuple[LabeledDataset, LabeledDataset]:
    """Render a stratified (train, test) pair of shape/colour classification sets.

    Class ``c`` is shape ``c % 4`` drawn with a hue centred at ``c / num_classes``
    on the hue circle.  Neighbouring hue bands overlap (``hue_spread`` is wider
    than half the spacing at four classes), so colour is only a partial cue and
    shape carries the rest.
    """
    if not 2 <= num_classes <= 16:
        raise ValueError("num_classes must be in [2, 16]")
    if size % 8:
        raise ValueError("size must be a multiple of 8")
    root = np.random.SeedSequence(seed)
    out = []
    for split, count, child in zip(("train", "test"), (n_train, n_test), root.spawn(2)):
        rng = np.random.default_rng(child)
        labels = np.arange(count) % num_classes
        labels = labels[rng.permutation(count)]
        pixels = np.empty((count, 3, size, size), dtype=np.float32)
        for i, lab in enumerate(labels):
            pixels[i] = _render(int(lab) % 4, int(lab) / num_classes, size, rng, params)
        items = [(i, int(lab)) for i, lab in enumerate(labels)]
        out.append(LabeledDataset(items, num_classes, split, pixels))
    return out[0], out[1]


# ----------------------------------------------------------- patchify


@dataclass
class PatchSequence:
    patches: np.ndarray  # (n, d)
    grid: tuple[int, int]
    patch_size: int

    @property
    def n(self) -> int:
        return self.patches.shape[0]

    @property
    def d(self) -> int:
        return self.patches.shape[1]


def patchify_batch(images: np.ndarray, patch_size: int) -> np.ndarray:
    """``(B, 3, H, W) -> (B, n, 3 * p * p)`` in row-major grid order."""
    B, C, H, W = images.shape
    p = patch_size
    if H % p or W % p:
        raise DimensionError(f"image {H}x{W} not divisible by patch size {p}")
    rows, cols = H // p, W // p
    x = images.reshape(B, C, rows, p, cols, p).transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(B, rows * cols, C * p * p)


def patchify(image: np.ndarray, patch_size: int) -> PatchSequence:
    _, H, W = image.shape
    patches = patchify_batch(image[None], patch_size)[0]
    return PatchSequence(patches, (H // patch_size, W // patch_size), patch_size)


def unpatchify(seq: PatchSequence) -> np.ndarray:
    rows, cols = seq.grid
    p = seq.patch_size
    C = seq.d // (p * p)
    x = seq.patches.reshape(rows, cols, C, p, p).transpose(2, 0, 3, 1, 4)
    return x.reshape(C, rows * p, cols * p)


# --------------------------------------------------------- augmentations


def hflip(image: np.ndarray) -> np.ndarray:
    return image[:, :, ::-1].copy()


def solarize(image: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Invert every value at or above ``threshold``."""
    return np.where(image >= threshold, 1.0 - image, image).astype(image.dtype)


_LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float32)


def greyscale(image: np.ndarray) -> np.ndarray:
    lum = np.tensordot(_LUMA, image, axes=1)
    return np.broadcast_to(lum, image.shape).astype(image.dtype)


def gaussian_blur(image: np.ndarray, sigma: float) -> np.ndarray:
    return ndimage.gaussian_filter(image, sigma=(0, sigma, sigma), mode="reflect").astype(image.dtype)


def color_jitter(image: np.ndarray, rng, strength: float = 0.4) -> np.ndarray:
    """Random brightness, contrast and saturation factors in ``[1 - s, 1 + s]``, random order."""
    out = image
    for k in rng.permutation(3):
        f = rng.uniform(1 - strength, 1 + strength)
        if k == 0:
            out = out * f
        elif k == 1:
            m = np.tensordot(_LUMA, out, axes=1).mean()
            out = (out - m) * f + m
        else:
            g = np.tensordot(_LUMA, out, axes=1)[None]
            out = (out - g) * f + g
        out = np.clip(out, 0.0, 1.0)
    return out.astype(image.dtype)


def _sample_box(image: np.ndarray, top: float, left: float, h: float, w: float, size: int) -> np.ndarray:
    ys = top + (np.arange(size) + 0.5) * h / size - 0.5
    xs = left + (np.arange(size) + 0.5) * w / size - 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    out = np.empty((image.shape[0], size, size), dtype=image.dtype)
    for c in range(image.shape[0]):
        out[c] = ndimage.map_coordinates(image[c], [yy, xx], order=1, mode="nearest")
    return out


def random_resized_crop(image: np.ndarray, rng, size: int, scale=(0.2, 1.0), ratio=(3 / 4, 4 / 3)) -> np.ndarray:
    _, H, W = image.shape
    area = H * W
    for _ in range(10):
        target = area * rng.uniform(*scale)
        aspect = np.exp(rng.uniform(np.log(ratio[0]), np.log(ratio[1])))
        w = np.sqrt(target * aspect)
        h = np.sqrt(target / aspect)
        if w <= W and h <= H:
            top = rng.uniform(0, H - h)
            left = rng.uniform(0, W - w)
            return _sample_box(image, top, left, h, w, size)
    side = min(H, W)
    return _sample_box(image, (H - side) / 2, (W - side) / 2, side, side, size)


def resize_center(image: np.ndarray, size: int) -> np.ndarray:
    """Resize-and-center-crop to ``size x size`` (the evaluation transform)."""
    _, H, W = image.shape
    side = min(H, W)
    return _sample_box(image, (H - side) / 2, (W - side) / 2, side, side, size)


@dataclass(frozen=True)
class AugmentPolicy:
    """Probabilities and ranges for the two augmentation sets."""

    name: str = "basic"
    crop_scale: tuple[float, float] = (0.2, 1.0)
    flip_p: float = 0.5
    grey_p: float = 0.2
    solarize_p: float = 0.2
    solarize_threshold: float = 0.5
    blur_p: float = 0.5
    blur_sigma: tuple[float, float] = (0.1, 2.0)
    jitter: float = 0.4

    @classmethod
    def named(cls, name: str, **overrides) -> "AugmentPolicy":
        if name not in ("basic", "small_data", "none"):
            raise ValueError(f"unknown augmentation policy {name!r}")
        return cls(name=name, **overrides)


def augment(image: np.ndarray, policy, rng, size: int | None = None) -> np.ndarray:
    """Apply ``basic`` (crop + flip) or ``small_data`` (basic + photometric) augmentation."""
    if isinstance(policy, str):
        policy = AugmentPolicy.named(policy)
    size = size or image.shape[1]
    if policy.name == "none":
        out = image if image.shape[1:] == (size, size) else resize_center(image, size)
        return out.copy()
    out = random_resized_crop(image, rng, size, policy.crop_scale)
    if rng.random() < policy.flip_p:
        out = hflip(out)
    if policy.name == "small_data":
        out = color_jitter(out, rng, policy.jitter)
        if rng.random() < policy.grey_p:
            out = greyscale(out)
        if rng.random() < policy.blur_p:
            out = gaussian_blur(out, rng.uniform(*policy.blur_sigma))
        if rng.random() < policy.solarize_p:
            out = solarize(out, policy.solarize_threshold)
    return np.clip(out, 0.0, 1.0).astype(np.float32)
