import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from errors import ConfigurationError, DataError

SPLITS = ("train", "test")
IMAGE_SUFFIXES = {".png", ".ppm"}
FAMILIES = ("grating", "checkerboard", "noise", "stripes")
# Per-band period shrink factor for class counts above len(FAMILIES)
BAND_FACTOR = 1.5


@dataclass(frozen=True)
class LabeledImage:
    pixels: np.ndarray  # H x W x 3, values in [0, 1]
    label: int
    id: str

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass
class DatasetManifest:
    class_names: list[str]
    train: list[LabeledImage] = field(default_factory=list)
    test: list[LabeledImage] = field(default_factory=list)
    root: Path | None = None

    def __post_init__(self):
        overlap = {s.id for s in self.train} & {s.id for s in self.test}
        if overlap:
            raise DataError(f"train and test splits share ids: {sorted(overlap)[:5]}")

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def split(self, name: str) -> list[LabeledImage]:
        if name not in SPLITS:
            raise DataError(f"unknown split '{name}'")
        return getattr(self, name)


# Geometry


def _resize_pixels(pixels: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    in_h, in_w = pixels.shape[:2]

    def axis(out_size: int, in_size: int):
        src = (np.arange(out_size) + 0.5) * in_size / out_size - 0.5
        src = np.clip(src, 0.0, in_size - 1)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, in_size - 1)
        return lo, hi, src - lo

    y0, y1, ty = axis(out_h, in_h)
    x0, x1, tx = axis(out_w, in_w)
    top, bottom = pixels[y0], pixels[y1]
    rows = top + ty[:, None, None] * (bottom - top)
    left, right = rows[:, x0], rows[:, x1]
    return left + tx[None, :, None] * (right - left)


def resize(img: LabeledImage, size: int) -> LabeledImage:
    """Bilinear resize to ``size x size`` (half-pixel centres)."""
    if size < 1:
        raise ConfigurationError(f"resize target must be positive, got {size}")
    return replace(img, pixels=_resize_pixels(img.pixels, size, size))


def _crop(img: LabeledImage, size: int, top: int, left: int) -> LabeledImage:
    return replace(img, pixels=img.pixels[top : top + size, left : left + size])


def _check_crop(img: LabeledImage, size: int):
    if size < 1 or size > img.height or size > img.width:
        raise ConfigurationError(
            f"crop {size} does not fit image {img.height}x{img.width} ({img.id})"
        )


def random_crop(img: LabeledImage, size: int, rng: np.random.Generator) -> LabeledImage:
    _check_crop(img, size)
    top = int(rng.integers(0, img.height - size + 1))
    left = int(rng.integers(0, img.width - size + 1))
    return _crop(img, size, top, left)


def center_crop(img: LabeledImage, size: int) -> LabeledImage:
    _check_crop(img, size)
    return _crop(img, size, (img.height - size) // 2, (img.width - size) // 2)


def random_hflip(img: LabeledImage, p: float, rng: np.random.Generator) -> LabeledImage:
    if rng.random() < p:
        return replace(img, pixels=img.pixels[:, ::-1])
    return img


def to_chw(img: LabeledImage) -> np.ndarray:
    return np.ascontiguousarray(img.pixels.transpose(2, 0, 1))


@dataclass(frozen=True)
class Preprocess:
    resize_size: int = 256
    crop_size: int = 224
    flip_prob: float = 0.5

    def __post_init__(self):
        if self.crop_size > self.resize_size:
            raise ConfigurationError(
                f"crop {self.crop_size} is larger than resize {self.resize_size}"
            )

    @classmethod
    def for_crop(cls, crop_size: int, flip_prob: float = 0.5) -> "Preprocess":
        return cls(round(crop_size * 256 / 224), crop_size, flip_prob)

    def train_view(self, img: LabeledImage, rng: np.random.Generator) -> np.ndarray:
        img = random_crop(resize(img, self.resize_size), self.crop_size, rng)
        return to_chw(random_hflip(img, self.flip_prob, rng))

    def eval_view(self, img: LabeledImage) -> np.ndarray:
        return to_chw(center_crop(resize(img, self.resize_size), self.crop_size))


# Files


def read_image(path: str | Path) -> np.ndarray:
    try:
        with Image.open(path) as image:
            rgb = np.asarray(image.convert("RGB"), dtype=np.float64)
    except (OSError, UnidentifiedImageError) as e:
        raise DataError(f"cannot read image {path}: {e}")
    return rgb / 255.0


def write_image(pixels: np.ndarray, path: str | Path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.round(np.clip(pixels, 0.0, 1.0) * 255).astype(np.uint8), "RGB").save(path)


def _image_files(class_dir: Path) -> list[Path]:
    return sorted(
        p for p in class_dir.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES
    )


def load_image_dir(root: str | Path) -> DatasetManifest:
    """Load ``root/{train,test}/<class>/<image>``; labels follow sorted class names."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} is not a directory")

    split_classes = {}
    for split in SPLITS:
        split_dir = root / split
        if not split_dir.is_dir():
            raise DataError(f"dataset {root} has no '{split}' split")
        classes = sorted(p.name for p in split_dir.iterdir() if p.is_dir())
        if not classes:
            raise DataError(f"split '{split}' in {root} contains no class directories")
        split_classes[split] = classes

    class_names = split_classes["train"]
    unknown = sorted(set(split_classes["test"]) - set(class_names))
    if unknown:
        raise DataError(f"split 'test' has classes missing from 'train': {unknown}")

    samples: dict[str, list[LabeledImage]] = {}
    for split in SPLITS:
        samples[split] = []
        for label, name in enumerate(class_names):
            class_dir = root / split / name
            files = _image_files(class_dir) if class_dir.is_dir() else []
            if not files:
                raise DataError(f"class '{name}' has no images in split '{split}' ({class_dir})")
            for path in files:
                samples[split].append(
                    LabeledImage(pixels=read_image(path), label=label, id=f"{split}/{name}/{path.stem}")
                )

    logging.info(
        f"Loaded {len(samples['train'])} train / {len(samples['test'])} test images "
        f"in {len(class_names)} classes from {root}"
    )
    return DatasetManifest(class_names, samples["train"], samples["test"], root=root)


# Synthetic textures


def _jittered(rng: np.random.Generator, base: float, spread: float, jitter: float) -> float:
    return base * (1.0 + spread * jitter * rng.uniform(-1.0, 1.0))


def _oriented(rng, size, jitter):
    y, x = np.mgrid[0:size, 0:size].astype(np.float64)
    theta = jitter * rng.uniform(0.0, math.pi)
    return x * math.cos(theta) + y * math.sin(theta)


def render_texture(
    family: str,
    size: int,
    rng: np.random.Generator,
    band: int = 0,
    jitter: float = 1.0,
    noise: float = 0.05,
) -> np.ndarray:
    """One ``size x size x 3`` texture in [0, 1]; ``jitter=0`` gives the canonical pattern."""
    shrink = BAND_FACTOR**band
    if family == "grating":
        period = _jittered(rng, 8.0, 0.25, jitter) / shrink
        coord = _oriented(rng, size, jitter)
        phase = jitter * rng.uniform(0.0, 2 * math.pi)
        value = 0.5 + 0.5 * np.sin(2 * math.pi * coord / period + phase)
    elif family == "checkerboard":
        cell = _jittered(rng, 3.0, 0.25, jitter) / shrink
        y, x = np.mgrid[0:size, 0:size].astype(np.float64)
        oy, ox = jitter * rng.uniform(0.0, 2 * cell, size=2)
        value = (np.floor((x + ox) / cell) + np.floor((y + oy) / cell)) % 2
    elif family == "noise":
        sigma = _jittered(rng, 2.5, 0.3, jitter) / shrink
        white = rng.standard_normal((size, size))
        freq = np.fft.fftfreq(size)
        envelope = np.exp(-2 * (math.pi * sigma) ** 2 * (freq[:, None] ** 2 + freq[None, :] ** 2))
        smooth = np.real(np.fft.ifft2(np.fft.fft2(white) * envelope))
        smooth = (smooth - smooth.mean()) / (smooth.std() + 1e-12)
        value = np.clip(0.5 + 0.18 * smooth, 0.0, 1.0)
    elif family == "stripes":
        period = _jittered(rng, 20.0, 0.2, jitter) / shrink
        duty = 0.5 + 0.15 * jitter * rng.uniform(-1.0, 1.0)
        coord = _oriented(rng, size, jitter)
        phase = jitter * rng.uniform(0.0, 1.0)
        value = (np.mod(coord / period + phase, 1.0) < duty).astype(np.float64)
    else:
        raise ConfigurationError(f"unknown texture family '{family}'")

    low = jitter * rng.uniform(0.0, 0.3, size=3)
    high = 1.0 - jitter * rng.uniform(0.0, 0.3, size=3)
    pixels = low + value[:, :, None] * (high - low)
    if noise > 0:
        pixels = pixels + rng.normal(0.0, noise, size=pixels.shape)
    return np.clip(pixels, 0.0, 1.0)


def synth_class_names(classes: int) -> list[str]:
    names = []
    for index in range(classes):
        family, band = FAMILIES[index % len(FAMILIES)], index // len(FAMILIES)
        names.append(family if band == 0 else f"{family}{band + 1}")
    return names


def synth_textures(
    classes: int = 4,
    per_class: int = 50,
    size: int = 64,
    seed: int = 0,
    test_per_class: int = 20,
    noise: float = 0.05,
) -> DatasetManifest:
    if size < 32:
        raise ConfigurationError(f"synthetic textures need size >= 32, got {size}")
    if classes < 1 or per_class < 1 or test_per_class < 0:
        raise ConfigurationError("class and sample counts must be positive")

    rng = np.random.default_rng(seed)
    names = synth_class_names(classes)
    splits: dict[str, list[LabeledImage]] = {"train": [], "test": []}
    for split, count in (("train", per_class), ("test", test_per_class)):
        for label, name in enumerate(names):
            family, band = FAMILIES[label % len(FAMILIES)], label // len(FAMILIES)
            for index in range(count):
                pixels = render_texture(family, size, rng, band=band, noise=noise)
                splits[split].append(
                    LabeledImage(pixels=pixels, label=label, id=f"{name}/{split}_{index:04d}")
                )

    logging.debug(
        f"Generated synthetic textures: {classes} classes, {per_class}+{test_per_class} per class, {size}px",
        extra={"seed": seed},
    )
    return DatasetManifest(names, splits["train"], splits["test"])


def export_dataset(manifest: DatasetManifest, root: str | Path) -> int:
    """Write a manifest to ``root/{train,test}/<class>/<name>.png``; returns the file count."""
    root = Path(root)
    written = 0
    for split in SPLITS:
        for sample in manifest.split(split):
            parts = sample.id.split("/")
            stem = parts[-1]
            class_name = parts[-2] if len(parts) > 1 else manifest.class_names[sample.label]
            write_image(sample.pixels, root / split / class_name / f"{stem}.png")
            written += 1
    logging.info(f"Exported {written} images to {root}")
    return written
