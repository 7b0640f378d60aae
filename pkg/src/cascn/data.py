"""Dataset loading, resizing, augmentation, splitting, and synthesis.

Disk layout: ``<root>/images/<id>.{png|bmp}`` with a matching mask under
``<root>/masks/``. Masks are binarized at 128 on load. All sample
transforms apply one geometric operation to image and mask together so the
pair can never desynchronize.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import ContractError, DataError

IMAGE_EXTENSIONS = (".png", ".bmp")
AUGMENT_OPS = ("rotate", "hflip", "vflip", "dflip")


@dataclass
class Sample:
    """One RGB image with its binary mask."""

    image: np.ndarray  # [H, W, 3] uint8
    mask: np.ndarray   # [H, W] uint8 in {0, 1}
    id: str

    def __post_init__(self):
        if self.image.shape[:2] != self.mask.shape:
            raise DataError(
                f"sample '{self.id}': image dims {self.image.shape[:2]} do "
                f"not match mask dims {self.mask.shape}")
        if not np.all((self.mask == 0) | (self.mask == 1)):
            raise DataError(f"sample '{self.id}': mask is not binary")

    @property
    def size(self) -> tuple[int, int]:
        return self.mask.shape


def load_image(path) -> np.ndarray:
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert("RGB"))
    except (OSError, SyntaxError) as exc:
        raise DataError(f"cannot read image '{path}': {exc}") from exc


def _load_mask(path) -> np.ndarray:
    try:
        with Image.open(path) as img:
            gray = np.asarray(img.convert("L"))
    except (OSError, SyntaxError) as exc:
        raise DataError(f"cannot read mask '{path}': {exc}") from exc
    return (gray >= 128).astype(np.uint8)


def load_dataset(root_dir) -> list[Sample]:
    """Read every image/mask pair under root_dir, sorted by id."""
    root = Path(root_dir)
    image_dir = root / "images"
    mask_dir = root / "masks"
    if not image_dir.is_dir() or not mask_dir.is_dir():
        raise DataError(f"dataset root '{root}' must contain images/ and masks/")
    image_paths = sorted(p for p in image_dir.iterdir()
                         if p.suffix.lower() in IMAGE_EXTENSIONS)
    if not image_paths:
        raise DataError(f"no images found under '{image_dir}'")
    samples = []
    for path in image_paths:
        mask_path = None
        for ext in IMAGE_EXTENSIONS:
            candidate = mask_dir / (path.stem + ext)
            if candidate.exists():
                mask_path = candidate
                break
        if mask_path is None:
            raise DataError(f"missing mask for image id '{path.stem}'")
        samples.append(Sample(image=load_image(path), mask=_load_mask(mask_path),
                              id=path.stem))
    return samples


def save_mask_png(path, mask: np.ndarray) -> None:
    """Write a {0,1} mask as an 8-bit 0/255 PNG."""
    Image.fromarray((np.asarray(mask) * 255).astype(np.uint8), "L").save(path)


def save_sample(sample: Sample, root_dir) -> None:
    root = Path(root_dir)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    Image.fromarray(sample.image, "RGB").save(root / "images" / f"{sample.id}.png")
    save_mask_png(root / "masks" / f"{sample.id}.png", sample.mask)


def resize(sample: Sample, target: tuple[int, int]) -> Sample:
    """Bilinear image / nearest-neighbor mask resize to (H, W)."""
    h, w = target
    if sample.size == (h, w):
        return Sample(sample.image.copy(), sample.mask.copy(), sample.id)
    image = np.asarray(Image.fromarray(sample.image).resize(
        (w, h), Image.BILINEAR))
    mask = np.asarray(Image.fromarray(sample.mask).resize(
        (w, h), Image.NEAREST))
    return Sample(image=image, mask=mask, id=sample.id)


def augment(sample: Sample, op: str, rng: np.random.Generator,
            rotate_degrees: float = 25.0) -> Sample:
    """Apply one geometric augmentation to the image/mask pair.

    hflip mirrors columns, vflip mirrors rows, dflip transposes (non-square
    samples are resized back to their original dims so batch shapes stay
    constant), rotate draws an angle uniformly from +-rotate_degrees with
    reflection padding.
    """
    if op == "hflip":
        return Sample(sample.image[:, ::-1].copy(), sample.mask[:, ::-1].copy(),
                      sample.id)
    if op == "vflip":
        return Sample(sample.image[::-1].copy(), sample.mask[::-1].copy(),
                      sample.id)
    if op == "dflip":
        flipped = Sample(np.ascontiguousarray(sample.image.transpose(1, 0, 2)),
                         np.ascontiguousarray(sample.mask.T), sample.id)
        if flipped.size != sample.size:
            flipped = resize(flipped, sample.size)
        return flipped
    if op == "rotate":
        angle = float(rng.uniform(-rotate_degrees, rotate_degrees))
        image = ndimage.rotate(sample.image, angle, axes=(1, 0),
                               reshape=False, order=1, mode="reflect")
        mask = ndimage.rotate(sample.mask, angle, axes=(1, 0),
                              reshape=False, order=0, mode="reflect")
        return Sample(image=image, mask=mask, id=sample.id)
    raise ContractError(f"unknown augmentation '{op}'; expected one of "
                        f"{AUGMENT_OPS}")


@dataclass(frozen=True)
class AugmentationPolicy:
    """Which augmentations the training loop may draw, each applied with
    probability 1/2 per sample."""

    rotate: bool = False
    hflip: bool = False
    vflip: bool = False
    dflip: bool = False
    rotate_degrees: float = 25.0

    @staticmethod
    def none() -> "AugmentationPolicy":
        return AugmentationPolicy()

    @staticmethod
    def full(rotate_degrees: float = 25.0) -> "AugmentationPolicy":
        return AugmentationPolicy(True, True, True, True, rotate_degrees)

    @staticmethod
    def single(op: str, rotate_degrees: float = 25.0) -> "AugmentationPolicy":
        if op not in AUGMENT_OPS:
            raise ContractError(f"unknown augmentation '{op}'")
        return AugmentationPolicy(rotate_degrees=rotate_degrees,
                                  **{op: True})

    def enabled_ops(self) -> tuple[str, ...]:
        return tuple(op for op in AUGMENT_OPS if getattr(self, op))

    def apply(self, sample: Sample, rng: np.random.Generator) -> Sample:
        for op in self.enabled_ops():
            if rng.random() < 0.5:
                sample = augment(sample, op, rng,
                                 rotate_degrees=self.rotate_degrees)
        return sample


@dataclass(frozen=True)
class SplitSpec:
    ratios: tuple[float, float, float] = (0.7, 0.1, 0.2)
    seed: int = 0

    def __post_init__(self):
        if len(self.ratios) != 3 or any(r < 0 for r in self.ratios):
            raise ContractError(f"ratios must be three non-negative values, "
                                f"got {self.ratios}")
        if abs(sum(self.ratios) - 1.0) > 1e-9:
            raise ContractError(f"ratios must sum to 1, got {self.ratios}")


def split(samples: list[Sample], spec: SplitSpec
          ) -> tuple[list[Sample], list[Sample], list[Sample]]:
    """Deterministic shuffle then floor-sized train/val splits, rest test.

    Datasets of at least 10 samples must yield three non-empty subsets.
    """
    n = len(samples)
    if n == 0:
        raise ContractError("cannot split an empty dataset")
    order = np.random.default_rng(spec.seed).permutation(n)
    n_train = int(np.floor(spec.ratios[0] * n))
    n_val = int(np.floor(spec.ratios[1] * n))
    train = [samples[i] for i in order[:n_train]]
    val = [samples[i] for i in order[n_train:n_train + n_val]]
    test = [samples[i] for i in order[n_train + n_val:]]
    if n >= 10 and (not train or not val or not test):
        raise ContractError(
            f"ratios {spec.ratios} leave an empty split for {n} samples")
    return train, val, test


def synth_dataset(n: int, size: tuple[int, int], seed: int) -> list[Sample]:
    """Synthetic lesions: textured skin-tone background with one darker,
    blur-edged ellipse; the mask is the exact ellipse interior."""
    h, w = size
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:h, 0:w]
    base_tone = np.array([0.85, 0.62, 0.52])
    lesion_tone = np.array([0.42, 0.26, 0.22])
    samples = []
    for i in range(n):
        cy = rng.uniform(0.4, 0.6) * h
        cx = rng.uniform(0.4, 0.6) * w
        r1 = rng.uniform(0.16, 0.30) * min(h, w)
        r2 = rng.uniform(0.16, 0.30) * min(h, w)
        theta = rng.uniform(0.0, np.pi)
        brightness = rng.uniform(0.85, 1.1)
        texture = ndimage.gaussian_filter(rng.normal(size=(h, w)),
                                          sigma=max(min(h, w) / 12.0, 1.0))
        texture = 0.06 * texture / max(np.abs(texture).max(), 1e-12)

        ct, st = np.cos(theta), np.sin(theta)
        u = (xx - cx) * ct + (yy - cy) * st
        v = -(xx - cx) * st + (yy - cy) * ct
        mask = ((u / r2) ** 2 + (v / r1) ** 2 <= 1.0).astype(np.uint8)

        alpha = ndimage.gaussian_filter(mask.astype(np.float64), sigma=1.5)
        bg = base_tone[None, None, :] * brightness + texture[:, :, None]
        fg = lesion_tone[None, None, :] * brightness + 0.5 * texture[:, :, None]
        img = bg * (1.0 - alpha[:, :, None]) + fg * alpha[:, :, None]
        image = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
        samples.append(Sample(image=image, mask=mask, id=f"synth{i:03d}"))
    return samples
