"""Image/mask ingestion and the synthetic ellipse dataset."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
from PIL import Image

from .nn import bilinear_matrix

IMAGE_SUFFIXES = (".png", ".pgm", ".ppm", ".pnm")


class IngestionError(RuntimeError):
    pass


@dataclass
class Sample:
    id: str
    image: np.ndarray  # [3, s, s] float in [0, 1]
    mask: np.ndarray  # [1, s, s] in {0, 1}
    split: Optional[str] = None


def read_raster(path) -> np.ndarray:
    """8-bit gray or RGB raster as uint8 [h, w] or [h, w, 3]."""
    path = Path(path)
    try:
        with Image.open(path) as im:
            if im.mode in ("L", "RGB"):
                arr = np.asarray(im)
            elif im.mode in ("P", "RGBA", "LA", "1"):
                arr = np.asarray(im.convert("RGB" if im.mode in ("P", "RGBA") else "L"))
            else:
                raise IngestionError(f"{path}: unsupported pixel mode {im.mode} (need 8-bit gray/RGB)")
    except IngestionError:
        raise
    except (OSError, ValueError) as exc:
        raise IngestionError(f"{path}: unreadable image ({exc})") from exc
    return arr


def write_mask_png(mask: np.ndarray, path) -> None:
    m = np.asarray(mask).reshape(mask.shape[-2:])
    Image.fromarray(np.where(m > 0, 255, 0).astype(np.uint8), mode="L").save(path)


def resize_bilinear_np(img: np.ndarray, size: int) -> np.ndarray:
    """[c, h, w] -> [c, size, size], half-pixel bilinear (same kernel as the network's upsampler)."""
    h, w = img.shape[-2:]
    ah = bilinear_matrix(h, size)
    aw = bilinear_matrix(w, size)
    return ah @ img.astype(np.float64) @ aw.T


def resize_nearest_np(img: np.ndarray, size: int) -> np.ndarray:
    h, w = img.shape[-2:]
    rows = np.minimum(((np.arange(size) + 0.5) * h / size).astype(int), h - 1)
    cols = np.minimum(((np.arange(size) + 0.5) * w / size).astype(int), w - 1)
    return img[..., rows[:, None], cols[None, :]]


def image_to_tensor(arr: np.ndarray, img_size: int) -> np.ndarray:
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    chw = arr.transpose(2, 0, 1).astype(np.float64) / 255.0
    if chw.shape[1:] != (img_size, img_size):
        chw = resize_bilinear_np(chw, img_size)
    return chw.astype(np.float32)


def load_sample(image_path, mask_path, img_size: int, sample_id: Optional[str] = None) -> Sample:
    image_path, mask_path = Path(image_path), Path(mask_path)
    if not mask_path.exists():
        raise IngestionError(f"{image_path}: missing mask {mask_path}")
    img = read_raster(image_path)
    msk = read_raster(mask_path)
    if msk.ndim == 3:
        msk = msk.max(axis=2)
    if img.shape[:2] != msk.shape[:2]:
        raise IngestionError(f"{mask_path}: mask size {msk.shape[:2]} != image size {img.shape[:2]}")
    mask = (resize_nearest_np(msk[None], img_size) >= 128).astype(np.float32)
    return Sample(sample_id or image_path.stem, image_to_tensor(img, img_size), mask)


def load_dataset(root, img_size: int) -> List[Sample]:
    """``root/images/<name>.*`` paired with ``root/masks/<name>.*``."""
    root = Path(root)
    img_dir, mask_dir = root / "images", root / "masks"
    if not img_dir.is_dir() or not mask_dir.is_dir():
        raise IngestionError(f"{root}: expected images/ and masks/ subdirectories")
    masks = {p.stem: p for p in mask_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES}
    samples = []
    for p in sorted(img_dir.iterdir()):
        if p.suffix.lower() not in IMAGE_SUFFIXES:
            continue
        if p.stem not in masks:
            raise IngestionError(f"{p}: no mask named {p.stem}.* in {mask_dir}")
        samples.append(load_sample(p, masks[p.stem], img_size, p.stem))
    if not samples:
        raise IngestionError(f"{img_dir}: no images found")
    return samples


def _smooth_noise(rng, size: int, cells: int) -> np.ndarray:
    coarse = rng.random((3, cells, cells))
    return resize_bilinear_np(coarse, size)


def synth_dataset(n: int, img_size: int = 128, seed: int = 0) -> List[Sample]:
    """Images with 1-3 filled ellipses on textured noise; the mask is the exact ellipse union."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:img_size, 0:img_size] + 0.5
    out = []
    for i in range(n):
        bg = 0.25 + 0.35 * _smooth_noise(rng, img_size, 6) + 0.1 * rng.random((3, img_size, img_size))
        mask = np.zeros((img_size, img_size), dtype=bool)
        for _ in range(rng.integers(1, 4)):
            cy, cx = rng.uniform(0.2, 0.8, size=2) * img_size
            ay, ax = rng.uniform(0.08, 0.22, size=2) * img_size
            th = rng.uniform(0, np.pi)
            dy, dx = yy - cy, xx - cx
            u = dx * np.cos(th) + dy * np.sin(th)
            v = -dx * np.sin(th) + dy * np.cos(th)
            mask |= (u / ax) ** 2 + (v / ay) ** 2 <= 1.0
        tint = rng.uniform(0.25, 0.4, size=3) * rng.choice([-1.0, 1.0])
        img = bg + mask[None] * tint[:, None, None]
        out.append(Sample(f"synth{i:04d}", np.clip(img, 0, 1).astype(np.float32),
                          mask[None].astype(np.float32)))
    return out
