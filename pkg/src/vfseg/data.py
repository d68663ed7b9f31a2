"""Synthetic road scenes, PNG ingestion, and the per-party sample stores.

The generator is a desk-scale stand-in for a dashcam dataset: a
textured ground/background with a curved road ribbon of distinct
texture running roughly top to bottom. Everything is deterministic in
(n, size, seed).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataError, ValidationError
from .nn.params import Tensor

ROAD_COLOR = (128, 64, 128)
BACKGROUND_COLOR = (0, 0, 0)

_GEN_TAG = 0xDA7A


def _check_size(size: int, what: str = "size") -> None:
    if size <= 0 or size % 32 != 0:
        raise ValidationError(f"{what} must be a positive multiple of 32, got {size}")


@dataclass
class SamplePair:
    """One aligned training example: image on the bottom party, mask on top."""

    id: int
    image: Tensor
    mask: Tensor

    def __post_init__(self) -> None:
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise ValidationError(f"image must be (3, H, W), got {self.image.shape}")
        if self.mask.ndim != 3 or self.mask.shape[0] != 1:
            raise ValidationError(f"mask must be (1, H, W), got {self.mask.shape}")
        if self.image.shape[1:] != self.mask.shape[1:]:
            raise ValidationError(
                f"image extent {self.image.shape[1:]} != mask extent {self.mask.shape[1:]}")
        if not np.all((self.mask == 0.0) | (self.mask == 1.0)):
            raise ValidationError("mask must be binary")


def _smooth_noise(rng: np.random.Generator, size: int, scale: int) -> Tensor:
    """Low-frequency noise field in [0, 1] via coarse grid + bilinear blowup."""
    coarse = rng.random((scale, scale))
    img = Image.fromarray(coarse.astype(np.float32), mode="F")
    img = img.resize((size, size), Image.BILINEAR)
    return np.asarray(img, dtype=np.float64)


def _ribbon(rng: np.random.Generator, size: int) -> tuple[Tensor, Tensor]:
    """Road footprint mask plus signed distance-from-centre (for shading)."""
    rows = np.arange(size, dtype=np.float64)
    amp = rng.uniform(0.05, 0.22) * size
    freq = rng.uniform(0.5, 1.6)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    drift = rng.uniform(-0.25, 0.25)
    center = size / 2.0 + amp * np.sin(2.0 * np.pi * freq * rows / size + phase)
    center += drift * (rows - size / 2.0)
    center = np.clip(center, 0.18 * size, 0.82 * size)
    base_w = rng.uniform(0.10, 0.42) * size
    wobble = rng.uniform(0.0, 0.25) * base_w
    width = base_w + wobble * np.sin(2.0 * np.pi * rng.uniform(0.4, 1.2) * rows / size
                                     + rng.uniform(0.0, 2.0 * np.pi))
    cols = np.arange(size, dtype=np.float64)
    dist = cols[None, :] - center[:, None]
    mask = (np.abs(dist) <= width[:, None] / 2.0).astype(np.float64)
    return mask, dist / size


def _render_scene(rng: np.random.Generator, size: int) -> tuple[Tensor, Tensor]:
    mask, dist = _ribbon(rng, size)
    field = _smooth_noise(rng, size, 6)
    grain = rng.random((size, size))

    # Background: green/brown terrain with patchy brightness.
    bg_tint = rng.uniform(0.35, 0.65, size=3)
    bg = np.empty((3, size, size))
    bg[0] = bg_tint[0] * (0.55 + 0.45 * field) + 0.10 * grain
    bg[1] = bg_tint[1] * (0.70 + 0.30 * field) + 0.12 * grain
    bg[2] = bg_tint[2] * (0.40 + 0.30 * field) + 0.08 * grain

    # Road: flat grey with longitudinal banding and shading toward edges.
    rows = np.arange(size, dtype=np.float64)
    banding = 0.06 * np.sin(2.0 * np.pi * rows / rng.uniform(6.0, 14.0))[:, None]
    road_level = rng.uniform(0.45, 0.7)
    road = road_level * (0.9 + 0.1 * grain) + banding - 0.25 * np.abs(dist)
    road3 = np.stack([road, road, road * rng.uniform(0.95, 1.05)])

    m = mask[None, :, :]
    image = np.clip(bg * (1.0 - m) + road3 * m, 0.0, 1.0)
    return image, mask[None, :, :]


def gen_synthetic(n: int, size: int, seed: int) -> list[SamplePair]:
    """Deterministic synthetic scenes; every mask's road fraction lands
    in [0.05, 0.6] by construction (resampling the scene otherwise)."""
    _check_size(size)
    if n <= 0:
        raise ValidationError(f"n must be positive, got {n}")
    pairs = []
    for i in range(n):
        rng = np.random.Generator(np.random.PCG64(
            np.random.SeedSequence([seed, i, _GEN_TAG])))
        for _attempt in range(200):
            image, mask = _render_scene(rng, size)
            frac = float(mask.mean())
            if 0.05 <= frac <= 0.6:
                break
        else:
            raise DataError(f"could not draw a valid scene for sample {i}")
        pairs.append(SamplePair(id=i, image=image, mask=mask))
    return pairs


def resize_pair(pair: SamplePair, target: int) -> SamplePair:
    """Bilinear for the image, nearest for the mask so it stays binary."""
    _check_size(target, "target")
    h = pair.image.shape[1]
    if h == target and pair.image.shape[2] == target:
        return pair
    channels = []
    for c in range(3):
        img = Image.fromarray(pair.image[c].astype(np.float32), mode="F")
        img = img.resize((target, target), Image.BILINEAR)
        channels.append(np.asarray(img, dtype=np.float64))
    image = np.clip(np.stack(channels), 0.0, 1.0)
    m = Image.fromarray((pair.mask[0] > 0.5).astype(np.uint8), mode="L")
    m = m.resize((target, target), Image.NEAREST)
    mask = np.asarray(m, dtype=np.float64)[None, :, :]
    return SamplePair(id=pair.id, image=image, mask=mask)


def _to_rgb8(image: Tensor) -> Image.Image:
    arr = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    return Image.fromarray(arr.transpose(1, 2, 0), mode="RGB")


def _mask_to_label(mask: Tensor) -> Image.Image:
    h, w = mask.shape[1:]
    arr = np.empty((h, w, 3), dtype=np.uint8)
    arr[...] = BACKGROUND_COLOR
    arr[mask[0] > 0.5] = ROAD_COLOR
    return Image.fromarray(arr, mode="RGB")


def write_dataset(pairs: list[SamplePair], out_dir: str | Path,
                  meta: dict | None = None) -> None:
    """images/<id>.png and labels/<id>.png, plus a small manifest."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    for pair in pairs:
        _to_rgb8(pair.image).save(out / "images" / f"{pair.id}.png")
        _mask_to_label(pair.mask).save(out / "labels" / f"{pair.id}.png")
    manifest = {"count": len(pairs), "ids": [p.id for p in pairs]}
    if meta:
        manifest.update(meta)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


def load_image(path: str | Path) -> Tensor:
    try:
        with Image.open(path) as img:
            rgb = img.convert("RGB")
            arr = np.asarray(rgb, dtype=np.float64) / 255.0
    except OSError as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    return arr.transpose(2, 0, 1)


def load_mask(path: str | Path, road_color: tuple[int, int, int] = ROAD_COLOR) -> Tensor:
    try:
        with Image.open(path) as img:
            rgb = np.asarray(img.convert("RGB"))
    except OSError as exc:
        raise DataError(f"cannot read label {path}: {exc}") from exc
    match = np.all(rgb == np.asarray(road_color, dtype=np.uint8), axis=-1)
    return match.astype(np.float64)[None, :, :]


def load_pair(image_path: str | Path, mask_path: str | Path,
              road_color: tuple[int, int, int] = ROAD_COLOR,
              sample_id: int | None = None) -> SamplePair:
    image = load_image(image_path)
    mask = load_mask(mask_path, road_color)
    if image.shape[1:] != mask.shape[1:]:
        raise DataError(
            f"image {image_path} is {image.shape[1:]} but label is {mask.shape[1:]}")
    if sample_id is None:
        sample_id = int(Path(image_path).stem)
    return SamplePair(id=sample_id, image=image, mask=mask)


def _scan_ids(directory: Path) -> dict[int, Path]:
    if not directory.is_dir():
        raise DataError(f"not a directory: {directory}")
    found: dict[int, Path] = {}
    for path in sorted(directory.glob("*.png")):
        try:
            sample_id = int(path.stem)
        except ValueError:
            continue
        if sample_id in found:
            raise DataError(f"duplicate sample id {sample_id} in {directory}")
        found[sample_id] = path
    return found


class ImageStore:
    """Bottom-party data access: images by id, resized to the model input."""

    def __init__(self, images_dir: str | Path, input_size: int) -> None:
        _check_size(input_size, "input_size")
        self._paths = _scan_ids(Path(images_dir))
        self._size = input_size
        self._cache: dict[int, Tensor] = {}

    def ids(self) -> list[int]:
        return sorted(self._paths)

    def _get(self, sample_id: int) -> Tensor:
        if sample_id not in self._cache:
            if sample_id not in self._paths:
                raise DataError(f"no image for sample id {sample_id}")
            image = load_image(self._paths[sample_id])
            pair = SamplePair(sample_id, image, np.zeros((1,) + image.shape[1:]))
            self._cache[sample_id] = resize_pair(pair, self._size).image
        return self._cache[sample_id]

    def batch(self, ids) -> Tensor:
        return np.stack([self._get(int(i)) for i in ids])


class LabelStore:
    """Top-party data access: binary masks by id, resized to the model input."""

    def __init__(self, labels_dir: str | Path, input_size: int,
                 road_color: tuple[int, int, int] = ROAD_COLOR) -> None:
        _check_size(input_size, "input_size")
        self._paths = _scan_ids(Path(labels_dir))
        self._size = input_size
        self._road_color = road_color
        self._cache: dict[int, Tensor] = {}

    def ids(self) -> list[int]:
        return sorted(self._paths)

    def _get(self, sample_id: int) -> Tensor:
        if sample_id not in self._cache:
            if sample_id not in self._paths:
                raise DataError(f"no label for sample id {sample_id}")
            mask = load_mask(self._paths[sample_id], self._road_color)
            pair = SamplePair(sample_id, np.zeros((3,) + mask.shape[1:]), mask)
            self._cache[sample_id] = resize_pair(pair, self._size).mask
        return self._cache[sample_id]

    def batch(self, ids) -> Tensor:
        return np.stack([self._get(int(i)) for i in ids])


class MemoryImageStore:
    """In-memory bottom store, mostly for tests and the "both" role."""

    def __init__(self, pairs: list[SamplePair], input_size: int) -> None:
        _check_size(input_size, "input_size")
        self._images = {p.id: resize_pair(p, input_size).image for p in pairs}

    def ids(self) -> list[int]:
        return sorted(self._images)

    def batch(self, ids) -> Tensor:
        try:
            return np.stack([self._images[int(i)] for i in ids])
        except KeyError as exc:
            raise DataError(f"no image for sample id {exc.args[0]}") from exc


class MemoryLabelStore:
    def __init__(self, pairs: list[SamplePair], input_size: int) -> None:
        _check_size(input_size, "input_size")
        self._masks = {p.id: resize_pair(p, input_size).mask for p in pairs}

    def ids(self) -> list[int]:
        return sorted(self._masks)

    def batch(self, ids) -> Tensor:
        try:
            return np.stack([self._masks[int(i)] for i in ids])
        except KeyError as exc:
            raise DataError(f"no label for sample id {exc.args[0]}") from exc
