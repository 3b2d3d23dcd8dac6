"""Synthetic dual-domain images, patch cropping and photometric augmentation."""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image
from scipy import ndimage

from darcnn.core import (
    Domain, ImageSample, InstanceAnnotation, Split, masks_from_label_map, rng_for, tight_box,
)
from darcnn.errors import ConfigError, ConsistencyError, GenerationError, SizeError

SPEC_VERSION = 1
_MAX_PLACEMENT_TRIES = 200


@dataclass(frozen=True)
class SyntheticDomainSpec:
    kind: str = "target_blobs"  # source_shapes | target_blobs
    image_size: tuple = (64, 64)
    instances_per_image: tuple = (3, 6)
    background: str = "homogeneous_textured"  # split_gradient | homogeneous_textured
    noise_std: float = 6.0
    invert_intensity: bool = False
    # shape and intensity ranges; not part of the minimal contract, but needed
    # to dial the domain gap
    radius_range: tuple = (4.0, 9.0)
    background_range: tuple = (40.0, 90.0)
    contrast_range: tuple = (60.0, 140.0)
    edge_softness: float = 0.15
    texture_sigma: float = 1.5
    split: str = "train"

    def __post_init__(self):
        if self.kind not in ("source_shapes", "target_blobs"):
            raise ConfigError(f"unknown synthetic kind {self.kind!r}")
        if self.background not in ("split_gradient", "homogeneous_textured"):
            raise ConfigError(f"unknown background {self.background!r}")
        lo, hi = self.instances_per_image
        if lo < 0 or hi < lo:
            raise ConfigError("instances_per_image range is empty")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be >= 0")
        if min(self.image_size) < 16:
            raise ConfigError("image_size must be at least 16x16")

    @property
    def domain(self) -> Domain:
        return Domain.SOURCE if self.kind == "source_shapes" else Domain.TARGET


def source_spec(**kw) -> SyntheticDomainSpec:
    """Default labelled source domain: sharp bright shapes on split backgrounds."""
    base = dict(kind="source_shapes", background="split_gradient", noise_std=4.0,
                radius_range=(4.0, 9.0), background_range=(10.0, 80.0),
                contrast_range=(90.0, 170.0), edge_softness=0.0)
    base.update(kw)
    return SyntheticDomainSpec(**base)


def target_spec(**kw) -> SyntheticDomainSpec:
    """Default unlabelled target domain: soft dim blobs on a textured background."""
    base = dict(kind="target_blobs", background="homogeneous_textured", noise_std=8.0,
                radius_range=(4.0, 9.0), background_range=(90.0, 140.0),
                contrast_range=(35.0, 70.0), edge_softness=0.25, invert_intensity=False)
    base.update(kw)
    return SyntheticDomainSpec(**base)


# --------------------------------------------------------------------------
# spec files: versioned key-value format
# --------------------------------------------------------------------------

def _parse_value(raw: str, default):
    if isinstance(default, bool):
        return raw.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(default, tuple):
        parts = [p for p in raw.replace(",", " ").split() if p]
        kind = type(default[0]) if default else float
        return tuple(kind(float(p)) if kind is int else kind(p) for p in parts)
    if isinstance(default, int):
        return int(float(raw))
    if isinstance(default, float):
        return float(raw)
    return raw.strip()


def load_synthetic_spec(path) -> SyntheticDomainSpec:
    parser = configparser.ConfigParser()
    if not parser.read(path, encoding="utf-8"):
        raise ConfigError(f"cannot read spec file {path}")
    if "synthetic" not in parser:
        raise ConfigError("spec file needs a [synthetic] section")
    sec = parser["synthetic"]
    version = int(sec.get("version", SPEC_VERSION))
    if version != SPEC_VERSION:
        raise ConfigError(f"unsupported synthetic spec version {version}")
    kind = sec.get("kind", "target_blobs").strip()
    template = source_spec() if kind == "source_shapes" else target_spec()
    values = {}
    for f in fields(SyntheticDomainSpec):
        if f.name in sec:
            values[f.name] = _parse_value(sec[f.name], getattr(template, f.name))
    return (source_spec if kind == "source_shapes" else target_spec)(**values)


def save_synthetic_spec(spec: SyntheticDomainSpec, path) -> None:
    parser = configparser.ConfigParser()
    sec = {"version": str(SPEC_VERSION)}
    for f in fields(spec):
        v = getattr(spec, f.name)
        sec[f.name] = " ".join(str(x) for x in v) if isinstance(v, tuple) else str(v)
    parser["synthetic"] = sec
    with open(path, "w", encoding="utf-8") as fh:
        parser.write(fh)


# --------------------------------------------------------------------------
# generation
# --------------------------------------------------------------------------

def _background(spec: SyntheticDomainSpec, rng: np.random.Generator) -> np.ndarray:
    h, w = spec.image_size
    lo, hi = spec.background_range
    if spec.background == "homogeneous_textured":
        base = rng.uniform(lo, hi)
        noise = rng.standard_normal((h, w))
        if spec.texture_sigma > 0:
            noise = ndimage.gaussian_filter(noise, spec.texture_sigma, mode="reflect")
        noise -= noise.mean()
        sd = noise.std()
        if sd > 0 and spec.noise_std > 0:
            noise *= spec.noise_std / sd
        else:
            noise[:] = 0.0
        return base + noise
    # split_gradient: two regions separated by a random line, each with its
    # own linear ramp (sky / ground style)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    theta = rng.uniform(-0.5, 0.5)
    cut = rng.uniform(0.3, 0.7) * h
    upper = (yy - cut) < np.tan(theta) * (xx - w / 2)
    out = np.empty((h, w))
    for region in (upper, ~upper):
        a, b = rng.uniform(lo, hi, size=2)
        ramp = a + (b - a) * (yy / max(h - 1, 1))
        out[region] = ramp[region]
    if spec.noise_std > 0:
        out += rng.normal(0.0, spec.noise_std, size=(h, w))
    return out


def _shape_field(kind: str, spec: SyntheticDomainSpec, rng, cy, cx, r, yy, xx):
    """Normalised radial coordinate: <= 1 inside the shape."""
    if kind == "target_blobs":
        ecc = rng.uniform(0.55, 1.0)
        ang = rng.uniform(0, math.pi)
        dy, dx = yy - cy, xx - cx
        u = (dx * math.cos(ang) + dy * math.sin(ang)) / r
        v = (-dx * math.sin(ang) + dy * math.cos(ang)) / (r * ecc)
        return np.sqrt(u * u + v * v)
    shape = rng.integers(0, 3)
    dy, dx = (yy - cy) / r, (xx - cx) / r
    if shape == 0:  # rectangle
        ar = rng.uniform(0.5, 1.0)
        return np.maximum(np.abs(dx), np.abs(dy) / ar)
    if shape == 1:  # ellipse
        ar = rng.uniform(0.5, 1.0)
        return np.sqrt(dx * dx + (dy / ar) ** 2)
    # triangle pointing up: intersection of three half planes
    return np.maximum.reduce([dy, -0.5 * dy + 0.866 * dx - 0.1, -0.5 * dy - 0.866 * dx - 0.1]) * 2.0


def _generate_one(spec: SyntheticDomainSpec, seed: int, index: int) -> ImageSample:
    rng = rng_for(seed, "synthetic", spec.kind, index)
    h, w = spec.image_size
    img = _background(spec, rng)
    lo, hi = spec.instances_per_image
    n = int(rng.integers(lo, hi + 1))
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    occupied = np.zeros((h, w), dtype=bool)
    annotations = []
    tries = 0
    while len(annotations) < n:
        tries += 1
        if tries > _MAX_PLACEMENT_TRIES * max(n, 1):
            raise GenerationError(
                f"could not place {n} instances in a {h}x{w} image after {tries - 1} tries")
        r = rng.uniform(*spec.radius_range)
        cy = rng.uniform(r, h - r)
        cx = rng.uniform(r, w - r)
        dist = _shape_field(spec.kind, spec, rng, cy, cx, r, yy, xx)
        mask = dist <= 1.0
        if mask.sum() < 6:
            continue
        # one-pixel gap so instances never touch
        if (ndimage.binary_dilation(mask) & occupied).any():
            continue
        occupied |= mask
        contrast = rng.uniform(*spec.contrast_range)
        if spec.edge_softness > 0:
            # soft ramp inside the instance only, so background pixels stay exact
            profile = mask / (1.0 + np.exp(-(1.0 - dist) / spec.edge_softness))
        else:
            profile = mask.astype(np.float64)
        img = img + contrast * profile
        annotations.append(InstanceAnnotation.from_mask(len(annotations) + 1, mask))
    img = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    if spec.invert_intensity:
        img = 255 - img
    return ImageSample(f"{spec.kind}_{seed}_{index:05d}", img, spec.domain,
                       annotations=annotations, split=spec.split,
                       metadata={"generator": spec.kind, "index": index})


def generate_synthetic(spec: SyntheticDomainSpec, count: int, seed: int,
                       start: int = 0) -> list:
    """``count`` deterministic samples; sample ``i`` depends only on (spec, seed, i).

    Target samples carry annotations, but these stay behind the trainer read
    guard and are meant for evaluation only.
    """
    if count <= 0:
        raise ValueError("count must be positive")
    return [_generate_one(spec, seed, start + i) for i in range(count)]


# --------------------------------------------------------------------------
# corpus preprocessing
# --------------------------------------------------------------------------

def crop_patches(sample: ImageSample, patch_size, count: int, seed: int) -> list:
    ph, pw = patch_size
    h, w = sample.shape
    if ph > h or pw > w:
        raise SizeError(f"patch {patch_size} larger than image {(h, w)}")
    rng = rng_for(seed, "crop", sample.id)
    anns = sample._annotations
    out = []
    for k in range(count):
        y0 = int(rng.integers(0, h - ph + 1))
        x0 = int(rng.integers(0, w - pw + 1))
        pixels = sample.pixels[y0:y0 + ph, x0:x0 + pw]
        cropped = None
        if anns is not None:
            cropped = []
            for a in anns:
                m = a.mask[y0:y0 + ph, x0:x0 + pw]
                if m.any():
                    cropped.append(InstanceAnnotation(a.instance_id, m, tight_box(m)))
        meta = dict(sample.metadata, parent=sample.id, offset=(y0, x0))
        out.append(ImageSample(f"{sample.id}_p{k}", pixels, sample.domain, cropped,
                               sample.split, meta, sample.pseudo))
    return out


def invert_intensity(sample: ImageSample) -> ImageSample:
    pixels = sample.pixels
    if pixels.dtype == np.uint8:
        inv = 255 - pixels
    else:
        inv = 255.0 - pixels
    return sample.replace(pixels=inv)


@dataclass(frozen=True)
class AugmentationParams:
    blur_sigma: float = 1.0
    contrast_scale: float = 1.5
    brightness_delta: float = -150.0

    def __post_init__(self):
        if self.blur_sigma < 0:
            raise ConfigError("blur_sigma must be >= 0")
        if self.contrast_scale <= 0:
            raise ConfigError("contrast_scale must be > 0")

    @classmethod
    def from_config(cls, cfg) -> "AugmentationParams":
        return cls(cfg.blur_sigma, cfg.contrast_scale, cfg.brightness_delta)

    @classmethod
    def identity(cls) -> "AugmentationParams":
        return cls(0.0, 1.0, 0.0)

    def is_identity(self) -> bool:
        return self.blur_sigma == 0 and self.contrast_scale == 1 and self.brightness_delta == 0


def augment_pixels(pixels: np.ndarray, params: AugmentationParams) -> np.ndarray:
    """Gaussian blur (radius ceil(3 sigma), reflected borders), then v -> clamp(a v + b)."""
    arr = np.asarray(pixels, dtype=np.float64)
    if params.blur_sigma > 0:
        radius = math.ceil(3 * params.blur_sigma)
        sigma = (params.blur_sigma, params.blur_sigma) + (0,) * (arr.ndim - 2)
        arr = ndimage.gaussian_filter(arr, sigma, mode="reflect",
                                      truncate=radius / params.blur_sigma)
    arr = np.clip(params.contrast_scale * arr + params.brightness_delta, 0.0, 255.0)
    if np.asarray(pixels).dtype == np.uint8:
        return np.rint(arr).astype(np.uint8)
    return arr


def augment(sample: ImageSample, params: AugmentationParams, seed: Optional[int] = None) -> ImageSample:
    # The three photometric operations are deterministic; ``seed`` is kept so
    # callers can treat every augmentation uniformly.
    del seed
    meta = dict(sample.metadata, augmentation=(params.blur_sigma, params.contrast_scale,
                                               params.brightness_delta))
    return sample.replace(pixels=augment_pixels(sample.pixels, params), metadata=meta)


def write_spec_example(path: Path, kind: str) -> None:
    save_synthetic_spec(source_spec() if kind == "source_shapes" else target_spec(), path)


# --------------------------------------------------------------------------
# on-disk datasets
# --------------------------------------------------------------------------

MANIFEST = "manifest.tsv"
MANIFEST_HEADER = ("id", "image", "label", "domain")


def write_label_png(label_map: np.ndarray, path) -> None:
    Image.fromarray(np.ascontiguousarray(label_map, dtype=np.uint16)).save(path)


def read_label_png(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.array(im)
    return arr.astype(np.uint16)


def _label_map(sample: ImageSample) -> np.ndarray:
    out = np.zeros(sample.shape, dtype=np.uint16)
    for a in sample._annotations:
        out[a.mask] = a.instance_id
    return out


def save_dataset(samples, directory) -> Path:
    """One split directory: ``images/*.png``, ``labels/*.png`` and a TSV manifest."""
    root = Path(directory)
    (root / "images").mkdir(parents=True, exist_ok=True)
    rows = ["\t".join(MANIFEST_HEADER)]
    for s in samples:
        if s.pixels.dtype != np.uint8:
            raise ValueError(f"{s.id}: only 8-bit images can be written")
        image_rel = f"images/{s.id}.png"
        Image.fromarray(s.pixels).save(root / image_rel)
        label_rel = "-"
        if s.has_annotations:
            (root / "labels").mkdir(exist_ok=True)
            label_rel = f"labels/{s.id}.png"
            write_label_png(_label_map(s), root / label_rel)
        rows.append("\t".join((s.id, image_rel, label_rel, s.domain.value)))
    (root / MANIFEST).write_text("\n".join(rows) + "\n", encoding="utf-8")
    return root


def read_manifest(directory) -> list:
    root = Path(directory)
    try:
        lines = (root / MANIFEST).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise ConsistencyError(f"cannot read dataset manifest: {exc}") from None
    if not lines or tuple(lines[0].split("\t")) != MANIFEST_HEADER:
        raise ConsistencyError(f"{root / MANIFEST}: missing or malformed header")
    rows = []
    for n, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise ConsistencyError(f"{root / MANIFEST}:{n}: expected 4 fields")
        rows.append(parts)
    return rows


def load_dataset(directory, split: Optional[str] = None, pseudo: bool = False) -> list:
    """Inverse of :func:`save_dataset`. The split defaults to the directory name."""
    root = Path(directory)
    if split is None:
        split = root.name if root.name in {s.value for s in Split} else Split.TRAIN.value
    out = []
    for sid, image_rel, label_rel, domain in read_manifest(root):
        with Image.open(root / image_rel) as im:
            pixels = np.array(im)
        anns = None
        if label_rel != "-":
            anns = masks_from_label_map(read_label_png(root / label_rel))
        out.append(ImageSample(sid, pixels, domain, anns, split, pseudo=pseudo))
    return out
