"""Domain types, mask geometry and the pipeline configuration."""

from __future__ import annotations

import contextvars
import dataclasses
import enum
import hashlib
import json
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np

from darcnn.errors import EmptyMaskError, GuardError, SizeError

Box = tuple  # (x0, y0, x1, y1)

MIN_SIDE = 16


class Domain(str, enum.Enum):
    SOURCE = "source"
    TARGET = "target"


class Split(str, enum.Enum):
    TRAIN = "train"
    VAL = "val"
    TEST = "test"


# --------------------------------------------------------------------------
# Target-annotation read guard
# --------------------------------------------------------------------------

_ACCESS_ROLE: contextvars.ContextVar[str] = contextvars.ContextVar(
    "darcnn_access_role", default="evaluator")
# Instrumentation hook for tripwire tests; counts every guarded read attempt.
GUARD_LOG: list = []


@contextmanager
def access_context(role: str) -> Iterator[None]:
    """Run a block as ``"trainer"`` or ``"evaluator"``.

    Inside a trainer block, reading the annotations of a target-domain
    sample raises :class:`GuardError` unless the annotations are pseudo-labels.
    """
    if role not in ("trainer", "evaluator"):
        raise ValueError(f"unknown access role {role!r}")
    token = _ACCESS_ROLE.set(role)
    try:
        yield
    finally:
        _ACCESS_ROLE.reset(token)


def current_role() -> str:
    return _ACCESS_ROLE.get()


# --------------------------------------------------------------------------
# Geometry
# --------------------------------------------------------------------------

def tight_box(mask: np.ndarray) -> Box:
    """Smallest inclusive pixel rectangle ``(x0, y0, x1, y1)`` around ``mask``."""
    mask = np.asarray(mask, dtype=bool)
    rows = np.flatnonzero(mask.any(axis=1))
    if rows.size == 0:
        raise EmptyMaskError("mask has no foreground pixels")
    cols = np.flatnonzero(mask.any(axis=0))
    return (int(cols[0]), int(rows[0]), int(cols[-1]), int(rows[-1]))


def box_to_continuous(box: Box) -> tuple:
    """Inclusive pixel box to half-open continuous coordinates."""
    x0, y0, x1, y1 = box
    return (float(x0), float(y0), float(x1) + 1.0, float(y1) + 1.0)


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class InstanceAnnotation:
    instance_id: int
    mask: np.ndarray
    box: Box

    def __post_init__(self):
        if int(self.instance_id) < 1:
            raise ValueError("instance_id must be a positive integer")
        object.__setattr__(self, "mask", _freeze(np.asarray(self.mask, dtype=bool)))
        expected = tight_box(self.mask)
        if tuple(int(v) for v in self.box) != expected:
            raise ValueError(f"box {self.box} is not the tight box {expected}")
        object.__setattr__(self, "box", expected)

    @classmethod
    def from_mask(cls, instance_id: int, mask: np.ndarray) -> "InstanceAnnotation":
        return cls(instance_id, mask, tight_box(mask))

    @property
    def area(self) -> int:
        return int(self.mask.sum())


class ImageSample:
    """An image with optional instance annotations and a domain tag.

    Instances are immutable once built. ``annotations`` of target-domain
    images are guarded: reading them inside ``access_context("trainer")``
    raises, unless they were produced as pseudo-labels.
    """

    __slots__ = ("id", "pixels", "domain", "split", "metadata", "pseudo", "_annotations")

    def __init__(self, id: str, pixels: np.ndarray, domain, annotations=None,
                 split="train", metadata: Optional[dict] = None, pseudo: bool = False):
        pixels = np.asarray(pixels)
        if pixels.ndim not in (2, 3):
            raise SizeError(f"pixels must be 2-D or 3-D, got shape {pixels.shape}")
        if pixels.shape[0] < MIN_SIDE or pixels.shape[1] < MIN_SIDE:
            raise SizeError(f"image {pixels.shape[:2]} smaller than {MIN_SIDE}x{MIN_SIDE}")
        domain = Domain(domain)
        split = Split(split)
        if annotations is not None:
            annotations = tuple(annotations)
            ids = [a.instance_id for a in annotations]
            if len(set(ids)) != len(ids):
                raise ValueError(f"duplicate instance ids in {id}")
            for a in annotations:
                if a.mask.shape != pixels.shape[:2]:
                    raise SizeError("annotation mask does not match image size")
        elif domain is Domain.SOURCE and split is Split.TRAIN:
            raise ValueError(f"source training sample {id} requires annotations")
        meta = {"scale": "uint8" if pixels.dtype == np.uint8 else "float"}
        meta.update(metadata or {})
        sets = object.__setattr__
        sets(self, "id", str(id))
        sets(self, "pixels", _freeze(pixels))
        sets(self, "domain", domain)
        sets(self, "split", split)
        sets(self, "metadata", meta)
        sets(self, "pseudo", bool(pseudo))
        sets(self, "_annotations", annotations)

    def __setattr__(self, name, value):
        raise AttributeError("ImageSample is immutable")

    @property
    def shape(self) -> tuple:
        return self.pixels.shape[:2]

    @property
    def has_annotations(self) -> bool:
        return self._annotations is not None

    @property
    def annotations(self):
        if self.domain is Domain.TARGET and not self.pseudo and self._annotations is not None:
            GUARD_LOG.append((self.id, current_role()))
            if current_role() == "trainer":
                raise GuardError(f"trainer may not read target annotations of {self.id}")
        return self._annotations

    def replace(self, **changes) -> "ImageSample":
        kw = dict(id=self.id, pixels=self.pixels, domain=self.domain,
                  annotations=self._annotations, split=self.split,
                  metadata=dict(self.metadata), pseudo=self.pseudo)
        kw.update(changes)
        return ImageSample(**kw)

    def label_map(self) -> np.ndarray:
        """Annotations flattened to an instance-id image (0 = background)."""
        out = np.zeros(self.shape, dtype=np.uint16)
        for a in self.annotations or ():
            out[a.mask] = a.instance_id
        return out

    def __repr__(self):
        n = "-" if self._annotations is None else len(self._annotations)
        return (f"ImageSample(id={self.id!r}, shape={self.pixels.shape}, "
                f"domain={self.domain.value}, split={self.split.value}, n_ann={n})")


@dataclass(frozen=True)
class RegionProposal:
    box: Box  # feature-grid units
    objectness: float

    def __post_init__(self):
        x0, y0, x1, y1 = self.box
        if not (x0 < x1 and y0 < y1):
            raise ValueError(f"degenerate proposal box {self.box}")
        if not 0.0 <= self.objectness <= 1.0:
            raise ValueError("objectness must lie in [0, 1]")


@dataclass(frozen=True, eq=False)
class InstancePrediction:
    box: Box  # pixel units, continuous
    mask_probs: np.ndarray
    confidence: float

    def __post_init__(self):
        probs = np.asarray(self.mask_probs, dtype=np.float64)
        if probs.size and (probs.min() < 0.0 or probs.max() > 1.0):
            raise ValueError("mask_probs must lie in [0, 1]")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError("confidence must lie in [0, 1]")
        object.__setattr__(self, "mask_probs", _freeze(probs))


# --------------------------------------------------------------------------
# Configuration
# --------------------------------------------------------------------------

AUG_MODES = ("train_augmented", "label_augmented", "both")
MMD_LEVELS = ("image", "position")


@dataclass(frozen=True)
class PipelineConfig:
    alpha_target: float = 1.0
    alpha_init: float = 0.0
    warmup_epochs: float = 0.1
    beta: float = 1.0
    gamma: float = 0.1
    k_region_conf: float = 0.5
    i_background: float = 0.5
    z_pseudo_conf: float = 0.5
    learning_rate: float = 1e-4
    max_detections: int = 100
    blur_sigma: float = 1.0
    contrast_scale: float = 1.5
    brightness_delta: float = -150.0
    plateau_window_epochs: float = 0.1
    plateau_epsilon: float = 1e-3
    rollback_epochs: float = 0.1
    checkpoint_interval_epochs: float = 0.1
    feature_depth: int = 32
    seed: int = 0
    # interpretation switches
    mmd_level: str = "image"
    mmd_multipliers: tuple = (0.5, 1.0, 2.0)
    aug_mode: str = "train_augmented"
    stage2_freeze_shared: bool = False
    stage2_keep_target_loss: bool = False
    stage2_include_clean: bool = True
    region_top_n: int = 16
    object_f1_iou: float = 0.5
    eval_score_threshold: float = 0.5

    def replace(self, **changes) -> "PipelineConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["mmd_multipliers"] = list(self.mmd_multipliers)
        return d

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


_UNIT_FIELDS = ("k_region_conf", "i_background", "z_pseudo_conf",
                "object_f1_iou", "eval_score_threshold")


def validate_config(cfg: PipelineConfig) -> list:
    """Return human-readable invariant violations; empty when valid."""
    problems = []
    for name in _UNIT_FIELDS:
        v = getattr(cfg, name)
        if not 0.0 <= v <= 1.0:
            problems.append(f"{name} must be in [0,1]")
    for name in ("alpha_target", "alpha_init", "beta", "gamma"):
        if not getattr(cfg, name) >= 0:
            problems.append(f"{name} must be >= 0")
    if not cfg.warmup_epochs > 0:
        problems.append("warmup_epochs must be > 0")
    if cfg.feature_depth <= 0:
        problems.append("feature_depth must be positive")
    elif cfg.feature_depth % 2:
        problems.append("feature_depth must be even")
    if cfg.max_detections < 1:
        problems.append("max_detections must be a positive integer")
    if cfg.learning_rate <= 0:
        problems.append("learning_rate must be > 0")
    if cfg.blur_sigma < 0:
        problems.append("blur_sigma must be >= 0")
    if cfg.contrast_scale <= 0:
        problems.append("contrast_scale must be > 0")
    for name in ("plateau_window_epochs", "checkpoint_interval_epochs"):
        if getattr(cfg, name) <= 0:
            problems.append(f"{name} must be > 0")
    if cfg.rollback_epochs < 0:
        problems.append("rollback_epochs must be >= 0")
    if cfg.aug_mode not in AUG_MODES:
        problems.append(f"aug_mode must be one of {', '.join(AUG_MODES)}")
    if cfg.mmd_level not in MMD_LEVELS:
        problems.append(f"mmd_level must be one of {', '.join(MMD_LEVELS)}")
    if not cfg.mmd_multipliers or any(m <= 0 for m in cfg.mmd_multipliers):
        problems.append("mmd_multipliers must be nonempty and positive")
    if cfg.region_top_n < 1:
        problems.append("region_top_n must be >= 1")
    return problems


def derive_seed(seed: int, *names) -> int:
    """Named random substream: a stable 63-bit seed from ``seed`` and labels."""
    h = hashlib.sha256(repr((int(seed),) + tuple(str(n) for n in names)).encode())
    return int.from_bytes(h.digest()[:8], "little") >> 1


def rng_for(seed: int, *names) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, *names))


def masks_from_label_map(label_map: np.ndarray) -> list:
    """Instance annotations from an id image, ordered by id."""
    out = []
    for iid in np.unique(label_map):
        if iid == 0:
            continue
        out.append(InstanceAnnotation.from_mask(int(iid), label_map == iid))
    return out


def stack_masks(annotations: Sequence[InstanceAnnotation], shape) -> np.ndarray:
    if not annotations:
        return np.zeros((0,) + tuple(shape), dtype=bool)
    return np.stack([a.mask for a in annotations])
