"""Confidence-thresholded pseudo-labels and the stage-2 training set built from them."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from darcnn.core import Domain, ImageSample, InstanceAnnotation, PipelineConfig, tight_box
from darcnn.data import (
    AugmentationParams, augment, load_dataset, read_label_png, save_dataset, write_label_png,
)
from darcnn.errors import ConsistencyError, EmptyPseudoLabelError
from darcnn.eval import resolve_overlaps

AUG_MODES = ("train_augmented", "label_augmented", "both")
AUG_ORDER = "blur>contrast_brightness"
PROVENANCE = "provenance.json"
PSEUDO_FORMAT = "darcnn-pseudo/1"


@dataclass(frozen=True)
class PseudoLabel:
    mask: np.ndarray  # bool [H, W], binarized at mask-prob 0.5
    box: tuple  # detector box (x0, y0, x1, y1), pixel units
    confidence: float

    def __eq__(self, other):
        return (isinstance(other, PseudoLabel) and self.box == other.box
                and self.confidence == other.confidence
                and self.mask.shape == other.mask.shape and bool((self.mask == other.mask).all()))

    __hash__ = None


@dataclass(frozen=True)
class Provenance:
    checkpoint_hash: str
    z: float
    augmentation: tuple  # (blur_sigma, contrast_scale, brightness_delta)
    seed: int
    mode: str
    order: str = AUG_ORDER

    def to_dict(self) -> dict:
        d = asdict(self)
        d["augmentation"] = list(self.augmentation)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Provenance":
        return cls(d["checkpoint_hash"], float(d["z"]), tuple(d["augmentation"]), int(d["seed"]),
                   d["mode"], d.get("order", AUG_ORDER))


@dataclass
class PseudoLabelSet:
    """Per-image pseudo-labels, kept in descending confidence order."""
    labels: dict  # image id -> tuple of PseudoLabel
    provenance: Provenance
    image_ids: list = field(default_factory=list)

    def __post_init__(self):
        if not self.image_ids:
            self.image_ids = list(self.labels)
        for iid, items in self.labels.items():
            for lab in items:
                if lab.confidence < self.provenance.z:
                    raise ConsistencyError(
                        f"{iid}: confidence {lab.confidence} below z={self.provenance.z}")

    def __eq__(self, other):
        return (isinstance(other, PseudoLabelSet) and self.provenance == other.provenance
                and self.image_ids == other.image_ids
                and all(tuple(self.labels[i]) == tuple(other.labels[i]) for i in self.image_ids))

    def counts(self) -> dict:
        return {i: len(self.labels[i]) for i in self.image_ids}

    def total(self) -> int:
        return sum(len(v) for v in self.labels.values())

    def filtered(self, z: float) -> "PseudoLabelSet":
        if z < self.provenance.z:
            raise ValueError("cannot lower z below the generation threshold")
        prov = Provenance(self.provenance.checkpoint_hash, z, self.provenance.augmentation,
                          self.provenance.seed, self.provenance.mode, self.provenance.order)
        return PseudoLabelSet({i: tuple(l for l in v if l.confidence >= z)
                               for i, v in self.labels.items()}, prov, list(self.image_ids))


def _check_mode(mode: str) -> None:
    if mode not in AUG_MODES:
        raise ValueError(f"aug mode must be one of {AUG_MODES}, got {mode!r}")


def generate_pseudo_labels(model, target_images: Sequence[ImageSample], cfg: PipelineConfig,
                           seed: Optional[int] = None, params: Optional[AugmentationParams] = None,
                           checkpoint_hash: str = "", mode: Optional[str] = None,
                           batch_size: int = 32) -> PseudoLabelSet:
    """Target-branch predictions with confidence >= z, masks binarized at 0.5.

    In ``label_augmented`` and ``both`` modes inference runs on augmented
    images; otherwise on the clean ones.
    """
    from darcnn.model import detect, to_tensor

    mode = mode or cfg.aug_mode
    _check_mode(mode)
    seed = cfg.seed if seed is None else seed
    params = params or AugmentationParams.from_config(cfg)
    z = cfg.z_pseudo_conf
    images = list(target_images)
    if mode in ("label_augmented", "both"):
        images = [augment(s, params, seed) for s in images]
    dtype = next(model.parameters()).dtype
    labels = {}
    for start in range(0, len(images), batch_size):
        chunk = images[start:start + batch_size]
        dets = detect(model, to_tensor(chunk, dtype), Domain.TARGET,
                      max_detections=cfg.max_detections, score_threshold=0.0)
        for sample, det in zip(chunk, dets):
            masks = det.binary_masks(0.5)
            kept = []
            for k in torch.argsort(-det.scores, stable=True).tolist():
                conf = float(det.scores[k])
                if conf < z or not masks[k].any():
                    continue
                kept.append(PseudoLabel(masks[k], tuple(float(v) for v in det.boxes[k]), conf))
            labels[sample.id] = tuple(kept)
    if not any(labels.values()):
        raise EmptyPseudoLabelError(f"no prediction reached confidence z={z}")
    prov = Provenance(checkpoint_hash, float(z), (params.blur_sigma, params.contrast_scale,
                                                  params.brightness_delta), int(seed), mode)
    return PseudoLabelSet(labels, prov, [s.id for s in target_images])


def _annotations(items: Sequence[PseudoLabel], shape) -> tuple:
    """Overlap-resolved instance annotations (higher confidence wins)."""
    if not items:
        return ()
    lm = resolve_overlaps(np.stack([l.mask for l in items]), [l.confidence for l in items])
    out = []
    for k in range(len(items)):
        m = lm == k + 1
        if m.any():
            out.append(InstanceAnnotation(k + 1, m, tight_box(m)))
    return tuple(out)


def build_stage2_dataset(labels: PseudoLabelSet, images: Sequence[ImageSample],
                         params: AugmentationParams, mode: str = "train_augmented",
                         seed: int = 0, include_clean: bool = False) -> list:
    """Images paired with pseudo-labels, flagged as pseudo so the trainer may read them.

    ``train_augmented`` and ``both`` train on augmented pixels;
    ``label_augmented`` trains on the clean ones. Geometry is never touched.
    With ``include_clean`` the clean originals are kept as well and the
    augmented copies get an ``_aug`` id suffix.
    """
    _check_mode(mode)
    ids = [s.id for s in images]
    if set(ids) != set(labels.labels) or len(ids) != len(set(ids)):
        missing = sorted(set(ids) ^ set(labels.labels))[:5]
        raise ConsistencyError(f"pseudo-label ids do not match images: {missing}")
    out = []
    copies = []
    for s in images:
        anns = _annotations(labels.labels[s.id], s.shape)
        meta = dict(s.metadata, pseudo_mode=mode)
        augmented = mode in ("train_augmented", "both") and not params.is_identity()
        if not augmented or include_clean:
            out.append(ImageSample(s.id, s.pixels, Domain.TARGET, anns, s.split, meta,
                                   pseudo=True))
        if augmented:
            sid = f"{s.id}_aug" if include_clean else s.id
            copies.append(ImageSample(sid, augment(s, params, seed).pixels, Domain.TARGET, anns,
                                      s.split, meta, pseudo=True))
    return out + copies


# --------------------------------------------------------------------------
# disk format
# --------------------------------------------------------------------------

def _rle(mask: np.ndarray) -> list:
    """Run lengths of the row-major flattened mask, starting with a 0-run."""
    flat = mask.ravel().astype(np.int8)
    edges = np.flatnonzero(np.diff(np.concatenate([[0], flat, [0]])))
    runs = np.diff(np.concatenate([[0], edges, [flat.size]]))
    return [int(r) for r in runs]


def _unrle(runs: Sequence[int], shape) -> np.ndarray:
    flat = np.zeros(int(np.prod(shape)), dtype=bool)
    pos, val = 0, False
    for r in runs:
        if val:
            flat[pos:pos + r] = True
        pos += r
        val = not val
    return flat.reshape(shape)


def save_pseudo_labels(labels: PseudoLabelSet, images: Sequence[ImageSample], directory) -> Path:
    """Clean images, confidence-resolved label PNGs, JSON sidecars and provenance.

    The sidecars keep the unresolved masks so the set round-trips exactly.
    """
    root = Path(directory)
    by_id = {s.id: s for s in images}
    if set(by_id) != set(labels.labels):
        raise ConsistencyError("pseudo-label ids do not match images")
    samples = [ImageSample(i, by_id[i].pixels, Domain.TARGET,
                           _annotations(labels.labels[i], by_id[i].shape), by_id[i].split,
                           pseudo=True) for i in labels.image_ids]
    save_dataset(samples, root)
    for s in samples:
        items = labels.labels[s.id]
        side = {"id": s.id, "shape": list(s.shape), "instances": [
            {"instance_id": k + 1, "confidence": l.confidence, "box": list(l.box),
             "mask_rle": _rle(l.mask)} for k, l in enumerate(items)]}
        (root / "labels" / f"{s.id}.json").write_text(json.dumps(side), encoding="utf-8")
    prov = dict(labels.provenance.to_dict(), format=PSEUDO_FORMAT, image_ids=labels.image_ids,
                counts=labels.counts())
    (root / PROVENANCE).write_text(json.dumps(prov, indent=2) + "\n", encoding="utf-8")
    return root


def load_pseudo_labels(directory) -> tuple:
    """Returns ``(PseudoLabelSet, clean images)`` from :func:`save_pseudo_labels` output."""
    root = Path(directory)
    prov = json.loads((root / PROVENANCE).read_text(encoding="utf-8"))
    if prov.get("format") != PSEUDO_FORMAT:
        raise ConsistencyError(f"{root}: not a pseudo-label directory")
    images = load_dataset(root, split="train", pseudo=True)
    labels = {}
    for s in images:
        side = json.loads((root / "labels" / f"{s.id}.json").read_text(encoding="utf-8"))
        shape = tuple(side["shape"])
        items = tuple(PseudoLabel(_unrle(d["mask_rle"], shape), tuple(d["box"]),
                                  float(d["confidence"])) for d in side["instances"])
        lm = read_label_png(root / "labels" / f"{s.id}.png")
        if items and not np.array_equal(lm, _label_map_of(items, shape)):
            raise ConsistencyError(f"{s.id}: label PNG disagrees with sidecar")
        labels[s.id] = items
    clean = [s.replace(annotations=None, pseudo=False) for s in images]
    return PseudoLabelSet(labels, Provenance.from_dict(prov), list(prov["image_ids"])), clean


def _label_map_of(items, shape) -> np.ndarray:
    out = np.zeros(shape, dtype=np.uint16)
    for a in _annotations(items, shape):
        out[a.mask] = a.instance_id
    return out
