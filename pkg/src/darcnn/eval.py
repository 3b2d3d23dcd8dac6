"""Instance segmentation metrics, rule-based filtering and model evaluation."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch

from darcnn.core import Domain, ImageSample, InstancePrediction, PipelineConfig, access_context
from darcnn.errors import ModeError, ShapeError

AGG_MODES = ("per_image", "pooled")


def _as_stack(instances, shape=None) -> np.ndarray:
    if isinstance(instances, np.ndarray) and instances.ndim == 3:
        return instances.astype(bool, copy=False)
    items = [np.asarray(m, dtype=bool) for m in instances]
    if not items:
        if shape is None:
            return np.zeros((0, 0, 0), dtype=bool)
        return np.zeros((0,) + tuple(shape), dtype=bool)
    first = items[0].shape
    if any(m.shape != first for m in items):
        raise ShapeError("instance masks have differing shapes")
    return np.stack(items)


def _pair(gt_instances, pred_instances):
    gt = _as_stack(gt_instances)
    pred = _as_stack(pred_instances)
    if gt.shape[0] and pred.shape[0] and gt.shape[1:] != pred.shape[1:]:
        raise ShapeError(f"mask shape mismatch: {gt.shape[1:]} vs {pred.shape[1:]}")
    return gt, pred


def _flat(masks: np.ndarray) -> np.ndarray:
    return masks.reshape(masks.shape[0], int(np.prod(masks.shape[1:])))


def overlap_counts(gt: np.ndarray, pred: np.ndarray):
    """Intersection matrix and per-instance areas."""
    g = _flat(gt).astype(np.int64)
    p = _flat(pred).astype(np.int64)
    inter = g @ p.T
    return inter, g.sum(1), p.sum(1)


def iou_matrix(gt: np.ndarray, pred: np.ndarray) -> np.ndarray:
    inter, ga, pa = overlap_counts(gt, pred)
    union = ga[:, None] + pa[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / np.maximum(union, 1), 0.0)


def aji_counts(gt_instances, pred_instances) -> tuple:
    """Aggregated intersection ``C`` and union ``U`` under greedy matching."""
    gt, pred = _pair(gt_instances, pred_instances)
    inter, ga, pa = overlap_counts(gt, pred)
    used = np.zeros(pred.shape[0], dtype=bool)
    c = u = 0
    for i in range(gt.shape[0]):
        best_j, best_iou = -1, 0.0
        for j in range(pred.shape[0]):
            if used[j]:
                continue
            union = ga[i] + pa[j] - inter[i, j]
            iou = inter[i, j] / union if union else 0.0
            if iou > best_iou:  # strict: ties keep the lower index
                best_j, best_iou = j, iou
        if best_j < 0:
            u += int(ga[i])
            continue
        used[best_j] = True
        c += int(inter[i, best_j])
        u += int(ga[i] + pa[best_j] - inter[i, best_j])
    u += int(pa[~used].sum())
    return c, u


def aji(gt_instances, pred_instances) -> float:
    gt, pred = _pair(gt_instances, pred_instances)
    if gt.shape[0] == 0 and pred.shape[0] == 0:
        return 1.0
    if gt.shape[0] == 0 or pred.shape[0] == 0:
        return 0.0
    c, u = aji_counts(gt, pred)
    return c / u if u else 1.0


def pixel_counts(gt_union, pred_union) -> tuple:
    g = np.asarray(gt_union, dtype=bool)
    p = np.asarray(pred_union, dtype=bool)
    if g.shape != p.shape:
        raise ShapeError(f"mask shape mismatch: {g.shape} vs {p.shape}")
    tp = int((g & p).sum())
    return tp, int((~g & p).sum()), int((g & ~p).sum())


def f1_from_counts(tp: int, fp: int, fn: int) -> float:
    if tp + fp + fn == 0:
        return 1.0
    return 2.0 * tp / (2.0 * tp + fp + fn)


def pixel_f1(gt_union_mask, pred_union_mask) -> float:
    return f1_from_counts(*pixel_counts(gt_union_mask, pred_union_mask))


def object_counts(gt_instances, pred_instances, iou_threshold: float = 0.5) -> tuple:
    """Greedy one-to-one matching by descending IoU; returns ``(tp, fp, fn)``."""
    if not 0.0 < iou_threshold < 1.0:
        raise ValueError("iou_threshold must lie in (0, 1)")
    gt, pred = _pair(gt_instances, pred_instances)
    ng, npred = gt.shape[0], pred.shape[0]
    if ng == 0 or npred == 0:
        return 0, npred, ng
    iou = iou_matrix(gt, pred)
    order = sorted(((iou[i, j], i, j) for i in range(ng) for j in range(npred)),
                   key=lambda t: (-t[0], t[1], t[2]))
    gt_used, pred_used = set(), set()
    tp = 0
    for v, i, j in order:
        if v < iou_threshold:
            break
        if i in gt_used or j in pred_used:
            continue
        gt_used.add(i)
        pred_used.add(j)
        tp += 1
    return tp, npred - tp, ng - tp


def object_f1(gt_instances, pred_instances, iou_threshold: float = 0.5) -> float:
    return f1_from_counts(*object_counts(gt_instances, pred_instances, iou_threshold))


def max_iou(gt_instance, pred_instances) -> float:
    """Best IoU of any prediction against a single ground-truth object."""
    gt = _as_stack(gt_instance if np.asarray(gt_instance).ndim == 3 or
                   isinstance(gt_instance, (list, tuple)) else [gt_instance])
    if gt.shape[0] != 1:
        raise ModeError("max_iou is defined for exactly one ground-truth instance; use AJI")
    pred = _as_stack(pred_instances, gt.shape[1:])
    if pred.shape[0] == 0:
        return 0.0
    if pred.shape[1:] != gt.shape[1:]:
        raise ShapeError("mask shape mismatch")
    return float(iou_matrix(gt, pred).max())


def _prediction_mask(pred, shape) -> np.ndarray:
    if isinstance(pred, InstancePrediction):
        from darcnn.model import paste_masks
        boxes = torch.tensor([pred.box], dtype=torch.float32)
        probs = torch.tensor(pred.mask_probs, dtype=torch.float32)[None]
        return paste_masks(boxes, probs, shape)[0]
    return np.asarray(pred, dtype=bool)


def rule_filter(predictions, image, thresholds: Sequence[float]) -> dict:
    """For each threshold, the predictions whose mean masked intensity is below it."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        img = img.mean(axis=2)
    means = []
    for pred in predictions:
        m = _prediction_mask(pred, img.shape)
        means.append(img[m].mean() if m.any() else np.inf)
    return {t: [p for p, mu in zip(predictions, means) if mu < t] for t in thresholds}


# --------------------------------------------------------------------------
# model evaluation
# --------------------------------------------------------------------------

def resolve_overlaps(masks: np.ndarray, scores: Sequence[float]) -> np.ndarray:
    """Label map where higher-confidence instances win contested pixels."""
    shape = masks.shape[1:]
    out = np.zeros(shape, dtype=np.uint16)
    for k in np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable"):
        out[(out == 0) & masks[k]] = k + 1
    return out


def label_map_instances(label_map: np.ndarray) -> np.ndarray:
    ids = [i for i in np.unique(label_map) if i != 0]
    if not ids:
        return np.zeros((0,) + label_map.shape, dtype=bool)
    return np.stack([label_map == i for i in ids])


@dataclass
class EvalResult:
    aji: float
    pixel_f1: float
    object_f1: float
    max_iou: Optional[float] = None
    mode: str = "per_image"
    per_image: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"aji": self.aji, "pixel_f1": self.pixel_f1, "object_f1": self.object_f1,
                "max_iou": self.max_iou, "mode": self.mode, "per_image": self.per_image}


def score_instances(gt_list: Sequence[np.ndarray], pred_list: Sequence[np.ndarray],
                    mode: str = "per_image", iou_threshold: float = 0.5,
                    ids: Optional[Sequence[str]] = None) -> EvalResult:
    if mode not in AGG_MODES:
        raise ValueError(f"mode must be one of {AGG_MODES}")
    rows = []
    totals = np.zeros(8, dtype=np.int64)  # C, U, ptp, pfp, pfn, otp, ofp, ofn
    single = all(g.shape[0] == 1 for g in gt_list) and len(gt_list) > 0
    for k, (gt, pred) in enumerate(zip(gt_list, pred_list)):
        c, u = aji_counts(gt, pred)
        shape = gt.shape[1:] if gt.shape[0] else pred.shape[1:]
        gu = gt.any(0) if gt.shape[0] else np.zeros(shape, dtype=bool)
        pu = pred.any(0) if pred.shape[0] else np.zeros(shape, dtype=bool)
        pc = pixel_counts(gu, pu)
        oc = object_counts(gt, pred, iou_threshold)
        totals += np.array([c, u, *pc, *oc])
        row = {"id": ids[k] if ids else k, "aji": aji(gt, pred), "pixel_f1": f1_from_counts(*pc),
               "object_f1": f1_from_counts(*oc), "n_gt": int(gt.shape[0]),
               "n_pred": int(pred.shape[0])}
        if single:
            row["max_iou"] = max_iou(gt, pred)
        rows.append(row)
    if not rows:
        return EvalResult(0.0, 0.0, 0.0, None, mode, [])
    if mode == "per_image":
        res = EvalResult(float(np.mean([r["aji"] for r in rows])),
                         float(np.mean([r["pixel_f1"] for r in rows])),
                         float(np.mean([r["object_f1"] for r in rows])), None, mode, rows)
    else:
        c, u = totals[:2]
        res = EvalResult(float(c / u) if u else 1.0, f1_from_counts(*totals[2:5]),
                         f1_from_counts(*totals[5:8]), None, mode, rows)
    if single:
        res.max_iou = float(np.mean([r["max_iou"] for r in rows]))
    return res


def predict_instances(model, samples: Sequence[ImageSample], domain, cfg: PipelineConfig,
                      batch_size: int = 32) -> list:
    """Binary, overlap-resolved instance stacks for every sample."""
    from darcnn.model import detect, to_tensor

    dtype = next(model.parameters()).dtype
    out = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        x = to_tensor(chunk, dtype)
        dets = detect(model, x, domain, max_detections=cfg.max_detections,
                      score_threshold=cfg.eval_score_threshold)
        for det in dets:
            masks = det.binary_masks()
            lm = resolve_overlaps(masks, det.scores.numpy()) if masks.shape[0] else \
                np.zeros(det.image_size, dtype=np.uint16)
            out.append(label_map_instances(lm))
    return out


def evaluate_model(model, samples: Sequence[ImageSample], cfg: PipelineConfig,
                   domain=Domain.TARGET, mode: str = "per_image") -> EvalResult:
    preds = predict_instances(model, samples, domain, cfg)
    with access_context("evaluator"):
        gts = [label_map_instances(s.label_map()) for s in samples]
    return score_instances(gts, preds, mode, cfg.object_f1_iou, [s.id for s in samples])
