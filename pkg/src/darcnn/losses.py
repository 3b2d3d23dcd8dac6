"""Adaptation losses, the supervised detector loss and their weighted sum."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import torch
import torch.nn.functional as F
from torchvision.ops import box_iou

from darcnn.core import PipelineConfig
from darcnn.errors import ConfigError, EmptyBatchError, GuardError, NumericalError
from darcnn.model import (
    DARCNN, HEAD_BOX_WEIGHTS, MASK_OUT, FeatureBundle, background_positions, encode_boxes,
    generate_proposals, region_pool, rois_from_list, run_heads,
)

BANDWIDTH_FLOOR = 1e-6


@dataclass(frozen=True)
class KernelSpec:
    """Gaussian kernel family.

    With ``bandwidths=None`` the bandwidths are ``median pairwise distance x
    multipliers``, recomputed for every call.
    """
    bandwidths: Optional[tuple] = None
    multipliers: tuple = (0.5, 1.0, 2.0)

    def __post_init__(self):
        if self.bandwidths is not None:
            if not self.bandwidths or any(b <= 0 for b in self.bandwidths):
                raise ConfigError("bandwidths must be nonempty and positive")
        if not self.multipliers or any(m <= 0 for m in self.multipliers):
            raise ConfigError("multipliers must be nonempty and positive")


def _sq_dists(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    diff = a[:, None, :] - b[None, :, :]
    return (diff * diff).sum(-1)


def mmd_loss(feats_s: torch.Tensor, feats_t: torch.Tensor,
             kernel: KernelSpec = KernelSpec()) -> torch.Tensor:
    """Biased squared MMD between two sample sets under a (multi-bandwidth) Gaussian kernel."""
    feats_s = torch.as_tensor(feats_s)
    feats_t = torch.as_tensor(feats_t)
    if feats_s.dim() == 1:
        feats_s = feats_s[:, None]
    if feats_t.dim() == 1:
        feats_t = feats_t[:, None]
    ns, nt = feats_s.shape[0], feats_t.shape[0]
    if ns == 0 or nt == 0:
        raise EmptyBatchError("mmd_loss needs at least one sample per domain")
    feats_s = feats_s.reshape(ns, -1)
    feats_t = feats_t.reshape(nt, -1)
    d_ss = _sq_dists(feats_s, feats_s)
    d_st = _sq_dists(feats_s, feats_t)
    d_tt = _sq_dists(feats_t, feats_t)
    if kernel.bandwidths is not None:
        sigmas = [torch.as_tensor(float(b), dtype=feats_s.dtype) for b in kernel.bandwidths]
    else:
        pooled = torch.cat([feats_s, feats_t])
        n = pooled.shape[0]
        iu = torch.triu_indices(n, n, offset=1)
        pair_sq = _sq_dists(pooled, pooled)[iu[0], iu[1]]
        if pair_sq.numel() == 0:
            med = torch.ones((), dtype=pooled.dtype)
        else:
            # median of squared distances == squared median distance
            med = torch.sqrt(torch.median(pair_sq).clamp(min=BANDWIDTH_FLOOR ** 2))
        sigmas = [med * m for m in kernel.multipliers]
    total = feats_s.new_zeros(())
    for sigma in sigmas:
        g = 1.0 / (2.0 * sigma * sigma)
        total = total + (torch.exp(-g * d_ss).sum() / (ns * ns)
                         - 2.0 * torch.exp(-g * d_st).sum() / (ns * nt)
                         + torch.exp(-g * d_tt).sum() / (nt * nt))
    return total


def warmup_alpha(step: int, steps_per_epoch: int, cfg: PipelineConfig) -> float:
    """Linear ramp of the similarity weight from ``alpha_init`` to ``alpha_target``."""
    if steps_per_epoch <= 0:
        raise ConfigError("steps_per_epoch must be positive")
    if step < 0:
        raise ValueError("step must be >= 0")
    n = cfg.warmup_epochs * steps_per_epoch
    if step >= n:
        return float(cfg.alpha_target)
    return float(cfg.alpha_init + (cfg.alpha_target - cfg.alpha_init) * step / n)


def _half_rows(h: torch.Tensor) -> torch.Tensor:
    """``[B, D, H, W]`` (or ``[D, H, W]``) -> rows of the first D/2 channels."""
    if h.dim() == 3:
        h = h[None]
    d = h.shape[1]
    if d % 2:
        raise ConfigError("difference loss needs an even feature depth")
    return h[:, : d // 2].permute(0, 2, 3, 1).reshape(-1, d // 2)


def soft_orthogonality(rows_c: torch.Tensor, rows_p: torch.Tensor, normalize: bool = True):
    """``||H_c^T H_p||_F^2``, divided by ``rows^2`` when ``normalize``."""
    prod = rows_c.T @ rows_p
    val = (prod * prod).sum()
    if normalize:
        val = val / float(rows_c.shape[0]) ** 2
    return val


def branch_difference(h_c: torch.Tensor, h_p: torch.Tensor) -> torch.Tensor:
    """Half-depth orthogonality term of a single domain."""
    return soft_orthogonality(_half_rows(h_c), _half_rows(h_p))


def difference_loss(bundle_s: FeatureBundle, bundle_t: FeatureBundle) -> torch.Tensor:
    loss = 0.0
    for b in (bundle_s, bundle_t):
        loss = loss + branch_difference(b.h_c, b.h_p)
    return loss


def region_background_mean(h_p: torch.Tensor, box, mask_probs, i: float, stride: int):
    """Spatial mean of background features under one region, or ``None``."""
    rows, cols = background_positions(box, mask_probs, h_p.shape[-2:], stride, i)
    if rows.size == 0:
        return None
    return h_p[:, torch.as_tensor(rows), torch.as_tensor(cols)].mean(dim=1)


def consistency_from_means(means: Sequence[torch.Tensor]) -> torch.Tensor:
    if len(means) < 2:
        return means[0].new_zeros(()) if means else torch.zeros(())
    stacked = torch.stack(list(means))
    mu = stacked.mean(dim=0)
    return (stacked - mu).abs().mean()


def background_consistency_loss(h_p_t: torch.Tensor, predictions, cfg: PipelineConfig,
                                stride: int = 1) -> torch.Tensor:
    """Per-image spread of per-region background means around their average.

    ``predictions`` are assumed to be filtered to confident regions already;
    regions without background cells are left out of the mean.
    """
    means = []
    for pred in predictions:
        m = region_background_mean(h_p_t, pred.box, pred.mask_probs, cfg.i_background, stride)
        if m is not None:
            means.append(m)
    if not means:
        return h_p_t.new_zeros(())
    return consistency_from_means(means)


def target_consistency_batch(model: DARCNN, h_c_t: torch.Tensor, h_p_t: torch.Tensor,
                             cfg: PipelineConfig, image_size) -> torch.Tensor:
    """Background consistency over a target batch (mean over images)."""
    with torch.no_grad():
        logits, deltas = model.R(h_c_t)
        anchors = model.anchors(h_c_t.shape[2], h_c_t.shape[3], dtype=h_c_t.dtype)
        props = generate_proposals(logits, deltas, anchors, image_size, pre_nms=300,
                                   post_nms=cfg.region_top_n)
        boxes = [b[p > cfg.k_region_conf] for b, p in props]
        heads = run_heads(model, h_p_t.detach(), boxes, "target", image_size)
    losses = []
    for b, (refined, _scores, masks) in enumerate(heads):
        means = []
        for k in range(refined.shape[0]):
            m = region_background_mean(h_p_t[b], refined[k], masks[k], cfg.i_background,
                                       model.stride)
            if m is not None:
                means.append(m)
        losses.append(consistency_from_means(means).to(h_p_t.dtype))
    if not losses:
        return h_p_t.new_zeros(())
    return torch.stack(losses).mean()


# --------------------------------------------------------------------------
# supervised detector loss
# --------------------------------------------------------------------------

def mask_bce(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    if logits.numel() == 0:
        return logits.sum() * 0.0
    return F.binary_cross_entropy_with_logits(logits, targets.to(logits.dtype))


def _sample(labels: torch.Tensor, batch: int, pos_frac: float, gen: torch.Generator):
    pos = torch.nonzero(labels == 1).flatten()
    neg = torch.nonzero(labels == 0).flatten()
    n_pos = min(pos.numel(), int(batch * pos_frac))
    n_neg = min(neg.numel(), batch - n_pos)
    pos = pos[torch.randperm(pos.numel(), generator=gen)[:n_pos]]
    neg = neg[torch.randperm(neg.numel(), generator=gen)[:n_neg]]
    return pos, neg


def rpn_loss(logits: torch.Tensor, deltas: torch.Tensor, anchors: torch.Tensor,
             gt_boxes: torch.Tensor, gen: torch.Generator, batch: int = 128,
             pos_iou: float = 0.7, neg_iou: float = 0.3):
    """Objectness BCE and smooth-L1 regression for one image."""
    labels = torch.full((anchors.shape[0],), -1, dtype=torch.long)
    if gt_boxes.shape[0] == 0:
        labels[:] = 0
        matched = None
    else:
        iou = box_iou(anchors, gt_boxes)
        best, matched = iou.max(dim=1)
        labels[best < neg_iou] = 0
        labels[best >= pos_iou] = 1
        gt_best = iou.max(dim=0).values
        hit = (iou == gt_best[None]) & (gt_best[None] > 0)
        labels[hit.any(dim=1)] = 1
    pos, neg = _sample(labels, batch, 0.5, gen)
    idx = torch.cat([pos, neg])
    target = torch.cat([torch.ones(pos.numel()), torch.zeros(neg.numel())]).to(logits.dtype)
    cls = F.binary_cross_entropy_with_logits(logits[idx], target)
    if pos.numel():
        reg_t = encode_boxes(anchors[pos], gt_boxes[matched[pos]])
        reg = F.smooth_l1_loss(deltas[pos], reg_t, beta=1.0 / 9, reduction="sum") / idx.numel()
    else:
        reg = deltas.sum() * 0.0
    return cls, reg


def roi_targets(proposals: torch.Tensor, gt_boxes: torch.Tensor, gen: torch.Generator,
                batch: int = 24, fg_iou: float = 0.5, fg_frac: float = 0.25):
    """Sampled ROIs for one image with foreground flags and matched gt indices."""
    rois = torch.cat([proposals, gt_boxes.to(proposals.dtype)]) if gt_boxes.shape[0] else proposals
    if gt_boxes.shape[0]:
        iou = box_iou(rois, gt_boxes.to(rois.dtype))
        best, matched = iou.max(dim=1)
        labels = (best >= fg_iou).long()
    else:
        matched = torch.zeros(rois.shape[0], dtype=torch.long)
        labels = torch.zeros(rois.shape[0], dtype=torch.long)
    pos, neg = _sample(labels, batch, fg_frac, gen)
    idx = torch.cat([pos, neg])
    return rois[idx], labels[idx], matched[idx]


def source_supervised_loss(model: DARCNN, h_c: torch.Tensor, h_p: torch.Tensor,
                           targets: Sequence[dict], gen: torch.Generator, domain="source",
                           image_size=None, rpn_logits=None, rpn_deltas=None) -> dict:
    """Two-step detector losses against ``targets`` (``{"boxes", "masks"}`` per image).

    Returns the component terms; their sum is the supervised loss.
    """
    if targets is None or any(t is None for t in targets):
        raise GuardError("supervised loss requires annotations for every image")
    if image_size is None:
        image_size = (h_c.shape[2] * model.stride, h_c.shape[3] * model.stride)
    if rpn_logits is None:
        rpn_logits, rpn_deltas = model.R(h_c)
    anchors = model.anchors(h_c.shape[2], h_c.shape[3], dtype=h_c.dtype)
    rpn_cls, rpn_reg = [], []
    for b, t in enumerate(targets):
        c, r = rpn_loss(rpn_logits[b], rpn_deltas[b], anchors, t["boxes"].to(h_c.dtype), gen)
        rpn_cls.append(c)
        rpn_reg.append(r)
    props = generate_proposals(rpn_logits, rpn_deltas, anchors, image_size,
                               pre_nms=300, post_nms=64)
    roi_boxes, roi_labels, roi_gt_masks = [], [], []
    for b, t in enumerate(targets):
        rois, labels, matched = roi_targets(props[b][0], t["boxes"].to(h_c.dtype), gen)
        roi_boxes.append(rois)
        roi_labels.append(labels)
        roi_gt_masks.append((t, matched))
    head = model.head(domain)
    rois = rois_from_list(roi_boxes).to(h_p.dtype)
    labels = torch.cat(roi_labels).to(h_p.dtype)
    logits, deltas = head.forward_boxes(h_p, rois)
    roi_cls = F.binary_cross_entropy_with_logits(logits, labels) if rois.shape[0] else h_p.sum() * 0
    fg = labels > 0
    if fg.any():
        gt_for_fg, mask_targets = [], []
        for b, (t, matched) in enumerate(roi_gt_masks):
            sel = roi_labels[b] > 0
            if not sel.any():
                continue
            gt = t["boxes"].to(h_p.dtype)[matched[sel]]
            gt_for_fg.append(gt)
            m = t["masks"][matched[sel]][:, None].to(h_p.dtype)
            boxes = roi_boxes[b][sel].to(h_p.dtype)
            ridx = torch.arange(boxes.shape[0], dtype=h_p.dtype)[:, None]
            with torch.no_grad():
                mt = region_pool(m, torch.cat([ridx, boxes], dim=1), MASK_OUT, 1.0)
            mask_targets.append(mt[:, 0])
        gt_fg = torch.cat(gt_for_fg)
        rois_fg = rois[fg]
        reg_t = encode_boxes(rois_fg[:, 1:], gt_fg, HEAD_BOX_WEIGHTS)
        roi_reg = F.smooth_l1_loss(deltas[fg], reg_t, beta=1.0, reduction="sum") / rois.shape[0]
        # masks are predicted on the sampled foreground rois themselves
        mask_logits = head.forward_masks(h_p, rois_fg)
        mask = mask_bce(mask_logits, (torch.cat(mask_targets) >= 0.5))
    else:
        roi_reg = h_p.sum() * 0.0
        mask = h_p.sum() * 0.0
    return {
        "rpn_cls": torch.stack(rpn_cls).mean(),
        "rpn_reg": torch.stack(rpn_reg).mean(),
        "roi_cls": roi_cls,
        "roi_reg": roi_reg,
        "mask": mask,
    }


# --------------------------------------------------------------------------
# weighted total
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class LossReport:
    l_sim: float
    l_diff: float
    l_target: float
    l_source: float
    alpha_now: float
    beta: float
    gamma: float
    total: float
    step: int = 0

    def to_record(self) -> dict:
        return {"step": self.step, "l_sim": self.l_sim, "l_diff": self.l_diff,
                "l_target": self.l_target, "l_source": self.l_source,
                "alpha_now": self.alpha_now, "total": self.total}

    def as_dict(self) -> dict:
        return asdict(self)


def _check_finite(terms: dict) -> None:
    for name, v in terms.items():
        value = float(v)
        if not math.isfinite(value):
            raise NumericalError(name, value)


def total_loss(l_sim, l_diff, l_target, l_source, alpha_now: float, beta: float = 1.0,
               gamma: float = 0.1, step: int = 0) -> LossReport:
    terms = {"l_sim": l_sim, "l_diff": l_diff, "l_target": l_target, "l_source": l_source}
    _check_finite(terms)
    v = {k: float(x) for k, x in terms.items()}
    total = alpha_now * v["l_sim"] + beta * v["l_diff"] + gamma * v["l_target"] + v["l_source"]
    return LossReport(v["l_sim"], v["l_diff"], v["l_target"], v["l_source"],
                      float(alpha_now), float(beta), float(gamma), total, step)


def combine_losses(l_sim: torch.Tensor, l_diff: torch.Tensor, l_target: torch.Tensor,
                   l_source: torch.Tensor, alpha_now: float, beta: float, gamma: float,
                   step: int = 0):
    """Differentiable weighted sum plus its :class:`LossReport`."""
    report = total_loss(l_sim.detach(), l_diff.detach(), l_target.detach(), l_source.detach(),
                        alpha_now, beta, gamma, step)
    total = l_source
    if alpha_now:
        total = total + alpha_now * l_sim
    if beta:
        total = total + beta * l_diff
    if gamma:
        total = total + gamma * l_target
    return total, report
