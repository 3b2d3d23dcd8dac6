"""Domain separation module and the two-step class-agnostic detector.

Parameter groups:

    E_c    shared encoder              -> h_c
    E_p_s  private source encoder      -> h_p (source)
    E_p_t  private target encoder      -> h_p (target)
    proj   1x1 projection of h_c used by the MMD loss
    R      shared region proposal network on h_c
    M_s    source box/mask head on h_p
    M_t    target box/mask head on h_p

Boxes inside this module are continuous pixel coordinates
``(x0, y0, x1, y1)`` with ``x1``/``y1`` exclusive.
"""

from __future__ import annotations

import copy
import hashlib
import io
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torchvision.ops import box_iou, nms

from darcnn.core import Domain, ImageSample, InstancePrediction, PipelineConfig, RegionProposal
from darcnn.errors import CheckpointError, ConfigError, SizeError

GROUPS = ("E_c", "E_p_s", "E_p_t", "proj", "R", "M_s", "M_t")
SOURCE_BRANCH = ("E_p_s", "M_s")
TARGET_BRANCH = ("E_p_t", "M_t")
SHARED = ("E_c", "proj", "R")

CKPT_FORMAT = "darcnn-ckpt/1"
MASK_POOL = 14
MASK_OUT = 28
BOX_POOL = 7
RPN_BOX_WEIGHTS = (1.0, 1.0, 1.0, 1.0)
HEAD_BOX_WEIGHTS = (10.0, 10.0, 5.0, 5.0)
_DELTA_CLAMP = math.log(1000.0 / 16)


@dataclass(frozen=True)
class BackboneSpec:
    in_channels: int = 1
    widths: tuple = (16, 32, 32)
    downsample: int = 4
    nonlinearity: str = "relu"
    norm: str = "batch"
    feature_depth: int = 32
    anchor_sizes: tuple = (8.0, 14.0, 22.0)
    anchor_ratios: tuple = (0.5, 1.0, 2.0)
    head_width: int = 64
    mask_width: int = 16
    output_norm: bool = True

    def __post_init__(self):
        d = self.downsample
        if d < 1 or d & (d - 1):
            raise ConfigError("downsample factor must be a power of 2")
        if int(math.log2(d)) > len(self.widths):
            raise ConfigError("not enough stages for the requested downsampling")
        if self.feature_depth <= 0 or self.feature_depth % 2:
            raise ConfigError("feature_depth must be a positive even integer")
        if self.norm not in ("batch", "group", "none"):
            raise ConfigError(f"unknown norm {self.norm!r}")
        if self.nonlinearity not in ("relu", "gelu", "silu"):
            raise ConfigError(f"unknown nonlinearity {self.nonlinearity!r}")

    @property
    def min_side(self) -> int:
        return 4 * self.downsample

    @property
    def num_anchors(self) -> int:
        return len(self.anchor_sizes) * len(self.anchor_ratios)


def _interp_weights(lo, hi, out: int, size: int, sampling: int, dtype) -> torch.Tensor:
    """Bilinear sampling weights ``[K, out, size]`` along one axis, averaged
    over ``sampling`` points per bin (RoIAlign boundary rules)."""
    bin_size = (hi - lo) / out
    i = torch.arange(out, dtype=dtype)
    s = (torch.arange(sampling, dtype=dtype) + 0.5) / sampling
    pts = lo[:, None, None] + (i[None, :, None] + s[None, None, :]) * bin_size[:, None, None]
    valid = (pts >= -1.0) & (pts <= size)
    p = pts.clamp(min=0)
    low = p.floor().clamp(max=size - 1)
    high = (low + 1).clamp(max=size - 1)
    p = torch.where(low >= size - 1, low, p)
    frac = p - low
    idx = torch.arange(size, dtype=dtype)
    w = (1 - frac)[..., None] * (idx == low[..., None]) + frac[..., None] * (idx == high[..., None])
    return (w * valid[..., None]).mean(2)


def region_pool(x: torch.Tensor, rois: torch.Tensor, output_size: int, spatial_scale: float,
                sampling: int = 2) -> torch.Tensor:
    """RoIAlign (aligned, fixed sampling) as two batched matrix products.

    Same values as ``torchvision.ops.roi_align(..., aligned=True)`` but with a
    much cheaper backward pass on CPU.
    """
    k = rois.shape[0]
    c, h, w = x.shape[1:]
    if k == 0:
        return x.new_zeros((0, c, output_size, output_size))
    b = rois[:, 1:].to(x.dtype) * spatial_scale - 0.5
    wy = _interp_weights(b[:, 1], b[:, 3], output_size, h, sampling, x.dtype)
    wx = _interp_weights(b[:, 0], b[:, 2], output_size, w, sampling, x.dtype)
    xb = x[rois[:, 0].long()].reshape(k, c * h, w)
    t = torch.bmm(xb, wx.transpose(1, 2))
    t = t.reshape(k, c, h, output_size).permute(0, 2, 1, 3).reshape(k, h, c * output_size)
    t = torch.bmm(wy, t).reshape(k, output_size, c, output_size)
    return t.permute(0, 2, 1, 3)


def _act(name):
    return {"relu": nn.ReLU, "gelu": nn.GELU, "silu": nn.SiLU}[name]()


def _norm(name, ch):
    if name == "batch":
        return nn.BatchNorm2d(ch)
    if name == "group":
        return nn.GroupNorm(min(8, ch), ch)
    return nn.Identity()


class Encoder(nn.Module):
    """Small strided convolutional stack; output depth ``feature_depth``."""

    def __init__(self, spec: BackboneSpec):
        super().__init__()
        layers = []
        n_down = int(math.log2(spec.downsample))
        ch = spec.in_channels
        for k, width in enumerate(spec.widths):
            stride = 2 if k < n_down else 1
            layers += [nn.Conv2d(ch, width, 3, stride=stride, padding=1, bias=spec.norm == "none"),
                       _norm(spec.norm, width), _act(spec.nonlinearity)]
            ch = width
        layers.append(nn.Conv2d(ch, spec.feature_depth, 1, bias=not spec.output_norm))
        if spec.output_norm:
            # standardised outputs: feature scale cannot shrink to satisfy the
            # unsupervised losses
            layers.append(nn.BatchNorm2d(spec.feature_depth, affine=False))
        self.body = nn.Sequential(*layers)

    def forward(self, x):
        return self.body(x)


class ProjectionHead(nn.Module):
    def __init__(self, depth: int):
        super().__init__()
        self.conv = nn.Conv2d(depth, 1, 1)

    def forward(self, h_c):
        return self.conv(h_c)


class RegionProposalNetwork(nn.Module):
    def __init__(self, depth: int, num_anchors: int, nonlinearity: str = "relu"):
        super().__init__()
        self.conv = nn.Conv2d(depth, depth, 3, padding=1)
        self.act = _act(nonlinearity)
        self.cls = nn.Conv2d(depth, num_anchors, 1)
        self.reg = nn.Conv2d(depth, 4 * num_anchors, 1)
        for m in (self.conv, self.cls, self.reg):
            nn.init.normal_(m.weight, std=0.01)
            nn.init.zeros_(m.bias)

    def forward(self, h_c):
        """Objectness logits ``[B, H*W*A]`` and deltas ``[B, H*W*A, 4]``."""
        t = self.act(self.conv(h_c))
        b, _, hh, ww = t.shape
        logits = self.cls(t).permute(0, 2, 3, 1).reshape(b, -1)
        deltas = self.reg(t).view(b, -1, 4, hh, ww).permute(0, 3, 4, 1, 2).reshape(b, -1, 4)
        return logits, deltas


class InstanceHead(nn.Module):
    """Class-agnostic box refinement + mask prediction on private features."""

    def __init__(self, depth: int, width: int, stride: int, mask_width: int = 16,
                 nonlinearity: str = "relu"):
        super().__init__()
        self.stride = stride
        self.box_fc = nn.Sequential(
            nn.Flatten(), nn.Linear(depth * BOX_POOL * BOX_POOL, width), _act(nonlinearity),
            nn.Linear(width, width), _act(nonlinearity))
        self.score = nn.Linear(width, 1)
        self.bbox = nn.Linear(width, 4)
        self.mask_convs = nn.Sequential(
            nn.Conv2d(depth, mask_width, 3, padding=1), _act(nonlinearity),
            nn.Conv2d(mask_width, mask_width, 3, padding=1), _act(nonlinearity))
        self.mask_up = nn.ConvTranspose2d(mask_width, mask_width, 2, stride=2)
        self.mask_act = _act(nonlinearity)
        self.mask_logit = nn.Conv2d(mask_width, 1, 1)
        nn.init.normal_(self.score.weight, std=0.01)
        nn.init.zeros_(self.score.bias)
        nn.init.normal_(self.bbox.weight, std=0.001)
        nn.init.zeros_(self.bbox.bias)

    def _pool(self, h_p, rois, size):
        return region_pool(h_p, rois, size, 1.0 / self.stride)

    def forward_boxes(self, h_p, rois):
        """``rois`` is ``[K, 5]`` (batch index, box). Returns logits ``[K]``, deltas ``[K, 4]``."""
        if rois.shape[0] == 0:
            z = h_p.new_zeros((0,))
            return z, h_p.new_zeros((0, 4))
        t = self.box_fc(self._pool(h_p, rois, BOX_POOL))
        return self.score(t).squeeze(1), self.bbox(t)

    def forward_masks(self, h_p, rois):
        if rois.shape[0] == 0:
            return h_p.new_zeros((0, MASK_OUT, MASK_OUT))
        t = self.mask_convs(self._pool(h_p, rois, MASK_POOL))
        t = self.mask_act(self.mask_up(t))
        return self.mask_logit(t).squeeze(1)


class DARCNN(nn.Module):
    def __init__(self, spec: BackboneSpec = BackboneSpec()):
        super().__init__()
        self.spec = spec
        depth = spec.feature_depth
        self.E_c = Encoder(spec)
        self.E_p_s = Encoder(spec)
        self.E_p_t = Encoder(spec)
        # all three encoders start from the same random weights
        self.E_p_s.load_state_dict(self.E_c.state_dict())
        self.E_p_t.load_state_dict(self.E_c.state_dict())
        self.proj = ProjectionHead(depth)
        act = spec.nonlinearity
        self.R = RegionProposalNetwork(depth, spec.num_anchors, act)
        self.M_s = InstanceHead(depth, spec.head_width, spec.downsample, spec.mask_width, act)
        self.M_t = InstanceHead(depth, spec.head_width, spec.downsample, spec.mask_width, act)
        self.register_buffer("step", torch.zeros((), dtype=torch.long))
        # global step at which the current training stage began
        self.register_buffer("stage_origin", torch.zeros((), dtype=torch.long))
        self._anchor_cache = {}

    @property
    def stride(self) -> int:
        return self.spec.downsample

    def group(self, name: str) -> nn.Module:
        if name not in GROUPS:
            raise KeyError(name)
        return getattr(self, name)

    def private(self, domain) -> Encoder:
        return self.E_p_s if Domain(domain) is Domain.SOURCE else self.E_p_t

    def head(self, domain) -> InstanceHead:
        return self.M_s if Domain(domain) is Domain.SOURCE else self.M_t

    def set_trainable(self, groups: Sequence[str]) -> None:
        groups = set(groups)
        for name in GROUPS:
            for p in self.group(name).parameters():
                p.requires_grad_(name in groups)

    def trainable_groups(self) -> list:
        return [n for n in GROUPS if any(p.requires_grad for p in self.group(n).parameters())]

    def copy_source_to_target(self) -> None:
        """Initialise the target branch from the (pretrained) source branch."""
        self.E_p_t.load_state_dict(self.E_p_s.state_dict())
        self.M_t.load_state_dict(self.M_s.state_dict())

    def check_input(self, x: torch.Tensor) -> None:
        h, w = x.shape[-2:]
        m = self.spec.min_side
        if h < m or w < m:
            raise SizeError(f"input {h}x{w} below the {m}x{m} receptive-field minimum")
        if h % self.stride or w % self.stride:
            raise SizeError(f"input {h}x{w} not divisible by downsample {self.stride}")

    def anchors(self, hf: int, wf: int, device=None, dtype=torch.float32) -> torch.Tensor:
        key = (hf, wf, dtype)
        if key not in self._anchor_cache:
            s = self.stride
            base = []
            for size in self.spec.anchor_sizes:
                for ratio in self.spec.anchor_ratios:
                    w = size / math.sqrt(ratio)
                    h = size * math.sqrt(ratio)
                    base.append((-w / 2, -h / 2, w / 2, h / 2))
            base = torch.tensor(base, dtype=dtype)
            ys = (torch.arange(hf, dtype=dtype) + 0.5) * s
            xs = (torch.arange(wf, dtype=dtype) + 0.5) * s
            cy, cx = torch.meshgrid(ys, xs, indexing="ij")
            shifts = torch.stack([cx, cy, cx, cy], dim=-1).reshape(-1, 1, 4)
            self._anchor_cache[key] = (shifts + base[None]).reshape(-1, 4)
        return self._anchor_cache[key].to(device)

    def param_hash(self, groups: Sequence[str]) -> str:
        h = hashlib.sha256()
        for name in groups:
            for key, t in sorted(self.group(name).state_dict().items()):
                h.update(name.encode() + key.encode())
                h.update(t.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()


# --------------------------------------------------------------------------
# box utilities
# --------------------------------------------------------------------------

def encode_boxes(ref: torch.Tensor, gt: torch.Tensor, weights=RPN_BOX_WEIGHTS) -> torch.Tensor:
    wx, wy, ww, wh = weights
    rw = ref[:, 2] - ref[:, 0]
    rh = ref[:, 3] - ref[:, 1]
    rx = ref[:, 0] + 0.5 * rw
    ry = ref[:, 1] + 0.5 * rh
    gw = gt[:, 2] - gt[:, 0]
    gh = gt[:, 3] - gt[:, 1]
    gx = gt[:, 0] + 0.5 * gw
    gy = gt[:, 1] + 0.5 * gh
    return torch.stack([wx * (gx - rx) / rw, wy * (gy - ry) / rh,
                        ww * torch.log(gw / rw), wh * torch.log(gh / rh)], dim=1)


def decode_boxes(ref: torch.Tensor, deltas: torch.Tensor, weights=RPN_BOX_WEIGHTS) -> torch.Tensor:
    wx, wy, ww, wh = weights
    rw = ref[:, 2] - ref[:, 0]
    rh = ref[:, 3] - ref[:, 1]
    rx = ref[:, 0] + 0.5 * rw
    ry = ref[:, 1] + 0.5 * rh
    dx, dy = deltas[:, 0] / wx, deltas[:, 1] / wy
    dw = (deltas[:, 2] / ww).clamp(max=_DELTA_CLAMP)
    dh = (deltas[:, 3] / wh).clamp(max=_DELTA_CLAMP)
    cx, cy = rx + dx * rw, ry + dy * rh
    w, h = rw * torch.exp(dw), rh * torch.exp(dh)
    return torch.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], dim=1)


def clip_boxes(boxes: torch.Tensor, height: int, width: int) -> torch.Tensor:
    return torch.stack([boxes[:, 0].clamp(0, width), boxes[:, 1].clamp(0, height),
                        boxes[:, 2].clamp(0, width), boxes[:, 3].clamp(0, height)], dim=1)


def rois_from_list(boxes: Sequence[torch.Tensor]) -> torch.Tensor:
    parts = []
    for i, b in enumerate(boxes):
        idx = torch.full((b.shape[0], 1), float(i), dtype=b.dtype, device=b.device)
        parts.append(torch.cat([idx, b], dim=1))
    if not parts:
        return torch.zeros((0, 5))
    return torch.cat(parts, dim=0)


# --------------------------------------------------------------------------
# batched forward pieces used by training and inference
# --------------------------------------------------------------------------

def to_tensor(samples: Sequence[ImageSample], dtype=torch.float32) -> torch.Tensor:
    """Stack ``[0, 255]`` images into a normalised ``[B, C, H, W]`` batch."""
    arrs = []
    for s in samples:
        p = np.asarray(s.pixels, dtype=np.float32)
        if s.metadata.get("scale", "uint8") == "uint8" or p.max() > 1.0:
            p = p / 255.0
        if p.ndim == 2:
            p = p[None]
        else:
            p = np.transpose(p, (2, 0, 1))
        arrs.append(p)
    return torch.as_tensor(np.stack(arrs), dtype=dtype)


def generate_proposals(logits: torch.Tensor, deltas: torch.Tensor, anchors: torch.Tensor,
                       image_size, pre_nms: int, post_nms: int, nms_iou: float = 0.7,
                       min_size: float = 1.0):
    """Per-image ``(boxes, objectness)``; detached, sorted by objectness."""
    height, width = image_size
    out = []
    with torch.no_grad():
        for b in range(logits.shape[0]):
            score = logits[b]
            k = min(pre_nms, score.shape[0])
            top = torch.topk(score, k, sorted=True).indices
            boxes = clip_boxes(decode_boxes(anchors[top], deltas[b, top]), height, width)
            prob = torch.sigmoid(score[top])
            keep = ((boxes[:, 2] - boxes[:, 0]) >= min_size) & ((boxes[:, 3] - boxes[:, 1]) >= min_size)
            boxes, prob = boxes[keep], prob[keep]
            keep = nms(boxes.float(), prob.float(), nms_iou)[:post_nms]
            out.append((boxes[keep], prob[keep]))
    return out


@dataclass
class Detections:
    """Inference output for one image (tensors, pixel units)."""
    boxes: torch.Tensor
    scores: torch.Tensor
    mask_probs: torch.Tensor  # [K, 28, 28]
    image_size: tuple

    def to_predictions(self) -> list:
        return [InstancePrediction(tuple(float(v) for v in b), m.numpy().astype(np.float64),
                                   float(s))
                for b, s, m in zip(self.boxes.cpu(), self.scores.cpu(), self.mask_probs.cpu())]

    def binary_masks(self, threshold: float = 0.5) -> np.ndarray:
        return paste_masks(self.boxes, self.mask_probs, self.image_size, threshold)


def paste_masks(boxes: torch.Tensor, mask_probs: torch.Tensor, image_size,
                threshold: float = 0.5) -> np.ndarray:
    """Resample region-grid probabilities into full-image binary masks."""
    h, w = image_size
    out = np.zeros((boxes.shape[0], h, w), dtype=bool)
    ys = torch.arange(h, dtype=torch.float32) + 0.5
    xs = torch.arange(w, dtype=torch.float32) + 0.5
    for k in range(boxes.shape[0]):
        x0, y0, x1, y1 = [float(v) for v in boxes[k]]
        if x1 - x0 <= 0 or y1 - y0 <= 0:
            continue
        # normalised grid coordinates in [-1, 1] relative to the box
        gx = (xs - x0) / (x1 - x0) * 2 - 1
        gy = (ys - y0) / (y1 - y0) * 2 - 1
        grid_y, grid_x = torch.meshgrid(gy, gx, indexing="ij")
        grid = torch.stack([grid_x, grid_y], dim=-1)[None]
        probs = F.grid_sample(mask_probs[k][None, None].float(), grid, mode="bilinear",
                              padding_mode="zeros", align_corners=False)[0, 0]
        inside = (grid_x.abs() <= 1) & (grid_y.abs() <= 1)
        out[k] = ((probs >= threshold) & inside).numpy()
    return out


def run_heads(model: DARCNN, h_p: torch.Tensor, boxes: Sequence[torch.Tensor], domain,
              image_size):
    """Box refinement then masks on refined boxes. Returns per-image lists."""
    head = model.head(domain)
    rois = rois_from_list(boxes).to(h_p.dtype)
    logits, deltas = head.forward_boxes(h_p, rois)
    refined = clip_boxes(decode_boxes(rois[:, 1:], deltas, HEAD_BOX_WEIGHTS), *image_size)
    degenerate = ((refined[:, 2] - refined[:, 0]) < 1) | ((refined[:, 3] - refined[:, 1]) < 1)
    refined = torch.where(degenerate[:, None], rois[:, 1:], refined)
    mrois = torch.cat([rois[:, :1], refined], dim=1)
    mask_logits = head.forward_masks(h_p, mrois)
    per_image = []
    counts = [int(b.shape[0]) for b in boxes]
    start = 0
    for n in counts:
        sl = slice(start, start + n)
        per_image.append((refined[sl], torch.sigmoid(logits[sl]), torch.sigmoid(mask_logits[sl])))
        start += n
    return per_image


@torch.no_grad()
def detect(model: DARCNN, x: torch.Tensor, domain, max_detections: int = 100,
           score_threshold: float = 0.0, proposals_per_image: int = 100,
           final_nms: float = 0.5) -> list:
    """Full inference through one branch; returns a :class:`Detections` per image."""
    model.check_input(x)
    was_training = model.training
    model.eval()
    try:
        h_c = model.E_c(x)
        h_p = model.private(domain)(x)
        logits, deltas = model.R(h_c)
        anchors = model.anchors(h_c.shape[2], h_c.shape[3], dtype=h_c.dtype)
        size = tuple(x.shape[-2:])
        props = generate_proposals(logits, deltas, anchors, size, pre_nms=300,
                                   post_nms=proposals_per_image)
        heads = run_heads(model, h_p, [p[0] for p in props], domain, size)
        out = []
        for boxes, scores, masks in heads:
            keep = scores >= score_threshold
            boxes, scores, masks = boxes[keep], scores[keep], masks[keep]
            keep = nms(boxes.float(), scores.float(), final_nms)[:max_detections]
            out.append(Detections(boxes[keep], scores[keep], masks[keep], size))
        return out
    finally:
        model.train(was_training)


# --------------------------------------------------------------------------
# single-sample operations
# --------------------------------------------------------------------------

@dataclass
class FeatureBundle:
    h_c: torch.Tensor
    h_p: torch.Tensor
    domain: Domain

    def __post_init__(self):
        if self.h_c.shape != self.h_p.shape:
            raise ValueError("h_c and h_p must have identical shapes")
        self.domain = Domain(self.domain)


def encode(sample, model: DARCNN) -> FeatureBundle:
    """Shared and private feature maps for an image or a pre-stacked batch."""
    if isinstance(sample, ImageSample):
        x = to_tensor([sample], dtype=next(model.parameters()).dtype)
        domain = sample.domain
        squeeze = True
    else:
        x, domain = sample
        squeeze = False
    model.check_input(x)
    h_c = model.E_c(x)
    h_p = model.private(domain)(x)
    if squeeze:
        h_c, h_p = h_c[0], h_p[0]
    return FeatureBundle(h_c, h_p, domain)


def project_for_mmd(h_c: torch.Tensor, model: DARCNN) -> torch.Tensor:
    squeeze = h_c.dim() == 3
    out = model.proj(h_c[None] if squeeze else h_c)
    return out[0] if squeeze else out


def propose_regions(h_c: torch.Tensor, model: DARCNN, max_n: int = 100,
                    image_size=None, nms_iou: float = 0.7) -> list:
    """Scored proposals in feature-grid units, NMS'd, best first."""
    squeeze = h_c.dim() == 3
    hc = h_c[None] if squeeze else h_c
    s = model.stride
    if image_size is None:
        image_size = (hc.shape[2] * s, hc.shape[3] * s)
    logits, deltas = model.R(hc)
    anchors = model.anchors(hc.shape[2], hc.shape[3], dtype=hc.dtype)
    props = generate_proposals(logits, deltas, anchors, image_size, pre_nms=300,
                               post_nms=max_n, nms_iou=nms_iou)
    out = []
    for boxes, prob in props:
        out.append([RegionProposal(tuple(float(v) / s for v in b), float(p))
                    for b, p in zip(boxes.cpu(), prob.cpu())])
    return out[0] if squeeze else out


def predict_masks(h_p: torch.Tensor, proposals: Sequence[RegionProposal], model: DARCNN,
                  domain) -> list:
    """One :class:`InstancePrediction` per proposal (boxes returned in pixel units)."""
    if not proposals:
        return []
    hp = h_p[None] if h_p.dim() == 3 else h_p
    s = model.stride
    boxes = torch.tensor([[v * s for v in p.box] for p in proposals], dtype=hp.dtype)
    size = (hp.shape[2] * s, hp.shape[3] * s)
    refined, scores, masks = (t.detach().cpu() for t in run_heads(model, hp, [boxes], domain, size)[0])
    return [InstancePrediction(tuple(float(v) for v in b), m.numpy().astype(np.float64), float(c))
            for b, c, m in zip(refined, scores, masks)]


def background_positions(box, mask_probs, feature_shape, stride: int, i: float):
    """Feature-grid cells of ``box`` whose aligned mask probability is below ``i``.

    Cells count as inside the region when their centre lies in the box; each
    cell reads the nearest mask-grid probability. Returns ``(rows, cols)``
    index arrays.
    """
    hf, wf = feature_shape
    x0, y0, x1, y1 = [float(v) for v in box]
    probs = np.asarray(mask_probs if not torch.is_tensor(mask_probs)
                       else mask_probs.detach().cpu().numpy())
    mh, mw = probs.shape
    cy = (np.arange(hf) + 0.5) * stride
    cx = (np.arange(wf) + 0.5) * stride
    rows = np.flatnonzero((cy >= y0) & (cy < y1))
    cols = np.flatnonzero((cx >= x0) & (cx < x1))
    if rows.size == 0 or cols.size == 0 or x1 <= x0 or y1 <= y0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    my = np.clip(((cy[rows] - y0) / (y1 - y0) * mh).astype(np.int64), 0, mh - 1)
    mx = np.clip(((cx[cols] - x0) / (x1 - x0) * mw).astype(np.int64), 0, mw - 1)
    grid = probs[np.ix_(my, mx)]
    rr, cc = np.nonzero(grid < i)
    return rows[rr], cols[cc]


def extract_background_features(h_p: torch.Tensor, prediction: InstancePrediction, i: float,
                                stride: int) -> torch.Tensor:
    """``[N, D]`` private feature vectors under background mask predictions."""
    rows, cols = background_positions(prediction.box, prediction.mask_probs,
                                      h_p.shape[-2:], stride, i)
    if rows.size == 0:
        return h_p.new_zeros((0, h_p.shape[0]))
    return h_p[:, torch.as_tensor(rows), torch.as_tensor(cols)].T


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

def save_checkpoint(path, model: DARCNN, config_hash: str, optimizer_state=None,
                    extra: Optional[dict] = None) -> None:
    payload = {
        "format": CKPT_FORMAT,
        "backbone": asdict(model.spec),
        "groups": {name: model.group(name).state_dict() for name in GROUPS},
        "trainable": model.trainable_groups(),
        "step": int(model.step),
        "stage_origin": int(model.stage_origin),
        "config_hash": config_hash,
        "optimizer": optimizer_state,
        "extra": extra or {},
    }
    torch.save(payload, path)


def load_checkpoint(path, expected_hash: Optional[str] = None, force: bool = False):
    """Rebuild a model from ``path``; returns ``(model, payload)``."""
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except (OSError, RuntimeError, EOFError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    if not isinstance(payload, dict) or payload.get("format") != CKPT_FORMAT:
        raise CheckpointError(f"{path}: unsupported checkpoint format {payload.get('format')!r}")
    if expected_hash is not None and payload["config_hash"] != expected_hash and not force:
        raise CheckpointError(
            f"{path}: config hash {payload['config_hash']} != {expected_hash} (use --force)")
    spec = payload["backbone"]
    spec = BackboneSpec(**{k: tuple(v) if isinstance(v, list) else v for k, v in spec.items()})
    model = DARCNN(spec)
    first = next(iter(payload["groups"].values()), None)
    if first:
        dtype = next(t.dtype for t in first.values() if t.is_floating_point())
        model.to(dtype)
    for name in GROUPS:
        model.group(name).load_state_dict(payload["groups"][name])
    model.step.fill_(payload["step"])
    model.stage_origin.fill_(payload.get("stage_origin", 0))
    model.set_trainable(payload.get("trainable", GROUPS))
    return model, payload


def clone_model(model: DARCNN) -> DARCNN:
    return copy.deepcopy(model)
