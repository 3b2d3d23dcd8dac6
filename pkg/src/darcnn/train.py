"""Source pretraining, joint stage-1 adaptation, frozen-source stage-2 training."""

from __future__ import annotations

import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from darcnn.core import (
    Domain, ImageSample, PipelineConfig, access_context, box_to_continuous, derive_seed, rng_for,
)
from darcnn.errors import FreezeViolationError, GuardError, NumericalError
from darcnn.losses import (
    KernelSpec, LossReport, branch_difference, combine_losses, difference_loss, mmd_loss, source_supervised_loss,
    target_consistency_batch, warmup_alpha,
)
from darcnn.model import (
    DARCNN, GROUPS, SHARED, SOURCE_BRANCH, TARGET_BRANCH, FeatureBundle, save_checkpoint,
    to_tensor,
)

log = logging.getLogger(__name__)


@dataclass
class TrainSchedule:
    stage: str = "stage1"  # pretrain | stage1 | stage2
    max_epochs: float = 1.0
    batch_size: int = 8
    optimizer: str = "adam"  # adam | sgd
    learning_rate: Optional[float] = None  # None -> PipelineConfig.learning_rate
    checkpoint_interval_epochs: Optional[float] = None
    plateau_window_epochs: Optional[float] = None
    plateau_epsilon: Optional[float] = None
    stop_on_plateau: bool = True
    max_steps: Optional[int] = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.stage not in ("pretrain", "stage1", "stage2"):
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class TrainResult:
    model: DARCNN
    log: list
    checkpoints: list
    chosen_step: int
    steps_per_epoch: int
    plateau_step: Optional[int] = None
    optimizer_state: Optional[dict] = None


# --------------------------------------------------------------------------
# plateau rule
# --------------------------------------------------------------------------

def moving_average(values: Sequence[float], window: int) -> np.ndarray:
    """Trailing mean; entry ``t`` averages ``values[t-window+1 : t+1]``."""
    v = np.asarray(values, dtype=np.float64)
    if window < 1 or v.size < window:
        return np.zeros(0)
    c = np.concatenate([[0.0], np.cumsum(v)])
    return (c[window:] - c[:-window]) / window


def detect_plateau(loss_log: Sequence[float], window: int, epsilon: float) -> Optional[int]:
    """Onset step of the first flat stretch, or ``None``.

    The trailing moving average at ``t`` is compared with the one a window
    earlier; the first ``t`` whose relative improvement is below ``epsilon``
    marks a plateau starting at ``t - 2*window + 1``, the first step of the
    two compared windows.
    """
    ma = moving_average(loss_log, window)  # ma[j] ends at step j + window - 1
    for j in range(window, ma.size):
        prev, now = ma[j - window], ma[j]
        rel = (prev - now) / max(abs(prev), 1e-12)
        if rel < epsilon:
            t = j + window - 1
            return t - 2 * window + 1
    return None


def stop_on_plateau(loss_log: Sequence[float], window: int, epsilon: float,
                    checkpoints: Sequence[int], rollback: int) -> int:
    """Checkpoint step nearest to ``plateau_onset - rollback``; the last checkpoint
    when no plateau is found."""
    if not checkpoints:
        raise ValueError("no checkpoints to choose from")
    ckpts = sorted(checkpoints)
    onset = detect_plateau(loss_log, window, epsilon)
    if onset is None:
        return ckpts[-1]
    goal = onset - rollback
    return min(ckpts, key=lambda s: (abs(s - goal), s))


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------

def sample_targets(samples: Sequence[ImageSample], dtype=torch.float32) -> list:
    out = []
    for s in samples:
        anns = s.annotations
        if anns is None:
            out.append(None)
            continue
        h, w = s.shape
        if anns:
            boxes = torch.tensor([box_to_continuous(a.box) for a in anns], dtype=dtype)
            masks = torch.as_tensor(np.stack([a.mask for a in anns]))
        else:
            boxes = torch.zeros((0, 4), dtype=dtype)
            masks = torch.zeros((0, h, w), dtype=torch.bool)
        out.append({"boxes": boxes, "masks": masks})
    return out


def batch_indices(n: int, batch_size: int, step: int, seed: int, stream: str) -> np.ndarray:
    """Stateless epoch-wise shuffling: the batch for ``step`` depends only on its arguments."""
    spe = max(1, math.ceil(n / batch_size))
    epoch, k = divmod(step, spe)
    perm = rng_for(seed, stream, "perm", epoch).permutation(n)
    idx = perm[k * batch_size:(k + 1) * batch_size]
    if idx.size < batch_size:
        idx = np.concatenate([idx, perm[:batch_size - idx.size]])
    return idx


def _make_optimizer(params, schedule: TrainSchedule, lr: float):
    if schedule.optimizer == "sgd":
        return torch.optim.SGD(params, lr=lr)
    return torch.optim.Adam(params, lr=lr)


def _snapshot(model: DARCNN, optimizer) -> bytes:
    buf = io.BytesIO()
    torch.save({"model": model.state_dict(), "optimizer": optimizer.state_dict()}, buf)
    return buf.getvalue()


def _restore(model: DARCNN, blob: bytes, optimizer=None) -> dict:
    payload = torch.load(io.BytesIO(blob), weights_only=False)
    model.load_state_dict(payload["model"])
    if optimizer is not None:
        optimizer.load_state_dict(payload["optimizer"])
    return payload["optimizer"]


class _Loop:
    """Shared driver: stepping, logging, checkpoints and the plateau rule."""

    def __init__(self, model: DARCNN, schedule: TrainSchedule, cfg: PipelineConfig,
                 steps_per_epoch: int, run_dir=None, optimizer_state=None,
                 on_checkpoint: Optional[Callable] = None):
        self.model = model
        self.schedule = schedule
        self.cfg = cfg
        self.spe = steps_per_epoch
        self.run_dir = Path(run_dir) if run_dir else None
        self.on_checkpoint = on_checkpoint
        lr = schedule.learning_rate if schedule.learning_rate is not None else cfg.learning_rate
        params = [p for p in model.parameters() if p.requires_grad]
        self.optimizer = _make_optimizer(params, schedule, lr)
        if optimizer_state is not None:
            self.optimizer.load_state_dict(optimizer_state)
        self.reports: list = []
        self.snapshots: dict = {}
        self.start = int(model.step)
        interval = schedule.checkpoint_interval_epochs or cfg.checkpoint_interval_epochs
        self.ckpt_every = max(1, round(interval * steps_per_epoch))
        window = schedule.plateau_window_epochs or cfg.plateau_window_epochs
        self.window = max(1, round(window * steps_per_epoch))
        self.epsilon = (schedule.plateau_epsilon if schedule.plateau_epsilon is not None
                        else cfg.plateau_epsilon)
        self.rollback = round(cfg.rollback_epochs * steps_per_epoch)
        total = math.ceil(schedule.max_epochs * steps_per_epoch)
        if schedule.max_steps is not None:
            total = min(total, schedule.max_steps)
        self.end = self.start + total
        if self.run_dir:
            (self.run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)

    def checkpoint(self, step: int) -> None:
        if self.on_checkpoint:
            self.on_checkpoint(step)
        self.snapshots[step] = _snapshot(self.model, self.optimizer)
        if self.run_dir:
            save_checkpoint(self.run_dir / "checkpoints" / f"step_{step:07d}.pt", self.model,
                            self.cfg.config_hash(), self.optimizer.state_dict(),
                            {"stage": self.schedule.stage})

    def _append_log(self, report: LossReport) -> None:
        if self.run_dir:
            with open(self.run_dir / "loss_log.jsonl", "a", encoding="utf-8") as fh:
                fh.write(json.dumps(report.to_record()) + "\n")

    def run(self, step_fn: Callable[[int], tuple]) -> TrainResult:
        self.checkpoint(self.start)
        plateau = None
        chosen = None
        step = self.start
        while step < self.end:
            self.model.train()
            step_fn_prepare = getattr(step_fn, "prepare", None)
            if step_fn_prepare:
                step_fn_prepare()
            total, report = step_fn(step)
            self.optimizer.zero_grad(set_to_none=True)
            total.backward()
            self.optimizer.step()
            step += 1
            self.model.step.fill_(step)
            self.reports.append(report)
            self._append_log(report)
            if (step - self.start) % self.ckpt_every == 0 or step == self.end:
                self.checkpoint(step)
                if self.schedule.stop_on_plateau and len(self.snapshots) >= 2:
                    onset = detect_plateau([r.total for r in self.reports], self.window,
                                           self.epsilon)
                    if onset is not None:
                        plateau = self.start + onset
                        break
        ckpts = sorted(self.snapshots)
        if self.schedule.stop_on_plateau and len(ckpts) >= 2:
            local = stop_on_plateau([r.total for r in self.reports], self.window, self.epsilon,
                                    [c - self.start for c in ckpts], self.rollback)
            chosen = self.start + local
        else:
            chosen = ckpts[-1]
        opt_state = _restore(self.model, self.snapshots[chosen], self.optimizer)
        self.model.step.fill_(chosen)
        if self.run_dir:
            (self.run_dir / "chosen_checkpoint").write_text(f"step_{chosen:07d}.pt\n")
        return TrainResult(self.model, self.reports, ckpts, chosen, self.spe, plateau, opt_state)


def _guarded(fn):
    def wrapper(*args, **kwargs):
        with access_context("trainer"):
            return fn(*args, **kwargs)
    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


def _dtype(model: DARCNN):
    return next(model.parameters()).dtype


# --------------------------------------------------------------------------
# stages
# --------------------------------------------------------------------------

@_guarded
def pretrain_source(model: DARCNN, source_data: Sequence[ImageSample], schedule: TrainSchedule,
                    cfg: PipelineConfig, run_dir=None, optimizer_state=None,
                    with_difference: bool = True) -> TrainResult:
    """Supervised two-step detector training on the source domain only.

    With ``with_difference`` the source half of the orthogonality term is
    included (weight ``beta``), so the private source features already sit
    apart from the shared ones when target adaptation starts.
    """
    model.set_trainable(("E_c", "E_p_s", "R", "M_s"))
    dtype = _dtype(model)
    x_all = to_tensor(source_data, dtype)
    targets = sample_targets(source_data, dtype)
    if any(t is None for t in targets):
        raise GuardError("source pretraining requires annotated source images")
    spe = max(1, math.ceil(len(source_data) / schedule.batch_size))
    size = tuple(x_all.shape[-2:])

    def step_fn(step):
        idx = batch_indices(len(source_data), schedule.batch_size, step, cfg.seed, "pretrain")
        gen = torch.Generator().manual_seed(derive_seed(cfg.seed, "pretrain", "roi", step))
        x = x_all[idx]
        h_c = model.E_c(x)
        h_p = model.E_p_s(x)
        terms = source_supervised_loss(model, h_c, h_p, [targets[i] for i in idx], gen,
                                       "source", size)
        l_source = sum(terms.values())
        zero = l_source.new_zeros(())
        if with_difference and cfg.beta:
            l_diff = branch_difference(h_c, h_p)
            return combine_losses(zero, l_diff, zero, l_source, 0.0, cfg.beta, 0.0, step)
        return combine_losses(zero, zero, zero, l_source, 0.0, 0.0, 0.0, step)

    return _Loop(model, schedule, cfg, spe, run_dir, optimizer_state).run(step_fn)


@_guarded
def train_stage1(model: DARCNN, source_data: Sequence[ImageSample],
                 target_data: Sequence[ImageSample], schedule: TrainSchedule,
                 cfg: PipelineConfig, run_dir=None, optimizer_state=None) -> TrainResult:
    """Joint source/target training with all four loss terms.

    Each step draws one source and one target batch; the shared encoder sees
    both in a single forward pass.
    """
    model.set_trainable(GROUPS)
    dtype = _dtype(model)
    xs_all = to_tensor(source_data, dtype)
    xt_all = to_tensor(target_data, dtype)
    targets = sample_targets(source_data, dtype)
    if any(t is None for t in targets):
        raise GuardError("stage 1 requires annotated source images")
    bs = schedule.batch_size
    spe = max(1, math.ceil(len(target_data) / bs))
    size = tuple(xs_all.shape[-2:])
    kernel = KernelSpec(multipliers=tuple(cfg.mmd_multipliers))
    if optimizer_state is None:  # fresh stage; a resumed one keeps its origin
        model.stage_origin.fill_(int(model.step))
    first = int(model.stage_origin)  # warmup counts from the start of this stage

    def step_fn(step):
        i_s = batch_indices(len(source_data), bs, step, cfg.seed, "stage1-source")
        i_t = batch_indices(len(target_data), bs, step, cfg.seed, "stage1-target")
        gen = torch.Generator().manual_seed(derive_seed(cfg.seed, "stage1", "roi", step))
        x_s, x_t = xs_all[i_s], xt_all[i_t]
        h_c = model.E_c(torch.cat([x_s, x_t]))
        h_c_s, h_c_t = h_c[:bs], h_c[bs:]
        h_p_s = model.E_p_s(x_s)
        h_p_t = model.E_p_t(x_t)
        terms = source_supervised_loss(model, h_c_s, h_p_s, [targets[i] for i in i_s], gen,
                                       "source", size)
        l_source = sum(terms.values())
        p_s, p_t = model.proj(h_c_s), model.proj(h_c_t)
        if cfg.mmd_level == "position":
            p_s, p_t = p_s.reshape(-1, 1), p_t.reshape(-1, 1)
        else:
            p_s, p_t = p_s.flatten(1), p_t.flatten(1)
        l_sim = mmd_loss(p_s, p_t, kernel)
        l_diff = difference_loss(FeatureBundle(h_c_s, h_p_s, "source"),
                                 FeatureBundle(h_c_t, h_p_t, "target"))
        if cfg.gamma:
            l_target = target_consistency_batch(model, h_c_t, h_p_t, cfg, size)
        else:
            l_target = l_source.new_zeros(())
        alpha = warmup_alpha(step - first, spe, cfg)
        return combine_losses(l_sim, l_diff, l_target, l_source, alpha, cfg.beta, cfg.gamma, step)

    return _Loop(model, schedule, cfg, spe, run_dir, optimizer_state).run(step_fn)


def stage2_trainable(cfg: PipelineConfig) -> tuple:
    return TARGET_BRANCH if cfg.stage2_freeze_shared else TARGET_BRANCH + ("E_c", "R")


@_guarded
def train_stage2(model: DARCNN, stage2_data: Sequence[ImageSample], schedule: TrainSchedule,
                 cfg: PipelineConfig, run_dir=None, optimizer_state=None) -> TrainResult:
    """Supervised training of the target branch on pseudo-labelled images.

    Frozen groups are hashed before training and re-checked at every
    checkpoint.
    """
    trainable = stage2_trainable(cfg)
    frozen = tuple(g for g in GROUPS if g not in trainable)
    model.set_trainable(trainable)
    before = model.param_hash(frozen)
    dtype = _dtype(model)
    x_all = to_tensor(stage2_data, dtype)
    targets = sample_targets(stage2_data, dtype)
    if any(t is None for t in targets):
        raise GuardError("stage 2 needs pseudo-labels for every image")
    bs = schedule.batch_size
    spe = max(1, math.ceil(len(stage2_data) / bs))
    size = tuple(x_all.shape[-2:])

    def check_freeze(step):
        if model.param_hash(frozen) != before:
            raise FreezeViolationError(f"frozen groups changed by step {step}")

    def step_fn(step):
        idx = batch_indices(len(stage2_data), bs, step, cfg.seed, "stage2")
        gen = torch.Generator().manual_seed(derive_seed(cfg.seed, "stage2", "roi", step))
        x = x_all[idx]
        h_c = model.E_c(x)
        h_p = model.E_p_t(x)
        terms = source_supervised_loss(model, h_c, h_p, [targets[i] for i in idx], gen,
                                       "target", size)
        l_sup = sum(terms.values())
        zero = l_sup.new_zeros(())
        if cfg.stage2_keep_target_loss and cfg.gamma:
            l_target = target_consistency_batch(model, h_c, h_p, cfg, size)
            return combine_losses(zero, zero, l_target, l_sup, 0.0, 0.0, cfg.gamma, step)
        return combine_losses(zero, zero, zero, l_sup, 0.0, 0.0, 0.0, step)

    def prepare():
        for name in frozen:
            model.group(name).eval()

    step_fn.prepare = prepare
    loop = _Loop(model, schedule, cfg, spe, run_dir, optimizer_state, on_checkpoint=check_freeze)
    result = loop.run(step_fn)
    check_freeze(result.chosen_step)
    return result
