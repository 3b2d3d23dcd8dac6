"""Ablation harness: source-only baseline, stage-1 variants and stage-2 variants."""

from __future__ import annotations

import json
import logging
import time
import traceback
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import torch

from darcnn.config import RunConfig, write_resolved
from darcnn.core import Domain, PipelineConfig, derive_seed, validate_config
from darcnn.data import AugmentationParams, generate_synthetic, source_spec, target_spec
from darcnn.errors import ConfigError
from darcnn.eval import evaluate_model
from darcnn.model import DARCNN, BackboneSpec, clone_model, load_checkpoint, save_checkpoint
from darcnn.pseudolabel import build_stage2_dataset, generate_pseudo_labels
from darcnn.train import pretrain_source, train_stage1, train_stage2

log = logging.getLogger(__name__)

REPORT_SCHEMA = "darcnn-report/1"
BASELINE = "source_only"
STAGE1_ROWS = ("domain_sim_only", "bg_consistency_only", "full_stage1")
STAGE2_ROWS = ("pseudo_no_aug", "full_stage2")
ABLATIONS = STAGE1_ROWS + STAGE2_ROWS
ROW_STAGE = {BASELINE: "pretrain", **{r: "stage1" for r in STAGE1_ROWS},
             **{r: "stage2" for r in STAGE2_ROWS}}
# pairs (lower, higher) that the trend check requires
REQUIRED_ORDER = ((BASELINE, "full_stage1"), ("full_stage1", "full_stage2"))


def stage1_config(cfg: PipelineConfig, row: str) -> PipelineConfig:
    """Loss weights for a stage-1 ablation row."""
    if row == "domain_sim_only":  # domain separation module, no background consistency
        return cfg.replace(gamma=0.0)
    if row == "bg_consistency_only":  # background consistency, no separation losses
        return cfg.replace(alpha_target=0.0, alpha_init=0.0, beta=0.0)
    if row == "full_stage1":
        return cfg
    raise ConfigError(f"not a stage-1 row: {row}")


@dataclass
class ExperimentPlan:
    config: RunConfig
    out_dir: Path
    ablations: tuple = ABLATIONS
    eval_checkpoint: Optional[Path] = None  # eval-only plan when set
    source_data: Optional[list] = None
    target_data: Optional[list] = None
    val_data: Optional[list] = None
    save_checkpoints: bool = True

    def __post_init__(self):
        self.out_dir = Path(self.out_dir)
        unknown = [a for a in self.ablations if a not in ABLATIONS]
        if unknown:
            raise ConfigError(f"unknown ablation switches: {unknown}")
        problems = validate_config(self.config.pipeline)
        for row in self.ablations:
            if row in STAGE1_ROWS:
                problems += validate_config(stage1_config(self.config.pipeline, row))
        if problems:
            raise ConfigError("; ".join(sorted(set(problems))))


@dataclass
class RowResult:
    name: str
    stage: str
    status: str = "ok"  # ok | failed | skipped
    aji: Optional[float] = None
    pixel_f1: Optional[float] = None
    object_f1: Optional[float] = None
    steps: int = 0
    seconds: float = 0.0
    error: Optional[str] = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class PlanReport:
    seed: int
    config_hash: str
    rows: list

    @property
    def failed(self) -> bool:
        return any(r.status == "failed" for r in self.rows)

    def row(self, name: str) -> Optional[RowResult]:
        return next((r for r in self.rows if r.name == name), None)

    def to_dict(self) -> dict:
        return {"schema": REPORT_SCHEMA, "seed": self.seed, "config_hash": self.config_hash,
                "failed": self.failed, "rows": [r.to_dict() for r in self.rows]}

    def markdown(self) -> str:
        lines = [f"Target validation metrics (seed {self.seed})", "",
                 "| method | stage | AJI | pixel-F1 | object-F1 | status |",
                 "|---|---|---|---|---|---|"]
        for r in self.rows:
            f = lambda v: "-" if v is None else f"{v:.4f}"  # noqa: E731
            lines.append(f"| {r.name} | {r.stage} | {f(r.aji)} | {f(r.pixel_f1)} | "
                         f"{f(r.object_f1)} | {r.status} |")
        return "\n".join(lines) + "\n"

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(json.dumps(self.to_dict(), indent=2) + "\n",
                                         encoding="utf-8")
        (out / "report.md").write_text(self.markdown(), encoding="utf-8")


def synthetic_splits(plan_cfg: RunConfig, seed: int):
    p = plan_cfg.plan
    src = generate_synthetic(source_spec(), p.source_count, seed)
    tgt = generate_synthetic(target_spec(), p.target_count, seed)
    val = generate_synthetic(target_spec(split="val"), p.val_count, seed, start=10 ** 6)
    return src, tgt, val


def _metrics(row: RowResult, model, val, cfg, domain) -> None:
    res = evaluate_model(model, val, cfg, domain)
    row.aji, row.pixel_f1, row.object_f1 = res.aji, res.pixel_f1, res.object_f1


def new_model(cfg: PipelineConfig) -> DARCNN:
    torch.manual_seed(derive_seed(cfg.seed, "init"))
    return DARCNN(BackboneSpec(feature_depth=cfg.feature_depth))


def run_plan(plan: ExperimentPlan) -> PlanReport:
    """Run every requested row in dependency order and always write a report.

    Stage-1 rows start from the source-pretrained model; stage-2 rows start
    from ``full_stage1`` and train on its pseudo-labels. A failed row marks
    its dependants as skipped.
    """
    rc = plan.config
    cfg = rc.pipeline
    out = plan.out_dir
    write_resolved(rc, out)
    rows: list = []
    report = PlanReport(cfg.seed, cfg.config_hash(), rows)

    def attempt(row: RowResult, fn):
        t0 = time.perf_counter()
        try:
            fn(row)
        except Exception as exc:  # recorded, never raised: the report must be written
            row.status = "failed"
            row.error = f"{type(exc).__name__}: {exc}"
            log.error("%s failed: %s", row.name, row.error)
            log.debug("%s", traceback.format_exc())
        row.seconds = round(time.perf_counter() - t0, 3)
        rows.append(row)
        report.write(out)
        return row.status == "ok"

    if plan.val_data is None:
        src, tgt, val = synthetic_splits(rc, cfg.seed)
    else:
        src, tgt, val = plan.source_data, plan.target_data, plan.val_data

    if plan.eval_checkpoint is not None:
        def eval_only(row):
            model, _ = load_checkpoint(plan.eval_checkpoint)
            _metrics(row, model, val, cfg, Domain.TARGET)
        attempt(RowResult("eval", "eval"), eval_only)
        return report

    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    models: dict = {}

    def save(name, model):
        if plan.save_checkpoints:
            save_checkpoint(ckpt_dir / f"{name}.pt", model, cfg.config_hash(), extra={"row": name})

    def pretrain(row):
        model = new_model(cfg)
        res = pretrain_source(model, src, rc.schedules["pretrain"], cfg)
        row.steps = len(res.log)
        _metrics(row, model, val, cfg, Domain.SOURCE)
        models[BASELINE] = model
        save(BASELINE, model)

    base_ok = attempt(RowResult(BASELINE, "pretrain"), pretrain)

    for name in STAGE1_ROWS:
        if name not in plan.ablations and not (name == "full_stage1" and any(
                r in plan.ablations for r in STAGE2_ROWS)):
            continue
        row = RowResult(name, "stage1")
        if not base_ok:
            row.status, row.error = "skipped", f"depends on {BASELINE}"
            rows.append(row)
            continue

        def stage1(row, name=name):
            c = stage1_config(cfg, name)
            model = clone_model(models[BASELINE])
            model.copy_source_to_target()
            res = train_stage1(model, src, tgt, rc.schedules["stage1"], c)
            row.steps = len(res.log)
            _metrics(row, model, val, c, Domain.TARGET)
            models[name] = model
            save(name, model)

        attempt(row, stage1)

    labels = None
    for name in STAGE2_ROWS:
        if name not in plan.ablations:
            continue
        row = RowResult(name, "stage2")
        if "full_stage1" not in models:
            row.status, row.error = "skipped", "depends on full_stage1"
            rows.append(row)
            continue

        def stage2(row, name=name):
            nonlocal labels
            source = models["full_stage1"]
            if labels is None:
                labels = generate_pseudo_labels(source, tgt, cfg, cfg.seed,
                                                checkpoint_hash=source.param_hash(
                                                    ("E_c", "E_p_t", "R", "M_t")))
            row.extra["pseudo_labels"] = labels.total()
            params = (AugmentationParams.identity() if name == "pseudo_no_aug"
                      else AugmentationParams.from_config(cfg))
            data = build_stage2_dataset(labels, tgt, params, cfg.aug_mode, cfg.seed,
                                        include_clean=cfg.stage2_include_clean)
            model = clone_model(source)
            res = train_stage2(model, data, rc.schedules["stage2"], cfg)
            row.steps = len(res.log)
            _metrics(row, model, val, cfg, Domain.TARGET)
            save(name, model)

        attempt(row, stage2)

    wanted = {BASELINE, *plan.ablations}
    report.rows[:] = [r for r in rows if r.name in wanted]
    report.write(out)
    return report


# --------------------------------------------------------------------------
# trend reproduction
# --------------------------------------------------------------------------

@dataclass
class SeedVerdict:
    seed: int
    passed: bool
    violations: list
    aji: dict
    notes: list = field(default_factory=list)


@dataclass
class TrendSummary:
    verdicts: list
    required_passes: int
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return sum(v.passed for v in self.verdicts) >= self.required_passes

    def lines(self) -> list:
        out = []
        for v in self.verdicts:
            vals = ", ".join(f"{k}={a:.4f}" if a is not None else f"{k}=n/a"
                             for k, a in v.aji.items())
            out.append(f"seed {v.seed}: {'PASS' if v.passed else 'FAIL'} [{vals}]")
            out.extend(f"  violation: {x}" for x in v.violations)
            out.extend(f"  note: {x}" for x in v.notes)
        n = sum(v.passed for v in self.verdicts)
        out.append(f"{'PASS' if self.passed else 'FAIL'}: trend held in {n} of "
                   f"{len(self.verdicts)} seeds (need {self.required_passes})")
        return out

    def to_dict(self) -> dict:
        return {"schema": REPORT_SCHEMA, "passed": self.passed,
                "required_passes": self.required_passes, "seconds": self.seconds,
                "seeds": [v.__dict__ for v in self.verdicts]}


def check_trend(report: PlanReport, min_gain: float) -> SeedVerdict:
    """Required ordering on target-val AJI; the finer stage-1 ordering is advisory."""
    aji = {r.name: r.aji for r in report.rows}
    violations, notes = [], []
    for r in report.rows:
        if r.status != "ok":
            violations.append(f"{r.name} {r.status}: {r.error}")
    for lo, hi in REQUIRED_ORDER:
        a, b = aji.get(lo), aji.get(hi)
        if a is None or b is None:
            if not any(lo in v or hi in v for v in violations):
                violations.append(f"{lo} < {hi}: missing value")
        elif not a < b:
            violations.append(f"{lo} < {hi} violated ({a:.4f} >= {b:.4f})")
    a, b = aji.get(BASELINE), aji.get("full_stage2")
    if a is not None and b is not None and not b - a >= min_gain:
        violations.append(f"full_stage2 - {BASELINE} = {b - a:.4f} < {min_gain}")
    full1 = aji.get("full_stage1")
    for name in ("domain_sim_only", "bg_consistency_only"):
        v = aji.get(name)
        if v is None or a is None or full1 is None:
            continue
        if not a < v:
            notes.append(f"{BASELINE} < {name} does not hold ({a:.4f} >= {v:.4f})")
        if not v <= full1:
            notes.append(f"{name} <= full_stage1 does not hold ({v:.4f} > {full1:.4f})")
    v = aji.get("pseudo_no_aug")
    if v is not None and full1 is not None and not full1 <= v:
        notes.append(f"full_stage1 <= pseudo_no_aug does not hold ({full1:.4f} > {v:.4f})")
    return SeedVerdict(report.seed, not violations, violations, aji, notes)


def reproduce_trends(rc: RunConfig, out_dir, seeds: Optional[Sequence[int]] = None,
                     required_passes: Optional[int] = None) -> TrendSummary:
    """Run the full ablation plan per seed and check the ordinal AJI trend."""
    t0 = time.perf_counter()
    seeds = tuple(rc.plan.seeds if seeds is None else seeds)
    if required_passes is None:
        required_passes = max(1, (2 * len(seeds) + 2) // 3)
    out = Path(out_dir)
    write_resolved(rc, out)
    verdicts = []
    for seed in seeds:
        sub = rc.with_seed(seed)
        report = run_plan(ExperimentPlan(sub, out / f"seed_{seed}", save_checkpoints=False))
        verdicts.append(check_trend(report, rc.plan.min_gain))
        log.info("seed %d: %s", seed, "PASS" if verdicts[-1].passed else "FAIL")
    summary = TrendSummary(verdicts, required_passes, round(time.perf_counter() - t0, 1))
    (out / "trend.json").write_text(json.dumps(summary.to_dict(), indent=2) + "\n",
                                    encoding="utf-8")
    (out / "trend.txt").write_text("\n".join(summary.lines()) + "\n", encoding="utf-8")
    return summary
