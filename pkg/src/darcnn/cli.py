"""``darcnn`` command line: data, train, pseudo, eval and reproduce."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from darcnn.config import RunConfig, load_config, write_resolved
from darcnn.core import Domain, derive_seed
from darcnn.data import (
    crop_patches, generate_synthetic, invert_intensity, load_dataset, load_synthetic_spec,
    save_dataset, source_spec, target_spec,
)
from darcnn.errors import ConfigError, DarcnnError

log = logging.getLogger("darcnn")

EXIT_OK = 0
EXIT_FAILED = 1  # a stage failed or the trend check did not hold
EXIT_USAGE = 2  # bad arguments or configuration
EXIT_ERROR = 3  # any other pipeline error, e.g. an unreadable checkpoint
METRICS = {"aji": "aji", "pixf1": "pixel_f1", "objf1": "object_f1", "maxiou": "max_iou"}


def _common(parser: argparse.ArgumentParser, top: bool) -> None:
    default = None if top else argparse.SUPPRESS
    parser.add_argument("--seed", type=int, default=default, help="master seed")
    parser.add_argument("--config", type=Path, default=default, help="run config file")
    parser.add_argument("--out", type=Path, default=default, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="darcnn", description=__doc__)
    _common(p, True)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    data = sub.add_parser("data", help="dataset generation and preprocessing")
    dsub = data.add_subparsers(dest="action", required=True)
    synth = dsub.add_parser("synth", help="generate a synthetic split")
    _common(synth, False)
    synth.add_argument("--spec", type=Path, help="synthetic spec file")
    synth.add_argument("--kind", choices=("source_shapes", "target_blobs"),
                       help="built-in spec when --spec is not given")
    synth.add_argument("--count", type=int, required=True)
    synth.add_argument("--start", type=int, default=0, help="first sample index")
    crop = dsub.add_parser("crop", help="random patches from a dataset directory")
    _common(crop, False)
    crop.add_argument("--in", dest="inp", type=Path, required=True)
    crop.add_argument("--size", type=int, nargs="+", required=True, help="patch side or H W")
    crop.add_argument("--count", type=int, required=True, help="patches per image")
    crop.add_argument("--invert", action="store_true", help="also invert intensities")

    train = sub.add_parser("train", help="training stages")
    tsub = train.add_subparsers(dest="stage", required=True)
    s1 = tsub.add_parser("stage1", help="source pretraining then joint adaptation")
    _common(s1, False)
    s1.add_argument("--source", type=Path, required=True)
    s1.add_argument("--target", type=Path, required=True)
    s1.add_argument("--ckpt", type=Path, help="start from this source-pretrained checkpoint")
    s1.add_argument("--force", action="store_true", help="accept a config-hash mismatch")
    s2 = tsub.add_parser("stage2", help="target-branch training on pseudo-labels")
    _common(s2, False)
    s2.add_argument("--ckpt", type=Path, required=True)
    s2.add_argument("--pseudo", type=Path, required=True)
    s2.add_argument("--force", action="store_true", help="accept a config-hash mismatch")

    ps = sub.add_parser("pseudo", help="generate pseudo-labels from a stage-1 checkpoint")
    _common(ps, False)
    ps.add_argument("--ckpt", type=Path, required=True)
    ps.add_argument("--data", type=Path, required=True)
    ps.add_argument("--z", type=float, help="confidence threshold (default from config)")
    ps.add_argument("--aug-mode", choices=("train_augmented", "label_augmented", "both"))

    ev = sub.add_parser("eval", help="evaluate a checkpoint on a labelled split")
    _common(ev, False)
    ev.add_argument("--ckpt", type=Path, required=True)
    ev.add_argument("--data", type=Path, required=True)
    ev.add_argument("--metrics", default="aji,pixf1,objf1")
    ev.add_argument("--report", type=Path)
    ev.add_argument("--domain", choices=("target", "source"), default="target")
    ev.add_argument("--mode", choices=("per_image", "pooled"), default="per_image")

    rp = sub.add_parser("reproduce", help="ablation plan over seeds with the trend check")
    _common(rp, False)
    rp.add_argument("--seeds", help="comma-separated seeds (default from config)")
    return p


def _resolve(args) -> RunConfig:
    rc = load_config(args.config)
    if args.seed is not None:
        rc = rc.with_seed(args.seed)
    return rc


def _out(args, fallback: str) -> Path:
    return Path(args.out) if args.out is not None else Path(fallback)


def _load_model(path, rc, force):
    from darcnn.model import load_checkpoint

    model, _ = load_checkpoint(path, rc.pipeline.config_hash(), force=force)
    return model


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_data(args, rc: RunConfig) -> int:
    out = _out(args, "data")
    write_resolved(rc, out)
    seed = rc.pipeline.seed
    if args.action == "synth":
        if args.spec:
            spec = load_synthetic_spec(args.spec)
        elif args.kind:
            spec = source_spec() if args.kind == "source_shapes" else target_spec()
        else:
            raise ConfigError("data synth needs --spec or --kind")
        samples = generate_synthetic(spec, args.count, seed, start=args.start)
    else:
        size = tuple(args.size) if len(args.size) == 2 else (args.size[0], args.size[0])
        samples = []
        for s in load_dataset(args.inp):
            for patch in crop_patches(s, size, args.count, derive_seed(seed, "crop")):
                samples.append(invert_intensity(patch) if args.invert else patch)
    save_dataset(samples, out)
    print(f"wrote {len(samples)} samples to {out}")
    return EXIT_OK


def cmd_train(args, rc: RunConfig) -> int:
    from darcnn.model import save_checkpoint
    from darcnn.plan import new_model
    from darcnn.pseudolabel import build_stage2_dataset, load_pseudo_labels
    from darcnn.data import AugmentationParams
    from darcnn.train import pretrain_source, train_stage1, train_stage2

    out = _out(args, "run")
    write_resolved(rc, out)
    cfg = rc.pipeline
    if args.stage == "stage1":
        source = load_dataset(args.source)
        target = load_dataset(args.target)
        if args.ckpt:
            model = _load_model(args.ckpt, rc, args.force)
        else:
            model = new_model(cfg)
            pretrain_source(model, source, rc.schedules["pretrain"], cfg, out / "pretrain")
            save_checkpoint(out / "pretrained.pt", model, cfg.config_hash(),
                            extra={"stage": "pretrain"})
        model.copy_source_to_target()
        result = train_stage1(model, source, target, rc.schedules["stage1"], cfg, out)
    else:
        model = _load_model(args.ckpt, rc, args.force)
        labels, images = load_pseudo_labels(args.pseudo)
        prov = labels.provenance
        data = build_stage2_dataset(labels, images, AugmentationParams(*prov.augmentation),
                                    prov.mode, prov.seed, cfg.stage2_include_clean)
        result = train_stage2(model, data, rc.schedules["stage2"], cfg, out)
    save_checkpoint(out / "model.pt", model, cfg.config_hash(),
                    extra={"stage": args.stage, "chosen_step": result.chosen_step})
    print(f"{args.stage}: {len(result.log)} steps, chosen step {result.chosen_step}, "
          f"model at {out / 'model.pt'}")
    return EXIT_OK


def cmd_pseudo(args, rc: RunConfig) -> int:
    from darcnn.pseudolabel import generate_pseudo_labels, save_pseudo_labels

    changes = {}
    if args.z is not None:
        changes["z_pseudo_conf"] = args.z
    if args.aug_mode:
        changes["aug_mode"] = args.aug_mode
    rc = RunConfig(rc.pipeline.replace(**changes), rc.schedules, rc.plan)
    out = _out(args, "pseudo")
    write_resolved(rc, out)
    model = _load_model(args.ckpt, rc, force=True)  # z and aug mode may legitimately differ
    images = [s.replace(annotations=None) for s in load_dataset(args.data)]
    labels = generate_pseudo_labels(model, images, rc.pipeline,
                                    checkpoint_hash=model.param_hash(("E_c", "E_p_t", "R", "M_t")))
    save_pseudo_labels(labels, images, out)
    print(f"kept {labels.total()} pseudo-labels over {len(images)} images in {out}")
    return EXIT_OK


def cmd_eval(args, rc: RunConfig) -> int:
    from darcnn.eval import evaluate_model
    from darcnn.plan import REPORT_SCHEMA

    wanted = [m.strip() for m in args.metrics.split(",") if m.strip()]
    unknown = [m for m in wanted if m not in METRICS]
    if unknown:
        raise ConfigError(f"unknown metrics {unknown}; choose from {sorted(METRICS)}")
    report_path = args.report or _out(args, "eval") / "report.json"
    out = _out(args, str(report_path.parent))
    write_resolved(rc, out)
    model = _load_model(args.ckpt, rc, force=True)
    samples = load_dataset(args.data)
    res = evaluate_model(model, samples, rc.pipeline, Domain(args.domain), args.mode)
    values = {m: getattr(res, METRICS[m]) for m in wanted}
    report = {"schema": REPORT_SCHEMA, "checkpoint": str(args.ckpt), "data": str(args.data),
              "domain": args.domain, "mode": args.mode, "metrics": values,
              "per_image": res.per_image}
    report_path.parent.mkdir(parents=True, exist_ok=True)
    report_path.write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    for m, v in values.items():
        print(f"{m}: {'n/a' if v is None else f'{v:.4f}'}")
    return EXIT_OK


def cmd_reproduce(args, rc: RunConfig) -> int:
    from darcnn.plan import reproduce_trends

    seeds = None
    if args.seeds:
        seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    elif args.seed is not None:
        seeds = [args.seed]
    summary = reproduce_trends(rc, _out(args, "reproduce"), seeds)
    print("\n".join(summary.lines()))
    return EXIT_OK if summary.passed else EXIT_FAILED


COMMANDS = {"data": cmd_data, "train": cmd_train, "pseudo": cmd_pseudo, "eval": cmd_eval,
            "reproduce": cmd_reproduce}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        rc = _resolve(args)
        return COMMANDS[args.command](args, rc)
    except ConfigError as exc:
        print(f"darcnn: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DarcnnError as exc:
        print(f"darcnn: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
