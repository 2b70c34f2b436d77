"""Command-line entry point.

Subcommands mirror the pipeline stages:

    gen         render a procedural toy dataset
    pretrain    train the detector on a labeled source dataset
    finetune    fine-tune a detector (on real target or generated images)
    train-gan   train the translation GAN (optionally detector-guided)
    translate   map a labeled dataset through a trained generator
    eval        AP report for a detector checkpoint on a test dataset
    experiment  incremental-label comparison across methods and seeds

Exit codes: 0 success, 2 validation/missing input, 3 stage-order or frozen
contract violation, 4 data-integrity failure.

Every stage command writes the resolved config, a run-info record, and a
completion marker into its output directory; --resume skips a run whose
marker matches the current config.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

from . import __version__
from .config import RunConfig
from .data import load_domain
from .errors import (
    ContractViolationError,
    DataIntegrityError,
    ParseError,
    StageOrderError,
    ValidationError,
)
from .evaluation import evaluate_model
from .nets import load_checkpoint
from .pipeline import (
    ExperimentResult,
    embed_domain_knowledge,
    finetune_on_generated,
    pretrain_detector,
    run_incremental_experiment,
    train_semgan,
    translate_dataset,
)
from .scenegen import SceneSpec, generate_dataset


def _resolve_out(raw: str, cfg: RunConfig) -> Path:
    path = Path(raw)
    if path.is_absolute():
        return path
    root = os.environ.get("SEMGAN_OUT_ROOT") or cfg.section("data")["out_root"]
    return Path(root) / path


def _config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(cfg.to_yaml().encode()).hexdigest()[:12]


def _start_run(out: Path, cfg: RunConfig, command: str, seeds: list[int],
               resume: bool) -> bool:
    """Prepare the run directory; returns True when a matching completed run
    already exists and --resume was given."""
    marker = out / "done.json"
    chash = _config_hash(cfg)
    if resume and marker.exists():
        done = json.loads(marker.read_text())
        if done.get("config_hash") == chash:
            print(f"{command}: already complete in {out} (config {chash}), skipping")
            return True
    out.mkdir(parents=True, exist_ok=True)
    if marker.exists():
        marker.unlink()
    cfg.save(out / "resolved_config.yaml")
    (out / "run_info.json").write_text(json.dumps({
        "version": __version__,
        "command": command,
        "seeds": seeds,
        "config_hash": chash,
    }, indent=2) + "\n")
    return False


def _finish_run(out: Path, cfg: RunConfig, command: str, outputs: dict) -> None:
    (out / "done.json").write_text(json.dumps({
        "stage": command,
        "config_hash": _config_hash(cfg),
        "outputs": outputs,
    }, indent=2) + "\n")


def _require_path(raw: str | None, flag: str) -> Path:
    if raw is None:
        raise ValidationError(flag, "required input missing")
    path = Path(raw)
    if not path.exists():
        raise ValidationError(flag, f"{path} does not exist")
    return path


def cmd_gen(cfg: RunConfig, args) -> int:
    section = dict(cfg.section("scenegen"))
    if args.style is not None:
        section["style"] = args.style
    if args.count is not None:
        section["count"] = args.count
    if args.seed is not None:
        section["seed"] = args.seed
    spec = SceneSpec(style=section["style"], seed=section["seed"],
                     canvas_size=section["canvas_size"])
    out = _resolve_out(args.out, cfg)
    manifest = generate_dataset(spec, section["count"], out)
    print(f"wrote {len(manifest['entries'])} {section['style']} images to {out}")
    return 0


def cmd_pretrain(cfg: RunConfig, args) -> int:
    source_dir = _require_path(args.source, "source")
    out = _resolve_out(args.out, cfg)
    train_cfg = cfg.train_config(seed=args.seed)
    if _start_run(out, cfg, "pretrain", [train_cfg.seed], args.resume):
        return 0
    source = load_domain(source_dir, labeled=True)
    detector = pretrain_detector(
        source, train_cfg, val_count=args.val_count,
        det_arch=cfg.section("arch")["detector"], out_dir=out)
    _finish_run(out, cfg, "pretrain", {"detector": detector.param_hash()})
    print(f"pretrained detector saved to {out / 'detector.npz'}")
    return 0


def cmd_finetune(cfg: RunConfig, args) -> int:
    if (args.train is None) == (args.generated is None):
        raise ValidationError("train", "pass exactly one of --train or --generated")
    detector = load_checkpoint(_require_path(args.detector, "detector"))
    out = _resolve_out(args.out, cfg)
    train_cfg = cfg.train_config(seed=args.seed)
    if _start_run(out, cfg, "finetune", [train_cfg.seed], args.resume):
        return 0
    if args.train is not None:
        train = load_domain(_require_path(args.train, "train"), labeled=True)
        valid = load_domain(_require_path(args.valid, "valid"), labeled=True)
        result = embed_domain_knowledge(detector, train, valid, train_cfg, out_dir=out)
    else:
        generated = load_domain(_require_path(args.generated, "generated"), labeled=True)
        valid = load_domain(_require_path(args.valid, "valid"), labeled=True) if args.valid else []
        real_train = (load_domain(_require_path(args.real_train, "real-train"), labeled=True)
                      if args.real_train else None)
        result = finetune_on_generated(detector, generated, valid, train_cfg,
                                       real_train=real_train, out_dir=out)
    _finish_run(out, cfg, "finetune", {"detector": result.param_hash()})
    print(f"fine-tuned detector saved to {out / 'detector.npz'}")
    return 0


def cmd_train_gan(cfg: RunConfig, args) -> int:
    detector = load_checkpoint(_require_path(args.detector, "detector"))
    source_dir = _require_path(args.source, "source")
    target_dir = _require_path(args.target, "target")
    if args.lambda_task is not None:
        cfg = RunConfig(dict(cfg.values))
        cfg.values["weights"]["lambda_task"] = args.lambda_task
    train_cfg = cfg.train_config(seed=args.seed)
    out = _resolve_out(args.out, cfg)
    if _start_run(out, cfg, "train-gan", [train_cfg.seed], args.resume):
        return 0
    source = load_domain(source_dir, labeled=train_cfg.weights.lambda_task > 0)
    target = load_domain(target_dir, labeled=False)
    g_ab, g_ba, d_a, d_b = train_semgan(
        source, target, detector, train_cfg, out_dir=out,
        gen_arch=cfg.section("arch")["generator"],
        disc_arch=cfg.section("arch")["discriminator"])
    _finish_run(out, cfg, "train-gan", {
        name: handle.param_hash()
        for name, handle in (("g_ab", g_ab), ("g_ba", g_ba), ("d_a", d_a), ("d_b", d_b))
    })
    print(f"generators and discriminators saved to {out / 'checkpoints'}")
    return 0


def cmd_translate(cfg: RunConfig, args) -> int:
    generator = load_checkpoint(_require_path(args.generator, "generator"))
    if generator.kind != "generator":
        raise ValidationError("generator", f"checkpoint holds a {generator.kind}")
    source_dir = _require_path(args.source, "source")
    out = _resolve_out(args.out, cfg)
    manifest = translate_dataset(generator, source_dir, out)
    print(f"translated {len(manifest['entries'])} images into {out}")
    return 0


def cmd_eval(cfg: RunConfig, args) -> int:
    detector = load_checkpoint(_require_path(args.checkpoint, "checkpoint"))
    test = load_domain(_require_path(args.test, "test"), labeled=True)
    section = cfg.section("eval")
    report = evaluate_model(detector, test,
                            conf_threshold=section["conf_threshold"],
                            nms_threshold=section["nms_threshold"])
    print(json.dumps({"ap30": report.ap30, "ap50": report.ap50,
                      "counts": report.counts, "metadata": report.metadata}, indent=2))
    if args.out:
        out = _resolve_out(args.out, cfg)
        report.save(out / "report.json")
        report.write_pr_csv(out)
        print(f"full report written to {out}")
    return 0


def _markdown_table(result: ExperimentResult) -> str:
    lines = [
        "| a | b | k | method | seed | AP@0.3 | AP@0.5 |",
        "|---|---|---|--------|------|--------|--------|",
    ]
    lines += [
        f"| {r.a} | {r.b} | {r.k} | {r.method} | {r.seed} | {r.ap30:.1f} | {r.ap50:.1f} |"
        for r in result.rows
    ]
    return "\n".join(lines)


def cmd_experiment(cfg: RunConfig, args) -> int:
    section = dict(cfg.section("experiment"))
    if args.k_list is not None:
        section["k_list"] = [int(v) for v in args.k_list.split(",") if v]
    if args.methods is not None:
        section["methods"] = [m.strip() for m in args.methods.split(",") if m.strip()]
    if args.seeds is not None:
        section["seeds"] = [int(v) for v in args.seeds.split(",") if v]
    if args.jobs is not None:
        section["jobs"] = args.jobs

    source = load_domain(_require_path(args.source, "source"), labeled=True)
    target = load_domain(_require_path(args.target, "target"), labeled=True)
    test = load_domain(_require_path(args.test, "test"), labeled=True)

    out = _resolve_out(args.out, cfg)
    if _start_run(out, cfg, "experiment", section["seeds"], args.resume):
        return 0
    arch = cfg.section("arch")
    eval_cfg = cfg.section("eval")
    result = run_incremental_experiment(
        source, target, test,
        cfg.train_config(),
        k_list=section["k_list"],
        methods=section["methods"],
        seeds=section["seeds"],
        out_dir=out,
        jobs=section["jobs"],
        conf_threshold=eval_cfg["conf_threshold"],
        nms_threshold=eval_cfg["nms_threshold"],
        gen_arch=arch["generator"],
        disc_arch=arch["discriminator"],
        det_arch=arch["detector"],
    )
    table = _markdown_table(result)
    (out / "summary.md").write_text(table + "\n")
    _finish_run(out, cfg, "experiment", {"rows": len(result.rows)})
    print(table)
    print(f"\nresults written to {out / 'results.csv'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="semgan",
        description="Detector-guided unpaired image translation for "
                    "label-scarce fruit detection.")
    parser.add_argument("--version", action="version", version=f"semgan {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, resume: bool = True) -> None:
        p.add_argument("--config", help="YAML config file")
        p.add_argument("--set", action="append", metavar="KEY.PATH=VALUE",
                       help="override a config value; repeatable")
        if resume:
            p.add_argument("--resume", action="store_true",
                           help="skip when the output already holds a completed "
                                "run with this config")

    p = sub.add_parser("gen", help="render a procedural toy dataset")
    common(p, resume=False)
    p.add_argument("--style", help="style preset: synthetic, day_like, night_like")
    p.add_argument("--count", type=int, help="number of images")
    p.add_argument("--seed", type=int, help="base seed")
    p.add_argument("--out", required=True, help="output dataset directory")

    p = sub.add_parser("pretrain", help="train the detector on a labeled source dataset")
    common(p)
    p.add_argument("--source", required=True, help="labeled dataset directory")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--val-count", type=int, help="exact validation image count")

    p = sub.add_parser("finetune", help="fine-tune a detector checkpoint")
    common(p)
    p.add_argument("--detector", required=True, help="detector checkpoint (.npz)")
    p.add_argument("--train", help="labeled target images (train on these)")
    p.add_argument("--generated", help="translated labeled images (train on these)")
    p.add_argument("--valid", help="labeled validation images")
    p.add_argument("--real-train", help="real labeled images to mix in "
                                        "(with train.finetune_include_real)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)

    p = sub.add_parser("train-gan", help="train the translation GAN")
    common(p)
    p.add_argument("--source", required=True, help="source-domain dataset")
    p.add_argument("--target", required=True, help="target-domain dataset")
    p.add_argument("--detector", required=True,
                   help="frozen detector checkpoint guiding translation")
    p.add_argument("--lambda-task", type=float,
                   help="detector-guidance weight; 0 disables guidance")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)

    p = sub.add_parser("translate", help="map a labeled dataset through a generator")
    common(p, resume=False)
    p.add_argument("--generator", required=True, help="generator checkpoint (.npz)")
    p.add_argument("--source", required=True, help="labeled source dataset")
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="AP report for a detector on a test set")
    common(p, resume=False)
    p.add_argument("--checkpoint", required=True, help="detector checkpoint (.npz)")
    p.add_argument("--test", required=True, help="labeled test dataset")
    p.add_argument("--out", help="directory for the full report and PR curves")

    p = sub.add_parser("experiment", help="incremental-label comparison")
    common(p)
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--k-list", help="comma-separated target label budgets")
    p.add_argument("--methods", help="comma-separated method names")
    p.add_argument("--seeds", help="comma-separated seeds")
    p.add_argument("--jobs", type=int, help="parallel seed processes")

    return parser


COMMANDS = {
    "gen": cmd_gen,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "train-gan": cmd_train_gan,
    "translate": cmd_translate,
    "eval": cmd_eval,
    "experiment": cmd_experiment,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = RunConfig.load(args.config, args.set or [])
        return COMMANDS[args.command](cfg, args)
    except (ValidationError, ParseError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except StageOrderError as exc:
        print(f"error: run the {exc.expected_stage} stage first: {exc}", file=sys.stderr)
        return 3
    except ContractViolationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except DataIntegrityError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
