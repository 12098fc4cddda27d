"""Command-line front end: dataset generation, training, evaluation, ablation and scene inspection."""
from __future__ import annotations

import argparse
import logging
import sys
from collections import Counter
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import config_hash, load_toml
from .core import Mode, Trajectory
from .policy import DEFAULT_VOCAB, CheckpointError, PolicyParams, load_checkpoint, render, save_checkpoint
from .report import comparison_table, plot_scene, write_eval_bundle, write_json
from .trainer import (MODE_POLICIES, DivergenceError, GrpoConfig, NonFiniteGradient, dataset_seed, evaluate,
                      fit, prepare, warmup_sft)
from .world import (BASE_FEATURES, SCHEMA_VERSION, THINK_FEATURES, ComplexityLevel, GenerationExhausted,
                    WorldConfig, generate_dataset, generate_scene, observe, read_scene_records,
                    scene_from_record, scene_to_record, write_scenes)

SPLITS = ("train", "val", "test")
ABLATIONS = {
    "pdms+format": dict(reward_endpoint=False, reward_adaptive=False),
    "pdms+format+endpoint": dict(reward_adaptive=False),
    "full": {},
}

EXIT_CONFIG, EXIT_IO, EXIT_CHECKPOINT, EXIT_TRAINING, EXIT_GENERATION = 3, 4, 5, 6, 7


class CliError(Exception):
    def __init__(self, category: str, message: str, code: int):
        super().__init__(message)
        self.category = category
        self.code = code


# ------------------------------------------------------------------ configs

def load_configs(path, seed=None, **overrides) -> tuple[WorldConfig, GrpoConfig]:
    data = {}
    if path is not None:
        if not Path(path).exists():
            raise CliError("config", f"config file not found: {path}", EXIT_CONFIG)
        data = load_toml(path)
    try:
        world = WorldConfig.from_mapping(data.get("world", {}))
        train = dict(data.get("train", {}))
        train.update({k: v for k, v in overrides.items() if v is not None})
        if seed is not None:
            train["seed"] = seed
        grpo = GrpoConfig.from_mapping(train)
    except (TypeError, ValueError) as exc:
        raise CliError("config", str(exc), EXIT_CONFIG) from exc
    return world, grpo


def _meta(grpo: GrpoConfig, world: WorldConfig, **extra) -> dict:
    return {"schema_version": SCHEMA_VERSION, "seed": grpo.seed,
            "config_hash": config_hash(grpo, world), **extra}


def _load_split(data_dir: Path, split: str, world: WorldConfig):
    path = Path(data_dir) / f"{split}.jsonl"
    if not path.exists():
        raise CliError("io", f"dataset file not found: {path}", EXIT_IO)
    try:
        return [scene_from_record(rec, world) for rec in read_scene_records(path)]
    except (KeyError, ValueError) as exc:
        raise CliError("io", f"{path}: {exc}", EXIT_IO) from exc


def _load_ckpt(path):
    try:
        return load_checkpoint(Path(path), k=DEFAULT_VOCAB.size)
    except FileNotFoundError as exc:
        raise CliError("io", f"checkpoint not found: {path}", EXIT_IO) from exc
    except CheckpointError as exc:
        raise CliError("checkpoint", str(exc), EXIT_CHECKPOINT) from exc


# ----------------------------------------------------------------- commands

def cmd_gen_data(args) -> int:
    world, grpo = load_configs(args.config, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sizes = {"train": args.train or grpo.train_scenes, "val": args.val or grpo.val_scenes,
             "test": args.test or grpo.val_scenes}
    meta = _meta(grpo, world)
    for i, split in enumerate(SPLITS):
        scenes = generate_dataset(sizes[split], dataset_seed(grpo.seed, i), world)
        records = []
        for scene in scenes:
            k = DEFAULT_VOCAB.nearest(scene.ego, scene.expert)
            anchor = Trajectory(DEFAULT_VOCAB.anchors(scene.ego)[k])
            records.append(scene_to_record(
                scene, global_seed=meta["seed"], config_hash=meta["config_hash"], split=split,
                expert=scene.expert.waypoints.tolist(), expert_anchor_index=k,
                think_response=render(scene, Mode.THINKING, anchor).raw_text,
                nothink_response=render(scene, Mode.NON_THINKING, anchor).raw_text))
        write_scenes(out / f"{split}.jsonl", records)
        hist = Counter(int(s.complexity) for s in scenes)
        n = len(scenes)
        shares = "  ".join(f"L{l}: {hist[l]:5d} ({hist[l] / n:.3f})" for l in (1, 2, 3))
        print(f"{split:<5} {n:6d} scenes  {shares}")
    write_json(out / "dataset.json", {**meta, "sizes": sizes})
    return 0


def _train_one(grpo, world, train_packs, val_packs, out: Path, warm=None, checkpoints=True):
    out.mkdir(parents=True, exist_ok=True)
    meta = _meta(grpo, world, mode_policy=grpo.mode_policy)

    def on_epoch(epoch, params):
        if checkpoints:
            save_checkpoint(out / f"policy_epoch{epoch}.ckpt", params, **meta)

    try:
        params, tlog = fit(grpo, train_packs, val_packs, warm=warm, world_config=world, on_epoch=on_epoch)
    except (DivergenceError, NonFiniteGradient) as exc:
        raise CliError("training", f"{grpo.mode_policy} seed {grpo.seed}: {exc}", EXIT_TRAINING) from exc
    save_checkpoint(out / "policy.ckpt", params, **meta)
    tlog.write(out / "training_log.jsonl")
    return params, tlog


def cmd_train(args) -> int:
    world, grpo = load_configs(args.config, args.seed, mode_policy=args.mode_policy, epochs=args.epochs)
    train_packs = prepare(_load_split(args.data, "train", world))
    val_packs = prepare(_load_split(args.data, "val", world))
    params, tlog = _train_one(grpo, world, train_packs, val_packs, Path(args.out))
    last = tlog.of_type("val")[-1] if tlog.of_type("val") else None
    if last is not None:
        rates = " ".join(f"L{k}={v:.2f}" for k, v in sorted(last["think_rate_by_level"].items()))
        print(f"{grpo.mode_policy}: val PDMS {last['pdms']:.4f}  think rate {rates}")
    print(f"checkpoint written to {Path(args.out) / 'policy.ckpt'}")
    return 0


def _parse_named(spec: str) -> tuple[str, str]:
    name, sep, path = spec.partition("=")
    return (name, path) if sep else (Path(spec).parent.name or "model", spec)


def cmd_eval(args) -> int:
    world, grpo = load_configs(args.config, args.seed)
    packs = prepare(_load_split(args.data, args.split, world))
    reports = {}
    for spec in args.checkpoint:
        name, path = _parse_named(spec)
        params, meta = _load_ckpt(path)
        override = Mode.parse(args.mode_override) if args.mode_override else None
        if override is None and meta.get("mode_policy") in ("always-think", "never-think"):
            override = Mode.THINKING if meta["mode_policy"] == "always-think" else Mode.NON_THINKING
        reports[name] = evaluate(params, packs, override, best_of=args.best_of, seed=grpo.seed)
    meta = _meta(grpo, world, split=args.split)
    write_eval_bundle(Path(args.out), reports, meta, plots=not args.no_plots)
    print(comparison_table(reports))
    return 0


def cmd_ablate(args) -> int:
    world, grpo = load_configs(args.config, None, epochs=args.epochs)
    out = Path(args.out)
    rows, reports = [], {}
    train_packs = prepare(_load_split(args.data, "train", world))
    val_packs = prepare(_load_split(args.data, "val", world))
    # warmup does not depend on the reward suite or the GRPO seed
    warm = warmup_sft(PolicyParams.zeros(DEFAULT_VOCAB.size), train_packs, grpo.sft_lr, grpo.sft_steps)
    for seed in args.seeds:
        base = replace(grpo, seed=seed, mode_policy="adaptive")
        for name, flags in ABLATIONS.items():
            cfg = replace(base, **flags)
            params, _ = _train_one(cfg, world, train_packs, val_packs, out / f"{name}_seed{seed}",
                                   warm=warm, checkpoints=False)
            rep = evaluate(params, val_packs)
            reports[f"{name}/s{seed}"] = rep
            rows.append({"variant": name, "seed": seed, "pdms": rep.summary["pdms"],
                         "think_rate": rep.summary["think_rate"], **{
                             f"think_L{l}": rep.summary["think_rate_by_level"].get(str(l)) for l in (1, 2, 3)}})
    summary = {name: float(np.mean([r["pdms"] for r in rows if r["variant"] == name])) for name in ABLATIONS}
    meta = _meta(grpo, world, seeds=list(args.seeds))
    write_json(out / "ablation.json", {**meta, "rows": rows, "mean_pdms": summary})
    lines = [f"{'variant':<24}{'seeds':>8}{'mean PDMS':>12}"]
    lines += [f"{name:<24}{len(args.seeds):>8}{summary[name]:>12.4f}" for name in ABLATIONS]
    text = "\n".join(lines)
    (out / "ablation.txt").write_text(" ".join(f"{k}={v}" for k, v in sorted(meta.items())) + "\n" + text + "\n")
    if not args.no_plots:
        write_eval_bundle(out / "eval", reports, meta)
    print(text)
    return 0


def cmd_inspect_scene(args) -> int:
    world, grpo = load_configs(args.config, args.seed)
    level = ComplexityLevel(args.level) if args.level else None
    scene = generate_scene(args.seed, level, world)
    crit = scene.critical
    print(f"seed {scene.seed}  level {int(scene.complexity)}  command {scene.command.value}")
    print(f"ego speed {scene.ego.speed:.2f} m/s  accel {scene.ego.acceleration:.2f} m/s^2  "
          f"corridor half-width {scene.corridor.half_width:.2f} m")
    print(f"CIPO-1 {crit.cipo1}  CIPO-2 {list(crit.cipo2)}  motion interaction {list(crit.motion_interaction)}  "
          f"boundary clearance {crit.boundary_distance:.2f} m ({'near' if crit.boundary_proximity else 'clear'})")
    for a in scene.agents:
        print(f"  agent {a.id}: {a.lane_assignment.value:<13} pos ({a.position[0]:7.2f}, {a.position[1]:6.2f})"
              f"  speed {np.hypot(*a.velocity):5.2f}")
    k = DEFAULT_VOCAB.nearest(scene.ego, scene.expert)
    print("expert endpoint ({:.2f}, {:.2f})  nearest anchor {}".format(*scene.expert.endpoint, k))
    names = BASE_FEATURES + THINK_FEATURES
    values = observe(scene, Mode.THINKING, normalize=False)
    print("features: " + "  ".join(f"{n}={v:.3g}" for n, v in zip(names, values)))
    print(render(scene, Mode.THINKING, Trajectory(DEFAULT_VOCAB.anchors(scene.ego)[k])).raw_text)
    if args.plot:
        plot_scene(Path(args.plot), scene, {"expert": scene.expert}, _meta(grpo, world))
        print(f"plot written to {args.plot}")
    return 0


# ------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="dualmode", description=__doc__, formatter_class=fmt)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed_default=0):
        p.add_argument("--config", type=Path, default=None, help="TOML file with [world] and [train] tables")
        p.add_argument("--seed", type=int, default=seed_default, help="global seed recorded in every artifact")

    p = sub.add_parser("gen-data", help="generate train/val/test scene files", formatter_class=fmt)
    common(p)
    p.add_argument("--out", type=Path, default=Path("data"), help="output directory")
    p.add_argument("--train", type=int, default=None, help="train scenes (default: config train_scenes)")
    p.add_argument("--val", type=int, default=None, help="validation scenes (default: config val_scenes)")
    p.add_argument("--test", type=int, default=None, help="test scenes (default: config val_scenes)")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="warmup then GRPO training", formatter_class=fmt)
    common(p)
    p.add_argument("--data", type=Path, default=Path("data"), help="directory written by gen-data")
    p.add_argument("--out", type=Path, default=Path("runs/adaptive"), help="run directory")
    p.add_argument("--mode-policy", choices=MODE_POLICIES, default="adaptive",
                   help="learned mode choice, or a pinned mode for baselines")
    p.add_argument("--epochs", type=int, default=None, help="override GRPO epochs")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate one or more checkpoints", formatter_class=fmt)
    common(p)
    p.add_argument("--data", type=Path, default=Path("data"), help="directory written by gen-data")
    p.add_argument("--split", choices=SPLITS, default="test", help="dataset split to evaluate")
    p.add_argument("--checkpoint", action="append", required=True,
                   help="checkpoint path, optionally NAME=PATH; repeat to compare models")
    p.add_argument("--mode-override", default=None, help="force Thinking or NonThinking for every scene")
    p.add_argument("--best-of", type=int, default=0, help="add a best-of-N column (0 disables)")
    p.add_argument("--out", type=Path, default=Path("reports"), help="report directory")
    p.add_argument("--no-plots", action="store_true", help="skip PNG output")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train reward-suite variants and compare", formatter_class=fmt)
    common(p)
    p.add_argument("--data", type=Path, default=Path("data"), help="directory written by gen-data")
    p.add_argument("--seeds", type=int, nargs="+", default=[1, 2, 3], help="training seeds")
    p.add_argument("--epochs", type=int, default=None, help="override GRPO epochs")
    p.add_argument("--out", type=Path, default=Path("runs/ablation"), help="output directory")
    p.add_argument("--no-plots", action="store_true", help="skip PNG output")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("inspect-scene", help="print (and optionally plot) one generated scene",
                       formatter_class=fmt)
    common(p)
    p.add_argument("--level", type=int, choices=(1, 2, 3), default=None, help="requested complexity level")
    p.add_argument("--plot", type=Path, default=None, help="write a PNG of the scene here")
    p.set_defaults(func=cmd_inspect_scene)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error[{exc.category}]: {exc}", file=sys.stderr)
        return exc.code
    except GenerationExhausted as exc:
        print(f"error[generation]: {exc}", file=sys.stderr)
        return EXIT_GENERATION
    except OSError as exc:
        print(f"error[io]: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
