"""Single entry point wiring the pipeline: world generation, demonstration
collection, reward labeling, staged training, evaluation, rendering, and
gradient checking."""

from __future__ import annotations

import argparse
import csv
import glob
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import demogen, evalharness, mapper, nnet, policy, rewards, training
from .dataset import DatasetReader, relabel_index, write_dataset
from .gridsim import WorldConfig, generate_world, load_world, save_world
from .nnet import ParamSet, load_manifest
from .policy import PolicyConfig
from .rewards import RewardConfig
from .training import StageConfig, StageOrderError, TrainingData

SEED_ENV_VAR = "NAVLAB_SEED"


class CliError(Exception):
    pass


def _resolve_seed(args) -> int:
    env = os.environ.get(SEED_ENV_VAR)
    if env is not None:
        return int(env)
    return args.seed


def _write_resolved_config(out_dir: Path, name: str, cfg: dict) -> str:
    text = json.dumps(cfg, sort_keys=True, indent=1)
    (out_dir / name).write_text(text + "\n", encoding="utf-8")
    return hashlib.sha256(text.encode()).hexdigest()


def _load_worlds(pattern: str) -> list:
    paths = sorted(glob.glob(str(Path(pattern) / "world_*.json"))
                   if Path(pattern).is_dir() else glob.glob(pattern))
    if not paths:
        raise CliError(f"no world files match {pattern!r}")
    return [load_world(p) for p in paths]


def cmd_gen_worlds(args) -> int:
    seed = _resolve_seed(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    wcfg = WorldConfig(width=args.size, height=args.size,
                       num_categories=args.categories)
    for i in range(args.n):
        world = generate_world(seed + i, wcfg)
        save_world(world, out / f"world_{seed + i:05d}.json")
    _write_resolved_config(out, "run_config.json", {
        "command": "gen-worlds", "n": args.n, "seed": seed,
        "size": args.size, "categories": args.categories})
    print(f"wrote {args.n} worlds to {out}")
    return 0


def _parse_mix(text: str) -> tuple:
    parts = text.split(":")
    if len(parts) != 3:
        raise CliError("mix must look like expert:frontier:noisy, e.g. 2:5:3")
    return tuple(int(p) for p in parts)


def cmd_collect(args) -> int:
    seed = _resolve_seed(args)
    worlds = _load_worlds(args.worlds)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    spec = demogen.CorpusSpec(mix=_parse_mix(args.mix),
                              target_records=args.records,
                              stop_factor=args.stop_factor)
    _, records = demogen.generate_corpus(worlds, seed, spec)
    write_dataset(records, out / "index.jsonl", out / "blob.bin")
    _write_resolved_config(out, "run_config.json", {
        "command": "collect", "seed": seed, "mix": list(spec.mix),
        "records": spec.target_records, "stop_factor": spec.stop_factor,
        "worlds": args.worlds})
    print(f"wrote {len(records)} step records to {out}")
    return 0


def cmd_label(args) -> int:
    ds = Path(args.dataset)
    index = ds / "index.jsonl"
    if not index.exists():
        raise CliError(f"no dataset index at {index}")
    cfg = RewardConfig(gamma=args.gamma, window=args.window)
    with open(index, encoding="utf-8") as f:
        headers = [json.loads(line) for line in f if line.strip()]
    labels = rewards.label_groups(headers, cfg)
    relabel_index(index, labels)
    _write_resolved_config(ds, "label_config.json", {
        "command": "label", "gamma": cfg.gamma, "window": cfg.window})
    print(f"labeled {len(labels)} records in {index}")
    return 0


def _policy_config(args) -> PolicyConfig:
    return PolicyConfig(num_categories=args.categories)


def _load_checkpoint(path) -> tuple:
    pset = ParamSet.load(path)
    manifest = load_manifest(path)
    return pset, manifest


def cmd_train(args) -> int:
    seed = _resolve_seed(args)
    pcfg = _policy_config(args)
    out = Path(args.out_ckpt)
    out.parent.mkdir(parents=True, exist_ok=True)

    if args.in_ckpt:
        pset, manifest = _load_checkpoint(args.in_ckpt)
        stages_done = manifest["stages_done"]
    elif args.stage == 0 or args.allow_skip:
        pset = policy.init_params(pcfg, seed)
        policy.pretrain_obs_encoder(pset, pcfg, seed)
        stages_done = [0]
    else:
        raise StageOrderError("stage > 0 needs --in-ckpt (or --allow-skip)")

    if args.stage > 0 and not args.allow_skip and (args.stage - 1) not in stages_done:
        raise StageOrderError(
            f"stage {args.stage} requires stage {args.stage - 1} first "
            "(use --allow-skip for ablations)")

    summary = {"stage": args.stage, "seed": seed}
    if args.stage == 0:
        pass  # initialization + observation-encoder pretraining happened above
    else:
        reader = DatasetReader(Path(args.dataset) / "index.jsonl",
                               Path(args.dataset) / "blob.bin")
        data = TrainingData.from_dataset(reader, pcfg)
        scfg = StageConfig(stage=args.stage, epochs=args.epochs, lr=args.lr,
                           batch_size=args.batch_size, lam=args.lam,
                           tau=args.tau, seed=seed,
                           expectile_sign=args.expectile_sign)
        report = training.run_stage(args.stage, data, pset, scfg, pcfg)
        _write_train_report(out.parent / f"train_report_stage{args.stage}.csv",
                            out.parent / f"train_report_stage{args.stage}.json",
                            report)
        summary["epochs"] = scfg.epochs

    if args.stage not in stages_done:
        stages_done = stages_done + [args.stage]
    cfg_hash = _write_resolved_config(out.parent, "train_config.json", {
        "command": "train", "stage": args.stage, "seed": seed,
        "epochs": args.epochs, "lr": args.lr, "batch_size": args.batch_size,
        "lam": args.lam, "tau": args.tau, "categories": args.categories,
        "expectile_sign": args.expectile_sign})
    pset.save(out, manifest={"stages_done": stages_done, "seed": seed,
                             "config_hash": cfg_hash})
    print(f"stage {args.stage} done; checkpoint at {out}")
    return 0


def _write_train_report(csv_path, json_path, report) -> None:
    with open(csv_path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "bc_loss", "rtg_loss", "total", "grad_norm"])
        for i, ep in enumerate(report.epochs):
            w.writerow([i, ep["bc"], ep["rtg"], ep["total"], ep["grad_norm"]])
    with open(json_path, "w", encoding="utf-8") as f:
        json.dump({"stage": report.stage, "epochs": report.epochs,
                   "wall_time": report.wall_time,
                   "frozen_stable": report.frozen_groups_stable()}, f, indent=1)
        f.write("\n")


def cmd_eval(args) -> int:
    seed = _resolve_seed(args)
    pcfg = _policy_config(args)
    worlds = _load_worlds(args.worlds)
    if args.policy == "random":
        act_fn = evalharness.RandomPolicy(seed)
    else:
        if not args.ckpt:
            raise CliError("--policy checkpoint needs --ckpt")
        pset, _ = _load_checkpoint(args.ckpt)
        act_fn = evalharness.CheckpointPolicy(pset, pcfg)
    results, metrics = evalharness.evaluate(worlds, args.goals, act_fn, pcfg,
                                            budget=args.budget, seed=seed)
    report = Path(args.report)
    report.parent.mkdir(parents=True, exist_ok=True)
    with open(report.with_suffix(".csv"), "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["category", "success", "shortest", "path_length", "steps"])
        for r in results:
            w.writerow([r.category, int(r.success), r.shortest, r.path_length,
                        r.steps])
    with open(report, "w", encoding="utf-8") as f:
        json.dump({"sr": metrics.sr, "spl": metrics.spl, "n": metrics.n,
                   "mean_steps": metrics.mean_steps}, f, indent=1)
        f.write("\n")
    print(f"SR={metrics.sr:.3f} SPL={metrics.spl:.3f} over {metrics.n} episodes")
    return 0


def cmd_render(args) -> int:
    from PIL import Image
    if args.map:
        smap = mapper.map_from_bytes(Path(args.map).read_bytes())
    elif args.world:
        world = load_world(args.world)
        channels = np.zeros((world.num_categories + 2, world.height,
                             world.width), dtype=bool)
        channels[0] = ~world.occupancy
        channels[1] = world.occupancy
        for cat in range(1, world.num_categories + 1):
            channels[1 + cat] = world.semantic == cat
        smap = mapper.SemanticMap(channels, (world.width // 2, world.height // 2),
                                  mapper.Frame.ALLOCENTRIC)
    else:
        raise CliError("render needs --map or --world")
    img = mapper.render_map(smap)
    Image.fromarray(img).save(args.out)
    print(f"wrote {args.out}")
    return 0


def cmd_gradcheck(args) -> int:
    seed = _resolve_seed(args)
    pcfg = _policy_config(args)
    pset = policy.init_params(pcfg, seed)
    policy.add_reward_head(pset, pcfg, seed)
    for g in pset.groups.values():
        g.frozen = False
    rng = np.random.default_rng(seed)
    patches = rng.random((2, pcfg.n_map_tokens, pcfg.patch_dim))
    feats = rng.random((2, 4, pcfg.obs_dim))
    goals = np.array([1, 2])
    labels = rng.integers(0, 4, size=(2, 4))
    rtg_t = rng.normal(size=2)
    scfg = StageConfig(stage=3, seed=seed)

    def build_loss(leaves):
        logits, rtg_pred, _ = policy.forward_nodes(leaves, patches, feats,
                                                   goals, pcfg, with_reward=True)
        total, _, _ = training.stage3_loss_nodes(logits, labels, rtg_pred,
                                                 rtg_t, rtg_t, scfg)
        return total

    report = nnet.grad_check(build_loss, pset, samples_per_group=args.samples,
                             seed=seed)
    for g, err in sorted(report.per_group.items()):
        print(f"{g:>16s}: max rel err {err:.3e}")
    print(f"overall max rel err {report.max_rel_err:.3e} "
          f"({'PASS' if report.passed else 'FAIL'})")
    return 0 if report.passed else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="navlab",
                                description="gridworld object-navigation lab")
    p.add_argument("--seed", type=int, default=0,
                   help=f"global seed (overridden by ${SEED_ENV_VAR})")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-worlds", help="generate training/eval worlds")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--size", type=int, default=32)
    g.add_argument("--categories", type=int, default=6)
    g.set_defaults(fn=cmd_gen_worlds)

    c = sub.add_parser("collect", help="collect mixed-quality demonstrations")
    c.add_argument("--worlds", required=True)
    c.add_argument("--mix", default="2:5:3")
    c.add_argument("--records", type=int, default=10000)
    c.add_argument("--stop-factor", type=float, default=3.0)
    c.add_argument("--out", required=True)
    c.set_defaults(fn=cmd_collect)

    l = sub.add_parser("label", help="write reward labels into the dataset")
    l.add_argument("--dataset", required=True)
    l.add_argument("--gamma", type=float, default=0.9)
    l.add_argument("--window", type=int, default=4)
    l.set_defaults(fn=cmd_label)

    t = sub.add_parser("train", help="run one training stage")
    t.add_argument("--stage", type=int, required=True, choices=(0, 1, 2, 3))
    t.add_argument("--dataset")
    t.add_argument("--in-ckpt")
    t.add_argument("--out-ckpt", required=True)
    t.add_argument("--epochs", type=int, default=None)
    t.add_argument("--lr", type=float, default=3e-4)
    t.add_argument("--batch-size", type=int, default=64)
    t.add_argument("--lam", type=float, default=1.0)
    t.add_argument("--tau", type=float, default=0.9)
    t.add_argument("--categories", type=int, default=6)
    t.add_argument("--expectile-sign", default="intent",
                   choices=("intent", "paper_literal"))
    t.add_argument("--allow-skip", action="store_true",
                   help="skip stage-order checks (stage ablations)")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="roll out a policy and compute SR/SPL")
    e.add_argument("--worlds", required=True)
    e.add_argument("--ckpt")
    e.add_argument("--policy", default="checkpoint", choices=("checkpoint", "random"))
    e.add_argument("--goals", type=int, default=5)
    e.add_argument("--budget", type=int, default=200)
    e.add_argument("--categories", type=int, default=6)
    e.add_argument("--report", required=True)
    e.set_defaults(fn=cmd_eval)

    r = sub.add_parser("render", help="render a map or world to a PNG")
    r.add_argument("--map")
    r.add_argument("--world")
    r.add_argument("--out", required=True)
    r.set_defaults(fn=cmd_render)

    gc = sub.add_parser("gradcheck", help="finite-difference gradient check")
    gc.add_argument("--samples", type=int, default=200)
    gc.add_argument("--categories", type=int, default=6)
    gc.set_defaults(fn=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (CliError, StageOrderError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
