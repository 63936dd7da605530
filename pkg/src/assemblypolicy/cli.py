"""Command-line entry points.

    assemblypolicy demo-gen        --config single-skill --out data/
    assemblypolicy train           --config single-skill --data data/ --out run/
    assemblypolicy eval            --checkpoint run/final.ckpt --out eval/
    assemblypolicy inspect-heatmaps --checkpoint run/final.ckpt --data data/ --sample 0 --out insp/
    assemblypolicy routing-stats   --checkpoint run/final.ckpt --data data/ --out routing/

``--config`` takes a preset name or a JSON file. A JSON file may name a base
preset under the top-level key ``"preset"``; everything else overrides it.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from collections import defaultdict
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import config as C
from .geometry import Box, write_pgm

log = logging.getLogger("assemblypolicy")


class CLIError(Exception):
    pass


# ---------------------------------------------------------------------------
# shared helpers
# ---------------------------------------------------------------------------

def resolve_config(spec: str | None, seed: int | None = None) -> C.ExperimentConfig:
    spec = spec or "single-skill"
    if spec in C.PRESETS:
        cfg = C.preset(spec)
    else:
        path = Path(spec)
        if not path.exists():
            raise CLIError(f"--config {spec!r} is neither a preset ({', '.join(sorted(C.PRESETS))}) nor a file")
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise CLIError(f"{path}: invalid JSON ({exc})") from None
        base = data.pop("preset", None) if isinstance(data, dict) else None
        cfg = C.preset(base, data) if base else C.from_dict(data)
    if seed is not None:
        d = cfg.to_dict()
        d["train"]["seed"] = seed
        cfg = C.from_dict(d)
    return cfg


def prepare_out(path: Path, force: bool) -> Path:
    path = Path(path)
    if path.exists() and any(path.iterdir()) and not force:
        raise CLIError(f"output directory {path} is not empty (use --force to overwrite)")
    path.mkdir(parents=True, exist_ok=True)
    return path


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _load_examples(data: Path, cfg: C.ExperimentConfig, skills=None):
    from .pipeline import build_examples
    from .toyenv.demos import load_dataset

    manifest, demos = load_dataset(data, skills or cfg.env.skills)
    return manifest, build_examples(demos, Box(*cfg.env.workspace))


def routing_rows(records, stage: str, decoder, step: int = 0) -> list[dict]:
    """Mean router probability P_e, top-k load F_e and mixing weight alpha_e per (layer, skill, expert)."""
    experts = decoder.blocks[0].moe.num_experts
    acc = defaultdict(lambda: [np.zeros(experts), np.zeros(experts), 0])
    for r in records:
        a = acc[(r.layer, r.skill)]
        a[0] += r.soft.data.sum(axis=0)
        a[1] += r.hard.sum(axis=0)
        a[2] += r.n
    rows = []
    for (layer, skill), (soft, hard, n) in sorted(acc.items()):
        alpha = decoder.blocks[layer].moe.alpha(skill)
        for e in range(experts):
            rows.append({"step": step, "stage": stage, "layer": layer, "skill": skill, "expert": e,
                         "P_e": float(soft[e] / n), "F_e": float(hard[e] / n), "alpha_e": alpha, "tokens": n})
    return rows


def write_rows(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: f"{v:.6f}" if isinstance(v, float) else v for k, v in r.items()})


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_demo_gen(args) -> int:
    from .toyenv.demos import generate_dataset

    cfg = resolve_config(args.config, args.seed)
    skills = args.skills.split(",") if args.skills else cfg.env.skills
    d = cfg.to_dict()
    d["env"]["skills"] = skills
    if args.count is not None:
        d["env"]["demos_per_skill"] = args.count
    cfg = C.from_dict(d)
    out = prepare_out(Path(args.out), args.force)
    seed = cfg.train.seed
    env = cfg.env
    t0 = time.time()
    manifest = generate_dataset(out, skills, env.demos_per_skill, seed, workspace=env.workspace,
                                cameras=env.cameras, camera_size=env.camera_size,
                                instr_len=cfg.model.instr_len,
                                meta={"config_hash": C.config_hash(cfg), "env_hash": C.env_hash(cfg),
                                      "env": asdict(env)})
    n = sum(len(v) for v in manifest["demos"].values())
    print(f"wrote {n} demos ({', '.join(skills)}) to {out} in {time.time() - t0:.1f}s")
    return 0


def cmd_train(args) -> int:
    from .pipeline import Policy, train
    from .plotting import loss_curves
    from .toyenv.demos import load_manifest

    cfg = resolve_config(args.config, args.seed)
    if args.epochs is not None:
        d = cfg.to_dict()
        d["train"]["epochs"] = args.epochs
        cfg = C.from_dict(d)
    data = Path(args.data)
    manifest = load_manifest(data)
    want = C.env_hash(cfg)
    if manifest.get("env_hash") != want:
        raise CLIError(f"dataset {data} was generated with env hash {manifest.get('env_hash')}, "
                       f"config expects {want}; regenerate the data or fix the config")
    missing = [s for s in cfg.env.skills if s not in manifest["demos"]]
    if missing:
        raise CLIError(f"dataset has no demos for {missing}")
    if args.resume is None:
        out = prepare_out(Path(args.out), args.force)
    else:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
    _, examples = _load_examples(data, cfg)
    cfg.save(out / "config.json")
    policy = Policy(cfg)
    t0 = time.time()

    def progress(rec):
        if rec["step"] % args.log_every == 0:
            log.info("step %d epoch %d total %.4f", rec["step"], rec["epoch"], rec["total"])

    res = train(policy, examples, out, resume=args.resume, callback=progress)
    history = [json.loads(line) for line in (out / "train_log.jsonl").read_text().splitlines()]
    if history:
        loss_curves(history, out / "loss.png")
    print(f"trained {res.steps} steps on {len(examples)} examples in {time.time() - t0:.1f}s; "
          f"final loss {history[-1]['total']:.4f}" if history else "no steps run")
    return 0


def _load_policy(path, config: str | None):
    from .pipeline import Policy

    cfg = resolve_config(config) if config else None
    try:
        return Policy.load(path, cfg)
    except FileNotFoundError:
        raise CLIError(f"checkpoint {path} not found") from None
    except (KeyError, ValueError) as exc:
        raise CLIError(f"checkpoint {path} does not match the model: {exc}") from None


def cmd_eval(args) -> int:
    from .pipeline import run_benchmark
    from .plotting import benchmark_bars
    from .toyenv.metrics import format_table, write_report

    policy, meta, _ = _load_policy(args.checkpoint, args.config)
    skills = args.skills.split(",") if args.skills else policy.skills
    unknown = [s for s in skills if s not in policy.skills]
    if unknown:
        raise CLIError(f"checkpoint has no router for {unknown}; trained skills are {policy.skills}")
    seed = policy.cfg.train.seed if args.seed is None else args.seed
    out = prepare_out(Path(args.out), args.force)
    report = run_benchmark(policy, args.difficulty, args.cases, seed, skills,
                           {"checkpoint": Path(args.checkpoint).name})
    print(format_table(report))
    write_report(report, out / "report.json")
    rows = [{"skill": s, **{k: b[k] for k in ("gsr", "osr", "collision_rate", "avg_success_step")}}
            for s, b in list(report["skills"].items()) + [("average", report["average"])]]
    write_rows(out / "report.csv", rows)
    benchmark_bars(report, out / "report.png")
    return 0


def cmd_inspect(args) -> int:
    from .plotting import heatmap_panel

    policy, meta, _ = _load_policy(args.checkpoint, args.config)
    _, examples = _load_examples(Path(args.data), policy.cfg)
    if not 0 <= args.sample < len(examples):
        raise CLIError(f"sample {args.sample} out of range; dataset has {len(examples)} examples")
    ex = examples[args.sample]
    out = prepare_out(Path(args.out), args.force)
    res = policy.inspect_example(ex)
    for stage in ("coarse", "fine"):
        for kind in ("pred", "gt"):
            for v, hm in enumerate(res[f"{stage}_{kind}"]):
                write_pgm(out / f"{stage}_{kind}_view{v}.pgm", hm)
    step = int(meta.get("step", 0))
    rows = (routing_rows(res["coarse_records"], "coarse", policy.coarse_decoder, step)
            + routing_rows(res["fine_records"], "fine", policy.fine_decoder, step))
    write_rows(out / "routing.csv", rows)
    heatmap_panel({k: res[k] for k in ("coarse_pred", "coarse_gt", "fine_pred", "fine_gt")}, out / "heatmaps.png")
    _dump(out / "sample.json", {"sample": args.sample, "skill": ex.skill, "demo": ex.demo,
                                "keyframe": ex.keyframe, "action": ex.action.to_dict()})
    print(f"sample {args.sample} ({ex.skill}, demo {ex.demo}, keyframe {ex.keyframe}) -> {out}")
    return 0


def cmd_routing_stats(args) -> int:
    from .plotting import routing_heatmap
    from .tensor import no_grad

    policy, meta, _ = _load_policy(args.checkpoint, args.config)
    _, examples = _load_examples(Path(args.data), policy.cfg)
    if args.max_samples:
        examples = examples[:args.max_samples]
    out = prepare_out(Path(args.out), args.force)
    records = {"coarse": [], "fine": []}
    with no_grad():
        for ex in examples:
            res = policy.inspect_example(ex)
            records["coarse"] += res["coarse_records"]
            records["fine"] += res["fine_records"]
    step = int(meta.get("step", 0))
    rows = (routing_rows(records["coarse"], "coarse", policy.coarse_decoder, step)
            + routing_rows(records["fine"], "fine", policy.fine_decoder, step))
    write_rows(out / "routing.csv", rows)
    routing_heatmap(rows, out / "routing.png")
    print(f"routing over {len(examples)} samples -> {out / 'routing.csv'}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="preset name or JSON config file (default: single-skill)")
    common.add_argument("--seed", type=int, help="override the experiment seed")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--force", action="store_true", help="write into a non-empty output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="assemblypolicy", description="Two-stage assembly-skill policy toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("demo-gen", parents=[common], help="generate scripted demonstrations")
    s.add_argument("--skills", help="comma-separated skill names (default: from config)")
    s.add_argument("--count", type=int, help="demos per skill (default: from config)")
    s.set_defaults(func=cmd_demo_gen)

    s = sub.add_parser("train", parents=[common], help="train a policy on a demo dataset")
    s.add_argument("--data", required=True)
    s.add_argument("--epochs", type=int)
    s.add_argument("--resume", help="epoch checkpoint to resume from")
    s.add_argument("--log-every", type=int, default=20)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", parents=[common], help="run the seeded benchmark suite")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--difficulty", choices=("easy", "hard"), default="easy")
    s.add_argument("--cases", type=int, default=32)
    s.add_argument("--skills", help="comma-separated subset of the trained skills")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("inspect-heatmaps", parents=[common], help="dump heatmaps and routing for one sample")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--sample", type=int, default=0, help="example index (demo * 5 + keyframe)")
    s.set_defaults(func=cmd_inspect)

    s = sub.add_parser("routing-stats", parents=[common], help="expert load statistics over a dataset")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--max-samples", type=int)
    s.set_defaults(func=cmd_routing_stats)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CLIError, C.ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
