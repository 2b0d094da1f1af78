"""Command-line surface tying the pipeline stages together.

    movla gen-data --tasks <spec|default> --count N --seed S --out DIR
    movla train-vq --data DIR --out FILE [--image-hw N --codebook N --steps N ...]
    movla train-acttok --data DIR --la N --out FILE
    movla train-lme --data DIR --out FILE [--steps N ...]
    movla extract-motion --data DIR --lme FILE --window N --out FILE [--mode pair]
    movla pretrain --config FILE --data DIR --vq F --acttok F --lme F --out DIR [--set k=v ...]
    movla finetune --config FILE --data DIR --vq F --acttok F --lme F --out DIR --init CKPT
    movla eval --ckpt F --vq F --acttok F --suite <spec|default> --episodes N --seeds a,b,c --out DIR
    movla diagnose cross-recon|clusters|leakage ...
    movla sweep --axis lambda1 --values 0.0,0.1 --seeds 0,1,2 ... --out DIR

Every run writes a manifest (arguments, config/dataset hashes, git revision, seed,
wall time, artifact paths) beside its outputs. Outputs are write-once: existing
paths are refused. Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import subprocess
import sys
import time
from pathlib import Path

import numpy as np


class CliError(Exception):
    pass


def _fresh(path: Path) -> Path:
    if path.exists():
        raise CliError(f"output {path} already exists (outputs are write-once)")
    return path


def _sha256_file(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _git_revision() -> str:
    try:
        out = subprocess.run(
            ["git", "rev-parse", "HEAD"], capture_output=True, text=True, timeout=5
        )
        return out.stdout.strip() if out.returncode == 0 else "unknown"
    except (OSError, subprocess.TimeoutExpired):
        return "unknown"


def write_run_manifest(out_dir: Path, argv: list[str], seed, config_hash: str,
                       dataset_hash: str, artifacts: dict, t_start: float) -> None:
    manifest = {
        "command": ["movla"] + list(argv),
        "config_hash": config_hash,
        "dataset_hash": dataset_hash,
        "git_revision": _git_revision(),
        "seed": seed,
        "wall_time_s": round(time.monotonic() - t_start, 3),
        "artifacts": {k: str(v) for k, v in artifacts.items()},
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "run_manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)


def _load_family(spec: str):
    from .world import TaskFamily

    if spec == "default":
        return TaskFamily()
    with open(spec, "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    return TaskFamily.from_dict({**TaskFamily().to_dict(), **raw.get("family", raw)})


def _load_world(spec: str):
    from .world import WorldConfig

    if spec == "default":
        return WorldConfig()
    with open(spec, "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    if "world" in raw:
        return WorldConfig(**raw["world"])
    return WorldConfig()


def _dataset_hash(data_dir) -> str:
    manifest = Path(data_dir) / "manifest.json"
    return _sha256_file(manifest) if manifest.exists() else "none"


def _write_pgm(path: Path, image: np.ndarray) -> None:
    """Grayscale PGM writer (no imaging dependency)."""
    lo, hi = float(image.min()), float(image.max())
    scale = 255.0 / (hi - lo) if hi > lo else 1.0
    img = ((image - lo) * scale).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode())
        fh.write(img.tobytes())


# ---------------------------------------------------------------------------
# subcommand handlers
# ---------------------------------------------------------------------------


def cmd_gen_data(args, argv) -> int:
    from .world import generate_dataset

    t0 = time.monotonic()
    family = _load_family(args.tasks)
    world = _load_world(args.tasks)
    out = _fresh(Path(args.out))
    manifest = generate_dataset(family, args.count, args.seed, out, cfg=world,
                                min_window=args.min_window)
    print(f"wrote {manifest['count']} episodes ({manifest['n_short']} short) to {out}",
          file=sys.stderr)
    write_run_manifest(out, argv, args.seed, "none", _dataset_hash(out),
                       {"dataset": out}, t0)
    return 0


def cmd_train_vq(args, argv) -> int:
    from .vq import VqConfig, dataset_frames, train_vq
    from .world import Dataset

    t0 = time.monotonic()
    ds = Dataset(args.data)
    out = _fresh(Path(args.out))
    cfg = VqConfig(image_hw=ds.world_config.frame_hw, codebook_size=args.codebook,
                   steps=args.steps, seed=args.seed)
    frames = dataset_frames(ds, limit=args.max_frames)
    model, _ = train_vq(frames, cfg, loss_csv=out.with_suffix(".loss.csv"))
    model.save(out)
    write_run_manifest(out.parent, argv, args.seed,
                       hashlib.sha256(json.dumps(cfg.to_dict(), sort_keys=True).encode()).hexdigest(),
                       _dataset_hash(args.data), {"checkpoint": out}, t0)
    return 0


def cmd_train_acttok(args, argv) -> int:
    from .acttok import ActTokConfig, dataset_chunks, train_action_tokenizer
    from .world import ChunkingConfig, Dataset

    t0 = time.monotonic()
    ds = Dataset(args.data)
    out = _fresh(Path(args.out))
    cfg = ActTokConfig(l_a=args.la)
    chunks = dataset_chunks(ds, ChunkingConfig(l_a=args.la, n_chunks=args.n_chunks))
    tok = train_action_tokenizer(chunks, cfg)
    tok.save(out)
    print(f"learned {len(tok.merges)} merges over {len(chunks)} chunks", file=sys.stderr)
    write_run_manifest(out.parent, argv, 0,
                       hashlib.sha256(json.dumps(cfg.to_dict(), sort_keys=True).encode()).hexdigest(),
                       _dataset_hash(args.data), {"checkpoint": out}, t0)
    return 0


def cmd_train_lme(args, argv) -> int:
    from .lme import LmeConfig, dataset_clips, train_lme
    from .world import Dataset

    t0 = time.monotonic()
    ds = Dataset(args.data)
    out = _fresh(Path(args.out))
    cfg = LmeConfig(frame_hw=ds.world_config.frame_hw, frames=args.frames, steps=args.steps,
                    seed=args.seed, lambda_kl=args.lambda_kl)
    clips = dataset_clips(ds, window=args.window, f=cfg.frames, limit=args.max_clips)
    model, _ = train_lme(clips, cfg, loss_csv=out.with_suffix(".loss.csv"))
    model.save(out)
    write_run_manifest(out.parent, argv, args.seed,
                       hashlib.sha256(json.dumps(cfg.to_dict(), sort_keys=True).encode()).hexdigest(),
                       _dataset_hash(args.data), {"checkpoint": out}, t0)
    return 0


def cmd_extract_motion(args, argv) -> int:
    from .lme import LatentMotionExtractor, extract_motion_cache
    from .world import Dataset

    t0 = time.monotonic()
    ds = Dataset(args.data)
    model = LatentMotionExtractor.load(args.lme)
    out = _fresh(Path(args.out))
    meta = extract_motion_cache(ds, model, args.window, out, mode=args.mode)
    print(f"cached {len(meta['index'])} windows", file=sys.stderr)
    write_run_manifest(out.parent, argv, 0, "none", _dataset_hash(args.data),
                       {"cache": out}, t0)
    return 0


def _stage_config(args):
    from .train import TrainConfig

    overrides = args.set or []
    if args.config is not None:
        return TrainConfig.from_file(args.config, overrides=overrides)
    cfg = TrainConfig()
    values = {**cfg.to_dict()}
    for item in overrides:
        k, v = item.split("=", 1)
        values[k.strip()] = v.strip()
    from .train import _coerce_fields

    return TrainConfig.from_dict(_coerce_fields(values))


def cmd_pretrain(args, argv) -> int:
    from .train import run_pretrain

    t0 = time.monotonic()
    cfg = _stage_config(args)
    if cfg.stage != "pretrain":
        cfg = cfg.__class__.from_dict({**cfg.to_dict(), "stage": "pretrain"})
    out = _fresh(Path(args.out))
    ckpt = run_pretrain(cfg, args.data, args.vq, args.acttok, args.lme, out)
    write_run_manifest(out, argv, cfg.seed,
                       hashlib.sha256(json.dumps(cfg.to_dict(), sort_keys=True).encode()).hexdigest(),
                       _dataset_hash(args.data), {"checkpoint": ckpt}, t0)
    return 0


def cmd_finetune(args, argv) -> int:
    from .train import run_cofinetune

    t0 = time.monotonic()
    cfg = _stage_config(args)
    if cfg.stage != "cofinetune":
        cfg = cfg.__class__.from_dict({**cfg.to_dict(), "stage": "cofinetune"})
    out = _fresh(Path(args.out))
    ckpt = run_cofinetune(cfg, args.data, args.vq, args.acttok, args.lme, out,
                          init_ckpt=args.init)
    write_run_manifest(out, argv, cfg.seed,
                       hashlib.sha256(json.dumps(cfg.to_dict(), sort_keys=True).encode()).hexdigest(),
                       _dataset_hash(args.data), {"checkpoint": ckpt}, t0)
    return 0


def cmd_eval(args, argv) -> int:
    from .acttok import ActionTokenizer
    from .evaluate import TokenPolicy, success_rate, write_report
    from .train import load_policy_model
    from .vq import VqTokenizer

    t0 = time.monotonic()
    family = _load_family(args.suite)
    world = _load_world(args.suite)
    model, vocab, cfg = load_policy_model(args.ckpt)
    vq = VqTokenizer.load(args.vq)
    acttok = ActionTokenizer.load(args.acttok)
    if world.frame_hw != vq.cfg.image_hw:
        raise CliError("suite frame size does not match the vq tokenizer")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    policy = TokenPolicy(model, vocab, vq, acttok)
    seeds = [int(s) for s in args.seeds.split(",")]
    res = success_rate(policy, family, world, l_a=cfg.l_a, n_episodes=args.episodes, seeds=seeds)
    rows = [{"seed": s, "success": v} for s, v in zip(seeds, res["per_seed"])]
    write_report(out / "success", {**res, "rows": rows})
    print(f"success {res['mean']:.3f} +- {res['std']:.3f}", file=sys.stderr)
    write_run_manifest(out, argv, seeds[0], "none", "none",
                       {"report": out / "success.json"}, t0)
    return 0


def cmd_diagnose(args, argv) -> int:
    t0 = time.monotonic()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.what == "cross-recon":
        from . import world as w
        from .evaluate import cross_recon_report, motion_mask_from_frames, write_report
        from .lme import LatentMotionExtractor

        model = LatentMotionExtractor.load(args.lme)
        family = _load_family(args.suite)
        world = _load_world(args.suite)
        f = model.cfg.frames
        ious, found, seed = [], 0, args.seed
        while found < args.pairs:
            seed += 1
            ep = w.generate_episode(family, seed, world)
            if len(ep.frames) < f:
                continue
            found += 1
            moving = w.dequantize_frame(w.quantize_frame(ep.frames))[:f]
            static = np.repeat(moving[:1], f, axis=0)
            report = cross_recon_report(model, static, moving,
                                        true_mask=motion_mask_from_frames(moving))
            ious.append(report["iou"])
            if args.plots and found <= 4:
                _write_pgm(out / f"heat_max_{found}.pgm", report["heat_max"])
                _write_pgm(out / f"heat_mean_{found}.pgm", report["heat_mean"])
        summary = {"mean_iou": float(np.mean(ious)), "min_iou": float(np.min(ious)),
                   "pairs": len(ious), "rows": [{"pair": i, "iou": v} for i, v in enumerate(ious)]}
        write_report(out / "cross_recon", summary)
        print(f"mean IoU {summary['mean_iou']:.3f} over {len(ious)} pairs", file=sys.stderr)
    elif args.what == "clusters":
        from .evaluate import motion_cluster_report, write_report
        from .lme import LatentMotionExtractor
        from .world import Dataset

        model = LatentMotionExtractor.load(args.lme)
        ds = Dataset(args.data)
        clips, labels = [], []
        for ep_id in ds.episode_ids(min_length=model.cfg.frames):
            frames, _ = ds.load(ep_id)
            clips.append(frames[: model.cfg.frames])
            labels.append(ds.instruction(ep_id).split()[-1])
        report = motion_cluster_report(model, np.stack(clips), args.k, labels=labels)
        report["rows"] = [
            {"cluster": c["cluster"], "size": c["size"], "dispersion": c["dispersion"]}
            for c in report["clusters"]
        ]
        write_report(out / "clusters", report)
        print(f"purity {report.get('purity', float('nan')):.3f}", file=sys.stderr)
    elif args.what == "leakage":
        from .evaluate import leakage_audit, write_report
        from .train import load_policy_model

        model, vocab, _ = load_policy_model(args.ckpt)
        report = leakage_audit(model, vocab, n_probes=args.probes, seed=args.seed)
        report["rows"] = [{"probe_seed": s} for s in report["probe_seeds"]]
        write_report(out / "leakage", report)
        print(f"leakage max deviation {report['max_deviation']}", file=sys.stderr)
        if not report["passed"]:
            raise CliError("leakage audit failed")
    write_run_manifest(out, argv, getattr(args, "seed", 0), "none", "none", {"out": out}, t0)
    return 0


def cmd_sweep(args, argv) -> int:
    from .evaluate import ablation_sweep, write_report
    from .sweep import make_arm_runner

    t0 = time.monotonic()
    out = _fresh(Path(args.out))
    out.mkdir(parents=True)
    values = [float(v) if args.axis.startswith("lambda") else int(v)
              for v in args.values.split(",")]
    seeds = [int(s) for s in args.seeds.split(",")]
    runner = make_arm_runner(args.axis, args, out)
    report = ablation_sweep(runner, args.axis, values, seeds)
    write_report(out / "sweep", report.to_dict())
    for row in report.rows:
        print(f"{args.axis}={row['value']}: {row['mean_success']:.3f} +- {row['std_success']:.3f}",
              file=sys.stderr)
    write_run_manifest(out, argv, seeds[0], "none", _dataset_hash(args.data), {"report": out}, t0)
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="movla", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a scripted-demonstration dataset")
    g.add_argument("--tasks", default="default", help="task spec JSON or 'default'")
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--min-window", type=int, default=8)
    g.set_defaults(fn=cmd_gen_data)

    v = sub.add_parser("train-vq", help="train the visual tokenizer")
    v.add_argument("--data", required=True)
    v.add_argument("--out", required=True)
    v.add_argument("--codebook", type=int, default=256)
    v.add_argument("--steps", type=int, default=2500)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--max-frames", type=int, default=4000)
    v.set_defaults(fn=cmd_train_vq)

    a = sub.add_parser("train-acttok", help="train the action tokenizer")
    a.add_argument("--data", required=True)
    a.add_argument("--la", type=int, default=4)
    a.add_argument("--n-chunks", type=int, default=2)
    a.add_argument("--out", required=True)
    a.set_defaults(fn=cmd_train_acttok)

    m = sub.add_parser("train-lme", help="train the latent motion extractor")
    m.add_argument("--data", required=True)
    m.add_argument("--out", required=True)
    m.add_argument("--frames", type=int, default=8)
    m.add_argument("--window", type=int, default=8)
    m.add_argument("--steps", type=int, default=2500)
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--lambda-kl", type=float, default=1e-6)
    m.add_argument("--max-clips", type=int, default=6000)
    m.set_defaults(fn=cmd_train_lme)

    x = sub.add_parser("extract-motion", help="precompute the supervision cache")
    x.add_argument("--data", required=True)
    x.add_argument("--lme", required=True)
    x.add_argument("--window", type=int, default=8)
    x.add_argument("--mode", choices=["window", "pair"], default="window")
    x.add_argument("--out", required=True)
    x.set_defaults(fn=cmd_extract_motion)

    for name, fn in (("pretrain", cmd_pretrain), ("finetune", cmd_finetune)):
        s = sub.add_parser(name, help=f"run the {name} stage")
        s.add_argument("--config", default=None, help="flat key=value config file")
        s.add_argument("--set", action="append", metavar="K=V", help="config override")
        s.add_argument("--data", required=True)
        s.add_argument("--vq", required=True)
        s.add_argument("--acttok", required=True)
        s.add_argument("--lme", default=None)
        s.add_argument("--out", required=True)
        if name == "finetune":
            s.add_argument("--init", default=None, help="pretrain checkpoint to start from")
        s.set_defaults(fn=fn)

    e = sub.add_parser("eval", help="closed-loop success evaluation")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--vq", required=True)
    e.add_argument("--acttok", required=True)
    e.add_argument("--suite", default="default")
    e.add_argument("--episodes", type=int, default=100)
    e.add_argument("--seeds", default="0,1,2")
    e.add_argument("--out", required=True)
    e.set_defaults(fn=cmd_eval)

    d = sub.add_parser("diagnose", help="disentanglement / clustering / leakage reports")
    d.add_argument("what", choices=["cross-recon", "clusters", "leakage"])
    d.add_argument("--lme")
    d.add_argument("--ckpt")
    d.add_argument("--data")
    d.add_argument("--suite", default="default")
    d.add_argument("--pairs", type=int, default=20)
    d.add_argument("--k", type=int, default=2)
    d.add_argument("--probes", type=int, default=100)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--plots", action="store_true")
    d.add_argument("--out", required=True)
    d.set_defaults(fn=cmd_diagnose)

    s = sub.add_parser("sweep", help="train/evaluate a config axis over seeds")
    s.add_argument("--axis", choices=["lambda1", "lambda2", "n_chunks", "l_a"], required=True)
    s.add_argument("--values", required=True)
    s.add_argument("--seeds", default="0,1,2")
    s.add_argument("--data", required=True)
    s.add_argument("--vq", required=True)
    s.add_argument("--acttok", required=True)
    s.add_argument("--lme", required=True)
    s.add_argument("--config", default=None)
    s.add_argument("--set", action="append", metavar="K=V")
    s.add_argument("--suite", default="default")
    s.add_argument("--episodes", type=int, default=100)
    s.add_argument("--pre-steps", type=int, default=None, help="pre-training budget override")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_sweep)
    return p


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse prints usage itself
        return int(exc.code or 0)
    try:
        return args.fn(args, argv)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - the CLI boundary reports, not crashes
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
