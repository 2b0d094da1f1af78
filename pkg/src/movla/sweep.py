"""End-to-end arm runner for config-axis sweeps.

An arm = (axis value, training seed) -> closed-loop success rate. Stages that do
not depend on the swept value are shared: the pre-training checkpoint is reused
across values for a given seed (it never sees lambda1/lambda2/l_a/n_chunks at the
co-fine-tune stage), the action tokenizer is retrained only on the l_a axis, and
motion caches are built per effective window.
"""

from __future__ import annotations

from pathlib import Path

from .acttok import ActTokConfig, ActionTokenizer, dataset_chunks, train_action_tokenizer
from .evaluate import TokenPolicy, success_rate
from .train import TrainConfig, load_policy_model, run_cofinetune, run_pretrain
from .vq import VqTokenizer
from .world import ChunkingConfig, Dataset


def _base_config(args) -> TrainConfig:
    overrides = args.set or []
    if args.config is not None:
        return TrainConfig.from_file(args.config, overrides=overrides)
    from .train import _coerce_fields

    values = TrainConfig().to_dict()
    for item in overrides:
        k, v = item.split("=", 1)
        values[k.strip()] = v.strip()
    return TrainConfig.from_dict(_coerce_fields(values))


def make_arm_runner(axis: str, args, out_dir: Path):
    from .cli import _load_family, _load_world

    base = _base_config(args)
    family = _load_family(args.suite)
    world = _load_world(args.suite)
    dataset = Dataset(args.data)
    vq = VqTokenizer.load(args.vq)
    acttok_cache: dict[int, Path] = {}

    def acttok_for(l_a: int) -> Path:
        if l_a not in acttok_cache:
            if l_a == ActionTokenizer.load(args.acttok).cfg.l_a:
                acttok_cache[l_a] = Path(args.acttok)
            else:
                chunks = dataset_chunks(dataset, ChunkingConfig(l_a=l_a, n_chunks=base.n_chunks))
                tok = train_action_tokenizer(chunks, ActTokConfig(l_a=l_a))
                path = out_dir / f"acttok_la{l_a}.mvc"
                tok.save(path)
                acttok_cache[l_a] = path
        return acttok_cache[l_a]

    def pretrain_for(seed: int, acttok_path) -> Path:
        pre_dir = out_dir / f"pre_seed{seed}"
        ckpt = pre_dir / "pretrain.mvc"
        if not ckpt.exists():
            pre_cfg = TrainConfig.from_dict(
                {**base.to_dict(), "stage": "pretrain", "seed": seed,
                 "steps": args.pre_steps or base.steps}
            )
            run_pretrain(pre_cfg, args.data, args.vq, acttok_path, args.lme, pre_dir)
        return ckpt

    def run_arm(value, seed: int) -> float:
        overrides = {"stage": "cofinetune", "seed": seed, axis: value}
        l_a = int(value) if axis == "l_a" else base.l_a
        acttok_path = acttok_for(l_a)
        cfg = TrainConfig.from_dict({**base.to_dict(), **overrides})
        ft_dir = out_dir / f"ft_{axis}{value}_seed{seed}"
        ckpt = ft_dir / "cofinetune.mvc"
        if not ckpt.exists():
            init = pretrain_for(seed, acttok_path)
            run_cofinetune(cfg, args.data, args.vq, acttok_path, args.lme, ft_dir, init_ckpt=init)
        model, vocab, loaded_cfg = load_policy_model(ckpt)
        policy = TokenPolicy(model, vocab, vq, ActionTokenizer.load(acttok_path))
        res = success_rate(policy, family, world, l_a=loaded_cfg.l_a,
                           n_episodes=args.episodes, seeds=[seed])
        return res["mean"]

    return run_arm
