"""Two-stage training: latent-motion pre-training and action co-fine-tuning.

A Trainer owns the decoder, the Adam optimizer with linear warmup, the sampling RNG,
and the frozen artifacts (vq tokenizer, action tokenizer, motion cache). Checkpoints
capture parameters, optimizer state, RNG states, and the step counter, so save +
resume reproduces an uninterrupted run bit-exactly.

Variants (all reachable purely from TrainConfig.variant):

  ours_motion_cot        pre-train [T, v1, Q, vf]; fine-tune with full-window z_m
  ours_motion            pre-train [T, v1, Q] (no terminal frame span)
  latent_action_pair     z_m from the resampled (first, last) frame pair only
  world_model_multiframe pre-train CE over several frames, no query/motion loss;
                         fine-tune with lambda1 forced to 0
  goal_frame_only        pre-train CE on the terminal frame only; fine-tune with
                         lambda1 = 0 and visual CE on the last keyframe span
  no_pretrain            fine-tune from random initialization
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import world as w
from .acttok import ActionTokenizer
from .container import load_container, save_container
from .decoder import (
    DecoderConfig,
    MotionQueryDecoder,
    Vocabulary,
    build_finetune_sequence,
    build_frames_sequence,
    build_pretrain_sequence,
    build_vocabulary,
    finetune_loss,
    pretrain_loss,
    span_cross_entropy,
)
from .lme import (
    LatentMotionExtractor,
    MotionCache,
    extract_motion_cache,
    uniform_sample_indices,
)
from .vq import VqTokenizer

CHECKPOINT_KIND = "decoder-checkpoint"

STAGES = ("pretrain", "cofinetune")
VARIANTS = (
    "ours_motion",
    "ours_motion_cot",
    "latent_action_pair",
    "world_model_multiframe",
    "goal_frame_only",
    "no_pretrain",
)


class TrainError(Exception):
    pass


@dataclass(frozen=True)
class TrainConfig:
    stage: str = "pretrain"
    variant: str = "ours_motion_cot"
    l_a: int = 4
    n_chunks: int = 2
    window: int = 8  # pre-train window; co-fine-tune uses n_chunks * l_a
    lambda1: float = 0.1
    lambda2: float = 0.01
    lambda_kl: float = 1e-6
    lr: float = 3e-4
    warmup: int = 100
    batch_size: int = 32
    steps: int = 2000
    seed: int = 0
    width: int = 128
    layers: int = 4
    heads: int = 4
    max_len: int = 192
    wm_frames: int = 4
    frame1_ce: bool = True

    def __post_init__(self):
        if self.stage not in STAGES:
            raise TrainError(f"unknown stage {self.stage!r}")
        if self.variant not in VARIANTS:
            raise TrainError(f"unknown variant {self.variant!r}")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise TrainError("loss weights must be non-negative")

    @property
    def effective_window(self) -> int:
        return self.n_chunks * self.l_a if self.stage == "cofinetune" else self.window

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        return TrainConfig(**d)

    def to_file(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for k, v in self.to_dict().items():
                fh.write(f"{k} = {v}\n")

    @staticmethod
    def from_file(path, overrides: list[str] | None = None) -> "TrainConfig":
        values: dict = {}
        with open(path, "r", encoding="utf-8") as fh:
            for ln, line in enumerate(fh, start=1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise TrainError(f"{path}:{ln}: expected 'key = value'")
                k, v = (part.strip() for part in line.split("=", 1))
                values[k] = v
        for item in overrides or []:
            if "=" not in item:
                raise TrainError(f"override {item!r} is not key=value")
            k, v = (part.strip() for part in item.split("=", 1))
            values[k] = v
        return TrainConfig.from_dict(_coerce_fields(values))


def _coerce_fields(raw: dict) -> dict:
    out = {}
    defaults = TrainConfig().to_dict()
    for k, v in raw.items():
        if k not in defaults:
            raise TrainError(f"unknown config key {k!r}")
        proto = defaults[k]
        if isinstance(v, str):
            if isinstance(proto, bool):
                v = v.lower() in ("1", "true", "yes")
            elif isinstance(proto, int):
                v = int(v)
            elif isinstance(proto, float):
                v = float(v)
        out[k] = v
    return out


# ---------------------------------------------------------------------------
# artifacts bundle
# ---------------------------------------------------------------------------


@dataclass
class Artifacts:
    dataset: w.Dataset
    vq: VqTokenizer
    acttok: ActionTokenizer | None
    lme: LatentMotionExtractor | None
    motion_cache: MotionCache | None = None
    pair_cache: MotionCache | None = None


def ensure_motion_cache(
    dataset: w.Dataset, lme: LatentMotionExtractor, window: int, cache_path, mode: str = "window"
) -> MotionCache:
    path = Path(cache_path)
    if not path.exists():
        extract_motion_cache(dataset, lme, window, path, mode=mode)
    cache = MotionCache(path)
    if cache.window != window or cache.mode != mode:
        raise TrainError(
            f"motion cache {path} is for window={cache.window}/mode={cache.mode}, "
            f"need window={window}/mode={mode}"
        )
    return cache


# ---------------------------------------------------------------------------
# trainer
# ---------------------------------------------------------------------------


class Trainer:
    def __init__(self, cfg: TrainConfig, artifacts: Artifacts, init_from: str | None = None):
        self.cfg = cfg
        self.art = artifacts
        needs_motion = cfg.variant not in ("world_model_multiframe", "goal_frame_only")
        if artifacts.acttok is None:
            raise TrainError("both stages require the trained action tokenizer (vocabulary sizing)")
        if needs_motion and artifacts.lme is None and artifacts.motion_cache is None:
            raise TrainError("this variant requires the latent motion extractor or its cache")
        n_action = artifacts.acttok.cfg.bpe_vocab_size
        self.vocab = build_vocabulary(n_visual=artifacts.vq.cfg.codebook_size, n_action=n_action)
        self.d_motion = (
            artifacts.motion_cache.z.shape[1]
            if artifacts.motion_cache is not None
            else (artifacts.lme.cfg.d_motion if artifacts.lme is not None else 1)
        )
        torch.manual_seed(cfg.seed)
        self.model = MotionQueryDecoder(
            DecoderConfig(
                vocab_size=self.vocab.size,
                d_motion=self.d_motion,
                width=cfg.width,
                layers=cfg.layers,
                heads=cfg.heads,
                max_len=cfg.max_len,
            )
        )
        if init_from is not None:
            meta, arrays = load_checkpoint_raw(init_from)
            if meta["config"]["width"] != cfg.width or meta["config"]["layers"] != cfg.layers:
                raise TrainError("init checkpoint has an incompatible model shape")
            if meta["vocab"] != self.vocab.to_dict():
                raise TrainError("init checkpoint has an incompatible vocabulary")
            self.model.load_state_dict(
                {k[len("model."):]: torch.from_numpy(v.copy()) for k, v in arrays.items() if k.startswith("model.")}
            )
        self.opt = torch.optim.Adam(self.model.parameters(), lr=cfg.lr)
        self.rng = np.random.default_rng(cfg.seed)
        self.step_count = 0
        self.history: list[dict] = []
        self._index = self._build_index()
        self._grids: dict[str, np.ndarray] = {}
        self._chunk_tokens: dict[tuple[str, int, int], list[int]] = {}
        self._t0 = time.monotonic()

    # -- data -------------------------------------------------------------

    def _build_index(self) -> list[tuple[str, int]]:
        window = self.cfg.effective_window
        index = []
        for ep_id in self.art.dataset.episode_ids(min_length=window):
            frames, _ = self.art.dataset.load(ep_id)
            for start in w.valid_window_starts(len(frames), window):
                index.append((ep_id, start))
        if not index:
            raise TrainError(f"no training windows of length {window} in the dataset")
        return index

    def _grid(self, ep_id: str, frame_idx0: int) -> np.ndarray:
        if ep_id not in self._grids:
            frames, _ = self.art.dataset.load(ep_id)
            self._grids[ep_id] = self.art.vq.encode(frames).astype(np.int32)
        return self._grids[ep_id][frame_idx0]

    def _chunk(self, ep_id: str, start: int, j: int) -> list[int]:
        key = (ep_id, start, j)
        if key not in self._chunk_tokens:
            _, actions = self.art.dataset.load(ep_id)
            base = start - 1 + j * self.cfg.l_a
            self._chunk_tokens[key] = self.art.acttok.encode(actions[base : base + self.cfg.l_a])
        return self._chunk_tokens[key]

    def _motion_target(self, ep_id: str, start: int) -> np.ndarray:
        if self.cfg.variant == "latent_action_pair":
            return self.art.pair_cache.get(ep_id, start)
        return self.art.motion_cache.get(ep_id, start)

    def _build_example(self, ep_id: str, start: int):
        cfg = self.cfg
        instruction = self.art.dataset.instruction(ep_id)
        window = cfg.effective_window
        first = self._grid(ep_id, start - 1)
        last = self._grid(ep_id, start - 1 + window - 1)
        z_target = None
        if cfg.stage == "pretrain":
            if cfg.variant in ("ours_motion", "latent_action_pair"):
                layout = build_pretrain_sequence(instruction, first, None, self.vocab)
                z_target = self._motion_target(ep_id, start)
            elif cfg.variant in ("ours_motion_cot", "no_pretrain"):
                layout = build_pretrain_sequence(instruction, first, last, self.vocab)
                z_target = self._motion_target(ep_id, start)
            elif cfg.variant == "world_model_multiframe":
                rel = uniform_sample_indices(window, min(cfg.wm_frames, window))
                grids = [self._grid(ep_id, start - 1 + int(r)) for r in rel]
                layout = build_frames_sequence(instruction, grids, self.vocab)
            else:  # goal_frame_only
                layout = build_frames_sequence(instruction, [first, last], self.vocab)
        else:
            grids, chunks = [], []
            for j in range(cfg.n_chunks):
                grids.append(self._grid(ep_id, start - 1 + j * cfg.l_a))
                chunks.append(self._chunk(ep_id, start, j))
            layout = build_finetune_sequence(instruction, grids, chunks, self.vocab)
            if cfg.variant not in ("world_model_multiframe", "goal_frame_only"):
                z_target = self._motion_target(ep_id, start)
        return layout, z_target

    def sample_batch(self):
        picks = self.rng.integers(0, len(self._index), size=self.cfg.batch_size)
        return [self._build_example(*self._index[int(i)]) for i in picks]

    # -- optimization -------------------------------------------------------

    def _batch_loss(self, examples):
        cfg = self.cfg
        pad = self.vocab.special_id("<pad>")
        longest = max(len(layout) for layout, _ in examples)
        ids = torch.full((len(examples), longest), pad, dtype=torch.long)
        for i, (layout, _) in enumerate(examples):
            ids[i, : len(layout)] = torch.tensor(layout.token_ids)
        allowed = torch.tril(torch.ones(longest, longest, dtype=torch.bool))
        hidden, logits = self.model(ids, allowed)
        comp_lists: dict[str, list[torch.Tensor]] = {}
        motion_dims = 0
        for i, (layout, z_target) in enumerate(examples):
            z_hat = tgt = None
            if z_target is not None and layout.q_position is not None:
                z_hat = self.model.predict_motion(hidden[i, layout.q_position])
                tgt = torch.from_numpy(np.asarray(z_target)).to(z_hat.dtype)
                motion_dims = len(z_target)
            if cfg.stage == "pretrain":
                if cfg.variant in ("world_model_multiframe", "goal_frame_only"):
                    coverage = "last" if cfg.variant == "goal_frame_only" else "all"
                    parts = self._frames_ce(layout, logits[i], coverage)
                else:
                    parts = pretrain_loss(layout, logits[i], z_hat, tgt, frame1_ce=cfg.frame1_ce)
            else:
                coverage = "last" if cfg.variant == "goal_frame_only" else "all"
                lam1 = 0.0 if cfg.variant in ("world_model_multiframe", "goal_frame_only") else cfg.lambda1
                parts = finetune_loss(
                    layout, logits[i], z_hat, tgt, lam1, cfg.lambda2,
                    visual_coverage=coverage, frame1_ce=cfg.frame1_ce,
                )
            for k, v in parts.items():
                if k != "total":
                    comp_lists.setdefault(k, []).append(v)
        components = {k: torch.stack(v).mean() for k, v in comp_lists.items()}
        # double-precision sum so logged components reproduce the optimized total exactly
        total = sum(v.double() for v in components.values())
        return total, components, motion_dims

    @staticmethod
    def _frames_ce(layout, logits, coverage: str = "all"):
        ids = torch.as_tensor(layout.token_ids, dtype=torch.long)
        spans = [s for s in layout.spans if s.role.startswith("visual_")]
        if coverage == "last":
            spans = spans[-1:]
        ce = torch.zeros((), dtype=logits.dtype)
        for s in spans:
            ce = ce + span_cross_entropy(logits, ids, s)
        return {"ce_visual": ce}

    def train_steps(self, n: int) -> None:
        self.model.train()
        cfg = self.cfg
        for _ in range(n):
            lr = cfg.lr * min(1.0, (self.step_count + 1) / max(1, cfg.warmup))
            for group in self.opt.param_groups:
                group["lr"] = lr
            examples = self.sample_batch()
            total, components, motion_dims = self._batch_loss(examples)
            if not torch.isfinite(total):
                raise TrainError(f"loss diverged at step {self.step_count}")
            self.opt.zero_grad(set_to_none=True)
            total.backward()
            self.opt.step()
            row = {
                "step": self.step_count,
                "lr": lr,
                "total": total.item(),
                "walltime": time.monotonic() - self._t0,
            }
            for k, v in components.items():
                row[k] = v.item()
            if "motion" in components and motion_dims:
                weight = cfg.lambda1 if cfg.stage == "cofinetune" else 1.0
                raw = components["motion"].item() / weight if weight > 0 else 0.0
                row["motion_mse"] = raw / motion_dims
            self.history.append(row)
            self.step_count += 1
        self.model.eval()

    # -- persistence --------------------------------------------------------

    def metrics_to_csv(self, path) -> None:
        if not self.history:
            return
        fields = sorted({k for row in self.history for k in row}, key=lambda k: (k != "step", k))
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=fields, restval="")
            writer.writeheader()
            writer.writerows(self.history)

    def save_checkpoint(self, path) -> None:
        arrays: dict[str, np.ndarray] = {}
        for k, v in self.model.state_dict().items():
            arrays[f"model.{k}"] = v.detach().numpy()
        opt_state = self.opt.state_dict()["state"]
        for idx, state in opt_state.items():
            for k, v in state.items():
                arrays[f"opt.{idx}.{k}"] = np.asarray(
                    v.detach().numpy() if isinstance(v, torch.Tensor) else v
                )
        meta = {
            "kind": CHECKPOINT_KIND,
            "config": self.cfg.to_dict(),
            "vocab": self.vocab.to_dict(),
            "d_motion": self.d_motion,
            "step": self.step_count,
            "np_rng": _encode_rng_state(self.rng.bit_generator.state),
        }
        save_container(path, meta, arrays)

    def load_checkpoint_state(self, path) -> None:
        meta, arrays = load_checkpoint_raw(path)
        if meta["config"] != self.cfg.to_dict():
            raise TrainError("checkpoint config does not match the trainer config")
        self.model.load_state_dict(
            {k[len("model."):]: torch.from_numpy(v.copy()) for k, v in arrays.items() if k.startswith("model.")}
        )
        groups = self.opt.state_dict()["param_groups"]
        state: dict = {}
        for k, v in arrays.items():
            if not k.startswith("opt."):
                continue
            _, idx, name = k.split(".", 2)
            entry = state.setdefault(int(idx), {})
            entry[name] = torch.from_numpy(v.copy()) if v.ndim else torch.tensor(v.item())
        self.opt.load_state_dict({"state": state, "param_groups": groups})
        self.rng.bit_generator.state = _decode_rng_state(meta["np_rng"])
        self.step_count = meta["step"]


def _encode_rng_state(state: dict) -> dict:
    def convert(v):
        if isinstance(v, dict):
            return {k: convert(x) for k, x in v.items()}
        if isinstance(v, (np.integer,)):
            return int(v)
        return v

    return convert(state)


def _decode_rng_state(state: dict) -> dict:
    return state


def load_checkpoint_raw(path):
    meta, arrays = load_container(path)
    if meta.get("kind") != CHECKPOINT_KIND:
        raise TrainError(f"{path} is not a decoder checkpoint")
    return meta, arrays


def load_policy_model(path) -> tuple[MotionQueryDecoder, Vocabulary, TrainConfig]:
    meta, arrays = load_checkpoint_raw(path)
    cfg = TrainConfig.from_dict(meta["config"])
    vocab = Vocabulary.from_dict(meta["vocab"])
    model = MotionQueryDecoder(
        DecoderConfig(
            vocab_size=vocab.size,
            d_motion=meta["d_motion"],
            width=cfg.width,
            layers=cfg.layers,
            heads=cfg.heads,
            max_len=cfg.max_len,
        )
    )
    model.load_state_dict(
        {k[len("model."):]: torch.from_numpy(v.copy()) for k, v in arrays.items() if k.startswith("model.")}
    )
    model.eval()
    return model, vocab, cfg


# ---------------------------------------------------------------------------
# stage entry points
# ---------------------------------------------------------------------------


def _prepare_artifacts(cfg: TrainConfig, dataset_dir, vq_path, acttok_path, lme_path, cache_dir) -> Artifacts:
    dataset = w.Dataset(dataset_dir)
    if not Path(vq_path).exists():
        raise TrainError(f"missing vq checkpoint {vq_path}")
    vq = VqTokenizer.load(vq_path)
    if acttok_path is None or not Path(acttok_path).exists():
        raise TrainError("missing action tokenizer checkpoint")
    acttok = ActionTokenizer.load(acttok_path)
    art = Artifacts(dataset=dataset, vq=vq, acttok=acttok, lme=None)
    needs_motion = cfg.variant not in ("world_model_multiframe", "goal_frame_only")
    if needs_motion:
        if lme_path is None or not Path(lme_path).exists():
            raise TrainError("missing latent motion extractor checkpoint")
        art.lme = LatentMotionExtractor.load(lme_path)
        window = cfg.effective_window
        cache_dir = Path(cache_dir)
        cache_dir.mkdir(parents=True, exist_ok=True)
        if cfg.variant == "latent_action_pair":
            art.pair_cache = ensure_motion_cache(
                dataset, art.lme, window, cache_dir / f"motion_pair_w{window}.mvc", mode="pair"
            )
        else:
            art.motion_cache = ensure_motion_cache(
                dataset, art.lme, window, cache_dir / f"motion_window_w{window}.mvc", mode="window"
            )
    return art


def run_pretrain(cfg: TrainConfig, dataset_dir, vq_path, acttok_path, lme_path, out_dir) -> Path:
    """Train the pre-training stage end to end; writes checkpoint + metrics CSV."""
    if cfg.stage != "pretrain":
        raise TrainError("run_pretrain requires stage=pretrain")
    if cfg.variant == "no_pretrain":
        raise TrainError("variant no_pretrain skips pre-training entirely")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    art = _prepare_artifacts(cfg, dataset_dir, vq_path, acttok_path, lme_path, out)
    trainer = Trainer(cfg, art)
    trainer.train_steps(cfg.steps)
    ckpt = out / "pretrain.mvc"
    trainer.save_checkpoint(ckpt)
    trainer.metrics_to_csv(out / "pretrain_metrics.csv")
    return ckpt


def run_cofinetune(
    cfg: TrainConfig, dataset_dir, vq_path, acttok_path, lme_path, out_dir, init_ckpt=None
) -> Path:
    """Train the co-fine-tuning stage; `init_ckpt=None` means random initialization."""
    if cfg.stage != "cofinetune":
        raise TrainError("run_cofinetune requires stage=cofinetune")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    art = _prepare_artifacts(cfg, dataset_dir, vq_path, acttok_path, lme_path, out)
    if cfg.variant == "no_pretrain" and init_ckpt is not None:
        raise TrainError("variant no_pretrain must start from random initialization")
    trainer = Trainer(cfg, art, init_from=init_ckpt)
    trainer.train_steps(cfg.steps)
    ckpt = out / "cofinetune.mvc"
    trainer.save_checkpoint(ckpt)
    trainer.metrics_to_csv(out / "cofinetune_metrics.csv")
    return ckpt
