"""Closed-loop evaluation and the diagnostics suite.

* rollout / success_rate — run a trained policy (or any object with the same call
  surface) in the synthetic world and aggregate success statistics.
* cross_recon_report — transplant motion latents between clips and score the change
  heatmap against the environment's motion mask.
* motion_cluster_report — PCA the accumulated per-frame motion deltas to 2D
  trajectories and k-means them into archetypes.
* leakage_audit — verify bit-exact independence of the query hidden state from
  post-query tokens.
* ablation_sweep — train/evaluate a config grid and report mean +- std over seeds.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import world as w
from .acttok import ActDecodeError, ActionTokenizer
from .decoder import (
    GenerationError,
    MotionQueryDecoder,
    Vocabulary,
    build_mask,
    build_pretrain_sequence,
    generate_action_tokens,
)
from .lme import LatentMotionExtractor, clip_to_tensor
from .vq import VqTokenizer


@dataclass
class RolloutResult:
    seed: int
    success: bool
    steps_used: int
    chunks: list[np.ndarray]
    failure_reason: str  # "timeout" | "decode_error" | "none"

    def __post_init__(self):
        if self.success:
            assert self.failure_reason == "none"


class TokenPolicy:
    """Decoder + tokenizers bundled into a per-chunk action generator."""

    def __init__(
        self,
        model: MotionQueryDecoder,
        vocab: Vocabulary,
        vq: VqTokenizer,
        acttok: ActionTokenizer,
        max_tokens: int = 24,
    ):
        self.model = model
        self.vocab = vocab
        self.vq = vq
        self.acttok = acttok
        self.max_tokens = max_tokens

    def generate_chunk(self, frame: np.ndarray, instruction: str) -> np.ndarray:
        grid = self.vq.encode(frame[None])[0]
        tokens = generate_action_tokens(
            self.model, self.vocab, instruction, grid, max_tokens=self.max_tokens
        )
        return self.acttok.decode(tokens)


class ScriptedTokenizedPolicy:
    """Expert actions pushed through tokenize -> detokenize (no model in the loop)."""

    def __init__(self, acttok: ActionTokenizer, world_cfg: w.WorldConfig):
        self.acttok = acttok
        self.cfg = world_cfg
        self._state: w.WorldState | None = None

    def bind_state(self, state: w.WorldState) -> None:
        self._state = state

    def generate_chunk(self, frame: np.ndarray, instruction: str) -> np.ndarray:
        state = self._state
        acts = []
        for _ in range(self.acttok.cfg.l_a):
            a = w.scripted_policy(state, self.cfg)
            acts.append(a.as_array())
            state = w.step(state, a, self.cfg)
        chunk = np.stack(acts)
        return self.acttok.decode(self.acttok.encode(chunk))


def rollout(
    policy,
    family: w.TaskFamily,
    seed: int,
    world_cfg: w.WorldConfig,
    l_a: int,
    max_steps: int | None = None,
) -> RolloutResult:
    """Observe, generate one action chunk, execute it, repeat until success/timeout."""
    max_steps = max_steps or world_cfg.max_steps
    rng = np.random.default_rng([seed, 0x5EED])
    state = w.sample_initial_state(family, rng, world_cfg)
    instruction = w.instruction_for(state)
    chunks: list[np.ndarray] = []
    pending: list[np.ndarray] = []
    for t in range(max_steps):
        if not pending:
            frame = w.dequantize_frame(
                w.quantize_frame(w.render(state, world_cfg.frame_hw, world_cfg.frame_hw, world_cfg))
            )
            if hasattr(policy, "bind_state"):
                policy.bind_state(state)
            try:
                chunk = np.asarray(policy.generate_chunk(frame, instruction))
            except (GenerationError, ActDecodeError):
                return RolloutResult(seed, False, t, chunks, "decode_error")
            if chunk.shape[0] != l_a:
                return RolloutResult(seed, False, t, chunks, "decode_error")
            chunks.append(chunk)
            pending = [chunk[i] for i in range(l_a)]
        a = pending.pop(0)
        state = w.step(state, w.Action(float(a[0]), float(a[1]), float(a[2])), world_cfg)
        if w.is_success(state, world_cfg):
            return RolloutResult(seed, True, t + 1, chunks, "none")
    return RolloutResult(seed, False, max_steps, chunks, "timeout")


def success_rate(
    policy,
    family: w.TaskFamily,
    world_cfg: w.WorldConfig,
    l_a: int,
    n_episodes: int,
    seeds: list[int],
    max_steps: int | None = None,
) -> dict:
    """Mean success over episodes per seed bank; std across the banks."""
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    per_seed = []
    for s in seeds:
        results = [
            rollout(policy, family, int(np.random.default_rng([s, i]).integers(2**31)),
                    world_cfg, l_a, max_steps)
            for i in range(n_episodes)
        ]
        per_seed.append(float(np.mean([r.success for r in results])))
    return {
        "mean": float(np.mean(per_seed)),
        "std": float(np.std(per_seed)),
        "per_seed": per_seed,
        "n_episodes": n_episodes,
        "seeds": list(seeds),
    }


def write_report(path_base, report: dict) -> None:
    """Emit a report dict as both JSON and a flat CSV."""
    base = Path(path_base)
    with open(base.with_suffix(".json"), "w", encoding="utf-8") as fh:
        json.dump(report, fh, sort_keys=True, indent=1, default=float)
    rows = report.get("rows")
    if rows:
        with open(base.with_suffix(".csv"), "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
            writer.writeheader()
            writer.writerows(rows)


# ---------------------------------------------------------------------------
# cross-reconstruction diagnostics
# ---------------------------------------------------------------------------


def motion_mask_from_frames(frames: np.ndarray, eps: float = 0.02) -> np.ndarray:
    """Pixels that change relative to the first frame anywhere in the clip."""
    return np.abs(frames - frames[:1]).max(axis=(0, 3)) > eps


def episode_motion_mask(
    family: w.TaskFamily, seed: int, world_cfg: w.WorldConfig, n_frames: int
) -> np.ndarray:
    """Footprints of the gripper and every moved object over the window (env metadata)."""
    rng = np.random.default_rng([seed, 0x5EED])
    state = w.sample_initial_state(family, rng, world_cfg)
    hw = world_cfg.frame_hw
    mask = np.zeros((hw, hw), dtype=bool)
    prev = list(state.object_positions)
    for _ in range(n_frames):
        mask |= w._disc_mask(hw, hw, state.gripper_position, world_cfg.gripper_radius)
        a = w.scripted_policy(state, world_cfg)
        state = w.step(state, a, world_cfg)
        for p_new, p_old in zip(state.object_positions, prev):
            if p_new != p_old:
                mask |= w._disc_mask(hw, hw, p_old, world_cfg.object_radius)
                mask |= w._disc_mask(hw, hw, p_new, world_cfg.object_radius)
        prev = list(state.object_positions)
    return mask


def cross_recon_report(
    model: LatentMotionExtractor,
    static_clip: np.ndarray,
    moving_clip: np.ndarray,
    true_mask: np.ndarray | None = None,
) -> dict:
    """Decode (structure of the static clip, motion of the moving clip) and score it.

    Returns mean/max heatmaps, the static-control heatmap, the thresholded mask, and
    (when a ground-truth mask is given) its IoU. The threshold is mean + 2 std of the
    evaluated heatmap; the control map is reported for the near-zero check.
    """
    if static_clip.shape != moving_clip.shape:
        raise ValueError("clips must share one shape")
    t_static = clip_to_tensor(static_clip)
    t_moving = clip_to_tensor(moving_clip)
    z_s, m_static = model.extract_parts(t_static)
    _, m_moving = model.extract_parts(t_moving)
    with torch.no_grad():
        base = model.decode(z_s, torch.zeros_like(m_static.z_m_h), torch.zeros_like(m_static.z_m_w))
        cross = model.decode(z_s, m_moving.z_m_h, m_moving.z_m_w)
        control = model.decode(z_s, m_static.z_m_h, m_static.z_m_w)

    def _maps(a, b):
        per_frame = (a - b).abs().max(dim=2).values[0]  # channel max -> (f, H, W)
        return per_frame.mean(dim=0).numpy(), per_frame.max(dim=0).values.numpy()

    heat_mean, heat_max = _maps(cross, base)
    ctrl_mean, ctrl_max = _maps(control, base)
    threshold = float(heat_max.mean() + 2 * heat_max.std())
    pred_mask = heat_max > threshold
    report = {
        "heat_mean": heat_mean,
        "heat_max": heat_max,
        "control_mean": ctrl_mean,
        "control_max": ctrl_max,
        "threshold": threshold,
        "pred_mask": pred_mask,
        "control_peak": float(ctrl_max.max()),
    }
    if true_mask is not None:
        union = (pred_mask | true_mask).sum()
        report["iou"] = float((pred_mask & true_mask).sum() / union) if union else 0.0
    return report


# ---------------------------------------------------------------------------
# motion-latent clustering
# ---------------------------------------------------------------------------


def fit_pca(x: np.ndarray, n_components: int):
    """Plain SVD PCA; returns (components (k, d), explained variance ratio, mean)."""
    mean = x.mean(axis=0)
    centered = x - mean
    _, svals, vt = np.linalg.svd(centered, full_matrices=False)
    var = svals**2 / (len(x) - 1 if len(x) > 1 else 1)
    ratio = var / var.sum() if var.sum() > 0 else var
    return vt[:n_components], ratio[:n_components], mean


def kmeans(x: np.ndarray, k: int, seed: int = 0, restarts: int = 10, iters: int = 100):
    """Deterministic k-means with a fixed seed and multiple restarts."""
    rng = np.random.default_rng(seed)
    best_inertia, best_labels, best_centers = np.inf, None, None
    for _ in range(restarts):
        centers = x[rng.choice(len(x), size=min(k, len(x)), replace=False)]
        for _ in range(iters):
            d = ((x[:, None, :] - centers[None]) ** 2).sum(axis=2)
            labels = d.argmin(axis=1)
            new_centers = np.stack(
                [x[labels == j].mean(axis=0) if np.any(labels == j) else centers[j] for j in range(len(centers))]
            )
            if np.allclose(new_centers, centers):
                break
            centers = new_centers
        inertia = float(((x - centers[labels]) ** 2).sum())
        if inertia < best_inertia:
            best_inertia, best_labels, best_centers = inertia, labels, centers
    return best_labels, best_centers, best_inertia


def resample_curve(curve: np.ndarray, length: int) -> np.ndarray:
    """Linear resampling of a (t, d) sequence to (length, d)."""
    t = np.linspace(0, len(curve) - 1, length)
    lo = np.floor(t).astype(int)
    hi = np.minimum(lo + 1, len(curve) - 1)
    frac = (t - lo)[:, None]
    return curve[lo] * (1 - frac) + curve[hi] * frac


def motion_trajectories(
    model: LatentMotionExtractor, clips: np.ndarray, resample_len: int = 32
) -> tuple[np.ndarray, np.ndarray]:
    """Per-clip 2D trajectories from the first two PCA components.

    Per clip: per-frame motion features -> accumulated frame-wise deltas -> resample
    to a fixed length; all sequences are standardized globally, PCA maps each step to
    2D. Returns (trajectories (n, resample_len, 2), explained variance ratio).
    """
    seqs = []
    for i in range(0, len(clips), 32):
        feats = model.per_frame_motion_features(
            torch.from_numpy(clips[i : i + 32]).float().permute(0, 1, 4, 2, 3)
        ).numpy()
        for f in feats:
            deltas = np.diff(f, axis=0)
            accumulated = np.cumsum(deltas, axis=0)
            seqs.append(resample_curve(accumulated, resample_len))
    stacked = np.stack(seqs)  # (n, resample_len, d)
    flat = stacked.reshape(-1, stacked.shape[-1])
    mu, sd = flat.mean(axis=0), flat.std(axis=0)
    sd[sd == 0] = 1.0
    normed = (flat - mu) / sd
    components, ratio, mean = fit_pca(normed, 2)
    proj = (normed - mean) @ components.T
    return proj.reshape(len(stacked), resample_len, 2), ratio


def motion_cluster_report(
    model: LatentMotionExtractor,
    clips: np.ndarray,
    k_clusters: int,
    labels: list | None = None,
    resample_len: int = 32,
    seed: int = 0,
) -> dict:
    """Cluster clip trajectories; report per-cluster means, spread, exemplars, purity."""
    trajs, ratio = motion_trajectories(model, clips, resample_len)
    flat = trajs.reshape(len(trajs), -1)
    k = min(k_clusters, len(flat))
    assign, centers, inertia = kmeans(flat, k, seed=seed)
    clusters = []
    for j in range(k):
        members = np.nonzero(assign == j)[0]
        mean_traj = trajs[members].mean(axis=0) if len(members) else np.zeros((resample_len, 2))
        spread = float(trajs[members].std()) if len(members) else 0.0
        clusters.append(
            {
                "cluster": j,
                "size": int(len(members)),
                "mean_trajectory": mean_traj.tolist(),
                "dispersion": spread,
                "exemplars": members[:5].tolist(),
            }
        )
    report = {
        "clusters": clusters,
        "assignments": assign.tolist(),
        "inertia": inertia,
        "pca_explained_ratio": ratio.tolist(),
    }
    if labels is not None:
        purity_hits = 0
        for j in range(k):
            members = [labels[i] for i in np.nonzero(assign == j)[0]]
            if members:
                purity_hits += max(members.count(v) for v in set(members))
        report["purity"] = purity_hits / len(labels)
    return report


# ---------------------------------------------------------------------------
# leakage audit
# ---------------------------------------------------------------------------


def leakage_audit(
    model: MotionQueryDecoder,
    vocab: Vocabulary,
    n_probes: int = 100,
    seed: int = 0,
    corrupt_mask: bool = False,
    grid_cells: int | None = None,
) -> dict:
    """Perturb post-query tokens on random layouts; the query hidden state must not move.

    Returns max absolute deviation across probes (0.0 required in deterministic mode)
    and the probe seeds for reproduction. `corrupt_mask` is the negative control: it
    opens one illegal attention edge and must produce a nonzero deviation.
    """
    model.eval()
    rng = np.random.default_rng(seed)
    cells = grid_cells or max(1, int(np.sqrt(max(1, (model.cfg.max_len - 8) // 2))))
    words = vocab.words
    max_dev = 0.0
    probe_seeds = []
    for p in range(n_probes):
        probe_seed = int(rng.integers(2**31))
        probe_seeds.append(probe_seed)
        prng = np.random.default_rng(probe_seed)
        instruction = " ".join(prng.choice(words, size=prng.integers(1, 4)))
        g1 = prng.integers(0, vocab.n_visual, size=(cells,))
        gf = prng.integers(0, vocab.n_visual, size=(cells,))
        layout = build_pretrain_sequence(instruction, g1, gf, vocab)
        allowed = build_mask(layout)
        if corrupt_mask:
            allowed = allowed.copy()
            allowed[layout.q_position, len(layout) - 1] = True
        allowed_t = torch.from_numpy(allowed)
        with torch.no_grad():
            h_ref, _ = model(torch.tensor(layout.token_ids), allowed_t)
            ids = list(layout.token_ids)
            for pos in range(layout.q_position + 1, len(ids)):
                ids[pos] = vocab.visual_offset + int(prng.integers(0, vocab.n_visual))
            h_alt, _ = model(torch.tensor(ids), allowed_t)
        dev = float((h_ref[0, layout.q_position] - h_alt[0, layout.q_position]).abs().max())
        max_dev = max(max_dev, dev)
    return {
        "passed": max_dev == 0.0,
        "max_deviation": max_dev,
        "n_probes": n_probes,
        "probe_seeds": probe_seeds,
        "corrupt_mask": corrupt_mask,
    }


# ---------------------------------------------------------------------------
# ablation sweeps
# ---------------------------------------------------------------------------


@dataclass
class SweepReport:
    axis: str
    rows: list[dict] = field(default_factory=list)

    def add(self, value, per_seed: list[float]) -> None:
        if len(per_seed) < 3:
            raise ValueError("sweep rows require at least 3 seeds")
        self.rows.append(
            {
                "axis": self.axis,
                "value": value,
                "mean_success": float(np.mean(per_seed)),
                "std_success": float(np.std(per_seed)),
                "n_seeds": len(per_seed),
                "per_seed": list(per_seed),
            }
        )

    def to_dict(self) -> dict:
        return {"axis": self.axis, "rows": self.rows}


def ablation_sweep(run_arm, axis: str, values: list, seeds: list[int]) -> SweepReport:
    """Evaluate `run_arm(value, seed) -> success rate` over the grid; n_seeds >= 3."""
    if not values:
        raise ValueError("sweep needs at least one value")
    if len(seeds) < 3:
        raise ValueError("sweep needs at least 3 seeds")
    report = SweepReport(axis=axis)
    for value in values:
        report.add(value, [float(run_arm(value, seed)) for seed in seeds])
    return report
