"""Latent motion extractor: a video VAE that splits a clip into structure and motion.

A clip of ``f`` frames is encoded per-frame to a latent tensor z of shape
(d_z, f, h, w). Two branches disentangle it:

* structure branch — ``n_q`` learnable queries cross-attend over the f temporal
  positions independently at every spatial cell (temporal position encodings enter
  the keys only), giving a slow/global summary z_s of shape (d_s, n_q, h_s, w_s);
* motion branch — a strided conv reduces z to z' of shape (d_m, f, h_m, w_m), then
  directional averaging collapses height and width separately:
  z_m_h = mean over rows, z_m_w = mean over columns.

The two motion components flatten (h-block first, then w-block, both in (d, t, axis)
index order) into the supervision vector z_m of length D_m = f * d_m * (h_m + w_m).
The decoder upsamples the three components to a common (d, f, h, w) grid, sums them,
and reconstructs the clip. Training optimizes MSE over all elements plus a small
KL term on both posteriors; perceptual/adversarial weights exist in the config but
are pinned to zero.

Directional means are computed by sorted-order summation so that permuting the
reduced axis reproduces the result bit-exactly (IEEE addition is order-sensitive).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .container import load_container, save_container


class LmeError(Exception):
    pass


@dataclass(frozen=True)
class LmeConfig:
    frames: int = 8
    frame_hw: int = 32
    enc_channels: tuple[int, int] = (32, 64)
    d_z: int = 8
    d_attn: int = 16
    n_q: int = 4
    d_s: int = 4
    structure_pool: int = 2
    motion_channels: int = 32
    d_m: int = 4
    d_dec: int = 32
    dec_channels: tuple[int, int] = (48, 32)
    lambda_p: float = 0.0
    lambda_gan: float = 0.0
    lambda_kl: float = 1e-6
    motion_dropout: float = 0.2
    static_fraction: float = 0.25
    lr: float = 2e-3
    steps: int = 2500
    batch_size: int = 8
    seed: int = 0
    val_fraction: float = 0.1
    val_interval: int = 100

    def __post_init__(self):
        if self.n_q > self.frames:
            raise LmeError(f"n_q={self.n_q} must not exceed frames={self.frames}")
        if self.frames % self.n_q != 0:
            raise LmeError("frames must be divisible by n_q for temporal upsampling")
        if self.frame_hw % 4 != 0 or (self.frame_hw // 4) % self.structure_pool != 0:
            raise LmeError("frame size incompatible with the conv/pool stack")
        if self.lambda_p != 0.0 or self.lambda_gan != 0.0:
            raise LmeError("perceptual and adversarial weights are fixed to 0 in this build")
        if self.lambda_kl < 0:
            raise LmeError("lambda_kl must be non-negative")

    @property
    def latent_hw(self) -> int:
        return self.frame_hw // 4

    @property
    def h_m(self) -> int:
        return self.latent_hw // 2

    @property
    def w_m(self) -> int:
        return self.latent_hw // 2

    @property
    def h_s(self) -> int:
        return self.latent_hw // self.structure_pool

    @property
    def w_s(self) -> int:
        return self.latent_hw // self.structure_pool

    @property
    def d_motion(self) -> int:
        """Flattened motion-vector length: f * d_m * (h_m + w_m)."""
        return self.frames * self.d_m * (self.h_m + self.w_m)

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["enc_channels"] = list(self.enc_channels)
        d["dec_channels"] = list(self.dec_channels)
        return d

    @staticmethod
    def from_dict(d: dict) -> "LmeConfig":
        d = dict(d)
        d["enc_channels"] = tuple(d["enc_channels"])
        d["dec_channels"] = tuple(d["dec_channels"])
        return LmeConfig(**d)


def paper_shape_config() -> LmeConfig:
    """Configuration reproducing the published latent shapes (used in shape tests)."""
    return LmeConfig(
        frames=16,
        frame_hw=56,
        n_q=16,
        d_s=4,
        d_m=8,
        structure_pool=2,
    )


def micro_config() -> LmeConfig:
    """Sub-1k-parameter configuration for finite-difference gradient checks."""
    return LmeConfig(
        frames=2,
        frame_hw=16,
        enc_channels=(3, 3),
        d_z=3,
        d_attn=3,
        n_q=2,
        d_s=2,
        structure_pool=2,
        motion_channels=3,
        d_m=2,
        d_dec=3,
        dec_channels=(3, 3),
    )


def sorted_mean(x: torch.Tensor, dim: int) -> torch.Tensor:
    """Mean along `dim` with summands added in sorted order.

    The result is a function of the value multiset only, so permuting the reduced
    axis is bit-exactly invariant.
    """
    vals, _ = torch.sort(x, dim=dim)
    return vals.sum(dim=dim) / x.shape[dim]


@dataclass
class MotionLatents:
    z_prime: torch.Tensor  # (B, d_m, f, h_m, w_m)
    z_m_h: torch.Tensor  # (B, d_m, f, w_m)
    z_m_w: torch.Tensor  # (B, d_m, f, h_m)


@dataclass
class LatentStats:
    mu_s: torch.Tensor
    logvar_s: torch.Tensor
    mu_m: torch.Tensor
    logvar_m: torch.Tensor


class LatentMotionExtractor(nn.Module):
    def __init__(self, cfg: LmeConfig):
        super().__init__()
        self.cfg = cfg
        c1, c2 = cfg.enc_channels
        self.encoder = nn.Sequential(
            nn.Conv2d(3, c1, 3, stride=2, padding=1),
            nn.GELU(),
            nn.Conv2d(c1, c2, 3, stride=2, padding=1),
            nn.GELU(),
            nn.Conv2d(c2, cfg.d_z, 3, padding=1),
        )
        # structure branch: single cross-attention layer over time per spatial cell
        self.queries = nn.Parameter(torch.randn(cfg.n_q, cfg.d_attn) * 0.5)
        self.key_proj = nn.Linear(cfg.d_z, cfg.d_attn)
        self.value_proj = nn.Linear(cfg.d_z, cfg.d_attn)
        self.time_emb = nn.Parameter(torch.randn(cfg.frames, cfg.d_attn) * 0.1)
        self.structure_head = nn.Linear(cfg.d_attn, 2 * cfg.d_s)
        # motion branch: strided conv reduction, then posterior heads
        self.motion_conv = nn.Conv2d(cfg.d_z, cfg.motion_channels, 3, stride=2, padding=1)
        self.motion_head = nn.Conv2d(cfg.motion_channels, 2 * cfg.d_m, 1)
        # decoder projections to the shared (d_dec, f, h, w) grid
        self.proj_structure = nn.Conv2d(cfg.d_s, cfg.d_dec, 1)
        self.proj_motion_h = nn.Conv2d(cfg.d_m, cfg.d_dec, 1)
        self.proj_motion_w = nn.Conv2d(cfg.d_m, cfg.d_dec, 1)
        # gated conv layers so row x column motion profiles can interact
        # multiplicatively (paint at intersections rather than along whole bands)
        g1, g2 = cfg.dec_channels
        self.frame_decoder = nn.Sequential(
            nn.Conv2d(cfg.d_dec, 2 * g1, 3, padding=1),
            nn.GLU(dim=1),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(g1, 2 * g2, 3, padding=1),
            nn.GLU(dim=1),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(g2, 3, 3, padding=1),
        )

    # -- encoding ---------------------------------------------------------

    def encode(self, clip: torch.Tensor) -> torch.Tensor:
        """clip (B, f, 3, H, W) -> z (B, d_z, f, h, w)."""
        cfg = self.cfg
        B, f, C, H, W = clip.shape
        if f != cfg.frames or H != cfg.frame_hw or W != cfg.frame_hw or C != 3:
            raise LmeError(
                f"clip shape {(f, C, H, W)} does not match config "
                f"({cfg.frames}, 3, {cfg.frame_hw}, {cfg.frame_hw})"
            )
        z = self.encoder(clip.reshape(B * f, C, H, W))
        return z.reshape(B, f, cfg.d_z, cfg.latent_hw, cfg.latent_hw).permute(0, 2, 1, 3, 4)

    def structure_branch(self, z: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """z (B, d_z, f, h, w) -> posterior (mu_s, logvar_s), each (B, d_s, n_q, h_s, w_s)."""
        cfg = self.cfg
        B, _, f, h, w = z.shape
        tokens = z.permute(0, 3, 4, 2, 1).reshape(B * h * w, f, cfg.d_z)
        keys = self.key_proj(tokens) + self.time_emb[None, :f]
        values = self.value_proj(tokens)
        scores = self.queries[None] @ keys.transpose(1, 2) / math.sqrt(cfg.d_attn)
        attn = torch.softmax(scores, dim=-1)
        agg = attn @ values  # (B*h*w, n_q, d_attn)
        out = self.structure_head(agg)
        out = out.reshape(B, h, w, cfg.n_q, 2 * cfg.d_s).permute(0, 4, 3, 1, 2)
        pooled = torch.nn.functional.avg_pool3d(
            out, kernel_size=(1, cfg.structure_pool, cfg.structure_pool)
        )
        mu, logvar = pooled.chunk(2, dim=1)
        return mu, logvar

    def motion_branch(self, z: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """z (B, d_z, f, h, w) -> posterior (mu_m, logvar_m), each (B, d_m, f, h_m, w_m).

        The reduction runs on first-frame-referenced features (z_t - z_1), a fixed
        temporal differencing conv: a temporally constant clip yields identical
        (content-free) motion latents at every frame, pushing statics into the
        structure branch.
        """
        cfg = self.cfg
        B, _, f, h, w = z.shape
        diff = z - z[:, :, :1]
        x = diff.permute(0, 2, 1, 3, 4).reshape(B * f, cfg.d_z, h, w)
        x = self.motion_head(torch.nn.functional.gelu(self.motion_conv(x)))
        x = x.reshape(B, f, 2 * cfg.d_m, cfg.h_m, cfg.w_m).permute(0, 2, 1, 3, 4)
        mu, logvar = x.chunk(2, dim=1)
        return mu, logvar

    @staticmethod
    def reduce_motion(z_prime: torch.Tensor) -> MotionLatents:
        """Directional averaging: mean over height and over width, order-insensitive."""
        return MotionLatents(
            z_prime=z_prime,
            z_m_h=sorted_mean(z_prime, dim=3),
            z_m_w=sorted_mean(z_prime, dim=4),
        )

    @staticmethod
    def fuse_motion(m: MotionLatents) -> torch.Tensor:
        """Flatten h-block then w-block, each in (d, t, axis) index order -> (B, D_m)."""
        B = m.z_m_h.shape[0]
        return torch.cat([m.z_m_h.reshape(B, -1), m.z_m_w.reshape(B, -1)], dim=1)

    # -- decoding ---------------------------------------------------------

    def decode(self, z_s: torch.Tensor, z_m_h: torch.Tensor, z_m_w: torch.Tensor) -> torch.Tensor:
        """Upsample the three components to (d_dec, f, h, w), sum, decode frames."""
        cfg = self.cfg
        B = z_s.shape[0]
        f, h, w = cfg.frames, cfg.latent_hw, cfg.latent_hw
        if z_s.shape[1:] != (cfg.d_s, cfg.n_q, cfg.h_s, cfg.w_s):
            raise LmeError(f"structure latent shape {tuple(z_s.shape[1:])} mismatches config")
        if z_m_h.shape[1:] != (cfg.d_m, f, cfg.w_m) or z_m_w.shape[1:] != (cfg.d_m, f, cfg.h_m):
            raise LmeError("motion latent shape mismatches config")
        s = self.proj_structure(
            z_s.permute(0, 2, 1, 3, 4).reshape(B * cfg.n_q, cfg.d_s, cfg.h_s, cfg.w_s)
        )
        s = torch.nn.functional.interpolate(s, size=(h, w), mode="nearest")
        s = s.reshape(B, cfg.n_q, cfg.d_dec, h, w)
        s = s.repeat_interleave(f // cfg.n_q, dim=1)  # piecewise-constant in time
        mh = self.proj_motion_h(z_m_h.permute(0, 2, 1, 3).reshape(B * f, cfg.d_m, 1, cfg.w_m))
        mh = torch.nn.functional.interpolate(mh, size=(h, w), mode="nearest")
        mw = self.proj_motion_w(z_m_w.permute(0, 2, 1, 3).reshape(B * f, cfg.d_m, cfg.h_m, 1))
        mw = torch.nn.functional.interpolate(mw, size=(h, w), mode="nearest")
        fused = s.reshape(B * f, cfg.d_dec, h, w) + mh + mw
        frames = self.frame_decoder(fused)
        return frames.reshape(B, f, 3, cfg.frame_hw, cfg.frame_hw)

    # -- end-to-end -------------------------------------------------------

    def forward(
        self,
        clip: torch.Tensor,
        noise: tuple[torch.Tensor, torch.Tensor] | None = None,
        motion_keep: torch.Tensor | None = None,
    ):
        """Returns (reconstruction, LatentStats).

        `noise` enables posterior sampling; `motion_keep` (B,) multiplies the motion
        components per sample (0 drops them), used during training so that the
        structure-only decode path stays in-distribution.
        """
        z = self.encode(clip)
        mu_s, logvar_s = self.structure_branch(z)
        mu_m, logvar_m = self.motion_branch(z)
        if noise is not None:
            eps_s, eps_m = noise
            z_s = mu_s + torch.exp(0.5 * logvar_s) * eps_s
            z_prime = mu_m + torch.exp(0.5 * logvar_m) * eps_m
        else:
            z_s, z_prime = mu_s, mu_m
        m = self.reduce_motion(z_prime)
        z_m_h, z_m_w = m.z_m_h, m.z_m_w
        if motion_keep is not None:
            keep = motion_keep.reshape(-1, 1, 1, 1)
            z_m_h = z_m_h * keep
            z_m_w = z_m_w * keep
        recon = self.decode(z_s, z_m_h, z_m_w)
        return recon, LatentStats(mu_s, logvar_s, mu_m, logvar_m)

    @torch.no_grad()
    def extract(self, clip: torch.Tensor) -> torch.Tensor:
        """Deterministic supervision vector z_m (posterior mean path) -> (B, D_m)."""
        self.eval()
        z = self.encode(clip)
        mu_m, _ = self.motion_branch(z)
        return self.fuse_motion(self.reduce_motion(mu_m))

    @torch.no_grad()
    def extract_parts(self, clip: torch.Tensor):
        """(z_s, MotionLatents) at the posterior mean, for diagnostics."""
        self.eval()
        z = self.encode(clip)
        mu_s, _ = self.structure_branch(z)
        mu_m, _ = self.motion_branch(z)
        return mu_s, self.reduce_motion(mu_m)

    @torch.no_grad()
    def per_frame_motion_features(self, clip: torch.Tensor) -> torch.Tensor:
        """(B, f, d_m * (h_m + w_m)) motion features, one vector per frame."""
        self.eval()
        z = self.encode(clip)
        mu_m, _ = self.motion_branch(z)
        m = self.reduce_motion(mu_m)
        B, _, f, _ = m.z_m_h.shape
        per_h = m.z_m_h.permute(0, 2, 1, 3).reshape(B, f, -1)
        per_w = m.z_m_w.permute(0, 2, 1, 3).reshape(B, f, -1)
        return torch.cat([per_h, per_w], dim=2)

    def save(self, path) -> None:
        arrays = {k: v.detach().numpy() for k, v in self.state_dict().items()}
        save_container(path, {"kind": "latent-motion-extractor", "cfg": self.cfg.to_dict()}, arrays)

    @staticmethod
    def load(path) -> "LatentMotionExtractor":
        meta, arrays = load_container(path)
        if meta.get("kind") != "latent-motion-extractor":
            raise LmeError(f"{path} is not an extractor checkpoint")
        model = LatentMotionExtractor(LmeConfig.from_dict(meta["cfg"]))
        model.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in arrays.items()})
        model.eval()
        return model


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


def gaussian_kl(mu: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """KL(N(mu, sigma^2) || N(0, 1)) summed over latent dims, averaged over batch."""
    per_element = 0.5 * (mu.pow(2) + logvar.exp() - 1.0 - logvar)
    return per_element.reshape(mu.shape[0], -1).sum(dim=1).mean()


def vae_loss(clip: torch.Tensor, recon: torch.Tensor, stats: LatentStats, cfg: LmeConfig) -> dict:
    """Reconstruction MSE over all elements + weighted KL on both posteriors.

    Perceptual and adversarial components are reported as exact zeros (weights are
    pinned to 0). Raises on non-finite components.
    """
    if clip.shape != recon.shape:
        raise LmeError(f"clip {tuple(clip.shape)} vs recon {tuple(recon.shape)} shape mismatch")
    rec = torch.mean((recon - clip) ** 2)
    kl = gaussian_kl(stats.mu_s, stats.logvar_s) + gaussian_kl(stats.mu_m, stats.logvar_m)
    zero = torch.zeros((), dtype=rec.dtype)
    total = rec + cfg.lambda_p * zero + cfg.lambda_gan * zero + cfg.lambda_kl * kl
    for name, value in (("rec", rec), ("kl", kl), ("total", total)):
        if not torch.isfinite(value):
            raise LmeError(f"non-finite loss component {name}: {value.item()}")
    return {"total": total, "rec": rec, "kl": kl, "perceptual": zero, "gan": zero}


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def uniform_sample_indices(length: int, f: int) -> np.ndarray:
    """Uniformly spread f indices over [0, length); identity when length == f."""
    if length < 1:
        raise ValueError("empty window")
    return np.rint(np.linspace(0, length - 1, f)).astype(np.int64)


def resample_clip(frames: np.ndarray, f: int) -> np.ndarray:
    return frames[uniform_sample_indices(len(frames), f)]


def clip_to_tensor(frames: np.ndarray) -> torch.Tensor:
    """(f, H, W, 3) float frames -> (1, f, 3, H, W) tensor."""
    t = torch.from_numpy(np.ascontiguousarray(frames)).float()
    return t.permute(0, 3, 1, 2).unsqueeze(0)


def train_lme(
    clips: np.ndarray,
    cfg: LmeConfig,
    loss_csv=None,
) -> tuple[LatentMotionExtractor, list[dict]]:
    """Train on (N, f, H, W, 3) clips; select the lowest-validation-MSE checkpoint.

    A held-out fraction of the clips forms the validation split; every
    ``val_interval`` steps the reconstruction loss is evaluated on it and the best
    parameter snapshot is kept.
    """
    if len(clips) < 2:
        raise LmeError("need at least two clips (one reserved for validation)")
    torch.manual_seed(cfg.seed)
    model = LatentMotionExtractor(cfg)
    gen = torch.Generator().manual_seed(cfg.seed + 1)
    rng = np.random.default_rng(cfg.seed)
    n_val = max(1, int(len(clips) * cfg.val_fraction))
    order = rng.permutation(len(clips))
    val_idx, train_idx = order[:n_val], order[n_val:]
    data = torch.from_numpy(clips).float().permute(0, 1, 4, 2, 3)
    val = data[val_idx]
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    history = []
    best = {"val_rec": float("inf"), "state": None, "step": -1}

    def validate() -> float:
        model.eval()
        with torch.no_grad():
            tot, n = 0.0, 0
            for i in range(0, len(val), cfg.batch_size):
                batch = val[i : i + cfg.batch_size]
                recon, _ = model(batch)
                tot += torch.sum((recon - batch) ** 2).item()
                n += batch.numel()
        model.train()
        return tot / n

    model.train()
    for step_i in range(cfg.steps):
        pick = rng.choice(train_idx, size=min(cfg.batch_size, len(train_idx)), replace=False)
        batch = data[pick]
        n_static = int(len(batch) * cfg.static_fraction)
        if n_static:
            # frozen clips keep the no-motion decode path in-distribution
            batch = batch.clone()
            t_pick = rng.integers(0, batch.shape[1], size=n_static)
            for i, t in enumerate(t_pick):
                row = len(batch) - 1 - i
                batch[row] = batch[row, t : t + 1]
        eps_s = torch.randn(
            (len(batch), cfg.d_s, cfg.n_q, cfg.h_s, cfg.w_s), generator=gen
        )
        eps_m = torch.randn(
            (len(batch), cfg.d_m, cfg.frames, cfg.h_m, cfg.w_m), generator=gen
        )
        keep = None
        if cfg.motion_dropout > 0:
            keep = (torch.rand(len(batch), generator=gen) >= cfg.motion_dropout).float()
        recon, stats = model(batch, noise=(eps_s, eps_m), motion_keep=keep)
        parts = vae_loss(batch, recon, stats, cfg)
        opt.zero_grad(set_to_none=True)
        parts["total"].backward()
        opt.step()
        row = {
            "step": step_i,
            "total": parts["total"].item(),
            "rec": parts["rec"].item(),
            "kl": parts["kl"].item(),
            "val_rec": "",
        }
        if (step_i + 1) % cfg.val_interval == 0 or step_i == cfg.steps - 1:
            val_rec = validate()
            row["val_rec"] = val_rec
            if val_rec < best["val_rec"]:
                best = {
                    "val_rec": val_rec,
                    "state": {k: v.detach().clone() for k, v in model.state_dict().items()},
                    "step": step_i,
                }
        history.append(row)
    if best["state"] is not None:
        model.load_state_dict(best["state"])
    model.eval()
    model.selected_step = best["step"]
    model.selected_val_rec = best["val_rec"]
    if loss_csv is not None:
        with open(loss_csv, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["step", "total", "rec", "kl", "val_rec"])
            writer.writeheader()
            writer.writerows(history)
    return model, history


# ---------------------------------------------------------------------------
# supervision cache
# ---------------------------------------------------------------------------


def dataset_clips(dataset, window: int, f: int, limit: int | None = None) -> np.ndarray:
    """All length-`window` windows resampled to f frames, as one (N, f, H, W, 3) array."""
    from .world import valid_window_starts

    clips = []
    for ep_id in dataset.episode_ids(min_length=window):
        frames, _ = dataset.load(ep_id)
        for start in valid_window_starts(len(frames), window):
            clips.append(resample_clip(frames[start - 1 : start - 1 + window], f))
            if limit is not None and len(clips) >= limit:
                return np.stack(clips)
    if not clips:
        raise LmeError(f"dataset has no episodes of length >= {window}")
    return np.stack(clips)


def extract_motion_cache(
    dataset,
    model: LatentMotionExtractor,
    window: int,
    out_path,
    mode: str = "window",
    batch_size: int = 32,
) -> dict:
    """Precompute z_m for every (episode, start) window; write an indexed container.

    mode "window" extracts from the full resampled window; mode "pair" extracts from
    the resampled (first frame, last frame) pair, for pair-supervision baselines.
    """
    from .world import valid_window_starts

    if mode not in ("window", "pair"):
        raise ValueError(f"unknown extraction mode {mode!r}")
    keys, clips = [], []
    f = model.cfg.frames
    for ep_id in dataset.episode_ids(min_length=window):
        frames, _ = dataset.load(ep_id)
        for start in valid_window_starts(len(frames), window):
            win = frames[start - 1 : start - 1 + window]
            src = win[[0, -1]] if mode == "pair" else win
            clips.append(resample_clip(src, f))
            keys.append((ep_id, start))
    if not clips:
        raise LmeError(f"dataset has no episodes of length >= {window}")
    vecs = []
    stacked = np.stack(clips)
    tens = torch.from_numpy(stacked).float().permute(0, 1, 4, 2, 3)
    for i in range(0, len(tens), batch_size):
        vecs.append(model.extract(tens[i : i + batch_size]).numpy())
    z = np.concatenate(vecs).astype(np.float32)
    meta = {
        "kind": "motion-cache",
        "window": window,
        "mode": mode,
        "d_motion": model.cfg.d_motion,
        "index": [[ep, int(s)] for ep, s in keys],
    }
    save_container(out_path, meta, {"z_m": z})
    return meta


class MotionCache:
    def __init__(self, path):
        meta, arrays = load_container(path)
        if meta.get("kind") != "motion-cache":
            raise LmeError(f"{path} is not a motion cache")
        self.window = meta["window"]
        self.mode = meta["mode"]
        self.z = arrays["z_m"]
        self._index = {(ep, s): i for i, (ep, s) in enumerate(meta["index"])}

    def __len__(self) -> int:
        return len(self._index)

    def get(self, ep_id: str, start: int) -> np.ndarray:
        return self.z[self._index[(ep_id, int(start))]]

    def keys(self):
        return list(self._index)
