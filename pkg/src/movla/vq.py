"""Small vector-quantized image tokenizer trained from scratch on rendered frames.

Frames of size S map to an (S/4, S/4) grid of discrete codebook indices through a
two-stride conv encoder, a nearest-entry quantizer with straight-through gradients
and EMA codebook updates, and a mirrored conv decoder. Dead codebook entries are
periodically reseeded to encoder outputs so the vocabulary stays occupied.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .container import load_container, save_container


class VqError(Exception):
    pass


@dataclass(frozen=True)
class VqConfig:
    image_hw: int = 32
    codebook_size: int = 256
    d_code: int = 32
    channels: tuple[int, int] = (32, 64)
    commitment: float = 0.25
    ema_decay: float = 0.99
    ema_eps: float = 1e-5
    restart_interval: int = 100
    restart_min_count: float = 1.0
    lr: float = 1e-3
    steps: int = 2500
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.codebook_size < 2:
            raise VqError("codebook needs at least two entries")
        if self.image_hw % 4 != 0:
            raise VqError("image size must be divisible by 4")

    @property
    def grid(self) -> int:
        return self.image_hw // 4

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["channels"] = list(self.channels)
        return d

    @staticmethod
    def from_dict(d: dict) -> "VqConfig":
        d = dict(d)
        d["channels"] = tuple(d["channels"])
        return VqConfig(**d)


class VectorQuantizer(nn.Module):
    """Nearest-codebook-entry assignment with EMA updates and straight-through grads."""

    def __init__(self, cfg: VqConfig):
        super().__init__()
        self.cfg = cfg
        self.register_buffer("codebook", torch.randn(cfg.codebook_size, cfg.d_code) * 0.1)
        self.register_buffer("ema_count", torch.ones(cfg.codebook_size))
        self.register_buffer("ema_sum", self.codebook.clone())

    def assign(self, features: torch.Tensor) -> torch.Tensor:
        """features (..., d_code) -> indices (...). Ties resolve to the lowest index."""
        flat = features.reshape(-1, self.cfg.d_code)
        d = (
            flat.pow(2).sum(1, keepdim=True)
            - 2 * flat @ self.codebook.t()
            + self.codebook.pow(2).sum(1)[None, :]
        )
        return d.argmin(dim=1).reshape(features.shape[:-1])

    def forward(self, z_e: torch.Tensor):
        """z_e (B, d, g, g) -> (z_q straight-through, indices, commitment loss)."""
        feats = z_e.permute(0, 2, 3, 1)
        idx = self.assign(feats)
        quantized = self.codebook[idx].permute(0, 3, 1, 2)
        commit = torch.mean((z_e - quantized.detach()) ** 2)
        # copy-through: value is bitwise the quantized vector, gradient is identity
        z_q = quantized.detach() + (z_e - z_e.detach())
        return z_q, idx, commit

    @torch.no_grad()
    def ema_update(self, z_e: torch.Tensor, idx: torch.Tensor) -> None:
        flat = z_e.permute(0, 2, 3, 1).reshape(-1, self.cfg.d_code)
        onehot = torch.zeros(flat.shape[0], self.cfg.codebook_size, dtype=flat.dtype)
        onehot.scatter_(1, idx.reshape(-1, 1), 1.0)
        counts = onehot.sum(0)
        sums = onehot.t() @ flat
        self.ema_count.mul_(self.cfg.ema_decay).add_(counts, alpha=1 - self.cfg.ema_decay)
        self.ema_sum.mul_(self.cfg.ema_decay).add_(sums, alpha=1 - self.cfg.ema_decay)
        n = self.ema_count.sum()
        stable = (self.ema_count + self.cfg.ema_eps) / (n + self.cfg.codebook_size * self.cfg.ema_eps) * n
        self.codebook.copy_(self.ema_sum / stable.unsqueeze(1))

    @torch.no_grad()
    def restart_dead_codes(self, z_e: torch.Tensor, gen: torch.Generator) -> int:
        dead = torch.nonzero(self.ema_count < self.cfg.restart_min_count).flatten()
        if dead.numel() == 0:
            return 0
        flat = z_e.permute(0, 2, 3, 1).reshape(-1, self.cfg.d_code)
        pick = torch.randint(0, flat.shape[0], (dead.numel(),), generator=gen)
        self.codebook[dead] = flat[pick]
        self.ema_sum[dead] = flat[pick]
        self.ema_count[dead] = 1.0
        return int(dead.numel())


class VqTokenizer(nn.Module):
    def __init__(self, cfg: VqConfig):
        super().__init__()
        self.cfg = cfg
        c1, c2 = cfg.channels
        self.encoder = nn.Sequential(
            nn.Conv2d(3, c1, 4, stride=2, padding=1),
            nn.GELU(),
            nn.Conv2d(c1, c2, 4, stride=2, padding=1),
            nn.GELU(),
            nn.Conv2d(c2, cfg.d_code, 3, padding=1),
        )
        self.quantizer = VectorQuantizer(cfg)
        self.decoder = nn.Sequential(
            nn.Conv2d(cfg.d_code, c2, 3, padding=1),
            nn.GELU(),
            nn.ConvTranspose2d(c2, c1, 4, stride=2, padding=1),
            nn.GELU(),
            nn.ConvTranspose2d(c1, 3, 4, stride=2, padding=1),
        )

    def _to_tensor(self, frames: np.ndarray | torch.Tensor) -> torch.Tensor:
        if isinstance(frames, np.ndarray):
            frames = torch.from_numpy(np.ascontiguousarray(frames))
        if frames.dim() == 3:
            frames = frames.unsqueeze(0)
        if frames.shape[1] != 3:  # HWC -> CHW
            frames = frames.permute(0, 3, 1, 2)
        if frames.shape[-1] != self.cfg.image_hw or frames.shape[-2] != self.cfg.image_hw:
            raise VqError(
                f"frame shape {tuple(frames.shape[-2:])} does not match training size "
                f"{self.cfg.image_hw}"
            )
        return frames.float()

    @torch.no_grad()
    def encode(self, frames) -> np.ndarray:
        """Frames (B, H, W, 3) or (H, W, 3) -> index grids (B, g, g) int64."""
        self.eval()
        x = self._to_tensor(frames)
        z_e = self.encoder(x)
        idx = self.quantizer.assign(z_e.permute(0, 2, 3, 1))
        return idx.numpy()

    @torch.no_grad()
    def decode(self, indices) -> np.ndarray:
        """Index grids -> frames (B, H, W, 3) float32 clamped to [0, 1]."""
        self.eval()
        idx = torch.as_tensor(indices, dtype=torch.long)
        if idx.dim() == 2:
            idx = idx.unsqueeze(0)
        if idx.min() < 0 or idx.max() >= self.cfg.codebook_size:
            raise VqError(
                f"token index out of range [0, {self.cfg.codebook_size}): "
                f"{int(idx.min())}..{int(idx.max())}"
            )
        z_q = self.quantizer.codebook[idx].permute(0, 3, 1, 2)
        out = self.decoder(z_q).clamp(0.0, 1.0)
        return out.permute(0, 2, 3, 1).numpy()

    def forward(self, x: torch.Tensor):
        z_e = self.encoder(x)
        z_q, idx, commit = self.quantizer(z_e)
        recon = self.decoder(z_q)
        return recon, z_e, idx, commit

    def save(self, path) -> None:
        arrays = {k: v.detach().numpy() for k, v in self.state_dict().items()}
        save_container(path, {"kind": "vq-tokenizer", "cfg": self.cfg.to_dict()}, arrays)

    @staticmethod
    def load(path) -> "VqTokenizer":
        meta, arrays = load_container(path)
        if meta.get("kind") != "vq-tokenizer":
            raise VqError(f"{path} is not a vq tokenizer checkpoint")
        model = VqTokenizer(VqConfig.from_dict(meta["cfg"]))
        model.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in arrays.items()})
        model.eval()
        return model


def train_vq(
    frames: np.ndarray,
    cfg: VqConfig,
    loss_csv=None,
    val_frames: np.ndarray | None = None,
) -> tuple[VqTokenizer, list[dict]]:
    """Optimize reconstruction MSE + commitment with straight-through gradients.

    Returns the trained tokenizer and the per-step loss history. Aborts with a
    diagnostic if the loss diverges to NaN.
    """
    if len(frames) == 0:
        raise VqError("empty training set")
    torch.manual_seed(cfg.seed)
    model = VqTokenizer(cfg)
    gen = torch.Generator().manual_seed(cfg.seed + 1)
    opt = torch.optim.Adam([p for p in model.parameters() if p.requires_grad], lr=cfg.lr)
    data = torch.from_numpy(frames).float().permute(0, 3, 1, 2)
    rng = np.random.default_rng(cfg.seed)
    history = []
    model.train()
    for step_i in range(cfg.steps):
        pick = rng.integers(0, len(data), size=min(cfg.batch_size, len(data)))
        batch = data[pick]
        recon, z_e, idx, commit = model(batch)
        rec = torch.mean((recon - batch) ** 2)
        loss = rec + cfg.commitment * commit
        if not torch.isfinite(loss):
            raise VqError(f"training diverged at step {step_i}: loss={loss.item()}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        model.quantizer.ema_update(z_e.detach(), idx)
        if (step_i + 1) % cfg.restart_interval == 0:
            model.quantizer.restart_dead_codes(z_e.detach(), gen)
        history.append(
            {"step": step_i, "loss": loss.item(), "rec": rec.item(), "commit": commit.item()}
        )
    model.eval()
    if loss_csv is not None:
        with open(loss_csv, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["step", "loss", "rec", "commit"])
            writer.writeheader()
            writer.writerows(history)
    return model, history


def codebook_usage(model: VqTokenizer, frames: np.ndarray) -> float:
    """Fraction of codebook entries hit at least once on the given frames."""
    used = np.zeros(model.cfg.codebook_size, dtype=bool)
    for i in range(0, len(frames), 128):
        idx = model.encode(frames[i : i + 128])
        used[np.unique(idx)] = True
    return float(used.mean())


def dataset_frames(dataset, limit: int | None = None) -> np.ndarray:
    out = []
    for ep_id in dataset.episode_ids():
        frames, _ = dataset.load(ep_id)
        out.append(frames)
        if limit is not None and sum(len(f) for f in out) >= limit:
            break
    stacked = np.concatenate(out)
    return stacked[:limit] if limit else stacked
