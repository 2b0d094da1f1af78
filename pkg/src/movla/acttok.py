"""Frequency-domain action tokenizer.

Each action chunk (l_a steps x action_dim) is tokenized as:

1. normalize each dimension by its configured bound,
2. orthonormal DCT-II along time, per dimension,
3. interleave coefficients across dimensions (low frequencies of every dim first),
4. scalar-quantize with round-half-away-from-zero and clamp to the integer alphabet,
5. compress the integer sequence with learned byte-pair merges.

Steps 1-4 lose at most quant_scale/2 per coefficient; step 5 is exactly lossless.
Decoding inverts the pipeline and raises :class:`ActDecodeError` on malformed input
instead of producing garbage actions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .container import load_container, save_container


class ActDecodeError(Exception):
    """Token stream cannot be decoded back to a full action chunk."""


@dataclass(frozen=True)
class ActTokConfig:
    l_a: int = 4
    action_dim: int = 3
    dim_scales: tuple[float, ...] = (0.08, 0.08, 1.0)
    quant_scale: float = 0.02
    base_bound: int = 250
    bpe_vocab_size: int = 512

    def __post_init__(self):
        if self.quant_scale <= 0:
            raise ValueError("quant_scale must be positive")
        if len(self.dim_scales) != self.action_dim:
            raise ValueError("dim_scales must have one entry per action dimension")
        if any(s <= 0 for s in self.dim_scales):
            raise ValueError("dim_scales must be positive")
        if self.bpe_vocab_size <= self.n_base:
            raise ValueError(
                f"bpe_vocab_size {self.bpe_vocab_size} must exceed the base alphabet "
                f"size {self.n_base}"
            )

    @property
    def n_base(self) -> int:
        """Integer alphabet size: ids 0..2*base_bound map to integers -bound..+bound."""
        return 2 * self.base_bound + 1

    def to_dict(self) -> dict:
        return {
            "l_a": self.l_a,
            "action_dim": self.action_dim,
            "dim_scales": list(self.dim_scales),
            "quant_scale": self.quant_scale,
            "base_bound": self.base_bound,
            "bpe_vocab_size": self.bpe_vocab_size,
        }

    @staticmethod
    def from_dict(d: dict) -> "ActTokConfig":
        return ActTokConfig(
            l_a=int(d["l_a"]),
            action_dim=int(d["action_dim"]),
            dim_scales=tuple(float(s) for s in d["dim_scales"]),
            quant_scale=float(d["quant_scale"]),
            base_bound=int(d["base_bound"]),
            bpe_vocab_size=int(d["bpe_vocab_size"]),
        )


# ---------------------------------------------------------------------------
# orthonormal DCT-II
# ---------------------------------------------------------------------------


def dct_matrix(n: int) -> np.ndarray:
    """Rows are the orthonormal DCT-II basis: C @ C.T == I."""
    k = np.arange(n, dtype=np.float64)[:, None]
    m = np.arange(n, dtype=np.float64)[None, :]
    mat = np.cos(np.pi * (2 * m + 1) * k / (2 * n))
    mat[0] *= np.sqrt(1.0 / n)
    mat[1:] *= np.sqrt(2.0 / n)
    return mat


def dct_forward(signal: np.ndarray) -> np.ndarray:
    """DCT-II along the last axis, in double precision."""
    x = np.asarray(signal, dtype=np.float64)
    return x @ dct_matrix(x.shape[-1]).T


def dct_inverse(coeffs: np.ndarray) -> np.ndarray:
    c = np.asarray(coeffs, dtype=np.float64)
    return c @ dct_matrix(c.shape[-1])


# ---------------------------------------------------------------------------
# scalar quantization
# ---------------------------------------------------------------------------


def quantize_coeffs(coeffs: np.ndarray, cfg: ActTokConfig) -> np.ndarray:
    """round(c / scale) with halves away from zero, clamped to +-base_bound."""
    c = np.asarray(coeffs, dtype=np.float64) / cfg.quant_scale
    q = np.sign(c) * np.floor(np.abs(c) + 0.5)
    return np.clip(q, -cfg.base_bound, cfg.base_bound).astype(np.int64)


def dequantize_coeffs(ints: np.ndarray, cfg: ActTokConfig) -> np.ndarray:
    return np.asarray(ints, dtype=np.float64) * cfg.quant_scale


def reconstruction_bound(cfg: ActTokConfig) -> np.ndarray:
    """Per-dimension worst-case |decoded - original| for in-range chunks.

    Quantization perturbs each coefficient by at most quant_scale/2; the inverse
    orthonormal DCT preserves the 2-norm, so every time-domain element moves by at
    most sqrt(l_a) * quant_scale/2 in normalized units.
    """
    per_dim = 0.5 * cfg.quant_scale * np.sqrt(cfg.l_a)
    return per_dim * np.asarray(cfg.dim_scales, dtype=np.float64)


# ---------------------------------------------------------------------------
# byte-pair merges over integer sequences
# ---------------------------------------------------------------------------


def _pair_counts(corpus: list[list[int]]) -> dict[tuple[int, int], int]:
    counts: dict[tuple[int, int], int] = {}
    for seq in corpus:
        for a, b in zip(seq, seq[1:]):
            counts[(a, b)] = counts.get((a, b), 0) + 1
    return counts


def _merge_sequence(seq: list[int], pair: tuple[int, int], new_id: int) -> list[int]:
    out = []
    i = 0
    while i < len(seq):
        if i + 1 < len(seq) and seq[i] == pair[0] and seq[i + 1] == pair[1]:
            out.append(new_id)
            i += 2
        else:
            out.append(seq[i])
            i += 1
    return out


def bpe_train(corpus: list[list[int]], n_base: int, vocab_size: int) -> list[tuple[int, int]]:
    """Greedy highest-frequency pair merges; ties go to the smallest pair.

    Stops when the vocabulary reaches vocab_size or no pair occurs at least twice.
    Returns the ordered merge table; merge i creates id n_base + i.
    """
    if not corpus:
        raise ValueError("bpe_train needs a non-empty corpus")
    work = [list(seq) for seq in corpus]
    merges: list[tuple[int, int]] = []
    while n_base + len(merges) < vocab_size:
        counts = _pair_counts(work)
        if not counts:
            break
        best_count = max(counts.values())
        if best_count < 2:
            break
        pair = min(p for p, c in counts.items() if c == best_count)
        new_id = n_base + len(merges)
        merges.append(pair)
        work = [_merge_sequence(seq, pair, new_id) for seq in work]
    return merges


def bpe_apply(seq: list[int], merges: list[tuple[int, int]], n_base: int) -> list[int]:
    out = list(seq)
    for i, pair in enumerate(merges):
        out = _merge_sequence(out, pair, n_base + i)
    return out


def bpe_expand(seq: list[int], merges: list[tuple[int, int]], n_base: int) -> list[int]:
    """Exact inverse of any merge application (each id expands to one base sequence)."""
    out: list[int] = []
    stack = list(reversed(list(seq)))
    while stack:
        tok = stack.pop()
        if tok < 0 or tok >= n_base + len(merges):
            raise ActDecodeError(f"token id {tok} outside vocabulary")
        if tok < n_base:
            out.append(tok)
        else:
            a, b = merges[tok - n_base]
            stack.append(b)
            stack.append(a)
    return out


# ---------------------------------------------------------------------------
# tokenizer
# ---------------------------------------------------------------------------


@dataclass
class ActionTokenizer:
    cfg: ActTokConfig
    merges: list[tuple[int, int]] = field(default_factory=list)

    @property
    def vocab_size(self) -> int:
        return self.cfg.n_base + len(self.merges)

    def _coeff_ints(self, chunk: np.ndarray) -> np.ndarray:
        x = np.asarray(chunk, dtype=np.float64)
        if x.shape != (self.cfg.l_a, self.cfg.action_dim):
            raise ValueError(
                f"chunk shape {x.shape} does not match (l_a, action_dim)="
                f"({self.cfg.l_a}, {self.cfg.action_dim})"
            )
        normed = x / np.asarray(self.cfg.dim_scales)
        coeffs = dct_forward(normed.T)  # (dim, l_a)
        interleaved = coeffs.T.reshape(-1)  # frequency-major across dims
        return quantize_coeffs(interleaved, self.cfg)

    def encode(self, chunk: np.ndarray) -> list[int]:
        ints = self._coeff_ints(chunk)
        base_ids = (ints + self.cfg.base_bound).tolist()
        return bpe_apply(base_ids, self.merges, self.cfg.n_base)

    def decode(self, token_ids: list[int]) -> np.ndarray:
        base_ids = bpe_expand(list(token_ids), self.merges, self.cfg.n_base)
        expected = self.cfg.l_a * self.cfg.action_dim
        if len(base_ids) != expected:
            raise ActDecodeError(
                f"token stream expands to {len(base_ids)} coefficients, expected {expected}"
            )
        ints = np.array(base_ids, dtype=np.int64) - self.cfg.base_bound
        coeffs = dequantize_coeffs(ints, self.cfg).reshape(self.cfg.l_a, self.cfg.action_dim)
        normed = dct_inverse(coeffs.T)  # (dim, l_a)
        chunk = (normed * np.asarray(self.cfg.dim_scales)[:, None]).T
        return chunk.astype(np.float32)

    def save(self, path) -> None:
        table = np.array(
            [[a, b, self.cfg.n_base + i] for i, (a, b) in enumerate(self.merges)],
            dtype=np.int64,
        ).reshape(-1, 3)
        save_container(path, {"kind": "action-tokenizer", "cfg": self.cfg.to_dict()}, {"merges": table})

    @staticmethod
    def load(path) -> "ActionTokenizer":
        meta, arrays = load_container(path)
        cfg = ActTokConfig.from_dict(meta["cfg"])
        merges = [(int(a), int(b)) for a, b, _ in arrays["merges"].reshape(-1, 3)]
        return ActionTokenizer(cfg, merges)


def train_action_tokenizer(chunks: list[np.ndarray], cfg: ActTokConfig) -> ActionTokenizer:
    """Learn the merge table from a corpus of action chunks."""
    if not chunks:
        raise ValueError("empty training corpus")
    tok = ActionTokenizer(cfg, merges=[])
    corpus = [(tok._coeff_ints(c) + cfg.base_bound).tolist() for c in chunks]
    tok.merges = bpe_train(corpus, cfg.n_base, cfg.bpe_vocab_size)
    return tok


def dataset_chunks(dataset, chunking) -> list[np.ndarray]:
    """All aligned action chunks from every trainable episode of a dataset."""
    from .world import valid_window_starts

    out = []
    for ep_id in dataset.episode_ids(min_length=chunking.window):
        _, actions = dataset.load(ep_id)
        for start in valid_window_starts(len(actions), chunking.window):
            base = start - 1
            for j in range(chunking.n_chunks):
                out.append(actions[base + j * chunking.l_a : base + (j + 1) * chunking.l_a])
    return out
