"""Unified autoregressive decoder over text / visual / action tokens plus a motion query.

Vocabulary id space (disjoint, in order): text words and specials, then visual codes,
then action tokens (whose last id is the chunk delimiter emitted at the end of every
action span), then the single reserved query id. Every id maps back to exactly one
modality.

Sequence layouts:

* pre-training    [ text | visual_1 | query | visual_f ]
* co-fine-tuning  [ text | visual_1 | query | action_1 | visual_2 | action_2 | ... ]

The text span is [BOS, words..., SEP]; the other spans carry no separators (action
spans end with the in-range delimiter instead). Attention is strictly causal
(position i sees j <= i), which by construction prevents the query from seeing
anything after it; the leakage tests assert that bit-exactly.

Losses follow the two-stage objectives: squared-L2 motion supervision at the query
plus next-token cross-entropy averaged within each supervised span and summed across
spans (actions at weight 1, keyframes at lambda2, motion at lambda1 during
co-fine-tuning).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn


class VocabularyError(Exception):
    pass


class GenerationError(Exception):
    pass


class DecoderNumericsError(Exception):
    pass


PAD, BOS, SEP, EOS = "<pad>", "<bos>", "<sep>", "<eos>"
SPECIALS = (PAD, BOS, SEP, EOS)

WORLD_WORDS = (
    "put", "push", "the", "block", "in",
    "red", "green", "blue", "yellow",
    "left", "right", "top", "bottom", "center", "up", "down",
)


@dataclass(frozen=True)
class Vocabulary:
    words: tuple[str, ...]
    n_visual: int
    n_action: int  # BPE ids; the delimiter is one extra id after them

    @property
    def n_text(self) -> int:
        return len(SPECIALS) + len(self.words)

    @property
    def visual_offset(self) -> int:
        return self.n_text

    @property
    def action_offset(self) -> int:
        return self.n_text + self.n_visual

    @property
    def action_size(self) -> int:
        return self.n_action + 1

    @property
    def act_end_id(self) -> int:
        return self.action_offset + self.n_action

    @property
    def query_id(self) -> int:
        return self.action_offset + self.action_size

    @property
    def size(self) -> int:
        return self.query_id + 1

    def word_id(self, word: str) -> int:
        try:
            return len(SPECIALS) + self.words.index(word)
        except ValueError:
            raise VocabularyError(f"word {word!r} not in the closed vocabulary") from None

    def special_id(self, token: str) -> int:
        return SPECIALS.index(token)

    def encode_text(self, instruction: str) -> list[int]:
        words = instruction.split()
        if not words:
            raise VocabularyError("instructions are non-empty templates")
        return [self.word_id(wd) for wd in words]

    def visual_ids(self, grid: np.ndarray) -> list[int]:
        flat = np.asarray(grid).reshape(-1)
        if flat.min() < 0 or flat.max() >= self.n_visual:
            raise VocabularyError(
                f"visual token {int(flat.max())} outside codebook of size {self.n_visual}"
            )
        return (flat + self.visual_offset).tolist()

    def action_ids(self, tokens: list[int]) -> list[int]:
        if tokens and (min(tokens) < 0 or max(tokens) >= self.n_action):
            raise VocabularyError("action token outside tokenizer vocabulary")
        return [t + self.action_offset for t in tokens]

    def modality_of(self, token_id: int) -> str:
        if 0 <= token_id < self.n_text:
            return "text"
        if self.visual_offset <= token_id < self.action_offset:
            return "visual"
        if self.action_offset <= token_id < self.action_offset + self.action_size:
            return "action"
        if token_id == self.query_id:
            return "query"
        raise VocabularyError(f"id {token_id} outside vocabulary of size {self.size}")

    def to_dict(self) -> dict:
        return {"words": list(self.words), "n_visual": self.n_visual, "n_action": self.n_action}

    @staticmethod
    def from_dict(d: dict) -> "Vocabulary":
        return Vocabulary(tuple(d["words"]), int(d["n_visual"]), int(d["n_action"]))


def build_vocabulary(n_visual: int, n_action: int, words: tuple[str, ...] = WORLD_WORDS) -> Vocabulary:
    return Vocabulary(words=words, n_visual=n_visual, n_action=n_action)


# ---------------------------------------------------------------------------
# layouts
# ---------------------------------------------------------------------------


@dataclass
class Span:
    role: str
    start: int
    end: int  # exclusive

    @property
    def length(self) -> int:
        return self.end - self.start


@dataclass
class SequenceLayout:
    token_ids: list[int]
    spans: list[Span]
    q_position: int | None = None

    def span(self, role: str) -> Span:
        for s in self.spans:
            if s.role == role:
                return s
        raise KeyError(role)

    def roles(self) -> list[str]:
        return [s.role for s in self.spans]

    def __len__(self) -> int:
        return len(self.token_ids)


def _text_span_ids(instruction: str, vocab: Vocabulary) -> list[int]:
    return [vocab.special_id(BOS)] + vocab.encode_text(instruction) + [vocab.special_id(SEP)]


def build_pretrain_sequence(
    instruction: str,
    grid_first: np.ndarray,
    grid_terminal: np.ndarray | None,
    vocab: Vocabulary,
) -> SequenceLayout:
    """[text | visual_1 | query | visual_f]; terminal span omitted when grid is None."""
    ids = _text_span_ids(instruction, vocab)
    spans = [Span("text", 0, len(ids))]
    v1 = vocab.visual_ids(grid_first)
    spans.append(Span("visual_1", len(ids), len(ids) + len(v1)))
    ids += v1
    q_position = len(ids)
    ids.append(vocab.query_id)
    spans.append(Span("query", q_position, q_position + 1))
    if grid_terminal is not None:
        vf = vocab.visual_ids(grid_terminal)
        spans.append(Span("visual_f", len(ids), len(ids) + len(vf)))
        ids += vf
    return SequenceLayout(ids, spans, q_position)


def build_finetune_sequence(
    instruction: str,
    keyframe_grids: list[np.ndarray],
    action_token_chunks: list[list[int]],
    vocab: Vocabulary,
) -> SequenceLayout:
    """[text | visual_1 | query | action_1 | visual_2 | action_2 | ... | action_N].

    The single query sits right after the first keyframe; every action span ends
    with the chunk delimiter.
    """
    if len(keyframe_grids) != len(action_token_chunks):
        raise VocabularyError(
            f"{len(keyframe_grids)} keyframes vs {len(action_token_chunks)} action chunks"
        )
    if not keyframe_grids:
        raise VocabularyError("need at least one keyframe/chunk pair")
    ids = _text_span_ids(instruction, vocab)
    spans = [Span("text", 0, len(ids))]
    q_position = None
    for j, (grid, chunk) in enumerate(zip(keyframe_grids, action_token_chunks), start=1):
        v = vocab.visual_ids(grid)
        spans.append(Span(f"visual_{j}", len(ids), len(ids) + len(v)))
        ids += v
        if j == 1:
            q_position = len(ids)
            ids.append(vocab.query_id)
            spans.append(Span("query", q_position, q_position + 1))
        a = vocab.action_ids(chunk) + [vocab.act_end_id]
        spans.append(Span(f"action_{j}", len(ids), len(ids) + len(a)))
        ids += a
    return SequenceLayout(ids, spans, q_position)


def build_frames_sequence(
    instruction: str,
    grids: list[np.ndarray],
    vocab: Vocabulary,
) -> SequenceLayout:
    """[text | visual_1 | ... | visual_k]: frame-prediction baselines, no query."""
    if not grids:
        raise VocabularyError("need at least one frame")
    ids = _text_span_ids(instruction, vocab)
    spans = [Span("text", 0, len(ids))]
    for j, grid in enumerate(grids, start=1):
        v = vocab.visual_ids(grid)
        spans.append(Span(f"visual_{j}", len(ids), len(ids) + len(v)))
        ids += v
    return SequenceLayout(ids, spans, None)


def build_inference_prefix(instruction: str, grid: np.ndarray, vocab: Vocabulary) -> SequenceLayout:
    """[text | visual_1 | query]: the prompt from which an action chunk is decoded."""
    return build_pretrain_sequence(instruction, grid, None, vocab)


def build_mask(layout: SequenceLayout) -> np.ndarray:
    """Strict causal attention: position i may attend to j iff j <= i."""
    n = len(layout)
    return np.tril(np.ones((n, n), dtype=bool))


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DecoderConfig:
    vocab_size: int
    d_motion: int
    width: int = 128
    layers: int = 4
    heads: int = 4
    mlp_ratio: int = 4
    max_len: int = 256

    def __post_init__(self):
        if self.width % self.heads != 0:
            raise ValueError("width must be divisible by heads")

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @staticmethod
    def from_dict(d: dict) -> "DecoderConfig":
        return DecoderConfig(**d)


class Block(nn.Module):
    def __init__(self, cfg: DecoderConfig):
        super().__init__()
        self.heads = cfg.heads
        self.head_dim = cfg.width // cfg.heads
        self.ln1 = nn.LayerNorm(cfg.width)
        self.qkv = nn.Linear(cfg.width, 3 * cfg.width)
        self.attn_out = nn.Linear(cfg.width, cfg.width)
        self.ln2 = nn.LayerNorm(cfg.width)
        hidden = cfg.mlp_ratio * cfg.width
        self.mlp = nn.Sequential(nn.Linear(cfg.width, hidden), nn.GELU(), nn.Linear(hidden, cfg.width))

    def forward(self, x: torch.Tensor, allowed: torch.Tensor) -> torch.Tensor:
        B, L, W = x.shape
        q, k, v = self.qkv(self.ln1(x)).chunk(3, dim=-1)
        q = q.reshape(B, L, self.heads, self.head_dim).transpose(1, 2)
        k = k.reshape(B, L, self.heads, self.head_dim).transpose(1, 2)
        v = v.reshape(B, L, self.heads, self.head_dim).transpose(1, 2)
        scores = (q @ k.transpose(-2, -1)) / math.sqrt(self.head_dim)
        scores = scores.masked_fill(~allowed, float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(B, L, W)
        x = x + self.attn_out(out)
        return x + self.mlp(self.ln2(x))


class MotionQueryDecoder(nn.Module):
    """Pre-norm causal transformer with a motion-prediction head at the query token."""

    def __init__(self, cfg: DecoderConfig):
        super().__init__()
        self.cfg = cfg
        self.tok_emb = nn.Embedding(cfg.vocab_size, cfg.width)
        self.pos_emb = nn.Parameter(torch.zeros(cfg.max_len, cfg.width))
        nn.init.normal_(self.pos_emb, std=0.02)
        nn.init.normal_(self.tok_emb.weight, std=0.02)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.layers))
        self.ln_f = nn.LayerNorm(cfg.width)
        self.lm_head = nn.Linear(cfg.width, cfg.vocab_size)
        self.motion_head = nn.Sequential(
            nn.Linear(cfg.width, cfg.width), nn.GELU(), nn.Linear(cfg.width, cfg.d_motion)
        )

    @property
    def query_embedding(self) -> torch.Tensor:
        """The learnable motion-query vector (its row of the token embedding)."""
        return self.tok_emb.weight[self.cfg.vocab_size - 1]

    def forward(self, ids: torch.Tensor, allowed: torch.Tensor):
        """ids (B, L) int64, allowed (L, L) or (B, L, L) bool -> (hidden, logits)."""
        if ids.dim() == 1:
            ids = ids.unsqueeze(0)
        B, L = ids.shape
        if L > self.cfg.max_len:
            raise ValueError(f"sequence length {L} exceeds max_len {self.cfg.max_len}")
        if allowed.dim() == 2:
            allowed = allowed.unsqueeze(0)
        allowed = allowed.unsqueeze(1)  # broadcast over heads
        x = self.tok_emb(ids) + self.pos_emb[:L]
        for block in self.blocks:
            x = block(x, allowed)
        hidden = self.ln_f(x)
        logits = self.lm_head(hidden)
        return hidden, logits

    def predict_motion(self, hidden_at_q: torch.Tensor) -> torch.Tensor:
        return self.motion_head(hidden_at_q)


def check_finite(name: str, tensor: torch.Tensor) -> torch.Tensor:
    if not torch.isfinite(tensor).all():
        raise DecoderNumericsError(f"non-finite values in {name}")
    return tensor


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def span_cross_entropy(logits: torch.Tensor, token_ids: torch.Tensor, span: Span) -> torch.Tensor:
    """Next-token CE averaged over one span: logits at p-1 predict the token at p."""
    if span.start == 0:
        raise ValueError("a supervised span cannot start the sequence")
    logp = torch.log_softmax(logits[span.start - 1 : span.end - 1], dim=-1)
    targets = token_ids[span.start : span.end]
    return -logp.gather(1, targets.unsqueeze(1)).mean()


def pretrain_loss(
    layout: SequenceLayout,
    logits: torch.Tensor,
    z_hat: torch.Tensor | None,
    z_target: torch.Tensor | None,
    frame1_ce: bool = True,
) -> dict:
    """Motion supervision at the query plus per-frame visual CE (frames 1 and f).

    Returns component tensors; "total" is exactly the sum of the reported parts.
    `frame1_ce=False` is the ablation switch that drops the first-frame CE term.
    """
    device_dtype = dict(dtype=logits.dtype)
    ids = torch.as_tensor(layout.token_ids, dtype=torch.long)
    parts = {
        "motion": torch.zeros((), **device_dtype),
        "ce_visual_first": torch.zeros((), **device_dtype),
        "ce_visual_terminal": torch.zeros((), **device_dtype),
    }
    if z_hat is not None:
        parts["motion"] = torch.sum((z_hat - z_target) ** 2)
    for s in layout.spans:
        if s.role == "visual_1" and frame1_ce:
            parts["ce_visual_first"] = span_cross_entropy(logits, ids, s)
        elif s.role == "visual_f":
            parts["ce_visual_terminal"] = span_cross_entropy(logits, ids, s)
    total = parts["motion"] + parts["ce_visual_first"] + parts["ce_visual_terminal"]
    check_finite("pretrain loss", total)
    return {"total": total, **parts}


def finetune_loss(
    layout: SequenceLayout,
    logits: torch.Tensor,
    z_hat: torch.Tensor | None,
    z_target: torch.Tensor | None,
    lambda1: float,
    lambda2: float,
    visual_coverage: str = "all",
    frame1_ce: bool = True,
) -> dict:
    """Action CE + lambda1 * motion + lambda2 * keyframe CE.

    CE is averaged within each span and summed across spans. `visual_coverage`
    restricts the lambda2 term ("all" or "last"); `frame1_ce` drops the first
    keyframe span from it when False.
    """
    if lambda1 < 0 or lambda2 < 0:
        raise ValueError("loss weights must be non-negative")
    ids = torch.as_tensor(layout.token_ids, dtype=torch.long)
    action_ce = torch.zeros((), dtype=logits.dtype)
    visual_ce = torch.zeros((), dtype=logits.dtype)
    visual_spans = [s for s in layout.spans if s.role.startswith("visual_")]
    if visual_coverage == "last":
        visual_spans = visual_spans[-1:]
    elif not frame1_ce:
        visual_spans = [s for s in visual_spans if s.role != "visual_1"]
    for s in layout.spans:
        if s.role.startswith("action_"):
            action_ce = action_ce + span_cross_entropy(logits, ids, s)
    for s in visual_spans:
        visual_ce = visual_ce + span_cross_entropy(logits, ids, s)
    motion = torch.zeros((), dtype=logits.dtype)
    if z_hat is not None and lambda1 > 0:
        motion = torch.sum((z_hat - z_target) ** 2)
    parts = {
        "ce_action": action_ce,
        "motion": lambda1 * motion,
        "ce_visual": lambda2 * visual_ce,
    }
    total = parts["ce_action"] + parts["motion"] + parts["ce_visual"]
    check_finite("finetune loss", total)
    return {"total": total, **parts}


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------


@torch.no_grad()
def generate_action_tokens(
    model: MotionQueryDecoder,
    vocab: Vocabulary,
    instruction: str,
    grid: np.ndarray,
    max_tokens: int = 24,
) -> list[int]:
    """Greedy decoding constrained to the action range; stops at the chunk delimiter.

    Returns tokenizer-local action ids (offset removed, delimiter stripped). Raises
    GenerationError when the model never emits the delimiter within max_tokens.
    """
    model.eval()
    prefix = build_inference_prefix(instruction, grid, vocab)
    ids = list(prefix.token_ids)
    lo, hi = vocab.action_offset, vocab.action_offset + vocab.action_size
    out: list[int] = []
    for _ in range(max_tokens):
        tens = torch.tensor(ids, dtype=torch.long).unsqueeze(0)
        allowed = torch.from_numpy(np.tril(np.ones((len(ids), len(ids)), dtype=bool)))
        _, logits = model(tens, allowed)
        row = logits[0, -1]
        constrained = row[lo:hi]
        nxt = lo + int(torch.argmax(constrained))
        if nxt == vocab.act_end_id:
            return out
        out.append(nxt - vocab.action_offset)
        ids.append(nxt)
    raise GenerationError(f"no chunk delimiter within {max_tokens} generated tokens")
