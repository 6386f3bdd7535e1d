"""Tiny decoder-only LM, the speech/prompt/target input contract and greedy decoding."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError
from .projector import SpeechEmbeds
from .tokenizer import EOS, CharTokenizer

IGNORE = -100


@dataclass
class LmConfig:
    vocab_size: int = 99
    d_llm: int = 64
    n_layers: int = 4
    n_heads: int = 4
    ffn_mult: int = 4
    max_seq: int = 512
    rope_base: float = 10000.0
    init_std: float = 0.02
    seed: int = 0

    def validate(self) -> None:
        if self.d_llm % self.n_heads:
            raise ConfigError(f"d_llm={self.d_llm} is not divisible by n_heads={self.n_heads}")
        if (self.d_llm // self.n_heads) % 2:
            raise ConfigError("head dimension must be even for rotary embeddings")
        if self.vocab_size < 1 or self.n_layers < 1 or self.max_seq < 1:
            raise ConfigError("vocab_size, n_layers and max_seq must be >= 1")


def _rope_tables(length: int, d_head: int, base: float, dtype, device):
    inv_freq = 1.0 / (base ** (torch.arange(0, d_head, 2, dtype=torch.float64) / d_head))
    angles = torch.arange(length, dtype=torch.float64)[:, None] * inv_freq[None, :]
    return angles.cos().to(dtype=dtype, device=device), angles.sin().to(dtype=dtype, device=device)


def _apply_rope(x, cos, sin):
    x1, x2 = x[..., 0::2], x[..., 1::2]
    rotated = torch.stack((x1 * cos - x2 * sin, x1 * sin + x2 * cos), dim=-1)
    return rotated.flatten(-2)


class SelfAttention(nn.Module):
    def __init__(self, cfg: LmConfig):
        super().__init__()
        self.n_heads = cfg.n_heads
        self.d_head = cfg.d_llm // cfg.n_heads
        self.rope_base = cfg.rope_base
        self.q_proj = nn.Linear(cfg.d_llm, cfg.d_llm, bias=False)
        self.k_proj = nn.Linear(cfg.d_llm, cfg.d_llm, bias=False)
        self.v_proj = nn.Linear(cfg.d_llm, cfg.d_llm, bias=False)
        self.o_proj = nn.Linear(cfg.d_llm, cfg.d_llm, bias=False)

    def forward(self, x):
        b, n, _ = x.shape
        q = self.q_proj(x).view(b, n, self.n_heads, self.d_head).transpose(1, 2)
        k = self.k_proj(x).view(b, n, self.n_heads, self.d_head).transpose(1, 2)
        v = self.v_proj(x).view(b, n, self.n_heads, self.d_head).transpose(1, 2)
        cos, sin = _rope_tables(n, self.d_head, self.rope_base, x.dtype, x.device)
        q, k = _apply_rope(q, cos, sin), _apply_rope(k, cos, sin)
        out = F.scaled_dot_product_attention(q, k, v, is_causal=True)
        return self.o_proj(out.transpose(1, 2).reshape(b, n, -1))


class FeedForward(nn.Module):
    def __init__(self, cfg: LmConfig):
        super().__init__()
        self.up = nn.Linear(cfg.d_llm, cfg.ffn_mult * cfg.d_llm, bias=False)
        self.down = nn.Linear(cfg.ffn_mult * cfg.d_llm, cfg.d_llm, bias=False)

    def forward(self, x):
        return self.down(F.gelu(self.up(x)))


class Block(nn.Module):
    def __init__(self, cfg: LmConfig):
        super().__init__()
        self.norm_attn = nn.LayerNorm(cfg.d_llm)
        self.attn = SelfAttention(cfg)
        self.norm_ffn = nn.LayerNorm(cfg.d_llm)
        self.ffn = FeedForward(cfg)

    def forward(self, x):
        x = x + self.attn(self.norm_attn(x))
        return x + self.ffn(self.norm_ffn(x))


class ToyLM(nn.Module):
    """Pre-norm causal transformer with rotary positions.

    The output head reads the residual stream directly (no final norm), so a
    frozen base with small init still lets adapters reach confident logits.
    """

    def __init__(self, cfg: LmConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.embed = nn.Embedding(cfg.vocab_size, cfg.d_llm)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.n_layers))
        self.head = nn.Linear(cfg.d_llm, cfg.vocab_size, bias=False)

    def embed_tokens(self, ids) -> torch.Tensor:
        ids = torch.as_tensor(ids, dtype=torch.long, device=self.embed.weight.device)
        return self.embed(ids)

    def forward(self, embeds: torch.Tensor) -> torch.Tensor:
        """embeds: [B, L, d_llm] -> logits [B, L, vocab]."""
        h = embeds
        for block in self.blocks:
            h = block(h)
        return self.head(h)


def build_lm(cfg: LmConfig) -> ToyLM:
    cfg.validate()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        lm = ToyLM(cfg)
        with torch.no_grad():
            for name, p in lm.named_parameters():
                if name.startswith(("embed.", "head.")):
                    p.normal_(0.0, cfg.init_std)
                elif p.dim() >= 2:
                    p.normal_(0.0, p.shape[1] ** -0.5)
    return lm


@dataclass
class InputSequence:
    """Concatenated speech, prompt and (training only) target embeddings.

    ``label_ids[i]`` is the token at position i for target positions and
    IGNORE elsewhere; position i is predicted from positions < i.
    """

    embeds: torch.Tensor  # [L, d_llm]
    label_ids: torch.Tensor  # [L], long
    spans: dict[str, tuple[int, int]] = field(default_factory=dict)

    @property
    def length(self) -> int:
        return self.embeds.shape[0]

    @property
    def n_supervised(self) -> int:
        return int((self.label_ids != IGNORE).sum())


def build_input_sequence(
    speech: SpeechEmbeds | torch.Tensor,
    prompt_ids,
    target_ids,
    lm: ToyLM,
    audio_offset: int | None = None,
) -> InputSequence:
    """Concatenate speech -> prompt -> target.

    With ``audio_offset`` the speech embeddings are spliced into the prompt at
    that token index instead of preceding it.
    """
    speech = speech.embeds if isinstance(speech, SpeechEmbeds) else speech
    if speech.dim() != 2 or speech.shape[0] == 0:
        raise ValueError("speech embeddings must be a non-empty [T, d_llm] matrix")
    prompt_ids = list(prompt_ids)
    target_ids = list(target_ids) if target_ids is not None else []
    s, p, t = speech.shape[0], len(prompt_ids), len(target_ids)
    total = s + p + t
    if total > lm.cfg.max_seq:
        raise ValueError(f"sequence too long: {total} > max_seq {lm.cfg.max_seq}")
    speech = speech.to(lm.embed.weight.dtype)
    if audio_offset is None:
        parts = [speech, lm.embed_tokens(prompt_ids), lm.embed_tokens(target_ids)]
        spans = {"speech": (0, s), "prompt": (s, s + p), "target": (s + p, total)}
    else:
        if not 0 <= audio_offset <= p:
            raise ValueError(f"audio_offset {audio_offset} outside prompt of {p} tokens")
        head, tail = prompt_ids[:audio_offset], prompt_ids[audio_offset:]
        parts = [lm.embed_tokens(head), speech, lm.embed_tokens(tail), lm.embed_tokens(target_ids)]
        a = audio_offset
        spans = {
            "prompt": (0, a),
            "speech": (a, a + s),
            "prompt_tail": (a + s, s + p),
            "target": (s + p, total),
        }
    labels = torch.full((total,), IGNORE, dtype=torch.long)
    if t:
        labels[s + p :] = torch.as_tensor(target_ids, dtype=torch.long)
    return InputSequence(torch.cat(parts, dim=0), labels, spans)


def collate(seqs: list[InputSequence]) -> tuple[torch.Tensor, torch.Tensor]:
    """Right-pad to a batch; causal attention keeps padding invisible to real positions."""
    longest = max(s.length for s in seqs)
    d = seqs[0].embeds.shape[1]
    embeds = seqs[0].embeds.new_zeros(len(seqs), longest, d)
    labels = torch.full((len(seqs), longest), IGNORE, dtype=torch.long)
    for i, s in enumerate(seqs):
        embeds[i, : s.length] = s.embeds
        labels[i, : s.length] = s.label_ids
    return embeds, labels


def masked_next_token_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy over supervised positions; logits at i-1 predict label i."""
    shifted_logits = logits[:, :-1]
    shifted_labels = labels[:, 1:]
    if not bool((shifted_labels != IGNORE).any()):
        raise ValueError("no supervised positions in batch")
    return F.cross_entropy(
        shifted_logits.reshape(-1, shifted_logits.shape[-1]),
        shifted_labels.reshape(-1),
        ignore_index=IGNORE,
    )


def lm_loss(seq: InputSequence | list[InputSequence], lm: ToyLM) -> torch.Tensor:
    seqs = [seq] if isinstance(seq, InputSequence) else list(seq)
    for s in seqs:
        if s.n_supervised == 0:
            raise ValueError("sequence has no supervised positions")
        if int(s.label_ids[0]) != IGNORE:
            raise ValueError("first position cannot be supervised: nothing precedes it")
    embeds, labels = collate(seqs)
    return masked_next_token_loss(lm(embeds), labels)


@torch.no_grad()
def greedy_decode(
    speech: SpeechEmbeds | torch.Tensor,
    prompt_ids,
    lm: ToyLM,
    tokenizer: CharTokenizer,
    max_len: int,
    audio_offset: int | None = None,
) -> str:
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    seq = build_input_sequence(speech, prompt_ids, None, lm, audio_offset=audio_offset)
    embeds = seq.embeds.unsqueeze(0)
    out: list[int] = []
    for _ in range(max_len):
        if embeds.shape[1] >= lm.cfg.max_seq:
            break
        nxt = int(lm(embeds)[0, -1].argmax())
        if nxt == EOS:
            break
        out.append(nxt)
        embeds = torch.cat([embeds, lm.embed_tokens([nxt]).unsqueeze(0)], dim=1)
    return tokenizer.decode(out)
