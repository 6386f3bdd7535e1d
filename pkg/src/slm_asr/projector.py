"""Trainable bridges from encoder frames to LM input embeddings.

Three variants share one batched interface,
``forward(frames [B, T, d_enc], lengths) -> (embeds [B, T', d_llm], lengths')``:

* ``linear``: stack k consecutive frames and apply one affine map; T' = floor(T / k).
* ``conv_linear``: strided convolution (kernel = stride = k), GELU, linear; T' = floor(T / k).
* ``qformer``: a fixed set of learned queries cross-attends to the (padded, masked)
  encoder frames; T' = query length whatever T is.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoder import EncoderOutput
from .errors import ConfigError

VARIANTS = ("linear", "conv_linear", "qformer")


@dataclass
class ProjectorConfig:
    variant: str = "linear"
    downsample_factor: int = 4
    d_enc: int = 64
    d_llm: int = 64
    qformer_query_len: int = 64
    qformer_layers: int = 2
    qformer_input_len: int = 1280
    qformer_heads: int = 4
    qformer_hidden: int | None = None  # defaults to d_llm
    bias: bool = True
    seed: int = 0

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown projector variant {self.variant!r}; expected one of {VARIANTS}")
        if self.downsample_factor < 1:
            raise ConfigError("downsample_factor must be >= 1")
        if self.qformer_query_len < 1 or self.qformer_layers < 1:
            raise ConfigError("qformer_query_len and qformer_layers must be >= 1")
        hidden = self.qformer_hidden or self.d_llm
        if self.variant == "qformer" and hidden % self.qformer_heads:
            raise ConfigError("Q-Former hidden size must be divisible by the head count")


@dataclass
class SpeechEmbeds:
    embeds: torch.Tensor  # [T_proj, d_llm]

    @property
    def length(self) -> int:
        return self.embeds.shape[0]


def _check_length(lengths: torch.Tensor, k: int) -> None:
    if int(lengths.min()) < k:
        raise ValueError(f"input too short for downsample factor {k}: {int(lengths.min())} frames")


class LinearProjector(nn.Module):
    def __init__(self, cfg: ProjectorConfig):
        super().__init__()
        self.k = cfg.downsample_factor
        self.proj = nn.Linear(cfg.d_enc * self.k, cfg.d_llm, bias=cfg.bias)

    def forward(self, frames, lengths):
        _check_length(lengths, self.k)
        b, t, d = frames.shape
        t_out = t // self.k
        stacked = frames[:, : t_out * self.k].reshape(b, t_out, self.k * d)
        return self.proj(stacked), lengths // self.k


class ConvLinearProjector(nn.Module):
    def __init__(self, cfg: ProjectorConfig):
        super().__init__()
        self.k = cfg.downsample_factor
        self.conv = nn.Conv1d(cfg.d_enc, cfg.d_llm, kernel_size=self.k, stride=self.k, bias=cfg.bias)
        self.linear = nn.Linear(cfg.d_llm, cfg.d_llm, bias=cfg.bias)

    def forward(self, frames, lengths):
        _check_length(lengths, self.k)
        h = self.conv(frames.transpose(1, 2)).transpose(1, 2)
        return self.linear(F.gelu(h)), lengths // self.k


class CrossAttention(nn.Module):
    def __init__(self, d_model: int, d_kv: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.q_proj = nn.Linear(d_model, d_model)
        self.k_proj = nn.Linear(d_kv, d_model)
        self.v_proj = nn.Linear(d_kv, d_model)
        self.o_proj = nn.Linear(d_model, d_model)

    def forward(self, queries, memory, key_mask):
        b, q_len, _ = queries.shape
        m_len = memory.shape[1]
        q = self.q_proj(queries).view(b, q_len, self.n_heads, self.d_head).transpose(1, 2)
        k = self.k_proj(memory).view(b, m_len, self.n_heads, self.d_head).transpose(1, 2)
        v = self.v_proj(memory).view(b, m_len, self.n_heads, self.d_head).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.d_head)
        scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        attn = scores.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, q_len, -1)
        return self.o_proj(out), attn


class QFormerLayer(nn.Module):
    def __init__(self, d_model: int, d_kv: int, n_heads: int):
        super().__init__()
        self.norm_attn = nn.LayerNorm(d_model)
        self.cross = CrossAttention(d_model, d_kv, n_heads)
        self.norm_ffn = nn.LayerNorm(d_model)
        self.ffn = nn.Sequential(nn.Linear(d_model, 4 * d_model), nn.GELU(), nn.Linear(4 * d_model, d_model))

    def forward(self, h, memory, key_mask):
        delta, attn = self.cross(self.norm_attn(h), memory, key_mask)
        h = h + delta
        h = h + self.ffn(self.norm_ffn(h))
        return h, attn


class QFormerProjector(nn.Module):
    def __init__(self, cfg: ProjectorConfig):
        super().__init__()
        hidden = cfg.qformer_hidden or cfg.d_llm
        self.input_len = cfg.qformer_input_len
        self.query_len = cfg.qformer_query_len
        self.queries = nn.Parameter(torch.randn(cfg.qformer_query_len, hidden) * 0.02)
        self.memory_norm = nn.LayerNorm(cfg.d_enc)
        self.layers = nn.ModuleList(
            QFormerLayer(hidden, cfg.d_enc, cfg.qformer_heads) for _ in range(cfg.qformer_layers)
        )
        self.out_norm = nn.LayerNorm(hidden)
        self.out_proj = nn.Linear(hidden, cfg.d_llm)

    def _pad(self, frames, lengths):
        b, t, d = frames.shape
        if t > self.input_len or int(lengths.max()) > self.input_len:
            raise ValueError(f"Q-Former input of {t} frames exceeds the fixed input length {self.input_len}")
        if t < self.input_len:
            frames = torch.cat([frames, frames.new_zeros(b, self.input_len - t, d)], dim=1)
        mask = torch.arange(self.input_len, device=frames.device)[None, :] < lengths[:, None]
        return frames * mask.unsqueeze(-1).to(frames.dtype), mask

    def forward(self, frames, lengths, return_attention: bool = False):
        memory, mask = self._pad(frames, lengths)
        memory = self.memory_norm(memory)
        h = self.queries.unsqueeze(0).expand(frames.shape[0], -1, -1)
        attentions = []
        for layer in self.layers:
            h, attn = layer(h, memory, mask)
            attentions.append(attn)
        out = self.out_proj(self.out_norm(h))
        out_lengths = torch.full_like(lengths, self.query_len)
        if return_attention:
            return out, out_lengths, attentions
        return out, out_lengths


def build_projector(cfg: ProjectorConfig) -> nn.Module:
    cfg.validate()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        if cfg.variant == "linear":
            return LinearProjector(cfg)
        if cfg.variant == "conv_linear":
            return ConvLinearProjector(cfg)
        return QFormerProjector(cfg)


def project(enc: EncoderOutput, projector: nn.Module) -> SpeechEmbeds:
    """Project a single utterance's encoder frames."""
    d_expected = _input_dim(projector)
    if enc.frames.shape[-1] != d_expected:
        raise ValueError(f"projector expects d_enc={d_expected}, got {enc.frames.shape[-1]}")
    frames = enc.frames.unsqueeze(0)
    embeds, lengths = projector(frames, torch.tensor([frames.shape[1]]))
    return SpeechEmbeds(embeds[0, : int(lengths[0])])


def qformer_attention_weights(enc: EncoderOutput, projector: nn.Module) -> list[torch.Tensor]:
    """Per-layer cross-attention maps, each [heads, query_len, input_len]."""
    if not isinstance(projector, QFormerProjector):
        raise TypeError("attention weights are only defined for the qformer variant")
    frames = enc.frames.unsqueeze(0)
    _, _, attn = projector(frames, torch.tensor([frames.shape[1]]), return_attention=True)
    return [a[0] for a in attn]


def _input_dim(projector: nn.Module) -> int:
    if isinstance(projector, LinearProjector):
        return projector.proj.in_features // projector.k
    if isinstance(projector, ConvLinearProjector):
        return projector.conv.in_channels
    if isinstance(projector, QFormerProjector):
        return projector.memory_norm.normalized_shape[0]
    raise TypeError(f"unknown projector type {type(projector).__name__}")
