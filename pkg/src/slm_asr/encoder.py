"""Frozen speech encoder slot and weight-checksum freeze checks."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Callable, Iterable

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError
from .frontend import MelFeatures


@dataclass
class EncoderConfig:
    kind: str = "toy_conv"
    n_mels: int = 128
    d_enc: int = 64
    n_layers: int = 2
    kernel_size: int = 3
    seed: int = 0
    frozen: bool = True
    # external kind only
    external_name: str | None = None
    weights_path: str | None = None

    def validate(self) -> None:
        if self.kind not in ("toy_conv", "external"):
            raise ConfigError(f"unknown encoder kind {self.kind!r}")
        if self.d_enc <= 0 or self.n_layers < 1:
            raise ConfigError("d_enc must be > 0 and n_layers >= 1")
        if self.kernel_size % 2 != 1:
            raise ConfigError("kernel_size must be odd to keep the frame count")


@dataclass
class EncoderOutput:
    frames: torch.Tensor  # [T_enc, d_enc]
    d_enc: int
    frame_rate: float


def _length_mask(lengths: torch.Tensor, max_len: int) -> torch.Tensor:
    return torch.arange(max_len, device=lengths.device)[None, :] < lengths[:, None]


class ToyConvEncoder(nn.Module):
    """Stride-1 conv stack; one output frame per input frame.

    Each utterance is mean/variance normalised before the first layer and
    padded positions are zeroed between layers, so a batched forward gives the
    same frames as encoding every utterance alone.
    """

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.n_mels = cfg.n_mels
        self.d_enc = cfg.d_enc
        gen = torch.Generator().manual_seed(cfg.seed)
        self.convs = nn.ModuleList()
        d_in = cfg.n_mels
        for _ in range(cfg.n_layers):
            conv = nn.Conv1d(d_in, cfg.d_enc, cfg.kernel_size, padding=cfg.kernel_size // 2)
            bound = 1.0 / (d_in * cfg.kernel_size) ** 0.5
            with torch.no_grad():
                conv.weight.uniform_(-bound, bound, generator=gen)
                conv.bias.uniform_(-bound, bound, generator=gen)
            self.convs.append(conv)
            d_in = cfg.d_enc

    def forward(self, mel: torch.Tensor, lengths: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """mel: [B, T, n_mels]; returns ([B, T, d_enc], lengths)."""
        mask = _length_mask(lengths, mel.shape[1]).unsqueeze(-1).to(mel.dtype)
        count = lengths.to(mel.dtype)[:, None, None] * mel.shape[2]
        mean = (mel * mask).sum(dim=(1, 2), keepdim=True) / count
        var = (((mel - mean) * mask) ** 2).sum(dim=(1, 2), keepdim=True) / count
        h = (mel - mean) / torch.sqrt(var + 1e-5) * mask
        for i, conv in enumerate(self.convs):
            h = conv(h.transpose(1, 2)).transpose(1, 2)
            if i < len(self.convs) - 1:
                h = F.gelu(h)
            h = h * mask
        return h, lengths


EXTERNAL_ENCODERS: dict[str, Callable[[EncoderConfig], nn.Module]] = {}


def register_external_encoder(name: str, factory: Callable[[EncoderConfig], nn.Module]) -> None:
    """Register a factory for ``kind: external`` encoders.

    The returned module must implement ``forward(mel [B, T, n_mels], lengths)
    -> (frames [B, T', d_enc], lengths')``. Weights are read from the named
    blobs of a checkpoint container at ``cfg.weights_path``.
    """
    EXTERNAL_ENCODERS[name] = factory


def build_encoder(cfg: EncoderConfig) -> nn.Module:
    cfg.validate()
    if cfg.kind == "toy_conv":
        enc = ToyConvEncoder(cfg)
    else:
        if cfg.external_name not in EXTERNAL_ENCODERS:
            raise ConfigError(
                f"external encoder {cfg.external_name!r} is not registered; known: {sorted(EXTERNAL_ENCODERS)}"
            )
        enc = EXTERNAL_ENCODERS[cfg.external_name](cfg)
        if cfg.weights_path:
            from .checkpoint import read_container

            blobs = read_container(cfg.weights_path).tensors
            prefix = "encoder."
            state = {k[len(prefix) :]: v for k, v in blobs.items() if k.startswith(prefix)} or blobs
            enc.load_state_dict(state)
    if cfg.frozen:
        for p in enc.parameters():
            p.requires_grad_(False)
    return enc


def encode(mel: MelFeatures, encoder: nn.Module) -> EncoderOutput:
    expected = getattr(encoder, "n_mels", mel.n_mels)
    if mel.n_mels != expected or mel.data.shape[1] != expected:
        raise ValueError(f"encoder expects {expected} mel bins, got {mel.data.shape[1]}")
    param = next(encoder.parameters())
    x = torch.as_tensor(mel.data, dtype=param.dtype).unsqueeze(0)
    with torch.no_grad():
        frames, lengths = encoder(x, torch.tensor([x.shape[1]]))
    t = int(lengths[0])
    return EncoderOutput(frames=frames[0, :t], d_enc=frames.shape[-1], frame_rate=1000.0 / mel.frame_shift)


def weight_checksum(named: Iterable[tuple[str, torch.Tensor]] | nn.Module) -> str:
    """SHA-256 over names, shapes and raw bytes, in sorted-name order."""
    if isinstance(named, nn.Module):
        named = named.named_parameters()
    digest = hashlib.sha256()
    for name, tensor in sorted(named, key=lambda kv: kv[0]):
        t = tensor.detach().cpu().contiguous()
        digest.update(name.encode("utf-8"))
        digest.update(repr(tuple(t.shape)).encode("ascii"))
        digest.update(t.numpy().tobytes())
    return digest.hexdigest()


def freeze_check(before: str, after: str) -> bool:
    return before == after
