"""Low-rank adapters for the toy LM's linear layers."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError

logger = logging.getLogger(__name__)

TARGETS = ("q_proj", "k_proj", "v_proj", "o_proj", "ffn")


@dataclass
class LoraConfig:
    r: int = 8
    alpha: float = 32.0
    target_matrices: tuple[str, ...] = ("q_proj", "v_proj")
    dropout: float = 0.0
    init_std: float = 0.02
    seed: int = 0

    def validate(self) -> None:
        if self.r < 1:
            raise ConfigError("LoRA rank r must be >= 1")
        if not self.alpha > 0:
            raise ConfigError("LoRA alpha must be > 0")
        if not self.target_matrices:
            raise ConfigError("LoRA target_matrices must not be empty")
        unknown = [t for t in self.target_matrices if t not in TARGETS]
        if unknown:
            raise ConfigError(f"unknown LoRA target(s) {unknown}; valid targets: {list(TARGETS)}")
        if not 0 <= self.dropout < 1:
            raise ConfigError("LoRA dropout must lie in [0, 1)")


class LoRALinear(nn.Module):
    """y = W x + b + (alpha / r) * B A x, with W and b frozen."""

    def __init__(self, base: nn.Linear, r: int, alpha: float, dropout: float = 0.0, init_std: float = 0.02):
        super().__init__()
        self.base = base
        for p in self.base.parameters():
            p.requires_grad_(False)
        self.r = r
        self.alpha = alpha
        self.scaling = alpha / r
        w = base.weight
        self.lora_A = nn.Parameter(torch.randn(r, base.in_features, dtype=w.dtype) * init_std)
        self.lora_B = nn.Parameter(torch.zeros(base.out_features, r, dtype=w.dtype))
        self.dropout = nn.Dropout(dropout) if dropout > 0 else nn.Identity()

    @property
    def in_features(self):
        return self.base.in_features

    @property
    def out_features(self):
        return self.base.out_features

    def forward(self, x):
        return self.base(x) + self.scaling * F.linear(F.linear(self.dropout(x), self.lora_A), self.lora_B)

    def delta_weight(self) -> torch.Tensor:
        return self.scaling * (self.lora_B @ self.lora_A)


def _target_paths(model: nn.Module, targets) -> list[str]:
    paths = []
    for name, module in model.named_modules():
        if not isinstance(module, nn.Linear):
            continue
        parts = name.split(".")
        if parts[-1] in targets or (len(parts) >= 2 and parts[-2] in targets):
            paths.append(name)
    return paths


def _set_submodule(model: nn.Module, path: str, module: nn.Module) -> None:
    parent_path, _, leaf = path.rpartition(".")
    parent = model.get_submodule(parent_path) if parent_path else model
    setattr(parent, leaf, module)


def lora_inject(model: nn.Module, cfg: LoraConfig) -> nn.Module:
    """Wrap every targeted linear layer in place; afterwards only adapters are trainable."""
    cfg.validate()
    if any(isinstance(m, LoRALinear) for m in model.modules()):
        raise ConfigError("model already carries LoRA adapters")
    paths = _target_paths(model, set(cfg.target_matrices))
    found = {p.split(".")[-1] for p in paths} | {p.split(".")[-2] for p in paths if "." in p}
    missing = [t for t in cfg.target_matrices if t not in found]
    if missing:
        raise ConfigError(f"LoRA target(s) {missing} not present in model; valid targets: {list(TARGETS)}")
    for p in model.parameters():
        p.requires_grad_(False)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        for path in paths:
            base = model.get_submodule(path)
            _set_submodule(model, path, LoRALinear(base, cfg.r, cfg.alpha, cfg.dropout, cfg.init_std))
    return model


def lora_merge(model: nn.Module) -> nn.Module:
    """Fold adapters into their base weights and remove them (in place)."""
    paths = [name for name, m in model.named_modules() if isinstance(m, LoRALinear)]
    if not paths:
        logger.warning("lora_merge called on a model without adapters; nothing to do")
        return model
    for path in paths:
        wrapper = model.get_submodule(path)
        with torch.no_grad():
            wrapper.base.weight.add_(wrapper.delta_weight())
        _set_submodule(model, path, wrapper.base)
    return model


def has_lora(model: nn.Module) -> bool:
    return any(isinstance(m, LoRALinear) for m in model.modules())


def lora_parameters(model: nn.Module) -> list[tuple[str, nn.Parameter]]:
    return [(n, p) for n, p in model.named_parameters() if n.rsplit(".", 1)[-1] in ("lora_A", "lora_B")]


def base_parameters(model: nn.Module) -> list[tuple[str, nn.Parameter]]:
    """Non-adapter parameters under names that do not depend on whether adapters are injected."""
    out = []
    for n, p in model.named_parameters():
        if n.rsplit(".", 1)[-1] in ("lora_A", "lora_B"):
            continue
        out.append((n.replace(".base.", "."), p))
    return out
