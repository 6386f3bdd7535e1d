"""Training regimes, learning-rate schedule, freeze enforcement and checkpoints."""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .checkpoint import read_container, write_container
from .encoder import weight_checksum
from .errors import CheckpointError, ConfigError, FreezeViolation
from .frontend import AugmentSpec, MelFeatures, MelProfile, SpecAugmentSpec, augment, compute_log_mel, derive_seed, spec_augment
from .model import Example, ModelConfig, SpeechLM, build_model
from .tokenizer import CharTokenizer

REGIMES = ("stage1_projector_only", "stage2_projector_plus_lora", "joint")


@dataclass
class TrainConfig:
    regime: str = "joint"
    lr: float = 1e-4
    warmup_steps: int = 1000
    epochs: int = 3
    batch_size: int = 8
    val_batch_size: int = 2
    lambda_contrastive: float = 0.0
    temperature: float = 0.07
    seed: int = 0
    max_steps: int | None = None
    schedule: str = "linear"  # "linear" decay after warmup, or "constant"
    grad_clip: float | None = 1.0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    # stage 2 only: start from a stage-1 checkpoint, or from a seeded projector
    init_projector: str | None = None
    fresh_projector: bool = False

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)


def validate_train_config(cfg: TrainConfig, model_cfg: ModelConfig) -> None:
    """Reject regime/config mismatches before any step runs."""
    if cfg.regime not in REGIMES:
        raise ConfigError(f"unknown regime {cfg.regime!r}; expected one of {REGIMES}")
    if not cfg.lr > 0:
        raise ConfigError("lr must be > 0")
    if cfg.warmup_steps < 0 or cfg.epochs < 1 or cfg.batch_size < 1 or cfg.val_batch_size < 1:
        raise ConfigError("need warmup_steps >= 0, epochs >= 1 and batch sizes >= 1")
    if cfg.max_steps is not None and cfg.max_steps < 1:
        raise ConfigError("max_steps must be >= 1 when set")
    if cfg.schedule not in ("linear", "constant"):
        raise ConfigError(f"unknown schedule {cfg.schedule!r}")
    if cfg.lambda_contrastive < 0 or not cfg.temperature > 0:
        raise ConfigError("lambda_contrastive must be >= 0 and temperature > 0")
    if cfg.regime == "stage1_projector_only":
        if model_cfg.lora is not None:
            raise ConfigError("stage1_projector_only trains the projector alone; remove the LoRA config")
        if cfg.lambda_contrastive > 0:
            raise ConfigError("stage1_projector_only cannot train a contrastive layer")
    if cfg.regime == "stage2_projector_plus_lora":
        if model_cfg.lora is None:
            raise ConfigError("stage2_projector_plus_lora requires a LoRA config")
        if not cfg.init_projector and not cfg.fresh_projector:
            raise ConfigError("stage2_projector_plus_lora needs init_projector=<stage-1 checkpoint> or fresh_projector=true")
    if cfg.lambda_contrastive > 0 and not model_cfg.contrastive:
        raise ConfigError("lambda_contrastive > 0 requires the model's contrastive head")


def lr_schedule(step: int, cfg: TrainConfig, total_steps: int | None = None) -> float:
    """Linear warmup from 0 to cfg.lr, then linear decay reaching 0 at ``total_steps``."""
    if step < 0:
        raise ValueError("step must be >= 0")
    if cfg.warmup_steps > 0 and step < cfg.warmup_steps:
        return cfg.lr * step / cfg.warmup_steps
    if cfg.schedule == "constant" or total_steps is None or total_steps <= cfg.warmup_steps:
        return cfg.lr
    remaining = (total_steps - step) / (total_steps - cfg.warmup_steps)
    return cfg.lr * max(0.0, remaining)


def steps_per_epoch(n_examples: int, batch_size: int) -> int:
    return math.ceil(n_examples / batch_size)


def planned_steps(cfg: TrainConfig, n_examples: int) -> int:
    if cfg.max_steps is not None:
        return cfg.max_steps
    return cfg.epochs * steps_per_epoch(n_examples, cfg.batch_size)


@dataclass
class FeaturePipeline:
    """Per-epoch features; augmentation seeds depend only on (seed, utt_id, epoch)."""

    profile: MelProfile = field(default_factory=MelProfile)
    augment: AugmentSpec | None = None
    spec_augment: SpecAugmentSpec | None = None

    @property
    def active(self) -> bool:
        return bool(self.augment and self.augment.ops) or self.spec_augment is not None

    def features(self, ex: Example, epoch: int, seed: int) -> np.ndarray:
        if not self.active:
            return ex.mel
        rate = self.profile.sample_rate
        if self.augment and self.augment.ops:
            if ex.waveform is None:
                raise ConfigError(f"{ex.utt_id}: waveform augmentation needs the waveform")
            spec = replace(self.augment, seed=derive_seed(seed, ex.utt_id, epoch, "wave"))
            mel = compute_log_mel(augment(ex.waveform, rate, spec), rate, self.profile)
        else:
            mel = MelFeatures(ex.mel, ex.mel.shape[1], self.profile.frame_shift_ms, self.profile.frame_length_ms, rate)
        if self.spec_augment is not None:
            sa = replace(
                self.spec_augment,
                max_time_width=min(self.spec_augment.max_time_width, mel.n_frames),
                max_freq_width=min(self.spec_augment.max_freq_width, mel.n_mels),
                seed=derive_seed(seed, ex.utt_id, epoch, "spec"),
            )
            mel = spec_augment(mel, sa)
        return mel.data


def _trainable(model: SpeechLM, cfg: TrainConfig) -> list[tuple[str, torch.nn.Parameter]]:
    groups = model.trainable_groups()
    names = ["projector"]
    if cfg.regime != "stage1_projector_only":
        names.append("lora")
        if cfg.lambda_contrastive > 0:
            names.append("contrastive")
    chosen = sorted((kv for g in names for kv in groups.get(g, [])), key=lambda kv: kv[0])
    chosen_ids = {id(p) for _, p in chosen}
    for p in model.parameters():
        p.requires_grad_(id(p) in chosen_ids)
    return chosen


class Trainer:
    """Single-writer training loop over a fixed example list.

    The batch drawn at step s is a pure function of (seed, s), so a resumed
    run replays exactly the batches an unbroken run would have seen.
    """

    def __init__(
        self,
        model: SpeechLM,
        cfg: TrainConfig,
        train: list[Example],
        val: list[Example] | None = None,
        metrics_path=None,
        pipeline: FeaturePipeline | None = None,
    ):
        validate_train_config(cfg, model.cfg)
        if not train:
            raise ConfigError("training data is empty")
        self.model = model
        self.cfg = cfg
        self.train_examples = list(train)
        self.val_examples = list(val or [])
        self.metrics_path = Path(metrics_path) if metrics_path else None
        self.pipeline = pipeline or FeaturePipeline()
        self.params = _trainable(model, cfg)
        self.optimizer = torch.optim.Adam(
            [p for _, p in self.params], lr=0.0, betas=cfg.betas, eps=cfg.eps, weight_decay=0.0
        )
        self.step = 0
        self.total_steps = planned_steps(cfg, len(self.train_examples))
        self.history: list[dict] = []
        self.frozen_checksum = weight_checksum(model.frozen_named_parameters())

    @property
    def steps_per_epoch(self) -> int:
        return steps_per_epoch(len(self.train_examples), self.cfg.batch_size)

    def trainable_names(self) -> list[str]:
        return [n for n, _ in self.params]

    def _batch(self, step: int) -> list[Example]:
        spe = self.steps_per_epoch
        epoch, pos = divmod(step, spe)
        order = np.random.default_rng(derive_seed(self.cfg.seed, "epoch", epoch)).permutation(len(self.train_examples))
        idx = order[pos * self.cfg.batch_size : (pos + 1) * self.cfg.batch_size]
        out = []
        for i in idx:
            ex = self.train_examples[int(i)]
            if self.pipeline.active:
                ex = replace(ex, mel=self.pipeline.features(ex, epoch, self.cfg.seed))
            out.append(ex)
        return out

    def check_freeze(self) -> None:
        now = weight_checksum(self.model.frozen_named_parameters())
        if now != self.frozen_checksum:
            raise FreezeViolation(f"frozen encoder/LM weights changed at step {self.step}")

    def train_step(self) -> dict:
        t0 = time.perf_counter()
        self.model.train()
        batch = self._batch(self.step)
        lr = lr_schedule(self.step + 1, self.cfg, self.total_steps)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        out = self.model.losses(batch, self.cfg.lambda_contrastive, self.cfg.temperature)
        self.optimizer.zero_grad(set_to_none=True)
        out["loss"].backward()
        if self.cfg.grad_clip:
            torch.nn.utils.clip_grad_norm_([p for _, p in self.params], self.cfg.grad_clip)
        self.optimizer.step()
        self.step += 1
        self.check_freeze()
        record = {
            "step": self.step,
            "loss": float(out["loss"].detach()),
            "ce": float(out["ce"].detach()),
            "contrastive": float(out["contrastive"].detach()) if "contrastive" in out else 0.0,
            "lr": lr,
            "wall_ms": round((time.perf_counter() - t0) * 1000.0, 3),
        }
        self._log(record)
        if self.val_examples and self.step % self.steps_per_epoch == 0:
            self._log({"step": self.step, "val_loss": self.validation_loss()})
        return record

    def run(self, until_step: int | None = None) -> list[dict]:
        stop = self.total_steps if until_step is None else min(until_step, self.total_steps)
        while self.step < stop:
            self.train_step()
        return self.history

    @torch.no_grad()
    def validation_loss(self) -> float:
        self.model.eval()
        total, count = 0.0, 0
        bs = self.cfg.val_batch_size
        for i in range(0, len(self.val_examples), bs):
            chunk = self.val_examples[i : i + bs]
            total += float(self.model.losses(chunk)["ce"]) * len(chunk)
            count += len(chunk)
        self.model.train()
        return total / max(count, 1)

    def _log(self, record: dict) -> None:
        self.history.append(record)
        if self.metrics_path is not None:
            with open(self.metrics_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")

    # --- checkpoints ------------------------------------------------------

    def save(self, path) -> None:
        save_checkpoint(
            path, self.model, self.cfg, step=self.step, optimizer=self.optimizer, params=self.params, profile=self.pipeline.profile
        )


def config_snapshot(model: SpeechLM, cfg: TrainConfig | None, profile: MelProfile | None = None) -> dict:
    snap = {"model": model.cfg.to_dict(), "tokenizer": {"alphabet": model.tokenizer.alphabet}}
    if cfg is not None:
        snap["train"] = asdict(cfg)
    if profile is not None:
        snap["frontend"] = asdict(profile)
    return snap


def save_checkpoint(
    path,
    model: SpeechLM,
    cfg: TrainConfig | None = None,
    step: int = 0,
    optimizer=None,
    params=None,
    profile: MelProfile | None = None,
) -> None:
    blobs: dict[str, tuple[str, object]] = {}
    for name, tensor in model.state_dict().items():
        blobs[f"weights/{name}"] = ("weight", tensor)
    if optimizer is not None:
        for name, p in params:
            state = optimizer.state.get(p)
            if not state:
                continue
            blobs[f"optim/{name}/exp_avg"] = ("optim", state["exp_avg"])
            blobs[f"optim/{name}/exp_avg_sq"] = ("optim", state["exp_avg_sq"])
            blobs[f"optim/{name}/step"] = ("optim", torch.as_tensor(state["step"], dtype=torch.float32).reshape(()))
    blobs["rng/torch"] = ("rng", torch.get_rng_state())
    header = {"config": config_snapshot(model, cfg, profile), "step": step}
    write_container(path, header, blobs)


@dataclass
class Checkpoint:
    config: dict
    step: int
    weights: dict[str, torch.Tensor]
    optim: dict[str, torch.Tensor]
    rng: torch.Tensor | None
    format_version: int


def load_checkpoint(path) -> Checkpoint:
    c = read_container(path)
    strip = lambda d, prefix: {k[len(prefix) :]: v for k, v in d.items() if k.startswith(prefix)}
    rng = c.tensors.get("rng/torch")
    return Checkpoint(
        config=c.header["config"],
        step=int(c.header["step"]),
        weights=strip(c.of_kind("weight"), "weights/"),
        optim=strip(c.of_kind("optim"), "optim/"),
        rng=rng,
        format_version=int(c.header["format_version"]),
    )


def model_from_checkpoint(ckpt: Checkpoint) -> SpeechLM:
    model_cfg = ModelConfig.from_dict(ckpt.config["model"])
    tokenizer = CharTokenizer(ckpt.config["tokenizer"]["alphabet"])
    model = build_model(model_cfg, tokenizer)
    _load_weights(model, ckpt.weights)
    return model


def _load_weights(model: SpeechLM, weights: dict[str, torch.Tensor]) -> None:
    state = model.state_dict()
    missing = sorted(set(state) - set(weights))
    unexpected = sorted(set(weights) - set(state))
    if missing or unexpected:
        raise CheckpointError(f"checkpoint/model mismatch: missing {missing[:5]}, unexpected {unexpected[:5]}")
    with torch.no_grad():
        for k, v in weights.items():
            if tuple(state[k].shape) != tuple(v.shape):
                raise CheckpointError(f"shape mismatch for {k}: {tuple(v.shape)} vs {tuple(state[k].shape)}")
            state[k].copy_(v.to(state[k].dtype))


def init_from_stage1(model: SpeechLM, path) -> None:
    """Copy encoder, projector and LM base weights from a stage-1 checkpoint."""
    ckpt = load_checkpoint(path)
    state = model.state_dict()
    # adapter wrapping inserts ".base." into the wrapped linear's parameter names
    by_canonical = {k.replace(".base.", "."): k for k in state if "lora_" not in k}
    with torch.no_grad():
        for k, v in ckpt.weights.items():
            if "lora_" in k or k.startswith("contrastive."):
                continue
            if k not in by_canonical:
                raise CheckpointError(f"stage-1 weight {k} has no counterpart in the stage-2 model")
            target = state[by_canonical[k]]
            if tuple(target.shape) != tuple(v.shape):
                raise CheckpointError(f"shape mismatch for {k}: {tuple(v.shape)} vs {tuple(target.shape)}")
            target.copy_(v.to(target.dtype))


def prepare_model(model_cfg: ModelConfig, cfg: TrainConfig, tokenizer: CharTokenizer | None = None) -> SpeechLM:
    """Build the model for a regime, applying stage-2 projector initialisation."""
    validate_train_config(cfg, model_cfg)
    model = build_model(model_cfg, tokenizer)
    if cfg.regime == "stage2_projector_plus_lora" and cfg.init_projector and not cfg.fresh_projector:
        init_from_stage1(model, cfg.init_projector)
    return model


def resume(path, train: list[Example], val=None, metrics_path=None, pipeline=None) -> Trainer:
    ckpt = load_checkpoint(path)
    if "train" not in ckpt.config:
        raise CheckpointError(f"{path}: no training state to resume from")
    cfg = TrainConfig.from_dict(ckpt.config["train"])
    model = model_from_checkpoint(ckpt)
    trainer = Trainer(model, cfg, train, val, metrics_path, pipeline)
    trainer.step = ckpt.step
    for name, p in trainer.params:
        key = f"{name}/exp_avg"
        if key not in ckpt.optim:
            continue
        trainer.optimizer.state[p] = {
            "step": ckpt.optim[f"{name}/step"].clone().reshape(()),
            "exp_avg": ckpt.optim[key].clone().to(p.dtype),
            "exp_avg_sq": ckpt.optim[f"{name}/exp_avg_sq"].clone().to(p.dtype),
        }
    if ckpt.rng is not None:
        torch.set_rng_state(ckpt.rng.to(torch.uint8))
    return trainer
