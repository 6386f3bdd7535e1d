"""Speech LM assembly: frozen encoder -> projector -> LM, plus the contrastive head."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from typing import Callable

import numpy as np
import torch
import torch.nn as nn

from .context import (
    CONTEXT_TEMPLATE,
    ContrastiveBatch,
    ContrastiveHead,
    build_context_prompt,
    combined_loss,
    contexts_for,
    contrastive_loss,
    format_context,
)
from .corpus import UtteranceRecord, reconstruct_conversations
from .encoder import EncoderConfig, build_encoder
from .errors import ConfigError, ManifestError
from .frontend import MelProfile, compute_log_mel
from .lm import LmConfig, build_input_sequence, build_lm, greedy_decode, lm_loss
from .lora import LoraConfig, base_parameters, lora_inject, lora_parameters
from .projector import ProjectorConfig, build_projector
from .tokenizer import EOS, CharTokenizer


@dataclass
class PromptConfig:
    use_context: bool = False
    prompt: str = "Transcribe:"
    template: str = CONTEXT_TEMPLATE
    max_decode_len: int = 64


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    projector: ProjectorConfig = field(default_factory=ProjectorConfig)
    lm: LmConfig = field(default_factory=LmConfig)
    lora: LoraConfig | None = None
    prompt: PromptConfig = field(default_factory=PromptConfig)
    contrastive: bool = False
    contrastive_dim: int | None = None
    contrastive_seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        lora = d.get("lora")
        if lora is not None:
            lora = dict(lora)
            lora["target_matrices"] = tuple(lora.get("target_matrices", ("q_proj", "v_proj")))
            lora = LoraConfig(**lora)
        return cls(
            encoder=EncoderConfig(**d.get("encoder", {})),
            projector=ProjectorConfig(**d.get("projector", {})),
            lm=LmConfig(**d.get("lm", {})),
            lora=lora,
            prompt=PromptConfig(**d.get("prompt", {})),
            contrastive=bool(d.get("contrastive", False)),
            contrastive_dim=d.get("contrastive_dim"),
            contrastive_seed=int(d.get("contrastive_seed", 0)),
        )


@dataclass
class Example:
    """One training/decoding item; ``mel`` is [frames, n_mels]."""

    utt_id: str
    mel: np.ndarray
    text: str
    speaker: str = "O1"
    context: tuple[str, str] | None = None
    language: str = "en"
    dialogue_id: str = ""
    waveform: np.ndarray | None = None


def make_examples(
    records: list[UtteranceRecord],
    load: Callable[[UtteranceRecord], tuple[np.ndarray, int]],
    profile: MelProfile | None = None,
    keep_waveform: bool = False,
    errors: dict[str, str] | None = None,
) -> list[Example]:
    """Examples in chronological order per dialogue, each carrying its previous turn.

    ``load(record)`` returns (samples, sample_rate). With ``errors`` given,
    unreadable audio is recorded there and skipped; otherwise it raises.
    """
    profile = profile or MelProfile()
    conversations = reconstruct_conversations(records)
    contexts = contexts_for(conversations)
    ordered = [turn for conv in conversations.values() for turn in conv.turns]
    out = []
    for rec in ordered:
        try:
            samples, sr = load(rec)
            mel = compute_log_mel(samples, sr, profile).data
        except (OSError, ValueError, ManifestError) as exc:
            if errors is None:
                raise
            errors[rec.utt_id] = str(exc)
            continue
        out.append(
            Example(
                utt_id=rec.utt_id,
                mel=mel,
                text=rec.text,
                speaker=rec.speaker_id,
                context=contexts[rec.utt_id],
                language=rec.language,
                dialogue_id=rec.dialogue_id,
                waveform=np.asarray(samples, dtype=np.float32) if keep_waveform else None,
            )
        )
    return out


class SpeechLM(nn.Module):
    def __init__(self, cfg: ModelConfig, tokenizer: CharTokenizer):
        super().__init__()
        self.cfg = cfg
        self.tokenizer = tokenizer
        cfg.lm.vocab_size = tokenizer.vocab_size
        cfg.projector.d_enc = cfg.encoder.d_enc
        cfg.projector.d_llm = cfg.lm.d_llm
        self.encoder = build_encoder(cfg.encoder)
        self.projector = build_projector(cfg.projector)
        self.lm = build_lm(cfg.lm)
        for p in self.lm.parameters():
            p.requires_grad_(False)
        if cfg.lora is not None:
            lora_inject(self.lm, cfg.lora)
        self.contrastive = (
            ContrastiveHead(cfg.lm.d_llm, cfg.contrastive_dim, seed=cfg.contrastive_seed) if cfg.contrastive else None
        )

    # --- parameter groups -------------------------------------------------

    def frozen_named_parameters(self) -> list[tuple[str, torch.Tensor]]:
        enc = [(f"encoder.{n}", p) for n, p in self.encoder.named_parameters()]
        lm = [(f"lm.{n}", p) for n, p in base_parameters(self.lm)]
        return enc + lm

    def trainable_groups(self) -> dict[str, list[tuple[str, nn.Parameter]]]:
        groups = {
            "projector": [(f"projector.{n}", p) for n, p in self.projector.named_parameters()],
            "lora": [(f"lm.{n}", p) for n, p in lora_parameters(self.lm)],
        }
        if self.contrastive is not None:
            groups["contrastive"] = [(f"contrastive.{n}", p) for n, p in self.contrastive.named_parameters()]
        return groups

    # --- forward pieces ----------------------------------------------------

    @property
    def dtype(self):
        return self.lm.embed.weight.dtype

    def encode_mels(self, mels: list[np.ndarray]) -> tuple[torch.Tensor, torch.Tensor]:
        lengths = torch.tensor([m.shape[0] for m in mels])
        batch = torch.zeros(len(mels), int(lengths.max()), mels[0].shape[1], dtype=self.dtype)
        for i, m in enumerate(mels):
            batch[i, : m.shape[0]] = torch.as_tensor(m, dtype=self.dtype)
        with torch.no_grad():
            return self.encoder(batch, lengths)

    def prompt_ids(self, speaker: str, context) -> tuple[list[int], int | None]:
        if not self.cfg.prompt.use_context:
            return self.tokenizer.encode(self.cfg.prompt.prompt), None
        prompt = build_context_prompt(context, speaker, self.tokenizer, self.cfg.prompt.template)
        return prompt.token_ids(self.tokenizer)

    def prompt_text(self, speaker: str, context) -> str:
        """The prompt as rendered text, audio slot included."""
        if not self.cfg.prompt.use_context:
            return self.cfg.prompt.prompt
        return build_context_prompt(context, speaker, template=self.cfg.prompt.template).rendered

    def speech_embeddings(self, examples: list[Example]):
        frames, lengths = self.encode_mels([ex.mel for ex in examples])
        return self.projector(frames, lengths)

    def losses(self, examples: list[Example], lam: float = 0.0, temperature: float = 0.07) -> dict[str, torch.Tensor]:
        embeds, lengths = self.speech_embeddings(examples)
        seqs = []
        for i, ex in enumerate(examples):
            ids, offset = self.prompt_ids(ex.speaker, ex.context)
            target = self.tokenizer.encode(ex.text) + [EOS]
            seqs.append(build_input_sequence(embeds[i, : int(lengths[i])], ids, target, self.lm, audio_offset=offset))
        ce = lm_loss(seqs, self.lm)
        out = {"ce": ce}
        if lam > 0:
            if self.contrastive is None:
                raise ConfigError("contrastive weight > 0 but the model has no contrastive head")
            speech = self.contrastive.speech_reps(embeds, lengths)
            ctx = [
                self.lm.embed_tokens(self.tokenizer.encode(format_context(ex.context))) if ex.context else None
                for ex in examples
            ]
            con = contrastive_loss(ContrastiveBatch(speech, self.contrastive.context_reps(ctx), temperature))
            out["contrastive"] = con
            out["loss"] = combined_loss(ce, con, lam)
        else:
            out["loss"] = ce
        return out

    def transcribe(self, example: Example, max_len: int | None = None) -> str:
        embeds, lengths = self.speech_embeddings([example])
        ids, offset = self.prompt_ids(example.speaker, example.context)
        return greedy_decode(
            embeds[0, : int(lengths[0])],
            ids,
            self.lm,
            self.tokenizer,
            max_len or self.cfg.prompt.max_decode_len,
            audio_offset=offset,
        )


def build_model(cfg: ModelConfig, tokenizer: CharTokenizer | None = None) -> SpeechLM:
    return SpeechLM(cfg, tokenizer or CharTokenizer())


def decode_examples(
    model: SpeechLM,
    examples: list[Example],
    context_from_hyps: bool = False,
    prompts: dict[str, str] | None = None,
) -> dict[str, str]:
    """Greedy transcripts keyed by utt_id.

    With ``context_from_hyps`` each turn's context is the previous hypothesis of
    the same dialogue instead of the reference; examples must then be given in
    chronological order per dialogue with ``context`` filled from references.
    ``prompts``, when given, receives the rendered prompt used for each utterance.
    """
    hyps: dict[str, str] = {}
    prev_hyp: dict[str, str] = {}
    model.eval()
    for ex in examples:
        if context_from_hyps and ex.context is not None:
            ex = replace(ex, context=(ex.context[0], prev_hyp.get(ex.dialogue_id, "")))
        if prompts is not None:
            prompts[ex.utt_id] = model.prompt_text(ex.speaker, ex.context)
        hyps[ex.utt_id] = model.transcribe(ex)
        prev_hyp[ex.dialogue_id] = hyps[ex.utt_id]
    return hyps
