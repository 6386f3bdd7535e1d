"""Previous-turn context prompts and speech-context contrastive alignment."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .corpus import SPEAKERS, Conversation
from .tokenizer import CharTokenizer

CONTEXT_SLOT = "[CONTEXT INFO]"
AUDIO_SLOT = "[AUDIO]"
CONTEXT_TEMPLATE = (
    "[CONTEXT INFO]. Given the conversation history above between two speakers (O1 and O2), "
    "please transcribe the speech below. Speech: [AUDIO]. Transcription:"
)


@dataclass(frozen=True)
class ContextPrompt:
    context_text: str
    template: str
    rendered: str
    audio_marker_offset: int  # token index of the audio slot within ``rendered``

    def token_ids(self, tokenizer: CharTokenizer) -> tuple[list[int], int]:
        """Prompt ids with the audio slot removed, and the index where speech is spliced."""
        char_at = self.template.index(AUDIO_SLOT) - len(CONTEXT_SLOT) + len(self.context_text)
        head = tokenizer.encode(self.rendered[:char_at])
        tail = tokenizer.encode(self.rendered[char_at + len(AUDIO_SLOT) :])
        return head + tail, len(head)


def previous_turn(conv: Conversation, index: int) -> tuple[str, str] | None:
    """Speaker tag and text of the turn preceding ``index``, or None for the first turn."""
    if not 0 <= index < len(conv.turns):
        raise IndexError(f"turn index {index} out of range for {len(conv.turns)} turns")
    if index == 0:
        return None
    prev = conv.turns[index - 1]
    return prev.speaker_id, prev.text


def format_context(context: tuple[str, str] | None) -> str:
    if context is None:
        return ""
    speaker, text = context
    return f"{speaker}: {text}"


def build_context_prompt(
    context: tuple[str, str] | None,
    current_speaker: str,
    tokenizer: CharTokenizer | None = None,
    template: str = CONTEXT_TEMPLATE,
) -> ContextPrompt:
    if current_speaker not in SPEAKERS:
        raise ValueError(f"unknown speaker {current_speaker!r}")
    context_text = format_context(context)
    rendered = template.replace(CONTEXT_SLOT, context_text, 1)
    char_at = template.index(AUDIO_SLOT) - len(CONTEXT_SLOT) + len(context_text)
    offset = char_at if tokenizer is None else len(tokenizer.encode(rendered[:char_at]))
    return ContextPrompt(context_text, template, rendered, offset)


def contexts_for(conversations: dict[str, Conversation]) -> dict[str, tuple[str, str] | None]:
    """Map every utt_id to its contextual turn."""
    out = {}
    for conv in conversations.values():
        for i, turn in enumerate(conv.turns):
            out[turn.utt_id] = previous_turn(conv, i)
    return out


# --- pooling and contrastive loss ------------------------------------------


def _masked_mean(x: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
    mask = (torch.arange(x.shape[1], device=x.device)[None, :] < lengths[:, None]).to(x.dtype)
    return (x * mask.unsqueeze(-1)).sum(dim=1) / lengths.to(x.dtype)[:, None]


def pool_speech(speech: torch.Tensor, layer: nn.Module | None = None) -> torch.Tensor:
    """Mean over frames, optional linear map, then L2 normalisation."""
    if speech.shape[0] == 0:
        raise ValueError("cannot pool an empty speech sequence")
    v = speech.mean(dim=0)
    if layer is not None:
        v = layer(v)
    return F.normalize(v, dim=-1)


def pool_context(token_embeds: torch.Tensor, layer: nn.Module | None = None) -> torch.Tensor:
    if token_embeds.shape[0] == 0:
        raise ValueError("empty context: use ContrastiveHead.no_context instead")
    v = token_embeds.mean(dim=0)
    if layer is not None:
        v = layer(v)
    return F.normalize(v, dim=-1)


class ContrastiveHead(nn.Module):
    """Trainable linear maps into a shared space, plus a learned empty-context vector."""

    def __init__(self, d_llm: int, d_out: int | None = None, seed: int = 0):
        super().__init__()
        d_out = d_out or d_llm
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.speech_proj = nn.Linear(d_llm, d_out)
            self.context_proj = nn.Linear(d_llm, d_out)
            self.no_context = nn.Parameter(torch.randn(d_out) * 0.02)

    def speech_reps(self, embeds: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        return F.normalize(self.speech_proj(_masked_mean(embeds, lengths)), dim=-1)

    def context_reps(self, token_embeds: list[torch.Tensor | None]) -> torch.Tensor:
        rows = []
        for emb in token_embeds:
            if emb is None or emb.shape[0] == 0:
                rows.append(F.normalize(self.no_context, dim=-1))
            else:
                rows.append(pool_context(emb, self.context_proj))
        return torch.stack(rows)


@dataclass
class ContrastiveBatch:
    speech_reps: torch.Tensor  # [N, d], row i pairs with context row i
    context_reps: torch.Tensor  # [N, d]
    temperature: float = 0.07


def contrastive_loss(batch: ContrastiveBatch) -> torch.Tensor:
    """Symmetric InfoNCE over in-batch negatives with diagonal positives."""
    if not batch.temperature > 0:
        raise ValueError(f"temperature must be > 0, got {batch.temperature}")
    s, c = batch.speech_reps, batch.context_reps
    if s.shape != c.shape or s.dim() != 2 or s.shape[0] < 1:
        raise ValueError("speech and context reps must both be [N, d] with N >= 1")
    for name, reps in (("speech", s), ("context", c)):
        if not torch.allclose(reps.detach().norm(dim=-1), torch.ones(reps.shape[0], dtype=reps.dtype), atol=1e-4):
            raise ValueError(f"{name} reps must be unit-normalised")
    logits = s @ c.T / batch.temperature
    targets = torch.arange(s.shape[0], device=s.device)
    return 0.5 * (F.cross_entropy(logits, targets) + F.cross_entropy(logits.T, targets))


def combined_loss(ce: torch.Tensor, con: torch.Tensor, lam: float) -> torch.Tensor:
    if lam < 0:
        raise ValueError("contrastive weight must be >= 0")
    if lam == 0:
        return ce
    return ce + lam * con
