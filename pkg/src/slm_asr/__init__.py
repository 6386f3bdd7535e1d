"""Toy-scale speech language model for conversational ASR.

Frozen speech encoder -> trainable projector -> frozen decoder-only LM with
optional LoRA adapters, previous-turn context prompts and a speech/context
contrastive objective.
"""

from .config import RunConfig, load_run_config
from .context import CONTEXT_TEMPLATE, build_context_prompt, combined_loss, contrastive_loss, previous_turn
from .corpus import SyntheticCorpusSpec, UtteranceRecord, generate_synthetic_corpus, load_manifest, reconstruct_conversations
from .encoder import EncoderConfig, build_encoder, encode, weight_checksum
from .evaluator import edit_ops, emit_report, score
from .frontend import MelProfile, augment, compute_log_mel, spec_augment
from .lm import LmConfig, build_input_sequence, build_lm, greedy_decode, lm_loss
from .lora import LoraConfig, lora_inject, lora_merge
from .model import Example, ModelConfig, SpeechLM, build_model
from .projector import ProjectorConfig, build_projector, project
from .trainer import TrainConfig, Trainer, load_checkpoint, lr_schedule, save_checkpoint

__version__ = "0.1.0"
