import sys

import numpy as np
import pytest
import torch

from slm_asr.corpus import SyntheticCorpusSpec, generate_synthetic_corpus
from slm_asr.encoder import EncoderConfig
from slm_asr.frontend import MelProfile
from slm_asr.lm import LmConfig
from slm_asr.lora import LoraConfig
from slm_asr.model import ModelConfig, PromptConfig, make_examples
from slm_asr.projector import ProjectorConfig
from slm_asr.tokenizer import CharTokenizer


@pytest.fixture(scope="session")
def toy_corpus():
    """The default 8 x 4 synthetic corpus: (records, waveform store)."""
    return generate_synthetic_corpus(SyntheticCorpusSpec())


def examples_for(records, store, profile=None, keep_waveform=False):
    return make_examples(records, lambda r: (store[r.utt_id], 16000), profile or MelProfile(), keep_waveform)


@pytest.fixture(scope="session")
def toy_examples(toy_corpus):
    records, store = toy_corpus
    return examples_for(records, store)


def small_model_config(lora=True, contrastive=False, use_context=False, variant="linear", n_mels=128):
    return ModelConfig(
        encoder=EncoderConfig(n_mels=n_mels, d_enc=16, n_layers=2),
        projector=ProjectorConfig(variant=variant, downsample_factor=4, qformer_query_len=4, qformer_input_len=64),
        lm=LmConfig(d_llm=16, n_layers=2, n_heads=2, max_seq=256),
        lora=LoraConfig(r=4, alpha=8.0) if lora else None,
        prompt=PromptConfig(use_context=use_context, max_decode_len=8),
        contrastive=contrastive,
    )


@pytest.fixture
def tokenizer():
    return CharTokenizer()


@pytest.fixture(autouse=True)
def _seed_everything():
    torch.manual_seed(0)
    np.random.seed(0)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
