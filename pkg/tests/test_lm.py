import logging
import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import small_model_config
from gradcheck import check_gradients
from slm_asr.lm import (
    IGNORE,
    LmConfig,
    build_input_sequence,
    build_lm,
    collate,
    greedy_decode,
    lm_loss,
)
from slm_asr.lora import LoraConfig, lora_inject
from slm_asr.model import Example, ModelConfig, build_model
from slm_asr.projector import ProjectorConfig, build_projector
from slm_asr.tokenizer import DEFAULT_ALPHABET, EOS, UNK, CharTokenizer


def test_tokenizer_basics(caplog):
    tok = CharTokenizer()
    assert tok.encode("") == [] and tok.decode([]) == ""
    ids = tok.encode("abc")
    assert len(ids) == 3 and tok.decode(ids) == "abc"
    with caplog.at_level(logging.WARNING):
        assert tok.encode("é") == [UNK]
    assert "é" in caplog.text


@settings(max_examples=1000, deadline=None)
@given(st.text(alphabet=DEFAULT_ALPHABET, max_size=40))
def test_tokenizer_round_trip(text):
    tok = CharTokenizer()
    assert tok.decode(tok.encode(text)) == text


def test_tokenizer_from_texts_extends_alphabet():
    tok = CharTokenizer.from_texts(["こんにちは", "abc"])
    assert tok.decode(tok.encode("こんにちは")) == "こんにちは"


def _lm(**kw):
    return build_lm(LmConfig(**kw))


def test_sequence_span_arithmetic():
    lm = _lm()
    seq = build_input_sequence(torch.randn(320, 64), list(range(4, 16)), list(range(4, 24)), lm)
    assert seq.length == 352 and seq.n_supervised == 20
    assert seq.spans == {"speech": (0, 320), "prompt": (320, 332), "target": (332, 352)}
    assert torch.all(seq.label_ids[:332] == IGNORE)
    assert seq.label_ids[332:].tolist() == list(range(4, 24))
    # speech embeddings sit first, prompt embeddings next
    assert torch.equal(seq.embeds[332:352], lm.embed_tokens(list(range(4, 24))))
    inference = build_input_sequence(torch.randn(320, 64), list(range(4, 16)), None, lm)
    assert inference.length == 332 and inference.n_supervised == 0


def test_audio_offset_splices_speech():
    lm = _lm()
    speech = torch.randn(5, 64)
    seq = build_input_sequence(speech, [10, 11, 12, 13], [20, 21], lm, audio_offset=1)
    assert seq.spans == {"prompt": (0, 1), "speech": (1, 6), "prompt_tail": (6, 9), "target": (9, 11)}
    assert torch.equal(seq.embeds[1:6], speech)


def test_sequence_too_long():
    with pytest.raises(ValueError, match="sequence too long"):
        build_input_sequence(torch.randn(500, 64), [4] * 10, [5] * 10, _lm())


def test_untrained_loss_near_log_vocab():
    torch.manual_seed(1)
    lm = _lm()
    losses = []
    for _ in range(5):
        seq = build_input_sequence(torch.randn(20, 64), list(np.random.randint(4, 99, 8)), list(np.random.randint(4, 99, 10)), lm)
        losses.append(lm_loss(seq, lm).item())
    assert abs(np.mean(losses) - math.log(99)) < 0.5


def test_zeroed_weights_give_exact_log_vocab():
    lm = _lm().double()
    with torch.no_grad():
        for p in lm.parameters():
            p.zero_()
    seq = build_input_sequence(torch.randn(7, 64, dtype=torch.float64), [5, 6], [7, 8, 9], lm)
    assert lm_loss(seq, lm).item() == pytest.approx(math.log(99), abs=1e-12)


def test_loss_counts_only_target_positions():
    torch.manual_seed(2)
    lm = _lm().double()
    seq = build_input_sequence(torch.randn(9, 64, dtype=torch.float64), [5, 6, 7], [8, 9, 10, 11], lm)
    logits = lm(seq.embeds.unsqueeze(0))[0]
    # oracle: explicit sum over target positions, each predicted from its predecessor
    start, end = seq.spans["target"]
    manual = -sum(F.log_softmax(logits[i - 1], -1)[seq.label_ids[i]] for i in range(start, end)) / (end - start)
    assert lm_loss(seq, lm).item() == pytest.approx(manual.item(), abs=1e-12)
    # the loss cannot see what labels the speech span would carry: they are IGNORE
    assert torch.all(seq.label_ids[: seq.spans["speech"][1]] == IGNORE)


def test_changing_ignored_labels_has_no_effect():
    lm = _lm().double()
    seq = build_input_sequence(torch.randn(6, 64, dtype=torch.float64), [5, 6], [8, 9], lm)
    base = lm_loss(seq, lm).item()
    seq.label_ids[:8] = IGNORE  # already ignored; re-assigning must be a no-op
    assert lm_loss(seq, lm).item() == base


def test_loss_errors_without_supervision():
    lm = _lm()
    with pytest.raises(ValueError, match="no supervised"):
        lm_loss(build_input_sequence(torch.randn(4, 64), [5], None, lm), lm)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 30), st.integers(0, 10_000))
def test_causality(n, seed):
    g = torch.Generator().manual_seed(seed)
    lm = _lm(d_llm=32, n_heads=4, n_layers=2).double()
    x = torch.randn(1, 32, 32, generator=g, dtype=torch.float64)
    i = min(n, 31)
    y = x.clone()
    y[:, i + 1 :] += torch.randn(1, 31 - i, 32, generator=g, dtype=torch.float64)
    with torch.no_grad():
        assert torch.allclose(lm(x)[:, : i + 1], lm(y)[:, : i + 1], atol=1e-12)


def test_padding_does_not_change_real_positions():
    lm = _lm().double()
    a = build_input_sequence(torch.randn(4, 64, dtype=torch.float64), [5], [6, 7], lm)
    b = build_input_sequence(torch.randn(9, 64, dtype=torch.float64), [5, 6], [7, 8, 9], lm)
    embeds, labels = collate([a, b])
    with torch.no_grad():
        assert torch.allclose(lm(embeds)[0, : a.length], lm(a.embeds.unsqueeze(0))[0], atol=1e-10)


def test_gradients_projector_and_lora():
    cfg = LmConfig(vocab_size=12, d_llm=32, n_layers=4, n_heads=4, max_seq=64, seed=3)
    lm = build_lm(cfg).double()
    lora_inject(lm, LoraConfig(r=2, alpha=4.0, target_matrices=("q_proj", "v_proj")))
    lm.double()
    with torch.no_grad():
        for name, p in lm.named_parameters():
            if name.endswith("lora_B"):
                p.normal_(0, 0.1)  # nonzero B so A receives gradient
    proj = build_projector(ProjectorConfig(variant="linear", d_enc=6, d_llm=32, downsample_factor=2)).double()
    frames = torch.randn(1, 8, 6, dtype=torch.float64)

    def loss():
        embeds, _ = proj(frames, torch.tensor([8]))
        return lm_loss(build_input_sequence(embeds[0], [4, 5], [6, 7, 8, EOS], lm), lm)

    params = {f"projector.{n}": p for n, p in proj.named_parameters()}
    params.update({n: p for n, p in lm.named_parameters() if "lora_" in n})
    errors = check_gradients(loss, params)
    assert max(errors.values()) < 1e-4, {k: v for k, v in errors.items() if v >= 1e-4}


def test_greedy_decode_determinism_and_cap():
    lm = _lm()
    tok = CharTokenizer()
    speech = torch.randn(6, 64)
    a = greedy_decode(speech, tok.encode("Transcribe:"), lm, tok, max_len=10)
    assert a == greedy_decode(speech, tok.encode("Transcribe:"), lm, tok, max_len=10)
    assert len(greedy_decode(speech, tok.encode("Transcribe:"), lm, tok, max_len=1)) <= 1


def test_overfit_single_utterance(toy_examples):
    model = build_model(ModelConfig(lora=LoraConfig()))
    ex = toy_examples[0]
    params = [p for group in model.trainable_groups().values() for _, p in group]
    for p in params:
        p.requires_grad_(True)
    opt = torch.optim.Adam(params, lr=1e-2)
    for _ in range(150):
        loss = model.losses([ex])["ce"]
        opt.zero_grad()
        loss.backward()
        opt.step()
    with torch.no_grad():
        assert model.losses([ex])["ce"].item() < 0.01
    assert model.transcribe(ex) == ex.text


def test_speech_lm_freezes_lm_base():
    model = build_model(small_model_config())
    for name, p in model.frozen_named_parameters():
        assert not p.requires_grad, name
    assert isinstance(model.transcribe(Example("u", np.zeros((12, 128), np.float32), "a")), str)
