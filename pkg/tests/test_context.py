import math
import random

import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import small_model_config
from gradcheck import check_gradients, fd_gradient, relative_error
from slm_asr.context import (
    AUDIO_SLOT,
    CONTEXT_SLOT,
    CONTEXT_TEMPLATE,
    ContrastiveBatch,
    ContrastiveHead,
    build_context_prompt,
    combined_loss,
    contexts_for,
    contrastive_loss,
    pool_context,
    pool_speech,
    previous_turn,
)
from slm_asr.corpus import SyntheticCorpusSpec, generate_synthetic_corpus, reconstruct_conversations
from slm_asr.model import build_model
from slm_asr.tokenizer import CharTokenizer

EXPECTED_BODY = (
    ". Given the conversation history above between two speakers (O1 and O2), "
    "please transcribe the speech below. Speech: [AUDIO]. Transcription:"
)


def test_template_is_byte_exact():
    assert CONTEXT_TEMPLATE == CONTEXT_SLOT + EXPECTED_BODY
    assert CONTEXT_TEMPLATE.count(AUDIO_SLOT) == 1


def test_rendering_with_and_without_context():
    p = build_context_prompt(("O1", "hello there"), "O2")
    assert p.rendered == "O1: hello there" + EXPECTED_BODY
    assert p.rendered[p.audio_marker_offset :].startswith(AUDIO_SLOT)
    first = build_context_prompt(None, "O1")
    assert first.context_text == ""
    assert first.rendered == EXPECTED_BODY


def test_token_ids_split_at_audio_slot():
    tok = CharTokenizer()
    p = build_context_prompt(("O2", "a b"), "O1", tok)
    ids, offset = p.token_ids(tok)
    assert offset == p.audio_marker_offset
    head, tail = p.rendered.split(AUDIO_SLOT)
    assert tok.decode(ids[:offset]) == head
    assert tok.decode(ids[offset:]) == tail


@settings(max_examples=50, deadline=None)
@given(st.sampled_from(["O1", "O2"]), st.text(max_size=20), st.sampled_from(["O1", "O2"]), st.text(max_size=20))
def test_rendering_injective(s1, t1, s2, t2):
    a = build_context_prompt((s1, t1), "O1").rendered
    b = build_context_prompt((s2, t2), "O1").rendered
    assert (a == b) == ((s1, t1) == (s2, t2))


def test_previous_turn():
    records, _ = generate_synthetic_corpus(SyntheticCorpusSpec(n_dialogues=1, turns_per_dialogue=4))
    conv = reconstruct_conversations(records)["dlg000"]
    assert previous_turn(conv, 0) is None
    assert previous_turn(conv, 3) == (conv.turns[2].speaker_id, conv.turns[2].text)
    with pytest.raises(IndexError):
        previous_turn(conv, 4)


@pytest.mark.parametrize("seed", range(5))
def test_context_after_shuffle_follows_time_not_file_order(seed):
    records, _ = generate_synthetic_corpus(SyntheticCorpusSpec(n_dialogues=3, turns_per_dialogue=5, seed=seed))
    shuffled = list(records)
    random.Random(seed).shuffle(shuffled)
    contexts = contexts_for(reconstruct_conversations(shuffled))
    # oracle: sort each dialogue by start_time directly
    for dlg in {r.dialogue_id for r in records}:
        turns = sorted((r for r in records if r.dialogue_id == dlg), key=lambda r: r.start_time)
        assert contexts[turns[0].utt_id] is None
        for prev, cur in zip(turns, turns[1:]):
            assert contexts[cur.utt_id] == (prev.speaker_id, prev.text)


def test_pooling():
    frame = torch.randn(1, 8, dtype=torch.float64)
    assert torch.allclose(pool_speech(frame), frame[0] / frame[0].norm())
    x = torch.randn(13, 8, dtype=torch.float64)
    assert pool_speech(x).norm().item() == pytest.approx(1.0, abs=1e-6)
    assert pool_context(x).norm().item() == pytest.approx(1.0, abs=1e-6)
    assert torch.allclose(pool_speech(x), pool_speech(x[torch.randperm(13)]), atol=1e-12)


def test_empty_context_uses_learned_vector():
    head = ContrastiveHead(8, seed=1)
    reps = head.context_reps([None, torch.zeros(0, 8), torch.randn(3, 8)])
    assert torch.allclose(reps[0], F.normalize(head.no_context, dim=-1))
    assert torch.allclose(reps[0], reps[1])
    with pytest.raises(ValueError):
        pool_context(torch.zeros(0, 8))


def test_single_pair_loss_is_zero():
    v = F.normalize(torch.randn(1, 5, dtype=torch.float64), dim=-1)
    assert contrastive_loss(ContrastiveBatch(v, v, 0.07)).item() == 0.0


def test_orthonormal_closed_form():
    eye = torch.eye(4, dtype=torch.float64)
    got = contrastive_loss(ContrastiveBatch(eye, eye, 1.0)).item()
    tau, n = 1.0, 4
    expected = -math.log(math.exp(1 / tau) / (math.exp(1 / tau) + (n - 1) * math.exp(0.0)))
    assert abs(got - expected) < 1e-9
    assert abs(expected - (-math.log(math.e / (math.e + 3)))) < 1e-15


def test_permutation_invariance():
    s = F.normalize(torch.randn(6, 4, dtype=torch.float64), dim=-1)
    c = F.normalize(torch.randn(6, 4, dtype=torch.float64), dim=-1)
    perm = torch.randperm(6)
    a = contrastive_loss(ContrastiveBatch(s, c, 0.2))
    b = contrastive_loss(ContrastiveBatch(s[perm], c[perm], 0.2))
    assert a.item() == pytest.approx(b.item(), abs=1e-12)


def test_loss_nonnegative_and_monotone_in_temperature():
    base = torch.eye(4, dtype=torch.float64)
    values = [contrastive_loss(ContrastiveBatch(base, base, t)).item() for t in (2.0, 1.0, 0.5, 0.1, 0.05)]
    assert all(v >= 0 for v in values)
    assert all(a > b for a, b in zip(values, values[1:]))


def test_invalid_temperature_and_unnormalised():
    v = torch.eye(2)
    with pytest.raises(ValueError, match="temperature"):
        contrastive_loss(ContrastiveBatch(v, v, 0.0))
    with pytest.raises(ValueError, match="unit-normalised"):
        contrastive_loss(ContrastiveBatch(2 * v, v, 1.0))


def test_gradient_step_raises_diagonal_similarity():
    g = torch.Generator().manual_seed(0)
    base = torch.randn(8, 16, generator=g, dtype=torch.float64)
    s_raw = (base + 0.8 * torch.randn(8, 16, generator=g, dtype=torch.float64)).requires_grad_(True)
    c_raw = (base + 0.8 * torch.randn(8, 16, generator=g, dtype=torch.float64)).requires_grad_(True)

    def diag():
        return (F.normalize(s_raw, dim=-1) * F.normalize(c_raw, dim=-1)).sum(-1).mean()

    before = diag().item()
    contrastive_loss(ContrastiveBatch(F.normalize(s_raw, dim=-1), F.normalize(c_raw, dim=-1), 0.07)).backward()
    with torch.no_grad():
        s_raw -= 1e-3 * s_raw.grad
        c_raw -= 1e-3 * c_raw.grad
    assert diag().item() > before


def test_contrastive_head_gradients():
    head = ContrastiveHead(6, 5, seed=2).double()
    speech = torch.randn(4, 7, 6, dtype=torch.float64)
    lengths = torch.tensor([7, 3, 5, 2])
    ctx = [torch.randn(3, 6, dtype=torch.float64), None, torch.randn(5, 6, dtype=torch.float64), torch.randn(1, 6, dtype=torch.float64)]

    def loss():
        return contrastive_loss(ContrastiveBatch(head.speech_reps(speech, lengths), head.context_reps(ctx), 0.5))

    errors = check_gradients(loss, dict(head.named_parameters()))
    assert max(errors.values()) < 1e-4, errors


def test_combined_loss_cases():
    ce, con = torch.tensor(1.25), torch.tensor(0.5)
    assert combined_loss(ce, con, 0.0) is ce
    assert combined_loss(ce, torch.tensor(0.0), 1.0).item() == ce.item()
    assert combined_loss(ce, con, 0.5).item() == 1.5
    with pytest.raises(ValueError):
        combined_loss(ce, con, -1.0)


def test_combined_gradient_is_linear(toy_examples):
    model = build_model(small_model_config(contrastive=True, use_context=True)).double()
    batch = toy_examples[:4]
    params = dict(model.projector.named_parameters())
    for p in params.values():
        p.requires_grad_(True)
    lam = 0.5

    def grads(key):
        for p in params.values():
            p.grad = None
        model.losses(batch, lam, 0.5)[key].backward()
        return {n: p.grad.clone() for n, p in params.items()}

    g_total, g_ce, g_con = grads("loss"), grads("ce"), grads("contrastive")
    for n in params:
        assert torch.allclose(g_total[n], g_ce[n] + lam * g_con[n], atol=1e-10)
    # and the combined analytic gradient agrees with finite differences
    w = params["proj.bias"]
    with torch.no_grad():
        numeric = fd_gradient(lambda: model.losses(batch, lam, 0.5)["loss"], w)
    assert relative_error(g_total["proj.bias"], numeric) < 1e-4
