import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from slm_asr.checkpoint import write_container
from slm_asr.encoder import (
    EncoderConfig,
    ToyConvEncoder,
    build_encoder,
    encode,
    freeze_check,
    register_external_encoder,
    weight_checksum,
)
from slm_asr.errors import ConfigError
from slm_asr.frontend import MelFeatures


def _mel(frames=98, n_mels=128, seed=0):
    data = np.random.default_rng(seed).standard_normal((frames, n_mels)).astype(np.float32)
    return MelFeatures(data, n_mels, 10.0, 25.0, 16000)


def test_frame_contract_and_determinism():
    enc = build_encoder(EncoderConfig())
    a = encode(_mel(), enc)
    b = encode(_mel(), enc)
    assert a.frames.shape == (98, 64) and a.d_enc == 64
    assert torch.equal(a.frames, b.frames)
    assert a.frame_rate == pytest.approx(100.0)


def test_zero_weights_give_constant_bias_output():
    enc = build_encoder(EncoderConfig())
    with torch.no_grad():
        for conv in enc.convs:
            conv.weight.zero_()
    out = encode(_mel(), enc).frames
    assert torch.allclose(out, enc.convs[-1].bias.expand_as(out))


def test_n_mels_mismatch_names_dimensions():
    enc = build_encoder(EncoderConfig())
    with pytest.raises(ValueError, match="expects 128 mel bins, got 80"):
        encode(_mel(n_mels=80), enc)


def test_frozen_by_default():
    enc = build_encoder(EncoderConfig())
    assert not any(p.requires_grad for p in enc.parameters())


def test_batched_equals_single():
    enc = build_encoder(EncoderConfig())
    a, b = _mel(30, seed=1).data, _mel(50, seed=2).data
    batch = torch.zeros(2, 50, 128)
    batch[0, :30] = torch.from_numpy(a)
    batch[1] = torch.from_numpy(b)
    with torch.no_grad():
        out, lengths = enc(batch, torch.tensor([30, 50]))
    assert torch.allclose(out[0, :30], encode(_mel(30, seed=1), enc).frames, atol=1e-5)
    assert torch.allclose(out[1], encode(_mel(50, seed=2), enc).frames, atol=1e-5)
    assert torch.all(out[0, 30:] == 0)


def test_freeze_check_detects_encoder_update():
    enc = build_encoder(EncoderConfig())
    before = weight_checksum(enc)
    assert freeze_check(before, weight_checksum(enc))
    # an encoder erroneously handed to the optimizer
    for p in enc.parameters():
        p.requires_grad_(True)
    opt = torch.optim.Adam(enc.parameters(), lr=1e-3)
    enc(torch.randn(1, 10, 128), torch.tensor([10]))[0].sum().backward()
    opt.step()
    assert not freeze_check(before, weight_checksum(enc))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 60), st.floats(0.1, 1e4))
def test_bounded_input_gives_finite_output(frames, bound):
    enc = build_encoder(EncoderConfig())
    data = np.random.default_rng(frames).uniform(-bound, bound, (frames, 128)).astype(np.float32)
    out = encode(MelFeatures(data, 128, 10.0, 25.0, 16000), enc).frames
    assert torch.isfinite(out).all()


def test_seed_controls_init():
    a = weight_checksum(build_encoder(EncoderConfig(seed=0)))
    assert a == weight_checksum(build_encoder(EncoderConfig(seed=0)))
    assert a != weight_checksum(build_encoder(EncoderConfig(seed=1)))


def test_external_encoder_loads_weights(tmp_path):
    register_external_encoder("toy-copy", lambda cfg: ToyConvEncoder(EncoderConfig(n_mels=cfg.n_mels, d_enc=cfg.d_enc, seed=5)))
    source = ToyConvEncoder(EncoderConfig(seed=9))
    path = tmp_path / "enc.ckpt"
    write_container(path, {}, {f"encoder.{k}": ("weight", v) for k, v in source.state_dict().items()})
    enc = build_encoder(EncoderConfig(kind="external", external_name="toy-copy", weights_path=str(path)))
    assert weight_checksum(enc) == weight_checksum(source)


def test_unknown_external_encoder():
    with pytest.raises(ConfigError, match="not registered"):
        build_encoder(EncoderConfig(kind="external", external_name="whisper-missing"))
