import struct

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import max_rel_error
from pseaec.embedding import embedding_for
from pseaec.models import (AlignBlock, AlignState, CheckpointError, LearnableDecoder, LearnableEncoder,
                           MaskHead, ModelConfig, StreamingSession, TemporalBlock, align_attention,
                           build_model, causality_check, enhance_streaming, forward_bypass, forward_full,
                           load_model, param_count, save_model, tiny_config)
from pseaec.models.diagnostics import protected_end

ALL_TINY = [tiny_config(variant=v, task=t, ablation=a)
            for v in ("e3net", "vfl")
            for t, a in (("aec", None), ("pse", None), ("pse_aec", "naive"), ("pse_aec", "no_sc"),
                         ("pse_aec", "sc"))]


def ids(c):
    return c.describe().replace("/", "-")


def emb_for(model):
    return embedding_for("spk001") if model.is_personalized else None


# -- layers -----------------------------------------------------------------

def test_single_affine_count():
    assert param_count(torch.nn.Linear(4, 3)) == 15


def test_temporal_block_zero_identity():
    blk = TemporalBlock(4, 6).double()
    for name, p in blk.named_parameters():
        if "bias" in name:
            torch.nn.init.zeros_(p)
    x = torch.zeros(1, 5, 4, dtype=torch.float64)
    y, _ = blk(x)
    assert torch.equal(y, x)


def test_temporal_block_causal():
    torch.manual_seed(0)
    blk = TemporalBlock(4, 6)
    x = torch.randn(1, 8, 4)
    x2 = x.clone()
    x2[:, 5:] = torch.randn(1, 3, 4)
    y, _ = blk(x)
    y2, _ = blk(x2)
    assert torch.equal(y[:, :5], y2[:, :5])


def test_temporal_block_state_continues_sequence():
    torch.manual_seed(0)
    blk = TemporalBlock(4, 6)
    x = torch.randn(2, 9, 4)
    full, _ = blk(x)
    a, st_ = blk(x[:, :4])
    b, _ = blk(x[:, 4:], st_)
    torch.testing.assert_close(torch.cat([a, b], 1), full)


def test_align_uniform_when_frames_equal():
    torch.manual_seed(0)
    blk = AlignBlock(5, 3, 4, window=6)
    frame = torch.randn(1, 1, 3)
    state = AlignState(frame.expand(1, 6, 3).clone())
    _, w, _ = blk(torch.randn(1, 1, 5), frame, state)
    torch.testing.assert_close(w, torch.full_like(w, 1 / 6))


def test_align_constructed_key_argmax():
    D = 8
    blk = AlignBlock(D, D, D, window=D).double()
    with torch.no_grad():
        blk.query.weight.copy_(torch.eye(D))
        blk.key.weight.copy_(torch.eye(D))
    # far-end frame at delay d is 10 * e_d
    far = torch.zeros(1, D, D, dtype=torch.float64)
    for t in range(D):
        far[0, t, D - 1 - t] = 10.0
    for k in range(D):
        q = torch.zeros(1, D, D, dtype=torch.float64)
        q[0, -1, k] = 10.0
        _, w, _ = blk(q, far)
        assert int(w[0, -1].argmax()) == k


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), T=st.integers(1, 6))
def test_align_weights_sum_to_one(seed, T):
    g = torch.Generator().manual_seed(seed)
    blk = AlignBlock(4, 3, 5, window=7)
    _, w, _ = blk(torch.randn(2, T, 4, generator=g), torch.randn(2, T, 3, generator=g))
    assert torch.all(w >= 0)
    torch.testing.assert_close(w.sum(-1), torch.ones(2, T), atol=1e-6, rtol=0)


def test_align_single_step_matches_block():
    torch.manual_seed(1)
    blk = AlignBlock(4, 3, 5, window=6).double()
    mic = torch.randn(1, 5, 4, dtype=torch.float64)
    far = torch.randn(1, 5, 3, dtype=torch.float64)
    aligned, w, _ = blk(mic, far)
    state = AlignState.empty(1, 6, 3, torch.float64)
    for t in range(5):
        state.push(far[:, t])
        a_t, w_t = align_attention(blk, mic[:, t], state)
        torch.testing.assert_close(a_t, aligned[:, t])
        torch.testing.assert_close(w_t, w[:, t])


def test_encoder_zero_in_zero_out():
    enc = LearnableEncoder(8, 5)
    assert torch.all(enc(torch.zeros(1, 2, 8)) == 0)


def test_mask_head_range():
    head = MaskHead(4, 6)
    m = head(torch.randn(3, 2, 4) * 100)
    assert torch.all((m >= 0) & (m <= 1))


# -- gradient checks against central differences ------------------------------

def test_gradcheck_temporal_block():
    torch.manual_seed(0)
    blk = TemporalBlock(4, 6).double()
    x = torch.randn(1, 3, 4, dtype=torch.float64, requires_grad=True)
    err = max_rel_error(lambda: blk(x)[0].pow(2).sum(), [x] + list(blk.parameters()))
    assert err < 1e-3


def test_gradcheck_align_attention():
    torch.manual_seed(0)
    blk = AlignBlock(4, 3, 5, window=6).double()
    q = torch.randn(2, 4, dtype=torch.float64, requires_grad=True)
    frames = torch.randn(2, 6, 3, dtype=torch.float64, requires_grad=True)

    def f():
        a, w = align_attention(blk, q, AlignState(frames))
        return (a * torch.arange(1.0, 4.0, dtype=torch.float64)).sum() + (w ** 2).sum()
    assert max_rel_error(f, [q, frames] + list(blk.parameters())) < 1e-3


def test_gradcheck_mask_head():
    torch.manual_seed(0)
    head = MaskHead(4, 3).double()
    x = torch.randn(2, 4, dtype=torch.float64, requires_grad=True)
    assert max_rel_error(lambda: (head(x) ** 2).sum(), [x] + list(head.parameters())) < 1e-3


def test_gradcheck_encoder_decoder():
    torch.manual_seed(0)
    enc, dec = LearnableEncoder(6, 5).double(), LearnableDecoder(5, 6).double()
    x = torch.randn(2, 6, dtype=torch.float64, requires_grad=True)
    # keep every pre-activation away from the ReLU kink
    with torch.no_grad():
        pre = enc.proj(x)
        enc.proj.weight[pre.abs().min(0).values < 0.05] *= -1.5
    assert (enc.proj(x).abs() > 1e-3).all()

    def f():
        return (dec(enc(x)) ** 2).sum()
    assert max_rel_error(f, [x, enc.proj.weight, dec.proj.weight]) < 1e-3


# -- full model ---------------------------------------------------------------

@pytest.mark.parametrize("config", ALL_TINY, ids=ids)
def test_zero_mic_gives_silence(config):
    model = build_model(config, seed=0)
    out = forward_full(model, np.zeros(1600), np.zeros(1600), emb_for(model))
    assert np.sqrt(np.mean(out ** 2)) < 1e-6
    if model.has_bypass:
        assert np.sqrt(np.mean(forward_bypass(model, np.zeros(1600), np.zeros(1600)) ** 2)) < 1e-6


@pytest.mark.parametrize("variant", ["e3net", "vfl"])
def test_pse_ignores_farend(rng, variant):
    model = build_model(tiny_config(variant=variant, task="pse"), seed=0)
    mic = rng.standard_normal(2000) * 0.1
    e = embedding_for("a")
    np.testing.assert_array_equal(forward_full(model, mic, rng.standard_normal(2000), e),
                                  forward_full(model, mic, None, e))


def test_output_length_matches_input(rng):
    model = build_model(tiny_config(), seed=0)
    for n in (100, 320, 321, 1234):
        out = forward_full(model, rng.standard_normal(n), rng.standard_normal(n), embedding_for("a"))
        assert out.shape == (n,)


def test_naive_has_no_align_or_bypass():
    model = build_model(tiny_config(ablation="naive"), seed=0)
    assert not hasattr(model, "align")
    with pytest.raises(ValueError):
        forward_bypass(model, np.zeros(640), np.zeros(640))


def test_aec_model_ignores_embedding_and_pse_requires_one(rng):
    aec = build_model(tiny_config(task="aec"), seed=0)
    mic, far = rng.standard_normal(640), rng.standard_normal(640)
    np.testing.assert_array_equal(forward_full(aec, mic, far, embedding_for("a")), forward_full(aec, mic, far))
    pse = build_model(tiny_config(task="pse"), seed=0)
    with pytest.raises(ValueError):
        forward_full(pse, np.zeros(640))


@pytest.mark.parametrize("variant", ["e3net", "vfl"])
def test_bypass_independent_of_stage2(rng, variant):
    model = build_model(tiny_config(variant=variant), seed=0)
    mic, far = rng.standard_normal(3200) * 0.1, rng.standard_normal(3200) * 0.1
    before = forward_bypass(model, mic, far)
    with torch.no_grad():
        for p in model.stage2_parameters().values():
            p.normal_()
    np.testing.assert_array_equal(forward_bypass(model, mic, far), before)


@pytest.mark.parametrize("config", ALL_TINY, ids=ids)
def test_causality_grid(config):
    model = build_model(config, seed=0)
    paths = ["full", "bypass"] if model.has_bypass else ["full"]
    for path in paths:
        assert causality_check(model, trials=3, seed=1, path=path) < 1e-6


@pytest.mark.parametrize("variant", ["e3net", "vfl"])
def test_causality_any_cut(variant):
    model = build_model(tiny_config(variant=variant), seed=0)
    assert causality_check(model, trials=5, seed=2, grid_aligned=False) < 1e-6


def test_protected_end_formula():
    assert protected_end(319, 320, 160) == 159
    for t in range(5):
        n = t * 160 + 319
        assert protected_end(n, 320, 160) == n - 160
    # between grid points the boundary stays at the previous grid value
    assert protected_end(400, 320, 160) == 159


def test_sc_adds_small_param_delta():
    sc = param_count(build_model(ModelConfig(ablation="sc"), seed=0))
    no_sc = param_count(build_model(ModelConfig(ablation="no_sc"), seed=0))
    assert 0 < sc - no_sc < 0.02 * sc


def test_build_model_seeded():
    a = build_model(tiny_config(), seed=3).state_dict()
    b = build_model(tiny_config(), seed=3).state_dict()
    assert all(torch.equal(a[k], b[k]) for k in a)


# -- streaming ----------------------------------------------------------------

@pytest.mark.parametrize("config", [tiny_config(), tiny_config(variant="vfl"), tiny_config(task="aec")],
                         ids=ids)
def test_streaming_matches_offline(rng, config):
    model = build_model(config, seed=0)
    n = 160 * 37 + 55
    mic, far = rng.standard_normal(n) * 0.1, rng.standard_normal(n) * 0.1
    e = emb_for(model)
    offline = forward_full(model, mic, far, e)
    whole = enhance_streaming(model, [mic], [far], e)
    np.testing.assert_allclose(whole, offline, atol=1e-6)
    chunks = list(range(0, n, 160))
    hop = enhance_streaming(model, [mic[i:i + 160] for i in chunks], [far[i:i + 160] for i in chunks], e)
    assert len(hop) == n
    assert np.sqrt(np.mean((hop - offline) ** 2)) < 1e-5


def test_streaming_sessions_independent(rng):
    model = build_model(tiny_config(), seed=0)
    a = [rng.standard_normal(1600) * 0.1 for _ in range(2)]
    b = [rng.standard_normal(1600) * 0.1 for _ in range(2)]
    e = embedding_for("a")
    first = enhance_streaming(model, [a[0]], [a[1]], e)
    enhance_streaming(model, [b[0]], [b[1]], e)
    np.testing.assert_array_equal(enhance_streaming(model, [a[0]], [a[1]], e), first)


def test_streaming_rejects_ragged_chunk():
    model = build_model(tiny_config(), seed=0)
    s = StreamingSession(model, embedding_for("a"))
    with pytest.raises(ValueError, match="multiple of the hop"):
        s.process(np.zeros(100), np.zeros(100))


def test_bypass_streaming(rng):
    model = build_model(tiny_config(), seed=0)
    mic, far = rng.standard_normal(3000) * 0.1, rng.standard_normal(3000) * 0.1
    np.testing.assert_allclose(enhance_streaming(model, [mic], [far], path="bypass"),
                               forward_bypass(model, mic, far), atol=1e-6)


# -- checkpoints --------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    model = build_model(tiny_config(variant="vfl"), seed=5)
    path = save_model(model, tmp_path / "m.ckpt", extra={"x": np.arange(3.0)}, meta={"note": "hi"})
    back, extra, meta = load_model(path)
    assert back.config == model.config
    assert param_count(back) == param_count(model)
    for k, v in model.state_dict().items():
        assert torch.equal(v, back.state_dict()[k])
    np.testing.assert_array_equal(extra["x"], np.arange(3.0))
    assert meta == {"note": "hi"}


def test_checkpoint_version_mismatch(tmp_path):
    path = save_model(build_model(tiny_config(), seed=0), tmp_path / "m.ckpt")
    raw = bytearray(path.read_bytes())
    raw[8:12] = struct.pack("<I", 99)
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="version 99"):
        load_model(path)


def test_checkpoint_bad_magic_and_truncation(tmp_path):
    p = tmp_path / "junk.ckpt"
    p.write_bytes(b"not a checkpoint at all")
    with pytest.raises(CheckpointError, match="magic"):
        load_model(p)
    path = save_model(build_model(tiny_config(), seed=0), tmp_path / "m.ckpt")
    path.write_bytes(path.read_bytes()[:-100])
    with pytest.raises(CheckpointError, match="past end"):
        load_model(path)


def test_checkpoint_rejects_nan(tmp_path):
    model = build_model(tiny_config(), seed=0)
    with torch.no_grad():
        model.mask_head.proj.bias[0] = float("nan")
    with pytest.raises(CheckpointError):
        save_model(model, tmp_path / "m.ckpt")
    assert not (tmp_path / "m.ckpt").exists()


def test_config_round_trip_and_validation():
    c = tiny_config(variant="vfl", ablation="no_sc")
    assert ModelConfig.from_dict(c.to_dict()) == c
    with pytest.raises(ValueError):
        ModelConfig(task="pse", ablation="sc")
    with pytest.raises(ValueError):
        ModelConfig.from_dict({"bogus": 1})
    with pytest.raises(ValueError):
        ModelConfig(variant="vfl", hop=100)
