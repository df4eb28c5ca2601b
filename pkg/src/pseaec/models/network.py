"""Causal joint PSE-AEC networks in two families.

``e3net`` works on a learned time-domain filterbank, ``vfl`` on power-law
compressed STFT magnitudes. Both share one layout::

    mic / far-end features -> align-block -> stage 1 (N1 temporal layers)
        -> [N1 output, speaker embedding, attention weights] -> stage 2 (N2)
        -> mask head -> masked mic features -> reconstruction

The bypass path sends the stage-1 output straight into the shared mask head.
"""
from collections import OrderedDict

import numpy as np
import torch
import torch.nn as nn

from ..dsp import StftParams, frame_signal, num_frames, overlap_add, power_law_compress, safe_abs
from ..embedding import SpeakerEmbedding
from .config import ModelConfig
from .layers import AlignBlock, LearnableDecoder, LearnableEncoder, MaskHead, TemporalBlock

PATHS = ("full", "bypass")


class PseAecModel(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        c = self.config = config
        self.stft_params = StftParams(c.win, c.hop, c.win)
        if c.variant == "e3net":
            self.mic_encoder = LearnableEncoder(c.win, c.F_mic)
            if c.has_far:
                self.far_encoder = LearnableEncoder(c.win, c.F_far)
            self.decoder = LearnableDecoder(c.F_mic, c.win)
            mic_dim, far_dim, width = c.F_mic, c.F_far, c.f_emb
        else:
            mic_dim = far_dim = self.stft_params.n_bins
            width = c.vfl_hidden
            self.register_buffer("window", self.stft_params.window(), persistent=False)
        self.mic_dim, self.far_dim, self.width = mic_dim, far_dim, width

        if c.has_align:
            self.align = AlignBlock(mic_dim, far_dim, c.align_dim, c.align_window)
        in1 = mic_dim + (far_dim if c.has_far else 0) + (c.emb_dim if c.is_naive else 0)
        if c.is_naive:
            in2 = width
        else:
            in2 = width + (c.emb_dim if c.is_personalized else 0) \
                + (c.align_window if c.has_attention_skip else 0)

        if c.variant == "e3net":
            self.proj1 = nn.Linear(in1, width)
            self.blocks1 = nn.ModuleList(TemporalBlock(width, c.f_emb_hid) for _ in range(c.N1))
            if not c.is_naive:
                self.proj2 = nn.Linear(in2, width)
            self.blocks2 = nn.ModuleList(TemporalBlock(width, c.f_emb_hid) for _ in range(c.N2))
        else:
            self.rnn1 = nn.LSTM(in1, width, c.N1, batch_first=True)
            self.rnn2 = nn.LSTM(in2, width, c.N2, batch_first=True)
        self.mask_head = MaskHead(width, mic_dim)

    # -- properties ---------------------------------------------------------

    @property
    def has_bypass(self):
        return self.config.has_bypass

    @property
    def is_personalized(self):
        return self.config.is_personalized

    @property
    def dtype(self):
        return self.mask_head.proj.weight.dtype

    def stage2_parameters(self):
        """Parameters that only the full path touches (stage 2 and its input projection)."""
        names = ("blocks2", "rnn2", "proj2")
        return OrderedDict((n, p) for n, p in self.named_parameters() if n.split(".")[0] in names)

    # -- building blocks ----------------------------------------------------

    def analyze(self, mic_frames, far_frames):
        """Frame-wise features; also returns what the reconstruction needs."""
        c = self.config
        if c.variant == "e3net":
            mic_feat = self.mic_encoder(mic_frames)
            far_feat = self.far_encoder(far_frames) if c.has_far else None
            return mic_feat, far_feat, mic_feat
        n_fft = self.stft_params.fft_size
        mic_spec = torch.fft.rfft(mic_frames * self.window, n=n_fft, dim=-1)
        mic_feat = power_law_compress(safe_abs(mic_spec), c.compress_p)
        far_feat = None
        if c.has_far:
            far_spec = torch.fft.rfft(far_frames * self.window, n=n_fft, dim=-1)
            far_feat = power_law_compress(safe_abs(far_spec), c.compress_p)
        return mic_feat, far_feat, mic_spec

    def synthesize(self, mask, aux):
        """Masked features back to time-domain frames ``[B, T, win]``."""
        if self.config.variant == "e3net":
            return self.decoder(mask * aux)
        frames = torch.fft.irfft(mask * aux, n=self.stft_params.fft_size, dim=-1)
        return frames[..., : self.config.win] * self.window

    def _stage(self, which, h, states):
        c = self.config
        if c.variant == "e3net":
            blocks = self.blocks1 if which == 1 else self.blocks2
            new = []
            for blk, st in zip(blocks, states or [None] * len(blocks)):
                h, st = blk(h, st)
                new.append(st)
            return h, new
        rnn = self.rnn1 if which == 1 else self.rnn2
        h, st = rnn(h, states)
        return h, st

    def core(self, mic_feat, far_feat, emb=None, path="full", state=None):
        """Features ``[B, T, *]`` to a mask ``[B, T, mic_dim]``.

        ``state`` carries recurrent and align-block memory between calls; the
        returned state continues the sequence. Also returns attention weights
        (``None`` without an align-block).
        """
        c = self.config
        state = dict(state or {})
        B, T, _ = mic_feat.shape
        parts = [mic_feat]
        weights = None
        if c.has_far:
            if c.has_align:
                aligned, weights, state["align"] = self.align(mic_feat, far_feat, state.get("align"))
                parts.append(aligned)
            else:
                parts.append(far_feat)
        if c.is_naive:
            parts.append(emb[:, None].expand(B, T, -1))
        h = torch.cat(parts, dim=-1)
        if c.variant == "e3net":
            h = self.proj1(h)
        h, state["s1"] = self._stage(1, h, state.get("s1"))
        if path == "bypass":
            return self.mask_head(h), weights, state

        if not c.is_naive:
            parts = [h]
            if c.is_personalized:
                parts.append(emb[:, None].expand(B, T, -1))
            if c.has_attention_skip:
                parts.append(weights)
            h = torch.cat(parts, dim=-1)
            if c.variant == "e3net":
                h = self.proj2(h)
        h, state["s2"] = self._stage(2, h, state.get("s2"))
        return self.mask_head(h), weights, state

    # -- entry points -------------------------------------------------------

    def check_path(self, path, emb):
        if path not in PATHS:
            raise ValueError(f"path must be one of {PATHS}, got {path!r}")
        if path == "bypass" and not self.has_bypass:
            raise ValueError(f"{self.config.describe()} model has no bypass path")
        if path == "full" and self.is_personalized and emb is None:
            raise ValueError(f"{self.config.describe()} model needs a speaker embedding")

    def prepare_embedding(self, emb, batch):
        if emb is None or not self.is_personalized:
            return None
        if isinstance(emb, SpeakerEmbedding):
            emb = emb.vector
        if isinstance(emb, (list, tuple)) and emb and isinstance(emb[0], SpeakerEmbedding):
            emb = np.stack([e.vector for e in emb])
        emb = torch.as_tensor(np.asarray(emb) if not isinstance(emb, torch.Tensor) else emb,
                              dtype=self.dtype)
        if emb.dim() == 1:
            emb = emb[None].expand(batch, -1)
        if emb.shape != (batch, self.config.emb_dim):
            raise ValueError(f"embedding shape {tuple(emb.shape)} does not match batch {batch}")
        return emb

    def forward(self, mic, far=None, emb=None, path="full", return_weights=False):
        """``mic``/``far`` are ``[B, L]`` tensors; returns the enhanced ``[B, L]``."""
        self.check_path(path, emb)
        c = self.config
        if far is None:
            far = torch.zeros_like(mic)
        if far.shape != mic.shape:
            raise ValueError(f"mic {tuple(mic.shape)} and far-end {tuple(far.shape)} differ in length")
        B, L = mic.shape
        emb = self.prepare_embedding(emb, B)
        if num_frames(L, c.win, c.hop) == 0:
            out = torch.zeros_like(mic)
            return (out, None) if return_weights else out
        mic_frames = frame_signal(mic, c.win, c.hop)
        far_frames = frame_signal(far, c.win, c.hop) if c.has_far else None
        mic_feat, far_feat, aux = self.analyze(mic_frames, far_frames)
        mask, weights, _ = self.core(mic_feat, far_feat, emb, path)
        out = overlap_add(self.synthesize(mask, aux), c.hop, L)
        return (out, weights) if return_weights else out


def build_model(config, seed=0):
    """Deterministically initialised model; the global torch RNG is left untouched."""
    if isinstance(config, dict):
        config = ModelConfig.from_dict(config)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return PseAecModel(config)


def param_count(model):
    return sum(p.numel() for p in model.parameters())


def param_breakdown(model):
    out = OrderedDict()
    for name, p in model.named_parameters():
        key = name.split(".")[0]
        out[key] = out.get(key, 0) + p.numel()
    return out


def _to_batch(x, dtype):
    was_numpy = not isinstance(x, torch.Tensor)
    t = torch.as_tensor(np.asarray(x) if was_numpy else x, dtype=dtype)
    single = t.dim() == 1
    return (t[None] if single else t), was_numpy, single


def _run(model, mic, farend, emb, path):
    m, was_numpy, single = _to_batch(mic, model.dtype)
    f = None if farend is None else _to_batch(farend, model.dtype)[0]
    if f is not None and f.shape != m.shape:
        raise ValueError(f"mic and far-end lengths differ: {m.shape[-1]} vs {f.shape[-1]}")
    out = model(m, f, emb, path=path)
    if single:
        out = out[0]
    return out.detach().numpy() if was_numpy else out


def forward_full(model, mic, farend=None, emb=None):
    return _run(model, mic, farend, emb, "full")


def forward_bypass(model, mic, farend=None):
    if not model.has_bypass:
        raise ValueError(f"{model.config.describe()} model has no bypass path")
    return _run(model, mic, farend, None, "bypass")
