import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


class LearnableEncoder(nn.Module):
    """Per-frame affine filterbank with a nonnegative activation.

    Bias-free, so an all-zero input frame maps to all-zero features.
    """

    def __init__(self, win, n_filters):
        super().__init__()
        self.proj = nn.Linear(win, n_filters, bias=False)

    def forward(self, frames):
        # [B, T, win] -> [B, T, F]
        return F.relu(self.proj(frames))


class LearnableDecoder(nn.Module):
    def __init__(self, n_filters, win):
        super().__init__()
        self.proj = nn.Linear(n_filters, win, bias=False)

    def forward(self, feats):
        # [B, T, F] -> [B, T, win], overlap-added by the caller
        return self.proj(feats)


class MaskHead(nn.Module):
    def __init__(self, width, out_dim):
        super().__init__()
        self.proj = nn.Linear(width, out_dim)

    def forward(self, x):
        return torch.sigmoid(self.proj(x))


class TemporalBlock(nn.Module):
    """LSTM followed by a PReLU feed-forward pair, layer norm and a residual add.

    The LSTM keeps the block width; ``hidden`` is the feed-forward width.
    """

    def __init__(self, width, hidden):
        super().__init__()
        self.lstm = nn.LSTM(width, width, batch_first=True)
        self.ff_in = nn.Linear(width, hidden)
        self.act = nn.PReLU()
        self.ff_out = nn.Linear(hidden, width)
        self.norm = nn.LayerNorm(width)

    def forward(self, x, state=None):
        y, state = self.lstm(x, state)
        y = self.norm(self.ff_out(self.act(self.ff_in(y))))
        return x + y, state


@dataclass
class AlignState:
    """Last ``window`` far-end feature frames, oldest first; zeros before the start."""
    frames: torch.Tensor  # [B, D, C]
    index: int = 0

    @classmethod
    def empty(cls, batch, window, dim, dtype=torch.float32):
        return cls(torch.zeros(batch, window, dim, dtype=dtype), 0)

    def push(self, frame):
        """Append one frame ``[B, C]`` and drop the oldest."""
        self.frames = torch.cat([self.frames[:, 1:], frame[:, None]], dim=1)
        self.index += 1
        return self


class AlignBlock(nn.Module):
    """Causal source-target attention over the last ``window`` far-end frames.

    Slot ``d`` of the attention weights corresponds to a delay of ``d`` frames.
    """

    def __init__(self, query_dim, key_dim, att_dim, window):
        super().__init__()
        self.window = window
        self.att_dim = att_dim
        self.query = nn.Linear(query_dim, att_dim, bias=False)
        self.key = nn.Linear(key_dim, att_dim, bias=False)

    def forward(self, mic_feat, far_feat, state=None):
        """``mic_feat`` [B, T, Cq], ``far_feat`` [B, T, Ck] -> aligned [B, T, Ck], weights [B, T, D]."""
        B, T, C = far_feat.shape
        D = self.window
        if state is None:
            state = AlignState.empty(B, D, C, far_feat.dtype)
        full = torch.cat([state.frames, far_feat], dim=1)  # [B, D + T, C]
        keys = self.key(full)
        q = self.query(mic_feat)
        scale = 1.0 / math.sqrt(self.att_dim)
        # frame t sits at index D + t of `full`; delay d reads index D + t - d
        scores = torch.stack(
            [(q * keys[:, D - d:D - d + T]).sum(-1) for d in range(D)], dim=-1) * scale
        weights = torch.softmax(scores, dim=-1)
        aligned = sum(weights[..., d:d + 1] * full[:, D - d:D - d + T] for d in range(D))
        new_state = AlignState(full[:, -D:], state.index + T)
        return aligned, weights, new_state


def align_attention(block, mic_feat_t, state):
    """Single-frame attention against a state whose newest frame is the current one.

    ``mic_feat_t`` is [B, Cq]; returns aligned [B, Ck] and weights [B, D].
    """
    frames = state.frames.flip(1)  # slot 0 = newest
    q = block.query(mic_feat_t)
    keys = block.key(frames)
    scores = torch.einsum("ba,bda->bd", q, keys) / math.sqrt(block.att_dim)
    weights = torch.softmax(scores, dim=-1)
    return torch.einsum("bd,bdc->bc", weights, frames), weights
