"""Frame-synchronous streaming inference matching the offline forward pass."""
import numpy as np
import torch

from ..dsp import frame_signal, num_frames, overlap_add


class StreamingSession:
    """Private recurrent, align-block and overlap-add state for one stream.

    Feed chunks whose length is a multiple of the hop; each call returns the
    samples that no future input can change. :meth:`finish` returns the rest.
    """

    def __init__(self, model, emb=None, path="full"):
        model.check_path(path, emb)
        self.model = model
        self.path = path
        self.emb = model.prepare_embedding(emb, 1)
        c = model.config
        self.win, self.hop = c.win, c.hop
        self.mic_buf = np.zeros(0)
        self.far_buf = np.zeros(0)
        self.tail = np.zeros(self.win - self.hop)
        self.state = None
        self.received = 0
        self.emitted = 0
        self.finished = False

    def process(self, mic_chunk, far_chunk=None, final=False):
        """``final`` marks the last chunk, which may be any length."""
        if self.finished:
            raise RuntimeError("session already finished")
        mic_chunk = np.asarray(mic_chunk, dtype=np.float64)
        far_chunk = np.zeros_like(mic_chunk) if far_chunk is None else np.asarray(far_chunk, dtype=np.float64)
        if len(mic_chunk) != len(far_chunk):
            raise ValueError("mic and far-end chunks differ in length")
        if len(mic_chunk) % self.hop and not final:
            raise ValueError(f"chunk of {len(mic_chunk)} samples is not a multiple of the hop ({self.hop})")
        self.received += len(mic_chunk)
        self.mic_buf = np.concatenate([self.mic_buf, mic_chunk])
        self.far_buf = np.concatenate([self.far_buf, far_chunk])
        n = num_frames(len(self.mic_buf), self.win, self.hop)
        if n == 0:
            return np.zeros(0)

        model = self.model
        span = (n - 1) * self.hop + self.win
        mic = torch.as_tensor(self.mic_buf[:span], dtype=model.dtype)[None]
        far = torch.as_tensor(self.far_buf[:span], dtype=model.dtype)[None]
        with torch.no_grad():
            mic_frames = frame_signal(mic, self.win, self.hop)
            far_frames = frame_signal(far, self.win, self.hop) if model.config.has_far else None
            mic_feat, far_feat, aux = model.analyze(mic_frames, far_frames)
            mask, _, self.state = model.core(mic_feat, far_feat, self.emb, self.path, self.state)
            frames = model.synthesize(mask, aux)[0].double().numpy()

        acc = overlap_add(frames, self.hop)
        acc[: len(self.tail)] += self.tail
        ready = n * self.hop
        out, self.tail = acc[:ready], acc[ready:]
        self.mic_buf = self.mic_buf[ready:]
        self.far_buf = self.far_buf[ready:]
        self.emitted += ready
        return out

    def finish(self):
        """Flush the overlap-add tail and zero-fill up to the received length."""
        self.finished = True
        rest = self.received - self.emitted
        out = np.zeros(rest)
        k = min(rest, len(self.tail))
        out[:k] = self.tail[:k]
        self.emitted += rest
        return out


def enhance_streaming(model, mic_chunks, farend_chunks=None, emb=None, path="full"):
    """Run a fresh session over the chunks and return the whole enhanced signal.

    Every chunk but the last must be a multiple of the hop.
    """
    if farend_chunks is None:
        farend_chunks = [None] * len(mic_chunks)
    if len(farend_chunks) != len(mic_chunks):
        raise ValueError("mic and far-end chunk lists differ in length")
    session = StreamingSession(model, emb, path)
    out = []
    last = len(mic_chunks) - 1
    for i, (m, f) in enumerate(zip(mic_chunks, farend_chunks)):
        out.append(session.process(m, f, final=i == last))
    out.append(session.finish())
    return np.concatenate(out)
