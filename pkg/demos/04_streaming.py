"""Frame-by-frame streaming against the offline forward pass.

A streaming session keeps the recurrent state, the align-block history and
the overlap-add tail between calls, so feeding 10 ms chunks must reproduce
the whole-signal output. Each call returns only samples that later input
can no longer change.

    python3 demos/04_streaming.py
"""
import numpy as np

from pseaec.embedding import embedding_for
from pseaec.models import StreamingSession, build_model, forward_full, tiny_config
from pseaec.scene import make_scenario_set

(s,) = make_scenario_set("ts1-echo", 1, seed=3, duration=2.0)
model = build_model(tiny_config(), seed=0)
emb = embedding_for(s.spec.speaker_id)

offline = forward_full(model, s.mic, s.farend, emb)

session = StreamingSession(model, emb)
hop = model.config.hop
pieces = []
for start in range(0, len(s.mic), hop):
    chunk = session.process(s.mic[start:start + hop], s.farend[start:start + hop],
                            final=start + hop >= len(s.mic))
    pieces.append(chunk)
pieces.append(session.finish())
streamed = np.concatenate(pieces)

print(f"samples in {len(s.mic)}, out {len(streamed)}")
print(f"first call returned {len(pieces[0])} samples, later calls {len(pieces[2])} each")
print(f"RMS difference to offline: {np.sqrt(np.mean((streamed - offline) ** 2)):.2e}")
