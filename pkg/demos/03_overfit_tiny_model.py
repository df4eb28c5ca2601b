"""Train the desk-scale model on a small fixed pool and score it.

Training cycles through three kinds of mini-batch: echo-only batches without
a speaker embedding (routed through the bypass output), personalized batches
with a silent far-end, and joint batches with both. With a fixed 170 ms echo
delay the align-block has a single lag to discover.

    python3 demos/03_overfit_tiny_model.py [steps] [run_dir]
"""
import sys
from dataclasses import replace

import numpy as np

from pseaec.embedding import embedding_for
from pseaec.metrics import erle, fst_frames, si_sdr, tsos
from pseaec.models import forward_bypass, forward_full, load_model, tiny_config
from pseaec.scene import make_training_pool, render_scene
from pseaec.train import TrainConfig, read_loss_log, train

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 600
run_dir = sys.argv[2] if len(sys.argv) > 2 else "demo_run"

pool = make_training_pool(8, seed=1, duration=3.0, echo_delay=17 * 160)
cfg = TrainConfig(steps=steps, batch_size=2, lr=3e-3, seed=0, model=tiny_config(), out_dir=run_dir)
ckpt = train(cfg, pool=pool)

losses = [r["loss"] for r in read_loss_log(f"{run_dir}/logs/loss.jsonl")]
k = min(100, len(losses) // 2)
print(f"loss: first {k} steps {np.mean(losses[:k]):.4f}, last {k} steps {np.mean(losses[-k:]):.4f}")

model, _, _ = load_model(ckpt)
echo_only = next(s for s in pool if s.spec.has_echo and not s.spec.has_interferer)
mask = fst_frames(echo_only.target_ref, echo_only.stems["echo"])
print(f"bypass ERLE on far-end single talk: {erle(echo_only.mic, forward_bypass(model, echo_only.mic, echo_only.farend), mask):.1f} dB")

busy = next(s for s in pool if s.spec.has_echo and s.spec.has_interferer)
out = forward_full(model, busy.mic, busy.farend, embedding_for(busy.spec.speaker_id))
print(f"SI-SDR on echo + interferer scene: mic {si_sdr(busy.target_ref, busy.mic):.1f} dB, "
      f"enhanced {si_sdr(busy.target_ref, out):.1f} dB")

clean = next(s for s in pool if not s.spec.has_echo and not s.spec.has_interferer)
solo = render_scene(replace(clean.spec, snr_db=float("inf")))
out = forward_full(model, solo.mic, None, embedding_for(solo.spec.speaker_id))
print(f"target over-suppression on a target-only scene: {tsos(solo.target_ref, out):.2f} of active frames")
