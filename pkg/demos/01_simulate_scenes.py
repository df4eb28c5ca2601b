"""Render one scene of each evaluation scenario and check the mixing ratios.

Every scene is built from a target talker plus whatever the scenario adds:
a competing talker, background noise, and an echo of a far-end talker
played through a loudspeaker. The simulator scales each distractor so the
requested ratio holds over the samples where the target is active, so
re-measuring the rendered stems should give the requested numbers back.

    python3 demos/01_simulate_scenes.py [out_dir]
"""
import sys
from pathlib import Path

from pseaec.metrics import achieved_ratio
from pseaec.scene import ScenarioKind, make_scenario_set, write_manifest

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_scenes")

for kind in ScenarioKind:
    (s,) = make_scenario_set(kind, 1, seed=0, duration=4.0)
    spec = s.spec
    print(f"{kind.value:<9} interferer={spec.has_interferer!s:<5} noise={spec.has_noise!s:<5} "
          f"echo={spec.has_echo!s:<5}" + (f" delay={spec.echo_delay / 16:.0f} ms" if spec.has_echo else ""))
    tgt = s.stems["target"]
    for name, want, on in (("SIR", spec.sir_db, spec.has_interferer), ("SNR", spec.snr_db, spec.has_noise),
                           ("SER", spec.ser_db, spec.has_echo)):
        if on:
            stem = {"SIR": "interferer", "SNR": "noise", "SER": "echo"}[name]
            print(f"    {name} requested {want:6.2f} dB, measured {achieved_ratio(tgt, s.stems[stem]):6.2f} dB")
    path = write_manifest([s], out, kind.value)
    print(f"    wrote {path}")
