"""Acoustic scene synthesis: room impulse responses, surrogate sources,
ratio-controlled mixing, evaluation scenario sets and training pools."""
import enum
import hashlib
import json
import math
import os
import tempfile
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
from scipy.signal import fftconvolve

from .dsp import SAMPLE_RATE, read_wav, write_wav
from .metrics import active_samples

SPEED_OF_SOUND = 343.0
EARLY_MS = 50.0
ACTIVITY_DBFS = -60.0

TRAIN_SNR = (0.0, 15.0)
TRAIN_SER = (-20.0, 40.0)
TRAIN_SIR = (0.0, 10.0)
EVAL_SNR = (0.0, 15.0)
EVAL_SER = (0.0, 15.0)
EVAL_SIR = (0.0, 10.0)
MAX_ECHO_DELAY = int(0.5 * SAMPLE_RATE)


def _stable_hash(text):
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little")


def _rng(*keys):
    return np.random.default_rng(np.random.SeedSequence([int(k) % 2**63 for k in keys]))


# ---------------------------------------------------------------------------
# room impulse responses


@dataclass
class Rir:
    taps: np.ndarray
    direct_delay: int
    rt60: float

    def early(self, ms=EARLY_MS):
        """Taps up to ``ms`` after the direct path."""
        return self.taps[: self.direct_delay + int(round(ms * SAMPLE_RATE / 1000)) + 1]


def direct_delay_samples(distance):
    return int(round(distance / SPEED_OF_SOUND * SAMPLE_RATE))


def synth_rir(seed, rt60, distance):
    """Direct impulse at the propagation delay followed by a sparse, exponentially
    decaying noise tail whose energy falls 60 dB over ``rt60`` seconds."""
    if not 0.1 <= rt60 <= 1.0:
        raise ValueError(f"rt60 must be in [0.1, 1.0] s, got {rt60}")
    if not distance >= 0:
        raise ValueError(f"distance must be >= 0, got {distance}")
    rng = _rng(seed, 0x515)
    delay = direct_delay_samples(distance)
    tail_len = int(rt60 * SAMPLE_RATE)
    gap = int(rng.integers(16, 80))
    taps = np.zeros(delay + gap + tail_len)
    taps[delay] = 1.0

    t = np.arange(tail_len) / SAMPLE_RATE
    # amplitude decays 60 dB (a factor 1000) over rt60
    env = np.exp(-3 * np.log(10) * t / rt60)
    sparse = rng.standard_normal(tail_len) * (rng.random(tail_len) < 0.3)
    tail = env * sparse
    # direct-to-reverberant ratio falls 20 dB per decade of distance past the
    # critical distance; clamped to [-10, 20] dB
    critical = 0.4 / np.sqrt(rt60)
    drr_db = np.clip(20 * np.log10(critical / max(distance, 1e-3)), -10.0, 20.0)
    energy = np.sum(tail ** 2)
    if energy > 0:
        tail *= np.sqrt(10 ** (-drr_db / 10) / energy)
    taps[delay + gap:] = np.clip(tail, -0.9, 0.9)
    return Rir(taps=taps, direct_delay=delay, rt60=float(rt60))


def estimate_rt60(taps, start=None, fit_db=(-5.0, -25.0)):
    """Schroeder backward-integration estimate, extrapolated from a T20 fit."""
    taps = np.asarray(taps, dtype=np.float64)
    if start is None:
        start = int(np.argmax(np.abs(taps)))
    h = taps[start + 1:]
    edc = np.cumsum((h ** 2)[::-1])[::-1]
    edc_db = 10 * np.log10(edc / edc[0] + 1e-300)
    hi, lo = fit_db
    idx = np.where((edc_db <= hi) & (edc_db >= lo))[0]
    if len(idx) < 2:
        raise ValueError("impulse response too short to fit a decay slope")
    slope, _ = np.polyfit(idx / SAMPLE_RATE, edc_db[idx], 1)
    return -60.0 / slope


def rir_from_wav(path):
    taps = read_wav(path)
    delay = int(np.argmax(np.abs(taps)))
    return Rir(taps=taps, direct_delay=delay, rt60=estimate_rt60(taps, delay))


# ---------------------------------------------------------------------------
# sources

ROLES = ("target", "interferer", "farend", "noise")


def speaker_f0(speaker_id):
    """Fundamental in [80, 300) Hz fixed by the identifier."""
    return 80.0 + 220.0 * (_stable_hash("f0:" + speaker_id) / 2**64)


def _speech(rng, speaker_id, n):
    f0 = speaker_f0(speaker_id)
    h = _stable_hash("formants:" + speaker_id)
    formants = (300 + (h % 500), 900 + ((h >> 12) % 1200), 2200 + ((h >> 24) % 1000))

    out = np.zeros(n)
    pos = int(rng.uniform(0.05, 0.3) * SAMPLE_RATE)
    while pos < n:
        talk = int(rng.uniform(0.3, 1.2) * SAMPLE_RATE)
        gap = int(rng.uniform(0.2, 0.7) * SAMPLE_RATE)
        stop = min(n, pos + talk)
        m = stop - pos
        if m > 32:
            t = np.arange(m) / SAMPLE_RATE
            # intonation: slow drift plus declination over the talkspurt
            contour = f0 * (1 + 0.06 * np.sin(2 * np.pi * rng.uniform(0.5, 2) * t + rng.uniform(0, 6.3))
                            - 0.05 * t / max(t[-1], 1e-3))
            phase = 2 * np.pi * np.cumsum(contour) / SAMPLE_RATE
            burst = np.zeros(m)
            for k in range(1, int(7000 / f0) + 1):
                fk = k * f0
                amp = sum(np.exp(-((fk - fm) / (0.12 * fm + 60)) ** 2) for fm in formants) + 0.02
                burst += amp / np.sqrt(k) * np.sin(k * phase)
            syl = rng.uniform(2, 8)
            am = 0.55 - 0.45 * np.cos(2 * np.pi * syl * t + rng.uniform(0, 6.3))
            ramp = np.minimum(1.0, np.minimum(t, t[-1] - t) / 0.01)
            out[pos:stop] = burst * am * ramp
        pos = stop + gap

    # at least a quarter of the 20 ms frames must be true silence
    frame = SAMPLE_RATE // 50
    n_frames = n // frame
    blocks = out[: n_frames * frame].reshape(n_frames, frame)
    silent = ~np.any(blocks != 0, axis=1)
    need = int(np.ceil(0.25 * n_frames)) - int(silent.sum())
    for j in range(n_frames - 1, -1, -1):
        if need <= 0:
            break
        if not silent[j]:
            blocks[j] = 0.0
            need -= 1
    return out


def _noise(rng, n):
    spec = rng.standard_normal(n // 2 + 1) + 1j * rng.standard_normal(n // 2 + 1)
    freqs = np.fft.rfftfreq(n, 1 / SAMPLE_RATE)
    beta = rng.uniform(0.5, 1.5)
    shape = 1.0 / np.maximum(freqs, 50.0) ** (beta / 2)
    x = np.fft.irfft(spec * shape, n=n)
    t = np.arange(n) / SAMPLE_RATE
    return x * (1 + 0.3 * np.sin(2 * np.pi * rng.uniform(0.1, 1.0) * t))


def surrogate_source(role, source_id, duration, seed=0):
    """Deterministic stand-in audio for a source role, RMS-normalised to 0.1.

    Speech roles give a harmonic complex with a speaker-specific fundamental,
    formant colouring, 2-8 Hz syllabic modulation and silent gaps; the noise
    role gives spectrally tilted, slowly modulated noise.
    """
    if role not in ROLES:
        raise ValueError(f"unknown source role {role!r}")
    if not duration > 0:
        raise ValueError("duration must be positive")
    n = int(round(duration * SAMPLE_RATE))
    rng = _rng(ROLES.index(role), _stable_hash(source_id), seed)
    x = _noise(rng, n) if role == "noise" else _speech(rng, source_id, n)
    rms = np.sqrt(np.mean(x ** 2))
    return x * (0.1 / rms) if rms > 0 else x


# ---------------------------------------------------------------------------
# scenes


class ScenarioKind(str, enum.Enum):
    TS1 = "ts1"
    TS1_ECHO = "ts1-echo"
    TS2 = "ts2"
    TS2_ECHO = "ts2-echo"
    TS3 = "ts3"

    @property
    def components(self):
        """(interferer, noise, echo) presence."""
        return {
            "ts1": (True, True, False),
            "ts1-echo": (True, True, True),
            "ts2": (False, True, False),
            "ts2-echo": (False, True, True),
            "ts3": (False, False, False),
        }[self.value]


@dataclass(frozen=True)
class SceneSpec:
    duration: float = 20.0
    snr_db: float = math.inf
    ser_db: float = math.inf
    sir_db: float = math.inf
    target_distance: float = 0.5
    interferer_distance: float = 3.0
    has_interferer: bool = False
    has_echo: bool = False
    echo_delay: int = 0
    rt60: float = 0.4
    seed: int = 0
    speaker_id: str = "spk000"
    interferer_id: str | None = None
    farend_id: str | None = None
    echo_distance: float = 0.3

    @property
    def has_noise(self):
        return math.isfinite(self.snr_db)

    def validate(self):
        if not self.duration > 0:
            raise ValueError("duration must be positive")
        if not 0 <= self.target_distance <= 1.3:
            raise ValueError(f"target_distance {self.target_distance} outside [0, 1.3] m")
        if self.has_interferer:
            if not self.interferer_distance > 2:
                raise ValueError(f"interferer_distance {self.interferer_distance} must exceed 2 m")
            if not self.interferer_id:
                raise ValueError("interferer requested but no interferer_id")
            if not math.isfinite(self.sir_db):
                raise ValueError("interferer requested but sir_db is not finite")
        if self.has_echo:
            if not self.farend_id:
                raise ValueError("echo requested but no farend_id")
            if not math.isfinite(self.ser_db):
                raise ValueError("echo requested but ser_db is not finite")
            if self.echo_delay < 0:
                raise ValueError("echo_delay must be >= 0")
        if self.snr_db == -math.inf:
            raise ValueError("snr_db must be finite or +inf (no noise)")

    def to_dict(self):
        return {k: (None if isinstance(v, float) and math.isinf(v) else v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        kw = {k: v for k, v in d.items() if k in names}
        for k in ("snr_db", "ser_db", "sir_db"):
            if kw.get(k, 0.0) is None:
                kw[k] = math.inf
        return cls(**kw)


@dataclass
class Segment:
    start: int
    stop: int
    spec: SceneSpec


@dataclass
class MixtureSample:
    mic: np.ndarray
    farend: np.ndarray
    target_ref: np.ndarray
    spec: SceneSpec
    stems: dict = field(default_factory=dict)
    segments: list = field(default_factory=list)
    id: str = "sample"
    scenario: str = "custom"

    def __len__(self):
        return len(self.mic)


def scale_to_ratio(reference, distractor, ratio_db, threshold_dbfs=ACTIVITY_DBFS):
    """Scale ``distractor`` so reference/distractor energy over the
    reference-active samples equals ``ratio_db``."""
    ref = np.asarray(reference, dtype=np.float64)
    dist = np.asarray(distractor, dtype=np.float64)
    if ref.shape != dist.shape:
        raise ValueError("reference and distractor must have equal length")
    mask = active_samples(ref, threshold_dbfs)
    e_ref = np.sum(ref[mask] ** 2)
    e_dist = np.sum(dist[mask] ** 2)
    if e_ref == 0 or e_dist == 0:
        raise ValueError("scale_to_ratio needs nonzero energy in both signals over the active region")
    gain = np.sqrt(e_ref / (e_dist * 10 ** (ratio_db / 10)))
    return dist * gain


def _reverb(dry, rir, n):
    return fftconvolve(dry, rir)[:n]


def render_scene(spec, sources=surrogate_source):
    """Render mic, far-end and target reference for one scene.

    ``sources(role, id, duration, seed)`` supplies dry audio. The target
    reference keeps only the first 50 ms of the target room response.
    """
    spec.validate()
    n = int(round(spec.duration * SAMPLE_RATE))
    rng = _rng(spec.seed, 0x5CE)
    seeds = rng.integers(0, 2**62, size=8)

    def dry(role, sid, seed):
        x = np.asarray(sources(role, sid, spec.duration, int(seed)), dtype=np.float64)
        if len(x) < n:
            raise ValueError(f"source {role}:{sid} gave {len(x)} samples, need {n}")
        return x[:n]

    rir_t = synth_rir(seeds[0], spec.rt60, spec.target_distance)
    target_dry = dry("target", spec.speaker_id, seeds[1])
    target = _reverb(target_dry, rir_t.taps, n)
    target_ref = _reverb(target_dry, rir_t.early(), n)
    zeros = np.zeros(n)
    stems = {"target": target, "interferer": zeros, "noise": zeros, "echo": zeros}
    farend = zeros.copy()

    if spec.has_interferer:
        rir_i = synth_rir(seeds[2], spec.rt60, spec.interferer_distance)
        x = _reverb(dry("interferer", spec.interferer_id, seeds[3]), rir_i.taps, n)
        stems["interferer"] = scale_to_ratio(target, x, spec.sir_db)
    if spec.has_noise:
        x = dry("noise", f"noise-{spec.seed}", seeds[4])
        stems["noise"] = scale_to_ratio(target, x, spec.snr_db)
    if spec.has_echo:
        farend = dry("farend", spec.farend_id, seeds[5])
        delayed = np.concatenate([np.zeros(spec.echo_delay), farend])[:n]
        rir_e = synth_rir(seeds[6], spec.rt60, spec.echo_distance)
        stems["echo"] = scale_to_ratio(target, _reverb(delayed, rir_e.taps, n), spec.ser_db)

    mic = target.copy()
    for key in ("interferer", "noise", "echo"):
        if key == "interferer" and spec.has_interferer or key == "noise" and spec.has_noise \
                or key == "echo" and spec.has_echo:
            mic = mic + stems[key]
    return MixtureSample(mic=mic, farend=farend, target_ref=target_ref, spec=spec, stems=stems,
                         segments=[Segment(0, n, spec)])


def _speaker(i):
    return f"spk{i:03d}"


def _draw_spec(rng, *, duration, interferer, noise, echo, snr, ser, sir, n_speakers, seed,
               echo_delay=None):
    target = int(rng.integers(n_speakers))
    other = int((target + 1 + rng.integers(n_speakers - 1)) % n_speakers)
    return SceneSpec(
        duration=duration,
        snr_db=float(rng.uniform(*snr)) if noise else math.inf,
        ser_db=float(rng.uniform(*ser)) if echo else math.inf,
        sir_db=float(rng.uniform(*sir)) if interferer else math.inf,
        target_distance=float(rng.uniform(0.0, 1.3)),
        interferer_distance=float(rng.uniform(2.05, 4.0)),
        has_interferer=interferer,
        has_echo=echo,
        echo_delay=int(rng.integers(0, MAX_ECHO_DELAY + 1)) if echo_delay is None else int(echo_delay),
        rt60=float(rng.uniform(0.2, 0.8)),
        seed=seed,
        speaker_id=_speaker(target),
        interferer_id=_speaker(other) if interferer else None,
        farend_id=f"far{int(rng.integers(n_speakers)):03d}" if echo else None,
        echo_distance=float(rng.uniform(0.1, 0.5)),
    )


def make_scenario_specs(kind, count, seed, duration=20.0, n_speakers=109, echo_delay=None):
    kind = ScenarioKind(kind)
    if count < 1:
        raise ValueError("count must be >= 1")
    interferer, noise, echo = kind.components
    specs = []
    for i in range(count):
        rng = _rng(seed, _stable_hash(kind.value), i)
        specs.append(_draw_spec(rng, duration=duration, interferer=interferer, noise=noise, echo=echo,
                                snr=EVAL_SNR, ser=EVAL_SER, sir=EVAL_SIR, n_speakers=n_speakers,
                                seed=int(rng.integers(2**62)), echo_delay=echo_delay))
    return specs


def make_scenario_set(kind, count, seed, duration=20.0, n_speakers=109, echo_delay=None,
                      sources=surrogate_source):
    """Render ``count`` evaluation scenes of one scenario kind."""
    kind = ScenarioKind(kind)
    out = []
    for i, spec in enumerate(make_scenario_specs(kind, count, seed, duration, n_speakers, echo_delay)):
        s = render_scene(spec, sources)
        s.id, s.scenario = f"{kind.value}-{i:05d}", kind.value
        out.append(s)
    return out


def training_components(i):
    """(interferer, echo) for the i-th pool sample.

    Interferers sit on even indices, so exactly ceil(count / 2) samples carry
    one; echo is on indices 0 and 1 mod 4, which keeps every task eligible.
    """
    return i % 2 == 0, i % 4 in (0, 1)


def make_training_specs(count, seed, duration=20.0, n_speakers=109, echo_delay=None):
    if count < 2:
        raise ValueError("training pool needs count >= 2")
    specs = []
    for i in range(count):
        rng = _rng(seed, 0x7241, i)
        interferer, echo = training_components(i)
        specs.append(_draw_spec(rng, duration=duration, interferer=interferer, noise=True, echo=echo,
                                snr=TRAIN_SNR, ser=TRAIN_SER, sir=TRAIN_SIR, n_speakers=n_speakers,
                                seed=int(rng.integers(2**62)), echo_delay=echo_delay))
    return specs


def make_training_pool(count, seed, duration=20.0, n_speakers=109, echo_delay=None,
                       sources=surrogate_source):
    out = []
    for i, spec in enumerate(make_training_specs(count, seed, duration, n_speakers, echo_delay)):
        s = render_scene(spec, sources)
        s.id, s.scenario = f"train-{i:05d}", "train"
        out.append(s)
    return out


def stitch_long(samples):
    """Concatenate scenes of one target speaker, keeping segment boundaries."""
    if not samples:
        raise ValueError("nothing to stitch")
    speakers = {s.spec.speaker_id for s in samples}
    if len(speakers) != 1:
        raise ValueError(f"cannot stitch different target speakers: {sorted(speakers)}")
    if len(samples) == 1:
        return samples[0]
    segments, offset = [], 0
    for s in samples:
        for seg in s.segments or [Segment(0, len(s), s.spec)]:
            segments.append(Segment(seg.start + offset, seg.stop + offset, seg.spec))
        offset += len(s)
    stems = {k: np.concatenate([s.stems[k] for s in samples]) for k in samples[0].stems}
    first = samples[0]
    return MixtureSample(
        mic=np.concatenate([s.mic for s in samples]),
        farend=np.concatenate([s.farend for s in samples]),
        target_ref=np.concatenate([s.target_ref for s in samples]),
        spec=replace(first.spec, duration=offset / SAMPLE_RATE,
                     has_echo=any(s.spec.has_echo for s in samples),
                     has_interferer=any(s.spec.has_interferer for s in samples)),
        stems=stems, segments=segments, id=first.id + "-long", scenario=first.scenario)


# ---------------------------------------------------------------------------
# manifests

STEM_KEYS = ("target", "interferer", "noise", "echo")


def write_manifest(samples, out_dir, name="manifest"):
    """Write WAVs plus a line-delimited JSON manifest; the manifest is renamed into place."""
    out_dir = Path(out_dir)
    audio = out_dir / "audio"
    lines = []
    for s in samples:
        paths = {}
        for key, data in [("mic", s.mic), ("farend", s.farend), ("target_ref", s.target_ref)] + \
                [(f"stem_{k}", s.stems[k]) for k in STEM_KEYS if k in s.stems]:
            rel = Path("audio") / f"{s.id}_{key}.wav"
            write_wav(out_dir / rel, data)
            paths[key] = str(rel)
        record = {
            "id": s.id,
            "scenario": s.scenario,
            "mic": paths["mic"],
            "farend": paths["farend"],
            "target_ref": paths["target_ref"],
            "stems": {k: paths[f"stem_{k}"] for k in STEM_KEYS if f"stem_{k}" in paths},
            "spec": s.spec.to_dict(),
            "segments": [{"start": g.start, "stop": g.stop, "spec": g.spec.to_dict()} for g in s.segments],
        }
        lines.append(json.dumps(record, sort_keys=True))
    audio.mkdir(parents=True, exist_ok=True)
    target = out_dir / f"{name}.jsonl"
    fd, tmp = tempfile.mkstemp(dir=out_dir, prefix=f".{name}.", suffix=".tmp")
    with os.fdopen(fd, "w") as fh:
        fh.write("\n".join(lines) + ("\n" if lines else ""))
    os.replace(tmp, target)
    return target


def read_manifest(path):
    path = Path(path)
    base = path.parent
    out = []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            r = json.loads(line)
            stems = {k: read_wav(base / p) for k, p in r.get("stems", {}).items()}
            out.append(MixtureSample(
                mic=read_wav(base / r["mic"]),
                farend=read_wav(base / r["farend"]),
                target_ref=read_wav(base / r["target_ref"]),
                spec=SceneSpec.from_dict(r["spec"]),
                stems=stems,
                segments=[Segment(g["start"], g["stop"], SceneSpec.from_dict(g["spec"]))
                          for g in r.get("segments", [])],
                id=r["id"], scenario=r["scenario"]))
    return out
