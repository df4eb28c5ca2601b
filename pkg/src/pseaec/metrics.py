"""Reference-based metrics: ERLE, target over-suppression (TSOS), SI-SDR, and
the achieved mixing ratio used to check the scene simulator."""
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .dsp import frame_signal

CAP_DB = 80.0


@dataclass(frozen=True)
class MetricsParams:
    tsos_threshold_db: float = 10.0
    activity_threshold_dbfs: float = -60.0
    win: int = 320
    hop: int = 160

    def __post_init__(self):
        if not (math.isfinite(self.tsos_threshold_db) and math.isfinite(self.activity_threshold_dbfs)):
            raise ValueError("metric thresholds must be finite")


def _check_lengths(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    return a, b


def _db(num, den):
    if den <= 0:
        return CAP_DB
    if num <= 0:
        return -CAP_DB
    return float(np.clip(10 * np.log10(num / den), -CAP_DB, CAP_DB))


def active_samples(wave, threshold_dbfs=-60.0, block=320):
    """Boolean per-sample activity from the mean-square level of consecutive blocks.

    A trailing partial block is judged on its own samples.
    """
    x = np.asarray(wave, dtype=np.float64)
    n = len(x)
    mask = np.zeros(n, dtype=bool)
    thr = 10 ** (threshold_dbfs / 10)
    for start in range(0, n, block):
        seg = x[start:start + block]
        mask[start:start + block] = np.mean(seg ** 2) > thr
    return mask


def frame_energies(wave, win=320, hop=160):
    """Mean-square energy per analysis frame on the model's causal grid."""
    x = np.asarray(wave, dtype=np.float64)
    return np.mean(frame_signal(x, win, hop) ** 2, axis=-1)


def achieved_ratio(reference_stem, distractor_stem, threshold_dbfs=-60.0):
    """Energy ratio in dB of reference to distractor over reference-active samples."""
    ref, dist = _check_lengths(reference_stem, distractor_stem)
    mask = active_samples(ref, threshold_dbfs)
    e_ref = np.sum(ref[mask] ** 2)
    e_dist = np.sum(dist[mask] ** 2)
    if e_ref == 0:
        raise ValueError("reference stem has no active samples")
    if e_dist == 0:
        raise ValueError("distractor stem has zero energy over the reference-active samples")
    return float(10 * np.log10(e_ref / e_dist))


def fst_frames(target_stem, echo_stem, params=MetricsParams()):
    """Far-end single-talk frames: echo active while the near-end target is silent."""
    thr = 10 ** (params.activity_threshold_dbfs / 10)
    tgt = frame_energies(target_stem, params.win, params.hop)
    echo = frame_energies(echo_stem, params.win, params.hop)
    return (echo > thr) & (tgt <= thr)


def erle(mic, enhanced, fst_mask, params=MetricsParams()):
    """Echo return loss enhancement in dB over the flagged frames (capped at +80 dB)."""
    mic, enhanced = _check_lengths(mic, enhanced)
    fst_mask = np.asarray(fst_mask, dtype=bool)
    e_mic = frame_energies(mic, params.win, params.hop)
    if fst_mask.shape != e_mic.shape:
        raise ValueError(f"mask has {fst_mask.shape[0]} frames, signal has {e_mic.shape[0]}")
    if not fst_mask.any():
        raise ValueError("ERLE needs at least one far-end single-talk frame")
    e_enh = frame_energies(enhanced, params.win, params.hop)
    return _db(e_mic[fst_mask].sum(), e_enh[fst_mask].sum())


def tsos(target_ref, enhanced, params=MetricsParams()):
    """Fraction of target-active frames attenuated by at least the TSOS threshold."""
    ref, enhanced = _check_lengths(target_ref, enhanced)
    e_ref = frame_energies(ref, params.win, params.hop)
    e_enh = frame_energies(enhanced, params.win, params.hop)
    active = e_ref > 10 ** (params.activity_threshold_dbfs / 10)
    if not active.any():
        raise ValueError("target reference has no active frames")
    with np.errstate(divide="ignore"):
        atten = 10 * np.log10(e_ref[active]) - 10 * np.log10(e_enh[active])
    return float(np.mean(atten >= params.tsos_threshold_db))


def si_sdr(ref, est):
    """Scale-invariant SDR in dB, clipped to +/-80 dB."""
    ref, est = _check_lengths(ref, est)
    ref_energy = np.dot(ref, ref)
    if ref_energy == 0:
        raise ValueError("SI-SDR needs a nonzero reference")
    target = np.dot(est, ref) / ref_energy * ref
    residual = est - target
    return _db(np.dot(target, target), np.dot(residual, residual))


@dataclass
class SampleMetrics:
    id: str
    si_sdr_db: float
    tsos_rate: float | None = None
    erle_db: float | None = None
    mic_si_sdr_db: float | None = None


@dataclass
class MetricsReport:
    scenario: str
    path: str
    samples: list = field(default_factory=list)
    notes: list = field(default_factory=list)

    @property
    def sample_count(self):
        return len(self.samples)

    def aggregate(self):
        out = {}
        for key in ("erle_db", "tsos_rate", "si_sdr_db", "mic_si_sdr_db"):
            vals = [getattr(s, key) for s in self.samples if getattr(s, key) is not None]
            out[key] = float(np.mean(vals)) if vals else None
        return out

    def to_dict(self):
        return {
            "scenario": self.scenario,
            "path": self.path,
            "sample_count": self.sample_count,
            "aggregate": self.aggregate(),
            "samples": [asdict(s) for s in self.samples],
            "notes": list(self.notes),
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def table(self):
        agg = self.aggregate()
        cols = ("erle_db", "tsos_rate", "si_sdr_db", "mic_si_sdr_db")
        head = f"{'scenario':<10} {'n':>4} " + " ".join(f"{c:>14}" for c in cols)
        vals = " ".join(f"{'-' if agg[c] is None else format(agg[c], '.3f'):>14}" for c in cols)
        return head + "\n" + f"{self.scenario:<10} {self.sample_count:>4} " + vals


def evaluate(model, manifest, params=MetricsParams(), path="full", embedding_seed=0):
    """Run the streaming enhancer over a manifest and score every sample.

    ``manifest`` is a manifest file path or a list of ``MixtureSample``.
    ``model`` is a :class:`PseAecModel` or any callable
    ``f(mic, farend, embedding) -> enhanced`` (useful for identity or oracle
    baselines). ERLE is computed only for scenes with echo, over far-end
    single-talk frames found from the early-reverb target reference and the
    echo stem; TSOS only where the target has active frames.
    """
    from .embedding import embedding_for
    from .models import PseAecModel, enhance_streaming
    from .scene import read_manifest

    samples = read_manifest(manifest) if not isinstance(manifest, list) else manifest
    scenario = samples[0].scenario if samples else "empty"
    report = MetricsReport(scenario=scenario, path=path)
    is_net = isinstance(model, PseAecModel)
    if is_net and path == "bypass" and not model.has_bypass:
        raise ValueError(f"model {model.config.describe()} has no bypass path")
    if not any(s.spec.has_echo for s in samples):
        report.notes.append("erle skipped: no far-end echo in this set")

    for s in samples:
        if is_net:
            emb = embedding_for(s.spec.speaker_id, embedding_seed) if model.is_personalized else None
            out = enhance_streaming(model, [s.mic], [s.farend], emb, path=path)
        else:
            out = np.asarray(model(s.mic, s.farend, embedding_for(s.spec.speaker_id, embedding_seed)),
                             dtype=np.float64)
        m = SampleMetrics(id=s.id, si_sdr_db=si_sdr(s.target_ref, out),
                          mic_si_sdr_db=si_sdr(s.target_ref, s.mic))
        try:
            m.tsos_rate = tsos(s.target_ref, out, params)
        except ValueError:
            report.notes.append(f"{s.id}: tsos skipped, no active target frames")
        if s.spec.has_echo:
            mask = fst_frames(s.target_ref, s.stems["echo"], params)
            if mask.any():
                m.erle_db = erle(s.mic, out, mask, params)
            else:
                report.notes.append(f"{s.id}: erle skipped, no far-end single-talk frames")
        report.samples.append(m)
    return report
