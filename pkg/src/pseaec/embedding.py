"""Synthetic speaker embeddings standing in for a d-vector extractor.

Embeddings are seeded random unit vectors; externally computed ones can be
loaded from a text file with one ``id<TAB>v1 v2 ... v128`` line per speaker.
"""
import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

EMBEDDING_DIM = 128


@dataclass(frozen=True)
class SpeakerEmbedding:
    speaker_id: str
    vector: np.ndarray

    def __post_init__(self):
        if self.vector.shape != (EMBEDDING_DIM,):
            raise ValueError(f"embedding must have dimension {EMBEDDING_DIM}, got {self.vector.shape}")


def _normalize(v):
    v = np.asarray(v, dtype=np.float64)
    norm = np.linalg.norm(v)
    if not np.isfinite(norm) or norm == 0:
        raise ValueError("cannot normalise a zero or non-finite embedding")
    return v / norm


def embedding_for(speaker_id, seed=0):
    if not speaker_id:
        raise ValueError("speaker id must be nonempty")
    key = int.from_bytes(hashlib.sha256(speaker_id.encode()).digest()[:8], "little")
    rng = np.random.default_rng(np.random.SeedSequence([key, seed]))
    return SpeakerEmbedding(speaker_id, _normalize(rng.standard_normal(EMBEDDING_DIM)))


def load_embeddings(path):
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                sid, values = line.rstrip("\n").split("\t")
                vec = np.array([float(v) for v in values.split()])
            except ValueError as e:
                raise ValueError(f"{path}:{lineno}: malformed embedding line") from e
            if vec.shape != (EMBEDDING_DIM,):
                raise ValueError(f"{path}:{lineno}: expected {EMBEDDING_DIM} values, got {vec.size}")
            if sid in out:
                raise ValueError(f"{path}:{lineno}: duplicate speaker id {sid!r}")
            out[sid] = SpeakerEmbedding(sid, _normalize(vec))
    return out


def save_embeddings(embeddings, path):
    lines = []
    for sid, emb in embeddings.items():
        lines.append(sid + "\t" + " ".join(repr(float(v)) for v in emb.vector))
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))
