import json
from dataclasses import asdict, dataclass, fields, replace

from ..embedding import EMBEDDING_DIM

VARIANTS = ("e3net", "vfl")
TASKS = ("aec", "pse", "pse_aec")
ABLATIONS = ("naive", "no_sc", "sc")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters for both model families.

    ``ablation`` only applies to ``task="pse_aec"``; leave it ``None`` for
    the single-task models (it defaults to ``"sc"`` for pse_aec).
    """
    variant: str = "e3net"
    task: str = "pse_aec"
    ablation: str | None = None
    F_mic: int = 2048
    F_far: int = 256
    f_emb: int = 128
    f_emb_hid: int = 768
    N1: int = 2
    N2: int = 2
    vfl_hidden: int = 512
    win: int = 320
    hop: int = 160
    align_window: int = 100
    align_dim: int = 64
    compress_p: float = 0.3

    def __post_init__(self):
        if self.task == "pse_aec" and self.ablation is None:
            object.__setattr__(self, "ablation", "sc")
        self.validate()

    def validate(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.task == "pse_aec":
            if self.ablation not in ABLATIONS:
                raise ValueError(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")
        elif self.ablation is not None:
            raise ValueError(f"ablation only applies to pse_aec models, not {self.task}")
        for name in ("F_mic", "F_far", "f_emb", "f_emb_hid", "vfl_hidden", "win", "hop",
                     "align_window", "align_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.N1 < 1 or self.N2 < 1:
            raise ValueError("N1 and N2 must both be >= 1")
        if self.hop > self.win:
            raise ValueError("hop must not exceed win")
        if self.variant == "vfl" and self.win != 2 * self.hop:
            raise ValueError("the STFT model needs hop == win / 2 for perfect reconstruction")
        if not 0 < self.compress_p <= 1:
            raise ValueError("compress_p must be in (0, 1]")

    @property
    def emb_dim(self):
        return EMBEDDING_DIM

    @property
    def is_personalized(self):
        return self.task in ("pse", "pse_aec")

    @property
    def has_far(self):
        return self.task in ("aec", "pse_aec")

    @property
    def is_naive(self):
        return self.ablation == "naive"

    @property
    def has_align(self):
        return self.has_far and not self.is_naive

    @property
    def has_bypass(self):
        return self.task == "pse_aec" and not self.is_naive

    @property
    def has_attention_skip(self):
        # the AEC-only model keeps the skip connection of the full joint model
        return self.ablation == "sc" or self.task == "aec"

    def describe(self):
        parts = [self.variant, self.task] + ([self.ablation] if self.ablation else [])
        return "/".join(parts)

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **kw):
        return replace(self, **kw)


def tiny_config(**kw):
    """The desk-scale overfit configuration."""
    base = dict(F_mic=64, F_far=16, f_emb=16, f_emb_hid=48, N1=1, N2=1, align_window=32,
                align_dim=16)
    base.update(kw)
    return ModelConfig(**base)
